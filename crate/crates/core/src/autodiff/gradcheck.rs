use crate::error::Result;

use super::{Graph, Real, Tensor, Var};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error<T: Real>(a: T, b: T) -> T {
    let denom = a.abs().max(b.abs()).max(T::lit(1e-8));
    (a - b).abs() / denom
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` at the listed coordinates.
pub fn central_differences<T, F>(mut f: F, x: &[T], h: T, coords: &[usize]) -> Vec<T>
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (h + h)
        })
        .collect()
}

/// Largest relative error between the backward-pass gradient of a scalar
/// function and central differences, over every coordinate of `point`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, h: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, h, &coords)
}

pub fn grad_check_coords<T, F>(f: F, point: &Tensor<T>, h: T, coords: &[usize]) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); point.numel()]);

    let mut err = None;
    let numeric = central_differences(
        |v| {
            let mut g = Graph::new();
            let t = Tensor::new(point.shape(), v.to_vec()).expect("same shape");
            let x = g.param(t);
            match f(&mut g, x) {
                Ok(y) => g.data(y)[0],
                Err(e) => {
                    err.get_or_insert(e);
                    T::nan()
                }
            }
        },
        point.data(),
        h,
        coords,
    );
    if let Some(e) = err {
        return Err(e);
    }
    Ok(coords
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| relative_error(analytic[i], n))
        .fold(T::zero(), T::max))
}
