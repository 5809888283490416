use crate::error::{Error, Result};
use crate::rng::Rng;

use super::kernels::{axpy, dot, gemm_acc, sum, View};
use super::{Mode, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding applied on each side of the sequence axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn symmetric(p: usize) -> Self {
        Padding { left: p, right: p }
    }

    /// Output length equals input length: `(K-1)/2` on the left, the rest on the right.
    pub fn same(kernel: usize) -> Self {
        let total = kernel.saturating_sub(1);
        let left = total / 2;
        Padding {
            left,
            right: total - left,
        }
    }
}

/// Per-channel statistics of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Embedding {
        table: Var,
        rows: Vec<usize>,
    },
    SwapLast2 {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        pad: Padding,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Softmax {
        input: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiv {
        p: Var,
        q: Var,
        p_prob: Vec<T>,
        q_prob: Vec<T>,
        log_ratio: Vec<T>,
        rows: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Shape(format!("{what}: expected rank 3, got {shape:?}"))),
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Shape(format!("{what}: expected rank 2, got {shape:?}"))),
    }
}

fn grad_buf<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn log_softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for &v in row {
            s += (v - m).exp();
        }
        let lse = m + s.ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        let mut value = value;
        value.requires_grad = needs_grad;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are accumulated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, &[])
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    ///
    /// Leaves hold the sum over all `backward` calls; intermediate nodes hold
    /// the adjoint from the most recent call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_leaf(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[1]))
    }

    /// Output `[B, L, d]`: row `tokens[b*L + i]` of `table`.
    pub fn embedding<I>(&mut self, table: Var, tokens: &[I], batch: usize) -> Result<Var>
    where
        I: Copy + Into<i64>,
    {
        let (vocab, d) = dims2(self.shape(table), "embedding table")?;
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Shape(format!(
                "embedding: {} tokens do not split into {batch} rows",
                tokens.len()
            )));
        }
        let len = tokens.len() / batch;
        let mut rows = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let t: i64 = t.into();
            if t < 0 || t as u64 >= vocab as u64 {
                return Err(Error::IndexOutOfRange {
                    index: t,
                    bound: vocab,
                });
            }
            rows.push(t as usize);
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(&[batch, len, d], out)?;
        Ok(self.push(value, Op::Embedding { table, rows }, &[table]))
    }

    /// Swaps the two innermost axes: `[.., n, m] -> [.., m, n]`.
    pub fn swap_last2(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("swap_last2 needs rank >= 2, got {shape:?}")));
        }
        let r = shape.len();
        let (n, m) = (shape[r - 2], shape[r - 1]);
        let src = self.data(input);
        let mut out = vec![T::zero(); src.len()];
        for (s, d) in src.chunks_exact(n * m).zip(out.chunks_exact_mut(n * m)) {
            for i in 0..n {
                for j in 0..m {
                    d[j * n + i] = s[i * m + j];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        let value = Tensor::new(&new_shape, out)?;
        Ok(self.push(value, Op::SwapLast2 { input }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.data(input).to_vec())?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// Stride-1 cross-correlation over `[B, C_in, L]` with a `[C_out, C_in, K]` kernel.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, pad: Padding) -> Result<Var> {
        let (b, ci, l) = dims3(self.shape(input), "conv1d input")?;
        let (co, kci, k) = dims3(self.shape(kernel), "conv1d kernel")?;
        if kci != ci {
            return Err(Error::Shape(format!(
                "conv1d: input has {ci} channels, kernel expects {kci}"
            )));
        }
        if self.shape(bias) != [co] {
            return Err(Error::Shape(format!(
                "conv1d: bias shape {:?}, expected [{co}]",
                self.shape(bias)
            )));
        }
        let padded = l + pad.left + pad.right;
        if k > padded {
            return Err(Error::Shape(format!(
                "conv1d: kernel {k} longer than padded input {padded}"
            )));
        }
        let lo = padded - k + 1;
        let x = self.data(input);
        let w = self.data(kernel);
        let bs = self.data(bias);
        let mut out = vec![T::zero(); b * co * lo];
        let mut xp = vec![T::zero(); ci * padded];
        for bi in 0..b {
            pad_rows(&mut xp, &x[bi * ci * l..][..ci * l], l, pad.left, padded);
            let ob = &mut out[bi * co * lo..][..co * lo];
            for (row, &bv) in ob.chunks_exact_mut(lo).zip(bs) {
                row.fill(bv);
            }
            // One product per tap: out += W[:, :, kk] * xpad[:, kk..kk + lo].
            for kk in 0..k {
                gemm_acc(
                    co,
                    ci,
                    lo,
                    w,
                    View { off: kk, rs: ci * k, cs: k },
                    &xp,
                    View::rows(kk, padded),
                    ob,
                    View::rows(0, lo),
                );
            }
        }
        let value = Tensor::new(&[b, co, lo], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                kernel,
                bias,
                pad,
            },
            &[input, kernel, bias],
        ))
    }

    /// Window maximum over the last axis; gradient goes to the first maximum.
    pub fn maxpool1d(&mut self, input: Var, width: usize, stride: usize) -> Result<Var> {
        let (b, c, l) = dims3(self.shape(input), "maxpool1d input")?;
        if width == 0 || stride == 0 {
            return Err(Error::Config("maxpool1d: width and stride must be >= 1".into()));
        }
        if width > l {
            return Err(Error::Shape(format!("maxpool1d: window {width} longer than input {l}")));
        }
        let lo = (l - width) / stride + 1;
        let x = self.data(input);
        let mut out = Vec::with_capacity(b * c * lo);
        let mut argmax = Vec::with_capacity(b * c * lo);
        for row in 0..b * c {
            let base = row * l;
            for t in 0..lo {
                let start = base + t * stride;
                let mut best = start;
                for j in start + 1..start + width {
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(&[b, c, lo], out)?;
        Ok(self.push(value, Op::MaxPool1d { input, argmax }, &[input]))
    }

    /// Batch normalization over `[B, C, L]` per channel.
    ///
    /// Train mode normalizes with the population statistics of this batch and
    /// returns them so the caller can update running estimates. Eval mode uses
    /// `running`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &BatchStats<T>,
        mode: Mode,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (b, c, l) = dims3(self.shape(input), "batch_norm input")?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm: {what} shape {:?}, expected [{c}]",
                    self.shape(v)
                )));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::Shape(format!("batch_norm: running stats need {c} channels")));
        }
        let n = b * l;
        if mode == Mode::Train && n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let x = self.data(input);
        let (mean, var) = match mode {
            Mode::Train => {
                let nf = T::from_usize(n).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s += sum(&x[(bi * c + ch) * l..][..l]);
                    }
                    let m = s / nf;
                    let mut q = T::zero();
                    for bi in 0..b {
                        for &v in &x[(bi * c + ch) * l..][..l] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / nf;
                }
                (mean, var)
            }
            Mode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let be = self.data(beta);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * l;
                for t in off..off + l {
                    let h = (x[t] - mean[ch]) * inv_std[ch];
                    xhat[t] = h;
                    out[t] = g[ch] * h + be[ch];
                }
            }
        }
        let value = Tensor::new(&[b, c, l], out)?;
        let train = mode == Mode::Train;
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        );
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    /// `input [B, F_in] x weight[F_out, F_in]^T + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, fi) = dims2(self.shape(input), "linear input")?;
        let (fo, wi) = dims2(self.shape(weight), "linear weight")?;
        if wi != fi {
            return Err(Error::Shape(format!(
                "linear: input width {fi} does not match weight width {wi}"
            )));
        }
        if self.shape(bias) != [fo] {
            return Err(Error::Shape(format!(
                "linear: bias shape {:?}, expected [{fo}]",
                self.shape(bias)
            )));
        }
        let x = self.data(input);
        let w = self.data(weight);
        let bs = self.data(bias);
        let mut out = Vec::with_capacity(b * fo);
        for row in x.chunks_exact(fi) {
            for o in 0..fo {
                out.push(bs[o] + dot(row, &w[o * fi..(o + 1) * fi]));
            }
        }
        let value = Tensor::new(&[b, fo], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Relu { input }, &[input])
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, input: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(input);
        }
        let scale = T::lit(1.0 / (1.0 - p));
        let t = self.value(input);
        let mask: Vec<T> = (0..t.numel())
            .map(|_| if rng.next_f64() < p { T::zero() } else { scale })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.push(value, Op::Dropout { input, mask }, &[input]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data(input);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in 0..n {
                    let e = (x[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    out[idx(j)] /= s;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                input,
                outer,
                axis: n,
                inner,
            },
            &[input],
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = dims2(self.shape(logits), "cross_entropy logits")?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::IndexOutOfRange {
                index: bad as i64,
                bound: c,
            });
        }
        let logp = log_softmax_rows(self.data(logits), c);
        let mut total = T::zero();
        for (row, &y) in logp.chunks_exact(c).zip(labels) {
            total -= row[y];
        }
        let loss = total / T::from_usize(b).unwrap();
        let probs = logp.iter().map(|v| v.exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over the batch of `KL(softmax(p) || softmax(q))`, evaluated in log space.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (b, c) = dims2(self.shape(p), "kl_divergence p")?;
        if self.shape(q) != [b, c] {
            return Err(Error::Shape(format!(
                "kl_divergence: shapes {:?} and {:?} differ",
                self.shape(p),
                self.shape(q)
            )));
        }
        let logp = log_softmax_rows(self.data(p), c);
        let logq = log_softmax_rows(self.data(q), c);
        let p_prob: Vec<T> = logp.iter().map(|v| v.exp()).collect();
        let q_prob: Vec<T> = logq.iter().map(|v| v.exp()).collect();
        let log_ratio: Vec<T> = logp.iter().zip(&logq).map(|(&a, &b)| a - b).collect();
        let rows: Vec<T> = p_prob
            .chunks_exact(c)
            .zip(log_ratio.chunks_exact(c))
            .map(|(pr, lr)| pr.iter().zip(lr).fold(T::zero(), |s, (&a, &b)| s + a * b))
            .collect();
        let mut total = T::zero();
        for &r in &rows {
            total += r;
        }
        let kl = total / T::from_usize(b).unwrap();
        Ok(self.push(
            Tensor::scalar(kl),
            Op::KlDiv {
                p,
                q,
                p_prob,
                q_prob,
                log_ratio,
                rows,
            },
            &[p, q],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let mut s = T::zero();
        for &v in self.data(input) {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj)?;
            let node = &mut self.nodes[id];
            match node.op {
                Op::Leaf => node.value.accumulate_grad(&g),
                _ => node.value.grad = Some(g),
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn propagate(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Embedding { table, rows } => {
                if self.needs(*table) {
                    let d = self.shape(*table)[1];
                    let buf = grad_buf(adj, *table, self.numel(*table));
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut buf[r * d..(r + 1) * d];
                        for (a, &b) in dst.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::SwapLast2 { input } => {
                if self.needs(*input) {
                    let s = self.shape(*input);
                    let r = s.len();
                    let (n, m) = (s[r - 2], s[r - 1]);
                    let buf = grad_buf(adj, *input, self.numel(*input));
                    for (src, dst) in g.chunks_exact(n * m).zip(buf.chunks_exact_mut(n * m)) {
                        for i in 0..n {
                            for j in 0..m {
                                dst[i * m + j] += src[j * n + i];
                            }
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if self.needs(*input) {
                    let buf = grad_buf(adj, *input, g.len());
                    buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                pad,
            } => self.conv1d_backward(*input, *kernel, *bias, *pad, g, adj),
            Op::MaxPool1d { input, argmax } => {
                if self.needs(*input) {
                    let buf = grad_buf(adj, *input, self.numel(*input));
                    for (&j, &gv) in argmax.iter().zip(g) {
                        buf[j] += gv;
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (b, c, l) = dims3(self.shape(*input), "batch_norm")?;
                let n = b * l;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * l;
                        sum_g[ch] += sum(&g[off..off + l]);
                        sum_gx[ch] += dot(&g[off..off + l], &xhat[off..off + l]);
                    }
                }
                if self.needs(*gamma) {
                    let buf = grad_buf(adj, *gamma, c);
                    buf.iter_mut().zip(&sum_gx).for_each(|(a, &v)| *a += v);
                }
                if self.needs(*beta) {
                    let buf = grad_buf(adj, *beta, c);
                    buf.iter_mut().zip(&sum_g).for_each(|(a, &v)| *a += v);
                }
                if self.needs(*input) {
                    let gam = self.data(*gamma).to_vec();
                    let nf = T::from_usize(n).unwrap();
                    let buf = grad_buf(adj, *input, b * c * l);
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * l;
                            let k = gam[ch] * inv_std[ch];
                            for t in off..off + l {
                                buf[t] += if *train {
                                    k / nf * (nf * g[t] - sum_g[ch] - xhat[t] * sum_gx[ch])
                                } else {
                                    k * g[t]
                                };
                            }
                        }
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (b, fi) = dims2(self.shape(*input), "linear")?;
                let fo = self.shape(*weight)[0];
                if self.needs(*input) {
                    let w = self.data(*weight);
                    let buf = grad_buf(adj, *input, b * fi);
                    for bi in 0..b {
                        let dst = &mut buf[bi * fi..(bi + 1) * fi];
                        for o in 0..fo {
                            axpy(dst, g[bi * fo + o], &w[o * fi..(o + 1) * fi]);
                        }
                    }
                }
                if self.needs(*weight) {
                    let x = self.data(*input);
                    let buf = grad_buf(adj, *weight, fo * fi);
                    for bi in 0..b {
                        let row = &x[bi * fi..(bi + 1) * fi];
                        for o in 0..fo {
                            axpy(&mut buf[o * fi..(o + 1) * fi], g[bi * fo + o], row);
                        }
                    }
                }
                if self.needs(*bias) {
                    let buf = grad_buf(adj, *bias, fo);
                    for bi in 0..b {
                        for o in 0..fo {
                            buf[o] += g[bi * fo + o];
                        }
                    }
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.data(*input);
                    let buf = grad_buf(adj, *input, x.len());
                    for ((a, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *a += gv;
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if self.needs(*input) {
                    let buf = grad_buf(adj, *input, mask.len());
                    for ((a, &gv), &m) in buf.iter_mut().zip(g).zip(mask) {
                        *a += gv * m;
                    }
                }
            }
            Op::Softmax {
                input,
                outer,
                axis,
                inner,
            } => {
                if self.needs(*input) {
                    let y = node.value.data();
                    let buf = grad_buf(adj, *input, y.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * axis + j) * inner + i;
                            let mut s = T::zero();
                            for j in 0..*axis {
                                s += g[idx(j)] * y[idx(j)];
                            }
                            for j in 0..*axis {
                                buf[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let c = self.shape(*logits)[1];
                    let k = g[0] / T::from_usize(labels.len()).unwrap();
                    let buf = grad_buf(adj, *logits, probs.len());
                    for (bi, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            buf[bi * c + j] += k * (probs[bi * c + j] - onehot);
                        }
                    }
                }
            }
            Op::KlDiv {
                p,
                q,
                p_prob,
                q_prob,
                log_ratio,
                rows,
            } => {
                let c = self.shape(*p)[1];
                let k = g[0] / T::from_usize(rows.len()).unwrap();
                if self.needs(*p) {
                    let buf = grad_buf(adj, *p, p_prob.len());
                    for (bi, &kl) in rows.iter().enumerate() {
                        for j in bi * c..(bi + 1) * c {
                            buf[j] += k * p_prob[j] * (log_ratio[j] - kl);
                        }
                    }
                }
                if self.needs(*q) {
                    let buf = grad_buf(adj, *q, q_prob.len());
                    for j in 0..q_prob.len() {
                        buf[j] += k * (q_prob[j] - p_prob[j]);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        let buf = grad_buf(adj, v, g.len());
                        buf.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(v) {
                        let o = self.data(other).to_vec();
                        let buf = grad_buf(adj, v, g.len());
                        for ((x, &gv), &ov) in buf.iter_mut().zip(g).zip(&o) {
                            *x += gv * ov;
                        }
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(*input) {
                    let buf = grad_buf(adj, *input, g.len());
                    buf.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *factor);
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let n = self.numel(*input);
                    let buf = grad_buf(adj, *input, n);
                    buf.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
        Ok(())
    }

    fn conv1d_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        pad: Padding,
        g: &[T],
        adj: &mut [Option<Vec<T>>],
    ) {
        let (b, ci, l) = (self.shape(input)[0], self.shape(input)[1], self.shape(input)[2]);
        let (co, k) = (self.shape(kernel)[0], self.shape(kernel)[2]);
        let lo = l + pad.left + pad.right - k + 1;
        if self.needs(bias) {
            let buf = grad_buf(adj, bias, co);
            for bi in 0..b {
                for o in 0..co {
                    buf[o] += sum(&g[(bi * co + o) * lo..][..lo]);
                }
            }
        }
        let x = self.data(input);
        let w = self.data(kernel);
        let padded = l + pad.left + pad.right;
        let mut xp = vec![T::zero(); ci * padded];
        let mut dxp = vec![T::zero(); ci * padded];
        let (need_k, need_x) = (self.needs(kernel), self.needs(input));
        let mut kbuf = need_k.then(|| adj[kernel.0].take().unwrap_or_else(|| vec![T::zero(); co * ci * k]));
        let mut xbuf = need_x.then(|| adj[input.0].take().unwrap_or_else(|| vec![T::zero(); b * ci * l]));
        for bi in 0..b {
            let gb = &g[bi * co * lo..][..co * lo];
            if let Some(kb) = kbuf.as_mut() {
                pad_rows(&mut xp, &x[bi * ci * l..][..ci * l], l, pad.left, padded);
                // dW[:, :, kk] += G * xpad[:, kk..kk + lo]^T
                for kk in 0..k {
                    gemm_acc(
                        co,
                        lo,
                        ci,
                        gb,
                        View::rows(0, lo),
                        &xp,
                        View { off: kk, rs: 1, cs: padded },
                        kb,
                        View { off: kk, rs: ci * k, cs: k },
                    );
                }
            }
            if let Some(xb) = xbuf.as_mut() {
                dxp.fill(T::zero());
                // dxpad[:, kk..kk + lo] += W[:, :, kk]^T * G
                for kk in 0..k {
                    gemm_acc(
                        ci,
                        co,
                        lo,
                        w,
                        View { off: kk, rs: k, cs: ci * k },
                        gb,
                        View::rows(0, lo),
                        &mut dxp,
                        View::rows(kk, padded),
                    );
                }
                let dst = &mut xb[bi * ci * l..][..ci * l];
                for (d, src) in dst.chunks_exact_mut(l).zip(dxp.chunks_exact(padded)) {
                    for (a, &v) in d.iter_mut().zip(&src[pad.left..pad.left + l]) {
                        *a += v;
                    }
                }
            }
        }
        if let Some(kb) = kbuf {
            adj[kernel.0] = Some(kb);
        }
        if let Some(xb) = xbuf {
            adj[input.0] = Some(xb);
        }
    }
}

/// Copies `[C, L]` rows into `[C, padded]` rows starting at column `left`,
/// leaving the margins zero.
fn pad_rows<T: Real>(dst: &mut [T], src: &[T], l: usize, left: usize, padded: usize) {
    for (d, s) in dst.chunks_exact_mut(padded).zip(src.chunks_exact(l)) {
        d[left..left + l].copy_from_slice(s);
    }
}
