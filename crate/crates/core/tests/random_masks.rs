use attngen::model::select_random_indices;
use attngen::rng::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn random_masks_cover_positions_uniformly() {
    let (len, rows) = (20, 4000);
    let mut rng = Rng::seed_from_u64(5);
    let plan = select_random_indices(rows, len, 0.25, &mut rng).unwrap();
    let mut counts = vec![0usize; len];
    for idx in &plan.indices {
        assert_eq!(idx.len(), 5);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        for &i in idx {
            counts[i] += 1;
        }
    }
    let expected = (rows * 5) as f64 / len as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((len - 1) as f64).unwrap().cdf(stat);
    assert!(p > 1e-3, "chi-square {stat:.1}, p = {p:.2e}");
}
