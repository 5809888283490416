//! The convolutional classifier, its forward-pass attention map, mask
//! selection and the masked-consistency objective.

use crate::autodiff::{BatchStats, Graph, Mode, ParamSet, Parameter, Padding, Real, Tensor, Var};
use crate::dataio::{Batch, PAD, VOCAB};
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGenConfig {
    pub seq_len: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    /// Output channels of each convolution block.
    pub channels: Vec<usize>,
    pub pool_width: usize,
    pub pool_stride: usize,
    pub dropout: f64,
    pub fc_hidden: usize,
    pub classes: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for AttnGenConfig {
    fn default() -> Self {
        AttnGenConfig {
            seq_len: 200,
            vocab: VOCAB,
            embed_dim: 128,
            kernel: 8,
            channels: vec![32, 16, 4],
            pool_width: 2,
            pool_stride: 2,
            dropout: 0.3,
            fc_hidden: 64,
            classes: 2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl AttnGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 || self.embed_dim == 0 || self.kernel == 0 || self.fc_hidden == 0 {
            return bad("seq_len, embed_dim, kernel and fc_hidden must be >= 1".into());
        }
        if self.vocab < 2 {
            return bad(format!("vocab {} too small", self.vocab));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("invalid channel list {:?}", self.channels));
        }
        if self.pool_width == 0 || self.pool_stride == 0 {
            return bad("pool width and stride must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let factor = self.pool_stride.pow(self.channels.len() as u32);
        if self.seq_len % factor != 0 {
            return bad(format!(
                "seq_len {} must be divisible by pool_stride^{} = {factor}",
                self.seq_len,
                self.channels.len()
            ));
        }
        let mut len = self.seq_len;
        for _ in &self.channels {
            if len < self.pool_width {
                return bad(format!("sequence shrinks below the pooling window ({len})"));
            }
            len = (len - self.pool_width) / self.pool_stride + 1;
        }
        Ok(())
    }

    /// Sequence length entering each block, followed by the final length.
    pub fn stage_lengths(&self) -> Vec<usize> {
        let mut out = vec![self.seq_len];
        let mut len = self.seq_len;
        for _ in &self.channels {
            len = (len - self.pool_width) / self.pool_stride + 1;
            out.push(len);
        }
        out
    }

    pub fn flatten_width(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) * self.stage_lengths().last().copied().unwrap_or(0)
    }

    /// Number of masked positions for ratio `alpha`.
    pub fn mask_count(&self, alpha: f64) -> usize {
        mask_count(alpha, self.seq_len)
    }
}

/// `floor(alpha * len)`, with a 1e-9 guard so decimal ratios such as 0.29
/// are not rounded down by representation error.
pub fn mask_count(alpha: f64, len: usize) -> usize {
    ((alpha * len as f64 + 1e-9).floor() as usize).min(len)
}

/// Model parameters plus batch-normalization running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGen<T> {
    pub config: AttnGenConfig,
    pub params: ParamSet<T>,
    pub running: Vec<BatchStats<T>>,
}

/// Parameters recorded as leaves of one graph, in [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Embedding activation `[B, L, d]`.
    pub embedding: Var,
    pub attention: AttentionMap<T>,
    /// Per-block batch statistics (train mode only).
    pub batch_stats: Vec<BatchStats<T>>,
}

/// Raw per-position scores and their softmax over the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    pub batch: usize,
    pub len: usize,
    pub scores: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> AttentionMap<T> {
    pub fn row(&self, b: usize) -> &[T] {
        &self.weights[b * self.len..(b + 1) * self.len]
    }
}

/// Per-sequence positions to overwrite with the pad token.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub alpha: f64,
    pub k: usize,
    /// Sorted ascending, one list per sequence.
    pub indices: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    /// The `k` positions with the smallest attention weights.
    Attention,
    /// `k` positions drawn uniformly without replacement.
    Random,
}

fn uniform_tensor<T: Real>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.uniform(-bound, bound))).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Builds a freshly initialized model. Conv and linear weights are uniform in
/// `±sqrt(6 / fan_in)`, embeddings uniform in `±0.1`, biases zero, norm
/// scale one and shift zero.
pub fn init_model<T: Real>(config: &AttnGenConfig, seed: u64) -> Result<AttnGen<T>> {
    config.validate()?;
    let mut rng = Rng::derive(seed, streams::INIT);
    let mut params = ParamSet::new();
    let d = config.embed_dim;
    params.push(Parameter::new(
        "embedding.weight",
        uniform_tensor(&mut rng, &[config.vocab, d], 0.1),
        true,
    ))?;
    let mut c_in = d;
    let mut running = Vec::new();
    for (i, &c_out) in config.channels.iter().enumerate() {
        let n = i + 1;
        let fan_in = c_in * config.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        params.push(Parameter::new(
            format!("conv{n}.weight"),
            uniform_tensor(&mut rng, &[c_out, c_in, config.kernel], bound),
            true,
        ))?;
        params.push(Parameter::new(format!("conv{n}.bias"), Tensor::zeros(&[c_out]), false))?;
        let ones = Tensor::new(&[c_out], vec![T::one(); c_out])?;
        params.push(Parameter::new(format!("bn{n}.weight"), ones, false))?;
        params.push(Parameter::new(format!("bn{n}.bias"), Tensor::zeros(&[c_out]), false))?;
        running.push(BatchStats {
            mean: vec![T::zero(); c_out],
            var: vec![T::one(); c_out],
        });
        c_in = c_out;
    }
    let flat = config.flatten_width();
    for (name, fan_in, fan_out) in [
        ("fc1", flat, config.fc_hidden),
        ("fc2", config.fc_hidden, config.classes),
    ] {
        let bound = (6.0 / fan_in as f64).sqrt();
        params.push(Parameter::new(
            format!("{name}.weight"),
            uniform_tensor(&mut rng, &[fan_out, fan_in], bound),
            true,
        ))?;
        params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false))?;
    }
    Ok(AttnGen {
        config: config.clone(),
        params,
        running,
    })
}

/// Mean over the feature axis of a `[B, L, d]` embedding.
pub fn attention_scores<T: Real>(embedding: &[T], batch: usize, len: usize, d: usize) -> Vec<T> {
    debug_assert_eq!(embedding.len(), batch * len * d);
    let df = T::from_usize(d).unwrap();
    embedding
        .chunks_exact(d)
        .map(|v| {
            let mut s = T::zero();
            for &x in v {
                s += x;
            }
            s / df
        })
        .collect()
}

/// Row-wise softmax of the scores over the sequence axis.
pub fn attention_weights<T: Real>(scores: Vec<T>, batch: usize, len: usize) -> AttentionMap<T> {
    let mut weights = vec![T::zero(); scores.len()];
    for (row, out) in scores.chunks_exact(len).zip(weights.chunks_exact_mut(len)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &x) in out.iter_mut().zip(row) {
            *o = (x - m).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }
    AttentionMap {
        batch,
        len,
        scores,
        weights,
    }
}

/// The `floor(alpha * L)` lowest-weight positions of each row; equal weights
/// resolve to the lower position.
pub fn select_mask_indices<T: Real>(map: &AttentionMap<T>, alpha: f64) -> Result<MaskPlan> {
    check_alpha(alpha)?;
    let k = mask_count(alpha, map.len);
    let indices = (0..map.batch)
        .map(|b| {
            let row = map.row(b);
            let mut order: Vec<usize> = (0..map.len).collect();
            order.sort_by(|&i, &j| row[i].partial_cmp(&row[j]).unwrap_or(std::cmp::Ordering::Equal));
            let mut chosen = order[..k].to_vec();
            chosen.sort_unstable();
            chosen
        })
        .collect();
    Ok(MaskPlan {
        alpha,
        k,
        indices,
    })
}

/// `floor(alpha * L)` positions per row drawn uniformly without replacement.
pub fn select_random_indices(batch: usize, len: usize, alpha: f64, rng: &mut Rng) -> Result<MaskPlan> {
    check_alpha(alpha)?;
    let k = mask_count(alpha, len);
    let indices = (0..batch)
        .map(|_| {
            let mut pool: Vec<usize> = (0..len).collect();
            for i in 0..k {
                let j = i + rng.below((len - i) as u64) as usize;
                pool.swap(i, j);
            }
            let mut chosen = pool[..k].to_vec();
            chosen.sort_unstable();
            chosen
        })
        .collect();
    Ok(MaskPlan {
        alpha,
        k,
        indices,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("masking ratio {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Copy of `tokens` (`B` rows of `len`) with planned positions set to pad.
pub fn apply_mask(tokens: &[u8], len: usize, plan: &MaskPlan) -> Vec<u8> {
    let mut out = tokens.to_vec();
    for (row, idx) in out.chunks_exact_mut(len).zip(&plan.indices) {
        for &i in idx {
            row[i] = PAD;
        }
    }
    out
}

impl<T: Real> AttnGen<T> {
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.param(p.tensor.clone())).collect(),
        }
    }

    /// Binds the embedding table as a trainable leaf and everything else as
    /// constants, so a backward pass only reaches the input side.
    pub fn bind_for_saliency(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if i == 0 {
                        g.param(p.tensor.clone())
                    } else {
                        g.constant(p.tensor.clone())
                    }
                })
                .collect(),
        }
    }

    /// Attention map for a token block, read straight from the embedding
    /// table.
    pub fn attention_map(&self, tokens: &[u8], batch: usize) -> Result<AttentionMap<T>> {
        let (l, d) = (self.config.seq_len, self.config.embed_dim);
        if batch == 0 || tokens.len() != batch * l {
            return Err(Error::Shape(format!(
                "expected {batch} sequences of length {l}, got {} tokens",
                tokens.len()
            )));
        }
        let table = self.params.by_index(0).tensor.data();
        let mut emb = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            let t = t as usize;
            if t >= self.config.vocab {
                return Err(Error::IndexOutOfRange {
                    index: t as i64,
                    bound: self.config.vocab,
                });
            }
            emb.extend_from_slice(&table[t * d..(t + 1) * d]);
        }
        Ok(attention_weights(attention_scores(&emb, batch, l, d), batch, l))
    }

    /// Adds the graph gradients of the bound leaves into the parameters.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(grad) = g.grad(v) {
                p.tensor.accumulate_grad(grad);
            }
        }
    }

    /// Folds per-block batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &[BatchStats<T>]) {
        let mom = T::lit(self.config.bn_momentum);
        let keep = T::one() - mom;
        for (run, batch) in self.running.iter_mut().zip(stats) {
            for (r, &b) in run.mean.iter_mut().zip(&batch.mean) {
                *r = keep * *r + mom * b;
            }
            for (r, &b) in run.var.iter_mut().zip(&batch.var) {
                *r = keep * *r + mom * b;
            }
        }
    }

    /// Embedding, attention map from the embedding, three
    /// conv/norm/ReLU/pool blocks, then a two-layer head with dropout.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        tokens: &[u8],
        batch: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let l = cfg.seq_len;
        if batch == 0 || tokens.len() != batch * l {
            return Err(Error::Shape(format!(
                "expected {batch} sequences of length {l}, got {} tokens",
                tokens.len()
            )));
        }
        let v = &bound.vars;
        let embedding = g.embedding(v[0], tokens, batch)?;
        let scores = attention_scores(g.data(embedding), batch, l, cfg.embed_dim);
        let attention = attention_weights(scores, batch, l);

        let mut h = g.swap_last2(embedding)?;
        let pad = Padding::same(cfg.kernel);
        let eps = T::lit(cfg.bn_eps);
        let mut batch_stats = Vec::new();
        for (i, running) in self.running.iter().enumerate() {
            let base = 1 + 4 * i;
            h = g.conv1d(h, v[base], v[base + 1], pad)?;
            let (y, stats) = g.batch_norm(h, v[base + 2], v[base + 3], running, mode, eps)?;
            batch_stats.extend(stats);
            h = g.relu(y);
            h = g.maxpool1d(h, cfg.pool_width, cfg.pool_stride)?;
        }
        let head = 1 + 4 * self.running.len();
        h = g.reshape(h, &[batch, cfg.flatten_width()])?;
        h = g.linear(h, v[head], v[head + 1])?;
        h = g.relu(h);
        h = g.dropout(h, cfg.dropout, mode, rng)?;
        let logits = g.linear(h, v[head + 2], v[head + 3])?;
        Ok(ForwardOutput {
            logits,
            embedding,
            attention,
            batch_stats,
        })
    }

    /// Eval-mode logits for a token block, without recording gradients.
    pub fn predict_logits(&self, tokens: &[u8], batch: usize) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let bound = Bound {
            vars: self.params.iter().map(|p| g.constant(p.tensor.clone())).collect(),
        };
        let mut rng = Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &bound, tokens, batch, Mode::Eval, &mut rng)?;
        Ok(g.data(out.logits).to_vec())
    }
}

/// Masked-consistency objective settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub alpha: f64,
    pub lambda: f64,
    pub source: MaskSource,
}

/// Graph handles and values produced by [`attngen_loss`].
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: Var,
    pub ce: T,
    pub kl: T,
    pub clean: ForwardOutput<T>,
    pub masked_logits: Option<Var>,
    pub plan: MaskPlan,
}

/// `CE(f(x), y) + lambda * KL(f(x) || f(x_masked))`.
///
/// Both forwards share the bound parameters, so gradients flow through
/// both. When no position is masked the second forward is skipped and the
/// divergence is exactly zero.
pub fn attngen_loss<T: Real>(
    model: &AttnGen<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    batch: &Batch,
    objective: &Objective,
    mode: Mode,
    rng: &mut Rng,
) -> Result<LossOutput<T>> {
    if !(objective.lambda >= 0.0) {
        return Err(Error::Config(format!("lambda {} must be >= 0", objective.lambda)));
    }
    let b = batch.size();
    let len = model.config.seq_len;
    let clean = model.forward(g, bound, &batch.tokens, b, mode, rng)?;
    let ce_var = g.cross_entropy(clean.logits, &batch.labels)?;
    let ce = g.data(ce_var)[0];
    let plan = match objective.source {
        MaskSource::Attention => select_mask_indices(&clean.attention, objective.alpha)?,
        MaskSource::Random => select_random_indices(b, len, objective.alpha, rng)?,
    };
    if plan.k == 0 {
        return Ok(LossOutput {
            loss: ce_var,
            ce,
            kl: T::zero(),
            clean,
            masked_logits: None,
            plan,
        });
    }
    let masked = apply_mask(&batch.tokens, len, &plan);
    let masked_out = model.forward(g, bound, &masked, b, mode, rng)?;
    let kl_var = g.kl_divergence(clean.logits, masked_out.logits)?;
    let kl = g.data(kl_var)[0];
    let weighted = g.scale(kl_var, T::lit(objective.lambda));
    let loss = g.add(ce_var, weighted)?;
    Ok(LossOutput {
        loss,
        ce,
        kl,
        clean,
        masked_logits: Some(masked_out.logits),
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_differences, relative_error};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    pub(crate) fn tiny_config() -> AttnGenConfig {
        AttnGenConfig {
            seq_len: 16,
            vocab: 5,
            embed_dim: 4,
            kernel: 3,
            channels: vec![4, 3, 2],
            pool_width: 2,
            pool_stride: 2,
            dropout: 0.3,
            fc_hidden: 5,
            classes: 2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    fn random_batch(rng: &mut Rng, b: usize, l: usize) -> Batch {
        Batch {
            tokens: (0..b * l).map(|_| rng.below(5) as u8).collect(),
            labels: (0..b).map(|i| i % 2).collect(),
            len: l,
        }
    }

    #[test]
    fn default_config_arithmetic() {
        let c = AttnGenConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stage_lengths(), vec![200, 100, 50, 25]);
        assert_eq!(c.flatten_width(), 100);
        let bad = AttnGenConfig { seq_len: 204, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = AttnGenConfig::default();
        let a: AttnGen<f32> = init_model(&c, 42).unwrap();
        let b: AttnGen<f32> = init_model(&c, 42).unwrap();
        assert_eq!(a, b);
        for p in a.params.iter() {
            if p.name.starts_with("bn") && p.name.ends_with("weight") {
                assert!(p.tensor.data().iter().all(|&v| v == 1.0));
            }
            if p.name.ends_with("bias") {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0));
            }
        }
        let bound = (6.0f64 / (128.0 * 8.0)).sqrt() as f32;
        let w = a.params.get("conv1.weight").unwrap();
        assert_eq!(w.tensor.shape(), &[32, 128, 8]);
        assert!(w.tensor.data().iter().all(|v| v.abs() <= bound));
        let e = a.params.get("embedding.weight").unwrap();
        assert!(e.tensor.data().iter().all(|v| v.abs() <= 0.1));
        assert_eq!(a.params.get("fc1.weight").unwrap().tensor.shape(), &[64, 100]);
    }

    #[test]
    fn attention_score_examples() {
        let s = attention_scores(&[2.0f64, 4.0, 0.0, 0.0], 1, 2, 2);
        assert_eq!(s, vec![3.0, 0.0]);
        let s = attention_scores(&[1.5f64; 12], 1, 4, 3);
        assert!(s.iter().all(|&v| v == 1.5));

        let mut rng = Rng::seed_from_u64(8);
        let e: Vec<f64> = (0..30).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let s = attention_scores(&e, 2, 5, 3);
        for b in 0..2 {
            for i in 0..5 {
                let mean = (0..3).map(|j| e[(b * 5 + i) * 3 + j]).sum::<f64>() / 3.0;
                assert!((s[b * 5 + i] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_weight_examples() {
        let m = attention_weights(vec![0.3f64; 200], 1, 200);
        assert!(m.weights.iter().all(|&w| (w - 0.005).abs() < 1e-15));
        let m = attention_weights(vec![0.0f64, 3f64.ln()], 1, 2);
        assert!((m.weights[0] - 0.25).abs() < 1e-12 && (m.weights[1] - 0.75).abs() < 1e-12);
        let base = vec![0.1f64, -0.7, 2.0, 0.4];
        let shifted: Vec<f64> = base.iter().map(|x| x + 7.0).collect();
        let a = attention_weights(base, 1, 4);
        let b = attention_weights(shifted, 1, 4);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    fn map_of(weights: Vec<f64>) -> AttentionMap<f64> {
        let len = weights.len();
        AttentionMap {
            batch: 1,
            len,
            scores: weights.clone(),
            weights,
        }
    }

    #[test]
    fn mask_selection_examples() {
        let p = select_mask_indices(&map_of(vec![0.1, 0.4, 0.2, 0.3]), 0.5).unwrap();
        assert_eq!(p.indices, vec![vec![0, 2]]);
        let p = select_mask_indices(&map_of(vec![0.25; 4]), 0.5).unwrap();
        assert_eq!(p.indices, vec![vec![0, 1]]);
        let p = select_mask_indices(&map_of(vec![0.005; 200]), 0.1).unwrap();
        assert_eq!(p.k, 20);
        assert!(select_mask_indices(&map_of(vec![0.5, 0.5]), 1.5).is_err());
    }

    #[test]
    fn mask_application_examples() {
        let plan = MaskPlan { alpha: 0.5, k: 2, indices: vec![vec![1, 3]] };
        assert_eq!(apply_mask(&[1, 2, 3, 4], 4, &plan), vec![1, 0, 3, 0]);
        let none = MaskPlan { alpha: 0.0, k: 0, indices: vec![vec![]] };
        assert_eq!(apply_mask(&[1, 2, 3, 4], 4, &none), vec![1, 2, 3, 4]);
        let all = MaskPlan { alpha: 1.0, k: 4, indices: vec![vec![0, 1, 2, 3]] };
        assert_eq!(apply_mask(&[1, 2, 3, 4], 4, &all), vec![0; 4]);
    }

    /// Lexicographically smallest subset of size `k` with minimal weight sum.
    fn brute_force_selection(w: &[f64], k: usize) -> Vec<usize> {
        let n = w.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for bits in 0u32..(1 << n) {
            if bits.count_ones() as usize != k {
                continue;
            }
            let set: Vec<usize> = (0..n).filter(|i| bits >> i & 1 == 1).collect();
            let sum: f64 = set.iter().map(|&i| w[i]).sum();
            let better = match &best {
                None => true,
                Some((s, b)) => sum < *s || (sum == *s && set < *b),
            };
            if better {
                best = Some((sum, set));
            }
        }
        best.unwrap().1
    }

    proptest! {
        #[test]
        fn selection_matches_brute_force(
            levels in proptest::collection::vec(0u8..6, 1..11),
            alpha in 0.0f64..=1.0,
        ) {
            // Dyadic weights keep every subset sum exact.
            let w: Vec<f64> = levels.iter().map(|&v| v as f64 / 8.0).collect();
            let n = w.len();
            let plan = select_mask_indices(&map_of(w.clone()), alpha).unwrap();
            prop_assert_eq!(plan.k, mask_count(alpha, n));
            prop_assert_eq!(&plan.indices[0], &brute_force_selection(&w, plan.k));
        }

        #[test]
        fn apply_mask_touches_only_plan(
            tokens in proptest::collection::vec(1u8..5, 12),
            alpha in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::seed_from_u64(seed);
            let plan = select_random_indices(1, 12, alpha, &mut rng).unwrap();
            let out = apply_mask(&tokens, 12, &plan);
            let changed = tokens.iter().zip(&out).filter(|(a, b)| a != b).count();
            prop_assert_eq!(changed, plan.k);
            for i in 0..12 {
                if !plan.indices[0].contains(&i) {
                    prop_assert_eq!(out[i], tokens[i]);
                }
            }
        }

        #[test]
        fn attention_rows_normalized(scores in proptest::collection::vec(-50.0f64..50.0, 24)) {
            let m = attention_weights(scores, 2, 12);
            for b in 0..2 {
                let s: f64 = m.row(b).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(m.row(b).iter().all(|&w| w > 0.0));
            }
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let c = AttnGenConfig::default();
        let model: AttnGen<f32> = init_model(&c, 1).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let row: Vec<u8> = (0..200).map(|_| rng.below(5) as u8).collect();
        let tokens: Vec<u8> = row.iter().chain(&row).copied().collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let out = model.forward(&mut g, &bound, &tokens, 2, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.shape(out.logits), &[2, 2]);
        assert_eq!(out.attention.weights.len(), 400);
        let l = g.data(out.logits);
        assert_eq!(l[0..2], l[2..4]);
        assert_eq!(model.predict_logits(&tokens, 2).unwrap(), l.to_vec());
        assert_eq!(model.attention_map(&tokens, 2).unwrap(), out.attention);
        assert!(model.forward(&mut g, &bound, &tokens[..300], 2, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn same_token_same_score() {
        let model: AttnGen<f32> = init_model(&tiny_config(), 4).unwrap();
        let mut rng = Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 3, 16);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let out = model.forward(&mut g, &bound, &batch.tokens, 3, Mode::Train, &mut rng).unwrap();
        let mut by_token = [None; 5];
        for (&t, &s) in batch.tokens.iter().zip(&out.attention.scores) {
            let slot = &mut by_token[t as usize];
            match slot {
                None => *slot = Some(s),
                Some(prev) => assert_eq!(*prev, s),
            }
        }
    }

    #[test]
    fn loss_reductions() {
        let model: AttnGen<f64> = init_model(&tiny_config(), 5).unwrap();
        let mut rng = Rng::seed_from_u64(6);
        let batch = random_batch(&mut rng, 4, 16);
        for (alpha, lambda) in [(0.0, 0.5), (0.25, 0.0)] {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let obj = Objective { alpha, lambda, source: MaskSource::Attention };
            let out = attngen_loss(&model, &mut g, &bound, &batch, &obj, Mode::Train, &mut rng).unwrap();
            assert_eq!(g.data(out.loss)[0], out.ce);
            if alpha == 0.0 {
                assert_eq!(out.kl, 0.0);
                assert!(out.masked_logits.is_none());
            }
        }
    }

    fn log_softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter().map(|x| x - lse).collect()
    }

    #[test]
    fn loss_recomposes_from_logits() {
        let model: AttnGen<f64> = init_model(&tiny_config(), 7).unwrap();
        let mut rng = Rng::seed_from_u64(8);
        let batch = random_batch(&mut rng, 4, 16);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let obj = Objective { alpha: 0.1, lambda: 0.1, source: MaskSource::Attention };
        let out = attngen_loss(&model, &mut g, &bound, &batch, &obj, Mode::Train, &mut rng).unwrap();
        assert_eq!(out.plan.k, 1);
        let clean = g.data(out.clean.logits).to_vec();
        let masked = g.data(out.masked_logits.unwrap()).to_vec();
        let (mut ce, mut kl) = (0.0, 0.0);
        for b in 0..4 {
            let lp = log_softmax(&clean[2 * b..2 * b + 2]);
            let lq = log_softmax(&masked[2 * b..2 * b + 2]);
            ce -= lp[batch.labels[b]];
            kl += (0..2).map(|c| lp[c].exp() * (lp[c] - lq[c])).sum::<f64>();
        }
        ce /= 4.0;
        kl /= 4.0;
        assert!(kl >= 0.0);
        assert!((out.ce - ce).abs() < 1e-5);
        assert!((out.kl - kl).abs() < 1e-5);
        assert!((g.data(out.loss)[0] - (ce + 0.1 * kl)).abs() < 1e-5);
    }

    #[test]
    fn gradient_reaches_embedding_through_both_passes() {
        let model: AttnGen<f64> = init_model(&tiny_config(), 9).unwrap();
        let mut rng = Rng::seed_from_u64(10);
        let batch = random_batch(&mut rng, 4, 16);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let obj = Objective { alpha: 0.25, lambda: 1.0, source: MaskSource::Attention };
        let out = attngen_loss(&model, &mut g, &bound, &batch, &obj, Mode::Train, &mut rng).unwrap();
        g.backward(out.loss).unwrap();
        let table = g.grad(bound.vars()[0]).unwrap();
        assert!(table.iter().any(|&v| v != 0.0));
        let clean = g.grad(out.clean.embedding).unwrap();
        assert!(clean.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn full_loss_matches_finite_differences() {
        let cfg = tiny_config();
        let model: AttnGen<f64> = init_model(&cfg, 11).unwrap();
        let mut rng = Rng::seed_from_u64(12);
        let batch = random_batch(&mut rng, 4, 16);
        let obj = Objective { alpha: 0.25, lambda: 0.5, source: MaskSource::Attention };
        let loss_at = |m: &AttnGen<f64>, mode: Mode| {
            let mut g = Graph::new();
            let bound = m.bind(&mut g);
            let mut r = Rng::seed_from_u64(99);
            let out = attngen_loss(m, &mut g, &bound, &batch, &obj, mode, &mut r).unwrap();
            (g, bound, out)
        };
        for mode in [Mode::Train, Mode::Eval] {
            let (mut g, bound, out) = loss_at(&model, mode);
            g.backward(out.loss).unwrap();
            let mut pick = Rng::seed_from_u64(13);
            let mut checked = 0;
            while checked < 20 {
                let pi = pick.below(model.params.len() as u64) as usize;
                let name = &model.params.by_index(pi).name;
                // The shift before train-mode normalization cancels exactly.
                if mode == Mode::Train && name.starts_with("conv") && name.ends_with("bias") {
                    continue;
                }
                let n = model.params.by_index(pi).tensor.numel();
                let ci = pick.below(n as u64) as usize;
                let analytic = g.grad(bound.vars()[pi]).unwrap()[ci];
                let x0 = model.params.by_index(pi).tensor.data().to_vec();
                let numeric = central_differences(
                    |x| {
                        let mut m = model.clone();
                        m.params.by_index_mut(pi).tensor.data_mut().copy_from_slice(x);
                        let (g, _, out) = loss_at(&m, mode);
                        g.data(out.loss)[0]
                    },
                    &x0,
                    1e-6,
                    &[ci],
                )[0];
                let err = relative_error(analytic, numeric);
                assert!(err <= 1e-4, "{mode:?} {name}[{ci}]: {analytic} vs {numeric}");
                checked += 1;
            }
        }
    }
}
