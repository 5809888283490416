//! Training loop, evaluation, metrics logging and checkpoints.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::{adam_step, clip_grad_norm, AdamConfig, Graph, Mode, Real};
use crate::dataio::{make_batches, Batch, DatasetSplit, EncodedSequence};
use crate::error::{Error, Result};
use crate::model::{attngen_loss, AttnGen, MaskSource, Objective};
use crate::rng::{streams, Rng};

/// Sequences per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub mask_source: MaskSource,
    /// Fill the `seconds` metrics column with wall time instead of 0.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            weight_decay: 1e-4,
            lambda: 0.1,
            alpha: 0.1,
            max_epochs: 50,
            patience: 10,
            clip_norm: 1.0,
            seed: 42,
            mask_source: MaskSource::Attention,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("batch_size, patience and max_epochs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.lambda >= 0.0) || !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lambda, lr and weight_decay must be >= 0".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be > 0", self.clip_norm));
        }
        Ok(())
    }

    /// The loss settings; `lambda` is zero whenever `alpha` is.
    pub fn objective(&self) -> Objective {
        Objective {
            alpha: self.alpha,
            lambda: if self.alpha == 0.0 { 0.0 } else { self.lambda },
            source: self.mask_source,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_kl: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Mean pre-clipping gradient norm over the epoch's batches.
    pub grad_norm: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_ce,train_kl,train_acc,val_loss,val_acc,grad_norm,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_ce,
            self.train_kl,
            self.train_acc,
            self.val_loss,
            self.val_acc,
            self.grad_norm,
            self.seconds
        )
    }
}

/// Receives one record per completed epoch.
pub trait MetricsSink {
    fn record(&mut self, m: &EpochMetrics) -> Result<()>;
}

impl MetricsSink for Vec<EpochMetrics> {
    fn record(&mut self, m: &EpochMetrics) -> Result<()> {
        self.push(m.clone());
        Ok(())
    }
}

/// Discards every record.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

/// Streams metrics as CSV, header first.
pub struct CsvSink<W: Write> {
    out: W,
    header_written: bool,
}

impl<W: Write> CsvSink<W> {
    pub fn new(out: W) -> Self {
        CsvSink {
            out,
            header_written: false,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, m: &EpochMetrics) -> Result<()> {
        let io = |e| Error::io("<metrics>", e);
        if !self.header_written {
            writeln!(self.out, "{METRICS_HEADER}").map_err(io)?;
            self.header_written = true;
        }
        writeln!(self.out, "{}", m.csv_row()).map_err(io)?;
        self.out.flush().map_err(io)
    }
}

/// Eval-mode predictions over a sequence set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// 1 where the prediction matches the label.
    pub correct: Vec<u8>,
    pub predictions: Vec<usize>,
    /// Class probabilities averaged over sequences.
    pub mean_probabilities: Vec<f64>,
    /// Mean cross-entropy.
    pub loss: f64,
}

impl Evaluation {
    /// Sample standard deviation (n - 1 denominator) of the 0/1 indicators.
    pub fn indicator_std(&self) -> f64 {
        let n = self.correct.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.accuracy;
        let ss: f64 = self.correct.iter().map(|&c| (c as f64 - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    }
}

/// Index of the largest logit; equal logits resolve to the lower class.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Eval-mode accuracy, per-sequence indicators and loss.
pub fn evaluate<T: Real>(model: &AttnGen<T>, seqs: &[EncodedSequence]) -> Result<Evaluation> {
    if seqs.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty sequence set".into()));
    }
    let c = model.config.classes;
    let mut correct = Vec::with_capacity(seqs.len());
    let mut predictions = Vec::with_capacity(seqs.len());
    let mut prob_sum = vec![0.0; c];
    let mut loss = 0.0;
    for chunk in seqs.chunks(EVAL_BATCH) {
        let batch = Batch::from_sequences(chunk);
        let logits = model.predict_logits(&batch.tokens, batch.size())?;
        for (row, &label) in logits.chunks_exact(c).zip(&batch.labels) {
            let pred = argmax(row);
            predictions.push(pred);
            correct.push(u8::from(pred == label));
            let lp = log_softmax(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>());
            loss -= lp[label];
            for (s, l) in prob_sum.iter_mut().zip(&lp) {
                *s += l.exp();
            }
        }
    }
    let n = seqs.len() as f64;
    Ok(Evaluation {
        accuracy: correct.iter().map(|&c| c as f64).sum::<f64>() / n,
        correct,
        predictions,
        mean_probabilities: prob_sum.iter().map(|s| s / n).collect(),
        loss: loss / n,
    })
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    /// First epoch whose validation accuracy reached 99% of the best.
    pub convergence_epoch: usize,
    pub warnings: Vec<String>,
    pub checkpoint: ModelCheckpoint,
}

/// Number of consecutive validation-loss increases that triggers a warning.
pub const STABILITY_WINDOW: usize = 3;

/// Trains with the masked-consistency objective, keeping the epoch with the
/// best validation accuracy. On return `model` holds the best epoch's state.
pub fn train<T: Real>(
    model: &mut AttnGen<T>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Usage("training and validation sets must be nonempty".into()));
    }
    let objective = cfg.objective();
    let adam = cfg.adam();
    let mut rng = Rng::derive(cfg.seed, streams::TRAIN);
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut best: Option<(f64, usize, ModelCheckpoint)> = None;
    let mut stale = 0;
    let mut rising = 0;
    let start = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(&split.train, cfg.batch_size, cfg.seed, epoch as u64)?;
        let (mut loss_sum, mut ce_sum, mut kl_sum, mut hits) = (0.0, 0.0, 0.0, 0usize);
        let mut norm_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let out = attngen_loss(model, &mut g, &bound, batch, &objective, Mode::Train, &mut rng)?;
            let loss = g.data(out.loss)[0];
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, batch: bi + 1 });
            }
            let b = batch.size() as f64;
            loss_sum += loss.as_f64() * b;
            ce_sum += out.ce.as_f64() * b;
            kl_sum += out.kl.as_f64() * b;
            let classes = model.config.classes;
            hits += g
                .data(out.clean.logits)
                .chunks_exact(classes)
                .zip(&batch.labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            g.backward(out.loss)?;
            model.collect_grads(&g, &bound);
            model.update_running(&out.clean.batch_stats);
            norm_sum += clip_grad_norm(&mut model.params, cfg.clip_norm).as_f64();
            adam_step(&mut model.params, &adam)?;
            model.params.zero_grad();
        }
        let n = split.train.len() as f64;
        let val = evaluate(model, &split.validation)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_ce: ce_sum / n,
            train_kl: kl_sum / n,
            train_acc: hits as f64 / n,
            val_loss: val.loss,
            val_acc: val.accuracy,
            grad_norm: norm_sum / batches.len() as f64,
            seconds: if cfg.log_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        sink.record(&m)?;

        if let Some(prev) = history.last().map(|p: &EpochMetrics| p.val_loss) {
            rising = if m.val_loss > prev { rising + 1 } else { 0 };
            if rising == STABILITY_WINDOW {
                warnings.push(format!(
                    "epoch {epoch}: validation loss rose for {STABILITY_WINDOW} consecutive epochs"
                ));
            }
        }
        history.push(m);

        if best.as_ref().map_or(true, |(acc, _, _)| val.accuracy > *acc) {
            let ckpt = ModelCheckpoint::capture(model, &rng, val.accuracy, epoch as u32);
            best = Some((val.accuracy, epoch, ckpt));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (best_val_acc, best_epoch, checkpoint) = best.expect("at least one epoch runs");
    checkpoint.restore_into(model)?;
    let convergence_epoch = history
        .iter()
        .find(|m| m.val_acc >= 0.99 * best_val_acc)
        .map_or(best_epoch, |m| m.epoch);
    Ok(TrainOutcome {
        history,
        best_val_acc,
        best_epoch,
        convergence_epoch,
        warnings,
        checkpoint,
    })
}

const MAGIC: &[u8; 4] = b"ATNG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named array inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Serializable snapshot of model, optimizer and generator state.
///
/// Layout (little-endian): `ATNG`, u32 version, u32 length + UTF-8 config
/// text, u64 optimizer step, f64 best validation accuracy, u32 best epoch,
/// 4 x u64 generator state, u32 record count, then per record u32 name
/// length + name, u32 rank, rank x u64 extents and f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: String,
    pub step: u64,
    pub best_val_acc: f64,
    pub best_epoch: u32,
    pub rng_state: [u64; 4],
    pub records: Vec<Record>,
}

fn to_f32<T: Real>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

impl ModelCheckpoint {
    pub fn capture<T: Real>(model: &AttnGen<T>, rng: &Rng, best_val_acc: f64, best_epoch: u32) -> Self {
        let mut records = Vec::new();
        for p in model.params.iter() {
            let shape = p.tensor.shape().to_vec();
            records.push(Record {
                name: p.name.clone(),
                shape: shape.clone(),
                values: to_f32(p.tensor.data()),
            });
            records.push(Record {
                name: format!("{}.adam_m", p.name),
                shape: shape.clone(),
                values: to_f32(&p.adam_m),
            });
            records.push(Record {
                name: format!("{}.adam_v", p.name),
                shape,
                values: to_f32(&p.adam_v),
            });
        }
        for (i, s) in model.running.iter().enumerate() {
            for (kind, v) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                records.push(Record {
                    name: format!("bn{}.{kind}", i + 1),
                    shape: vec![v.len()],
                    values: to_f32(v),
                });
            }
        }
        ModelCheckpoint {
            config: String::new(),
            step: model.params.iter().next().map_or(0, |p| p.step_count),
            best_val_acc,
            best_epoch,
            rng_state: rng.state(),
            records,
        }
    }

    fn find(&self, name: &str, shape: &[usize]) -> Result<&Record> {
        let r = self
            .records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Format(format!("missing record {name}")))?;
        if r.shape != shape {
            return Err(Error::Shape(format!(
                "parameter {name}: checkpoint has shape {:?}, model expects {shape:?}",
                r.shape
            )));
        }
        Ok(r)
    }

    /// Overwrites the model's state. Every record is checked before any
    /// value is written.
    pub fn restore_into<T: Real>(&self, model: &mut AttnGen<T>) -> Result<()> {
        let mut plan = Vec::new();
        for p in model.params.iter() {
            let shape = p.tensor.shape().to_vec();
            plan.push((
                self.find(&p.name, &shape)?,
                self.find(&format!("{}.adam_m", p.name), &shape)?,
                self.find(&format!("{}.adam_v", p.name), &shape)?,
            ));
        }
        let mut stats = Vec::new();
        for (i, s) in model.running.iter().enumerate() {
            let shape = [s.mean.len()];
            stats.push((
                self.find(&format!("bn{}.running_mean", i + 1), &shape)?,
                self.find(&format!("bn{}.running_var", i + 1), &shape)?,
            ));
        }
        let cast = |v: &[f32]| -> Vec<T> { v.iter().map(|&x| T::lit(x as f64)).collect() };
        for (p, (w, m, v)) in model.params.iter_mut().zip(plan) {
            p.tensor.data_mut().copy_from_slice(&cast(&w.values));
            p.adam_m = cast(&m.values);
            p.adam_v = cast(&v.values);
            p.step_count = self.step;
            p.tensor.zero_grad();
        }
        for (s, (m, v)) in model.running.iter_mut().zip(stats) {
            s.mean = cast(&m.values);
            s.var = cast(&v.values);
        }
        Ok(())
    }

    pub fn rng(&self) -> Rng {
        Rng::from_state(self.rng_state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.best_val_acc.to_le_bytes());
        b.extend_from_slice(&self.best_epoch.to_le_bytes());
        for s in self.rng_state {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            b.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            b.extend_from_slice(r.name.as_bytes());
            b.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                b.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in &r.values {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(version));
        }
        let n = r.u32()? as usize;
        let config = r.string(n)?;
        let step = r.u64()?;
        let best_val_acc = f64::from_le_bytes(r.array()?);
        let best_epoch = r.u32()?;
        let mut rng_state = [0u64; 4];
        for s in &mut rng_state {
            *s = r.u64()?;
        }
        let count = r.u32()? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|&n| n <= bytes.len() / 4)
                .ok_or_else(|| Error::Format(format!("record {name} has implausible shape {shape:?}")))?;
            let values = (0..numel)
                .map(|_| r.array().map(f32::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            records.push(Record { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ModelCheckpoint {
            config,
            step,
            best_val_acc,
            best_epoch,
            rng_state,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}
