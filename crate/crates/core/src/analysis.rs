//! Post-hoc interpretability: gradient saliency, occlusion curves, the
//! ablation suite and image exports.

use std::fmt::Write as _;

use crate::autodiff::{Graph, Mode, Real, Tensor};
use crate::dataio::{Batch, DatasetSplit, EncodedSequence, PAD};
use crate::error::{Error, Result};
use crate::model::{init_model, select_mask_indices, AttnGen, AttnGenConfig, MaskSource};
use crate::rng::{streams, Rng};
use crate::trainer::{argmax, evaluate, train, NullSink, TrainConfig, TrainOutcome, EVAL_BATCH};

/// Per-position gradient magnitudes of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceProfile {
    pub importance: Vec<f64>,
    /// Positions by descending importance, equal values by ascending index.
    pub ranking: Vec<usize>,
}

impl ImportanceProfile {
    pub fn new(importance: Vec<f64>) -> Self {
        let mut ranking: Vec<usize> = (0..importance.len()).collect();
        ranking.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
        ImportanceProfile { importance, ranking }
    }
}

/// Saliency of a single sequence; see [`gradient_importance_batch`].
pub fn gradient_importance<T: Real>(model: &AttnGen<T>, tokens: &[u8]) -> Result<ImportanceProfile> {
    Ok(gradient_importance_batch(model, tokens, 1)?.remove(0))
}

/// `I_i = ||d z / d E_i||_2`, where `z` is the predicted-class logit and `E`
/// the embedding activation, computed in eval mode.
///
/// Sequences do not interact in eval mode, so one backward pass through the
/// sum of the targets yields every per-sequence gradient.
pub fn gradient_importance_batch<T: Real>(
    model: &AttnGen<T>,
    tokens: &[u8],
    batch: usize,
) -> Result<Vec<ImportanceProfile>> {
    let (l, d, c) = (model.config.seq_len, model.config.embed_dim, model.config.classes);
    let mut g = Graph::new();
    let bound = model.bind_for_saliency(&mut g);
    let mut rng = Rng::seed_from_u64(0);
    let out = model.forward(&mut g, &bound, tokens, batch, Mode::Eval, &mut rng)?;
    let mut pick = vec![T::zero(); batch * c];
    for (b, row) in g.data(out.logits).chunks_exact(c).enumerate() {
        pick[b * c + argmax(row)] = T::one();
    }
    let pick = g.constant(Tensor::new(&[batch, c], pick)?);
    let chosen = g.mul(out.logits, pick)?;
    let target = g.sum(chosen);
    g.backward(target)?;
    let grad = g
        .grad(out.embedding)
        .ok_or_else(|| Error::Usage("embedding received no gradient".into()))?;
    Ok(grad
        .chunks_exact(l * d)
        .map(|seq| {
            ImportanceProfile::new(
                seq.chunks_exact(d)
                    .map(|v| v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt())
                    .collect(),
            )
        })
        .collect())
}

/// Profiles for many sequences, in chunks of [`EVAL_BATCH`].
pub fn importance_profiles<T: Real>(
    model: &AttnGen<T>,
    seqs: &[EncodedSequence],
) -> Result<Vec<ImportanceProfile>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        let batch = Batch::from_sequences(chunk);
        out.extend(gradient_importance_batch(model, &batch.tokens, batch.size())?);
    }
    Ok(out)
}

/// Mean fraction of each sequence's `top` most important positions that fall
/// inside its recorded span. Sequences without a span are skipped.
pub fn localization_rate(profiles: &[ImportanceProfile], spans: &[Option<(usize, usize)>], top: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (p, span) in profiles.iter().zip(spans) {
        if let Some((s, e)) = *span {
            let hits = p.ranking.iter().take(top).filter(|&&i| i >= s && i < e).count();
            total += hits as f64 / top as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionOrder {
    /// Most important positions first.
    High,
    /// Least important positions first.
    Low,
    /// A fresh uniform permutation per sequence.
    Random,
}

impl OcclusionOrder {
    pub fn name(self) -> &'static str {
        match self {
            OcclusionOrder::High => "high",
            OcclusionOrder::Low => "low",
            OcclusionOrder::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(OcclusionOrder::High),
            "low" => Ok(OcclusionOrder::Low),
            "random" => Ok(OcclusionOrder::Random),
            _ => Err(Error::Config(format!("unknown order {s:?}; expected high, low or random"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub m: usize,
    /// Percent.
    pub mean_acc: f64,
    /// Population standard deviation of the 0/100 indicators.
    pub std: f64,
    /// Percentage points below the first row.
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCurve {
    pub order: OcclusionOrder,
    pub rows: Vec<CurveRow>,
}

/// A curve plus the per-sequence 0/1 indicators behind each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Occlusion {
    pub curve: PerturbationCurve,
    pub indicators: Vec<Vec<u8>>,
}

pub const CURVE_HEADER: &str = "m,mean_acc,std,drop,order";

impl PerturbationCurve {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CURVE_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.m, r.mean_acc, r.std, r.drop, self.order.name());
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != CURVE_HEADER {
            return Err(Error::Parse { line: 1, message: format!("unexpected header {header:?}") });
        }
        let mut order = None;
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            let field = |j: usize| -> Result<&str> {
                rec.get(j).ok_or_else(|| Error::Parse { line, message: format!("missing column {j}") })
            };
            let num = |j: usize| -> Result<f64> {
                field(j)?
                    .parse()
                    .map_err(|_| Error::Parse { line, message: format!("bad number in column {j}") })
            };
            let m = field(0)?
                .parse()
                .map_err(|_| Error::Parse { line, message: "bad m".into() })?;
            rows.push(CurveRow { m, mean_acc: num(1)?, std: num(2)?, drop: num(3)? });
            let o = OcclusionOrder::parse(field(4)?)?;
            if order.is_some_and(|p| p != o) {
                return Err(Error::Parse { line, message: "mixed orders in one curve".into() });
            }
            order = Some(o);
        }
        let order = order.ok_or_else(|| Error::Parse { line: 1, message: "no rows".into() })?;
        Ok(PerturbationCurve { order, rows })
    }
}

fn check_schedule(schedule: &[usize], len: usize) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Schedule("schedule is empty".into()));
    }
    if let Some(&m) = schedule.iter().find(|&&m| m > len) {
        return Err(Error::Schedule(format!("m = {m} exceeds sequence length {len}")));
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Schedule(format!("{schedule:?} is not strictly increasing")));
    }
    Ok(())
}

/// Parses a comma-separated schedule such as `0,1,5,10`.
pub fn parse_schedule(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Schedule(format!("invalid schedule entry {v:?}")))
        })
        .collect()
}

/// Occlusion curve: each sequence's positions are ranked once, then for
/// every `m` the first `m` positions of that order are set to pad and the
/// set is re-evaluated.
pub fn perturbation_curve<T: Real>(
    model: &AttnGen<T>,
    seqs: &[EncodedSequence],
    schedule: &[usize],
    order: OcclusionOrder,
    seed: u64,
) -> Result<Occlusion> {
    let len = model.config.seq_len;
    check_schedule(schedule, len)?;
    if seqs.is_empty() {
        return Err(Error::Usage("no sequences to occlude".into()));
    }
    let orders: Vec<Vec<usize>> = match order {
        OcclusionOrder::Random => {
            let mut rng = Rng::derive(seed, streams::OCCLUSION);
            seqs.iter().map(|_| rng.permutation(len)).collect()
        }
        OcclusionOrder::High => importance_profiles(model, seqs)?.into_iter().map(|p| p.ranking).collect(),
        OcclusionOrder::Low => importance_profiles(model, seqs)?
            .into_iter()
            .map(|p| {
                let imp = p.importance;
                let mut r: Vec<usize> = (0..len).collect();
                r.sort_by(|&a, &b| imp[a].total_cmp(&imp[b]).then(a.cmp(&b)));
                r
            })
            .collect(),
    };
    let mut rows: Vec<CurveRow> = Vec::new();
    let mut indicators = Vec::new();
    for &m in schedule {
        let masked: Vec<EncodedSequence> = seqs
            .iter()
            .zip(&orders)
            .map(|(s, o)| {
                let mut tokens = s.tokens.clone();
                for &i in &o[..m] {
                    tokens[i] = PAD;
                }
                EncodedSequence { tokens, label: s.label }
            })
            .collect();
        let eval = evaluate(model, &masked)?;
        let n = eval.correct.len() as f64;
        let mean = 100.0 * eval.accuracy;
        let var = eval
            .correct
            .iter()
            .map(|&c| (100.0 * c as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let drop = rows.first().map_or(0.0, |r0| r0.mean_acc - mean);
        rows.push(CurveRow { m, mean_acc: mean, std: var.sqrt(), drop });
        indicators.push(eval.correct);
    }
    Ok(Occlusion {
        curve: PerturbationCurve { order, rows },
        indicators,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Attention mask with the divergence term.
    Full,
    /// Uniformly random mask of the same size with the divergence term.
    RandomMaskKl,
    /// Attention mask without the divergence term.
    AttentionNoKl,
    /// Plain cross-entropy.
    Baseline,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::RandomMaskKl, Arm::AttentionNoKl, Arm::Baseline];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Full => "Full",
            Arm::RandomMaskKl => "RandomMask+KL",
            Arm::AttentionNoKl => "AttentionNoKL",
            Arm::Baseline => "Baseline",
        }
    }

    /// The arm's training settings derived from `base`.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Arm::Full => c.mask_source = MaskSource::Attention,
            Arm::RandomMaskKl => c.mask_source = MaskSource::Random,
            Arm::AttentionNoKl => {
                c.mask_source = MaskSource::Attention;
                c.lambda = 0.0;
            }
            Arm::Baseline => {
                c.alpha = 0.0;
                c.lambda = 0.0;
            }
        }
        c
    }
}

#[derive(Debug)]
pub struct ArmRecord {
    pub arm: Arm,
    pub outcome: Result<TrainOutcome>,
}

impl ArmRecord {
    pub fn val_acc(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|o| o.best_val_acc)
    }
}

/// Trains the four arms from the same initialization, split and seed. A
/// failing arm is reported in its record and the others still run. Up to
/// `threads` arms run at once.
pub fn ablation_suite<T: Real>(
    model_cfg: &AttnGenConfig,
    split: &DatasetSplit,
    base: &TrainConfig,
    threads: usize,
) -> Result<Vec<ArmRecord>> {
    if !(base.alpha > 0.0) {
        return Err(Error::Config("ablation needs alpha > 0 for the masked arms".into()));
    }
    let run = |arm: Arm| ArmRecord {
        arm,
        outcome: init_model::<T>(model_cfg, base.seed)
            .and_then(|mut m| train(&mut m, split, &arm.config(base), &mut NullSink)),
    };
    let mut records = Vec::with_capacity(4);
    for group in Arm::ALL.chunks(threads.max(1)) {
        if group.len() == 1 {
            records.push(run(group[0]));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = group.iter().map(|&arm| s.spawn(move || run(arm))).collect();
            for h in handles {
                records.push(h.join().expect("ablation worker panicked"));
            }
        });
    }
    Ok(records)
}

pub const ABLATION_HEADER: &str = "arm,val_acc,best_epoch,epochs_run,convergence_epoch,error";

pub fn ablation_csv(records: &[ArmRecord]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in records {
        let _ = match &r.outcome {
            Ok(o) => writeln!(
                s,
                "{},{},{},{},{},",
                r.arm.label(),
                o.best_val_acc,
                o.best_epoch,
                o.history.len(),
                o.convergence_epoch
            ),
            Err(e) => writeln!(s, "{},,,,,\"{}\"", r.arm.label(), e.to_string().replace('"', "'")),
        };
    }
    s
}

pub const RETAINED_RGB: [u8; 3] = [0, 0, 255];
pub const MASKED_RGB: [u8; 3] = [255, 0, 0];

/// Binary pixmap and sidecar CSV of training-time mask plans.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPatterns {
    /// `P6` image, width `L`, one block of `#sequences` rows per ratio.
    pub ppm: Vec<u8>,
    /// `seq_index,alpha,position,masked` for every pixel.
    pub csv: String,
}

pub fn render_mask_patterns<T: Real>(
    model: &AttnGen<T>,
    seqs: &[EncodedSequence],
    alphas: &[f64],
) -> Result<MaskPatterns> {
    if seqs.is_empty() || alphas.is_empty() {
        return Err(Error::Usage("need at least one sequence and one ratio".into()));
    }
    let len = model.config.seq_len;
    let batch = Batch::from_sequences(seqs);
    let map = model.attention_map(&batch.tokens, batch.size())?;
    let mut ppm = format!("P6\n{} {}\n255\n", len, seqs.len() * alphas.len()).into_bytes();
    let mut csv = String::from("seq_index,alpha,position,masked\n");
    for &alpha in alphas {
        let plan = select_mask_indices(&map, alpha)?;
        for (si, idx) in plan.indices.iter().enumerate() {
            let mut row = vec![false; len];
            idx.iter().for_each(|&i| row[i] = true);
            for (pos, &masked) in row.iter().enumerate() {
                ppm.extend_from_slice(if masked { &MASKED_RGB } else { &RETAINED_RGB });
                let _ = writeln!(csv, "{si},{alpha},{pos},{}", u8::from(masked));
            }
        }
    }
    Ok(MaskPatterns { ppm, csv })
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

/// Standalone SVG of mean accuracy against `m` with a shaded `±1 std` band
/// clamped to `[0, 100]`, plus the curve CSV.
pub fn render_accuracy_curve(curve: &PerturbationCurve) -> Result<(String, String)> {
    if curve.rows.len() < 2 {
        return Err(Error::Usage("a curve needs at least two rows".into()));
    }
    let max_m = curve.rows.last().map_or(1, |r| r.m).max(1) as f64;
    let min_m = curve.rows[0].m as f64;
    let span = (max_m - min_m).max(1.0);
    let pw = SVG_W - MARGIN_L - MARGIN_R;
    let ph = SVG_H - MARGIN_T - MARGIN_B;
    let x = |m: usize| MARGIN_L + (m as f64 - min_m) / span * pw;
    let y = |acc: f64| MARGIN_T + (1.0 - acc.clamp(0.0, 100.0) / 100.0) * ph;

    let mut band = Vec::new();
    for r in &curve.rows {
        band.push(format!("{:.2},{:.2}", x(r.m), y(r.mean_acc + r.std)));
    }
    for r in curve.rows.iter().rev() {
        band.push(format!("{:.2},{:.2}", x(r.m), y(r.mean_acc - r.std)));
    }
    let line: Vec<String> = curve
        .rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", x(r.m), y(r.mean_acc)))
        .collect();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<polygon class="band" points="{}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>"##,
        band.join(" ")
    );
    let _ = writeln!(
        s,
        r##"<polyline class="mean" points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        line.join(" ")
    );
    let (x0, y0, x1, y1) = (MARGIN_L, SVG_H - MARGIN_B, SVG_W - MARGIN_R, MARGIN_T);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for acc in [0, 25, 50, 75, 100] {
        let ty = y(acc as f64);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{acc}</text>"#,
            x0 - 6.0,
            ty + 4.0
        );
    }
    for r in &curve.rows {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            x(r.m),
            y0 + 16.0,
            r.m
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">masked positions (m)</text>"#,
        MARGIN_L + pw / 2.0,
        SVG_H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 15 {:.2})">accuracy (%)</text>"#,
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="18" font-size="13" text-anchor="middle">{} occlusion</text>"#,
        MARGIN_L + pw / 2.0,
        curve.order.name()
    );
    s.push_str("</svg>\n");
    Ok((s, curve.to_csv()))
}
