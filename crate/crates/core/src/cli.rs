//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data error,
//! 3 numerical abort.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    ablation_csv, ablation_suite, importance_profiles, localization_rate, parse_schedule,
    perturbation_curve, render_accuracy_curve, render_mask_patterns, OcclusionOrder, PerturbationCurve,
};
use crate::autodiff::Real;
use crate::config::{parse_pairs, parse_synthetic_spec, Precision, RunConfig};
use crate::dataio::{
    generate_synthetic, load_csv_corpus, read_ground_truth, split_corpus, write_csv_corpus, write_ground_truth,
    DatasetSplit, EncodedSequence, SyntheticSpec,
};
use crate::error::Error;
use crate::model::{init_model, AttnGen};
use crate::trainer::{evaluate, train, CsvSink, ModelCheckpoint};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Fixed output file names.
pub mod files {
    pub const RESOLVED_CONFIG: &str = "config.resolved.txt";
    pub const METRICS: &str = "metrics.csv";
    pub const CHECKPOINT: &str = "checkpoint.atng";
    pub const SUMMARY: &str = "summary.txt";
    pub const PREDICTIONS: &str = "predictions.csv";
    pub const ABLATION: &str = "ablation.csv";
    pub const MASKS_PPM: &str = "masks.ppm";
    pub const MASKS_CSV: &str = "masks.csv";
    pub const CORPUS: &str = "corpus.csv";
    pub const GROUND_TRUTH: &str = "ground_truth.csv";
    pub const RESOLVED_SPEC: &str = "spec.resolved.txt";
    pub const LOCALIZATION: &str = "localization.txt";

    pub fn curve_csv(order: &str) -> String {
        format!("curve_{order}.csv")
    }

    pub fn curve_svg(order: &str) -> String {
        format!("curve_{order}.svg")
    }
}

#[derive(Debug, Parser)]
#[command(name = "attngen", version, about = "Attention-guided saliency learning for DNA sequence classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the corpus, train, and write metrics plus the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(CheckpointArgs),
    /// Occlusion curve by gradient importance.
    Perturb(PerturbArgs),
    /// Train the four ablation arms and summarize them.
    Ablate(AblateArgs),
    /// Export mask patterns, and optionally render a curve CSV.
    Viz(VizArgs),
    /// Write a planted-motif corpus and its ground-truth sidecar.
    GenSynthetic(GenArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Corpus CSV; overrides the `data` key.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Occlusion order: high, low or random.
    #[arg(long, default_value = "high")]
    pub order: String,
    /// Comma-separated masked counts.
    #[arg(long, default_value = "0,1,5,10,25,50,100,150,200")]
    pub schedule: String,
    /// Ground-truth sidecar; when given, top-8 localization is reported.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated masking ratios.
    #[arg(long, default_value = "0,0.1,0.25,0.5,0.75")]
    pub alphas: String,
    /// Number of validation sequences to draw.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Curve CSV to render as SVG.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// `key = value` synthetic spec file; missing keys take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

trait Stage<X> {
    fn config(self) -> Result<X, Failure>;
    fn data(self) -> Result<X, Failure>;
    fn numeric(self) -> Result<X, Failure>;
}

impl<X> Stage<X> for crate::Result<X> {
    fn config(self) -> Result<X, Failure> {
        self.map_err(|error| Failure { code: EXIT_CONFIG, error })
    }

    fn data(self) -> Result<X, Failure> {
        self.map_err(|error| Failure { code: EXIT_DATA, error })
    }

    /// Numerical aborts map to 3, anything else to 1.
    fn numeric(self) -> Result<X, Failure> {
        self.map_err(|error| {
            let code = match error {
                Error::NonFinite { .. } => EXIT_NUMERIC,
                _ => EXIT_CONFIG,
            };
            Failure { code, error }
        })
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Perturb(a) => cmd_perturb(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Viz(a) => cmd_viz(&a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(&a),
    }
}

fn resolve(file: Option<&Path>, base: Option<&str>, overrides: &[String], data: Option<&Path>) -> Result<RunConfig, Failure> {
    let mut cfg = match base {
        Some(text) => RunConfig::from_text(text).data()?,
        None => RunConfig::default(),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e)).config()?;
        for (line, k, v) in parse_pairs(&text).config()? {
            cfg.set(&k, &v)
                .map_err(|e| Error::Config(format!("{}:{line}: {e}", path.display())))
                .config()?;
        }
    }
    cfg.apply_overrides(overrides).config()?;
    if let Some(d) = data {
        cfg.data = Some(d.to_path_buf());
    }
    cfg.validate().config()?;
    Ok(cfg)
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<EncodedSequence>, Failure> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no corpus given; set `data` or pass --data".into()))
        .config()?;
    load_csv_corpus(path, cfg.model.seq_len).data()
}

fn split(cfg: &RunConfig, corpus: &[EncodedSequence]) -> Result<DatasetSplit, Failure> {
    split_corpus(corpus, cfg.train_fraction, cfg.train.seed).data()
}

fn out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).data()
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(path, e)).data()
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, Failure> {
    ModelCheckpoint::load(path).data()
}

fn restore<T: Real>(cfg: &RunConfig, ckpt: &ModelCheckpoint) -> Result<AttnGen<T>, Failure> {
    let mut model = init_model::<T>(&cfg.model, cfg.train.seed).config()?;
    ckpt.restore_into(&mut model).data()?;
    Ok(model)
}

fn analysis_set(cfg: &RunConfig, split: &DatasetSplit) -> Vec<EncodedSequence> {
    split.validation.iter().take(cfg.eval_count).cloned().collect()
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), Failure> {
    let c = &a.common;
    let cfg = resolve(c.config.as_deref(), None, &c.overrides, c.data.as_deref())?;
    let corpus = load_corpus(&cfg)?;
    let split = split(&cfg, &corpus)?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(&cfg, &split, &c.out_dir),
        Precision::F64 => train_with::<f64>(&cfg, &split, &c.out_dir),
    }
}

fn train_with<T: Real>(cfg: &RunConfig, split: &DatasetSplit, dir: &Path) -> Result<(), Failure> {
    let mut model = init_model::<T>(&cfg.model, cfg.train.seed).config()?;
    out_dir(dir)?;
    let resolved = cfg.to_text();
    write(dir, files::RESOLVED_CONFIG, &resolved)?;
    let metrics_path = dir.join(files::METRICS);
    let file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e)).data()?;
    let mut sink = CsvSink::new(std::io::BufWriter::new(file));
    let mut outcome = train(&mut model, split, &cfg.train, &mut sink).numeric()?;
    drop(sink);
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    outcome.checkpoint.config = resolved;
    outcome.checkpoint.save(dir.join(files::CHECKPOINT)).data()?;
    let mut s = String::new();
    let _ = writeln!(s, "best_val_acc = {}", outcome.best_val_acc);
    let _ = writeln!(s, "best_epoch = {}", outcome.best_epoch);
    let _ = writeln!(s, "epochs_run = {}", outcome.history.len());
    let _ = writeln!(s, "convergence_epoch = {}", outcome.convergence_epoch);
    for w in &outcome.warnings {
        let _ = writeln!(s, "warning = {w}");
    }
    write(dir, files::SUMMARY, s)
}

/// Configuration stored in the checkpoint, then the file, overrides and
/// `--data`.
fn checkpoint_config(c: &Common, ckpt: &ModelCheckpoint) -> Result<RunConfig, Failure> {
    resolve(c.config.as_deref(), Some(&ckpt.config), &c.overrides, c.data.as_deref())
}

pub fn cmd_eval(a: &CheckpointArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = checkpoint_config(&a.common, &ckpt)?;
    let corpus = load_corpus(&cfg)?;
    let split = split(&cfg, &corpus)?;
    match cfg.precision {
        Precision::F32 => eval_with::<f32>(&cfg, &ckpt, &split, &a.common.out_dir),
        Precision::F64 => eval_with::<f64>(&cfg, &ckpt, &split, &a.common.out_dir),
    }
}

fn eval_with<T: Real>(cfg: &RunConfig, ckpt: &ModelCheckpoint, split: &DatasetSplit, dir: &Path) -> Result<(), Failure> {
    let model = restore::<T>(cfg, ckpt)?;
    let eval = evaluate(&model, &split.validation).data()?;
    out_dir(dir)?;
    write(dir, files::RESOLVED_CONFIG, cfg.to_text())?;
    let mut p = String::from("index,label,prediction,correct\n");
    for ((idx, s), (&pred, &ok)) in split
        .validation_indices
        .iter()
        .zip(&split.validation)
        .zip(eval.predictions.iter().zip(&eval.correct))
    {
        let _ = writeln!(p, "{idx},{},{pred},{ok}", s.label);
    }
    write(dir, files::PREDICTIONS, p)?;
    let mut s = String::new();
    let _ = writeln!(s, "accuracy = {}", eval.accuracy);
    let _ = writeln!(s, "indicator_std = {}", eval.indicator_std());
    let _ = writeln!(s, "loss = {}", eval.loss);
    let _ = writeln!(s, "sequences = {}", eval.correct.len());
    write(dir, files::SUMMARY, s)
}

pub fn cmd_perturb(a: &PerturbArgs) -> Result<(), Failure> {
    let order = OcclusionOrder::parse(&a.order).config()?;
    let schedule = parse_schedule(&a.schedule).config()?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = checkpoint_config(&a.common, &ckpt)?;
    if let Some(&m) = schedule.iter().find(|&&m| m > cfg.model.seq_len) {
        return Err(Failure {
            code: EXIT_CONFIG,
            error: Error::Schedule(format!("m = {m} exceeds sequence length {}", cfg.model.seq_len)),
        });
    }
    let corpus = load_corpus(&cfg)?;
    let split = split(&cfg, &corpus)?;
    let spans = match &a.ground_truth {
        Some(p) => Some(read_ground_truth(p).data()?),
        None => None,
    };
    match cfg.precision {
        Precision::F32 => perturb_with::<f32>(&cfg, &ckpt, &split, order, &schedule, spans, &a.common.out_dir),
        Precision::F64 => perturb_with::<f64>(&cfg, &ckpt, &split, order, &schedule, spans, &a.common.out_dir),
    }
}

fn perturb_with<T: Real>(
    cfg: &RunConfig,
    ckpt: &ModelCheckpoint,
    split: &DatasetSplit,
    order: OcclusionOrder,
    schedule: &[usize],
    spans: Option<Vec<Option<(usize, usize)>>>,
    dir: &Path,
) -> Result<(), Failure> {
    let model = restore::<T>(cfg, ckpt)?;
    let seqs = analysis_set(cfg, split);
    let occ = perturbation_curve(&model, &seqs, schedule, order, cfg.train.seed).config()?;
    let localization = match spans {
        Some(all) => {
            let spans: Vec<_> = split
                .validation_indices
                .iter()
                .take(seqs.len())
                .map(|&i| all.get(i).copied().flatten())
                .collect();
            let profiles = importance_profiles(&model, &seqs).config()?;
            Some(localization_rate(&profiles, &spans, 8))
        }
        None => None,
    };
    out_dir(dir)?;
    write(dir, files::RESOLVED_CONFIG, cfg.to_text())?;
    write(dir, &files::curve_csv(order.name()), occ.curve.to_csv())?;
    if occ.curve.rows.len() >= 2 {
        let (svg, _) = render_accuracy_curve(&occ.curve).config()?;
        write(dir, &files::curve_svg(order.name()), svg)?;
    }
    if let Some(rate) = localization {
        write(dir, files::LOCALIZATION, format!("top8_in_span = {rate}\n"))?;
    }
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<(), Failure> {
    let cfg = resolve(Some(&a.config), None, &a.overrides, a.data.as_deref())?;
    let corpus = load_corpus(&cfg)?;
    let split = split(&cfg, &corpus)?;
    let threads = std::env::var("ATTNGEN_THREADS")
        .ok()
        .map(|v| v.parse::<usize>().map_err(|_| Error::Config(format!("ATTNGEN_THREADS={v:?} is not a count"))))
        .transpose()
        .config()?
        .unwrap_or(1);
    let records = match cfg.precision {
        Precision::F32 => ablation_suite::<f32>(&cfg.model, &split, &cfg.train, threads),
        Precision::F64 => ablation_suite::<f64>(&cfg.model, &split, &cfg.train, threads),
    }
    .config()?;
    out_dir(&a.out_dir)?;
    write(&a.out_dir, files::RESOLVED_CONFIG, cfg.to_text())?;
    write(&a.out_dir, files::ABLATION, ablation_csv(&records))?;
    for r in &records {
        if let Err(e) = &r.outcome {
            eprintln!("warning: arm {} failed: {e}", r.arm.label());
        }
    }
    Ok(())
}

fn parse_alphas(s: &str) -> crate::Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            let a: f64 = v.trim().parse().map_err(|_| Error::Config(format!("invalid ratio {v:?}")))?;
            if (0.0..=1.0).contains(&a) {
                Ok(a)
            } else {
                Err(Error::Config(format!("ratio {a} outside [0, 1]")))
            }
        })
        .collect()
}

pub fn cmd_viz(a: &VizArgs) -> Result<(), Failure> {
    let alphas = parse_alphas(&a.alphas).config()?;
    if a.count == 0 {
        return Err(Failure { code: EXIT_CONFIG, error: Error::Config("--count must be >= 1".into()) });
    }
    let curve = match &a.curve {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e)).data()?;
            Some(PerturbationCurve::from_csv(&text).data()?)
        }
        None => None,
    };
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = checkpoint_config(&a.common, &ckpt)?;
    let corpus = load_corpus(&cfg)?;
    let split = split(&cfg, &corpus)?;
    let seqs: Vec<EncodedSequence> = split.validation.iter().take(a.count).cloned().collect();
    let patterns = match cfg.precision {
        Precision::F32 => render_mask_patterns(&restore::<f32>(&cfg, &ckpt)?, &seqs, &alphas),
        Precision::F64 => render_mask_patterns(&restore::<f64>(&cfg, &ckpt)?, &seqs, &alphas),
    }
    .config()?;
    let rendered = curve.as_ref().map(render_accuracy_curve).transpose().config()?;
    let dir = &a.common.out_dir;
    out_dir(dir)?;
    write(dir, files::RESOLVED_CONFIG, cfg.to_text())?;
    write(dir, files::MASKS_PPM, patterns.ppm)?;
    write(dir, files::MASKS_CSV, patterns.csv)?;
    if let (Some(c), Some((svg, _))) = (&curve, rendered) {
        write(dir, &files::curve_svg(c.order.name()), svg)?;
    }
    Ok(())
}

fn spec_text(spec: &SyntheticSpec) -> String {
    let position = match spec.position_mode {
        crate::dataio::PositionMode::Uniform => "uniform".to_string(),
        crate::dataio::PositionMode::Fixed(p) => p.to_string(),
    };
    format!(
        "count = {}\nlength = {}\nmotif_class0 = {}\nmotif_class1 = {}\nplant_probability = {}\nposition = {position}\nseed = {}\n",
        spec.count, spec.length, spec.motif_class0, spec.motif_class1, spec.plant_probability, spec.seed
    )
}

pub fn cmd_gen_synthetic(a: &GenArgs) -> Result<(), Failure> {
    let mut full = match &a.spec {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e)).config()?,
        None => String::new(),
    };
    for o in &a.overrides {
        let (k, v) = crate::config::parse_override(o).config()?;
        let _ = writeln!(full, "\n{k} = {v}");
    }
    let spec = parse_synthetic_spec(&full).config()?;
    let corpus = generate_synthetic(&spec).config()?;
    out_dir(&a.out_dir)?;
    write(&a.out_dir, files::RESOLVED_SPEC, spec_text(&spec))?;
    write_csv_corpus(a.out_dir.join(files::CORPUS), &corpus.sequences).data()?;
    write_ground_truth(a.out_dir.join(files::GROUND_TRUTH), &corpus).data()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_exits_zero_and_bad_flags_exit_one() {
        for sub in ["train", "eval", "perturb", "ablate", "viz", "gen-synthetic"] {
            assert_eq!(run(["attngen", sub, "--help"]), 0, "{sub}");
        }
        assert_eq!(run(["attngen", "train", "--bogus"]), EXIT_CONFIG);
    }

    #[test]
    fn alpha_list_parsing() {
        assert_eq!(parse_alphas("0, 0.5").unwrap(), vec![0.0, 0.5]);
        assert!(parse_alphas("1.5").is_err());
    }
}
