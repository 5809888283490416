//! Sequence encoding, corpus files, splits, batches and the planted-motif
//! generator.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

pub const PAD: u8 = 0;
pub const VOCAB: usize = 5;

/// One sequence as tokens (`0` pad/N, `1` A, `2` T, `3` G, `4` C) with its label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub tokens: Vec<u8>,
    pub label: u8,
}

fn token_of(ch: char) -> Option<u8> {
    match ch.to_ascii_uppercase() {
        'A' => Some(1),
        'T' => Some(2),
        'G' => Some(3),
        'C' => Some(4),
        'N' => Some(PAD),
        _ => None,
    }
}

const SYMBOLS: [char; VOCAB] = ['N', 'A', 'T', 'G', 'C'];

/// Maps nucleotides to tokens and right-pads to `len`. Positions in errors are 1-based.
pub fn encode_sequence(text: &str, len: usize) -> Result<Vec<u8>> {
    let mut tokens = Vec::with_capacity(len);
    for (i, ch) in text.chars().enumerate() {
        let t = token_of(ch).ok_or(Error::InvalidCharacter {
            position: i + 1,
            ch,
        })?;
        tokens.push(t);
    }
    if tokens.len() > len {
        return Err(Error::Shape(format!(
            "sequence of length {} exceeds {len}",
            tokens.len()
        )));
    }
    tokens.resize(len, PAD);
    Ok(tokens)
}

/// Inverse of [`encode_sequence`] with pad rendered as `N`.
pub fn render_sequence(tokens: &[u8]) -> String {
    tokens
        .iter()
        .map(|&t| SYMBOLS.get(t as usize).copied().unwrap_or('?'))
        .collect()
}

/// Reads a `sequence,label` CSV from any reader.
pub fn parse_csv_corpus<R: Read>(reader: R, len: usize) -> Result<Vec<EncodedSequence>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(1, e))?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header \"sequence,label\"".into(),
            })
        }
    };
    if header.len() != 2 || &header[0] != "sequence" || &header[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            message: "missing header \"sequence,label\"".into(),
        });
    }
    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(0, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected 2 fields, found {}", rec.len()),
            });
        }
        let tokens = encode_sequence(&rec[0], len).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let label = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("label {other:?} is not 0 or 1"),
                })
            }
        };
        out.push(EncodedSequence { tokens, label });
    }
    Ok(out)
}

fn csv_error(fallback_line: u64, e: csv::Error) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn load_csv_corpus(path: impl AsRef<Path>, len: usize) -> Result<Vec<EncodedSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv_corpus(file, len)
}

pub fn write_csv_corpus(path: impl AsRef<Path>, corpus: &[EncodedSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "sequence,label").map_err(io)?;
    for s in corpus {
        writeln!(w, "{},{}", render_sequence(&s.tokens), s.label).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Stratified train/validation partition of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<EncodedSequence>,
    pub validation: Vec<EncodedSequence>,
    /// Corpus indices, ascending.
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub seed: u64,
}

/// Per class: shuffle the class's indices, send `round(fraction * n)` (kept
/// within `[1, n-1]`) to train and the rest to validation.
pub fn split_corpus(
    corpus: &[EncodedSequence],
    fraction_train: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(fraction_train > 0.0 && fraction_train < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {fraction_train} must lie in (0, 1)"
        )));
    }
    let mut rng = Rng::derive(seed, streams::SPLIT);
    let mut train_indices = Vec::new();
    let mut validation_indices = Vec::new();
    for class in 0..=1u8 {
        let mut idx: Vec<usize> = (0..corpus.len())
            .filter(|&i| corpus[i].label == class)
            .collect();
        if idx.len() < 2 {
            return Err(Error::Stratification(format!(
                "class {class} has {} member(s); at least 2 are needed",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        let n = idx.len();
        let n_train = ((fraction_train * n as f64).round() as usize).clamp(1, n - 1);
        train_indices.extend_from_slice(&idx[..n_train]);
        validation_indices.extend_from_slice(&idx[n_train..]);
    }
    train_indices.sort_unstable();
    validation_indices.sort_unstable();
    Ok(DatasetSplit {
        train: train_indices.iter().map(|&i| corpus[i].clone()).collect(),
        validation: validation_indices.iter().map(|&i| corpus[i].clone()).collect(),
        train_indices,
        validation_indices,
        seed,
    })
}

/// Row-major token block plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<u8>,
    pub labels: Vec<usize>,
    pub len: usize,
}

impl Batch {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a EncodedSequence>) -> Self {
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        let mut len = 0;
        for s in seqs {
            len = s.tokens.len();
            tokens.extend_from_slice(&s.tokens);
            labels.push(s.label as usize);
        }
        Batch {
            tokens,
            labels,
            len,
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Shuffled mini-batches; the order depends only on `(seed, epoch)` and the
/// last batch may be short.
pub fn make_batches(
    part: &[EncodedSequence],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let order = Rng::derive(seed, streams::BATCHES + epoch).permutation(part.len());
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch::from_sequences(chunk.iter().map(|&i| &part[i])))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    Uniform,
    Fixed(usize),
}

/// Parameters of a planted-motif corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub length: usize,
    pub motif_class0: String,
    pub motif_class1: String,
    pub plant_probability: f64,
    pub position_mode: PositionMode,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 2000,
            length: 200,
            motif_class0: "TATAAAGC".into(),
            motif_class1: "GGCGCCAT".into(),
            plant_probability: 1.0,
            position_mode: PositionMode::Uniform,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub sequences: Vec<EncodedSequence>,
    /// Planted motif span `[start, end)` per sequence.
    pub spans: Vec<Option<(usize, usize)>>,
}

fn motif_tokens(motif: &str) -> Result<Vec<u8>> {
    motif
        .chars()
        .map(|ch| match token_of(ch) {
            Some(t) if t != PAD => Ok(t),
            _ => Err(Error::Spec(format!("motif {motif:?} contains {ch:?}; only ACGT allowed"))),
        })
        .collect()
}

/// Uniform background over A/T/G/C; each class plants its own motif with
/// probability `plant_probability`. Backgrounds are redrawn until the only
/// motif occurrence is the planted one. Labels are balanced (class 0 gets the
/// extra sequence when `count` is odd) and shuffled.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let motifs = [motif_tokens(&spec.motif_class0)?, motif_tokens(&spec.motif_class1)?];
    for m in &motifs {
        if m.is_empty() || m.len() > spec.length {
            return Err(Error::Spec(format!(
                "motif length {} must be in [1, {}]",
                m.len(),
                spec.length
            )));
        }
        if let PositionMode::Fixed(start) = spec.position_mode {
            if start + m.len() > spec.length {
                return Err(Error::Spec(format!(
                    "fixed start {start} leaves no room for a motif of length {}",
                    m.len()
                )));
            }
        }
    }
    if !(spec.plant_probability > 0.0 && spec.plant_probability <= 1.0) {
        return Err(Error::Spec(format!(
            "plant probability {} must lie in (0, 1]",
            spec.plant_probability
        )));
    }
    let mut rng = Rng::derive(spec.seed, streams::SYNTHETIC);
    let n0 = spec.count.div_ceil(2);
    let mut labels: Vec<u8> = (0..spec.count).map(|i| u8::from(i >= n0)).collect();
    rng.shuffle(&mut labels);

    let mut sequences = Vec::with_capacity(spec.count);
    let mut spans = Vec::with_capacity(spec.count);
    for label in labels {
        let motif = &motifs[label as usize];
        let other = &motifs[1 - label as usize];
        let plant = rng.next_f64() < spec.plant_probability;
        // Redraw until no motif occurs except the planted one.
        loop {
            let mut tokens: Vec<u8> = (0..spec.length).map(|_| rng.below(4) as u8 + 1).collect();
            let span = if plant {
                let start = match spec.position_mode {
                    PositionMode::Uniform => {
                        rng.below((spec.length - motif.len() + 1) as u64) as usize
                    }
                    PositionMode::Fixed(s) => s,
                };
                tokens[start..start + motif.len()].copy_from_slice(motif);
                Some((start, start + motif.len()))
            } else {
                None
            };
            let stray_other = other != motif && contains(&tokens, other);
            let stray_own = !plant && contains(&tokens, motif);
            if !stray_other && !stray_own {
                sequences.push(EncodedSequence { tokens, label });
                spans.push(span);
                break;
            }
        }
    }
    Ok(SyntheticCorpus { sequences, spans })
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Sidecar `index,label,motif_start,motif_end` (end exclusive, `-1,-1` if unplanted).
pub fn write_ground_truth(path: impl AsRef<Path>, corpus: &SyntheticCorpus) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "index,label,motif_start,motif_end").map_err(io)?;
    for (i, (s, span)) in corpus.sequences.iter().zip(&corpus.spans).enumerate() {
        let (a, b) = span.map_or((-1, -1), |(a, b)| (a as i64, b as i64));
        writeln!(w, "{i},{},{a},{b}", s.label).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<Option<(usize, usize)>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut spans = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(0, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |m: String| Error::Parse { line, message: m };
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", rec.len())));
        }
        let start: i64 = rec[2].parse().map_err(|_| bad(format!("bad start {:?}", &rec[2])))?;
        let end: i64 = rec[3].parse().map_err(|_| bad(format!("bad end {:?}", &rec[3])))?;
        spans.push(if start < 0 { None } else { Some((start as usize, end as usize)) });
    }
    Ok(spans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode_sequence("ATGC", 4).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(encode_sequence("AN", 4).unwrap(), vec![1, 0, 0, 0]);
        assert_eq!(encode_sequence("atgcn", 5).unwrap(), vec![1, 2, 3, 4, 0]);
        match encode_sequence("ATX", 4) {
            Err(Error::InvalidCharacter { position: 3, ch: 'X' }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(encode_sequence("ATGCA", 4), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn render_inverts_encode(s in "[ACGTN]{0,30}") {
            let tokens = encode_sequence(&s, 30).unwrap();
            let back = render_sequence(&tokens);
            prop_assert_eq!(&back[..s.len()], s.as_str());
            prop_assert!(back[s.len()..].chars().all(|c| c == 'N'));
        }
    }

    #[test]
    fn csv_examples() {
        let two = "sequence,label\nATGC,0\nGG,1\n";
        let c = parse_csv_corpus(two.as_bytes(), 4).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].tokens, vec![1, 2, 3, 4]);
        assert_eq!(c[1], EncodedSequence { tokens: vec![3, 3, 0, 0], label: 1 });

        assert!(parse_csv_corpus("sequence,label\n".as_bytes(), 4).unwrap().is_empty());

        match parse_csv_corpus("sequence,label\nATGC,0\nATGC,2\n".as_bytes(), 4) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_csv_corpus("seq,lab\nA,0\n".as_bytes(), 4),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(parse_csv_corpus("".as_bytes(), 4), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_csv_corpus("sequence,label\nAXG,1\n".as_bytes(), 4),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_csv_corpus("sequence,label\nAG\n".as_bytes(), 4),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn csv_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let corpus = vec![
            EncodedSequence { tokens: vec![1, 2, 0, 4], label: 0 },
            EncodedSequence { tokens: vec![3, 3, 3, 3], label: 1 },
        ];
        write_csv_corpus(&path, &corpus).unwrap();
        assert_eq!(load_csv_corpus(&path, 4).unwrap(), corpus);
    }

    fn balanced(n: usize) -> Vec<EncodedSequence> {
        (0..n)
            .map(|i| EncodedSequence { tokens: vec![(i % 4) as u8 + 1; 4], label: (i % 2) as u8 })
            .collect()
    }

    #[test]
    fn split_is_stratified() {
        let corpus = balanced(100);
        let s = split_corpus(&corpus, 0.8, 42).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (80, 20));
        assert_eq!(s.train.iter().filter(|x| x.label == 0).count(), 40);
        assert_eq!(s.validation.iter().filter(|x| x.label == 1).count(), 10);
        let mut all: Vec<usize> = s.train_indices.iter().chain(&s.validation_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_determinism() {
        let corpus = balanced(60);
        let a = split_corpus(&corpus, 0.5, 1).unwrap();
        assert_eq!(a, split_corpus(&corpus, 0.5, 1).unwrap());
        let b = split_corpus(&corpus, 0.5, 2).unwrap();
        assert_ne!(a.train_indices, b.train_indices);
    }

    #[test]
    fn split_errors() {
        let corpus = balanced(10);
        assert!(matches!(split_corpus(&corpus, 1.0, 0), Err(Error::Config(_))));
        let mut lonely = balanced(10);
        lonely.iter_mut().skip(1).for_each(|s| s.label = 0);
        lonely[0].label = 1;
        assert!(matches!(split_corpus(&lonely, 0.5, 0), Err(Error::Stratification(_))));
    }

    #[test]
    fn batch_examples() {
        let corpus = balanced(130);
        let b = make_batches(&corpus, 64, 42, 0).unwrap();
        assert_eq!(b.iter().map(Batch::size).collect::<Vec<_>>(), vec![64, 64, 2]);
        assert_eq!(b, make_batches(&corpus, 64, 42, 0).unwrap());
        let e1 = make_batches(&corpus, 64, 42, 1).unwrap();
        assert_ne!(b[0].tokens, e1[0].tokens);
        assert!(make_batches(&[], 8, 42, 0).unwrap().is_empty());
        assert!(make_batches(&corpus, 0, 42, 0).is_err());
    }

    #[test]
    fn synthetic_fixed_plant() {
        let spec = SyntheticSpec {
            count: 10,
            length: 20,
            motif_class0: "ATGCATGC".into(),
            motif_class1: "ATGCATGC".into(),
            plant_probability: 1.0,
            position_mode: PositionMode::Fixed(0),
            seed: 3,
        };
        let c = generate_synthetic(&spec).unwrap();
        for (s, span) in c.sequences.iter().zip(&c.spans) {
            assert_eq!(&s.tokens[..8], &[1, 2, 3, 4, 1, 2, 3, 4]);
            assert_eq!(*span, Some((0, 8)));
        }
    }

    #[test]
    fn synthetic_balance_and_background() {
        let spec = SyntheticSpec { count: 1000, length: 100, ..SyntheticSpec::default() };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(c.sequences.iter().filter(|s| s.label == 0).count(), 500);

        let bg = SyntheticSpec { plant_probability: 1e-12, ..spec };
        let c = generate_synthetic(&bg).unwrap();
        let mut freq = [0usize; 5];
        let mut total = 0;
        for (s, span) in c.sequences.iter().zip(&c.spans) {
            assert!(span.is_none());
            for &t in &s.tokens {
                freq[t as usize] += 1;
                total += 1;
            }
        }
        assert_eq!(total, 100_000);
        assert_eq!(freq[0], 0);
        for f in &freq[1..] {
            let p = *f as f64 / total as f64;
            assert!((p - 0.25).abs() < 0.02, "{p}");
        }
    }

    #[test]
    fn synthetic_is_separable_by_motif() {
        let c = generate_synthetic(&SyntheticSpec { count: 200, ..SyntheticSpec::default() }).unwrap();
        let spec = SyntheticSpec::default();
        let m0 = motif_tokens(&spec.motif_class0).unwrap();
        let m1 = motif_tokens(&spec.motif_class1).unwrap();
        for s in &c.sequences {
            assert_eq!(contains(&s.tokens, &m1), s.label == 1);
            assert_eq!(contains(&s.tokens, &m0), s.label == 0);
        }
        assert_eq!(c, generate_synthetic(&SyntheticSpec { count: 200, ..spec }).unwrap());
    }

    #[test]
    fn synthetic_rejects_bad_motif() {
        let spec = SyntheticSpec { motif_class0: "ATGX".into(), ..SyntheticSpec::default() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Spec(_))));
        let spec = SyntheticSpec { motif_class0: "ATGN".into(), ..SyntheticSpec::default() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn ground_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.csv");
        let spec = SyntheticSpec { count: 20, plant_probability: 0.5, ..SyntheticSpec::default() };
        let c = generate_synthetic(&spec).unwrap();
        assert!(c.spans.iter().any(Option::is_none));
        write_ground_truth(&path, &c).unwrap();
        assert_eq!(read_ground_truth(&path).unwrap(), c.spans);
    }
}
