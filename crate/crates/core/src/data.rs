//! Labelled datasets: synthetic generators with known structure and CSV
//! ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::BatchInput;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    /// `N x d` feature matrix.
    Features(Tensor),
    Tokens(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// One class per position, same length as the matching token sequence.
    Sequences(Vec<Vec<usize>>),
}

/// A batch ready for a forward pass. `targets` follows the row order of the
/// model output's valid rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: BatchInput,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Inputs,
    pub targets: Targets,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(
        inputs: Inputs,
        targets: Targets,
        num_classes: usize,
        split: Split,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let (n_in, n_out) = match (&inputs, &targets) {
            (Inputs::Features(x), Targets::Classes(y)) => (x.rows(), y.len()),
            (Inputs::Tokens(s), Targets::Sequences(y)) => {
                if let Some(i) = s.iter().zip(y).position(|(a, b)| a.len() != b.len()) {
                    return Err(Error::data(format!(
                        "sample {i}: {} tokens but {} targets",
                        s[i].len(),
                        y[i].len()
                    )));
                }
                (s.len(), y.len())
            }
            _ => return Err(Error::data("inputs and targets are of different kinds")),
        };
        if n_in != n_out {
            return Err(Error::data(format!("{n_in} inputs but {n_out} labels")));
        }
        let ds = Self {
            inputs,
            targets,
            num_classes,
            split,
            provenance: provenance.into(),
        };
        if let Some(bad) = ds.all_targets().find(|&t| t >= num_classes) {
            return Err(Error::data(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        match &self.targets {
            Targets::Classes(y) => y.len(),
            Targets::Sequences(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn all_targets(&self) -> Box<dyn Iterator<Item = usize> + '_> {
        match &self.targets {
            Targets::Classes(y) => Box::new(y.iter().copied()),
            Targets::Sequences(y) => Box::new(y.iter().flatten().copied()),
        }
    }

    /// Sequence-level label: the class itself, or the last position's target.
    pub fn sample_label(&self, i: usize) -> usize {
        match &self.targets {
            Targets::Classes(y) => y[i],
            Targets::Sequences(y) => *y[i].last().expect("non-empty sequence"),
        }
    }

    /// Count of each sample-level label.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for i in 0..self.len() {
            h[self.sample_label(i)] += 1;
        }
        h
    }

    pub fn feature_dim(&self) -> Option<usize> {
        match &self.inputs {
            Inputs::Features(x) => Some(x.cols()),
            Inputs::Tokens(_) => None,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::data("empty batch"));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::data(format!("sample {i} out of range for {}", self.len())));
        }
        Ok(match (&self.inputs, &self.targets) {
            (Inputs::Features(x), Targets::Classes(y)) => Batch {
                input: BatchInput::Features(x.select_rows(indices)?),
                targets: indices.iter().map(|&i| y[i]).collect(),
            },
            (Inputs::Tokens(s), Targets::Sequences(y)) => Batch {
                input: BatchInput::Tokens(indices.iter().map(|&i| s[i].clone()).collect()),
                targets: indices.iter().flat_map(|&i| y[i].iter().copied()).collect(),
            },
            _ => unreachable!("checked at construction"),
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let inputs = match &self.inputs {
            Inputs::Features(x) => Inputs::Features(x.select_rows(indices)?),
            Inputs::Tokens(s) => Inputs::Tokens(indices.iter().map(|&i| s[i].clone()).collect()),
        };
        let targets = match &self.targets {
            Targets::Classes(y) => Targets::Classes(indices.iter().map(|&i| y[i]).collect()),
            Targets::Sequences(y) => {
                Targets::Sequences(indices.iter().map(|&i| y[i].clone()).collect())
            }
        };
        Self::new(inputs, targets, self.num_classes, self.split, self.provenance.clone())
    }

    /// SHA-256 of the values (exact bits) and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        match &self.inputs {
            Inputs::Features(x) => {
                for v in x.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
            Inputs::Tokens(s) => {
                for seq in s {
                    h.update((seq.len() as u64).to_le_bytes());
                    for t in seq {
                        h.update((*t as u64).to_le_bytes());
                    }
                }
            }
        }
        for t in self.all_targets() {
            h.update((t as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub val: Option<LabeledDataset>,
    pub test: LabeledDataset,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub size: usize,
    pub checksum: String,
}

/// JSON manifest written next to generated or ingested data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub provenance: String,
    pub seed: Option<u64>,
    pub num_classes: usize,
    pub splits: BTreeMap<String, SplitEntry>,
}

impl DatasetSplits {
    pub fn manifest(&self) -> DatasetManifest {
        let mut splits = BTreeMap::new();
        let mut add = |name: &str, ds: &LabeledDataset| {
            splits.insert(
                name.to_string(),
                SplitEntry {
                    size: ds.len(),
                    checksum: ds.checksum(),
                },
            );
        };
        add("train", &self.train);
        if let Some(v) = &self.val {
            add("val", v);
        }
        add("test", &self.test);
        DatasetManifest {
            provenance: self.train.provenance.clone(),
            seed: self.seed,
            num_classes: self.train.num_classes,
            splits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRelevanceSpec {
    pub d_input: usize,
    pub num_relevant: usize,
    /// Standard deviation of the non-relevant coordinates.
    pub noise_scale: f64,
    pub num_classes: usize,
    pub seed: u64,
}

/// Ground truth returned with a planted task.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTask {
    pub splits: DatasetSplits,
    /// Sorted indices of the coordinates the label depends on.
    pub relevant: Vec<usize>,
    pub rule: PlantedRule,
}

/// `label = argmax_c (A tanh(B x_R) + offset)_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedRule {
    relevant: Vec<usize>,
    mix: Vec<Vec<f64>>,
    readout: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

impl PlantedRule {
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        let inner: Vec<f64> = self
            .mix
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&self.relevant)
                    .map(|(w, &i)| w * x[i])
                    .sum::<f64>()
                    .tanh()
            })
            .collect();
        self.readout
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| row.iter().zip(&inner).map(|(w, h)| w * h).sum::<f64>() + b)
            .collect()
    }

    pub fn label(&self, x: &[f64]) -> usize {
        argmax(&self.scores(x))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl PlantedRelevanceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_relevant == 0 || self.num_relevant > self.d_input {
            return Err(Error::config(format!(
                "num_relevant must be in 1..={}, got {}",
                self.d_input, self.num_relevant
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("planted task needs at least 2 classes"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("noise_scale must be finite and >= 0"));
        }
        Ok(())
    }

    fn draw_rule(&self, rng: &mut ChaCha8Rng) -> PlantedRule {
        let k = self.num_relevant;
        let mut relevant = rand::seq::index::sample(rng, self.d_input, k).into_vec();
        relevant.sort_unstable();
        let scale = 2.0 / (k as f64).sqrt();
        let mix = (0..k)
            .map(|_| (0..k).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let readout = (0..self.num_classes)
            .map(|_| (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut rule = PlantedRule {
            relevant,
            mix,
            readout,
            offset: vec![0.0; self.num_classes],
        };
        // balance classes on a reference draw by nudging the offsets
        let reference: Vec<Vec<f64>> = (0..4096)
            .map(|_| rule.scores(&self.draw_point(rng)))
            .collect();
        let target = 1.0 / self.num_classes as f64;
        for _ in 0..400 {
            let mut freq = vec![0.0; self.num_classes];
            for raw in &reference {
                let shifted: Vec<f64> = raw.iter().zip(&rule.offset).map(|(s, b)| s + b).collect();
                freq[argmax(&shifted)] += 1.0 / reference.len() as f64;
            }
            for (b, f) in rule.offset.iter_mut().zip(&freq) {
                *b -= 0.5 * (f - target);
            }
        }
        rule
    }

    fn draw_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.d_input)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Generates `n_train + n_val + n_test` samples in one stream and slices
    /// them in that order, so splits are disjoint and seed-determined.
    pub fn generate(&self, n_train: usize, n_val: usize, n_test: usize) -> Result<PlantedTask> {
        self.validate()?;
        if n_train == 0 || n_test == 0 {
            return Err(Error::config("train and test splits must be non-empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let rule = self.draw_rule(&mut rng);
        let total = n_train + n_val + n_test;
        let mut xs = Vec::with_capacity(total * self.d_input);
        let mut ys = Vec::with_capacity(total);
        for _ in 0..total {
            let mut x = self.draw_point(&mut rng);
            for (i, v) in x.iter_mut().enumerate() {
                if rule.relevant.binary_search(&i).is_err() {
                    *v *= self.noise_scale;
                }
            }
            ys.push(rule.label(&x));
            xs.extend(x);
        }
        let provenance = format!(
            "planted(d_input={}, k={}, noise={}, classes={}, seed={})",
            self.d_input, self.num_relevant, self.noise_scale, self.num_classes, self.seed
        );
        let d = self.d_input;
        let make = |lo: usize, hi: usize, split: Split| {
            LabeledDataset::new(
                Inputs::Features(Tensor::new(vec![hi - lo, d], xs[lo * d..hi * d].to_vec())?),
                Targets::Classes(ys[lo..hi].to_vec()),
                self.num_classes,
                split,
                provenance.clone(),
            )
        };
        let splits = DatasetSplits {
            train: make(0, n_train, Split::Train)?,
            val: if n_val > 0 {
                Some(make(n_train, n_train + n_val, Split::Val)?)
            } else {
                None
            },
            test: make(n_train + n_val, total, Split::Test)?,
            seed: Some(self.seed),
        };
        Ok(PlantedTask {
            splits,
            relevant: rule.relevant.clone(),
            rule,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeqRule {
    /// Per position: the most frequent token so far (lowest id on ties).
    /// One class per vocabulary entry.
    MajorityToken,
    /// Per position: parity of the number of marker tokens (id 0) so far.
    /// Class 0 is even.
    ParityOfMarker,
}

impl SeqRule {
    pub fn num_classes(self, vocab_size: usize) -> usize {
        match self {
            SeqRule::MajorityToken => vocab_size,
            SeqRule::ParityOfMarker => 2,
        }
    }

    /// Prefix labels for every position of `tokens`.
    pub fn label_prefixes(self, tokens: &[usize], vocab_size: usize) -> Vec<usize> {
        match self {
            SeqRule::MajorityToken => {
                let mut counts = vec![0usize; vocab_size];
                tokens
                    .iter()
                    .map(|&t| {
                        counts[t] += 1;
                        let mut best = 0;
                        for (tok, &c) in counts.iter().enumerate() {
                            if c > counts[best] {
                                best = tok;
                            }
                        }
                        best
                    })
                    .collect()
            }
            SeqRule::ParityOfMarker => {
                let mut markers = 0;
                tokens
                    .iter()
                    .map(|&t| {
                        if t == 0 {
                            markers += 1;
                        }
                        markers % 2
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqTaskSpec {
    pub vocab_size: usize,
    pub context_len: usize,
    pub rule: SeqRule,
    pub seed: u64,
}

impl SeqTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config(format!(
                "vocabulary of {} tokens is degenerate",
                self.vocab_size
            )));
        }
        if self.context_len < 2 {
            return Err(Error::config("context_len must be at least 2"));
        }
        Ok(())
    }

    /// Full-length sequences with per-position targets. Sample `i` is drawn
    /// by rejection until its final label equals a class from a shuffled
    /// round-robin schedule, so sequence labels are balanced to within one
    /// sample per class.
    pub fn generate(&self, n_train: usize, n_val: usize, n_test: usize) -> Result<DatasetSplits> {
        self.validate()?;
        if n_train == 0 || n_test == 0 {
            return Err(Error::config("train and test splits must be non-empty"));
        }
        let classes = self.rule.num_classes(self.vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let provenance = format!(
            "sequence(rule={:?}, vocab={}, context={}, seed={})",
            self.rule, self.vocab_size, self.context_len, self.seed
        );
        let mut make = |n: usize, split: Split| -> Result<LabeledDataset> {
            let mut schedule: Vec<usize> = (0..n).map(|i| i % classes).collect();
            schedule.shuffle(&mut rng);
            let mut seqs = Vec::with_capacity(n);
            let mut targets = Vec::with_capacity(n);
            for want in schedule {
                loop {
                    let s: Vec<usize> = (0..self.context_len)
                        .map(|_| rng.gen_range(0..self.vocab_size))
                        .collect();
                    let y = self.rule.label_prefixes(&s, self.vocab_size);
                    if *y.last().expect("context_len >= 2") == want {
                        seqs.push(s);
                        targets.push(y);
                        break;
                    }
                }
            }
            LabeledDataset::new(
                Inputs::Tokens(seqs),
                Targets::Sequences(targets),
                classes,
                split,
                provenance.clone(),
            )
        };
        let train = make(n_train, Split::Train)?;
        let val = if n_val > 0 { Some(make(n_val, Split::Val)?) } else { None };
        let test = make(n_test, Split::Test)?;
        Ok(DatasetSplits {
            train,
            val,
            test,
            seed: Some(self.seed),
        })
    }
}

/// Expected CSV layout: the listed feature columns followed by `label`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub num_classes: usize,
}

pub const LABEL_COLUMN: &str = "label";

pub fn load_csv(path: &Path, schema: &CsvSchema, split: Split) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::data(format!("{}: {other:?}", path.display())),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: unreadable header: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut expected = schema.features.clone();
    expected.push(LABEL_COLUMN.to_string());
    if header != expected {
        return Err(Error::data(format!(
            "{}: header {header:?} does not match schema {expected:?}",
            path.display()
        )));
    }
    let d = schema.features.len();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        for (c, cell) in record.iter().take(d).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::data(format!(
                    "{} line {line}: column {} has non-numeric value {cell:?}",
                    path.display(),
                    schema.features[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "{} line {line}: non-finite value in column {}",
                    path.display(),
                    schema.features[c]
                )));
            }
            xs.push(v);
        }
        let cell = record[d].trim();
        let label = cell
            .parse::<usize>()
            .ok()
            .filter(|&l| l < schema.num_classes)
            .ok_or_else(|| {
                Error::data(format!(
                    "{} line {line}: unknown label {cell:?} (expected 0..{})",
                    path.display(),
                    schema.num_classes
                ))
            })?;
        ys.push(label);
    }
    if ys.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }
    let n = ys.len();
    LabeledDataset::new(
        Inputs::Features(Tensor::new(vec![n, d], xs)?),
        Targets::Classes(ys),
        schema.num_classes,
        split,
        format!("csv({}, rows={n})", path.display()),
    )
}

/// Writes a feature dataset in the layout [`load_csv`] reads. Values use
/// Rust's shortest round-trip formatting, so re-import is exact.
pub fn write_csv(ds: &LabeledDataset, schema: &CsvSchema, path: &Path) -> Result<()> {
    let (Inputs::Features(x), Targets::Classes(y)) = (&ds.inputs, &ds.targets) else {
        return Err(Error::data("only feature datasets can be exported to CSV"));
    };
    if x.cols() != schema.features.len() {
        return Err(Error::data("schema width does not match dataset"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    let mut header = schema.features.clone();
    header.push(LABEL_COLUMN.to_string());
    w.write_record(&header).map_err(|e| Error::data(e.to_string()))?;
    for (r, label) in y.iter().enumerate() {
        let mut row: Vec<String> = x.row(r).iter().map(|v| v.to_string()).collect();
        row.push(label.to_string());
        w.write_record(&row).map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
