//! Feature sequences, utterance records, batching and the synthetic generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::Matrix;
use crate::{Modality, Task};

/// One modality's frames for one utterance: `len x dim` values plus a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    modality: Modality,
    values: Matrix,
    mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(modality: Modality, values: Matrix, mask: Vec<bool>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            bail!(Validation, "{modality} sequence must have positive length and dimension, got {:?}", values.shape());
        }
        if mask.len() != values.rows() {
            bail!(Validation, "{modality} mask length {} does not match {} frames", mask.len(), values.rows());
        }
        if !mask.iter().any(|&m| m) {
            bail!(Validation, "{modality} mask has no valid frame");
        }
        if let Some(pos) = values.data().iter().position(|v| !v.is_finite()) {
            bail!(Validation, "{modality} value at flat index {pos} is not finite");
        }
        Ok(Self { modality, values, mask })
    }

    /// All frames valid.
    pub fn dense(modality: Modality, values: Matrix) -> Result<Self> {
        let mask = vec![true; values.rows()];
        Self::new(modality, values, mask)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    /// Regression score, or the class index for classification tasks.
    pub label: f64,
    /// Indexed by [`Modality::index`].
    pub features: [FeatureSequence; 3],
}

impl UtteranceRecord {
    pub fn feature(&self, m: Modality) -> &FeatureSequence {
        &self.features[m.index()]
    }
}

/// What a dataset declares about its records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub task: Task,
    /// Inclusive label bounds for regression.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_range: Option<(f64, f64)>,
    /// Feature dimension per modality, in [`Modality::ALL`] order.
    pub dims: [usize; 3],
}

impl DatasetSchema {
    pub fn check_label(&self, id: &str, label: f64) -> Result<()> {
        if !label.is_finite() {
            bail!(Validation, "record {id}: label is not finite");
        }
        match self.task {
            Task::Regression => {
                if let Some((lo, hi)) = self.label_range {
                    if label < lo || label > hi {
                        bail!(Validation, "record {id}: label {label} outside declared range [{lo}, {hi}]");
                    }
                }
            }
            Task::Classification { num_classes } => {
                if libm::trunc(label) != label || label < 0.0 || label >= num_classes as f64 {
                    bail!(Validation, "record {id}: class label {label} not in 0..{num_classes}");
                }
            }
        }
        Ok(())
    }

    pub fn check_record(&self, rec: &UtteranceRecord) -> Result<()> {
        self.check_label(&rec.id, rec.label)?;
        for m in Modality::ALL {
            let f = rec.feature(m);
            if f.modality() != m {
                bail!(Schema, "record {}: slot {m} holds a {} sequence", rec.id, f.modality());
            }
            if f.dim() != self.dims[m.index()] {
                bail!(
                    Validation,
                    "record {}: {m} dimension {} does not match declared {}",
                    rec.id,
                    f.dim(),
                    self.dims[m.index()]
                );
            }
        }
        Ok(())
    }
}

/// One modality of a padded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchModality {
    /// `(batch * len) x dim`, sample-major.
    pub values: Matrix,
    /// `batch * len`; false on padding and on frames masked in the source.
    pub mask: Vec<bool>,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceBatch {
    pub ids: Vec<String>,
    pub labels: Vec<f64>,
    pub modalities: [BatchModality; 3],
}

impl UtteranceBatch {
    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn modality(&self, m: Modality) -> &BatchModality {
        &self.modalities[m.index()]
    }

    /// Pads `records` into one batch, preserving their order.
    pub fn from_records(records: &[&UtteranceRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let modalities = Modality::ALL.map(|m| {
            let len = records.iter().map(|r| r.feature(m).len()).max().unwrap_or(0);
            let dim = records[0].feature(m).dim();
            let mut values = Matrix::zeros(records.len() * len, dim);
            let mut mask = vec![false; records.len() * len];
            for (b, rec) in records.iter().enumerate() {
                let f = rec.feature(m);
                for t in 0..f.len() {
                    values.row_mut(b * len + t).copy_from_slice(f.values().row(t));
                    mask[b * len + t] = f.mask()[t];
                }
            }
            BatchModality { values, mask, len }
        });
        for m in Modality::ALL {
            let dim = records[0].feature(m).dim();
            if let Some(r) = records.iter().find(|r| r.feature(m).dim() != dim) {
                bail!(Shape, "record {} has {m} dimension {} but batch uses {dim}", r.id, r.feature(m).dim());
            }
        }
        Ok(Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            labels: records.iter().map(|r| r.label).collect(),
            modalities,
        })
    }
}

/// Iterator over padded batches. The last partial batch is kept.
pub struct Batches<'a> {
    records: &'a [UtteranceRecord],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = UtteranceBatch;

    fn next(&mut self) -> Option<UtteranceBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let refs: Vec<&UtteranceRecord> = self.order[self.pos..end].iter().map(|&i| &self.records[i]).collect();
        self.pos = end;
        Some(UtteranceBatch::from_records(&refs).expect("records validated when the iterator was built"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let remaining = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (remaining, Some(remaining))
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn make_batches(records: &[UtteranceRecord], batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches<'_>> {
    if batch_size == 0 {
        bail!(Validation, "batch size must be at least 1");
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for m in Modality::ALL {
        let dim = records[0].feature(m).dim();
        if let Some(r) = records.iter().find(|r| r.feature(m).dim() != dim) {
            bail!(Shape, "record {} has {m} dimension {} but the first record has {dim}", r.id, r.feature(m).dim());
        }
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    Ok(Batches { records, order, batch_size, pos: 0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentDims {
    pub shared: usize,
    pub effective: usize,
    pub nuisance: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelWeights {
    pub shared: f64,
    pub text: f64,
    pub audio: f64,
    pub visual: f64,
}

impl LabelWeights {
    pub fn modality(&self, m: Modality) -> f64 {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

/// Parameters of the synthetic generator.
///
/// Every sample draws a shared factor `s`, one effective factor `p_m` and one
/// nuisance factor `n_m` per modality, all standard normal. The label is
/// `w_s * mean(s) + sum_m w_m * mean(p_m)`; nuisance factors never enter it.
/// Modality `m` observes `[s, p_m, n_m] M_m + c_m + noise` in every frame,
/// with `M_m`, `c_m` fixed per modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub seq_lengths: [usize; 3],
    pub feature_dims: [usize; 3],
    pub latent_dims: LatentDims,
    pub label_weights: LabelWeights,
    pub noise_std: f64,
    pub seed: u64,
    /// Seed of the nuisance stream; defaults to a value derived from `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nuisance_seed: Option<u64>,
    /// Pass the affine image through `tanh`.
    #[serde(default)]
    pub nonlinear: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_samples: 1000,
            seq_lengths: [4, 4, 4],
            feature_dims: [24, 12, 16],
            latent_dims: LatentDims { shared: 4, effective: 2, nuisance: 4 },
            label_weights: LabelWeights { shared: 1.5, text: 0.5, audio: 0.5, visual: 0.5 },
            noise_std: 0.1,
            seed: 7,
            nuisance_seed: None,
            nonlinear: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            bail!(Validation, "num_samples must be positive");
        }
        for m in Modality::ALL {
            if self.seq_lengths[m.index()] == 0 {
                bail!(Validation, "{m} sequence length must be positive");
            }
            if self.feature_dims[m.index()] == 0 {
                bail!(Validation, "{m} feature dimension must be positive");
            }
        }
        let l = self.latent_dims;
        if l.shared == 0 || l.effective == 0 || l.nuisance == 0 {
            bail!(Validation, "latent dimensions must be positive, got {l:?}");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            bail!(Validation, "noise_std must be a nonnegative finite number");
        }
        let w = self.label_weights;
        if ![w.shared, w.text, w.audio, w.visual].iter().all(|v| v.is_finite()) {
            bail!(Validation, "label weights must be finite");
        }
        Ok(())
    }

    pub fn schema(&self, label_range: (f64, f64)) -> DatasetSchema {
        DatasetSchema { task: Task::Regression, label_range: Some(label_range), dims: self.feature_dims }
    }
}

/// The latent draws behind one synthetic record.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub shared: Vec<f64>,
    pub effective: [Vec<f64>; 3],
    pub nuisance: [Vec<f64>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub records: Vec<UtteranceRecord>,
    pub latents: Vec<Latents>,
}

impl SyntheticDataset {
    /// Symmetric integer bound covering every label, at least 3.
    pub fn label_range(&self) -> (f64, f64) {
        let max = self.records.iter().map(|r| r.label.abs()).fold(3.0_f64, f64::max);
        let r = libm::ceil(max);
        (-r, r)
    }
}

const STREAM_MIXING: u64 = 1;
const STREAM_LATENT: u64 = 2;
const STREAM_NUISANCE: u64 = 3;
const STREAM_NOISE: u64 = 4;
const NUISANCE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Label of a sample computed from its latents.
pub fn synthetic_label(weights: &LabelWeights, latents: &Latents) -> f64 {
    let mut y = weights.shared * mean(&latents.shared);
    for m in Modality::ALL {
        y += weights.modality(m) * mean(&latents.effective[m.index()]);
    }
    y
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let l = spec.latent_dims;
    let latent_width = l.shared + l.effective + l.nuisance;
    let mut mixing_rng = stream(spec.seed, STREAM_MIXING);
    let gain = 1.0 / libm::sqrt(latent_width as f64);
    let mixing: Vec<(Matrix, Vec<f64>)> = Modality::ALL
        .iter()
        .map(|m| {
            let d = spec.feature_dims[m.index()];
            let w = Matrix::from_vec(latent_width, d, normals(&mut mixing_rng, latent_width * d)).scale(gain);
            let offset = normals(&mut mixing_rng, d);
            (w, offset)
        })
        .collect();

    let mut latent_rng = stream(spec.seed, STREAM_LATENT);
    let mut nuisance_rng =
        stream(spec.nuisance_seed.unwrap_or(spec.seed ^ NUISANCE_SEED_SALT), STREAM_NUISANCE);
    let mut noise_rng = stream(spec.seed, STREAM_NOISE);

    let mut records = Vec::with_capacity(spec.num_samples);
    let mut all_latents = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let shared = normals(&mut latent_rng, l.shared);
        let effective = [(); 3].map(|_| normals(&mut latent_rng, l.effective));
        let nuisance = [(); 3].map(|_| normals(&mut nuisance_rng, l.nuisance));
        let latents = Latents { shared, effective, nuisance };
        let label = synthetic_label(&spec.label_weights, &latents);

        let mut features = Vec::with_capacity(3);
        for m in Modality::ALL {
            let (w, offset) = &mixing[m.index()];
            let mut z = Vec::with_capacity(latent_width);
            z.extend_from_slice(&latents.shared);
            z.extend_from_slice(&latents.effective[m.index()]);
            z.extend_from_slice(&latents.nuisance[m.index()]);
            let clean = Matrix::row_vector(&z).matmul(w);
            let len = spec.seq_lengths[m.index()];
            let d = spec.feature_dims[m.index()];
            let mut values = Matrix::zeros(len, d);
            for t in 0..len {
                for c in 0..d {
                    let e: f64 = noise_rng.sample(StandardNormal);
                    let mut x = clean.get(0, c) + offset[c] + spec.noise_std * e;
                    if spec.nonlinear {
                        x = libm::tanh(x);
                    }
                    values.set(t, c, x);
                }
            }
            features.push(FeatureSequence::dense(m, values)?);
        }
        let features: [FeatureSequence; 3] =
            features.try_into().map_err(|_| Error::Validation(String::from("modality count")))?;
        records.push(UtteranceRecord { id: format!("syn{i:06}"), label, features });
        all_latents.push(latents);
    }
    Ok(SyntheticDataset { records, latents: all_latents })
}

/// Splits records into consecutive train/valid/test ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataSplits {
    pub train: Vec<UtteranceRecord>,
    pub valid: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

impl DataSplits {
    pub fn from_sizes(mut records: Vec<UtteranceRecord>, sizes: SplitSizes) -> Result<Self> {
        if records.len() != sizes.total() {
            bail!(Validation, "{} records cannot be split into {sizes:?}", records.len());
        }
        let test = records.split_off(sizes.train + sizes.valid);
        let valid = records.split_off(sizes.train);
        Ok(Self { train: records, valid, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(m: Modality, rows: &[&[f64]]) -> FeatureSequence {
        FeatureSequence::dense(m, Matrix::from_rows(rows)).unwrap()
    }

    fn record(id: &str, len: usize) -> UtteranceRecord {
        let rows: Vec<Vec<f64>> = (0..len).map(|t| vec![t as f64 + 1.0, 0.5]).collect();
        let rows: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        UtteranceRecord {
            id: id.into(),
            label: 0.0,
            features: [seq(Modality::Text, &rows), seq(Modality::Audio, &rows), seq(Modality::Visual, &rows)],
        }
    }

    #[test]
    fn rejects_nan_and_empty_masks() {
        let bad = Matrix::from_rows(&[[1.0, f64::NAN]]);
        assert!(matches!(FeatureSequence::dense(Modality::Text, bad), Err(Error::Validation(_))));
        let ok = Matrix::from_rows(&[[1.0, 2.0]]);
        assert!(FeatureSequence::new(Modality::Text, ok, vec![false]).is_err());
    }

    #[test]
    fn batches_keep_last_partial_batch() {
        let recs: Vec<_> = (0..5).map(|i| record(&format!("r{i}"), 2)).collect();
        let sizes: Vec<usize> = make_batches(&recs, 2, 0, false).unwrap().map(|b| b.size()).collect();
        assert_eq!(sizes, [2, 2, 1]);
    }

    #[test]
    fn padding_masks_trailing_frames() {
        let recs = [record("a", 3), record("b", 5)];
        let batch = make_batches(&recs, 2, 0, false).unwrap().next().unwrap();
        let t = batch.modality(Modality::Text);
        assert_eq!(t.len, 5);
        assert_eq!(&t.mask[..5], &[true, true, true, false, false]);
        assert_eq!(&t.mask[5..], &[true; 5]);
        assert_eq!(t.values.row(2), &[3.0, 0.5]);
        assert_eq!(t.values.row(3), &[0.0, 0.0]);
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let recs: Vec<_> = (0..20).map(|i| record(&format!("r{i}"), 1)).collect();
        let order = |seed| -> Vec<String> { make_batches(&recs, 3, seed, true).unwrap().flat_map(|b| b.ids).collect() };
        assert_eq!(order(11), order(11));
        assert_ne!(order(11), order(12));
        let mut ids = order(11);
        ids.sort();
        let mut expected: Vec<String> = recs.iter().map(|r| r.id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn empty_dataset_and_zero_batch_size_are_errors() {
        assert!(matches!(make_batches(&[], 2, 0, false), Err(Error::EmptyDataset)));
        let recs = [record("a", 1)];
        assert!(make_batches(&recs, 0, 0, false).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_in_seed() {
        let spec = SyntheticSpec { num_samples: 20, seed: 7, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_shared_only_label_is_mean_of_shared_factor() {
        let spec = SyntheticSpec {
            num_samples: 50,
            noise_std: 0.0,
            label_weights: LabelWeights { shared: 1.0, text: 0.0, audio: 0.0, visual: 0.0 },
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for (rec, lat) in ds.records.iter().zip(&ds.latents) {
            let expected = lat.shared.iter().sum::<f64>() / lat.shared.len() as f64;
            assert_eq!(rec.label, expected);
        }
    }

    #[test]
    fn labels_ignore_nuisance_redraws() {
        let spec = SyntheticSpec { num_samples: 40, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&SyntheticSpec { nuisance_seed: Some(99), ..spec }).unwrap();
        assert_ne!(a.latents[0].nuisance, b.latents[0].nuisance);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.label, rb.label);
        }
    }

    #[test]
    fn nonpositive_dims_are_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.feature_dims[1] = 0;
        assert!(matches!(generate_synthetic(&spec), Err(Error::Validation(_))));
        let mut spec = SyntheticSpec::default();
        spec.latent_dims.nuisance = 0;
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn schema_checks_label_range() {
        let schema = DatasetSchema { task: Task::Regression, label_range: Some((-3.0, 3.0)), dims: [2, 2, 2] };
        assert!(schema.check_label("x", 1.6).is_ok());
        assert!(schema.check_label("x", 3.5).is_err());
        let cls = DatasetSchema { task: Task::Classification { num_classes: 3 }, label_range: None, dims: [2, 2, 2] };
        assert!(cls.check_label("x", 2.0).is_ok());
        assert!(cls.check_label("x", 3.0).is_err());
        assert!(cls.check_label("x", 0.5).is_err());
    }
}
