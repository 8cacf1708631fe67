//! Labeled datasets: synthetic generation with controllable label noise,
//! feature-file ingestion and identity-balanced (P x K) batch sampling.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normalize_in_place, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// Samples with identity labels, optional camera ids and a split tag.
///
/// `labels` are the labels used for training (possibly corrupted);
/// `true_labels` keep the generator's ground truth for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    true_labels: Vec<usize>,
    cameras: Option<Vec<u32>>,
    splits: Vec<Split>,
}

impl LabeledDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        true_labels: Vec<usize>,
        cameras: Option<Vec<u32>>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let n = features.rows();
        let lens = [
            ("labels", labels.len()),
            ("true_labels", true_labels.len()),
            ("splits", splits.len()),
            ("cameras", cameras.as_ref().map_or(n, Vec::len)),
        ];
        if let Some((name, len)) = lens.iter().find(|(_, len)| *len != n) {
            return Err(Error::DimMismatch(format!("{len} {name} for {n} samples")));
        }
        Ok(Self {
            features,
            labels,
            true_labels,
            cameras,
            splits,
        })
    }

    /// All samples tagged as training data, labels taken as ground truth.
    pub fn train_only(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        let n = features.rows();
        Self::new(features, labels.clone(), labels, None, vec![Split::Train; n])
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn cameras(&self) -> Option<&[u32]> {
        self.cameras.as_deref()
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// One past the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn num_noisy(&self) -> usize {
        self.labels
            .iter()
            .zip(&self.true_labels)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            true_labels: indices.iter().map(|&i| self.true_labels[i]).collect(),
            cameras: self
                .cameras
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    pub fn split(&self, split: Split) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        self.subset(&idx)
    }

    pub fn train(&self) -> Self {
        self.split(Split::Train)
    }

    pub fn query(&self) -> Self {
        self.split(Split::Query)
    }

    pub fn gallery(&self) -> Self {
        self.split(Split::Gallery)
    }

    /// Replaces the training labels, e.g. with pseudo-labels.
    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                self.len()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.splits = vec![split; self.len()];
        self
    }

    /// Concatenates datasets with matching feature width.
    pub fn concat(parts: &[LabeledDataset]) -> Result<Self> {
        let dim = parts.first().map_or(0, LabeledDataset::dim);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut true_labels = Vec::new();
        let mut splits = Vec::new();
        let any_cam = parts.iter().any(|p| p.cameras.is_some());
        let mut cameras = Vec::new();
        for p in parts {
            if p.dim() != dim {
                return Err(Error::DimMismatch(format!(
                    "feature width {} vs {dim}",
                    p.dim()
                )));
            }
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
            true_labels.extend_from_slice(&p.true_labels);
            splits.extend_from_slice(&p.splits);
            match &p.cameras {
                Some(c) => cameras.extend_from_slice(c),
                None => cameras.extend(std::iter::repeat_n(0, p.len())),
            }
        }
        let n = labels.len();
        Self::new(
            Matrix::new(n, dim, data)?,
            labels,
            true_labels,
            any_cam.then_some(cameras),
            splits,
        )
    }
}

/// Parameters of the synthetic identity generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_ids: usize,
    /// Training samples per identity.
    pub samples_per_id: usize,
    pub input_dim: usize,
    pub intra_class_sigma: f64,
    /// Fraction of training samples whose label is reassigned to another id.
    pub noise_rate: f64,
    pub num_cameras: usize,
    pub camera_shift_sigma: f64,
    /// Held-out noise-free samples per identity for the query split.
    pub query_per_id: usize,
    /// Held-out noise-free samples per identity for the gallery split.
    pub gallery_per_id: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_ids: 50,
            samples_per_id: 40,
            input_dim: 32,
            intra_class_sigma: 0.25,
            noise_rate: 0.0,
            num_cameras: 1,
            camera_shift_sigma: 0.0,
            query_per_id: 4,
            gallery_per_id: 8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::SpecInvalid(m.to_string()));
        if self.num_ids == 0 || self.samples_per_id == 0 || self.input_dim == 0 {
            return fail("num_ids, samples_per_id and input_dim must be positive");
        }
        if !(self.intra_class_sigma >= 0.0 && self.intra_class_sigma.is_finite()) {
            return fail("intra_class_sigma must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return fail("noise_rate must lie in [0, 1)");
        }
        if self.noise_rate > 0.0 && self.num_ids < 2 {
            return fail("label noise needs at least two identities");
        }
        if self.num_cameras == 0 {
            return fail("num_cameras must be at least 1");
        }
        if !(self.camera_shift_sigma >= 0.0 && self.camera_shift_sigma.is_finite()) {
            return fail("camera_shift_sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn num_train(&self) -> usize {
        self.num_ids * self.samples_per_id
    }
}

/// Draws identity prototypes on the unit sphere and Gaussian samples around
/// them, then corrupts exactly `round(noise_rate * N_train)` training labels.
///
/// Query and gallery samples are held out and keep their true labels.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let d = spec.input_dim;
    let mut prototypes = Vec::with_capacity(spec.num_ids);
    while prototypes.len() < spec.num_ids {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if normalize_in_place(&mut v).is_ok() {
            prototypes.push(v);
        }
    }
    let shifts: Vec<Vec<f64>> = (0..spec.num_cameras)
        .map(|_| (0..d).map(|_| spec.camera_shift_sigma * rng.normal()).collect())
        .collect();

    let per_split = [
        (Split::Train, spec.samples_per_id),
        (Split::Query, spec.query_per_id),
        (Split::Gallery, spec.gallery_per_id),
    ];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut cameras = Vec::new();
    let mut splits = Vec::new();
    for (split, count) in per_split {
        for (id, proto) in prototypes.iter().enumerate() {
            for s in 0..count {
                let cam = s % spec.num_cameras;
                for k in 0..d {
                    data.push(proto[k] + spec.intra_class_sigma * rng.normal() + shifts[cam][k]);
                }
                labels.push(id);
                cameras.push(cam as u32);
                splits.push(split);
            }
        }
    }
    let true_labels = labels.clone();
    let n_train = spec.num_train();
    let n_noisy = (spec.noise_rate * n_train as f64).round() as usize;
    let chosen = rng.permutation(n_train);
    for &i in &chosen[..n_noisy] {
        let offset = 1 + rng.below(spec.num_ids - 1);
        labels[i] = (true_labels[i] + offset) % spec.num_ids;
    }
    let n = labels.len();
    LabeledDataset::new(
        Matrix::new(n, d, data)?,
        labels,
        true_labels,
        (spec.num_cameras > 1).then_some(cameras),
        splits,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    /// `id,camera,f_0,...,f_{D-1}` with a header row; camera `-1` means none.
    Text,
    /// Little-endian: magic, version, N, D, N*D `f32`, then N `(u32 id, i32 camera)`.
    Binary,
}

impl FeatureFormat {
    /// `.bin` selects the binary layout, anything else the text layout.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => FeatureFormat::Binary,
            _ => FeatureFormat::Text,
        }
    }
}

pub const FEATURE_MAGIC: [u8; 4] = *b"DCCF";
pub const FEATURE_VERSION: u32 = 1;

/// Writes features, labels and cameras. Splits are not stored.
pub fn save_features(dataset: &LabeledDataset, path: &Path, format: FeatureFormat) -> Result<()> {
    let bytes = match format {
        FeatureFormat::Text => encode_text(dataset).into_bytes(),
        FeatureFormat::Binary => encode_binary(dataset)?,
    };
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a feature file; every sample is tagged with `split`.
pub fn load_features(path: &Path, format: FeatureFormat, split: Split) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (features, labels, cameras) = match format {
        FeatureFormat::Text => decode_text(&bytes)?,
        FeatureFormat::Binary => decode_binary(&bytes)?,
    };
    let cameras = cameras.iter().any(|c| c.is_some()).then(|| {
        cameras.iter().map(|c| c.unwrap_or(0)).collect()
    });
    let n = labels.len();
    LabeledDataset::new(features, labels.clone(), labels, cameras, vec![split; n])
}

fn encode_text(dataset: &LabeledDataset) -> String {
    let mut out = String::from("id,camera");
    for k in 0..dataset.dim() {
        out.push_str(&format!(",f_{k}"));
    }
    out.push('\n');
    for i in 0..dataset.len() {
        let cam = dataset.cameras().map_or(-1, |c| c[i] as i64);
        out.push_str(&format!("{},{cam}", dataset.labels[i]));
        for v in dataset.features.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

type Decoded = (Matrix, Vec<usize>, Vec<Option<u32>>);

fn decode_text(bytes: &[u8]) -> Result<Decoded> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|e| Error::parse("line 1", e.to_string()))?
        .clone();
    if header.len() < 2 || &header[0] != "id" || &header[1] != "camera" {
        return Err(Error::parse("line 1", "header must start with `id,camera`"));
    }
    let dim = header.len() - 2;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut cameras = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(format!("line {line}"), e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let at = || format!("line {line}");
        if record.len() != dim + 2 {
            return Err(Error::parse(
                at(),
                format!("expected {} columns, found {}", dim + 2, record.len()),
            ));
        }
        let id: usize = record[0]
            .parse()
            .map_err(|_| Error::parse(at(), format!("bad id `{}`", &record[0])))?;
        let cam: i64 = record[1]
            .parse()
            .map_err(|_| Error::parse(at(), format!("bad camera `{}`", &record[1])))?;
        labels.push(id);
        cameras.push(u32::try_from(cam).ok());
        for (k, field) in record.iter().skip(2).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(at(), format!("bad value `{field}` in column f_{k}")))?;
            if !v.is_finite() {
                return Err(Error::parse(at(), format!("non-finite value in column f_{k}")));
            }
            data.push(v);
        }
    }
    let n = labels.len();
    Ok((Matrix::new(n, dim, data)?, labels, cameras))
}

fn encode_binary(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    let n = u32::try_from(dataset.len()).map_err(|_| Error::DimMismatch("too many rows".into()))?;
    let d = u32::try_from(dataset.dim()).map_err(|_| Error::DimMismatch("too many columns".into()))?;
    let mut out = Vec::with_capacity(16 + dataset.features.data().len() * 4 + dataset.len() * 8);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for &v in dataset.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for i in 0..dataset.len() {
        let id = u32::try_from(dataset.labels[i]).map_err(|_| Error::DimMismatch("label exceeds u32".into()))?;
        let cam = dataset.cameras().map_or(-1, |c| c[i] as i32);
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&cam.to_le_bytes());
    }
    Ok(out)
}

fn decode_binary(bytes: &[u8]) -> Result<Decoded> {
    let word = |offset: usize| -> Result<[u8; 4]> {
        bytes
            .get(offset..offset + 4)
            .map(|b| b.try_into().unwrap())
            .ok_or_else(|| Error::parse(format!("byte {offset}"), "unexpected end of file"))
    };
    if word(0)? != FEATURE_MAGIC {
        return Err(Error::VersionMismatch("feature file magic bytes".into()));
    }
    let version = u32::from_le_bytes(word(4)?);
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch(format!("feature file version {version}")));
    }
    let n = u32::from_le_bytes(word(8)?) as usize;
    let d = u32::from_le_bytes(word(12)?) as usize;
    let expected = 16 + n * d * 4 + n * 8;
    if bytes.len() != expected {
        return Err(Error::parse(
            format!("byte {}", bytes.len().min(expected)),
            format!("expected {expected} bytes for {n}x{d}, found {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(n * d);
    for k in 0..n * d {
        let v = f32::from_le_bytes(word(16 + 4 * k)?);
        if !v.is_finite() {
            return Err(Error::parse(format!("byte {}", 16 + 4 * k), "non-finite value"));
        }
        data.push(v as f64);
    }
    let tail = 16 + n * d * 4;
    let mut labels = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    for i in 0..n {
        labels.push(u32::from_le_bytes(word(tail + 8 * i)?) as usize);
        cameras.push(u32::try_from(i32::from_le_bytes(word(tail + 8 * i + 4)?)).ok());
    }
    Ok((Matrix::new(n, d, data)?, labels, cameras))
}

/// One epoch of P x K batches as indices into `labels`.
///
/// Each batch holds `p` distinct ids with `k` samples each. Ids are drawn
/// from a stream of shuffled permutations so the first `ceil(ids / p)`
/// batches cover every id; the epoch has at least `n / (p * k)` batches.
/// Samples within an id are drawn without replacement when the id has at
/// least `k` of them and with replacement otherwise.
pub fn pk_sample(labels: &[usize], p: usize, k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_id.entry(y).or_default().push(i);
    }
    let ids: Vec<usize> = by_id.keys().copied().collect();
    if p == 0 || k == 0 || p > ids.len() {
        return Err(Error::TooFewIds {
            requested: p,
            available: ids.len(),
        });
    }
    let num_batches = ids.len().div_ceil(p).max(labels.len() / (p * k));
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut batches = Vec::with_capacity(num_batches);
    for _ in 0..num_batches {
        let mut chosen: Vec<usize> = Vec::with_capacity(p);
        let mut taken: HashSet<usize> = HashSet::with_capacity(p);
        while chosen.len() < p {
            let pos = queue.iter().position(|id| !taken.contains(id));
            match pos {
                Some(pos) => {
                    let id = queue.remove(pos).expect("position is in range");
                    taken.insert(id);
                    chosen.push(id);
                }
                None => queue.extend(rng.permutation(ids.len()).into_iter().map(|j| ids[j])),
            }
        }
        let mut batch = Vec::with_capacity(p * k);
        for id in chosen {
            let members = &by_id[&id];
            if members.len() >= k {
                let mut pool = members.clone();
                for j in 0..k {
                    let pick = j + rng.below(pool.len() - j);
                    pool.swap(j, pick);
                }
                batch.extend_from_slice(&pool[..k]);
            } else {
                batch.extend((0..k).map(|_| members[rng.below(members.len())]));
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn clean_spec_keeps_labels() {
        let data = generate_synthetic(&SynthSpec {
            num_ids: 5,
            samples_per_id: 6,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_eq!(data.labels(), data.true_labels());
        assert_eq!(data.train().len(), 30);
        assert_eq!(data.query().len(), 20);
        assert_eq!(data.gallery().len(), 40);
    }

    #[test]
    fn noise_rate_corrupts_exact_count_of_training_labels() {
        let spec = SynthSpec {
            num_ids: 25,
            samples_per_id: 40,
            noise_rate: 0.2,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.train().num_noisy(), 200);
        assert_eq!(data.query().num_noisy(), 0);
        assert_eq!(data.gallery().num_noisy(), 0);

        let clean = generate_synthetic(&SynthSpec { noise_rate: 0.0, ..spec }).unwrap();
        assert_eq!(clean.features(), data.features());
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = SynthSpec {
            num_ids: 4,
            samples_per_id: 5,
            noise_rate: 0.25,
            num_cameras: 2,
            camera_shift_sigma: 0.1,
            seed: 77,
            ..SynthSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = generate_synthetic(&SynthSpec { seed: 78, ..spec.clone() }).unwrap();
        assert_ne!(generate_synthetic(&spec).unwrap(), other);
    }

    #[test]
    fn zero_sigma_samples_equal_prototypes() {
        let data = generate_synthetic(&SynthSpec {
            num_ids: 3,
            samples_per_id: 4,
            input_dim: 5,
            intra_class_sigma: 0.0,
            ..SynthSpec::default()
        })
        .unwrap();
        let train = data.train();
        for i in 0..train.len() {
            let first = train.labels()[i] * 4;
            assert_eq!(train.features().row(i), train.features().row(first));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SynthSpec { noise_rate: 1.0, ..SynthSpec::default() },
            SynthSpec { num_ids: 1, noise_rate: 0.1, ..SynthSpec::default() },
            SynthSpec { intra_class_sigma: -1.0, ..SynthSpec::default() },
            SynthSpec { num_ids: 0, ..SynthSpec::default() },
        ] {
            assert!(matches!(generate_synthetic(&spec), Err(Error::SpecInvalid(_))));
        }
    }

    #[test]
    fn text_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(&path, "id,camera,f_0,f_1\n3,0,0.5,1.5\n1,-1,2,-4e-1\n").unwrap();
        let ds = load_features(&path, FeatureFormat::Text, Split::Gallery).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[3, 1]);
        assert_eq!(ds.cameras(), Some(&[0, 0][..]));
        assert_eq!(ds.features().row(1), &[2.0, -0.4]);
        assert_eq!(ds.splits(), &[Split::Gallery, Split::Gallery]);

        fs::write(&path, "id,camera,f_0,f_1\n3,0,0.5,1.5\n1,0,2\n").unwrap();
        match load_features(&path, FeatureFormat::Text, Split::Train) {
            Err(Error::ParseError { location, .. }) => assert_eq!(location, "line 3"),
            other => panic!("expected parse error, got {other:?}"),
        }

        fs::write(&path, "id,camera,f_0\n3,0,abc\n").unwrap();
        assert!(matches!(
            load_features(&path, FeatureFormat::Text, Split::Train),
            Err(Error::ParseError { .. })
        ));
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let data = generate_synthetic(&SynthSpec {
            num_ids: 3,
            samples_per_id: 4,
            input_dim: 6,
            num_cameras: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        save_features(&data, &a, FeatureFormat::Binary).unwrap();
        let loaded = load_features(&a, FeatureFormat::Binary, Split::Train).unwrap();
        for (x, y) in loaded.features().data().iter().zip(data.features().data()) {
            assert_eq!(*x, (*y as f32) as f64);
        }
        assert_eq!(loaded.labels(), data.labels());
        assert_eq!(loaded.cameras(), data.cameras());
        save_features(&loaded, &b, FeatureFormat::Binary).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let again = load_features(&b, FeatureFormat::Binary, Split::Train).unwrap();
        assert_eq!(again.features(), loaded.features());
    }

    #[test]
    fn binary_header_layout_and_corruption() {
        let ds = LabeledDataset::train_only(Matrix::from_rows(&[[1.0, 2.0]]).unwrap(), vec![7]).unwrap();
        let bytes = encode_binary(&ds).unwrap();
        assert_eq!(&bytes[..4], b"DCCF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &7u32.to_le_bytes());
        assert_eq!(&bytes[28..32], &(-1i32).to_le_bytes());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_binary(&bad), Err(Error::VersionMismatch(_))));
        assert!(matches!(decode_binary(&bytes[..20]), Err(Error::ParseError { .. })));
    }

    #[test]
    fn text_round_trip_is_exact_for_f64() {
        let data = generate_synthetic(&SynthSpec {
            num_ids: 2,
            samples_per_id: 3,
            input_dim: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        save_features(&data, &path, FeatureFormat::Text).unwrap();
        let loaded = load_features(&path, FeatureFormat::Text, Split::Train).unwrap();
        assert_eq!(loaded.features(), data.features());
        assert_eq!(loaded.cameras(), None);
    }

    fn label_counts(batch: &[usize], labels: &[usize]) -> HashMap<usize, usize> {
        let mut counts = HashMap::new();
        for &i in batch {
            *counts.entry(labels[i]).or_insert(0) += 1;
        }
        counts
    }

    #[test]
    fn pk_small_dataset_single_batch() {
        let labels = [0, 0, 0, 1, 1, 1];
        let batches = pk_sample(&labels, 2, 3, &mut Rng::new(0)).unwrap();
        assert_eq!(batches.len(), 1);
        let mut b = batches[0].clone();
        b.sort_unstable();
        assert_eq!(b, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn pk_repeats_small_ids() {
        let labels = [0, 1, 1, 1, 1];
        let batches = pk_sample(&labels, 2, 4, &mut Rng::new(1)).unwrap();
        let b = &batches[0];
        assert_eq!(b.iter().filter(|&&i| i == 0).count(), 4);
    }

    #[test]
    fn pk_batch_sizes_and_errors() {
        let labels: Vec<usize> = (0..40 * 16).map(|i| i / 16).collect();
        let b = pk_sample(&labels, 16, 16, &mut Rng::new(2)).unwrap();
        assert!(b.iter().all(|x| x.len() == 256));
        let b = pk_sample(&labels, 8, 16, &mut Rng::new(2)).unwrap();
        assert!(b.iter().all(|x| x.len() == 128));
        assert!(matches!(
            pk_sample(&[0, 1], 3, 2, &mut Rng::new(0)),
            Err(Error::TooFewIds { requested: 3, available: 2 })
        ));
    }

    #[test]
    fn pk_epoch_covers_every_id_and_is_deterministic() {
        let labels: Vec<usize> = (0..53 * 5).map(|i| i % 53).collect();
        let a = pk_sample(&labels, 8, 4, &mut Rng::new(9)).unwrap();
        let b = pk_sample(&labels, 8, 4, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let covered: HashSet<usize> = a.iter().flatten().map(|&i| labels[i]).collect();
        assert_eq!(covered.len(), 53);
        for batch in &a {
            let counts = label_counts(batch, &labels);
            assert_eq!(counts.len(), 8);
            assert!(counts.values().all(|&c| c == 4));
        }
    }

    proptest::proptest! {
        #[test]
        fn pk_batches_are_balanced(seed in proptest::prelude::any::<u64>(), ids in 2usize..20, p_frac in 0.1f64..1.0, k in 1usize..6) {
            let mut rng = Rng::new(seed);
            let labels: Vec<usize> = (0..ids * 3).map(|_| rng.below(ids)).collect();
            let present = labels.iter().collect::<HashSet<_>>().len();
            let p = ((present as f64 * p_frac).ceil() as usize).clamp(1, present);
            let batches = pk_sample(&labels, p, k, &mut rng).unwrap();
            for batch in &batches {
                let counts = label_counts(batch, &labels);
                proptest::prop_assert_eq!(counts.len(), p);
                proptest::prop_assert!(counts.values().all(|&c| c == k));
            }
            let covered: HashSet<usize> = batches.iter().flatten().map(|&i| labels[i]).collect();
            proptest::prop_assert_eq!(covered.len(), present);
        }
    }
}
