//! Zero-shot datasets: on-disk layout, validation, a synthetic generator
//! and the episodic sampler.
//!
//! Directory layout:
//!
//! ```text
//! features.bin               little-endian f32, row-major N×H×W×C
//! features.json              {"shape": [N, H, W, C]}
//! labels.csv                 image_index,class_id
//! class_semantics.csv        class_id,a_0,...,a_{K-1}
//! attribute_semantics.csv    attr_id,v_0,...,v_{D-1}
//! splits.json                {"seen": [...], "unseen": [...], "train": [...], "test": [...]}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURES_BIN: &str = "features.bin";
pub const FEATURES_JSON: &str = "features.json";
pub const LABELS_CSV: &str = "labels.csv";
pub const CLASS_SEMANTICS_CSV: &str = "class_semantics.csv";
pub const ATTRIBUTE_SEMANTICS_CSV: &str = "attribute_semantics.csv";
pub const SPLITS_JSON: &str = "splits.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    channels: usize,
    /// N×H×W×C, row-major.
    features: Vec<f32>,
    labels: Vec<u32>,
    /// Class id of each row of `class_semantics`.
    class_ids: Vec<u32>,
    class_semantics: Array2<f64>,
    attribute_semantics: Array2<f64>,
    seen: BTreeSet<u32>,
    unseen: BTreeSet<u32>,
    train: Vec<usize>,
    test: Vec<usize>,
    class_row: HashMap<u32, usize>,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct Splits {
    seen: Vec<u32>,
    unseen: Vec<u32>,
    train: Vec<usize>,
    test: Vec<usize>,
}

/// Raw parts of a [`Dataset`], validated by [`Dataset::new`].
#[derive(Clone, Debug)]
pub struct DatasetParts {
    /// (H, W, C)
    pub grid: (usize, usize, usize),
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub class_ids: Vec<u32>,
    pub class_semantics: Array2<f64>,
    pub attribute_semantics: Array2<f64>,
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn new(parts: DatasetParts) -> Result<Self> {
        let (height, width, channels) = parts.grid;
        let n = parts.labels.len();
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::validation("feature_shape", "H, W and C must be positive"));
        }
        if parts.features.len() != n * height * width * channels {
            return Err(Error::validation(
                "feature_shape",
                format!(
                    "{} floats for {n} images of {height}×{width}×{channels}",
                    parts.features.len()
                ),
            ));
        }
        if parts.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("finite_features", "feature maps contain non-finite values"));
        }
        let seen: BTreeSet<u32> = parts.seen.iter().copied().collect();
        let unseen: BTreeSet<u32> = parts.unseen.iter().copied().collect();
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::validation(
                "seen_unseen_disjoint",
                format!("class {c} is listed as both seen and unseen"),
            ));
        }
        if parts.class_ids.len() != parts.class_semantics.nrows() {
            return Err(Error::validation(
                "class_semantics_rows",
                "class id list and semantic matrix disagree in length",
            ));
        }
        let mut class_row = HashMap::new();
        for (i, &c) in parts.class_ids.iter().enumerate() {
            if class_row.insert(c, i).is_some() {
                return Err(Error::validation("class_semantics_rows", format!("duplicate class id {c}")));
            }
        }
        for c in seen.iter().chain(&unseen) {
            if !class_row.contains_key(c) {
                return Err(Error::validation(
                    "class_semantics_rows",
                    format!("class {c} has no semantic vector"),
                ));
            }
        }
        if parts.class_semantics.iter().any(|v| !v.is_finite())
            || parts.attribute_semantics.iter().any(|v| !v.is_finite())
        {
            return Err(Error::validation("finite_semantics", "semantic matrices contain non-finite values"));
        }
        if parts.attribute_semantics.nrows() != parts.class_semantics.ncols() {
            return Err(Error::validation(
                "attribute_count",
                format!(
                    "{} attribute vectors but class semantics have {} attributes",
                    parts.attribute_semantics.nrows(),
                    parts.class_semantics.ncols()
                ),
            ));
        }
        if let Some(&l) = parts.labels.iter().find(|l| !seen.contains(l) && !unseen.contains(l)) {
            return Err(Error::validation("known_labels", format!("label {l} is neither seen nor unseen")));
        }
        let mut assigned = vec![false; n];
        for &i in parts.train.iter().chain(&parts.test) {
            if i >= n {
                return Err(Error::validation("split_indices", format!("image index {i} out of range")));
            }
            if assigned[i] {
                return Err(Error::validation("split_indices", format!("image {i} assigned twice")));
            }
            assigned[i] = true;
        }
        if let Some(&i) = parts.train.iter().find(|&&i| !seen.contains(&parts.labels[i])) {
            return Err(Error::validation(
                "train_labels_seen",
                format!("training image {i} has unseen label {}", parts.labels[i]),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            features: parts.features,
            labels: parts.labels,
            class_ids: parts.class_ids,
            class_semantics: parts.class_semantics,
            attribute_semantics: parts.attribute_semantics,
            seen,
            unseen,
            train: parts.train,
            test: parts.test,
            class_row,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (H, W, C)
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn num_attributes(&self) -> usize {
        self.class_semantics.ncols()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn class_semantics(&self) -> &Array2<f64> {
        &self.class_semantics
    }

    pub fn attribute_semantics(&self) -> &Array2<f64> {
        &self.attribute_semantics
    }

    pub fn seen_classes(&self) -> &BTreeSet<u32> {
        &self.seen
    }

    pub fn unseen_classes(&self) -> &BTreeSet<u32> {
        &self.unseen
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    pub fn raw_features(&self) -> &[f32] {
        &self.features
    }

    /// Row of `class_semantics` holding class `id`.
    pub fn class_index(&self, id: u32) -> Option<usize> {
        self.class_row.get(&id).copied()
    }

    fn image_slice(&self, i: usize) -> &[f32] {
        let stride = self.height * self.width * self.channels;
        &self.features[i * stride..(i + 1) * stride]
    }

    /// Image `i` as an H×W×C map.
    pub fn feature_map(&self, i: usize) -> Array3<f64> {
        let data = self.image_slice(i).iter().map(|&v| v as f64).collect();
        Array3::from_shape_vec((self.height, self.width, self.channels), data).expect("image stride")
    }

    /// Image `i` flattened to HW×C.
    pub fn feature_rows(&self, i: usize) -> Array2<f64> {
        let data = self.image_slice(i).iter().map(|&v| v as f64).collect();
        Array2::from_shape_vec((self.height * self.width, self.channels), data).expect("image stride")
    }

    /// Class semantics min-max scaled to [0, 1] over the whole matrix.
    pub fn normalized_class_semantics(&self) -> Array2<f64> {
        let (lo, hi) = self
            .class_semantics
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
            return Array2::zeros(self.class_semantics.dim());
        }
        self.class_semantics.mapv(|v| (v - lo) / (hi - lo))
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let read = |name: &str| -> Result<Vec<u8>> {
            let path = root.join(name);
            fs::read(&path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::MissingFile {
                        name: name.to_string(),
                        path: path.clone(),
                    }
                } else {
                    Error::io(&path, e)
                }
            })
        };
        let load_err = |name: &str, reason: String| Error::Load {
            name: name.to_string(),
            reason,
        };

        let header: FeatureHeader = serde_json::from_slice(&read(FEATURES_JSON)?)
            .map_err(|e| load_err(FEATURES_JSON, e.to_string()))?;
        let [n, h, w, c] = header.shape;
        let bytes = read(FEATURES_BIN)?;
        if bytes.len() != n * h * w * c * 4 {
            return Err(load_err(
                FEATURES_BIN,
                format!("expected {} bytes for shape {:?}, found {}", n * h * w * c * 4, header.shape, bytes.len()),
            ));
        }
        let features: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();

        let label_rows = read_numeric_csv(&read(LABELS_CSV)?, LABELS_CSV)?;
        let mut labels = vec![None; n];
        for (idx, vals) in label_rows {
            if vals.len() != 1 {
                return Err(load_err(LABELS_CSV, format!("row for image {idx} must have one class id")));
            }
            let i = idx as usize;
            if i >= n {
                return Err(load_err(LABELS_CSV, format!("image index {i} out of range for {n} images")));
            }
            labels[i] = Some(vals[0] as u32);
        }
        let labels: Vec<u32> = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| load_err(LABELS_CSV, format!("image {i} has no label"))))
            .collect::<Result<_>>()?;

        let (class_ids, class_semantics) =
            keyed_matrix(read_numeric_csv(&read(CLASS_SEMANTICS_CSV)?, CLASS_SEMANTICS_CSV)?, CLASS_SEMANTICS_CSV)?;
        let (_, attribute_semantics) = keyed_matrix(
            read_numeric_csv(&read(ATTRIBUTE_SEMANTICS_CSV)?, ATTRIBUTE_SEMANTICS_CSV)?,
            ATTRIBUTE_SEMANTICS_CSV,
        )?;
        let splits: Splits =
            serde_json::from_slice(&read(SPLITS_JSON)?).map_err(|e| load_err(SPLITS_JSON, e.to_string()))?;

        Dataset::new(DatasetParts {
            grid: (h, w, c),
            features,
            labels,
            class_ids,
            class_semantics,
            attribute_semantics,
            seen: splits.seen,
            unseen: splits.unseen,
            train: splits.train,
            test: splits.test,
        })
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let path = root.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))
        };
        let header = FeatureHeader {
            shape: [self.len(), self.height, self.width, self.channels],
        };
        write(FEATURES_JSON, &serde_json::to_vec(&header).expect("serialize header"))?;
        let mut bytes = Vec::with_capacity(self.features.len() * 4);
        for v in &self.features {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write(FEATURES_BIN, &bytes)?;

        let mut labels = csv::Writer::from_writer(Vec::new());
        labels.write_record(["image_index", "class_id"]).expect("in-memory csv");
        for (i, l) in self.labels.iter().enumerate() {
            labels.write_record([i.to_string(), l.to_string()]).expect("in-memory csv");
        }
        write(LABELS_CSV, &labels.into_inner().expect("flush csv"))?;

        let ids: Vec<u32> = (0..self.attribute_semantics.nrows() as u32).collect();
        write(CLASS_SEMANTICS_CSV, &matrix_csv("class_id", "a", &self.class_ids, &self.class_semantics))?;
        write(ATTRIBUTE_SEMANTICS_CSV, &matrix_csv("attr_id", "v", &ids, &self.attribute_semantics))?;

        let splits = Splits {
            seen: self.seen.iter().copied().collect(),
            unseen: self.unseen.iter().copied().collect(),
            train: self.train.clone(),
            test: self.test.clone(),
        };
        write(SPLITS_JSON, &serde_json::to_vec_pretty(&splits).expect("serialize splits"))?;
        Ok(())
    }
}

fn matrix_csv(key: &str, prefix: &str, ids: &[u32], m: &Array2<f64>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![key.to_string()];
    header.extend((0..m.ncols()).map(|j| format!("{prefix}{j}")));
    w.write_record(&header).expect("in-memory csv");
    for (id, row) in ids.iter().zip(m.rows()) {
        let mut rec = vec![id.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).expect("in-memory csv");
    }
    w.into_inner().expect("flush csv")
}

/// Parses `key,v0,v1,...` rows. A first row whose key is not an integer is
/// treated as a header.
fn read_numeric_csv(bytes: &[u8], name: &str) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(bytes);
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Load {
            name: name.to_string(),
            reason: e.to_string(),
        })?;
        let Some(key) = rec.get(0) else { continue };
        let key = match key.parse::<u64>() {
            Ok(k) => k,
            Err(_) if line == 0 => continue,
            Err(_) => {
                return Err(Error::Load {
                    name: name.to_string(),
                    reason: format!("line {}: bad key `{key}`", line + 1),
                })
            }
        };
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Load {
                name: name.to_string(),
                reason: format!("line {}: {e}", line + 1),
            })?;
        rows.push((key, vals));
    }
    Ok(rows)
}

fn keyed_matrix(rows: Vec<(u64, Vec<f64>)>, name: &str) -> Result<(Vec<u32>, Array2<f64>)> {
    let width = rows.first().map_or(0, |r| r.1.len());
    if let Some((k, _)) = rows.iter().find(|r| r.1.len() != width) {
        return Err(Error::Load {
            name: name.to_string(),
            reason: format!("row {k} has a different width than the first row"),
        });
    }
    let ids = rows.iter().map(|r| r.0 as u32).collect();
    let flat: Vec<f64> = rows.into_iter().flat_map(|r| r.1).collect();
    let m = Array2::from_shape_vec((flat.len() / width.max(1), width), flat).expect("rectangular rows");
    Ok((ids, m))
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub num_attributes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images_per_class: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Probability that a class carries any given attribute.
    pub const ATTRIBUTE_DENSITY: f64 = 0.4;
    /// Norm of the attribute signal injected at its cell.
    pub const SIGNAL_AMPLITUDE: f64 = 8.0;
    /// Fraction of each seen class's images assigned to training.
    pub const TRAIN_FRACTION: f64 = 0.8;

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_seen", self.n_seen),
            ("n_unseen", self.n_unseen),
            ("num_attributes", self.num_attributes),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("images_per_class", self.images_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_attributes > self.channels {
            return Err(Error::Config(format!(
                "number of attributes ({}) exceeds channels ({})",
                self.num_attributes, self.channels
            )));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Builds a dataset whose images carry localized attribute signals.
///
/// Each class receives a random binary attribute signature (no empty or
/// duplicate signatures). Attribute `j` owns a fixed unit direction in
/// channel space; every image of a class adds `SIGNAL_AMPLITUDE · d_j` at one
/// random cell per present attribute, on top of Gaussian noise. The class
/// semantic vector is the signature itself. Seen classes are `0..n_seen`,
/// unseen classes follow.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, c, h, w) = (spec.num_attributes, spec.channels, spec.height, spec.width);
    let n_classes = spec.n_seen + spec.n_unseen;

    let presence = Bernoulli::new(SynthSpec::ATTRIBUTE_DENSITY).expect("valid density");
    let mut signatures: Vec<Vec<bool>> = Vec::with_capacity(n_classes);
    let distinct_possible = if k >= 63 { u64::MAX } else { (1u64 << k) - 1 };
    while signatures.len() < n_classes {
        let sig: Vec<bool> = (0..k).map(|_| presence.sample(&mut rng)).collect();
        let fresh = !signatures.contains(&sig);
        if sig.iter().any(|&b| b) && (fresh || signatures.len() as u64 >= distinct_possible) {
            signatures.push(sig);
        }
    }

    let mut directions = Array2::<f64>::zeros((k, c));
    for mut row in directions.rows_mut() {
        row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }

    let stride = h * w * c;
    let n_images = n_classes * spec.images_per_class;
    let mut features = vec![0f32; n_images * stride];
    let mut labels = Vec::with_capacity(n_images);
    let mut image = vec![0f64; stride];
    for (class, sig) in signatures.iter().enumerate() {
        for _ in 0..spec.images_per_class {
            for v in image.iter_mut() {
                *v = spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
            for (j, _) in sig.iter().enumerate().filter(|(_, &b)| b) {
                let cell = rng.random_range(0..h * w);
                let base = cell * c;
                for ch in 0..c {
                    image[base + ch] += SynthSpec::SIGNAL_AMPLITUDE * directions[[j, ch]];
                }
            }
            let i = labels.len();
            for (dst, &src) in features[i * stride..(i + 1) * stride].iter_mut().zip(&image) {
                *dst = src as f32;
            }
            labels.push(class as u32);
        }
    }

    let class_semantics = Array2::from_shape_fn((n_classes, k), |(i, j)| if signatures[i][j] { 1.0 } else { 0.0 });
    let attribute_semantics = Array2::from_shape_simple_fn((k, k), || rng.sample::<f64, _>(StandardNormal));

    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_train = ((spec.images_per_class as f64 * SynthSpec::TRAIN_FRACTION).round() as usize).max(1);
    for class in 0..n_classes {
        let mut idx: Vec<usize> = (0..spec.images_per_class)
            .map(|i| class * spec.images_per_class + i)
            .collect();
        if class < spec.n_seen {
            idx.shuffle(&mut rng);
            let (tr, te) = idx.split_at(n_train.min(idx.len()));
            train.extend_from_slice(tr);
            test.extend_from_slice(te);
        } else {
            test.extend(idx);
        }
    }
    train.sort_unstable();
    test.sort_unstable();

    Dataset::new(DatasetParts {
        grid: (h, w, c),
        features,
        labels,
        class_ids: (0..n_classes as u32).collect(),
        class_semantics,
        attribute_semantics,
        seen: (0..spec.n_seen as u32).collect(),
        unseen: (spec.n_seen as u32..n_classes as u32).collect(),
        train,
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    /// M: classes per episode.
    pub ways: usize,
    /// N: images per class.
    pub shots: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            ways: 16,
            shots: 2,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn batch_size(&self) -> usize {
        self.ways * self.shots
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.ways == 0 || self.shots == 0 {
            return Err(Error::Config("ways and shots must be positive".into()));
        }
        if self.ways > dataset.seen_classes().len() {
            return Err(Error::Config(format!(
                "ways ({}) exceeds the number of seen classes ({})",
                self.ways,
                dataset.seen_classes().len()
            )));
        }
        Ok(())
    }

    /// `⌈n_train / (M·N)⌉`
    pub fn episodes_per_epoch(&self, dataset: &Dataset) -> usize {
        dataset.train_indices().len().div_ceil(self.batch_size()).max(1)
    }
}

/// One episode: `ways` seen classes × `shots` images each, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image_indices: Vec<usize>,
    /// Each HW×C.
    pub feature_maps: Vec<Array2<f64>>,
    pub labels: Vec<u32>,
    /// Row `i` is the raw class semantic vector of `labels[i]`.
    pub attribute_rows: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Seeded episode generator. Classes are drawn without replacement within an
/// episode and independently across episodes.
pub struct EpisodeSampler<'a> {
    dataset: &'a Dataset,
    spec: EpisodeSpec,
    rng: ChaCha8Rng,
    classes: Vec<u32>,
    pools: BTreeMap<u32, Vec<usize>>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(dataset: &'a Dataset, spec: EpisodeSpec) -> Result<Self> {
        Self::with_stream(dataset, spec, 0)
    }

    /// Sampler on an independent random stream, e.g. one per epoch.
    pub fn with_stream(dataset: &'a Dataset, spec: EpisodeSpec, stream: u64) -> Result<Self> {
        spec.validate(dataset)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let classes: Vec<u32> = dataset.seen_classes().iter().copied().collect();
        let mut pools: BTreeMap<u32, Vec<usize>> = classes.iter().map(|&c| (c, Vec::new())).collect();
        for &i in dataset.train_indices() {
            pools.entry(dataset.labels()[i]).or_default().push(i);
        }
        Ok(Self {
            dataset,
            spec,
            rng,
            classes,
            pools,
        })
    }

    /// Class ids of the next episode, before image selection.
    pub fn sample_classes(&mut self) -> Vec<u32> {
        index::sample(&mut self.rng, self.classes.len(), self.spec.ways)
            .into_iter()
            .map(|i| self.classes[i])
            .collect()
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let classes = self.sample_classes();
        let mut image_indices = Vec::with_capacity(self.spec.batch_size());
        for class in classes {
            let pool = &self.pools[&class];
            if pool.len() < self.spec.shots {
                return Err(Error::Sampling(format!(
                    "class {class} has {} training images, episode needs {}",
                    pool.len(),
                    self.spec.shots
                )));
            }
            for i in index::sample(&mut self.rng, pool.len(), self.spec.shots) {
                image_indices.push(pool[i]);
            }
        }
        Ok(make_batch(self.dataset, image_indices))
    }
}

/// Assembles a batch from explicit image indices.
pub fn make_batch(dataset: &Dataset, image_indices: Vec<usize>) -> Batch {
    let labels: Vec<u32> = image_indices.iter().map(|&i| dataset.labels()[i]).collect();
    let k = dataset.num_attributes();
    let mut attribute_rows = Array2::zeros((labels.len(), k));
    for (mut row, l) in attribute_rows.rows_mut().into_iter().zip(&labels) {
        let idx = dataset.class_index(*l).expect("validated label");
        row.assign(&dataset.class_semantics().row(idx));
    }
    Batch {
        feature_maps: image_indices.iter().map(|&i| dataset.feature_rows(i)).collect(),
        image_indices,
        labels,
        attribute_rows,
    }
}

/// One epoch of episodes, `⌈n_train / (M·N)⌉` batches, from `spec.seed`.
pub fn episode_batches(dataset: &Dataset, spec: &EpisodeSpec) -> Result<Vec<Batch>> {
    let mut sampler = EpisodeSampler::new(dataset, *spec)?;
    (0..spec.episodes_per_epoch(dataset)).map(|_| sampler.next_batch()).collect()
}
