use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{format_shape, parse_usize, read_labels, ContainerWriter, Cursor};
use crate::tensor::Tensor;

/// Which side of the train/test split a dataset came from. Stitching and
/// training take training data; evaluation refuses it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Full,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
            Self::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "test" => Some(Self::Test),
            "full" => Some(Self::Full),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labeled images, samples-first.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
    seed: u64,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        seed: u64,
        split: Split,
    ) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Config(format!(
                "label {bad} outside {} classes",
                class_names.len()
            )));
        }
        if class_names.iter().any(|n| n.is_empty() || n.contains('\n')) {
            return Err(Error::Config("class names must be non-empty single lines".into()));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            seed,
            split,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Per-sample image shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_samples(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            seed: self.seed,
            split: self.split,
        })
    }

    /// `count` samples drawn without replacement by a seeded shuffle.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Self> {
        if count > self.len() {
            return Err(Error::Config(format!(
                "asked for {count} samples from a dataset of {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(count);
        self.subset(&idx)
    }

    /// Keeps the samples whose class the map covers and renames labels to
    /// the map's target classes.
    pub fn relabel(&self, map: &LabelMap) -> Result<Self> {
        if let Some(&max) = map.mapping.keys().next_back() {
            if max >= self.num_classes() {
                return Err(Error::Config(format!(
                    "label map names source class {max} but the dataset has {}",
                    self.num_classes()
                )));
            }
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| map.target(self.labels[i]).is_some())
            .collect();
        if keep.is_empty() {
            return Err(Error::Config("label map keeps no samples".into()));
        }
        let mut out = self.subset(&keep)?;
        for l in &mut out.labels {
            *l = map.target(*l).expect("filtered above");
        }
        out.class_names = map.target_names.clone();
        Ok(out)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Count of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Partial map from source class ids onto a contiguous range of target ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    mapping: BTreeMap<usize, usize>,
    target_names: Vec<String>,
}

impl LabelMap {
    pub fn new(pairs: &[(usize, usize)], target_names: Vec<String>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("empty label map".into()));
        }
        let mut mapping = BTreeMap::new();
        for &(s, t) in pairs {
            if mapping.insert(s, t).is_some_and(|old| old != t) {
                return Err(Error::Config(format!("source class {s} mapped twice")));
            }
        }
        let targets: std::collections::BTreeSet<usize> = mapping.values().copied().collect();
        if targets.iter().copied().ne(0..targets.len()) {
            return Err(Error::Config(format!(
                "target classes must be 0..k without gaps, got {targets:?}"
            )));
        }
        if target_names.len() != targets.len() {
            return Err(Error::Config(format!(
                "{} target names for {} target classes",
                target_names.len(),
                targets.len()
            )));
        }
        Ok(Self {
            mapping,
            target_names,
        })
    }

    pub fn identity(class_names: &[String]) -> Result<Self> {
        let pairs: Vec<_> = (0..class_names.len()).map(|i| (i, i)).collect();
        Self::new(&pairs, class_names.to_vec())
    }

    /// Consecutive runs of `group` source classes become one target class
    /// each, named `super0`, `super1`, ...
    pub fn grouped(num_source: usize, group: usize) -> Result<Self> {
        if group == 0 || !num_source.is_multiple_of(group) {
            return Err(Error::Config(format!(
                "cannot split {num_source} classes into groups of {group}"
            )));
        }
        let pairs: Vec<_> = (0..num_source).map(|s| (s, s / group)).collect();
        let names = (0..num_source / group).map(|t| format!("super{t}")).collect();
        Self::new(&pairs, names)
    }

    pub fn target(&self, source: usize) -> Option<usize> {
        self.mapping.get(&source).copied()
    }

    pub fn num_targets(&self) -> usize {
        self.target_names.len()
    }

    pub fn target_names(&self) -> &[String] {
        &self.target_names
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.mapping.iter().map(|(&s, &t)| (s, t))
    }

    /// Largest source id plus one.
    pub fn source_span(&self) -> usize {
        self.mapping.keys().next_back().map_or(0, |m| m + 1)
    }

    /// `0:0,1:0,2:1` form.
    pub fn to_spec(&self) -> String {
        self.pairs().map(|(s, t)| format!("{s}:{t}")).collect::<Vec<_>>().join(",")
    }

    /// Parses `to_spec` output; target names default to `super<t>`.
    pub fn parse_spec(spec: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (s, t) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("label map entry '{part}' is not src:dst")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad class id '{v}' in label map")))
            };
            pairs.push((parse(s)?, parse(t)?));
        }
        let k = pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0);
        Self::new(&pairs, (0..k).map(|t| format!("super{t}")).collect())
    }
}

/// Sums mapped source probabilities into target classes and renormalizes
/// each row over the mapped mass.
pub fn apply_label_map(outputs: &Tensor, map: &LabelMap) -> Result<Tensor> {
    let (n, k) = outputs.as_matrix_dims()?;
    if map.source_span() > k {
        return Err(Error::Config(format!(
            "label map reads source class {} but outputs have {k} columns",
            map.source_span() - 1
        )));
    }
    let kt = map.num_targets();
    let mut out = vec![0.0; n * kt];
    for (row, dst) in outputs.data().chunks(k).zip(out.chunks_mut(kt)) {
        for (s, t) in map.pairs() {
            dst[t] += row[s];
        }
        let mass: f64 = dst.iter().sum();
        if mass > 0.0 {
            for v in dst.iter_mut() {
                *v /= mass;
            }
        } else {
            dst.fill(1.0 / kt as f64);
        }
    }
    Tensor::new(vec![n, kt], out)
}

fn class_name(class: usize, num_classes: usize) -> String {
    let orients = num_classes.div_ceil(2);
    let deg = 180 * (class % orients) / orients;
    let band = if class / orients == 0 { "lo" } else { "hi" };
    format!("a{deg}-{band}")
}

/// Oriented sinusoidal gratings. Class `c` fixes an orientation
/// (`c mod ⌈k/2⌉` steps over 180°) and a frequency band (`c div ⌈k/2⌉`);
/// every sample draws its own phase, amplitude, small angle and frequency
/// jitter, and pixel noise.
pub fn make_synthetic_dataset(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if per_class == 0 || image_size < 4 {
        return Err(Error::Config("need per_class ≥ 1 and image_size ≥ 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle_jitter = Normal::new(0.0, 0.06).expect("valid sigma");
    let noise = Normal::new(0.0, 1.0).expect("valid sigma");
    let orients = num_classes.div_ceil(2);
    let s = image_size as f64;
    let plane = image_size * image_size;
    let total = num_classes * per_class;
    let mut data = Vec::with_capacity(total * plane);
    let mut labels = Vec::with_capacity(total);
    for _ in 0..per_class {
        for class in 0..num_classes {
            let theta = PI * (class % orients) as f64 / orients as f64 + angle_jitter.sample(&mut rng);
            let cycles = (2.0 + 2.0 * (class / orients) as f64) * rng.random_range(0.92..1.08);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.8..1.2);
            let (ct, st) = (theta.cos(), theta.sin());
            for y in 0..image_size {
                for x in 0..image_size {
                    let u = (x as f64 * ct + y as f64 * st) / s;
                    data.push(amp * (2.0 * PI * cycles * u + phase).sin() + noise.sample(&mut rng));
                }
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![total, 1, image_size, image_size], data)?;
    let names = (0..num_classes).map(|c| class_name(c, num_classes)).collect();
    Dataset::new(images, labels, names, seed, Split::Full)
}

/// Stratified 80:20 split. Within each class a seeded shuffle picks the
/// training samples; both halves keep the original sample order.
pub fn train_test_split(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut is_train = vec![false; data.len()];
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let n_train = (members.len() * 4 + 2) / 5;
        for &i in &members[..n_train] {
            is_train[i] = true;
        }
    }
    let train: Vec<usize> = (0..data.len()).filter(|&i| is_train[i]).collect();
    let test: Vec<usize> = (0..data.len()).filter(|&i| !is_train[i]).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "{} samples are too few for a train/test split",
            data.len()
        )));
    }
    Ok((
        data.subset(&train)?.with_split(Split::Train),
        data.subset(&test)?.with_split(Split::Test),
    ))
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut w = ContainerWriter::new("dataset");
    w.line(format!("seed {}", d.seed));
    w.line(format!("split {}", d.split));
    w.line(format!("samples {} {}", d.len(), format_shape(d.sample_shape())));
    for name in &d.class_names {
        w.line(format!("label {name}"));
    }
    w.tensor("images", &d.images);
    let labels: Vec<f64> = d.labels.iter().map(|&l| l as f64).collect();
    w.tensor(
        "labels",
        &Tensor::new(vec![labels.len()], labels).expect("labels are finite and non-empty"),
    );
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor::decode(bytes)?;
    c.expect_kind("dataset")?;
    let (off, t, _) = c.expect_line("seed")?;
    let seed: u64 = t
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(off, "seed: expected an unsigned integer"))?;
    let (off, t, _) = c.expect_line("split")?;
    let split = t
        .first()
        .and_then(|s| Split::parse(s))
        .ok_or_else(|| Error::parse(off, "split must be train, test or full"))?;
    let (off, t, _) = c.expect_line("samples")?;
    let n = parse_usize(t.first().map_or("", String::as_str), off, "sample count")?;
    let class_names = read_labels(&mut c);
    let off = c.offset();
    let images = c.expect_tensor("images")?;
    let labels_t = c.expect_tensor("labels")?;
    c.expect_done()?;
    if images.shape()[0] != n {
        return Err(Error::parse(off, format!("header says {n} samples, images hold {}", images.shape()[0])));
    }
    let labels = labels_t
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::parse(off, format!("label {v} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, labels, class_names, seed, split).map_err(|e| Error::parse(off, e.to_string()))
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_dataset(d)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
