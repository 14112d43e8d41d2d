//! Synthetic blob data, class imbalance, label-noise injection and the
//! line-oriented dataset file format.
//!
//! File layout:
//!
//! ```text
//! #ulc-dataset v1 N C d
//! #meta kind=symmetric rate=0.5 convention=exclude-self imbalance_ratio=10 minority=0,3 asym=- seed=7 noise_seed=11
//! f_1,...,f_d,true_label,noisy_label
//! ```
//!
//! The `#meta` line is optional on load (defaults to a noise-free spec).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UlcError};
use crate::rng::{derive_seed, rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    None,
    Symmetric,
    Asymmetric,
}

impl NoiseKind {
    fn as_str(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Asymmetric => "asymmetric",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(NoiseKind::None),
            "symmetric" | "sym" => Some(NoiseKind::Symmetric),
            "asymmetric" | "asym" => Some(NoiseKind::Asymmetric),
            _ => None,
        }
    }
}

/// Where a symmetric flip may land.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseConvention {
    /// Flip to one of the C-1 other classes.
    #[default]
    ExcludeSelf,
    /// Resample uniformly over all C classes (may keep the original label).
    IncludeSelf,
}

impl NoiseConvention {
    fn as_str(self) -> &'static str {
        match self {
            NoiseConvention::ExcludeSelf => "exclude-self",
            NoiseConvention::IncludeSelf => "include-self",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "exclude-self" => Some(NoiseConvention::ExcludeSelf),
            "include-self" => Some(NoiseConvention::IncludeSelf),
            _ => None,
        }
    }
}

/// Provenance of the noise and imbalance applied to a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub convention: NoiseConvention,
    /// `asym_map[c] = Some(t)` sends class `c` to `t`.
    pub asym_map: Vec<Option<usize>>,
    pub imbalance_ratio: f64,
    /// Sorted.
    pub minority_classes: Vec<usize>,
    pub seed: u64,
    pub noise_seed: Option<u64>,
}

impl NoiseSpec {
    pub fn clean(seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::None,
            rate: 0.0,
            convention: NoiseConvention::ExcludeSelf,
            asym_map: Vec::new(),
            imbalance_ratio: 1.0,
            minority_classes: Vec::new(),
            seed,
            noise_seed: None,
        }
    }
}

/// Feature matrix with latent true labels and observed (possibly noisy) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub true_labels: Vec<usize>,
    pub noisy_labels: Vec<usize>,
    pub is_noisy: Vec<bool>,
    pub class_count: usize,
    pub meta: NoiseSpec,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        true_labels: Vec<usize>,
        noisy_labels: Vec<usize>,
        class_count: usize,
        meta: NoiseSpec,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(UlcError::Config("dataset must contain at least one sample".into()));
        }
        if features.ncols() == 0 {
            return Err(UlcError::Config("feature dimension must be at least 1".into()));
        }
        if class_count < 2 {
            return Err(UlcError::Config(format!("class count {class_count} < 2")));
        }
        if true_labels.len() != n || noisy_labels.len() != n {
            return Err(UlcError::Shape(format!(
                "{} feature rows but {} true / {} noisy labels",
                n,
                true_labels.len(),
                noisy_labels.len()
            )));
        }
        if let Some(&bad) = true_labels.iter().chain(&noisy_labels).find(|&&l| l >= class_count) {
            return Err(UlcError::Config(format!("label {bad} >= class count {class_count}")));
        }
        let is_noisy = true_labels.iter().zip(&noisy_labels).map(|(t, o)| t != o).collect();
        Ok(Dataset {
            features,
            true_labels,
            noisy_labels,
            is_noisy,
            class_count,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Per-class counts of the given label vector.
    pub fn class_counts(&self, labels: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn noise_fraction(&self) -> f64 {
        self.is_noisy.iter().filter(|&&b| b).count() as f64 / self.len() as f64
    }

    fn with_noisy_labels(&self, noisy_labels: Vec<usize>, meta: NoiseSpec) -> Dataset {
        let is_noisy = self
            .true_labels
            .iter()
            .zip(&noisy_labels)
            .map(|(t, o)| t != o)
            .collect();
        Dataset {
            features: self.features.clone(),
            true_labels: self.true_labels.clone(),
            noisy_labels,
            is_noisy,
            class_count: self.class_count,
            meta,
        }
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), idx),
            true_labels: idx.iter().map(|&i| self.true_labels[i]).collect(),
            noisy_labels: idx.iter().map(|&i| self.noisy_labels[i]).collect(),
            is_noisy: idx.iter().map(|&i| self.is_noisy[i]).collect(),
            class_count: self.class_count,
            meta: self.meta.clone(),
        }
    }
}

/// Isotropic Gaussian blobs, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub class_count: usize,
    pub dim: usize,
    pub per_class_count: Vec<usize>,
    pub class_centers: Vec<Vec<f64>>,
    pub center_spread: f64,
    pub within_std: f64,
    pub seed: u64,
}

impl BlobConfig {
    /// Centers drawn i.i.d. `N(0, center_spread^2)` per coordinate from `seed`.
    pub fn with_random_centers(
        class_count: usize,
        dim: usize,
        per_class: usize,
        center_spread: f64,
        within_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(center_spread > 0.0) {
            return Err(UlcError::Config(format!("center_spread {center_spread} must be > 0")));
        }
        let normal = Normal::new(0.0, center_spread).map_err(|e| UlcError::Config(format!("center_spread: {e}")))?;
        let mut rng = rng_from(derive_seed(seed, stream::CENTERS));
        let class_centers = (0..class_count)
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Ok(BlobConfig {
            class_count,
            dim,
            per_class_count: vec![per_class; class_count],
            class_centers,
            center_spread,
            within_std,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(UlcError::Config(format!("class_count {} < 2", self.class_count)));
        }
        if self.dim == 0 {
            return Err(UlcError::Config("dim must be >= 1".into()));
        }
        if self.per_class_count.len() != self.class_count {
            return Err(UlcError::Config(format!(
                "per_class_count has {} entries for {} classes",
                self.per_class_count.len(),
                self.class_count
            )));
        }
        if let Some(c) = self.per_class_count.iter().position(|&n| n == 0) {
            return Err(UlcError::Config(format!("class {c} has zero samples")));
        }
        if self.class_centers.len() != self.class_count || self.class_centers.iter().any(|c| c.len() != self.dim) {
            return Err(UlcError::Config(format!(
                "class_centers must be {}x{}",
                self.class_count, self.dim
            )));
        }
        if !(self.within_std > 0.0) || !self.within_std.is_finite() {
            return Err(UlcError::Config(format!("within_std {} must be > 0", self.within_std)));
        }
        Ok(())
    }
}

/// Draws `per_class_count[c]` points around each center; rows are grouped by class.
pub fn generate_blobs(config: &BlobConfig) -> Result<Dataset> {
    generate_blobs_with_stream(config, stream::SAMPLES)
}

/// Same centers, independent draw; used to build a balanced held-out set.
pub fn generate_blobs_with_stream(config: &BlobConfig, stream_tag: u64) -> Result<Dataset> {
    config.validate()?;
    let n: usize = config.per_class_count.iter().sum();
    let normal = Normal::new(0.0, config.within_std).map_err(|e| UlcError::Config(format!("within_std: {e}")))?;
    let mut rng = rng_from(derive_seed(config.seed, stream_tag));
    let mut features = Array2::zeros((n, config.dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (c, &count) in config.per_class_count.iter().enumerate() {
        for _ in 0..count {
            for (j, center) in config.class_centers[c].iter().enumerate() {
                features[[row, j]] = center + normal.sample(&mut rng);
            }
            labels.push(c);
            row += 1;
        }
    }
    Dataset::new(
        features,
        labels.clone(),
        labels,
        config.class_count,
        NoiseSpec::clean(config.seed),
    )
}

/// Picks `floor(C/2)` classes at random and keeps `ceil(n_c / ratio)` of their samples.
pub fn resample_imbalance(data: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio >= 1.0) || !ratio.is_finite() {
        return Err(UlcError::Config(format!("imbalance ratio {ratio} must be >= 1")));
    }
    if data.is_noisy.iter().any(|&b| b) {
        return Err(UlcError::Contract(
            "imbalance must be applied before label noise".into(),
        ));
    }
    let c = data.class_count;
    let mut rng = rng_from(derive_seed(seed, stream::IMBALANCE));
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut rng);
    let mut minority: Vec<usize> = classes[..c / 2].to_vec();
    minority.sort_unstable();

    let mut keep = vec![true; data.len()];
    for &m in &minority {
        let members: Vec<usize> = (0..data.len()).filter(|&i| data.true_labels[i] == m).collect();
        let retain = (members.len() as f64 / ratio).ceil() as usize;
        let mut order = members.clone();
        order.shuffle(&mut rng);
        for &i in &order[retain..] {
            keep[i] = false;
        }
    }
    let idx: Vec<usize> = (0..data.len()).filter(|&i| keep[i]).collect();
    let mut out = data.select(&idx);
    out.meta.imbalance_ratio = ratio;
    out.meta.minority_classes = minority;
    Ok(out)
}

/// Each sample flips with probability `rate`; the target is uniform over the
/// other classes (or over all classes under [`NoiseConvention::IncludeSelf`]).
pub fn inject_symmetric_noise(data: &Dataset, rate: f64, convention: NoiseConvention, seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    let c = data.class_count;
    let mut rng = rng_from(derive_seed(seed, stream::NOISE));
    let noisy: Vec<usize> = data
        .true_labels
        .iter()
        .map(|&y| {
            if rng.random::<f64>() >= rate {
                return y;
            }
            match convention {
                NoiseConvention::ExcludeSelf => {
                    let k = rng.random_range(0..c - 1);
                    if k >= y {
                        k + 1
                    } else {
                        k
                    }
                }
                NoiseConvention::IncludeSelf => rng.random_range(0..c),
            }
        })
        .collect();
    let mut meta = data.meta.clone();
    meta.kind = NoiseKind::Symmetric;
    meta.rate = rate;
    meta.convention = convention;
    meta.noise_seed = Some(seed);
    Ok(data.with_noisy_labels(noisy, meta))
}

/// Samples of class `c` with `asym_map[c] = Some(t)` flip to `t` with probability `rate`.
pub fn inject_asymmetric_noise(data: &Dataset, rate: f64, asym_map: &[Option<usize>], seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    let c = data.class_count;
    if asym_map.len() > c {
        return Err(UlcError::Config(format!(
            "asymmetric map has {} entries for {c} classes",
            asym_map.len()
        )));
    }
    for (from, to) in asym_map.iter().enumerate() {
        match *to {
            Some(t) if t == from => {
                return Err(UlcError::Config(format!("asymmetric map sends class {from} to itself")))
            }
            Some(t) if t >= c => return Err(UlcError::Config(format!("asymmetric map target {t} >= {c}"))),
            _ => {}
        }
    }
    let mut rng = rng_from(derive_seed(seed, stream::NOISE));
    let noisy = data
        .true_labels
        .iter()
        .map(|&y| match asym_map.get(y).copied().flatten() {
            Some(t) if rng.random::<f64>() < rate => t,
            _ => y,
        })
        .collect();
    let mut meta = data.meta.clone();
    meta.kind = NoiseKind::Asymmetric;
    meta.rate = rate;
    meta.asym_map = {
        let mut m = asym_map.to_vec();
        m.resize(c, None);
        m
    };
    meta.noise_seed = Some(seed);
    Ok(data.with_noisy_labels(noisy, meta))
}

/// `c -> c + 1 (mod C)` for every class.
pub fn cyclic_asym_map(class_count: usize) -> Vec<Option<usize>> {
    (0..class_count).map(|c| Some((c + 1) % class_count)).collect()
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(UlcError::Config(format!("noise rate {rate} outside [0, 1]")))
    }
}

const HEADER_TAG: &str = "#ulc-dataset";
const META_TAG: &str = "#meta";

fn format_usize_list(xs: &[usize]) -> String {
    if xs.is_empty() {
        "-".to_string()
    } else {
        xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn format_asym(map: &[Option<usize>]) -> String {
    if map.iter().all(Option::is_none) {
        return "-".to_string();
    }
    map.iter()
        .enumerate()
        .filter_map(|(from, to)| to.map(|t| format!("{from}>{t}")))
        .collect::<Vec<_>>()
        .join(",")
}

/// Text encoding of a dataset. Floats use the shortest round-trip representation.
pub fn to_text(data: &Dataset) -> String {
    let m = &data.meta;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{HEADER_TAG} v1 {} {} {}",
        data.len(),
        data.class_count,
        data.dim()
    );
    let _ = writeln!(
        out,
        "{META_TAG} kind={} rate={} convention={} imbalance_ratio={} minority={} asym={} seed={} noise_seed={}",
        m.kind.as_str(),
        m.rate,
        m.convention.as_str(),
        m.imbalance_ratio,
        format_usize_list(&m.minority_classes),
        format_asym(&m.asym_map),
        m.seed,
        m.noise_seed.map_or("-".to_string(), |s| s.to_string()),
    );
    for (i, row) in data.features.outer_iter().enumerate() {
        for v in row.iter() {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{}", data.true_labels[i], data.noisy_labels[i]);
    }
    out
}

pub fn save(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_text(data)).map_err(|e| UlcError::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| UlcError::io(path, e))?;
    from_text(&text)
}

fn parse_err(line: usize, message: impl Into<String>) -> UlcError {
    UlcError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_meta(line_no: usize, line: &str, class_count: usize) -> Result<NoiseSpec> {
    let mut meta = NoiseSpec::clean(0);
    for field in line.split_whitespace().skip(1) {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("meta field `{field}` is not key=value")))?;
        let bad = |what: &str| parse_err(line_no, format!("meta field `{key}`: invalid {what} `{value}`"));
        match key {
            "kind" => meta.kind = NoiseKind::parse(value).ok_or_else(|| bad("noise kind"))?,
            "rate" => meta.rate = value.parse().map_err(|_| bad("number"))?,
            "convention" => meta.convention = NoiseConvention::parse(value).ok_or_else(|| bad("convention"))?,
            "imbalance_ratio" => meta.imbalance_ratio = value.parse().map_err(|_| bad("number"))?,
            "minority" if value == "-" => meta.minority_classes.clear(),
            "minority" => {
                meta.minority_classes = value
                    .split(',')
                    .map(|s| s.parse::<usize>().ok().filter(|&c| c < class_count))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad("class list"))?
            }
            "asym" => {
                meta.asym_map = vec![None; if value == "-" { 0 } else { class_count }];
                if value != "-" {
                    for pair in value.split(',') {
                        let (a, b) = pair.split_once('>').ok_or_else(|| bad("map"))?;
                        let a: usize = a.parse().map_err(|_| bad("map"))?;
                        let b: usize = b.parse().map_err(|_| bad("map"))?;
                        if a >= class_count || b >= class_count {
                            return Err(bad("map"));
                        }
                        meta.asym_map[a] = Some(b);
                    }
                }
            }
            "seed" => meta.seed = value.parse().map_err(|_| bad("integer"))?,
            "noise_seed" if value == "-" => meta.noise_seed = None,
            "noise_seed" => meta.noise_seed = Some(value.parse().map_err(|_| bad("integer"))?),
            _ => return Err(parse_err(line_no, format!("unknown meta field `{key}`"))),
        }
    }
    Ok(meta)
}

pub fn from_text(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != HEADER_TAG || parts[1] != "v1" {
        return Err(parse_err(
            1,
            format!("expected `{HEADER_TAG} v1 N C d`, got `{header}`"),
        ));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(1, format!("header {what} `{s}` is not an integer")))
    };
    let n = num(parts[2], "N")?;
    let c = num(parts[3], "C")?;
    let d = num(parts[4], "d")?;

    let mut meta = NoiseSpec::clean(0);
    let mut features = Array2::zeros((n, d));
    let mut true_labels = Vec::with_capacity(n);
    let mut noisy_labels = Vec::with_capacity(n);
    let mut row = 0;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with(META_TAG) {
            meta = parse_meta(line_no, line, c)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if row >= n {
            return Err(parse_err(line_no, format!("more than {n} records")));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(parse_err(
                line_no,
                format!("row {row} has {} columns, expected {}", fields.len(), d + 2),
            ));
        }
        for (j, f) in fields[..d].iter().enumerate() {
            features[[row, j]] = f
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(line_no, format!("row {row} feature {j}: `{f}` is not a number")))?;
        }
        let label = |f: &str, what: &str| -> Result<usize> {
            let l = f
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line_no, format!("row {row} {what} label `{f}` is not an integer")))?;
            if l >= c {
                return Err(parse_err(
                    line_no,
                    format!("row {row} {what} label {l} >= class count {c}"),
                ));
            }
            Ok(l)
        };
        true_labels.push(label(fields[d], "true")?);
        noisy_labels.push(label(fields[d + 1], "noisy")?);
        row += 1;
    }
    if row != n {
        return Err(parse_err(
            text.lines().count(),
            format!("header declares {n} records, found {row}"),
        ));
    }
    Dataset::new(features, true_labels, noisy_labels, c, meta)
}
