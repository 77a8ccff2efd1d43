//! Long-tailed dataset construction: exponential class counts, seeded
//! subsampling, a Gaussian-cluster generator, class-balanced resampling,
//! mixup, group splits and the CSV interchange format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{norm, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    class_counts: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} labels", features.rows()),
                labels.len(),
            ));
        }
        let mut class_counts = vec![0; num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Invalid(format!(
                    "label {y} of sample {i} is out of range for {num_classes} classes"
                )));
            }
            class_counts[y] += 1;
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
            num_classes,
            class_counts,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// True when class counts are non-increasing in the class index.
    pub fn is_longtail_ordered(&self) -> bool {
        self.class_counts.windows(2).all(|w| w[0] >= w[1])
    }

    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Samples at `indices`, in that order. Class count is preserved.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(
            self.name.clone(),
            self.features.select_rows(indices),
            labels,
            self.num_classes,
        )
        .expect("subset of a valid dataset is valid")
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// One-hot label matrix (n × M).
    pub fn one_hot(&self) -> Matrix {
        one_hot(&self.labels, self.num_classes)
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &y) in labels.iter().enumerate() {
        m[(i, y)] = 1.0;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtSpec {
    pub total: usize,
    pub classes: usize,
    pub imbalance: f64,
}

/// Per-class counts `n_c = round((N/M)·β^(−c/(M−1)))`, rounding half up and
/// flooring each count at one.
pub fn longtail_counts(spec: &LtSpec) -> Result<Vec<usize>> {
    let LtSpec {
        total,
        classes,
        imbalance,
    } = *spec;
    if classes < 2 {
        return Err(Error::Invalid(format!("need at least 2 classes, got {classes}")));
    }
    if !(imbalance >= 1.0) || !imbalance.is_finite() {
        return Err(Error::Invalid(format!("imbalance ratio must be >= 1, got {imbalance}")));
    }
    if total < classes {
        return Err(Error::Invalid(format!(
            "total {total} is smaller than the class count {classes}"
        )));
    }
    let base = total as f64 / classes as f64;
    let last = (classes - 1) as f64;
    Ok((0..classes)
        .map(|c| {
            let n = base * imbalance.powf(-(c as f64) / last);
            ((n + 0.5).floor() as usize).max(1)
        })
        .collect())
}

/// Selects `counts[c]` samples of every class uniformly without replacement.
/// The kept samples retain their original relative order.
pub fn subsample_longtail(balanced: &Dataset, counts: &[usize], seed: u64) -> Result<Dataset> {
    if counts.len() != balanced.num_classes() {
        return Err(Error::shape(
            "subsample_longtail",
            format!("{} counts", balanced.num_classes()),
            counts.len(),
        ));
    }
    let mut rng = RngStream::named(seed, "subsample", 0);
    let mut keep = Vec::with_capacity(counts.iter().sum());
    for (class, mut members) in balanced.indices_by_class().into_iter().enumerate() {
        if counts[class] > members.len() {
            return Err(Error::InsufficientSamples {
                class,
                available: members.len(),
                requested: counts[class],
            });
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..counts[class]]);
    }
    keep.sort_unstable();
    Ok(balanced
        .subset(&keep)
        .with_name(format!("{}-lt", balanced.name())))
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub radius: f64,
    pub noise: f64,
    pub lt: LtSpec,
    pub seed: u64,
}

impl SynthSpec {
    pub fn classes(&self) -> usize {
        self.lt.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Invalid(format!("feature dim must be >= 2, got {}", self.dim)));
        }
        if !(self.noise > 0.0) {
            return Err(Error::Invalid(format!("noise must be > 0, got {}", self.noise)));
        }
        if !(self.radius >= 0.0) {
            return Err(Error::Invalid(format!("radius must be >= 0, got {}", self.radius)));
        }
        longtail_counts(&self.lt).map(|_| ())
    }

    /// Class means, uniform on the radius-`r` sphere.
    pub fn class_means(&self) -> Matrix {
        let mut rng = RngStream::named(self.seed, "class-means", 0);
        let mut means = Matrix::zeros(self.classes(), self.dim);
        for c in 0..self.classes() {
            let row = means.row_mut(c);
            loop {
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let n = norm(row);
                if n > 1e-12 {
                    row.iter_mut().for_each(|v| *v *= self.radius / n);
                    break;
                }
            }
        }
        means
    }
}

fn sample_clusters(
    means: &Matrix,
    counts: &[usize],
    noise: f64,
    rng: &mut RngStream,
    name: String,
) -> Dataset {
    let dim = means.cols();
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            for &m in means.row(c) {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + noise * z);
            }
            labels.push(c);
        }
    }
    let features = Matrix::from_vec(total, dim, data).expect("finite cluster samples");
    Dataset::new(name, features, labels, counts.len()).expect("labels in range")
}

/// Long-tailed training set: counts from [`longtail_counts`], samples
/// `mean_c + σ·N(0, I)`.
pub fn synth_gaussian_lt(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let counts = longtail_counts(&spec.lt)?;
    let mut rng = RngStream::named(spec.seed, "train-samples", 0);
    Ok(sample_clusters(
        &spec.class_means(),
        &counts,
        spec.noise,
        &mut rng,
        "synth-lt".into(),
    ))
}

/// Balanced draw from the same clusters on its own named stream, used for
/// test sets and balanced supersets.
pub fn synth_gaussian_balanced(spec: &SynthSpec, per_class: usize, stream: &str) -> Result<Dataset> {
    spec.validate()?;
    let counts = vec![per_class; spec.classes()];
    let mut rng = RngStream::named(spec.seed, stream, 0);
    Ok(sample_clusters(
        &spec.class_means(),
        &counts,
        spec.noise,
        &mut rng,
        format!("synth-{stream}"),
    ))
}

/// Infinite class-balanced index stream: each draw picks a class uniformly,
/// then the next index from that class's current seeded permutation. A class
/// reshuffles once its permutation is exhausted, so small classes are
/// oversampled.
#[derive(Debug, Clone)]
pub struct ClassBalancedStream {
    members: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    rng: RngStream,
}

impl ClassBalancedStream {
    pub fn new(ds: &Dataset, seed: u64) -> Result<Self> {
        let members = ds.indices_by_class();
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass(c));
        }
        let mut rng = RngStream::named(seed, "balanced-stream", 0);
        let mut members = members;
        for m in members.iter_mut() {
            m.shuffle(&mut rng);
        }
        let cursor = vec![0; members.len()];
        Ok(ClassBalancedStream {
            members,
            cursor,
            rng,
        })
    }
}

impl Iterator for ClassBalancedStream {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let c = self.rng.below(self.members.len());
        if self.cursor[c] == self.members[c].len() {
            self.members[c].shuffle(&mut self.rng);
            self.cursor[c] = 0;
        }
        let idx = self.members[c][self.cursor[c]];
        self.cursor[c] += 1;
        Some(idx)
    }
}

/// Seeded permutation of `0..n` for instance-uniform epochs.
pub fn epoch_permutation(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Mixup output: convex combinations of features and soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub features: Matrix,
    pub targets: Matrix,
    pub lambdas: Vec<f64>,
}

/// Mixes row `i` of batch a with row `i` of batch b, drawing one
/// `λ ~ Beta(α, α)` per pair.
pub fn mixup(
    a: (&Matrix, &Matrix),
    b: (&Matrix, &Matrix),
    alpha: f64,
    rng: &mut RngStream,
) -> Result<MixedBatch> {
    if !(alpha > 0.0) {
        return Err(Error::Invalid(format!("mixup alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Invalid(e.to_string()))?;
    let lambdas: Vec<f64> = (0..a.0.rows()).map(|_| beta.sample(rng)).collect();
    mixup_with(a, b, &lambdas)
}

/// Mixup with explicit per-pair coefficients.
pub fn mixup_with(a: (&Matrix, &Matrix), b: (&Matrix, &Matrix), lambdas: &[f64]) -> Result<MixedBatch> {
    let (xa, qa) = a;
    let (xb, qb) = b;
    if xa.shape() != xb.shape() || qa.shape() != qb.shape() || xa.rows() != qa.rows() {
        return Err(Error::shape(
            "mixup",
            format!("{:?}/{:?}", xa.shape(), qa.shape()),
            format!("{:?}/{:?}", xb.shape(), qb.shape()),
        ));
    }
    if lambdas.len() != xa.rows() {
        return Err(Error::shape("mixup", xa.rows(), lambdas.len()));
    }
    let mut features = xa.clone();
    let mut targets = qa.clone();
    for (i, &lam) in lambdas.iter().enumerate() {
        for (o, &v) in features.row_mut(i).iter_mut().zip(xb.row(i)) {
            *o = lam * *o + (1.0 - lam) * v;
        }
        for (o, &v) in targets.row_mut(i).iter_mut().zip(qb.row(i)) {
            *o = lam * *o + (1.0 - lam) * v;
        }
    }
    Ok(MixedBatch {
        features,
        targets,
        lambdas: lambdas.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Mid,
    Tail,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Head => "head",
            Group::Mid => "mid",
            Group::Tail => "tail",
        })
    }
}

/// Head/mid/tail class-index ranges partitioning `0..M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub head: Range<usize>,
    pub mid: Range<usize>,
    pub tail: Range<usize>,
}

impl GroupSpec {
    /// The CIFAR10-LT and CIFAR100-LT splits for M = 10 and 100, otherwise
    /// boundaries at 30% and 70% of the classes.
    pub fn default_for(classes: usize) -> Result<Self> {
        let (a, b) = match classes {
            10 => (3, 7),
            100 => (36, 71),
            m => {
                let a = ((0.3 * m as f64).round() as usize).max(1);
                let b = ((0.7 * m as f64).round() as usize).clamp(a, m);
                (a, b)
            }
        };
        group_split(classes, [0..a, a..b, b..classes])
    }

    pub fn group_of(&self, class: usize) -> Group {
        if self.head.contains(&class) {
            Group::Head
        } else if self.mid.contains(&class) {
            Group::Mid
        } else {
            Group::Tail
        }
    }

    pub fn ranges(&self) -> [(Group, Range<usize>); 3] {
        [
            (Group::Head, self.head.clone()),
            (Group::Mid, self.mid.clone()),
            (Group::Tail, self.tail.clone()),
        ]
    }
}

/// Validates that the three ranges tile `0..M` with no gap or overlap.
/// Empty ranges are allowed.
pub fn group_split(classes: usize, ranges: [Range<usize>; 3]) -> Result<GroupSpec> {
    let mut covered = vec![0u8; classes];
    for r in &ranges {
        if r.start > r.end || r.end > classes {
            return Err(Error::GroupSplit(format!(
                "range {}..{} outside 0..{classes}",
                r.start, r.end
            )));
        }
        for c in r.clone() {
            covered[c] += 1;
        }
    }
    if let Some(c) = covered.iter().position(|&k| k > 1) {
        return Err(Error::GroupSplit(format!("overlap at {c}")));
    }
    if let Some(c) = covered.iter().position(|&k| k == 0) {
        return Err(Error::GroupSplit(format!("gap at {c}")));
    }
    let [head, mid, tail] = ranges;
    Ok(GroupSpec { head, mid, tail })
}

/// Writes `label,f0,...,f{d-1}` rows with 17 significant digits and LF endings.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_csv(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    let mut line = String::from("label");
    for j in 0..ds.dim() {
        line.push_str(&format!(",f{j}"));
    }
    writeln!(w, "{line}")?;
    for (i, &y) in ds.labels().iter().enumerate() {
        line.clear();
        line.push_str(&y.to_string());
        for v in ds.features().row(i) {
            line.push_str(&format!(",{v:.16e}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads the CSV format written by [`save_csv`]. The class count is one past
/// the largest label.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("label") {
        return Err(parse_err(1, "header must start with `label`".into()));
    }
    for (j, h) in header.iter().skip(1).enumerate() {
        if h != format!("f{j}") {
            return Err(parse_err(1, format!("expected column `f{j}`, found `{h}`")));
        }
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 1, record.len()),
            ));
        }
        let y: usize = record[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("bad label `{}`: {e}", &record[0])))?;
        labels.push(y);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| parse_err(line, format!("bad float `{field}`: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value `{field}`")));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, Matrix::from_vec(labels.len(), dim, data)?, labels, classes)
}

/// Class-count summary keyed by class index, for manifests.
pub fn count_table(ds: &Dataset) -> BTreeMap<usize, usize> {
    ds.class_counts().iter().copied().enumerate().collect()
}
