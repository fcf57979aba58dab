//! Synthetic shortcut-biased classification data.
//!
//! Each sample is the concatenation of an intrinsic block (class prototype
//! plus heavy noise) and one block per bias attribute (attribute prototype
//! plus light noise). In the training split an attribute agrees with the
//! class with probability `rho`; otherwise it is drawn uniformly from the
//! other `C - 1` values. The unbiased test split draws attributes uniformly.
//!
//! # File format
//!
//! ```text
//! #gradalign-dataset v1
//! {"split":"train","spec":{...}}                  <- one JSON line
//! target,bias_0[,bias_1],aligned_0[,aligned_1],x_0,...,x_{D-1}
//! 3,3,1,0.5123,...                                <- one record per sample
//! ```
//!
//! Class and attribute ids are zero-based. Aligned flags are `0`/`1`.
//! Features use Rust's shortest round-trip decimal rendering, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DATASET_MAGIC: &str = "#gradalign-dataset v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasedDatasetSpec {
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Per-attribute probability that the attribute matches the class.
    pub rho: Vec<f64>,
    pub intrinsic_dim: usize,
    pub bias_dim: usize,
    pub sigma_intrinsic: f64,
    pub sigma_bias: f64,
    pub seed: u64,
}

impl Default for BiasedDatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_size: 20_000,
            test_size: 10_000,
            rho: vec![0.98],
            intrinsic_dim: 50,
            bias_dim: 20,
            sigma_intrinsic: 0.4,
            sigma_bias: 0.1,
            seed: 0,
        }
    }
}

impl BiasedDatasetSpec {
    pub fn num_bias_attributes(&self) -> usize {
        self.rho.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.intrinsic_dim + self.num_bias_attributes() * self.bias_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(1..=2).contains(&self.rho.len()) {
            return fail(format!("1 or 2 bias attributes supported, got {}", self.rho.len()));
        }
        if let Some(r) = self.rho.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return fail(format!("rho must lie strictly inside (0,1), got {r}"));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return fail("train and test sizes must be positive".into());
        }
        if self.intrinsic_dim == 0 || self.bias_dim == 0 {
            return fail("feature dimensions must be positive".into());
        }
        if !(self.sigma_bias > 0.0 && self.sigma_bias.is_finite() && self.sigma_intrinsic.is_finite()) {
            return fail("noise scales must be positive and finite".into());
        }
        if self.sigma_intrinsic <= self.sigma_bias {
            return fail(format!(
                "sigma_intrinsic ({}) must exceed sigma_bias ({}) so the bias stays the easier cue",
                self.sigma_intrinsic, self.sigma_bias
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    UnbiasedTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: usize,
    pub bias_attrs: Vec<usize>,
    /// Ground truth, evaluation only: `aligned[a] == (bias_attrs[a] == target)`.
    pub aligned: Vec<bool>,
}

impl Sample {
    /// Conflicting with respect to at least one bias attribute.
    pub fn is_conflicting(&self) -> bool {
        self.aligned.iter().any(|a| !a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: BiasedDatasetSpec,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    /// Row-major `(N, D)` feature matrix.
    pub fn features(&self) -> Array2<f64> {
        let d = self.feature_dim();
        let flat: Vec<f64> = self.samples.iter().flat_map(|s| s.features.iter().copied()).collect();
        Array2::from_shape_vec((self.len(), d), flat).expect("every sample has feature_dim entries")
    }

    pub fn targets(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.target).collect()
    }

    /// Ground-truth bias-conflicting flags (any attribute disagreeing).
    pub fn conflicting_flags(&self) -> Vec<bool> {
        self.samples.iter().map(Sample::is_conflicting).collect()
    }

    pub fn aligned_fraction(&self) -> f64 {
        let aligned = self.samples.iter().filter(|s| !s.is_conflicting()).count();
        aligned as f64 / self.len() as f64
    }

    /// Feature columns belonging to the intrinsic block.
    pub fn intrinsic_columns(&self) -> std::ops::Range<usize> {
        0..self.spec.intrinsic_dim
    }

    /// Feature columns belonging to bias attribute `attr`.
    pub fn bias_columns(&self, attr: usize) -> std::ops::Range<usize> {
        let start = self.spec.intrinsic_dim + attr * self.spec.bias_dim;
        start..start + self.spec.bias_dim
    }
}

struct Prototypes {
    class: Vec<Vec<f64>>,
    attrs: Vec<Vec<Vec<f64>>>,
}

fn unit_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

impl Prototypes {
    fn draw(spec: &BiasedDatasetSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let class = unit_vectors(&mut rng, spec.num_classes, spec.intrinsic_dim);
        let attrs = (0..spec.num_bias_attributes())
            .map(|_| unit_vectors(&mut rng, spec.num_classes, spec.bias_dim))
            .collect();
        Self { class, attrs }
    }
}

/// Generate the biased training split and the unbiased test split.
pub fn generate(spec: &BiasedDatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let protos = Prototypes::draw(spec);
    let train = generate_split(spec, &protos, Split::Train, spec.train_size, 1);
    let test = generate_split(spec, &protos, Split::UnbiasedTest, spec.test_size, 2);
    Ok((train, test))
}

fn generate_split(
    spec: &BiasedDatasetSpec,
    protos: &Prototypes,
    split: Split,
    size: usize,
    stream: u64,
) -> Dataset {
    let c = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);

    // Class-balanced labels; any remainder goes to the lowest class ids.
    let mut labels: Vec<usize> = (0..size).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let samples = labels
        .into_iter()
        .map(|y| {
            let bias_attrs: Vec<usize> = spec
                .rho
                .iter()
                .map(|&rho| match split {
                    Split::Train => {
                        if rng.random::<f64>() < rho {
                            y
                        } else {
                            let k = rng.random_range(0..c - 1);
                            if k >= y {
                                k + 1
                            } else {
                                k
                            }
                        }
                    }
                    Split::UnbiasedTest => rng.random_range(0..c),
                })
                .collect();
            let mut features = Vec::with_capacity(spec.feature_dim());
            for &p in &protos.class[y] {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(p + spec.sigma_intrinsic * noise);
            }
            for (a, &attr) in bias_attrs.iter().enumerate() {
                for &p in &protos.attrs[a][attr] {
                    let noise: f64 = rng.sample(StandardNormal);
                    features.push(p + spec.sigma_bias * noise);
                }
            }
            let aligned = bias_attrs.iter().map(|&a| a == y).collect();
            Sample {
                features,
                target: y,
                bias_attrs,
                aligned,
            }
        })
        .collect();

    Dataset {
        spec: spec.clone(),
        split,
        samples,
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    split: Split,
    spec: BiasedDatasetSpec,
}

fn column_header(spec: &BiasedDatasetSpec) -> String {
    let k = spec.num_bias_attributes();
    let mut cols = vec!["target".to_string()];
    cols.extend((0..k).map(|a| format!("bias_{a}")));
    cols.extend((0..k).map(|a| format!("aligned_{a}")));
    cols.extend((0..spec.feature_dim()).map(|d| format!("x_{d}")));
    cols.join(",")
}

pub fn dataset_to_string(ds: &Dataset) -> Result<String> {
    let header = serde_json::to_string(&Header {
        split: ds.split,
        spec: ds.spec.clone(),
    })?;
    let mut out = String::with_capacity(ds.len() * ds.feature_dim() * 21);
    out.push_str(DATASET_MAGIC);
    out.push('\n');
    out.push_str(&header);
    out.push('\n');
    out.push_str(&column_header(&ds.spec));
    out.push('\n');
    for s in &ds.samples {
        write!(out, "{}", s.target).expect("string write");
        for a in &s.bias_attrs {
            write!(out, ",{a}").expect("string write");
        }
        for &f in &s.aligned {
            out.push_str(if f { ",1" } else { ",0" });
        }
        for v in &s.features {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_string(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.split('\n');
    match lines.next() {
        Some(DATASET_MAGIC) => {}
        other => {
            return Err(Error::Version {
                path: path.to_path_buf(),
                message: format!(
                    "expected header {DATASET_MAGIC:?}, found {:?}",
                    other.unwrap_or_default()
                ),
            })
        }
    }
    let header: Header = serde_json::from_str(lines.next().unwrap_or_default())
        .map_err(|e| err(2, format!("bad JSON header: {e}")))?;
    header.spec.validate().map_err(|e| err(2, e.to_string()))?;
    let spec = header.spec;
    match lines.next() {
        Some(cols) if cols == column_header(&spec) => {}
        _ => return Err(err(3, "column header does not match spec".into())),
    }

    let expected = match header.split {
        Split::Train => spec.train_size,
        Split::UnbiasedTest => spec.test_size,
    };
    let k = spec.num_bias_attributes();
    let d = spec.feature_dim();
    let mut samples = Vec::with_capacity(expected);
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 4;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + 2 * k + d {
            return Err(err(
                line_no,
                format!("expected {} fields, found {}", 1 + 2 * k + d, fields.len()),
            ));
        }
        let parse_id = |s: &str| -> Result<usize> {
            let v: usize = s.parse().map_err(|_| err(line_no, format!("bad id {s:?}")))?;
            if v >= spec.num_classes {
                return Err(err(line_no, format!("id {v} out of range")));
            }
            Ok(v)
        };
        let target = parse_id(fields[0])?;
        let bias_attrs = fields[1..=k].iter().map(|s| parse_id(s)).collect::<Result<Vec<_>>>()?;
        let aligned = fields[1 + k..1 + 2 * k]
            .iter()
            .map(|s| match *s {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(err(line_no, format!("bad flag {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if aligned.iter().zip(&bias_attrs).any(|(&f, &a)| f != (a == target)) {
            return Err(err(line_no, "aligned flags disagree with attributes".into()));
        }
        let features = fields[1 + 2 * k..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(line_no, format!("bad feature {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            features,
            target,
            bias_attrs,
            aligned,
        });
    }
    if samples.len() != expected {
        return Err(err(
            samples.len() + 4,
            format!("expected {expected} records, found {}", samples.len()),
        ));
    }
    Ok(Dataset {
        spec,
        split: header.split,
        samples,
    })
}
