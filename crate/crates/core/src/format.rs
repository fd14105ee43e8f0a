//! On-disk formats.
//!
//! A bundle directory holds `manifest.json` and one little-endian array per
//! file: 32-bit floats for features, weights and biases, 32-bit unsigned
//! integers for labels and split codes (0 train, 1 val, 2 test). Loading
//! widens floats to 64 bits, so a bundle survives a write/load cycle exactly
//! once its values are representable in 32 bits; see [`quantize_bundle`].
//!
//! ```text
//! manifest.json
//! labels.u32              n
//! splits.u32              n
//! exit1_features.f32      n × p₁, row-major
//! exit1_weight.f32        p₁ × c, row-major
//! exit1_bias.f32          c
//! exit2_features.f32      ...
//! ```
//!
//! A posterior directory holds `manifest.json` (σ, T, shapes) and raw 64-bit
//! arrays `weights_aug.f64`, `sigma_v.f64`, `sigma_u.f64`, `chol_u.f64`.
//!
//! CSV outputs have fixed headers, listed as constants below.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::budget::CurveRecord;
use crate::bundle::{ExitFeatures, FeatureBundle, Split};
use crate::calibration::CalibrationResult;
use crate::error::{Error, Result};
use crate::flops::OverheadRow;
use crate::laplace::KfacPosterior;
use crate::metrics::ScatterRow;
use crate::numerics::Matrix;

pub const BUNDLE_VERSION: u32 = 1;
pub const POSTERIOR_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

pub const CURVES_HEADER: &str = "mode,budget_flops,mean_cost_flops,top1,top5,nlpd,ece";
pub const SCATTER_HEADER: &str = "sample_id,exit,entropy,error,correct";
pub const OVERHEAD_HEADER: &str = "exit,p,c,backbone_flops,naive_overhead,efficient_overhead,naive_rel,efficient_rel";
pub const CALIBRATION_HEADER: &str = "mode,exit,temperature,sigma,nlpd";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U32,
    F64,
}

impl DType {
    fn width(self) -> u64 {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: u64,
}

impl ArrayEntry {
    fn new(file: impl Into<String>, dtype: DType, shape: Vec<usize>) -> Self {
        let bytes = shape.iter().product::<usize>() as u64 * dtype.width();
        Self {
            file: file.into(),
            dtype,
            shape,
            bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub n_exits: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    pub feature_dims: Vec<usize>,
    /// Cumulative backbone cost per exit, practical FLOPs.
    pub exit_flops: Vec<f64>,
    pub split_counts: SplitCounts,
    pub arrays: Vec<ArrayEntry>,
}

fn exit_files(k: usize) -> [String; 3] {
    let e = k + 1;
    [
        format!("exit{e}_features.f32"),
        format!("exit{e}_weight.f32"),
        format!("exit{e}_bias.f32"),
    ]
}

impl BundleManifest {
    pub fn describe(bundle: &FeatureBundle) -> Self {
        let n = bundle.n_samples();
        let c = bundle.n_classes;
        let mut arrays = vec![
            ArrayEntry::new("labels.u32", DType::U32, vec![n]),
            ArrayEntry::new("splits.u32", DType::U32, vec![n]),
        ];
        for (k, e) in bundle.exits.iter().enumerate() {
            let p = e.feature_dim();
            let [f, w, b] = exit_files(k);
            arrays.push(ArrayEntry::new(f, DType::F32, vec![n, p]));
            arrays.push(ArrayEntry::new(w, DType::F32, vec![p, c]));
            arrays.push(ArrayEntry::new(b, DType::F32, vec![c]));
        }
        Self {
            format_version: BUNDLE_VERSION,
            n_exits: bundle.n_exits(),
            n_classes: c,
            n_samples: n,
            feature_dims: bundle.exits.iter().map(ExitFeatures::feature_dim).collect(),
            exit_flops: bundle.exit_flops.clone(),
            split_counts: SplitCounts {
                train: bundle.split_count(Split::Train),
                val: bundle.split_count(Split::Val),
                test: bundle.split_count(Split::Test),
            },
            arrays,
        }
    }

    /// The entry the manifest must declare for `file`, given its dimensions.
    fn expected(&self) -> Vec<ArrayEntry> {
        let n = self.n_samples;
        let c = self.n_classes;
        let mut out = vec![
            ArrayEntry::new("labels.u32", DType::U32, vec![n]),
            ArrayEntry::new("splits.u32", DType::U32, vec![n]),
        ];
        for (k, &p) in self.feature_dims.iter().enumerate() {
            let [f, w, b] = exit_files(k);
            out.push(ArrayEntry::new(f, DType::F32, vec![n, p]));
            out.push(ArrayEntry::new(w, DType::F32, vec![p, c]));
            out.push(ArrayEntry::new(b, DType::F32, vec![c]));
        }
        out
    }

    fn check(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidData {
            file: MANIFEST.into(),
            reason,
        };
        if self.format_version != BUNDLE_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version,
                expected: BUNDLE_VERSION,
            });
        }
        if self.feature_dims.len() != self.n_exits || self.exit_flops.len() != self.n_exits {
            return Err(bad("per-exit lists disagree with n_exits".into()));
        }
        let s = &self.split_counts;
        if s.train + s.val + s.test != self.n_samples {
            return Err(bad("split counts do not sum to n_samples".into()));
        }
        if self.arrays != self.expected() {
            return Err(bad("array table disagrees with the declared dimensions".into()));
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn u32_bytes(values: impl IntoIterator<Item = u32>) -> Vec<u8> {
    values.into_iter().flat_map(u32::to_le_bytes).collect()
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Reads `entry` from `dir`, checking its length against the manifest.
fn read_array(dir: &Path, entry: &ArrayEntry) -> Result<Vec<u8>> {
    let bytes = read_file(&dir.join(&entry.file))?;
    if bytes.len() as u64 != entry.bytes {
        return Err(Error::LengthMismatch {
            file: entry.file.clone(),
            expected: entry.bytes,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn decode_f32(file: &str, bytes: &[u8]) -> Result<Vec<f64>> {
    let out: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    check_finite(file, &out)?;
    Ok(out)
}

fn decode_f64(file: &str, bytes: &[u8]) -> Result<Vec<f64>> {
    let out: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    check_finite(file, &out)?;
    Ok(out)
}

fn decode_u32(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect()
}

fn check_finite(file: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidData {
            file: file.into(),
            reason: format!("non-finite value at element {i}"),
        }),
        None => Ok(()),
    }
}

/// Rounds every float of the bundle to 32-bit precision, which is what a
/// write/load cycle does.
pub fn quantize_bundle(bundle: &FeatureBundle) -> FeatureBundle {
    let q = |m: &Matrix| {
        Matrix::from_vec(m.rows(), m.cols(), m.data().iter().map(|&v| v as f32 as f64).collect()).expect("same shape")
    };
    FeatureBundle {
        exits: bundle
            .exits
            .iter()
            .map(|e| ExitFeatures {
                features: q(&e.features),
                weight: q(&e.weight),
                bias: e.bias.iter().map(|&v| v as f32 as f64).collect(),
            })
            .collect(),
        ..bundle.clone()
    }
}

pub fn write_bundle(dir: &Path, bundle: &FeatureBundle) -> Result<()> {
    bundle.validate()?;
    create_dir(dir)?;
    let manifest = BundleManifest::describe(bundle);
    write_file(
        &dir.join("labels.u32"),
        &u32_bytes(bundle.labels.iter().map(|&y| y as u32)),
    )?;
    write_file(
        &dir.join("splits.u32"),
        &u32_bytes(bundle.splits.iter().map(|s| s.code())),
    )?;
    for (k, e) in bundle.exits.iter().enumerate() {
        let [f, w, b] = exit_files(k);
        write_file(&dir.join(f), &f32_bytes(e.features.data()))?;
        write_file(&dir.join(w), &f32_bytes(e.weight.data()))?;
        write_file(&dir.join(b), &f32_bytes(&e.bias))?;
    }
    // the manifest goes last so a partial write never looks complete
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_bundle(dir: &Path) -> Result<FeatureBundle> {
    let manifest: BundleManifest = read_json(&dir.join(MANIFEST))?;
    manifest.check()?;
    let n = manifest.n_samples;
    let c = manifest.n_classes;
    let mut arrays = manifest.arrays.iter();
    let mut next = || read_array(dir, arrays.next().expect("checked table"));

    let labels: Vec<usize> = decode_u32(&next()?).into_iter().map(|y| y as usize).collect();
    let splits = decode_u32(&next()?)
        .into_iter()
        .map(|code| {
            Split::from_code(code).ok_or_else(|| Error::InvalidData {
                file: "splits.u32".into(),
                reason: format!("unknown split code {code}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut exits = Vec::with_capacity(manifest.n_exits);
    for (k, &p) in manifest.feature_dims.iter().enumerate() {
        let [f, w, b] = exit_files(k);
        let features = Matrix::from_vec(n, p, decode_f32(&f, &next()?)?)?;
        let weight = Matrix::from_vec(p, c, decode_f32(&w, &next()?)?)?;
        let bias = decode_f32(&b, &next()?)?;
        exits.push(ExitFeatures { features, weight, bias });
    }
    let bundle = FeatureBundle {
        n_classes: c,
        labels,
        splits,
        exits,
        exit_flops: manifest.exit_flops.clone(),
    };
    bundle.validate()?;
    let counts = BundleManifest::describe(&bundle).split_counts;
    if counts != manifest.split_counts {
        return Err(Error::InvalidData {
            file: "splits.u32".into(),
            reason: "split tags disagree with the manifest counts".into(),
        });
    }
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorManifest {
    pub format_version: u32,
    /// 1-based exit the posterior belongs to.
    pub exit: usize,
    pub sigma: f64,
    pub temperature: f64,
    /// Augmented feature dimension `p + 1`.
    pub d: usize,
    pub c: usize,
    pub arrays: Vec<ArrayEntry>,
}

fn posterior_arrays(d: usize, c: usize) -> Vec<ArrayEntry> {
    vec![
        ArrayEntry::new("weights_aug.f64", DType::F64, vec![d, c]),
        ArrayEntry::new("sigma_v.f64", DType::F64, vec![d, d]),
        ArrayEntry::new("sigma_u.f64", DType::F64, vec![c, c]),
        ArrayEntry::new("chol_u.f64", DType::F64, vec![c, c]),
    ]
}

pub fn write_posterior(dir: &Path, exit: usize, post: &KfacPosterior) -> Result<()> {
    create_dir(dir)?;
    let d = post.weights_aug().rows();
    let c = post.n_classes();
    let parts = [post.weights_aug(), post.sigma_v(), post.sigma_u(), post.chol_u()];
    let arrays = posterior_arrays(d, c);
    for (entry, m) in arrays.iter().zip(parts) {
        write_file(&dir.join(&entry.file), &f64_bytes(m.data()))?;
    }
    let manifest = PosteriorManifest {
        format_version: POSTERIOR_VERSION,
        exit,
        sigma: post.sigma(),
        temperature: post.temperature(),
        d,
        c,
        arrays,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_posterior(dir: &Path) -> Result<(usize, KfacPosterior)> {
    let m: PosteriorManifest = read_json(&dir.join(MANIFEST))?;
    if m.format_version != POSTERIOR_VERSION {
        return Err(Error::VersionMismatch {
            found: m.format_version,
            expected: POSTERIOR_VERSION,
        });
    }
    if m.arrays != posterior_arrays(m.d, m.c) {
        return Err(Error::InvalidData {
            file: MANIFEST.into(),
            reason: "array table disagrees with the declared dimensions".into(),
        });
    }
    let mut mats = Vec::with_capacity(4);
    for entry in &m.arrays {
        let values = decode_f64(&entry.file, &read_array(dir, entry)?)?;
        mats.push(Matrix::from_vec(entry.shape[0], entry.shape[1], values)?);
    }
    let mut it = mats.into_iter();
    let mut take = || it.next().expect("four arrays");
    let post = KfacPosterior::from_parts(take(), take(), take(), take(), m.sigma, m.temperature)?;
    Ok((m.exit, post))
}

fn csv_writer(path: &Path, header: &str) -> Result<csv::Writer<fs::File>> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn write_records<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path, header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_curves_csv(path: &Path, rows: &[CurveRecord]) -> Result<()> {
    write_records(path, CURVES_HEADER, rows)
}

pub fn write_scatter_csv(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    write_records(path, SCATTER_HEADER, rows)
}

pub fn write_overhead_csv(path: &Path, rows: &[OverheadRow]) -> Result<()> {
    write_records(path, OVERHEAD_HEADER, rows)
}

#[derive(Serialize)]
struct CalibrationRow<'a> {
    mode: &'a str,
    exit: usize,
    temperature: f64,
    sigma: Option<f64>,
    nlpd: f64,
}

/// One row per (search mode, exit); `sigma` is empty for the deterministic
/// head.
pub fn write_calibration_csv(path: &Path, results: &[CalibrationResult]) -> Result<()> {
    let rows: Vec<CalibrationRow<'_>> = results
        .iter()
        .flat_map(|r| {
            r.exits.iter().map(move |e| CalibrationRow {
                mode: r.mode.name(),
                exit: e.exit,
                temperature: e.temperature,
                sigma: e.sigma,
                nlpd: e.nlpd,
            })
        })
        .collect();
    write_records(path, CALIBRATION_HEADER, &rows)
}

/// Reads a CSV written by one of the writers above, checking the header.
pub fn read_records<T: DeserializeOwned>(path: &Path, header: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let found = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if found != header {
        return Err(Error::InvalidData {
            file: path.display().to_string(),
            reason: format!("header '{found}', expected '{header}'"),
        });
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Output file names of a pipeline run.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn curves(&self) -> PathBuf {
        self.dir.join("budget_curves.csv")
    }

    pub fn scatter(&self) -> PathBuf {
        self.dir.join("scatter.csv")
    }

    pub fn overhead(&self) -> PathBuf {
        self.dir.join("overhead.csv")
    }

    pub fn calibration_csv(&self) -> PathBuf {
        self.dir.join("calibration.csv")
    }

    pub fn calibration_json(&self) -> PathBuf {
        self.dir.join("calibration.json")
    }

    /// Every CSV the pipeline emits.
    pub fn csv_files(&self) -> Vec<PathBuf> {
        vec![self.curves(), self.scatter(), self.overhead(), self.calibration_csv()]
    }

    pub fn ensure_dir(&self) -> Result<()> {
        create_dir(&self.dir)
    }
}
