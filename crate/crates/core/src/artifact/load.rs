//! Installing an artifact onto a resident base, plus size and load-time
//! accounting against a full FP16 checkpoint.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::codec::apply_patch_in_place;
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::tensor::container::{read_half_container, write_half_container};
use crate::tensor::TensorContainer;

use super::format::{hex, DeltaArtifact};

/// A base model kept in memory with its fingerprint computed once.
#[derive(Clone, Debug)]
pub struct ResidentBase {
    model: ToyModel,
    fingerprint: [u8; 32],
}

impl ResidentBase {
    pub fn new(model: ToyModel) -> Self {
        let fingerprint = model.fingerprint();
        Self { model, fingerprint }
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LoadTiming {
    pub read: Duration,
    pub decode: Duration,
    pub install: Duration,
    pub bytes_read: u64,
}

impl LoadTiming {
    pub fn total(&self) -> Duration {
        self.read + self.decode + self.install
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ApplyOptions {
    /// Apply even if the artifact was made against a different base.
    pub skip_fingerprint: bool,
}

/// Checks the fingerprint and every record name and shape, then writes
/// `W_b + v ⊙ B` for each record. Unnamed tensors are left alone.
pub fn apply_artifact(base: &ResidentBase, artifact: &DeltaArtifact, opts: ApplyOptions) -> Result<ToyModel> {
    if !opts.skip_fingerprint && artifact.base_fingerprint != base.fingerprint {
        return Err(Error::Fingerprint {
            expected: hex(&artifact.base_fingerprint),
            actual: hex(&base.fingerprint),
        });
    }
    let mut ids = Vec::with_capacity(artifact.records.len());
    for r in &artifact.records {
        let id = base.model.resolve(&r.name)?;
        let w = base.model.proj(id)?;
        if w.shape() != r.mask.shape() {
            return Err(Error::Dimension {
                op: "apply artifact",
                lhs: w.shape(),
                rhs: r.mask.shape(),
            });
        }
        ids.push(id);
    }
    let mut model = base.model.clone();
    for (r, id) in artifact.records.iter().zip(ids) {
        apply_patch_in_place(model.proj_mut(id)?, &r.mask, r.axis(), &r.scale.to_f32())?;
    }
    Ok(model)
}

/// One bulk read, decode with checksum, then install.
pub fn load_and_apply(
    base: &ResidentBase,
    path: impl AsRef<Path>,
    opts: ApplyOptions,
) -> Result<(ToyModel, LoadTiming)> {
    let path = path.as_ref();
    let t0 = Instant::now();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t1 = Instant::now();
    let artifact = DeltaArtifact::decode(&bytes)?;
    let t2 = Instant::now();
    let model = apply_artifact(base, &artifact, opts)?;
    let t3 = Instant::now();
    Ok((
        model,
        LoadTiming {
            read: t1 - t0,
            decode: t2 - t1,
            install: t3 - t2,
            bytes_read: bytes.len() as u64,
        },
    ))
}

/// Reads a full FP16 checkpoint and builds the model from it.
pub fn load_full_checkpoint(path: impl AsRef<Path>) -> Result<(ToyModel, LoadTiming)> {
    let path = path.as_ref();
    let t0 = Instant::now();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t1 = Instant::now();
    let c = TensorContainer::decode_half(&bytes)?;
    let t2 = Instant::now();
    let model = ToyModel::from_owned_container(c)?;
    let t3 = Instant::now();
    Ok((
        model,
        LoadTiming {
            read: t1 - t0,
            decode: t2 - t1,
            install: t3 - t2,
            bytes_read: bytes.len() as u64,
        },
    ))
}

/// Writes `model` as the FP16 checkpoint the delta is compared against.
pub fn write_full_checkpoint(path: impl AsRef<Path>, model: &ToyModel) -> Result<u64> {
    write_half_container(path, &model.to_container())
}

pub fn read_full_checkpoint(path: impl AsRef<Path>) -> Result<ToyModel> {
    ToyModel::from_owned_container(read_half_container(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeReport {
    pub artifact_bytes: u64,
    /// Size of the whole model written as a TNH1 checkpoint.
    pub fp16_checkpoint_bytes: u64,
    pub ratio: f64,
    /// Mask and vector bytes of the patched layers.
    pub patched_payload_bytes: u64,
    /// Two bytes per weight of the patched layers.
    pub patched_fp16_bytes: u64,
    pub patched_ratio: f64,
}

pub fn size_report(artifact: &DeltaArtifact, base: &ToyModel) -> SizeReport {
    let artifact_bytes = artifact.expected_size() as u64;
    let fp16_checkpoint_bytes = base.to_container().half_encoded_len() as u64;
    let patched_payload_bytes: u64 = artifact.records.iter().map(|r| r.payload_bytes() as u64).sum();
    let patched_fp16_bytes: u64 = artifact
        .records
        .iter()
        .map(|r| 2 * (r.mask.d_out() * r.mask.d_in()) as u64)
        .sum();
    SizeReport {
        artifact_bytes,
        fp16_checkpoint_bytes,
        ratio: ratio(fp16_checkpoint_bytes, artifact_bytes),
        patched_payload_bytes,
        patched_fp16_bytes,
        patched_ratio: ratio(patched_fp16_bytes, patched_payload_bytes),
    }
}

/// FP16 bytes over payload bytes for a single `d_out × d_in` layer.
pub fn layer_compression_ratio(d_out: usize, d_in: usize, axis_len: usize) -> f64 {
    let payload = d_out * d_in.div_ceil(8) + 2 * axis_len;
    ratio(2 * (d_out * d_in) as u64, payload as u64)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathStats {
    pub samples: Vec<LoadTiming>,
}

impl PathStats {
    fn totals(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.samples.iter().map(|s| s.total().as_secs_f64()).collect();
        t.sort_by(f64::total_cmp);
        t
    }

    pub fn mean_secs(&self) -> f64 {
        let t = self.totals();
        t.iter().sum::<f64>() / t.len().max(1) as f64
    }

    pub fn min_secs(&self) -> f64 {
        self.totals().first().copied().unwrap_or(0.0)
    }

    pub fn median_secs(&self) -> f64 {
        let t = self.totals();
        match t.len() {
            0 => 0.0,
            n if n % 2 == 1 => t[n / 2],
            n => 0.5 * (t[n / 2 - 1] + t[n / 2]),
        }
    }

    pub fn bytes_read(&self) -> u64 {
        self.samples.first().map_or(0, |s| s.bytes_read)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub delta: PathStats,
    pub full: PathStats,
}

impl BenchReport {
    /// One line per path per run, then a summary line per path. Files are
    /// warm in the page cache after the first run.
    pub fn to_text(&self) -> String {
        let mut s = String::from("path run read_s decode_s install_s total_s bytes\n");
        for (name, stats) in [("delta", &self.delta), ("full", &self.full)] {
            for (i, t) in stats.samples.iter().enumerate() {
                s.push_str(&format!(
                    "{name} {i} {:.6} {:.6} {:.6} {:.6} {}\n",
                    t.read.as_secs_f64(),
                    t.decode.as_secs_f64(),
                    t.install.as_secs_f64(),
                    t.total().as_secs_f64(),
                    t.bytes_read
                ));
            }
        }
        for (name, stats) in [("delta", &self.delta), ("full", &self.full)] {
            s.push_str(&format!(
                "# {name}: mean {:.6}s min {:.6}s median {:.6}s over {} runs, {} bytes\n",
                stats.mean_secs(),
                stats.min_secs(),
                stats.median_secs(),
                stats.samples.len(),
                stats.bytes_read()
            ));
        }
        s
    }
}

/// Times `runs` loads of each path, alternating between them.
pub fn bench_load(
    base: &ResidentBase,
    artifact: impl AsRef<Path>,
    full_checkpoint: impl AsRef<Path>,
    runs: usize,
) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    let mut delta = Vec::with_capacity(runs);
    let mut full = Vec::with_capacity(runs);
    for _ in 0..runs {
        let (m, t) = load_and_apply(base, artifact.as_ref(), ApplyOptions::default())?;
        drop(m);
        delta.push(t);
        let (m, t) = load_full_checkpoint(full_checkpoint.as_ref())?;
        drop(m);
        full.push(t);
    }
    Ok(BenchReport {
        delta: PathStats { samples: delta },
        full: PathStats { samples: full },
    })
}
