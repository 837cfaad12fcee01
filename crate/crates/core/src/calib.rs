//! Calibration batches and per-layer activation caches.
//!
//! For a target projection, the teacher (original fine-tuned model) supplies
//! the layer OUTPUT `Y` and the student (base model with upstream layers
//! already compressed) supplies the layer INPUT `X`, both on the same token
//! batch. The first `T` batches form the train shard, the next `E` the
//! validation shard.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{TapPoint, TokenBatch, ToyModel};
use crate::tensor::{read_container, write_container, Matrix, SeededRng, TensorContainer};

/// Where calibration token batches come from.
#[derive(Clone, Debug)]
pub enum CalibSource {
    /// Uniform random tokens; batch `i` is a pure function of `(seed, i)`.
    Synthetic {
        seed: u64,
        batch_size: usize,
        seq_len: usize,
        vocab: usize,
    },
    /// Pre-grouped batches read from a token file, consumed in order.
    Batches(Vec<TokenBatch>),
}

impl CalibSource {
    pub fn synthetic(seed: u64, batch_size: usize, seq_len: usize, vocab: usize) -> Self {
        CalibSource::Synthetic {
            seed,
            batch_size,
            seq_len,
            vocab,
        }
    }

    /// Number of batches available, `None` when unbounded.
    pub fn available(&self) -> Option<usize> {
        match self {
            CalibSource::Synthetic { .. } => None,
            CalibSource::Batches(b) => Some(b.len()),
        }
    }

    pub fn batch(&self, index: usize) -> Result<TokenBatch> {
        match self {
            CalibSource::Synthetic {
                seed,
                batch_size,
                seq_len,
                vocab,
            } => {
                if *batch_size == 0 || *seq_len == 0 {
                    return Err(Error::Input("calibration batches are empty".into()));
                }
                let mut rng = SeededRng::derived(*seed, index as u64);
                Ok(TokenBatch::random(&mut rng, *batch_size, *seq_len, *vocab))
            }
            CalibSource::Batches(b) => b.get(index).cloned().ok_or_else(|| {
                Error::Input(format!(
                    "calibration data has {} batches, batch {index} requested",
                    b.len()
                ))
            }),
        }
    }

    pub fn batches(&self, range: Range<usize>) -> Result<Vec<TokenBatch>> {
        if range.is_empty() {
            return Err(Error::Input("empty calibration range".into()));
        }
        range.map(|i| self.batch(i)).collect()
    }
}

/// Parses newline-delimited sequences of space-separated token ids. Blank
/// lines are skipped.
pub fn parse_token_lines(text: &str) -> Result<Vec<Vec<u32>>> {
    let mut seqs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|e| Error::Input(format!("line {}: bad token {t:?}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        seqs.push(seq);
    }
    Ok(seqs)
}

/// Reads a token file and groups consecutive lines into batches of
/// `batch_size` equal-length sequences; a short final group is dropped.
pub fn read_token_file(path: impl AsRef<Path>, batch_size: usize) -> Result<CalibSource> {
    let path = path.as_ref();
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let seqs = parse_token_lines(&text)?;
    if seqs.len() < batch_size {
        return Err(Error::Input(format!(
            "{}: {} sequences, fewer than one batch of {batch_size}",
            path.display(),
            seqs.len()
        )));
    }
    let batches = seqs
        .chunks_exact(batch_size)
        .map(TokenBatch::new)
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibSource::Batches(batches))
}

/// Optional disk spill for large caches.
#[derive(Clone, Debug)]
pub struct SpillConfig {
    pub dir: PathBuf,
    /// Caches with more pooled rows than this are written to `dir`.
    pub row_budget: usize,
}

#[derive(Clone, Debug)]
pub struct CalibConfig {
    /// Train batches `T`.
    pub train_batches: usize,
    /// Validation batches `E`; `None` means `ceil(T / 4)`.
    pub val_batches: Option<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub spill: Option<SpillConfig>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            train_batches: 50,
            val_batches: None,
            batch_size: 4,
            seq_len: 16,
            seed: 0,
            spill: None,
        }
    }
}

impl CalibConfig {
    pub fn val_count(&self) -> usize {
        self.val_batches.unwrap_or_else(|| self.train_batches.div_ceil(4))
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_batches == 0 || self.val_count() == 0 {
            return Err(Error::Config(
                "need at least one train and one validation batch".into(),
            ));
        }
        Ok(())
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.train_batches
    }

    pub fn val_range(&self) -> Range<usize> {
        self.train_batches..self.train_batches + self.val_count()
    }

    /// Batch indices after the calibration shards, for end-to-end training.
    pub fn e2e_range(&self, count: usize) -> Range<usize> {
        let start = self.val_range().end;
        start..start + count
    }

    pub fn source_for(&self, vocab: usize) -> CalibSource {
        CalibSource::synthetic(self.seed, self.batch_size, self.seq_len, vocab)
    }
}

/// Paired activations for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibCache {
    pub layer: String,
    pub x_train: Matrix,
    pub y_train: Matrix,
    pub x_val: Matrix,
    pub y_val: Matrix,
}

impl CalibCache {
    pub fn new(
        layer: impl Into<String>,
        (x_train, y_train): (Matrix, Matrix),
        (x_val, y_val): (Matrix, Matrix),
    ) -> Result<Self> {
        for (x, y) in [(&x_train, &y_train), (&x_val, &y_val)] {
            if x.rows() != y.rows() {
                return Err(Error::Dimension {
                    op: "calibration cache",
                    lhs: x.shape(),
                    rhs: y.shape(),
                });
            }
        }
        if x_train.cols() != x_val.cols() || y_train.cols() != y_val.cols() {
            return Err(Error::Dimension {
                op: "calibration shards",
                lhs: (x_train.cols(), y_train.cols()),
                rhs: (x_val.cols(), y_val.cols()),
            });
        }
        Ok(Self {
            layer: layer.into(),
            x_train,
            y_train,
            x_val,
            y_val,
        })
    }

    pub fn d_in(&self) -> usize {
        self.x_train.cols()
    }

    pub fn d_out(&self) -> usize {
        self.y_train.cols()
    }

    pub fn rows(&self) -> usize {
        self.x_train.rows() + self.x_val.rows()
    }

    /// Writes `<layer>.X_train`, `<layer>.Y_train`, `<layer>.X_val`,
    /// `<layer>.Y_val` into a tensor container.
    pub fn spill(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = TensorContainer::new();
        for (suffix, m) in self.shards() {
            c.push(format!("{}.{suffix}", self.layer), m.clone())?;
        }
        write_container(path, &c)
    }

    pub fn load_spilled(path: impl AsRef<Path>, layer: &str) -> Result<Self> {
        let c = read_container(path)?;
        let get = |suffix: &str| {
            c.get(&format!("{layer}.{suffix}"))
                .cloned()
                .ok_or_else(|| Error::Malformed {
                    what: "cache spill",
                    detail: format!("missing {layer}.{suffix}"),
                })
        };
        Self::new(
            layer,
            (get("X_train")?, get("Y_train")?),
            (get("X_val")?, get("Y_val")?),
        )
    }

    fn shards(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("X_train", &self.x_train),
            ("Y_train", &self.y_train),
            ("X_val", &self.x_val),
            ("Y_val", &self.y_val),
        ]
    }
}

/// Teacher layer outputs over the train and validation batches. They do not
/// depend on the student, so one capture serves every layer of a pipeline.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    train_batches: usize,
    total_batches: usize,
    outputs: BTreeMap<String, (Matrix, Matrix)>,
}

impl TeacherOutputs {
    pub fn capture(
        teacher: &ToyModel,
        layers: &[String],
        cfg: &CalibConfig,
        source: &CalibSource,
    ) -> Result<Self> {
        let total = check_budget(cfg, source)?;
        let taps = layers
            .iter()
            .map(|l| Ok(TapPoint::output(teacher.resolve(l)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut per_layer: Vec<Vec<Matrix>> = vec![Vec::with_capacity(total); taps.len()];
        for idx in 0..total {
            let mut out = teacher.forward(&source.batch(idx)?, &taps)?;
            for (tap, ys) in taps.iter().zip(per_layer.iter_mut()) {
                ys.push(out.captures.remove(tap).expect("teacher tap captured"));
            }
        }
        let t = cfg.train_batches;
        let mut outputs = BTreeMap::new();
        for (layer, ys) in layers.iter().zip(per_layer) {
            outputs.insert(
                layer.clone(),
                (Matrix::vstack(&ys[..t])?, Matrix::vstack(&ys[t..])?),
            );
        }
        Ok(Self {
            train_batches: t,
            total_batches: total,
            outputs,
        })
    }

    pub fn get(&self, layer: &str) -> Option<&(Matrix, Matrix)> {
        self.outputs.get(layer)
    }
}

fn check_budget(cfg: &CalibConfig, source: &CalibSource) -> Result<usize> {
    cfg.validate()?;
    let total = cfg.train_batches + cfg.val_count();
    if let Some(n) = source.available() {
        if n < total {
            return Err(Error::Input(format!(
                "calibration data has {n} batches, {total} needed"
            )));
        }
    }
    Ok(total)
}

/// Runs teacher and student in lockstep over `T + E` batches and pools the
/// student's layer input and the teacher's layer output. Neither model is
/// modified.
pub fn build_cache(
    teacher: &ToyModel,
    student: &ToyModel,
    layer: &str,
    cfg: &CalibConfig,
    source: &CalibSource,
) -> Result<CalibCache> {
    let teacher_out = TeacherOutputs::capture(teacher, &[layer.to_string()], cfg, source)?;
    build_cache_with(&teacher_out, student, layer, cfg, source)
}

/// [`build_cache`] with the teacher side already captured.
pub fn build_cache_with(
    teacher_out: &TeacherOutputs,
    student: &ToyModel,
    layer: &str,
    cfg: &CalibConfig,
    source: &CalibSource,
) -> Result<CalibCache> {
    let total = check_budget(cfg, source)?;
    if teacher_out.train_batches != cfg.train_batches || teacher_out.total_batches != total {
        return Err(Error::Config(
            "teacher outputs were captured with a different calibration split".into(),
        ));
    }
    let (y_train, y_val) = teacher_out
        .get(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let tap = TapPoint::input(student.resolve(layer)?);
    let mut xs = Vec::with_capacity(total);
    for idx in 0..total {
        let mut s = student.forward(&source.batch(idx)?, &[tap])?;
        xs.push(s.captures.remove(&tap).expect("student tap captured"));
    }
    let t = cfg.train_batches;
    let cache = CalibCache::new(
        layer,
        (Matrix::vstack(&xs[..t])?, y_train.clone()),
        (Matrix::vstack(&xs[t..])?, y_val.clone()),
    )?;
    if let Some(spill) = &cfg.spill {
        if cache.rows() > spill.row_budget {
            let path = spill.dir.join(format!("{layer}.cache.tnc"));
            cache.spill(&path)?;
            return CalibCache::load_spilled(&path, layer);
        }
    }
    Ok(cache)
}

pub type Shard = (Matrix, Matrix);

/// Contiguous split of pooled rows: the first `round(rows · fraction)` rows
/// train, the rest validate.
pub fn split_shards(x: &Matrix, y: &Matrix, fraction: f64) -> Result<(Shard, Shard)> {
    if x.rows() != y.rows() {
        return Err(Error::Dimension {
            op: "split_shards",
            lhs: x.shape(),
            rhs: y.shape(),
        });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let rows = x.rows();
    let n_train = (rows as f64 * fraction).round() as usize;
    if n_train == 0 || n_train >= rows {
        return Err(Error::Input(format!(
            "{rows} rows at fraction {fraction} leave an empty shard"
        )));
    }
    Ok((
        (x.slice_rows(0, n_train), y.slice_rows(0, n_train)),
        (x.slice_rows(n_train, rows), y.slice_rows(n_train, rows)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_finetune, DeltaProfile, ModelSpec};

    fn cfg(t: usize) -> CalibConfig {
        CalibConfig {
            train_batches: t,
            batch_size: 4,
            seq_len: 8,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn default_val_count() {
        assert_eq!(CalibConfig::default().val_count(), 13);
        assert_eq!(cfg(2).val_count(), 1);
    }

    #[test]
    fn self_consistent_cache() {
        let m = ToyModel::init_base(ModelSpec::default()).unwrap();
        let c = cfg(2);
        let src = c.source_for(256);
        let name = "blocks.1.attn.v_proj";
        let cache = build_cache(&m, &m, name, &c, &src).unwrap();
        assert_eq!(cache.x_train.rows(), 64);
        assert_eq!(cache.x_val.rows(), 32);
        let w = m.proj(m.resolve(name).unwrap()).unwrap();
        assert_eq!(cache.x_train.matmul_t(w).unwrap(), cache.y_train);
        assert_eq!(cache.x_val.matmul_t(w).unwrap(), cache.y_val);
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let base = ToyModel::init_base(ModelSpec::default()).unwrap();
        let ft = synth_finetune(&base, DeltaProfile::default()).unwrap().model;
        let c = cfg(2);
        let src = c.source_for(256);
        let a = build_cache(&ft, &base, "blocks.0.mlp.up_proj", &c, &src).unwrap();
        let b = build_cache(&ft, &base, "blocks.0.mlp.up_proj", &c, &src).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let m = ToyModel::init_base(ModelSpec::default()).unwrap();
        let c = cfg(2);
        assert!(matches!(
            build_cache(&m, &m, "blocks.9.attn.q_proj", &c, &c.source_for(256)),
            Err(Error::UnknownLayer(_))
        ));
        let empty = CalibSource::Batches(vec![]);
        assert!(matches!(
            build_cache(&m, &m, "blocks.0.attn.q_proj", &c, &empty),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn split_examples() {
        let x = Matrix::zeros(100, 3);
        let y = Matrix::zeros(100, 2);
        let ((xt, yt), (xv, yv)) = split_shards(&x, &y, 0.8).unwrap();
        assert_eq!((xt.rows(), yt.rows(), xv.rows(), yv.rows()), (80, 80, 20, 20));
        let x2 = Matrix::from_fn(2, 1, |i, _| i as f32);
        let ((a, _), (b, _)) = split_shards(&x2, &x2, 0.5).unwrap();
        assert_eq!((a.get(0, 0), b.get(0, 0)), (0.0, 1.0));
        assert!(split_shards(&Matrix::zeros(1, 1), &Matrix::zeros(1, 1), 0.5).is_err());
        assert!(split_shards(&x, &y, 1.0).is_err());
        assert!(split_shards(&x, &Matrix::zeros(3, 2), 0.5).is_err());
    }

    #[test]
    fn token_lines() {
        let seqs = parse_token_lines("1 2 3\n\n4 5 6\n").unwrap();
        assert_eq!(seqs, vec![vec![1, 2, 3], vec![4, 5, 6]]);
        assert!(parse_token_lines("1 x").is_err());
    }

    #[test]
    fn spill_roundtrip() {
        let m = ToyModel::init_base(ModelSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let c = CalibConfig {
            spill: Some(SpillConfig {
                dir: dir.path().to_path_buf(),
                row_budget: 10,
            }),
            ..cfg(1)
        };
        let cache = build_cache(&m, &m, "blocks.0.attn.k_proj", &c, &c.source_for(256)).unwrap();
        assert!(dir.path().join("blocks.0.attn.k_proj.cache.tnc").exists());
        let c2 = CalibConfig { spill: None, ..c };
        let direct = build_cache(&m, &m, "blocks.0.attn.k_proj", &c2, &c2.source_for(256)).unwrap();
        assert_eq!(cache, direct);
    }
}
