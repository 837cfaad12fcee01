//! Desk-scale decoder-only transformer whose linear projections mirror the
//! patched sub-types (q/k/v/o and gate/up/down), plus a synthetic fine-tune
//! generator and forward taps that capture projection inputs and outputs.

mod backward;
mod spec;
mod synth;

use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, SeededRng, TensorContainer};

pub use backward::ProjGrads;
pub use spec::{LayerId, ModelSpec, ProjKind};
pub use synth::{synth_finetune, DeltaAxis, DeltaProfile, SynthFinetune};

const RMS_EPS: f32 = 1e-5;

/// Generated weights and synthetic deltas are multiples of 2⁻²⁰. With
/// magnitudes below 8 every sum and difference of two such values is exact
/// in FP32, so `W_b + (W_f − W_b) == W_f` holds bit-for-bit.
pub(crate) const WEIGHT_GRID: f32 = 1.0 / (1u32 << 20) as f32;

#[inline]
pub(crate) fn snap_to_grid(x: f32) -> f32 {
    (x / WEIGHT_GRID).round() * WEIGHT_GRID
}
const CONFIG_ENTRY: &str = "model.config";

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f32>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
    pub mlp_norm: Vec<f32>,
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

impl Block {
    pub fn proj(&self, kind: ProjKind) -> &Matrix {
        match kind {
            ProjKind::Q => &self.q,
            ProjKind::K => &self.k,
            ProjKind::V => &self.v,
            ProjKind::O => &self.o,
            ProjKind::Gate => &self.gate,
            ProjKind::Up => &self.up,
            ProjKind::Down => &self.down,
        }
    }

    fn proj_mut(&mut self, kind: ProjKind) -> &mut Matrix {
        match kind {
            ProjKind::Q => &mut self.q,
            ProjKind::K => &mut self.k,
            ProjKind::V => &mut self.v,
            ProjKind::O => &mut self.o,
            ProjKind::Gate => &mut self.gate,
            ProjKind::Up => &mut self.up,
            ProjKind::Down => &mut self.down,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    spec: ModelSpec,
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f32>,
    pub head: Matrix,
}

/// Whether a tap records what enters or what leaves a projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CaptureMode {
    Input,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TapPoint {
    pub layer: LayerId,
    pub mode: CaptureMode,
}

impl TapPoint {
    pub fn new(layer: LayerId, mode: CaptureMode) -> Self {
        Self { layer, mode }
    }

    pub fn input(layer: LayerId) -> Self {
        Self::new(layer, CaptureMode::Input)
    }

    pub fn output(layer: LayerId) -> Self {
        Self::new(layer, CaptureMode::Output)
    }
}

/// A batch of equal-length token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    seqs: usize,
    seq_len: usize,
    tokens: Vec<u32>,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<u32>]) -> Result<Self> {
        let seq_len = seqs.first().map_or(0, |s| s.len());
        if seqs.is_empty() || seq_len == 0 {
            return Err(Error::Input("token batch is empty".into()));
        }
        if let Some(bad) = seqs.iter().find(|s| s.len() != seq_len) {
            return Err(Error::Input(format!(
                "sequences have unequal lengths ({} vs {})",
                seq_len,
                bad.len()
            )));
        }
        Ok(Self {
            seqs: seqs.len(),
            seq_len,
            tokens: seqs.concat(),
        })
    }

    /// Uniform random tokens over `[0, vocab)`.
    pub fn random(rng: &mut SeededRng, seqs: usize, seq_len: usize, vocab: usize) -> Self {
        let tokens = (0..seqs * seq_len)
            .map(|_| rng.below(vocab as u64) as u32)
            .collect();
        Self {
            seqs,
            seq_len,
            tokens,
        }
    }

    pub fn seqs(&self) -> usize {
        self.seqs
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Token positions, i.e. rows of every activation matrix.
    pub fn rows(&self) -> usize {
        self.seqs * self.seq_len
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

pub struct ForwardOutput {
    pub logits: Matrix,
    pub captures: BTreeMap<TapPoint, Matrix>,
}

/// Intermediates of one block, kept for the backward pass.
pub(crate) struct BlockTrace {
    pub h_in: Matrix,
    pub a: Matrix,
    pub inv1: Vec<f32>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<f32>,
    pub att: Matrix,
    pub h_mid: Matrix,
    pub m: Matrix,
    pub inv2: Vec<f32>,
    pub g: Matrix,
    pub u: Matrix,
    pub z: Matrix,
}

pub(crate) struct Trace {
    pub seqs: usize,
    pub seq_len: usize,
    pub blocks: Vec<BlockTrace>,
    pub h_out: Matrix,
    pub inv_f: Vec<f32>,
    pub nf: Matrix,
}

impl ToyModel {
    /// Fresh base model: every matrix drawn N(0, 1/d_model) and snapped to
    /// [`WEIGHT_GRID`], norm scales 1.
    pub fn init_base(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let std = 1.0 / (spec.d_model as f32).sqrt();
        let mut rng = SeededRng::new(spec.seed);
        let mut normal = |rows, cols| {
            let mut m = rng.normal_matrix(rows, cols, std);
            m.data_mut().iter_mut().for_each(|v| *v = snap_to_grid(*v));
            m
        };
        let embedding = normal(spec.vocab, spec.d_model);
        let mut blocks = Vec::with_capacity(spec.n_layers);
        for _ in 0..spec.n_layers {
            let mut mat = |kind| {
                let (r, c) = spec.proj_shape(kind);
                normal(r, c)
            };
            let q = mat(ProjKind::Q);
            let k = mat(ProjKind::K);
            let v = mat(ProjKind::V);
            let o = mat(ProjKind::O);
            let gate = mat(ProjKind::Gate);
            let up = mat(ProjKind::Up);
            let down = mat(ProjKind::Down);
            blocks.push(Block {
                attn_norm: vec![1.0; spec.d_model],
                q,
                k,
                v,
                o,
                mlp_norm: vec![1.0; spec.d_model],
                gate,
                up,
                down,
            });
        }
        let head = normal(spec.vocab, spec.d_model);
        Ok(Self {
            spec,
            embedding,
            blocks,
            final_norm: vec![1.0; spec.d_model],
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Patchable projections: layer ascending, then q,k,v,o,gate,up,down.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.spec.n_layers)
            .flat_map(|b| ProjKind::ALL.into_iter().map(move |k| LayerId::new(b, k)))
            .collect()
    }

    pub fn linear_layer_names(&self) -> Vec<String> {
        self.layer_ids().iter().map(|id| id.to_string()).collect()
    }

    /// Parses a canonical name and checks it exists in this model.
    pub fn resolve(&self, name: &str) -> Result<LayerId> {
        let id: LayerId = name.parse()?;
        self.check_layer(id)?;
        Ok(id)
    }

    fn check_layer(&self, id: LayerId) -> Result<()> {
        if id.block >= self.spec.n_layers {
            return Err(Error::UnknownLayer(id.to_string()));
        }
        Ok(())
    }

    pub fn proj(&self, id: LayerId) -> Result<&Matrix> {
        self.check_layer(id)?;
        Ok(self.blocks[id.block].proj(id.kind))
    }

    pub(crate) fn proj_mut(&mut self, id: LayerId) -> Result<&mut Matrix> {
        self.check_layer(id)?;
        Ok(self.blocks[id.block].proj_mut(id.kind))
    }

    /// Replaces one projection's weight, keeping its shape.
    pub fn set_proj(&mut self, id: LayerId, weight: Matrix) -> Result<()> {
        self.check_layer(id)?;
        let slot = self.blocks[id.block].proj_mut(id.kind);
        if slot.shape() != weight.shape() {
            return Err(Error::Dimension {
                op: "set_proj",
                lhs: slot.shape(),
                rhs: weight.shape(),
            });
        }
        *slot = weight;
        Ok(())
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= self.spec.vocab) {
            return Err(Error::Input(format!(
                "token id {t} out of range for vocab {}",
                self.spec.vocab
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &TokenBatch, taps: &[TapPoint]) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        for tap in taps {
            self.check_layer(tap.layer)?;
        }
        let mut captures = BTreeMap::new();
        let logits = self.run(batch, None, &mut |id, input, output| {
            for tap in taps.iter().filter(|t| t.layer == id) {
                let m = match tap.mode {
                    CaptureMode::Input => input.clone(),
                    CaptureMode::Output => output.clone(),
                };
                captures.insert(*tap, m);
            }
        })?;
        Ok(ForwardOutput { logits, captures })
    }

    pub fn logits(&self, batch: &TokenBatch) -> Result<Matrix> {
        self.check_batch(batch)?;
        self.run(batch, None, &mut |_, _, _| {})
    }

    pub(crate) fn forward_traced(&self, batch: &TokenBatch) -> Result<(Matrix, Trace)> {
        self.check_batch(batch)?;
        let mut trace = Trace {
            seqs: batch.seqs,
            seq_len: batch.seq_len,
            blocks: Vec::with_capacity(self.blocks.len()),
            h_out: Matrix::zeros(0, 0),
            inv_f: Vec::new(),
            nf: Matrix::zeros(0, 0),
        };
        let logits = self.run(batch, Some(&mut trace), &mut |_, _, _| {})?;
        Ok((logits, trace))
    }

    fn run(
        &self,
        batch: &TokenBatch,
        mut trace: Option<&mut Trace>,
        observe: &mut dyn FnMut(LayerId, &Matrix, &Matrix),
    ) -> Result<Matrix> {
        let d = self.spec.d_model;
        let mut h = Matrix::zeros(batch.rows(), d);
        for (r, &t) in batch.tokens.iter().enumerate() {
            h.row_mut(r).copy_from_slice(self.embedding.row(t as usize));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            let id = |kind| LayerId::new(b, kind);
            let h_in = h;
            let (a, inv1) = rms_norm(&h_in, &block.attn_norm);
            let q = a.matmul_t(&block.q)?;
            observe(id(ProjKind::Q), &a, &q);
            let k = a.matmul_t(&block.k)?;
            observe(id(ProjKind::K), &a, &k);
            let v = a.matmul_t(&block.v)?;
            observe(id(ProjKind::V), &a, &v);
            let (att, probs) = causal_attention(&q, &k, &v, batch.seqs, batch.seq_len, self.spec.n_heads);
            let o = att.matmul_t(&block.o)?;
            observe(id(ProjKind::O), &att, &o);
            let h_mid = h_in.add(&o)?;

            let (m, inv2) = rms_norm(&h_mid, &block.mlp_norm);
            let g = m.matmul_t(&block.gate)?;
            observe(id(ProjKind::Gate), &m, &g);
            let u = m.matmul_t(&block.up)?;
            observe(id(ProjKind::Up), &m, &u);
            let z = Matrix::from_vec(
                g.rows(),
                g.cols(),
                g.data()
                    .iter()
                    .zip(u.data())
                    .map(|(&gv, &uv)| silu(gv) * uv)
                    .collect(),
            )?;
            let down = z.matmul_t(&block.down)?;
            observe(id(ProjKind::Down), &z, &down);
            h = h_mid.add(&down)?;

            if let Some(t) = trace.as_deref_mut() {
                t.blocks.push(BlockTrace {
                    h_in,
                    a,
                    inv1,
                    q,
                    k,
                    v,
                    probs,
                    att,
                    h_mid,
                    m,
                    inv2,
                    g,
                    u,
                    z,
                });
            }
        }
        let (nf, inv_f) = rms_norm(&h, &self.final_norm);
        let logits = nf.matmul_t(&self.head)?;
        if let Some(t) = trace {
            t.h_out = h;
            t.inv_f = inv_f;
            t.nf = nf;
        }
        Ok(logits)
    }

    /// Serializes every tensor, prefixed by a `model.config` entry holding
    /// `[vocab, d_model, n_heads, d_ff, n_layers]`.
    pub fn to_container(&self) -> TensorContainer {
        let s = &self.spec;
        let mut c = TensorContainer::new();
        let cfg = [s.vocab, s.d_model, s.n_heads, s.d_ff, s.n_layers].map(|v| v as f32);
        let row = |v: &[f32]| Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector");
        let mut push = |name: String, m: Matrix| c.push(name, m).expect("unique model tensor names");
        push(CONFIG_ENTRY.into(), row(&cfg));
        push("embedding".into(), self.embedding.clone());
        for (b, block) in self.blocks.iter().enumerate() {
            push(format!("blocks.{b}.attn_norm"), row(&block.attn_norm));
            for kind in &ProjKind::ALL[..4] {
                push(LayerId::new(b, *kind).to_string(), block.proj(*kind).clone());
            }
            push(format!("blocks.{b}.mlp_norm"), row(&block.mlp_norm));
            for kind in &ProjKind::ALL[4..] {
                push(LayerId::new(b, *kind).to_string(), block.proj(*kind).clone());
            }
        }
        push("final_norm".into(), row(&self.final_norm));
        push("head".into(), self.head.clone());
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        Self::from_owned_container(c.clone())
    }

    /// Builds a model by moving tensors out of `c`.
    pub fn from_owned_container(c: TensorContainer) -> Result<Self> {
        let mut tensors: HashMap<String, Matrix> = c.into_entries().into_iter().collect();
        let mut take = |name: &str| {
            tensors.remove(name).ok_or_else(|| Error::Malformed {
                what: "model container",
                detail: format!("missing tensor {name:?}"),
            })
        };
        let cfg = take(CONFIG_ENTRY)?;
        if cfg.shape() != (1, 5) || cfg.data().iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
            return Err(Error::Malformed {
                what: "model container",
                detail: "model.config must be 1x5 positive integers".into(),
            });
        }
        let v = cfg.data();
        let spec = ModelSpec {
            vocab: v[0] as usize,
            d_model: v[1] as usize,
            n_heads: v[2] as usize,
            d_ff: v[3] as usize,
            n_layers: v[4] as usize,
            seed: 0,
        };
        spec.validate()?;
        let mut shaped = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
            let m = take(name)?;
            if m.shape() != shape {
                return Err(Error::Dimension {
                    op: "load tensor",
                    lhs: shape,
                    rhs: m.shape(),
                });
            }
            Ok(m)
        };
        let vshape = (1, spec.d_model);
        let embedding = shaped("embedding", (spec.vocab, spec.d_model))?;
        let mut blocks = Vec::with_capacity(spec.n_layers);
        for b in 0..spec.n_layers {
            let mut p = |kind| shaped(&LayerId::new(b, kind).to_string(), spec.proj_shape(kind));
            let (q, k, v, o) = (p(ProjKind::Q)?, p(ProjKind::K)?, p(ProjKind::V)?, p(ProjKind::O)?);
            let (gate, up, down) = (p(ProjKind::Gate)?, p(ProjKind::Up)?, p(ProjKind::Down)?);
            blocks.push(Block {
                attn_norm: shaped(&format!("blocks.{b}.attn_norm"), vshape)?.into_data(),
                q,
                k,
                v,
                o,
                mlp_norm: shaped(&format!("blocks.{b}.mlp_norm"), vshape)?.into_data(),
                gate,
                up,
                down,
            });
        }
        let final_norm = shaped("final_norm", vshape)?.into_data();
        let head = shaped("head", (spec.vocab, spec.d_model))?;
        Ok(Self {
            spec,
            embedding,
            blocks,
            final_norm,
            head,
        })
    }

    /// Number of learnable values (everything except the config entry).
    pub fn parameter_count(&self) -> usize {
        self.to_container().value_count() - 5
    }

    /// SHA-256 of the serialized container; identifies a base model.
    pub fn fingerprint(&self) -> [u8; 32] {
        container_fingerprint(&self.to_container())
    }

    /// True when both models have identical shapes; the seed is ignored.
    pub fn same_architecture(&self, other: &ToyModel) -> bool {
        let (a, b) = (self.spec, other.spec);
        (a.vocab, a.d_model, a.n_heads, a.d_ff, a.n_layers)
            == (b.vocab, b.d_model, b.n_heads, b.d_ff, b.n_layers)
    }
}

pub fn container_fingerprint(c: &TensorContainer) -> [u8; 32] {
    Sha256::digest(c.encode()).into()
}

pub(crate) fn rms_norm(x: &Matrix, scale: &[f32]) -> (Matrix, Vec<f32>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut invs = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut ss = 0.0f32;
        for &v in row {
            ss += v * v;
        }
        let inv = 1.0 / (ss / d as f32 + RMS_EPS).sqrt();
        for ((o, &v), &s) in out.row_mut(r).iter_mut().zip(row).zip(scale) {
            *o = v * inv * s;
        }
        invs.push(inv);
    }
    (out, invs)
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Multi-head causal softmax attention over `seqs` sequences of `seq_len`
/// positions. Returns the concatenated head outputs and the attention
/// probabilities laid out as `[seq][head][query][key]`.
pub(crate) fn causal_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    seqs: usize,
    seq_len: usize,
    n_heads: usize,
) -> (Matrix, Vec<f32>) {
    let d = q.cols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let mut probs = vec![0.0f32; seqs * n_heads * seq_len * seq_len];
    let mut scores = vec![0.0f32; seq_len];
    for s in 0..seqs {
        let base = s * seq_len;
        for h in 0..n_heads {
            let cols = h * hd..(h + 1) * hd;
            let p_off = (s * n_heads + h) * seq_len * seq_len;
            for t in 0..seq_len {
                let qt = &q.row(base + t)[cols.clone()];
                let mut max = f32::NEG_INFINITY;
                for (u, sc) in scores.iter_mut().enumerate().take(t + 1) {
                    let ku = &k.row(base + u)[cols.clone()];
                    let mut acc = 0.0f32;
                    for i in 0..hd {
                        acc += qt[i] * ku[i];
                    }
                    *sc = acc * scale;
                    max = max.max(*sc);
                }
                let mut denom = 0.0f32;
                for sc in scores.iter_mut().take(t + 1) {
                    *sc = (*sc - max).exp();
                    denom += *sc;
                }
                let prow = &mut probs[p_off + t * seq_len..p_off + (t + 1) * seq_len];
                for u in 0..=t {
                    prow[u] = scores[u] / denom;
                }
                let dst = &mut out.row_mut(base + t)[cols.clone()];
                for u in 0..=t {
                    let p = prow[u];
                    let vu = &v.row(base + u)[cols.clone()];
                    for i in 0..hd {
                        dst[i] += p * vu[i];
                    }
                }
            }
        }
    }
    (out, probs)
}
