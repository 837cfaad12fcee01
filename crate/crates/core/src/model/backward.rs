//! Reverse-mode pass through the toy transformer, yielding the gradient of a
//! scalar loss with respect to every projection weight. Embeddings, norms and
//! the head are treated as constants.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::Matrix;

use super::{sigmoid, silu, LayerId, ProjKind, ToyModel, Trace};

/// `∂loss/∂W` for each projection, same shape as the weight.
pub type ProjGrads = BTreeMap<LayerId, Matrix>;

impl ToyModel {
    pub(crate) fn backward(&self, trace: &Trace, dlogits: &Matrix) -> Result<ProjGrads> {
        let mut grads = ProjGrads::new();
        let dnf = dlogits.matmul(&self.head)?;
        let mut dh = rms_norm_backward(&trace.h_out, &trace.inv_f, &self.final_norm, &dnf);

        for (b, (block, bt)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let id = |kind| LayerId::new(b, kind);

            // h_out = h_mid + down(z)
            grads.insert(id(ProjKind::Down), dh.t_matmul(&bt.z)?);
            let dz = dh.matmul(&block.down)?;
            let n = dz.len();
            let (mut dg, mut du) = (vec![0.0f32; n], vec![0.0f32; n]);
            for i in 0..n {
                let (g, u, d) = (bt.g.data()[i], bt.u.data()[i], dz.data()[i]);
                let s = sigmoid(g);
                du[i] = d * silu(g);
                dg[i] = d * u * s * (1.0 + g * (1.0 - s));
            }
            let dg = Matrix::from_vec(dz.rows(), dz.cols(), dg)?;
            let du = Matrix::from_vec(dz.rows(), dz.cols(), du)?;
            grads.insert(id(ProjKind::Gate), dg.t_matmul(&bt.m)?);
            grads.insert(id(ProjKind::Up), du.t_matmul(&bt.m)?);
            let mut dm = dg.matmul(&block.gate)?;
            dm.add_assign(&du.matmul(&block.up)?)?;
            let mut dh_mid = dh;
            dh_mid.add_assign(&rms_norm_backward(&bt.h_mid, &bt.inv2, &block.mlp_norm, &dm))?;

            // h_mid = h_in + o(att)
            grads.insert(id(ProjKind::O), dh_mid.t_matmul(&bt.att)?);
            let datt = dh_mid.matmul(&block.o)?;
            let (dq, dk, dv) = attention_backward(
                &bt.q,
                &bt.k,
                &bt.v,
                &bt.probs,
                &datt,
                trace.seqs,
                trace.seq_len,
                self.spec.n_heads,
            );
            grads.insert(id(ProjKind::Q), dq.t_matmul(&bt.a)?);
            grads.insert(id(ProjKind::K), dk.t_matmul(&bt.a)?);
            grads.insert(id(ProjKind::V), dv.t_matmul(&bt.a)?);
            let mut da = dq.matmul(&block.q)?;
            da.add_assign(&dk.matmul(&block.k)?)?;
            da.add_assign(&dv.matmul(&block.v)?)?;
            dh = dh_mid;
            dh.add_assign(&rms_norm_backward(&bt.h_in, &bt.inv1, &block.attn_norm, &da))?;
        }
        Ok(grads)
    }
}

/// Backward of `y = x · inv · g` with `inv = (mean(x²) + eps)^(-1/2)`.
fn rms_norm_backward(x: &Matrix, inv: &[f32], scale: &[f32], dy: &Matrix) -> Matrix {
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let (xr, dyr, s) = (x.row(r), dy.row(r), inv[r]);
        let mut dot = 0.0f32;
        for j in 0..d {
            dot += scale[j] * dyr[j] * xr[j];
        }
        let k = s * s * s * dot / d as f32;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * scale[j] * dyr[j] - xr[j] * k;
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[f32],
    datt: &Matrix,
    seqs: usize,
    seq_len: usize,
    n_heads: usize,
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dq = Matrix::zeros(q.rows(), d);
    let mut dk = Matrix::zeros(q.rows(), d);
    let mut dv = Matrix::zeros(q.rows(), d);
    let mut dp = vec![0.0f32; seq_len];
    for s in 0..seqs {
        let base = s * seq_len;
        for h in 0..n_heads {
            let off = h * hd;
            let p_off = (s * n_heads + h) * seq_len * seq_len;
            for t in 0..seq_len {
                let prow = &probs[p_off + t * seq_len..p_off + (t + 1) * seq_len];
                let go = &datt.row(base + t)[off..off + hd];
                let mut weighted = 0.0f32;
                for u in 0..=t {
                    let vu = &v.row(base + u)[off..off + hd];
                    let mut acc = 0.0f32;
                    for i in 0..hd {
                        acc += go[i] * vu[i];
                    }
                    dp[u] = acc;
                    weighted += prow[u] * acc;
                    let dvu = &mut dv.row_mut(base + u)[off..off + hd];
                    for i in 0..hd {
                        dvu[i] += prow[u] * go[i];
                    }
                }
                for u in 0..=t {
                    let ds = prow[u] * (dp[u] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for i in 0..hd {
                        let kv = k.get(base + u, off + i);
                        let qv = q.get(base + t, off + i);
                        dq.data_mut()[(base + t) * d + off + i] += ds * kv;
                        dk.data_mut()[(base + u) * d + off + i] += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, TokenBatch};
    use crate::tensor::SeededRng;

    /// Loss = Σ logits ⊙ probe, so dlogits = probe.
    fn probe_loss(model: &ToyModel, batch: &TokenBatch, probe: &Matrix) -> f64 {
        let logits = model.logits(batch).unwrap();
        logits
            .data()
            .iter()
            .zip(probe.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let spec = ModelSpec {
            vocab: 11,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_layers: 2,
            seed: 4,
        };
        let model = ToyModel::init_base(spec).unwrap();
        let mut rng = SeededRng::new(9);
        let batch = TokenBatch::random(&mut rng, 2, 5, spec.vocab);
        let probe = rng.normal_matrix(10, spec.vocab, 1.0);
        let (_, trace) = model.forward_traced(&batch).unwrap();
        let grads = model.backward(&trace, &probe).unwrap();
        let eps = 1e-2f32;
        for id in model.layer_ids() {
            let g = &grads[&id];
            // A handful of entries per projection keeps the test fast.
            for (i, j) in [(0usize, 0usize), (1, 3), (5, 7)] {
                let mut plus = model.clone();
                let mut w = plus.proj(id).unwrap().clone();
                let orig = w.get(i, j);
                w.set(i, j, orig + eps);
                plus.set_proj(id, w.clone()).unwrap();
                let mut minus = model.clone();
                w.set(i, j, orig - eps);
                minus.set_proj(id, w).unwrap();
                let fd = (probe_loss(&plus, &batch, &probe) - probe_loss(&minus, &batch, &probe))
                    / (2.0 * eps as f64);
                let an = g.get(i, j) as f64;
                let tol = 2e-2 * fd.abs().max(an.abs()).max(1e-2);
                assert!((fd - an).abs() <= tol, "{id} ({i},{j}): fd {fd} analytic {an}");
            }
        }
    }
}
