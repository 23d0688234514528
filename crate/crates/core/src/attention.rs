//! Scaled dot-product and multi-head attention, plus the post-norm
//! self-attention and guided-attention blocks used by the fusion stacks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows_masked, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, FeedForward, LayerNorm, Linear};
use crate::params::{Mat, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            d_model,
            heads,
            ffn_hidden: 4 * d_model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config(format!("attention dims must be >= 1: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Row-wise softmax with max subtraction. Rejects NaN input.
pub fn softmax_rows(m: &Mat) -> Result<Mat> {
    if m.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("softmax input contains NaN".into()));
    }
    Ok(softmax_rows_masked(m, None))
}

/// `softmax(Q Kᵀ / √p_k) V` on plain matrices.
pub fn scaled_dot_attention(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("query width {} vs key width {}", q.ncols(), k.ncols()),
        ));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("{} keys vs {} values", k.nrows(), v.nrows()),
        ));
    }
    let scores = q.dot(&k.t()) / (q.ncols() as f64).sqrt();
    Ok(softmax_rows(&scores)?.dot(v))
}

/// Per-head projections stored as `d × d` matrices whose column block
/// `[i·p, (i+1)·p)` is head `i`'s map.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub config: AttentionConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

/// Result of one multi-head attention call, with the per-head weights kept
/// for inspection.
pub struct MhaOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.d_model;
        let mut lin = |suffix: &str| Linear::new(store, &format!("{name}.{suffix}"), d, d, false, rng).weight;
        MultiHeadAttention {
            config,
            w_q: lin("w_q"),
            w_k: lin("w_k"),
            w_v: lin("w_v"),
            w_o: lin("w_o"),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        q_seq: Var,
        kv_seq: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        self.forward_detailed(tape, q_seq, kv_seq, key_mask).map(|o| o.out)
    }

    pub fn forward_detailed(
        &self,
        tape: &mut Tape,
        q_seq: Var,
        kv_seq: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<MhaOutput> {
        let d = self.config.d_model;
        let (_, qd) = tape.shape(q_seq);
        let (lk, kd) = tape.shape(kv_seq);
        if qd != d || kd != d {
            return Err(Error::shape(
                "multi_head_attention",
                format!("widths q={qd} kv={kd}, model d={d}"),
            ));
        }
        for id in [self.w_q, self.w_k, self.w_v, self.w_o] {
            if tape.store().get(id).dim() != (d, d) {
                return Err(Error::shape(
                    "multi_head_attention",
                    format!("parameter {} is not {d}x{d}", tape.store().name(id)),
                ));
            }
        }
        if let Some(mask) = key_mask {
            if mask.len() != lk {
                return Err(Error::shape(
                    "multi_head_attention",
                    format!("mask length {} vs {lk} keys", mask.len()),
                ));
            }
        }

        let p = self.config.head_dim();
        let scale = 1.0 / (p as f64).sqrt();
        let wq = tape.param(self.w_q);
        let wk = tape.param(self.w_k);
        let wv = tape.param(self.w_v);
        let wo = tape.param(self.w_o);
        let q = tape.matmul(q_seq, wq);
        let k = tape.matmul(kv_seq, wk);
        let v = tape.matmul(kv_seq, wv);

        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * p, p);
            let kh = tape.slice_cols(k, h * p, p);
            let vh = tape.slice_cols(v, h * p, p);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let w = tape.softmax_rows(scores, key_mask);
            heads.push(tape.matmul(w, vh));
            weights.push(w);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let out = tape.matmul(cat, wo);
        Ok(MhaOutput { out, weights })
    }
}

/// Post-norm transformer block: `y = LN(x_q + MHA(x_q, x_kv, x_kv))`,
/// `out = LN(y + FFN(y))` with a ReLU feed-forward.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub mha: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

/// Block output together with the pre-residual attention output.
pub struct BlockTrace {
    pub out: Var,
    pub attended: Var,
    pub weights: Vec<Var>,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        AttentionBlock {
            mha: MultiHeadAttention::new(store, &format!("{name}.mha"), config, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), config.d_model),
            ffn: FeedForward::new(
                store,
                &format!("{name}.ffn"),
                config.d_model,
                config.ffn_hidden,
                Activation::Relu,
                rng,
            ),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), config.d_model),
        }
    }

    /// Self-attention: queries, keys and values all come from `x`.
    pub fn self_attend(&self, tape: &mut Tape, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.trace(tape, x, x, mask).map(|t| t.out)
    }

    /// Guided attention: queries from `x_q`, keys and values from `x_kv`.
    pub fn guided(
        &self,
        tape: &mut Tape,
        x_q: Var,
        x_kv: Var,
        kv_mask: Option<&[bool]>,
    ) -> Result<Var> {
        self.trace(tape, x_q, x_kv, kv_mask).map(|t| t.out)
    }

    pub fn trace(
        &self,
        tape: &mut Tape,
        x_q: Var,
        x_kv: Var,
        kv_mask: Option<&[bool]>,
    ) -> Result<BlockTrace> {
        let MhaOutput { out: attended, weights } = self.mha.forward_detailed(tape, x_q, x_kv, kv_mask)?;
        let y = tape.add(x_q, attended);
        let y = self.norm1.forward(tape, y);
        let f = self.ffn.forward(tape, y);
        let z = tape.add(y, f);
        let out = self.norm2.forward(tape, z);
        Ok(BlockTrace {
            out,
            attended,
            weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let m = array![[0.0, 0.0, 0.0]];
        let s = softmax_rows(&m).unwrap();
        assert!(s.iter().all(|&v| close(v, 1.0 / 3.0, 1e-15)));

        let x = array![[0.3, -1.2, 2.5, 0.0]];
        let shifted = x.mapv(|v| v + 17.25);
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!(close(*u, *v, 1e-14));
        }
    }

    #[test]
    fn softmax_log_fixture() {
        // exp(0), exp(ln2), exp(ln3) normalised by 6.
        let m = array![[0.0, 2f64.ln(), 3f64.ln()]];
        let s = softmax_rows(&m).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (got, want) in s.iter().zip(want) {
            assert!(close(*got, want, 1e-15), "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = array![[0.0, f64::NAN]];
        assert!(matches!(softmax_rows(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let m = array![[1e308, -1e308, 0.0], [-800.0, -801.0, -802.0]];
        let s = softmax_rows(&m).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        for row in s.outer_iter() {
            assert!(close(row.sum(), 1.0, 1e-12));
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = array![[0.4, -2.0], [3.0, 1.0]];
        let k = array![[1.0, 5.0]];
        let v = array![[7.0, -3.0, 0.5]];
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for row in out.outer_iter() {
            assert_eq!(row.to_vec(), vec![7.0, -3.0, 0.5]);
        }
    }

    #[test]
    fn two_key_fixture() {
        // weights ∝ [e^0, e^{ln 4}] = [1, 4] → [0.2, 0.8]; output 0.8·5.
        let q = array![[1.0]];
        let k = array![[0.0], [4f64.ln()]];
        let v = array![[0.0], [5.0]];
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(close(out[[0, 0]], 4.0, 1e-14));
    }

    #[test]
    fn orthogonal_query_gives_uniform_weights() {
        let q = array![[1.0, 0.0]];
        let k = array![[0.0, 1.0], [0.0, -3.0], [0.0, 2.0]];
        let v = array![[3.0], [6.0], [9.0]];
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(close(out[[0, 0]], 6.0, 1e-14));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let q = Mat::zeros((2, 3));
        let k = Mat::zeros((4, 2));
        let v = Mat::zeros((4, 5));
        assert!(matches!(scaled_dot_attention(&q, &k, &v), Err(Error::Shape { .. })));
        let k = Mat::zeros((4, 3));
        let v = Mat::zeros((3, 5));
        assert!(matches!(scaled_dot_attention(&q, &k, &v), Err(Error::Shape { .. })));
    }

    #[test]
    fn config_requires_divisible_heads() {
        assert!(AttentionConfig::new(6, 4).is_err());
        assert!(AttentionConfig::new(8, 4).is_ok());
        assert!(AttentionConfig::new(0, 1).is_err());
    }
}
