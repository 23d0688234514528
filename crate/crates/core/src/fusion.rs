//! Vision-language fusion: co-attention stacks, the gated fusion unit and
//! the registry of fusion strategies compared in the ablation harness.
//!
//! Co-attention is wired with the text branch encoded first by self-attention
//! blocks; each visual layer then runs self-attention followed by guided
//! attention whose keys and values are the final text encoding (T2V). V2T
//! swaps the roles and Bi runs both guided branches, each conditioned on the
//! other modality's self-attended encoding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionConfig};
use crate::autograd::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Mat, ParamStore};
use crate::sequence::TapeSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    T2V,
    V2T,
    Bi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Concat,
    Gated,
    SelfAttn,
    GuidedAttn,
    CoattnBi,
    CoattnV2t,
    CoattnT2v,
    SelfAttnGated,
    GuidedAttnGated,
    CatvilBi,
    CatvilV2t,
    CatvilT2v,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AttnKind {
    None,
    SelfOnly,
    GuidedOnly,
    CoAttention(Direction),
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 12] = [
        FusionStrategy::Concat,
        FusionStrategy::Gated,
        FusionStrategy::SelfAttn,
        FusionStrategy::GuidedAttn,
        FusionStrategy::CoattnBi,
        FusionStrategy::CoattnV2t,
        FusionStrategy::CoattnT2v,
        FusionStrategy::SelfAttnGated,
        FusionStrategy::GuidedAttnGated,
        FusionStrategy::CatvilBi,
        FusionStrategy::CatvilV2t,
        FusionStrategy::CatvilT2v,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::Gated => "gated",
            FusionStrategy::SelfAttn => "self_attn",
            FusionStrategy::GuidedAttn => "guided_attn",
            FusionStrategy::CoattnBi => "coattn_bi",
            FusionStrategy::CoattnV2t => "coattn_v2t",
            FusionStrategy::CoattnT2v => "coattn_t2v",
            FusionStrategy::SelfAttnGated => "self_attn_gated",
            FusionStrategy::GuidedAttnGated => "guided_attn_gated",
            FusionStrategy::CatvilBi => "catvil_bi",
            FusionStrategy::CatvilV2t => "catvil_v2t",
            FusionStrategy::CatvilT2v => "catvil_t2v",
        }
    }

    fn attn_kind(self) -> AttnKind {
        use FusionStrategy::*;
        match self {
            Concat | Gated => AttnKind::None,
            SelfAttn | SelfAttnGated => AttnKind::SelfOnly,
            GuidedAttn | GuidedAttnGated => AttnKind::GuidedOnly,
            CoattnBi | CatvilBi => AttnKind::CoAttention(Direction::Bi),
            CoattnV2t | CatvilV2t => AttnKind::CoAttention(Direction::V2T),
            CoattnT2v | CatvilT2v => AttnKind::CoAttention(Direction::T2V),
        }
    }

    pub fn is_gated(self) -> bool {
        use FusionStrategy::*;
        matches!(
            self,
            Gated | SelfAttnGated | GuidedAttnGated | CatvilBi | CatvilV2t | CatvilT2v
        )
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn blocks<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    n: usize,
    cfg: AttentionConfig,
    rng: &mut R,
) -> Vec<AttentionBlock> {
    (0..n)
        .map(|i| AttentionBlock::new(store, &format!("{name}.{i}"), cfg, rng))
        .collect()
}

fn check_width(tape: &Tape, v: Var, d: usize, what: &str) -> Result<()> {
    let w = tape.shape(v).1;
    if w != d {
        return Err(Error::shape("fusion", format!("{what} width {w}, expected {d}")));
    }
    Ok(())
}

/// One guided branch: a self-attention encoder for the guiding modality and
/// `[self-attention, guided attention]` layers for the guided one.
#[derive(Clone, Debug)]
struct GuidedBranch {
    guide_encoder: Vec<AttentionBlock>,
    self_layers: Vec<AttentionBlock>,
    guided_layers: Vec<AttentionBlock>,
}

impl GuidedBranch {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        GuidedBranch {
            guide_encoder: blocks(store, &format!("{name}.guide_sa"), depth, cfg, rng),
            self_layers: blocks(store, &format!("{name}.sa"), depth, cfg, rng),
            guided_layers: blocks(store, &format!("{name}.ga"), depth, cfg, rng),
        }
    }

    /// Returns (guided output, encoded guide).
    fn forward(
        &self,
        tape: &mut Tape,
        guided: &TapeSequence,
        guide: &TapeSequence,
        attended: &mut Vec<Var>,
    ) -> Result<(Var, Var)> {
        let mut g = guide.var;
        for b in &self.guide_encoder {
            g = b.self_attend(tape, g, guide.key_mask())?;
        }
        let mut x = guided.var;
        for (sa, ga) in self.self_layers.iter().zip(&self.guided_layers) {
            x = sa.self_attend(tape, x, guided.key_mask())?;
            let trace = ga.trace(tape, x, g, guide.key_mask())?;
            attended.push(trace.attended);
            x = trace.out;
        }
        Ok((x, g))
    }
}

#[derive(Clone, Debug)]
pub struct CoAttentionStack {
    pub direction: Direction,
    pub depth: usize,
    d_model: usize,
    text_guides_visual: Option<GuidedBranch>,
    visual_guides_text: Option<GuidedBranch>,
}

pub struct CoAttentionOutput {
    pub visual: Var,
    pub text: Var,
    /// Pre-residual guided-attention outputs, in layer order (T2V branch
    /// first for `Bi`).
    pub guided_attended: Vec<Var>,
}

impl CoAttentionStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        direction: Direction,
        depth: usize,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let t2v = matches!(direction, Direction::T2V | Direction::Bi)
            .then(|| GuidedBranch::new(store, &format!("{name}.t2v"), depth, cfg, rng));
        let v2t = matches!(direction, Direction::V2T | Direction::Bi)
            .then(|| GuidedBranch::new(store, &format!("{name}.v2t"), depth, cfg, rng));
        CoAttentionStack {
            direction,
            depth,
            d_model: cfg.d_model,
            text_guides_visual: t2v,
            visual_guides_text: v2t,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        visual: &TapeSequence,
        text: &TapeSequence,
    ) -> Result<CoAttentionOutput> {
        check_width(tape, visual.var, self.d_model, "visual")?;
        check_width(tape, text.var, self.d_model, "text")?;
        let mut attended = Vec::new();
        let (mut v_out, mut t_out) = (visual.var, text.var);
        if let Some(branch) = &self.text_guides_visual {
            let (v, t_enc) = branch.forward(tape, visual, text, &mut attended)?;
            v_out = v;
            t_out = t_enc;
        }
        if let Some(branch) = &self.visual_guides_text {
            let (t, v_enc) = branch.forward(tape, text, visual, &mut attended)?;
            t_out = t;
            if self.direction == Direction::V2T {
                v_out = v_enc;
            }
        }
        Ok(CoAttentionOutput {
            visual: v_out,
            text: t_out,
            guided_attended: attended,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// One gate value per position and feature.
    PerFeature,
    /// One gate value per position, shared across features.
    Scalar,
}

impl GateKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_feature" => Ok(GateKind::PerFeature),
            "scalar" => Ok(GateKind::Scalar),
            other => Err(Error::Config(format!("unknown gate_kind `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::PerFeature => "per_feature",
            GateKind::Scalar => "scalar",
        }
    }
}

/// Source of the mixing weight `w` in the gated unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    Learned,
    Constant(f64),
}

/// Gated multimodal unit:
/// `w = σ(θ_w·[E_v ‖ E_t])`, `E_o = w ⊙ tanh(θ_v·E_v) + (1 − w) ⊙ tanh(θ_t·E_t)`.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub theta_v: Linear,
    pub theta_t: Linear,
    pub theta_w: Linear,
    pub kind: GateKind,
}

impl GatedFusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        kind: GateKind,
        rng: &mut R,
    ) -> Self {
        let gate_out = match kind {
            GateKind::PerFeature => d,
            GateKind::Scalar => 1,
        };
        GatedFusion {
            theta_v: Linear::new(store, &format!("{name}.theta_v"), d, d, true, rng),
            theta_t: Linear::new(store, &format!("{name}.theta_t"), d, d, true, rng),
            theta_w: Linear::new(store, &format!("{name}.theta_w"), 2 * d, gate_out, true, rng),
            kind,
        }
    }

    pub fn forward(&self, tape: &mut Tape, e_v: Var, e_t: Var) -> Result<Var> {
        self.forward_with_gate(tape, e_v, e_t, Gate::Learned)
    }

    pub fn forward_with_gate(&self, tape: &mut Tape, e_v: Var, e_t: Var, gate: Gate) -> Result<Var> {
        let (lv, dv) = tape.shape(e_v);
        let (lt, dt) = tape.shape(e_t);
        if lv != lt {
            return Err(Error::shape(
                "gated_fuse",
                format!("sequence lengths {lv} and {lt} differ; align first"),
            ));
        }
        let d = self.theta_v.in_dim;
        if dv != d || dt != d {
            return Err(Error::shape("gated_fuse", format!("widths {dv}/{dt}, expected {d}")));
        }
        let hv = self.theta_v.forward(tape, e_v);
        let hv = tape.tanh(hv);
        let ht = self.theta_t.forward(tape, e_t);
        let ht = tape.tanh(ht);
        let w = match gate {
            Gate::Learned => {
                let joint = tape.concat_cols(&[e_v, e_t]);
                let pre = self.theta_w.forward(tape, joint);
                let w = tape.sigmoid(pre);
                match self.kind {
                    GateKind::PerFeature => w,
                    GateKind::Scalar => tape.broadcast_cols(w, d),
                }
            }
            Gate::Constant(c) => tape.input(Mat::from_elem((lv, d), c)),
        };
        // w·hv + (1 − w)·ht = ht + w·(hv − ht)
        let neg_ht = tape.scale(ht, -1.0);
        let diff = tape.add(hv, neg_ht);
        let mixed = tape.mul(w, diff);
        Ok(tape.add(ht, mixed))
    }
}

/// Plain-matrix parameters of [`GatedFusion`] (per-feature gate when
/// `theta_w` is `2d × d`, scalar gate when it is `2d × 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct GatedFusionParams {
    pub theta_v: Mat,
    pub bias_v: Mat,
    pub theta_t: Mat,
    pub bias_t: Mat,
    pub theta_w: Mat,
    pub bias_w: Mat,
}

impl GatedFusionParams {
    pub fn from_store(g: &GatedFusion, store: &ParamStore) -> Self {
        let bias = |l: &Linear| store.get(l.bias.expect("gated maps have biases")).clone();
        GatedFusionParams {
            theta_v: store.get(g.theta_v.weight).clone(),
            bias_v: bias(&g.theta_v),
            theta_t: store.get(g.theta_t.weight).clone(),
            bias_t: bias(&g.theta_t),
            theta_w: store.get(g.theta_w.weight).clone(),
            bias_w: bias(&g.theta_w),
        }
    }
}

/// Direct evaluation of the gated unit on plain matrices.
pub fn gated_fuse(e_v: &Mat, e_t: &Mat, p: &GatedFusionParams) -> Result<Mat> {
    if e_v.dim() != e_t.dim() {
        return Err(Error::shape(
            "gated_fuse",
            format!("inputs {:?} and {:?} differ; align first", e_v.dim(), e_t.dim()),
        ));
    }
    let d = e_v.ncols();
    if p.theta_v.dim() != (d, d) || p.theta_t.dim() != (d, d) || p.theta_w.nrows() != 2 * d {
        return Err(Error::shape("gated_fuse", "parameter shapes do not match width"));
    }
    let hv = (e_v.dot(&p.theta_v) + &p.bias_v).mapv(f64::tanh);
    let ht = (e_t.dot(&p.theta_t) + &p.bias_t).mapv(f64::tanh);
    let joint = ndarray::concatenate(ndarray::Axis(1), &[e_v.view(), e_t.view()])
        .expect("equal heights");
    let pre = joint.dot(&p.theta_w) + &p.bias_w;
    let w = pre.mapv(sigmoid);
    let w = if w.ncols() == d {
        w
    } else {
        Mat::from_shape_fn((w.nrows(), d), |(i, _)| w[[i, 0]])
    };
    Ok(&w * &hv + (1.0 - &w) * &ht)
}

/// Zero-pads the shorter sequence at the tail so both have
/// `max(L_v, L_t)` rows.
pub fn align_sequences(e_v: &Mat, e_t: &Mat) -> Result<(Mat, Mat)> {
    if e_v.ncols() != e_t.ncols() {
        return Err(Error::shape(
            "align_sequences",
            format!("widths {} and {}", e_v.ncols(), e_t.ncols()),
        ));
    }
    let l = e_v.nrows().max(e_t.nrows());
    let pad = |m: &Mat| {
        let mut out = Mat::zeros((l, m.ncols()));
        out.slice_mut(ndarray::s![..m.nrows(), ..]).assign(m);
        out
    };
    Ok((pad(e_v), pad(e_t)))
}

fn align_on_tape(
    tape: &mut Tape,
    visual: &TapeSequence,
    v: Var,
    text: &TapeSequence,
    t: Var,
) -> (Var, Var, Vec<bool>) {
    let l = visual.len().max(text.len());
    let v = if visual.len() < l { tape.pad_rows(v, l) } else { v };
    let t = if text.len() < l { tape.pad_rows(t, l) } else { t };
    let valid = (0..l)
        .map(|i| visual.valid.get(i).copied().unwrap_or(false) || text.valid.get(i).copied().unwrap_or(false))
        .collect();
    (v, t, valid)
}

#[derive(Clone, Debug)]
enum AttnStage {
    None,
    SelfOnly {
        visual: Vec<AttentionBlock>,
        text: Vec<AttentionBlock>,
    },
    GuidedOnly {
        guided: Vec<AttentionBlock>,
    },
    CoAttention(CoAttentionStack),
}

/// A complete fusion module for one strategy.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub strategy: FusionStrategy,
    stage: AttnStage,
    pub gate: Option<GatedFusion>,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        strategy: FusionStrategy,
        depth: usize,
        cfg: AttentionConfig,
        gate_kind: GateKind,
        rng: &mut R,
    ) -> Self {
        let stage = match strategy.attn_kind() {
            AttnKind::None => AttnStage::None,
            AttnKind::SelfOnly => AttnStage::SelfOnly {
                visual: blocks(store, "fusion.visual_sa", depth, cfg, rng),
                text: blocks(store, "fusion.text_sa", depth, cfg, rng),
            },
            AttnKind::GuidedOnly => AttnStage::GuidedOnly {
                guided: blocks(store, "fusion.visual_ga", depth, cfg, rng),
            },
            AttnKind::CoAttention(dir) => {
                AttnStage::CoAttention(CoAttentionStack::new(store, "fusion.coattn", dir, depth, cfg, rng))
            }
        };
        let gate = strategy
            .is_gated()
            .then(|| GatedFusion::new(store, "fusion.gate", cfg.d_model, gate_kind, rng));
        Fusion {
            strategy,
            stage,
            gate,
        }
    }

    pub fn co_attention(&self) -> Option<&CoAttentionStack> {
        match &self.stage {
            AttnStage::CoAttention(s) => Some(s),
            _ => None,
        }
    }

    /// Fused sequence: row-concatenated for non-gated strategies (length
    /// `L_v + L_t`), gated over aligned sequences otherwise (length
    /// `max(L_v, L_t)`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        visual: &TapeSequence,
        text: &TapeSequence,
    ) -> Result<TapeSequence> {
        let (v, t) = match &self.stage {
            AttnStage::None => (visual.var, text.var),
            AttnStage::SelfOnly { visual: vb, text: tb } => {
                let mut v = visual.var;
                for b in vb {
                    v = b.self_attend(tape, v, visual.key_mask())?;
                }
                let mut t = text.var;
                for b in tb {
                    t = b.self_attend(tape, t, text.key_mask())?;
                }
                (v, t)
            }
            AttnStage::GuidedOnly { guided } => {
                let mut v = visual.var;
                for b in guided {
                    v = b.guided(tape, v, text.var, text.key_mask())?;
                }
                (v, text.var)
            }
            AttnStage::CoAttention(stack) => {
                let out = stack.forward(tape, visual, text)?;
                (out.visual, out.text)
            }
        };
        match &self.gate {
            Some(gate) => {
                let (v, t, valid) = align_on_tape(tape, visual, v, text, t);
                let fused = gate.forward(tape, v, t)?;
                Ok(TapeSequence::new(fused, valid))
            }
            None => {
                let var = tape.concat_rows(&[v, t]);
                let valid = visual.valid.iter().chain(&text.valid).copied().collect();
                Ok(TapeSequence::new(var, valid))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, GradCheckConfig};
    use crate::params::small_normal;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(theta_w: Mat) -> GatedFusionParams {
        GatedFusionParams {
            theta_v: array![[1.0]],
            bias_v: array![[0.0]],
            theta_t: array![[1.0]],
            bias_t: array![[0.0]],
            bias_w: Mat::zeros((1, theta_w.ncols())),
            theta_w,
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in FusionStrategy::ALL {
            assert_eq!(s.name().parse::<FusionStrategy>().unwrap(), s);
        }
        assert!(matches!("mutan".parse::<FusionStrategy>(), Err(Error::UnknownStrategy(_))));
    }

    #[test]
    fn zero_gate_weights_mix_evenly() {
        let p = scalar_params(array![[0.0], [0.0]]);
        let out = gated_fuse(&array![[0.5]], &array![[-0.5]], &p).unwrap();
        assert_eq!(out[[0, 0]], 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 3;
        let p = GatedFusionParams {
            theta_v: small_normal(d, d, 1.0, &mut rng),
            bias_v: small_normal(1, d, 1.0, &mut rng),
            theta_t: small_normal(d, d, 1.0, &mut rng),
            bias_t: small_normal(1, d, 1.0, &mut rng),
            theta_w: Mat::zeros((2 * d, d)),
            bias_w: Mat::zeros((1, d)),
        };
        let ev = small_normal(4, d, 1.0, &mut rng);
        let et = small_normal(4, d, 1.0, &mut rng);
        let out = gated_fuse(&ev, &et, &p).unwrap();
        let hv = (ev.dot(&p.theta_v) + &p.bias_v).mapv(f64::tanh);
        let ht = (et.dot(&p.theta_t) + &p.bias_t).mapv(f64::tanh);
        let want = 0.5 * (&hv + &ht);
        for (a, b) in out.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_fixture() {
        let p = scalar_params(array![[2.0], [0.0]]);
        let out = gated_fuse(&array![[0.5]], &array![[-0.5]], &p).unwrap();
        let w = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((w - 0.73106).abs() < 1e-5);
        assert!((out[[0, 0]] - (2.0 * w - 1.0) * 0.5f64.tanh()).abs() < 1e-15);
        assert!((out[[0, 0]] - 0.21356).abs() < 1e-5);
    }

    #[test]
    fn gated_fuse_rejects_length_mismatch() {
        let p = scalar_params(array![[0.0], [0.0]]);
        assert!(gated_fuse(&Mat::zeros((2, 1)), &Mat::zeros((3, 1)), &p).is_err());
    }

    #[test]
    fn align_pads_the_shorter_sequence() {
        let ev = Mat::from_elem((64, 2), 1.0);
        let et = Mat::from_elem((16, 2), 2.0);
        let (a, b) = align_sequences(&ev, &et).unwrap();
        assert_eq!(a, ev);
        assert_eq!(b.nrows(), 64);
        assert!(b.rows().into_iter().skip(16).all(|r| r.iter().all(|&v| v == 0.0)));
        let (c, d) = align_sequences(&et, &et).unwrap();
        assert_eq!((c, d), (et.clone(), et));
    }

    #[test]
    fn padded_rows_contribute_nothing_through_unbiased_text_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 2;
        let mut p = GatedFusionParams {
            theta_v: small_normal(d, d, 1.0, &mut rng),
            bias_v: small_normal(1, d, 1.0, &mut rng),
            theta_t: small_normal(d, d, 1.0, &mut rng),
            bias_t: Mat::zeros((1, d)),
            theta_w: small_normal(2 * d, d, 1.0, &mut rng),
            bias_w: small_normal(1, d, 1.0, &mut rng),
        };
        let ev = small_normal(5, d, 1.0, &mut rng);
        let et = small_normal(2, d, 1.0, &mut rng);
        let (av, at) = align_sequences(&ev, &et).unwrap();
        let out = gated_fuse(&av, &at, &p).unwrap();
        p.theta_t.fill(0.0);
        let hv = (av.dot(&p.theta_v) + &p.bias_v).mapv(f64::tanh);
        let pre = ndarray::concatenate(ndarray::Axis(1), &[av.view(), at.view()]).unwrap().dot(&p.theta_w) + &p.bias_w;
        let w = pre.mapv(sigmoid);
        for i in 2..5 {
            for j in 0..d {
                assert!((out[[i, j]] - w[[i, j]] * hv[[i, j]]).abs() < 1e-15);
            }
        }
    }

    fn setup(seed: u64, d: usize, heads: usize) -> (ParamStore, AttentionConfig, ChaCha8Rng) {
        let mut cfg = AttentionConfig::new(d, heads).unwrap();
        cfg.ffn_hidden = 2 * d;
        (ParamStore::new(), cfg, ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn gate_output_is_strictly_inside_unit_interval_and_extremes() {
        let (mut store, _, mut rng) = setup(4, 4, 1);
        let gate = GatedFusion::new(&mut store, "g", 4, GateKind::PerFeature, &mut rng);
        let ev = small_normal(6, 4, 5.0, &mut rng);
        let et = small_normal(6, 4, 5.0, &mut rng);
        let mut tape = Tape::new(&store);
        let (v, t) = (tape.input(ev.clone()), tape.input(et.clone()));
        let out = gate.forward(&mut tape, v, t).unwrap();
        assert!(tape.value(out).iter().all(|&x| x > -1.0 && x < 1.0));

        let p = GatedFusionParams::from_store(&gate, &store);
        let direct = gated_fuse(&ev, &et, &p).unwrap();
        for (a, b) in tape.value(out).iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-14);
        }

        let one = gate.forward_with_gate(&mut tape, v, t, Gate::Constant(1.0)).unwrap();
        let zero = gate.forward_with_gate(&mut tape, v, t, Gate::Constant(0.0)).unwrap();
        let hv = (ev.dot(&p.theta_v) + &p.bias_v).mapv(f64::tanh);
        let ht = (et.dot(&p.theta_t) + &p.bias_t).mapv(f64::tanh);
        let near = |a: &Mat, b: &Mat| a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(near(tape.value(one), &hv));
        assert!(near(tape.value(zero), &ht));
    }

    #[test]
    fn gate_response_is_monotone_in_preactivation() {
        let mut last = f64::NEG_INFINITY;
        for k in -40..=40 {
            let b = k as f64 * 0.25;
            let mut p = scalar_params(array![[0.3], [-0.7]]);
            p.bias_w = array![[b]];
            let out = gated_fuse(&array![[0.9]], &array![[-0.2]], &p).unwrap()[[0, 0]];
            assert!(out >= last);
            last = out;
        }
    }

    #[test]
    fn scalar_gate_shares_one_weight_per_position() {
        let (mut store, _, mut rng) = setup(5, 4, 1);
        let gate = GatedFusion::new(&mut store, "g", 4, GateKind::Scalar, &mut rng);
        let p = GatedFusionParams::from_store(&gate, &store);
        assert_eq!(p.theta_w.dim(), (8, 1));
        let ev = small_normal(3, 4, 1.0, &mut rng);
        let et = small_normal(3, 4, 1.0, &mut rng);
        let mut tape = Tape::new(&store);
        let (v, t) = (tape.input(ev.clone()), tape.input(et.clone()));
        let out = gate.forward(&mut tape, v, t).unwrap();
        let direct = gated_fuse(&ev, &et, &p).unwrap();
        for (a, b) in tape.value(out).iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn seqs(tape: &mut Tape, rng: &mut ChaCha8Rng, lv: usize, lt: usize, d: usize) -> (TapeSequence, TapeSequence) {
        let v = tape.input(small_normal(lv, d, 1.0, rng));
        let t = tape.input(small_normal(lt, d, 1.0, rng));
        (TapeSequence::all_valid(v, lv), TapeSequence::all_valid(t, lt))
    }

    #[test]
    fn empty_stack_is_identity() {
        for dir in [Direction::T2V, Direction::V2T, Direction::Bi] {
            let (mut store, cfg, mut rng) = setup(1, 4, 2);
            let stack = CoAttentionStack::new(&mut store, "s", dir, 0, cfg, &mut rng);
            let mut tape = Tape::new(&store);
            let (v, t) = seqs(&mut tape, &mut rng, 5, 3, 4);
            let out = stack.forward(&mut tape, &v, &t).unwrap();
            assert_eq!(tape.value(out.visual), tape.value(v.var));
            assert_eq!(tape.value(out.text), tape.value(t.var));
        }
    }

    #[test]
    fn stack_preserves_shapes() {
        for dir in [Direction::T2V, Direction::V2T, Direction::Bi] {
            let (mut store, cfg, mut rng) = setup(2, 4, 2);
            let stack = CoAttentionStack::new(&mut store, "s", dir, 2, cfg, &mut rng);
            let mut tape = Tape::new(&store);
            let (v, t) = seqs(&mut tape, &mut rng, 5, 3, 4);
            let out = stack.forward(&mut tape, &v, &t).unwrap();
            assert_eq!(tape.shape(out.visual), (5, 4));
            assert_eq!(tape.shape(out.text), (3, 4));
        }
    }

    #[test]
    fn single_row_text_gives_identical_guided_rows() {
        let (mut store, cfg, mut rng) = setup(3, 4, 2);
        let stack = CoAttentionStack::new(&mut store, "s", Direction::T2V, 2, cfg, &mut rng);
        let mut tape = Tape::new(&store);
        let (v, t) = seqs(&mut tape, &mut rng, 6, 1, 4);
        let out = stack.forward(&mut tape, &v, &t).unwrap();
        assert_eq!(out.guided_attended.len(), 2);
        for a in out.guided_attended {
            let m = tape.value(a);
            for row in m.outer_iter().skip(1) {
                for (x, y) in row.iter().zip(m.row(0).iter()) {
                    assert!((x - y).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn t2v_text_branch_ignores_visual_input() {
        let (mut store, cfg, mut rng) = setup(4, 4, 2);
        let stack = CoAttentionStack::new(&mut store, "s", Direction::T2V, 2, cfg, &mut rng);
        let mut tape = Tape::new(&store);
        let (v, t) = seqs(&mut tape, &mut rng, 5, 3, 4);
        let a = stack.forward(&mut tape, &v, &t).unwrap();
        let v2 = tape.input(small_normal(5, 4, 3.0, &mut rng));
        let b = stack
            .forward(&mut tape, &TapeSequence::all_valid(v2, 5), &t)
            .unwrap();
        let bits = |m: &Mat| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(tape.value(a.text)), bits(tape.value(b.text)));
        assert_ne!(bits(tape.value(a.visual)), bits(tape.value(b.visual)));
    }

    #[test]
    fn every_strategy_yields_finite_output_of_expected_length() {
        for s in FusionStrategy::ALL {
            let (mut store, cfg, mut rng) = setup(6, 8, 2);
            let fusion = Fusion::new(&mut store, s, 2, cfg, GateKind::PerFeature, &mut rng);
            let mut tape = Tape::new(&store);
            let (v, mut t) = seqs(&mut tape, &mut rng, 16, 4, 8);
            t.valid = vec![true, true, true, false];
            let out = fusion.forward(&mut tape, &v, &t).unwrap();
            let (rows, cols) = tape.shape(out.var);
            assert_eq!(cols, 8);
            let want = if s.is_gated() { 16 } else { 20 };
            assert_eq!(rows, want, "{s}");
            assert_eq!(out.valid.len(), want);
            assert!(tape.value(out.var).iter().all(|x| x.is_finite()), "{s}");
        }
    }

    #[test]
    fn catvil_t2v_is_gate_over_aligned_co_attention() {
        let (mut store, cfg, mut rng) = setup(8, 4, 2);
        let fusion = Fusion::new(&mut store, FusionStrategy::CatvilT2v, 2, cfg, GateKind::PerFeature, &mut rng);
        let mut tape = Tape::new(&store);
        let (v, t) = seqs(&mut tape, &mut rng, 6, 3, 4);
        let fused = fusion.forward(&mut tape, &v, &t).unwrap();
        let co = fusion.co_attention().unwrap().forward(&mut tape, &v, &t).unwrap();
        let (av, at) = align_sequences(tape.value(co.visual), tape.value(co.text)).unwrap();
        let p = GatedFusionParams::from_store(fusion.gate.as_ref().unwrap(), &store);
        let want = gated_fuse(&av, &at, &p).unwrap();
        for (a, b) in tape.value(fused.var).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn concat_lengths_add() {
        let (mut store, cfg, mut rng) = setup(9, 4, 1);
        let fusion = Fusion::new(&mut store, FusionStrategy::Concat, 2, cfg, GateKind::PerFeature, &mut rng);
        let mut tape = Tape::new(&store);
        let (v, t) = seqs(&mut tape, &mut rng, 64, 16, 4);
        let out = fusion.forward(&mut tape, &v, &t).unwrap();
        assert_eq!(tape.shape(out.var).0, 80);
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let strategies = [
            FusionStrategy::CatvilT2v,
            FusionStrategy::CatvilV2t,
            FusionStrategy::CatvilBi,
            FusionStrategy::SelfAttnGated,
            FusionStrategy::GuidedAttnGated,
        ];
        for (i, s) in strategies.into_iter().enumerate() {
            for seed in 0..3u64 {
                let (mut store, cfg, mut rng) = setup(seed * 31 + i as u64, 4, 2);
                let fusion = Fusion::new(&mut store, s, 1, cfg, GateKind::PerFeature, &mut rng);
                let ev = small_normal(3, 4, 1.0, &mut rng);
                let et = small_normal(2, 4, 1.0, &mut rng);
                let probe = small_normal(3, 4, 1.0, &mut rng);
                let report = check_param_gradients(&store, &GradCheckConfig::default(), |tape| {
                    let v = tape.input(ev.clone());
                    let t = tape.input(et.clone());
                    let out = fusion
                        .forward(tape, &TapeSequence::all_valid(v, 3), &TapeSequence::all_valid(t, 2))
                        .unwrap();
                    let p = tape.input(probe.clone());
                    let m = tape.mul(out.var, p);
                    tape.sum_all(m)
                });
                assert!(report.max_rel_error < 1e-4, "{s} seed {seed}: {report:?}");
            }
        }
    }
}
