//! Transformer encoder over the fused sequence, the answer and box heads,
//! the assembled model and its checkpoint container.
//!
//! The encoder prepends a learned CLS token and runs pre-norm blocks
//! (`x + MHA(LN(x))`, then `x + FFN_gelu(LN(x))`) followed by a final
//! LayerNorm. Both heads read the CLS output: a linear classifier over the
//! answer classes and a box regressor (three ReLU layers, a linear
//! projection and a sigmoid) producing a center-form box.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, MultiHeadAttention};
use crate::autograd::{softmax_rows_masked, Tape, Var};
use crate::boxes::{box_to_corners, BoundingBox, PredictedBox};
use crate::data::{Image, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionStrategy, GateKind};
use crate::losses::{box_loss_with_grad, LossBreakdown, LossWeights};
use crate::nn::{Activation, FeedForward, LayerNorm, Linear};
use crate::params::{small_normal, Mat, ParamStore, EMBEDDING_STD};
use crate::sequence::TapeSequence;
use crate::text::{tokenize, TextEmbedding, Vocabulary, PAD};
use crate::visual::{EncoderKind, VisualConfig, VisualEmbedding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub coattn_depth: usize,
    pub encoder_depth: usize,
    pub strategy: FusionStrategy,
    pub gate_kind: GateKind,
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_kind: EncoderKind,
    pub conv_channels: (usize, usize),
    pub max_text_len: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            ffn_hidden: 256,
            coattn_depth: 2,
            encoder_depth: 2,
            strategy: FusionStrategy::CatvilT2v,
            gate_kind: GateKind::PerFeature,
            image_size: 64,
            patch_size: 8,
            encoder_kind: EncoderKind::Patch,
            conv_channels: (16, 32),
            max_text_len: 16,
            num_classes: NUM_CLASSES,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> Result<AttentionConfig> {
        let mut cfg = AttentionConfig::new(self.d_model, self.heads)?;
        cfg.ffn_hidden = self.ffn_hidden;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn visual(&self) -> VisualConfig {
        VisualConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            encoder_kind: self.encoder_kind,
            conv_channels: self.conv_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention()?;
        self.visual().validate()?;
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must be at least 2".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }
}

/// Pre-norm transformer block with a GELU feed-forward layer.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    norm1: LayerNorm,
    mha: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        EncoderBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model),
            mha: MultiHeadAttention::new(store, &format!("{name}.mha"), cfg, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model),
            ffn: FeedForward::new(
                store,
                &format!("{name}.ffn"),
                cfg.d_model,
                cfg.ffn_hidden,
                Activation::Gelu,
                rng,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let n = self.norm1.forward(tape, x);
        let a = self.mha.forward(tape, n, n, mask)?;
        let h = tape.add(x, a);
        let n = self.norm2.forward(tape, h);
        let f = self.ffn.forward(tape, n);
        Ok(tape.add(h, f))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cls: crate::params::ParamId,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    d_model: usize,
}

impl Encoder {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        depth: usize,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let cls = store.add("encoder.cls", small_normal(1, cfg.d_model, EMBEDDING_STD, rng));
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(store, &format!("encoder.{i}"), cfg, rng))
            .collect();
        Encoder {
            cls,
            blocks,
            final_norm: LayerNorm::new(store, "encoder.final_norm", cfg.d_model),
            d_model: cfg.d_model,
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Returns `(cls_out: 1 × d, seq_out: L × d)`.
    pub fn encode(&self, tape: &mut Tape, seq: &TapeSequence) -> Result<(Var, Var)> {
        let (l, d) = tape.shape(seq.var);
        if d != self.d_model {
            return Err(Error::shape("encode_sequence", format!("width {d}, expected {}", self.d_model)));
        }
        let cls = tape.param(self.cls);
        let mut x = tape.concat_rows(&[cls, seq.var]);
        let mask: Vec<bool> = std::iter::once(true).chain(seq.valid.iter().copied()).collect();
        let mask = (!mask.iter().all(|&v| v)).then_some(mask);
        for b in &self.blocks {
            x = b.forward(tape, x, mask.as_deref())?;
        }
        let x = self.final_norm.forward(tape, x);
        let cls_out = tape.slice_rows(x, 0, 1);
        let seq_out = tape.slice_rows(x, 1, l);
        Ok((cls_out, seq_out))
    }
}

#[derive(Clone, Debug)]
pub struct ClassHead {
    pub linear: Linear,
}

impl ClassHead {
    pub fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, d: usize, classes: usize, rng: &mut R) -> Self {
        ClassHead {
            linear: Linear::new(store, "head.class", d, classes, true, rng),
        }
    }

    pub fn logits(&self, tape: &mut Tape, cls: Var) -> Var {
        self.linear.forward(tape, cls)
    }
}

/// Softmax over a `1 × C` logit row.
pub fn classify(logits: &Mat) -> Vec<f64> {
    softmax_rows_masked(logits, None).iter().copied().collect()
}

#[derive(Clone, Debug)]
pub struct BoxHead {
    pub hidden: Vec<Linear>,
    pub proj: Linear,
}

pub const BOX_HIDDEN_LAYERS: usize = 3;

impl BoxHead {
    pub fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        BoxHead {
            hidden: (0..BOX_HIDDEN_LAYERS)
                .map(|i| Linear::new(store, &format!("head.box.{i}"), d, d, true, rng))
                .collect(),
            proj: Linear::new(store, "head.box.proj", d, 4, true, rng),
        }
    }

    /// `1 × 4` center-form box `(cx, cy, w, h)` in `(0, 1)`.
    pub fn localize(&self, tape: &mut Tape, cls: Var) -> Var {
        let mut h = cls;
        for l in &self.hidden {
            let z = l.forward(tape, h);
            h = tape.relu(z);
        }
        let out = self.proj.forward(tape, h);
        tape.sigmoid(out)
    }
}

pub struct ModelOutput {
    pub logits: Var,
    pub pred_box: Var,
    pub cls: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub answer_id: usize,
    pub pred_box: PredictedBox,
}

impl Prediction {
    pub fn corners(&self) -> BoundingBox {
        box_to_corners(&self.pred_box)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// The full visual question localized-answering model.
#[derive(Clone, Debug)]
pub struct CatVil {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub seed: u64,
    pub store: ParamStore,
    text: TextEmbedding,
    visual: VisualEmbedding,
    pub fusion: Fusion,
    pub encoder: Encoder,
    class_head: ClassHead,
    box_head: BoxHead,
}

impl CatVil {
    /// Builds a freshly initialized model; identical inputs give identical
    /// parameters.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let attn = config.attention()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let segment = store.add("segment", small_normal(2, d, EMBEDDING_STD, &mut rng));
        let text = TextEmbedding::new(&mut store, vocab.len(), config.max_text_len, d, segment, &mut rng);
        let visual = VisualEmbedding::new(&mut store, config.visual(), d, segment, &mut rng)?;
        let fusion = Fusion::new(
            &mut store,
            config.strategy,
            config.coattn_depth,
            attn,
            config.gate_kind,
            &mut rng,
        );
        let encoder = Encoder::new(&mut store, config.encoder_depth, attn, &mut rng);
        let class_head = ClassHead::new(&mut store, d, config.num_classes, &mut rng);
        let box_head = BoxHead::new(&mut store, d, &mut rng);
        Ok(CatVil {
            config,
            vocab,
            seed,
            store,
            text,
            visual,
            fusion,
            encoder,
            class_head,
            box_head,
        })
    }

    pub fn encode_question(&self, question: &str) -> Result<Vec<usize>> {
        tokenize(question, &self.vocab, self.config.max_text_len)
    }

    pub fn forward(&self, tape: &mut Tape, image: &Image, ids: &[usize]) -> Result<ModelOutput> {
        let v = self.visual.forward(tape, image)?;
        let v = TapeSequence::all_valid(v, self.config.visual().seq_len());
        let t = self.text.forward(tape, ids)?;
        let t = TapeSequence::new(t, ids.iter().map(|&id| id != PAD).collect());
        let fused = self.fusion.forward(tape, &v, &t)?;
        let (cls, _) = self.encoder.encode(tape, &fused)?;
        let logits = self.class_head.logits(tape, cls);
        let pred_box = self.box_head.localize(tape, cls);
        Ok(ModelOutput { logits, pred_box, cls })
    }

    /// Scalar training loss for one sample on `tape`, with its breakdown.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        image: &Image,
        ids: &[usize],
        target: usize,
        gt: &BoundingBox,
        weights: &LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        if target >= self.config.num_classes {
            return Err(Error::InvalidInput(format!(
                "answer id {target} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let out = self.forward(tape, image, ids)?;
        let ce_var = tape.softmax_cross_entropy(out.logits, target);
        let ce = tape.scalar(ce_var);
        let b = tape.value(out.pred_box);
        let pred = PredictedBox::from_array([b[[0, 0]], b[[0, 1]], b[[0, 2]], b[[0, 3]]]);
        let bl = box_loss_with_grad(&pred, gt, weights);
        let box_value = weights.giou * bl.giou_loss + weights.l1 * bl.l1;
        let grad = Mat::from_shape_vec((1, 4), bl.grad.to_vec()).expect("1x4");
        let box_var = tape.external_scalar(out.pred_box, box_value, grad);
        let ce_scaled = tape.scale(ce_var, weights.ce);
        let total = tape.add(ce_scaled, box_var);
        Ok((total, LossBreakdown::new(ce, bl.giou_loss, bl.l1, weights)))
    }

    pub fn predict_ids(&self, image: &Image, ids: &[usize]) -> Result<Prediction> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, image, ids)?;
        let probs = classify(tape.value(out.logits));
        let b = tape.value(out.pred_box);
        Ok(Prediction {
            answer_id: argmax(&probs),
            probs,
            pred_box: PredictedBox::from_array([b[[0, 0]], b[[0, 1]], b[[0, 2]], b[[0, 3]]]),
        })
    }

    pub fn predict(&self, image: &Image, question: &str) -> Result<Prediction> {
        let ids = self.encode_question(question)?;
        self.predict_ids(image, &ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(self)?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_checkpoint(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    seed: u64,
    vocab: String,
    params: Vec<(String, [usize; 2])>,
}

/// Layout: magic, `u32` version, `u64` header length, JSON header (config,
/// seed, vocabulary, parameter names and shapes), then every parameter as
/// little-endian `f64` in store order.
pub fn encode_checkpoint(model: &CatVil) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        seed: model.seed,
        vocab: model.vocab.to_lines(),
        params: model
            .store
            .iter()
            .map(|(n, m)| (n.to_string(), [m.nrows(), m.ncols()]))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.store.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in model.store.values() {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CatVil> {
    let fmt = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 16 {
        return Err(fmt(bytes.len(), "truncated checkpoint header".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt(0, "bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fmt(4, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt(bytes.len(), "truncated checkpoint header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| fmt(16, format!("checkpoint header: {e}")))?;
    let vocab = Vocabulary::from_lines(&header.vocab)?;
    let mut model = CatVil::new(header.config, vocab, header.seed)?;
    if model.store.len() != header.params.len() {
        return Err(fmt(16, format!(
            "checkpoint has {} tensors, model expects {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let mut offset = body;
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    for ((name, shape), (want_name, m)) in header.params.iter().zip(names.iter().zip(model.store.values_mut())) {
        if name != want_name || [m.nrows(), m.ncols()] != *shape {
            return Err(fmt(16, format!(
                "tensor {name} {shape:?} does not match model tensor {want_name} {:?}",
                m.dim()
            )));
        }
        let need = 8 * m.len();
        if offset + need > bytes.len() {
            return Err(fmt(bytes.len(), format!("truncated data for tensor {name}")));
        }
        for (v, chunk) in m.iter_mut().zip(bytes[offset..offset + need].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        offset += need;
    }
    if offset != bytes.len() {
        return Err(fmt(offset, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(model)
}
