//! Image → visual embedding sequence.
//!
//! The default encoder is a linear projection of non-overlapping patches.
//! A small two-layer convolutional encoder producing the same patch grid is
//! available for feature-extractor ablations.
//!
//! Pixels are standardized to roughly zero mean and unit scale before any
//! projection, and the learnable visual position table starts from a 2D
//! sinusoidal code of each patch's grid row and column.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Mat, ParamId, ParamStore};
use crate::sequence::{EmbeddingSequence, Modality};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Patch,
    Conv,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(EncoderKind::Patch),
            "conv" => Ok(EncoderKind::Conv),
            other => Err(Error::Config(format!("unknown encoder_kind `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Patch => "patch",
            EncoderKind::Conv => "conv",
        }
    }
}

fn check_divisible(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::InvalidInput(format!(
            "image {height}x{width} not divisible into {patch}x{patch} patches"
        )));
    }
    Ok(())
}

/// Splits an image into `L_v × (P·P·3)` rows, patches in row-major grid
/// order and each patch flattened as `(row, col, channel)`.
pub fn patchify(image: &Image, patch: usize) -> Result<Mat> {
    check_divisible(image.height, image.width, patch)?;
    let (gh, gw) = (image.height / patch, image.width / patch);
    let c = image.channels;
    let mut out = Mat::zeros((gh * gw, patch * patch * c));
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            let mut col = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..c {
                        out[[row, col]] = image.get(py * patch + y, px * patch + x, ch) as f64;
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(rows: &Mat, height: usize, width: usize, patch: usize) -> Result<Image> {
    check_divisible(height, width, patch)?;
    let gw = width / patch;
    let c = rows.ncols() / (patch * patch);
    let mut image = Image::zeros(height, width, c);
    for (row, values) in rows.outer_iter().enumerate() {
        let (py, px) = (row / gw, row % gw);
        let mut col = 0;
        for y in 0..patch {
            for x in 0..patch {
                for ch in 0..c {
                    image.set(py * patch + y, px * patch + x, ch, values[col] as f32);
                    col += 1;
                }
            }
        }
    }
    Ok(image)
}

/// Pixel standardization applied before visual projections.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// `(p − PIXEL_MEAN) / PIXEL_STD` elementwise.
pub fn normalize_pixels(m: &Mat) -> Mat {
    m.mapv(|v| (v - PIXEL_MEAN) / PIXEL_STD)
}

/// Initial visual position table for a `grid × grid` patch layout: the first
/// half of the columns encodes the patch row and the second half the patch
/// column, each as interleaved `sin`/`cos` pairs over geometrically spaced
/// frequencies.
pub fn grid_position_table(grid: usize, d: usize) -> Mat {
    let half = (d / 2).max(1);
    Mat::from_shape_fn((grid * grid, d), |(k, j)| {
        let (pos, jj) = if j < half { (k / grid, j) } else { (k % grid, j - half) };
        let freq = 1.0 / 100f64.powf(2.0 * (jj / 2) as f64 / half as f64);
        let angle = pos as f64 * freq;
        if jj % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Plain-matrix parameters of the patch encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualParams {
    pub patch: usize,
    pub projection: Mat,
    pub bias: Mat,
    pub segment: Mat,
    pub position: Mat,
}

/// `row k = normalize(patch_k) · projection + bias + segment[1] + position[k]`.
pub fn embed_visual(image: &Image, params: &VisualParams) -> Result<EmbeddingSequence> {
    let patches = normalize_pixels(&patchify(image, params.patch)?);
    if patches.ncols() != params.projection.nrows() {
        return Err(Error::shape(
            "embed_visual",
            format!(
                "patch width {} vs projection rows {}",
                patches.ncols(),
                params.projection.nrows()
            ),
        ));
    }
    if patches.nrows() > params.position.nrows() {
        return Err(Error::shape(
            "embed_visual",
            format!("{} patches vs position table {}", patches.nrows(), params.position.nrows()),
        ));
    }
    let mut values = patches.dot(&params.projection) + &params.bias;
    values += &params.segment.row(Modality::Visual.segment_id());
    values += &params.position.slice(ndarray::s![..patches.nrows(), ..]);
    Ok(EmbeddingSequence::new(values, Modality::Visual))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_kind: EncoderKind,
    pub conv_channels: (usize, usize),
}

impl VisualConfig {
    pub fn seq_len(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        check_divisible(self.image_size, self.image_size, self.patch_size)?;
        if self.encoder_kind == EncoderKind::Conv && !self.patch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv encoder needs an even patch size, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Features {
    Patch { proj: Linear },
    Conv { conv1: Linear, conv2: Linear, proj: Linear },
}

/// Trainable visual embedding: features + segment row 1 + position table.
#[derive(Clone, Debug)]
pub struct VisualEmbedding {
    pub config: VisualConfig,
    features: Features,
    pub segment: ParamId,
    pub position: ParamId,
}

impl VisualEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: VisualConfig,
        d: usize,
        segment: ParamId,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let p = config.patch_size;
        let features = match config.encoder_kind {
            EncoderKind::Patch => Features::Patch {
                proj: Linear::new(store, "visual.proj", p * p * 3, d, true, rng),
            },
            EncoderKind::Conv => {
                let (c1, c2) = config.conv_channels;
                Features::Conv {
                    conv1: Linear::new(store, "visual.conv1", 9 * 3, c1, true, rng),
                    conv2: Linear::new(store, "visual.conv2", 9 * c1, c2, true, rng),
                    proj: Linear::new(store, "visual.proj", c2, d, true, rng),
                }
            }
        };
        let grid = config.image_size / config.patch_size;
        let position = store.add("visual.position", grid_position_table(grid, d));
        Ok(VisualEmbedding {
            config,
            features,
            segment,
            position,
        })
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.image_size;
        if image.height != s || image.width != s || image.channels != 3 {
            return Err(Error::InvalidInput(format!(
                "expected {s}x{s}x3 image, got {}x{}x{}",
                image.height, image.width, image.channels
            )));
        }
        Ok(())
    }

    /// Per-patch features before segment and position terms are added.
    pub fn features(&self, tape: &mut Tape, image: &Image) -> Result<Var> {
        self.check_image(image)?;
        let p = self.config.patch_size;
        match &self.features {
            Features::Patch { proj } => {
                let patches = tape.input(normalize_pixels(&patchify(image, p)?));
                Ok(proj.forward(tape, patches))
            }
            Features::Conv { conv1, conv2, proj } => {
                let (h, w) = (image.height, image.width);
                let pixels = tape.input(normalize_pixels(&image.to_pixel_rows()));
                let cols = tape.im2col3(pixels, h, w);
                let x = conv1.forward(tape, cols);
                let x = tape.relu(x);
                let x = tape.avg_pool(x, h, w, 2);
                let (h2, w2) = (h / 2, w / 2);
                let cols = tape.im2col3(x, h2, w2);
                let x = conv2.forward(tape, cols);
                let x = tape.relu(x);
                let x = tape.avg_pool(x, h2, w2, p / 2);
                Ok(proj.forward(tape, x))
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, image: &Image) -> Result<Var> {
        let feats = self.features(tape, image)?;
        let segment = tape.param(self.segment);
        let seg_row = tape.slice_rows(segment, Modality::Visual.segment_id(), 1);
        let x = tape.add_row(feats, seg_row);
        let position = tape.param(self.position);
        Ok(tape.add(x, position))
    }

    /// Plain parameters of a patch encoder, `None` for the conv encoder.
    pub fn params(&self, store: &ParamStore) -> Option<VisualParams> {
        match &self.features {
            Features::Patch { proj } => Some(VisualParams {
                patch: self.config.patch_size,
                projection: store.get(proj.weight).clone(),
                bias: store.get(proj.bias.expect("patch projection has a bias")).clone(),
                segment: store.get(self.segment).clone(),
                position: store.get(self.position).clone(),
            }),
            Features::Conv { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, GradCheckConfig};
    use crate::params::small_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::zeros(size, size, 3);
        for v in img.data.iter_mut() {
            *v = rng.gen::<f32>();
        }
        img
    }

    #[test]
    fn patchify_counts_and_constancy() {
        let mut img = Image::zeros(64, 64, 3);
        img.data.fill(0.25);
        let rows = patchify(&img, 8).unwrap();
        assert_eq!(rows.dim(), (64, 192));
        assert!(rows.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn patchify_rejects_indivisible_sizes() {
        let img = Image::zeros(10, 12, 3);
        assert!(patchify(&img, 4).is_err());
        assert!(patchify(&img, 0).is_err());
    }

    #[test]
    fn patches_reassemble_into_the_image() {
        let img = random_image(16, 3);
        let rows = patchify(&img, 4).unwrap();
        assert_eq!(unpatchify(&rows, 16, 16, 4).unwrap(), img);
    }

    fn random_params(seed: u64, patch: usize, d: usize, len: usize) -> VisualParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VisualParams {
            patch,
            projection: small_normal(patch * patch * 3, d, 1.0, &mut rng),
            bias: small_normal(1, d, 1.0, &mut rng),
            segment: small_normal(2, d, 1.0, &mut rng),
            position: small_normal(len, d, 1.0, &mut rng),
        }
    }

    #[test]
    fn embed_visual_matches_per_row_dot_oracle() {
        let img = random_image(8, 5);
        let params = random_params(6, 4, 5, 4);
        let got = embed_visual(&img, &params).unwrap();
        assert_eq!(got.values.dim(), (4, 5));
        assert_eq!(got.modality, Modality::Visual);
        let patches = patchify(&img, 4).unwrap();
        for k in 0..4 {
            for j in 0..5 {
                let mut dot = 0.0;
                for i in 0..48 {
                    dot += (patches[[k, i]] - 0.5) / 0.25 * params.projection[[i, j]];
                }
                let want = dot + params.bias[[0, j]] + params.segment[[1, j]] + params.position[[k, j]];
                assert!((got.values[[k, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_visual_zero_and_identity_cases() {
        let img = random_image(4, 8);
        let mut params = random_params(1, 2, 12, 4);
        params.projection.fill(0.0);
        params.bias.fill(0.0);
        params.segment.fill(0.0);
        params.position.fill(0.0);
        assert!(embed_visual(&img, &params).unwrap().values.iter().all(|&v| v == 0.0));

        params.projection = Mat::eye(12);
        let out = embed_visual(&img, &params).unwrap();
        let want = patchify(&img, 2).unwrap().mapv(|v| (v - 0.5) * 4.0);
        for (a, b) in out.values.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_positions_encode_row_and_column() {
        let t = grid_position_table(4, 8);
        assert_eq!(t.dim(), (16, 8));
        assert!(t.iter().all(|v| (-1.0..=1.0).contains(v)));
        // Row 0, column 0 is sin(0) = 0 / cos(0) = 1 in every pair.
        for j in 0..8 {
            assert_eq!(t[[0, j]], if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        // Patches in the same grid row share the first half of their code.
        assert_eq!(t.row(1).slice(ndarray::s![..4]), t.row(2).slice(ndarray::s![..4]));
        assert_ne!(t.row(1).slice(ndarray::s![4..]), t.row(2).slice(ndarray::s![4..]));
        for a in 0..16 {
            for b in a + 1..16 {
                assert_ne!(t.row(a), t.row(b));
            }
        }
    }

    fn roll_right(img: &Image, shift: usize) -> Image {
        let mut out = Image::zeros(img.height, img.width, img.channels);
        for y in 0..img.height {
            for x in 0..img.width {
                for c in 0..img.channels {
                    out.set(y, (x + shift) % img.width, c, img.get(y, x, c));
                }
            }
        }
        out
    }

    #[test]
    fn translating_by_a_patch_permutes_feature_rows() {
        for kind in [EncoderKind::Patch] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::new();
            let seg = store.add("segment", small_normal(2, 6, 1.0, &mut rng));
            let cfg = VisualConfig {
                image_size: 16,
                patch_size: 4,
                encoder_kind: kind,
                conv_channels: (4, 4),
            };
            let enc = VisualEmbedding::new(&mut store, cfg, 6, seg, &mut rng).unwrap();
            let img = random_image(16, 11);
            let shifted = roll_right(&img, 4);
            let mut tape = Tape::new(&store);
            let a = enc.features(&mut tape, &img).unwrap();
            let b = enc.features(&mut tape, &shifted).unwrap();
            let (fa, fb) = (tape.value(a), tape.value(b));
            for gy in 0..4 {
                for gx in 0..4 {
                    let src = gy * 4 + gx;
                    let dst = gy * 4 + (gx + 1) % 4;
                    assert_eq!(fa.row(src), fb.row(dst));
                }
            }
        }
    }

    #[test]
    fn output_shape_for_both_encoders() {
        for kind in [EncoderKind::Patch, EncoderKind::Conv] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::new();
            let seg = store.add("segment", small_normal(2, 8, 1.0, &mut rng));
            let cfg = VisualConfig {
                image_size: 16,
                patch_size: 4,
                encoder_kind: kind,
                conv_channels: (4, 6),
            };
            let enc = VisualEmbedding::new(&mut store, cfg, 8, seg, &mut rng).unwrap();
            let mut tape = Tape::new(&store);
            let out = enc.forward(&mut tape, &random_image(16, 1)).unwrap();
            assert_eq!(tape.shape(out), (16, 8));
            assert!(enc.forward(&mut tape, &random_image(8, 1)).is_err());
        }
    }

    #[test]
    fn visual_gradients_match_finite_differences() {
        for kind in [EncoderKind::Patch, EncoderKind::Conv] {
            for seed in 0..3 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                let seg = store.add("segment", small_normal(2, 4, 1.0, &mut rng));
                let cfg = VisualConfig {
                    image_size: 8,
                    patch_size: 4,
                    encoder_kind: kind,
                    conv_channels: (3, 4),
                };
                let enc = VisualEmbedding::new(&mut store, cfg, 4, seg, &mut rng).unwrap();
                let probe = store.add("probe", small_normal(4, 4, 1.0, &mut rng));
                let img = random_image(8, seed + 100);
                let report = check_param_gradients(&store, &GradCheckConfig::default(), |t| {
                    let e = enc.forward(t, &img).unwrap();
                    let e = t.tanh(e);
                    let p = t.param(probe);
                    let m = t.mul(e, p);
                    t.sum_all(m)
                });
                assert!(report.max_rel_error < 1e-4, "{kind:?} {report:?}");
            }
        }
    }
}
