//! Procedural image corruptions for robustness evaluation: 18 kinds, each
//! with a fixed five-entry severity schedule. Every corruption is a pure
//! function of (image, kind, severity, seed) and clamps its output to
//! `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_seed, Image};
use crate::error::{Error, Result};

pub const NUM_SEVERITIES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    SpeckleNoise,
    GaussianBlur,
    DefocusBlur,
    MotionBlur,
    ZoomBlur,
    Brightness,
    Contrast,
    Saturate,
    Gamma,
    Fog,
    ElasticTransform,
    Pixelate,
    Quantize,
    BlockShuffle,
    Occlusion,
}

/// Whether a schedule's parameter grows or shrinks with severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Increasing,
    Decreasing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionInfo {
    pub name: &'static str,
    pub parameter: &'static str,
    pub schedule: [f64; NUM_SEVERITIES],
    pub trend: Trend,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 18] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::SpeckleNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Saturate,
        CorruptionKind::Gamma,
        CorruptionKind::Fog,
        CorruptionKind::ElasticTransform,
        CorruptionKind::Pixelate,
        CorruptionKind::Quantize,
        CorruptionKind::BlockShuffle,
        CorruptionKind::Occlusion,
    ];

    pub fn info(self) -> CorruptionInfo {
        use CorruptionKind::*;
        use Trend::*;
        let (name, parameter, schedule, trend) = match self {
            GaussianNoise => ("gaussian_noise", "sigma", [0.04, 0.06, 0.08, 0.11, 0.15], Increasing),
            ShotNoise => ("shot_noise", "photons", [60.0, 25.0, 12.0, 5.0, 3.0], Decreasing),
            ImpulseNoise => ("impulse_noise", "amount", [0.01, 0.02, 0.03, 0.05, 0.07], Increasing),
            SpeckleNoise => ("speckle_noise", "sigma", [0.06, 0.10, 0.12, 0.16, 0.20], Increasing),
            GaussianBlur => ("gaussian_blur", "sigma_px", [0.5, 0.75, 1.0, 1.5, 2.0], Increasing),
            DefocusBlur => ("defocus_blur", "radius_px", [1.0, 1.5, 2.0, 2.5, 3.0], Increasing),
            MotionBlur => ("motion_blur", "length_px", [2.0, 3.0, 4.0, 5.0, 6.0], Increasing),
            ZoomBlur => ("zoom_blur", "max_zoom", [1.02, 1.04, 1.06, 1.08, 1.10], Increasing),
            Brightness => ("brightness", "delta", [0.1, 0.2, 0.3, 0.4, 0.5], Increasing),
            Contrast => ("contrast", "factor", [0.75, 0.6, 0.45, 0.3, 0.15], Decreasing),
            Saturate => ("saturate", "desaturation", [0.2, 0.35, 0.5, 0.65, 0.8], Increasing),
            Gamma => ("gamma", "exponent", [1.2, 1.4, 1.6, 1.8, 2.0], Increasing),
            Fog => ("fog", "density", [0.15, 0.25, 0.35, 0.45, 0.55], Increasing),
            ElasticTransform => ("elastic_transform", "displacement_px", [0.5, 1.0, 1.5, 2.0, 2.5], Increasing),
            Pixelate => ("pixelate", "block_px", [2.0, 3.0, 4.0, 5.0, 6.0], Increasing),
            Quantize => ("quantize", "levels", [24.0, 16.0, 10.0, 6.0, 4.0], Decreasing),
            BlockShuffle => ("block_shuffle", "fraction", [0.05, 0.1, 0.2, 0.3, 0.4], Increasing),
            Occlusion => ("occlusion", "side_fraction", [0.1, 0.15, 0.2, 0.25, 0.3], Increasing),
        };
        CorruptionInfo {
            name,
            parameter,
            schedule,
            trend,
        }
    }

    pub fn name(self) -> &'static str {
        self.info().name
    }

    fn index(self) -> usize {
        CorruptionKind::ALL
            .iter()
            .position(|&k| k == self)
            .expect("every kind is registered")
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The registry in stable order.
pub fn list_corruptions() -> Vec<CorruptionInfo> {
    CorruptionKind::ALL.iter().map(|k| k.info()).collect()
}

/// Registry as an aligned text table.
pub fn registry_table() -> String {
    let mut out = format!("{:<18} {:<16} {}\n", "kind", "parameter", "severity 1..5");
    for info in list_corruptions() {
        let vals: Vec<String> = info.schedule.iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!("{:<18} {:<16} {}\n", info.name, info.parameter, vals.join(" ")));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: usize,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: &str, severity: usize, seed: u64) -> Result<Self> {
        let spec = CorruptionSpec {
            kind: kind.parse()?,
            severity,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=NUM_SEVERITIES).contains(&self.severity) {
            return Err(Error::InvalidInput(format!(
                "severity {} outside 1..={NUM_SEVERITIES}",
                self.severity
            )));
        }
        Ok(())
    }

    pub fn parameter(&self) -> f64 {
        self.kind.info().schedule[self.severity - 1]
    }
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

fn map_pixels(image: &Image, f: impl Fn(f32) -> f32) -> Image {
    Image {
        data: image.data.iter().map(|&p| clamp01(f(p))).collect(),
        ..image.clone()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample::<f64, _>(StandardNormal) as f32
}

/// Bilinear sample with edge clamping.
fn sample(image: &Image, y: f64, x: f64, ch: usize) -> f32 {
    let (h, w) = (image.height as f64, image.width as f64);
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(image.height - 1), (x0 + 1).min(image.width - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = image.get(y0, x0, ch) * (1.0 - fx) + image.get(y0, x1, ch) * fx;
    let bottom = image.get(y1, x0, ch) * (1.0 - fx) + image.get(y1, x1, ch) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Convolution with a normalized kernel of `(dy, dx, weight)` taps, clamping
/// at the borders.
fn convolve(image: &Image, taps: &[(isize, isize, f32)]) -> Image {
    let total: f32 = taps.iter().map(|t| t.2).sum();
    let mut out = image.clone();
    let (h, w) = (image.height as isize, image.width as isize);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..image.channels {
                let mut acc = 0.0;
                for &(dy, dx, wt) in taps {
                    let y = (r + dy).clamp(0, h - 1) as usize;
                    let x = (c + dx).clamp(0, w - 1) as usize;
                    acc += wt * image.get(y, x, ch);
                }
                out.set(r as usize, c as usize, ch, clamp01(acc / total));
            }
        }
    }
    out
}

fn gaussian_taps(sigma: f64) -> Vec<(isize, isize, f32)> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let d2 = (dy * dy + dx * dx) as f64;
            taps.push((dy, dx, (-d2 / (2.0 * sigma * sigma)).exp() as f32));
        }
    }
    taps
}

fn disk_taps(radius: f64) -> Vec<(isize, isize, f32)> {
    let r = radius.ceil() as isize;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= radius * radius {
                taps.push((dy, dx, 1.0));
            }
        }
    }
    taps
}

fn line_taps(length: f64, angle: f64) -> Vec<(isize, isize, f32)> {
    let steps = (length.ceil() as usize).max(1) * 2;
    let mut taps: Vec<(isize, isize, f32)> = Vec::new();
    for i in 0..=steps {
        let t = i as f64 / steps as f64 * length - 0.5 * length;
        let tap = ((t * angle.sin()).round() as isize, (t * angle.cos()).round() as isize, 1.0);
        if !taps.iter().any(|&(y, x, _)| (y, x) == (tap.0, tap.1)) {
            taps.push(tap);
        }
    }
    taps
}

fn gray(image: &Image, r: usize, c: usize) -> f32 {
    (0..image.channels).map(|ch| image.get(r, c, ch)).sum::<f32>() / image.channels as f32
}

/// Smooth random field in `[0, 1]`: a coarse uniform grid, bilinearly
/// upsampled, summed over two octaves.
fn smooth_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut field = vec![0.0f32; h * w];
    let mut norm = 0.0;
    for (cells, amp) in [(4usize, 1.0f32), (8, 0.5)] {
        let grid = Image {
            height: cells + 1,
            width: cells + 1,
            channels: 1,
            data: (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f32>()).collect(),
        };
        for r in 0..h {
            for c in 0..w {
                let y = r as f64 / (h.max(2) - 1) as f64 * cells as f64;
                let x = c as f64 / (w.max(2) - 1) as f64 * cells as f64;
                field[r * w + c] += amp * sample(&grid, y, x, 0);
            }
        }
        norm += amp;
    }
    field.iter_mut().for_each(|v| *v /= norm);
    field
}

fn displacement(h: usize, w: usize, amp: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    smooth_field(h, w, rng)
        .into_iter()
        .map(|v| (2.0 * v as f64 - 1.0) * amp)
        .collect()
}

/// Applies `spec` to `image`; deterministic in all inputs.
pub fn corrupt(image: &Image, spec: &CorruptionSpec) -> Result<Image> {
    spec.validate()?;
    if image.channels == 0 || image.height == 0 || image.width == 0 {
        return Err(Error::InvalidInput("cannot corrupt an empty image".into()));
    }
    let p = spec.parameter();
    let pf = p as f32;
    let stream = (spec.kind.index() * NUM_SEVERITIES + spec.severity) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, stream));
    let (h, w, nc) = (image.height, image.width, image.channels);
    use CorruptionKind::*;
    let out = match spec.kind {
        GaussianNoise => Image {
            data: image.data.iter().map(|&v| clamp01(v + pf * normal(&mut rng))).collect(),
            ..image.clone()
        },
        ShotNoise => Image {
            data: image
                .data
                .iter()
                .map(|&v| clamp01(v + (v.max(0.0) / pf).sqrt() * normal(&mut rng)))
                .collect(),
            ..image.clone()
        },
        ImpulseNoise => Image {
            data: image
                .data
                .iter()
                .map(|&v| {
                    if rng.gen::<f64>() < p {
                        if rng.gen::<bool>() {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                })
                .collect(),
            ..image.clone()
        },
        SpeckleNoise => Image {
            data: image
                .data
                .iter()
                .map(|&v| clamp01(v + v * pf * normal(&mut rng)))
                .collect(),
            ..image.clone()
        },
        GaussianBlur => convolve(image, &gaussian_taps(p)),
        DefocusBlur => convolve(image, &disk_taps(p)),
        MotionBlur => {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            convolve(image, &line_taps(p, angle))
        }
        ZoomBlur => {
            let steps = 6;
            let (cy, cx) = (0.5 * (h as f64 - 1.0), 0.5 * (w as f64 - 1.0));
            let mut out = image.clone();
            for r in 0..h {
                for c in 0..w {
                    for ch in 0..nc {
                        let mut acc = 0.0;
                        for s in 0..=steps {
                            let z = 1.0 + (p - 1.0) * s as f64 / steps as f64;
                            acc += sample(image, cy + (r as f64 - cy) / z, cx + (c as f64 - cx) / z, ch);
                        }
                        out.set(r, c, ch, clamp01(acc / (steps + 1) as f32));
                    }
                }
            }
            out
        }
        Brightness => map_pixels(image, |v| v + pf),
        Contrast => map_pixels(image, |v| 0.5 + pf * (v - 0.5)),
        Saturate => {
            let mut out = image.clone();
            for r in 0..h {
                for c in 0..w {
                    let g = gray(image, r, c);
                    for ch in 0..nc {
                        out.set(r, c, ch, clamp01(g + (1.0 - pf) * (image.get(r, c, ch) - g)));
                    }
                }
            }
            out
        }
        Gamma => map_pixels(image, |v| v.max(0.0).powf(pf)),
        Fog => {
            let field = smooth_field(h, w, &mut rng);
            let mut out = image.clone();
            for r in 0..h {
                for c in 0..w {
                    let f = field[r * w + c];
                    for ch in 0..nc {
                        let v = image.get(r, c, ch);
                        out.set(r, c, ch, clamp01((1.0 - pf) * v + pf * (0.6 + 0.4 * f)));
                    }
                }
            }
            out
        }
        ElasticTransform => {
            let dy = displacement(h, w, p, &mut rng);
            let dx = displacement(h, w, p, &mut rng);
            let mut out = image.clone();
            for r in 0..h {
                for c in 0..w {
                    let k = r * w + c;
                    for ch in 0..nc {
                        out.set(r, c, ch, clamp01(sample(image, r as f64 + dy[k], c as f64 + dx[k], ch)));
                    }
                }
            }
            out
        }
        Pixelate => {
            let b = p as usize;
            let mut out = image.clone();
            for r0 in (0..h).step_by(b) {
                for c0 in (0..w).step_by(b) {
                    let (r1, c1) = ((r0 + b).min(h), (c0 + b).min(w));
                    let n = ((r1 - r0) * (c1 - c0)) as f32;
                    for ch in 0..nc {
                        let mut acc = 0.0;
                        for r in r0..r1 {
                            for c in c0..c1 {
                                acc += image.get(r, c, ch);
                            }
                        }
                        for r in r0..r1 {
                            for c in c0..c1 {
                                out.set(r, c, ch, clamp01(acc / n));
                            }
                        }
                    }
                }
            }
            out
        }
        Quantize => {
            let levels = pf - 1.0;
            map_pixels(image, |v| (v * levels).round() / levels)
        }
        BlockShuffle => {
            let b = (h.min(w) / 8).max(1);
            let (gh, gw) = (h / b, w / b);
            let n = gh * gw;
            let mut out = image.clone();
            if n >= 2 {
                let pairs = ((p * n as f64).round() as usize).max(1);
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                for pair in order.chunks_exact(2).take(pairs) {
                    let (a, bk) = (pair[0], pair[1]);
                    let (ar, ac) = ((a / gw) * b, (a % gw) * b);
                    let (br, bc) = ((bk / gw) * b, (bk % gw) * b);
                    for dr in 0..b {
                        for dc in 0..b {
                            for ch in 0..nc {
                                let va = image.get(ar + dr, ac + dc, ch);
                                let vb = image.get(br + dr, bc + dc, ch);
                                out.set(ar + dr, ac + dc, ch, vb);
                                out.set(br + dr, bc + dc, ch, va);
                            }
                        }
                    }
                }
            }
            out
        }
        Occlusion => {
            let side_h = ((p * h as f64).round() as usize).clamp(1, h);
            let side_w = ((p * w as f64).round() as usize).clamp(1, w);
            let r0 = rng.gen_range(0..=h - side_h);
            let c0 = rng.gen_range(0..=w - side_w);
            let color: Vec<f32> = (0..nc).map(|_| rng.gen::<f32>()).collect();
            let mut out = image.clone();
            for r in r0..r0 + side_h {
                for c in c0..c0 + side_w {
                    for (ch, &v) in color.iter().enumerate() {
                        out.set(r, c, ch, v);
                    }
                }
            }
            out
        }
    };
    Ok(out)
}

/// Corrupts every image with per-index derived seeds, in parallel.
pub fn corrupt_all(images: &[&Image], kind: CorruptionKind, severity: usize, seed: u64) -> Result<Vec<Image>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            corrupt(
                img,
                &CorruptionSpec {
                    kind,
                    severity,
                    seed: sample_seed(seed, i as u64),
                },
            )
        })
        .collect()
}
