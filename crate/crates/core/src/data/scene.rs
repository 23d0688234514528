use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{interaction_class, organ_class, tool_class, Image, VqlaSample};
use super::{NUM_INTERACTIONS, NUM_ORGANS, NUM_TOOLS};
use crate::boxes::BoundingBox;
use crate::error::{Error, Result};

const ORGAN_COLORS: [[f32; 3]; NUM_ORGANS] = [
    [0.80, 0.20, 0.20],
    [0.55, 0.10, 0.40],
    [0.95, 0.65, 0.55],
    [0.90, 0.85, 0.45],
    [0.95, 0.55, 0.85],
    [0.60, 0.35, 0.10],
];

const TOOL_COLORS: [[f32; 3]; NUM_TOOLS] = [
    [0.75, 0.75, 0.80],
    [0.20, 0.35, 0.90],
    [0.10, 0.70, 0.70],
    [0.45, 0.45, 0.50],
    [0.97, 0.97, 0.97],
    [0.05, 0.05, 0.10],
];

const INTERACTION_COLORS: [[f32; 3]; NUM_INTERACTIONS] = [
    [0.00, 0.80, 0.20],
    [1.00, 0.50, 0.00],
    [0.40, 0.90, 1.00],
    [0.90, 0.10, 0.90],
    [1.00, 1.00, 0.00],
    [0.50, 0.20, 0.90],
];

const BACKGROUND: [f32; 3] = [0.30, 0.22, 0.20];

/// Fraction of the tool (measured from the apex) painted with the
/// interaction color.
const TIP_FRACTION: f64 = 0.45;

/// Minimum object extent per axis at 64×64; scaled with the image size.
const MIN_EXTENT_PX: usize = 8;

pub const QUESTION_TEMPLATES: [[&str; 3]; 3] = [
    [
        "what organ is being operated on",
        "which organ is shown in the image",
        "what is the organ",
    ],
    [
        "what tool is being used",
        "which instrument is in the image",
        "what is the surgical tool",
    ],
    [
        "what is the tool doing to the organ",
        "what is the state of the instrument",
        "how is the tool interacting with the tissue",
    ],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Organ,
    Tool,
    Interaction,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 3] = [QuestionKind::Organ, QuestionKind::Tool, QuestionKind::Interaction];

    pub fn name(self) -> &'static str {
        match self {
            QuestionKind::Organ => "organ",
            QuestionKind::Tool => "tool",
            QuestionKind::Interaction => "interaction",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for QuestionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QuestionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownQuestionKind(s.to_string()))
    }
}

impl fmt::Display for QuestionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned ellipse, pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub color_id: usize,
    pub center: (f64, f64),
    pub radii: (f64, f64),
}

impl OrganSpec {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.center.0) / self.radii.0;
        let dy = (y - self.center.1) / self.radii.1;
        dx * dx + dy * dy <= 1.0
    }
}

/// Triangle with its apex touching the organ, pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub color_id: usize,
    pub apex: (f64, f64),
    pub base_left: (f64, f64),
    pub base_right: (f64, f64),
}

impl ToolSpec {
    /// Barycentric weight of the apex if `(x, y)` lies inside the triangle.
    fn apex_weight(&self, x: f64, y: f64) -> Option<f64> {
        let (a, b, c) = (self.apex, self.base_left, self.base_right);
        let det = (b.1 - c.1) * (a.0 - c.0) + (c.0 - b.0) * (a.1 - c.1);
        if det.abs() < 1e-12 {
            return None;
        }
        let wa = ((b.1 - c.1) * (x - c.0) + (c.0 - b.0) * (y - c.1)) / det;
        let wb = ((c.1 - a.1) * (x - c.0) + (a.0 - c.0) * (y - c.1)) / det;
        let wc = 1.0 - wa - wb;
        (wa >= 0.0 && wb >= 0.0 && wc >= 0.0).then_some(wa)
    }

    fn vertices(&self) -> [(f64, f64); 3] {
        [self.apex, self.base_left, self.base_right]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub organ: OrganSpec,
    pub tools: Vec<ToolSpec>,
    pub interaction_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneOptions {
    pub image_size: usize,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions { image_size: 64 }
    }
}

/// Seed for sample `index` of a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scene(seed: u64) -> SceneSpec {
    generate_scene_with(seed, &SceneOptions::default())
}

/// Deterministic scene for `seed`: one organ, one tool touching it.
pub fn generate_scene_with(seed: u64, opts: &SceneOptions) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = opts.image_size as f64;
    let scale = size / 64.0;
    let min_extent = ((MIN_EXTENT_PX as f64 * scale).round() as usize).max(2);

    loop {
        let rx = rng.gen_range(8.0..15.0) * scale;
        let ry = rng.gen_range(8.0..15.0) * scale;
        let organ = OrganSpec {
            color_id: rng.gen_range(0..NUM_ORGANS),
            center: (
                rng.gen_range(rx + 1.0..size - rx - 1.0),
                rng.gen_range(ry + 1.0..size - ry - 1.0),
            ),
            radii: (rx, ry),
        };
        let tool_color = rng.gen_range(0..NUM_TOOLS);
        let interaction_id = rng.gen_range(0..NUM_INTERACTIONS);

        for _ in 0..64 {
            let phi = rng.gen_range(0.0..2.0 * PI);
            let (ux, uy) = (phi.cos(), phi.sin());
            let apex = (
                organ.center.0 + 0.85 * rx * ux,
                organ.center.1 + 0.85 * ry * uy,
            );
            let len = rng.gen_range(14.0..22.0) * scale;
            let half_width = rng.gen_range(5.0..8.0) * scale;
            let base = (apex.0 + len * ux, apex.1 + len * uy);
            let tool = ToolSpec {
                color_id: tool_color,
                apex,
                base_left: (base.0 - half_width * uy, base.1 + half_width * ux),
                base_right: (base.0 + half_width * uy, base.1 - half_width * ux),
            };
            let inside = tool
                .vertices()
                .iter()
                .all(|&(x, y)| x >= 0.5 && y >= 0.5 && x <= size - 0.5 && y <= size - 0.5);
            if !inside {
                continue;
            }
            let scene = SceneSpec {
                image_size: opts.image_size,
                organ: organ.clone(),
                tools: vec![tool],
                interaction_id,
            };
            let extent_ok = [scene.organ_mask_box(), scene.tool_mask_box(0)]
                .iter()
                .all(|b| b.is_some_and(|(x0, y0, x1, y1)| x1 - x0 >= min_extent && y1 - y0 >= min_extent));
            if extent_ok {
                return scene;
            }
        }
    }
}

impl SceneSpec {
    fn mask_box(&self, inside: impl Fn(f64, f64) -> bool) -> Option<(usize, usize, usize, usize)> {
        let n = self.image_size;
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..n {
            for x in 0..n {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    bounds = Some(match bounds {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bounds
    }

    fn organ_mask_box(&self) -> Option<(usize, usize, usize, usize)> {
        self.mask_box(|x, y| self.organ.contains(x, y))
    }

    fn tool_mask_box(&self, i: usize) -> Option<(usize, usize, usize, usize)> {
        let tool = &self.tools[i];
        self.mask_box(|x, y| tool.apex_weight(x, y).is_some())
    }

    fn normalize(&self, b: (usize, usize, usize, usize)) -> BoundingBox {
        let n = self.image_size as f64;
        BoundingBox {
            x1: b.0 as f64 / n,
            y1: b.1 as f64 / n,
            x2: b.2 as f64 / n,
            y2: b.3 as f64 / n,
        }
    }

    /// Tight normalized box of the organ's rasterized pixels.
    pub fn organ_box(&self) -> BoundingBox {
        self.normalize(self.organ_mask_box().expect("organ covers at least one pixel"))
    }

    /// Tight normalized box of tool `i`'s rasterized pixels.
    pub fn tool_box(&self, i: usize) -> BoundingBox {
        self.normalize(self.tool_mask_box(i).expect("tool covers at least one pixel"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tools.is_empty() {
            return Err(Error::InvalidInput("scene has no tool".into()));
        }
        if self.organ.color_id >= NUM_ORGANS
            || self.interaction_id >= NUM_INTERACTIONS
            || self.tools.iter().any(|t| t.color_id >= NUM_TOOLS)
        {
            return Err(Error::InvalidInput("scene class id out of range".into()));
        }
        if self.organ_mask_box().is_none() || (0..self.tools.len()).any(|i| self.tool_mask_box(i).is_none()) {
            return Err(Error::InvalidInput("scene object covers no pixels".into()));
        }
        Ok(())
    }

    fn render(&self, rng: &mut ChaCha8Rng) -> Image {
        let n = self.image_size;
        let mut img = Image::zeros(n, n, 3);
        let freq = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
        let phase = rng.gen_range(0.0..2.0 * PI);
        for y in 0..n {
            for x in 0..n {
                let t = (2.0 * PI * (freq.0 * x as f64 + freq.1 * y as f64) / n as f64 + phase).sin();
                for (c, base) in BACKGROUND.iter().enumerate() {
                    let noise: f32 = rng.gen_range(-0.04..0.04);
                    let v = base + 0.05 * t as f32 + noise;
                    img.set(y, x, c, v.clamp(0.0, 1.0));
                }
            }
        }
        let paint = |img: &mut Image, x: usize, y: usize, color: &[f32; 3]| {
            for (c, v) in color.iter().enumerate() {
                img.set(y, x, c, *v);
            }
        };
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if self.organ.contains(px, py) {
                    paint(&mut img, x, y, &ORGAN_COLORS[self.organ.color_id]);
                }
                for tool in &self.tools {
                    if let Some(w) = tool.apex_weight(px, py) {
                        let color = if w > 1.0 - TIP_FRACTION {
                            &INTERACTION_COLORS[self.interaction_id]
                        } else {
                            &TOOL_COLORS[tool.color_id]
                        };
                        paint(&mut img, x, y, color);
                    }
                }
            }
        }
        img
    }
}

/// Renders `scene` and poses a question of `kind` about it. The first tool
/// is the queried one.
pub fn render_sample(scene: &SceneSpec, kind: QuestionKind, seed: u64) -> Result<VqlaSample> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = &QUESTION_TEMPLATES[kind.index()];
    let question = templates[rng.gen_range(0..templates.len())].to_string();
    let image = scene.render(&mut rng);
    let (answer_id, bbox) = match kind {
        QuestionKind::Organ => (organ_class(scene.organ.color_id), scene.organ_box()),
        QuestionKind::Tool => (tool_class(scene.tools[0].color_id), scene.tool_box(0)),
        QuestionKind::Interaction => (
            interaction_class(scene.interaction_id),
            scene.tool_box(0).union(&scene.organ_box()),
        ),
    };
    Ok(VqlaSample {
        image,
        question,
        answer_id,
        bbox,
    })
}

fn generate_one(seed: u64, index: usize, opts: &SceneOptions) -> VqlaSample {
    let s = sample_seed(seed, index as u64);
    let scene = generate_scene_with(s, opts);
    let kind = QuestionKind::ALL[index % 3];
    render_sample(&scene, kind, s ^ 0x5EED).expect("generated scenes are valid")
}

/// Samples `0..n` of the dataset defined by `seed`, generated in parallel
/// by index; each sample depends only on `(seed, index)`.
pub fn generate_dataset(n: usize, seed: u64, opts: &SceneOptions) -> Vec<VqlaSample> {
    (0..n)
        .into_par_iter()
        .map(|i| generate_one(seed, i, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NUM_CLASSES;

    #[test]
    fn scenes_are_deterministic_and_seed_dependent() {
        assert_eq!(generate_scene(0), generate_scene(0));
        assert_ne!(generate_scene(0), generate_scene(1));
    }

    #[test]
    fn scenes_have_objects_with_minimum_extent() {
        for seed in 0..200 {
            let s = generate_scene(seed);
            assert!(!s.tools.is_empty());
            s.validate().unwrap();
            for b in [s.organ_box(), s.tool_box(0)] {
                b.validate().unwrap();
                assert!((b.x2 - b.x1) * 64.0 >= 8.0 - 1e-9, "{seed}: {b:?}");
                assert!((b.y2 - b.y1) * 64.0 >= 8.0 - 1e-9, "{seed}: {b:?}");
            }
        }
    }

    #[test]
    fn organ_question_answers_with_organ_class_and_box() {
        let mut scene = generate_scene(4);
        scene.organ.color_id = 3;
        let s = render_sample(&scene, QuestionKind::Organ, 9).unwrap();
        assert_eq!(s.answer_id, 3);
        assert_eq!(s.bbox, scene.organ_box());
        assert!(QUESTION_TEMPLATES[0].contains(&s.question.as_str()));
    }

    #[test]
    fn interaction_box_is_union_of_tool_and_organ() {
        let scene = generate_scene(12);
        let s = render_sample(&scene, QuestionKind::Interaction, 1).unwrap();
        let (t, o) = (scene.tool_box(0), scene.organ_box());
        assert_eq!(s.bbox.x1, t.x1.min(o.x1));
        assert_eq!(s.bbox.y1, t.y1.min(o.y1));
        assert_eq!(s.bbox.x2, t.x2.max(o.x2));
        assert_eq!(s.bbox.y2, t.y2.max(o.y2));
        assert_eq!(s.answer_id, 12 + scene.interaction_id);
    }

    #[test]
    fn union_fixture() {
        let tool = BoundingBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
        let organ = BoundingBox::new(0.5, 0.5, 0.9, 0.9).unwrap();
        assert_eq!(tool.union(&organ).to_array(), [0.1, 0.1, 0.9, 0.9]);
    }

    #[test]
    fn render_is_deterministic() {
        let scene = generate_scene(3);
        let a = render_sample(&scene, QuestionKind::Tool, 5).unwrap();
        let b = render_sample(&scene, QuestionKind::Tool, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.image.in_unit_range());
        assert_eq!(a.answer_id, 6 + scene.tools[0].color_id);
    }

    #[test]
    fn question_kind_parsing() {
        assert_eq!("tool".parse::<QuestionKind>().unwrap(), QuestionKind::Tool);
        assert!(matches!("weather".parse::<QuestionKind>(), Err(Error::UnknownQuestionKind(_))));
    }

    #[test]
    fn templates_fit_the_text_budget() {
        for t in QUESTION_TEMPLATES.iter().flatten() {
            assert!(crate::text::split_words(t).len() <= 14);
        }
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let opts = SceneOptions::default();
        let par = generate_dataset(24, 77, &opts);
        let serial: Vec<_> = (0..24).map(|i| generate_one(77, i, &opts)).collect();
        assert_eq!(par, serial);
    }

    #[test]
    fn answers_cover_all_classes() {
        let opts = SceneOptions::default();
        let mut seen = [0usize; NUM_CLASSES];
        for i in 0..10_000 {
            seen[generate_one(5, i, &opts).answer_id] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
    }
}
