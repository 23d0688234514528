//! Synthetic visual question localized-answering data.
//!
//! Scenes hold one flat-colored ellipse ("organ") and a triangular "tool"
//! whose tip is painted with the color of the tool-organ interaction, over a
//! textured noise background. Each sample asks about the organ, the tool, or
//! the interaction; the answer is one of 18 single-word classes and the box
//! locates the evidence (organ box, tool box, or their union).

mod io;
mod scene;

pub use io::{
    decode_image, encode_image, read_dataset, read_image, write_dataset, write_image, IMAGE_MAGIC,
    MANIFEST_FILE,
};
pub use scene::{
    generate_dataset, generate_scene, generate_scene_with, render_sample, sample_seed,
    OrganSpec, QuestionKind, SceneOptions, SceneSpec, ToolSpec, QUESTION_TEMPLATES,
};

use crate::boxes::BoundingBox;
use crate::params::Mat;

pub const NUM_ORGANS: usize = 6;
pub const NUM_TOOLS: usize = 6;
pub const NUM_INTERACTIONS: usize = 6;
pub const NUM_CLASSES: usize = NUM_ORGANS + NUM_TOOLS + NUM_INTERACTIONS;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "kidney",
    "liver",
    "stomach",
    "intestine",
    "lung",
    "heart",
    "forceps",
    "scissors",
    "clipper",
    "needle_driver",
    "suction",
    "retractor",
    "grasping",
    "cutting",
    "clipping",
    "suturing",
    "aspirating",
    "retracting",
];

pub fn organ_class(color_id: usize) -> usize {
    color_id
}

pub fn tool_class(color_id: usize) -> usize {
    NUM_ORGANS + color_id
}

pub fn interaction_class(interaction_id: usize) -> usize {
    NUM_ORGANS + NUM_TOOLS + interaction_id
}

/// `H × W × C` image, row-major `(row, col, channel)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    fn offset(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.offset(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        let o = self.offset(row, col, ch);
        self.data[o] = v;
    }

    /// `(H·W) × C` matrix, one row per pixel.
    pub fn to_pixel_rows(&self) -> Mat {
        Mat::from_shape_fn((self.height * self.width, self.channels), |(p, c)| {
            self.data[p * self.channels + c] as f64
        })
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqlaSample {
    pub image: Image,
    pub question: String,
    pub answer_id: usize,
    pub bbox: BoundingBox,
}
