use serde::{Deserialize, Serialize};

use crate::params::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Visual,
    Text,
}

impl Modality {
    /// Segment-table row for this modality.
    pub fn segment_id(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Visual => 1,
        }
    }
}

/// `L × d` embedding rows tagged with their modality. `valid[i]` is false
/// for padding positions, which are excluded as attention keys.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub values: Mat,
    pub modality: Modality,
    pub valid: Vec<bool>,
}

impl EmbeddingSequence {
    pub fn new(values: Mat, modality: Modality) -> Self {
        let valid = vec![true; values.nrows()];
        EmbeddingSequence {
            values,
            modality,
            valid,
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

/// Sequence living on a tape, with its key-validity mask.
#[derive(Clone, Debug)]
pub struct TapeSequence {
    pub var: crate::autograd::Var,
    pub valid: Vec<bool>,
}

impl TapeSequence {
    pub fn new(var: crate::autograd::Var, valid: Vec<bool>) -> Self {
        TapeSequence { var, valid }
    }

    pub fn all_valid(var: crate::autograd::Var, len: usize) -> Self {
        TapeSequence {
            var,
            valid: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Key mask for attention, `None` when every position is valid.
    pub fn key_mask(&self) -> Option<&[bool]> {
        if self.valid.iter().all(|&v| v) {
            None
        } else {
            Some(&self.valid)
        }
    }
}
