//! Box representations: normalized corner form for ground truth and
//! sigmoid-bounded center form for predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-form box in normalized image coordinates,
/// `0 ≤ x1 < x2 ≤ 1` and `0 ≤ y1 < y2 ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.x1)
            && (0.0..=1.0).contains(&self.y1)
            && self.x1 < self.x2
            && self.y1 < self.y2
            && self.x2 <= 1.0
            && self.y2 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid bounding box {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Center-form box `(cx, cy, w, h)`; predictions keep all four in `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

pub type PredictedBox = CenterBox;

impl CenterBox {
    pub fn from_array(v: [f64; 4]) -> Self {
        CenterBox {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corner form without clamping.
    pub fn corners_unclamped(&self) -> BoundingBox {
        BoundingBox {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }
}

/// `(cx − w/2, cy − h/2, cx + w/2, cy + h/2)` clamped to the unit square.
pub fn box_to_corners(b: &PredictedBox) -> BoundingBox {
    let c = b.corners_unclamped();
    BoundingBox {
        x1: c.x1.clamp(0.0, 1.0),
        y1: c.y1.clamp(0.0, 1.0),
        x2: c.x2.clamp(0.0, 1.0),
        y2: c.y2.clamp(0.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn full_box_to_corners() {
        let c = box_to_corners(&CenterBox::from_array([0.5, 0.5, 1.0, 1.0]));
        assert_eq!(c.to_array(), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn offset_box_to_corners() {
        let c = box_to_corners(&CenterBox::from_array([0.5, 0.5, 0.2, 0.4]));
        let want = [0.4, 0.3, 0.6, 0.7];
        for (g, w) in c.to_array().iter().zip(want) {
            assert!(close(*g, w), "{c:?}");
        }
    }

    #[test]
    fn corners_are_clamped() {
        let c = box_to_corners(&CenterBox::from_array([0.1, 0.95, 0.4, 0.2]));
        assert_eq!(c.x1, 0.0);
        assert_eq!(c.y2, 1.0);
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BoundingBox::new(0.5, 0.1, 0.5, 0.2).is_err());
        assert!(BoundingBox::new(-0.1, 0.1, 0.5, 0.2).is_err());
        assert!(BoundingBox::new(0.1, 0.1, 0.5, 1.2).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    proptest! {
        #[test]
        fn corner_center_round_trip(x1 in 0.0..0.9f64, y1 in 0.0..0.9f64, w in 0.01..0.1f64, h in 0.01..0.1f64) {
            let b = BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap();
            let back = box_to_corners(&b.to_center());
            for (g, want) in back.to_array().iter().zip(b.to_array()) {
                prop_assert!((g - want).abs() < 1e-12);
            }
        }
    }
}
