//! Training losses: cross-entropy for the answer, L1 and generalized IoU for
//! the box. The total is the unweighted sum `ce + giou_loss + l1` by default.
//!
//! Box losses take the predicted box in center form. GIoU is evaluated on its
//! unclamped corners so the loss stays differentiable everywhere; metrics
//! clamp predictions to the unit square instead.

use serde::{Deserialize, Serialize};

use crate::boxes::{BoundingBox, PredictedBox};
use crate::error::{Error, Result};

/// Denominator guard for degenerate (zero-area) boxes.
pub const AREA_EPS: f64 = 1e-9;
/// Lower clamp on probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub giou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            giou: 1.0,
            l1: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub l1: f64,
    pub giou_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, giou_loss: f64, l1: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            ce,
            l1,
            giou_loss,
            total: w.ce * ce + w.giou * giou_loss + w.l1 * l1,
        }
    }

    /// Componentwise mean of a set of breakdowns (zero for an empty set).
    /// The total is recombined from the mean components, so it equals their
    /// weighted sum exactly.
    pub fn mean(items: &[LossBreakdown], w: &LossWeights) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown::new(avg(|b| b.ce), avg(|b| b.giou_loss), avg(|b| b.l1), w)
    }
}

/// `−ln p[target]` with `p` clamped below at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    let p = probs.get(target).ok_or_else(|| {
        Error::InvalidInput(format!("target {target} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Sum of absolute differences in center form.
pub fn l1_box(pred: &PredictedBox, gt: &BoundingBox) -> f64 {
    let g = gt.to_center().to_array();
    pred.to_array().iter().zip(g).map(|(p, g)| (p - g).abs()).sum()
}

struct Overlap {
    inter: f64,
    union: f64,
    enclosure: f64,
}

fn overlap(a: &BoundingBox, b: &BoundingBox) -> Overlap {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    Overlap {
        inter,
        union,
        enclosure: cw.max(0.0) * ch.max(0.0),
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union.max(AREA_EPS)
}

/// `IoU − (|C| − |A ∪ B|) / |C|` with `C` the smallest enclosing box.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let o = overlap(a, b);
    let c = o.enclosure.max(AREA_EPS);
    o.inter / o.union.max(AREA_EPS) - (c - o.union) / c
}

pub fn giou_loss(pred: &PredictedBox, gt: &BoundingBox) -> f64 {
    1.0 - giou(&pred.corners_unclamped(), gt)
}

/// Box loss terms and the gradient of `w_giou·giou_loss + w_l1·l1` with
/// respect to the center-form prediction `(cx, cy, w, h)`.
pub struct BoxLossGrad {
    pub giou_loss: f64,
    pub l1: f64,
    pub grad: [f64; 4],
}

pub fn box_loss_with_grad(pred: &PredictedBox, gt: &BoundingBox, weights: &LossWeights) -> BoxLossGrad {
    let p = pred.corners_unclamped();
    let o = overlap(&p, gt);
    let (u_guarded, c_guarded) = (o.union > AREA_EPS, o.enclosure > AREA_EPS);
    let u = o.union.max(AREA_EPS);
    let c = o.enclosure.max(AREA_EPS);
    let g = o.inter / u - (c - o.union) / c;

    // giou = I/U − 1 + U/C with U = A_p + A_g − I.
    let (d_i, d_ap, d_c) = {
        let du = if u_guarded { -o.inter / (u * u) + 1.0 / c } else { 0.0 };
        let di_direct = 1.0 / u;
        let dc = if c_guarded { -o.union / (c * c) } else { 0.0 };
        (di_direct - du, du, dc)
    };

    let iw = p.x2.min(gt.x2) - p.x1.max(gt.x1);
    let ih = p.y2.min(gt.y2) - p.y1.max(gt.y1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let (pw, ph) = (p.x2 - p.x1, p.y2 - p.y1);
    let cw = p.x2.max(gt.x2) - p.x1.min(gt.x1);
    let ch = p.y2.max(gt.y2) - p.y1.min(gt.y1);

    // Gradients of giou with respect to (x1, y1, x2, y2) of the prediction.
    let mut gc = [0.0; 4];
    // Intersection.
    if overlapping {
        if p.x1 > gt.x1 {
            gc[0] -= d_i * ih;
        }
        if p.x2 < gt.x2 {
            gc[2] += d_i * ih;
        }
        if p.y1 > gt.y1 {
            gc[1] -= d_i * iw;
        }
        if p.y2 < gt.y2 {
            gc[3] += d_i * iw;
        }
    }
    // Prediction area.
    gc[0] -= d_ap * ph;
    gc[2] += d_ap * ph;
    gc[1] -= d_ap * pw;
    gc[3] += d_ap * pw;
    // Enclosure.
    if p.x1 < gt.x1 {
        gc[0] -= d_c * ch;
    }
    if p.x2 > gt.x2 {
        gc[2] += d_c * ch;
    }
    if p.y1 < gt.y1 {
        gc[1] -= d_c * cw;
    }
    if p.y2 > gt.y2 {
        gc[3] += d_c * cw;
    }

    // Corners → center form; the loss is 1 − giou.
    let giou_grad = [
        -(gc[0] + gc[2]),
        -(gc[1] + gc[3]),
        -0.5 * (gc[2] - gc[0]),
        -0.5 * (gc[3] - gc[1]),
    ];
    let target = gt.to_center().to_array();
    let pa = pred.to_array();
    let mut grad = [0.0; 4];
    let mut l1 = 0.0;
    for k in 0..4 {
        let diff = pa[k] - target[k];
        l1 += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[k] = weights.giou * giou_grad[k] + weights.l1 * sign;
    }
    BoxLossGrad {
        giou_loss: 1.0 - g,
        l1,
        grad,
    }
}

pub fn total_loss(
    probs: &[f64],
    target: usize,
    pred: &PredictedBox,
    gt: &BoundingBox,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(probs, target)?;
    Ok(LossBreakdown::new(ce, giou_loss(pred, gt), l1_box(pred, gt), weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::CenterBox;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox { x1, y1, x2, y2 }
    }

    /// Rasterizes both boxes on an `n × n` grid of cell centers over `[0, 1]²`.
    fn raster_giou(a: &BoundingBox, b: &BoundingBox, n: usize) -> f64 {
        let inside = |r: &BoundingBox, x: f64, y: f64| x >= r.x1 && x < r.x2 && y >= r.y1 && y < r.y2;
        let enc = bx(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2));
        let (mut i, mut u, mut c) = (0usize, 0usize, 0usize);
        for row in 0..n {
            let y = (row as f64 + 0.5) / n as f64;
            for col in 0..n {
                let x = (col as f64 + 0.5) / n as f64;
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                i += (ia && ib) as usize;
                u += (ia || ib) as usize;
                c += inside(&enc, x, y) as usize;
            }
        }
        let (i, u, c) = (i as f64, u as f64, c as f64);
        i / u - (c - u) / c
    }

    #[test]
    fn giou_hand_cases() {
        let a = bx(0.1, 0.2, 0.6, 0.9);
        assert!((giou(&a, &a) - 1.0).abs() < 1e-9);
        let g = giou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0));
        assert!((g - (-5.0 / 63.0)).abs() < 1e-9, "{g}");
        let g = giou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0));
        assert!((g - (-7.0 / 9.0)).abs() < 1e-9, "{g}");
    }

    #[test]
    fn giou_loss_hand_cases() {
        let pred = CenterBox::from_array([2.0, 2.0, 2.0, 2.0]);
        let l = giou_loss(&pred, &bx(0.0, 0.0, 2.0, 2.0));
        assert!((l - (1.0 + 5.0 / 63.0)).abs() < 1e-9);
        let far = CenterBox::from_array([2.5, 2.5, 1.0, 1.0]);
        assert!((giou_loss(&far, &bx(0.0, 0.0, 1.0, 1.0)) - 16.0 / 9.0).abs() < 1e-9);
    }

    #[test]
    fn giou_approaches_minus_one_far_apart() {
        let g = giou(&bx(0.0, 0.0, 1.0, 1.0), &bx(100.0, 100.0, 101.0, 101.0));
        assert!(g < -0.9);
    }

    #[test]
    fn giou_matches_rasterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut rand_box = || {
                let (w, h) = (rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6));
                let (x, y) = (rng.gen_range(0.0..1.0 - w), rng.gen_range(0.0..1.0 - h));
                bx(x, y, x + w, y + h)
            };
            let (a, b) = (rand_box(), rand_box());
            let (analytic, raster) = (giou(&a, &b), raster_giou(&a, &b, 512));
            assert!((analytic - raster).abs() < 2e-2, "{a:?} {b:?}: {analytic} vs {raster}");
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut one_hot = vec![0.0; 18];
        one_hot[4] = 1.0;
        assert_eq!(cross_entropy(&one_hot, 4).unwrap(), 0.0);
        let uniform = vec![1.0 / 18.0; 18];
        assert!((cross_entropy(&uniform, 0).unwrap() - 18f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&uniform, 0).unwrap() - 2.8904).abs() < 1e-4);
        assert!(cross_entropy(&uniform, 18).is_err());
        assert!((cross_entropy(&one_hot, 0).unwrap() + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn l1_cases() {
        let gt = bx(0.0, 0.0, 1.0, 1.0);
        assert!((l1_box(&CenterBox::from_array([0.5; 4]), &gt) - 1.0).abs() < 1e-15);
        assert_eq!(l1_box(&gt.to_center(), &gt), 0.0);
    }

    #[test]
    fn total_loss_is_sum_of_independent_terms() {
        let probs: Vec<f64> = (1..=18).map(|k| k as f64 / 171.0).collect();
        let gt = bx(0.2, 0.3, 0.5, 0.8);
        let pred = CenterBox::from_array([0.4, 0.5, 0.3, 0.2]);
        let b = total_loss(&probs, 7, &pred, &gt, &LossWeights::default()).unwrap();
        let ce = -(8.0f64 / 171.0).ln();
        let c = gt.to_center();
        let l1 = (0.4 - c.cx).abs() + (0.5 - c.cy).abs() + (0.3 - c.w).abs() + (0.2 - c.h).abs();
        let p = pred.corners_unclamped();
        let gi = 1.0 - raster_free_giou(&p, &gt);
        assert!((b.ce - ce).abs() < 1e-12);
        assert!((b.l1 - l1).abs() < 1e-12);
        assert!((b.giou_loss - gi).abs() < 1e-12);
        assert_eq!(b.total, b.ce + b.giou_loss + b.l1);

        let mut perfect = vec![0.0; 18];
        perfect[7] = 1.0;
        let b = total_loss(&perfect, 7, &gt.to_center(), &gt, &LossWeights::default()).unwrap();
        assert!(b.total.abs() < 1e-12);
    }

    /// Direct area arithmetic written independently of the library helpers.
    fn raster_free_giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
        let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
        let inter = ix * iy;
        let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
        let c = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
        inter / union - (c - union) / c
    }

    fn box_objective(v: [f64; 4], gt: &BoundingBox) -> f64 {
        let pred = CenterBox::from_array(v);
        giou_loss(&pred, gt) + l1_box(&pred, gt)
    }

    fn numeric_grad(v: [f64; 4], gt: &BoundingBox) -> [f64; 4] {
        let h = 1e-6;
        let mut out = [0.0; 4];
        for k in 0..4 {
            let (mut a, mut b) = (v, v);
            a[k] += h;
            b[k] -= h;
            out[k] = (box_objective(a, gt) - box_objective(b, gt)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &[f64; 4], b: &[f64; 4]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / (na + nb).max(1e-12)
    }

    /// Keeps every corner and center coordinate at least `gap` away from the
    /// ground truth's so the piecewise terms are locally smooth.
    fn well_separated(v: [f64; 4], gt: &BoundingBox, gap: f64) -> bool {
        let p = CenterBox::from_array(v).corners_unclamped();
        let c = gt.to_center().to_array();
        let pc = [p.x1, p.x2, p.y1, p.y2];
        let gc = [gt.x1, gt.x2, gt.y1, gt.y2];
        let corners_ok = pc.iter().all(|a| gc.iter().all(|b| (a - b).abs() > gap));
        let center_ok = v.iter().zip(c).all(|(a, b)| (a - b).abs() > gap);
        corners_ok && center_ok
    }

    proptest! {
        #[test]
        fn box_gradient_matches_finite_differences(
            cx in 0.2..0.8f64, cy in 0.2..0.8f64, w in 0.1..0.6f64, h in 0.1..0.6f64,
            gx in 0.0..0.5f64, gy in 0.0..0.5f64, gw in 0.1..0.5f64, gh in 0.1..0.5f64,
        ) {
            let gt = bx(gx, gy, gx + gw, gy + gh);
            let v = [cx, cy, w, h];
            prop_assume!(well_separated(v, &gt, 1e-3));
            let analytic = box_loss_with_grad(&CenterBox::from_array(v), &gt, &LossWeights::default());
            let numeric = numeric_grad(v, &gt);
            prop_assert!(rel_err(&analytic.grad, &numeric) < 1e-3, "{:?} vs {:?}", analytic.grad, numeric);
            prop_assert!((analytic.giou_loss - giou_loss(&CenterBox::from_array(v), &gt)).abs() < 1e-15);
        }

        #[test]
        fn giou_is_symmetric_and_bounded(
            ax in 0.0..0.5f64, ay in 0.0..0.5f64, aw in 0.01..0.5f64, ah in 0.01..0.5f64,
            bx_ in 0.0..0.5f64, by in 0.0..0.5f64, bw in 0.01..0.5f64, bh in 0.01..0.5f64,
        ) {
            let a = bx(ax, ay, ax + aw, ay + ah);
            let b = bx(bx_, by, bx_ + bw, by + bh);
            let g = giou(&a, &b);
            prop_assert!((g - giou(&b, &a)).abs() < 1e-15);
            prop_assert!((-1.0..=1.0).contains(&g));
            prop_assert!(g <= iou(&a, &b) + 1e-15);
            let l = giou_loss(&a.to_center(), &b);
            prop_assert!((0.0..=2.0).contains(&l));
        }

        #[test]
        fn giou_equals_iou_under_containment(
            x in 0.0..0.4f64, y in 0.0..0.4f64, w in 0.2..0.5f64, h in 0.2..0.5f64,
            fx in 0.0..0.5f64, fy in 0.0..0.5f64,
        ) {
            let outer = bx(x, y, x + w, y + h);
            let inner = bx(x + fx * w * 0.5, y + fy * h * 0.5, x + w * (0.5 + fx * 0.5), y + h * (0.5 + fy * 0.5));
            prop_assert!((giou(&outer, &inner) - iou(&outer, &inner)).abs() < 1e-12);
        }

        #[test]
        fn l1_is_symmetric(a in prop::array::uniform4(0.05..0.95f64), b in prop::array::uniform4(0.05..0.95f64)) {
            let pa = CenterBox::from_array(a);
            let pb = CenterBox::from_array(b);
            let ca = CenterBox { cx: a[0], cy: a[1], w: a[2], h: a[3] }.corners_unclamped();
            let cb = pb.corners_unclamped();
            prop_assert!((l1_box(&pa, &cb) - l1_box(&pb, &ca)).abs() < 1e-12);
        }
    }
}
