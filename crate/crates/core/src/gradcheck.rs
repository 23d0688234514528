//! Central finite-difference checks for tape gradients.
//!
//! The numerical side only ever calls the forward closure; it shares no code
//! with the backward pass it is checking.

use crate::autograd::{Tape, Var};
use crate::params::{Mat, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Probe at most this many entries per parameter tensor (evenly strided).
    pub max_entries_per_param: usize,
    /// Tensors whose analytic and numeric gradient norms are both below this
    /// are reported with zero error.
    pub zero_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_entries_per_param: usize::MAX,
            zero_floor: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

/// Compares backprop gradients of the scalar built by `f` against central
/// differences, per parameter tensor, using
/// `‖g_analytic − g_numeric‖ / (‖g_analytic‖ + ‖g_numeric‖)` over probed entries.
pub fn check_param_gradients<F>(store: &ParamStore, cfg: &GradCheckConfig, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let root = f(&mut tape);
        let grads = tape.backward(root);
        let mut dense = store.zeros_like();
        grads.accumulate_into(&mut dense, 1.0);
        dense
    };

    let eval = |s: &ParamStore| {
        let mut tape = Tape::new(s);
        let root = f(&mut tape);
        tape.scalar(root)
    };

    let mut work = store.clone();
    let mut params = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        let stride = n.div_ceil(cfg.max_entries_per_param.min(n).max(1));
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for flat in (0..n).step_by(stride.max(1)) {
            let original = flat_get(work.get(id), flat);
            flat_set(work.get_mut(id), flat, original + cfg.step);
            let plus = eval(&work);
            flat_set(work.get_mut(id), flat, original - cfg.step);
            let minus = eval(&work);
            flat_set(work.get_mut(id), flat, original);
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = flat_get(&analytic[id.index()], flat);
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
        let (an, nn) = (a_sq.sqrt(), n_sq.sqrt());
        let rel_error = if an + nn < cfg.zero_floor {
            0.0
        } else {
            diff_sq.sqrt() / (an + nn)
        };
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            rel_error,
            analytic_norm: an,
        });
    }
    let max_rel_error = params.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    GradCheckReport {
        params,
        max_rel_error,
    }
}

fn flat_get(m: &Mat, flat: usize) -> f64 {
    m[[flat / m.ncols(), flat % m.ncols()]]
}

fn flat_set(m: &mut Mat, flat: usize, v: f64) {
    let c = m.ncols();
    m[[flat / c, flat % c]] = v;
}
