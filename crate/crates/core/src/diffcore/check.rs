//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::params::ParamStore;
use super::tape::{NodeId, Tape};
use super::DiffError;

/// Relative-error denominator floor. Keeps the check meaningful where the
/// true gradient is tiny and the numerator is dominated by roundoff in the
/// forward pass.
pub const REL_FLOOR: f64 = 1e-2;

/// Builds a scalar loss graph from the current parameter values.
pub type LossBuilder<'a> = dyn FnMut(&ParamStore, &mut Tape) -> Result<NodeId, DiffError> + 'a;

/// Compare the analytic gradient of `build_loss` against central finite
/// differences on `samples` randomly chosen learnable coordinates
/// (all coordinates when `samples` covers them). Returns the worst
/// relative error  |analytic - numeric| / max(|analytic|, |numeric|, floor).
pub fn finite_diff_check(
    build_loss: &mut LossBuilder,
    store: &mut ParamStore,
    h: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<f64, DiffError> {
    assert!(h > 0.0, "finite_diff_check: h must be positive");
    assert!(samples >= 1, "finite_diff_check: need at least one sample");

    let mut tape = Tape::new();
    let loss = build_loss(store, &mut tape)?;
    let grads = tape.backward(loss, store)?;

    let mut coords = store.learnable_coords();
    if samples < coords.len() {
        coords.shuffle(rng);
        coords.truncate(samples);
    }

    let mut worst = 0.0f64;
    for (name, idx) in coords {
        let analytic = grads[&name].data()[idx];

        store.perturb(&name, idx, h);
        let mut t = Tape::new();
        let node = build_loss(store, &mut t)?;
        let f_plus = t.value(node).as_scalar();

        store.perturb(&name, idx, -2.0 * h);
        let mut t = Tape::new();
        let node = build_loss(store, &mut t)?;
        let f_minus = t.value(node).as_scalar();

        store.perturb(&name, idx, h);

        let numeric = (f_plus - f_minus) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
