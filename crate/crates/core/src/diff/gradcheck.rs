//! Central finite-difference checks of tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of `loss` against central differences for
/// each listed parameter (all parameters when `only` is `None`). At most
/// `max_entries` scalars per parameter are probed, spread evenly.
pub fn check_gradients<F>(
    params: &ParamStore,
    only: Option<&[ParamId]>,
    max_entries: usize,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.check()?;
        Ok(tape.scalar(l))
    };
    let ids: Vec<ParamId> = match only {
        Some(list) => list.to_vec(),
        None => params.ids().collect(),
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for id in ids {
        let n = params.get(id).len();
        let stride = (n / max_entries.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(id).data()[k];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{}[{k}] analytic {a:.6e} numeric {numeric:.6e}", params.name(id));
            }
        }
    }
    Ok(report)
}
