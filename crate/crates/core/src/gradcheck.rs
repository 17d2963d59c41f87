//! Central finite-difference checks of tape gradients.

use alloc::string::String;

use crate::error::Result;
use crate::params::{GradBuffer, ParamSet};
use crate::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of the scalar built by `loss` against
/// central differences with step `h`, for every entry of every parameter.
pub fn check<F>(params: &ParamSet, h: f64, loss: F) -> Result<GradCheck>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamSet) -> Result<Var>,
{
    let mut grads = GradBuffer::new(params);
    {
        let mut tape = Tape::new();
        let l = loss(&mut tape, params)?;
        tape.backward(l)?;
        tape.accumulate_param_grads(&mut grads, 1.0);
    }
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(&mut tape, ps)?;
        Ok(tape.item(l))
    };
    let mut work = params.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: alloc::vec::Vec<_> = params.ids().collect();
    for id in ids {
        for i in 0..params.get(id).len() {
            let x0 = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            let e = relative_error(analytic, numeric);
            out.checked += 1;
            if e > out.max_rel_error || out.worst.is_none() {
                out.max_rel_error = out.max_rel_error.max(e);
                out.worst = Some((String::from(params.name(id)), i));
            }
        }
    }
    Ok(out)
}
