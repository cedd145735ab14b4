//! Central-difference gradient verification.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the largest error.
    pub worst: Option<(String, usize)>,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares tape gradients of the scalar returned by `f` with central
/// differences, for every coordinate of every trainable parameter.
///
/// `f` must be deterministic: it is re-run twice per coordinate.
pub fn grad_check<F>(store: &mut ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.check_finite()?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        h: opts.h,
        tol: opts.tol,
        coords_checked: 0,
        max_rel_error: 0.0,
        worst: None,
        params: Vec::new(),
        passed: true,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable() {
            continue;
        }
        let n = store.value(id).len();
        let stride = match opts.max_coords_per_param {
            Some(k) if k < n => n.div_ceil(k),
            _ => 1,
        };
        let mut pc = ParamCheck {
            name: store.get(id).name().to_string(),
            coords_checked: 0,
            max_rel_error: 0.0,
        };
        for i in (0..n).step_by(stride) {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let orig = store.value(id).data()[i];
            store.get_mut(id).value_mut().data_mut()[i] = orig + opts.h;
            let fp = eval(store);
            store.get_mut(id).value_mut().data_mut()[i] = orig - opts.h;
            let fm = eval(store);
            store.get_mut(id).value_mut().data_mut()[i] = orig;
            let numeric = (fp? - fm?) / (2.0 * opts.h);
            let err = relative_error(analytic, numeric);
            pc.coords_checked += 1;
            if err > pc.max_rel_error {
                pc.max_rel_error = err;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pc.name.clone(), i));
            }
        }
        report.coords_checked += pc.coords_checked;
        report.params.push(pc);
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}
