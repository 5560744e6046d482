//! Central finite-difference verification of tape gradients.

use std::sync::Mutex;

use crate::autograd::{Branches, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct GradFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<GradFailure>,
    pub max_rel_err: f64,
    /// Coordinates whose `±h` evaluations would have left the piece of the
    /// piecewise ops that holds the unperturbed point (only counted by
    /// [`check_gradients_on_branch`]).
    pub left_branch: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Objective value and whether the tape left the replayed pieces.
fn eval<F>(f: &F, store: &ParamStore, follow: Option<&Branches>) -> Result<(f64, bool)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = match follow {
        Some(b) => Tape::replaying(b.clone()),
        None => Tape::new(),
    };
    let out = f(&mut tape, store)?;
    if tape.replay_diverged() {
        return Err(Error::Harness("objective does not record the same piecewise ops at every point".into()));
    }
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Harness(format!("objective has dims {:?}, expected a scalar", v.dims())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Harness(format!("objective is not finite ({v})")));
    }
    Ok((v, tape.left_branch()))
}

/// Compares the tape gradient of the scalar `f` against central differences
/// for every scalar coordinate of `params`.
///
/// A coordinate fails when `|analytic - numeric| / max(1, |analytic|) > tol`.
/// Coordinates are spread over the available cores; each worker perturbs its
/// own copy of the store.
pub fn check_gradients<F>(store: &ParamStore, params: &[ParamId], h: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    run(store, params, h, tol, f, false)
}

/// Like [`check_gradients`], but both sides of every difference are
/// evaluated on the pieces (relu masks, max/min picks, interpolation cells)
/// chosen at the unperturbed point. The objective then agrees with the real
/// one near that point and is smooth across the step, so kinks closer than
/// `h` no longer bias the differences. `left_branch` counts the coordinates
/// where that happened.
pub fn check_gradients_on_branch<F>(store: &ParamStore, params: &[ParamId], h: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    run(store, params, h, tol, f, true)
}

fn run<F>(store: &ParamStore, params: &[ParamId], h: f64, tol: f64, f: F, follow: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    if !(h > 0.0) {
        return Err(Error::Harness(format!("step {h} must be positive")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if !tape.value(out).is_finite() || tape.value(out).len() != 1 {
        return Err(Error::Harness("objective is not a finite scalar".into()));
    }
    let grads = tape.backward(out);
    let branches = follow.then(|| tape.branches());

    let mut jobs = Vec::new();
    for &id in params {
        let n = store.get(id).tensor.len();
        let analytic = match tape.param_var(id).and_then(|v| grads.get(v)) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        for (i, a) in analytic.into_iter().enumerate() {
            jobs.push((id, i, a));
        }
    }

    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers.max(1)).max(1);
    let failures = Mutex::new(Vec::new());
    let max_err = Mutex::new(0.0f64);
    let left = Mutex::new(0usize);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for part in jobs.chunks(chunk) {
            let f = &f;
            let failures = &failures;
            let max_err = &max_err;
            let left = &left;
            let branches = branches.as_ref();
            let first_error = &first_error;
            scope.spawn(move || {
                let mut local = store.clone();
                let mut local_fail = Vec::new();
                let mut local_max = 0.0f64;
                let mut local_left = 0usize;
                for &(id, i, analytic) in part {
                    let orig = local.get(id).tensor.data()[i];
                    local.get_mut(id).tensor.data_mut()[i] = orig + h;
                    let plus = eval(f, &local, branches);
                    local.get_mut(id).tensor.data_mut()[i] = orig - h;
                    let minus = eval(f, &local, branches);
                    local.get_mut(id).tensor.data_mut()[i] = orig;
                    let (plus, minus) = match (plus, minus) {
                        (Ok((p, lp)), Ok((m, lm))) => {
                            local_left += usize::from(lp || lm);
                            (p, m)
                        }
                        (Err(e), _) | (_, Err(e)) => {
                            first_error.lock().expect("lock").get_or_insert(e);
                            return;
                        }
                    };
                    let numeric = (plus - minus) / (2.0 * h);
                    let rel_err = (analytic - numeric).abs() / analytic.abs().max(1.0);
                    local_max = local_max.max(rel_err);
                    if rel_err > tol {
                        local_fail.push(GradFailure {
                            param: local.get(id).name.clone(),
                            index: i,
                            analytic,
                            numeric,
                            rel_err,
                        });
                    }
                }
                failures.lock().expect("lock").extend(local_fail);
                let mut m = max_err.lock().expect("lock");
                *m = m.max(local_max);
                *left.lock().expect("lock") += local_left;
            });
        }
    });

    if let Some(e) = first_error.into_inner().expect("lock") {
        return Err(e);
    }
    let mut failures = failures.into_inner().expect("lock");
    failures.sort_by(|a, b| a.param.cmp(&b.param).then(a.index.cmp(&b.index)));
    Ok(GradCheckReport {
        checked: jobs.len(),
        failures,
        max_rel_err: max_err.into_inner().expect("lock"),
        left_branch: left.into_inner().expect("lock"),
    })
}
