//! Central finite-difference check of tape gradients.

pub mod suite;

use std::fmt;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to rounding do not divide by ~0.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { step: 1e-4, rel_tol: 1e-4, floor: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub rel_tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.rel_tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err > self.rel_tol)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            let verdict = if p.max_rel_err <= self.rel_tol { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{verdict:4} {:<40} n={:<6} max_rel_err={:.3e} (at {})",
                p.name, p.elements, p.max_rel_err, p.worst_index
            )?;
        }
        Ok(())
    }
}

/// Relative error between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` against `(f(θ+h) − f(θ−h)) / 2h` for
/// every element of every parameter in `params`.
///
/// `f` must be deterministic; stochastic nodes have to be frozen by the
/// caller. Two unperturbed evaluations that disagree are reported as
/// [`Error::OracleInvalid`].
pub fn gradcheck<F>(store: &mut ParamStore, params: &[ParamId], opts: GradcheckOptions, mut f: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore, f: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = tape.value(loss).item();
    tape.backward(loss)?;
    tape.accumulate_param_grads(store);
    drop(tape);

    let again = eval(store, &mut f)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "two forward passes disagree ({base:e} vs {again:e}); freeze stochastic nodes"
        )));
    }

    let h = opts.step;
    let mut report = GradcheckReport { params: Vec::with_capacity(params.len()), rel_tol: opts.rel_tol };
    for &id in params {
        let analytic = store.get(id).grad.clone();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            elements: analytic.len(),
            max_rel_err: 0.0,
            worst_index: 0,
        };
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store, &mut f);
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store, &mut f);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let e = rel_err(analytic.data()[i], numeric, opts.floor);
            if e > check.max_rel_err || e.is_nan() {
                check.max_rel_err = e;
                check.worst_index = i;
            }
        }
        report.params.push(check);
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Init;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[3, 4], Init::fan_in(3)).unwrap();
        store.initialize(3);
        let report = gradcheck(&mut store, &[w], GradcheckOptions::default(), |tape, s| {
            let w = tape.param(s, w)?;
            let sq = tape.mul(w, w)?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-8, "{report}");
    }

    #[test]
    fn detects_nondeterminism() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[2], Init::Ones).unwrap();
        store.initialize(0);
        let mut calls = 0.0;
        let err = gradcheck(&mut store, &[w], GradcheckOptions::default(), |tape, s| {
            calls += 1.0;
            let w = tape.param(s, w)?;
            let y = tape.scale(w, calls)?;
            tape.sum_all(y)
        })
        .unwrap_err();
        assert!(matches!(err, Error::OracleInvalid(_)));
    }

    #[test]
    fn names_parameter_with_wrong_backward() {
        let mut store = ParamStore::new();
        let good = store.add("good", &[3], Init::fan_in(1)).unwrap();
        let bad = store.add("bad", &[3], Init::fan_in(1)).unwrap();
        store.initialize(11);
        let report = gradcheck(&mut store, &[good, bad], GradcheckOptions::default(), |tape, s| {
            let g = tape.param(s, good)?;
            let b = tape.param(s, bad)?;
            // derivative of sin is cos; report -cos on purpose
            let sb = tape.elementwise(b, f64::sin, |x| -x.cos())?;
            let y = tape.mul(g, sb)?;
            tape.sum_all(y)
        })
        .unwrap();
        assert!(!report.passed());
        let failed: Vec<_> = report.failures().map(|p| p.name.as_str()).collect();
        assert_eq!(failed, vec!["bad"]);
    }
}

