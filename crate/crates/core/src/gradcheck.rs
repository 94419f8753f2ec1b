//! Central finite-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Param, Parameters};

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter path and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Options for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Added to the numeric magnitude in the relative-error denominator.
    pub eps_floor: f64,
    /// Upper bound on probed elements per parameter tensor (evenly spaced).
    pub max_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            eps_floor: 1e-6,
            max_per_param: usize::MAX,
        }
    }
}

/// Compares tape gradients of a scalar loss with central differences over every
/// trainable parameter of `model`.
///
/// `loss` must be a pure function of the parameters; it is evaluated twice at the base
/// point and any difference is reported as a contract error.
pub fn finite_diff_check<M, F>(model: &mut M, loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    M: Parameters<f64>,
    F: Fn(&M, &mut Tape<f64>) -> Result<Var>,
{
    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::inference();
        let l = loss(m, &mut tape)?;
        Ok(tape.scalar(l))
    };
    let base = eval(model)?;
    if base.to_bits() != eval(model)?.to_bits() {
        return Err(Error::Contract("loss is not deterministic under repeated evaluation".into()));
    }

    let mut tape = Tape::new();
    let l = loss(model, &mut tape)?;
    let grads = tape.backward(l)?.into_param_map();

    let mut targets: Vec<(String, usize, f64)> = Vec::new();
    model.visit("", &mut |name, p: &Param<f64>| {
        if !p.value.requires_grad {
            return;
        }
        let n = p.value.numel();
        let stride = n.div_ceil(opts.max_per_param.max(1)).max(1);
        let g = grads.get(&p.id());
        for i in (0..n).step_by(stride) {
            targets.push((name.into(), i, g.map_or(0.0, |g| g[i])));
        }
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, idx, analytic) in targets {
        let probe = |m: &mut M, delta: f64| {
            m.visit_mut("", &mut |n, p| {
                if n == name {
                    let v = &mut p.value.data_mut()[idx];
                    *v += delta;
                }
            })
        };
        probe(model, opts.eps);
        let plus = eval(model);
        probe(model, -2.0 * opts.eps);
        let minus = eval(model);
        probe(model, opts.eps);
        let numeric = (plus? - minus?) / (2.0 * opts.eps);
        let rel = (analytic - numeric).abs() / (numeric.abs() + opts.eps_floor);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name.clone(), idx));
        }
    }
    Ok(report)
}

/// A bare list of parameters, for checking free functions.
#[derive(Debug, Clone, Default)]
pub struct ParamList(pub Vec<Param<f64>>);

impl Parameters<f64> for ParamList {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
        for (i, p) in self.0.iter().enumerate() {
            f(&crate::tensor::join(prefix, &alloc::format!("{i}")), p);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        for (i, p) in self.0.iter_mut().enumerate() {
            f(&crate::tensor::join(prefix, &alloc::format!("{i}")), p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn quadratic_is_nearly_exact() {
        let w = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.5, 0.7]).unwrap();
        let mut m = ParamList(vec![Param::new(w)]);
        let r = finite_diff_check(
            &mut m,
            |m, tape| {
                let w = tape.param(&m.0[0]);
                let sq = tape.mul_row(w, w)?;
                Ok(tape.sum(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut m = ParamList(vec![Param::new(Tensor::ones(&[3]))]);
        let c = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let r = finite_diff_check(
            &mut m,
            |m, tape| {
                let _ = tape.param(&m.0[0]);
                let c = tape.constant(&c);
                Ok(tape.sum(c))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use core::cell::Cell;
        let mut m = ParamList(vec![Param::new(Tensor::ones(&[2]))]);
        let calls = Cell::new(0.0);
        let err = finite_diff_check(
            &mut m,
            |m, tape| {
                calls.set(calls.get() + 1.0);
                let w = tape.param(&m.0[0]);
                let s = tape.sum(w);
                Ok(tape.scale(s, calls.get()))
            },
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
