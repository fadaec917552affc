//! Central-difference verification of tape gradients.
//!
//! The caller provides named parameter tensors and a builder that wires them
//! into a scalar loss on a fresh tape. The analytic gradient from one
//! backward pass is compared element by element against
//! `(f(x + eps) - f(x - eps)) / (2 eps)`, with the step scaled by the
//! element's magnitude. The builder must be a pure function of the
//! parameters; it runs twice per parameter element.

use super::{Tape, Tensor, VarId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element, with both gradient values.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol_rel: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol_rel
    }

    /// The parameter with the worst relative error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Checks the gradient of `build`'s loss with respect to every parameter.
///
/// `epsilon` is the base step (1e-5 is a good default); the step for each
/// element is `epsilon * max(1, |x|)`. Relative error per element is
/// `|a - n| / max(1, |a|, |n|)`.
pub fn check_gradients<F>(
    params: &[(String, Tensor)],
    mut build: F,
    epsilon: f64,
    tol_rel: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[VarId]) -> Result<VarId>,
{
    if epsilon <= 0.0 {
        return Err(Error::config("check_gradients: epsilon must be positive"));
    }

    let eval = |build: &mut F, tensors: &[(String, Tensor)]| -> Result<(Tape, Vec<VarId>, VarId)> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = tensors.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::shape(
                "check_gradients",
                format!("loss must be scalar, got {:?}", tape.value(loss).shape()),
            ));
        }
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(&mut build, params)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, (_, t))| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut overall = 0.0f64;
    for p in 0..params.len() {
        let mut worst = ParamCheck {
            name: params[p].0.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..params[p].1.numel() {
            let x = params[p].1.data()[i];
            let h = epsilon * x.abs().max(1.0);
            work[p].1.data_mut()[i] = x + h;
            let (tp, _, lp) = eval(&mut build, &work)?;
            let f_plus = tp.value(lp).data()[0];
            work[p].1.data_mut()[i] = x - h;
            let (tm, _, lm) = eval(&mut build, &work)?;
            let f_minus = tm.value(lm).data()[0];
            work[p].1.data_mut()[i] = x;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        overall = overall.max(worst.max_rel_err);
        per_param.push(worst);
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
        tol_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(name: &str, t: Tensor) -> (String, Tensor) {
        (name.to_owned(), t)
    }

    #[test]
    fn passes_on_a_small_mlp() {
        let params = vec![
            named(
                "w1",
                Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 - 6.0) * 0.11).collect()).unwrap(),
            ),
            named("b1", Tensor::vector(vec![0.05, -0.2, 0.3, 0.0])),
            named(
                "w2",
                Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 - 3.0) * 0.17).collect()).unwrap(),
            ),
        ];
        let x = Tensor::matrix(2, 3, vec![0.4, -0.9, 1.3, 0.2, 0.8, -0.5]).unwrap();
        let labels = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let report = check_gradients(
            &params,
            |tape, ids| {
                let xv = tape.leaf(x.clone());
                let h = tape.matmul(xv, ids[0])?;
                let h = tape.add_bias(h, ids[1])?;
                let h = tape.tanh(h);
                let z = tape.matmul(h, ids[2])?;
                tape.softmax_cross_entropy(z, &labels)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // Deliberately use an op pair whose analytic gradient differs from
        // the loss actually evaluated: loss = sum(relu(x)) analytically but
        // the numeric loss sees sum(relu(x)) + x[0] via a second use of x
        // that the builder only wires in when x is perturbed. Instead of
        // contriving impurity, check that a genuinely non-differentiable
        // kink (relu exactly at 0) is flagged.
        let params = vec![named("x", Tensor::vector(vec![0.0, 1.0]))];
        let report = check_gradients(
            &params,
            |tape, ids| {
                let r = tape.relu(ids[0]);
                Ok(tape.sum(r))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        // At the kink the two-sided difference reports 0.5, the tape says 0.
        assert!(!report.passed());
        let worst = report.worst().unwrap();
        assert_eq!(worst.worst_index, 0);
        assert!((worst.numeric - 0.5).abs() < 1e-9);
        assert_eq!(worst.analytic, 0.0);
    }

    #[test]
    fn unused_parameter_checks_as_zero() {
        let params = vec![
            named("used", Tensor::vector(vec![0.7])),
            named("unused", Tensor::vector(vec![2.0])),
        ];
        let report = check_gradients(
            &params,
            |tape, ids| {
                let t = tape.tanh(ids[0]);
                Ok(tape.sum(t))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.per_param[1].max_rel_err, 0.0);
    }
}
