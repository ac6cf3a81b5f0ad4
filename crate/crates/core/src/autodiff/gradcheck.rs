use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` receives one gradient leaf per entry of `params` and returns the loss.
/// The result is `max |analytic - numeric| / max(1, |analytic|)` over all
/// coordinates of all parameters.
pub fn grad_check<F>(params: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::invalid(format!("finite-difference step {h} outside (0, 1e-3]")));
    }
    if params.iter().any(|p| !p.all_finite()) {
        return Err(Error::invalid("grad_check parameters must be finite"));
    }

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.detached().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.iter().map(Tensor::detached).collect();
    let mut worst = 0.0f64;
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf is trainable").to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_step() {
        let p = [Tensor::scalar(1.0)];
        let f = |t: &mut Tape, v: &[Var]| t.square(v[0]);
        assert!(grad_check(&p, 0.0, f).is_err());
        assert!(grad_check(&p, 1e-2, f).is_err());
        assert!(grad_check(&p, 1e-3, f).is_ok());
    }

    #[test]
    fn linear_layer_is_exact() {
        let x = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let w = Tensor::matrix(2, 2, vec![0.3, -0.2, 0.1, 0.4]).unwrap();
        let b = Tensor::vector(vec![0.05, -0.1]).unwrap();
        let err = grad_check(&[w, b], 1e-5, |t, v| {
            let xv = t.constant(x.clone());
            let y = t.affine(xv, v[0], v[1])?;
            t.sum(y)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
