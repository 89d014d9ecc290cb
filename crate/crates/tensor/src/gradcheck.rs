//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued function of one tensor.
pub fn gradcheck<S, F>(f: F, x: &Tensor<S>, h: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut g = Graph::<S>::recording();
    let xv = g.input(x.clone())?;
    let loss = f(&mut g, xv)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::usage("gradcheck requires a scalar-valued function"));
    }
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(xv) {
        Some(grad) => grad.iter().map(|&v| v.as_f64()).collect(),
        None => vec![0.0; x.numel()],
    };

    let eval = |data: Vec<S>| -> Result<f64> {
        let mut g = Graph::<S>::inference();
        let v = g.constant(Tensor::new(x.shape().to_vec(), data)?)?;
        let out = f(&mut g, v)?;
        Ok(g.value(out).item()?.as_f64())
    };

    let hs = S::of(h);
    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] = plus[i] + hs;
        minus[i] = minus[i] - hs;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;

    #[test]
    fn sum_is_exact_on_dyadic_inputs() {
        // Dyadic values and a power-of-two step keep every difference exact,
        // so the check returns literally zero.
        let mut rng = init::seeded_rng(9);
        for shape in [vec![4], vec![2, 3], vec![2, 2, 2]] {
            let t: Tensor<f64> = init::uniform(&mut rng, &shape, -2.0, 2.0);
            let snapped: Vec<f64> =
                t.data().iter().map(|v| (v * 1024.0).round() / 1024.0).collect();
            let x = Tensor::new(shape, snapped).unwrap();
            let err = gradcheck(|g, v| g.sum_all(v), &x, 1.0 / 65536.0).unwrap();
            assert_eq!(err, 0.0);
        }
    }

    #[test]
    fn sum_of_sigmoid_is_tight() {
        let x: Tensor<f64> = init::uniform(&mut init::seeded_rng(3), &[6], -2.0, 2.0);
        let err = gradcheck(
            |g, v| {
                let s = g.sigmoid(v)?;
                g.sum_all(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::<f64>::zeros(&[3]);
        assert!(gradcheck(|_, v| Ok(v), &x, 1e-5).is_err());
    }
}
