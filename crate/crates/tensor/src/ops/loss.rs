use crate::error::{Error, Result};
use crate::graph::{BackwardFn, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Mean binary cross-entropy on raw logits, computed in the
    /// overflow-safe form max(z,0) - z*y + ln(1 + exp(-|z|)).
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (tz, ty) = (self.value(logits).clone(), self.value(targets).clone());
        if tz.shape() != ty.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", tz.shape(), ty.shape()),
            ));
        }
        let n = tz.numel();
        if n == 0 {
            return Err(Error::shape("bce_with_logits", "empty input"));
        }
        let inv_n = S::one() / S::of(n as f64);
        let mut acc = S::zero();
        for (&z, &y) in tz.data().iter().zip(ty.data()) {
            let pos = if z > S::zero() { z } else { S::zero() };
            acc += pos - z * y + (S::one() + (-z.abs()).exp()).ln();
        }
        let rec = self.wants_grad(&[logits, targets]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let (cz, cy) = (tz.clone(), ty.clone());
            Box::new(move |g, sink| {
                let go = g[0] * inv_n;
                let gz: Vec<S> = cz
                    .data()
                    .iter()
                    .zip(cy.data())
                    .map(|(&z, &y)| {
                        let sig = if z >= S::zero() {
                            S::one() / (S::one() + (-z).exp())
                        } else {
                            let e = z.exp();
                            e / (S::one() + e)
                        };
                        go * (sig - y)
                    })
                    .collect();
                sink(logits, gz);
                sink(targets, cz.data().iter().map(|&z| -go * z).collect());
            })
        });
        self.push("bce_with_logits", Tensor::scalar(acc * inv_n), rec, bw)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn zero_logits_give_ln_two() {
        let mut g = Graph::<f64>::inference();
        let z = g.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let y = g
            .constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let l = g.bce_with_logits_mean(z, y).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_logits_give_near_zero_loss() {
        let mut g = Graph::<f64>::inference();
        let z = g
            .constant(Tensor::new(vec![4], vec![40.0, -40.0, 40.0, -40.0]).unwrap())
            .unwrap();
        let y = g.constant(Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let l = g.bce_with_logits_mean(z, y).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-15);
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let mut g = Graph::<f64>::inference();
        let z = g.constant(Tensor::new(vec![2], vec![-5000.0, 5000.0]).unwrap()).unwrap();
        let y = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
        let l = g.bce_with_logits_mean(z, y).unwrap();
        assert!(g.value(l).item().unwrap().is_finite());
    }
}
