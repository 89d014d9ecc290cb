use crate::error::{Error, Result};
use crate::graph::{BackwardFn, Graph, Var};
use crate::linalg::{mm_nn, mm_nt, mm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the batch dims of the two operands line up.
#[derive(Clone, Copy)]
enum BatchMode {
    /// both operands carry the same batch dims
    Paired,
    /// lhs batched, rhs is a single [k,n] matrix
    SharedRhs,
    /// rhs batched, lhs is a single [m,k] matrix
    SharedLhs,
}

impl<S: Scalar> Graph<S> {
    /// Matrix product over the trailing two dims. Leading batch dims must
    /// match, or one operand may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner dims {ka} vs {kb}")));
        }
        let k = ka;
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let (mode, batch_shape) = if batch_a == batch_b {
            (BatchMode::Paired, batch_a.to_vec())
        } else if batch_b.is_empty() {
            (BatchMode::SharedRhs, batch_a.to_vec())
        } else if batch_a.is_empty() {
            (BatchMode::SharedLhs, batch_b.to_vec())
        } else {
            return Err(Error::shape("matmul", format!("batch dims {batch_a:?} vs {batch_b:?}")));
        };
        let batches: usize = batch_shape.iter().product();

        let mut out = vec![S::zero(); batches * m * n];
        for i in 0..batches {
            let av = match mode {
                BatchMode::SharedLhs => &ta.data()[..m * k],
                _ => &ta.data()[i * m * k..(i + 1) * m * k],
            };
            let bv = match mode {
                BatchMode::SharedRhs => &tb.data()[..k * n],
                _ => &tb.data()[i * k * n..(i + 1) * k * n],
            };
            mm_nn(av, bv, &mut out[i * m * n..(i + 1) * m * n], m, k, n);
        }
        let mut out_shape = batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);

        let rec = self.wants_grad(&[a, b]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let (ca, cb) = (ta.clone(), tb.clone());
            Box::new(move |g, sink| {
                let mut ga = vec![S::zero(); ca.numel()];
                let mut gb = vec![S::zero(); cb.numel()];
                for i in 0..batches {
                    let gv = &g[i * m * n..(i + 1) * m * n];
                    let (a_off, b_off) = match mode {
                        BatchMode::Paired => (i * m * k, i * k * n),
                        BatchMode::SharedRhs => (i * m * k, 0),
                        BatchMode::SharedLhs => (0, i * k * n),
                    };
                    // dA += g @ B^T ; dB += A^T @ g
                    mm_nt(gv, &cb.data()[b_off..b_off + k * n], &mut ga[a_off..a_off + m * k], m, n, k);
                    mm_tn(&ca.data()[a_off..a_off + m * k], gv, &mut gb[b_off..b_off + k * n], k, m, n);
                }
                sink(a, ga);
                sink(b, gb);
            })
        });
        self.push("matmul", Tensor::new(out_shape, out)?, rec, bw)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    /// Triple-loop reference product, the independent oracle.
    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn identity_preserves_any_matrix() {
        let mut g = Graph::<f64>::inference();
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let m = g.constant(Tensor::new(vec![2, 2], vec![3.0, -1.0, 7.5, 2.0]).unwrap()).unwrap();
        let y = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(y).data(), g.value(m).data());

        let m2 = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let eye2 = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let y2 = g.matmul(m2, eye2).unwrap();
        assert_eq!(g.value(y2).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn random_case_matches_triple_loop_oracle() {
        // fixed pseudo-random values, 3x4 by 4x2
        let a: Vec<f64> = (0..12).map(|i| ((i * 37 + 11) % 17) as f64 * 0.25 - 2.0).collect();
        let b: Vec<f64> = (0..8).map(|i| ((i * 53 + 5) % 13) as f64 * 0.5 - 3.0).collect();
        let expect = naive_matmul(&a, &b, 3, 4, 2);

        let mut g = Graph::<f64>::inference();
        let av = g.constant(Tensor::new(vec![3, 4], a).unwrap()).unwrap();
        let bv = g.constant(Tensor::new(vec![4, 2], b).unwrap()).unwrap();
        let y = g.matmul(av, bv).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_against_per_slice_oracle() {
        let a: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..2 * 4 * 2).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut g = Graph::<f64>::inference();
        let av = g.constant(Tensor::new(vec![2, 3, 4], a.clone()).unwrap()).unwrap();
        let bv = g.constant(Tensor::new(vec![2, 4, 2], b.clone()).unwrap()).unwrap();
        let y = g.matmul(av, bv).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 2]);
        for i in 0..2 {
            let want = naive_matmul(&a[i * 12..(i + 1) * 12], &b[i * 8..(i + 1) * 8], 3, 4, 2);
            let got = &g.value(y).data()[i * 6..(i + 1) * 6];
            for (gv, wv) in got.iter().zip(&want) {
                assert!((gv - wv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_rhs_broadcasts_over_batch() {
        let mut g = Graph::<f64>::recording();
        let a = g.input(Tensor::full(&[3, 2, 2], 1.0)).unwrap();
        let b = g.input(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 2, 2]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        // dB = sum over batch of A^T @ ones = 3 * [[2,2],[2,2]]
        assert_eq!(g.grad(b).unwrap(), &[6.0, 6.0, 6.0, 6.0]);
    }

    #[test]
    fn inner_dim_mismatch_is_shape_error() {
        let mut g = Graph::<f64>::inference();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[4, 2])).unwrap();
        assert!(g.matmul(a, b).is_err());
    }
}
