use crate::error::{Error, Result};
use crate::graph::{BackwardFn, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Row-wise softmax over the last axis, max-shifted for stability.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        let shape = t.shape().to_vec();
        let Some(&l) = shape.last() else {
            return Err(Error::shape("softmax", "scalar input"));
        };
        let mut out = vec![S::zero(); t.numel()];
        for (row, orow) in t.data().chunks_exact(l).zip(out.chunks_exact_mut(l)) {
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let mut z = S::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o = *o / z;
            }
        }
        let rec = self.wants_grad(&[x]);
        let ot = Tensor::new(shape, out)?;
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let y = ot.clone();
            Box::new(move |g, sink| {
                let mut gx = vec![S::zero(); g.len()];
                for ((srow, grow), xrow) in
                    y.data().chunks_exact(l).zip(g.chunks_exact(l)).zip(gx.chunks_exact_mut(l))
                {
                    let mut dot = S::zero();
                    for (&s, &gv) in srow.iter().zip(grow) {
                        dot += s * gv;
                    }
                    for ((x, &s), &gv) in xrow.iter_mut().zip(srow).zip(grow) {
                        *x = s * (gv - dot);
                    }
                }
                sink(x, gx);
            })
        });
        self.push("softmax", ot, rec, bw)
    }

    /// Layer normalization over the last axis with affine weights
    /// gamma/beta of that axis length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x).clone();
        let (tg, tb) = (self.value(gamma).clone(), self.value(beta).clone());
        let shape = t.shape().to_vec();
        let Some(&l) = shape.last() else {
            return Err(Error::shape("layer_norm", "scalar input"));
        };
        if tg.shape() != [l] || tb.shape() != [l] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for axis {l}", tg.shape(), tb.shape()),
            ));
        }
        let rows = t.numel() / l;
        let inv_l = S::one() / S::of(l as f64);
        let epss = S::of(eps);
        let mut out = vec![S::zero(); t.numel()];
        let mut xhat = vec![S::zero(); t.numel()];
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &t.data()[r * l..(r + 1) * l];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_l;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_l;
            let istd = S::one() / (var + epss).sqrt();
            inv_std[r] = istd;
            for (i, &v) in row.iter().enumerate() {
                let xh = (v - mean) * istd;
                xhat[r * l + i] = xh;
                out[r * l + i] = tg.data()[i] * xh + tb.data()[i];
            }
        }
        let rec = self.wants_grad(&[x, gamma, beta]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let cg = tg.clone();
            Box::new(move |g, sink| {
                let mut gx = vec![S::zero(); g.len()];
                let mut ggamma = vec![S::zero(); l];
                let mut gbeta = vec![S::zero(); l];
                for r in 0..rows {
                    let grow = &g[r * l..(r + 1) * l];
                    let xh = &xhat[r * l..(r + 1) * l];
                    let istd = inv_std[r];
                    // accumulate affine grads
                    for i in 0..l {
                        ggamma[i] += grow[i] * xh[i];
                        gbeta[i] += grow[i];
                    }
                    // dxhat = g * gamma; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for i in 0..l {
                        let dxh = grow[i] * cg.data()[i];
                        m1 += dxh;
                        m2 += dxh * xh[i];
                    }
                    m1 = m1 * inv_l;
                    m2 = m2 * inv_l;
                    for i in 0..l {
                        let dxh = grow[i] * cg.data()[i];
                        gx[r * l + i] = istd * (dxh - m1 - xh[i] * m2);
                    }
                }
                sink(x, gx);
                sink(gamma, ggamma);
                sink(beta, gbeta);
            })
        });
        self.push("layer_norm", Tensor::new(shape, out)?, rec, bw)
    }
}

impl<S: Scalar> Graph<S> {
    /// Group normalization over [B,C,H,W]: statistics per (batch, group)
    /// slab of C/groups channels, per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let t = self.value(x).clone();
        let (tg, tb) = (self.value(gamma).clone(), self.value(beta).clone());
        let shape = t.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("group_norm", format!("want [B,C,H,W], got {shape:?}")));
        }
        let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{c} channels in {groups} groups")));
        }
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::shape("group_norm", "affine weights must be per-channel".into()));
        }
        let cg = c / groups;
        let row = cg * plane;
        let rows = b * groups;
        let inv_row = S::one() / S::of(row as f64);
        let epss = S::of(eps);

        let mut out = vec![S::zero(); t.numel()];
        let mut xhat = vec![S::zero(); t.numel()];
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let seg = &t.data()[r * row..(r + 1) * row];
            let mut mean = S::zero();
            for &v in seg {
                mean += v;
            }
            mean = mean * inv_row;
            let mut var = S::zero();
            for &v in seg {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_row;
            let istd = S::one() / (var + epss).sqrt();
            inv_std[r] = istd;
            let base_channel = (r % groups) * cg;
            for i in 0..row {
                let ch = base_channel + i / plane;
                let xh = (seg[i] - mean) * istd;
                xhat[r * row + i] = xh;
                out[r * row + i] = tg.data()[ch] * xh + tb.data()[ch];
            }
        }
        let rec = self.wants_grad(&[x, gamma, beta]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let cg_t = tg.clone();
            Box::new(move |g, sink| {
                let mut gx = vec![S::zero(); g.len()];
                let mut ggamma = vec![S::zero(); c];
                let mut gbeta = vec![S::zero(); c];
                for r in 0..rows {
                    let grow = &g[r * row..(r + 1) * row];
                    let xh = &xhat[r * row..(r + 1) * row];
                    let istd = inv_std[r];
                    let base_channel = (r % groups) * cg;
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for i in 0..row {
                        let ch = base_channel + i / plane;
                        ggamma[ch] += grow[i] * xh[i];
                        gbeta[ch] += grow[i];
                        let dxh = grow[i] * cg_t.data()[ch];
                        m1 += dxh;
                        m2 += dxh * xh[i];
                    }
                    m1 = m1 * inv_row;
                    m2 = m2 * inv_row;
                    for i in 0..row {
                        let ch = base_channel + i / plane;
                        let dxh = grow[i] * cg_t.data()[ch];
                        gx[r * row + i] = istd * (dxh - m1 - xh[i] * m2);
                    }
                }
                sink(x, gx);
                sink(gamma, ggamma);
                sink(beta, gbeta);
            })
        });
        self.push("group_norm", Tensor::new(shape, out)?, rec, bw)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let y = g.softmax_last(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 1.7).sin() * 30.0).collect();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap()).unwrap();
        let y = g.softmax_last(x).unwrap();
        for row in g.value(y).data().chunks_exact(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut g = Graph::<f64>::inference();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.constant(Tensor::new(vec![1, 4, 2, 2], data).unwrap()).unwrap();
        let gamma = g.constant(Tensor::full(&[4], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.group_norm(x, gamma, beta, 2, 1e-6).unwrap();
        // each group of 2 channels x 4 pixels has zero mean, unit variance
        for seg in g.value(y).data().chunks_exact(8) {
            let mean: f64 = seg.iter().sum::<f64>() / 8.0;
            let var: f64 = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
        // group count must divide channels
        let bad = g.group_norm(x, gamma, beta, 3, 1e-6);
        assert!(bad.is_err());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let gamma = g.constant(Tensor::full(&[4], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        let out = g.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }
}
