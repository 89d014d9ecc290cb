//! Channel-wise affine modulation primitives. Both ops broadcast a per-batch,
//! per-channel scale/shift pair over the remaining positions.

use crate::error::{Error, Result};
use crate::graph::{BackwardFn, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// `a[b,t,c] * scale[b,c] + shift[b,c]` broadcast over token positions.
    pub fn scale_shift_tokens(&mut self, a: Var, scale: Var, shift: Var) -> Result<Var> {
        let t = self.value(a).clone();
        let (ts, th) = (self.value(scale).clone(), self.value(shift).clone());
        let s = t.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("scale_shift_tokens", format!("want [B,T,C], got {s:?}")));
        }
        let (b, tok, c) = (s[0], s[1], s[2]);
        if ts.shape() != [b, c] || th.shape() != [b, c] {
            return Err(Error::shape(
                "scale_shift_tokens",
                format!("scale {:?} shift {:?} for [B,C]=[{b},{c}]", ts.shape(), th.shape()),
            ));
        }
        let mut out = vec![S::zero(); t.numel()];
        for bi in 0..b {
            let sc = &ts.data()[bi * c..(bi + 1) * c];
            let sh = &th.data()[bi * c..(bi + 1) * c];
            for ti in 0..tok {
                let base = (bi * tok + ti) * c;
                let row = &t.data()[base..base + c];
                let orow = &mut out[base..base + c];
                for ((o, &v), (&scv, &shv)) in
                    orow.iter_mut().zip(row).zip(sc.iter().zip(sh.iter()))
                {
                    *o = v * scv + shv;
                }
            }
        }
        let rec = self.wants_grad(&[a, scale, shift]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let (ca, cs) = (t.clone(), ts.clone());
            Box::new(move |g, sink| {
                let mut ga = vec![S::zero(); ca.numel()];
                let mut gsc = vec![S::zero(); b * c];
                let mut gsh = vec![S::zero(); b * c];
                for bi in 0..b {
                    let sc = &cs.data()[bi * c..(bi + 1) * c];
                    for ti in 0..tok {
                        let base = (bi * tok + ti) * c;
                        for i in 0..c {
                            let gv = g[base + i];
                            ga[base + i] = gv * sc[i];
                            gsc[bi * c + i] += gv * ca.data()[base + i];
                            gsh[bi * c + i] += gv;
                        }
                    }
                }
                sink(a, ga);
                sink(scale, gsc);
                sink(shift, gsh);
            })
        });
        self.push("scale_shift_tokens", Tensor::new(s, out)?, rec, bw)
    }

    /// `f[b,c,i,j] * gamma[b,c] + beta[b,c]` broadcast over the spatial grid.
    pub fn scale_shift_channels(&mut self, f: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(f).clone();
        let (tg, tb) = (self.value(gamma).clone(), self.value(beta).clone());
        let s = t.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("scale_shift_channels", format!("want [B,C,h,w], got {s:?}")));
        }
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        if tg.shape() != [b, c] || tb.shape() != [b, c] {
            return Err(Error::shape(
                "scale_shift_channels",
                format!("gamma {:?} beta {:?} for [B,C]=[{b},{c}]", tg.shape(), tb.shape()),
            ));
        }
        let mut out = vec![S::zero(); t.numel()];
        for bc in 0..b * c {
            let (gv, bv) = (tg.data()[bc], tb.data()[bc]);
            let src = &t.data()[bc * plane..(bc + 1) * plane];
            for (o, &v) in out[bc * plane..(bc + 1) * plane].iter_mut().zip(src) {
                *o = v * gv + bv;
            }
        }
        let rec = self.wants_grad(&[f, gamma, beta]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let (cf, cg) = (t.clone(), tg.clone());
            Box::new(move |g, sink| {
                let mut gf = vec![S::zero(); cf.numel()];
                let mut ggamma = vec![S::zero(); b * c];
                let mut gbeta = vec![S::zero(); b * c];
                for bc in 0..b * c {
                    let gv = cg.data()[bc];
                    let src = &cf.data()[bc * plane..(bc + 1) * plane];
                    let grow = &g[bc * plane..(bc + 1) * plane];
                    let mut acc_g = S::zero();
                    let mut acc_b = S::zero();
                    for ((o, &xv), &go) in gf[bc * plane..(bc + 1) * plane]
                        .iter_mut()
                        .zip(src)
                        .zip(grow)
                    {
                        *o = go * gv;
                        acc_g += go * xv;
                        acc_b += go;
                    }
                    ggamma[bc] = acc_g;
                    gbeta[bc] = acc_b;
                }
                sink(f, gf);
                sink(gamma, ggamma);
                sink(beta, gbeta);
            })
        });
        self.push("scale_shift_channels", Tensor::new(s, out)?, rec, bw)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn identity_modulation_is_identity() {
        let data: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let mut g = Graph::<f64>::inference();
        let f = g.constant(Tensor::new(vec![1, 2, 2, 2], data.clone()).unwrap()).unwrap();
        let gamma = g.constant(Tensor::full(&[1, 2], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let y = g.scale_shift_channels(f, gamma, beta).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn hand_affine_on_single_channel() {
        let mut g = Graph::<f64>::inference();
        let f = g
            .constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let gamma = g.constant(Tensor::full(&[1, 1], 2.0)).unwrap();
        let beta = g.constant(Tensor::full(&[1, 1], 1.0)).unwrap();
        let y = g.scale_shift_channels(f, gamma, beta).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn token_modulation_broadcast_matches_loop_oracle() {
        let (b, t, c) = (2usize, 3usize, 4usize);
        let a: Vec<f64> = (0..b * t * c).map(|i| (i as f64 * 0.7).sin()).collect();
        let sc: Vec<f64> = (0..b * c).map(|i| (i as f64 * 0.3).cos()).collect();
        let sh: Vec<f64> = (0..b * c).map(|i| (i as f64 * 0.9).sin()).collect();
        let mut want = vec![0.0; b * t * c];
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    want[(bi * t + ti) * c + ci] =
                        a[(bi * t + ti) * c + ci] * sc[bi * c + ci] + sh[bi * c + ci];
                }
            }
        }
        let mut g = Graph::<f64>::inference();
        let av = g.constant(Tensor::new(vec![b, t, c], a).unwrap()).unwrap();
        let scv = g.constant(Tensor::new(vec![b, c], sc).unwrap()).unwrap();
        let shv = g.constant(Tensor::new(vec![b, c], sh).unwrap()).unwrap();
        let y = g.scale_shift_tokens(av, scv, shv).unwrap();
        for (got, exp) in g.value(y).data().iter().zip(&want) {
            assert!((got - exp).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scale_annihilates_input() {
        let mut g = Graph::<f64>::inference();
        let a = g.constant(Tensor::full(&[1, 3, 2], 42.0)).unwrap();
        let sc = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let sh = g.constant(Tensor::new(vec![1, 2], vec![5.0, -1.0]).unwrap()).unwrap();
        let y = g.scale_shift_tokens(a, sc, sh).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, -1.0, 5.0, -1.0, 5.0, -1.0]);
    }
}
