use crate::error::{Error, Result};
use crate::graph::{BackwardFn, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-output-coordinate source taps: (lo index, hi index, hi weight).
/// Half-pixel-center convention; edges clamp, so constants are preserved.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a [C,H,W] buffer (no gradient tracking).
pub fn bilinear_resize_raw<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![S::zero(); c * oh * ow];
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (S::of(1.0 - fy), S::of(fy));
            let row = &mut dst[i * ow..(i + 1) * ow];
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (S::of(1.0 - fx), S::of(fx));
                row[j] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

impl<S: Scalar> Graph<S> {
    /// Bilinear resize of [B,C,H,W] to [B,C,oh,ow].
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let t = self.value(x).clone();
        let s = t.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("bilinear_resize", format!("want 4-d input, got {s:?}")));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::shape("bilinear_resize", "empty output"));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for bi in 0..b {
            out.extend(bilinear_resize_raw(
                &t.data()[bi * c * h * w..(bi + 1) * c * h * w],
                c,
                h,
                w,
                oh,
                ow,
            ));
        }
        let rec = self.wants_grad(&[x]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            Box::new(move |g, sink| {
                let ty = taps(h, oh);
                let tx = taps(w, ow);
                let mut gx = vec![S::zero(); b * c * h * w];
                for bc in 0..b * c {
                    let src = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let dst = &mut gx[bc * h * w..(bc + 1) * h * w];
                    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let (wy0, wy1) = (S::of(1.0 - fy), S::of(fy));
                        for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let (wx0, wx1) = (S::of(1.0 - fx), S::of(fx));
                            let gv = src[i * ow + j];
                            dst[y0 * w + x0] += gv * wy0 * wx0;
                            dst[y0 * w + x1] += gv * wy0 * wx1;
                            dst[y1 * w + x0] += gv * wy1 * wx0;
                            dst[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                sink(x, gx);
            })
        });
        self.push("bilinear_resize", Tensor::new(vec![b, c, oh, ow], out)?, rec, bw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    #[test]
    fn constant_map_stays_constant() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::full(&[1, 2, 3, 3], 0.7)).unwrap();
        let y = g.bilinear_resize(x, 6, 6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn same_size_is_identity() {
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.33).collect();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::new(vec![1, 1, 4, 4], data.clone()).unwrap()).unwrap();
        let y = g.bilinear_resize(x, 4, 4).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn upsample_interpolates_between_samples() {
        // 1-d-like case: [1,2] widened to 4 with half-pixel centers
        let out = bilinear_resize_raw(&[1.0f64, 2.0], 1, 1, 2, 1, 4);
        assert_eq!(out, vec![1.0, 1.25, 1.75, 2.0]);
    }
}
