use crate::error::{Error, Result};
use crate::graph::{BackwardFn, Graph, Var};
use crate::linalg::{col2im, im2col, mm_nn, mm_nt, mm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let num = h as isize + 2 * pad as isize - k as isize;
    if num < 0 || stride == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {k} does not fit input {h} with padding {pad}"),
        ));
    }
    Ok(num as usize / stride + 1)
}

impl<S: Scalar> Graph<S> {
    /// Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x).clone(), self.value(w).clone());
        let (sx, sw) = (tx.shape().to_vec(), tw.shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let ho = conv_out(h, kh, stride, padding)?;
        let wo = conv_out(wd, kw, stride, padding)?;
        let tb = bias.map(|bv| self.value(bv).clone());
        if let Some(ref t) = tb {
            if t.shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} channels", t.shape())));
            }
        }

        let ckk = cin * kh * kw;
        let out_plane = ho * wo;
        let mut cols = vec![S::zero(); ckk * out_plane];
        let mut out = vec![S::zero(); b * cout * out_plane];
        for bi in 0..b {
            let xb = &tx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            im2col(xb, cin, h, wd, kh, kw, stride, padding, ho, wo, &mut cols);
            let ob = &mut out[bi * cout * out_plane..(bi + 1) * cout * out_plane];
            mm_nn(tw.data(), &cols, ob, cout, ckk, out_plane);
            if let Some(ref t) = tb {
                for (c, &bv) in t.data().iter().enumerate() {
                    for v in &mut ob[c * out_plane..(c + 1) * out_plane] {
                        *v = *v + bv;
                    }
                }
            }
        }

        let parents: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        let rec = self.wants_grad(&parents);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let (cx, cw) = (tx.clone(), tw.clone());
            Box::new(move |g, sink| {
                let mut gx = vec![S::zero(); cx.numel()];
                let mut gw = vec![S::zero(); cw.numel()];
                let mut gb = vec![S::zero(); cout];
                let mut cols = vec![S::zero(); ckk * out_plane];
                let mut dcols = vec![S::zero(); ckk * out_plane];
                for bi in 0..b {
                    let gout = &g[bi * cout * out_plane..(bi + 1) * cout * out_plane];
                    let xb = &cx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                    // dW += g @ cols^T  (cols recomputed, not cached)
                    im2col(xb, cin, h, wd, kh, kw, stride, padding, ho, wo, &mut cols);
                    mm_nt(gout, &cols, &mut gw, cout, out_plane, ckk);
                    // dX = col2im(W^T @ g)
                    dcols.fill(S::zero());
                    mm_tn(cw.data(), gout, &mut dcols, ckk, cout, out_plane);
                    col2im(
                        &dcols,
                        cin,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        padding,
                        ho,
                        wo,
                        &mut gx[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                    );
                    for c in 0..cout {
                        let mut acc = S::zero();
                        for &v in &gout[c * out_plane..(c + 1) * out_plane] {
                            acc += v;
                        }
                        gb[c] += acc;
                    }
                }
                sink(x, gx);
                sink(w, gw);
                if let Some(bv) = bias {
                    sink(bv, gb);
                }
            })
        });
        self.push("conv2d", Tensor::new(vec![b, cout, ho, wo], out)?, rec, bw)
    }

    /// Transposed convolution (adjoint of conv2d) of [B,Cin,H,W] with weight
    /// [Cin,Cout,kh,kw]; output spatial size is (H-1)*stride - 2*pad + k.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x).clone(), self.value(w).clone());
        let (sx, sw) = (tx.shape().to_vec(), tw.shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(Error::shape("conv_transpose2d", format!("input {sx:?}, weight {sw:?}")));
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (_, cout, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if stride == 0 {
            return Err(Error::shape("conv_transpose2d", "stride must be positive"));
        }
        let ho = (h - 1) * stride + kh;
        let wo = (wd - 1) * stride + kw;
        let (ho, wo) = (
            ho.checked_sub(2 * padding)
                .ok_or_else(|| Error::shape("conv_transpose2d", "padding exceeds output"))?,
            wo.checked_sub(2 * padding)
                .ok_or_else(|| Error::shape("conv_transpose2d", "padding exceeds output"))?,
        );
        if ho == 0 || wo == 0 {
            return Err(Error::shape("conv_transpose2d", "empty output"));
        }
        let tb = bias.map(|bv| self.value(bv).clone());
        if let Some(ref t) = tb {
            if t.shape() != [cout] {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("bias {:?} for {cout} channels", t.shape()),
                ));
            }
        }

        let ckk = cout * kh * kw;
        let in_plane = h * wd;
        let out_plane = ho * wo;
        let mut tmp = vec![S::zero(); ckk * in_plane];
        let mut out = vec![S::zero(); b * cout * out_plane];
        for bi in 0..b {
            let xb = &tx.data()[bi * cin * in_plane..(bi + 1) * cin * in_plane];
            tmp.fill(S::zero());
            // tmp[Cout*kh*kw, H*W] = W^T @ x_b
            mm_tn(tw.data(), xb, &mut tmp, ckk, cin, in_plane);
            let ob = &mut out[bi * cout * out_plane..(bi + 1) * cout * out_plane];
            col2im(&tmp, cout, ho, wo, kh, kw, stride, padding, h, wd, ob);
            if let Some(ref t) = tb {
                for (c, &bv) in t.data().iter().enumerate() {
                    for v in &mut ob[c * out_plane..(c + 1) * out_plane] {
                        *v = *v + bv;
                    }
                }
            }
        }

        let parents: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        let rec = self.wants_grad(&parents);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let (cx, cw) = (tx.clone(), tw.clone());
            Box::new(move |g, sink| {
                let mut gx = vec![S::zero(); cx.numel()];
                let mut gw = vec![S::zero(); cw.numel()];
                let mut gb = vec![S::zero(); cout];
                let mut gcols = vec![S::zero(); ckk * in_plane];
                for bi in 0..b {
                    let gout = &g[bi * cout * out_plane..(bi + 1) * cout * out_plane];
                    let xb = &cx.data()[bi * cin * in_plane..(bi + 1) * cin * in_plane];
                    // unfold the output gradient back onto input positions:
                    // dX = W @ im2col(g), i.e. a plain conv2d of the gradient.
                    im2col(gout, cout, ho, wo, kh, kw, stride, padding, h, wd, &mut gcols);
                    mm_nn(
                        cw.data(),
                        &gcols,
                        &mut gx[bi * cin * in_plane..(bi + 1) * cin * in_plane],
                        cin,
                        ckk,
                        in_plane,
                    );
                    // dW += x_b @ gcols^T
                    mm_nt(xb, &gcols, &mut gw, cin, in_plane, ckk);
                    for c in 0..cout {
                        let mut acc = S::zero();
                        for &v in &gout[c * out_plane..(c + 1) * out_plane] {
                            acc += v;
                        }
                        gb[c] += acc;
                    }
                }
                sink(x, gx);
                sink(w, gw);
                if let Some(bv) = bias {
                    sink(bv, gb);
                }
            })
        });
        self.push("conv_transpose2d", Tensor::new(vec![b, cout, ho, wo], out)?, rec, bw)
    }
}
