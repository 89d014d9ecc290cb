use crate::error::{Error, Result};
use crate::graph::{BackwardFn, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// outer/inner element counts around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_raw<S: Scalar>(data: &[S], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<S>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![S::zero(); data.len()];
    let mut idx = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut src = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[axes[d]];
        }
        *slot = data[src];
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<S: Scalar> Graph<S> {
    /// View under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone();
        let out = t.reshaped(shape)?;
        let in_shape = t.shape().to_vec();
        let rec = self.wants_grad(&[x]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let _ = &in_shape;
            Box::new(move |g, sink| sink(x, g.to_vec()))
        });
        self.push("reshape", out, rec, bw)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x).clone();
        let nd = t.shape().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", format!("invalid axes {axes:?} for rank {nd}")));
        }
        let (out_shape, out) = permute_raw(t.data(), t.shape(), axes);
        let rec = self.wants_grad(&[x]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let mut inverse = vec![0usize; nd];
            for (d, &a) in axes.iter().enumerate() {
                inverse[a] = d;
            }
            let g_shape = out_shape.clone();
            Box::new(move |g, sink| {
                let (_, gx) = permute_raw(g, &g_shape, &inverse);
                sink(x, gx);
            })
        });
        self.push("permute", Tensor::new(out_shape, out)?, rec, bw)
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).clone();
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice_axis",
                format!("axis {axis} range {start}..{} on {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let rec = self.wants_grad(&[x]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let total = t.numel();
            Box::new(move |g, sink| {
                let mut gx = vec![S::zero(); total];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                sink(x, gx);
            })
        });
        self.push("slice_axis", Tensor::new(out_shape, out)?, rec, bw)
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            dims.push(s[axis]);
        }
        let total_dim: usize = dims.iter().sum();
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total_dim;
        let mut out = vec![S::zero(); outer * total_dim * inner];
        let tensors: Vec<Tensor<S>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        for o in 0..outer {
            let mut off = 0usize;
            for (t, &d) in tensors.iter().zip(&dims) {
                let src = o * d * inner;
                let dst = (o * total_dim + off) * inner;
                out[dst..dst + d * inner].copy_from_slice(&t.data()[src..src + d * inner]);
                off += d;
            }
        }
        let rec = self.wants_grad(parts);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let parts = parts.to_vec();
            let dims = dims.clone();
            Box::new(move |g, sink| {
                let mut off = 0usize;
                for (&p, &d) in parts.iter().zip(&dims) {
                    let mut gp = vec![S::zero(); outer * d * inner];
                    for o in 0..outer {
                        let src = (o * total_dim + off) * inner;
                        let dst = o * d * inner;
                        gp[dst..dst + d * inner].copy_from_slice(&g[src..src + d * inner]);
                    }
                    sink(p, gp);
                    off += d;
                }
            })
        });
        self.push("concat", Tensor::new(out_shape, out)?, rec, bw)
    }

    /// Concatenate two feature maps along the channel axis of [B,C,h,w].
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat(1, &[a, b])
    }

    /// Tile a leading batch dimension of size 1 up to `b` copies.
    pub fn broadcast_batch(&mut self, x: Var, b: usize) -> Result<Var> {
        let t = self.value(x).clone();
        let shape = t.shape().to_vec();
        if shape.is_empty() || shape[0] != 1 {
            return Err(Error::shape("broadcast_batch", format!("leading dim must be 1: {shape:?}")));
        }
        let chunk = t.numel();
        let mut out = Vec::with_capacity(chunk * b);
        for _ in 0..b {
            out.extend_from_slice(t.data());
        }
        let mut out_shape = shape.clone();
        out_shape[0] = b;
        let rec = self.wants_grad(&[x]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            Box::new(move |g, sink| {
                let mut gx = vec![S::zero(); chunk];
                for rep in g.chunks_exact(chunk) {
                    for (acc, &v) in gx.iter_mut().zip(rep) {
                        *acc += v;
                    }
                }
                sink(x, gx);
            })
        });
        self.push("broadcast_batch", Tensor::new(out_shape, out)?, rec, bw)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias add,
    /// positional embeddings). The addend is tiled over the leading dims.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::shape("add_suffix", format!("{sb:?} is not a suffix of {sa:?}")));
        }
        let chunk = tb.numel().max(1);
        let mut out = Vec::with_capacity(ta.numel());
        for seg in ta.data().chunks_exact(chunk) {
            out.extend(seg.iter().zip(tb.data()).map(|(&x, &y)| x + y));
        }
        let rec = self.wants_grad(&[a, b]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            Box::new(move |g, sink| {
                sink(a, g.to_vec());
                let mut gb = vec![S::zero(); chunk];
                for seg in g.chunks_exact(chunk) {
                    for (acc, &v) in gb.iter_mut().zip(seg) {
                        *acc += v;
                    }
                }
                sink(b, gb);
            })
        });
        self.push("add_suffix", Tensor::new(sa, out)?, rec, bw)
    }

    /// Select rows of an embedding table: `table[V,D]` x `ids[L]` -> `[L,D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table).clone();
        let shape = t.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table must be 2-d, got {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("gather_rows", format!("id {bad} out of range {v}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rec = self.wants_grad(&[table]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let ids = ids.to_vec();
            Box::new(move |g, sink| {
                let mut gt = vec![S::zero(); v * d];
                for (row, &i) in ids.iter().enumerate() {
                    for (acc, &gv) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d])
                    {
                        *acc += gv;
                    }
                }
                sink(table, gt);
            })
        });
        self.push("gather_rows", Tensor::new(vec![ids.len(), d], out)?, rec, bw)
    }
}
