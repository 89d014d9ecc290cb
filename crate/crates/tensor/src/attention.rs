//! Multi-head self-attention assembled from graph primitives.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Parameter;

/// Projection weights for one attention layer: four [D,D] matrices with
/// [D] biases.
#[derive(Clone, Debug)]
pub struct MhsaParams<S = f64> {
    pub wq: Parameter<S>,
    pub bq: Parameter<S>,
    pub wk: Parameter<S>,
    pub bk: Parameter<S>,
    pub wv: Parameter<S>,
    pub bv: Parameter<S>,
    pub wo: Parameter<S>,
    pub bo: Parameter<S>,
}

impl<S: Scalar> MhsaParams<S> {
    pub fn for_each<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        for p in [&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo] {
            f(p);
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter<S>)) {
        for p in [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ] {
            f(p);
        }
    }
}

/// Scaled dot-product attention over [B,N,D]; returns the projected output
/// and the attention weights [B*heads,N,N] for inspection.
pub fn mhsa_with_attn<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    heads: usize,
    p: &MhsaParams<S>,
) -> Result<(Var, Var)> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("mhsa", format!("want [B,N,D], got {shape:?}")));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("token dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;

    let project = |g: &mut Graph<S>, w: &Parameter<S>, bias: &Parameter<S>| -> Result<Var> {
        let wv = g.param(w)?;
        let bv = g.param(bias)?;
        let y = g.matmul(x, wv)?;
        let y = g.add_suffix(y, bv)?;
        // [B,N,D] -> [B*heads, N, dh]
        let y = g.reshape(y, vec![b, n, heads, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, vec![b * heads, n, dh])
    };

    let q = project(g, &p.wq, &p.bq)?;
    let k = project(g, &p.wk, &p.bk)?;
    let v = project(g, &p.wv, &p.bv)?;

    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax_last(scores)?;

    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, vec![b, heads, n, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, vec![b, n, d])?;

    let wo = g.param(&p.wo)?;
    let bo = g.param(&p.bo)?;
    let out = g.matmul(ctx, wo)?;
    let out = g.add_suffix(out, bo)?;
    Ok((out, attn))
}

pub fn mhsa<S: Scalar>(g: &mut Graph<S>, x: Var, heads: usize, p: &MhsaParams<S>) -> Result<Var> {
    mhsa_with_attn(g, x, heads, p).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use crate::{Graph, Tensor};

    fn test_params(d: usize, seed: u64) -> MhsaParams<f64> {
        let mut rng = init::seeded_rng(seed);
        let w = |rng: &mut _, name: &str| {
            Parameter::new(name, init::fan_in_uniform(rng, &[d, d], d), false)
        };
        MhsaParams {
            wq: w(&mut rng, "wq"),
            bq: Parameter::new("bq", Tensor::zeros(&[d]), false),
            wk: w(&mut rng, "wk"),
            bk: Parameter::new("bk", Tensor::zeros(&[d]), false),
            wv: w(&mut rng, "wv"),
            bv: Parameter::new("bv", Tensor::zeros(&[d]), false),
            wo: w(&mut rng, "wo"),
            bo: Parameter::new("bo", Tensor::zeros(&[d]), false),
        }
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let d = 8;
        let p = test_params(d, 7);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(init::uniform(&mut init::seeded_rng(3), &[1, 1, d], -1.0, 1.0)).unwrap();
        let (out, attn) = mhsa_with_attn(&mut g, x, 2, &p).unwrap();
        assert_eq!(g.value(attn).data(), &[1.0, 1.0]);

        // output equals the output projection of V
        let xv = g.value(x).clone();
        let mut g2 = Graph::<f64>::inference();
        let x2 = g2.constant(xv).unwrap();
        let wv = g2.param(&p.wv).unwrap();
        let bv = g2.param(&p.bv).unwrap();
        let v = g2.matmul(x2, wv).unwrap();
        let v = g2.add_suffix(v, bv).unwrap();
        let wo = g2.param(&p.wo).unwrap();
        let bo = g2.param(&p.bo).unwrap();
        let want = g2.matmul(v, wo).unwrap();
        let want = g2.add_suffix(want, bo).unwrap();
        assert!(g.value(out).max_abs_diff(g2.value(want)) < 1e-12);
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let d = 8;
        let n = 4;
        let p = test_params(d, 11);
        let mut g = Graph::<f64>::inference();
        let row = init::uniform::<f64>(&mut init::seeded_rng(5), &[d], -1.0, 1.0);
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend_from_slice(row.data());
        }
        let x = g.constant(Tensor::new(vec![1, n, d], data).unwrap()).unwrap();
        let (_, attn) = mhsa_with_attn(&mut g, x, 2, &p).unwrap();
        let want = 1.0 / n as f64;
        assert!(g.value(attn).data().iter().all(|&v| v == want));
    }

    #[test]
    fn two_token_single_head_matches_hand_evaluation() {
        // D = 1, heads = 1: attention collapses to scalars we can evaluate
        // by hand.
        let p = MhsaParams {
            wq: Parameter::new("wq", Tensor::new(vec![1, 1], vec![2.0]).unwrap(), false),
            bq: Parameter::new("bq", Tensor::zeros(&[1]), false),
            wk: Parameter::new("wk", Tensor::new(vec![1, 1], vec![1.0]).unwrap(), false),
            bk: Parameter::new("bk", Tensor::zeros(&[1]), false),
            wv: Parameter::new("wv", Tensor::new(vec![1, 1], vec![1.0]).unwrap(), false),
            bv: Parameter::new("bv", Tensor::zeros(&[1]), false),
            wo: Parameter::new("wo", Tensor::new(vec![1, 1], vec![1.0]).unwrap(), false),
            bo: Parameter::new("bo", Tensor::zeros(&[1]), false),
        };
        let (x0, x1) = (0.5, -1.0);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::new(vec![1, 2, 1], vec![x0, x1]).unwrap()).unwrap();
        let (out, _) = mhsa_with_attn(&mut g, x, 1, &p).unwrap();

        // q_i = 2 x_i, k_j = v_j = x_j, score_ij = q_i k_j (dh = 1)
        let hand = |xi: f64| {
            let (s0, s1) = (2.0 * xi * x0, 2.0 * xi * x1);
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            (e0 * x0 + e1 * x1) / (e0 + e1)
        };
        let got = g.value(out).data();
        assert!((got[0] - hand(x0)).abs() < 1e-10);
        assert!((got[1] - hand(x1)).abs() < 1e-10);
    }

    #[test]
    fn indivisible_head_count_is_config_error() {
        let p = test_params(8, 1);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::zeros(&[1, 2, 8])).unwrap();
        assert!(matches!(mhsa(&mut g, x, 3, &p), Err(crate::Error::Config(_))));
    }
}
