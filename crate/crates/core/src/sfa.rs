//! Semantic feature adjustment: a per-stage projector maps a prompt
//! embedding to channel-wise scale/shift parameters which modulate a feature
//! map, optionally with an additive skip.

use promptseg_tensor::{Graph64, Result as TResult, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Linear, Module};

/// Channel-wise modulation parameters, one (gamma, beta) pair per batch item
/// and channel, broadcast over the spatial grid.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub gamma: Var,
    pub beta: Var,
}

/// Two-layer perceptron d -> d -> 2C for one stage of width C. The final
/// layer starts at zero so the stage is exactly the identity at init:
/// gamma = 1 + dgamma, beta = 0.
pub struct StageProjector {
    pub stage: String,
    pub width: usize,
    pub embed_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl StageProjector {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, embed_dim: usize, width: usize) -> Self {
        StageProjector {
            stage: name.to_string(),
            width,
            embed_dim,
            fc1: Linear::new(&format!("{name}.fc1"), rng, embed_dim, embed_dim, true, false),
            fc2: Linear::zeroed(&format!("{name}.fc2"), embed_dim, 2 * width, true, false),
        }
    }

    /// Split convention: the first C outputs drive the scale, the last C the
    /// shift.
    pub fn predict(&self, g: &mut Graph64, e: Var) -> TResult<Modulation> {
        let h = self.fc1.forward(g, e)?;
        let h = g.relu(h)?;
        let z = self.fc2.forward(g, h)?;
        let dgamma = g.slice_axis(z, 1, 0, self.width)?;
        let beta = g.slice_axis(z, 1, self.width, self.width)?;
        let gamma = g.add_scalar(dgamma, 1.0)?;
        Ok(Modulation { gamma, beta })
    }
}

impl Module for StageProjector {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a promptseg_tensor::Parameter64)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut promptseg_tensor::Parameter64)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// gamma (.) F + beta, channel-wise over [B,C,h,w].
pub fn apply_affine(g: &mut Graph64, f: Var, m: &Modulation) -> TResult<Var> {
    g.scale_shift_channels(f, m.gamma, m.beta)
}

/// Full stage: predict modulation from the embedding, apply the affine,
/// optionally add the input back.
pub fn modulate(
    g: &mut Graph64,
    f: Var,
    proj: &StageProjector,
    e: Var,
    residual: bool,
) -> Result<Var> {
    let m = proj.predict(g, e)?;
    let fhat = apply_affine(g, f, &m)?;
    Ok(if residual { g.add(fhat, f)? } else { fhat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use promptseg_tensor::{gradcheck::gradcheck, init, Graph64, Tensor64};

    fn embed(g: &mut Graph64, seed: u64, b: usize, d: usize) -> Var {
        g.constant(init::uniform(&mut init::seeded_rng(seed), &[b, d], -1.0, 1.0)).unwrap()
    }

    #[test]
    fn zero_init_projector_is_identity_modulation() {
        let proj = StageProjector::new("sfa.test", &mut init::seeded_rng(1), 8, 4);
        let mut g = Graph64::inference();
        let e = embed(&mut g, 2, 2, 8);
        let m = proj.predict(&mut g, e).unwrap();
        assert!(g.value(m.gamma).data().iter().all(|&v| v == 1.0));
        assert!(g.value(m.beta).data().iter().all(|&v| v == 0.0));

        let f = g.constant(init::uniform(&mut init::seeded_rng(3), &[2, 4, 3, 3], -2.0, 2.0)).unwrap();
        let out = modulate(&mut g, f, &proj, e, false).unwrap();
        assert!(g.value(out).bit_eq(g.value(f)));
    }

    #[test]
    fn residual_doubles_under_identity_modulation() {
        let proj = StageProjector::new("sfa.test", &mut init::seeded_rng(1), 8, 4);
        let mut g = Graph64::inference();
        let e = embed(&mut g, 2, 1, 8);
        let f = g.constant(init::uniform(&mut init::seeded_rng(5), &[1, 4, 2, 2], -1.0, 1.0)).unwrap();
        let out = modulate(&mut g, f, &proj, e, true).unwrap();
        let doubled: Vec<f64> = g.value(f).data().iter().map(|v| v * 2.0).collect();
        assert_eq!(g.value(out).data(), &doubled[..]);
    }

    #[test]
    fn split_order_scale_first_shift_last() {
        // Bias of the final layer set by hand: first C entries -> dgamma,
        // last C -> beta.
        let mut proj = StageProjector::new("sfa.test", &mut init::seeded_rng(1), 4, 2);
        proj.fc2.bias = Some(promptseg_tensor::Parameter64::new(
            "sfa.test.fc2.bias",
            Tensor64::new(vec![4], vec![0.25, -0.5, 7.0, 8.0]).unwrap(),
            false,
        ));
        let mut g = Graph64::inference();
        let e = g.constant(Tensor64::zeros(&[1, 4])).unwrap();
        let m = proj.predict(&mut g, e).unwrap();
        assert_eq!(g.value(m.gamma).data(), &[1.25, 0.5]); // 1 + dgamma
        assert_eq!(g.value(m.beta).data(), &[7.0, 8.0]);
    }

    #[test]
    fn random_projector_matches_slice_oracle() {
        let mut rng = init::seeded_rng(17);
        let mut proj = StageProjector::new("sfa.test", &mut rng, 6, 3);
        // give the final layer nonzero weights so the oracle is non-trivial
        proj.fc2 = Linear::new("sfa.test.fc2", &mut rng, 6, 6, true, false);
        let mut g = Graph64::inference();
        let e = embed(&mut g, 4, 2, 6);
        let m = proj.predict(&mut g, e).unwrap();

        // oracle: run the MLP by hand and slice
        let h = proj.fc1.forward(&mut g, e).unwrap();
        let h = g.relu(h).unwrap();
        let z = proj.fc2.forward(&mut g, h).unwrap();
        let zv = g.value(z).data().to_vec();
        for b in 0..2 {
            for c in 0..3 {
                assert_eq!(g.value(m.gamma).data()[b * 3 + c], 1.0 + zv[b * 6 + c]);
                assert_eq!(g.value(m.beta).data()[b * 3 + c], zv[b * 6 + 3 + c]);
            }
        }
    }

    #[test]
    fn modulation_commutes_with_spatial_permutation() {
        // channel-wise means flipping the spatial grid before or after the
        // affine gives the same values
        let proj = {
            let mut rng = init::seeded_rng(7);
            let mut p = StageProjector::new("sfa.test", &mut rng, 4, 2);
            p.fc2 = Linear::new("sfa.test.fc2", &mut rng, 4, 4, true, false);
            p
        };
        let f = init::uniform::<f64>(&mut init::seeded_rng(8), &[1, 2, 2, 3], -1.0, 1.0);
        let flipped = {
            // reverse spatial positions per channel
            let mut v = f.data().to_vec();
            for ch in 0..2 {
                v[ch * 6..(ch + 1) * 6].reverse();
            }
            Tensor64::new(vec![1, 2, 2, 3], v).unwrap()
        };
        let run = |input: Tensor64| {
            let mut g = Graph64::inference();
            let e = embed(&mut g, 4, 1, 4);
            let fv = g.constant(input).unwrap();
            let out = modulate(&mut g, fv, &proj, e, false).unwrap();
            g.value(out).data().to_vec()
        };
        let a = run(f);
        let mut b = run(flipped);
        for ch in 0..2 {
            b[ch * 6..(ch + 1) * 6].reverse();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn gradcheck_through_modulate_and_residual() {
        let proj = {
            let mut rng = init::seeded_rng(11);
            let mut p = StageProjector::new("sfa.test", &mut rng, 4, 2);
            p.fc2 = Linear::new("sfa.test.fc2", &mut rng, 4, 4, true, false);
            p
        };
        let f0: Tensor64 = init::uniform(&mut init::seeded_rng(12), &[1, 2, 2, 2], -1.0, 1.0);
        let err = gradcheck(
            |g, f| {
                let e = g.constant(init::uniform(&mut init::seeded_rng(4), &[1, 4], -1.0, 1.0))?;
                let m = proj.predict(g, e)?;
                let fhat = apply_affine(g, f, &m)?;
                let out = g.add(fhat, f)?;
                g.sum_all(out)
            },
            &f0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");

        // and through the embedding path
        let e0: Tensor64 = init::uniform(&mut init::seeded_rng(13), &[1, 4], -1.0, 1.0);
        let err = gradcheck(
            |g, e| {
                let f = g.constant(init::uniform(&mut init::seeded_rng(14), &[1, 2, 2, 2], -1.0, 1.0))?;
                let m = proj.predict(g, e)?;
                let fhat = apply_affine(g, f, &m)?;
                g.sum_all(fhat)
            },
            &e0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}
