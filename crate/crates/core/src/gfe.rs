//! Global feature extractor: a frozen ViT backbone supplies token stacks
//! from selected depths; trainable reducers aggregate them, a prompt
//! conditioner scales and shifts the aggregate, and a transposed convolution
//! projects the tokens onto a 64-channel spatial map.

use promptseg_tensor::{init, Graph64, Parameter64, Result as TResult, Var};
#[cfg(test)]
use promptseg_tensor::Tensor64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, LayerNorm, Linear, Module, TransformerBlock};

pub const GLOBAL_CHANNELS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// 1-based indices of the blocks whose outputs are tapped.
    pub tap_layers: Vec<usize>,
    pub reduce_dim: usize,
}

impl ViTConfig {
    pub fn desk() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            depth: 6,
            dim: 128,
            heads: 4,
            tap_layers: vec![2, 4, 6],
            reduce_dim: 64,
        }
    }

    pub fn paper() -> Self {
        ViTConfig {
            image_size: 352,
            patch_size: 16,
            depth: 12,
            dim: 768,
            heads: 12,
            tap_layers: vec![4, 8, 12],
            reduce_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.tap_layers.is_empty()
            || self.tap_layers.iter().any(|&l| l == 0 || l > self.depth)
        {
            return Err(Error::config(format!(
                "tap layers {:?} outside 1..={}",
                self.tap_layers, self.depth
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config("token dim not divisible by heads".to_string()));
        }
        Ok(())
    }

    /// Patch grid side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count including the class token.
    pub fn token_count(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    /// Spatial side of the projected global map (2x the patch grid).
    pub fn output_grid(&self) -> usize {
        2 * self.grid()
    }
}

/// Frozen image tower. Patch embedding, class token, learned positions, and
/// a pre-norm block stack; outputs token sequences at the tap depths.
pub struct ViTBackbone {
    pub cfg: ViTConfig,
    patch: Conv2d,
    cls: Parameter64,
    pos: Parameter64,
    blocks: Vec<TransformerBlock>,
}

impl ViTBackbone {
    pub fn new(cfg: ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init::derive_rng(seed, 0x61f7);
        let patch = Conv2d::new(
            "gfe.vit.patch",
            &mut rng,
            3,
            cfg.dim,
            cfg.patch_size,
            cfg.patch_size,
            0,
            true,
        );
        let cls = Parameter64::new(
            "gfe.vit.cls",
            init::uniform(&mut rng, &[1, 1, cfg.dim], -0.05, 0.05),
            true,
        );
        let pos = Parameter64::new(
            "gfe.vit.pos",
            init::uniform(&mut rng, &[cfg.token_count(), cfg.dim], -0.05, 0.05),
            true,
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(&format!("gfe.vit.block{i}"), &mut rng, cfg.dim, cfg.heads, true)
            })
            .collect();
        Ok(ViTBackbone { cfg, patch, cls, pos, blocks })
    }

    /// Token sequences [B,N,D] after each tap layer, in layer order.
    pub fn taps(&self, g: &mut Graph64, image: Var) -> TResult<Vec<Var>> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 4
            || shape[2] != self.cfg.image_size
            || shape[3] != self.cfg.image_size
        {
            return Err(promptseg_tensor::Error::shape(
                "vit_forward",
                format!("want [B,3,{0},{0}], got {shape:?}", self.cfg.image_size),
            ));
        }
        let b = shape[0];
        let grid = self.cfg.grid();
        let d = self.cfg.dim;

        let patches = self.patch.forward(g, image)?; // [B,D,g,g]
        let tokens = g.reshape(patches, vec![b, d, grid * grid])?;
        let tokens = g.permute(tokens, &[0, 2, 1])?; // [B,g*g,D]
        let cls = g.param(&self.cls)?;
        let cls = g.broadcast_batch(cls, b)?;
        let x = g.concat(1, &[cls, tokens])?; // [B,N,D]
        let pos = g.param(&self.pos)?;
        let mut x = g.add_suffix(x, pos)?;

        let mut out = Vec::with_capacity(self.cfg.tap_layers.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x)?;
            if self.cfg.tap_layers.contains(&(i + 1)) {
                out.push(x);
            }
        }
        Ok(out)
    }
}

impl Module for ViTBackbone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        self.patch.visit(f);
        f(&self.cls);
        f(&self.pos);
        for b in &self.blocks {
            b.visit(f);
        }
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        self.patch.visit_mut(f);
        f(&mut self.cls);
        f(&mut self.pos);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}

/// Trainable head over the frozen backbone.
pub struct GlobalBranch {
    pub vit: ViTBackbone,
    pub reducers: Vec<Linear>,
    cond_wc: Linear,
    cond_mul: Linear,
    cond_add: Linear,
    project: ConvTranspose2d,
    /// Backbone blocks are pre-norm, so tapped tokens are unnormalized; a
    /// frozen norm keeps their scale in range before reduction.
    tap_norm: LayerNorm,
}

impl GlobalBranch {
    pub fn new(cfg: ViTConfig, embed_dim: usize, seed: u64) -> Result<Self> {
        let vit = ViTBackbone::new(cfg, seed)?;
        let cfg = vit.cfg.clone();
        let mut rng = init::derive_rng(seed, 0x9fe3);
        let reducers = cfg
            .tap_layers
            .iter()
            .map(|&layer| {
                Linear::new(&format!("gfe.reduce.{layer}"), &mut rng, cfg.dim, cfg.reduce_dim, false, false)
            })
            .collect();
        let cond_wc = Linear::new("gfe.cond.wc", &mut rng, embed_dim, cfg.reduce_dim, false, false);
        let cond_mul =
            Linear::new("gfe.cond.wmul", &mut rng, cfg.reduce_dim, cfg.reduce_dim, false, false);
        let cond_add =
            Linear::new("gfe.cond.wadd", &mut rng, cfg.reduce_dim, cfg.reduce_dim, false, false);
        let project = ConvTranspose2d::new(
            "gfe.project",
            &mut rng,
            cfg.reduce_dim,
            GLOBAL_CHANNELS,
            2,
            2,
            0,
            false,
        );
        let tap_norm = LayerNorm::new("gfe.vit.tap_norm", cfg.dim, true);
        Ok(GlobalBranch { vit, reducers, cond_wc, cond_mul, cond_add, project, tap_norm })
    }

    pub fn cfg(&self) -> &ViTConfig {
        &self.vit.cfg
    }

    /// A = sum_j W_j * Z_j with the class token dropped: [B, N-1, r].
    pub fn reduce_aggregate(&self, g: &mut Graph64, taps: &[Var]) -> TResult<Var> {
        if taps.len() != self.reducers.len() {
            return Err(promptseg_tensor::Error::shape(
                "reduce_aggregate",
                format!("{} tap stacks for {} reducers", taps.len(), self.reducers.len()),
            ));
        }
        let n = g.value(taps[0]).shape()[1];
        let mut acc: Option<Var> = None;
        for (&z, reducer) in taps.iter().zip(&self.reducers) {
            if g.value(z).shape()[1] != n {
                return Err(promptseg_tensor::Error::shape(
                    "reduce_aggregate",
                    "tap stacks disagree on token count".to_string(),
                ));
            }
            let z = self.tap_norm.forward(g, z)?;
            let body = g.slice_axis(z, 1, 1, n - 1)?;
            let reduced = reducer.forward(g, body)?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, reduced)?,
                None => reduced,
            });
        }
        Ok(acc.expect("tap list is non-empty"))
    }

    /// c = Wc e_c; A~ = (Wmul c) (.) A + (Wadd c), broadcast over tokens.
    pub fn condition_tokens(&self, g: &mut Graph64, a: Var, e_c: Var) -> TResult<Var> {
        let c = self.cond_wc.forward(g, e_c)?;
        let scale = self.cond_mul.forward(g, c)?;
        let shift = self.cond_add.forward(g, c)?;
        g.scale_shift_tokens(a, scale, shift)
    }

    /// Reshape tokens onto the patch grid and project up to the 64-channel
    /// global map [B, 64, 2g, 2g].
    pub fn project_to_grid(&self, g: &mut Graph64, a: Var) -> TResult<Var> {
        let shape = g.value(a).shape().to_vec();
        let (b, tokens, r) = (shape[0], shape[1], shape[2]);
        let side = (tokens as f64).sqrt() as usize;
        if side * side != tokens {
            return Err(promptseg_tensor::Error::shape(
                "project_to_grid",
                format!("token count {tokens} is not a perfect square"),
            ));
        }
        let a = g.permute(a, &[0, 2, 1])?;
        let a = g.reshape(a, vec![b, r, side, side])?;
        self.project.forward(g, a)
    }

    /// Full branch: tapped tokens -> reduced aggregate -> conditioned ->
    /// projected map.
    pub fn forward(&self, g: &mut Graph64, taps: &[Var], e_c: Var) -> TResult<Var> {
        let a = self.reduce_aggregate(g, taps)?;
        let a = self.condition_tokens(g, a, e_c)?;
        self.project_to_grid(g, a)
    }
}

impl Module for GlobalBranch {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        self.vit.visit(f);
        self.tap_norm.visit(f);
        for r in &self.reducers {
            r.visit(f);
        }
        self.cond_wc.visit(f);
        self.cond_mul.visit(f);
        self.cond_add.visit(f);
        self.project.visit(f);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        self.vit.visit_mut(f);
        self.tap_norm.visit_mut(f);
        for r in &mut self.reducers {
            r.visit_mut(f);
        }
        self.cond_wc.visit_mut(f);
        self.cond_mul.visit_mut(f);
        self.cond_add.visit_mut(f);
        self.project.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use promptseg_tensor::init::seeded_rng;

    #[test]
    fn token_counts_for_both_profiles() {
        assert_eq!(ViTConfig::desk().token_count(), 65);
        assert_eq!(ViTConfig::paper().token_count(), 485);
        assert!(ViTConfig::desk().validate().is_ok());
        assert!(ViTConfig::paper().validate().is_ok());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ViTConfig::desk();
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = ViTConfig::desk();
        cfg.tap_layers = vec![0];
        assert!(cfg.validate().is_err());
        let mut cfg = ViTConfig::desk();
        cfg.tap_layers = vec![7];
        assert!(cfg.validate().is_err());
    }

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 8,
            depth: 2,
            dim: 16,
            heads: 2,
            tap_layers: vec![1, 2],
            reduce_dim: 4,
        }
    }

    #[test]
    fn taps_come_back_in_layer_order_with_full_token_count() {
        let vit = ViTBackbone::new(tiny_cfg(), 5).unwrap();
        let mut g = Graph64::inference();
        let image = g.constant(init::uniform(&mut seeded_rng(1), &[2, 3, 16, 16], 0.0, 1.0)).unwrap();
        let taps = vit.taps(&mut g, image).unwrap();
        assert_eq!(taps.len(), 2);
        for t in &taps {
            assert_eq!(g.value(*t).shape(), &[2, 5, 16]); // N = 4 + 1
        }
        let wrong = g.constant(Tensor64::zeros(&[1, 3, 8, 8])).unwrap();
        assert!(matches!(vit.taps(&mut g, wrong), Err(promptseg_tensor::Error::Shape { .. })));
    }

    #[test]
    fn reduce_aggregate_matches_loop_oracle() {
        let branch = GlobalBranch::new(tiny_cfg(), 8, 5).unwrap();
        let (n, d, r) = (5usize, 16usize, 4usize);
        let mut g = Graph64::inference();
        let z1 = g.constant(init::uniform(&mut seeded_rng(2), &[1, n, d], -1.0, 1.0)).unwrap();
        let z2 = g.constant(init::uniform(&mut seeded_rng(3), &[1, n, d], -1.0, 1.0)).unwrap();
        let a = branch.reduce_aggregate(&mut g, &[z1, z2]).unwrap();
        assert_eq!(g.value(a).shape(), &[1, n - 1, r]);

        // oracle: normalize, drop token 0, apply each reducer tokenwise, sum
        let mut want = vec![0.0; (n - 1) * r];
        for (z, reducer) in [z1, z2].iter().zip(&branch.reducers) {
            let zn = branch.tap_norm.forward(&mut g, *z).unwrap();
            let zv = g.value(zn).data().to_vec();
            let wv = reducer.weight.value.data();
            for tok in 1..n {
                for j in 0..r {
                    let mut acc = 0.0;
                    for i in 0..d {
                        acc += zv[tok * d + i] * wv[i * r + j];
                    }
                    want[(tok - 1) * r + j] += acc;
                }
            }
        }
        for (got, exp) in g.value(a).data().iter().zip(&want) {
            assert!((got - exp).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_reducer_passes_tokens_through() {
        // one tap layer, D == r, reducer forced to the identity matrix
        let cfg = ViTConfig {
            image_size: 16,
            patch_size: 8,
            depth: 1,
            dim: 4,
            heads: 2,
            tap_layers: vec![1],
            reduce_dim: 4,
        };
        let mut branch = GlobalBranch::new(cfg, 8, 5).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        branch.reducers[0].weight.value = Tensor64::new(vec![4, 4], eye).unwrap();

        let mut g = Graph64::inference();
        let z = g.constant(init::uniform(&mut seeded_rng(10), &[1, 5, 4], -1.0, 1.0)).unwrap();
        let a = branch.reduce_aggregate(&mut g, &[z]).unwrap();
        let zn = branch.tap_norm.forward(&mut g, z).unwrap();
        let body = g.slice_axis(zn, 1, 1, 4).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(body)) < 1e-15);

        // linearity: two identical taps double the aggregate
        let branch2 = {
            let cfg = ViTConfig {
                image_size: 16,
                patch_size: 8,
                depth: 2,
                dim: 4,
                heads: 2,
                tap_layers: vec![1, 2],
                reduce_dim: 4,
            };
            let mut b = GlobalBranch::new(cfg, 8, 5).unwrap();
            for red in &mut b.reducers {
                let mut eye = vec![0.0; 16];
                for i in 0..4 {
                    eye[i * 4 + i] = 1.0;
                }
                red.weight.value = Tensor64::new(vec![4, 4], eye).unwrap();
            }
            b
        };
        let a2 = branch2.reduce_aggregate(&mut g, &[z, z]).unwrap();
        let doubled: Vec<f64> = g.value(body).data().iter().map(|v| 2.0 * v).collect();
        for (got, exp) in g.value(a2).data().iter().zip(&doubled) {
            assert!((got - exp).abs() < 1e-12);
        }
    }

    #[test]
    fn conditioning_identity_and_annihilation() {
        let branch = GlobalBranch::new(tiny_cfg(), 8, 5).unwrap();
        let mut g = Graph64::inference();
        let a = g.constant(init::uniform(&mut seeded_rng(4), &[2, 4, 4], -1.0, 1.0)).unwrap();

        // identity: scale all ones, shift zeros
        let ones = g.constant(Tensor64::full(&[2, 4], 1.0)).unwrap();
        let zeros = g.constant(Tensor64::zeros(&[2, 4])).unwrap();
        let same = g.scale_shift_tokens(a, ones, zeros).unwrap();
        assert!(g.value(same).bit_eq(g.value(a)));

        // annihilation: zero scale leaves only the broadcast shift
        let shift = g.constant(init::uniform(&mut seeded_rng(5), &[2, 4], -1.0, 1.0)).unwrap();
        let zero_scale = g.constant(Tensor64::zeros(&[2, 4])).unwrap();
        let out = g.scale_shift_tokens(a, zero_scale, shift).unwrap();
        for b in 0..2 {
            for t in 0..4 {
                for c in 0..4 {
                    assert_eq!(
                        g.value(out).data()[(b * 4 + t) * 4 + c],
                        g.value(shift).data()[b * 4 + c]
                    );
                }
            }
        }
        let _ = &branch;
    }

    #[test]
    fn projection_yields_64_channels_at_twice_the_grid() {
        let branch = GlobalBranch::new(ViTConfig::desk(), 64, 5).unwrap();
        let mut g = Graph64::inference();
        let a = g.constant(init::uniform(&mut seeded_rng(6), &[1, 64, 64], -1.0, 1.0)).unwrap();
        let f = branch.project_to_grid(&mut g, a).unwrap();
        assert_eq!(g.value(f).shape(), &[1, GLOBAL_CHANNELS, 16, 16]);

        let bad = g.constant(Tensor64::zeros(&[1, 5, 64])).unwrap();
        assert!(branch.project_to_grid(&mut g, bad).is_err());
    }

    #[test]
    fn full_branch_depends_on_the_prompt_embedding() {
        let cfg = tiny_cfg();
        let branch = GlobalBranch::new(cfg, 8, 5).unwrap();
        let mut g = Graph64::inference();
        let image = g.constant(init::uniform(&mut seeded_rng(7), &[1, 3, 16, 16], 0.0, 1.0)).unwrap();
        let taps = branch.vit.taps(&mut g, image).unwrap();
        let e1 = g.constant(init::uniform(&mut seeded_rng(8), &[1, 8], -1.0, 1.0)).unwrap();
        let e2 = g.constant(init::uniform(&mut seeded_rng(9), &[1, 8], -1.0, 1.0)).unwrap();
        let f1 = branch.forward(&mut g, &taps, e1).unwrap();
        let f2 = branch.forward(&mut g, &taps, e2).unwrap();
        assert!(g.value(f1).max_abs_diff(g.value(f2)) > 0.0);
    }
}
