//! Local feature extractor: five residual downsampling stages, transformer
//! blocks at stage four and the bottleneck, a U-Net style decoder whose
//! first three up blocks are prompt-modulated, and a strided projection to
//! the 32-channel local map on the shared grid.

use promptseg_tensor::{init, Graph64, Parameter64, Result as TResult, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, ResidualBlock, TransformerBlock};
use crate::sfa::{modulate, StageProjector};

pub const LOCAL_CHANNELS: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LfeConfig {
    /// Channel widths of the five encoder stages (strides 2,4,8,16,32).
    pub widths: [usize; 5],
    pub heads: usize,
}

impl LfeConfig {
    pub fn desk() -> Self {
        LfeConfig { widths: [16, 32, 64, 128, 256], heads: 4 }
    }

    pub fn paper() -> Self {
        LfeConfig { widths: [64, 256, 512, 1024, 2048], heads: 8 }
    }
}

/// The four prompt-modulated interior sites with their channel widths.
pub fn sfa_schedule(cfg: &LfeConfig) -> [(&'static str, usize); 4] {
    [
        ("enc4", cfg.widths[3]),
        ("dec4", cfg.widths[3]),
        ("dec3", cfg.widths[2]),
        ("dec2", cfg.widths[1]),
    ]
}

/// 2x bilinear upsample, concat the skip, two 3x3 convs.
pub struct UpBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl UpBlock {
    fn new(
        name: &str,
        rng: &mut rand_chacha::ChaCha8Rng,
        cin_up: usize,
        cin_skip: usize,
        cout: usize,
    ) -> Self {
        UpBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), rng, cin_up + cin_skip, cout, 3, 1, 1, false),
            conv2: Conv2d::new(&format!("{name}.conv2"), rng, cout, cout, 3, 1, 1, false),
        }
    }

    fn forward(&self, g: &mut Graph64, x: Var, skip: Var) -> TResult<Var> {
        let shape = g.value(skip).shape().to_vec();
        let up = g.bilinear_resize(x, shape[2], shape[3])?;
        let cat = g.concat_channels(up, skip)?;
        let h = self.conv1.forward(g, cat)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, h)?;
        g.relu(h)
    }
}

impl Module for UpBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

pub struct EncoderPyramid {
    pub enc1: Var,
    pub enc2: Var,
    pub enc3: Var,
    pub enc4: Var,
    pub enc5: Var,
}

pub struct LocalBranch {
    pub cfg: LfeConfig,
    stages: Vec<ResidualBlock>,
    tr4: TransformerBlock,
    tr5: TransformerBlock,
    dec4: UpBlock,
    dec3: UpBlock,
    dec2: UpBlock,
    dec1: UpBlock,
    final_proj: Conv2d,
    sfa_enc4: StageProjector,
    sfa_dec4: StageProjector,
    sfa_dec3: StageProjector,
    sfa_dec2: StageProjector,
    /// spatial stride ratio between dec1 and the shared output grid
    final_factor: usize,
}

impl LocalBranch {
    /// `output_grid` is the spatial side of the global branch map the local
    /// map must match; for an image of side `image_size` dec1 sits at
    /// image_size/2, so the final projection downsamples by their ratio.
    pub fn new(cfg: LfeConfig, embed_dim: usize, image_size: usize, output_grid: usize, seed: u64) -> Result<Self> {
        if image_size % 32 != 0 {
            return Err(Error::config(format!("image size {image_size} not divisible by 32")));
        }
        let dec1_side = image_size / 2;
        if dec1_side % output_grid != 0 {
            return Err(Error::config(format!(
                "dec1 grid {dec1_side} not divisible by output grid {output_grid}"
            )));
        }
        let final_factor = dec1_side / output_grid;
        let w = cfg.widths;
        if w[3] % cfg.heads != 0 || w[4] % cfg.heads != 0 {
            return Err(Error::config(format!(
                "transformer stage widths {}/{} not divisible by {} heads",
                w[3], w[4], cfg.heads
            )));
        }
        let mut rng = init::derive_rng(seed, 0x1f3d);
        let stages = vec![
            ResidualBlock::new("lfe.enc1", &mut rng, 3, w[0], 2, false),
            ResidualBlock::new("lfe.enc2", &mut rng, w[0], w[1], 2, false),
            ResidualBlock::new("lfe.enc3", &mut rng, w[1], w[2], 2, false),
            ResidualBlock::new("lfe.enc4", &mut rng, w[2], w[3], 2, false),
            ResidualBlock::new("lfe.enc5", &mut rng, w[3], w[4], 2, false),
        ];
        let tr4 = TransformerBlock::new("lfe.tr4", &mut rng, w[3], cfg.heads, false);
        let tr5 = TransformerBlock::new("lfe.tr5", &mut rng, w[4], cfg.heads, false);
        let dec4 = UpBlock::new("lfe.dec4", &mut rng, w[4], w[3], w[3]);
        let dec3 = UpBlock::new("lfe.dec3", &mut rng, w[3], w[2], w[2]);
        let dec2 = UpBlock::new("lfe.dec2", &mut rng, w[2], w[1], w[1]);
        let dec1 = UpBlock::new("lfe.dec1", &mut rng, w[1], w[0], w[0]);
        let final_proj = Conv2d::new(
            "lfe.final",
            &mut rng,
            w[0],
            LOCAL_CHANNELS,
            final_factor,
            final_factor,
            0,
            false,
        );
        let mut sfa_rng = init::derive_rng(seed, 0x5fa0);
        let sched = sfa_schedule(&cfg);
        let sfa_enc4 = StageProjector::new("sfa.enc4", &mut sfa_rng, embed_dim, sched[0].1);
        let sfa_dec4 = StageProjector::new("sfa.dec4", &mut sfa_rng, embed_dim, sched[1].1);
        let sfa_dec3 = StageProjector::new("sfa.dec3", &mut sfa_rng, embed_dim, sched[2].1);
        let sfa_dec2 = StageProjector::new("sfa.dec2", &mut sfa_rng, embed_dim, sched[3].1);
        Ok(LocalBranch {
            cfg,
            stages,
            tr4,
            tr5,
            dec4,
            dec3,
            dec2,
            dec1,
            final_proj,
            sfa_enc4,
            sfa_dec4,
            sfa_dec3,
            sfa_dec2,
            final_factor,
        })
    }

    pub fn final_factor(&self) -> usize {
        self.final_factor
    }

    pub fn encode(&self, g: &mut Graph64, image: Var) -> TResult<EncoderPyramid> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 4 || shape[2] % 32 != 0 || shape[3] % 32 != 0 {
            return Err(promptseg_tensor::Error::shape(
                "lfe_encode",
                format!("input {shape:?} must be [B,3,H,W] with 32 | H,W"),
            ));
        }
        let enc1 = self.stages[0].forward(g, image)?;
        let enc2 = self.stages[1].forward(g, enc1)?;
        let enc3 = self.stages[2].forward(g, enc2)?;
        let enc4 = self.stages[3].forward(g, enc3)?;
        let enc5 = self.stages[4].forward(g, enc4)?;
        Ok(EncoderPyramid { enc1, enc2, enc3, enc4, enc5 })
    }

    /// Flatten a [B,C,h,w] map to h*w tokens, run one transformer block,
    /// restore the spatial layout.
    fn transformer_on_map(
        &self,
        g: &mut Graph64,
        block: &TransformerBlock,
        x: Var,
    ) -> TResult<Var> {
        let shape = g.value(x).shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let t = g.reshape(x, vec![b, c, h * w])?;
        let t = g.permute(t, &[0, 2, 1])?;
        let t = block.forward(g, t)?;
        let t = g.permute(t, &[0, 2, 1])?;
        g.reshape(t, vec![b, c, h, w])
    }

    pub fn apply_deep_transformers(
        &self,
        g: &mut Graph64,
        enc4: Var,
        enc5: Var,
    ) -> TResult<(Var, Var)> {
        let enc4p = self.transformer_on_map(g, &self.tr4, enc4)?;
        let center = self.transformer_on_map(g, &self.tr5, enc5)?;
        Ok((enc4p, center))
    }

    /// Full branch: F_l [B,32,grid,grid]. `apply_sfa = false` bypasses every
    /// modulation site, giving the unmodulated twin on the same weights.
    pub fn forward(
        &self,
        g: &mut Graph64,
        image: Var,
        e_l: Var,
        apply_sfa: bool,
        residual: bool,
    ) -> Result<Var> {
        let p = self.encode(g, image)?;
        let (enc4p, center) = self.apply_deep_transformers(g, p.enc4, p.enc5)?;
        let enc4s = if apply_sfa {
            modulate(g, enc4p, &self.sfa_enc4, e_l, residual)?
        } else {
            enc4p
        };
        let dec4 = self.dec4.forward(g, center, enc4s)?;
        let dec4 = if apply_sfa { modulate(g, dec4, &self.sfa_dec4, e_l, residual)? } else { dec4 };
        let dec3 = self.dec3.forward(g, dec4, p.enc3)?;
        let dec3 = if apply_sfa { modulate(g, dec3, &self.sfa_dec3, e_l, residual)? } else { dec3 };
        let dec2 = self.dec2.forward(g, dec3, p.enc2)?;
        let dec2 = if apply_sfa { modulate(g, dec2, &self.sfa_dec2, e_l, residual)? } else { dec2 };
        let dec1 = self.dec1.forward(g, dec2, p.enc1)?;
        Ok(self.final_proj.forward(g, dec1)?)
    }
}

impl Module for LocalBranch {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        for s in &self.stages {
            s.visit(f);
        }
        self.tr4.visit(f);
        self.tr5.visit(f);
        self.dec4.visit(f);
        self.dec3.visit(f);
        self.dec2.visit(f);
        self.dec1.visit(f);
        self.final_proj.visit(f);
        self.sfa_enc4.visit(f);
        self.sfa_dec4.visit(f);
        self.sfa_dec3.visit(f);
        self.sfa_dec2.visit(f);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        for s in &mut self.stages {
            s.visit_mut(f);
        }
        self.tr4.visit_mut(f);
        self.tr5.visit_mut(f);
        self.dec4.visit_mut(f);
        self.dec3.visit_mut(f);
        self.dec2.visit_mut(f);
        self.dec1.visit_mut(f);
        self.final_proj.visit_mut(f);
        self.sfa_enc4.visit_mut(f);
        self.sfa_dec4.visit_mut(f);
        self.sfa_dec3.visit_mut(f);
        self.sfa_dec2.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use promptseg_tensor::init::seeded_rng;
    use promptseg_tensor::Tensor64;

    fn desk_branch() -> LocalBranch {
        LocalBranch::new(LfeConfig::desk(), 64, 64, 16, 9).unwrap()
    }

    #[test]
    fn pyramid_strides_and_widths_match_config() {
        let branch = desk_branch();
        let mut g = Graph64::inference();
        let image = g.constant(init::uniform(&mut seeded_rng(1), &[1, 3, 64, 64], 0.0, 1.0)).unwrap();
        let p = branch.encode(&mut g, image).unwrap();
        assert_eq!(g.value(p.enc1).shape(), &[1, 16, 32, 32]);
        assert_eq!(g.value(p.enc2).shape(), &[1, 32, 16, 16]);
        assert_eq!(g.value(p.enc3).shape(), &[1, 64, 8, 8]);
        assert_eq!(g.value(p.enc4).shape(), &[1, 128, 4, 4]);
        assert_eq!(g.value(p.enc5).shape(), &[1, 256, 2, 2]);

        let bad = g.constant(Tensor64::zeros(&[1, 3, 48, 48])).unwrap();
        assert!(branch.encode(&mut g, bad).is_err());
    }

    #[test]
    fn deep_transformers_preserve_shapes() {
        let branch = desk_branch();
        let mut g = Graph64::inference();
        let enc4 = g.constant(init::uniform(&mut seeded_rng(2), &[2, 128, 4, 4], -1.0, 1.0)).unwrap();
        let enc5 = g.constant(init::uniform(&mut seeded_rng(3), &[2, 256, 2, 2], -1.0, 1.0)).unwrap();
        let (a, b) = branch.apply_deep_transformers(&mut g, enc4, enc5).unwrap();
        assert_eq!(g.value(a).shape(), g.value(enc4).shape());
        assert_eq!(g.value(b).shape(), g.value(enc5).shape());
    }

    #[test]
    fn single_pixel_map_attends_to_itself() {
        // 1x1 spatial map is a single token; the block's attention weights
        // collapse to exactly 1 (checked indirectly: output equals the
        // same block applied to that one token sequence).
        let branch = desk_branch();
        let mut g = Graph64::inference();
        let x = g.constant(init::uniform(&mut seeded_rng(4), &[1, 128, 1, 1], -1.0, 1.0)).unwrap();
        let y = branch.transformer_on_map(&mut g, &branch.tr4, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 128, 1, 1]);

        let tokens = g.reshape(x, vec![1, 128, 1]).unwrap();
        let tokens = g.permute(tokens, &[0, 2, 1]).unwrap();
        let direct = branch.tr4.forward(&mut g, tokens).unwrap();
        assert_eq!(
            g.value(y).data(),
            g.value(direct).data(),
        );
    }

    #[test]
    fn output_grid_matches_global_branch() {
        let branch = desk_branch();
        assert_eq!(branch.final_factor(), 2);
        let mut g = Graph64::inference();
        let image = g.constant(init::uniform(&mut seeded_rng(5), &[1, 3, 64, 64], 0.0, 1.0)).unwrap();
        let e = g.constant(init::uniform(&mut seeded_rng(6), &[1, 64], -1.0, 1.0)).unwrap();
        let f = branch.forward(&mut g, image, e, true, true).unwrap();
        assert_eq!(g.value(f).shape(), &[1, LOCAL_CHANNELS, 16, 16]);
    }

    #[test]
    fn identity_sfa_equals_unmodulated_twin() {
        // zero-init projectors + no residual: modulated pass must equal the
        // apply_sfa = false pass bit for bit on shared weights
        let branch = desk_branch();
        let image = init::uniform::<f64>(&mut seeded_rng(7), &[1, 3, 64, 64], 0.0, 1.0);
        let e = init::uniform::<f64>(&mut seeded_rng(8), &[1, 64], -1.0, 1.0);

        let run = |apply: bool| {
            let mut g = Graph64::inference();
            let iv = g.constant(image.clone()).unwrap();
            let ev = g.constant(e.clone()).unwrap();
            let f = branch.forward(&mut g, iv, ev, apply, false).unwrap();
            g.value(f).clone()
        };
        assert!(run(true).bit_eq(&run(false)));
    }

    #[test]
    fn schedule_has_exactly_four_sites_with_doubled_projector_outputs() {
        let cfg = LfeConfig::desk();
        let sched = sfa_schedule(&cfg);
        assert_eq!(sched.len(), 4);
        assert_eq!(sched.map(|(n, _)| n), ["enc4", "dec4", "dec3", "dec2"]);

        let branch = desk_branch();
        for (proj, (_, width)) in [
            (&branch.sfa_enc4, sched[0]),
            (&branch.sfa_dec4, sched[1]),
            (&branch.sfa_dec3, sched[2]),
            (&branch.sfa_dec2, sched[3]),
        ] {
            assert_eq!(proj.width, width);
            // final layer emits 2C values
            let mut dims = None;
            proj.visit(&mut |p| {
                if p.name.ends_with("fc2.weight") {
                    dims = Some(p.value.shape()[1]);
                }
            });
            assert_eq!(dims, Some(2 * width));
        }
    }
}
