//! Full network assembly: both branches, output modulation, fusion head,
//! loss, the two-pass mask-free inference procedure, and Grad-CAM.

use std::collections::BTreeMap;
use std::path::Path;

use promptseg_tensor::{
    bilinear_resize_raw, checkpoint, init, Graph64, Parameter64, Result as TResult, Tensor64, Var,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfe::{GlobalBranch, ViTConfig, GLOBAL_CHANNELS};
use crate::lfe::{LfeConfig, LocalBranch, LOCAL_CHANNELS};
use crate::mask::Mask;
use crate::nn::{Conv2d, Module, ResidualBlock};
use crate::prompt::{
    discretize_size, quadrant_of, verbalize_global, verbalize_local_parts, Centroid,
    EmbeddingTable, InferenceMetadata, SizeBins, TextConfig, TextEncoder,
};
use crate::sfa::{modulate, StageProjector};

pub const FUSED_INPUT_CHANNELS: usize = GLOBAL_CHANNELS + LOCAL_CHANNELS;
pub const TAU_PROPOSAL: f64 = 0.30;
pub const TAU_SEG: f64 = 0.5;
pub const DICE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: String,
    pub image_size: usize,
    pub vit: ViTConfig,
    pub lfe: LfeConfig,
    pub text: TextConfig,
    pub fusion_width: usize,
    pub sfa_residual_global: bool,
    pub sfa_residual_local: bool,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            profile: "desk".to_string(),
            image_size: 64,
            vit: ViTConfig::desk(),
            lfe: LfeConfig::desk(),
            text: TextConfig::default(),
            fusion_width: 48,
            sfa_residual_global: false,
            sfa_residual_local: true,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            profile: "paper".to_string(),
            image_size: 352,
            vit: ViTConfig::paper(),
            lfe: LfeConfig::paper(),
            text: TextConfig::default(),
            fusion_width: 96,
            sfa_residual_global: false,
            sfa_residual_local: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size != self.vit.image_size {
            return Err(Error::config(format!(
                "model image size {} disagrees with backbone {}",
                self.image_size, self.vit.image_size
            )));
        }
        self.vit.validate()?;
        Ok(())
    }
}

/// Two residual blocks over the concatenated features, then a 1x1 conv to a
/// single logit channel.
pub struct FusionHead {
    rb1: ResidualBlock,
    rb2: ResidualBlock,
    out: Conv2d,
}

impl FusionHead {
    fn new(width: usize, seed: u64) -> Self {
        let mut rng = init::derive_rng(seed, 0xf05e);
        FusionHead {
            rb1: ResidualBlock::new("fusion.rb1", &mut rng, FUSED_INPUT_CHANNELS, width, 1, false),
            rb2: ResidualBlock::new("fusion.rb2", &mut rng, width, width, 1, false),
            out: Conv2d::new("fusion.out", &mut rng, width, 1, 1, 1, 0, false),
        }
    }

    /// Returns (fused feature map, low-resolution logits).
    pub fn forward(&self, g: &mut Graph64, f_cat: Var) -> TResult<(Var, Var)> {
        let f1 = self.rb1.forward(g, f_cat)?;
        let fused = self.rb2.forward(g, f1)?;
        let logits = self.out.forward(g, fused)?;
        Ok((fused, logits))
    }
}

impl Module for FusionHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        self.rb1.visit(f);
        self.rb2.visit(f);
        self.out.visit(f);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        self.rb1.visit_mut(f);
        self.rb2.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Every parameter of the assembled network. The frozen set is exactly the
/// ViT backbone and the text encoder.
pub struct ModelState {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub text: TextEncoder,
    pub gfe: GlobalBranch,
    pub lfe: LocalBranch,
    pub sfa_global: StageProjector,
    pub sfa_local: StageProjector,
    pub fusion: FusionHead,
}

impl ModelState {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let text = TextEncoder::new(cfg.text, seed);
        let gfe = GlobalBranch::new(cfg.vit.clone(), cfg.text.dim, seed)?;
        let lfe = LocalBranch::new(
            cfg.lfe.clone(),
            cfg.text.dim,
            cfg.image_size,
            cfg.vit.output_grid(),
            seed,
        )?;
        let mut sfa_rng = init::derive_rng(seed, 0x0u64 ^ 0x5fa1);
        let sfa_global =
            StageProjector::new("sfa.global", &mut sfa_rng, cfg.text.dim, GLOBAL_CHANNELS);
        let sfa_local = StageProjector::new("sfa.local", &mut sfa_rng, cfg.text.dim, LOCAL_CHANNELS);
        let fusion = FusionHead::new(cfg.fusion_width, seed);
        Ok(ModelState { cfg, seed, text, gfe, lfe, sfa_global, sfa_local, fusion })
    }

    pub fn grid(&self) -> usize {
        self.cfg.vit.output_grid()
    }

    /// Sorted snapshot of every parameter (name, tensor, frozen).
    pub fn parameter_entries(&self) -> Vec<checkpoint::CheckpointEntry<f64>> {
        let mut out = Vec::new();
        self.visit(&mut |p| {
            out.push(checkpoint::CheckpointEntry {
                name: p.name.clone(),
                tensor: p.value.clone(),
                frozen: p.frozen,
            })
        });
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    pub fn save_checkpoint(&self, path: &Path, bins: Option<&SizeBins>) -> Result<()> {
        let mut entries = self.parameter_entries();
        if let Some(b) = bins {
            entries.push(checkpoint::CheckpointEntry {
                name: "meta.size_bins".to_string(),
                tensor: Tensor64::new(vec![2], vec![b.t1, b.t2])?,
                frozen: true,
            });
        }
        checkpoint::save(path, &entries)?;
        Ok(())
    }

    /// Rebuild a model with the stored weights. The config must describe the
    /// same architecture the checkpoint was written from.
    pub fn load_checkpoint(cfg: ModelConfig, seed: u64, path: &Path) -> Result<(Self, Option<SizeBins>)> {
        let mut state = ModelState::new(cfg, seed)?;
        let entries = checkpoint::load::<f64>(path)?;
        let mut by_name: BTreeMap<String, checkpoint::CheckpointEntry<f64>> =
            entries.into_iter().map(|e| (e.name.clone(), e)).collect();
        let mut missing = Vec::new();
        state.visit_mut(&mut |p| match by_name.remove(&p.name) {
            Some(e) => {
                if e.tensor.shape() != p.value.shape() {
                    missing.push(format!(
                        "shape mismatch for '{}': checkpoint {:?}, model {:?}",
                        p.name,
                        e.tensor.shape(),
                        p.value.shape()
                    ));
                } else if e.frozen != p.frozen {
                    missing.push(format!("frozen flag mismatch for '{}'", p.name));
                } else {
                    p.value = e.tensor;
                }
            }
            None => missing.push(format!("checkpoint lacks parameter '{}'", p.name)),
        });
        if !missing.is_empty() {
            return Err(Error::data(format!("checkpoint incompatible: {}", missing.join("; "))));
        }
        let bins = by_name.remove("meta.size_bins").map(|e| SizeBins {
            t1: e.tensor.data()[0],
            t2: e.tensor.data()[1],
        });
        let unknown: Vec<&String> =
            by_name.keys().filter(|k| !k.starts_with("meta.")).collect();
        if !unknown.is_empty() {
            return Err(Error::data(format!("checkpoint has unknown parameters: {unknown:?}")));
        }
        Ok((state, bins))
    }
}

impl Module for ModelState {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        self.text.visit(f);
        self.gfe.visit(f);
        self.lfe.visit(f);
        self.sfa_global.visit(f);
        self.sfa_local.visit(f);
        self.fusion.visit(f);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        self.text.visit_mut(f);
        self.gfe.visit_mut(f);
        self.lfe.visit_mut(f);
        self.sfa_global.visit_mut(f);
        self.sfa_local.visit_mut(f);
        self.fusion.visit_mut(f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub apply_sfa: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { apply_sfa: true }
    }
}

/// Named intermediate maps of one forward pass, for Grad-CAM and tests.
pub struct ForwardTrace {
    pub f_g: Var,
    pub f_l: Var,
    pub f_g_hat: Var,
    pub f_l_hat: Var,
    pub f_cat: Var,
    pub f_fused: Var,
    pub logits_low: Var,
    pub logits: Var,
}

pub const GRAD_CAM_LAYERS: [&str; 4] = ["fused", "cat", "global", "local"];

impl ForwardTrace {
    pub fn layer(&self, name: &str) -> Option<Var> {
        match name {
            "fused" => Some(self.f_fused),
            "cat" => Some(self.f_cat),
            "global" => Some(self.f_g_hat),
            "local" => Some(self.f_l_hat),
            _ => None,
        }
    }
}

impl ModelState {
    /// Backbone token stacks for an image batch; cacheable because the
    /// backbone is frozen.
    pub fn vit_taps(&self, g: &mut Graph64, image: Var) -> TResult<Vec<Var>> {
        self.gfe.vit.taps(g, image)
    }

    /// Forward pass reusing precomputed backbone taps.
    pub fn forward_with_taps(
        &self,
        g: &mut Graph64,
        image: Var,
        taps: &[Var],
        e_c: Var,
        e_l: Var,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace> {
        let f_g = self.gfe.forward(g, taps, e_c)?;
        let f_l =
            self.lfe.forward(g, image, e_l, opts.apply_sfa, self.cfg.sfa_residual_local)?;
        self.fuse(g, image, f_g, f_l, e_c, e_l, opts)
    }

    /// Branch outputs through output modulation, fusion, and upsampling.
    fn fuse(
        &self,
        g: &mut Graph64,
        image: Var,
        f_g: Var,
        f_l: Var,
        e_c: Var,
        e_l: Var,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace> {
        let f_g_hat = if opts.apply_sfa {
            modulate(g, f_g, &self.sfa_global, e_c, self.cfg.sfa_residual_global)?
        } else {
            f_g
        };
        let f_l_hat = if opts.apply_sfa {
            modulate(g, f_l, &self.sfa_local, e_l, self.cfg.sfa_residual_local)?
        } else {
            f_l
        };
        let f_cat = g.concat_channels(f_g_hat, f_l_hat)?;
        let (f_fused, logits_low) = self.fusion.forward(g, f_cat)?;
        let ishape = g.value(image).shape().to_vec();
        let logits = g.bilinear_resize(logits_low, ishape[2], ishape[3])?;
        Ok(ForwardTrace { f_g, f_l, f_g_hat, f_l_hat, f_cat, f_fused, logits_low, logits })
    }

    pub fn forward_trace(
        &self,
        g: &mut Graph64,
        image: Var,
        e_c: Var,
        e_l: Var,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace> {
        let taps = self.vit_taps(g, image)?;
        self.forward_with_taps(g, image, &taps, e_c, e_l, opts)
    }

    /// Convenience value-level forward: logits [B,1,H,W].
    pub fn forward(
        &self,
        image: &Tensor64,
        e_c: &Tensor64,
        e_l: &Tensor64,
        opts: ForwardOptions,
    ) -> Result<Tensor64> {
        let mut g = Graph64::inference();
        let iv = g.constant(image.clone())?;
        let ec = g.constant(e_c.clone())?;
        let el = g.constant(e_l.clone())?;
        let trace = self.forward_trace(&mut g, iv, ec, el, opts)?;
        Ok(g.value(trace.logits).clone())
    }
}

/// 0.5 * BCE-with-logits + 0.5 * soft Dice, both over the whole batch.
/// The mask must be strictly {0,1}-valued.
pub fn loss_on_graph(g: &mut Graph64, logits: Var, mask: &Tensor64) -> Result<Var> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::usage("loss mask must be binary {0,1}".to_string()));
    }
    if mask.shape() != g.value(logits).shape() {
        return Err(Error::Tensor(promptseg_tensor::Error::shape(
            "loss",
            format!("logits {:?} vs mask {:?}", g.value(logits).shape(), mask.shape()),
        )));
    }
    let mv = g.constant(mask.clone())?;
    let bce = g.bce_with_logits_mean(logits, mv)?;

    let prob = g.sigmoid(logits)?;
    let pm = g.mul(prob, mv)?;
    let inter = g.sum_all(pm)?;
    let sum_p = g.sum_all(prob)?;
    let sum_m = g.sum_all(mv)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_EPS)?;
    let den = g.add(sum_p, sum_m)?;
    let den = g.add_scalar(den, DICE_EPS)?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0)?;
    let dice = g.add_scalar(neg, 1.0)?;

    let bce_half = g.scale(bce, 0.5)?;
    let dice_half = g.scale(dice, 0.5)?;
    Ok(g.add(bce_half, dice_half)?)
}

/// Soft Dice term alone (for tests).
pub fn soft_dice_on_graph(g: &mut Graph64, logits: Var, mask: &Tensor64) -> Result<Var> {
    let mv = g.constant(mask.clone())?;
    let prob = g.sigmoid(logits)?;
    let pm = g.mul(prob, mv)?;
    let inter = g.sum_all(pm)?;
    let sum_p = g.sum_all(prob)?;
    let sum_m = g.sum_all(mv)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_EPS)?;
    let den = g.add(sum_p, sum_m)?;
    let den = g.add_scalar(den, DICE_EPS)?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0)?;
    Ok(g.add_scalar(neg, 1.0)?)
}

/// Threshold a probability plane at tau (inclusive).
pub fn binarize(prob: &[f64], h: usize, w: usize, tau: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::usage(format!("threshold {tau} outside [0,1]")));
    }
    if prob.len() != h * w {
        return Err(Error::usage(format!("probability plane {} != {h}x{w}", prob.len())));
    }
    Mask::new(h, w, prob.iter().map(|&p| (p >= tau) as u8).collect())
}

/// Largest 4-connected foreground component; ties resolve to the component
/// discovered first in raster order. Empty in, empty out.
pub fn largest_connected_component(mask: &Mask) -> Mask {
    let (h, w) = (mask.h, mask.w);
    let mut label = vec![u32::MAX; h * w];
    let mut sizes: Vec<usize> = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..h * w {
        if mask.data()[start] == 0 || label[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        sizes.push(0);
        label[start] = id;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            sizes[id as usize] += 1;
            let (r, c) = (idx / w, idx % w);
            let mut visit = |nr: usize, nc: usize| {
                let nidx = nr * w + nc;
                if mask.data()[nidx] == 1 && label[nidx] == u32::MAX {
                    label[nidx] = id;
                    queue.push_back(nidx);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < h {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < w {
                visit(r, c + 1);
            }
        }
    }
    if sizes.is_empty() {
        return Mask::zeros(h, w);
    }
    let best = sizes
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
        .map(|(i, _)| i as u32)
        .expect("non-empty");
    Mask::new(h, w, label.iter().map(|&l| (l == best) as u8).collect())
        .expect("labels align with grid")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwoPassDiagnostics {
    pub tau_proposal: f64,
    pub tau_seg: f64,
    pub pass1_prompt: String,
    pub pass2_prompt: Option<String>,
    pub local_prompt: String,
    pub proposal_size_px: usize,
    pub centroid: Option<(f64, f64)>,
    pub quadrant: Option<String>,
    pub fallback: bool,
}

pub struct TwoPassOutput {
    /// final probability plane, H*W row-major
    pub prob: Vec<f64>,
    pub mask: Mask,
    /// pass-1 probability plane and its tau_seg mask, for paired comparisons
    pub prob_pass1: Vec<f64>,
    pub mask_pass1: Mask,
    pub diagnostics: TwoPassDiagnostics,
}

/// Mask-free two-pass inference. Pass 1 runs with the location clause
/// replaced by "unknown location"; the proposal is thresholded at 0.30,
/// reduced to its largest component, and its centroid picks the quadrant
/// token for pass 2. An empty proposal falls back to the pass-1 output.
pub fn two_pass_predict(
    state: &ModelState,
    embeddings: &EmbeddingTable,
    image: &Tensor64,
    meta: &InferenceMetadata,
    bins: &SizeBins,
) -> Result<TwoPassOutput> {
    let shape = image.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::usage(format!("image must be [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let size_cat = discretize_size(meta.size_value, bins);
    let local_prompt = verbalize_local_parts(meta.shape, meta.margin, meta.birads);
    let pass1_prompt = verbalize_global(size_cat, None);

    let e_l = embeddings.get(&local_prompt)?.clone();
    let e_c1 = embeddings.get(&pass1_prompt)?.clone();

    let mut g = Graph64::inference();
    let image_var = {
        let iv = g.constant(image.clone())?;
        g.reshape(iv, vec![1, 3, h, w])?
    };
    let el = {
        let t = g.constant(e_l)?;
        g.reshape(t, vec![1, state.cfg.text.dim])?
    };
    let taps = state.vit_taps(&mut g, image_var)?;

    // the local branch ignores the global prompt: compute its modulated
    // output once and share it between both passes
    let f_l = state.lfe.forward(&mut g, image_var, el, true, state.cfg.sfa_residual_local)?;
    let f_l_hat = modulate(&mut g, f_l, &state.sfa_local, el, state.cfg.sfa_residual_local)?;

    let global_pass = |g: &mut Graph64, e_c: Tensor64| -> Result<Vec<f64>> {
        let ec = {
            let t = g.constant(e_c)?;
            g.reshape(t, vec![1, state.cfg.text.dim])?
        };
        let f_g = state.gfe.forward(g, &taps, ec)?;
        let f_g_hat = modulate(g, f_g, &state.sfa_global, ec, state.cfg.sfa_residual_global)?;
        let f_cat = g.concat_channels(f_g_hat, f_l_hat)?;
        let (_, logits_low) = state.fusion.forward(g, f_cat)?;
        let logits = g.bilinear_resize(logits_low, h, w)?;
        let prob = g.sigmoid(logits)?;
        Ok(g.value(prob).data().to_vec())
    };

    let prob1 = global_pass(&mut g, e_c1)?;
    let coarse = binarize(&prob1, h, w, TAU_PROPOSAL)?;
    let proposal = largest_connected_component(&coarse);
    let mask_pass1 = binarize(&prob1, h, w, TAU_SEG)?;

    if proposal.is_empty() {
        let mask = mask_pass1.clone();
        return Ok(TwoPassOutput {
            prob: prob1.clone(),
            mask,
            prob_pass1: prob1,
            mask_pass1,
            diagnostics: TwoPassDiagnostics {
                tau_proposal: TAU_PROPOSAL,
                tau_seg: TAU_SEG,
                pass1_prompt,
                pass2_prompt: None,
                local_prompt,
                proposal_size_px: 0,
                centroid: None,
                quadrant: None,
                fallback: true,
            },
        });
    }

    let centroid: Centroid = crate::prompt::centroid_from_mask(&proposal)?;
    let quadrant = quadrant_of(centroid, h, w);
    let pass2_prompt = verbalize_global(size_cat, Some(quadrant));
    let e_c2 = embeddings.get(&pass2_prompt)?.clone();
    let prob2 = global_pass(&mut g, e_c2)?;
    let mask = binarize(&prob2, h, w, TAU_SEG)?;

    Ok(TwoPassOutput {
        prob: prob2,
        mask,
        prob_pass1: prob1,
        mask_pass1,
        diagnostics: TwoPassDiagnostics {
            tau_proposal: TAU_PROPOSAL,
            tau_seg: TAU_SEG,
            pass1_prompt,
            pass2_prompt: Some(pass2_prompt),
            local_prompt,
            proposal_size_px: proposal.foreground_count(),
            centroid: Some((centroid.cx, centroid.cy)),
            quadrant: Some(quadrant.as_str().to_string()),
            fallback: false,
        },
    })
}

/// Gradient-weighted class activation map over a named feature map.
/// Channel weights are the spatial means of d(sum of foreground logits)/dA;
/// the rectified weighted sum is upsampled and min-max normalized.
pub fn grad_cam(
    state: &ModelState,
    image: &Tensor64,
    e_c: &Tensor64,
    e_l: &Tensor64,
    layer: &str,
) -> Result<Vec<f64>> {
    let shape = image.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::usage(format!("image must be [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut g = Graph64::recording();
    let iv = {
        let t = g.constant(image.clone())?;
        g.reshape(t, vec![1, 3, h, w])?
    };
    let ec = {
        let t = g.constant(e_c.clone())?;
        g.reshape(t, vec![1, state.cfg.text.dim])?
    };
    let el = {
        let t = g.constant(e_l.clone())?;
        g.reshape(t, vec![1, state.cfg.text.dim])?
    };
    let trace = state.forward_trace(&mut g, iv, ec, el, ForwardOptions::default())?;
    let target = trace
        .layer(layer)
        .ok_or_else(|| Error::usage(format!("unknown layer '{layer}', valid: {GRAD_CAM_LAYERS:?}")))?;

    // foreground = predicted positive pixels; degenerate to all pixels
    let prob = g.sigmoid(trace.logits)?;
    let mut fg: Vec<f64> =
        g.value(prob).data().iter().map(|&p| (p >= TAU_SEG) as u8 as f64).collect();
    if fg.iter().all(|&v| v == 0.0) {
        fg.fill(1.0);
    }
    let fg_const = g.constant(Tensor64::new(vec![1, 1, h, w], fg)?)?;
    let masked = g.mul(trace.logits, fg_const)?;
    let score = g.sum_all(masked)?;
    g.backward(score)?;

    let act = g.value(target).clone();
    let (c, gh, gw) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let plane = gh * gw;
    let zeros;
    let grad = match g.grad(target) {
        Some(gr) => gr,
        None => {
            zeros = vec![0.0; act.numel()];
            &zeros
        }
    };
    let mut cam = vec![0.0f64; plane];
    for ch in 0..c {
        let weight: f64 = grad[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        for (i, v) in act.data()[ch * plane..(ch + 1) * plane].iter().enumerate() {
            cam[i] += weight * v;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let up = bilinear_resize_raw(&cam, 1, gh, gw, h, w);
    let max = up.iter().fold(0.0f64, |a, &b| a.max(b));
    let min = up.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if max <= 0.0 || max == min {
        return Ok(vec![0.0; h * w]);
    }
    Ok(up.iter().map(|&v| (v - min) / (max - min)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use promptseg_tensor::init::seeded_rng;

    pub(crate) fn tiny_model() -> ModelState {
        let mut cfg = ModelConfig::desk();
        cfg.vit.depth = 2;
        cfg.vit.tap_layers = vec![1, 2];
        cfg.vit.dim = 32;
        cfg.lfe.widths = [8, 16, 32, 64, 128];
        cfg.fusion_width = 16;
        ModelState::new(cfg, 11).unwrap()
    }

    #[test]
    fn channel_chain_is_sixty_four_plus_thirty_two() {
        let state = tiny_model();
        let mut g = Graph64::inference();
        let image =
            g.constant(init::uniform(&mut seeded_rng(1), &[1, 3, 64, 64], 0.0, 1.0)).unwrap();
        let e_c = g.constant(init::uniform(&mut seeded_rng(2), &[1, 64], -1.0, 1.0)).unwrap();
        let e_l = g.constant(init::uniform(&mut seeded_rng(3), &[1, 64], -1.0, 1.0)).unwrap();
        let trace =
            state.forward_trace(&mut g, image, e_c, e_l, ForwardOptions::default()).unwrap();
        assert_eq!(g.value(trace.f_g_hat).shape()[1], 64);
        assert_eq!(g.value(trace.f_l_hat).shape()[1], 32);
        assert_eq!(g.value(trace.f_cat).shape()[1], 96);
        assert_eq!(g.value(trace.logits).shape(), &[1, 1, 64, 64]);
        // branch grids agree
        assert_eq!(g.value(trace.f_g).shape()[2..], g.value(trace.f_l).shape()[2..]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let state = tiny_model();
        let image = init::uniform::<f64>(&mut seeded_rng(4), &[1, 3, 64, 64], 0.0, 1.0);
        let e_c = init::uniform::<f64>(&mut seeded_rng(5), &[1, 64], -1.0, 1.0);
        let e_l = init::uniform::<f64>(&mut seeded_rng(6), &[1, 64], -1.0, 1.0);
        let a = state.forward(&image, &e_c, &e_l, ForwardOptions::default()).unwrap();
        let b = state.forward(&image, &e_c, &e_l, ForwardOptions::default()).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn loss_of_zero_logits_on_balanced_mask_has_ln2_bce_term() {
        let mut g = Graph64::recording();
        let logits = g.input(Tensor64::zeros(&[1, 1, 2, 2])).unwrap();
        let mask = Tensor64::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let mv = g.constant(mask.clone()).unwrap();
        let bce = g.bce_with_logits_mean(logits, mv).unwrap();
        assert!((g.value(bce).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        // soft-Dice term at |logit| = 20 on a perfect prediction is < 1e-3
        let mut g = Graph64::inference();
        let perfect =
            g.constant(Tensor64::new(vec![1, 1, 2, 2], vec![20.0, -20.0, 20.0, -20.0]).unwrap())
                .unwrap();
        let dice = soft_dice_on_graph(&mut g, perfect, &mask).unwrap();
        assert!(g.value(dice).item().unwrap() < 1e-3);
    }

    #[test]
    fn loss_rejects_non_binary_masks() {
        let mut g = Graph64::inference();
        let logits = g.constant(Tensor64::zeros(&[1, 1, 2, 2])).unwrap();
        let mask = Tensor64::new(vec![1, 1, 2, 2], vec![0.5, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(loss_on_graph(&mut g, logits, &mask), Err(Error::Usage(_))));
    }

    #[test]
    fn binarize_threshold_is_inclusive() {
        let m = binarize(&[0.49, 0.50], 1, 2, 0.5).unwrap();
        assert_eq!(m.data(), &[0, 1]);
        assert!(binarize(&[0.1], 1, 1, 0.0).unwrap().data() == &[1]);
        assert!(binarize(&[0.99], 1, 1, 1.0).unwrap().data() == &[0]);
        assert!(binarize(&[0.5], 1, 1, 1.5).is_err());
    }

    #[test]
    fn largest_component_keeps_the_three_pixel_blob() {
        // components of size 3 and 2 on a 4x4 grid
        #[rustfmt::skip]
        let data = vec![
            1, 1, 0, 0,
            1, 0, 0, 1,
            0, 0, 0, 1,
            0, 0, 0, 0,
        ];
        let m = Mask::new(4, 4, data).unwrap();
        let out = largest_connected_component(&m);
        #[rustfmt::skip]
        let want = vec![
            1, 1, 0, 0,
            1, 0, 0, 0,
            0, 0, 0, 0,
            0, 0, 0, 0,
        ];
        assert_eq!(out.data(), &want[..]);
    }

    #[test]
    fn largest_component_edge_cases() {
        let empty = Mask::zeros(3, 3);
        assert!(largest_connected_component(&empty).is_empty());

        let single = Mask::from_fn(3, 3, |r, c| r == 1 && c == 1);
        assert_eq!(largest_connected_component(&single), single);

        // tie: two 2-pixel components, raster-first wins
        #[rustfmt::skip]
        let data = vec![
            1, 1, 0, 0,
            0, 0, 0, 0,
            0, 0, 1, 1,
        ];
        let m = Mask::new(3, 4, data).unwrap();
        let out = largest_connected_component(&m);
        assert_eq!(out.get(0, 0), 1);
        assert_eq!(out.get(2, 2), 0);
    }

    #[test]
    fn grad_cam_is_normalized_and_shaped() {
        let state = tiny_model();
        let image = init::uniform::<f64>(&mut seeded_rng(7), &[3, 64, 64], 0.0, 1.0);
        let e_c = init::uniform::<f64>(&mut seeded_rng(8), &[64], -1.0, 1.0);
        let e_l = init::uniform::<f64>(&mut seeded_rng(9), &[64], -1.0, 1.0);
        let cam = grad_cam(&state, &image, &e_c, &e_l, "fused").unwrap();
        assert_eq!(cam.len(), 64 * 64);
        assert!(cam.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(grad_cam(&state, &image, &e_c, &e_l, "nope").is_err());
    }

    #[test]
    fn grad_cam_hand_oracle_single_channel() {
        // cam = relu(w1 * A1) with w1 the mean gradient; here gradient of
        // sum(2*A) is 2 everywhere so cam ~ relu(2*A), normalized.
        let act = [0.5, -1.0, 2.0, 0.25];
        let grad_mean = 2.0;
        let cam_raw: Vec<f64> = act.iter().map(|&a: &f64| (grad_mean * a).max(0.0)).collect();
        let max = cam_raw.iter().cloned().fold(0.0f64, f64::max);
        let min = cam_raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let want: Vec<f64> = cam_raw.iter().map(|v| (v - min) / (max - min)).collect();
        assert_eq!(want[2], 1.0);
        assert_eq!(want[1], 0.0);
    }

    #[test]
    fn checkpoint_round_trip_restores_all_parameters() {
        let state = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let bins = SizeBins { t1: 10.0, t2: 20.0 };
        state.save_checkpoint(&path, Some(&bins)).unwrap();

        let (loaded, loaded_bins) =
            ModelState::load_checkpoint(state.cfg.clone(), state.seed, &path).unwrap();
        assert_eq!(loaded_bins, Some(bins));
        let a = state.parameter_entries();
        let b = loaded.parameter_entries();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.frozen, y.frozen);
            assert!(x.tensor.bit_eq(&y.tensor), "{} differs", x.name);
        }
    }

    #[test]
    fn frozen_set_is_backbone_and_text_encoder_exactly() {
        let state = tiny_model();
        let mut frozen = Vec::new();
        let mut trainable = Vec::new();
        state.visit(&mut |p| {
            if p.frozen {
                frozen.push(p.name.clone());
            } else {
                trainable.push(p.name.clone());
            }
        });
        assert!(frozen
            .iter()
            .all(|n| n.starts_with("gfe.vit.") || n.starts_with("text.")));
        assert!(frozen.iter().any(|n| n.starts_with("gfe.vit.block")));
        assert!(frozen.iter().any(|n| n.starts_with("text.block")));
        for group in ["gfe.reduce", "gfe.cond", "gfe.project", "lfe.", "sfa.", "fusion."] {
            assert!(
                trainable.iter().any(|n| n.starts_with(group)),
                "no trainable parameter in group {group}"
            );
        }
        assert!(trainable.iter().all(|n| !n.starts_with("gfe.vit.") && !n.starts_with("text.")));
    }
}
