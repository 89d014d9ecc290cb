//! Fold training: AdamW with the cosine schedule over the composite
//! BCE + soft-Dice loss. Frozen towers (ViT backbone, text encoder) are
//! precomputed per image and cached for the whole run.

use std::collections::BTreeMap;

use promptseg_tensor::{optim::AdamW, Graph64, Tensor64};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{FoldSplit, Sample};
use crate::error::{Error, Result};
use crate::eval::{dice, pixel_counts};
use crate::model::{binarize, loss_on_graph, ForwardOptions, ModelState, TAU_SEG};
use crate::nn::Module;
use crate::prompt::{
    centroid_from_mask, discretize_size, quadrant_of, verbalize_global, verbalize_local,
    EmbeddingTable, SizeBins,
};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { iterations: 1000, batch_size: 4, base_lr: 1e-4, weight_decay: 0.01, seed: 42 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.base_lr <= 0.0 {
            return Err(Error::config(format!("invalid training config: {self:?}")));
        }
        Ok(())
    }
}

pub struct TrainedFold {
    pub loss_trace: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub bins: SizeBins,
}

/// Per-sample constants that do not change while the trainable weights do.
pub struct PreparedSample<'a> {
    pub sample: &'a Sample,
    pub e_c: Tensor64,
    pub e_l: Tensor64,
    pub taps: Vec<Tensor64>,
}

/// Training prompts: the global prompt's location comes from the reference
/// mask centroid (inference never does this; see two_pass_predict).
pub fn prepare_training_samples<'a>(
    state: &ModelState,
    table: &EmbeddingTable,
    samples: &[&'a Sample],
    bins: &SizeBins,
) -> Result<Vec<PreparedSample<'a>>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let centroid = centroid_from_mask(&s.mask)?;
        let quadrant = quadrant_of(centroid, s.mask.h, s.mask.w);
        let size_cat = discretize_size(s.metadata.size_value, bins);
        let global = verbalize_global(size_cat, Some(quadrant));
        let local = verbalize_local(&s.metadata);
        let e_c = table.get(&global)?.clone();
        let e_l = table.get(&local)?.clone();

        let mut g = Graph64::inference();
        let iv = {
            let t = g.constant(s.image.clone())?;
            let shape = s.image.shape().to_vec();
            g.reshape(t, vec![1, 3, shape[1], shape[2]])?
        };
        let taps = state
            .vit_taps(&mut g, iv)?
            .into_iter()
            .map(|v| g.value(v).clone())
            .collect();
        out.push(PreparedSample { sample: s, e_c, e_l, taps });
    }
    Ok(out)
}

fn stack(tensors: &[&Tensor64]) -> Tensor64 {
    let inner = tensors[0].shape().to_vec();
    let mut data = Vec::with_capacity(tensors.len() * tensors[0].numel());
    for t in tensors {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![tensors.len()];
    shape.extend(inner.iter().skip(usize::from(inner.first() == Some(&1))));
    Tensor64::new(shape, data).expect("uniform shapes")
}

fn batch_images(batch: &[&PreparedSample]) -> Tensor64 {
    let shape = batch[0].sample.image.shape().to_vec();
    let mut data = Vec::with_capacity(batch.len() * batch[0].sample.image.numel());
    for p in batch {
        data.extend_from_slice(p.sample.image.data());
    }
    Tensor64::new(vec![batch.len(), shape[0], shape[1], shape[2]], data).expect("uniform shapes")
}

fn batch_masks(batch: &[&PreparedSample]) -> Tensor64 {
    let (h, w) = (batch[0].sample.mask.h, batch[0].sample.mask.w);
    let mut data = Vec::with_capacity(batch.len() * h * w);
    for p in batch {
        data.extend(p.sample.mask.data().iter().map(|&v| v as f64));
    }
    Tensor64::new(vec![batch.len(), 1, h, w], data).expect("uniform shapes")
}

/// One optimization step on a prepared batch; returns the loss value.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut AdamW<f64>,
    batch: &[&PreparedSample],
) -> Result<f64> {
    let mut g = Graph64::recording();
    let image = g.constant(batch_images(batch))?;
    let e_c = {
        let refs: Vec<&Tensor64> = batch.iter().map(|p| &p.e_c).collect();
        g.constant(stack(&refs))?
    };
    let e_l = {
        let refs: Vec<&Tensor64> = batch.iter().map(|p| &p.e_l).collect();
        g.constant(stack(&refs))?
    };
    let tap_count = batch[0].taps.len();
    let mut taps = Vec::with_capacity(tap_count);
    for layer in 0..tap_count {
        let refs: Vec<&Tensor64> = batch.iter().map(|p| &p.taps[layer]).collect();
        taps.push(g.constant(stack(&refs))?);
    }

    let trace = state.forward_with_taps(&mut g, image, &taps, e_c, e_l, ForwardOptions::default())?;
    let loss = loss_on_graph(&mut g, trace.logits, &batch_masks(batch))?;
    let loss_value = g.value(loss).item()?;
    g.backward(loss)?;
    let grads = g.param_grads();
    drop(g);

    let mut param_refs: Vec<&mut promptseg_tensor::Parameter64> = Vec::new();
    state.visit_mut(&mut |p| param_refs.push(p));
    opt.step(&mut param_refs, &grads)?;
    Ok(loss_value)
}

/// Train one cross-validation fold. The split must be disjoint and every id
/// must resolve to a sample.
pub fn train_fold(
    state: &mut ModelState,
    samples: &[Sample],
    split: &FoldSplit,
    tc: &TrainConfig,
) -> Result<TrainedFold> {
    tc.validate()?;
    for id in &split.train_ids {
        if split.val_ids.contains(id) {
            return Err(Error::config(format!("fold {}: id '{id}' in both splits", split.fold_index)));
        }
    }
    let by_id: BTreeMap<&str, &Sample> =
        samples.iter().map(|s| (s.metadata.image_id.as_str(), s)).collect();
    let train: Vec<&Sample> = split
        .train_ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::config(format!("unknown train id '{id}'")))
        })
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::config("empty training split".to_string()));
    }

    let sizes: Vec<f64> = train.iter().map(|s| s.metadata.size_value).collect();
    let bins = crate::prompt::fit_size_bins(&sizes)?;
    let table = EmbeddingTable::build(&state.text)?;
    let prepared = prepare_training_samples(state, &table, &train, &bins)?;

    let mut opt = AdamW::new(tc.base_lr, tc.weight_decay, tc.iterations);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(tc.seed ^ (split.fold_index as u64).wrapping_mul(0x9E37_79B9));
    let mut cursor = order.len(); // force an initial shuffle
    let mut loss_trace = Vec::with_capacity(tc.iterations);
    let mut lr_trace = Vec::with_capacity(tc.iterations);

    for _ in 0..tc.iterations {
        let mut batch: Vec<&PreparedSample> = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if cursor >= order.len() {
                for i in (1..order.len()).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch.push(&prepared[order[cursor]]);
            cursor += 1;
        }
        let lr = promptseg_tensor::optim::cosine_lr(opt.steps_taken(), tc.iterations, tc.base_lr)?;
        let loss = train_step(state, &mut opt, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Tensor(promptseg_tensor::Error::NonFinite { op: "train loss" }));
        }
        loss_trace.push(loss);
        lr_trace.push(lr);
    }
    Ok(TrainedFold { loss_trace, lr_trace, bins })
}

/// Mean Dice over samples using training-style prompts (mask centroid
/// location) at the standard operating threshold.
pub fn mean_train_dice(
    state: &ModelState,
    table: &EmbeddingTable,
    samples: &[&Sample],
    bins: &SizeBins,
) -> Result<f64> {
    let prepared = prepare_training_samples(state, table, samples, bins)?;
    let mut total = 0.0;
    for p in &prepared {
        let (h, w) = (p.sample.mask.h, p.sample.mask.w);
        let mut g = Graph64::inference();
        let image = g.constant(batch_images(&[p]))?;
        let e_c = g.constant(stack(&[&p.e_c]))?;
        let e_l = g.constant(stack(&[&p.e_l]))?;
        let taps: Vec<_> = p
            .taps
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<promptseg_tensor::Result<_>>()?;
        let trace = state.forward_with_taps(&mut g, image, &taps, e_c, e_l, ForwardOptions::default())?;
        let prob = g.sigmoid(trace.logits)?;
        let mask = binarize(g.value(prob).data(), h, w, TAU_SEG)?;
        let counts = pixel_counts(&mask, &p.sample.mask)?;
        total += dice(&counts);
    }
    Ok(total / prepared.len() as f64)
}
