//! Evaluation orchestration: two-pass inference over a fold's validation
//! images, metric records per image, and prediction masks for overlays.

use std::collections::BTreeMap;

use crate::data::{FoldSplit, Sample};
use crate::error::{Error, Result};
use crate::eval::{pixel_counts, size_bin, tumor_length_px, ImageRecord, MetricVector};
use crate::mask::Mask;
use crate::model::{two_pass_predict, ModelState, TwoPassDiagnostics};
use crate::prompt::{EmbeddingTable, SizeBins};

pub struct EvaluatedImage {
    pub record: ImageRecord,
    pub prediction: Mask,
    pub diagnostics: TwoPassDiagnostics,
}

/// Run mask-free two-pass inference on every validation image of a fold and
/// score against the reference masks. Masks are consulted only for scoring,
/// never for prompt construction.
pub fn evaluate_fold(
    state: &ModelState,
    table: &EmbeddingTable,
    samples: &[Sample],
    fold: &FoldSplit,
    bins: &SizeBins,
) -> Result<Vec<EvaluatedImage>> {
    let by_id: BTreeMap<&str, &Sample> =
        samples.iter().map(|s| (s.metadata.image_id.as_str(), s)).collect();
    let mut out = Vec::with_capacity(fold.val_ids.len());
    for id in &fold.val_ids {
        let sample = by_id
            .get(id.as_str())
            .copied()
            .ok_or_else(|| Error::config(format!("unknown validation id '{id}'")))?;
        let inference_meta = sample.metadata.for_inference();
        let two_pass = two_pass_predict(state, table, &sample.image, &inference_meta, bins)?;

        let counts = pixel_counts(&two_pass.mask, &sample.mask)?;
        let m = MetricVector::from_counts(&counts);
        let counts_p1 = pixel_counts(&two_pass.mask_pass1, &sample.mask)?;
        let m1 = MetricVector::from_counts(&counts_p1);
        let length = tumor_length_px(&sample.mask);

        out.push(EvaluatedImage {
            record: ImageRecord {
                image_id: id.clone(),
                fold: fold.fold_index,
                dice: m.dice,
                iou: m.iou,
                fpr: m.fpr,
                fnr: m.fnr,
                tumor_length_px: length,
                size_bin: size_bin(length),
                fallback: two_pass.diagnostics.fallback,
                dice_pass1: m1.dice,
                iou_pass1: m1.iou,
            },
            prediction: two_pass.mask,
            diagnostics: two_pass.diagnostics,
        });
    }
    Ok(out)
}
