//! Per-image overlap metrics, fold aggregation, size-stratified reporting,
//! paired statistics, overlay rendering, and report emission.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mask::Mask;
use promptseg_tensor::Tensor64;

pub const METRIC_EPS: f64 = 1e-8;
/// Longest mask side is rescaled to this reference resolution before
/// size-bin assignment.
pub const SIZE_REFERENCE_SIDE: f64 = 352.0;

// ---------------------------------------------------------------------------
// Pixel counts and metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn pixel_counts(pred: &Mask, truth: &Mask) -> Result<PixelCounts> {
    if pred.h != truth.h || pred.w != truth.w {
        return Err(Error::Eval(format!(
            "mask shapes disagree: {}x{} vs {}x{}",
            pred.h, pred.w, truth.h, truth.w
        )));
    }
    let mut c = PixelCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

impl PixelCounts {
    fn both_empty(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }
}

pub fn dice(c: &PixelCounts) -> f64 {
    if c.both_empty() {
        return 1.0;
    }
    2.0 * c.tp as f64 / (2.0 * c.tp as f64 + c.fp as f64 + c.fn_ as f64 + METRIC_EPS)
}

pub fn iou(c: &PixelCounts) -> f64 {
    if c.both_empty() {
        return 1.0;
    }
    c.tp as f64 / (c.tp as f64 + c.fp as f64 + c.fn_ as f64 + METRIC_EPS)
}

pub fn fpr(c: &PixelCounts) -> f64 {
    c.fp as f64 / (c.fp as f64 + c.tn as f64 + METRIC_EPS)
}

pub fn fnr(c: &PixelCounts) -> f64 {
    if c.both_empty() {
        return 0.0;
    }
    c.fn_ as f64 / (c.fn_ as f64 + c.tp as f64 + METRIC_EPS)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub dice: f64,
    pub iou: f64,
    pub fpr: f64,
    pub fnr: f64,
}

impl MetricVector {
    pub fn from_counts(c: &PixelCounts) -> Self {
        MetricVector { dice: dice(c), iou: iou(c), fpr: fpr(c), fnr: fnr(c) }
    }
}

// ---------------------------------------------------------------------------
// Size bins
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeBin {
    #[serde(rename = "0-110")]
    UpTo110,
    #[serde(rename = "111-250")]
    From111To250,
    #[serde(rename = "250+")]
    Above250,
}

impl SizeBin {
    pub fn label(self) -> &'static str {
        match self {
            SizeBin::UpTo110 => "0-110",
            SizeBin::From111To250 => "111-250",
            SizeBin::Above250 => "250+",
        }
    }

    pub fn all() -> [SizeBin; 3] {
        [SizeBin::UpTo110, SizeBin::From111To250, SizeBin::Above250]
    }
}

pub fn size_bin(tumor_length_px: u32) -> SizeBin {
    match tumor_length_px {
        0..=110 => SizeBin::UpTo110,
        111..=250 => SizeBin::From111To250,
        _ => SizeBin::Above250,
    }
}

/// Longest bounding-box side of the ground-truth mask, rescaled to the
/// 352-pixel reference resolution.
pub fn tumor_length_px(truth: &Mask) -> u32 {
    let side = truth.max_bbox_side() as f64;
    let scale = SIZE_REFERENCE_SIDE / truth.h.max(truth.w) as f64;
    (side * scale).round() as u32
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub fold: usize,
    pub dice: f64,
    pub iou: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub tumor_length_px: u32,
    pub size_bin: SizeBin,
    pub fallback: bool,
    pub dice_pass1: f64,
    pub iou_pass1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold_index: usize,
    pub n_images: usize,
    pub mean: MetricVector,
}

/// Unweighted mean of per-image metrics.
pub fn fold_mean(fold_index: usize, metrics: &[MetricVector]) -> Result<FoldSummary> {
    if metrics.is_empty() {
        return Err(Error::Eval("fold mean of an empty image list".to_string()));
    }
    let n = metrics.len() as f64;
    let mut mean = MetricVector::default();
    for m in metrics {
        mean.dice += m.dice;
        mean.iou += m.iou;
        mean.fpr += m.fpr;
        mean.fnr += m.fnr;
    }
    mean.dice /= n;
    mean.iou /= n;
    mean.fpr /= n;
    mean.fnr /= n;
    Ok(FoldSummary { fold_index, n_images: metrics.len(), mean })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossFold {
    pub mean: MetricVector,
    pub sd: MetricVector,
    /// sample standard deviation (n-1 denominator)
    pub sd_kind: String,
    pub n_folds: usize,
}

pub fn cross_fold(summaries: &[FoldSummary]) -> Result<CrossFold> {
    if summaries.is_empty() {
        return Err(Error::Eval("cross-fold of zero folds".to_string()));
    }
    let n = summaries.len() as f64;
    let mut mean = MetricVector::default();
    for s in summaries {
        mean.dice += s.mean.dice;
        mean.iou += s.mean.iou;
        mean.fpr += s.mean.fpr;
        mean.fnr += s.mean.fnr;
    }
    mean.dice /= n;
    mean.iou /= n;
    mean.fpr /= n;
    mean.fnr /= n;
    let mut sd = MetricVector::default();
    if summaries.len() > 1 {
        for s in summaries {
            sd.dice += (s.mean.dice - mean.dice).powi(2);
            sd.iou += (s.mean.iou - mean.iou).powi(2);
            sd.fpr += (s.mean.fpr - mean.fpr).powi(2);
            sd.fnr += (s.mean.fnr - mean.fnr).powi(2);
        }
        let denom = n - 1.0;
        sd.dice = (sd.dice / denom).sqrt();
        sd.iou = (sd.iou / denom).sqrt();
        sd.fpr = (sd.fpr / denom).sqrt();
        sd.fnr = (sd.fnr / denom).sqrt();
    }
    Ok(CrossFold { mean, sd, sd_kind: "sample".to_string(), n_folds: summaries.len() })
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub w_plus: f64,
    pub w_minus: f64,
    /// min(W+, W-)
    pub statistic: f64,
    pub p_two_sided: f64,
    pub rank_biserial: f64,
    /// pairs remaining after zero differences are dropped
    pub n_effective: usize,
    pub method: String,
}

const EXACT_LIMIT: usize = 20;

/// Paired two-sided Wilcoxon signed-rank test with midranks for ties and
/// zero differences dropped. Exact tail enumeration up to n = 20, normal
/// approximation with continuity correction beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<PairedTestResult> {
    if a.len() != b.len() {
        return Err(Error::Eval(format!("paired lengths differ: {} vs {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Err(Error::Eval("wilcoxon undefined: all differences are zero".to_string()));
    }

    // midranks of |d|
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).expect("finite diffs"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // average of 1-based ranks i+1..=j+1
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }

    // the + 0.0 turns an empty sum's -0.0 into +0.0
    let w_plus: f64 =
        diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum::<f64>() + 0.0;
    let w_minus: f64 =
        diffs.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum::<f64>() + 0.0;
    let statistic = w_plus.min(w_minus);
    let rank_biserial = (w_plus - w_minus) / (w_plus + w_minus);

    let (p, method) = if n <= EXACT_LIMIT {
        (exact_two_sided_p(&ranks, statistic), "exact".to_string())
    } else {
        let total: f64 = ranks.iter().sum();
        let var: f64 = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
        let mean = total / 2.0;
        let z = (statistic + 0.5 - mean) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * normal.cdf(z)).clamp(f64::MIN_POSITIVE, 1.0), "normal-approx".to_string())
    };

    Ok(PairedTestResult {
        w_plus,
        w_minus,
        statistic,
        p_two_sided: p,
        rank_biserial,
        n_effective: n,
        method,
    })
}

/// P(W <= w) * 2 over the exact null distribution of signed-rank sums,
/// computed by dynamic programming over doubled ranks (midranks are
/// half-integers, so doubling makes every achievable sum an integer).
fn exact_two_sided_p(ranks: &[f64], w_obs: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2 = (2.0 * w_obs).round() as usize;
    let tail: u64 = counts.iter().take(w2.min(total) + 1).sum();
    let p = 2.0 * tail as f64 / 2f64.powi(ranks.len() as i32);
    p.min(1.0)
}

// ---------------------------------------------------------------------------
// Overlay rendering
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlayClass {
    Background,
    TruePositive,
    TruePositiveEdge,
    FalsePositive,
    FalseNegative,
}

/// Pixel classification: FP/FN as stated, true positives with their
/// 4-neighborhood boundary marked as the outline.
pub fn classify_overlay(pred: &Mask, truth: &Mask) -> Result<Vec<OverlayClass>> {
    if pred.h != truth.h || pred.w != truth.w {
        return Err(Error::Eval("overlay mask shapes disagree".to_string()));
    }
    let (h, w) = (pred.h, pred.w);
    let tp = |r: usize, c: usize| pred.get(r, c) == 1 && truth.get(r, c) == 1;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let class = match (pred.get(r, c), truth.get(r, c)) {
                (1, 0) => OverlayClass::FalsePositive,
                (0, 1) => OverlayClass::FalseNegative,
                (1, 1) => {
                    let interior = r > 0
                        && tp(r - 1, c)
                        && r + 1 < h
                        && tp(r + 1, c)
                        && c > 0
                        && tp(r, c - 1)
                        && c + 1 < w
                        && tp(r, c + 1);
                    if interior {
                        OverlayClass::TruePositive
                    } else {
                        OverlayClass::TruePositiveEdge
                    }
                }
                _ => OverlayClass::Background,
            };
            out.push(class);
        }
    }
    Ok(out)
}

/// False positives blue, false negatives red, true-positive outline green,
/// alpha-blended over the grayscale image.
pub fn render_overlay(image: &Tensor64, pred: &Mask, truth: &Mask) -> Result<image::RgbImage> {
    let shape = image.shape();
    if shape.len() != 3 || shape[1] != pred.h || shape[2] != pred.w {
        return Err(Error::Eval(format!(
            "overlay image {:?} does not match masks {}x{}",
            shape, pred.h, pred.w
        )));
    }
    let classes = classify_overlay(pred, truth)?;
    let (h, w) = (pred.h, pred.w);
    const ALPHA: f64 = 0.55;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let gray = (image.data()[r * w + c].clamp(0.0, 1.0) * 255.0).round();
            let color = match classes[r * w + c] {
                OverlayClass::FalsePositive => Some([70.0, 110.0, 255.0]),
                OverlayClass::FalseNegative => Some([255.0, 70.0, 70.0]),
                OverlayClass::TruePositiveEdge => Some([90.0, 255.0, 120.0]),
                _ => None,
            };
            let px = match color {
                Some(rgb) => [
                    ((1.0 - ALPHA) * gray + ALPHA * rgb[0]).round() as u8,
                    ((1.0 - ALPHA) * gray + ALPHA * rgb[1]).round() as u8,
                    ((1.0 - ALPHA) * gray + ALPHA * rgb[2]).round() as u8,
                ],
                None => [gray as u8; 3],
            };
            img.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub images: Vec<ImageRecord>,
    pub means: MetricVector,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SizeBinRow {
    pub bin: String,
    pub n: usize,
    /// absent when the bin is empty
    pub dice: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairedTestReport {
    pub comparison: String,
    pub metric: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<PairedTestResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub tau_seg: f64,
    pub tau_proposal: f64,
    pub config: BTreeMap<String, String>,
    pub folds: Vec<FoldReport>,
    pub cross_fold: CrossFold,
    pub size_bins: Vec<SizeBinRow>,
    pub paired_tests: Vec<PairedTestReport>,
}

/// Assemble the full report from per-image records.
pub fn build_report(
    records: Vec<ImageRecord>,
    config: BTreeMap<String, String>,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Eval("no evaluation records".to_string()));
    }
    let mut by_fold: BTreeMap<usize, Vec<ImageRecord>> = BTreeMap::new();
    for r in records {
        by_fold.entry(r.fold).or_default().push(r);
    }
    let mut folds = Vec::new();
    let mut summaries = Vec::new();
    for (fold, images) in by_fold {
        let vectors: Vec<MetricVector> = images
            .iter()
            .map(|r| MetricVector { dice: r.dice, iou: r.iou, fpr: r.fpr, fnr: r.fnr })
            .collect();
        let summary = fold_mean(fold, &vectors)?;
        summaries.push(summary.clone());
        folds.push(FoldReport { fold, images, means: summary.mean });
    }
    let cross = cross_fold(&summaries)?;

    let mut size_rows = Vec::new();
    for bin in SizeBin::all() {
        let members: Vec<&ImageRecord> =
            folds.iter().flat_map(|f| f.images.iter()).filter(|r| r.size_bin == bin).collect();
        let n = members.len();
        let (dice, iou) = if n == 0 {
            (None, None)
        } else {
            (
                Some(members.iter().map(|r| r.dice).sum::<f64>() / n as f64),
                Some(members.iter().map(|r| r.iou).sum::<f64>() / n as f64),
            )
        };
        size_rows.push(SizeBinRow { bin: bin.label().to_string(), n, dice, iou });
    }

    let all: Vec<&ImageRecord> = folds.iter().flat_map(|f| f.images.iter()).collect();
    let mut paired_tests = Vec::new();
    for (metric, final_vals, pass1_vals) in [
        (
            "dice",
            all.iter().map(|r| r.dice).collect::<Vec<_>>(),
            all.iter().map(|r| r.dice_pass1).collect::<Vec<_>>(),
        ),
        (
            "iou",
            all.iter().map(|r| r.iou).collect::<Vec<_>>(),
            all.iter().map(|r| r.iou_pass1).collect::<Vec<_>>(),
        ),
    ] {
        let entry = match wilcoxon_signed_rank(&final_vals, &pass1_vals) {
            Ok(result) => PairedTestReport {
                comparison: "final_vs_pass1".to_string(),
                metric: metric.to_string(),
                status: "ok".to_string(),
                result: Some(result),
                note: None,
            },
            Err(e) => PairedTestReport {
                comparison: "final_vs_pass1".to_string(),
                metric: metric.to_string(),
                status: "degenerate".to_string(),
                result: None,
                note: Some(e.to_string()),
            },
        };
        paired_tests.push(entry);
    }

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tau_seg: crate::model::TAU_SEG,
        tau_proposal: crate::model::TAU_PROPOSAL,
        config,
        folds,
        cross_fold: cross,
        size_bins: size_rows,
        paired_tests,
    })
}

/// Write report.json and report.csv; NaNs are serialized as nulls by
/// emitting JSON through serde_json's default f64 handling, so size bins
/// with no members keep an explicit null.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(dir.join("report.json"), json)?;

    let mut wtr =
        csv::Writer::from_path(dir.join("report.csv")).map_err(|e| Error::data(e.to_string()))?;
    wtr.write_record([
        "fold",
        "image_id",
        "dice",
        "iou",
        "fpr",
        "fnr",
        "tumor_length_px",
        "size_bin",
        "fallback",
    ])
    .map_err(|e| Error::data(e.to_string()))?;
    for f in &report.folds {
        for r in &f.images {
            wtr.write_record([
                r.fold.to_string(),
                r.image_id.clone(),
                format!("{:.17e}", r.dice),
                format!("{:.17e}", r.iou),
                format!("{:.17e}", r.fpr),
                format!("{:.17e}", r.fnr),
                r.tumor_length_px.to_string(),
                r.size_bin.label().to_string(),
                r.fallback.to_string(),
            ])
            .map_err(|e| Error::data(e.to_string()))?;
        }
    }
    wtr.flush()?;
    Ok(())
}
