//! Synthetic phantom generation, dataset layout I/O, resizing, and fold
//! construction. The synthetic emitter writes the same directory layout the
//! loader reads (images/, masks/, metadata.csv), so downstream code never
//! distinguishes phantom data from scanner data.

use std::path::Path;

use promptseg_tensor::{bilinear_resize_raw, Tensor64};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::prompt::{
    parse_metadata_csv, Birads, LesionMetadata, LesionShape, Margin, CSV_HEADER,
};

#[derive(Clone, Debug)]
pub struct Sample {
    /// [3,H,W] in [0,1], grayscale replicated across channels
    pub image: Tensor64,
    pub mask: Mask,
    pub metadata: LesionMetadata,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub count: usize,
    pub seed: u64,
    /// image side in pixels
    pub side: usize,
    /// lesion diameter range in pixels
    pub size_range: (f64, f64),
    /// sinusoidal boundary perturbation amplitude range (relative)
    pub perturb_amp_range: (f64, f64),
    /// lesion darkening multiplier range (lower = darker lesion)
    pub contrast_range: (f64, f64),
    /// blend weight of multiplicative speckle
    pub speckle_strength: f64,
}

impl SyntheticConfig {
    pub fn desk(count: usize, seed: u64) -> Self {
        SyntheticConfig {
            count,
            seed,
            side: 64,
            size_range: (14.0, 36.0),
            perturb_amp_range: (0.0, 0.22),
            contrast_range: (0.3, 0.6),
            speckle_strength: 0.35,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.side >= 32
            && self.size_range.0 > 2.0
            && self.size_range.0 <= self.size_range.1
            && self.perturb_amp_range.0 >= 0.0
            && self.perturb_amp_range.0 <= self.perturb_amp_range.1
            && self.perturb_amp_range.1 < 0.5
            && self.contrast_range.0 > 0.0
            && self.contrast_range.0 <= self.contrast_range.1
            && self.contrast_range.1 < 1.0
            && (0.0..1.0).contains(&self.speckle_strength);
        if !ok {
            return Err(Error::config(format!("invalid synthetic config: {self:?}")));
        }
        let max_extent = self.size_range.1 * (1.0 + self.perturb_amp_range.1);
        if max_extent >= self.side as f64 {
            return Err(Error::config(format!(
                "lesion diameter up to {max_extent:.1}px does not fit a {}px image",
                self.side
            )));
        }
        Ok(())
    }
}

/// Fully-determined lesion geometry and texture for one phantom.
#[derive(Clone, Debug)]
pub struct PhantomSpec {
    /// (cx, cy): column/row of the ellipse center
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
    pub perturb_amp: f64,
    pub perturb_freq: u32,
    pub perturb_phase: f64,
    pub background: f64,
    pub contrast: f64,
    pub speckle_strength: f64,
    pub noise_seed: u64,
}

const IRREGULAR_AMP_THRESHOLD: f64 = 0.05;
const ROUND_AXIS_RATIO: f64 = 0.85;

impl PhantomSpec {
    /// shape attribute implied by the geometry
    pub fn shape(&self) -> LesionShape {
        if self.perturb_amp > IRREGULAR_AMP_THRESHOLD {
            LesionShape::Irregular
        } else {
            let (a, b) = self.semi_axes;
            if a.min(b) / a.max(b) >= ROUND_AXIS_RATIO {
                LesionShape::Round
            } else {
                LesionShape::Oval
            }
        }
    }

    /// margin attribute: circumscribed when smooth, else by frequency band
    pub fn margin(&self) -> Margin {
        if self.perturb_amp <= IRREGULAR_AMP_THRESHOLD {
            Margin::Circumscribed
        } else {
            match self.perturb_freq {
                0..=5 => Margin::Indistinct,
                6..=8 => Margin::Angular,
                9..=12 => Margin::Microlobulated,
                _ => Margin::Spiculated,
            }
        }
    }

    /// fixed surrogate lookup from (shape, margin); not a clinical claim
    pub fn birads(&self) -> Birads {
        match (self.shape(), self.margin()) {
            (LesionShape::Round, Margin::Circumscribed) => Birads::B2,
            (LesionShape::Oval, Margin::Circumscribed) => Birads::B3,
            (_, Margin::Spiculated) => Birads::B5,
            _ => Birads::B4,
        }
    }
}

fn sample_spec(cfg: &SyntheticConfig, index: usize, rng: &mut ChaCha8Rng) -> PhantomSpec {
    let side = cfg.side as f64;
    let diameter = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
    let a = diameter / 2.0;
    let b = a * rng.random_range(0.55..=1.0);
    let margin_px = a * (1.0 + cfg.perturb_amp_range.1) + 2.0;
    let center = (
        rng.random_range(margin_px..side - margin_px),
        rng.random_range(margin_px..side - margin_px),
    );
    // half the phantoms stay smooth so every shape class appears
    let amp = if rng.random_range(0.0..1.0) < 0.5 {
        rng.random_range(cfg.perturb_amp_range.0..=IRREGULAR_AMP_THRESHOLD.min(cfg.perturb_amp_range.1))
    } else {
        rng.random_range(IRREGULAR_AMP_THRESHOLD..=cfg.perturb_amp_range.1.max(IRREGULAR_AMP_THRESHOLD))
    };
    PhantomSpec {
        center,
        semi_axes: (a, b),
        angle: rng.random_range(0.0..std::f64::consts::PI),
        perturb_amp: amp,
        perturb_freq: rng.random_range(3..=16),
        perturb_phase: rng.random_range(0.0..std::f64::consts::TAU),
        background: rng.random_range(0.45..0.65),
        contrast: rng.random_range(cfg.contrast_range.0..=cfg.contrast_range.1),
        speckle_strength: cfg.speckle_strength,
        noise_seed: cfg.seed ^ (index as u64).wrapping_mul(0xA24B_AED4_963E_E407),
    }
}

/// Rasterize the lesion support: a rotated ellipse whose boundary radius is
/// modulated by a sinusoid in polar angle.
fn rasterize_lesion(spec: &PhantomSpec, side: usize) -> Mask {
    let (cx, cy) = spec.center;
    let (a, b) = spec.semi_axes;
    let (sin_t, cos_t) = spec.angle.sin_cos();
    Mask::from_fn(side, side, |r, c| {
        let dx = c as f64 - cx;
        let dy = r as f64 - cy;
        // rotate into the ellipse frame
        let u = dx * cos_t + dy * sin_t;
        let v = -dx * sin_t + dy * cos_t;
        let dist = (u * u + v * v).sqrt();
        if dist == 0.0 {
            return true;
        }
        let theta = v.atan2(u);
        let denom = (b * theta.cos()).powi(2) + (a * theta.sin()).powi(2);
        let base_radius = a * b / denom.sqrt();
        let boundary = base_radius
            * (1.0 + spec.perturb_amp * (spec.perturb_freq as f64 * theta + spec.perturb_phase).sin());
        dist <= boundary
    })
}

/// Unit-mean multiplicative speckle: mean of four unit exponentials.
fn speckle(rng: &mut ChaCha8Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..4 {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        acc += -u.ln();
    }
    acc / 4.0
}

/// Render a fully-specified phantom into a sample.
pub fn render_phantom(spec: &PhantomSpec, side: usize, image_id: &str) -> Result<Sample> {
    let mask = rasterize_lesion(spec, side);
    if mask.is_empty() {
        return Err(Error::config(format!("phantom '{image_id}' rasterized to an empty mask")));
    }
    if let Some((r0, c0, r1, c1)) = mask.bbox() {
        if r0 == 0 || c0 == 0 || r1 == side - 1 || c1 == side - 1 {
            return Err(Error::config(format!("phantom '{image_id}' lesion touches the border")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let s = spec.speckle_strength;
    let mut gray = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let base = if mask.get(r, c) == 1 {
                spec.background * spec.contrast
            } else {
                spec.background
            };
            let v = base * ((1.0 - s) + s * speckle(&mut rng));
            gray.push(v.clamp(0.0, 1.0));
        }
    }
    let mut data = Vec::with_capacity(3 * side * side);
    for _ in 0..3 {
        data.extend_from_slice(&gray);
    }
    let image = Tensor64::new(vec![3, side, side], data)?;
    let metadata = LesionMetadata {
        image_id: image_id.to_string(),
        image_path: format!("images/{image_id}.png"),
        mask_path: Some(format!("masks/{image_id}.png")),
        size_value: mask.max_bbox_side() as f64,
        shape: spec.shape(),
        margin: spec.margin(),
        birads: spec.birads(),
    };
    Ok(Sample { image, mask, metadata })
}

/// Deterministic phantom stream: the sample is a pure function of
/// (config, index).
pub fn generate_phantom(cfg: &SyntheticConfig, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x51),
    );
    let spec = sample_spec(cfg, index, &mut rng);
    render_phantom(&spec, cfg.side, &format!("phantom_{index:04}"))
}

pub fn synthesize_dataset(cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    (0..cfg.count).map(|i| generate_phantom(cfg, i)).collect()
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let img = image::GrayImage::from_fn(mask.w as u32, mask.h as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) == 1 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))
}

/// 8-bit single-channel PNG; foreground iff value >= 128.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let dynimg = image::ImageReader::open(path)
        .map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))?
        .decode()
        .map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))?;
    let img = match dynimg {
        image::DynamicImage::ImageLuma8(img) => img,
        other => {
            return Err(Error::ImageFormat(format!(
                "{}: mask must be 8-bit single-channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect();
    Mask::new(h, w, data)
}

pub fn write_image_png(path: &Path, image: &Tensor64) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::usage(format!("image tensor must be [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = image.data()[y as usize * w + x as usize];
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))
}

/// Grayscale or RGB 8-bit PNG as a [3,H,W] tensor in [0,1].
pub fn read_image_png(path: &Path) -> Result<Tensor64> {
    let dynimg = image::ImageReader::open(path)
        .map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))?
        .decode()
        .map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))?;
    let (data, h, w) = match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let gray: Vec<f64> = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            let mut data = Vec::with_capacity(3 * gray.len());
            for _ in 0..3 {
                data.extend_from_slice(&gray);
            }
            (data, h, w)
        }
        image::DynamicImage::ImageRgb8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let raw = img.into_raw();
            let mut data = vec![0.0; 3 * h * w];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    data[ch * h * w + i] = px[ch] as f64 / 255.0;
                }
            }
            (data, h, w)
        }
        other => {
            return Err(Error::ImageFormat(format!(
                "{}: unsupported color type {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(Tensor64::new(vec![3, h, w], data)?)
}

// ---------------------------------------------------------------------------
// Dataset layout
// ---------------------------------------------------------------------------

/// Emit images/, masks/, metadata.csv under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut wtr = csv::Writer::from_path(dir.join("metadata.csv"))
        .map_err(|e| Error::data(e.to_string()))?;
    wtr.write_record(CSV_HEADER).map_err(|e| Error::data(e.to_string()))?;
    for s in samples {
        let m = &s.metadata;
        write_image_png(&dir.join(&m.image_path), &s.image)?;
        let mask_rel = m.mask_path.as_deref().unwrap_or_default();
        write_mask_png(&dir.join(mask_rel), &s.mask)?;
        wtr.write_record([
            m.image_id.as_str(),
            m.image_path.as_str(),
            mask_rel,
            &format!("{}", m.size_value),
            m.shape.as_str(),
            m.margin.as_str(),
            m.birads.as_str(),
        ])
        .map_err(|e| Error::data(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

/// Load the standard on-disk layout, validating image/mask pairing. Items
/// with problems land in `errors`; callers abort when training.
pub fn load_dataset(root: &Path, csv_path: &Path, resize_to: Option<usize>) -> Result<LoadReport> {
    let parsed = parse_metadata_csv(csv_path)?;
    let mut report = LoadReport { warnings: parsed.warnings, ..Default::default() };
    for meta in parsed.records {
        let image_path = root.join(&meta.image_path);
        let image = match read_image_png(&image_path) {
            Ok(i) => i,
            Err(e) => {
                report.errors.push(format!("{}: {e}", meta.image_id));
                continue;
            }
        };
        let Some(mask_rel) = &meta.mask_path else {
            report.errors.push(format!("{}: no mask path", meta.image_id));
            continue;
        };
        let mask = match read_mask_png(&root.join(mask_rel)) {
            Ok(m) => m,
            Err(e) => {
                report.errors.push(format!("{}: {e}", meta.image_id));
                continue;
            }
        };
        if mask.h != image.shape()[1] || mask.w != image.shape()[2] {
            report.errors.push(format!(
                "{}: mask {}x{} does not match image {}x{}",
                meta.image_id,
                mask.h,
                mask.w,
                image.shape()[1],
                image.shape()[2]
            ));
            continue;
        }
        if mask.is_empty() {
            report.errors.push(format!("{}: empty mask", meta.image_id));
            continue;
        }
        let mut sample = Sample { image, mask, metadata: meta };
        if let Some(side) = resize_to {
            sample = resize_sample(&sample, side);
        }
        report.samples.push(sample);
    }
    Ok(report)
}

/// Image bilinear, mask nearest-neighbor (stays binary).
pub fn resize_sample(s: &Sample, side: usize) -> Sample {
    let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
    if h == side && w == side {
        return s.clone();
    }
    let image = Tensor64::new(
        vec![3, side, side],
        bilinear_resize_raw(s.image.data(), 3, h, w, side, side),
    )
    .expect("resize preserves element count");
    let mask = resize_mask_nearest(&s.mask, side, side);
    Sample { image, mask, metadata: s.metadata.clone() }
}

pub fn resize_mask_nearest(mask: &Mask, oh: usize, ow: usize) -> Mask {
    let sy = mask.h as f64 / oh as f64;
    let sx = mask.w as f64 / ow as f64;
    Mask::from_fn(oh, ow, |r, c| {
        let src_r = (((r as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(mask.h - 1);
        let src_c = (((c as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(mask.w - 1);
        mask.get(src_r, src_c) == 1
    })
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

/// Seeded shuffle, then contiguous validation blocks; the first n % k blocks
/// take the extra sample.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k == 0 || ids.len() < k {
        return Err(Error::config(format!("cannot split {} ids into {k} folds", ids.len())));
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf01d);
    // Fisher-Yates
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let n = shuffled.len();
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0usize;
    for fold_index in 0..k {
        let len = base + usize::from(fold_index < extra);
        let val_ids: Vec<String> = shuffled[start..start + len].to_vec();
        let train_ids: Vec<String> = shuffled[..start]
            .iter()
            .chain(shuffled[start + len..].iter())
            .cloned()
            .collect();
        folds.push(FoldSplit { fold_index, train_ids, val_ids });
        start += len;
    }
    Ok(folds)
}
