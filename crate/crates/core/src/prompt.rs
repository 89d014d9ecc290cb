//! Prompt construction: structured metadata and mask geometry are verbalized
//! into the global context prompt and the local attribute prompt, tokenized
//! over a closed vocabulary, and embedded with a frozen text encoder.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use promptseg_tensor::{init, Graph64, Parameter64, Tensor64};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{LayerNorm, Module, TransformerBlock};

// ---------------------------------------------------------------------------
// Closed attribute vocabularies
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LesionShape {
    Oval,
    Round,
    Irregular,
}

impl LesionShape {
    pub fn as_str(self) -> &'static str {
        match self {
            LesionShape::Oval => "oval",
            LesionShape::Round => "round",
            LesionShape::Irregular => "irregular",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "oval" => Some(LesionShape::Oval),
            "round" => Some(LesionShape::Round),
            "irregular" => Some(LesionShape::Irregular),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Margin {
    Circumscribed,
    Indistinct,
    Angular,
    Microlobulated,
    Spiculated,
}

impl Margin {
    pub fn as_str(self) -> &'static str {
        match self {
            Margin::Circumscribed => "circumscribed",
            Margin::Indistinct => "indistinct",
            Margin::Angular => "angular",
            Margin::Microlobulated => "microlobulated",
            Margin::Spiculated => "spiculated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "circumscribed" => Some(Margin::Circumscribed),
            "indistinct" => Some(Margin::Indistinct),
            "angular" => Some(Margin::Angular),
            "microlobulated" => Some(Margin::Microlobulated),
            "spiculated" => Some(Margin::Spiculated),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Birads {
    B2,
    B3,
    B4,
    B4a,
    B4b,
    B4c,
    B5,
}

impl Birads {
    pub fn as_str(self) -> &'static str {
        match self {
            Birads::B2 => "2",
            Birads::B3 => "3",
            Birads::B4 => "4",
            Birads::B4a => "4a",
            Birads::B4b => "4b",
            Birads::B4c => "4c",
            Birads::B5 => "5",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "2" => Some(Birads::B2),
            "3" => Some(Birads::B3),
            "4" => Some(Birads::B4),
            "4a" => Some(Birads::B4a),
            "4b" => Some(Birads::B4b),
            "4c" => Some(Birads::B4c),
            "5" => Some(Birads::B5),
            _ => None,
        }
    }

    pub fn all() -> [Birads; 7] {
        [Birads::B2, Birads::B3, Birads::B4, Birads::B4a, Birads::B4b, Birads::B4c, Birads::B5]
    }
}

/// One parsed metadata row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LesionMetadata {
    pub image_id: String,
    pub image_path: String,
    pub mask_path: Option<String>,
    pub size_value: f64,
    pub shape: LesionShape,
    pub margin: Margin,
    pub birads: Birads,
}

/// Metadata with every mask/path field stripped: the only form the two-pass
/// predictor accepts, so mask leakage at inference is ruled out by type.
#[derive(Clone, Debug)]
pub struct InferenceMetadata {
    pub image_id: String,
    pub size_value: f64,
    pub shape: LesionShape,
    pub margin: Margin,
    pub birads: Birads,
}

impl LesionMetadata {
    pub fn for_inference(&self) -> InferenceMetadata {
        InferenceMetadata {
            image_id: self.image_id.clone(),
            size_value: self.size_value,
            shape: self.shape,
            margin: self.margin,
            birads: self.birads,
        }
    }
}

// ---------------------------------------------------------------------------
// Metadata CSV
// ---------------------------------------------------------------------------

pub const CSV_HEADER: [&str; 7] =
    ["image_id", "image_path", "mask_path", "size", "shape", "margin", "birads"];

/// Result of parsing a metadata CSV. Images that appear in more than one row
/// describe multiple lesions and are excluded with a warning.
#[derive(Debug, Default)]
pub struct MetadataParse {
    pub records: Vec<LesionMetadata>,
    pub warnings: Vec<String>,
}

pub fn parse_metadata_csv(path: &Path) -> Result<MetadataParse> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    parse_metadata_text(&text, &path.display().to_string())
}

/// One headerless CSV row in the standard column order.
pub fn parse_metadata_row(row: &str) -> Result<LesionMetadata> {
    let text = format!("{}\n{}\n", CSV_HEADER.join(","), row.trim());
    let parsed = parse_metadata_text(&text, "meta-row")?;
    match <[LesionMetadata; 1]>::try_from(parsed.records) {
        Ok([record]) => Ok(record),
        Err(_) => Err(Error::parse("meta-row", "expected exactly one metadata row")),
    }
}

fn parse_metadata_text(text: &str, origin: &str) -> Result<MetadataParse> {
    let path: &Path = Path::new(origin);
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    {
        let got = reader
            .headers()
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        let want: Vec<&str> = CSV_HEADER.to_vec();
        let got_cols: Vec<&str> = got.iter().collect();
        if got_cols != want {
            return Err(Error::parse(
                path.display().to_string(),
                format!("header must be {}, got {}", want.join(","), got_cols.join(",")),
            ));
        }
    }

    let mut rows: Vec<LesionMetadata> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rowno = i + 2; // header is line 1
        let rec = rec.map_err(|e| Error::parse(format!("{}:{rowno}", path.display()), e.to_string()))?;
        let field = |idx: usize, col: &str| -> Result<String> {
            rec.get(idx).map(str::to_string).ok_or_else(|| {
                Error::parse(format!("{}:{rowno}", path.display()), format!("missing column {col}"))
            })
        };
        let loc = |col: &str| format!("{}:{rowno} column {col}", path.display());
        let size_raw = field(3, "size")?;
        let size_value: f64 = size_raw
            .parse()
            .map_err(|_| Error::parse(loc("size"), format!("not a number: '{size_raw}'")))?;
        if !(size_value > 0.0) {
            return Err(Error::parse(loc("size"), format!("size must be positive, got {size_value}")));
        }
        let shape_raw = field(4, "shape")?;
        let shape = LesionShape::parse(&shape_raw)
            .ok_or_else(|| Error::parse(loc("shape"), format!("unknown shape '{shape_raw}'")))?;
        let margin_raw = field(5, "margin")?;
        let margin = Margin::parse(&margin_raw)
            .ok_or_else(|| Error::parse(loc("margin"), format!("unknown margin '{margin_raw}'")))?;
        let birads_raw = field(6, "birads")?;
        let birads = Birads::parse(&birads_raw)
            .ok_or_else(|| Error::parse(loc("birads"), format!("unknown BI-RADS '{birads_raw}'")))?;
        let mask_path = field(2, "mask_path")?;
        rows.push(LesionMetadata {
            image_id: field(0, "image_id")?,
            image_path: field(1, "image_path")?,
            mask_path: (!mask_path.is_empty()).then_some(mask_path),
            size_value,
            shape,
            margin,
            birads,
        });
    }

    let mut out = MetadataParse::default();
    if rows.is_empty() {
        out.warnings.push(format!("{}: no metadata rows", path.display()));
        return Ok(out);
    }

    // images listed more than once carry multiple lesions: exclude them
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &rows {
        *counts.entry(r.image_id.as_str()).or_default() += 1;
    }
    let multi: Vec<String> = counts
        .iter()
        .filter(|(_, &c)| c > 1)
        .map(|(id, _)| id.to_string())
        .collect();
    for id in &multi {
        out.warnings.push(format!("excluded multi-lesion image '{id}'"));
    }
    out.records = rows.into_iter().filter(|r| !multi.contains(&r.image_id)).collect();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Size bins
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBins {
    pub t1: f64,
    pub t2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeCategory {
    Small,
    Medium,
    Large,
}

impl SizeCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeCategory::Small => "small",
            SizeCategory::Medium => "medium",
            SizeCategory::Large => "large",
        }
    }

    pub fn all() -> [SizeCategory; 3] {
        [SizeCategory::Small, SizeCategory::Medium, SizeCategory::Large]
    }
}

/// Linear-interpolation quantile between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Tertile boundaries fitted on training-split sizes only.
pub fn fit_size_bins(training_sizes: &[f64]) -> Result<SizeBins> {
    if training_sizes.len() < 3 {
        return Err(Error::config(format!(
            "size bins need at least 3 training sizes, got {}",
            training_sizes.len()
        )));
    }
    let mut sorted = training_sizes.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("sizes are finite"));
    Ok(SizeBins { t1: quantile(&sorted, 1.0 / 3.0), t2: quantile(&sorted, 2.0 / 3.0) })
}

/// Boundary is inclusive on the left: size <= t1 is small, <= t2 medium.
pub fn discretize_size(size_value: f64, bins: &SizeBins) -> SizeCategory {
    if size_value <= bins.t1 {
        SizeCategory::Small
    } else if size_value <= bins.t2 {
        SizeCategory::Medium
    } else {
        SizeCategory::Large
    }
}

// ---------------------------------------------------------------------------
// Centroid and quadrant
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    /// column coordinate, pixels
    pub cx: f64,
    /// row coordinate, pixels
    pub cy: f64,
}

/// First image moments of the foreground: (M10/M00, M01/M00).
pub fn centroid_from_mask(mask: &Mask) -> Result<Centroid> {
    let mut m00 = 0.0f64;
    let mut m10 = 0.0f64;
    let mut m01 = 0.0f64;
    for r in 0..mask.h {
        for c in 0..mask.w {
            if mask.get(r, c) == 1 {
                m00 += 1.0;
                m10 += c as f64;
                m01 += r as f64;
            }
        }
    }
    if m00 == 0.0 {
        return Err(Error::data("centroid of an empty mask"));
    }
    Ok(Centroid { cx: m10 / m00, cy: m01 / m00 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrant {
    UpperInner,
    UpperOuter,
    LowerInner,
    LowerOuter,
}

impl Quadrant {
    pub fn as_str(self) -> &'static str {
        match self {
            Quadrant::UpperInner => "upper inner",
            Quadrant::UpperOuter => "upper outer",
            Quadrant::LowerInner => "lower inner",
            Quadrant::LowerOuter => "lower outer",
        }
    }

    pub fn all() -> [Quadrant; 4] {
        [Quadrant::UpperInner, Quadrant::UpperOuter, Quadrant::LowerInner, Quadrant::LowerOuter]
    }
}

/// Laterality convention: image-left counts as "inner". Upper means strictly
/// above the horizontal midline; exactly on the midline is "lower".
pub fn quadrant_of(c: Centroid, h: usize, w: usize) -> Quadrant {
    let upper = c.cy < h as f64 / 2.0;
    let inner = c.cx < w as f64 / 2.0;
    match (upper, inner) {
        (true, true) => Quadrant::UpperInner,
        (true, false) => Quadrant::UpperOuter,
        (false, true) => Quadrant::LowerInner,
        (false, false) => Quadrant::LowerOuter,
    }
}

// ---------------------------------------------------------------------------
// Verbalization templates
// ---------------------------------------------------------------------------

/// Global feature context prompt. Without a quadrant (first inference pass)
/// the location clause degrades to "an unknown location".
pub fn verbalize_global(size: SizeCategory, quadrant: Option<Quadrant>) -> String {
    match quadrant {
        Some(q) => {
            format!("a {} lesion in the {} quadrant of the breast", size.as_str(), q.as_str())
        }
        None => format!("a {} lesion at an unknown location in the breast", size.as_str()),
    }
}

/// Local attribute prompt: shape, margin, BI-RADS grade.
pub fn verbalize_local_parts(shape: LesionShape, margin: Margin, birads: Birads) -> String {
    format!("{} shape, {} margin, BI-RADS {}", shape.as_str(), margin.as_str(), birads.as_str())
}

pub fn verbalize_local(m: &LesionMetadata) -> String {
    verbalize_local_parts(m.shape, m.margin, m.birads)
}

/// Every string the two templates can produce.
pub fn template_language() -> Vec<String> {
    let mut out = Vec::new();
    for size in SizeCategory::all() {
        out.push(verbalize_global(size, None));
        for q in Quadrant::all() {
            out.push(verbalize_global(size, Some(q)));
        }
    }
    for shape in [LesionShape::Oval, LesionShape::Round, LesionShape::Irregular] {
        for margin in [
            Margin::Circumscribed,
            Margin::Indistinct,
            Margin::Angular,
            Margin::Microlobulated,
            Margin::Spiculated,
        ] {
            for birads in Birads::all() {
                out.push(verbalize_local_parts(shape, margin, birads));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

pub const PAD_ID: usize = 0;
pub const SUMMARY_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const MAX_TOKENS: usize = 16;

const VOCAB_WORDS: &[&str] = &[
    "<pad>", "<s>", "<unk>", // reserved
    "a", "an", "at", "angular", "bi", "breast", "circumscribed", "in", "indistinct", "inner",
    "irregular", "large", "lesion", "location", "lower", "margin", "medium", "microlobulated",
    "of", "outer", "oval", "quadrant", "rads", "round", "shape", "small", "spiculated", "the",
    "unknown", "upper", "2", "3", "4", "4a", "4b", "4c", "5",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: BTreeMap<&'static str, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let words: Vec<&'static str> = VOCAB_WORDS.to_vec();
        let index = words.iter().enumerate().map(|(i, &w)| (w, i)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lowercase, split on whitespace and punctuation, map over the table.
    /// A summary token is prepended; the sequence is right-padded/truncated
    /// to [`MAX_TOKENS`]. Out-of-vocabulary words map to `<unk>` and are
    /// returned as warnings.
    pub fn tokenize(&self, text: &str) -> (TokenSequence, Vec<String>) {
        let lower = text.to_ascii_lowercase();
        let mut ids = vec![SUMMARY_ID];
        let mut warnings = Vec::new();
        for word in lower.split(|ch: char| ch.is_whitespace() || ch == ',' || ch == '-' || ch == '.')
        {
            if word.is_empty() {
                continue;
            }
            match self.index.get(word) {
                Some(&id) => ids.push(id),
                None => {
                    warnings.push(format!("out-of-vocabulary word '{word}'"));
                    ids.push(UNK_ID);
                }
            }
        }
        ids.truncate(MAX_TOKENS);
        ids.resize(MAX_TOKENS, PAD_ID);
        (TokenSequence { ids }, warnings)
    }

    /// Plain-text table, one `token<TAB>id` line per entry.
    pub fn write_table(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for (i, w) in self.words.iter().enumerate() {
            writeln!(f, "{w}\t{i}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { dim: 64, layers: 2, heads: 4 }
    }
}

/// Frozen stand-in for a pretrained text tower: token + position embeddings,
/// a short pre-norm transformer stack, final layer norm, summary-token
/// readout at position 0.
pub struct TextEncoder {
    pub cfg: TextConfig,
    pub vocab: Vocab,
    tok_embed: Parameter64,
    pos_embed: Parameter64,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
}

impl TextEncoder {
    pub fn new(cfg: TextConfig, seed: u64) -> Self {
        let vocab = Vocab::new();
        let mut rng = init::derive_rng(seed, 0x7e87);
        let tok_embed = Parameter64::new(
            "text.tok_embed",
            init::uniform(&mut rng, &[vocab.len(), cfg.dim], -0.05, 0.05),
            true,
        );
        let pos_embed = Parameter64::new(
            "text.pos_embed",
            init::uniform(&mut rng, &[MAX_TOKENS, cfg.dim], -0.05, 0.05),
            true,
        );
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(&format!("text.block{i}"), &mut rng, cfg.dim, cfg.heads, true))
            .collect();
        let ln_f = LayerNorm::new("text.ln_f", cfg.dim, true);
        TextEncoder { cfg, vocab, tok_embed, pos_embed, blocks, ln_f }
    }

    /// Embed a token sequence into a [dim] vector. Pure and deterministic.
    pub fn encode_tokens(&self, tokens: &TokenSequence) -> Result<Tensor64> {
        if tokens.ids.len() != MAX_TOKENS {
            return Err(Error::Tensor(promptseg_tensor::Error::shape(
                "encode_text",
                format!("want {MAX_TOKENS} token ids, got {}", tokens.ids.len()),
            )));
        }
        let mut g = Graph64::inference();
        let table = g.param(&self.tok_embed)?;
        let x = g.gather_rows(table, &tokens.ids)?;
        let x = g.reshape(x, vec![1, MAX_TOKENS, self.cfg.dim])?;
        let pos = g.param(&self.pos_embed)?;
        let mut x = g.add_suffix(x, pos)?;
        for b in &self.blocks {
            x = b.forward(&mut g, x)?;
        }
        let x = self.ln_f.forward(&mut g, x)?;
        let summary = g.slice_axis(x, 1, 0, 1)?;
        let out = g.reshape(summary, vec![self.cfg.dim])?;
        Ok(g.value(out).clone())
    }

    pub fn encode_text(&self, text: &str) -> Result<Tensor64> {
        let (tokens, _) = self.vocab.tokenize(text);
        self.encode_tokens(&tokens)
    }
}

impl Module for TextEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        f(&self.tok_embed);
        f(&self.pos_embed);
        for b in &self.blocks {
            b.visit(f);
        }
        self.ln_f.visit(f);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        f(&mut self.tok_embed);
        f(&mut self.pos_embed);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.ln_f.visit_mut(f);
    }
}

/// Precomputed embeddings for the entire closed prompt language.
pub struct EmbeddingTable {
    entries: BTreeMap<String, Tensor64>,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn build(encoder: &TextEncoder) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for text in template_language() {
            let e = encoder.encode_text(&text)?;
            entries.insert(text, e);
        }
        Ok(EmbeddingTable { entries, dim: encoder.cfg.dim })
    }

    pub fn get(&self, text: &str) -> Result<&Tensor64> {
        self.entries.get(text).ok_or_else(|| {
            Error::usage(format!("prompt '{text}' is outside the closed template language"))
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Both prompts of one sample with their embeddings.
#[derive(Clone, Debug)]
pub struct PromptPair {
    pub global_text: String,
    pub local_text: String,
    pub global_embedding: Tensor64,
    pub local_embedding: Tensor64,
}

pub fn build_prompt_pair(
    encoder: &TextEncoder,
    size: SizeCategory,
    quadrant: Option<Quadrant>,
    meta_shape: LesionShape,
    meta_margin: Margin,
    meta_birads: Birads,
) -> Result<PromptPair> {
    let global_text = verbalize_global(size, quadrant);
    let local_text = verbalize_local_parts(meta_shape, meta_margin, meta_birads);
    Ok(PromptPair {
        global_embedding: encoder.encode_text(&global_text)?,
        local_embedding: encoder.encode_text(&local_text)?,
        global_text,
        local_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_match_reference_interpolation() {
        let bins = fit_size_bins(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((bins.t1 - 2.666_666_666_666_666_5).abs() < 1e-12);
        assert!((bins.t2 - 4.333_333_333_333_333).abs() < 1e-12);
    }

    #[test]
    fn degenerate_distribution_collapses_bins() {
        let bins = fit_size_bins(&[5.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(bins.t1, 5.0);
        assert_eq!(bins.t2, 5.0);
    }

    #[test]
    fn three_sorted_values_bracket_the_bins() {
        let (a, b, c) = (1.0, 10.0, 100.0);
        let bins = fit_size_bins(&[a, b, c]).unwrap();
        assert!(a <= bins.t1 && bins.t1 <= b);
        assert!(b <= bins.t2 && bins.t2 <= c);
    }

    #[test]
    fn too_few_sizes_is_config_error() {
        assert!(fit_size_bins(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn size_boundaries_are_inclusive_left() {
        let bins = SizeBins { t1: 10.0, t2: 20.0 };
        assert_eq!(discretize_size(10.0, &bins), SizeCategory::Small);
        assert_eq!(discretize_size(10.0001, &bins), SizeCategory::Medium);
        assert_eq!(discretize_size(20.0, &bins), SizeCategory::Medium);
        assert_eq!(discretize_size(0.5, &bins), SizeCategory::Small);
        assert_eq!(discretize_size(1e9, &bins), SizeCategory::Large);
    }

    #[test]
    fn centroid_of_uniform_square() {
        let m = Mask::from_fn(4, 4, |_, _| true);
        let c = centroid_from_mask(&m).unwrap();
        assert_eq!((c.cx, c.cy), (1.5, 1.5));
    }

    #[test]
    fn centroid_of_single_pixel() {
        let m = Mask::from_fn(5, 5, |r, c| r == 3 && c == 2);
        let c = centroid_from_mask(&m).unwrap();
        assert_eq!((c.cx, c.cy), (2.0, 3.0));
    }

    #[test]
    fn centroid_of_l_shape() {
        // foreground {(0,0),(0,1),(1,0)} as (row,col)
        let m = Mask::new(2, 2, vec![1, 1, 1, 0]).unwrap();
        let c = centroid_from_mask(&m).unwrap();
        assert!((c.cx - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.cy - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_centroid_is_an_error() {
        assert!(centroid_from_mask(&Mask::zeros(3, 3)).is_err());
    }

    #[test]
    fn quadrants_follow_the_stated_convention() {
        let q = |cx, cy| quadrant_of(Centroid { cx, cy }, 352, 352);
        assert_eq!(q(50.0, 100.0), Quadrant::UpperInner);
        assert_eq!(q(300.0, 300.0), Quadrant::LowerOuter);
        // exactly on the midline: lower (strict less-than rule)
        assert_eq!(q(10.0, 176.0), Quadrant::LowerInner);
    }

    #[test]
    fn global_template_renders_exactly() {
        assert_eq!(
            verbalize_global(SizeCategory::Small, Some(Quadrant::UpperOuter)),
            "a small lesion in the upper outer quadrant of the breast"
        );
        assert_eq!(
            verbalize_global(SizeCategory::Large, None),
            "a large lesion at an unknown location in the breast"
        );
        assert_eq!(
            verbalize_global(SizeCategory::Medium, Some(Quadrant::LowerInner)),
            verbalize_global(SizeCategory::Medium, Some(Quadrant::LowerInner)),
        );
    }

    #[test]
    fn local_template_renders_exactly() {
        assert_eq!(
            verbalize_local_parts(LesionShape::Irregular, Margin::Microlobulated, Birads::B4),
            "irregular shape, microlobulated margin, BI-RADS 4"
        );
        assert_eq!(
            verbalize_local_parts(LesionShape::Oval, Margin::Circumscribed, Birads::B2),
            "oval shape, circumscribed margin, BI-RADS 2"
        );
    }

    #[test]
    fn every_template_tokenizes_without_unknowns() {
        let vocab = Vocab::new();
        for text in template_language() {
            let (seq, warnings) = vocab.tokenize(&text);
            assert!(warnings.is_empty(), "'{text}' produced {warnings:?}");
            assert!(!seq.ids.contains(&UNK_ID), "'{text}'");
            assert_eq!(seq.ids.len(), MAX_TOKENS);
            assert!(seq.ids.iter().all(|&id| id < vocab.len()));
        }
    }

    #[test]
    fn empty_text_is_summary_plus_padding() {
        let vocab = Vocab::new();
        let (seq, warnings) = vocab.tokenize("");
        assert!(warnings.is_empty());
        assert_eq!(seq.ids[0], SUMMARY_ID);
        assert!(seq.ids[1..].iter().all(|&id| id == PAD_ID));
    }

    #[test]
    fn unknown_words_warn_and_map_to_unk() {
        let vocab = Vocab::new();
        let (seq, warnings) = vocab.tokenize("a blobby lesion");
        assert_eq!(warnings.len(), 1);
        assert!(seq.ids.contains(&UNK_ID));
    }

    #[test]
    fn distinct_templates_tokenize_distinctly() {
        let vocab = Vocab::new();
        let texts = template_language();
        let mut seen = std::collections::BTreeSet::new();
        for t in &texts {
            let (seq, _) = vocab.tokenize(t);
            assert!(seen.insert(seq.ids.clone()), "collision on '{t}'");
        }
    }

    #[test]
    fn encoder_embeddings_are_deterministic_and_distinct() {
        let enc = TextEncoder::new(TextConfig::default(), 33);
        let texts = template_language();
        let mut embeddings = Vec::new();
        for t in &texts {
            let a = enc.encode_text(t).unwrap();
            let b = enc.encode_text(t).unwrap();
            assert!(a.bit_eq(&b), "re-encoding '{t}' differs");
            assert_eq!(a.shape(), &[64]);
            embeddings.push(a);
        }
        for i in 0..embeddings.len() {
            for j in i + 1..embeddings.len() {
                assert!(
                    embeddings[i].max_abs_diff(&embeddings[j]) > 0.0,
                    "'{}' and '{}' collide",
                    texts[i],
                    texts[j]
                );
            }
        }
    }

    #[test]
    fn embedding_table_covers_the_language() {
        let enc = TextEncoder::new(TextConfig::default(), 33);
        let table = EmbeddingTable::build(&enc).unwrap();
        assert_eq!(table.len(), template_language().len());
        assert!(table.get("a small lesion at an unknown location in the breast").is_ok());
        assert!(table.get("something else").is_err());
    }
}
