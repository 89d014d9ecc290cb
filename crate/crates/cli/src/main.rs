//! promptseg: synth / train / eval / predict / gradcam.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptseg_core::config::RunConfig;
use promptseg_core::data::{
    load_dataset, make_folds, synthesize_dataset, write_dataset, write_mask_png, FoldSplit,
    Sample, SyntheticConfig,
};
use promptseg_core::eval::{build_report, emit_report, render_overlay};
use promptseg_core::model::{grad_cam, two_pass_predict, ModelState, GRAD_CAM_LAYERS};
use promptseg_core::prompt::{parse_metadata_row, EmbeddingTable, SizeBins};
use promptseg_core::runner::evaluate_fold;
use promptseg_core::train::train_fold;
use promptseg_core::{Error as CoreError, Result as CoreResult};

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Dual-prompt text-guided lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset (images/, masks/, metadata.csv)
    Synth(SynthArgs),
    /// Train one cross-validation fold and write a checkpoint
    Train(TrainArgs),
    /// Two-pass evaluation over validation folds; writes report.json/csv and overlays
    Eval(EvalArgs),
    /// Two-pass prediction for a single image; writes mask PNG and diagnostics JSON
    Predict(PredictArgs),
    /// Grad-CAM heatmap for a single image
    Gradcam(GradcamArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// plain-text key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// profile override: desk or paper
    #[arg(long)]
    profile: Option<String>,
    /// master seed override
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> CoreResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(profile) = &self.profile {
            cfg.set("profile", profile)?;
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// number of phantoms
    #[arg(long)]
    count: usize,
    /// generator seed
    #[arg(long)]
    seed: u64,
    /// image side in pixels
    #[arg(long, default_value_t = 64)]
    side: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// dataset root (images/, masks/, metadata.csv)
    #[arg(long)]
    data: Option<PathBuf>,
    /// fold index to train
    #[arg(long)]
    fold: usize,
    /// output directory for checkpoint and traces
    #[arg(long)]
    out: Option<PathBuf>,
    /// iteration override
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// checkpoint file (single fold) or directory of fold{K}.ckpt files
    #[arg(long)]
    ckpt: PathBuf,
    /// dataset root
    #[arg(long)]
    data: PathBuf,
    /// report output directory
    #[arg(long)]
    report: PathBuf,
    /// "all" or a fold index
    #[arg(long, default_value = "all")]
    folds: String,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    ckpt: PathBuf,
    /// input image PNG
    #[arg(long)]
    image: PathBuf,
    /// metadata row: image_id,image_path,mask_path,size,shape,margin,birads
    #[arg(long)]
    meta_row: String,
    /// output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcamArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    meta_row: String,
    /// feature map to explain
    #[arg(long, default_value = "fused")]
    layer: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::Gradcam(args) => cmd_gradcam(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let numeric = matches!(
                e,
                CoreError::Tensor(promptseg_tensor::Error::NonFinite { .. })
            );
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}

fn cmd_synth(args: SynthArgs) -> CoreResult<()> {
    if args.count == 0 {
        eprintln!("warning: generating an empty dataset");
    }
    let mut cfg = SyntheticConfig::desk(args.count, args.seed);
    cfg.side = args.side;
    cfg.validate()?;
    let samples = synthesize_dataset(&cfg)?;
    write_dataset(&args.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

fn load_training_data(cfg: &RunConfig, data_flag: &Option<PathBuf>) -> CoreResult<Vec<Sample>> {
    let root = data_flag
        .clone()
        .or_else(|| cfg.data_root.clone())
        .ok_or_else(|| CoreError::Config("no dataset: pass --data or set data_root".to_string()))?;
    let side = cfg.model_config()?.image_size;
    let report = load_dataset(&root, &root.join("metadata.csv"), Some(side))?;
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    if !report.errors.is_empty() {
        for e in &report.errors {
            eprintln!("error: {e}");
        }
        return Err(CoreError::Data(format!("{} invalid dataset items", report.errors.len())));
    }
    Ok(report.samples)
}

fn dataset_folds(cfg: &RunConfig, samples: &[Sample]) -> CoreResult<Vec<FoldSplit>> {
    let ids: Vec<String> = samples.iter().map(|s| s.metadata.image_id.clone()).collect();
    make_folds(&ids, cfg.folds, cfg.seed)
}

fn cmd_train(args: TrainArgs) -> CoreResult<()> {
    let mut cfg = args.config.build()?;
    if let Some(iters) = args.iterations {
        cfg.set("train.iterations", &iters.to_string())?;
    }
    if args.fold >= cfg.folds {
        return Err(CoreError::Config(format!(
            "fold {} out of range 0..{}",
            args.fold, cfg.folds
        )));
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.checkpoint_dir.clone())
        .ok_or_else(|| CoreError::Config("no output dir: pass --out or checkpoint_dir".to_string()))?;
    std::fs::create_dir_all(&out_dir)?;

    let samples = load_training_data(&cfg, &args.data)?;
    let folds = dataset_folds(&cfg, &samples)?;
    let split = &folds[args.fold];

    let mut state = ModelState::new(cfg.model_config()?, cfg.seed)?;
    let tc = cfg.train_config(args.fold);
    let trained = train_fold(&mut state, &samples, split, &tc)?;

    let ckpt_path = out_dir.join(format!("fold{}.ckpt", args.fold));
    state.save_checkpoint(&ckpt_path, Some(&trained.bins))?;

    let trace_path = out_dir.join(format!("loss_trace_fold{}.csv", args.fold));
    let mut f = std::fs::File::create(&trace_path)?;
    writeln!(f, "iteration,lr,loss")?;
    for (i, (lr, loss)) in trained.lr_trace.iter().zip(&trained.loss_trace).enumerate() {
        writeln!(f, "{i},{lr},{loss}")?;
    }

    state.text.vocab.write_table(&out_dir.join("vocab.txt"))?;
    let mut cfg_file = std::fs::File::create(out_dir.join("effective_config.txt"))?;
    for (k, v) in cfg.echo() {
        writeln!(cfg_file, "{k}={v}")?;
    }

    let final_loss = trained.loss_trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "fold {} trained for {} iterations (final loss {final_loss:.6}); checkpoint {}",
        args.fold,
        trained.loss_trace.len(),
        ckpt_path.display()
    );
    Ok(())
}

fn resolve_fold_checkpoints(args: &EvalArgs, folds: usize) -> CoreResult<Vec<(usize, PathBuf)>> {
    if args.folds == "all" {
        if !args.ckpt.is_dir() {
            return Err(CoreError::Config(format!(
                "--folds all needs --ckpt to be a directory of fold checkpoints, got {}",
                args.ckpt.display()
            )));
        }
        Ok((0..folds).map(|k| (k, args.ckpt.join(format!("fold{k}.ckpt")))).collect())
    } else {
        let k: usize = args
            .folds
            .parse()
            .map_err(|_| CoreError::Config(format!("--folds must be 'all' or an index, got '{}'", args.folds)))?;
        if k >= folds {
            return Err(CoreError::Config(format!("fold {k} out of range 0..{folds}")));
        }
        let path = if args.ckpt.is_dir() { args.ckpt.join(format!("fold{k}.ckpt")) } else { args.ckpt.clone() };
        Ok(vec![(k, path)])
    }
}

fn cmd_eval(args: EvalArgs) -> CoreResult<()> {
    let cfg = args.config.build()?;
    let samples = load_training_data(&cfg, &Some(args.data.clone()))?;
    let folds = dataset_folds(&cfg, &samples)?;
    let fold_ckpts = resolve_fold_checkpoints(&args, cfg.folds)?;

    let mut records = Vec::new();
    let mut predictions = Vec::new();
    for (fold_index, ckpt_path) in &fold_ckpts {
        if !ckpt_path.exists() {
            return Err(CoreError::Config(format!("missing checkpoint {}", ckpt_path.display())));
        }
        let (state, bins) = ModelState::load_checkpoint(cfg.model_config()?, cfg.seed, ckpt_path)?;
        let bins = bins.ok_or_else(|| {
            CoreError::Data(format!("{} carries no size bins; retrain", ckpt_path.display()))
        })?;
        let table = EmbeddingTable::build(&state.text)?;
        let evaluated = evaluate_fold(&state, &table, &samples, &folds[*fold_index], &bins)?;
        for item in evaluated {
            records.push(item.record.clone());
            predictions.push((item.record.image_id.clone(), item.prediction));
        }
    }

    let report = build_report(records, cfg.echo())?;
    emit_report(&report, &args.report)?;

    let overlay_dir = args.report.join("overlays");
    std::fs::create_dir_all(&overlay_dir)?;
    let by_id: std::collections::BTreeMap<&str, &Sample> =
        samples.iter().map(|s| (s.metadata.image_id.as_str(), s)).collect();
    for (id, pred) in &predictions {
        let sample = by_id[id.as_str()];
        let overlay = render_overlay(&sample.image, pred, &sample.mask)?;
        overlay
            .save(overlay_dir.join(format!("{id}_overlay.png")))
            .map_err(|e| CoreError::Data(e.to_string()))?;
    }

    println!(
        "evaluated {} images across {} fold(s); report at {}",
        predictions.len(),
        fold_ckpts.len(),
        args.report.join("report.json").display()
    );
    Ok(())
}

struct LoadedPredictor {
    state: ModelState,
    bins: SizeBins,
    table: EmbeddingTable,
}

fn load_predictor(cfg: &RunConfig, ckpt: &Path) -> CoreResult<LoadedPredictor> {
    let (state, bins) = ModelState::load_checkpoint(cfg.model_config()?, cfg.seed, ckpt)?;
    let bins = bins.ok_or_else(|| {
        CoreError::Data(format!("{} carries no size bins; retrain", ckpt.display()))
    })?;
    let table = EmbeddingTable::build(&state.text)?;
    Ok(LoadedPredictor { state, bins, table })
}

fn load_input_image(path: &Path, side: usize) -> CoreResult<promptseg_tensor::Tensor64> {
    let image = promptseg_core::data::read_image_png(path)?;
    if image.shape()[1] == side && image.shape()[2] == side {
        return Ok(image);
    }
    let resized = promptseg_tensor::bilinear_resize_raw(
        image.data(),
        3,
        image.shape()[1],
        image.shape()[2],
        side,
        side,
    );
    Ok(promptseg_tensor::Tensor64::new(vec![3, side, side], resized)?)
}

fn cmd_predict(args: PredictArgs) -> CoreResult<()> {
    let cfg = args.config.build()?;
    let predictor = load_predictor(&cfg, &args.ckpt)?;
    let meta = parse_metadata_row(&args.meta_row)?;
    let image = load_input_image(&args.image, predictor.state.cfg.image_size)?;

    let out = two_pass_predict(
        &predictor.state,
        &predictor.table,
        &image,
        &meta.for_inference(),
        &predictor.bins,
    )?;

    std::fs::create_dir_all(&args.out)?;
    write_mask_png(&args.out.join(format!("{}_mask.png", meta.image_id)), &out.mask)?;
    write_mask_png(&args.out.join(format!("{}_pass1.png", meta.image_id)), &out.mask_pass1)?;
    let diag_path = args.out.join(format!("{}_diagnostics.json", meta.image_id));
    std::fs::write(&diag_path, serde_json::to_string_pretty(&out.diagnostics)?)?;
    println!(
        "prediction written for {} (fallback: {}); diagnostics {}",
        meta.image_id,
        out.diagnostics.fallback,
        diag_path.display()
    );
    Ok(())
}

fn cmd_gradcam(args: GradcamArgs) -> CoreResult<()> {
    let cfg = args.config.build()?;
    if !GRAD_CAM_LAYERS.contains(&args.layer.as_str()) {
        return Err(CoreError::Usage(format!(
            "unknown layer '{}', valid: {}",
            args.layer,
            GRAD_CAM_LAYERS.join(", ")
        )));
    }
    let predictor = load_predictor(&cfg, &args.ckpt)?;
    let meta = parse_metadata_row(&args.meta_row)?;
    let image = load_input_image(&args.image, predictor.state.cfg.image_size)?;

    // two-pass first: the heatmap is conditioned on the prompts the
    // predictor actually used (mask-free)
    let prediction = two_pass_predict(
        &predictor.state,
        &predictor.table,
        &image,
        &meta.for_inference(),
        &predictor.bins,
    )?;
    let global_prompt = prediction
        .diagnostics
        .pass2_prompt
        .clone()
        .unwrap_or_else(|| prediction.diagnostics.pass1_prompt.clone());
    let e_c = predictor.table.get(&global_prompt)?.clone();
    let e_l = predictor.table.get(&prediction.diagnostics.local_prompt)?.clone();

    let heat = grad_cam(&predictor.state, &image, &e_c, &e_l, &args.layer)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);

    std::fs::create_dir_all(&args.out)?;
    let gray = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(heat[y as usize * w + x as usize] * 255.0).round() as u8])
    });
    let heat_path = args.out.join(format!("{}_gradcam_{}.png", meta.image_id, args.layer));
    gray.save(&heat_path).map_err(|e| CoreError::Data(e.to_string()))?;

    // warm overlay on the grayscale image
    let blend = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let idx = y as usize * w + x as usize;
        let base = (image.data()[idx].clamp(0.0, 1.0) * 255.0).round();
        let v = heat[idx];
        let r = (1.0 - v) * base + v * 255.0;
        let g = (1.0 - v) * base + v * 96.0;
        let b = (1.0 - v) * base;
        image::Rgb([r.round() as u8, g.round() as u8, b.round() as u8])
    });
    let overlay_path = args.out.join(format!("{}_gradcam_{}_overlay.png", meta.image_id, args.layer));
    blend.save(&overlay_path).map_err(|e| CoreError::Data(e.to_string()))?;
    println!("grad-cam written: {} and {}", heat_path.display(), overlay_path.display());
    Ok(())
}
