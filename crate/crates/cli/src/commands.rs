use std::fs;
use std::path::{Path, PathBuf};

use cotseg::inference::{decode_prediction, predict_volume, SlidingWindowConfig};
use cotseg::metrics::{evaluate_case, CaseScores, EvalReport};
use cotseg::nifti::{
    find_case_dirs, label_mask_to_nifti, read_case_dir, read_label_dir, read_nifti, volume_from_nifti4d, write_case_dir,
    write_nifti, NiftiVolume,
};
use cotseg::preprocess::{keep_set_tag, mask_modalities, split_folds, LabelMask, Modality, Volume};
use cotseg::synthetic::{generate_synthetic_case, synthetic_dataset};
use cotseg::tensor::{DType, Element, Fault, Tensor};
use cotseg::trainer::{checkpoint_dtype, config_digest, Checkpoint, Trainer, CHECKPOINT_FILE, LOG_FILE};
use cotseg::unet::{unet_param_count, UNet, UNetConfig, UNetParams};
use cotseg::verify::{self, VerifyOptions};

use crate::config::{DataConfig, Precision, RunConfig};
use crate::exit::{self, CliError, CliResult};
use crate::{AblateArgs, EvaluateArgs, FaultArg, InspectArgs, PredictArgs, Preset, SynthArgs, TrainArgs, VerifyArgs};

pub const CONFIG_FILE: &str = "config.toml";
pub const PREDICTIONS_DIR: &str = "predictions";

struct Case {
    volume: Volume,
    truth: Option<LabelMask>,
    /// Header source for exported predictions.
    template: Option<NiftiVolume>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

/// Creates the run directory: the explicit one, or `runs/<timestamp>-<tag>`.
fn make_run_dir(explicit: Option<&PathBuf>, tag: &str) -> CliResult<PathBuf> {
    let dir = match explicit {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
            let base = PathBuf::from("runs").join(format!("{stamp}-{tag}"));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    let text = cfg.to_toml();
    println!("resolved configuration:\n{text}");
    write_text(&dir.join(CONFIG_FILE), &text)
}

fn load_dataset(data: &DataConfig, need_truth: bool) -> CliResult<Vec<Case>> {
    let cases = if !data.dir.is_empty() {
        load_input(Path::new(&data.dir))?
    } else if data.synthetic > 0 {
        synthetic_cases(data.synthetic, data.synthetic_seed, data.synthetic_extent)?
    } else {
        return Err(CliError::config("no data: pass --data DIR or --synthetic N (or set [data] dir/synthetic)"));
    };
    if need_truth {
        if let Some(c) = cases.iter().find(|c| c.truth.is_none()) {
            return Err(CliError::data(format!("case {} has no segmentation (<id>_seg.nii.gz)", c.volume.case_id)));
        }
    }
    Ok(cases)
}

fn synthetic_cases(count: usize, seed: u64, extent: [usize; 3]) -> CliResult<Vec<Case>> {
    Ok(synthetic_dataset(count, seed, extent)?
        .into_iter()
        .map(|(volume, truth)| Case {
            volume,
            truth: Some(truth),
            template: None,
        })
        .collect())
}

/// A case directory, a dataset directory, or a 4-channel NIfTI file.
fn load_input(path: &Path) -> CliResult<Vec<Case>> {
    if path.is_file() {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("case");
        let id = name.trim_end_matches(".gz").trim_end_matches(".nii");
        let img = read_nifti(path)?;
        let volume = volume_from_nifti4d(id, &img)?;
        let mut template = img;
        template.dims.truncate(3);
        template.data.clear();
        return Ok(vec![Case {
            volume,
            truth: None,
            template: Some(template),
        }]);
    }
    if !path.is_dir() {
        return Err(CliError::data(format!("{}: no such file or directory", path.display())));
    }
    find_case_dirs(path)?
        .into_iter()
        .map(|dir| {
            let c = read_case_dir(&dir)?;
            Ok(Case {
                volume: c.volume,
                truth: c.truth,
                template: Some(c.template),
            })
        })
        .collect()
}

fn status(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load_or_default(args.config.as_ref())?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(f) = args.fold {
        cfg.train.fold = f;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(d) = &args.data.data {
        cfg.data.dir = d.display().to_string();
        cfg.data.synthetic = 0;
    }
    if let Some(n) = args.data.synthetic {
        cfg.data.dir.clear();
        cfg.data.synthetic = n;
    }
    cfg.validate()?;

    let cases = load_dataset(&cfg.data, true)?;
    let ids: Vec<String> = cases.iter().map(|c| c.volume.case_id.clone()).collect();
    let validation: Vec<String> = if cfg.data.folds == 1 {
        if cfg.train.fold != 0 {
            return Err(CliError::config("[train] fold must be 0 when [data] folds = 1"));
        }
        Vec::new()
    } else {
        if cfg.train.fold >= cfg.data.folds {
            return Err(CliError::config(format!(
                "[train] fold {} outside 0..{}",
                cfg.train.fold, cfg.data.folds
            )));
        }
        let folds = split_folds(&ids, cfg.data.folds, cfg.train.seed).map_err(|e| CliError::config(format!("[data] {e}")))?;
        let mut v = folds[cfg.train.fold].clone();
        v.sort();
        v
    };
    if !cfg.data.validation_cases.is_empty() && cfg.data.validation_cases != validation {
        return Err(CliError::config(format!(
            "[data] validation_cases {:?} disagree with fold {} of the split {:?}",
            cfg.data.validation_cases, cfg.train.fold, validation
        )));
    }
    cfg.data.validation_cases = validation.clone();
    let mut training = Vec::new();
    for c in cases {
        if !validation.contains(&c.volume.case_id) {
            let v = mask_modalities(&c.volume, &cfg.data.keep)?;
            training.push((v, c.truth.expect("checked above")));
        }
    }

    let dir = make_run_dir(args.out.run_dir.as_ref(), &cfg.tag)?;
    if dir.join(LOG_FILE).exists() && args.resume.is_none() {
        return Err(CliError::config(format!(
            "{} already holds a training log; choose another --run-dir or pass --resume",
            dir.display()
        )));
    }
    write_resolved(&dir, &cfg)?;
    status(format!(
        "training on {} case(s), validation fold {:?}, run directory {}",
        training.len(),
        validation,
        dir.display()
    ));
    match cfg.precision {
        Precision::F32 => run_training::<f32>(&cfg, training, args.resume.as_deref(), &dir),
        Precision::F64 => run_training::<f64>(&cfg, training, args.resume.as_deref(), &dir),
    }
}

fn run_training<T: Element>(cfg: &RunConfig, cases: Vec<(Volume, LabelMask)>, resume: Option<&Path>, dir: &Path) -> CliResult<()> {
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            ck.expect_model(&cfg.model)?;
            Trainer::resume(ck, cfg.loss.clone(), cfg.train.clone(), cases)?
        }
        None => Trainer::<T>::new(cfg.model.clone(), cfg.loss.clone(), cfg.train.clone(), cases)?,
    };
    let total = trainer.total_steps();
    let records = trainer.run(Some(dir)).map_err(|e| {
        let mut err = CliError::from(e);
        if err.code == exit::NUMERIC {
            err.message += &format!("; last good checkpoint kept at {}", dir.join(CHECKPOINT_FILE).display());
        }
        err
    })?;
    for r in &records {
        status(format!(
            "step {}/{total} epoch {} loss {:.6} lr {:.3e} grad_norm {:.4} ({} ms)",
            r.step, r.epoch, r.loss, r.lr, r.grad_norm, r.wall_ms
        ));
    }
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!("loss {:.6} -> {:.6} over {} steps", first.loss, last.loss, records.len());
    }
    println!("wrote {}", dir.join(CONFIG_FILE).display());
    println!("wrote {}", dir.join(LOG_FILE).display());
    println!("wrote {}", dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// Loads the checkpoint and reconciles it with an optional run configuration.
fn checkpoint_config(checkpoint: &Path, config: Option<&PathBuf>) -> CliResult<(RunConfig, DType)> {
    let dtype = checkpoint_dtype(checkpoint)?;
    let model = match dtype {
        DType::F32 => Checkpoint::<f32>::load(checkpoint)?.model,
        DType::F64 => Checkpoint::<f64>::load(checkpoint)?.model,
    };
    let mut cfg = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            if cfg.model != model {
                return Err(CliError::new(
                    exit::CHECKPOINT,
                    format!(
                        "checkpoint model (digest {}) does not match [model] in {} (digest {})",
                        short_digest(&model),
                        p.display(),
                        short_digest(&cfg.model)
                    ),
                ));
            }
            cfg
        }
        None => RunConfig {
            model,
            ..RunConfig::default()
        },
    };
    cfg.precision = match dtype {
        DType::F32 => Precision::F32,
        DType::F64 => Precision::F64,
    };
    cfg.validate()?;
    Ok((cfg, dtype))
}

fn short_digest(cfg: &UNetConfig) -> String {
    hex::encode(&config_digest(cfg)[..6])
}

fn load_model<T: Element>(checkpoint: &Path) -> CliResult<UNet<T>> {
    Ok(Checkpoint::<T>::load(checkpoint)?.into_model())
}

fn predict_case<T: Element>(model: &UNet<T>, case: &Case, keep: &[Modality], sw: &SlidingWindowConfig) -> CliResult<LabelMask> {
    let vol = mask_modalities(&case.volume, keep)?.zscore();
    let probs: Tensor<T> = predict_volume(&vol, model, sw)?;
    Ok(decode_prediction(&probs)?)
}

fn predict_all(cfg: &RunConfig, dtype: DType, checkpoint: &Path, cases: &[Case], keep: &[Modality]) -> CliResult<Vec<LabelMask>> {
    fn run<T: Element>(cfg: &RunConfig, checkpoint: &Path, cases: &[Case], keep: &[Modality]) -> CliResult<Vec<LabelMask>> {
        let model = load_model::<T>(checkpoint)?;
        cases
            .iter()
            .map(|c| {
                status(format!("predicting {}", c.volume.case_id));
                predict_case(&model, c, keep, &cfg.inference)
            })
            .collect()
    }
    match dtype {
        DType::F32 => run::<f32>(cfg, checkpoint, cases, keep),
        DType::F64 => run::<f64>(cfg, checkpoint, cases, keep),
    }
}

pub fn predict(args: PredictArgs) -> CliResult<()> {
    let (mut cfg, dtype) = checkpoint_config(&args.checkpoint, args.config.as_ref())?;
    let cases = match (&args.input, args.synthetic) {
        (Some(p), _) => load_input(p)?,
        (None, Some(n)) => {
            cfg.data.dir.clear();
            cfg.data.synthetic = n;
            load_dataset(&cfg.data, false)?
        }
        (None, None) => return Err(CliError::config("predict needs --input PATH or --synthetic N")),
    };
    if let Some(p) = &args.input {
        cfg.data.dir = p.display().to_string();
        cfg.data.synthetic = 0;
    }
    let dir = make_run_dir(args.out.run_dir.as_ref(), &format!("{}-predict", cfg.tag))?;
    write_resolved(&dir, &cfg)?;
    let masks = predict_all(&cfg, dtype, &args.checkpoint, &cases, &cfg.data.keep)?;
    let out = dir.join(PREDICTIONS_DIR);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    for (case, mask) in cases.iter().zip(&masks) {
        let nii = label_mask_to_nifti(mask, case.volume.spacing, case.template.as_ref());
        let path = out.join(format!("{}.nii.gz", case.volume.case_id));
        write_nifti(&nii, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn score_pairs(tag: &str, pairs: Vec<(String, LabelMask, LabelMask, [f64; 3])>) -> CliResult<EvalReport> {
    let scores = pairs
        .into_iter()
        .map(|(id, pred, truth, spacing)| {
            if pred.dims() != truth.dims() {
                return Err(CliError::data(format!(
                    "case {id}: prediction grid {:?} differs from truth {:?}",
                    pred.dims(),
                    truth.dims()
                )));
            }
            Ok(evaluate_case(&id, &pred, &truth, spacing)?)
        })
        .collect::<CliResult<Vec<CaseScores>>>()?;
    Ok(EvalReport::new(tag, scores))
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> CliResult<()> {
    let table = report.to_table();
    print!("{table}");
    write_text(&dir.join(format!("{stem}.json")), &report.to_json())?;
    write_text(&dir.join(format!("{stem}.txt")), &table)?;
    println!("wrote {}", dir.join(format!("{stem}.json")).display());
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> CliResult<()> {
    let preds = read_label_dir(&args.pred)?;
    let truths = read_label_dir(&args.truth)?;
    let pred_ids: Vec<&String> = preds.iter().map(|p| &p.0).collect();
    let truth_ids: Vec<&String> = truths.iter().map(|t| &t.0).collect();
    let missing_pred: Vec<&String> = truth_ids.iter().filter(|id| !pred_ids.contains(id)).copied().collect();
    let missing_truth: Vec<&String> = pred_ids.iter().filter(|id| !truth_ids.contains(id)).copied().collect();
    if !missing_pred.is_empty() || !missing_truth.is_empty() {
        return Err(CliError::data(format!(
            "unmatched cases: no prediction for {missing_pred:?}; no ground truth for {missing_truth:?}"
        )));
    }
    if truths.is_empty() {
        return Err(CliError::data(format!("{}: no label maps found", args.truth.display())));
    }
    let pairs = truths
        .into_iter()
        .zip(preds)
        .map(|((id, truth, nii), (_, pred, _))| (id, pred, truth, nii.spacing))
        .collect();
    let report = score_pairs("evaluate", pairs)?;
    let dir = make_run_dir(args.out.run_dir.as_ref(), "evaluate")?;
    write_report(&dir, "eval_report", &report)
}

pub fn ablate(args: AblateArgs) -> CliResult<()> {
    let (mut cfg, dtype) = checkpoint_config(&args.checkpoint, args.config.as_ref())?;
    if let Some(d) = &args.data.data {
        cfg.data.dir = d.display().to_string();
        cfg.data.synthetic = 0;
    }
    if let Some(n) = args.data.synthetic {
        cfg.data.dir.clear();
        cfg.data.synthetic = n;
    }
    let keep: Vec<Modality> = cfg.data.keep.iter().copied().filter(|m| !args.drop.contains(m)).collect();
    if keep.is_empty() {
        return Err(CliError::config("every modality was dropped"));
    }
    cfg.data.keep = keep.clone();
    let tag = keep_set_tag(&keep);
    let cases = load_dataset(&cfg.data, true)?;
    let dir = make_run_dir(args.out.run_dir.as_ref(), &format!("{}-ablate", cfg.tag))?;
    write_resolved(&dir, &cfg)?;
    let masks = predict_all(&cfg, dtype, &args.checkpoint, &cases, &keep)?;
    let pairs = cases
        .into_iter()
        .zip(masks)
        .map(|(c, m)| (c.volume.case_id, m, c.truth.expect("checked on load"), c.volume.spacing))
        .collect();
    let report = score_pairs(&tag, pairs)?;
    write_report(&dir, "ablation_report", &report)
}

pub fn inspect(args: InspectArgs) -> CliResult<()> {
    if let Some(path) = &args.checkpoint {
        let dtype = checkpoint_dtype(path)?;
        return match dtype {
            DType::F32 => inspect_checkpoint(&Checkpoint::<f32>::load(path)?),
            DType::F64 => inspect_checkpoint(&Checkpoint::<f64>::load(path)?),
        };
    }
    let model = match (&args.config, args.preset) {
        (Some(p), _) => {
            let cfg = RunConfig::load(p)?;
            cfg.validate()?;
            cfg.model
        }
        (None, Some(Preset::Full)) => UNetConfig::full(),
        (None, Some(Preset::Desk)) | (None, None) => UNetConfig::desk(),
    };
    let params = UNetParams::<Tensor<f32>>::init(&model, 0)?;
    print_architecture(&model, &params);
    Ok(())
}

fn inspect_checkpoint<T: Element>(ck: &Checkpoint<T>) -> CliResult<()> {
    println!("checkpoint: step {}, dtype {}", ck.step, T::DTYPE.name());
    print_architecture(&ck.model, &ck.params);
    Ok(())
}

fn print_architecture<T: Element>(model: &UNetConfig, params: &UNetParams<Tensor<T>>) {
    println!(
        "model: depth {}, base channels {}, CoT encoder levels {:?}, decoder levels {:?}, digest {}",
        model.depth,
        model.base_channels,
        model.cot_levels,
        model.cot_decoder_levels,
        short_digest(model)
    );
    let flat = params.flatten();
    let width = flat.iter().map(|(n, _)| n.len()).max().unwrap_or(4);
    let mut cot = 0;
    for (name, t) in &flat {
        println!("  {name:<width$} {:>22} {:>9}", format!("{:?}", t.shape()), t.len());
        if name.contains(".cot.") {
            cot += t.len();
        }
    }
    let total = unet_param_count(model);
    println!("total parameters: {total} (CoT blocks {cot}, backbone {})", total - cot);
    println!("same backbone without CoT: {}", unet_param_count(&model.without_cot()));
}

pub fn verify(args: VerifyArgs) -> CliResult<()> {
    let mut opts = VerifyOptions {
        fault: args.inject_fault.map(|f| match f {
            FaultArg::Conv3d => Fault::Conv3dBackward,
        }),
        ..VerifyOptions::default()
    };
    if args.quick {
        opts.metric_pairs = 40;
        opts.nifti_volumes = 10;
        opts.random_configs = 10;
    }
    let checks = verify::run(&opts);
    print!("{}", verify::render_table(&checks));
    if verify::all_passed(&checks) {
        Ok(())
    } else {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::new(exit::VERIFY, format!("verification failed: {}", failed.join(", "))))
    }
}

pub fn synth(args: SynthArgs) -> CliResult<()> {
    if args.count == 0 {
        return Err(CliError::config("--count must be >= 1"));
    }
    // validate extents before writing anything
    generate_synthetic_case(0, [args.extent; 3]).map_err(|e| CliError::config(e.to_string()))?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    for (vol, mask) in synthetic_dataset(args.count, args.seed, [args.extent; 3])? {
        let dir = write_case_dir(&args.out, &vol, Some(&mask))?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
