use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use candle_core::DType;
use serde_json::json;

use glad_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
use glad_core::datasets::{
    load_dataset, load_sequence, read_results, write_results, SequenceRecord,
};
use glad_core::imaging::{hconcat, load_image, resize, save_image};
use glad_core::metrics::{evaluate_dataset, EvalReport};
use glad_core::model::{GladModel, DIFFUSION_PREFIX};
use glad_core::semantics::{
    aggregate, classify, degradation_study, score_videos, Degradation, DegradeParams,
    EmbeddingBackend, PaletteBackend, StubBackend,
};
use glad_core::tracker::{run_sequence, Tracker};
use glad_core::training::{
    mean_iou, pretrain_diffusion, synthetic_sequences, tsv_logger, TrainSet, Trainer,
};
use glad_core::{BoundingBox, GladError, Image};

use crate::config::RunConfig;
use crate::plot::write_curves;
use crate::{CliError, CliResult};

/// Side of each half of the inpainting montage.
const INPAINT_SIDE: u32 = 512;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    GladError::io(path, e).into()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn output_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

/// A sequence directory, or every sequence below a dataset root.
fn sequences_at(path: &Path) -> CliResult<Vec<SequenceRecord>> {
    if path.join("groundtruth.txt").is_file() {
        Ok(vec![load_sequence(path)?])
    } else {
        Ok(load_dataset(path)?)
    }
}

fn dataset_or_synthetic(
    cfg: &RunConfig,
    synthetic: bool,
    dataset: Option<&Path>,
    count: usize,
    first_seed: u64,
) -> CliResult<Vec<SequenceRecord>> {
    match dataset.or(cfg.data_root.as_deref()) {
        Some(root) if !synthetic => sequences_at(root),
        _ => Ok(synthetic_sequences(count, first_seed, &cfg.scene)),
    }
}

fn checkpoint_path<'a>(cfg: &'a RunConfig, flag: Option<&'a Path>) -> CliResult<&'a Path> {
    flag.or(cfg.checkpoint.as_deref()).ok_or_else(|| {
        CliError::Usage("no checkpoint given (use --checkpoint or the `checkpoint` key)".into())
    })
}

/// Checkpoint weights with the inference-time keys of `cfg` applied.
fn inference_model(cfg: &RunConfig, ck: &Checkpoint) -> CliResult<GladModel> {
    let mut m = ck.config.clone();
    for key in [
        "head.hann_weight",
        "diffusion.steps",
        "diffusion.seed",
        "diffusion.noise_t_frac",
    ] {
        if cfg.explicit.contains(key) {
            match key {
                "head.hann_weight" => m.head.hann_weight = cfg.model.head.hann_weight,
                "diffusion.steps" => m.diffusion.steps = cfg.model.diffusion.steps,
                "diffusion.seed" => m.diffusion.seed = cfg.model.diffusion.seed,
                _ => m.diffusion.noise_t_frac = cfg.model.diffusion.noise_t_frac,
            }
        }
    }
    Ok(ck.build_model_with(&m)?)
}

pub fn train(
    cfg: &RunConfig,
    synthetic: bool,
    resume: Option<&Path>,
    until_step: Option<usize>,
) -> CliResult<()> {
    let out = output_dir(cfg)?;
    let seqs = dataset_or_synthetic(
        cfg,
        synthetic,
        None,
        cfg.train.train_sequences,
        cfg.first_seed,
    )?;
    let is_synthetic = synthetic || cfg.data_root.is_none();
    let (model, start, train_cfg, pretrain_state) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let state = ck.state.clone().ok_or_else(|| {
                CliError::Data(format!("{}: no training state to resume", path.display()))
            })?;
            let mut tc = cfg.train.clone();
            tc.seed = state.train.seed;
            eprintln!("resuming {} at step {}", path.display(), state.step);
            (
                ck.build_model()?,
                state.step,
                tc,
                (state.pretrain, state.vae_psnr),
            )
        }
        None => {
            let model = GladModel::new(&cfg.model, DType::F32, cfg.seed)?;
            let diff_path = out.join("diffusion.safetensors");
            let psnr = if diff_path.is_file() {
                let ck = load_checkpoint(&diff_path)?;
                let shared: std::collections::BTreeMap<_, _> = ck
                    .tensors
                    .into_iter()
                    .filter(|(n, _)| n.starts_with(DIFFUSION_PREFIX))
                    .collect();
                model.store().load_partial(&shared)?;
                eprintln!(
                    "loaded pretrained diffusion weights from {}",
                    diff_path.display()
                );
                ck.state.and_then(|s| s.vae_psnr)
            } else {
                let log_path = out.join("pretrain_log.tsv");
                let mut lines = String::from("stage\tstep\tloss\n");
                let t0 = Instant::now();
                let report = pretrain_diffusion(&model, &seqs, &cfg.pretrain, |stage, i, v| {
                    lines.push_str(&format!("{stage}\t{i}\t{v:.6}\n"));
                    if (i + 1) % 100 == 0 {
                        eprintln!("pretrain {stage} step {} loss {v:.4}", i + 1);
                    }
                })?;
                write_file(&log_path, lines)?;
                eprintln!(
                    "pretraining done in {:.0}s, held-out PSNR {:.2} dB",
                    t0.elapsed().as_secs_f64(),
                    report.psnr
                );
                let state = TrainState {
                    step: 0,
                    train: cfg.train.clone(),
                    pretrain: Some(cfg.pretrain.clone()),
                    vae_psnr: Some(report.psnr),
                };
                save_checkpoint(&model, Some(&state), &diff_path)?;
                Some(report.psnr)
            };
            (
                model,
                0,
                cfg.train.clone(),
                (Some(cfg.pretrain.clone()), psnr),
            )
        }
    };
    let data = TrainSet::new(seqs, model.config())?;
    let mut trainer = Trainer::new(&model, &data, &train_cfg)?;
    let log_path = out.join("train_log.tsv");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(start > 0)
        .truncate(start == 0)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut sink = tsv_logger(std::io::BufWriter::new(file), start == 0)?;
    let ck_path = out.join("checkpoint.safetensors");
    let spe = train_cfg.steps_per_epoch;
    let total = train_cfg.total_steps();
    let end = until_step.map_or(total, |u| u.min(total));
    let t0 = Instant::now();
    let mut last = None;
    for step in start..end {
        let log = trainer.step(step)?;
        sink(&log)?;
        if (step + 1) % spe == 0 || step + 1 == end {
            eprintln!(
                "epoch {:>3}/{} step {:>5} lr {:.2e} loss {:.4} ({:.0}s)",
                (step + 1).div_ceil(spe),
                train_cfg.epochs,
                step + 1,
                log.lr,
                log.loss.total,
                t0.elapsed().as_secs_f64()
            );
            let state = TrainState {
                step: step + 1,
                train: train_cfg.clone(),
                pretrain: pretrain_state.0.clone(),
                vae_psnr: pretrain_state.1,
            };
            save_checkpoint(&model, Some(&state), &ck_path)?;
        }
        last = Some(log);
    }
    drop(sink);
    drop(trainer);
    let mut summary = json!({
        "checkpoint": ck_path.display().to_string(),
        "steps": end,
        "final_loss": last.map(|l| l.loss.total),
        "vae_psnr": pretrain_state.1,
        "fusion_mode": model.mode().to_string(),
    });
    if is_synthetic && cfg.eval_sequences > 0 && end == total {
        let held_out = synthetic_sequences(cfg.eval_sequences, cfg.eval_first_seed, &cfg.scene);
        let tracker = Tracker::new(Arc::new(model));
        let m = mean_iou(&tracker, &held_out)?;
        println!("held-out mean IoU {m:.4} over {} sequences", held_out.len());
        summary["held_out_mean_iou"] = json!(m);
    }
    if let Some(l) = last {
        println!("final loss {:.6}", l.loss.total);
    }
    let path = out.join("train_summary.json");
    write_file(
        &path,
        serde_json::to_string_pretty(&summary).unwrap_or_default(),
    )?;
    println!("wrote {}", ck_path.display());
    Ok(())
}

pub fn track(cfg: &RunConfig, checkpoint: Option<&Path>, sequence: &Path) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint_path(cfg, checkpoint)?)?;
    let seqs = sequences_at(sequence)?;
    let out = output_dir(cfg)?.join("results");
    let model = inference_model(cfg, &ck)?;
    let hann = model.config().head.hann_weight;
    eprintln!("hann_weight {hann}");
    let tracker = Tracker::new(Arc::new(model)).with_hann_weight(hann)?;
    for seq in &seqs {
        let run = run_sequence(&tracker, seq)?;
        let path = out.join(format!("{}.txt", seq.name));
        write_results(&run.boxes, &path)?;
        println!(
            "{}\t{} frames\t{:.1} fps\t{}",
            seq.name,
            run.boxes.len(),
            run.fps,
            path.display()
        );
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, results: Option<&Path>, dataset: Option<&Path>) -> CliResult<()> {
    let root = dataset
        .or(cfg.data_root.as_deref())
        .ok_or_else(|| CliError::Usage("no dataset given (use --dataset or `data.root`)".into()))?;
    let seqs = sequences_at(root)?;
    let out = output_dir(cfg)?;
    let results = results
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("results"));
    let missing: Vec<&str> = seqs
        .iter()
        .filter(|s| !results.join(format!("{}.txt", s.name)).is_file())
        .map(|s| s.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "no results in {} for: {}",
            results.display(),
            missing.join(", ")
        )));
    }
    let preds = seqs
        .iter()
        .map(|s| read_results(&results.join(format!("{}.txt", s.name))))
        .collect::<glad_core::Result<Vec<_>>>()?;
    let runs: Vec<(&str, &[BoundingBox], &[BoundingBox])> = seqs
        .iter()
        .zip(&preds)
        .map(|(s, p)| (s.name.as_str(), p.as_slice(), s.gt_boxes.as_slice()))
        .collect();
    let report = evaluate_dataset(&runs)?;
    let tsv = report.to_tsv();
    print!("{tsv}");
    write_file(&out.join("report.tsv"), &tsv)?;
    let js = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join("report.json"), js)?;
    write_curves(&report, &out.join("plots"))?;
    Ok(())
}

/// Scales the stub backend's logits.
struct Scaled<B> {
    inner: B,
    logit_scale: f64,
}

impl<B: EmbeddingBackend> EmbeddingBackend for Scaled<B> {
    fn embed_image(&self, img: &Image) -> glad_core::Result<Vec<f64>> {
        self.inner.embed_image(img)
    }

    fn embed_text(&self, text: &str) -> glad_core::Result<Vec<f64>> {
        self.inner.embed_text(text)
    }

    fn logit_scale(&self) -> f64 {
        self.logit_scale
    }
}

pub fn analyze(
    cfg: &RunConfig,
    synthetic: bool,
    dataset: Option<&Path>,
    backend: &str,
    degrade: bool,
) -> CliResult<()> {
    let backend: Box<dyn EmbeddingBackend> = match backend {
        "stub" => Box::new(Scaled {
            inner: StubBackend::default(),
            logit_scale: cfg.logit_scale,
        }),
        "palette" => Box::new(Scaled {
            inner: PaletteBackend::default(),
            logit_scale: cfg.logit_scale,
        }),
        other => {
            return Err(CliError::Usage(format!(
                "unknown backend `{other}` (expected stub or palette)"
            )))
        }
    };
    let seqs = dataset_or_synthetic(
        cfg,
        synthetic,
        dataset,
        cfg.eval_sequences,
        cfg.eval_first_seed,
    )?;
    let out = output_dir(cfg)?;
    let mut videos = Vec::with_capacity(seqs.len());
    let mut rows = String::from("video\ts0\tmean\tframes\thigh_frames\tlabel\n");
    for v in score_videos(&seqs, backend.as_ref(), cfg.stride, cfg.template)? {
        let (mean, high, label) = match classify(&v) {
            Ok(c) => (
                format!("{:.4}", c.mean),
                c.frames.iter().filter(|h| **h).count().to_string(),
                if c.video_high { "high" } else { "low" },
            ),
            Err(_) => ("-".into(), "-".into(), "undefined"),
        };
        rows.push_str(&format!(
            "{}\t{:.4}\t{mean}\t{}\t{high}\t{label}\n",
            v.name,
            v.s0,
            v.frames.len()
        ));
        videos.push(v);
    }
    let agg = aggregate(&videos)?;
    let name = dataset
        .or(cfg.data_root.as_deref())
        .filter(|_| !synthetic)
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "synthetic".into());
    let table = agg.table(&name);
    print!("{table}");
    write_file(&out.join("semantics_videos.tsv"), &rows)?;
    write_file(&out.join("semantics.tsv"), &table)?;
    let js = json!({ "dataset": name, "summary": agg, "videos": videos });
    write_file(
        &out.join("semantics.json"),
        serde_json::to_string_pretty(&js).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    if degrade {
        let study = degradation_study(
            &seqs,
            backend.as_ref(),
            &Degradation::ALL,
            &DegradeParams::default(),
            cfg.seed,
        )?;
        let mut t = String::from("condition\tavg_template\n");
        for (cond, v) in study {
            t.push_str(&format!(
                "{}\t{v:.4}\n",
                cond.map(|d| d.name()).unwrap_or("raw")
            ));
        }
        print!("{t}");
        write_file(&out.join("degradation.tsv"), &t)?;
    }
    Ok(())
}

pub fn inpaint(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    template: &Path,
    text: &str,
    steps: usize,
) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint_path(cfg, checkpoint)?)?;
    let model = inference_model(cfg, &ck)?;
    let img = load_image(template)?;
    let backend = model.backend();
    let feats = backend.encode_text(&[text])?;
    let restored = backend.inpaint_template(&img, &feats, steps, cfg.model.diffusion.seed)?;
    let before = resize(&img, INPAINT_SIDE, INPAINT_SIDE);
    let after = resize(&restored, INPAINT_SIDE, INPAINT_SIDE);
    let out = output_dir(cfg)?;
    let path = out.join("inpaint.png");
    save_image(&hconcat(&[&before, &after]), &path)?;
    write_file(&out.join("inpaint.txt"), format!("{text}\n"))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn plot(cfg: &RunConfig, report: &Path) -> CliResult<()> {
    let text = fs::read_to_string(report).map_err(|e| io_err(report, e))?;
    let report: EvalReport = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", report.display())))?;
    for p in write_curves(&report, &output_dir(cfg)?.join("plots"))? {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, count: usize, first_seed: u64) -> CliResult<()> {
    let out = output_dir(cfg)?.join("synthetic");
    for seq in synthetic_sequences(count, first_seed, &cfg.scene) {
        let dir = out.join(&seq.name);
        seq.save(&dir)?;
        println!("{}", dir.display());
    }
    Ok(())
}

pub fn show_config(cfg: &RunConfig) -> CliResult<()> {
    print!("{}", cfg.to_text());
    Ok(())
}
