use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::ArgMatches;
use imim_core::checkpoint::{export_encoder, model_from_checkpoint, Checkpoint, CheckpointKind};
use imim_core::eval::{
    ablation_sweep, eval_plan_seed, eval_reconstruction, probe_encoder, reconstruct, save_side_by_side, EvalReport, EvalRow,
    ProbeConfig, SweepOptions,
};
use imim_core::exec::Execution;
use imim_core::gradcheck::{by_group, check_model, REL_TOL};
use imim_core::imaging::dataset::{load_sample, DatasetManifest, Sample};
use imim_core::imaging::{io, Modality, MultimodalImage};
use imim_core::masking::{make_mask_plan, tokenize};
use imim_core::model::{MimConfig, MimModel, QueryMode};
use imim_core::training::{checkpoint_path, load_dataset, train, Corpus, RunConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::args::{EvalArgs, EvalOpts, ExportArgs, GradcheckArgs, PretrainArgs, ReconstructArgs, RunArgs, SweepArgs, SynthArgs};

/// First 12 hex digits of the SHA-256 of the config JSON.
pub fn config_hash(json: &str) -> String {
    Sha256::digest(json.as_bytes()).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn fresh_run_dir(tag: &str) -> PathBuf {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    Path::new("runs").join(format!("{}-{secs}", config_hash(tag)))
}

fn run_dir(run: &RunArgs, cfg: &RunConfig) -> Result<PathBuf> {
    Ok(match &run.run_dir {
        Some(d) => d.clone(),
        None => fresh_run_dir(&serde_json::to_string(cfg)?),
    })
}

/// Creates the run directory and records the effective config.
fn prepare(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), cfg.to_json()? + "\n")?;
    Ok(())
}

fn exec() -> Execution {
    Execution::Parallel
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Run config stored with a checkpoint, or defaults around its model config.
fn checkpoint_base(ck: &Checkpoint) -> Result<RunConfig> {
    if ck.kind == CheckpointKind::TrainState {
        return Ok(TrainState::from_checkpoint(ck)?.1);
    }
    Ok(RunConfig {
        model: ck.config.clone(),
        ..RunConfig::default()
    })
}

/// `<run>/checkpoints/x.imim` evaluates into `<run>`; anything else gets a
/// fresh run directory.
fn checkpoint_run_dir(run: &RunArgs, ck_path: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    if run.run_dir.is_some() {
        return run_dir(run, cfg);
    }
    let parent = ck_path.parent();
    match parent.filter(|p| p.file_name().is_some_and(|n| n == "checkpoints")).and_then(Path::parent) {
        Some(d) => Ok(d.to_path_buf()),
        None => run_dir(run, cfg),
    }
}

fn eval_split(corpus: &Corpus) -> &[Sample] {
    let ds = corpus.dataset();
    if ds.test.is_empty() {
        log::warn!("dataset has no test split; evaluating on training images");
        &ds.train
    } else {
        &ds.test
    }
}

fn probe_config(opts: &EvalOpts) -> Option<ProbeConfig> {
    (!opts.no_probe).then(|| ProbeConfig {
        epochs: opts.probe_epochs,
        ..ProbeConfig::default()
    })
}

pub fn synth(a: &SynthArgs, m: &ArgMatches) -> Result<()> {
    let cfg = a.run.resolve(m, RunConfig::default())?;
    cfg.validate()?;
    let out = match &a.out {
        Some(o) => o.clone(),
        None => run_dir(&a.run, &cfg)?.join("data"),
    };
    fs::create_dir_all(&out)?;
    let (h, w) = (cfg.model.image_height, cfg.model.image_width);
    let mut manifest = DatasetManifest::synthetic(cfg.seed, cfg.synthetic_train, cfg.synthetic_test, cfg.modality());
    for rec in &mut manifest.samples {
        let s = load_sample(rec, &out, h, w)?;
        let file = format!("{}.png", rec.id);
        io::save_png(&s.image, &out.join(&file))?;
        if let Some(ann) = &s.annotations {
            fs::write(out.join(format!("{}.json", rec.id)), serde_json::to_string_pretty(ann)?)?;
        }
        rec.source = file;
    }
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    println!("wrote {} samples to {}", manifest.samples.len(), path.display());
    Ok(())
}

pub fn pretrain(a: &PretrainArgs, m: &ArgMatches) -> Result<()> {
    let (cfg, state) = match &a.resume {
        Some(p) => {
            let (state, saved) = TrainState::from_checkpoint(&load_checkpoint(p)?)?;
            let cfg = a.run.resolve(m, saved)?;
            (cfg, state)
        }
        None => {
            let cfg = a.run.resolve(m, RunConfig::default())?;
            let state = TrainState::new(&cfg)?;
            (cfg, state)
        }
    };
    cfg.validate()?;
    let dir = run_dir(&a.run, &cfg)?;
    prepare(&dir, &cfg)?;
    let corpus = Corpus::new(&load_dataset(&cfg, exec())?, &cfg)?;
    let start = Instant::now();
    let from = state.step;
    let out = train(&cfg, &corpus, state, Some(&dir), exec())?;
    match out.metrics.last() {
        Some(last) => println!(
            "trained steps {}..{} in {:.1}s, final loss {:.6}",
            from + 1,
            last.step,
            start.elapsed().as_secs_f64(),
            last.loss
        ),
        None => println!("no steps to run"),
    }
    println!("checkpoint {}", checkpoint_path(&dir, out.state.step).display());
    println!("run dir {}", dir.display());
    Ok(())
}

pub fn export(a: &ExportArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let enc = export_encoder(&ck)?;
    let out = match &a.out {
        Some(o) => o.clone(),
        None => {
            let stem = a.checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            a.checkpoint.with_file_name(format!("{stem}-encoder.imim"))
        }
    };
    enc.save(&out)?;
    let (before, after) = (fs::metadata(&a.checkpoint)?.len(), fs::metadata(&out)?.len());
    println!(
        "wrote {} ({} tensors, {after} bytes; input {before} bytes, {} tensors)",
        out.display(),
        enc.tensors.len(),
        ck.tensors.len()
    );
    Ok(())
}

fn print_report(r: &EvalReport) {
    print!("{}", r.to_csv());
}

pub fn eval(a: &EvalArgs, m: &ArgMatches) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut cfg = a.run.resolve(m, checkpoint_base(&ck)?)?;
    cfg.model = ck.config.clone();
    cfg.validate()?;
    let dir = checkpoint_run_dir(&a.run, &a.checkpoint, &cfg)?;
    let corpus = Corpus::new(&load_dataset(&cfg, exec())?, &cfg)?;
    let stem = a.checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
    let reports = dir.join("reports");

    if ck.kind == CheckpointKind::Encoder {
        if a.opts.no_probe {
            bail!("an encoder checkpoint supports only the linear probe");
        }
        let enc = imim_core::checkpoint::encoder_from_checkpoint(&ck)?;
        let r = probe_encoder(&enc, &corpus, &probe_config(&a.opts).expect("probe enabled"), exec())?;
        fs::create_dir_all(&reports)?;
        fs::write(reports.join(format!("probe-{stem}.json")), serde_json::to_string_pretty(&r)?)?;
        println!("probe accuracy {:.4} ({} train / {} test boxes, {} classes)", r.accuracy, r.n_train, r.n_test, r.n_classes);
        return Ok(());
    }

    let model = model_from_checkpoint(&ck)?;
    let rec = eval_reconstruction(&model, &corpus, eval_split(&corpus), a.opts.eval_samples, cfg.mask_ratio, a.opts.eval_seed, exec())?;
    let probe_acc = match probe_config(&a.opts) {
        Some(p) => Some(probe_encoder(model.encoder(), &corpus, &p, exec())?.accuracy),
        None => None,
    };
    let report = EvalReport {
        rows: vec![EvalRow {
            variant: stem.clone(),
            mse: rec.mse,
            psnr_db: rec.psnr_db,
            probe_acc,
            n_eval: rec.n_eval,
            seed: cfg.seed,
        }],
    };
    report.save(&reports, &format!("eval-{stem}"))?;
    print_report(&report);
    Ok(())
}

pub fn sweep(a: &SweepArgs, m: &ArgMatches) -> Result<()> {
    let cfg = a.run.resolve(m, RunConfig::default())?;
    let values = if a.values.is_empty() {
        a.axis.default_values()
    } else {
        a.values.iter().map(|v| a.axis.parse_value(v.trim())).collect::<imim_core::Result<_>>()?
    };
    let dir = run_dir(&a.run, &cfg)?;
    prepare(&dir, &cfg)?;
    let opts = SweepOptions {
        eval_samples: a.opts.eval_samples,
        eval_seed: a.opts.eval_seed,
        probe: probe_config(&a.opts),
        cells: if a.run.jobs == Some(1) { Execution::Sequential } else { Execution::Parallel },
        inner: exec(),
    };
    let report = ablation_sweep(&cfg, &values, &opts, Some(&dir))?;
    print_report(&report);
    println!("report {}", dir.join("reports").join(format!("sweep-{}.csv", a.axis)).display());
    Ok(())
}

/// Returns whether every group passed.
pub fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let modes: Vec<QueryMode> = match a.query_mode {
        Some(q) => vec![q],
        None => QueryMode::ALL.to_vec(),
    };
    let start = Instant::now();
    let mut all_ok = true;
    println!("{:<14} {:<22} {:>6} {:>12}  status", "mode", "group", "params", "max_rel_err");
    for mode in modes {
        let cfg = MimConfig {
            query_mode: mode,
            loss_scope: a.loss_scope,
            ..MimConfig::tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut model = MimModel::new(&cfg, a.seed)?;
        // Move off the initialization so zero-initialized projections get
        // non-trivial gradients.
        for (_, t) in model.parameters_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
        let n = cfg.image_height * cfg.image_width * cfg.channels;
        let img = MultimodalImage::new(cfg.image_height, cfg.image_width, Modality::Rgb, (0..n).map(|_| rng.gen()).collect())?;
        let grid = tokenize(&img, cfg.patch_size)?;
        let plan = make_mask_plan(cfg.n_tokens(), 0.5, rng.gen())?;
        for g in by_group(&check_model(&model, &grid, &plan, a.fd_eps)?) {
            let status = if g.passed() { "PASS" } else { "FAIL" };
            all_ok &= g.passed();
            println!("{:<14} {:<22} {:>6} {:>12.3e}  {status}", mode.as_str(), g.group, g.numel, g.max_error);
        }
    }
    println!(
        "{} (tolerance {REL_TOL:e} relative) in {:.2}s",
        if all_ok { "all groups passed" } else { "gradient check FAILED" },
        start.elapsed().as_secs_f64()
    );
    Ok(all_ok)
}

pub fn reconstruct_cmd(a: &ReconstructArgs, m: &ArgMatches) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = model_from_checkpoint(&ck)?;
    let mut cfg = a.run.resolve(m, checkpoint_base(&ck)?)?;
    cfg.model = ck.config.clone();
    cfg.validate()?;
    let dir = checkpoint_run_dir(&a.run, &a.checkpoint, &cfg)?.join("visuals");
    fs::create_dir_all(&dir)?;
    let corpus = Corpus::new(&load_dataset(&cfg, exec())?, &cfg)?;
    let samples = eval_split(&corpus);
    for (i, s) in samples.iter().take(a.count).enumerate() {
        let plan = make_mask_plan(cfg.model.n_tokens(), cfg.mask_ratio, eval_plan_seed(a.eval_seed, i))?;
        let recon = reconstruct(&model, &corpus, &s.image, &plan)?;
        let path = dir.join(format!("{}.png", s.id));
        save_side_by_side(&path, &s.image, &recon, &plan, cfg.model.patch_size)?;
        println!("{}", path.display());
    }
    Ok(())
}
