//! Command-line entry point.
//!
//! Seeds: every command takes one root `seed` and derives per-role seeds by
//! adding the fixed offsets below, so each role can be reproduced alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::container::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::fusion::{bench, fuse_sequence, naive_interpolate, secondary_terms, Resample};
use crate::gridmap::build_mapping_table;
use crate::mesh::{save_obj, DisplacementField};
use crate::netcore::{BlendshapeModel, Domain};
use crate::parammap::{
    apply_mapping, fit_linear_mapping, load_target_basis, mixed_target, random_mixing,
    save_target_basis, LinearMap,
};
use crate::synth::{
    face_template, gen_domain, gen_world, load_dataset, load_obj_sequence, load_world,
    save_dataset, save_world, Dataset,
};
use crate::trainer::{
    check_gradients, load_checkpoint, resume, save_checkpoint, train, Checkpoint, TrainConfig,
};

/// Synthetic ground-truth bases and template.
pub const SEED_WORLD: u64 = 0;
/// Speech samples; expression samples use this plus one.
pub const SEED_DATA: u64 = 1000;
/// Parameter initialization; batch shuffling adds the trainer's own offset.
pub const SEED_MODEL: u64 = 2000;
/// Random latents and mixing for the mapping fit.
pub const SEED_MAP: u64 = 3000;
/// Benchmark frames.
pub const SEED_BENCH: u64 = 4000;

/// Input scale of the gradient-check model unless configured. At the
/// training default instance norm runs eps-dominated and its curvature
/// swamps step-1e-5 central differences.
pub const GRADCHECK_INPUT_SCALE: &str = "1";

pub const SPEECH_FILE: &str = "speech.bfd";
pub const EXPRESSION_FILE: &str = "expression.bfd";
pub const WORLD_FILE: &str = "world.bfw";
pub const CHECKPOINT_FILE: &str = "checkpoint.bfc";

#[derive(Debug, Parser)]
#[command(
    name = "blendfuse",
    version,
    about = "Disentangled speech and expression blendshapes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat key = value file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and one dataset per domain.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        nv: Option<u64>,
        #[arg(long)]
        k: Option<u64>,
        #[arg(long, allow_negative_numbers = true)]
        eps: Option<f64>,
        /// Samples per domain.
        #[arg(long)]
        samples: Option<u64>,
    },
    /// Train both encoders and the basis, or resume a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Needed for `mask = lips`.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<u64>,
        #[arg(long, allow_negative_numbers = true)]
        lambda_sparsity: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        lambda_laplace: Option<f64>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        k: Option<u64>,
        #[arg(long)]
        grid: Option<u64>,
        #[arg(long)]
        mask: Option<String>,
    },
    /// Fuse speech frames with (resampled) expression frames.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        /// Use only the first N speech frames.
        #[arg(long)]
        speech_frames: Option<usize>,
        /// Use only the first N expression frames.
        #[arg(long)]
        expr_frames: Option<usize>,
        #[arg(long, value_enum, default_value_t = ResampleArg::Nearest)]
        resample: ResampleArg,
        /// Also emit target-model parameters per frame.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Fit the linear map from learned weights to a target basis.
    FitMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target basis file; without it a random mixing of the learned
        /// basis is generated and written next to the map.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Latents come from pairing these datasets; otherwise random.
        #[command(flatten)]
        inputs: Inputs,
        /// Random latent count when no datasets are given.
        #[arg(long)]
        samples: Option<u64>,
        #[arg(long)]
        lambda_fit: Option<f64>,
        #[arg(long)]
        lambda_reg: Option<f64>,
    },
    /// Write a dataset's template and displaced meshes as OBJ.
    ExportObj {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Also write reconstructions through this model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Time single-threaded fusion.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Trained model; otherwise a fresh model on a synthetic template.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        nv: Option<u64>,
        #[arg(long)]
        k: Option<u64>,
        #[arg(long)]
        grid: Option<u64>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        frames: Option<u64>,
        /// Also time an identity parameter map after each fuse.
        #[arg(long)]
        with_map: bool,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        nv: Option<u64>,
        #[arg(long)]
        k: Option<u64>,
        #[arg(long)]
        grid: Option<u64>,
        #[arg(long, default_value_t = 2)]
        samples_per_domain: usize,
        #[arg(long, default_value_t = 16)]
        per_group: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// Dataset file or directory of OBJ frames.
    #[arg(long)]
    pub speech: Option<PathBuf>,
    /// Dataset file or directory of OBJ frames.
    #[arg(long)]
    pub expression: Option<PathBuf>,
    /// Template OBJ for frame directories.
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResampleArg {
    Nearest,
    Linear,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::new(),
        };
        cfg.set_opt("seed", self.seed)?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .ok_or_else(|| Error::InvalidArgument("--out is required".into()))?;
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

/// Pretty JSON with `format_version` as the first key.
fn versioned<T: Serialize>(body: &T) -> Result<String> {
    let mut out = serde_json::Map::new();
    out.insert("format_version".into(), json!(FORMAT_VERSION));
    match serde_json::to_value(body)? {
        Value::Object(m) => out.extend(m),
        other => {
            out.insert("value".into(), other);
        }
    }
    Ok(serde_json::to_string_pretty(&Value::Object(out))? + "\n")
}

fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    fs::write(path, versioned(body)?)?;
    Ok(())
}

fn load_domain(path: &Path, template: Option<&Path>, domain: Domain) -> Result<Dataset> {
    if path.is_dir() {
        let template = template.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{} is a directory; --template is required",
                path.display()
            ))
        })?;
        load_obj_sequence(path, template, domain)
    } else {
        Ok(load_dataset(path)?.filter(domain))
    }
}

impl Inputs {
    fn both(&self) -> Result<(Dataset, Dataset)> {
        let need = |p: &Option<PathBuf>, flag: &str| {
            p.clone()
                .ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required")))
        };
        let t = self.template.as_deref();
        let s = load_domain(&need(&self.speech, "speech")?, t, Domain::Speech)?;
        let e = load_domain(
            &need(&self.expression, "expression")?,
            t,
            Domain::Expression,
        )?;
        Ok((s, e))
    }
}

fn lips_from(world: &Option<PathBuf>) -> Result<Option<Vec<usize>>> {
    world
        .as_deref()
        .map(|p| load_world(p).map(|w| w.lips.vertices()))
        .transpose()
}

fn frames(ds: &Dataset, limit: Option<usize>) -> Vec<DisplacementField> {
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    ds.samples[..n].iter().map(|s| s.field.clone()).collect()
}

fn cmd_gen_synth(
    common: &Common,
    nv: Option<u64>,
    k: Option<u64>,
    eps: Option<f64>,
    samples: Option<u64>,
) -> Result<()> {
    let mut cfg = common.run_config()?;
    cfg.set_opt("nv", nv)?;
    cfg.set_opt("k", k)?;
    cfg.set_opt("eps", eps)?;
    cfg.set_opt("samples", samples)?;
    let seed = cfg.u64_or("seed", 0);
    let out = common.out_dir()?;
    let world = gen_world(
        cfg.usize_or("nv", 500),
        cfg.usize_or("k", TrainConfig::desk().k),
        cfg.f64_or("eps", 0.1),
        seed + SEED_WORLD,
    )?;
    let n = cfg.usize_or("samples", 256);
    let speech = gen_domain(&world, Domain::Speech, n, seed + SEED_DATA)?;
    let expression = gen_domain(&world, Domain::Expression, n, seed + SEED_DATA + 1)?;
    save_world(&out.join(WORLD_FILE), &world)?;
    save_dataset(&out.join(SPEECH_FILE), &speech)?;
    save_dataset(&out.join(EXPRESSION_FILE), &expression)?;
    log::info!(
        "wrote world and {n} samples per domain to {}",
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct History<'a> {
    config: &'a TrainConfig,
    epochs: &'a [crate::trainer::EpochRecord],
    diverged: Option<crate::trainer::DivergenceInfo>,
}

fn cmd_train(common: &Common, args: &Command) -> Result<bool> {
    let Command::Train {
        inputs,
        world,
        resume: resume_from,
        epochs,
        lr,
        batch_size,
        lambda_sparsity,
        lambda_laplace,
        preset,
        k,
        grid,
        mask,
        ..
    } = args
    else {
        unreachable!()
    };
    let mut cfg = common.run_config()?;
    cfg.set_opt("epochs", *epochs)?;
    cfg.set_opt("learning_rate", *lr)?;
    cfg.set_opt("batch_size", *batch_size)?;
    cfg.set_opt("lambda_sparsity", *lambda_sparsity)?;
    cfg.set_opt("lambda_laplace", *lambda_laplace)?;
    cfg.set_opt("preset", preset.clone())?;
    cfg.set_opt("k", *k)?;
    cfg.set_opt("grid", *grid)?;
    cfg.set_opt("mask", mask.clone())?;
    let lips = lips_from(world)?;
    let (speech, expression) = inputs.both()?;
    let dataset = speech.merge(expression)?;
    let out = common.out_dir()?;
    let run = match resume_from {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let more = cfg.usize_or("epochs", ckpt.config.epochs);
            resume(ckpt, &dataset, more)?
        }
        None => {
            let seed = cfg.u64_or("seed", 0) + SEED_MODEL;
            let tc = cfg.train_config(seed, lips.as_deref())?;
            train(&dataset, &tc)?
        }
    };
    save_checkpoint(&out.join(CHECKPOINT_FILE), &run.checkpoint)?;
    write_json(
        &out.join("history.json"),
        &History {
            config: &run.checkpoint.config,
            epochs: &run.checkpoint.history,
            diverged: run.diverged,
        },
    )?;
    if let Some(d) = run.diverged {
        log::error!(
            "diverged at epoch {} (loss {}); saved the last good state",
            d.epoch,
            d.loss
        );
        return Ok(false);
    }
    Ok(true)
}

#[derive(Serialize)]
struct FrameMetrics {
    index: usize,
    expression_index: usize,
    fused_mean_norm: f64,
    naive_mean_norm: f64,
    removed_mean_norm: f64,
}

fn cmd_fuse(common: &Common, args: &Command) -> Result<()> {
    let Command::Fuse {
        checkpoint,
        inputs,
        speech_frames,
        expr_frames,
        resample,
        map,
        ..
    } = args
    else {
        unreachable!()
    };
    let ckpt = load_checkpoint(checkpoint)?;
    let model = &ckpt.model;
    let map = map
        .as_deref()
        .map(|p| {
            fs::read_to_string(p)
                .map_err(Error::from)
                .and_then(|t| LinearMap::from_json(&t))
        })
        .transpose()?;
    let (s, e) = inputs.both()?;
    let (sf, ef) = (frames(&s, *speech_frames), frames(&e, *expr_frames));
    let mode = match resample {
        ResampleArg::Nearest => Resample::Nearest,
        ResampleArg::Linear => Resample::Linear,
    };
    let out = common.out_dir()?;
    let results = fuse_sequence(model, &sf, &ef, mode)?;
    let mut metrics = Vec::with_capacity(results.len());
    let mut params = Vec::new();
    for (i, r) in results.iter().enumerate() {
        save_obj(
            &out.join(format!("fused_{i:04}.obj")),
            &s.template.displaced(&r.fused)?,
        )?;
        let ei = crate::fusion::resample_index(i, sf.len(), ef.len());
        let naive = naive_interpolate(model, &sf[i], &ef[ei])?;
        metrics.push(FrameMetrics {
            index: i,
            expression_index: ei,
            fused_mean_norm: r.fused.mean_norm(),
            naive_mean_norm: naive.mean_norm(),
            removed_mean_norm: secondary_terms(model, r)?.mean_norm(),
        });
        if let Some(m) = &map {
            params.push(apply_mapping(m, &r.speech, &r.expression)?);
        }
    }
    let elapsed: f64 = results.iter().map(|r| r.elapsed_ms).sum();
    write_json(
        &out.join("metrics.json"),
        &json!({
            "n_frames": results.len(),
            "n_speech": sf.len(),
            "n_expression": ef.len(),
            "resample": format!("{resample:?}").to_lowercase(),
            "frames": metrics,
            "timing_total_ms": elapsed,
        }),
    )?;
    if map.is_some() {
        write_json(&out.join("params.json"), &json!({ "params": params }))?;
    }
    Ok(())
}

fn latents_from_data(model: &BlendshapeModel, inputs: &Inputs) -> Result<Vec<Vec<f32>>> {
    let (s, e) = inputs.both()?;
    let n = s.len().min(e.len());
    (0..n)
        .map(|i| {
            let ls = model.encode_field(&s.samples[i].field, Domain::Speech)?;
            let le = model.encode_field(&e.samples[i].field, Domain::Expression)?;
            Ok(ls.own.iter().chain(&le.own).copied().collect())
        })
        .collect()
}

fn cmd_fit_map(common: &Common, args: &Command) -> Result<()> {
    let Command::FitMap {
        checkpoint,
        target,
        inputs,
        samples,
        lambda_fit,
        lambda_reg,
        ..
    } = args
    else {
        unreachable!()
    };
    let mut cfg = common.run_config()?;
    cfg.set_opt("samples", *samples)?;
    cfg.set_opt("lambda_fit", *lambda_fit)?;
    cfg.set_opt("map_lambda_reg", *lambda_reg)?;
    let seed = cfg.u64_or("seed", 0) + SEED_MAP;
    let ckpt = load_checkpoint(checkpoint)?;
    let model = &ckpt.model;
    let basis = &model.basis;
    let out = common.out_dir()?;
    let target = match target {
        Some(p) => load_target_basis(p)?,
        None => {
            let t = mixed_target(basis, &random_mixing(basis.cols(), seed))?;
            save_target_basis(&out.join("target.bfb"), &t)?;
            t
        }
    };
    let latents = if inputs.speech.is_some() || inputs.expression.is_some() {
        latents_from_data(model, inputs)?
    } else {
        let n = cfg.usize_or("samples", 4 * basis.cols());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        (0..n)
            .map(|_| {
                (0..basis.cols())
                    .map(|_| rng.sample::<f32, _>(StandardNormal))
                    .collect()
            })
            .collect()
    };
    let fit_cfg = cfg.map_fit_config(model.shape.n_vertices, None)?;
    let (map, report) = fit_linear_mapping(basis, &target, &latents, &fit_cfg)?;
    fs::write(out.join("map.json"), map.to_json()? + "\n")?;
    write_json(&out.join("fit_report.json"), &report)?;
    Ok(())
}

fn cmd_export_obj(
    common: &Common,
    data: &Path,
    checkpoint: &Option<PathBuf>,
    count: usize,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let out = common.out_dir()?;
    save_obj(&out.join("template.obj"), &ds.template)?;
    let model: Option<Checkpoint> = checkpoint.as_deref().map(load_checkpoint).transpose()?;
    for (i, s) in ds.samples.iter().take(count).enumerate() {
        save_obj(
            &out.join(format!("sample_{i:04}.obj")),
            &ds.template.displaced(&s.field)?,
        )?;
        if let Some(ck) = &model {
            let r = ck.model.reconstruct(&s.field, s.domain)?;
            save_obj(
                &out.join(format!("recon_{i:04}.obj")),
                &ds.template.displaced(&r)?,
            )?;
        }
    }
    Ok(())
}

fn random_field(n: usize, rng: &mut ChaCha8Rng) -> Result<DisplacementField> {
    let flat: Vec<f32> = (0..3 * n)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    DisplacementField::from_flat(&flat)
}

fn cmd_bench(common: &Common, args: &Command) -> Result<()> {
    let Command::Bench {
        checkpoint,
        nv,
        k,
        grid,
        preset,
        frames: n_frames,
        with_map,
        ..
    } = args
    else {
        unreachable!()
    };
    let mut cfg = common.run_config()?;
    cfg.set_opt("nv", *nv)?;
    cfg.set_opt("k", *k)?;
    cfg.set_opt("grid", *grid)?;
    cfg.set_opt("preset", preset.clone())?;
    cfg.set_opt("frames", *n_frames)?;
    let seed = cfg.u64_or("seed", 0);
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => {
            let tc = cfg.train_config(seed + SEED_MODEL, None)?;
            let (template, _) = face_template(cfg.usize_or("nv", 500))?;
            let table = build_mapping_table(&template, tc.grid)?;
            BlendshapeModel::new(tc.model_shape(template.n_vertices()), table, tc.seed)?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed + SEED_BENCH);
    let n = model.shape.n_vertices;
    let pairs = (0..4)
        .map(|_| Ok((random_field(n, &mut rng)?, random_field(n, &mut rng)?)))
        .collect::<Result<Vec<_>>>()?;
    let map = with_map.then(|| LinearMap::identity(2 * model.shape.k));
    let report = bench(&model, &pairs, cfg.usize_or("frames", 200), map.as_ref())?;
    let text = versioned(&report)?;
    print!("{text}");
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("bench.json"), text)?;
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common, args: &Command) -> Result<bool> {
    let Command::Gradcheck {
        nv,
        k,
        grid,
        samples_per_domain,
        per_group,
        step,
        tolerance,
        ..
    } = args
    else {
        unreachable!()
    };
    let mut cfg = common.run_config()?;
    cfg.set_opt("nv", *nv)?;
    cfg.set_opt("k", *k)?;
    cfg.set_opt("grid", *grid)?;
    if !(*step > 0.0 && *tolerance > 0.0) {
        return Err(Error::InvalidArgument(
            "step and tolerance must be > 0".into(),
        ));
    }
    if !cfg.contains("input_scale") {
        cfg.set("input_scale", GRADCHECK_INPUT_SCALE)?;
    }
    let seed = cfg.u64_or("seed", 0);
    let tc = cfg.train_config(seed + SEED_MODEL, None)?;
    let world = gen_world(
        cfg.usize_or("nv", 500),
        tc.k,
        cfg.f64_or("eps", 0.1),
        seed + SEED_WORLD,
    )?;
    let n = (*samples_per_domain).max(1);
    let data = gen_domain(&world, Domain::Speech, n, seed + SEED_DATA)?.merge(gen_domain(
        &world,
        Domain::Expression,
        n,
        seed + SEED_DATA + 1,
    )?)?;
    let report = check_gradients(&data, &tc, n, *per_group, *step, *tolerance)?;
    let body = json!({
        "passed": report.passed(),
        "max_rel_err": report.max_rel_err(),
        "checked": report.checked(),
        "kinks_skipped": report.kinks_skipped(),
        "report": report,
    });
    let text = versioned(&body)?;
    print!("{text}");
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.json"), text)?;
    }
    Ok(report.passed())
}

/// Exit code for an error: 1 for invalid input, 2 for everything else.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } => 1,
        _ => 2,
    }
}

/// Runs one command; `Ok(false)` marks a completed run that failed its own
/// check (divergence, gradient mismatch).
pub fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenSynth {
            common,
            nv,
            k,
            eps,
            samples,
        } => cmd_gen_synth(common, *nv, *k, *eps, *samples).map(|_| true),
        c @ Command::Train { common, .. } => cmd_train(common, c),
        c @ Command::Fuse { common, .. } => cmd_fuse(common, c).map(|_| true),
        c @ Command::FitMap { common, .. } => cmd_fit_map(common, c).map(|_| true),
        Command::ExportObj {
            common,
            data,
            checkpoint,
            count,
        } => cmd_export_obj(common, data, checkpoint, *count).map(|_| true),
        c @ Command::Bench { common, .. } => cmd_bench(common, c).map(|_| true),
        c @ Command::Gradcheck { common, .. } => cmd_gradcheck(common, c),
    }
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
