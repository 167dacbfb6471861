//! Command-line driver: one subcommand per pipeline stage, each reading its
//! predecessors' artifacts from the run directory and writing its own, plus
//! an audit manifest (config echo, master seed, content hashes of consumed
//! inputs, wall time).
//!
//! Artifacts in the run directory:
//!
//! | stage            | writes                                      |
//! |------------------|---------------------------------------------|
//! | `gen-data`       | `data.nary`                                 |
//! | `train-vae`      | `vae.nary`                                  |
//! | `train-flow`     | `flow.nary`                                 |
//! | `posttrain-gdpo` | `gdpo.nary`, `gdpo_log.json`                |
//! | `infer`          | `infer.nary`, `infer.json`                  |
//! | `eval`           | `metrics.json`, `metrics.csv`               |
//! | `demo-collapse`  | all checkpoints above + `demo_report.json`  |
//!
//! Checkpoint containers are self-contained: `flow.nary` and `gdpo.nary`
//! both carry the latent normalization statistics alongside the parameters,
//! so either can be handed to `infer`/`eval` via `--ckpt`.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 numeric or
//! contract failure (including a failed demonstration verdict).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dyadflow::arflow::{encode_flow_sample, prepare_flow_dataset, train_flow, FlowDataset};
use dyadflow::diffcore::{Array, ParamStore};
use dyadflow::gdpo::{posttrain_gdpo, GdpoTask, IterStats};
use dyadflow::motionvae::train_vae;
use dyadflow::pipeline::{
    demo_collapse, eval_checkpoint, get_corpus, get_stats, get_store, load_container,
    put_corpus, put_stats, put_store, save_container, stage_seed, ArrayContainer, Manifest,
    RunConfig,
};
use dyadflow::rng::Stream;
use dyadflow::samplers::{sliding_window_generate, SampleMode};
use dyadflow::synthdata::{generate_dyad, DyadSample, NormStats};
use dyadflow::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dyadflow",
    version,
    about = "Two-party motion generation: rectified-flow training, \
             reward-decoupled post-training, inference, and evaluation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; omitted fields keep their defaults. Without
    /// this flag the desk-scale demonstration preset is used.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed override; every nested seed is re-derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for artifacts and manifests. Falls back to the
    /// DYADFLOW_OUT environment variable, then to `io.out_dir` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads. All compute is single-threaded for bit
    /// reproducibility; values other than 1 are accepted and ignored.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic training and held-out conversation corpora.
    GenData,
    /// Train the motion VAE on the training corpus.
    TrainVae,
    /// Train the Stage-1 rectified-flow velocity model on VAE latents.
    TrainFlow,
    /// Post-train the Stage-1 checkpoint with group-relative rewards.
    PosttrainGdpo,
    /// Generate motion for a fresh held-out context.
    Infer(InferArgs),
    /// Score a checkpoint on the held-out corpus.
    Eval(EvalArgs),
    /// Run the full collapse-and-repair experiment and print the verdict.
    DemoCollapse,
}

#[derive(Args)]
struct InferArgs {
    /// Integration scheme for the denoising steps.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Denoising steps per latent token.
    #[arg(long)]
    steps: Option<usize>,
    /// Guidance weight on tokens where the actor speaks.
    #[arg(long)]
    cfg_speak: Option<f64>,
    /// Guidance weight on tokens where the actor listens.
    #[arg(long)]
    cfg_listen: Option<f64>,
    /// Text prompt id; omitted generates without text conditioning.
    #[arg(long)]
    text: Option<u32>,
    /// Total motion frames; sequences longer than one window run the
    /// sliding-window scheme with constant memory.
    #[arg(long)]
    frames: Option<usize>,
    /// Checkpoint container (defaults to gdpo.nary, then flow.nary).
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint container (defaults to gdpo.nary, then flow.nary).
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ode,
    Sde,
}

impl From<ModeArg> for SampleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ode => SampleMode::Ode,
            ModeArg::Sde => SampleMode::Sde,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here too; they are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::demo(),
    };
    if let Some(seed) = cli.common.seed {
        cfg = cfg.with_seed(seed);
    }
    if cli.common.threads != 1 {
        eprintln!(
            "note: compute is single-threaded for bit reproducibility; --threads {} ignored",
            cli.common.threads
        );
    }
    let out = cli
        .common
        .out
        .clone()
        .or_else(|| std::env::var_os("DYADFLOW_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.io.out_dir));
    std::fs::create_dir_all(&out)?;

    match cli.command {
        Cmd::GenData => cmd_gen_data(&cfg, &out)?,
        Cmd::TrainVae => cmd_train_vae(&cfg, &out)?,
        Cmd::TrainFlow => cmd_train_flow(&cfg, &out)?,
        Cmd::PosttrainGdpo => cmd_posttrain_gdpo(&cfg, &out)?,
        Cmd::Infer(args) => cmd_infer(&cfg, &out, &args)?,
        Cmd::Eval(args) => cmd_eval(&cfg, &out, &args)?,
        // The demonstration reports its verdict through the exit code.
        Cmd::DemoCollapse => return cmd_demo_collapse(&cfg, &out),
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------- plumbing

/// Fail with the usage exit code when a required input artifact is absent.
fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "missing input {}; run `dyadflow {produced_by}` first",
            path.display()
        )))
    }
}

/// Write `<stage>.manifest.json` recording what the stage consumed.
fn write_manifest(
    stage: &str,
    cfg: &RunConfig,
    inputs: &[(&str, &Path)],
    started: Instant,
    out: &Path,
) -> Result<()> {
    let mut manifest = Manifest::new(stage, cfg.seed, cfg)?;
    for (name, path) in inputs {
        manifest.add_input(name, path)?;
    }
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.save(&out.join(format!("{stage}.manifest.json")))
}

/// JSON artifacts carry a pointer to the manifest that produced them.
fn save_json<T: Serialize>(path: &Path, manifest: &str, label: &str, payload: &T) -> Result<()> {
    let doc = serde_json::json!({ "manifest": manifest, label: payload });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn load_corpora(out: &Path) -> Result<(Vec<DyadSample>, Vec<DyadSample>)> {
    let path = out.join("data.nary");
    require(&path, "gen-data")?;
    let c = load_container(&path)?;
    Ok((get_corpus(&c, "train.")?, get_corpus(&c, "eval.")?))
}

fn load_vae(out: &Path) -> Result<(ParamStore<f64>, NormStats)> {
    let path = out.join("vae.nary");
    require(&path, "train-vae")?;
    let c = load_container(&path)?;
    Ok((get_store(&c, "params.")?, get_stats(&c, "stats.")?))
}

/// Load a flow checkpoint: parameters plus the latent normalization
/// statistics it was trained under.
fn load_ckpt(path: &Path) -> Result<(ParamStore<f64>, NormStats)> {
    let c = load_container(path)?;
    Ok((get_store(&c, "params.")?, get_stats(&c, "latent_stats.")?))
}

/// Pick the checkpoint to drive: an explicit --ckpt, else the post-trained
/// one, else Stage 1.
fn choose_ckpt(out: &Path, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(path) = explicit {
        require(path, "train-flow (or posttrain-gdpo)")?;
        return Ok(path.clone());
    }
    for name in ["gdpo.nary", "flow.nary"] {
        let path = out.join(name);
        if path.is_file() {
            return Ok(path);
        }
    }
    Err(Error::Config(format!(
        "no checkpoint in {}; run `dyadflow train-flow` or pass --ckpt",
        out.display()
    )))
}

/// Store a flow checkpoint with everything inference needs.
fn save_ckpt(
    path: &Path,
    store: &ParamStore<f64>,
    latent_stats: &NormStats,
    losses: Option<&[f64]>,
) -> Result<()> {
    let mut c = ArrayContainer::new();
    put_store(&mut c, "params.", store)?;
    put_stats(&mut c, "latent_stats.", latent_stats)?;
    if let Some(losses) = losses {
        c.put_array("losses", &Array::new(vec![losses.len()], losses.to_vec())?)?;
    }
    save_container(path, &c)
}

/// Encode the corpus through the frozen VAE under *given* statistics (the
/// ones the checkpoint was trained with, not refit ones).
fn encode_corpus(
    dyads: &[DyadSample],
    vae_store: &ParamStore<f64>,
    cfg: &RunConfig,
    motion_stats: &NormStats,
    latent_stats: &NormStats,
) -> Result<FlowDataset<f64>> {
    let samples = dyads
        .iter()
        .map(|d| encode_flow_sample(d, vae_store, &cfg.vae, motion_stats, latent_stats))
        .collect::<Result<_>>()?;
    Ok(FlowDataset { samples, latent_stats: latent_stats.clone() })
}

// ------------------------------------------------------------------ stages

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let started = Instant::now();
    let n_train = cfg.data.train_dyads;
    let train: Vec<DyadSample> = (0..n_train)
        .map(|i| generate_dyad(&cfg.data.dyad, i as u64))
        .collect::<Result<_>>()?;
    let eval: Vec<DyadSample> = (0..cfg.metrics.eval_dyads)
        .map(|i| generate_dyad(&cfg.data.dyad, (n_train + i) as u64))
        .collect::<Result<_>>()?;

    let mut c = ArrayContainer::new();
    put_corpus(&mut c, "train.", &train)?;
    put_corpus(&mut c, "eval.", &eval)?;
    let path = out.join("data.nary");
    save_container(&path, &c)?;
    write_manifest("gen-data", cfg, &[], started, out)?;
    println!(
        "wrote {} training + {} held-out conversations ({} frames each) to {}",
        train.len(),
        eval.len(),
        cfg.data.dyad.frames,
        path.display()
    );
    Ok(())
}

fn cmd_train_vae(cfg: &RunConfig, out: &Path) -> Result<()> {
    let started = Instant::now();
    let data_path = out.join("data.nary");
    let (train, _) = load_corpora(out)?;

    // Both sides of every conversation are motion clips for the VAE.
    let mut clips = Vec::with_capacity(2 * train.len());
    for dyad in &train {
        clips.push(dyad.actor_motion.clone());
        clips.push(dyad.partner_motion.clone());
    }
    let vae = train_vae::<f64>(&clips, &cfg.vae, stage_seed(cfg.seed, "vae"))?;

    let mut c = ArrayContainer::new();
    put_store(&mut c, "params.", &vae.store)?;
    put_stats(&mut c, "stats.", &vae.stats)?;
    c.put_array("losses", &Array::new(vec![vae.losses.len()], vae.losses.clone())?)?;
    let path = out.join("vae.nary");
    save_container(&path, &c)?;
    write_manifest("train-vae", cfg, &[("data", &data_path)], started, out)?;
    println!(
        "trained VAE on {} clips for {} steps (final loss {:.6}) -> {}",
        clips.len(),
        cfg.vae.steps,
        vae.losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn cmd_train_flow(cfg: &RunConfig, out: &Path) -> Result<()> {
    let started = Instant::now();
    let data_path = out.join("data.nary");
    let vae_path = out.join("vae.nary");
    let (train, _) = load_corpora(out)?;
    let (vae_store, motion_stats) = load_vae(out)?;

    let dataset = prepare_flow_dataset(&train, &vae_store, &cfg.vae, &motion_stats, &cfg.flow)?;
    let flow = train_flow(&dataset, &cfg.flow, stage_seed(cfg.seed, "flow"))?;

    let path = out.join("flow.nary");
    save_ckpt(&path, &flow.store, &dataset.latent_stats, Some(&flow.losses))?;
    write_manifest(
        "train-flow",
        cfg,
        &[("data", &data_path), ("vae", &vae_path)],
        started,
        out,
    )?;
    println!(
        "trained flow on {} conversations for {} steps (final loss {:.6}) -> {}",
        train.len(),
        cfg.flow.steps,
        flow.losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn cmd_posttrain_gdpo(cfg: &RunConfig, out: &Path) -> Result<()> {
    let started = Instant::now();
    let data_path = out.join("data.nary");
    let vae_path = out.join("vae.nary");
    let flow_path = out.join("flow.nary");
    require(&flow_path, "train-flow")?;
    let (train, _) = load_corpora(out)?;
    let (vae_store, motion_stats) = load_vae(out)?;
    let (stage1, latent_stats) = load_ckpt(&flow_path)?;

    let dataset = encode_corpus(&train, &vae_store, cfg, &motion_stats, &latent_stats)?;
    let task = GdpoTask {
        flow_cfg: &cfg.flow,
        vae_cfg: &cfg.vae,
        vae_store: &vae_store,
        motion_stats: &motion_stats,
        dataset: &dataset,
        dyads: &train,
        groups: cfg.data.dyad.groups,
    };
    let outcome = posttrain_gdpo(&stage1, &task, &cfg.gdpo, stage_seed(cfg.seed, "gdpo"))?;

    let path = out.join("gdpo.nary");
    save_ckpt(&path, &outcome.store, &latent_stats, None)?;
    save_json(&out.join("gdpo_log.json"), "posttrain-gdpo.manifest.json", "log", &outcome.log)?;
    write_manifest(
        "posttrain-gdpo",
        cfg,
        &[("data", &data_path), ("vae", &vae_path), ("flow", &flow_path)],
        started,
        out,
    )?;
    print_gdpo_tail(&outcome.log);
    println!("post-trained for {} iterations -> {}", outcome.log.len(), path.display());
    Ok(())
}

fn print_gdpo_tail(log: &[IterStats]) {
    if let Some(last) = log.last() {
        let mean_reward =
            last.group_mean_reward.iter().sum::<f64>() / last.group_mean_reward.len().max(1) as f64;
        println!(
            "last iteration: reward {:.4}, clip fraction {:.3}, KL {:.6}, ratio [{:.4}, {:.4}]",
            mean_reward, last.clip_fraction, last.kl, last.ratio_min, last.ratio_max
        );
    }
}

fn cmd_infer(cfg: &RunConfig, out: &Path, args: &InferArgs) -> Result<()> {
    let started = Instant::now();
    let vae_path = out.join("vae.nary");
    let (vae_store, motion_stats) = load_vae(out)?;
    let ckpt_path = choose_ckpt(out, &args.ckpt)?;
    let (store, latent_stats) = load_ckpt(&ckpt_path)?;

    if let Some(id) = args.text {
        if id as usize >= cfg.flow.text_vocab {
            return Err(Error::Config(format!(
                "--text {id} out of range; the model knows {} prompts",
                cfg.flow.text_vocab
            )));
        }
    }
    let mut sampler = cfg.sampler;
    if let Some(mode) = args.mode {
        sampler.mode = mode.into();
    }
    if let Some(steps) = args.steps {
        sampler.steps = steps;
    }
    if let Some(w) = args.cfg_speak {
        sampler.omega_speak = w;
    }
    if let Some(w) = args.cfg_listen {
        sampler.omega_listen = w;
    }
    sampler.validate()?;

    // A fresh context conversation, disjoint from training and evaluation
    // indices by construction of the derived index space.
    let mut dyad_cfg = cfg.data.dyad.clone();
    if let Some(frames) = args.frames {
        dyad_cfg.frames = frames;
    }
    dyad_cfg.validate()?;
    let index = Stream::derive(cfg.seed, &["infer", "context"], &[]).below(u64::MAX);
    let dyad = generate_dyad(&dyad_cfg, index)?;
    let mut sample = encode_flow_sample(&dyad, &vae_store, &cfg.vae, &motion_stats, &latent_stats)?;
    sample.inputs.text_id = args.text;

    let output = sliding_window_generate(
        &store,
        &cfg.flow,
        &sampler,
        &cfg.window,
        &sample.inputs,
        &dyad.actor_vad,
        &vae_store,
        &cfg.vae,
        &latent_stats,
        &motion_stats,
    )?;

    let mut c = ArrayContainer::new();
    c.put_array("motion", &output.motion)?;
    c.put_array("latents", &output.latents)?;
    c.put_array("partner_motion", &dyad.partner_motion)?;
    c.put_u8(
        "actor_vad",
        vec![dyad.actor_vad.len()],
        dyad.actor_vad.iter().map(|&v| v as u8).collect(),
    )?;
    let path = out.join("infer.nary");
    save_container(&path, &c)?;
    let summary = serde_json::json!({
        "checkpoint": ckpt_path.display().to_string(),
        "frames": output.motion.shape()[0],
        "latent_tokens": output.latents.shape()[0],
        "windows": output.windows.len(),
        "peak_context_tokens": output.peak_context_tokens,
        "mode": match sampler.mode { SampleMode::Ode => "ode", SampleMode::Sde => "sde" },
        "steps": sampler.steps,
        "omega_speak": sampler.omega_speak,
        "omega_listen": sampler.omega_listen,
        "text": args.text,
    });
    save_json(&out.join("infer.json"), "infer.manifest.json", "generation", &summary)?;
    write_manifest("infer", cfg, &[("vae", &vae_path), ("ckpt", &ckpt_path)], started, out)?;
    println!(
        "generated {} frames ({} latent tokens, {} windows, peak context {} tokens) -> {}",
        output.motion.shape()[0],
        output.latents.shape()[0],
        output.windows.len(),
        output.peak_context_tokens,
        path.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let data_path = out.join("data.nary");
    let vae_path = out.join("vae.nary");
    let (_, eval) = load_corpora(out)?;
    let (vae_store, motion_stats) = load_vae(out)?;
    let ckpt_path = choose_ckpt(out, &args.ckpt)?;
    let (store, latent_stats) = load_ckpt(&ckpt_path)?;

    let dataset = encode_corpus(&eval, &vae_store, cfg, &motion_stats, &latent_stats)?;
    let summary = eval_checkpoint(
        &store,
        cfg,
        &eval,
        &dataset.samples,
        &vae_store,
        &latent_stats,
        &motion_stats,
    )?;

    save_json(&out.join("metrics.json"), "eval.manifest.json", "summary", &summary)?;
    std::fs::write(out.join("metrics.csv"), summary.report.csv())?;
    write_manifest(
        "eval",
        cfg,
        &[("data", &data_path), ("vae", &vae_path), ("ckpt", &ckpt_path)],
        started,
        out,
    )?;
    println!("scored {} held-out conversations with {}", eval.len(), ckpt_path.display());
    println!(
        "listening velocity ratio {:.4}, listening FDD {:.6}, speaking MSE {:.6}, diversity {:.6}",
        summary.listen_velocity_ratio,
        summary.listen_fdd,
        summary.speaking_mse,
        summary.listen_diversity
    );
    Ok(())
}

fn cmd_demo_collapse(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let started = Instant::now();
    let outcome = demo_collapse(cfg)?;

    // Persist every checkpoint so `infer`/`eval` work in the same directory.
    let mut vae = ArrayContainer::new();
    put_store(&mut vae, "params.", &outcome.vae_store)?;
    put_stats(&mut vae, "stats.", &outcome.motion_stats)?;
    save_container(&out.join("vae.nary"), &vae)?;
    save_ckpt(&out.join("flow.nary"), &outcome.stage1, &outcome.latent_stats, None)?;
    save_ckpt(&out.join("gdpo.nary"), &outcome.stage2, &outcome.latent_stats, None)?;

    let report_path = out.join("demo_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&outcome.report)?)?;
    write_manifest("demo-collapse", cfg, &[], started, out)?;

    print!("{}", outcome.report.table());
    for line in outcome.report.verdict_lines() {
        println!("{line}");
    }
    println!("report -> {}", report_path.display());
    if outcome.report.pass {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("the demonstration missed a pinned threshold; see the verdict above");
        Ok(ExitCode::from(2))
    }
}
