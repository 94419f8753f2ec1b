//! Command-line entry points.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use foley_core::backbone::TextCondition;
use foley_core::diffusion::GuidanceParams;
use foley_core::eval::{
    alpha_sweep, classify_latent, clap_analog_similarity, disentanglement_eval, generate_for_scene, metric_preflight,
    null_offsets, null_z_score, temporal_offset, EvalSetup,
};
use foley_core::synth::{make_signatures, RenderedScene};
use foley_core::training::{
    init_adapter, init_backbone, pretrain_backbone, train_adapter, Checkpoint, Models, StepLog, TrainPhase,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::caft::Caft;
use crate::checkpoint::{load_checkpoint, save_checkpoint, sidecar, timing_path, SavedCheckpoint, Timing};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, make_dataset, read_scene, Dataset};
use crate::error::{FoleyError, Result};
use crate::report::{plot_sweep, write_json, write_loss_csv, write_records_csv, write_sweep_csv};

#[derive(Debug, Parser)]
#[command(name = "foley", version, about = "Text and video conditioned latent generation on synthetic scenes")]
pub struct Cli {
    /// JSON file overriding the built-in defaults; flags override the file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Pretrain the backbone or train the adapter.
    Train(TrainArgs),
    /// Generate one latent for a scene file.
    Generate(GenerateArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub conflict_ratio: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub signature_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Backbone,
    Adapter,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub phase: PhaseArg,
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained backbone checkpoint, required for the adapter phase.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scene_file: PathBuf,
    /// Defaults to the scene's audio class.
    #[arg(long)]
    pub text_class: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample with the backbone alone.
    #[arg(long)]
    pub no_adapter: bool,
    /// Skip the asymmetric scaling of the unconditional path.
    #[arg(long)]
    pub symmetric: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Disentangle,
    Aligned,
    AlphaSweep,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "disentangle")]
    pub mode: Mode,
    /// Comma separated, e.g. `0,0.25,0.5,0.75,1`.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate only the first N selected scenes.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Sample with the backbone alone.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let base = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData(a) => gen_data(base, a),
        Command::Train(a) => train(base, a),
        Command::Generate(a) => generate(base, a),
        Command::Eval(a) => eval(base, a),
    }
}

fn provenance(command: &str, paths: &[(&str, &Path)], cfg: &RunConfig) -> Value {
    let paths: BTreeMap<&str, String> = paths.iter().map(|(k, p)| (*k, p.display().to_string())).collect();
    json!({ "command": command, "paths": paths, "seed": cfg.seed, "config": cfg.to_value() })
}

fn gen_data(mut cfg: RunConfig, a: &GenDataArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.conflict_ratio) {
        return Err(FoleyError::Args(format!(
            "--conflict-ratio must lie in [0, 1], got {}",
            a.conflict_ratio
        )));
    }
    if a.n == 0 {
        return Err(FoleyError::Args("--n must be at least 1".into()));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.signature_seed {
        cfg.signature_seed = s;
    }
    cfg.validate()?;
    let prov = provenance("gen-data", &[("out", &a.out)], &cfg);
    let m = make_dataset(a.n, a.conflict_ratio, cfg.seed, cfg.signature_seed, &cfg.synth, &a.out, prov)?;
    println!(
        "wrote {} scenes ({} conflicted, {} classes, seed {}) to {}",
        m.scenes.len(),
        m.conflicted(),
        m.classes,
        m.seed,
        a.out.display()
    );
    Ok(())
}

fn check_data(cfg: &RunConfig, d: &Dataset) -> Result<()> {
    if d.manifest.synth != cfg.synth {
        return Err(FoleyError::Args(
            "dataset was generated with a different synth configuration than the run config".into(),
        ));
    }
    Ok(())
}

fn train(mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let phase = match a.phase {
        PhaseArg::Backbone => TrainPhase::Backbone,
        PhaseArg::Adapter => TrainPhase::Adapter,
    };
    if phase == TrainPhase::Adapter && a.backbone.is_none() {
        return Err(FoleyError::Args("the adapter phase needs --backbone CKPT".into()));
    }
    {
        let t = match phase {
            TrainPhase::Backbone => &mut cfg.backbone_training,
            TrainPhase::Adapter => &mut cfg.adapter_training,
        };
        t.seed = cfg.seed;
        if let Some(s) = a.steps {
            t.steps = s;
        }
        if let Some(s) = a.finetune_steps {
            t.finetune_steps = s;
        }
    }
    cfg.validate()?;
    let data = load_dataset(&a.data)?;
    check_data(&cfg, &data)?;
    let items = data
        .scenes
        .iter()
        .map(|r| r.train_item(&cfg.synth))
        .collect::<foley_core::Result<Vec<_>>>()?;
    let mut paths = vec![("data", a.data.as_path()), ("out", a.out.as_path())];
    if let Some(b) = &a.backbone {
        paths.push(("backbone", b.as_path()));
    }
    let prov = provenance("train", &paths, &cfg);
    let mut log: Vec<StepLog> = Vec::new();
    let every = cfg.log_every as u64;
    let mut on_step = |l: &StepLog| {
        if l.step % every == 0 {
            eprintln!("step {:>6}  loss {:.5}  grad norm {:.4}", l.step, l.loss, l.grad_norm);
        }
        log.push(*l);
    };
    let started = Instant::now();
    let (models, tcfg) = match phase {
        TrainPhase::Backbone => {
            let aligned: Vec<_> = data
                .scenes
                .iter()
                .zip(&items)
                .filter(|(s, _)| !s.scene.is_conflicted())
                .map(|(_, i)| i.clone())
                .collect();
            if aligned.is_empty() {
                return Err(FoleyError::Args("backbone pretraining needs aligned scenes".into()));
            }
            let mut bb = init_backbone(&cfg.backbone, cfg.seed)?;
            pretrain_backbone(&mut bb, &aligned, &cfg.backbone_training, &cfg.schedule, &mut on_step)?;
            let models = Models {
                backbone: bb,
                adapter: None,
                features: None,
            };
            (models, cfg.backbone_training.clone())
        }
        TrainPhase::Adapter => {
            let bpath = a.backbone.as_deref().expect("checked above");
            let saved = load_checkpoint(bpath)?;
            if saved.checkpoint.phase != TrainPhase::Backbone {
                return Err(FoleyError::Args(format!("{} is not a backbone checkpoint", bpath.display())));
            }
            let mut bb = saved.checkpoint.restore()?.backbone;
            let (mut ad, mut fp) = init_adapter(&bb, &cfg.adapter, &cfg.features, cfg.variant, cfg.seed)?;
            let finetune: Vec<_> = data
                .scenes
                .iter()
                .zip(&items)
                .filter(|(s, _)| s.scene.event_times.len() >= 2)
                .map(|(_, i)| i.clone())
                .collect();
            train_adapter(
                &mut bb,
                &mut ad,
                &mut fp,
                &items,
                &finetune,
                &cfg.adapter_training,
                &cfg.schedule,
                &mut on_step,
            )?;
            let models = Models {
                backbone: bb,
                adapter: Some(ad),
                features: Some(fp),
            };
            (models, cfg.adapter_training.clone())
        }
    };
    let wall = started.elapsed().as_secs_f64();
    let steps = log.len() as u64;
    let saved = SavedCheckpoint {
        checkpoint: Checkpoint::capture(&models, &tcfg, &cfg.schedule, steps),
        signature_seed: data.manifest.signature_seed,
        run_config: prov,
    };
    save_checkpoint(&a.out, &saved)?;
    write_loss_csv(&sidecar(&a.out, "loss.csv"), &log, cfg.log_every)?;
    write_json(
        &timing_path(&a.out),
        &Timing {
            phase,
            steps,
            wall_seconds: wall,
            seconds_per_step: if steps == 0 { 0.0 } else { wall / steps as f64 },
        },
    )?;
    println!(
        "{} phase: {} steps, backbone fingerprint {}, wrote {}",
        match phase {
            TrainPhase::Backbone => "backbone",
            TrainPhase::Adapter => "adapter",
        },
        steps,
        saved.checkpoint.backbone_fingerprint,
        a.out.display()
    );
    Ok(())
}

fn guide_from(cfg: &RunConfig, gamma: Option<f64>, alpha: Option<f64>) -> Result<GuidanceParams> {
    let g = GuidanceParams {
        gamma: gamma.unwrap_or(cfg.guide.gamma),
        alpha_asym: alpha.unwrap_or(cfg.guide.alpha_asym),
    };
    g.validate().map_err(|e| FoleyError::Args(e.to_string()))?;
    Ok(g)
}

fn restore(path: &Path) -> Result<(SavedCheckpoint, Models<f32>)> {
    let saved = load_checkpoint(path)?;
    let models = saved.checkpoint.restore()?;
    Ok((saved, models))
}

fn generate(mut cfg: RunConfig, a: &GenerateArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.sample_steps = s;
    }
    cfg.guide = guide_from(&cfg, a.gamma, a.alpha)?;
    cfg.validate()?;
    let (saved, models) = restore(&a.ckpt)?;
    let scene = read_scene(&a.scene_file)?;
    if scene.signature_seed != saved.signature_seed {
        return Err(FoleyError::Args("scene and checkpoint use different class signatures".into()));
    }
    let classes = models.backbone.config().classes;
    let text_class = a.text_class.unwrap_or(scene.rendered.scene.audio_class);
    if text_class >= classes {
        return Err(FoleyError::Args(format!("--text-class {text_class} outside 0..{classes}")));
    }
    let setup = EvalSetup {
        guide: cfg.guide,
        steps: cfg.sample_steps,
        seed: cfg.seed,
        use_adapter: !a.no_adapter,
        asymmetric: !a.symmetric,
    };
    let sched = saved.checkpoint.schedule.build()?;
    let z = generate_for_scene(&models, &scene.rendered, TextCondition::Class(text_class), &setup, &sched, &scene.synth)?;
    let sigs = make_signatures(&scene.synth, scene.signature_seed)?;
    let s = &scene.rendered.scene;
    let offset = if s.event_times.is_empty() {
        None
    } else {
        Some(temporal_offset(&z, &s.event_times, &scene.synth)?)
    };
    let prov = provenance(
        "generate",
        &[("ckpt", &a.ckpt), ("scene_file", &a.scene_file), ("out", &a.out)],
        &cfg,
    );
    let info = json!({
        "scene_id": s.scene_id,
        "text_class": text_class,
        "video_class": s.video_class,
        "event_times": s.event_times,
        "gamma": setup.guide.gamma,
        "alpha": setup.guide.alpha_asym,
        "steps": setup.steps,
        "seed": setup.seed,
        "use_adapter": setup.use_adapter && models.adapter.is_some(),
        "asymmetric": setup.asymmetric,
        "temporal_offset_s": offset,
        "predicted_class": classify_latent(&z, &sigs),
        "clap_analog": clap_analog_similarity(&z, text_class, &sigs)?,
        "run_config": prov,
    });
    let mut c = Caft::new(json!({ "generated": info }));
    c.push("latent", z);
    c.write(&a.out)?;
    write_json(&sidecar(&a.out, "json"), &info)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn select(data: &Dataset, mode: Mode, limit: Option<usize>) -> Result<Vec<RenderedScene>> {
    let want_conflict = mode != Mode::Aligned;
    let picked: Vec<RenderedScene> = data
        .scenes
        .iter()
        .filter(|s| s.scene.is_conflicted() == want_conflict)
        .take(limit.unwrap_or(usize::MAX))
        .cloned()
        .collect();
    if picked.is_empty() {
        return Err(FoleyError::Args(format!(
            "dataset has no {} scenes for this mode",
            if want_conflict { "conflicted" } else { "aligned" }
        )));
    }
    Ok(picked)
}

fn eval(mut cfg: RunConfig, a: &EvalArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.sample_steps = s;
    }
    if let Some(al) = &a.alphas {
        cfg.alphas = al.clone();
    }
    cfg.guide = guide_from(&cfg, a.gamma, a.alpha)?;
    cfg.validate()?;
    let (saved, models) = restore(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    if data.manifest.signature_seed != saved.signature_seed {
        return Err(FoleyError::Args("dataset and checkpoint use different class signatures".into()));
    }
    let synth = &data.manifest.synth;
    let preflight = metric_preflight(&data.scenes, &data.signatures, synth)?;
    if !preflight.passed() {
        return Err(foley_core::Error::Contract(format!("metric preflight failed: {preflight:?}")).into());
    }
    let scenes = select(&data, a.mode, a.limit)?;
    let sched = saved.checkpoint.schedule.build()?;
    let setup = EvalSetup {
        guide: cfg.guide,
        steps: cfg.sample_steps,
        seed: cfg.seed,
        use_adapter: !a.baseline,
        asymmetric: true,
    };
    let null = null_offsets(cfg.null_trials, cfg.seed, synth)?;
    let null_mean = null.iter().sum::<f64>() / null.len().max(1) as f64;
    std::fs::create_dir_all(&a.out).map_err(|e| FoleyError::io(&a.out, e))?;
    let prov = provenance("eval", &[("ckpt", &a.ckpt), ("data", &a.data), ("out", &a.out)], &cfg);
    let offsets_z = |r: &foley_core::eval::EvalReport| {
        let o: Vec<f64> = r.records.iter().map(|x| x.temporal_offset_s).collect();
        if o.len() > 1 && null.len() > 1 {
            Some(null_z_score(&o, &null))
        } else {
            None
        }
    };
    match a.mode {
        Mode::Disentangle | Mode::Aligned => {
            let (report, _) = disentanglement_eval(&models, &scenes, &data.signatures, &setup, &sched, synth)?;
            write_records_csv(&a.out.join("records.csv"), &report)?;
            write_json(
                &a.out.join("report.json"),
                &json!({
                    "mode": a.mode,
                    "setup": setup,
                    "aggregates": report.aggregates,
                    "null_mean_offset_s": null_mean,
                    "offset_z_vs_null": offsets_z(&report),
                    "preflight": preflight,
                    "run_config": prov,
                }),
            )?;
            let g = &report.aggregates;
            println!(
                "{} scenes: acc {:.3}  mean offset {:.3} s (null {:.3} s)  clap {:.3}  frechet {}",
                g.scenes,
                g.accuracy,
                g.mean_offset_s,
                null_mean,
                g.clap_analog_similarity,
                g.frechet_distance.map_or_else(|| "n/a".into(), |f| format!("{f:.4}"))
            );
        }
        Mode::AlphaSweep => {
            let rows = alpha_sweep(&models, &scenes, &data.signatures, &cfg.alphas, &setup, &sched, synth)?;
            let table: Vec<_> = rows.iter().map(|(r, _)| *r).collect();
            write_sweep_csv(&a.out.join("sweep.csv"), &table)?;
            plot_sweep(&a.out.join("sweep.svg"), &table)?;
            for (row, report) in &rows {
                write_records_csv(&a.out.join(format!("records_alpha_{}.csv", row.alpha)), report)?;
            }
            write_json(
                &a.out.join("sweep.json"),
                &json!({
                    "mode": a.mode,
                    "setup": setup,
                    "rows": table,
                    "null_mean_offset_s": null_mean,
                    "preflight": preflight,
                    "run_config": prov,
                }),
            )?;
            for r in &table {
                println!("alpha {:.2}: acc {:.3}  mean offset {:.3} s  clap {:.3}", r.alpha, r.acc, r.mean_offset, r.clap);
            }
        }
    }
    Ok(())
}

/// Applies `FOLEY_ADAPTER_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("FOLEY_ADAPTER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| FoleyError::Args(format!("FOLEY_ADAPTER_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| FoleyError::Args(e.to_string()))
}
