use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vdeblur_core::config::RunConfig;
use vdeblur_core::evaluation::{ablate, baseline, evaluate, AblationMode, PsnrOptions, TrendCheck};
use vdeblur_core::frame::save_gray_png;
use vdeblur_core::model::{DanModel, ModelInit};
use vdeblur_core::pipeline::run_video;
use vdeblur_core::training::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainOptions, Trainer};
use vdeblur_core::video_data::{ingest_directory, Layout};
use vdeblur_core::Frame;

#[derive(Parser, Debug)]
#[command(name = "vdeblur", version, about = "Recurrent video deblurring: synthesis, training, inference, evaluation")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` and `data.synth.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Keep console output free of wall-clock timings.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Training,
    Identity,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic blurry/sharp dataset to `data.root`.
    Synth,
    /// Train on `data.root`; writes metrics.csv and checkpoints to --out.
    Train {
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "training")]
        init: InitArg,
    },
    /// Restore a directory of blurry PNGs (or a video directory with `blur/`).
    Deblur {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write P, D, RM and Occ images under `<output>/intermediates`.
        #[arg(long)]
        dump_intermediates: bool,
    },
    /// Score the full pipeline and the blurry baseline on the eval dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Score each ablation mode, one CSV per mode plus a trend summary.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        /// Comma-separated modes; defaults to `eval.modes`.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        /// Allowed PSNR inversion in dB for the trend check.
        #[arg(long, default_value_t = 0.1)]
        tolerance: f64,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    if cli.device != "cpu" {
        bail!("device {:?} is not available; only cpu is supported", cli.device);
    }
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
        overrides.push(format!("data.synth.seed={seed}"));
    }
    Ok(RunConfig::load(cli.config.as_deref(), &overrides)?)
}

fn load_model(path: &Path) -> Result<(DanModel, Checkpoint)> {
    let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = DanModel::from_params(ck.model.clone(), ck.params.clone())?;
    Ok((model, ck))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let ids = cfg.data.synth.generate(&cfg.data.root)?;
    println!("wrote {} videos to {}", ids.len(), cfg.data.root.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>, init: InitArg, deterministic: bool) -> Result<()> {
    let clips = ingest_directory(cfg.train_dataset()?, Layout::Dataset)?;
    let mut validation = None;
    let mut data = Vec::new();
    for clip in clips {
        if cfg.data.validation.as_deref() == Some(clip.id.as_str()) {
            validation = Some(clip.sequence);
        } else {
            data.push(clip.sequence);
        }
    }
    if let (Some(id), None) = (&cfg.data.validation, &validation) {
        bail!("validation video {id:?} is not in {}", cfg.data.root.display());
    }
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let mut t = Trainer::from_checkpoint(ck)?;
            t.config.max_iters = cfg.train.max_iters;
            t
        }
        None => {
            let init = match init {
                InitArg::Training => ModelInit::Training,
                InitArg::Identity => ModelInit::Identity,
            };
            Trainer::new(DanModel::new(cfg.model.clone(), init, cfg.train.seed)?, cfg.train.clone())?
        }
    };
    trainer.set_snapshot(cfg.to_toml());
    let opts = TrainOptions { validation, out_dir: Some(out.to_path_buf()) };
    let start = Instant::now();
    let rows = train(&mut trainer, &data, &opts, |row| {
        if row.iteration % 50 == 0 {
            let timing =
                if deterministic { String::new() } else { format!(" ({:.0}s)", start.elapsed().as_secs_f64()) };
            eprintln!("iter {} loss {:.6} lr {:.2e}{timing}", row.iteration, row.losses.l_total, row.lr);
        }
    })?;
    let final_path = out.join("final.ckpt");
    save_checkpoint(&final_path, &trainer.checkpoint())?;
    println!("trained {} iterations; checkpoint {}", rows.len(), final_path.display());
    Ok(())
}

fn input_frames(input: &Path) -> Result<Vec<PathBuf>> {
    let dir = if input.join("blur").is_dir() { input.join("blur") } else { input.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("reading {}", dir.display()))?;
    paths.retain(|p| p.extension().and_then(|e| e.to_str()) == Some("png"));
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG frames in {}", dir.display());
    }
    Ok(paths)
}

fn cmd_deblur(checkpoint: &Path, input: &Path, output: &Path, dump: bool) -> Result<()> {
    let (model, ck) = load_model(checkpoint)?;
    let paths = input_frames(input)?;
    let blurry = paths.iter().map(|p| Frame::load_png(p)).collect::<vdeblur_core::Result<Vec<_>>>()?;
    let out = run_video(&model, &blurry, ck.train.toggles, dump)?;
    fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    let inter = output.join("intermediates");
    if dump {
        for sub in ["P", "D", "RM", "Occ"] {
            fs::create_dir_all(inter.join(sub)).with_context(|| format!("creating {}", inter.display()))?;
        }
    }
    for (i, path) in paths.iter().enumerate() {
        let name = path.file_name().expect("listed files have names");
        out.aggregated[i].save_png(&output.join(name))?;
        if dump {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
            out.preprocessed[i].save_png(&inter.join("P").join(name))?;
            out.deblurred[i].save_png(&inter.join("D").join(name))?;
            let rm = &out.reliability[i];
            let (w, h) = rm.dims();
            let planes = (0..3).flat_map(|k| rm.map(k).iter().copied()).collect();
            Frame::from_planar(w, h, planes)?.save_png(&inter.join("RM").join(name))?;
            for (occ, side) in out.fan_occlusion[i].iter().zip(["prev", "next"]) {
                save_gray_png(w, h, occ.values(), &inter.join("Occ").join(format!("{stem}_{side}.png")))?;
            }
        }
    }
    println!("wrote {} frames to {}", paths.len(), output.display());
    Ok(())
}

fn eval_clips(cfg: &RunConfig) -> Result<Vec<vdeblur_core::video_data::VideoClip>> {
    Ok(ingest_directory(cfg.eval_dataset()?, Layout::Dataset)?)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    let clips = eval_clips(cfg)?;
    let opts = PsnrOptions { quantized: cfg.eval.quantized, ..PsnrOptions::default() };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let base = baseline(&clips, &opts)?;
    let full = evaluate(&model, &clips, &opts)?;
    base.write_csv(&out.join("blurry.csv"))?;
    full.write_csv(&out.join("full.csv"))?;
    println!(
        "blurry {:.3} dB, full {:.3} dB ({:+.3} dB) over {} frames",
        base.overall_mean(),
        full.overall_mean(),
        full.overall_mean() - base.overall_mean(),
        full.frame_count()
    );
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, checkpoint: &Path, out: &Path, modes: &[String], tolerance: f64) -> Result<()> {
    let (model, ck) = load_model(checkpoint)?;
    let modes = if modes.is_empty() {
        cfg.modes()?
    } else {
        modes.iter().map(|m| m.trim().parse()).collect::<vdeblur_core::Result<Vec<AblationMode>>>()?
    };
    let clips = eval_clips(cfg)?;
    let opts = PsnrOptions { quantized: cfg.eval.quantized, ..PsnrOptions::default() };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let trained = ck.train.toggles;
    let mut means = Vec::new();
    for mode in modes {
        let r = ablate(&model, &trained, &clips, mode, &opts)?;
        r.report.write_csv(&out.join(format!("{mode}.csv")))?;
        let flag = if r.retrain_recommended { " (retraining recommended)" } else { "" };
        println!("{mode}: {:.3} dB{flag}", r.report.overall_mean());
        means.push((mode, r.report.overall_mean()));
    }
    let get = |m: AblationMode| means.iter().find(|(k, _)| *k == m).map(|(_, v)| *v);
    if let (Some(f), Some(pa), Some(po)) = (get(AblationMode::Full), get(AblationMode::PpnAbdn), get(AblationMode::PpnOnly)) {
        let trend = TrendCheck::new(f, pa, po, tolerance);
        let summary = trend.summary();
        fs::write(out.join("trend.txt"), format!("{summary}\n")).context("writing trend summary")?;
        println!("{summary}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train { out, resume, init } => cmd_train(&cfg, out, resume.as_deref(), *init, cli.deterministic),
        Command::Deblur { checkpoint, input, output, dump_intermediates } => {
            cmd_deblur(checkpoint, input, output, *dump_intermediates)
        }
        Command::Eval { checkpoint, out } => cmd_eval(&cfg, checkpoint, out),
        Command::Ablate { checkpoint, out, modes, tolerance } => cmd_ablate(&cfg, checkpoint, out, modes, *tolerance),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("vdeblur: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
