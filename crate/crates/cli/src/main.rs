use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use ptinv::audio::{AudioClip, SAMPLE_RATE};
use ptinv::dataset::{generate_dataset, window_dataset, DatasetKind, DatasetSpec, DatasetSplit, Manifest};
use ptinv::embed::{train_projector_on_embeddings, EmbeddingFile, EmbeddingItem};
use ptinv::eval::{ablation_report, round_trip_report, sample_error_stats, trajectory_export, ErrorReport};
use ptinv::mel::MelConfig;
use ptinv::model::{Curves, InversionModel, TrainMode, VaeConfig};
use ptinv::params::ParamTrack;
use ptinv::synth::synthesize;

mod config;

#[derive(Parser)]
#[command(name = "ptinv", version, about = "Articulatory vowel synthesis and acoustic-to-articulatory inversion")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a parameter track to WAV.
    Synth {
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seconds; defaults to the last breakpoint plus 0.5 s.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SAMPLE_RATE)]
        sample_rate: u32,
    },
    /// Generate a synthetic dataset of WAVs, track JSONs and a manifest.
    Dataset {
        #[arg(long)]
        kind: DatasetKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
    /// Window a dataset into normalized mel records (PTDS + sidecar).
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the train/validation file split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a PTDS file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "joint")]
        mode: TrainMode,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint (required for frozen_projector).
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Predict a parameter track from a WAV.
    Invert {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write evaluation reports.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Manifest of the dataset behind `--data`; enables the round-trip report.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Validation clips used for the round trip.
        #[arg(long, default_value_t = 50)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Curves of a joint run and of a split (VAE then projector) run.
        #[arg(long, num_args = 2, value_names = ["JOINT", "SPLIT"])]
        ablation: Option<Vec<PathBuf>>,
        /// WAV to export a trajectory for.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long, num_args = 3, default_values = ["tongue_index", "tongue_diameter", "constriction_diameter"])]
        dims: Vec<String>,
    },
    /// Train a projector on PTEB embeddings.
    EmbedTrain {
        #[arg(long, num_args = 1.., required = true)]
        embeddings: Vec<PathBuf>,
        /// Manifest whose WAV stems match the embedding files.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Projector input width after resizing.
        #[arg(long, default_value_t = 64)]
        input_dim: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file (`{"version": 1, "arch": .., "loss": .., "train": ..}`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `train.epochs=50` or `arch.channels=[8,16,32]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<VaeConfig> {
        let cfg = config::resolve(self.config.as_deref(), &self.overrides)?;
        info!("config: {}", serde_json::to_string(&cfg)?);
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            track,
            out,
            duration,
            seed,
            sample_rate,
        } => {
            let t = ParamTrack::load(&track)?;
            let duration = duration.unwrap_or_else(|| t.breakpoints().last().map_or(0.0, |b| b.t) + 0.5);
            info!("synth: {} -> {} ({duration} s, seed {seed})", track.display(), out.display());
            synthesize(&t, duration, sample_rate, seed)?.write_wav(&out)?;
        }
        Command::Dataset {
            kind,
            n,
            seed,
            out,
            duration,
        } => {
            let mut spec = DatasetSpec::new(kind, n, seed);
            spec.duration = duration;
            info!("dataset: {}", serde_json::to_string(&spec)?);
            generate_dataset(&spec, &out)?;
        }
        Command::Features { manifest, out, seed } => {
            let m = Manifest::load(&manifest)?;
            let base = parent(&manifest);
            info!("features: {} -> {} (split seed {seed})", manifest.display(), out.display());
            let split = window_dataset(&m, base, &MelConfig::default(), seed)?;
            info!("{} train / {} validation windows", split.train.len(), split.validation.len());
            split.save(&out)?;
        }
        Command::Train {
            data,
            mode,
            out,
            init,
            cfg,
        } => train(&data, mode, &out, init.as_deref(), &cfg)?,
        Command::Invert { model, input, out } => {
            let m = InversionModel::load(&model)?;
            let audio = AudioClip::read_wav(&input)?;
            let track = m.predict_params(&audio).with_context(|| format!("inverting {}", input.display()))?;
            info!("invert: {} windows -> {}", track.len(), out.display());
            track.save(&out)?;
        }
        Command::Eval {
            model,
            data,
            report,
            manifest,
            clips,
            seed,
            ablation,
            trajectory,
            dims,
        } => {
            let m = InversionModel::load(&model)?;
            let split = DatasetSplit::load(&data)?;
            let mut errors = ErrorReport::default();
            let stem = model.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            errors.push(&stem, "validation", &sample_error_stats(&m, &split.validation)?);
            errors.save(&report)?;
            if let Some(manifest) = manifest {
                let man = Manifest::load(&manifest)?;
                let mut ids: Vec<usize> = split.validation.iter().map(|s| s.file_id as usize).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.truncate(clips);
                let rt = round_trip_report(&man, parent(&manifest), &ids, &m, &m.mel, seed)?;
                info!("round trip: model beats baseline on {:.1}% of {} clips", 100.0 * rt.win_rate(), ids.len());
                rt.save(&report)?;
            }
            if let Some(paths) = ablation {
                let r = ablation_report(&Curves::load(&paths[0])?, &Curves::load(&paths[1])?)?;
                info!("ablation: final split/joint ratio {:.3}", r.final_ratio);
                r.save(&report)?;
            }
            if let Some(wav) = trajectory {
                let audio = AudioClip::read_wav(&wav)?;
                let dims: [&str; 3] = [&dims[0], &dims[1], &dims[2]];
                let tr = trajectory_export(&audio, &m, dims)?;
                let p = report.join("trajectory.csv");
                std::fs::write(&p, tr.to_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
            info!("eval: reports in {}", report.display());
        }
        Command::EmbedTrain {
            embeddings,
            labels,
            out,
            input_dim,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let man = Manifest::load(&labels)?;
            let base = parent(&labels);
            let mut items = Vec::with_capacity(embeddings.len());
            for p in &embeddings {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let entry = man
                    .files
                    .iter()
                    .find(|e| Path::new(&e.wav).file_stem().is_some_and(|s| s.to_string_lossy() == stem))
                    .with_context(|| format!("{}: no manifest entry with stem `{stem}`", p.display()))?;
                items.push(EmbeddingItem {
                    embeddings: EmbeddingFile::load(p)?,
                    track: ParamTrack::load(&base.join(&entry.track_json))?,
                    duration: man.spec.duration,
                });
            }
            let (proj, curves) = train_projector_on_embeddings(
                &items,
                input_dim,
                cfg.arch.projector_hidden,
                &cfg.loss,
                &cfg.train,
                &MelConfig::default(),
            )?;
            proj.save(&out)?;
            curves.save(&curves_path(&out))?;
            info!("embed-train: {} files -> {}", items.len(), out.display());
        }
    }
    Ok(())
}

fn train(data: &Path, mode: TrainMode, out: &Path, init: Option<&Path>, cfg: &ConfigArgs) -> Result<()> {
    let split = DatasetSplit::load(data)?;
    let mut model = match init {
        Some(p) => {
            let mut m = InversionModel::load(p)?;
            // Only training settings may change when continuing.
            let resolved = cfg.resolve()?;
            if resolved.arch != m.config.arch {
                info!("--init given: keeping the checkpoint's architecture");
            }
            m.config.loss = resolved.loss;
            m.config.train = resolved.train;
            m
        }
        None => {
            if mode == TrainMode::FrozenProjector {
                bail!("frozen_projector trains over an existing encoder; pass --init CKPT");
            }
            InversionModel::new(cfg.resolve()?, split.normalizer.clone(), split.mel_config.clone())?
        }
    };
    info!(
        "train: {} windows, mode {mode:?}, {} epochs",
        split.train.len(),
        model.config.train.epochs
    );
    let curves = model.fit(&split, mode, |r| {
        info!(
            "epoch {} mel {:.5} param_huber {:.5} param_mse {:.5} kl {:.3}",
            r.epoch, r.mel_mse_val, r.param_huber_val, r.param_mse_val, r.kl_val
        )
    })?;
    model.save(out)?;
    curves.save(&curves_path(out))?;
    Ok(())
}

/// Error chain joined by `: `, skipping causes already shown by the
/// message above them.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn curves_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".curves.csv");
    PathBuf::from(s)
}

fn parent(p: &Path) -> &Path {
    p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}
