//! Command-line interface.
//!
//! Exit codes: 0 success, 2 bad arguments or configuration, 3 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use crate::codebook::Codebook;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::flowcore::FlowField;
use crate::toolkit::dataset::{load_frame_folder, load_video_folders, FrameDataset, Split, SpriteDatasetSpec};
use crate::toolkit::io::{
    encode_mp4, save_feature_png, save_flow_png, write_png, write_tensor_dump, FEATURE_MAGIC, FLOW_MAGIC,
};
use crate::toolkit::metrics::{evaluate, ColorLandmarker, EncoderEmbedder, MetricReport};
use crate::toolkit::{generate_sprite_dataset, io};
use crate::training::{
    load_checkpoint, reconstruct_video, reenact, save_checkpoint, FaceAnimator, TrainState,
};

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "facecomp", version, about = "One-shot image animation with motion and appearance codebooks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Motion,
    Appearance,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic sprite dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        videos: usize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Train on a frame dataset; writes config.toml, checkpoint.safetensors and train_log.jsonl.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML config; defaults to the desk configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Total number of steps (overrides the config).
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Disable both codebook compensation modules.
        #[arg(long)]
        no_codebooks: bool,
        /// Continue from a checkpoint (its config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write a checkpoint every this many steps.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Reconstruct dataset videos from their first frame; writes frames and metrics.json.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 10)]
        fps: u32,
    },
    /// Animate one source image with a folder of driving frames.
    Reenact {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        driving: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        fps: u32,
    },
    /// Score folders of generated frames against ground-truth folders matched by name.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Enables the embedding distance using this model's image encoder.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report path; defaults to <generated>/metrics.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write M^0, the residuals M_r^i and the flows M^i as colour-wheel PNGs and binaries.
    DumpFlows {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        /// A PNG or a folder of PNGs.
        #[arg(long)]
        driving: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write windowed warped and compensated features as channel-mean PNGs and binaries.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        /// A PNG or a folder of PNGs.
        #[arg(long)]
        driving: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a codebook as a binary dump.
    DumpCodebook {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) if e.is_config() => {
            eprintln!("error: {e}\n\n{}", Cli::command().render_usage());
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(command: Command) -> Result<()> {
    let dev = Device::Cpu;
    match command {
        Command::GenData {
            out,
            videos,
            frames,
            size,
            seed,
            test_fraction,
        } => {
            if videos == 0 || frames == 0 || size < 16 || !(0.0..=1.0).contains(&test_fraction) {
                return Err(Error::Config(
                    "need videos >= 1, frames >= 1, size >= 16 and test_fraction in [0, 1]".into(),
                ));
            }
            let spec = SpriteDatasetSpec {
                seed,
                n_videos: videos,
                n_frames: frames,
                size,
                test_fraction,
            };
            let index = generate_sprite_dataset(&out, &spec)?;
            say!("wrote {} videos to {}", index.videos.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            out,
            config,
            steps,
            seed,
            batch_size,
            no_codebooks,
            resume,
            checkpoint_every,
        } => {
            let mut state = match &resume {
                Some(path) => {
                    if config.is_some() || seed.is_some() || batch_size.is_some() || no_codebooks {
                        return Err(Error::Config(
                            "--resume uses the checkpoint's config; only --steps may be given".into(),
                        ));
                    }
                    load_checkpoint(path, &dev)?
                }
                None => {
                    let mut cfg = match &config {
                        Some(p) => Config::load(p)?,
                        None => Config::desk(),
                    };
                    if let Some(s) = steps {
                        cfg.train.steps = s;
                    }
                    if let Some(s) = seed {
                        cfg.train.seed = s;
                    }
                    if let Some(b) = batch_size {
                        cfg.train.batch_size = b;
                    }
                    if no_codebooks {
                        cfg.model.use_motion_codebook = false;
                        cfg.model.use_appearance_codebook = false;
                    }
                    cfg.validate()?;
                    TrainState::new(&cfg, &dev)?
                }
            };
            let target = steps.unwrap_or(state.config().train.steps);
            train(&mut state, &data, &out, target, checkpoint_every)
        }
        Command::Reconstruct {
            checkpoint,
            data,
            out,
            split,
            fps,
        } => {
            let model = load_checkpoint(&checkpoint, &dev)?.model;
            let dataset = FrameDataset::load(&data)?;
            check_size(&model, dataset.size)?;
            let videos: Vec<_> = dataset
                .videos
                .iter()
                .filter(|v| match split {
                    SplitArg::Train => v.split == Split::Train,
                    SplitArg::Test => v.split == Split::Test,
                    SplitArg::All => true,
                })
                .cloned()
                .collect();
            if videos.is_empty() {
                return Err(Error::Config(format!("no {split:?} videos in {}", data.display())));
            }
            let mut generated = Vec::with_capacity(videos.len());
            for v in &videos {
                let mut g = reconstruct_video(&model, v, dataset.size)?;
                // Score what is written to disk.
                for f in &mut g.frames {
                    f.iter_mut().for_each(|x| *x = (x.clamp(0.0, 1.0) * 255.0).round() / 255.0);
                }
                write_frames(&out.join(&g.id), &g.frames, dataset.size, fps)?;
                generated.push(g);
            }
            let report = score(&generated, &videos, dataset.size, Some(&model))?;
            write_report(&out.join("metrics.json"), &report)
        }
        Command::Reenact {
            checkpoint,
            source,
            driving,
            out,
            fps,
        } => {
            let model = load_checkpoint(&checkpoint, &dev)?.model;
            let (src, drv, size) = load_pair(&source, &driving)?;
            check_size(&model, size)?;
            let frames = reenact(&model, &src, &drv, size)?;
            write_frames(&out, &frames, size, fps)?;
            say!("wrote {} frames to {}", frames.len(), out.display());
            Ok(())
        }
        Command::Eval {
            generated,
            ground_truth,
            checkpoint,
            out,
        } => {
            let (gen, size) = load_video_folders(&generated)?;
            let (truth, gt_size) = load_video_folders(&ground_truth)?;
            if size != gt_size {
                return Err(Error::Config(format!(
                    "generated frames are {size}px, ground truth {gt_size}px"
                )));
            }
            let model = checkpoint
                .map(|c| load_checkpoint(&c, &dev).map(|s| s.model))
                .transpose()?;
            if let Some(m) = &model {
                check_size(m, size)?;
            }
            let report = score(&gen, &truth, size, model.as_ref())?;
            write_report(&out.unwrap_or_else(|| generated.join("metrics.json")), &report)
        }
        Command::DumpFlows {
            checkpoint,
            source,
            driving,
            out,
        } => {
            let model = load_checkpoint(&checkpoint, &dev)?.model;
            let (src, drv, size) = load_pair(&source, &driving)?;
            check_size(&model, size)?;
            mkdir(&out)?;
            for (f, frame) in drv.iter().enumerate() {
                let (s, d) = pair_tensors(&src, frame, size, &dev)?;
                let o = model.generate(&s, &d, false)?;
                dump_flow(&out, &format!("m0_{f:04}"), &o.initial_flow)?;
                for (k, step) in o.motion_steps.iter().enumerate() {
                    let i = k + 1;
                    let (_, h, w, _) = step.residual.dims4()?;
                    let residual = FlowField::identity(1, h, w, step.residual.dtype(), &dev)?
                        .add_displacement(&step.residual)?;
                    save_flow_png(&out.join(format!("mr{i}_{f:04}.png")), &residual, 0)?;
                    write_tensor_dump(&out.join(format!("mr{i}_{f:04}.bin")), FLOW_MAGIC, &step.residual)?;
                }
                for (k, flow) in o.flows.iter().enumerate() {
                    dump_flow(&out, &format!("m{}_{f:04}", k + 1), flow)?;
                }
            }
            say!("wrote flows of {} frames to {}", drv.len(), out.display());
            Ok(())
        }
        Command::DumpFeatures {
            checkpoint,
            source,
            driving,
            out,
        } => {
            let model = load_checkpoint(&checkpoint, &dev)?.model;
            if !model.config().model.use_appearance_codebook {
                return Err(Error::Config("model was trained without appearance compensation".into()));
            }
            let (src, drv, size) = load_pair(&source, &driving)?;
            check_size(&model, size)?;
            mkdir(&out)?;
            for (f, frame) in drv.iter().enumerate() {
                let (s, d) = pair_tensors(&src, frame, size, &dev)?;
                let o = model.generate(&s, &d, false)?;
                for (k, step) in o.appearance_steps.iter().enumerate() {
                    let i = k + 1;
                    for (tag, tokens) in [
                        ("w", &step.windowed_warped.tokens),
                        ("c", &step.windowed_compensated.tokens),
                    ] {
                        let name = format!("f{tag}{i}_{f:04}");
                        // Tokens are (1, h_a, w_a, d_a); images want (d_a, h_a, w_a).
                        let chw = tokens.get(0)?.permute((2, 0, 1))?;
                        save_feature_png(&out.join(format!("{name}.png")), &chw)?;
                        write_tensor_dump(&out.join(format!("{name}.bin")), FEATURE_MAGIC, tokens)?;
                    }
                }
            }
            say!("wrote features of {} frames to {}", drv.len(), out.display());
            Ok(())
        }
        Command::DumpCodebook { checkpoint, kind, out } => {
            let model = load_checkpoint(&checkpoint, &dev)?.model;
            let cb: &Codebook = match kind {
                KindArg::Motion => &model.motion_codebook,
                KindArg::Appearance => &model.appearance_codebook,
            };
            let bytes = io::codebook_dump_bytes(cb)?;
            std::fs::write(&out, bytes).map_err(|e| Error::io(&out, e))?;
            say!("wrote {} x {} codes to {}", cb.n_codes(), cb.dim(), out.display());
            Ok(())
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train(state: &mut TrainState, data: &Path, out: &Path, target: u64, checkpoint_every: u64) -> Result<()> {
    let dataset = FrameDataset::load(data)?;
    check_size(&state.model, dataset.size)?;
    if dataset.split(Split::Train).is_empty() {
        return Err(Error::Config(format!("{} has no training videos", data.display())));
    }
    mkdir(out)?;
    state.config().save(&out.join("config.toml"))?;
    let log_path = out.join("train_log.jsonl");
    if state.step == 0 && log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let ckpt_path = out.join("checkpoint.safetensors");
    let log_every = state.config().train.log_every.max(1);
    let start = Instant::now();
    while state.step < target {
        let chunk = if checkpoint_every > 0 {
            (checkpoint_every - state.step % checkpoint_every).min(target - state.step)
        } else {
            target - state.step
        };
        let mut log_error = None;
        state.train_on(&dataset, chunk, |r| {
            if let Err(e) = io::append_jsonl(&log_path, r) {
                log_error.get_or_insert(e);
            }
            if r.step % log_every == 0 || r.step + 1 == target {
                log::info!(
                    "step {} total {:.4} recon_l1 {:.4} disc {:.4} ({:.1}s)",
                    r.step,
                    r.total,
                    r.recon_l1,
                    r.discriminator,
                    start.elapsed().as_secs_f64()
                );
            }
        })?;
        if let Some(e) = log_error {
            return Err(e);
        }
        save_checkpoint(state, &ckpt_path)?;
    }
    say!("trained to step {} in {:.1}s; checkpoint {}", state.step, start.elapsed().as_secs_f64(), ckpt_path.display());
    Ok(())
}

fn check_size(model: &FaceAnimator, size: usize) -> Result<()> {
    let expected = model.config().model.image_size;
    if size != expected {
        return Err(Error::Config(format!("frames are {size}px but the model expects {expected}px")));
    }
    Ok(())
}

/// Source frame and driving frames (a PNG or a folder of PNGs).
fn load_pair(source: &Path, driving: &Path) -> Result<(Vec<f32>, Vec<Vec<f32>>, usize)> {
    let (src, w, h) = io::read_png(source)?;
    if w != h {
        return Err(Error::Config(format!("{}: source must be square", source.display())));
    }
    let (drv, size) = if driving.is_dir() {
        load_frame_folder(driving)?
    } else {
        let (d, dw, dh) = io::read_png(driving)?;
        if dw != dh {
            return Err(Error::Config(format!("{}: driving frame must be square", driving.display())));
        }
        (vec![d], dw)
    };
    if size != w {
        return Err(Error::Config(format!("source is {w}px, driving frames {size}px")));
    }
    Ok((src, drv, size))
}

fn pair_tensors(src: &[f32], drv: &[f32], size: usize, dev: &Device) -> Result<(Tensor, Tensor)> {
    Ok((
        FrameDataset::to_tensor(&[src], size, dev)?,
        FrameDataset::to_tensor(&[drv], size, dev)?,
    ))
}

fn dump_flow(dir: &Path, name: &str, flow: &FlowField) -> Result<()> {
    save_flow_png(&dir.join(format!("{name}.png")), flow, 0)?;
    write_tensor_dump(&dir.join(format!("{name}.bin")), FLOW_MAGIC, flow.grid())
}

/// Writes `0000.png ...` into `dir`, plus `<dir>.mp4` when ffmpeg exists.
fn write_frames(dir: &Path, frames: &[Vec<f32>], size: usize, fps: u32) -> Result<()> {
    mkdir(dir)?;
    for (i, f) in frames.iter().enumerate() {
        let rgb: Vec<u8> = f.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        write_png(&dir.join(format!("{i:04}.png")), &rgb, size, size)?;
    }
    encode_mp4(dir, &dir.with_extension("mp4"), fps)?;
    Ok(())
}

fn score(
    generated: &[crate::toolkit::VideoFrames],
    truth: &[crate::toolkit::VideoFrames],
    size: usize,
    model: Option<&FaceAnimator>,
) -> Result<MetricReport> {
    let embedder = model.map(|m| EncoderEmbedder {
        encoder: m.encoder.clone(),
        dtype: m.dtype(),
    });
    evaluate(
        generated,
        truth,
        size,
        &ColorLandmarker::default(),
        embedder.as_ref().map(|e| e as &dyn crate::toolkit::Embedder),
    )
}

fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    let json = report.to_json()?;
    std::fs::write(path, &json).map_err(|e| Error::io(path, e))?;
    say!("{json}");
    Ok(())
}
