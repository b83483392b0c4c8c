//! `pyrstyle`: train, stylize, process videos and benchmark.

mod y4m;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc::sync_channel;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use pyrstyle::bundle::ModelBundle;
use pyrstyle::extractor::{Extractor, VggVariant};
use pyrstyle::revision::StylizationStack;
use pyrstyle::training::{self, Stage, TrainingConfig};
use pyrstyle::{par, Error, Image};

/// Laplacian-pyramid style transfer.
#[derive(Parser, Debug)]
#[command(name = "pyrstyle", version)]
struct Cli {
    /// Log filter (`error`, `warn`, `info`, `debug`); RUST_LOG wins if set.
    #[arg(long, global = true, env = "PYRSTYLE_LOG", default_value = "info")]
    log: String,

    /// Run compute kernels on one thread.
    #[arg(long, global = true, env = "PYRSTYLE_SEQUENTIAL")]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the drafting network (stage 1).
    TrainDraft(TrainArgs),
    /// Train one revision level on top of an existing bundle.
    TrainRevision {
        #[command(flatten)]
        train: TrainArgs,
        /// Bundle holding the drafting network and all lower levels.
        #[arg(long, env = "PYRSTYLE_PRIOR")]
        prior: PathBuf,
        /// Level to train (1 = twice the draft resolution).
        #[arg(long, env = "PYRSTYLE_LEVEL", default_value_t = 1)]
        level: usize,
    },
    /// Stylize one image.
    Stylize {
        #[arg(long, env = "PYRSTYLE_BUNDLE")]
        bundle: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Revision levels to apply; defaults to all levels in the bundle.
        #[arg(long, env = "PYRSTYLE_LEVELS")]
        levels: Option<usize>,
    },
    /// Stylize a YUV4MPEG2 video frame by frame.
    Video {
        #[arg(long, env = "PYRSTYLE_BUNDLE")]
        bundle: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, env = "PYRSTYLE_LEVELS")]
        levels: Option<usize>,
        /// Overlap decode, stylization and encode on three threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Time the forward path (pyramid and networks).
    Benchmark {
        #[arg(long, env = "PYRSTYLE_BUNDLE")]
        bundle: PathBuf,
        #[arg(long, value_parser = ["256", "512"])]
        resolution: String,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Write a randomly initialised extractor archive.
    InitExtractor {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "vgg19")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Training flags; each overrides the matching key of `--config`.
#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML training configuration.
    #[arg(long, env = "PYRSTYLE_CONFIG")]
    config: Option<PathBuf>,
    /// Where the trained bundle is written.
    #[arg(long, env = "PYRSTYLE_OUT")]
    out: PathBuf,
    #[arg(long, env = "PYRSTYLE_CONTENT_DIR")]
    content_dir: Option<PathBuf>,
    #[arg(long, env = "PYRSTYLE_STYLE")]
    style: Option<PathBuf>,
    #[arg(long, env = "PYRSTYLE_RESOLUTION")]
    resolution: Option<usize>,
    #[arg(long, env = "PYRSTYLE_ITERATIONS")]
    iterations: Option<usize>,
    #[arg(long, env = "PYRSTYLE_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "PYRSTYLE_LEARNING_RATE")]
    learning_rate: Option<f64>,
    #[arg(long, env = "PYRSTYLE_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "PYRSTYLE_CHECKPOINT_EVERY")]
    checkpoint_every: Option<usize>,
    #[arg(long, env = "PYRSTYLE_CHECKPOINT_DIR")]
    checkpoint_dir: Option<PathBuf>,
    /// Loss log file (`step=<n> component=<name> value=<v>` lines).
    #[arg(long = "log-path", env = "PYRSTYLE_LOG_PATH")]
    log_path: Option<PathBuf>,
    /// Pretrained extractor archive (drafting stage only).
    #[arg(long, env = "PYRSTYLE_EXTRACTOR")]
    extractor: Option<PathBuf>,
    #[arg(long, env = "PYRSTYLE_LAMBDA_SS")]
    lambda_ss: Option<f64>,
    #[arg(long, env = "PYRSTYLE_LAMBDA_REMD")]
    lambda_remd: Option<f64>,
    #[arg(long, env = "PYRSTYLE_ALPHA")]
    alpha: Option<f64>,
    #[arg(long, env = "PYRSTYLE_BETA")]
    beta: Option<f64>,
}

impl TrainArgs {
    fn resolve(&self, stage: Stage) -> pyrstyle::Result<TrainingConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainingConfig::load(p)?,
            None => TrainingConfig::default(),
        };
        cfg.stage = stage;
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        set!(
            content_dir,
            iterations,
            batch_size,
            learning_rate,
            seed,
            checkpoint_every
        );
        if let Some(v) = &self.style {
            cfg.style_image = v.clone();
        }
        if let Some(v) = self.resolution {
            cfg.resolution = Some(v);
        }
        if let Some(v) = &self.checkpoint_dir {
            cfg.checkpoint_dir = Some(v.clone());
        }
        if let Some(v) = &self.log_path {
            cfg.log_path = Some(v.clone());
        }
        if let Some(v) = &self.extractor {
            cfg.extractor = Some(v.clone());
        }
        let w = &mut cfg.weights;
        for (dst, src) in [
            (&mut w.lambda_ss, self.lambda_ss),
            (&mut w.lambda_remd, self.lambda_remd),
            (&mut w.alpha, self.alpha),
            (&mut w.beta, self.beta),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Integrity(_) | Error::Version { .. }) => 3,
        Some(Error::Config(_) | Error::Parameter(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
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
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_target(false)
        .init();
    if cli.sequential {
        par::set_mode(par::Mode::Sequential);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::TrainDraft(args) => {
            let cfg = args.resolve(Stage::Draft)?;
            let run = training::train_drafting(&cfg)?;
            run.bundle.save(&args.out)?;
            println!("wrote {}", args.out.display());
        }
        Command::TrainRevision { train, prior, level } => {
            if level == 0 {
                return Err(Error::Config("--level must be at least 1".into()).into());
            }
            let cfg = train.resolve(Stage::Revision(level))?;
            let prior = ModelBundle::load(&prior).with_context(|| format!("loading {}", prior.display()))?;
            let run = training::train_revision(&cfg, &prior, level)?;
            run.bundle.save(&train.out)?;
            println!("wrote {}", train.out.display());
        }
        Command::Stylize {
            bundle,
            content,
            out,
            levels,
        } => stylize(&bundle, &content, &out, levels)?,
        Command::Video {
            bundle,
            input,
            output,
            levels,
            parallel,
        } => video(&bundle, &input, &output, levels, parallel)?,
        Command::Benchmark {
            bundle,
            resolution,
            iters,
            warmup,
        } => benchmark(&bundle, resolution.parse()?, iters, warmup)?,
        Command::InitExtractor { out, variant, seed } => {
            let variant: VggVariant = variant.parse()?;
            Extractor::random(variant, seed).save(&out)?;
            println!("wrote {} ({}, seed {})", out.display(), variant.name(), seed);
        }
    }
    Ok(())
}

fn load_stack(bundle: &Path, levels: Option<usize>) -> anyhow::Result<(StylizationStack, usize)> {
    let b = ModelBundle::load(bundle).with_context(|| format!("loading bundle {}", bundle.display()))?;
    let levels = levels.unwrap_or(b.levels());
    if levels > b.levels() {
        return Err(Error::Config(format!(
            "bundle has {} revision levels (available: 0..={}), {} requested",
            b.levels(),
            b.levels(),
            levels
        ))
        .into());
    }
    Ok((b.stack(), levels))
}

/// Reflection-pads to the size multiple, stylizes and crops back. Returns the
/// clamped result and the per-stage timings.
fn stylize_frame(
    stack: &StylizationStack,
    img: &Image,
    levels: usize,
) -> pyrstyle::Result<(Image, Vec<(String, Duration)>, Option<(usize, usize)>)> {
    let m = StylizationStack::size_multiple(levels);
    let (h, w) = img.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = (ph, pw) != (h, w);
    let input = if padded { img.pad_reflect(ph, pw)? } else { img.clone() };
    let s = stack.stylize(&input, levels)?;
    let mut out = s.clamped();
    if padded {
        out = out.crop(0, 0, h, w)?;
    }
    Ok((out, s.timings, padded.then_some((ph, pw))))
}

/// Writes through a sibling temporary file so a failed run leaves nothing.
fn save_atomically(img: &Image, out: &Path) -> anyhow::Result<()> {
    let name = out
        .file_name()
        .context("output path has no file name")?
        .to_string_lossy()
        .into_owned();
    let tmp = out.with_file_name(format!(".{}.{}.tmp.{}", name, std::process::id(), ext_of(out)));
    let res = img.save(&tmp).and_then(|_| {
        std::fs::rename(&tmp, out).map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        })
    });
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(res?)
}

fn ext_of(p: &Path) -> String {
    p.extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_else(|| "png".into())
}

fn stylize(bundle: &Path, content: &Path, out: &Path, levels: Option<usize>) -> anyhow::Result<()> {
    let (stack, levels) = load_stack(bundle, levels)?;
    let img = Image::load(content)?;
    let (result, timings, padded) = stylize_frame(&stack, &img, levels)?;
    if let Some((ph, pw)) = padded {
        println!(
            "padded {}x{} to {}x{} by reflection, cropped back",
            img.width(),
            img.height(),
            pw,
            ph
        );
    }
    for (stage, t) in &timings {
        println!("stage={} seconds={:.6}", stage, t.as_secs_f64());
    }
    save_atomically(&result, out)?;
    println!(
        "wrote {} ({}x{}, {} revision levels)",
        out.display(),
        result.width(),
        result.height(),
        levels
    );
    Ok(())
}

fn video(bundle: &Path, input: &Path, output: &Path, levels: Option<usize>, parallel: bool) -> anyhow::Result<()> {
    let (stack, levels) = load_stack(bundle, levels)?;
    let file = File::open(input).map_err(|e| Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let mut reader = y4m::Reader::new(BufReader::new(file))?;
    let header = reader.header().clone();
    let tmp = output.with_file_name(format!(
        ".{}.{}.tmp",
        output
            .file_name()
            .context("output path has no file name")?
            .to_string_lossy(),
        std::process::id()
    ));
    let out_file = File::create(&tmp).map_err(|e| Error::Io {
        path: tmp.clone(),
        source: e,
    })?;
    let mut writer = y4m::Writer::new(BufWriter::new(out_file), header)?;
    let result = if parallel {
        video_pipelined(&stack, levels, reader, &mut writer)
    } else {
        let mut n = 0;
        loop {
            match reader.next_frame() {
                Ok(Some(frame)) => {
                    let (img, _, _) = stylize_frame(&stack, &frame, levels).with_context(|| format!("frame {}", n))?;
                    writer.write_frame(&img)?;
                    n += 1;
                }
                Ok(None) => break Ok(n),
                Err(e) => break Err(e.into()),
            }
        }
    };
    let finished = result.and_then(|n| {
        writer.finish()?;
        std::fs::rename(&tmp, output).map_err(|e| Error::Io {
            path: output.to_path_buf(),
            source: e,
        })?;
        Ok(n)
    });
    match finished {
        Ok(n) => {
            println!("wrote {} ({} frames, {} revision levels)", output.display(), n, levels);
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Decode, stylize and encode on three threads; frame order is preserved
/// because every stage is a single FIFO worker.
fn video_pipelined<W: std::io::Write>(
    stack: &StylizationStack,
    levels: usize,
    mut reader: y4m::Reader<BufReader<File>>,
    writer: &mut y4m::Writer<W>,
) -> anyhow::Result<usize> {
    std::thread::scope(|s| {
        let (frames_tx, frames_rx) = sync_channel::<pyrstyle::Result<Image>>(2);
        let (styled_tx, styled_rx) = sync_channel::<anyhow::Result<Image>>(2);
        s.spawn(move || loop {
            let next = reader.next_frame().transpose();
            let Some(item) = next else { break };
            let stop = item.is_err();
            if frames_tx.send(item).is_err() || stop {
                break;
            }
        });
        s.spawn(move || {
            for (n, item) in frames_rx.into_iter().enumerate() {
                let res = item.map_err(anyhow::Error::from).and_then(|f| {
                    Ok(stylize_frame(stack, &f, levels)
                        .with_context(|| format!("frame {}", n))?
                        .0)
                });
                let stop = res.is_err();
                if styled_tx.send(res).is_err() || stop {
                    break;
                }
            }
        });
        let mut n = 0;
        for item in styled_rx {
            writer.write_frame(&item?)?;
            n += 1;
        }
        Ok(n)
    })
}

/// Synthetic content so timings exclude decoding.
fn bench_image(size: usize) -> Image {
    Image::from_fn(size, size, |c, y, x| {
        let v = ((x as f32 * 0.05 + c as f32).sin() * (y as f32 * 0.03).cos()) * 0.5 + 0.5;
        v.clamp(0.0, 1.0)
    })
}

fn device_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let mode = match par::mode() {
        par::Mode::Parallel => "parallel",
        par::Mode::Sequential => "sequential",
    };
    format!("CPU {} ({} threads, {} kernels)", cpu, par::threads(), mode)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

fn benchmark(bundle: &Path, resolution: usize, iters: usize, warmup: usize) -> anyhow::Result<()> {
    let b = ModelBundle::load(bundle).with_context(|| format!("loading bundle {}", bundle.display()))?;
    let Some(levels) = b.manifest.stage_resolutions.iter().position(|&r| r == resolution) else {
        bail!(Error::Config(format!(
            "bundle does not support {} px (stage resolutions {:?})",
            resolution, b.manifest.stage_resolutions
        )));
    };
    let stack = b.stack();
    let img = bench_image(resolution);
    println!("reference (context only, not asserted): 0.008 s at 256 px, 0.009 s at 512 px on a Titan X GPU");
    println!("device: {}", device_description());
    println!(
        "resolution: {} px, revision levels: {}, warmup: {}, iters: {}",
        resolution, levels, warmup, iters
    );
    for _ in 0..warmup {
        stack.stylize(&img, levels)?;
    }
    if iters == 0 {
        println!("note: warmup only, no timed iterations, no statistics");
        return Ok(());
    }
    let mut secs = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let out = stack.stylize(&img, levels)?;
        secs.push(t.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    secs.sort_by(f64::total_cmp);
    let mean = secs.iter().sum::<f64>() / secs.len() as f64;
    println!(
        "mean_s={:.6} median_s={:.6} p95_s={:.6} images_per_s={:.3}",
        mean,
        percentile(&secs, 0.5),
        percentile(&secs, 0.95),
        1.0 / mean
    );
    Ok(())
}
