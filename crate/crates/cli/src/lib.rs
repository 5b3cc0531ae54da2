//! `tmanet` command-line front end.

pub mod config;
pub mod ppm;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;
use tmanet::data::{synthetic_videos, verify_occluder_invariant, OccluderPolicy, SamplerMode, SyntheticSceneSpec};
use tmanet::evaluate::{evaluate, TEST_SEED};
use tmanet::gradcheck::{end_to_end_fixture, model_grad_check, op_suite, CheckResult, DEFAULT_EPS};
use tmanet::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset};
use tmanet::model::argmax_labels;
use tmanet::rng::stream_rng;
use tmanet::train::{format_log_line, init_training, run_training};

use crate::config::RunConfig;
use crate::ppm::Rgb;

/// Gradient checks must stay below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "TMA_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Core(#[from] tmanet::Error),
}

impl CliError {
    /// 1 usage, 2 verification failure, 3 I/O or file format.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 2,
            CliError::Core(tmanet::Error::Io { .. } | tmanet::Error::Format { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tmanet", version, about = "Temporal memory attention for video segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Occlude {
    None,
    Query,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckSize {
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sampler {
    Random,
    Continuous,
}

impl From<Sampler> for SamplerMode {
    fn from(s: Sampler) -> Self {
        match s {
            Sampler::Random => SamplerMode::Random,
            Sampler::Continuous => SamplerMode::Continuous,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic moving-shapes dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        /// Frame height and width.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Frames per video; each stored clip keeps every frame before the last as memory.
        #[arg(long, default_value_t = 30)]
        length: usize,
        #[arg(long, value_enum, default_value_t = Occlude::None)]
        occlude: Occlude,
        /// Defaults to $TMA_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Frames before the query in which every object is guaranteed visible.
        #[arg(long, default_value_t = 4)]
        memory: usize,
        #[arg(long, default_value_t = 2)]
        objects: usize,
        /// Probability that an object is hidden in any one earlier frame.
        #[arg(long, default_value_t = 0.0)]
        blink: f64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Check the occluder invariant on every generated video.
        #[arg(long)]
        verify: bool,
    },
    /// Train a model; writes model.tmac, train.log and config.txt into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data` from the config file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `key=value`, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sliding-window evaluation; prints per-class IoU, mIoU and pixel accuracy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Sampler::Continuous)]
        sampler: Sampler,
        #[arg(long, default_value_t = tmanet::data::DEFAULT_WINDOW)]
        window: usize,
    },
    /// Finite-difference check of every differentiable op and of a whole model.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = CheckSize::Tiny)]
        size: CheckSize,
    },
    /// Write the query frame, its predicted segmentation and attention heat maps as PPM.
    Demo {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        /// Query pixel as `y,x` in frame coordinates; defaults to the centre.
        #[arg(long)]
        pixel: Option<String>,
        #[arg(long, value_enum, default_value_t = Sampler::Continuous)]
        sampler: Sampler,
        #[arg(long)]
        dump_attention: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn seed_from_env() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| tmanet::Error::io(path, e).into()
}

/// Runs one command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { out: path, clips, size, length, occlude, seed, memory, objects, blink, classes, verify } => {
            if clips == 0 {
                return Err(CliError::Usage("empty dataset: --clips must be at least 1".into()));
            }
            let seed = match seed {
                Some(s) => s,
                None => seed_from_env()?.unwrap_or(0),
            };
            let spec = SyntheticSceneSpec {
                num_objects: objects,
                occluder: match occlude {
                    Occlude::None => OccluderPolicy::None,
                    Occlude::Query => OccluderPolicy::OccludeQueryOnly,
                },
                blink_prob: blink,
                num_classes: classes,
                seed,
                ..Default::default()
            };
            let videos = synthetic_videos(&spec, clips, memory, size, length)?;
            if verify {
                for (i, v) in videos.iter().enumerate() {
                    verify_occluder_invariant(v, memory, spec.background_class)
                        .map_err(|e| CliError::Verification(format!("video {i}: {e}")))?;
                }
            }
            let snippets: Vec<_> = videos.iter().map(|v| v.final_snippet()).collect();
            save_dataset(&path, &snippets)?;
            writeln!(out, "wrote {clips} clips of {length} frames {size}x{size} to {}", path.display()).map_err(io_err(&path))?;
            if verify {
                writeln!(out, "occluder invariant verified").map_err(io_err(&path))?;
            }
        }

        Command::Train { config, data, out: dir, overrides, resume } => {
            let mut cfg = RunConfig::default();
            if let Some(p) = &config {
                cfg.apply_text(&fs::read_to_string(p).map_err(io_err(p))?)?;
            }
            for o in &overrides {
                cfg.apply_override(o)?;
            }
            if let Some(seed) = seed_from_env()? {
                cfg.seed = seed;
            }
            if let Some(d) = data {
                cfg.data = d.to_string_lossy().into_owned();
            }
            if cfg.data.is_empty() {
                return Err(CliError::Usage("no training data: pass --data or set `data` in the config".into()));
            }
            let model_cfg = cfg.model_config()?;
            let train_cfg = cfg.train_config()?;
            let dataset = load_dataset(Path::new(&cfg.data))?;

            let (mut model, mut optim) = match &resume {
                Some(p) => {
                    let (model, optim) = load_checkpoint(p)?;
                    if model.config() != &model_cfg {
                        return Err(CliError::Usage(format!("{} was trained with a different model config", p.display())));
                    }
                    let optim = optim.ok_or_else(|| CliError::Usage(format!("{} has no optimizer state", p.display())))?;
                    (model, optim)
                }
                None => init_training(&model_cfg, &train_cfg)?,
            };

            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let config_path = dir.join("config.txt");
            fs::write(&config_path, cfg.to_text()).map_err(io_err(&config_path))?;
            let log_path = dir.join("train.log");
            let log_file = if resume.is_some() {
                OpenOptions::new().append(true).create(true).open(&log_path)
            } else {
                File::create(&log_path)
            }
            .map_err(io_err(&log_path))?;
            let mut log = BufWriter::new(log_file);

            let started = Instant::now();
            let mut last = String::new();
            run_training(&mut model, &mut optim, &train_cfg, &dataset, |s| {
                last = format_log_line(s);
                writeln!(log, "{last}").map_err(|e| tmanet::Error::io(&log_path, e))
            })?;
            log.flush().map_err(io_err(&log_path))?;
            let ckpt = dir.join("model.tmac");
            save_checkpoint(&ckpt, &model, Some(&optim))?;
            writeln!(out, "trained to iteration {} in {:.1?}; last: {last}", optim.iteration, started.elapsed())
                .map_err(io_err(&dir))?;
        }

        Command::Eval { ckpt, data, sampler, window } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let snippets = load_dataset(&data)?;
            let report = evaluate(&model, &snippets, sampler.into(), window, TEST_SEED)?;
            write!(out, "{}", report.to_text()).map_err(io_err(&data))?;
        }

        Command::Gradcheck { size: CheckSize::Tiny } => {
            let started = Instant::now();
            let mut results = op_suite(5)?;
            let (model, clip) = end_to_end_fixture()?;
            let per_param = model_grad_check(&model, &clip, model.config().aux_loss_weight, DEFAULT_EPS)?;
            let worst_param = worst(&per_param).expect("model has parameters");
            results.push(CheckResult { name: format!("end_to_end[{}]", worst_param.name), max_rel_error: worst_param.max_rel_error });
            let stdout_err = |e| CliError::from(tmanet::Error::io("<stdout>", e));
            for r in &results {
                let verdict = if r.max_rel_error < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
                writeln!(out, "{}\t{:.3e}\t{verdict}", r.name, r.max_rel_error).map_err(stdout_err)?;
            }
            writeln!(out, "checked {} ops and {} model parameters in {:.1?}", results.len() - 1, per_param.len(), started.elapsed())
                .map_err(stdout_err)?;
            let w = worst(&results).expect("suite is non-empty");
            if !(w.max_rel_error < GRADCHECK_TOLERANCE) {
                return Err(CliError::Verification(format!(
                    "worst op {} has relative error {:.3e} (tolerance {GRADCHECK_TOLERANCE:e})",
                    w.name, w.max_rel_error
                )));
            }
        }

        Command::Demo { ckpt, data, clip, pixel, sampler, dump_attention, out: dir } => {
            demo(&ckpt, &data, clip, pixel.as_deref(), sampler.into(), dump_attention, &dir, out)?;
        }
    }
    Ok(())
}

/// Highest error; NaN counts as worst.
fn worst(results: &[CheckResult]) -> Option<&CheckResult> {
    results.iter().max_by(|a, b| {
        let key = |r: &CheckResult| if r.max_rel_error.is_nan() { f64::INFINITY } else { r.max_rel_error };
        key(a).total_cmp(&key(b))
    })
}

fn parse_pixel(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--pixel '{s}' is not y,x"));
    let (y, x) = s.split_once(',').ok_or_else(bad)?;
    Ok((y.trim().parse().map_err(|_| bad())?, x.trim().parse().map_err(|_| bad())?))
}

#[allow(clippy::too_many_arguments)]
fn demo(
    ckpt: &Path,
    data: &Path,
    index: usize,
    pixel: Option<&str>,
    sampler: SamplerMode,
    dump_attention: bool,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(ckpt)?;
    let snippets = load_dataset(data)?;
    let source = snippets
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("--clip {index} out of range for {} clips", snippets.len())))?;
    let t = model.config().memory_length;
    if dump_attention && t == 0 {
        return Err(CliError::Usage("--dump-attention needs a model with memory (memory_length > 0)".into()));
    }
    let mut rng = stream_rng(TEST_SEED, &[0xDE70, index as u64]);
    let clip = source.select_memory(t, sampler, tmanet::data::DEFAULT_WINDOW.max(t), &mut rng)?;
    let prediction = model.predict(&clip)?;
    let labels = argmax_labels(&prediction.main_logits)?;

    fs::create_dir_all(dir).map_err(io_err(dir))?;
    Rgb::from_frame(&clip.query)?.save(&dir.join("query.ppm"))?;
    Rgb::from_labels(&labels).save(&dir.join("prediction.ppm"))?;
    let stdout_err = |e| CliError::from(tmanet::Error::io("<stdout>", e));
    writeln!(out, "wrote query.ppm and prediction.ppm to {}", dir.display()).map_err(stdout_err)?;

    if dump_attention {
        let attention = prediction.attention.expect("memory_length > 0 yields attention");
        let (height, width) = (clip.height(), clip.width());
        let (y, x) = match pixel {
            Some(p) => parse_pixel(p)?,
            None => (height / 2, width / 2),
        };
        if y >= height || x >= width {
            return Err(CliError::Usage(format!("--pixel {y},{x} outside {height}x{width} frame")));
        }
        let (h, w) = attention.grid();
        let os = model.config().output_stride();
        let query_pos = (y / os).min(h - 1) * w + (x / os).min(w - 1);
        let maps = attention.frame_maps(query_pos);
        let max = maps.iter().flat_map(|m| m.iter()).copied().fold(0.0, f64::max);

        let table_path = dir.join("attention.tsv");
        let mut table = String::from("frame\ty\tx\tweight\n");
        for (f, m) in maps.iter().enumerate() {
            Rgb::heat(m, h, w, max).save(&dir.join(format!("attention_{f}.ppm")))?;
            for (i, v) in m.iter().enumerate() {
                table.push_str(&format!("{f}\t{}\t{}\t{v}\n", i / w, i % w));
            }
        }
        fs::write(&table_path, table).map_err(io_err(&table_path))?;
        let total: f64 = maps.iter().flat_map(|m| m.iter()).sum();
        writeln!(
            out,
            "attention for pixel {y},{x} (feature cell {},{}): {} maps of {h}x{w}, weights sum to {total}",
            query_pos / w,
            query_pos % w,
            maps.len()
        )
        .map_err(stdout_err)?;
    }
    Ok(())
}
