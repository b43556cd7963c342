//! `passt` command line: tokenize clips, run the network, train toys,
//! benchmark attention cost, and evaluate logits.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, bad config file),
//! 2 runtime error (missing files, shape mismatches, numeric failures).

mod settings;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use passt::bench::{fit_scaling_exponent, measure_throughput, write_bench_csv, CostTerm};
use passt::eval::{accuracy, ensemble_logits, mean_ap, PredictionSet};
use passt::frontend::{self, mel_spectrogram, HOP_SAMPLES, SAMPLE_RATE};
use passt::linalg::Mat;
use passt::net::{model_forward, ModelParams};
use passt::rng;
use passt::tensorbin::{Container, Tensor};
use passt::tokenizer::{
    add_positional, append_special, apply_patchout, extract_patch_grid, project_patches,
    PatchoutMode, PatchoutSpec, PositionalTables, TokenTag, PATCH_DIM,
};
use passt::train::{load_manifest, train_loop, write_metrics_csv, TrainConfig};
use settings::{parse_patchout, Settings};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "passt",
    version,
    about = "Patchout spectrogram transformer for audio tagging",
    after_help = "The seed defaults to --seed, then the config file, then $PASST_SEED, then 0."
)]
struct Cli {
    /// Flat key=value config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cut a clip into patch tokens and report patch/kept/sequence counts.
    Tokenize {
        /// Patch stride in both directions (shorthand for stride_f/stride_t).
        #[arg(long)]
        stride: Option<usize>,
        /// none, unstructured:K, or structured:F,T (applied in training mode).
        #[arg(long, value_parser = parse_patchout)]
        patchout: Option<PatchoutMode>,
        /// Write the surviving token embeddings and grid tags to a TENSORBIN file.
        #[arg(long, value_name = "FILE")]
        dump: Option<PathBuf>,
        /// Mono 32 kHz WAV file.
        wav: PathBuf,
    },
    /// Run the network on a clip and print the top-scoring classes.
    Forward {
        /// TENSORBIN weights matching the configured model shape.
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
        /// Write logits (1 x n_classes) to a TENSORBIN file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Mono 32 kHz WAV file.
        wav: PathBuf,
    },
    /// Train a small model from scratch on a JSONL manifest.
    TrainToy {
        /// JSONL manifest: {"id": ..., "wav": ..., "labels": [...]} per line.
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Where to save the trained weights.
        #[arg(long, value_name = "FILE")]
        out_weights: PathBuf,
        /// Write a per-step metrics CSV.
        #[arg(long, value_name = "FILE")]
        metrics: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Clips are padded or cropped to this length; the positional
        /// tables are sized to match it.
        #[arg(long)]
        clip_seconds: Option<f64>,
        /// Examples drawn per epoch (default: the whole dataset).
        #[arg(long)]
        epoch_size: Option<usize>,
        /// Waveform and spectrogram augmentation on or off.
        #[arg(long)]
        augment: Option<bool>,
        #[arg(long, value_parser = parse_patchout)]
        patchout: Option<PatchoutMode>,
        /// Multiplier on the schedule's learning rates.
        #[arg(long)]
        lr_scale: Option<f64>,
    },
    /// Measure analytic and empirical attention cost over sequence length.
    Bench {
        /// Sequence lengths to measure.
        #[arg(long, value_delimiter = ',', default_value = "254,474,790,1190")]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Lengths whose activation estimate exceeds this are marked OOM.
        #[arg(long, default_value_t = 16.0)]
        mem_limit_gb: f64,
        /// CSV destination (default: stdout, with diagnostics on stderr).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Average several logit files; report mAP when targets are given.
    Ensemble {
        /// Where to save the averaged logits.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// TENSORBIN with a `targets` tensor (examples x classes, 0/1).
        #[arg(long, value_name = "FILE")]
        targets: Option<PathBuf>,
        /// Two or more TENSORBIN files with a `logits` tensor.
        #[arg(required = true)]
        logits: Vec<PathBuf>,
    },
    /// Score a logit file against targets (mAP, plus accuracy if one-hot).
    Eval {
        #[arg(long, value_name = "FILE")]
        logits: PathBuf,
        #[arg(long, value_name = "FILE")]
        targets: PathBuf,
    },
    /// Shorten a model's time positional table for shorter clips.
    CropTimePos {
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Spectrogram frame count the cropped model should support.
        #[arg(long)]
        frames: usize,
    },
}

enum Failure {
    Usage(String),
    Run(passt::Error),
}

impl From<passt::Error> for Failure {
    fn from(e: passt::Error) -> Self {
        Failure::Run(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

type CmdResult = Result<(), Failure>;

fn main() {
    // Die quietly when the consumer closes the pipe (e.g. CSV into `head`)
    // instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    let s = Settings::load(cli.config.as_deref()).map_err(usage)?;
    let seed = s.resolve_seed(cli.seed).map_err(usage)?;
    match cli.cmd {
        Cmd::Tokenize {
            stride,
            patchout,
            dump,
            wav,
        } => cmd_tokenize(&s, seed, stride, patchout, dump.as_deref(), &wav),
        Cmd::Forward { weights, out, wav } => cmd_forward(&s, seed, &weights, out.as_deref(), &wav),
        Cmd::TrainToy {
            manifest,
            out_weights,
            metrics,
            batch_size,
            steps,
            clip_seconds,
            epoch_size,
            augment,
            patchout,
            lr_scale,
        } => {
            let mut s = s;
            if let Some(v) = batch_size {
                s.batch_size = v;
            }
            if let Some(v) = steps {
                s.steps = v;
            }
            if let Some(v) = clip_seconds {
                s.clip_seconds = v;
            }
            if let Some(v) = epoch_size {
                s.epoch_size = Some(v);
            }
            if let Some(v) = augment {
                s.augment = v;
            }
            if let Some(v) = patchout {
                s.patchout = v;
            }
            if let Some(v) = lr_scale {
                s.lr_scale = v;
            }
            cmd_train_toy(&s, seed, &manifest, &out_weights, metrics.as_deref())
        }
        Cmd::Bench {
            ns,
            batch,
            repeats,
            mem_limit_gb,
            out,
        } => cmd_bench(&s, seed, &ns, batch, repeats, mem_limit_gb, out.as_deref()),
        Cmd::Ensemble {
            out,
            targets,
            logits,
        } => cmd_ensemble(&s, seed, &out, targets.as_deref(), &logits),
        Cmd::Eval { logits, targets } => cmd_eval(&s, seed, &logits, &targets),
        Cmd::CropTimePos {
            weights,
            out,
            frames,
        } => cmd_crop_time_pos(&s, seed, &weights, &out, frames),
    }
}

/// Deterministic stand-in projection for `tokenize`, which reports counts
/// and grid layout rather than trained embeddings.
fn seeded_projection(rows: usize, cols: usize, seed: u64) -> Mat<f32> {
    Mat::from_fn(rows, cols, |i, j| {
        let bits = rng::derive(seed, &[6, (i * cols + j) as u64]);
        ((bits as f64 / u64::MAX as f64 - 0.5) * 0.04) as f32
    })
}

fn cmd_tokenize(
    base: &Settings,
    seed: u64,
    stride: Option<usize>,
    patchout: Option<PatchoutMode>,
    dump: Option<&Path>,
    wav_path: &Path,
) -> CmdResult {
    let mut s = base.clone();
    if let Some(st) = stride {
        s.stride_f = st;
        s.stride_t = st;
    }
    if let Some(p) = patchout {
        s.patchout = p;
    }
    let wave = frontend::load_pcm(wav_path)?;
    let spec = mel_spectrogram(&wave)?;
    s.frames = spec.frames();
    let geom = s.geometry(spec.frames())?;
    println!(
        "{}",
        s.header("tokenize", seed, &format!("wav={}", wav_path.display()))
    );

    let grid: Mat<f32> = extract_patch_grid(&spec, &geom)?;
    let proj = seeded_projection(PATCH_DIM, s.embed_dim, seed);
    let tokens = project_patches(&grid, &geom, &proj, &vec![0.0; s.embed_dim])?;
    let tables = PositionalTables::zeros(geom.f_p, geom.t_p, s.embed_dim);
    let tokens = add_positional(&tokens, &tables)?;
    let spec_po = PatchoutSpec {
        mode: s.patchout,
        seed,
    };
    let kept = apply_patchout(&tokens, &spec_po, true)?;
    let c_embed = vec![0.0f32; s.embed_dim];
    let d_embed = s.dist_token.then(|| vec![0.0f32; s.embed_dim]);
    let full = append_special(&kept, &c_embed, d_embed.as_deref())?;

    if s.patchout == PatchoutMode::None {
        println!("patches={} seq={}", geom.n_patches(), full.len());
    } else {
        println!(
            "patches={} kept={} seq={}",
            geom.n_patches(),
            kept.len(),
            full.len()
        );
    }

    if let Some(path) = dump {
        let mut out = Container::new();
        out.insert("embeddings", Tensor::from_mat(full.embeddings())?);
        let mut tag_f = Vec::with_capacity(full.len());
        let mut tag_t = Vec::with_capacity(full.len());
        for tag in full.tags() {
            let (f, t) = match tag {
                TokenTag::Class => (-1.0, -1.0),
                TokenTag::Dist => (-2.0, -2.0),
                TokenTag::Patch { f, t } => (*f as f32, *t as f32),
            };
            tag_f.push(f);
            tag_t.push(t);
        }
        out.insert("tag_f", Tensor::from_scalar_vec(vec![tag_f.len()], &tag_f)?);
        out.insert("tag_t", Tensor::from_scalar_vec(vec![tag_t.len()], &tag_t)?);
        out.save(path)?;
        println!("tokens written to {}", path.display());
    }
    Ok(())
}

fn cmd_forward(
    s: &Settings,
    seed: u64,
    weights: &Path,
    out: Option<&Path>,
    wav_path: &Path,
) -> CmdResult {
    let config = s.model_config(s.frames)?;
    let params: ModelParams<f32> = ModelParams::load_weights(weights, &config)?;
    let wave = frontend::load_pcm(wav_path)?;
    let spec = mel_spectrogram(&wave)?.normalize(s.norm_mean, s.norm_std);
    println!(
        "{}",
        s.header(
            "forward",
            seed,
            &format!(
                "wav={} weights={} norm_mean={} norm_std={}",
                wav_path.display(),
                weights.display(),
                s.norm_mean,
                s.norm_std
            )
        )
    );
    let logits = model_forward(&spec, &params, &config, &PatchoutSpec::none(), false)?;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    for &i in order.iter().take(5) {
        println!("class {i}: {:+.6}", logits[i]);
    }
    if let Some(path) = out {
        let mut c = Container::new();
        c.insert(
            "logits",
            Tensor::from_scalar_vec(vec![1, logits.len()], &logits)?,
        );
        c.save(path)?;
        println!("logits written to {}", path.display());
    }
    Ok(())
}

fn cmd_train_toy(
    s: &Settings,
    seed: u64,
    manifest: &Path,
    out_weights: &Path,
    metrics: Option<&Path>,
) -> CmdResult {
    if !(s.clip_seconds > 0.0 && s.clip_seconds.is_finite()) {
        return Err(usage(format!(
            "clip_seconds must be positive, got {}",
            s.clip_seconds
        )));
    }
    let clip_samples = (s.clip_seconds * SAMPLE_RATE as f64).round() as usize;
    let frames = 1 + clip_samples / HOP_SAMPLES;
    let config = s.model_config(frames)?;
    let mut hs = s.clone();
    hs.frames = frames;
    println!(
        "{}",
        hs.header(
            "train-toy",
            seed,
            &format!(
                "manifest={} batch_size={} steps={} clip_seconds={} epoch_size={} augment={} \
                 lr_max={} lr_min={} warm_hold_epochs={} decay_end_epoch={} finetune_epochs={} \
                 weight_decay={} lr_scale={} norm_mean={} norm_std={}",
                manifest.display(),
                s.batch_size,
                s.steps,
                s.clip_seconds,
                s.epoch_size.map_or("all".to_string(), |v| v.to_string()),
                s.augment,
                s.schedule.lr_max,
                s.schedule.lr_min,
                s.schedule.warm_hold_epochs,
                s.schedule.decay_end_epoch,
                s.schedule.finetune_epochs,
                s.schedule.weight_decay,
                s.lr_scale,
                s.norm_mean,
                s.norm_std
            )
        )
    );
    let dataset = load_manifest(manifest)?;
    let train_config = TrainConfig {
        batch_size: s.batch_size,
        steps: s.steps,
        clip_samples,
        epoch_size: s.epoch_size,
        patchout: s.patchout,
        augment: s.augment,
        seed,
        norm_mean: s.norm_mean,
        norm_std: s.norm_std,
    };
    let outcome = train_loop(&dataset, &config, &train_config, &s.schedule())?;
    outcome.params.save_weights(out_weights)?;
    println!("weights written to {}", out_weights.display());
    if let Some(path) = metrics {
        let mut file = std::fs::File::create(path)
            .map_err(|e| passt::Error::io(format!("cannot create {}: {e}", path.display())))?;
        write_metrics_csv(&outcome.metrics, &mut file)?;
        println!("metrics written to {}", path.display());
    }
    println!("final train mAP {:.4}", outcome.final_map);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    s: &Settings,
    seed: u64,
    ns: &[usize],
    batch: usize,
    repeats: usize,
    mem_limit_gb: f64,
    out: Option<&Path>,
) -> CmdResult {
    if !(mem_limit_gb > 0.0 && mem_limit_gb.is_finite()) {
        return Err(usage(format!(
            "mem_limit_gb must be positive, got {mem_limit_gb}"
        )));
    }
    let config = s.model_config(s.frames)?;
    let ns_text = ns
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let header = s.header(
        "bench",
        seed,
        &format!("ns={ns_text} batch={batch} repeats={repeats} mem_limit_gb={mem_limit_gb}"),
    );
    let rows = measure_throughput(&config, ns, batch, repeats, (mem_limit_gb * 1e9) as u64)?;
    let mut slopes = Vec::new();
    for (term, label) in [
        (CostTerm::AnalyticQuadratic, "analytic_quadratic"),
        (CostTerm::AnalyticLinear, "analytic_linear"),
        (CostTerm::EmpiricalTime, "empirical_time"),
    ] {
        if let Ok(slope) = fit_scaling_exponent(&rows, term) {
            slopes.push(format!("slope {label}={slope:.3}"));
        }
    }
    match out {
        Some(path) => {
            let mut file = std::fs::File::create(path)
                .map_err(|e| passt::Error::io(format!("cannot create {}: {e}", path.display())))?;
            write_bench_csv(&rows, &mut file)?;
            println!("{header}");
            println!("csv written to {}", path.display());
            for line in &slopes {
                println!("{line}");
            }
        }
        None => {
            // Keep stdout pure CSV; diagnostics go to stderr.
            eprintln!("{header}");
            write_bench_csv(&rows, &mut std::io::stdout())?;
            for line in &slopes {
                eprintln!("{line}");
            }
        }
    }
    Ok(())
}

/// Reads a named 2-D tensor as f64 regardless of stored precision.
fn load_mat_f64(path: &Path, name: &str) -> Result<Mat<f64>, Failure> {
    let container = Container::load(path)?;
    let tensor = container.require(name)?;
    match tensor.to_mat::<f64>(name) {
        Ok(m) => Ok(m),
        Err(_) => {
            let m = tensor.to_mat::<f32>(name)?;
            Ok(Mat::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) as f64))
        }
    }
}

fn cmd_ensemble(
    s: &Settings,
    seed: u64,
    out: &Path,
    targets: Option<&Path>,
    logit_paths: &[PathBuf],
) -> CmdResult {
    println!(
        "{}",
        s.header(
            "ensemble",
            seed,
            &format!(
                "files={}",
                logit_paths
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            )
        )
    );
    let mats = logit_paths
        .iter()
        .map(|p| load_mat_f64(p, "logits"))
        .collect::<Result<Vec<_>, _>>()?;
    let avg = ensemble_logits(&mats)?;
    let mut c = Container::new();
    c.insert("logits", Tensor::from_mat(&avg)?);
    c.save(out)?;
    println!(
        "ensembled {} logit sets ({} examples, {} classes) into {}",
        mats.len(),
        avg.rows(),
        avg.cols(),
        out.display()
    );
    if let Some(path) = targets {
        let t = load_mat_f64(path, "targets")?;
        let preds = PredictionSet::new(avg, t)?;
        println!("map={:.6}", mean_ap(&preds)?);
    }
    Ok(())
}

fn cmd_eval(s: &Settings, seed: u64, logits_path: &Path, targets_path: &Path) -> CmdResult {
    println!(
        "{}",
        s.header(
            "eval",
            seed,
            &format!(
                "logits={} targets={}",
                logits_path.display(),
                targets_path.display()
            )
        )
    );
    let logits = load_mat_f64(logits_path, "logits")?;
    let targets = load_mat_f64(targets_path, "targets")?;
    let preds = PredictionSet::new(logits.clone(), targets.clone())?;
    println!(
        "examples={} classes={}",
        preds.n_examples(),
        preds.n_classes()
    );
    println!("map={:.6}", mean_ap(&preds)?);
    // Single-label sets also get plain accuracy.
    let one_hot: Option<Vec<usize>> = (0..targets.rows())
        .map(|i| {
            let row = targets.row(i);
            let positives: Vec<usize> = (0..row.len()).filter(|&j| row[j] == 1.0).collect();
            (positives.len() == 1).then(|| positives[0])
        })
        .collect();
    if let Some(classes) = one_hot {
        println!("accuracy={:.6}", accuracy(&logits, &classes)?);
    }
    Ok(())
}

fn cmd_crop_time_pos(
    s: &Settings,
    seed: u64,
    weights: &Path,
    out: &Path,
    frames: usize,
) -> CmdResult {
    let config = s.model_config(s.frames)?;
    let mut params: ModelParams<f32> = ModelParams::load_weights(weights, &config)?;
    let new_geom = s.geometry(frames)?;
    let old_rows = params.tables.time_table.rows();
    params.tables = passt::tokenizer::crop_time_table(&params.tables, new_geom.t_p)?;
    params.save_weights(out)?;
    println!(
        "{}",
        s.header(
            "crop-time-pos",
            seed,
            &format!("weights={} new_frames={frames}", weights.display())
        )
    );
    println!(
        "time table {old_rows} -> {} rows; load {} with frames={frames}",
        new_geom.t_p,
        out.display()
    );
    Ok(())
}
