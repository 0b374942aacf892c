use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use scan_core::config::{read_class_spec, read_scene_spec, RunConfig};
use scan_core::inference::{run_pipeline, run_pipeline_oracle, run_pipeline_timed, OracleHeads, Timings};
use scan_core::io::{read_labels_for, read_point_bin, write_labels, write_point_bin};
use scan_core::metrics::{accumulate_frame, finalize, PanopticStats};
use scan_core::synth::{benchmark_scene, synth_frames, uniform_cloud};
use scan_core::weights::{init_weights, Model, ModelWeights};
use scan_core::{check, PointLabels, ScanError, WeightFileError};

#[derive(Parser)]
#[command(name = "scan", version, about = "Sparse cross-scale attention panoptic segmentation for LiDAR scans")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic .bin/.label pairs from a scene file
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a seeded weight file
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict .label files for every .bin in a directory
    Infer(InferArgs),
    /// Score predicted labels against ground truth
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        /// CSV report path, defaults to <pred>/metrics.csv
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the oracle equivalence and gradient suites
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time each pipeline stage on a uniform synthetic cloud
    Bench {
        #[arg(long, default_value_t = 100_000)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fill the whole range volume uniformly instead of a scan-like scene
        #[arg(long)]
        uniform: bool,
    },
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight file; mutually exclusive with --seed
    #[arg(long, conflicts_with = "seed", required_unless_present_any = ["seed", "oracle"])]
    weights: Option<PathBuf>,
    /// Use seeded random weights
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replace the network heads with ground truth read from the input .label files
    #[arg(long)]
    oracle: bool,
    /// Worker threads for frame-level parallelism (0 = all cores)
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::read(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

/// `.bin` stems in `dir`, sorted.
fn frame_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(s.to_owned());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn synth(spec: &Path, out_dir: &Path) -> Result<()> {
    let spec = read_scene_spec(spec).with_context(|| format!("reading scene {}", spec.display()))?;
    std::fs::create_dir_all(out_dir)?;
    for (k, (cloud, labels)) in synth_frames(&spec)?.into_iter().enumerate() {
        write_point_bin(&out_dir.join(format!("{k:06}.bin")), &cloud)?;
        write_labels(&out_dir.join(format!("{k:06}.label")), &labels)?;
    }
    eprintln!("wrote {} frame(s) to {}", spec.frames, out_dir.display());
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let p = &cfg.pipeline;
    let model = if a.oracle {
        None
    } else {
        let w = match (&a.weights, a.seed) {
            (Some(path), _) => ModelWeights::load(path).with_context(|| format!("loading weights {}", path.display()))?,
            (None, Some(seed)) => init_weights(p, seed),
            (None, None) => bail!("either --weights or --seed is required"),
        };
        Some(Model::from_weights(&w, p)?)
    };
    let stems = frame_stems(&a.input)?;
    std::fs::create_dir_all(&a.out)?;
    let run = |stem: &String| -> Result<()> {
        let cloud = read_point_bin(&a.input.join(format!("{stem}.bin")))?;
        let pred = match &model {
            Some(m) => run_pipeline(&cloud, m, p)?,
            None => {
                let gt = read_labels_for(&a.input.join(format!("{stem}.label")), cloud.len())?;
                run_pipeline_oracle(&cloud, &OracleHeads::from_ground_truth(&cloud, &gt, p)?, p)?
            }
        };
        write_labels(&a.out.join(format!("{stem}.label")), &pred.to_labels())?;
        Ok(())
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.threads).build()?;
    pool.install(|| stems.par_iter().try_for_each(|s| run(s).with_context(|| format!("frame {s}"))))?;
    eprintln!("predicted {} frame(s) into {}", stems.len(), a.out.display());
    Ok(())
}

fn eval(gt_dir: &Path, pred_dir: &Path, classes: &Path, csv: Option<&Path>) -> Result<()> {
    let spec = read_class_spec(classes).with_context(|| format!("reading classes {}", classes.display()))?;
    let stems = frame_stems(gt_dir)?;
    if stems.is_empty() {
        bail!("no .bin frames in {}", gt_dir.display());
    }
    let deltas = stems
        .par_iter()
        .map(|stem| -> Result<PanopticStats> {
            let n = read_point_bin(&gt_dir.join(format!("{stem}.bin")))?.len();
            let gt: PointLabels = read_labels_for(&gt_dir.join(format!("{stem}.label")), n)?;
            let pred = read_labels_for(&pred_dir.join(format!("{stem}.label")), n)?;
            Ok(accumulate_frame(&pred, &gt, &spec)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = PanopticStats::new(spec.n_classes());
    for d in &deltas {
        stats.merge(d)?;
    }
    let report = finalize(&stats, &spec)?;
    print!("{}", report.to_text(&spec));
    let csv_path = csv.map(Path::to_path_buf).unwrap_or_else(|| pred_dir.join("metrics.csv"));
    std::fs::write(&csv_path, report.to_csv(&spec)).with_context(|| format!("writing {}", csv_path.display()))?;
    eprintln!("evaluated {} frame(s); CSV written to {}", stems.len(), csv_path.display());
    Ok(())
}

fn run_check(seed: u64) -> Result<bool> {
    let results = check::run_all(seed);
    for r in &results {
        println!("{r}");
    }
    Ok(results.iter().all(|r| r.passed))
}

fn bench(points: usize, seed: u64, config: Option<&Path>, uniform: bool) -> Result<()> {
    let cfg = load_config(config)?.pipeline;
    let t0 = Instant::now();
    let model = Model::from_weights(&init_weights(&cfg, seed), &cfg)?;
    let init = t0.elapsed();
    let cloud = if uniform {
        uniform_cloud(points, &cfg.range, seed)
    } else {
        benchmark_scene(points, &cfg.range, seed)?.0
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let mut timings = Timings::default();
    let start = Instant::now();
    let pred = pool.install(|| run_pipeline_timed(&cloud, &model, &cfg, Some(&mut timings)))?;
    let total = start.elapsed();
    println!("points {}  centroids {}", cloud.len(), pred.centroids.len());
    println!("{:<12} {:>10.2} ms", "weights", init.as_secs_f64() * 1e3);
    for (name, d) in &timings.0 {
        println!("{name:<12} {:>10.2} ms", d.as_secs_f64() * 1e3);
    }
    println!("{:<12} {:>10.2} ms", "total", total.as_secs_f64() * 1e3);
    Ok(())
}

/// Weight-file failures exit with their own code; everything else with 1.
fn exit_status(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| match c.downcast_ref::<ScanError>() {
            Some(ScanError::WeightFile(w)) => Some(w.code()),
            _ => c.downcast_ref::<WeightFileError>().map(WeightFileError::code),
        })
        .map_or(1, |c| c as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Synth { spec, out_dir } => synth(spec, out_dir).map(|_| true),
        Cmd::Init { config, seed, out } => load_config(config.as_deref())
            .and_then(|c| Ok(init_weights(&c.pipeline, *seed).save(out)?))
            .map(|_| true),
        Cmd::Infer(a) => infer(a).map(|_| true),
        Cmd::Eval { gt, pred, classes, csv } => eval(gt, pred, classes, csv.as_deref()).map(|_| true),
        Cmd::Check { seed } => run_check(*seed),
        Cmd::Bench {
            points,
            seed,
            config,
            uniform,
        } => bench(*points, *seed, config.as_deref(), *uniform).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
