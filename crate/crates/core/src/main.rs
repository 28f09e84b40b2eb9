//! Command-line frontend: `estimate`, `simulate`, `eval` and `iwe`.
//!
//! Exit codes: 0 success, 1 input error, 2 estimation produced zero outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use evttc::event::{parse_bbox_track, parse_events, CameraIntrinsics, DEFAULT_REORDER_CAPACITY};
use evttc::eval::{
    build_iwe, contrast, evaluate_against_gt, parse_ground_truth_csv, write_iwe_pgm, WarpModel,
};
use evttc::linear_solver::AffineParams;
use evttc::pipeline::{parse_estimates_csv, run_pipeline, write_estimates_csv, PipelineConfig};
use evttc::simulator::{generate_events, write_ground_truth_csv, SceneConfig};
use evttc::event as event_mod;

#[derive(Parser)]
#[command(name = "evttc", about = "Event-camera time-to-collision estimation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the TTC estimator over an event file and a bounding-box track.
    Estimate {
        /// Event file, text lines `t_us x y p`.
        #[arg(long)]
        events: PathBuf,
        /// Bounding-box track CSV `t_s,x_min,y_min,x_max,y_max,track_id`.
        #[arg(long)]
        boxes: PathBuf,
        /// Intrinsics JSON with fx, fy, cx, cy, width, height.
        #[arg(long)]
        intrinsics: PathBuf,
        /// Pipeline config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV of TTC estimates.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic approach scene.
    Simulate {
        /// Scene config JSON.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long = "out-events")]
        out_events: PathBuf,
        #[arg(long = "out-gt")]
        out_gt: PathBuf,
        /// Overrides the scene's rng seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score estimates against simulator ground truth.
    Eval {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Output CSV with per-row and mean relative TTC error.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an image of warped events for model comparison.
    Iwe {
        #[arg(long)]
        events: PathBuf,
        /// Affine params as `ax,ay,az` (1/s).
        #[arg(long)]
        params: String,
        /// Reference time in seconds.
        #[arg(long)]
        tref: f64,
        #[arg(long, value_enum, default_value_t = ModelArg::Tv)]
        model: ModelArg,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Output PGM image.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    /// Time-variant model (params anchored at Z(t_ref)).
    Tv,
    /// Constant-flow baseline (params anchored at the slice start).
    Const,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn open_reader(path: &PathBuf) -> Result<BufReader<File>, String> {
    File::open(path).map(BufReader::new).map_err(|e| format!("{}: {e}", path.display()))
}

fn create_writer(path: &PathBuf) -> Result<BufWriter<File>, String> {
    File::create(path).map(BufWriter::new).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_intrinsics(path: &PathBuf) -> Result<CameraIntrinsics, String> {
    CameraIntrinsics::from_json_reader(open_reader(path)?)
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Estimate { events, boxes, intrinsics, config, out } => {
            let intr = load_intrinsics(&intrinsics)?;
            let slice =
                parse_events(open_reader(&events)?, intr.width, intr.height, DEFAULT_REORDER_CAPACITY)
                    .map_err(|e| format!("{}: {e}", events.display()))?;
            let track = parse_bbox_track(open_reader(&boxes)?)
                .map_err(|e| format!("{}: {e}", boxes.display()))?;
            let cfg: PipelineConfig = match config {
                Some(path) => serde_json::from_reader(open_reader(&path)?)
                    .map_err(|e| format!("{}: {e}", path.display()))?,
                None => PipelineConfig::default(),
            };
            let output = run_pipeline(&slice, &track, &intr, &cfg);
            for d in &output.diagnostics {
                eprintln!("[{:.6}s] {}", d.t_s, d.message);
            }
            let mut writer = create_writer(&out)?;
            write_estimates_csv(&output.estimates, &mut writer).map_err(|e| e.to_string())?;
            writer.flush().map_err(|e| e.to_string())?;
            if output.estimates.is_empty() {
                eprintln!("no estimates produced");
                return Ok(ExitCode::from(2));
            }
            eprintln!("{} estimates written to {}", output.estimates.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { scene, out_events, out_gt, seed } => {
            let mut cfg: SceneConfig = serde_json::from_reader(open_reader(&scene)?)
                .map_err(|e| format!("{}: {e}", scene.display()))?;
            if let Some(seed) = seed {
                cfg.rng_seed = seed;
            }
            let (slice, gt) = generate_events(&cfg).map_err(|e| e.to_string())?;
            let mut ev_writer = create_writer(&out_events)?;
            event_mod::write_events(&slice, &mut ev_writer).map_err(|e| e.to_string())?;
            ev_writer.flush().map_err(|e| e.to_string())?;
            // Ground truth sampled at 1 kHz over the span.
            let n = (cfg.t_span_s * 1000.0).ceil() as usize;
            let times: Vec<f64> =
                (0..=n).map(|i| cfg.t_span_s * i as f64 / n.max(1) as f64).collect();
            let mut gt_writer = create_writer(&out_gt)?;
            write_ground_truth_csv(&gt, &times, &mut gt_writer).map_err(|e| e.to_string())?;
            gt_writer.flush().map_err(|e| e.to_string())?;
            eprintln!("{} events written to {}", slice.len(), out_events.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { estimates, gt, out } => {
            let est = parse_estimates_csv(open_reader(&estimates)?)
                .map_err(|e| format!("{}: {e}", estimates.display()))?;
            let gt_rows = parse_ground_truth_csv(open_reader(&gt)?)
                .map_err(|e| format!("{}: {e}", gt.display()))?;
            let (rows, mean) = evaluate_against_gt(&est, &gt_rows);
            let mut writer = create_writer(&out)?;
            (|| -> std::io::Result<()> {
                writeln!(writer, "t_ref_s,ttc_gt_s,ttc_est_s,e_ttc_pct")?;
                for (t, gt_ttc, est_ttc, e) in &rows {
                    writeln!(writer, "{t},{gt_ttc},{est_ttc},{e}")?;
                }
                writeln!(writer, "mean,,,{mean}")?;
                writer.flush()
            })()
            .map_err(|e| e.to_string())?;
            if rows.is_empty() {
                eprintln!("no scorable estimates");
                return Ok(ExitCode::from(2));
            }
            println!("mean e_TTC: {mean:.4}%");
            Ok(ExitCode::SUCCESS)
        }
        Command::Iwe { events, params, tref, model, intrinsics, out } => {
            let intr = load_intrinsics(&intrinsics)?;
            let slice =
                parse_events(open_reader(&events)?, intr.width, intr.height, DEFAULT_REORDER_CAPACITY)
                    .map_err(|e| format!("{}: {e}", events.display()))?;
            if slice.is_empty() {
                eprintln!("no events to warp");
                return Ok(ExitCode::from(2));
            }
            let parts: Vec<&str> = params.split(',').collect();
            if parts.len() != 3 {
                return Err("--params expects ax,ay,az".into());
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("--params: {e}"));
            let a = AffineParams::new(parse(parts[0])?, parse(parts[1])?, parse(parts[2])?, tref);
            let warp_model = match model {
                ModelArg::Tv => WarpModel::TimeVariant,
                ModelArg::Const => WarpModel::Constant { t_anchor_s: slice.t_begin_s() },
            };
            let iwe = build_iwe(&slice, &a, &intr, warp_model, intr.width, intr.height);
            write_iwe_pgm(&iwe, &out).map_err(|e| e.to_string())?;
            println!(
                "contrast: {:.6e} ({} of {} events in window)",
                contrast(&iwe),
                iwe.n_in_window,
                slice.len()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
