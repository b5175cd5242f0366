//! Command-line pipeline driver.
//!
//! Subcommands: `simulate`, `degrade`, `track`, `propagate`, `eval-iou`,
//! `eval-map`, `defgen`, `invert-flow`. Exit codes: 0 success, 2 usage
//! error, 1 runtime error. All randomness is controlled by `--seed`
//! flags; the `NUCPROP_THREADS` environment variable caps the worker
//! count (0 or unset picks the default).

use std::error::Error;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::io;
use crate::metrics;
use crate::motion::{invert_flow, synthesize_flow_pair, DeformationSpec};
use crate::propagate::{
    run_propagation, PropagationConfig, PropagationInput, UpdateScope, WarpMode,
};
use crate::sim::{degrade_predictions, generate_video, DegradeConfig, SimConfig, Waveform};
use crate::tracker::{build_tracks, LinkConfig};

#[derive(Parser)]
#[command(
    name = "nucprop",
    version,
    about = "Repair unreliable nucleus segmentations in time-lapse videos by uncertainty-ranked mask propagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic oscillating-nucleus dataset with ground truth.
    Simulate(SimulateArgs),
    /// Emulate an unreliable segmenter on a simulated dataset.
    Degrade(DegradeArgs),
    /// Build overlap tracks and write tracks.json.
    Track(TrackArgs),
    /// Propagate nucleus masks along tracks into uncertain frames.
    Propagate(PropagateArgs),
    /// Category-wise mean nucleus IoU against ground truth.
    EvalIou(EvalIouArgs),
    /// Instance mAP with softmax-score and entropy ranking.
    EvalMap(EvalMapArgs),
    /// Synthesize elastic-deformation flow training pairs.
    Defgen(DefgenArgs),
    /// Invert a dense flow file by fixed-point iteration.
    InvertFlow(InvertFlowArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WaveformArg {
    Square,
    Sine,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WarpArg {
    ShiftScale,
    MeanFlow,
    PixelFlow,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    Uncertain,
    All,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    cells: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Cytosol intensity on the 16-bit scale.
    #[arg(long, default_value_t = 18000.0)]
    cytosol: f64,
    /// Peak nucleus contrast over the cytosol.
    #[arg(long, default_value_t = 14000.0)]
    amplitude: f64,
    /// Oscillation period in frames.
    #[arg(long, default_value_t = 6)]
    period: usize,
    #[arg(long, value_enum, default_value_t = WaveformArg::Square)]
    waveform: WaveformArg,
    #[arg(long, default_value_t = 800.0)]
    noise_sigma: f64,
    /// Elastic motion control points per axis.
    #[arg(long, default_value_t = 3)]
    control_points: usize,
    /// Elastic motion magnitude in pixels.
    #[arg(long, default_value_t = 8.0)]
    magnitude: f64,
}

#[derive(Args)]
struct DegradeArgs {
    /// Dataset directory (predictions are added in place).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Contrast below which nucleus predictions become unreliable.
    #[arg(long, default_value_t = 0.5)]
    visibility_threshold: f64,
    /// Probability of dropping an unreliable nucleus entirely.
    #[arg(long, default_value_t = 0.4)]
    miss_prob: f64,
    /// Maximum erode/dilate radius in pixels.
    #[arg(long, default_value_t = 2)]
    erode_dilate: usize,
    /// Probability of cutting an unreliable nucleus in two.
    #[arg(long, default_value_t = 0.3)]
    split_prob: f64,
    #[arg(long, default_value_t = 0.1)]
    base_unc: f64,
    #[arg(long, default_value_t = 0.9)]
    error_unc: f64,
    /// Per-pixel Gaussian jitter on the uncertainty maps.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    data: PathBuf,
    /// Minimum IoU for a frame-to-frame link.
    #[arg(long, default_value_t = 0.2)]
    min_iou: f64,
    /// Frames a track survives without a match.
    #[arg(long, default_value_t = 2)]
    gap: usize,
}

#[derive(Args)]
struct PropagateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Hard uncertainty threshold.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    /// One-sided relative threshold.
    #[arg(long, default_value_t = 0.7)]
    alpha: f64,
    /// Two-sided relative threshold.
    #[arg(long, default_value_t = 0.85)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = WarpArg::MeanFlow)]
    warp: WarpArg,
    /// Fuse two-sided candidates with certainty weights instead of union.
    #[arg(long)]
    fuse: bool,
    #[arg(long, value_enum, default_value_t = ScopeArg::Uncertain)]
    scope: ScopeArg,
    /// Result name: outputs land in prop/<name>/.
    #[arg(long, default_value = "default")]
    name: String,
    #[arg(long, default_value_t = 0.2)]
    min_iou: f64,
    #[arg(long, default_value_t = 2)]
    gap: usize,
}

#[derive(Args)]
struct EvalIouArgs {
    #[arg(long)]
    data: PathBuf,
    /// Propagation run to evaluate; raw predictions when omitted.
    #[arg(long)]
    prop: Option<String>,
    /// Take update categories from this run's log instead of the
    /// evaluated run's own (the baseline uses an empty log).
    #[arg(long)]
    categories_from: Option<String>,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalMapArgs {
    #[arg(long)]
    data: PathBuf,
    /// IoU threshold for a detection to count as correct.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DefgenArgs {
    /// Output directory for the generated pairs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    control_points: usize,
    #[arg(long, default_value_t = 10.0)]
    magnitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of pairs to generate (ignored with --data).
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Use a dataset's images as sources instead of synthetic textures.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct InvertFlowArgs {
    /// Input .f32 flow file (with JSON sidecar).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
}

/// Entry point shared by the binary and tests.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    configure_threads();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = err.source();
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            1
        }
    }
}

fn configure_threads() {
    if let Ok(value) = std::env::var("NUCPROP_THREADS") {
        if let Ok(n) = value.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

type CliResult = Result<(), Box<dyn Error>>;

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Simulate(args) => simulate(args),
        Command::Degrade(args) => degrade(args),
        Command::Track(args) => track(args),
        Command::Propagate(args) => propagate(args),
        Command::EvalIou(args) => eval_iou(args),
        Command::EvalMap(args) => eval_map(args),
        Command::Defgen(args) => defgen(args),
        Command::InvertFlow(args) => invert_flow_cmd(args),
    }
}

fn simulate(args: SimulateArgs) -> CliResult {
    let cfg = SimConfig {
        width: args.width,
        height: args.height,
        frames: args.frames,
        cells: args.cells,
        seed: args.seed,
        cytosol_intensity: args.cytosol,
        nucleus_contrast_amplitude: args.amplitude,
        oscillation_period: args.period,
        oscillation_waveform: match args.waveform {
            WaveformArg::Square => Waveform::Square,
            WaveformArg::Sine => Waveform::Sine,
        },
        noise_sigma: args.noise_sigma,
        motion: DeformationSpec {
            control_points: args.control_points,
            magnitude: args.magnitude,
            seed: args.seed,
        },
    };
    let data = generate_video(&cfg)?;
    io::write_sim_dataset(&args.out, &data)?;
    println!("wrote {} frames to {}", cfg.frames, args.out.display());
    Ok(())
}

fn degrade(args: DegradeArgs) -> CliResult {
    let data = read_sim(&args.data)?;
    let cfg = DegradeConfig {
        seed: args.seed,
        visibility_threshold: args.visibility_threshold,
        miss_probability: args.miss_prob,
        erode_dilate_px: args.erode_dilate,
        split_probability: args.split_prob,
        base_uncertainty: args.base_unc,
        error_uncertainty: args.error_unc,
        pixel_jitter: args.jitter,
    };
    let pred = degrade_predictions(&data, &cfg)?;
    io::write_predictions(&args.data, &pred, &cfg)?;
    println!("wrote predictions to {}", args.data.display());
    Ok(())
}

/// Rehydrate the simulator view of a dataset directory.
fn read_sim(dir: &Path) -> Result<crate::sim::SimDataset, Box<dyn Error>> {
    let ds = io::read_dataset(dir)?;
    let config = ds
        .manifest
        .sim
        .clone()
        .ok_or("dataset has no simulation config in its manifest")?;
    let flows = ds.flows.ok_or("dataset has no flow files")?;
    Ok(crate::sim::SimDataset {
        config,
        images: ds.images,
        cell_labels: ds.gt_cells,
        nucleus_labels: ds.gt_nuclei,
        flows,
        contrast: ds.manifest.contrast.clone(),
    })
}

fn track(args: TrackArgs) -> CliResult {
    let ds = io::read_dataset(&args.data)?;
    let cells = match &ds.pred {
        Some(pred) => &pred.cells,
        None => &ds.gt_cells,
    };
    let link = LinkConfig { min_link_iou: args.min_iou, gap_tolerance: args.gap };
    let tracks = build_tracks(cells, &link)?;
    io::write_tracks(&args.data, &tracks, &link)?;
    println!("wrote {} tracks to {}", tracks.len(), args.data.join("tracks.json").display());
    Ok(())
}

fn propagate(args: PropagateArgs) -> CliResult {
    let ds = io::read_dataset(&args.data)?;
    let pred = ds.pred.as_ref().ok_or("dataset has no predictions; run `degrade` first")?;
    let cfg = PropagationConfig {
        theta: args.theta,
        alpha: args.alpha,
        beta: args.beta,
        warp_mode: match args.warp {
            WarpArg::ShiftScale => WarpMode::ShiftScale,
            WarpArg::MeanFlow => WarpMode::MeanFlow,
            WarpArg::PixelFlow => WarpMode::PixelFlow,
        },
        fuse: args.fuse,
        update_scope: match args.scope {
            ScopeArg::Uncertain => UpdateScope::UncertainOnly,
            ScopeArg::All => UpdateScope::All,
        },
    };
    let link = LinkConfig { min_link_iou: args.min_iou, gap_tolerance: args.gap };
    let input = PropagationInput {
        cell_labels: &pred.cells,
        nucleus_labels: &pred.nuclei,
        uncertainty: &pred.uncertainty,
        flows: ds.flows.as_ref(),
    };
    let (nuclei, log) = run_propagation(&input, &link, &cfg)?;
    let updates = log.records.iter().filter(|r| r.action.is_update()).count();
    io::write_propagation(&args.data, &args.name, &nuclei, &log, &cfg, &link)?;
    println!("updated {updates} nuclei; wrote prop/{}", args.name);
    Ok(())
}

fn eval_iou(args: EvalIouArgs) -> CliResult {
    let ds = io::read_dataset(&args.data)?;
    let pred = ds.pred.as_ref().ok_or("dataset has no predictions; run `degrade` first")?;
    let nuclei = match &args.prop {
        Some(name) => io::read_propagation(&args.data, name)?.0,
        None => pred.nuclei.clone(),
    };
    let log = match args.categories_from.as_ref().or(args.prop.as_ref()) {
        Some(name) => io::read_propagation(&args.data, name)?.1.log,
        None => Default::default(),
    };
    let report =
        metrics::mean_iou_by_category(&nuclei, &pred.cells, &ds.gt_nuclei, &ds.gt_cells, &log)?;
    let out = io::EvalReport {
        iou_all: Some(report.all.mean_iou),
        iou_updated: Some(report.updated.mean_iou),
        iou_interpolated: Some(report.interpolated.mean_iou),
        iou_non_updated: Some(report.non_updated.mean_iou),
        counts: Some(io::CategoryCounts {
            all: report.all.count,
            updated: report.updated.count,
            interpolated: report.interpolated.count,
            non_updated: report.non_updated.count,
        }),
        ..Default::default()
    };
    emit_report(&out, args.out.as_deref())
}

fn eval_map(args: EvalMapArgs) -> CliResult {
    let ds = io::read_dataset(&args.data)?;
    let pred = ds.pred.as_ref().ok_or("dataset has no predictions; run `degrade` first")?;
    let (dets, n_gt) = metrics::collect_detections(
        &pred.nuclei,
        &ds.gt_nuclei,
        &pred.uncertainty,
        &pred.scores,
    )?;
    let out = io::EvalReport {
        map_sm: Some(metrics::average_precision(&dets, n_gt, args.iou, metrics::ScoreMode::Softmax)),
        map_ent: Some(metrics::average_precision(&dets, n_gt, args.iou, metrics::ScoreMode::Entropy)),
        ..Default::default()
    };
    emit_report(&out, args.out.as_deref())
}

fn emit_report(report: &io::EvalReport, out: Option<&Path>) -> CliResult {
    match out {
        Some(path) => io::write_report(path, report)?,
        None => print!("{}", report.to_json()),
    }
    Ok(())
}

fn defgen(args: DefgenArgs) -> CliResult {
    std::fs::create_dir_all(&args.out)?;
    let sources: Vec<crate::grid::ScalarField> = match &args.data {
        Some(dir) => io::read_dataset(dir)?.images,
        None => (0..args.count)
            .map(|i| synth_texture(args.width, args.height, crate::rng::derive_seed(args.seed, i as u64)))
            .collect::<Result<_, _>>()?,
    };
    for (i, img) in sources.iter().enumerate() {
        let spec = DeformationSpec {
            control_points: args.control_points,
            magnitude: args.magnitude,
            seed: crate::rng::derive_seed(args.seed, 0x5000 + i as u64),
        };
        let (prev, flow) = synthesize_flow_pair(img, &spec)?;
        write_image_pgm(&args.out.join(format!("img_{i:04}_t1.pgm")), img)?;
        write_image_pgm(&args.out.join(format!("img_{i:04}_t0.pgm")), &prev)?;
        io::raw::write_flow(&args.out.join(format!("flow_{i:04}.f32")), &flow)?;
    }
    println!("wrote {} pairs to {}", sources.len(), args.out.display());
    Ok(())
}

fn write_image_pgm(path: &Path, img: &crate::grid::ScalarField) -> Result<(), io::IoError> {
    let samples: Vec<u16> = img
        .data()
        .iter()
        .map(|&v| v.round().clamp(0.0, 65535.0) as u16)
        .collect();
    io::atomic_write(path, &io::pgm::encode_pgm16(img.width(), img.height(), &samples))
}

/// Smooth random texture: bicubic upsampling of a coarse random grid,
/// shifted to the middle of the 16-bit range.
fn synth_texture(
    width: usize,
    height: usize,
    seed: u64,
) -> Result<crate::grid::ScalarField, Box<dyn Error>> {
    let spec = DeformationSpec { control_points: 6, magnitude: 14000.0, seed };
    let field = crate::motion::generate_elastic_flow(&spec, width, height)?;
    let data = field
        .u()
        .iter()
        .map(|&v| (32768.0 + f64::from(v)).round().clamp(0.0, 65535.0))
        .collect();
    Ok(crate::grid::ScalarField::from_vec(width, height, data)?)
}

fn invert_flow_cmd(args: InvertFlowArgs) -> CliResult {
    let flow = io::raw::read_flow(&args.input, (1, 0))?;
    let inverse = invert_flow(&flow, args.iterations);
    io::raw::write_flow(&args.out, &inverse)?;
    println!("wrote inverse flow to {}", args.out.display());
    Ok(())
}
