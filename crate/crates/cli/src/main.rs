use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use vesselreg::benchmark::{
    overlay_layers, run_benchmark, run_case, summarize, BenchmarkCase, BenchmarkConfig, SweepGrid,
};
use vesselreg::correspondence::TangentConfig;
use vesselreg::decomposition::DecompositionConfig;
use vesselreg::deformation::EnergyConfig;
use vesselreg::evaluation::{prediction_errors, shape_variation, Curve2, Curve3, MetricsReport};
use vesselreg::io::{
    assignment_csv, metrics_csv, overlay_svg, read_mask, read_projection, read_skeleton_csv, registration_json,
    skeleton_csv, to_json_text, MaskInput,
};
use vesselreg::projection::rigid_prealign;
use vesselreg::registration::RegistrationConfig;
use vesselreg::skeleton::build_graph;
use vesselreg::synthetic::SyntheticParams;
use vesselreg::thinning::{thin_mask_2d, thin_volume_3d};
use vesselreg::{benchmark::synthetic_cases, Error};

#[derive(Parser, Debug)]
#[command(
    name = "vesselreg",
    version,
    about = "Deformable 2D/3D registration of vessel skeletons"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Thin a binary mask (.pgm) or volume (.vox) to a skeleton CSV.
    Skeletonize { input: PathBuf, output: PathBuf },
    /// Register a 3D skeleton to a 2D skeleton.
    Register(RegisterArgs),
    /// Run the synthetic cross-paired benchmark.
    Benchmark(BenchmarkArgs),
    /// Score an externally produced 3D prediction.
    Evaluate(EvaluateArgs),
}

/// Pipeline parameters shared by `register` and `benchmark`.
#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    /// Number of branches to preserve.
    #[arg(long, default_value_t = 5)]
    tau: usize,
    /// Minimum branch size (nodes) below which a branch is deleted.
    #[arg(long, default_value_t = 10.0)]
    iota: f64,
    /// Tangent offset for branches.
    #[arg(long, default_value_t = 1)]
    eta_s: usize,
    /// Tangent offset for trunks.
    #[arg(long, default_value_t = 10)]
    eta_t: usize,
    /// Length-preservation weight.
    #[arg(long, default_value_t = 500.0)]
    alpha: f64,
    /// Smoothness weight.
    #[arg(long, default_value_t = 10.0)]
    beta: f64,
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
}

impl PipelineArgs {
    fn config(&self) -> RegistrationConfig {
        RegistrationConfig {
            decomposition: DecompositionConfig {
                tau: self.tau,
                iota: self.iota,
            },
            tangent: TangentConfig {
                eta_s: self.eta_s,
                eta_t: self.eta_t,
            },
            energy: EnergyConfig {
                alpha: self.alpha,
                beta: self.beta,
                grad_tol: self.grad_tol,
                max_iters: self.max_iters,
            },
        }
    }
}

#[derive(Args, Debug)]
struct RegisterArgs {
    skeleton_2d: PathBuf,
    skeleton_3d: PathBuf,
    projection: PathBuf,
    /// 3D ground-truth skeleton CSV, for 3D errors.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Include wall-clock timings in the outputs.
    #[arg(long)]
    record_timing: bool,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Number of synthetic subjects; every ordered pair is one case.
    #[arg(long, default_value_t = 5)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Translation sweep half-range in pixels.
    #[arg(long, default_value_t = 0.0)]
    sweep_trans: f64,
    /// Rotation sweep half-range in degrees.
    #[arg(long, default_value_t = 0.0)]
    sweep_rot: f64,
    #[arg(long, default_value_t = 5)]
    sweep_steps: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Include wall-clock timings in the outputs.
    #[arg(long)]
    record_timing: bool,
    /// Skip the per-case SVG overlays.
    #[arg(long)]
    no_svg: bool,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Predicted 3D skeleton CSV.
    prediction: PathBuf,
    skeleton_2d: PathBuf,
    projection: PathBuf,
    /// 3D ground-truth skeleton CSV.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Undeformed 3D skeleton CSV, for the shape-variation baseline.
    #[arg(long)]
    preop: Option<PathBuf>,
    #[arg(long, default_value = "external")]
    method: String,
    /// Metrics CSV path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Resolved settings, written into every output file.
#[derive(Serialize)]
struct RunConfig<'a> {
    subcommand: &'a str,
    #[serde(flatten)]
    registration: Option<RegistrationConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cases: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<&'a SweepGrid>,
    paths: Vec<&'a Path>,
}

impl RunConfig<'_> {
    fn value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

/// Exit code 2 is reserved for usage and input-format problems.
enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Domain(Error::Io(e))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("VESSELREG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("VESSELREG_THREADS ignored: {e}");
        }
    }
    let outcome = match cli.command {
        Command::Skeletonize { input, output } => skeletonize(&input, &output),
        Command::Register(args) => register(&args),
        Command::Benchmark(args) => benchmark(&args),
        Command::Evaluate(args) => evaluate(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            let usage = e.is_format() || matches!(e.root(), Error::InvalidConfig(_) | Error::InvalidParams(_));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn skeletonize(input: &Path, output: &Path) -> Result<(), Failure> {
    let config = RunConfig {
        subcommand: "skeletonize",
        registration: None,
        seed: None,
        cases: None,
        sweep: None,
        paths: vec![input, output],
    }
    .value();
    let (text, nodes, edges) = match read_mask(input)? {
        MaskInput::Image(img) => {
            let s = thin_mask_2d(&img)?;
            let g = build_graph(&s)?;
            (skeleton_csv(&s, &config), s.len(), g.edge_count())
        }
        MaskInput::Volume(vol) => {
            let s = thin_volume_3d(&vol)?;
            let g = build_graph(&s)?;
            (skeleton_csv(&s, &config), s.len(), g.edge_count())
        }
    };
    fs::write(output, text)?;
    println!("nodes: {nodes}");
    println!("edges: {edges}");
    Ok(())
}

fn register(args: &RegisterArgs) -> Result<(), Failure> {
    let registration = args.pipeline.config();
    registration.validate()?;
    let mut paths = vec![
        args.skeleton_2d.as_path(),
        args.skeleton_3d.as_path(),
        args.projection.as_path(),
    ];
    paths.extend(args.truth.as_deref());
    paths.push(&args.out_dir);
    let config = RunConfig {
        subcommand: "register",
        registration: Some(registration),
        seed: None,
        cases: None,
        sweep: None,
        paths,
    }
    .value();

    let x = read_skeleton_csv::<2>(&args.skeleton_2d)?;
    let y = read_skeleton_csv::<3>(&args.skeleton_3d)?;
    let projection = read_projection(&args.projection)?;
    let truth_3d = match &args.truth {
        Some(path) => {
            let g = build_graph(&read_skeleton_csv::<3>(path)?)?;
            let pts = g.points().points();
            Some(g.edges().into_iter().map(|(a, b)| vec![pts[a], pts[b]]).collect())
        }
        None => None,
    };
    let case = BenchmarkCase {
        id: "input".into(),
        x,
        y,
        projection,
        truth_3d,
    };
    let bench = BenchmarkConfig {
        registration,
        record_timing: args.record_timing,
    };
    let start = Instant::now();
    let run = run_case(&case, &bench);
    let elapsed = start.elapsed().as_secs_f64();
    let result = run.result?;

    fs::create_dir_all(&args.out_dir)?;
    let doc = registration_json(&result, &config, args.record_timing);
    fs::write(args.out_dir.join("registration.json"), to_json_text(&doc)?)?;
    fs::write(
        args.out_dir.join("metrics.csv"),
        metrics_csv(std::slice::from_ref(&run.report), &config),
    )?;
    fs::write(
        args.out_dir.join("assignment.csv"),
        assignment_csv(&result.assignment, &config),
    )?;
    let layers = overlay_layers(&case.x, &case.y, &case.projection, &result)?;
    fs::write(args.out_dir.join("overlay.svg"), overlay_svg(&layers, &config))?;

    let r = &run.report;
    println!(
        "mean 2D error: {:.6} px (shape variation {:.6} px)",
        r.mean_2d.unwrap_or(f64::NAN),
        r.sv_2d.unwrap_or(f64::NAN)
    );
    if let (Some(m3), Some(sv3)) = (r.mean_3d, r.sv_3d) {
        println!("mean 3D error: {m3:.6} mm (shape variation {sv3:.6} mm)");
    }
    println!("runtime: {elapsed:.3} s");
    Ok(())
}

fn benchmark(args: &BenchmarkArgs) -> Result<(), Failure> {
    if args.cases < 2 {
        return Err(Failure::Usage(
            "--cases must be at least 2 (cases are ordered subject pairs)".into(),
        ));
    }
    if (args.sweep_trans != 0.0 || args.sweep_rot != 0.0) && args.sweep_steps < 1 {
        return Err(Failure::Usage("--sweep-steps must be at least 1".into()));
    }
    let registration = args.pipeline.config();
    registration.validate()?;
    let sweep = SweepGrid::symmetric(args.sweep_trans, args.sweep_rot, args.sweep_steps);
    let config = RunConfig {
        subcommand: "benchmark",
        registration: Some(registration),
        seed: Some(args.seed),
        cases: Some(args.cases),
        sweep: Some(&sweep),
        paths: vec![&args.out_dir],
    }
    .value();

    let cases = synthetic_cases(args.seed, &SyntheticParams::default(), args.cases, &sweep)?;
    let bench = BenchmarkConfig {
        registration,
        record_timing: args.record_timing,
    };
    let runs = run_benchmark(&cases, &bench);
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();

    fs::create_dir_all(&args.out_dir)?;
    fs::write(args.out_dir.join("metrics.csv"), metrics_csv(&reports, &config))?;
    if !args.no_svg {
        let svg_dir = args.out_dir.join("overlays");
        fs::create_dir_all(&svg_dir)?;
        for (case, run) in cases.iter().zip(&runs) {
            if let Ok(result) = &run.result {
                let layers = overlay_layers(&case.x, &case.y, &case.projection, result)?;
                let name = format!("{}.svg", case.id.replace('/', "_"));
                fs::write(svg_dir.join(name), overlay_svg(&layers, &config))?;
            }
        }
    }

    let s = summarize(&reports);
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
    println!("cases: {} ({} failed)", s.cases, s.failed);
    println!("{:<10} {:>12} {:>12}", "", "2D px", "3D mm");
    println!("{:<10} {:>12.6} {:>12}", "proposed", s.mean_2d, opt(s.mean_3d));
    println!("{:<10} {:>12.6} {:>12}", "sv", s.sv_2d, opt(s.sv_3d));
    if s.failed == s.cases {
        return Err(Failure::Domain(
            runs.into_iter()
                .find_map(|r| r.result.err())
                .unwrap_or(Error::InvalidParams("no cases".into())),
        ));
    }
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<(), Failure> {
    let mut paths = vec![
        args.prediction.as_path(),
        args.skeleton_2d.as_path(),
        args.projection.as_path(),
    ];
    paths.extend(args.truth.as_deref());
    paths.extend(args.preop.as_deref());
    let config = RunConfig {
        subcommand: "evaluate",
        registration: None,
        seed: None,
        cases: None,
        sweep: None,
        paths,
    }
    .value();

    let predicted = read_skeleton_csv::<3>(&args.prediction)?;
    let x = read_skeleton_csv::<2>(&args.skeleton_2d)?;
    let p = read_projection(&args.projection)?;
    let x_curve = Curve2::from_graph(&build_graph(&x)?)?;
    let truth = match &args.truth {
        Some(path) => Some(Curve3::from_graph(&build_graph(&read_skeleton_csv::<3>(path)?)?)?),
        None => None,
    };
    let (m2, s2, e3) = prediction_errors(predicted.points(), &p, &x_curve, truth.as_ref())?;
    let (sv2, sv3) = match &args.preop {
        Some(path) => {
            let y = read_skeleton_csv::<3>(path)?;
            let rigid = rigid_prealign(x.points(), y.points(), &p)?;
            let (a, b) = shape_variation(&x_curve, y.points(), &p, &rigid, truth.as_ref())?;
            (Some(a), b)
        }
        None => (None, None),
    };
    let report = MetricsReport {
        case_id: args
            .prediction
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("prediction")
            .to_string(),
        method: args.method.clone(),
        mean_2d: Some(m2),
        std_2d: Some(s2),
        mean_3d: e3.map(|e| e.0),
        std_3d: e3.map(|e| e.1),
        sv_2d: sv2,
        sv_3d: sv3,
        runtime_ms: None,
        stage_ms: Vec::new(),
    };
    let text = metrics_csv(&[report], &config);
    match &args.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
