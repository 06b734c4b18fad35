use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gcskel_core::cloud::{write_cloud, CloudFormat};
use gcskel_core::pipeline::{run_pipeline, serve, ClusterCount, K1Setting, PipelineConfig, Session, SessionState};
use gcskel_core::synth::{fixtures, run_neighborhood_size_experiment, run_trials, trials_csv, NormalsMode, Sampling, TrialConfig};
use gcskel_core::Result;

#[derive(Parser)]
#[command(
    name = "gcskel",
    version,
    about = "Curve skeletons from point clouds via generalized-cylinder parts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a point cloud and write artifacts.
    Run(RunArgs),
    /// Serve a finished run for interactive review.
    Serve {
        /// Output directory of a completed run.
        #[arg(long)]
        session: PathBuf,
        #[arg(long, default_value_t = 8787)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Registration trials on synthetic generalized cylinders.
    Synth(SynthArgs),
    /// Write one of the built-in test shapes as a point cloud.
    Fixture {
        #[arg(value_enum)]
        shape: Shape,
        #[arg(long, default_value_t = 5000)]
        points: usize,
        /// Output file; the extension picks the format (.ply, .xyz, .xyzn).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML or JSON config; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Cluster count, or `<k>n` for 50·k clusters.
    #[arg(long)]
    clusters: Option<ClusterCount>,
    /// Required coverage in percent, or `auto`.
    #[arg(long)]
    k1: Option<K1Setting>,
    /// Allowed pairwise overlap in percent.
    #[arg(long)]
    k2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Re-estimate normals even when the input has them.
    #[arg(long)]
    ignore_normals: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value = "random")]
    sampling: Sampling,
    #[arg(long, default_value = "both")]
    normals: NormalsMode,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write per-trial metrics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also run the destination-size robustness experiment.
    #[arg(long)]
    neighborhood: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Cylinder,
    TJunction,
    Quadruped,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => run(args),
        Command::Serve { session, port, host } => {
            let state = SessionState::load(&session)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(Session::new(state), SocketAddr::new(host, port)))
        }
        Command::Synth(args) => synth(args),
        Command::Fixture { shape, points, out } => {
            let fx = match shape {
                Shape::Cylinder => fixtures::cylinder(points)?,
                Shape::TJunction => fixtures::t_junction(points)?,
                Shape::Quadruped => fixtures::quadruped(points)?,
            };
            let format = CloudFormat::from_path(&out).unwrap_or(CloudFormat::PlyAscii);
            std::fs::write(&out, write_cloud(&fx.cloud, format))?;
            println!("wrote {} points to {}", fx.cloud.len(), out.display());
            Ok(())
        }
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.input = args.input.or(cfg.input);
    cfg.output = args.out.or(cfg.output);
    cfg.clusters = args.clusters.unwrap_or(cfg.clusters);
    cfg.k1 = args.k1.unwrap_or(cfg.k1);
    cfg.k2 = args.k2.unwrap_or(cfg.k2);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    if args.ignore_normals {
        cfg.use_input_normals = false;
    }
    cfg.validate()?;
    let run = run_pipeline(&cfg)?;
    let skeleton = &run.link.skeleton;
    println!(
        "{} candidates, {} selected (k1 = {}%), skeleton: {} vertices, {} edges, {} leaves",
        run.candidates.len(),
        run.selected_ids().len(),
        run.k1,
        skeleton.vertices.len(),
        skeleton.edges.len(),
        skeleton.leaves().len()
    );
    println!("artifacts in {}", cfg.output.as_ref().expect("validated").display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = TrialConfig {
        sampling: args.sampling,
        ..Default::default()
    };
    let records = run_trials(args.trials, args.normals, &cfg, args.seed)?;
    for use_normals in [true, false] {
        let ok: Vec<_> = records.iter().filter(|r| r.normals == use_normals && !r.failed()).collect();
        let failed = records.iter().filter(|r| r.normals == use_normals && r.failed()).count();
        if ok.is_empty() && failed == 0 {
            continue;
        }
        let mean = |f: fn(&&gcskel_core::synth::TrialRecord) -> f64| ok.iter().map(f).sum::<f64>() / ok.len().max(1) as f64;
        println!(
            "normals {:3}: {} trials ({} failed)  rot_err {:.4}  plane_err {:.2}°  reg_cost {:.2}°  scale_err {:.3}",
            if use_normals { "on" } else { "off" },
            ok.len(),
            failed,
            mean(|r| r.rot_err),
            mean(|r| r.plane_err_deg),
            mean(|r| r.reg_cost_deg),
            mean(|r| r.scale_err)
        );
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, trials_csv(&records))?;
    }
    if args.neighborhood {
        let res = run_neighborhood_size_experiment(args.trials, &cfg, args.seed)?;
        println!(
            "wider destination worsened rotation: {:.1}% with normals, {:.1}% without ({} trials, {} failed)",
            100.0 * res.proportion_with,
            100.0 * res.proportion_without,
            res.trials_used,
            res.trials_failed
        );
    }
    Ok(())
}
