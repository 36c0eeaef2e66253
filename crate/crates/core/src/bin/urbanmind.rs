use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use urbanmind::config::Config;
use urbanmind::eval::{emit_report_plots, evaluate_run, run_ablations, run_sweep, SweepAxis, SweepSpec};
use urbanmind::grid::{
    generate_synthetic, import_stacked, load_stacked, make_splits, partition_city, save_stacked, CityGrid, SplitMode,
    SyntheticParams,
};
use urbanmind::pipeline::{run_pipeline, StageSelection};

#[derive(Parser)]
#[command(name = "urbanmind", version, about = "Urban dynamics prediction: autoencoder tokens, fine-tuned backbone, test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, import or split datasets.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Train the two autoencoders and write the token cache (Stage 1).
    Mae {
        #[command(subcommand)]
        action: MaeAction,
    },
    /// Run pipeline stages.
    Run {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long, default_value = "all", value_parser = parse_stage)]
        stage: StageSelection,
    },
    /// Recompute and print the metrics of a finished run.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// One full run per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// The full model plus one run per ablation switch.
    Ablate {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long = "switch", required = true)]
        switches: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `runs/<config fingerprint>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> urbanmind::Result<(Config, PathBuf)> {
        let cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&cfg.fingerprint()[..12]));
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum MaeAction {
    Train {
        #[command(flatten)]
        common: RunArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ZeroShot,
    Standard,
}

impl From<ModeArg> for SplitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ZeroShot => SplitMode::ZeroShot,
            ModeArg::Standard => SplitMode::Standard,
        }
    }
}

#[derive(Args)]
struct Layout {
    /// Days.
    #[arg(long, default_value_t = 30)]
    n: usize,
    /// Slots per day.
    #[arg(long, default_value_t = 12)]
    t: usize,
    /// Region side in cells.
    #[arg(long, default_value_t = 10)]
    side: usize,
    /// Step between region windows.
    #[arg(long, default_value_t = 10)]
    stride: usize,
    #[arg(long, default_value_t = 20)]
    grid_height: usize,
    #[arg(long, default_value_t = 20)]
    grid_width: usize,
}

#[derive(Subcommand)]
enum DataAction {
    /// Generate a raw synthetic city as a stacked dataset.
    Gen {
        #[command(flatten)]
        layout: Layout,
        /// Channels.
        #[arg(long, default_value_t = 3)]
        c: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        city: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Import per-channel raw f32 files shaped (days, slots, regions, side, side).
    Import {
        #[command(flatten)]
        layout: Layout,
        #[arg(long)]
        city: String,
        /// `name=path`, once per channel.
        #[arg(long = "channel", required = true, value_parser = parse_channel)]
        channels: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the train/test split of a stacked dataset.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "zero-shot")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_stage(s: &str) -> Result<StageSelection, String> {
    match s {
        "all" => Ok(StageSelection::All),
        "1" | "2" | "3" => Ok(StageSelection::Only(s.parse().expect("digit"))),
        _ => Err(format!("stage must be 1, 2, 3 or all, not `{s}`")),
    }
}

fn parse_channel(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected name=path, got `{s}`"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn print_report(report: &urbanmind::eval::MetricReport) {
    println!(
        "{} {} ({:?}, {} windows, disjoint regions: {})",
        report.city, report.dynamics, report.mode, report.samples, report.disjoint_regions
    );
    println!("{:>8} {:>10} {:>10}", "horizon", "mae", "rmse");
    for c in &report.cells {
        println!("{:>8} {:>10.5} {:>10.5}", c.horizon, c.mae, c.rmse);
    }
    println!("{:>8} {:>10.5} {:>10.5}", "all", report.mae, report.rmse);
    println!("{:>8} {:>10.5} {:>10.5}", "pre-tta", report.pre_adaptation_mae, report.pre_adaptation_rmse);
}

fn run(cli: Cli) -> urbanmind::Result<()> {
    match cli.command {
        Command::Data { action } => match action {
            DataAction::Gen { layout, c, seed, city, out } => {
                let grid = CityGrid::new(city.clone(), layout.grid_height, layout.grid_width)?;
                let regions = partition_city(&grid, layout.side, layout.stride)?;
                let tensors = regions
                    .iter()
                    .enumerate()
                    .map(|(r, region)| {
                        let seed = seed.wrapping_mul(1_000_003).wrapping_add(r as u64);
                        let mut t = generate_synthetic(region, layout.n, layout.t, c, seed, &SyntheticParams::default())?;
                        t.city = city.clone();
                        Ok(t)
                    })
                    .collect::<urbanmind::Result<Vec<_>>>()?;
                save_stacked(&tensors, &out)?;
                println!("wrote {} regions of ({}, {}, {c}, {s}, {s}) to {}", tensors.len(), layout.n, layout.t, out.display(), s = layout.side);
            }
            DataAction::Import { layout, city, channels, out } => {
                let grid = CityGrid::new(city.clone(), layout.grid_height, layout.grid_width)?;
                let regions = partition_city(&grid, layout.side, layout.stride)?;
                let tensors = import_stacked(&city, &channels, layout.n, layout.t, &regions, layout.side)?;
                save_stacked(&tensors, &out)?;
                println!("imported {} regions with {} channels to {}", tensors.len(), channels.len(), out.display());
            }
            DataAction::Split { data, mode, test_fraction, seed } => {
                let tensors = load_stacked(&data)?;
                let regions: Vec<_> = tensors.iter().map(|t| t.region).collect();
                let split = make_splits(&regions, mode.into(), test_fraction, seed)?;
                println!("{}", serde_json::to_string_pretty(&split).expect("serializes"));
            }
        },
        Command::Mae { action: MaeAction::Train { common } } => {
            let (cfg, out) = common.load()?;
            let res = run_pipeline(&cfg, Some(&out), StageSelection::Only(1))?;
            if let Some(s1) = res.stage1 {
                for (name, r) in &s1.reports {
                    println!("{name}: loss {:.5} -> {:.5} over {} steps", r.initial_loss, r.history.last().copied().unwrap_or(r.initial_loss), r.steps);
                }
            }
            println!("stage 1 artifacts in {}", out.display());
        }
        Command::Run { common, stage } => {
            let (cfg, out) = common.load()?;
            let res = run_pipeline(&cfg, Some(&out), stage)?;
            for s in &res.manifest.stages {
                println!("stage {}: {} ({:.1}s)", s.stage, s.status, s.wall_clock_s);
            }
            if let Some(report) = &res.report {
                if cfg.eval.plots {
                    emit_report_plots(report, &out.join("plots"))?;
                }
                print_report(report);
            }
            println!("run directory: {}", out.display());
        }
        Command::Eval { run } => {
            let report = evaluate_run(&run)?;
            emit_report_plots(&report, &run.join("plots"))?;
            print_report(&report);
        }
        Command::Sweep { common, axis, values } => {
            let (base, out) = common.load()?;
            let table = run_sweep(&SweepSpec { axis, values, base }, Some(&out))?;
            println!("{:>16} {:>10} {:>10}", axis.name(), "mae", "rmse");
            for r in &table.rows {
                println!("{:>16} {:>10.5} {:>10.5}", r.value, r.mae, r.rmse);
            }
            println!("seeds: {:?}", table.seeds);
        }
        Command::Ablate { common, switches } => {
            let (base, out) = common.load()?;
            let names: Vec<&str> = switches.iter().map(String::as_str).collect();
            let rows = run_ablations(&base, &names, Some(&out))?;
            println!("{:>28} {:>10} {:>10}", "variant", "mae", "rmse");
            for r in &rows {
                println!("{:>28} {:>10.5} {:>10.5}", r.variant, r.report.mae, r.report.rmse);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
