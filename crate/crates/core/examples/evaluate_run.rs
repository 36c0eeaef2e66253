//! Runs the pipeline into a directory, then recomputes the metrics from
//! the saved predictions alone and draws the per-horizon plot.

use std::path::PathBuf;

use urbanmind::config::Config;
use urbanmind::eval::{emit_report_plots, evaluate_run};
use urbanmind::pipeline::{run_pipeline, StageSelection};

fn main() -> urbanmind::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("urbanmind-eval"), PathBuf::from);
    let mut cfg = Config::desk_small();
    cfg.mae.epochs = 8;
    cfg.backbone.epochs = 8;
    let out = run_pipeline(&cfg, Some(&dir), StageSelection::All)?;
    let live = out.report.expect("all stages ran");

    let report = evaluate_run(&dir)?;
    println!("rmse at run time {:.6}, recomputed {:.6}", live.rmse, report.rmse);
    for cell in &report.cells {
        println!("horizon {}: mae {:.4} rmse {:.4}", cell.horizon, cell.mae, cell.rmse);
    }
    for p in emit_report_plots(&report, &dir.join("plots"))? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
