//! Runs all three stages on the small synthetic city and prints the report.
//!
//! ```text
//! cargo run --release --example full_pipeline -- [run_dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use urbanmind::config::Config;
use urbanmind::eval::run_experiment;

fn main() -> urbanmind::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from);
    let cfg = Config::desk_small();
    let t0 = Instant::now();
    let report = run_experiment(&cfg, dir.as_deref())?;
    println!("mode {:?}, {} test samples, disjoint regions: {}", report.mode, report.samples, report.disjoint_regions);
    for c in &report.cells {
        println!("  horizon {}  mae {:.4}  rmse {:.4}", c.horizon, c.mae, c.rmse);
    }
    println!("adapted   mae {:.4}  rmse {:.4}", report.mae, report.rmse);
    println!("unadapted mae {:.4}  rmse {:.4}", report.pre_adaptation_mae, report.pre_adaptation_rmse);
    println!("{:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
