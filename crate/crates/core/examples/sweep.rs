//! One full run per temporal mask ratio, written with a plot.
//!
//! ```text
//! cargo run --release --example sweep -- <out-dir>
//! ```

use std::path::PathBuf;

use urbanmind::config::Config;
use urbanmind::eval::{run_sweep, SweepAxis, SweepSpec};

fn main() -> urbanmind::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("urbanmind-sweep"), PathBuf::from);
    let mut base = Config::desk_small();
    base.mae.epochs = 8;
    base.backbone.epochs = 8;
    let spec = SweepSpec {
        axis: SweepAxis::PT,
        values: vec![0.17, 0.33, 0.5],
        base,
    };
    let table = run_sweep(&spec, Some(&out))?;
    for row in &table.rows {
        println!("p_t = {:.2}: mae {:.4} rmse {:.4}", row.value, row.mae, row.rmse);
    }
    println!("runs, table and plot in {}", out.display());
    Ok(())
}
