//! The full model next to a few component ablations.

use urbanmind::config::Config;
use urbanmind::eval::run_ablations;

fn main() -> urbanmind::Result<()> {
    let mut base = Config::desk_small();
    base.eval.plots = false;
    let rows = run_ablations(&base, &["no_muffin_mae", "no_finetuning", "no_adaptation"], None)?;
    println!("{:<16} {:>8} {:>8}", "variant", "mae", "rmse");
    for r in &rows {
        println!("{:<16} {:>8.4} {:>8.4}", r.variant, r.report.mae, r.report.rmse);
    }
    Ok(())
}
