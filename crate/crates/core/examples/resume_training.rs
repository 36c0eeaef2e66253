//! Saves a Stage-2 trainer mid-epoch, reloads it and checks that both
//! copies keep producing bit-identical losses.

use urbanmind::config::Config;
use urbanmind::pipeline::{build_samples, prepare_data, run_stage1, vocabulary, Stage2Trainer};

fn main() -> urbanmind::Result<()> {
    let mut cfg = Config::desk_small();
    cfg.mae.epochs = 3;
    let data = prepare_data(&cfg.data)?;
    let cache = run_stage1(&cfg, &data)?.cache;
    let vocab = vocabulary(&data);
    let (samples, _) =
        build_samples(&cfg, &data, &cache, &vocab, &data.train_indices(), data.split.train_days(data.days()))?;

    let mut trainer = Stage2Trainer::new(&cfg, vocab, cache.width(), data.side())?;
    trainer.step(&samples)?;
    let dir = std::env::temp_dir().join("urbanmind-resume");
    trainer.save(&dir)?;
    let mut resumed = Stage2Trainer::load(&dir)?;
    println!("checkpoint written to {}", dir.display());

    for _ in 0..5 {
        let (a, b) = (trainer.step(&samples)?, resumed.step(&samples)?);
        println!("step {}: {a:.8} vs {b:.8} equal {}", trainer.step, a.to_bits() == b.to_bits());
    }
    Ok(())
}
