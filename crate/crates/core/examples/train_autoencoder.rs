//! Trains one masked autoencoder on a few synthetic days and encodes a
//! day into one embedding per time slot.

use urbanmind::grid::{generate_synthetic, minmax_normalize, Region, SyntheticParams};
use urbanmind::mae::{train_mae, EmbeddingSource, MaeConfig, MaeModel};

fn main() -> urbanmind::Result<()> {
    let raw = generate_synthetic(&Region::new((0, 0), 10), 6, 12, 3, 1, &SyntheticParams::default())?;
    let (data, _) = minmax_normalize(&raw)?;
    let days: Vec<_> = (0..6).map(|n| data.day(n).to_owned()).collect();

    let mut model = MaeModel::new(MaeConfig {
        channels_in: 3,
        side: 10,
        embed_dim: 16,
        conv_widths: vec![8, 16],
        epochs: 15,
        lr: 3e-3,
        ..Default::default()
    })?;
    let report = train_mae(&mut model, &days)?;
    println!("initial loss {:.5}", report.initial_loss);
    for (e, l) in report.history.iter().enumerate().step_by(3) {
        println!("epoch {:>2}: {l:.5}", e + 1);
    }

    let emb = model.encode(days[0].view(), EmbeddingSource::Multifaceted)?;
    println!("day 0 encodes to {:?} (slots x embed_dim)", emb.vectors.dim());
    Ok(())
}
