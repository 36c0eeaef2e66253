//! The three channel-sensitive masks on one day of data.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use urbanmind::masking::{apply_mask, global_mask, spatial_mask, temporal_mask, MaskShape};

fn main() -> urbanmind::Result<()> {
    let shape = MaskShape::new(12, 3, 10);
    let day = Array4::from_elem((12, 3, 10, 10), 1.0f32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let masks = [
        spatial_mask(shape, 0.25, &mut rng)?,
        temporal_mask(shape, 0.33, &mut rng)?,
        global_mask(shape, 0.25, 0.33, &mut rng)?,
    ];
    for m in &masks {
        let masked = apply_mask(day.view(), m)?;
        let zeros = masked.iter().filter(|&&v| v == 0.0).count();
        let mut slots: Vec<usize> = m.indices.iter().map(|i| i.0).collect();
        slots.dedup();
        println!(
            "{:?}: {} indices over {} slots, {zeros} zeroed values",
            m.strategy,
            m.indices.len(),
            slots.len()
        );
    }
    Ok(())
}
