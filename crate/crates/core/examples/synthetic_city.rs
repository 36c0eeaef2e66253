//! Generates a synthetic city, partitions it into regions, normalizes the
//! dynamics, splits regions for zero-shot testing and round-trips the
//! dataset through disk.

use urbanmind::grid::{
    default_channel_names, generate_synthetic, load_stacked, make_splits, minmax_normalize, partition_city,
    save_stacked, CityGrid, SplitMode, SyntheticParams,
};

fn main() -> urbanmind::Result<()> {
    let grid = CityGrid::new("synthetic", 20, 20)?;
    let regions = partition_city(&grid, 10, 5)?;
    println!("{} regions of 10x10 cells on a 20x20 grid", regions.len());

    let tensors = regions
        .iter()
        .enumerate()
        .map(|(r, region)| generate_synthetic(region, 4, 12, 3, r as u64, &SyntheticParams::default()))
        .collect::<urbanmind::Result<Vec<_>>>()?;
    let shape = tensors[0].shape();
    println!("per region: {shape:?}, channels {:?}", default_channel_names(3));

    let (normalized, scaler) = minmax_normalize(&tensors[0])?;
    let v = normalized.values();
    let (lo, hi) = v.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    println!("region 0 normalized into [{lo:.3}, {hi:.3}]");
    let raw = tensors[0].values()[[0, 6, 0, 3, 3]] as f64;
    let y = scaler.normalize_value(0, raw);
    println!("speed {raw:.2} -> {y:.4} -> {:.2}", scaler.denormalize_value(0, y));

    let split = make_splits(&regions, SplitMode::ZeroShot, 0.25, 0)?;
    println!(
        "zero-shot split: {} train / {} test regions, disjoint: {}",
        split.train_regions.len(),
        split.test_regions.len(),
        split.is_disjoint()
    );

    let dir = std::env::temp_dir().join("urbanmind-synthetic-city");
    save_stacked(&tensors, &dir)?;
    let back = load_stacked(&dir)?;
    println!("reloaded {} regions from {}, identical: {}", back.len(), dir.display(), back == tensors);
    Ok(())
}
