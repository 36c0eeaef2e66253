use urbanmind::config::Config;

/// The small config with training cut to a couple of epochs.
pub fn quick() -> Config {
    let mut c = Config::desk_small();
    c.mae.epochs = 2;
    c.backbone.epochs = 2;
    c.tta.epochs = 2;
    c.eval.plots = false;
    c
}
