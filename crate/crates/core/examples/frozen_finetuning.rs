//! Stage-2 fine-tuning with partially frozen attention: the first
//! `l_frozen` layers stay fixed and later layers only train their query
//! matrices.

use urbanmind::config::Config;
use urbanmind::pipeline::{build_samples, prepare_data, run_stage1, vocabulary, Stage2Trainer};

fn main() -> urbanmind::Result<()> {
    let mut cfg = Config::desk_small();
    cfg.mae.epochs = 5;
    cfg.backbone.layers = 3;
    cfg.backbone.l_frozen = 1;

    let data = prepare_data(&cfg.data)?;
    let cache = run_stage1(&cfg, &data)?.cache;
    let vocab = vocabulary(&data);
    let (samples, prompts) =
        build_samples(&cfg, &data, &cache, &vocab, &data.train_indices(), data.split.train_days(data.days()))?;
    println!("{} training windows; first prompt:\n  {}", samples.len(), prompts[0]);

    let mut trainer = Stage2Trainer::new(&cfg, vocab, cache.width(), data.side())?;
    let store = &trainer.model.store;
    let trainable: usize = store.trainable_ids().iter().map(|&id| store.get(id).len()).sum();
    println!("{trainable} of {} parameters trainable", store.total_scalars());
    let before = trainer.model.store.clone();

    for epoch in 0..5 {
        println!("epoch {epoch}: loss {:.5}", trainer.run_epoch(&samples)?);
    }
    for (l, layer) in trainer.model.backbone.layers.iter().enumerate() {
        let moved = |id| trainer.model.store.get(id) != before.get(id);
        println!(
            "layer {}: W_q moved {}, W_k moved {}, FFN moved {}",
            l + 1,
            moved(layer.attn.w_q),
            moved(layer.attn.w_k),
            layer.ffn.ids().into_iter().any(moved)
        );
    }
    Ok(())
}
