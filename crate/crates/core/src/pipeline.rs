//! The three training stages, their on-disk artifacts and the run manifest.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.json
//! stage1/mae_v/  stage1/mae_k/  stage1/tokens/
//! stage2/checkpoint/  stage2/prompts.txt
//! stage3/predictions.f32  stage3/truth.f32  stage3/meta.json
//! metrics.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, restore_store, save_checkpoint, Checkpoint, RngState};
use crate::config::{AdaptationPolicy, AdaptationScope, Config, DataConfig};
use crate::error::{Error, Result};
use crate::eval::{metric_report, MetricReport};
use crate::grid::{
    apply_caps, clip_thresholds, generate_synthetic, load_stacked, make_splits, partition_city, read_f32, write_f32,
    CityGrid, ClipPolicy, NormalizationScaler, Region, SplitSpec, UrbanDynamicsTensor, META_FILE, VALUES_FILE,
};
use crate::heads::{mask_embeddings, reconstruction_loss_graph};
use crate::mae::{fuse_tokens, train_mae, EmbeddingSource, MaeModel, MaeTrainReport};
use crate::model::{Sample, StModel};
use crate::nn::{Adam, Graph, Mat, ParamId, Var};
use crate::tokens::{build_prompt, PromptContext, TokenSequence, Vocabulary};

/// Normalized per-region tensors of one city with their split.
#[derive(Clone, Debug)]
pub struct CityData {
    pub city: String,
    pub channel_names: Vec<String>,
    pub target_channel: usize,
    pub regions: Vec<Region>,
    pub tensors: Vec<UrbanDynamicsTensor>,
    pub split: SplitSpec,
    pub scaler: NormalizationScaler,
}

impl CityData {
    pub fn days(&self) -> usize {
        self.tensors[0].shape().days
    }

    pub fn slots(&self) -> usize {
        self.tensors[0].shape().slots
    }

    pub fn side(&self) -> usize {
        self.tensors[0].shape().side
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    fn indices_of(&self, regions: &[Region]) -> Vec<usize> {
        regions
            .iter()
            .map(|r| self.regions.iter().position(|x| x == r).expect("split regions come from the city"))
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_of(&self.split.train_regions)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_of(&self.split.test_regions)
    }
}

/// Seed of region `r`'s synthetic tensor.
fn region_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(r as u64)
}

/// Generates or loads the raw data, clips outliers and normalizes every
/// region with one scaler fitted on the whole city.
pub fn prepare_data(cfg: &DataConfig) -> Result<CityData> {
    let (raw, regions, split) = match &cfg.path {
        Some(path) => {
            let tensors = load_stacked(path)?;
            let regions: Vec<Region> = tensors.iter().map(|t| t.region).collect();
            let split = make_splits(&regions, cfg.mode, cfg.test_fraction, cfg.seed)?;
            (tensors, regions, split)
        }
        None => {
            let grid = CityGrid::new(cfg.city.clone(), cfg.grid_height, cfg.grid_width)?;
            let regions = partition_city(&grid, cfg.side, cfg.stride)?;
            let split = make_splits(&regions, cfg.mode, cfg.test_fraction, cfg.seed)?;
            let tensors = regions
                .iter()
                .enumerate()
                .map(|(r, region)| {
                    let params = match (&cfg.test_synthetic, split.train_regions.contains(region)) {
                        (Some(shifted), false) => shifted,
                        _ => &cfg.synthetic,
                    };
                    let mut t = generate_synthetic(region, cfg.days, cfg.slots, cfg.channels, region_seed(cfg.seed, r), params)?;
                    t.city = cfg.city.clone();
                    Ok(t)
                })
                .collect::<Result<Vec<_>>>()?;
            (tensors, regions, split)
        }
    };
    let first = &raw[0];
    let available = first.shape().channels;
    if cfg.channels > available {
        return Err(Error::Config(format!("{} channels requested, data has {available}", cfg.channels)));
    }
    let target = first
        .channel_index(&cfg.target)
        .ok_or_else(|| Error::Config(format!("target channel `{}` not in {:?}", cfg.target, first.channel_names)))?;
    let mut keep: Vec<usize> = vec![target];
    keep.extend((0..available).filter(|&c| c != target).take(cfg.channels - 1));
    let mut tensors: Vec<UrbanDynamicsTensor> = raw.iter().map(|t| t.select_channels(&keep)).collect::<Result<_>>()?;
    let channel_names = tensors[0].channel_names.clone();
    let scaler = if tensors[0].normalized {
        tensors[0]
            .scaler
            .clone()
            .ok_or_else(|| Error::Config("normalized dataset carries no scaler".into()))?
    } else {
        let policy = ClipPolicy::for_channels(&channel_names);
        let caps = {
            let refs: Vec<&UrbanDynamicsTensor> = tensors.iter().collect();
            clip_thresholds(&refs, &policy)?
        };
        for t in &mut tensors {
            apply_caps(t, &caps);
        }
        let refs: Vec<&UrbanDynamicsTensor> = tensors.iter().collect();
        let mut scaler = NormalizationScaler::fit(&refs)?;
        scaler.clip_policy = Some(policy);
        tensors = tensors.iter().map(|t| scaler.apply(t)).collect::<Result<_>>()?;
        scaler
    };
    Ok(CityData {
        city: tensors[0].city.clone(),
        channel_names,
        target_channel: 0,
        regions,
        tensors,
        split,
        scaler,
    })
}

/// Per-(region, day) token sequences, row `t` = token of slot `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCache {
    pub regions: Vec<Region>,
    pub days: usize,
    pub slots: usize,
    pub d_v: usize,
    pub d_k: usize,
    tokens: Vec<Array2<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenCacheMeta {
    regions: Vec<Region>,
    days: usize,
    slots: usize,
    d_v: usize,
    d_k: usize,
}

impl TokenCache {
    pub fn width(&self) -> usize {
        self.d_v + self.d_k
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Builds a cache from per-(region, day) matrices in region-major order.
    /// Values are held at `f32` precision, as on disk.
    pub fn new(regions: Vec<Region>, days: usize, d_v: usize, d_k: usize, mut tokens: Vec<Array2<f64>>) -> Result<Self> {
        if tokens.len() != regions.len() * days {
            return Err(Error::invalid(format!("{} token matrices for {} regions x {days} days", tokens.len(), regions.len())));
        }
        let slots = tokens.first().map_or(0, |t| t.nrows());
        if tokens.iter().any(|t| t.dim() != (slots, d_v + d_k)) {
            return Err(Error::invalid("token matrices differ in shape"));
        }
        for t in &mut tokens {
            t.mapv_inplace(|x| x as f32 as f64);
        }
        Ok(TokenCache {
            regions,
            days,
            slots,
            d_v,
            d_k,
            tokens,
        })
    }

    pub fn get(&self, region: usize, day: usize) -> &Array2<f64> {
        &self.tokens[region * self.days + day]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = TokenCacheMeta {
            regions: self.regions.clone(),
            days: self.days,
            slots: self.slots,
            d_v: self.d_v,
            d_k: self.d_k,
        };
        let path = dir.join(META_FILE);
        fs::write(&path, serde_json::to_string_pretty(&meta).expect("serializes")).map_err(|e| Error::io(&path, e))?;
        write_f32(&dir.join(VALUES_FILE), self.tokens.iter().flat_map(|t| t.iter().map(|&v| v as f32)))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: TokenCacheMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let values = read_f32(&dir.join(VALUES_FILE))?;
        let per = meta.slots * (meta.d_v + meta.d_k);
        let count = meta.regions.len() * meta.days;
        if values.len() != per * count {
            return Err(Error::format(dir.join(VALUES_FILE), format!("expected {} values, found {}", per * count, values.len())));
        }
        let tokens = values
            .chunks(per)
            .map(|c| Array2::from_shape_vec((meta.slots, meta.d_v + meta.d_k), c.iter().map(|&v| v as f64).collect()).expect("sized"))
            .collect();
        Ok(TokenCache {
            regions: meta.regions,
            days: meta.days,
            slots: meta.slots,
            d_v: meta.d_v,
            d_k: meta.d_k,
            tokens,
        })
    }
}

pub struct Stage1Output {
    pub mae_v: Option<MaeModel>,
    pub mae_k: Option<MaeModel>,
    pub reports: BTreeMap<String, MaeTrainReport>,
    pub cache: TokenCache,
}

/// Quadrant means of every channel per slot, zero-padded to `width`.
pub fn pooled_tokens(tensor: &UrbanDynamicsTensor, day: usize, width: usize) -> Array2<f64> {
    let x = tensor.day(day);
    let (slots, channels, side, _) = x.dim();
    let half = side.div_ceil(2);
    let mut out = Array2::zeros((slots, width));
    for t in 0..slots {
        let mut k = 0;
        for c in 0..channels {
            for (r0, r1) in [(0, half), (half.min(side - 1), side)] {
                for (c0, c1) in [(0, half), (half.min(side - 1), side)] {
                    if k < width {
                        let block = x.slice(s![t, c, r0..r1, c0..c1]);
                        out[[t, k]] = block.iter().map(|&v| v as f64).sum::<f64>() / block.len() as f64;
                    }
                    k += 1;
                }
            }
        }
    }
    out
}

/// Trains both autoencoders on the training portion and tokenizes every
/// (region, day) from unmasked data.
pub fn run_stage1(cfg: &Config, data: &CityData) -> Result<Stage1Output> {
    let ab = &cfg.eval.ablation;
    let (d_v, d_k) = (cfg.mae.d_v, cfg.mae.d_k);
    let days = data.days();
    let train_days = data.split.train_days(days);
    let mut reports = BTreeMap::new();
    let mut tokens = Vec::with_capacity(data.regions.len() * days);
    if ab.no_muffin_mae {
        for t in &data.tensors {
            for n in 0..days {
                tokens.push(pooled_tokens(t, n, d_v + d_k));
            }
        }
        return Ok(Stage1Output {
            mae_v: None,
            mae_k: None,
            reports,
            cache: TokenCache::new(data.regions.clone(), days, d_v, d_k, tokens)?,
        });
    }
    let schedule = ab.schedule(&cfg.mae.strategy_schedule);
    let train: Vec<usize> = data.train_indices();
    let mut fit = |target: bool| -> Result<MaeModel> {
        let mut mc = cfg.mae.model_config(target, data.channels(), data.side());
        mc.strategy_schedule = schedule.clone();
        let mut model = MaeModel::new(mc)?;
        let days_x: Vec<_> = train
            .iter()
            .flat_map(|&r| {
                train_days.clone().map(move |n| {
                    let t = &data.tensors[r];
                    if target {
                        t.day_channel(n, data.target_channel)
                    } else {
                        t.day(n).to_owned()
                    }
                })
            })
            .collect();
        let report = train_mae(&mut model, &days_x)?;
        reports.insert(if target { "mae_k" } else { "mae_v" }.to_string(), report);
        Ok(model)
    };
    let mae_v = if ab.no_multifaceted_embedding { None } else { Some(fit(false)?) };
    let mae_k = if ab.no_target_embedding { None } else { Some(fit(true)?) };
    for (r, t) in data.tensors.iter().enumerate() {
        for n in 0..days {
            let slots = data.slots();
            let v = match &mae_v {
                Some(m) => m.encode(t.day(n), EmbeddingSource::Multifaceted)?,
                None => zero_embedding(slots, d_v, EmbeddingSource::Multifaceted),
            };
            let vk = match &mae_k {
                Some(m) => m.encode(t.day_channel(n, data.target_channel).view(), EmbeddingSource::Target)?,
                None => zero_embedding(slots, d_k, EmbeddingSource::Target),
            };
            let mut u = fuse_tokens(&v, &vk)?;
            u.provenance = Some((data.regions[r], n));
            tokens.push(u.tokens);
        }
    }
    Ok(Stage1Output {
        mae_v,
        mae_k,
        reports,
        cache: TokenCache::new(data.regions.clone(), days, d_v, d_k, tokens)?,
    })
}

fn zero_embedding(slots: usize, d: usize, source: EmbeddingSource) -> crate::mae::EmbeddingSequence {
    crate::mae::EmbeddingSequence {
        vectors: Array2::zeros((slots, d)),
        source,
        provenance: None,
    }
}

pub fn vocabulary(data: &CityData) -> Vocabulary {
    Vocabulary::for_data(&data.city, &data.channel_names)
}

/// Prompt of the window starting at 0-based slot `start`.
pub fn prompt_for(cfg: &Config, data: &CityData, region: usize, start: usize) -> PromptContext {
    let (h, m) = (cfg.heads.h, cfg.heads.m);
    let reg = data.regions[region];
    PromptContext {
        city: data.city.clone(),
        top_left: reg.top_left,
        side: reg.side,
        prior_hours: (start + 1..=start + h).collect(),
        target_hours: (start + h + 1..=start + h + m).collect(),
        task: data.channel_names[data.target_channel].clone(),
    }
}

/// Every `h + m` window of the listed regions and days, in
/// (region, day, start) order, with the rendered prompts.
pub fn build_samples(
    cfg: &Config,
    data: &CityData,
    cache: &TokenCache,
    vocab: &Vocabulary,
    regions: &[usize],
    days: Range<usize>,
) -> Result<(Vec<Sample>, Vec<String>)> {
    let (h, m) = (cfg.heads.h, cfg.heads.m);
    let slots = data.slots();
    if h + m > slots {
        return Err(Error::Config(format!("h + m = {} exceeds {slots} slots", h + m)));
    }
    let mut samples = Vec::new();
    let mut prompts = Vec::new();
    for &r in regions {
        for n in days.clone() {
            let u = TokenSequence {
                tokens: cache.get(r, n).clone(),
                provenance: Some((data.regions[r], n)),
            };
            for start in 0..=slots - h - m {
                let ctx = prompt_for(cfg, data, r, start);
                ctx.validate(&data.channel_names)?;
                let prompt = build_prompt(&ctx);
                let prior: Vec<usize> = (start..start + h).collect();
                let target = data.tensors[r]
                    .values()
                    .slice(s![n, start + h..start + h + m, data.target_channel, .., ..])
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                samples.push(Sample {
                    region: r,
                    day: n,
                    start,
                    text_ids: vocab.tokenize(&prompt),
                    tokens: u.select(&prior)?.tokens,
                    target,
                });
                prompts.push(prompt);
            }
        }
    }
    Ok((samples, prompts))
}

/// Stage-2 optimizer loop with everything needed to resume exactly.
#[derive(Clone, Debug)]
pub struct Stage2Trainer {
    pub config: Config,
    pub model: StModel,
    pub adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub epoch: usize,
    pub step: usize,
    /// Mean prediction loss per completed epoch.
    pub history: Vec<f64>,
    /// Mean auxiliary reconstruction loss per completed epoch.
    pub aux_history: Vec<f64>,
    epoch_sums: (f64, f64, usize),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerState {
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    step: usize,
    history: Vec<f64>,
    aux_history: Vec<f64>,
    epoch_sums: (f64, f64, usize),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpec {
    config: Config,
    vocab: Vocabulary,
    token_dim: usize,
    side: usize,
}

const STAGE2_KIND: &str = "urbanmind.stage2";

impl Stage2Trainer {
    pub fn new(config: &Config, vocab: Vocabulary, token_dim: usize, side: usize) -> Result<Self> {
        let mut bb = config.backbone.clone();
        if config.eval.ablation.no_finetuning {
            bb.l_frozen = bb.layers;
        }
        let model = StModel::new(bb, config.heads.clone(), vocab, token_dim, side)?;
        Ok(Stage2Trainer {
            config: config.clone(),
            adam: Adam::new(config.backbone.lr),
            rng: ChaCha8Rng::seed_from_u64(config.backbone.seed ^ 0x5747_a6e2),
            model,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            aux_history: Vec::new(),
            epoch_sums: (0.0, 0.0, 0),
        })
    }

    fn aux_weight(&self) -> f64 {
        self.config
            .eval
            .aux_recon_weight
            .unwrap_or(1.0 / self.config.backbone.hidden_dim as f64)
    }

    /// One optimizer step on the next batch of the current epoch.
    pub fn step(&mut self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        if self.cursor == 0 {
            self.order = (0..samples.len()).collect();
            self.order.shuffle(&mut self.rng);
        }
        if self.order.len() != samples.len() {
            return Err(Error::invalid("sample count changed within an epoch"));
        }
        let end = (self.cursor + self.config.backbone.batch_size).min(samples.len());
        let batch: Vec<&Sample> = self.order[self.cursor..end].iter().map(|&i| &samples[i]).collect();
        let weight = self.aux_weight();
        let aux = (weight > 0.0).then_some((self.config.tta.p, weight, &mut self.rng));
        let (loss, recon) = self.model.train_step(&mut self.adam, &batch, aux)?;
        let b = batch.len() as f64;
        self.epoch_sums.0 += loss * b;
        self.epoch_sums.1 += recon.unwrap_or(0.0) * b;
        self.epoch_sums.2 += batch.len();
        self.cursor = end;
        self.step += 1;
        if self.cursor == samples.len() {
            let n = self.epoch_sums.2 as f64;
            self.history.push(self.epoch_sums.0 / n);
            self.aux_history.push(self.epoch_sums.1 / n);
            self.epoch_sums = (0.0, 0.0, 0);
            self.cursor = 0;
            self.epoch += 1;
        }
        Ok(loss)
    }

    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<f64> {
        let start = self.epoch;
        while self.epoch == start {
            self.step(samples)?;
        }
        Ok(*self.history.last().expect("epoch recorded"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let spec = ModelSpec {
            config: self.config.clone(),
            vocab: self.model.backbone.vocab.clone(),
            token_dim: self.model.token_dim,
            side: self.model.side,
        };
        let mut ckpt = Checkpoint::new(STAGE2_KIND, serde_json::to_value(&spec).expect("serializes"), self.model.store.clone());
        ckpt.shared = self.model.shared_names();
        ckpt.optimizer = Some(self.adam.clone());
        ckpt.rng = vec![("trainer".into(), RngState::capture(&self.rng))];
        ckpt.state = serde_json::to_value(TrainerState {
            order: self.order.clone(),
            cursor: self.cursor,
            epoch: self.epoch,
            step: self.step,
            history: self.history.clone(),
            aux_history: self.aux_history.clone(),
            epoch_sums: self.epoch_sums,
        })
        .expect("serializes");
        save_checkpoint(&ckpt, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(dir)?;
        let meta = dir.join(META_FILE);
        if ckpt.kind != STAGE2_KIND {
            return Err(Error::format(&meta, format!("checkpoint kind `{}` is not a Stage-2 checkpoint", ckpt.kind)));
        }
        let spec: ModelSpec = serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::format(&meta, e.to_string()))?;
        let state: TrainerState = serde_json::from_value(ckpt.state.clone()).map_err(|e| Error::format(&meta, e.to_string()))?;
        let mut trainer = Stage2Trainer::new(&spec.config, spec.vocab, spec.token_dim, spec.side)?;
        restore_store(&mut trainer.model.store, &ckpt.store, &meta)?;
        if ckpt.shared != trainer.model.shared_names() {
            return Err(Error::format(&meta, "shared section does not match the trunk layout"));
        }
        trainer.rng = ckpt.rng("trainer")?;
        trainer.adam = ckpt.optimizer.ok_or_else(|| Error::format(&meta, "missing optimizer section"))?;
        trainer.order = state.order;
        trainer.cursor = state.cursor;
        trainer.epoch = state.epoch;
        trainer.step = state.step;
        trainer.history = state.history;
        trainer.aux_history = state.aux_history;
        trainer.epoch_sums = state.epoch_sums;
        Ok(trainer)
    }
}

fn snapshot(model: &StModel, ids: &[ParamId]) -> Vec<(ParamId, Mat)> {
    ids.iter().map(|&id| (id, model.store.get(id).clone())).collect()
}

fn check_frozen(model: &StModel, frozen: &[(ParamId, Mat)]) -> Result<()> {
    for (id, v) in frozen {
        if model.store.get(*id) != v {
            return Err(Error::FreezeViolation(model.store.name(*id).to_string()));
        }
    }
    Ok(())
}

/// Trains for the configured number of epochs and verifies that no frozen
/// parameter moved.
pub fn run_stage2(trainer: &mut Stage2Trainer, samples: &[Sample]) -> Result<()> {
    let frozen = snapshot(&trainer.model, &trainer.model.frozen_ids());
    while trainer.epoch < trainer.config.backbone.epochs {
        trainer.run_epoch(samples)?;
    }
    check_frozen(&trainer.model, &frozen)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub unit: usize,
    /// Indices into the test sample list.
    pub samples: Vec<usize>,
    /// Eq. 4 loss before each update, then once after the last one.
    pub recon_history: Vec<f64>,
    pub fell_back: bool,
}

#[derive(Clone, Debug)]
pub struct Stage3Output {
    /// `(samples, m * side * side)` after adaptation.
    pub predictions: Mat,
    /// Same layout, from the unadapted Stage-2 heads.
    pub pre_predictions: Mat,
    pub units: Vec<UnitReport>,
}

/// Adapts the trunk and `G` on one unit and predicts with `P`. With
/// `adapt == false` both prediction sets come from the unadapted model.
pub fn adapt_unit(
    model: &mut StModel,
    batch: &[&Sample],
    policy: &AdaptationPolicy,
    rng: &mut ChaCha8Rng,
    adapt: bool,
) -> Result<(Mat, Mat, Vec<f64>, bool)> {
    let (e, segments) = model.hidden(batch)?;
    let pre = model.predict_from_hidden(&model.store, &e, &segments);
    if !adapt {
        return Ok((pre.clone(), pre, Vec::new(), false));
    }
    let ids = model.heads.adaptation_ids();
    let saved = snapshot(model, &ids);
    // One mask per unit: every epoch descends the same objective.
    let (masked, _) = mask_embeddings(&e, policy.p, rng)?;
    let clean = Rc::new(e.clone());
    let mut adam = Adam::new(policy.lr);
    let mut history = Vec::with_capacity(policy.epochs + 1);
    let recon_loss = |model: &StModel| -> (Graph, Var) {
        let mut g = Graph::new();
        let x = g.constant(masked.clone());
        let r = model.heads.reconstruct_graph(&mut g, &model.store, x, &segments);
        let l = reconstruction_loss_graph(&mut g, r, clean.clone());
        (g, l)
    };
    let mut diverged = false;
    for _ in 0..policy.epochs {
        let (g, l) = recon_loss(model);
        let v = g.scalar(l);
        history.push(v);
        if !v.is_finite() {
            diverged = true;
            break;
        }
        let grads = g.backward(l);
        if !grads.is_finite() {
            diverged = true;
            break;
        }
        adam.step(&mut model.store, &grads, &ids);
    }
    if !diverged {
        let (g, l) = recon_loss(model);
        history.push(g.scalar(l));
        diverged = !g.scalar(l).is_finite();
    }
    let mut post = if diverged { pre.clone() } else { model.predict_from_hidden(&model.store, &e, &segments) };
    if post.iter().any(|v| !v.is_finite()) {
        diverged = true;
        post = pre.clone();
    }
    if diverged || policy.reset {
        for (id, v) in saved {
            model.store.set(id, v);
        }
    }
    Ok((pre, post, history, diverged))
}

/// Test-time adaptation over the test samples, unit by unit.
pub fn run_stage3(cfg: &Config, model: &mut StModel, samples: &[Sample]) -> Result<Stage3Output> {
    let policy = &cfg.tta;
    policy.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no test samples"));
    }
    let units: Vec<Vec<usize>> = match policy.scope {
        AdaptationScope::PerRegion => {
            let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                match groups.iter_mut().find(|(r, _)| *r == s.region) {
                    Some((_, v)) => v.push(i),
                    None => groups.push((s.region, vec![i])),
                }
            }
            groups.into_iter().map(|(_, v)| v).collect()
        }
        AdaptationScope::PerBatch => (0..samples.len())
            .collect::<Vec<_>>()
            .chunks(policy.batch_size)
            .map(|c| c.to_vec())
            .collect(),
    };
    let width = model.target_len();
    let mut predictions = Mat::zeros((samples.len(), width));
    let mut pre_predictions = Mat::zeros((samples.len(), width));
    let mut reports = Vec::with_capacity(units.len());
    let adapt = !cfg.eval.ablation.no_adaptation;
    for (u, idx) in units.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
        rng.set_stream(u as u64);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let (pre, post, history, fell_back) = adapt_unit(model, &batch, policy, &mut rng, adapt)?;
        for (k, &i) in idx.iter().enumerate() {
            pre_predictions.row_mut(i).assign(&pre.row(k));
            predictions.row_mut(i).assign(&post.row(k));
        }
        reports.push(UnitReport {
            unit: u,
            samples: idx,
            recon_history: history,
            fell_back,
        });
    }
    Ok(Stage3Output {
        predictions,
        pre_predictions,
        units: reports,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    Only(u8),
    All,
}

impl StageSelection {
    fn includes(self, stage: u8) -> bool {
        match self {
            StageSelection::All => true,
            StageSelection::Only(s) => s == stage,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub status: String,
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub loss_history: BTreeMap<String, Vec<f64>>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Config,
    pub config_fingerprint: String,
    pub seeds: BTreeMap<String, u64>,
    pub split: SplitSpec,
    pub stages: Vec<StageRecord>,
    pub tta_fallback_units: Vec<usize>,
    pub notes: BTreeMap<String, String>,
}

/// The seeds a run is reproducible from, by component.
pub fn run_seeds(cfg: &Config) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("data".to_string(), cfg.data.seed),
        ("mae".to_string(), cfg.mae.seed),
        ("backbone".to_string(), cfg.backbone.seed),
        ("tta".to_string(), cfg.tta.seed),
    ])
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";

impl RunManifest {
    pub fn new(cfg: &Config, split: &SplitSpec) -> Self {
        let seeds = run_seeds(cfg);
        let notes = BTreeMap::from([
            ("recon_loss_normalization".to_string(), "per-vector sum of squares, averaged over the n embeddings".to_string()),
            ("metrics_scale".to_string(), "normalized [-1, 1] values of the target channel".to_string()),
        ]);
        RunManifest {
            config: cfg.clone(),
            config_fingerprint: cfg.fingerprint(),
            seeds,
            split: split.clone(),
            stages: Vec::new(),
            tta_fallback_units: Vec::new(),
            notes,
        }
    }

    pub fn stage(&self, stage: u8) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn is_complete(&self, stage: u8) -> bool {
        self.stage(stage).is_some_and(|s| s.status == "complete")
    }

    fn record(&mut self, rec: StageRecord) {
        self.stages.retain(|s| s.stage < rec.stage);
        self.stages.push(rec);
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub city: String,
    pub dynamics: String,
    pub samples: usize,
    pub m: usize,
    pub side: usize,
    /// `(region top-left, day, first prior slot)` per prediction row.
    pub provenance: Vec<((usize, usize), usize, usize)>,
}

/// Everything produced by a run, kept in memory.
pub struct RunOutput {
    pub manifest: RunManifest,
    pub data: CityData,
    pub stage1: Option<Stage1Output>,
    pub trainer: Option<Stage2Trainer>,
    pub test_samples: Vec<Sample>,
    pub stage3: Option<Stage3Output>,
    pub report: Option<MetricReport>,
}

fn stage_dir(run_dir: Option<&Path>, sub: &str) -> Option<PathBuf> {
    run_dir.map(|d| d.join(sub))
}

/// Runs the selected stages. Later stages started on their own read the
/// earlier stages' artifacts from `run_dir`; missing artifacts are a
/// stage-ordering error.
pub fn run_pipeline(cfg: &Config, run_dir: Option<&Path>, stages: StageSelection) -> Result<RunOutput> {
    cfg.validate()?;
    let data = prepare_data(&cfg.data)?;
    let mut manifest = match (stages, run_dir) {
        (StageSelection::Only(s), Some(dir)) if s > 1 => {
            let m = RunManifest::load(dir).map_err(|_| Error::StageOrder(format!("stage {s} needs the manifest of an earlier run in {}", dir.display())))?;
            if m.config_fingerprint != cfg.fingerprint() {
                return Err(Error::StageOrder("config differs from the one the earlier stages ran with".into()));
            }
            m
        }
        _ => RunManifest::new(cfg, &data.split),
    };
    let require = |manifest: &RunManifest, stage: u8| -> Result<()> {
        if manifest.is_complete(stage) {
            Ok(())
        } else {
            Err(Error::StageOrder(format!("stage {} requires stage {stage} to be complete", stage + 1)))
        }
    };

    let mut stage1 = None;
    let cache = if stages.includes(1) {
        let t0 = Instant::now();
        let out = run_stage1(cfg, &data)?;
        if let Some(dir) = stage_dir(run_dir, "stage1") {
            for (name, model) in [("mae_v", &out.mae_v), ("mae_k", &out.mae_k)] {
                if let Some(m) = model {
                    let ck = Checkpoint::new("urbanmind.mae", serde_json::to_value(&m.config).expect("serializes"), m.store.clone());
                    save_checkpoint(&ck, dir.join(name))?;
                }
            }
            out.cache.save(&dir.join("tokens"))?;
        }
        manifest.record(StageRecord {
            stage: 1,
            status: "complete".into(),
            seed: cfg.mae.seed,
            checkpoint: run_dir.map(|_| "stage1".to_string()),
            loss_history: out.reports.iter().map(|(k, r)| (k.clone(), r.history.clone())).collect(),
            wall_clock_s: t0.elapsed().as_secs_f64(),
        });
        let c = out.cache.clone();
        stage1 = Some(out);
        Some(c)
    } else if stages.includes(2) {
        require(&manifest, 1)?;
        let dir = stage_dir(run_dir, "stage1/tokens").ok_or_else(|| Error::StageOrder("stage 2 alone needs a run directory".into()))?;
        Some(TokenCache::load(&dir)?)
    } else {
        None
    };

    let vocab = vocabulary(&data);
    let mut trainer = None;
    if stages.includes(2) {
        let cache = cache.as_ref().expect("stage 1 output or cache");
        let (samples, prompts) = build_samples(cfg, &data, cache, &vocab, &data.train_indices(), data.split.train_days(data.days()))?;
        let t0 = Instant::now();
        let mut tr = Stage2Trainer::new(cfg, vocab.clone(), cache.width(), data.side())?;
        run_stage2(&mut tr, &samples)?;
        if let Some(dir) = stage_dir(run_dir, "stage2") {
            tr.save(&dir.join("checkpoint"))?;
            let mut distinct = prompts.clone();
            distinct.dedup();
            let path = dir.join("prompts.txt");
            fs::write(&path, distinct.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
        }
        manifest.record(StageRecord {
            stage: 2,
            status: "complete".into(),
            seed: cfg.backbone.seed,
            checkpoint: run_dir.map(|_| "stage2/checkpoint".to_string()),
            loss_history: BTreeMap::from([
                ("prediction".to_string(), tr.history.clone()),
                ("aux_reconstruction".to_string(), tr.aux_history.clone()),
            ]),
            wall_clock_s: t0.elapsed().as_secs_f64(),
        });
        trainer = Some(tr);
    } else if stages.includes(3) {
        require(&manifest, 2)?;
        let dir = stage_dir(run_dir, "stage2/checkpoint").ok_or_else(|| Error::StageOrder("stage 3 alone needs a run directory".into()))?;
        if !dir.join(META_FILE).exists() {
            return Err(Error::StageOrder(format!("no Stage-2 checkpoint at {}", dir.display())));
        }
        trainer = Some(Stage2Trainer::load(&dir)?);
    }

    let mut test_samples = Vec::new();
    let mut stage3 = None;
    let mut report = None;
    if stages.includes(3) {
        let tr = trainer.as_mut().expect("stage 2 output or checkpoint");
        let cache = match &cache {
            Some(c) => c.clone(),
            None => {
                let dir = stage_dir(run_dir, "stage1/tokens").ok_or_else(|| Error::StageOrder("missing token cache".into()))?;
                TokenCache::load(&dir)?
            }
        };
        let (samples, _) = build_samples(cfg, &data, &cache, &vocab, &data.test_indices(), data.split.test_days(data.days()))?;
        let t0 = Instant::now();
        let mut model = tr.model.clone();
        let out = run_stage3(cfg, &mut model, &samples)?;
        let rep = metric_report(cfg, &data, &samples, &out)?;
        manifest.tta_fallback_units = out.units.iter().filter(|u| u.fell_back).map(|u| u.unit).collect();
        let mut hist = BTreeMap::new();
        for u in &out.units {
            hist.insert(format!("unit{:04}", u.unit), u.recon_history.clone());
        }
        if let Some(dir) = run_dir {
            let s3 = dir.join("stage3");
            fs::create_dir_all(&s3).map_err(|e| Error::io(&s3, e))?;
            write_f32(&s3.join("predictions.f32"), out.predictions.iter().map(|&v| v as f32))?;
            let truth: Vec<f32> = samples.iter().flat_map(|s| s.target.iter().map(|&v| v as f32)).collect();
            write_f32(&s3.join("truth.f32"), truth.into_iter())?;
            write_f32(&s3.join("pre_predictions.f32"), out.pre_predictions.iter().map(|&v| v as f32))?;
            let meta = PredictionMeta {
                city: data.city.clone(),
                dynamics: data.channel_names[data.target_channel].clone(),
                samples: samples.len(),
                m: cfg.heads.m,
                side: data.side(),
                provenance: samples.iter().map(|s| (data.regions[s.region].top_left, s.day, s.start)).collect(),
            };
            write_json(&s3.join("meta.json"), &meta)?;
            write_json(&s3.join("units.json"), &out.units)?;
            write_json(&dir.join(METRICS_FILE), &rep)?;
        }
        manifest.record(StageRecord {
            stage: 3,
            status: "complete".into(),
            seed: cfg.tta.seed,
            checkpoint: run_dir.map(|_| "stage3".to_string()),
            loss_history: hist,
            wall_clock_s: t0.elapsed().as_secs_f64(),
        });
        test_samples = samples;
        stage3 = Some(out);
        report = Some(rep);
    }
    if let Some(dir) = run_dir {
        manifest.save(dir)?;
    }
    Ok(RunOutput {
        manifest,
        data,
        stage1,
        trainer,
        test_samples,
        stage3,
        report,
    })
}

/// Loads the adapted predictions, unadapted predictions and truth written
/// by Stage 3, each as `(samples, m * side * side)`.
pub fn load_predictions(run_dir: &Path) -> Result<(Mat, Mat, Mat, PredictionMeta)> {
    let s3 = run_dir.join("stage3");
    let path = s3.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: PredictionMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let width = meta.m * meta.side * meta.side;
    let load = |name: &str| -> Result<Mat> {
        let p = s3.join(name);
        let v = read_f32(&p)?;
        if v.len() != meta.samples * width {
            return Err(Error::format(&p, format!("expected {} values, found {}", meta.samples * width, v.len())));
        }
        Ok(Array2::from_shape_vec((meta.samples, width), v.into_iter().map(|x| x as f64).collect()).expect("sized"))
    };
    let pred = load("predictions.f32")?;
    let pre = load("pre_predictions.f32")?;
    let truth = load("truth.f32")?;
    Ok((pred, pre, truth, meta))
}
