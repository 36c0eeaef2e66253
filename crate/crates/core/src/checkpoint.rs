//! Checkpoint directories: a JSON `meta` file plus a flat little-endian
//! `params.f32` payload holding parameters and optimizer moments.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::META_FILE;
use crate::nn::optim::AdamSlot;
use crate::nn::{Adam, Mat, ParamStore};

pub const FORMAT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskEntry {
    pub name: String,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotEntry {
    pub name: String,
    pub t: u64,
    pub m_offset: usize,
    pub v_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: Vec<SlotEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub params: Vec<ParamEntry>,
    pub trainable_mask: Vec<MaskEntry>,
    /// Names of parameters shared between heads.
    pub shared: Vec<String>,
    pub optimizer: Option<OptimizerEntry>,
}

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal string; the position is 128-bit.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::invalid("rng seed must be 32 bytes"))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::invalid(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format_version: u32,
    kind: String,
    config: Value,
    manifest: Manifest,
    rng: Vec<(String, RngState)>,
    state: Value,
    payload_len: usize,
    payload_sha256: String,
}

/// Everything a checkpoint holds besides the layer wiring.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub store: ParamStore,
    pub shared: Vec<String>,
    pub optimizer: Option<Adam>,
    pub rng: Vec<(String, RngState)>,
    /// Free-form trainer state (epoch, cursor, histories).
    pub state: Value,
}

impl Checkpoint {
    pub fn new(kind: &str, config: Value, store: ParamStore) -> Self {
        Checkpoint {
            kind: kind.into(),
            config,
            store,
            shared: Vec::new(),
            optimizer: None,
            rng: Vec::new(),
            state: Value::Null,
        }
    }

    pub fn rng(&self, name: &str) -> Result<ChaCha8Rng> {
        self.rng
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no rng `{name}`")))?
            .1
            .restore()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload: Vec<f32> = Vec::with_capacity(ckpt.store.total_scalars());
    let mut params = Vec::new();
    let mut mask = Vec::new();
    for (_, p) in ckpt.store.iter() {
        let (r, c) = p.value.dim();
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: [r, c],
            offset: payload.len(),
        });
        mask.push(MaskEntry {
            name: p.name.clone(),
            trainable: p.trainable,
        });
        payload.extend(p.value.iter().map(|&v| v as f32));
    }
    let optimizer = ckpt.optimizer.as_ref().map(|adam| {
        let mut slots = Vec::new();
        for (id, slot) in adam.slots() {
            let m_offset = payload.len();
            payload.extend(slot.m.iter().map(|&v| v as f32));
            let v_offset = payload.len();
            payload.extend(slot.v.iter().map(|&v| v as f32));
            slots.push(SlotEntry {
                name: ckpt.store.name(id).to_string(),
                t: slot.t,
                m_offset,
                v_offset,
            });
        }
        OptimizerEntry {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            slots,
        }
    });
    let bytes: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
    let meta = Meta {
        format_version: FORMAT_VERSION,
        kind: ckpt.kind.clone(),
        config: ckpt.config.clone(),
        manifest: Manifest {
            params,
            trainable_mask: mask,
            shared: ckpt.shared.clone(),
            optimizer,
        },
        rng: ckpt.rng.clone(),
        state: ckpt.state.clone(),
        payload_len: payload.len(),
        payload_sha256: sha256_hex(&bytes),
    };
    let ppath = dir.join(PARAMS_FILE);
    fs::write(&ppath, &bytes).map_err(|e| Error::io(&ppath, e))?;
    let mpath = dir.join(META_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(|e| Error::io(&mpath, e))
}

fn slice_mat(payload: &[f32], offset: usize, shape: (usize, usize), path: &Path) -> Result<Mat> {
    let n = shape.0 * shape.1;
    let end = offset.checked_add(n).filter(|&e| e <= payload.len()).ok_or_else(|| {
        Error::format(path, format!("block at offset {offset} with {n} values overruns the payload"))
    })?;
    Ok(Array2::from_shape_vec(shape, payload[offset..end].iter().map(|&v| v as f64).collect()).expect("sized"))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let mpath = dir.join(META_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &mpath,
            format!("format version {} (expected {FORMAT_VERSION})", meta.format_version),
        ));
    }
    let ppath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    if bytes.len() != meta.payload_len * 4 {
        return Err(Error::format(
            &ppath,
            format!("{} bytes, manifest declares {} values", bytes.len(), meta.payload_len),
        ));
    }
    if sha256_hex(&bytes) != meta.payload_sha256 {
        return Err(Error::format(&ppath, "payload digest does not match the manifest"));
    }
    let payload = crate::grid::read_f32_bytes(&bytes);
    let man = &meta.manifest;
    if man.trainable_mask.len() != man.params.len()
        || man.params.iter().zip(&man.trainable_mask).any(|(p, m)| p.name != m.name)
    {
        return Err(Error::format(&mpath, "trainable_mask does not list the parameters in order"));
    }
    let mut store = ParamStore::new();
    let mut expect_offset = 0;
    for (p, m) in man.params.iter().zip(&man.trainable_mask) {
        if p.offset != expect_offset {
            return Err(Error::format(&mpath, format!("parameter `{}` has offset {} (expected {expect_offset})", p.name, p.offset)));
        }
        if store.id(&p.name).is_some() {
            return Err(Error::format(&mpath, format!("duplicate parameter `{}`", p.name)));
        }
        let value = slice_mat(&payload, p.offset, (p.shape[0], p.shape[1]), &mpath)?;
        expect_offset += value.len();
        store.add(p.name.clone(), value, m.trainable);
    }
    for name in &man.shared {
        if store.id(name).is_none() {
            return Err(Error::format(&mpath, format!("shared parameter `{name}` is not in the manifest")));
        }
    }
    let optimizer = match &man.optimizer {
        None => None,
        Some(o) => {
            let mut adam = Adam::new(o.lr);
            adam.beta1 = o.beta1;
            adam.beta2 = o.beta2;
            adam.eps = o.eps;
            for s in &o.slots {
                let id = store
                    .id(&s.name)
                    .ok_or_else(|| Error::format(&mpath, format!("optimizer slot for unknown parameter `{}`", s.name)))?;
                let shape = store.get(id).dim();
                adam.set_slot(
                    id,
                    AdamSlot {
                        m: slice_mat(&payload, s.m_offset, shape, &mpath)?,
                        v: slice_mat(&payload, s.v_offset, shape, &mpath)?,
                        t: s.t,
                    },
                );
            }
            Some(adam)
        }
    };
    for (name, r) in &meta.rng {
        r.restore().map_err(|e| Error::format(&mpath, format!("rng `{name}`: {e}")))?;
    }
    Ok(Checkpoint {
        kind: meta.kind,
        config: meta.config,
        store,
        shared: man.shared.clone(),
        optimizer,
        rng: meta.rng,
        state: meta.state,
    })
}

/// Copies values and trainable flags from `loaded` into `target`, which must
/// have the same parameter names and shapes in the same order.
pub fn restore_store(target: &mut ParamStore, loaded: &ParamStore, path: &Path) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::format(
            path,
            format!("{} parameters, model expects {}", loaded.len(), target.len()),
        ));
    }
    for ((id, want), (_, got)) in target.clone().iter().zip(loaded.iter()) {
        if want.name != got.name || want.value.dim() != got.value.dim() {
            return Err(Error::format(
                path,
                format!(
                    "parameter `{}` {:?} does not match model parameter `{}` {:?}",
                    got.name,
                    got.value.dim(),
                    want.name,
                    want.value.dim()
                ),
            ));
        }
        target.set(id, got.value.clone());
        target.set_trainable(id, got.trainable);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64 * 0.5), true);
        s.add("a.b", Array2::from_elem((1, 2), -1.25), false);
        s
    }

    #[test]
    fn round_trip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample_store();
        let mut adam = Adam::new(0.01);
        let id = store.id("a.w").unwrap();
        adam.set_slot(
            id,
            AdamSlot {
                m: Array2::from_elem((3, 2), 0.5),
                v: Array2::from_elem((3, 2), 0.25),
                t: 7,
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: u64 = rng.random();
        let mut ckpt = Checkpoint::new("test", serde_json::json!({"k": 1}), store.clone());
        ckpt.optimizer = Some(adam);
        ckpt.shared = vec!["a.w".into()];
        ckpt.rng = vec![("main".into(), RngState::capture(&rng))];
        save_checkpoint(&ckpt, dir.path()).unwrap();

        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.store, store);
        assert_eq!(back.shared, vec!["a.w".to_string()]);
        let slot = back.optimizer.as_ref().unwrap().slot(id).unwrap();
        assert_eq!(slot.t, 7);
        assert_eq!(slot.v[[2, 1]], 0.25);
        let mut resumed = back.rng("main").unwrap();
        assert_eq!(resumed.random::<u64>(), rng.random::<u64>());
        let text = fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        assert!(text.contains("trainable_mask"));
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&Checkpoint::new("t", Value::Null, sample_store()), dir.path()).unwrap();
        let mpath = dir.path().join(META_FILE);
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replacen("\"offset\": 6", "\"offset\": 5", 1)).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));

        fs::write(&mpath, text.replacen("3,", "4,", 1)).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));

        fs::write(&mpath, text.replacen("\"format_version\": 1", "\"format_version\": 2", 1)).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));

        fs::write(&mpath, &text).unwrap();
        let ppath = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&ppath).unwrap();
        bytes[0] ^= 1;
        fs::write(&ppath, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn restore_rejects_mismatched_layout() {
        let mut target = sample_store();
        let mut other = ParamStore::new();
        other.add("a.w", Array2::zeros((2, 2)), true);
        other.add("a.b", Array2::zeros((1, 2)), true);
        assert!(restore_store(&mut target, &other, Path::new("x")).is_err());
    }
}
