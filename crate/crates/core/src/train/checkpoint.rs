//! Tar-archived training state: a JSON manifest, one array file per
//! parameter or buffer, and one per optimizer slot.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::Read;
use std::path::Path;

use msunet_autograd::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Precision, TrainConfig};
use crate::data::{Array, ArrayData};
use crate::denoise::DenoiseConfig;
use crate::error::{Error, IoContext, Result};
use crate::losses::LossBreakdown;
use crate::optim::Sgd;
use crate::params::{Kind, ParamStore};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Base,
    DenoiseFt,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Base => "BASE",
            Phase::DenoiseFt => "DENOISE_FT",
        })
    }
}

/// Enough of a ChaCha generator to continue its output sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_mean_dsc: f64,
    /// Absent when no class had both masks non-empty.
    pub val_mean_hd: Option<f64>,
}

/// Position inside the epoch loop, including partial epoch sums so a
/// resumed run logs the same epoch means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    /// Next batch within the current epoch order.
    pub cursor: usize,
    pub order: Vec<usize>,
    pub step: usize,
    pub nan_streak: usize,
    pub sums: LossBreakdown,
    pub finite_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub phase: Phase,
    pub precision: Precision,
    pub config: TrainConfig,
    pub denoise: Option<DenoiseConfig>,
    pub progress: Progress,
    pub rng: RngState,
    pub best: Option<BestRecord>,
    pub train_ids: Vec<String>,
    pub freeze_mask: BTreeMap<String, bool>,
    pub buffers: Vec<String>,
    /// SHA-256 of every archive member except the manifest.
    pub digests: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: BTreeMap<String, Array>,
    pub optim: BTreeMap<String, Array>,
}

pub fn tensor_to_array<T: Scalar>(t: &Tensor<T>) -> Array {
    let dims = t.shape().to_vec();
    let data = if T::NAME == "f32" {
        ArrayData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect())
    } else {
        ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect())
    };
    Array { dims, data }
}

pub fn array_to_tensor<T: Scalar>(a: &Array) -> Result<Tensor<T>> {
    let values: Vec<T> = match &a.data {
        ArrayData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
        ArrayData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        other => return Err(Error::Checkpoint(format!("expected floating point array, found {}", other.type_name()))),
    };
    Ok(Tensor::new(a.dims.clone(), values))
}

fn member(kind: &str, name: &str) -> String {
    format!("{kind}/{name}.msua")
}

impl Checkpoint {
    /// Snapshot of a store and its optimizer; digests are filled on save.
    pub fn capture<T: Scalar>(manifest: CheckpointManifest, store: &ParamStore<T>, optim: Option<&Sgd<T>>) -> Self {
        let mut manifest = manifest;
        manifest.freeze_mask = store.freeze_mask();
        manifest.buffers = store.entries().iter().filter(|e| e.kind == Kind::Buffer).map(|e| e.name.clone()).collect();
        let params = store.entries().iter().map(|e| (e.name.clone(), tensor_to_array(&e.value))).collect();
        let optim = optim
            .map(|o| {
                store
                    .ids()
                    .filter_map(|id| o.buffers[id.index()].as_ref().map(|b| (store.entry(id).name.clone(), tensor_to_array(b))))
                    .collect()
            })
            .unwrap_or_default();
        Self { manifest, params, optim }
    }

    /// Copies stored values and trainable flags into `store`; every entry of
    /// `store` must be present.
    pub fn restore_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.entry(id).name.clone();
            let a = self.params.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let t = array_to_tensor(a)?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), store.value(id).shape())));
            }
            store.set(id, t);
            if let Some(&tr) = self.manifest.freeze_mask.get(&name) {
                store.set_trainable(id, tr);
            }
        }
        Ok(())
    }

    pub fn restore_optim<T: Scalar>(&self, store: &ParamStore<T>, optim: &mut Sgd<T>) -> Result<()> {
        for id in store.ids() {
            optim.buffers[id.index()] = match self.optim.get(&store.entry(id).name) {
                Some(a) => Some(array_to_tensor(a)?),
                None => None,
            };
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut members: Vec<(String, Vec<u8>)> = Vec::new();
        for (name, a) in &self.params {
            members.push((member("params", name), a.to_bytes()));
        }
        for (name, a) in &self.optim {
            members.push((member("optim", name), a.to_bytes()));
        }
        let mut manifest = self.manifest.clone();
        manifest.digests = members.iter().map(|(n, b)| (n.clone(), hex::encode(Sha256::digest(b)))).collect();
        let json = serde_json::to_vec_pretty(&manifest)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        let tmp = path.with_extension("partial");
        let file = File::create(&tmp).at(&tmp)?;
        let mut tar = tar::Builder::new(file);
        for (name, bytes) in std::iter::once((MANIFEST.to_string(), json)).chain(members) {
            let mut h = tar::Header::new_gnu();
            h.set_size(bytes.len() as u64);
            h.set_mode(0o644);
            h.set_mtime(0);
            h.set_cksum();
            tar.append_data(&mut h, &name, bytes.as_slice()).at(&tmp)?;
        }
        tar.into_inner().at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).at(path)?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut members = BTreeMap::new();
        let mut archive = tar::Archive::new(file);
        for entry in archive.entries().map_err(|e| bad(e.to_string()))? {
            let mut entry = entry.map_err(|e| bad(e.to_string()))?;
            let name = entry.path().map_err(|e| bad(e.to_string()))?.to_string_lossy().into_owned();
            let mut bytes = Vec::new();
            entry.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
            members.insert(name, bytes);
        }
        let raw = members.remove(MANIFEST).ok_or_else(|| bad("no manifest".into()))?;
        let value: serde_json::Value = serde_json::from_slice(&raw).map_err(|e| bad(format!("manifest: {e}")))?;
        let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| bad("manifest has no version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::Version { path: path.to_path_buf(), found: version as u32, expected: FORMAT_VERSION });
        }
        let manifest: CheckpointManifest = serde_json::from_value(value).map_err(|e| bad(format!("manifest: {e}")))?;
        if members.len() != manifest.digests.len() {
            return Err(bad(format!("{} members, manifest lists {}", members.len(), manifest.digests.len())));
        }
        let mut params = BTreeMap::new();
        let mut optim = BTreeMap::new();
        for (name, bytes) in &members {
            let want = manifest.digests.get(name).ok_or_else(|| bad(format!("unexpected member {name}")))?;
            if *want != hex::encode(Sha256::digest(bytes)) {
                return Err(bad(format!("digest mismatch for {name}")));
            }
            let (kind, rest) = name.split_once('/').ok_or_else(|| bad(format!("unexpected member {name}")))?;
            let key = rest.strip_suffix(".msua").ok_or_else(|| bad(format!("unexpected member {name}")))?.to_string();
            let array = Array::from_bytes(bytes, &path.join(name))?;
            match kind {
                "params" => params.insert(key, array),
                "optim" => optim.insert(key, array),
                _ => return Err(bad(format!("unexpected member {name}"))),
            };
        }
        Ok(Self { manifest, params, optim })
    }

    pub fn load_phase(path: &Path, expected: Phase) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.manifest.phase != expected {
            return Err(Error::PhaseMismatch { found: ck.manifest.phase.to_string(), expected: expected.to_string() });
        }
        Ok(ck)
    }
}
