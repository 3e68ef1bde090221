//! Checkpoints: a JSON manifest next to a little-endian float payload.
//!
//! The payload holds every parameter in manifest order, followed (when
//! optimizer state is stored) by the first and second Adam moments of each
//! group, group by group.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use hagroute_core::nn::{ModelConfig, Network};
use hagroute_core::optim::ParamGroup;
use hagroute_core::tensor::Array;
use hagroute_core::Group;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Precision;
use crate::error::{CliResult, Failure};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub group: Group,
    /// Manifest indices of the group's parameters.
    pub params: Vec<usize>,
    pub step: u64,
    /// `(t_cur, t_i)` of the warm-restart schedule, if any.
    pub schedule: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config_hash: String,
    pub model_config: ModelConfig,
    pub precision: Precision,
    pub params: Vec<ParamEntry>,
    pub optimizer_state: bool,
    #[serde(default)]
    pub optimizer: Vec<OptimizerEntry>,
    pub epoch: usize,
    pub val_loss: f64,
    /// Test fold of the split the model was trained for.
    pub test_fold: usize,
    pub payload_file: String,
    pub payload_bytes: u64,
}

/// Training metadata stored with the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_loss: f64,
    pub test_fold: usize,
    pub precision: Precision,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the model architecture. The init seed is excluded so a
/// checkpoint can be evaluated under any `--seed`.
pub fn model_config_hash(cfg: &ModelConfig) -> String {
    let canonical = ModelConfig { seed: 0, ..cfg.clone() };
    let json = serde_json::to_vec(&canonical).expect("model config serialises");
    hex(&Sha256::digest(json))
}

/// `<stem>.json` and `<stem>.bin`.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn encode(out: &mut Vec<u8>, a: &Array, precision: Precision) {
    for &v in a.data() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

pub fn save(
    stem: &Path,
    net: &Network,
    groups: Option<&[ParamGroup]>,
    meta: CheckpointMeta,
) -> CliResult<Manifest> {
    let (manifest_path, payload_path) = paths(stem);
    let mut payload = Vec::new();
    let mut params = Vec::new();
    for (_, p) in net.store.iter() {
        encode(&mut payload, &p.value, meta.precision);
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            group: p.group,
        });
    }
    let mut optimizer = Vec::new();
    for g in groups.unwrap_or(&[]) {
        for a in g.state.m.iter().chain(&g.state.v) {
            encode(&mut payload, a, meta.precision);
        }
        optimizer.push(OptimizerEntry {
            group: g.group,
            params: g.ids.iter().map(|id| id.0).collect(),
            step: g.state.step,
            schedule: g.schedule.map(|s| (s.t_cur, s.t_i)),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config_hash: model_config_hash(&net.config),
        model_config: net.config.clone(),
        precision: meta.precision,
        params,
        optimizer_state: groups.is_some(),
        optimizer,
        epoch: meta.epoch,
        val_loss: meta.val_loss,
        test_fold: meta.test_fold,
        payload_file: payload_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| anyhow!("bad checkpoint path {}", stem.display()))?
            .to_string(),
        payload_bytes: payload.len() as u64,
    };
    write_atomic(&payload_path, &payload)?;
    write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A fully decoded checkpoint. Nothing is applied to a model until
/// [`Checkpoint::network`] succeeds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<Array>,
    /// `(m, v)` per optimizer entry.
    pub moments: Vec<(Vec<Array>, Vec<Array>)>,
}

fn decode(bytes: &[u8], shape: &[usize], precision: Precision) -> Array {
    let data = match precision {
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect(),
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Array::new(shape.to_vec(), data).expect("length checked against manifest")
}

impl Checkpoint {
    /// Accepts the manifest path or the stem shared with the payload.
    pub fn load(path: &Path) -> CliResult<Self> {
        let manifest_path = if path.extension().is_some_and(|e| e == "json") {
            path.to_path_buf()
        } else {
            paths(path).0
        };
        let text = fs::read_to_string(&manifest_path)
            .with_context(|| format!("reading checkpoint manifest {}", manifest_path.display()))
            .map_err(Failure::Validation)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", manifest_path.display()))
            .map_err(Failure::Validation)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Failure::validation(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let payload_path = manifest_path.with_file_name(&manifest.payload_file);
        let bytes = fs::read(&payload_path)
            .with_context(|| format!("reading checkpoint payload {}", payload_path.display()))?;

        let elem = manifest.precision.bytes();
        let param_numel: Vec<usize> = manifest.params.iter().map(|p| p.shape.iter().product()).collect();
        let moment_numel: usize = manifest
            .optimizer
            .iter()
            .flat_map(|o| &o.params)
            .map(|&i| param_numel.get(i).copied().unwrap_or(0) * 2)
            .sum();
        let expected = (param_numel.iter().sum::<usize>() + moment_numel) * elem;
        if bytes.len() != expected || manifest.payload_bytes != expected as u64 {
            return Err(Failure::Runtime(anyhow!(
                "payload length mismatch in {}: manifest declares {} bytes, shapes need {expected}, file has {}",
                payload_path.display(),
                manifest.payload_bytes,
                bytes.len()
            )));
        }

        let mut offset = 0;
        let mut take = |shape: &[usize]| {
            let n = shape.iter().product::<usize>() * elem;
            let a = decode(&bytes[offset..offset + n], shape, manifest.precision);
            offset += n;
            a
        };
        let values: Vec<Array> = manifest.params.iter().map(|p| take(&p.shape)).collect();
        let mut moments = Vec::new();
        for o in &manifest.optimizer {
            for &i in &o.params {
                if i >= manifest.params.len() {
                    return Err(Failure::Runtime(anyhow!("optimizer entry names parameter {i}")));
                }
            }
            let m: Vec<Array> = o.params.iter().map(|&i| take(&manifest.params[i].shape)).collect();
            let v: Vec<Array> = o.params.iter().map(|&i| take(&manifest.params[i].shape)).collect();
            moments.push((m, v));
        }
        Ok(Self {
            manifest,
            values,
            moments,
        })
    }

    /// Refuses unless `expected` hashes to the stored architecture.
    pub fn check_model_config(&self, expected: &ModelConfig) -> CliResult<()> {
        let want = model_config_hash(expected);
        if want != self.manifest.model_config_hash {
            return Err(Failure::validation(format!(
                "model config hash mismatch: checkpoint has {}, config has {want}",
                self.manifest.model_config_hash
            )));
        }
        Ok(())
    }

    /// Builds the stored architecture and loads the weights into it.
    pub fn network(&self) -> CliResult<Network> {
        let mut net = Network::build(&self.manifest.model_config)?;
        if model_config_hash(&net.config) != self.manifest.model_config_hash {
            return Err(Failure::Runtime(anyhow!("manifest model config does not match its hash")));
        }
        if net.store.len() != self.manifest.params.len() {
            return Err(Failure::Runtime(anyhow!(
                "checkpoint lists {} parameters, model has {}",
                self.manifest.params.len(),
                net.store.len()
            )));
        }
        for ((_, p), e) in net.store.iter().zip(&self.manifest.params) {
            if p.name != e.name || p.value.shape() != e.shape.as_slice() || p.group != e.group {
                return Err(Failure::Runtime(anyhow!(
                    "parameter `{}` {:?} does not match checkpoint entry `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    e.name,
                    e.shape
                )));
            }
        }
        let ids: Vec<_> = net.store.ids().collect();
        for (id, v) in ids.into_iter().zip(&self.values) {
            *net.store.value_mut(id) = v.clone();
        }
        Ok(net)
    }

    /// Restores Adam moments and schedule positions into matching groups.
    pub fn restore_optimizer(&self, groups: &mut [ParamGroup]) -> CliResult<()> {
        if !self.manifest.optimizer_state {
            return Err(Failure::validation("checkpoint has no optimizer state"));
        }
        for (entry, (m, v)) in self.manifest.optimizer.iter().zip(&self.moments) {
            let g = groups
                .iter_mut()
                .find(|g| g.group == entry.group)
                .ok_or_else(|| Failure::validation(format!("no `{}` group to restore", entry.group.as_str())))?;
            let ids: Vec<usize> = g.ids.iter().map(|id| id.0).collect();
            if ids != entry.params {
                return Err(Failure::validation(format!(
                    "group `{}` parameters differ from the checkpoint",
                    entry.group.as_str()
                )));
            }
            g.state.m = m.clone();
            g.state.v = v.clone();
            g.state.step = entry.step;
            if let (Some(s), Some((t_cur, t_i))) = (g.schedule.as_mut(), entry.schedule) {
                s.t_cur = t_cur;
                s.t_i = t_i;
            }
        }
        Ok(())
    }
}

