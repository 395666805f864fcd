//! The `CULB` container: magic, format version, JSON manifest, then a payload
//! of little-endian `f64` values.
//!
//! ```text
//! "CULB" | version: u32 LE | manifest length: u64 LE | manifest JSON | payload
//! ```
//!
//! Tensors are stored back to back in manifest order. Everything else (world
//! hash, lineage, schedule, classifier ids) travels in the manifest's `meta`
//! object.

use std::path::Path;

use culb_core::model::{Block, DenoiserParams, GateReport, ModelCheckpoint, ModelDims, NoiseSchedule};
use culb_core::unlearning::UnlearnRequest;
use culb_core::world::{Classifier, Classifiers, Concept, Domain, Splits, World, WorldConfig};
use culb_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"CULB";
pub const FORMAT_VERSION: u32 = 1;
pub const RNG_ALGORITHM: &str = culb_core::rng::RNG_ALGORITHM_ID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub rng: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

/// A decoded container: manifest plus named tensors in payload order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Container(msg.into())
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            rng: RNG_ALGORITHM.into(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a CULB container"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let mend = usize::try_from(mlen)
            .ok()
            .and_then(|m| m.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("manifest length exceeds file size"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..mend]).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.rng != RNG_ALGORITHM {
            return Err(bad(format!("rng algorithm {} is not supported", manifest.rng)));
        }
        let payload = &bytes[mend..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let total = payload.len() / 8;
        let mut expected = 0usize;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("{}: shape overflows", e.name)))?;
            if n != e.len || e.offset != expected || e.offset + e.len > total {
                return Err(bad(format!("{}: offset/length inconsistent with shape {:?}", e.name, e.shape)));
            }
            let data: Vec<f64> = payload[8 * e.offset..8 * (e.offset + e.len)]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
            expected += e.len;
        }
        if expected != total {
            return Err(bad(format!("{} trailing payload values", total - expected)));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(bad(format!("expected a {kind} container, found {}", self.kind)));
        }
        Ok(self)
    }

    fn meta_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| bad(format!("meta: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    dims: ModelDims,
    schedule: NoiseSchedule,
    world_hash: String,
    lineage: Vec<UnlearnRequest>,
    sampler: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gate: Option<GateReport>,
}

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const WORLD_KIND: &str = "world";

/// Encode a checkpoint, optionally with the gate report of the base model.
pub fn checkpoint_container(ck: &ModelCheckpoint, gate: Option<&GateReport>) -> Result<Container> {
    let meta = CheckpointMeta {
        dims: ck.params.dims,
        schedule: ck.schedule.clone(),
        world_hash: ck.world_hash.clone(),
        lineage: ck.lineage.clone(),
        sampler: ck.sampler.clone(),
        gate: gate.cloned(),
    };
    let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta).map_err(|e| bad(e.to_string()))?);
    for b in Block::ALL {
        c.push(b.name(), ck.params.block(b).clone());
    }
    Ok(c)
}

pub fn decode_checkpoint(c: Container) -> Result<(ModelCheckpoint, Option<GateReport>)> {
    let c = c.expect_kind(CHECKPOINT_KIND)?;
    let meta: CheckpointMeta = c.meta_as()?;
    let blocks = Block::ALL
        .iter()
        .map(|b| c.get(b.name()).cloned())
        .collect::<Result<Vec<_>>>()?;
    let params = DenoiserParams::from_tensors(meta.dims, blocks)?;
    let ck = ModelCheckpoint {
        params,
        schedule: meta.schedule,
        world_hash: meta.world_hash,
        lineage: meta.lineage,
        sampler: meta.sampler,
    };
    Ok((ck, meta.gate))
}

pub fn write_checkpoint(path: &Path, ck: &ModelCheckpoint, gate: Option<&GateReport>) -> Result<()> {
    checkpoint_container(ck, gate)?.write(path)
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelCheckpoint, Option<GateReport>)> {
    decode_checkpoint(Container::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct ConceptMeta {
    id: usize,
    domain: Domain,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    domain: Domain,
    class_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct WorldMeta {
    world_hash: String,
    config: WorldConfig,
    splits: Splits,
    seed: u64,
    noise_sigma: f64,
    styles: Vec<ConceptMeta>,
    objects: Vec<ConceptMeta>,
    classifiers: [ClassifierMeta; 2],
}

/// Encode a world together with its recognition classifiers.
pub fn world_container(world: &World, classifiers: &Classifiers) -> Result<Container> {
    let cm = |c: &Concept| ConceptMeta {
        id: c.id,
        domain: c.domain,
        name: c.name.clone(),
    };
    let meta = WorldMeta {
        world_hash: world.digest(),
        config: world.config.clone(),
        splits: world.splits.clone(),
        seed: world.seed,
        noise_sigma: world.noise_sigma,
        styles: world.styles.iter().map(cm).collect(),
        objects: world.objects.iter().map(cm).collect(),
        classifiers: [&classifiers.style, &classifiers.object].map(|k| ClassifierMeta {
            domain: k.domain,
            class_ids: k.class_ids.clone(),
        }),
    };
    let mut c = Container::new(WORLD_KIND, serde_json::to_value(meta).map_err(|e| bad(e.to_string()))?);
    for s in &world.styles {
        c.push(format!("embedding/{}", s.id), s.embedding.clone());
    }
    for o in &world.objects {
        c.push(format!("embedding/{}", o.id), o.embedding.clone());
    }
    for (i, t) in world.style_transforms.iter().enumerate() {
        c.push(format!("style_transform/{i}"), t.clone());
    }
    for (i, b) in world.object_bases.iter().enumerate() {
        c.push(format!("object_base/{i}"), b.clone());
    }
    for k in [&classifiers.style, &classifiers.object] {
        c.push(format!("classifier/{}/weights", k.domain.as_str()), k.weights.clone());
        c.push(format!("classifier/{}/bias", k.domain.as_str()), k.bias.clone());
    }
    Ok(c)
}

pub fn decode_world(c: Container) -> Result<(World, Classifiers)> {
    let c = c.expect_kind(WORLD_KIND)?;
    let meta: WorldMeta = c.meta_as()?;
    let concept = |m: &ConceptMeta| -> Result<Concept> {
        Ok(Concept {
            id: m.id,
            domain: m.domain,
            name: m.name.clone(),
            embedding: c.get(&format!("embedding/{}", m.id))?.clone(),
        })
    };
    let styles = meta.styles.iter().map(concept).collect::<Result<Vec<_>>>()?;
    let objects = meta.objects.iter().map(concept).collect::<Result<Vec<_>>>()?;
    let style_transforms = (0..styles.len())
        .map(|i| c.get(&format!("style_transform/{i}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    let object_bases = (0..objects.len())
        .map(|i| c.get(&format!("object_base/{i}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    let world = World {
        config: meta.config,
        styles,
        objects,
        style_transforms,
        object_bases,
        noise_sigma: meta.noise_sigma,
        splits: meta.splits,
        seed: meta.seed,
    };
    world.validate()?;
    if world.digest() != meta.world_hash {
        return Err(bad("world contents do not match the recorded world hash"));
    }
    let classifier = |m: &ClassifierMeta| -> Result<Classifier> {
        let d = m.domain.as_str();
        Ok(Classifier {
            domain: m.domain,
            class_ids: m.class_ids.clone(),
            weights: c.get(&format!("classifier/{d}/weights"))?.clone(),
            bias: c.get(&format!("classifier/{d}/bias"))?.clone(),
        })
    };
    let [s, o] = &meta.classifiers;
    let classifiers = Classifiers {
        style: classifier(s)?,
        object: classifier(o)?,
    };
    Ok((world, classifiers))
}

pub fn write_world(path: &Path, world: &World, classifiers: &Classifiers) -> Result<()> {
    world_container(world, classifiers)?.write(path)
}

pub fn read_world(path: &Path) -> Result<(World, Classifiers)> {
    decode_world(Container::read(path)?)
}
