//! Versioned checkpoints: a JSON manifest plus one little-endian blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Minibatches, MinibatchState};
use crate::error::{Error, Result};
use crate::evaluator::{Evaluator, Provenance};
use crate::io::write_atomic;
use crate::losses::GammaController;
use crate::networks::{NetworkInstance, NetworkSpec, PresetSpecs};
use crate::nn::SpectralState;
use crate::optim::AdamState;
use crate::rng::{Rng, RngState};
use crate::tensor::{DType, Scalar, Tensor};
use crate::training::{MetricsRow, Streams, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "blob.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryMeta {
    pub name: String,
    pub role: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_offset: u64,
    pub byte_len: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// `train-state` or `evaluator`.
    pub kind: String,
    pub iteration: u64,
    pub gamma: f64,
    pub rng_states: BTreeMap<String, RngState>,
    /// Kind-specific structured state.
    pub meta: serde_json::Value,
    pub entries: Vec<EntryMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl EntryData {
    fn bytes(&self) -> Vec<u8> {
        match self {
            EntryData::F32(t) => t.to_le_bytes(),
            EntryData::F64(t) => t.to_le_bytes(),
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            EntryData::F32(t) => t.shape(),
            EntryData::F64(t) => t.shape(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub role: String,
    pub data: EntryData,
}

/// An in-memory checkpoint. Entry order is the blob order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub iteration: u64,
    pub gamma: f64,
    pub rng_states: BTreeMap<String, RngState>,
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    /// Manifest and blob bytes.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut blob = vec![];
        let mut metas = vec![];
        for e in &self.entries {
            let bytes = e.data.bytes();
            metas.push(EntryMeta {
                name: e.name.clone(),
                role: e.role.clone(),
                shape: e.data.shape().to_vec(),
                dtype: e.data.dtype(),
                byte_offset: blob.len() as u64,
                byte_len: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            blob.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            iteration: self.iteration,
            gamma: self.gamma,
            rng_states: self.rng_states.clone(),
            meta: self.meta.clone(),
            entries: metas,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        Ok((json, blob))
    }

    pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_slice(manifest)?;
        match probe.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "format version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("manifest has no format_version".into())),
        }
        let m: Manifest = serde_json::from_value(probe)?;
        let mut entries = Vec::with_capacity(m.entries.len());
        let mut expected = 0u64;
        for e in &m.entries {
            let numel: usize = e.shape.iter().product();
            if e.byte_offset != expected || e.byte_len != (numel * e.dtype.size_of()) as u64 {
                return Err(Error::Checkpoint(format!(
                    "entry `{}`: offset/length disagree with the manifest layout",
                    e.name
                )));
            }
            let end = e.byte_offset + e.byte_len;
            if end > blob.len() as u64 {
                return Err(Error::Checkpoint(format!(
                    "blob truncated: entry `{}` needs bytes up to {end}, blob has {}",
                    e.name,
                    blob.len()
                )));
            }
            let bytes = &blob[e.byte_offset as usize..end as usize];
            if hex::encode(Sha256::digest(bytes)) != e.sha256 {
                return Err(Error::ChecksumMismatch(e.name.clone()));
            }
            let data = match e.dtype {
                DType::F32 => EntryData::F32(Tensor::from_le_bytes(&e.shape, bytes)?),
                DType::F64 => EntryData::F64(Tensor::from_le_bytes(&e.shape, bytes)?),
            };
            entries.push(Entry { name: e.name.clone(), role: e.role.clone(), data });
            expected = end;
        }
        if expected != blob.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "blob has {} bytes but the manifest describes {expected}",
                blob.len()
            )));
        }
        Ok(Self {
            kind: m.kind,
            iteration: m.iteration,
            gamma: m.gamma,
            rng_states: m.rng_states,
            meta: m.meta,
            entries,
        })
    }

    /// Writes `dir/manifest.json` and `dir/blob.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, blob) = self.encode()?;
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(BLOB_FILE), &blob)?;
        write_atomic(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read(dir.join(MANIFEST_FILE))?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        Self::decode(&manifest, &blob)
    }

    fn take(&mut self, name: &str) -> Result<EntryData> {
        let i = self
            .entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
        Ok(self.entries.remove(i).data)
    }

    fn take_f32(&mut self, name: &str) -> Result<Tensor<f32>> {
        match self.take(name)? {
            EntryData::F32(t) => Ok(t),
            EntryData::F64(_) => Err(Error::Checkpoint(format!("entry `{name}` should be f32"))),
        }
    }

    fn take_f64(&mut self, name: &str) -> Result<Tensor<f64>> {
        match self.take(name)? {
            EntryData::F64(t) => Ok(t),
            EntryData::F32(_) => Err(Error::Checkpoint(format!("entry `{name}` should be f64"))),
        }
    }
}

fn push_network(entries: &mut Vec<Entry>, net: &NetworkInstance<f32>, role: &str) {
    for (name, p) in net.names.iter().zip(&net.params) {
        entries.push(Entry { name: format!("{role}/{name}"), role: role.into(), data: EntryData::F32(p.clone()) });
    }
    for (name, s) in net.names.iter().zip(&net.spectral) {
        if let Some(s) = s {
            let u = Tensor::<f64>::from_f64(&[s.u.len()], &s.u).expect("vector shape");
            entries.push(Entry { name: format!("{role}/{name}.sn_u"), role: role.into(), data: EntryData::F64(u) });
        }
    }
    for (i, r) in net.running.iter().enumerate() {
        let c = r.mean.len();
        let mean = Tensor::new(&[c], r.mean.clone()).expect("vector shape");
        let var = Tensor::new(&[c], r.var.clone()).expect("vector shape");
        entries.push(Entry { name: format!("{role}/running{i}.mean"), role: role.into(), data: EntryData::F32(mean) });
        entries.push(Entry { name: format!("{role}/running{i}.var"), role: role.into(), data: EntryData::F32(var) });
    }
}

fn restore_network(ck: &mut Checkpoint, spec: NetworkSpec, role: &str) -> Result<NetworkInstance<f32>> {
    let mut net = NetworkInstance::build(spec, &mut Rng::new(0, "restore"))?;
    for i in 0..net.params.len() {
        let name = format!("{role}/{}", net.names[i]);
        let t = ck.take_f32(&name)?;
        if t.shape() != net.params[i].shape() {
            return Err(Error::Checkpoint(format!(
                "entry `{name}` has shape {:?}, the spec needs {:?}",
                t.shape(),
                net.params[i].shape()
            )));
        }
        net.params[i] = t;
        if let Some(s) = net.spectral[i].as_mut() {
            let u = ck.take_f64(&format!("{name}.sn_u"))?;
            if u.len() != s.u.len() {
                return Err(Error::Checkpoint(format!("entry `{name}.sn_u` has the wrong length")));
            }
            *s = SpectralState { u: u.data().to_vec(), iterations: s.iterations };
        }
    }
    for i in 0..net.running.len() {
        let mean = ck.take_f32(&format!("{role}/running{i}.mean"))?;
        let var = ck.take_f32(&format!("{role}/running{i}.var"))?;
        let r = &mut net.running[i];
        if mean.len() != r.mean.len() || var.len() != r.var.len() {
            return Err(Error::Checkpoint(format!("running statistics {i} of `{role}` have the wrong length")));
        }
        r.mean = mean.data().to_vec();
        r.var = var.data().to_vec();
    }
    Ok(net)
}

fn push_adam(entries: &mut Vec<Entry>, adam: &AdamState<f32>, role: &str, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        entries.push(Entry { name: format!("adam/{role}/{name}.m"), role: role.into(), data: EntryData::F32(adam.m[i].clone()) });
        entries.push(Entry { name: format!("adam/{role}/{name}.v"), role: role.into(), data: EntryData::F32(adam.v[i].clone()) });
    }
}

fn restore_adam(ck: &mut Checkpoint, adam: &mut AdamState<f32>, t: u64, role: &str, names: &[String]) -> Result<()> {
    for (i, name) in names.iter().enumerate() {
        let m = ck.take_f32(&format!("adam/{role}/{name}.m"))?;
        let v = ck.take_f32(&format!("adam/{role}/{name}.v"))?;
        if m.shape() != adam.m[i].shape() || v.shape() != adam.v[i].shape() {
            return Err(Error::Checkpoint(format!("adam moments for `{role}/{name}` have the wrong shape")));
        }
        adam.m[i] = m;
        adam.v[i] = v;
    }
    adam.t = t;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    mode: String,
    config: TrainConfig,
    networks: PresetSpecs,
    gamma_controller: GammaController,
    adam_steps: BTreeMap<String, u64>,
    minibatches: BTreeMap<String, MinibatchState>,
    ris_real_branch: u64,
    history: Vec<MetricsRow>,
}

/// Snapshot of a training state.
pub fn train_checkpoint(state: &TrainState, config: &TrainConfig) -> Result<Checkpoint> {
    let mut entries = vec![];
    push_network(&mut entries, &state.generator, "generator");
    push_network(&mut entries, &state.discriminator, "discriminator");
    push_network(&mut entries, &state.classifier, "classifier");
    push_adam(&mut entries, &state.adam_g, "generator", &state.generator.names);
    push_adam(&mut entries, &state.adam_d, "discriminator", &state.discriminator.names);
    push_adam(&mut entries, &state.adam_c, "classifier", &state.classifier.names);
    let meta = TrainMeta {
        mode: config.mode_name().into(),
        config: config.clone(),
        networks: PresetSpecs {
            generator: state.generator.spec.clone(),
            discriminator: state.discriminator.spec.clone(),
            classifier: state.classifier.spec.clone(),
        },
        gamma_controller: state.gamma,
        adam_steps: [
            ("classifier".to_string(), state.adam_c.t),
            ("discriminator".to_string(), state.adam_d.t),
            ("generator".to_string(), state.adam_g.t),
        ]
        .into(),
        minibatches: [
            ("classifier".to_string(), state.real_c.state()),
            ("discriminator".to_string(), state.real_d.state()),
        ]
        .into(),
        ris_real_branch: state.ris_real_branch,
        history: state.history.clone(),
    };
    let rng_states = state.streams.all().iter().map(|r| (r.name().to_string(), r.state())).collect();
    Ok(Checkpoint {
        kind: "train-state".into(),
        iteration: state.iteration,
        gamma: state.gamma.gamma,
        rng_states,
        meta: serde_json::to_value(meta)?,
        entries,
    })
}

fn rng_named(ck: &Checkpoint, name: &str) -> Result<Rng> {
    let s = ck
        .rng_states
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing rng state `{name}`")))?;
    Rng::from_state(s)
}

/// Rebuilds a training state; returns it with the configuration it was saved under.
pub fn restore_train_state(mut ck: Checkpoint, data: &Dataset) -> Result<(TrainState, TrainConfig)> {
    if ck.kind != "train-state" {
        return Err(Error::Checkpoint(format!("expected a train-state checkpoint, found `{}`", ck.kind)));
    }
    let meta: TrainMeta = serde_json::from_value(ck.meta.clone())?;
    let generator = restore_network(&mut ck, meta.networks.generator.clone(), "generator")?;
    let discriminator = restore_network(&mut ck, meta.networks.discriminator.clone(), "discriminator")?;
    let classifier = restore_network(&mut ck, meta.networks.classifier.clone(), "classifier")?;
    let step = |k: &str| meta.adam_steps.get(k).copied().ok_or_else(|| Error::Checkpoint(format!("missing adam step for `{k}`")));
    let cfg = &meta.config;
    let mut adam_g = AdamState::for_params(&generator.params, cfg.adam);
    let mut adam_d = AdamState::for_params(&discriminator.params, cfg.adam);
    let mut adam_c = AdamState::for_params(&classifier.params, cfg.adam);
    restore_adam(&mut ck, &mut adam_g, step("generator")?, "generator", &generator.names)?;
    restore_adam(&mut ck, &mut adam_d, step("discriminator")?, "discriminator", &discriminator.names)?;
    restore_adam(&mut ck, &mut adam_c, step("classifier")?, "classifier", &classifier.names)?;
    if let Some(e) = ck.entries.first() {
        return Err(Error::Checkpoint(format!("unexpected entry `{}`", e.name)));
    }
    let fresh = Streams::new(0);
    let streams = Streams {
        noise: rng_named(&ck, fresh.noise.name())?,
        labels: rng_named(&ck, fresh.labels.name())?,
        gp: rng_named(&ck, fresh.gp.name())?,
        augment: rng_named(&ck, fresh.augment.name())?,
    };
    let mb = |k: &str| {
        let s = meta
            .minibatches
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing minibatch state for `{k}`")))?;
        Minibatches::from_state(data.train.len(), cfg.batch_size, s)
    };
    let state = TrainState {
        iteration: ck.iteration,
        generator,
        discriminator,
        classifier,
        adam_g,
        adam_d,
        adam_c,
        gamma: meta.gamma_controller,
        streams,
        real_d: mb("discriminator")?,
        real_c: mb("classifier")?,
        ris_real_branch: meta.ris_real_branch,
        history: meta.history.clone(),
    };
    Ok((state, meta.config))
}

/// The generator of a train-state checkpoint.
pub fn restore_generator(mut ck: Checkpoint) -> Result<NetworkInstance<f32>> {
    if ck.kind != "train-state" {
        return Err(Error::Checkpoint(format!("expected a train-state checkpoint, found `{}`", ck.kind)));
    }
    let meta: TrainMeta = serde_json::from_value(ck.meta.clone())?;
    restore_network(&mut ck, meta.networks.generator, "generator")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluatorMeta {
    network: NetworkSpec,
    provenance: Provenance,
}

pub fn evaluator_checkpoint(e: &Evaluator<f32>) -> Result<Checkpoint> {
    let mut entries = vec![];
    push_network(&mut entries, e.network(), "evaluator");
    let meta = EvaluatorMeta { network: e.network().spec.clone(), provenance: e.provenance.clone() };
    Ok(Checkpoint {
        kind: "evaluator".into(),
        iteration: e.provenance.iterations as u64,
        gamma: 0.0,
        rng_states: BTreeMap::new(),
        meta: serde_json::to_value(meta)?,
        entries,
    })
}

pub fn restore_evaluator(mut ck: Checkpoint) -> Result<Evaluator<f32>> {
    if ck.kind != "evaluator" {
        return Err(Error::Checkpoint(format!("expected an evaluator checkpoint, found `{}`", ck.kind)));
    }
    let meta: EvaluatorMeta = serde_json::from_value(ck.meta.clone())?;
    let net = restore_network(&mut ck, meta.network, "evaluator")?;
    Evaluator::new(net, meta.provenance)
}

/// Digest of every parameter of `net`, as used in reports.
pub fn network_checksum<T: Scalar>(net: &NetworkInstance<T>) -> String {
    crate::tensor::checksum(&net.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "test".into(),
            iteration: 7,
            gamma: 0.03125,
            rng_states: [("noise".to_string(), Rng::new(3, "noise").state())].into(),
            meta: serde_json::json!({"x": 1.5}),
            entries: vec![
                Entry { name: "a".into(), role: "generator".into(), data: EntryData::F32(Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1)) },
                Entry { name: "b".into(), role: "evaluator".into(), data: EntryData::F64(Tensor::from_fn(&[4], |i| (i as f64).sqrt())) },
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let (m, b) = ck.encode().unwrap();
        let back = Checkpoint::decode(&m, &b).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), (m, b));
    }

    #[test]
    fn manifest_floats_round_trip_exactly() {
        let mut r = Rng::new(11, "floats");
        for _ in 0..2000 {
            let mut ck = sample();
            ck.gamma = r.uniform() * 0.1;
            let v = r.uniform() * 10.0 - 5.0;
            ck.meta = serde_json::json!({ "v": v });
            let (m, b) = ck.encode().unwrap();
            let back = Checkpoint::decode(&m, &b).unwrap();
            assert_eq!(back.gamma.to_bits(), ck.gamma.to_bits());
            assert_eq!(back.meta["v"].as_f64().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn corruption_is_reported() {
        let (m, mut b) = sample().encode().unwrap();
        b[30] ^= 1;
        match Checkpoint::decode(&m, &b) {
            Err(Error::ChecksumMismatch(entry)) => assert_eq!(entry, "b"),
            other => panic!("{other:?}"),
        }
        let (m, b) = sample().encode().unwrap();
        assert!(matches!(Checkpoint::decode(&m, &b[..b.len() - 1]), Err(Error::Checkpoint(_))));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&m, &extra), Err(Error::Checkpoint(_))));
        let bumped = String::from_utf8(m).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(Checkpoint::decode(bumped.as_bytes(), &b), Err(Error::Checkpoint(_))));
    }
}
