//! Network persistence: fixed magic bytes, a format version, a JSON manifest
//! of stage shapes and hyperparameters with an array index, then raw
//! little-endian 32-bit float arrays in manifest order.
//!
//! Parameters are stored at 32-bit precision; one save/load round trip lands
//! every weight on the 32-bit grid and is idempotent from then on. Freshly
//! seeded nets are born on that grid, so load(save(net)) is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, PredNet, StageParameters};
use crate::tensor::FilterBank;
use crate::topdown::TransitionMatrix;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PREDCODE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StageManifest {
    state_channels: usize,
    cause_channels: usize,
    input_channels: usize,
    filter_size: usize,
    has_transition: bool,
    alpha: f64,
    alpha_prime: f64,
    lambda_prime: f64,
    eta_prime: f64,
    mu: f64,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: NetworkConfig,
    stages: Vec<StageManifest>,
    arrays: Vec<ArrayEntry>,
}

/// Serializes a net to the container format.
pub fn to_bytes(net: &PredNet) -> Result<Vec<u8>> {
    let mut stages = Vec::with_capacity(net.depth());
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let push_array = |arrays: &mut Vec<ArrayEntry>, payload: &mut Vec<u8>, name: String, values: &[f64]| {
        arrays.push(ArrayEntry { name, len: values.len() });
        for v in values {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    };
    for (i, stage) in net.stages.iter().enumerate() {
        stages.push(StageManifest {
            state_channels: stage.state_channels(),
            cause_channels: stage.cause_channels(),
            input_channels: stage.input_channels(),
            filter_size: stage.filter_size(),
            has_transition: stage.transition.is_some(),
            alpha: stage.alpha,
            alpha_prime: stage.alpha_prime,
            lambda_prime: stage.lambda_prime,
            eta_prime: stage.eta_prime,
            mu: stage.mu,
        });
        push_array(&mut arrays, &mut payload, format!("stage{i}.dictionary"), stage.dictionary.weights());
        if let Some(c) = &stage.transition {
            push_array(&mut arrays, &mut payload, format!("stage{i}.transition"), c.weights());
        }
        push_array(&mut arrays, &mut payload, format!("stage{i}.invariance"), stage.invariance.weights());
    }
    let manifest = Manifest { config: net.config.clone(), stages, arrays };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses the container format back into a net. The result is validated.
pub fn from_bytes(bytes: &[u8]) -> Result<PredNet> {
    if bytes.len() < 20 {
        return Err(Error::Format(format!(
            "checkpoint of {} bytes is shorter than its fixed header",
            bytes.len()
        )));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic bytes, not a network checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < json_len {
        return Err(Error::Format(format!(
            "truncated manifest: header promises {json_len} bytes, found {}",
            body.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..json_len])
        .map_err(|e| Error::Format(format!("manifest does not parse: {e}")))?;
    let payload = &body[json_len..];
    let expected: usize = manifest.arrays.iter().map(|a| a.len * 4).sum();
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: manifest promises {expected} bytes of arrays, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after the arrays",
            payload.len() - expected
        )));
    }
    let mut arrays = std::collections::HashMap::new();
    let mut offset = 0usize;
    for entry in &manifest.arrays {
        let raw = &payload[offset..offset + entry.len * 4];
        offset += entry.len * 4;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if arrays.insert(entry.name.clone(), values).is_some() {
            return Err(Error::Corrupt(format!("array {} listed twice", entry.name)));
        }
    }
    let mut stages = Vec::with_capacity(manifest.stages.len());
    for (i, sm) in manifest.stages.iter().enumerate() {
        let mut take = |name: String, want: usize| -> Result<Vec<f64>> {
            let values = arrays
                .remove(&name)
                .ok_or_else(|| Error::Corrupt(format!("stage {i}: checkpoint is missing array {name}")))?;
            if values.len() != want {
                return Err(Error::Corrupt(format!(
                    "stage {i}: array {name} holds {} values, dims imply {want}",
                    values.len()
                )));
            }
            Ok(values)
        };
        let f2 = sm.filter_size * sm.filter_size;
        let dictionary = FilterBank::new(
            sm.state_channels,
            sm.input_channels,
            sm.filter_size,
            take(format!("stage{i}.dictionary"), sm.state_channels * sm.input_channels * f2)?,
        )?;
        let transition = if sm.has_transition {
            Some(TransitionMatrix::new(
                sm.state_channels,
                take(format!("stage{i}.transition"), sm.state_channels * sm.state_channels)?,
            )?)
        } else {
            None
        };
        let invariance = FilterBank::new(
            sm.cause_channels,
            sm.state_channels,
            sm.filter_size,
            take(format!("stage{i}.invariance"), sm.cause_channels * sm.state_channels * f2)?,
        )?;
        stages.push(StageParameters {
            dictionary,
            transition,
            invariance,
            alpha: sm.alpha,
            alpha_prime: sm.alpha_prime,
            lambda_prime: sm.lambda_prime,
            eta_prime: sm.eta_prime,
            mu: sm.mu,
        });
    }
    if let Some(name) = arrays.keys().next() {
        return Err(Error::Corrupt(format!("array {name} belongs to no declared stage")));
    }
    PredNet::new(stages, manifest.config)
}

pub fn save_checkpoint(net: &PredNet, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PredNet> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::TrainerMode;
    use crate::network::{NetworkConfig, StageSpec};
    use crate::schedule::{RestartPolicy, ScheduleKind};

    fn sample_net(temporal: bool) -> PredNet {
        let specs = [
            StageSpec { state_channels: 3, cause_channels: 4, filter_size: 3 },
            StageSpec { state_channels: 4, cause_channels: 5, filter_size: 3 },
        ];
        let config = NetworkConfig {
            schedule: ScheduleKind::Nesterov,
            restart: RestartPolicy::None,
            state_iters: 12,
            cause_iters: 34,
            outer_passes: 3,
            param_iters: 2,
            trainer: TrainerMode::Adam,
            batch_size: 6,
            epochs: 5,
            seed: 99,
            temporal,
        };
        PredNet::seeded(&specs, 2, config, 77).unwrap()
    }

    #[test]
    fn fresh_net_round_trips_bit_for_bit() {
        for temporal in [false, true] {
            let net = sample_net(temporal);
            let bytes = to_bytes(&net).unwrap();
            assert_eq!(bytes, to_bytes(&net).unwrap(), "serialization must be deterministic");
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back.param_hash(), net.param_hash());
            assert_eq!(back.config, net.config);
            for (a, b) in back.stages.iter().zip(&net.stages) {
                assert_eq!(a.dictionary.weights(), b.dictionary.weights());
                assert_eq!(a.invariance.weights(), b.invariance.weights());
                match (&a.transition, &b.transition) {
                    (Some(x), Some(y)) => assert_eq!(x.weights(), y.weights()),
                    (None, None) => {}
                    _ => panic!("transition presence changed"),
                }
            }
        }
    }

    #[test]
    fn file_round_trip_matches_memory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = sample_net(false);
        save_checkpoint(&net, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.param_hash(), net.param_hash());
        back.validate().unwrap();
    }

    #[test]
    fn one_round_trip_is_idempotent_off_the_grid() {
        let mut net = sample_net(false);
        // Push weights off the 32-bit grid, keeping filters unit norm.
        for w in net.stages[0].dictionary.weights_mut() {
            *w += 0.1234567891234;
        }
        net.stages[0].dictionary.normalize_filters();
        let first = to_bytes(&net).unwrap();
        let reloaded = from_bytes(&first).unwrap();
        let second = to_bytes(&reloaded).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = to_bytes(&sample_net(false)).unwrap();
        bytes[0] ^= 0xFF;
        match from_bytes(&bytes) {
            Err(Error::Format(m)) => assert!(m.contains("magic"), "{m}"),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = to_bytes(&sample_net(false)).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        match from_bytes(&bytes) {
            Err(Error::Format(m)) => assert!(m.contains("version 2"), "{m}"),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = to_bytes(&sample_net(false)).unwrap();
        match from_bytes(&bytes[..bytes.len() - 5]) {
            Err(Error::Format(m)) => assert!(m.contains("truncated"), "{m}"),
            other => panic!("expected a format error, got {other:?}"),
        }
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0]);
        match from_bytes(&long) {
            Err(Error::Format(m)) => assert!(m.contains("trailing"), "{m}"),
            other => panic!("expected a format error, got {other:?}"),
        }
        assert!(matches!(from_bytes(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn missing_stage_array_names_the_stage() {
        let net = sample_net(false);
        let bytes = to_bytes(&net).unwrap();
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[20..20 + json_len]).unwrap();
        // Drop the final array entry (stage1.invariance) and its payload.
        let dropped = manifest.arrays.pop().unwrap();
        assert_eq!(dropped.name, "stage1.invariance");
        let payload = &bytes[20 + json_len..bytes.len() - dropped.len * 4];
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut crafted = Vec::new();
        crafted.extend_from_slice(&CHECKPOINT_MAGIC);
        crafted.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        crafted.extend_from_slice(&(json.len() as u64).to_le_bytes());
        crafted.extend_from_slice(&json);
        crafted.extend_from_slice(payload);
        match from_bytes(&crafted) {
            Err(Error::Corrupt(m)) => {
                assert!(m.contains("stage 1") && m.contains("stage1.invariance"), "{m}")
            }
            other => panic!("expected a corruption error, got {other:?}"),
        }
    }

    #[test]
    fn loaded_net_still_validates() {
        let net = sample_net(true);
        let back = from_bytes(&to_bytes(&net).unwrap()).unwrap();
        back.validate().unwrap();
    }
}
