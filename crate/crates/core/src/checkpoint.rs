//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "DRNETCKP"
//! version   u32
//! header    u64 length, then UTF-8 JSON (configs and scalar train state)
//! tensors   u32 count, then per tensor:
//!           u32 name length, name, u32 rank, u64 per dim, f64 values
//! ```
//!
//! Tensors hold the model weights, and for resumable checkpoints the Adam
//! moments (`adam.m.*`, `adam.v.*`) and the misreport cache (`cache`).
//! Encoding is canonical: saving a loaded checkpoint reproduces the file
//! byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamState, ParameterSet, Tensor};
use crate::drnet::{DrNet, ModelParams, NetworkConfig};
use crate::error::{Error, Result};
use crate::mechanism::LearnedMechanism;
use crate::training::{EpochRecord, LagrangeState, MisreportCache, ModelAdam, TrainConfig, TrainLog, TrainState, Trainer};

pub const MAGIC: &[u8; 8] = b"DRNETCKP";
pub const VERSION: u32 = 1;

const CACHE: &str = "cache";
const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub train: Option<TrainConfig>,
    pub params: ModelParams,
    /// Present when training can resume from this file.
    pub state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    network: NetworkConfig,
    train: Option<TrainConfig>,
    state: Option<StateHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    epochs_done: usize,
    iteration: usize,
    lagrange: LagrangeState,
    /// Adam step counters for the matching, payment and revenue networks.
    adam_steps: [u64; 3],
    log: Vec<EpochRecord>,
}

impl Checkpoint {
    /// Weights only.
    pub fn model(network: NetworkConfig, params: ModelParams) -> Self {
        Checkpoint {
            network,
            train: None,
            params,
            state: None,
        }
    }

    /// Everything needed to resume `trainer`.
    pub fn from_trainer(trainer: &Trainer) -> Self {
        Checkpoint {
            network: trainer.net.config.clone(),
            train: Some(trainer.config.clone()),
            params: trainer.params.clone(),
            state: Some(trainer.state.clone()),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        match (self.train, self.state) {
            (Some(train), Some(state)) => Trainer::resume(self.network, train, self.params, state),
            _ => Err(Error::InvalidConfig("checkpoint holds no training state".into())),
        }
    }

    pub fn into_mechanism(self) -> Result<LearnedMechanism> {
        LearnedMechanism::new(DrNet::new(self.network)?, self.params)
    }

    /// Fails unless the stored network has the given shape.
    pub fn expect_network(&self, expected: &NetworkConfig) -> Result<()> {
        let found = &self.network;
        if (found.n, found.m) != (expected.n, expected.m) {
            return Err(Error::ShapeMismatch {
                name: "market".into(),
                expected: vec![expected.n, expected.m],
                found: vec![found.n, found.m],
            });
        }
        if found.hidden_layers != expected.hidden_layers {
            return Err(Error::ShapeMismatch {
                name: "hidden_layers".into(),
                expected: expected.hidden_layers.clone(),
                found: found.hidden_layers.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            network: self.network.clone(),
            train: self.train.clone(),
            state: self.state.as_ref().map(|s| StateHeader {
                epochs_done: s.epochs_done,
                iteration: s.iteration,
                lagrange: s.lagrange.clone(),
                adam_steps: [s.adam.matching.step, s.adam.payment.step, s.adam.revenue.step],
                log: s.log.records.clone(),
            }),
        };
        let json = serde_json::to_vec(&header)?;

        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for set in self.params.sets() {
            tensors.extend(set.iter().map(|(n, t)| (n.to_string(), t)));
        }
        let cache_tensor;
        if let Some(state) = &self.state {
            for adam in [&state.adam.matching, &state.adam.payment, &state.adam.revenue] {
                tensors.extend(adam.first_moment.iter().map(|(n, t)| (format!("{FIRST_MOMENT}{n}"), t)));
                tensors.extend(adam.second_moment.iter().map(|(n, t)| (format!("{SECOND_MOMENT}{n}"), t)));
            }
            cache_tensor = Tensor::new(
                vec![state.cache.samples(), state.cache.players()],
                state.cache.values().to_vec(),
            )?;
            tensors.push((CACHE.to_string(), &cache_tensor));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = r.len_u64()?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| corrupt(&format!("bad header: {e}")))?;
        header.network.validate()?;

        let count = r.u32()? as usize;
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| corrupt(&format!("tensor `{name}` larger than the file")))?;
            let data = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }

        let mut matching = ParameterSet::new();
        let mut payment = ParameterSet::new();
        let mut revenue = ParameterSet::new();
        let mut first = [ParameterSet::new(), ParameterSet::new(), ParameterSet::new()];
        let mut second = [ParameterSet::new(), ParameterSet::new(), ParameterSet::new()];
        let mut cache = None;
        let net_of = |name: &str| -> Result<usize> {
            match name.split('.').next() {
                Some("matching") => Ok(0),
                Some("payment") => Ok(1),
                Some("revenue") => Ok(2),
                _ => Err(corrupt(&format!("unexpected tensor `{name}`"))),
            }
        };
        for (name, t) in tensors {
            if name == CACHE {
                cache = Some(t);
            } else if let Some(rest) = name.strip_prefix(FIRST_MOMENT) {
                first[net_of(rest)?].insert(rest, t)?;
            } else if let Some(rest) = name.strip_prefix(SECOND_MOMENT) {
                second[net_of(rest)?].insert(rest, t)?;
            } else {
                let set = match net_of(&name)? {
                    0 => &mut matching,
                    1 => &mut payment,
                    _ => &mut revenue,
                };
                set.insert(name, t)?;
            }
        }
        let params = ModelParams {
            matching,
            payment,
            revenue,
        };
        params.check_config(&header.network)?;

        let state = match header.state {
            None => None,
            Some(s) => {
                let train = header
                    .train
                    .as_ref()
                    .ok_or_else(|| corrupt("training state without a training config"))?;
                let [m1, p1, r1] = first;
                let [m2, p2, r2] = second;
                let adam = |set: &ParameterSet, m: ParameterSet, v: ParameterSet, step: u64| -> Result<AdamState> {
                    set.check_same_layout(&m)?;
                    set.check_same_layout(&v)?;
                    Ok(AdamState {
                        config: train.adam.clone(),
                        step,
                        first_moment: m,
                        second_moment: v,
                    })
                };
                let adam = ModelAdam {
                    matching: adam(&params.matching, m1, m2, s.adam_steps[0])?,
                    payment: adam(&params.payment, p1, p2, s.adam_steps[1])?,
                    revenue: adam(&params.revenue, r1, r2, s.adam_steps[2])?,
                };
                let cache = cache.ok_or_else(|| corrupt("training state without a misreport cache"))?;
                let players = match cache.shape() {
                    [_, p] => *p,
                    other => return Err(corrupt(&format!("misreport cache of shape {other:?}"))),
                };
                Some(TrainState {
                    epochs_done: s.epochs_done,
                    iteration: s.iteration,
                    lagrange: s.lagrange,
                    adam,
                    cache: MisreportCache::from_values(players, cache.into_data())?,
                    log: TrainLog { records: s.log },
                })
            }
        };
        Ok(Checkpoint {
            network: header.network,
            train: header.train,
            params,
            state,
        })
    }
}

fn corrupt(reason: &str) -> Error {
    Error::Checkpoint {
        path: PathBuf::new(),
        reason: reason.to_string(),
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Checkpoint { reason, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if len > self.remaining() {
            return Err(corrupt("truncated file"));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| corrupt("length overflows"))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes).map_err(|e| with_path(e, path))
}
