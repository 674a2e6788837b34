//! Unified checkpoint: configuration, normalization, flow partitions, policy
//! and critic parameters, sealed with a SHA-256 of the payload.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::Stage;
use crate::binio::{checked_len, Reader, Writer};
use crate::critic::{CriticEnsemble, ValueSupport};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::flow::FlowPolicy;
use crate::params::ParamStore;
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SFCHKPNT";
const VERSION: u32 = 1;
const MAX_STR: usize = 1 << 20;
const MAX_ARRAYS: u64 = 1 << 16;
const MAX_DIM: u64 = 1 << 24;

/// Everything needed to continue a run after `stage`.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub config: TrainConfig,
    pub stage: Stage,
    pub norm: NormStats,
    /// Value support derived from the dataset; used by the critic.
    pub support: ValueSupport,
    pub policy: FlowPolicy<T>,
    pub critic: Option<CriticEnsemble<T>>,
}

impl<T: Scalar> PartialEq for TrainState<T> {
    /// Bitwise parameter equality plus equal metadata.
    fn eq(&self, other: &Self) -> bool {
        let critic_eq = match (&self.critic, &other.critic) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                a.params() == b.params() && a.target_params() == b.target_params()
            }
            _ => false,
        };
        self.config == other.config
            && self.stage == other.stage
            && self.norm == other.norm
            && self.support == other.support
            && self.policy.partition_masks() == other.policy.partition_masks()
            && self.policy.params() == other.policy.params()
            && critic_eq
    }
}

fn write_store<T: Scalar>(w: &mut Writer<&mut Vec<u8>>, s: &ParamStore<T>) -> Result<()> {
    w.u32(s.len() as u32)?;
    for (name, t) in s.named() {
        w.str(name)?;
        w.u32(t.rows() as u32)?;
        w.u32(t.cols() as u32)?;
        for &x in t.data() {
            w.f64(to_f64(x))?;
        }
    }
    Ok(())
}

fn read_store<T: Scalar>(r: &mut Reader<Cursor<&[u8]>>, into: &mut ParamStore<T>) -> Result<()> {
    let n = checked_len(r.u32()? as u64, MAX_ARRAYS, "parameter array")?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str(MAX_STR)?;
        let rows = checked_len(r.u32()? as u64, MAX_DIM, "row")?;
        let cols = checked_len(r.u32()? as u64, MAX_DIM, "column")?;
        let count = checked_len((rows as u64) * (cols as u64), MAX_DIM * 16, "value")?;
        let data = r.f64s(count)?.into_iter().map(lit::<T>).collect();
        entries.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    into.load_named(entries)
}

impl<T: Scalar> TrainState<T> {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let mut w = Writer::new(&mut buf);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.str(&self.config_hash())?;
        w.str(&serde_json::to_string(&self.config).expect("config serializes"))?;
        w.u8(self.stage.code())?;
        let fc = self.policy.config();
        w.u32(fc.obs_dim as u32)?;
        w.u32(fc.action_dim as u32)?;
        w.f64s(&self.norm.to_vec())?;
        let s = &self.support;
        w.f64(s.v_min)?;
        w.f64(s.v_max)?;
        w.u32(s.num_bins as u32)?;
        w.f64(s.hl_sigma)?;
        let masks = self.policy.partition_masks();
        w.u32(masks.len() as u32)?;
        w.u32(masks.first().map_or(0, Vec::len) as u32)?;
        for m in &masks {
            for &b in m {
                w.u8(u8::from(b))?;
            }
        }
        write_store(&mut w, self.policy.params())?;
        match &self.critic {
            None => w.u8(0)?,
            Some(c) => {
                w.u8(1)?;
                write_store(&mut w, c.params())?;
                write_store(&mut w, c.target_params())?;
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 32 {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let (payload, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader::new(Cursor::new(payload));
        r.magic(MAGIC, "checkpoint")?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hash = r.str(128)?;
        let config: TrainConfig = serde_json::from_str(&r.str(MAX_STR)?)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if config.hash() != hash {
            return Err(Error::Format(
                "checkpoint config does not match its hash".into(),
            ));
        }
        let stage = Stage::from_code(r.u8()?)?;
        let obs_dim = checked_len(r.u32()? as u64, MAX_DIM, "observation dim")?;
        let action_dim = checked_len(r.u32()? as u64, MAX_DIM, "action dim")?;
        let norm = NormStats::from_vec(obs_dim, action_dim, &r.f64s(2 * (obs_dim + action_dim))?)?;
        let v_min = r.f64()?;
        let v_max = r.f64()?;
        let bins = r.u32()? as usize;
        let sigma = r.f64()?;
        let support = ValueSupport::with_sigma(v_min, v_max, bins, sigma)?;
        let depth = checked_len(r.u32()? as u64, MAX_ARRAYS, "block")?;
        let tokens = checked_len(r.u32()? as u64, MAX_DIM, "token")?;
        let mut masks = Vec::with_capacity(depth);
        for _ in 0..depth {
            let m = (0..tokens)
                .map(|_| match r.u8()? {
                    0 => Ok(false),
                    1 => Ok(true),
                    v => Err(Error::Format(format!("invalid mask byte {v}"))),
                })
                .collect::<Result<Vec<bool>>>()?;
            masks.push(m);
        }
        let mut policy =
            FlowPolicy::with_partitions(config.flow_config(obs_dim, action_dim), &masks)?;
        read_store(&mut r, policy.params_mut())?;
        let critic = match r.u8()? {
            0 => None,
            1 => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
                let mut c = CriticEnsemble::new(
                    config.critic.clone(),
                    config.dims(obs_dim, action_dim),
                    support.clone(),
                    &mut rng,
                )?;
                read_store(&mut r, c.params_mut())?;
                read_store(&mut r, c.target_params_mut())?;
                Some(c)
            }
            v => return Err(Error::Format(format!("invalid critic flag {v}"))),
        };
        r.finish()?;
        Ok(Self {
            config,
            stage,
            norm,
            support,
            policy,
            critic,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
