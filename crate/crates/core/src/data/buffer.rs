use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;

use super::{ChunkDims, NormStats, Source, TransitionBatch, TransitionChunk};
use crate::binio::{checked_len, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"SFBUFFER";
const VERSION: u32 = 1;
const MAX_DIM: u64 = 1 << 16;
const MAX_ROWS: u64 = 1 << 32;

/// FIFO transition store with a fixed capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    dims: ChunkDims,
    capacity: usize,
    rows: VecDeque<TransitionChunk>,
}

impl ReplayBuffer {
    pub fn new(dims: ChunkDims, capacity: usize) -> Self {
        Self {
            dims,
            capacity: capacity.max(1),
            rows: VecDeque::new(),
        }
    }

    pub fn from_rows(dims: ChunkDims, rows: Vec<TransitionChunk>) -> Result<Self> {
        let mut b = Self::new(dims, rows.len().max(1));
        for r in rows {
            b.push(r)?;
        }
        Ok(b)
    }

    pub fn dims(&self) -> ChunkDims {
        self.dims
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends a row, evicting the oldest one when full.
    pub fn push(&mut self, row: TransitionChunk) -> Result<()> {
        self.dims.check(&row)?;
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
        }
        self.rows.push_back(row);
        Ok(())
    }

    pub fn get(&self, i: usize) -> &TransitionChunk {
        &self.rows[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionChunk> {
        self.rows.iter()
    }

    /// Uniform batch with replacement.
    pub fn sample<T: Scalar>(&self, n: usize, rng: &mut impl Rng) -> Result<TransitionBatch<T>> {
        if self.is_empty() {
            return Err(Error::Data("cannot sample from an empty buffer".into()));
        }
        let len = self.len();
        let rows: Vec<&TransitionChunk> =
            (0..n).map(|_| &self.rows[rng.gen_range(0..len)]).collect();
        TransitionBatch::from_rows(&rows, self.dims)
    }

    pub fn batch<T: Scalar>(&self) -> Result<TransitionBatch<T>> {
        let rows: Vec<&TransitionChunk> = self.rows.iter().collect();
        TransitionBatch::from_rows(&rows, self.dims)
    }

    /// Writes the buffer with its normalization statistics. The file is
    /// written beside `path` and renamed, so readers never see a partial file.
    pub fn save(&self, path: &Path, norm: &NormStats) -> Result<()> {
        let d = self.dims;
        if norm.obs_dim() != d.obs_dim || norm.action_dim() != d.action_dim {
            return Err(Error::Shape(
                "normalization does not match buffer dims".into(),
            ));
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut w = Writer::new(BufWriter::new(File::create(&tmp)?));
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        for v in [d.obs_dim, d.action_dim, d.chunk_len, d.prefix_len] {
            w.u32(v as u32)?;
        }
        w.u64(self.capacity as u64)?;
        w.f64s(&norm.to_vec())?;
        w.u64(self.rows.len() as u64)?;
        for r in &self.rows {
            w.f64s(&r.obs)?;
            w.f64s(&r.prefix)?;
            w.f64s(&r.chunk)?;
            w.f64s(&r.rewards)?;
            w.f64s(&r.next_obs)?;
            w.f64s(&r.next_prefix)?;
            w.u8(r.done as u8)?;
            w.u8(r.source.code())?;
        }
        use std::io::Write;
        w.into_inner().flush()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, NormStats)> {
        let mut r = Reader::new(BufReader::new(File::open(path)?));
        r.magic(MAGIC, "buffer")?;
        let v = r.u32()?;
        if v != VERSION {
            return Err(Error::Format(format!("unsupported buffer version {v}")));
        }
        let mut dim = || -> Result<usize> { checked_len(r.u32()? as u64, MAX_DIM, "dimension") };
        let dims = ChunkDims {
            obs_dim: dim()?,
            action_dim: dim()?,
            chunk_len: dim()?,
            prefix_len: dim()?,
        };
        let capacity = checked_len(r.u64()?, MAX_ROWS, "capacity")?;
        let nv = r.f64s(2 * (dims.obs_dim + dims.action_dim))?;
        let norm = NormStats::from_vec(dims.obs_dim, dims.action_dim, &nv)?;
        let n = checked_len(r.u64()?, MAX_ROWS, "row")?;
        if n > capacity {
            return Err(Error::Format(
                "buffer holds more rows than its capacity".into(),
            ));
        }
        let pa = dims.prefix_len * dims.action_dim;
        let mut buf = Self::new(dims, capacity);
        for _ in 0..n {
            let row = TransitionChunk {
                obs: r.f64s(dims.obs_dim)?,
                prefix: r.f64s(pa)?,
                chunk: r.f64s(dims.chunk_len * dims.action_dim)?,
                rewards: r.f64s(dims.chunk_len)?,
                next_obs: r.f64s(dims.obs_dim)?,
                next_prefix: r.f64s(pa)?,
                done: match r.u8()? {
                    0 => false,
                    1 => true,
                    x => return Err(Error::Format(format!("invalid done flag {x}"))),
                },
                source: Source::from_code(r.u8()?)?,
            };
            buf.rows.push_back(row);
        }
        r.finish()?;
        Ok((buf, norm))
    }
}

/// Row-level Bernoulli mixture of an offline and an online buffer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixedSampler {
    rho: f64,
}

impl MixedSampler {
    pub fn new(rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {rho}")));
        }
        Ok(Self { rho })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Each row comes from `offline` with probability `rho`, else from `online`.
    /// An empty buffer hands all rows to the other one.
    pub fn sample<T: Scalar>(
        &self,
        offline: &ReplayBuffer,
        online: &ReplayBuffer,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<TransitionBatch<T>> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if offline.is_empty() && online.is_empty() {
            return Err(Error::Data("both replay buffers are empty".into()));
        }
        if online.is_empty() && self.rho < 1.0 {
            log::info!("online buffer empty; drawing the whole batch from offline data");
        } else if offline.is_empty() && self.rho > 0.0 {
            log::info!("offline buffer empty; drawing the whole batch from online data");
        }
        let mut rows = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let from_offline = if online.is_empty() {
                true
            } else if offline.is_empty() {
                false
            } else {
                rng.gen::<f64>() < self.rho
            };
            let src = if from_offline { offline } else { online };
            rows.push(src.get(rng.gen_range(0..src.len())));
        }
        let mut b = TransitionBatch::from_rows(&rows, offline.dims())?;
        for (flag, row) in b.offline.iter_mut().zip(&rows) {
            *flag = row.source.is_offline();
        }
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ChunkDims {
        ChunkDims {
            obs_dim: 2,
            action_dim: 1,
            chunk_len: 2,
            prefix_len: 1,
        }
    }

    fn row(i: usize, source: Source) -> TransitionChunk {
        let x = i as f64 * 0.01;
        TransitionChunk {
            obs: vec![x, -x],
            prefix: vec![x],
            chunk: vec![0.1, -0.2],
            rewards: vec![x, 0.0],
            next_obs: vec![x, 1.0],
            next_prefix: vec![-0.2],
            done: i % 3 == 0,
            source,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(dims(), 3);
        for i in 0..5 {
            b.push(row(i, Source::Online)).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.get(0), &row(2, Source::Online));
    }

    #[test]
    fn file_round_trip() {
        let mut b = ReplayBuffer::new(dims(), 10);
        for i in 0..7 {
            b.push(row(
                i,
                if i % 2 == 0 {
                    Source::Demo
                } else {
                    Source::Online
                },
            ))
            .unwrap();
        }
        let norm = NormStats::identity(2, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("buf.bin");
        b.save(&p, &norm).unwrap();
        let (back, n2) = ReplayBuffer::load(&p).unwrap();
        assert_eq!(back, b);
        assert_eq!(n2, norm);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let mut b = ReplayBuffer::new(dims(), 4);
        b.push(row(1, Source::Demo)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("buf.bin");
        b.save(&p, &NormStats::identity(2, 1)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ReplayBuffer::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn mixing_degenerate_cases() {
        let mut off = ReplayBuffer::new(dims(), 10);
        off.push(row(0, Source::Demo)).unwrap();
        let mut on = ReplayBuffer::new(dims(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = MixedSampler::new(0.5).unwrap();
        let b = s.sample::<f64>(&off, &on, 64, &mut rng).unwrap();
        assert!(b.offline.iter().all(|&f| f));
        on.push(row(1, Source::Online)).unwrap();
        let all_off = MixedSampler::new(1.0)
            .unwrap()
            .sample::<f64>(&off, &on, 64, &mut rng)
            .unwrap();
        assert!(all_off.offline.iter().all(|&f| f));
        let empty = ReplayBuffer::new(dims(), 1);
        assert!(matches!(
            s.sample::<f64>(&empty, &empty, 4, &mut rng),
            Err(Error::Data(_))
        ));
        assert!(MixedSampler::new(1.5).is_err());
    }
}
