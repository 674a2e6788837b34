use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Episode, Source};
use crate::binio::{checked_len, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SFEPISOD";
const VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub success: bool,
    pub source: Source,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub env: String,
    pub seed: u64,
    pub episodes: Vec<ManifestEntry>,
}

pub fn write_episode(path: &Path, e: &Episode) -> Result<()> {
    e.validate()?;
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u64(e.len() as u64)?;
    w.u32(e.obs_dim() as u32)?;
    w.u32(e.action_dim() as u32)?;
    w.u8(e.success as u8)?;
    w.u8(e.source.code())?;
    w.f64s(e.observations.data())?;
    w.f64s(e.actions.data())?;
    w.f64s(&e.rewards)?;
    w.into_inner().flush()?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(MAGIC, "episode")?;
    let v = r.u32()?;
    if v != VERSION {
        return Err(Error::Format(format!("unsupported episode version {v}")));
    }
    let t = checked_len(r.u64()?, 1 << 24, "step")?;
    let d = checked_len(r.u32()? as u64, 1 << 16, "observation dimension")?;
    let a = checked_len(r.u32()? as u64, 1 << 16, "action dimension")?;
    let success = match r.u8()? {
        0 => false,
        1 => true,
        x => return Err(Error::Format(format!("invalid success flag {x}"))),
    };
    let source = Source::from_code(r.u8()?)?;
    let obs = Tensor::from_vec(t, d, r.f64s(t * d)?)?;
    let act = Tensor::from_vec(t, a, r.f64s(t * a)?)?;
    let rew = r.f64s(t)?;
    r.finish()?;
    Episode::new(obs, act, rew, success, source).map_err(|e| Error::Format(e.to_string()))
}

/// Writes one file per episode plus the manifest. A non-empty `dir` is
/// refused unless `overwrite` is set.
pub fn write_corpus(
    dir: &Path,
    env: &str,
    seed: u64,
    episodes: &[Episode],
    overwrite: bool,
) -> Result<Manifest> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !overwrite {
            return Err(Error::Argument(format!(
                "output directory {} is not empty (pass --overwrite to replace it)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(episodes.len());
    for (i, e) in episodes.iter().enumerate() {
        let file = format!("ep_{i:05}.bin");
        write_episode(&dir.join(&file), e)?;
        entries.push(ManifestEntry {
            file,
            success: e.success,
            source: e.source,
            steps: e.len(),
        });
    }
    let m = Manifest {
        version: MANIFEST_VERSION,
        env: env.to_string(),
        seed,
        episodes: entries,
    };
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(m)
}

pub fn read_corpus(dir: &Path) -> Result<(Manifest, Vec<Episode>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Data(format!("cannot read manifest in {}: {e}", dir.display())))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            m.version
        )));
    }
    let mut eps = Vec::with_capacity(m.episodes.len());
    for entry in &m.episodes {
        if entry.file.contains('/') || entry.file.contains("..") {
            return Err(Error::Format(format!(
                "invalid episode path {}",
                entry.file
            )));
        }
        let e = read_episode(&dir.join(&entry.file))?;
        if e.success != entry.success || e.source != entry.source || e.len() != entry.steps {
            return Err(Error::Format(format!(
                "episode {} disagrees with the manifest",
                entry.file
            )));
        }
        eps.push(e);
    }
    Ok((m, eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(i: usize) -> Episode {
        Episode::new(
            Tensor::from_fn(4, 3, |t, j| (t * 3 + j + i) as f64),
            Tensor::from_fn(4, 2, |t, j| (t as f64 - j as f64) * 0.1),
            vec![0.0, 0.0, 0.0, 1.0],
            i % 2 == 0,
            Source::Demo,
        )
        .unwrap()
    }

    #[test]
    fn corpus_round_trip_and_overwrite_guard() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("corpus");
        let eps: Vec<Episode> = (0..3).map(ep).collect();
        let m = write_corpus(&out, "pointmass", 7, &eps, false).unwrap();
        let (m2, back) = read_corpus(&out).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back, eps);
        assert!(matches!(
            write_corpus(&out, "pointmass", 7, &eps, false),
            Err(Error::Argument(_))
        ));
        write_corpus(&out, "pointmass", 7, &eps[..1], true).unwrap();
        assert_eq!(read_corpus(&out).unwrap().1.len(), 1);
    }

    #[test]
    fn corrupt_episode_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        write_episode(&p, &ep(0)).unwrap();
        let mut b = fs::read(&p).unwrap();
        b[0] = b'X';
        fs::write(&p, &b).unwrap();
        assert!(matches!(read_episode(&p), Err(Error::Format(_))));
    }
}
