//! Seeded, named random substreams and their exact capture/restore.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream. The seed
//! of stream `name` is `hash64(master_seed, name)`: the first eight bytes,
//! read little-endian, of `SHA-256(master_seed as u64 LE || name as UTF-8)`.
//! A stream's full state is its 32-byte key, stream id and word position,
//! which is what [`RngSnapshot`] stores.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Substream names. Fixed; snapshots must carry exactly this set.
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const AUGMENT: &str = "augment";
pub const SMOOTHGRAD: &str = "smoothgrad";
pub const RANDGRADS: &str = "randgrads";
pub const SYNTH_DATA: &str = "synth_data";

pub const SUBSTREAMS: [&str; 6] = [INIT, SHUFFLE, AUGMENT, SMOOTHGRAD, RANDGRADS, SYNTH_DATA];

pub type Rng = ChaCha8Rng;

/// Derive a 64-bit seed from a master seed and a stream name.
pub fn hash64(master_seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// A fresh stream for `name` under `master_seed`.
pub fn substream(master_seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(hash64(master_seed, name))
}

/// Hardware/software record written next to the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvRecord {
    pub platform: String,
    pub library_version: String,
    pub float: String,
    pub batch_size: Option<usize>,
    pub eval_batch_size: Option<usize>,
}

impl EnvRecord {
    pub fn current() -> Self {
        EnvRecord {
            platform: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            library_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            float: "f64".to_string(),
            batch_size: None,
            eval_batch_size: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReproContext {
    master_seed: u64,
    streams: BTreeMap<String, Rng>,
    pub env: EnvRecord,
}

impl ReproContext {
    pub fn new(master_seed: u64) -> Self {
        let streams = SUBSTREAMS
            .iter()
            .map(|name| (name.to_string(), substream(master_seed, name)))
            .collect();
        ReproContext {
            master_seed,
            streams,
            env: EnvRecord::current(),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Mutable access to a named substream.
    ///
    /// Panics on a name outside [`SUBSTREAMS`]; names are compile-time constants.
    pub fn stream(&mut self, name: &str) -> &mut Rng {
        self.streams
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown substream `{name}`"))
    }

    /// An independent child stream, e.g. one per worker or per benchmark task.
    /// Derived from `hash64(master_seed, "<name>/<index>")`; does not touch the parent.
    pub fn child(&self, name: &str, index: u64) -> Rng {
        substream(self.master_seed, &format!("{name}/{index}"))
    }

    pub fn capture(&self) -> RngSnapshot {
        RngSnapshot {
            streams: self
                .streams
                .iter()
                .map(|(name, rng)| (name.clone(), StreamState::of(rng)))
                .collect(),
        }
    }

    pub fn restore(&mut self, snapshot: &RngSnapshot) -> Result<()> {
        let ours: Vec<&String> = self.streams.keys().collect();
        let theirs: Vec<&String> = snapshot.streams.keys().collect();
        if ours != theirs {
            return Err(Error::SchemaMismatch(format!(
                "expected substreams {ours:?}, snapshot has {theirs:?}"
            )));
        }
        for (name, state) in &snapshot.streams {
            self.streams.insert(name.clone(), state.to_rng());
        }
        Ok(())
    }

    /// Write `seed.txt` (decimal seed and newline) and `env.json`.
    pub fn write_records(&self, dir: &Path) -> Result<()> {
        let seed_path = dir.join("seed.txt");
        fs::write(&seed_path, format!("{}\n", self.master_seed))
            .map_err(|e| Error::io(&seed_path, e))?;
        let env_path = dir.join("env.json");
        let json = serde_json::to_string_pretty(&self.env).expect("env record serializes");
        fs::write(&env_path, json + "\n").map_err(|e| Error::io(&env_path, e))
    }
}

/// Read the decimal master seed from `seed.txt`.
pub fn read_seed(dir: &Path) -> Result<u64> {
    let path = dir.join("seed.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.trim()
        .parse()
        .map_err(|_| Error::corrupt(&path, "expected a decimal integer"))
}

/// Full state of one ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl StreamState {
    fn of(rng: &Rng) -> Self {
        StreamState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn to_rng(&self) -> Rng {
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// States of every substream at one instant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngSnapshot {
    pub streams: BTreeMap<String, StreamState>,
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"RNGS";

impl RngSnapshot {
    /// Little-endian layout: magic `RNGS`, u32 count, then per stream
    /// (sorted by name): u32 name length, name bytes, 32-byte key,
    /// u64 stream id, u128 word position.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&(self.streams.len() as u32).to_le_bytes());
        for (name, s) in &self.streams {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&s.seed);
            out.extend_from_slice(&s.stream.to_le_bytes());
            out.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, path };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(Error::corrupt(path, "bad rng snapshot magic"));
        }
        let count = r.u32()?;
        let mut streams = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::corrupt(path, "stream name is not utf-8"))?;
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            streams.insert(name, StreamState { seed, stream, word_pos });
        }
        if r.pos != bytes.len() {
            return Err(Error::corrupt(path, "trailing bytes after rng snapshot"));
        }
        Ok(RngSnapshot { streams })
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::corrupt(self.path, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn draws(rng: &mut Rng, n: usize) -> Vec<u64> {
        (0..n).map(|_| rng.next_u64()).collect()
    }

    #[test]
    fn same_seed_same_streams() {
        let mut a = ReproContext::new(42);
        let mut b = ReproContext::new(42);
        for name in SUBSTREAMS {
            assert_eq!(draws(a.stream(name), 100), draws(b.stream(name), 100));
        }
    }

    #[test]
    fn names_give_distinct_streams() {
        let mut ctx = ReproContext::new(42);
        let all: Vec<Vec<u64>> = SUBSTREAMS.iter().map(|n| draws(ctx.stream(n), 100)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert!(all[i].iter().zip(&all[j]).all(|(x, y)| x != y));
            }
        }
    }

    #[test]
    fn capture_restore_replays() {
        let mut ctx = ReproContext::new(3);
        draws(ctx.stream(SHUFFLE), 7);
        let snap = ctx.capture();
        let first = draws(ctx.stream(SHUFFLE), 50);
        ctx.restore(&snap).unwrap();
        assert_eq!(first, draws(ctx.stream(SHUFFLE), 50));
    }

    #[test]
    fn isolation_between_streams() {
        let mut a = ReproContext::new(9);
        let mut b = ReproContext::new(9);
        draws(a.stream(AUGMENT), 1000);
        assert_eq!(draws(a.stream(SHUFFLE), 20), draws(b.stream(SHUFFLE), 20));
    }

    #[test]
    fn missing_stream_is_schema_mismatch() {
        let mut ctx = ReproContext::new(1);
        let mut snap = ctx.capture();
        snap.streams.remove(RANDGRADS);
        assert!(matches!(ctx.restore(&snap), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn snapshot_bytes_round_trip() {
        let mut ctx = ReproContext::new(11);
        draws(ctx.stream(INIT), 13);
        let snap = ctx.capture();
        let bytes = snap.to_bytes();
        let back = RngSnapshot::from_bytes(&bytes, Path::new("rng.bin")).unwrap();
        assert_eq!(back, snap);
        assert!(RngSnapshot::from_bytes(&bytes[..bytes.len() - 1], Path::new("rng.bin")).is_err());
    }

    #[test]
    fn seed_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = ReproContext::new(1234);
        ctx.write_records(dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("seed.txt")).unwrap(), "1234\n");
        assert_eq!(read_seed(dir.path()).unwrap(), ctx.master_seed());
    }
}
