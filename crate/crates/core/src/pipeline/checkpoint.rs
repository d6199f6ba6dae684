//! Checkpoint container: an 8-byte magic, a length-prefixed JSON manifest,
//! then one raw little-endian float32 blob. Everything round-trips
//! bit-identically.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PECOCKPT";
pub const VERSION: &str = "peco-ckpt/1";

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    version: String,
    stage: String,
    step: u64,
    rng_seed: u64,
    rng_word_pos: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub stage: String,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub config: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(stage: &str, config: serde_json::Value) -> Self {
        Checkpoint {
            stage: stage.to_string(),
            step: 0,
            rng_seed: 0,
            rng_word_pos: 0,
            config,
            tensors: Vec::new(),
        }
    }

    pub fn set_rng(&mut self, rng: &Rng) {
        self.rng_seed = rng.seed();
        self.rng_word_pos = rng.word_pos();
    }

    pub fn rng(&self) -> Rng {
        Rng::restore(self.rng_seed, self.rng_word_pos)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.tensors.iter().all(|(n, _)| n != name),
            "duplicate checkpoint tensor {name}"
        );
        self.tensors.push((name.to_string(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Store every parameter of a set under `prefix`.
    pub fn put_params(&mut self, prefix: &str, ps: &ParamSet) {
        for (name, t) in ps.iter() {
            self.insert(&format!("{prefix}{name}"), t.clone());
        }
    }

    /// Restore a parameter set stored under `prefix`; shapes must match.
    pub fn load_params(&self, prefix: &str, ps: &mut ParamSet) -> Result<()> {
        ps.load_values(&|name| self.tensor(&format!("{prefix}{name}")).cloned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob: Vec<u8> = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for &v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: (t.numel() * 4) as u64,
            });
        }
        let manifest = Manifest {
            version: VERSION.to_string(),
            stage: self.stage.clone(),
            step: self.step,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng_word_pos.to_string(),
            config: self.config.clone(),
            tensors: entries,
        };
        let mjson = serde_json::to_vec(&manifest).map_err(|e| Error::ManifestParse(e.to_string()))?;
        // write to a sibling then rename, so a crash never clobbers the
        // previous checkpoint
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(MAGIC)?;
            f.write_all(&(mjson.len() as u64).to_le_bytes())?;
            f.write_all(&mjson)?;
            f.write_all(&blob)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::ManifestParse(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() < 16 + mlen {
            return Err(Error::TruncatedBlob { needed: (16 + mlen) as u64, actual: bytes.len() as u64 });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
            .map_err(|e| Error::ManifestParse(e.to_string()))?;
        if manifest.version != VERSION {
            return Err(Error::VersionMismatch { found: manifest.version, expected: VERSION.to_string() });
        }
        let blob = &bytes[16 + mlen..];
        let mut spans: Vec<(u64, u64, &str)> = manifest
            .tensors
            .iter()
            .map(|e| (e.offset, e.len, e.name.as_str()))
            .collect();
        spans.sort();
        for pair in spans.windows(2) {
            if pair[0].0 + pair[0].1 > pair[1].0 {
                return Err(Error::OffsetOverlap(format!(
                    "{} overlaps {}",
                    pair[0].2, pair[1].2
                )));
            }
        }
        if let Some(last) = spans.last() {
            if last.0 + last.1 > blob.len() as u64 {
                return Err(Error::TruncatedBlob {
                    needed: last.0 + last.1,
                    actual: blob.len() as u64,
                });
            }
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if numel * 4 != e.len as usize {
                return Err(Error::ManifestParse(format!(
                    "tensor {} length {} does not match shape {:?}",
                    e.name, e.len, e.shape
                )));
            }
            let raw = &blob[e.offset as usize..(e.offset + e.len) as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_parts(e.shape.clone(), data)));
        }
        let rng_word_pos: u128 = manifest
            .rng_word_pos
            .parse()
            .map_err(|_| Error::ManifestParse("bad rng_word_pos".into()))?;
        Ok(Checkpoint {
            stage: manifest.stage,
            step: manifest.step,
            rng_seed: manifest.rng_seed,
            rng_word_pos,
            config: manifest.config,
            tensors,
        })
    }
}

/// First 12 bytes of the SHA-256 of a file, the identity used to tie token
/// caches to the tokenizer that produced them.
pub fn file_fingerprint(path: &Path) -> Result<[u8; 12]> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut out = [0u8; 12];
    out.copy_from_slice(&digest[..12]);
    Ok(out)
}

pub fn fingerprint_hex(fp: &[u8]) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded_rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        Tensor::from_parts(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.normal()).collect())
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().expect("tmpdir");
        let path = dir.path().join("a.ckpt");
        let mut ck = Checkpoint::new("tokenizer", serde_json::json!({"k": 512}));
        ck.step = 77;
        let mut rng = seeded_rng(3);
        rng.normal();
        ck.set_rng(&rng);
        let t = rand_tensor(&[10, 100], 1);
        ck.insert("weights", t.clone());
        ck.insert("bias", rand_tensor(&[10], 2));
        ck.save(&path).expect("save");

        let back = Checkpoint::load(&path).expect("load");
        assert_eq!(back.stage, "tokenizer");
        assert_eq!(back.step, 77);
        assert_eq!(back.config["k"], 512);
        let w = back.tensor("weights").expect("weights");
        assert_eq!(w.shape(), t.shape());
        for (a, b) in w.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "round trip must be bit-exact");
        }
        // restored rng continues the same stream
        let mut expect = rng;
        let mut got = back.rng();
        for _ in 0..16 {
            assert_eq!(expect.uniform(), got.uniform());
        }
    }

    #[test]
    fn corrupted_manifest_detected() {
        let dir = tempfile::tempdir().expect("tmpdir");
        let path = dir.path().join("b.ckpt");
        let mut ck = Checkpoint::new("mim", serde_json::Value::Null);
        ck.insert("t", rand_tensor(&[4], 4));
        ck.save(&path).expect("save");
        let mut bytes = std::fs::read(&path).expect("read");
        bytes[20] ^= 0xff;
        std::fs::write(&path, &bytes).expect("write");
        match Checkpoint::load(&path) {
            Err(Error::ManifestParse(_)) => {}
            other => panic!("expected manifest parse failure, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn truncated_blob_detected() {
        let dir = tempfile::tempdir().expect("tmpdir");
        let path = dir.path().join("c.ckpt");
        let mut ck = Checkpoint::new("mim", serde_json::Value::Null);
        ck.insert("t", rand_tensor(&[100], 5));
        ck.save(&path).expect("save");
        let bytes = std::fs::read(&path).expect("read");
        std::fs::write(&path, &bytes[..bytes.len() - 40]).expect("write");
        match Checkpoint::load(&path) {
            Err(Error::TruncatedBlob { .. }) => {}
            other => panic!("expected truncated blob, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn version_mismatch_detected() {
        let dir = tempfile::tempdir().expect("tmpdir");
        let path = dir.path().join("d.ckpt");
        let ck = Checkpoint::new("mim", serde_json::Value::Null);
        ck.save(&path).expect("save");
        let bytes = std::fs::read(&path).expect("read");
        let patched = String::from_utf8_lossy(&bytes[16..]).replace("peco-ckpt/1", "peco-ckpt/9");
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        std::fs::write(&path, &out).expect("write");
        match Checkpoint::load(&path) {
            Err(Error::VersionMismatch { .. }) => {}
            other => panic!("expected version mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn overlapping_offsets_detected() {
        let dir = tempfile::tempdir().expect("tmpdir");
        let path = dir.path().join("e.ckpt");
        let manifest = format!(
            "{{\"version\":\"{VERSION}\",\"stage\":\"x\",\"step\":0,\"rng_seed\":0,\"rng_word_pos\":\"0\",\"config\":null,\
             \"tensors\":[{{\"name\":\"a\",\"shape\":[2],\"offset\":0,\"len\":8}},\
             {{\"name\":\"b\",\"shape\":[2],\"offset\":4,\"len\":8}}]}}"
        );
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&[0u8; 12]);
        std::fs::write(&path, &out).expect("write");
        match Checkpoint::load(&path) {
            Err(Error::OffsetOverlap(_)) => {}
            other => panic!("expected offset overlap, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn param_set_round_trip() {
        use crate::nn::ParamSet;
        let dir = tempfile::tempdir().expect("tmpdir");
        let path = dir.path().join("f.ckpt");
        let mut ps = ParamSet::new();
        ps.add("layer.w", rand_tensor(&[3, 3], 6), true);
        ps.add("layer.b", rand_tensor(&[3], 7), false);
        let mut ck = Checkpoint::new("feature-net", serde_json::Value::Null);
        ck.put_params("net.", &ps);
        ck.save(&path).expect("save");

        let back = Checkpoint::load(&path).expect("load");
        let mut ps2 = ParamSet::new();
        ps2.add("layer.w", Tensor::zeros(&[3, 3]), true);
        ps2.add("layer.b", Tensor::zeros(&[3]), false);
        back.load_params("net.", &mut ps2).expect("load params");
        for ((n1, t1), (n2, t2)) in ps2.iter().zip(ps.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn fingerprints_differ_across_files() {
        let dir = tempfile::tempdir().expect("tmpdir");
        let p1 = dir.path().join("g1.ckpt");
        let p2 = dir.path().join("g2.ckpt");
        let mut a = Checkpoint::new("x", serde_json::Value::Null);
        a.insert("t", rand_tensor(&[8], 8));
        a.save(&p1).expect("save");
        let mut b = Checkpoint::new("x", serde_json::Value::Null);
        b.insert("t", rand_tensor(&[8], 9));
        b.save(&p2).expect("save");
        let f1 = file_fingerprint(&p1).expect("fp");
        let f2 = file_fingerprint(&p2).expect("fp");
        assert_ne!(f1, f2);
        assert_eq!(fingerprint_hex(&f1).len(), 24);
        assert_eq!(file_fingerprint(&p1).expect("fp"), f1);
    }
}
