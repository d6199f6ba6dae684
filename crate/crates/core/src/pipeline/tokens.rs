//! Cached token datasets. A fixed 32-byte header records the grid geometry,
//! vocabulary size and the fingerprint of the tokenizer checkpoint that
//! produced the tokens, followed by the indices as little-endian u16.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::checkpoint::fingerprint_hex;
use crate::quantizer::TokenGrid;

pub const MAGIC: &[u8; 8] = b"PECOTOK1";
pub const HEADER_LEN: usize = 32;

pub struct TokenDataset {
    pub h: u16,
    pub w: u16,
    pub k: u32,
    pub fingerprint: [u8; 12],
    pub grids: Vec<TokenGrid>,
}

impl TokenDataset {
    pub fn new(h: u16, w: u16, k: u32, fingerprint: [u8; 12]) -> Self {
        TokenDataset { h, w, k, fingerprint, grids: Vec::new() }
    }

    pub fn push(&mut self, grid: TokenGrid) -> Result<()> {
        if grid.h != self.h as usize || grid.w != self.w as usize {
            return Err(Error::Config(format!(
                "token grid {}x{} does not match dataset {}x{}",
                grid.h, grid.w, self.h, self.w
            )));
        }
        if let Some(&bad) = grid.indices.iter().find(|&&t| t as u32 >= self.k) {
            return Err(Error::IndexOutOfBounds { index: bad as usize, bound: self.k as usize });
        }
        self.grids.push(grid);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    /// Fail unless the dataset was produced by the given tokenizer
    /// checkpoint. Stale caches are an error, not a warning.
    pub fn verify_fingerprint(&self, current: &[u8; 12]) -> Result<()> {
        if &self.fingerprint != current {
            return Err(Error::FingerprintMismatch {
                cached: fingerprint_hex(&self.fingerprint),
                current: fingerprint_hex(current),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&(self.grids.len() as u32).to_le_bytes());
        header.extend_from_slice(&self.h.to_le_bytes());
        header.extend_from_slice(&self.w.to_le_bytes());
        header.extend_from_slice(&self.k.to_le_bytes());
        header.extend_from_slice(&self.fingerprint);
        assert_eq!(header.len(), HEADER_LEN);
        let tmp = path.with_extension("tok.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&header)?;
            for grid in &self.grids {
                let mut buf = Vec::with_capacity(grid.indices.len() * 2);
                for &t in &grid.indices {
                    buf.extend_from_slice(&t.to_le_bytes());
                }
                f.write_all(&buf)?;
            }
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TokenDataset> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::ManifestParse(format!(
                "{} is not a token dataset",
                path.display()
            )));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let h = u16::from_le_bytes(bytes[12..14].try_into().expect("2 bytes"));
        let w = u16::from_le_bytes(bytes[14..16].try_into().expect("2 bytes"));
        let k = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
        let mut fingerprint = [0u8; 12];
        fingerprint.copy_from_slice(&bytes[20..32]);
        let per_grid = h as usize * w as usize;
        let needed = (HEADER_LEN + n * per_grid * 2) as u64;
        if (bytes.len() as u64) < needed {
            return Err(Error::TruncatedBlob { needed, actual: bytes.len() as u64 });
        }
        let mut ds = TokenDataset::new(h, w, k, fingerprint);
        let mut off = HEADER_LEN;
        for _ in 0..n {
            let indices: Vec<u16> = bytes[off..off + per_grid * 2]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
                .collect();
            off += per_grid * 2;
            ds.push(TokenGrid { h: h as usize, w: w as usize, indices })?;
        }
        Ok(ds)
    }
}
