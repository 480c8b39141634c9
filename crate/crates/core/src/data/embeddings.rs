//! Binary store of per-frame multi-term embeddings.
//!
//! `<name>.bin`: magic `MEMB`, version u32, width u64, count u64, then
//! `count` rows of `width` little-endian f64. `<name>.index.json` records the
//! per-video row offsets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MEMB";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbeddings {
    pub video_id: String,
    /// `frames × width`.
    pub rows: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    width: usize,
    videos: Vec<VideoEmbeddings>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    video_id: String,
    offset: u64,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    width: u64,
    count: u64,
    videos: Vec<IndexEntry>,
}

fn index_path(bin: &Path) -> PathBuf {
    bin.with_extension("index.json")
}

impl EmbeddingStore {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            videos: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn videos(&self) -> &[VideoEmbeddings] {
        &self.videos
    }

    pub fn get(&self, video_id: &str) -> Option<&Tensor<f64>> {
        self.videos
            .iter()
            .find(|v| v.video_id == video_id)
            .map(|v| &v.rows)
    }

    pub fn count(&self) -> usize {
        self.videos.iter().map(|v| v.rows.rows()).sum()
    }

    pub fn push(&mut self, video_id: impl Into<String>, rows: Tensor<f64>) -> Result<()> {
        if rows.cols() != self.width {
            return Err(Error::Store(format!(
                "embedding width {} does not match store width {}",
                rows.cols(),
                self.width
            )));
        }
        self.videos.push(VideoEmbeddings {
            video_id: video_id.into(),
            rows,
        });
        Ok(())
    }

    pub fn write(&self, bin: &Path) -> Result<()> {
        let io = |e| Error::io(bin, e);
        let mut w = BufWriter::new(File::create(bin).map_err(io)?);
        w.write_all(EMBEDDING_MAGIC).map_err(io)?;
        w.write_all(&EMBEDDING_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.width as u64).to_le_bytes())
            .map_err(io)?;
        w.write_all(&(self.count() as u64).to_le_bytes())
            .map_err(io)?;
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for v in &self.videos {
            for &x in v.rows.values() {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
            let count = v.rows.rows() as u64;
            entries.push(IndexEntry {
                video_id: v.video_id.clone(),
                offset,
                count,
            });
            offset += count;
        }
        w.flush().map_err(io)?;
        let index = Index {
            width: self.width as u64,
            count: offset,
            videos: entries,
        };
        let ip = index_path(bin);
        let json = serde_json::to_string_pretty(&index).expect("index serializes");
        std::fs::write(&ip, json).map_err(|e| Error::io(&ip, e))
    }

    pub fn read(bin: &Path) -> Result<Self> {
        let ip = index_path(bin);
        let raw = std::fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
        let index: Index = serde_json::from_str(&raw)
            .map_err(|e| Error::Store(format!("{}: {e}", ip.display())))?;
        let store_err = |e: std::io::Error| Error::Store(format!("{}: {e}", bin.display()));
        let mut r = BufReader::new(File::open(bin).map_err(|e| Error::io(bin, e))?);
        let mut head = [0u8; 24];
        r.read_exact(&mut head).map_err(store_err)?;
        if &head[..4] != EMBEDDING_MAGIC {
            return Err(Error::Store(format!("{}: bad magic", bin.display())));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        if version != EMBEDDING_VERSION {
            return Err(Error::Store(format!(
                "unsupported embedding store version {version}"
            )));
        }
        let width = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
        let count = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes"));
        if width != index.width || count != index.count {
            return Err(Error::Store(format!(
                "header width/count {width}/{count} disagree with index {}/{}",
                index.width, index.count
            )));
        }
        if width == 0 {
            return Err(Error::Store("zero embedding width".into()));
        }
        let mut store = Self::new(width as usize);
        let mut expected_offset = 0;
        let mut b8 = [0u8; 8];
        for e in index.videos {
            if e.offset != expected_offset || e.count == 0 {
                return Err(Error::Store(format!(
                    "index entry for {} is inconsistent",
                    e.video_id
                )));
            }
            let n = (e.count * width) as usize;
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut b8).map_err(store_err)?;
                vals.push(f64::from_le_bytes(b8));
            }
            expected_offset += e.count;
            store.push(
                e.video_id,
                Tensor::new(vec![e.count as usize, width as usize], vals)?,
            )?;
        }
        if expected_offset != count {
            return Err(Error::Store("index does not cover every row".into()));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        let mut s = EmbeddingStore::new(3);
        s.push(
            "a",
            Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(),
        )
        .unwrap();
        s.push("b", Tensor::from_f64(&[1, 3], &[-1., 0.5, 9.]).unwrap())
            .unwrap();
        s.write(&p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24 + 9 * 8);
        assert_eq!(EmbeddingStore::read(&p).unwrap(), s);
    }

    #[test]
    fn width_mismatch() {
        let mut s = EmbeddingStore::new(3);
        assert!(matches!(
            s.push("a", Tensor::zeros(&[2, 4])),
            Err(Error::Store(_))
        ));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        s.push("a", Tensor::zeros(&[2, 3])).unwrap();
        s.write(&p).unwrap();
        let ip = p.with_extension("index.json");
        let idx = std::fs::read_to_string(&ip)
            .unwrap()
            .replace("\"width\": 3", "\"width\": 4");
        std::fs::write(&ip, idx).unwrap();
        assert!(matches!(EmbeddingStore::read(&p), Err(Error::Store(_))));
    }
}
