//! Binary index file, all integers and floats little-endian:
//!
//! ```text
//! header   d_model u32 | count u64 | epoch u64
//! entry    id u64 | key_len u32 | key utf-8 | n_tokens u32 | tokens u32… | embedding f32 × d_model
//! trailer  has_quantizer u8
//!          [n_list u32 | iters u32 | seed u64 | centroids f64 × n_list × d_model | assignment u32 × count]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{IndexEntry, MemoryIndex, Quantizer, QuantizerConfig};
use crate::error::{Error, Result};

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn u8(&mut self) -> std::io::Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> std::io::Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f32(&mut self) -> std::io::Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

impl MemoryIndex {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(self.d_model as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.id.to_le_bytes())?;
            w.write_all(&(e.key.len() as u32).to_le_bytes())?;
            w.write_all(e.key.as_bytes())?;
            w.write_all(&(e.tokens.len() as u32).to_le_bytes())?;
            for t in &e.tokens {
                w.write_all(&t.to_le_bytes())?;
            }
            for v in &e.embedding {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        match &self.quantizer {
            None => w.write_all(&[0u8])?,
            Some(q) => {
                w.write_all(&[1u8])?;
                w.write_all(&(q.config.n_list as u32).to_le_bytes())?;
                w.write_all(&(q.config.iters as u32).to_le_bytes())?;
                w.write_all(&q.config.seed.to_le_bytes())?;
                for c in &q.centroids {
                    for v in c {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                for &a in &q.assignments {
                    w.write_all(&(a as u32).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fail = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut r = Reader {
            inner: BufReader::new(File::open(path)?),
        };
        let io = |e: std::io::Error| fail(format!("truncated or unreadable: {e}"));
        let d_model = r.u32().map_err(io)? as usize;
        let count = r.u64().map_err(io)? as usize;
        let epoch = r.u64().map_err(io)?;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = r.u64().map_err(io)?;
            let key_len = r.u32().map_err(io)? as usize;
            let mut key = vec![0u8; key_len];
            r.inner.read_exact(&mut key).map_err(io)?;
            let key = String::from_utf8(key).map_err(|e| fail(format!("entry {id} key: {e}")))?;
            let n_tokens = r.u32().map_err(io)? as usize;
            let tokens = (0..n_tokens).map(|_| r.u32()).collect::<std::io::Result<Vec<_>>>().map_err(io)?;
            let embedding = (0..d_model).map(|_| r.f32()).collect::<std::io::Result<Vec<_>>>().map_err(io)?;
            entries.push(IndexEntry {
                id,
                key,
                tokens,
                embedding,
            });
        }
        let mut index = MemoryIndex::new(d_model, entries, epoch).map_err(|e| fail(e.to_string()))?;
        if r.u8().map_err(io)? == 1 {
            let n_list = r.u32().map_err(io)? as usize;
            let iters = r.u32().map_err(io)? as usize;
            let seed = r.u64().map_err(io)?;
            let mut centroids = Vec::with_capacity(n_list);
            for _ in 0..n_list {
                centroids.push((0..d_model).map(|_| r.f64()).collect::<std::io::Result<Vec<_>>>().map_err(io)?);
            }
            let assignments = (0..count)
                .map(|_| r.u32().map(|a| a as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            let q = Quantizer::from_parts(QuantizerConfig { n_list, iters, seed }, centroids, assignments)
                .map_err(|e| fail(e.to_string()))?;
            index.set_quantizer(Some(q));
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reload_is_bit_exact() {
        let entries = (0..12u64)
            .map(|i| {
                let a = (i as f32 * 0.37).sin();
                let b = (1.0 - a * a).sqrt();
                IndexEntry {
                    id: i,
                    key: format!("doc-{i}"),
                    tokens: vec![4, 6 + i as u32, 9],
                    embedding: vec![a, b],
                }
            })
            .collect();
        let mut idx = MemoryIndex::new(2, entries, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.bin");
        idx.save(&p).unwrap();
        assert_eq!(MemoryIndex::load(&p).unwrap(), idx);

        idx.train_quantizer(QuantizerConfig { n_list: 3, iters: 4, seed: 2 }).unwrap();
        idx.save(&p).unwrap();
        let back = MemoryIndex::load(&p).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.epoch(), 3);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, [1u8, 0, 0]).unwrap();
        assert!(matches!(MemoryIndex::load(&p), Err(Error::Format { .. })));
    }
}
