//! Checkpoint directory: `params.bin` (every tensor by name), `optim.bin`
//! (Adam moments by name), `meta.json`, and a copy of the vocabulary.
//!
//! Both binary files are little-endian. `params.bin` is the magic `RMDP`,
//! a `u64` count, then per tensor `name_len u32 | name | rank u32 |
//! dims u64… | values f64…`. `optim.bin` is `RMDO`, `t u64`, the three Adam
//! constants as `f64`, a `u64` count, then per tensor `name_len u32 | name |
//! numel u64 | m f64… | v f64…`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Adam, Phase, Trainer};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::math::{ParamStore, Tensor};
use crate::model::Model;
use crate::text::Vocabulary;

pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIM_FILE: &str = "optim.bin";
pub const META_FILE: &str = "meta.json";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub phase: Phase,
    pub config: PipelineConfig,
    /// Relative to the checkpoint directory.
    pub vocab_path: String,
    pub index_epoch: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub optimizer: Adam,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    /// Resumes training with the stored optimizer state and step.
    pub fn into_trainer(self) -> Result<Trainer> {
        let config = match self.meta.phase {
            Phase::Pretrain => self.meta.config.pretrain.clone(),
            Phase::Joint => self.meta.config.train.clone(),
        };
        let mut t = Trainer::new(self.model, config, self.meta.phase)?;
        t.optimizer = self.optimizer;
        t.step = self.meta.step;
        Ok(t)
    }
}

fn put_name(w: &mut impl Write, name: &str) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())
}

fn put_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_params(path: &Path, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"RMDP")?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, p) in store.iter() {
        put_name(&mut w, &p.name)?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        put_f64s(&mut w, p.value.data())?;
    }
    w.flush()?;
    Ok(())
}

fn write_optim(path: &Path, store: &ParamStore, adam: &Adam) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"RMDO")?;
    w.write_all(&adam.t.to_le_bytes())?;
    put_f64s(&mut w, &[adam.beta1, adam.beta2, adam.eps])?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for ((_, p), (m, v)) in store.iter().zip(adam.m.iter().zip(&adam.v)) {
        put_name(&mut w, &p.name)?;
        w.write_all(&(m.numel() as u64).to_le_bytes())?;
        put_f64s(&mut w, m.data())?;
        put_f64s(&mut w, v.data())?;
    }
    w.flush()?;
    Ok(())
}

struct Reader {
    inner: BufReader<File>,
    path: PathBuf,
}

impl Reader {
    fn open(path: PathBuf) -> Result<Self> {
        Ok(Self {
            inner: BufReader::new(File::open(&path)?),
            path,
        })
    }
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            message: message.into(),
        }
    }
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.fail(format!("truncated or unreadable: {e}")))?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.fail(format!("truncated name: {e}")))?;
        String::from_utf8(buf).map_err(|e| self.fail(format!("parameter name: {e}")))
    }
    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        if &self.bytes::<4>()? != want {
            return Err(self.fail(format!("expected magic {}", String::from_utf8_lossy(want))));
        }
        Ok(())
    }
}

fn read_params(path: PathBuf, store: &mut ParamStore) -> Result<()> {
    let mut r = Reader::open(path)?;
    r.magic(b"RMDP")?;
    let count = r.u64()? as usize;
    if count != store.len() {
        return Err(r.fail(format!("{count} tensors stored, model has {}", store.len())));
    }
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let values = r.f64s(shape.iter().product())?;
        let id = store.id(&name).ok_or_else(|| r.fail(format!("unknown parameter {name}")))?;
        let t = Tensor::new(shape, values).map_err(|e| r.fail(e.to_string()))?;
        store.assign(id, t).map_err(|e| r.fail(format!("{name}: {e}")))?;
    }
    Ok(())
}

fn read_optim(path: PathBuf, store: &ParamStore) -> Result<Adam> {
    let mut r = Reader::open(path)?;
    r.magic(b"RMDO")?;
    let mut adam = Adam::new(store);
    adam.t = r.u64()?;
    let consts = r.f64s(3)?;
    (adam.beta1, adam.beta2, adam.eps) = (consts[0], consts[1], consts[2]);
    let count = r.u64()? as usize;
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name = r.name()?;
        let n = r.u64()? as usize;
        let id = store.id(&name).ok_or_else(|| r.fail(format!("unknown parameter {name}")))?;
        if n != store.value(id).numel() {
            return Err(r.fail(format!("{name}: {n} moments for {} values", store.value(id).numel())));
        }
        adam.m[id.0].data_mut().copy_from_slice(&r.f64s(n)?);
        adam.v[id.0].data_mut().copy_from_slice(&r.f64s(n)?);
        seen.insert(name);
    }
    if seen.len() != store.len() {
        return Err(r.fail(format!("moments for {} of {} parameters", seen.len(), store.len())));
    }
    Ok(adam)
}

/// Writes the trainer state. The model section of `config` is replaced by
/// the trainer's model configuration, and the section of its phase by its
/// training configuration.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    trainer: &Trainer,
    config: &PipelineConfig,
    vocab: &Vocabulary,
    index_epoch: Option<u64>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_params(&dir.join(PARAMS_FILE), &trainer.model.params)?;
    write_optim(&dir.join(OPTIM_FILE), &trainer.model.params, &trainer.optimizer)?;
    vocab.save(dir.join(VOCAB_FILE))?;
    let mut config = config.clone();
    config.model = trainer.model.config.clone();
    match trainer.phase {
        Phase::Pretrain => config.pretrain = trainer.config.clone(),
        Phase::Joint => config.train = trainer.config.clone(),
    }
    let meta = CheckpointMeta {
        step: trainer.step,
        phase: trainer.phase,
        config,
        vocab_path: VOCAB_FILE.into(),
        index_epoch,
    };
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?).map_err(|e| Error::Format {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    let vocab = Vocabulary::load(dir.join(&meta.vocab_path))?;
    let mut model = Model::new(meta.config.model.clone(), meta.config.train.seed)?;
    read_params(dir.join(PARAMS_FILE), &mut model.params)?;
    let optimizer = read_optim(dir.join(OPTIM_FILE), &model.params)?;
    Ok(Checkpoint {
        meta,
        model,
        optimizer,
        vocab,
    })
}

/// Parameters and optimizer state written after a numeric failure, with
/// the error message in `error.txt`.
pub fn dump_state(dir: impl AsRef<Path>, trainer: &Trainer, error: &Error) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_params(&dir.join(PARAMS_FILE), &trainer.model.params)?;
    write_optim(&dir.join(OPTIM_FILE), &trainer.model.params, &trainer.optimizer)?;
    std::fs::write(dir.join("error.txt"), format!("step {}: {error}\n", trainer.step))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::TrainConfig;

    fn trainer() -> Trainer {
        let model = Model::new(
            ModelConfig {
                vocab_size: 10,
                d_model: 4,
                heads: 1,
                layers: 1,
                max_len: 8,
                max_target_len: 8,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        Trainer::new(model, TrainConfig::default(), Phase::Joint).unwrap()
    }

    #[test]
    fn round_trip_restores_every_tensor() {
        let mut t = trainer();
        let id = t.model.params.ids().next().unwrap();
        t.model.params.value_mut(id).data_mut()[0] = 0.123_456_789_012_345_6;
        t.optimizer.m[3].data_mut()[0] = -7.5e-9;
        t.optimizer.t = 11;
        t.step = 11;
        let vocab = Vocabulary::build_from_texts(["a b c"], 10, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &t, &PipelineConfig::default(), &vocab, Some(4)).unwrap();
        let c = load_checkpoint(dir.path()).unwrap();
        assert_eq!(c.meta.step, 11);
        assert_eq!(c.meta.index_epoch, Some(4));
        assert_eq!(c.vocab, vocab);
        assert_eq!(c.optimizer, t.optimizer);
        for ((_, a), (_, b)) in c.model.params.iter().zip(t.model.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corrupt_params_file_is_a_format_error() {
        let t = trainer();
        let vocab = Vocabulary::build_from_texts(["a"], 10, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &t, &PipelineConfig::default(), &vocab, None).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
    }
}
