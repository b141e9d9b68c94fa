//! Python bindings: vocabulary, memory index search, ROUGE, the learning
//! rate schedule and checkpoint-backed generation.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ragmds_core::decode::{generate_record, score_texts, GenerationSettings};
use ragmds_core::index::{IndexEntry, QuantizerConfig};
use ragmds_core::text::ExampleRecord;
use ragmds_core::train::{load_checkpoint, TrainConfig};

fn py_err(e: ragmds_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(frozen)]
struct Vocabulary {
    inner: ragmds_core::text::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    #[staticmethod]
    #[pyo3(signature = (texts, max_size = 30000, min_freq = 1))]
    fn build(texts: Vec<String>, max_size: usize, min_freq: usize) -> PyResult<Self> {
        let inner = ragmds_core::text::Vocabulary::build_from_texts(texts.iter().map(String::as_str), max_size, min_freq)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ragmds_core::text::Vocabulary::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        self.inner.detokenize(&ids)
    }

    fn id_of(&self, token: &str) -> Option<u32> {
        self.inner.id_of(token)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass]
struct MemoryIndex {
    inner: ragmds_core::index::MemoryIndex,
}

#[pymethods]
impl MemoryIndex {
    /// Builds an index from unit-norm vectors; ids are positions.
    #[new]
    fn new(keys: Vec<String>, vectors: Vec<Vec<f32>>) -> PyResult<Self> {
        if keys.len() != vectors.len() {
            return Err(PyValueError::new_err("keys and vectors differ in length"));
        }
        let d = vectors.first().map_or(0, Vec::len);
        let entries = keys
            .into_iter()
            .zip(vectors)
            .enumerate()
            .map(|(i, (key, embedding))| IndexEntry {
                id: i as u64,
                key,
                tokens: Vec::new(),
                embedding,
            })
            .collect();
        Ok(Self {
            inner: ragmds_core::index::MemoryIndex::new(d, entries, 0).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ragmds_core::index::MemoryIndex::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    /// Top-`k` `(id, score)` pairs; with `n_probe`, searches only that many
    /// quantizer cells.
    #[pyo3(signature = (query, k, n_probe = None))]
    fn search(&self, query: Vec<f64>, k: usize, n_probe: Option<usize>) -> PyResult<Vec<(u64, f64)>> {
        let hits = match n_probe {
            Some(p) => self.inner.search_approx(&query, k, p),
            None => self.inner.search_exact(&query, k),
        }
        .map_err(py_err)?;
        Ok(hits.into_iter().map(|h| (h.id, h.score)).collect())
    }

    #[pyo3(signature = (n_list, iters = 20, seed = 0))]
    fn train_quantizer(&mut self, n_list: usize, iters: usize, seed: u64) -> PyResult<()> {
        self.inner
            .train_quantizer(QuantizerConfig { n_list, iters, seed })
            .map_err(py_err)?;
        Ok(())
    }

    fn key(&self, id: u64) -> Option<String> {
        self.inner.entry(id).map(|e| e.key.clone())
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.epoch()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A trained checkpoint, optionally paired with a memory index.
#[pyclass(frozen)]
struct Generator {
    model: ragmds_core::Model,
    vocab: ragmds_core::text::Vocabulary,
    index: Option<ragmds_core::index::MemoryIndex>,
    settings: GenerationSettings,
}

#[pymethods]
impl Generator {
    #[new]
    #[pyo3(signature = (checkpoint, index = None))]
    fn new(checkpoint: &str, index: Option<&str>) -> PyResult<Self> {
        let ckpt = load_checkpoint(checkpoint).map_err(py_err)?;
        let index = index
            .map(ragmds_core::index::MemoryIndex::load)
            .transpose()
            .map_err(py_err)?;
        let cfg = &ckpt.meta.config;
        let settings = GenerationSettings {
            top_k: cfg.train.top_k,
            search: cfg.train.search,
            decode: cfg.decode,
            exclude_self: true,
        };
        Ok(Self {
            model: ckpt.model,
            vocab: ckpt.vocab,
            index,
            settings,
        })
    }

    #[pyo3(signature = (abstract_text, ref_abstracts = Vec::new(), id = String::new()))]
    fn generate(&self, py: Python<'_>, abstract_text: &str, ref_abstracts: Vec<String>, id: String) -> PyResult<String> {
        let record = ExampleRecord::new(id, abstract_text, ref_abstracts, "");
        let out = py
            .detach(|| generate_record(&self.model, &self.vocab, self.index.as_ref(), &record, &self.settings))
            .map_err(py_err)?;
        Ok(out.generated)
    }
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F1 as a dict.
#[pyfunction]
fn rouge(candidate: &str, reference: &str) -> std::collections::HashMap<&'static str, f64> {
    let s = score_texts(candidate, reference);
    [("r1", s.r1), ("r2", s.r2), ("rl", s.rl)].into_iter().collect()
}

#[pyfunction]
fn lr_schedule(step: u64, learning_rate: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    let cfg = TrainConfig {
        learning_rate,
        warmup_steps,
        total_steps,
        ..TrainConfig::default()
    };
    ragmds_core::train::lr_schedule(step, &cfg)
}

#[pymodule]
fn ragmds_native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<MemoryIndex>()?;
    m.add_class::<Generator>()?;
    m.add_function(wrap_pyfunction!(rouge, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    Ok(())
}
