use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::index::MemoryIndex;
use crate::model::Model;
use crate::retrieve::SearchMode;
use crate::text::{encode_query, tokenize, ExampleRecord, Vocabulary};
use crate::train::load_checkpoint;

use super::beam::DecodeConfig;
use super::generate::{generate, prepare_context};
use super::rouge::score_texts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub generated: String,
    pub target: String,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    /// Generation hit the length limit without `[EOS]`.
    #[serde(default)]
    pub forced: bool,
}

/// Mean F1 ×100, rounded to one decimal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub forced: usize,
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl EvalReport {
    pub fn from_records(records: &[EvalRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: fn(&EvalRecord) -> f64| round1(100.0 * records.iter().map(f).sum::<f64>() / n);
        Self {
            records: records.len(),
            r1: mean(|r| r.r1),
            r2: mean(|r| r.r2),
            rl: mean(|r| r.rl),
            forced: records.iter().filter(|r| r.forced).count(),
        }
    }
}

/// Retrieval and decoding settings for a generation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationSettings {
    pub top_k: usize,
    pub search: SearchMode,
    pub decode: DecodeConfig,
    /// Skip knowledge-base entries keyed by the record's own id.
    pub exclude_self: bool,
}

/// Generates one record and scores it against its target.
pub fn generate_record(
    model: &Model,
    vocab: &Vocabulary,
    index: Option<&MemoryIndex>,
    record: &ExampleRecord,
    settings: &GenerationSettings,
) -> Result<EvalRecord> {
    let query = encode_query(record, vocab, model.config.max_len);
    let exclusions: HashSet<u64> = match index {
        Some(ix) if settings.exclude_self => ix.id_for_key(&record.id).into_iter().collect(),
        _ => HashSet::new(),
    };
    let context = prepare_context(model, &query, index, settings.top_k, settings.search, &exclusions)?;
    let out = generate(model, &context, &settings.decode)?;
    let generated = vocab.detokenize(out.best.generated());
    // the reference goes through the same tokenizer as generated text
    let reference = tokenize(&record.target).join(" ");
    let s = score_texts(&generated, &reference);
    Ok(EvalRecord {
        id: record.id.clone(),
        generated,
        target: record.target.clone(),
        r1: s.r1,
        r2: s.r2,
        rl: s.rl,
        forced: out.best.forced,
    })
}

/// Generates every record in parallel, keeping input order.
pub fn evaluate_records(
    model: &Model,
    vocab: &Vocabulary,
    index: Option<&MemoryIndex>,
    records: &[ExampleRecord],
    settings: &GenerationSettings,
) -> Result<(Vec<EvalRecord>, EvalReport)> {
    let out: Vec<EvalRecord> = records
        .par_iter()
        .map(|r| generate_record(model, vocab, index, r, settings))
        .collect::<Result<_>>()?;
    let report = EvalReport::from_records(&out);
    Ok((out, report))
}

pub fn write_eval_jsonl(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `<output>.aggregate.json`.
pub fn aggregate_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".aggregate.json");
    PathBuf::from(name)
}

/// Loads a checkpoint and index, generates every record of the dataset and
/// writes per-record JSONL to `output` and the aggregate next to it.
pub fn evaluate(
    dataset: impl AsRef<Path>,
    checkpoint: impl AsRef<Path>,
    index: Option<&Path>,
    output: impl AsRef<Path>,
    decode: Option<DecodeConfig>,
) -> Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let records = crate::text::read_dataset(dataset)?;
    let index = index.map(MemoryIndex::load).transpose()?;
    let cfg = &ckpt.meta.config;
    let settings = GenerationSettings {
        top_k: cfg.train.top_k,
        search: cfg.train.search,
        decode: decode.unwrap_or(cfg.decode),
        exclude_self: true,
    };
    let (out, report) = evaluate_records(&ckpt.model, &ckpt.vocab, index.as_ref(), &records, &settings)?;
    let output = output.as_ref();
    write_eval_jsonl(output, &out)?;
    std::fs::write(aggregate_path(output), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(r1: f64, r2: f64, rl: f64) -> EvalRecord {
        EvalRecord {
            id: "x".into(),
            generated: String::new(),
            target: String::new(),
            r1,
            r2,
            rl,
            forced: false,
        }
    }

    #[test]
    fn report_means_are_percent_with_one_decimal() {
        let r = EvalReport::from_records(&[rec(0.3061, 0.065, 0.1), rec(0.3061, 0.065, 0.2544)]);
        assert_eq!((r.r1, r.r2, r.rl), (30.6, 6.5, 17.7));
        assert_eq!(r.records, 2);
    }

    #[test]
    fn aggregate_sits_next_to_output() {
        assert_eq!(aggregate_path(Path::new("out/eval.jsonl")), PathBuf::from("out/eval.jsonl.aggregate.json"));
    }
}
