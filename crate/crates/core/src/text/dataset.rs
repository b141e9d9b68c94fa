use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One dataset item: a source abstract, the abstracts it cites, and the
/// related-work paragraph to generate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    #[serde(rename = "abstract")]
    pub source_abstract: String,
    pub ref_abstracts: Vec<String>,
    #[serde(rename = "related_work")]
    pub target: String,
}

impl ExampleRecord {
    pub fn new(
        id: impl Into<String>,
        source_abstract: impl Into<String>,
        ref_abstracts: Vec<String>,
        target: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            source_abstract: source_abstract.into(),
            ref_abstracts,
            target: target.into(),
        }
    }

    /// Parses one JSONL line; `line` is 1-based and only used in errors.
    pub fn from_json_line(text: &str, line: usize) -> Result<Self> {
        let schema = |message: String| Error::Schema { line, message };
        let value: Value =
            serde_json::from_str(text).map_err(|e| schema(format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| schema("expected a JSON object".into()))?;
        let string_field = |name: &str| -> Result<String> {
            match obj.get(name) {
                None => Err(schema(format!("missing required field `{name}`"))),
                Some(Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(schema(format!("field `{name}` must be a string"))),
            }
        };
        let id = string_field("id")?;
        let source_abstract = string_field("abstract")?;
        if source_abstract.trim().is_empty() {
            return Err(schema("field `abstract` is empty".into()));
        }
        let target = string_field("related_work")?;
        let refs = match obj.get("ref_abstracts") {
            None => return Err(schema("missing required field `ref_abstracts`".into())),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| schema("field `ref_abstracts` must hold strings".into()))
                })
                .collect::<Result<Vec<_>>>()?,
            Some(_) => return Err(schema("field `ref_abstracts` must be a list".into())),
        };
        Ok(Self {
            id,
            source_abstract,
            ref_abstracts: refs,
            target,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Streams records from a JSONL file in file order. Blank lines are skipped.
pub struct DatasetReader {
    lines: Lines<BufReader<File>>,
    line: usize,
}

impl Iterator for DatasetReader {
    type Item = Result<ExampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line += 1;
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(e.into())),
            };
            if text.trim().is_empty() {
                continue;
            }
            return Some(ExampleRecord::from_json_line(&text, self.line));
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetReader> {
    let file = File::open(path)?;
    Ok(DatasetReader {
        lines: BufReader::new(file).lines(),
        line: 0,
    })
}

/// Reads the whole file, stopping at the first bad line.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<ExampleRecord>> {
    load_dataset(path)?.collect()
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[ExampleRecord]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", r.to_json_line())?;
    }
    w.flush()?;
    Ok(())
}
