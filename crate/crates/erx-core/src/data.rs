//! Task instances, dataset containers and JSONL ingestion.
//!
//! One dataset line is a JSON object:
//! `{"tokens": [..], "label": 0, "rationale": [0,1,..]?, "labels": [..]?,
//!   "group_tags": [..]?, "contrast_of": id?, "perturbation": "kind"?, "id": n?}`
//! `id` defaults to the zero-based line number; `labels` carries per-token
//! classes for token-classification datasets.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub tokens: Vec<String>,
    pub label: usize,
    /// Per-token classes for token-classification mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    /// Binary human rationale; absent means unannotated (all-zeros is a
    /// legal annotation and is kept distinct from absence).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast_of: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<String>,
}

impl Instance {
    pub fn new(tokens: Vec<String>, label: usize) -> Self {
        Instance {
            id: None,
            tokens,
            label,
            labels: None,
            rationale: None,
            group_tags: Vec::new(),
            contrast_of: None,
            perturbation: None,
        }
    }

    pub fn id(&self) -> u64 {
        self.id.expect("instance id assigned at load/generation time")
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(mut instances: Vec<Instance>) -> Self {
        for (i, inst) in instances.iter_mut().enumerate() {
            if inst.id.is_none() {
                inst.id = Some(i as u64);
            }
        }
        Dataset { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn by_id(&self) -> BTreeMap<u64, &Instance> {
        self.instances.iter().map(|i| (i.id(), i)).collect()
    }

    pub fn annotated_ids(&self) -> Vec<u64> {
        self.instances
            .iter()
            .filter(|i| i.rationale.is_some())
            .map(|i| i.id())
            .collect()
    }
}

fn validate_instance(inst: &Instance, line_no: usize) -> std::result::Result<(), String> {
    if inst.tokens.is_empty() {
        return Err(format!("line {line_no}: empty token sequence"));
    }
    if let Some(r) = &inst.rationale {
        if r.len() != inst.tokens.len() {
            return Err(format!(
                "line {line_no}: rationale length {} != token length {}",
                r.len(),
                inst.tokens.len()
            ));
        }
        if r.iter().any(|&b| b > 1) {
            return Err(format!("line {line_no}: rationale values must be 0 or 1"));
        }
    }
    if let Some(l) = &inst.labels {
        if l.len() != inst.tokens.len() {
            return Err(format!(
                "line {line_no}: labels length {} != token length {}",
                l.len(),
                inst.tokens.len()
            ));
        }
    }
    Ok(())
}

/// Parse a JSONL dataset. Malformed lines are collected and reported with
/// their line numbers; any rejection fails the whole ingest.
pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    let mut problems = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        match serde_json::from_str::<Instance>(&line) {
            Ok(mut inst) => match validate_instance(&inst, line_no) {
                Ok(()) => {
                    if inst.id.is_none() {
                        inst.id = Some(idx as u64);
                    }
                    instances.push(inst);
                }
                Err(msg) => problems.push(msg),
            },
            Err(e) => problems.push(format!("line {line_no}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Ingest {
            path: path.display().to_string(),
            details: problems.join("; "),
        });
    }
    Ok(Dataset { instances })
}

pub fn write_jsonl(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for inst in &dataset.instances {
        serde_json::to_writer(&mut file, inst)?;
        file.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Token-string to id mapping. Id 0 is reserved for unknown tokens so a
/// model can score sequences containing vocabulary it never saw in training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl Vocab {
    /// Build from a training set: tokens in first-seen order after the
    /// reserved unknown slot.
    pub fn build(dataset: &Dataset) -> Self {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut index = BTreeMap::new();
        index.insert(UNK_TOKEN.to_string(), 0);
        for inst in &dataset.instances {
            for tok in &inst.tokens {
                if !index.contains_key(tok) {
                    index.insert(tok.clone(), tokens.len());
                    tokens.push(tok.clone());
                }
            }
        }
        Vocab { tokens, index }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(0))
            .collect()
    }
}
