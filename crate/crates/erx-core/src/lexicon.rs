//! Task-level rationale sources: n-gram lexicons matched against instance
//! tokens to produce distantly-supervised human rationales.
//!
//! Matching is exact on lowercased tokens, longest-match-first (3-grams
//! before bigrams before unigrams); overlapping matches union. File format:
//! one entry per line, `ngram<TAB>tag` with tag in {pos, neg, none}.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};

/// How a lexicon match maps to token importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Matched tokens are important, the rest unimportant (sentiment style).
    ImportantIfMatched,
    /// Matched tokens are to be ignored, the rest are important
    /// (hate-speech group-identifier style).
    UnimportantIfMatched,
}

/// Sentiment tag carried by an entry; used only for merge-time conflict
/// resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryTag {
    Pos,
    Neg,
    None,
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    pub name: String,
    pub polarity: Polarity,
    /// Lowercased n-grams (1..=3 tokens) with their tags; keys are unique.
    entries: BTreeMap<Vec<String>, EntryTag>,
}

impl Lexicon {
    pub fn new(
        name: impl Into<String>,
        polarity: Polarity,
        entries: Vec<(Vec<String>, EntryTag)>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidValue {
                what: "lexicon",
                details: "entry set must be nonempty".into(),
            });
        }
        let mut map = BTreeMap::new();
        for (ngram, tag) in entries {
            if ngram.is_empty() || ngram.len() > 3 {
                return Err(Error::InvalidValue {
                    what: "lexicon entry",
                    details: format!("n-gram length {} outside 1..=3", ngram.len()),
                });
            }
            let key: Vec<String> = ngram.iter().map(|t| t.to_lowercase()).collect();
            if let Some(prev) = map.insert(key.clone(), tag) {
                if prev != tag {
                    return Err(Error::InvalidValue {
                        what: "lexicon entry",
                        details: format!(
                            "conflicting tags for {:?}; resolve before construction",
                            key.join(" ")
                        ),
                    });
                }
            }
        }
        Ok(Lexicon { name: name.into(), polarity, entries: map })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, ngram: &[String]) -> bool {
        let key: Vec<String> = ngram.iter().map(|t| t.to_lowercase()).collect();
        self.entries.contains_key(&key)
    }

    /// `ngram<TAB>tag` per line; `#` starts a comment line.
    pub fn load(path: impl AsRef<Path>, name: &str, polarity: Polarity) -> Result<Self> {
        let path = path.as_ref();
        let file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut entries = Vec::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (ngram, tag) = match line.split_once('\t') {
                Some((n, t)) => (n, t.trim()),
                None => (line, "none"),
            };
            let tag = match tag {
                "pos" => EntryTag::Pos,
                "neg" => EntryTag::Neg,
                "none" => EntryTag::None,
                other => {
                    return Err(Error::Ingest {
                        path: path.display().to_string(),
                        details: format!("line {}: unknown tag `{other}`", idx + 1),
                    })
                }
            };
            let toks: Vec<String> = ngram.split_whitespace().map(|s| s.to_string()).collect();
            entries.push((toks, tag));
        }
        Lexicon::new(name, polarity, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (ngram, tag) in &self.entries {
            let tag = match tag {
                EntryTag::Pos => "pos",
                EntryTag::Neg => "neg",
                EntryTag::None => "none",
            };
            out.push_str(&format!("{}\t{}\n", ngram.join(" "), tag));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Positions covered by any matching n-gram span.
    fn membership(&self, tokens: &[String]) -> Vec<bool> {
        let lowered: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
        let mut hit = vec![false; tokens.len()];
        for width in (1..=3usize).rev() {
            if width > tokens.len() {
                continue;
            }
            for start in 0..=tokens.len() - width {
                let window = &lowered[start..start + width];
                if self.entries.contains_key(window) {
                    for h in hit.iter_mut().skip(start).take(width) {
                        *h = true;
                    }
                }
            }
        }
        hit
    }

    /// Distantly-supervised rationale for one instance. Returns `None`
    /// when nothing matches under `ImportantIfMatched` — the training loop
    /// then applies task loss only for that instance.
    pub fn match_tokens(&self, tokens: &[String]) -> Option<Vec<u8>> {
        if tokens.is_empty() {
            return None;
        }
        let hit = self.membership(tokens);
        let any = hit.iter().any(|&h| h);
        match self.polarity {
            Polarity::ImportantIfMatched => {
                if !any {
                    return None;
                }
                Some(hit.iter().map(|&h| h as u8).collect())
            }
            Polarity::UnimportantIfMatched => Some(hit.iter().map(|&h| !h as u8).collect()),
        }
    }

    /// Fraction of instances with at least one matched token.
    pub fn coverage(&self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::InvalidValue {
                what: "coverage",
                details: "dataset must be nonempty".into(),
            });
        }
        let matched = dataset
            .instances
            .iter()
            .filter(|inst| self.membership(&inst.tokens).iter().any(|&h| h))
            .count();
        Ok(matched as f64 / dataset.len() as f64)
    }

    /// Annotate a dataset in place: instances with a match get the lexicon
    /// mask as their rationale, the rest stay unannotated (important-if-
    /// matched) or get the complement mask (unimportant-if-matched).
    pub fn annotate(&self, dataset: &mut Dataset) {
        for inst in &mut dataset.instances {
            inst.rationale = self.match_tokens(&inst.tokens);
        }
    }

    pub fn apply(&self, inst: &Instance) -> Option<Vec<u8>> {
        self.match_tokens(&inst.tokens)
    }
}

/// Union of two lexicons with the same polarity convention; n-grams whose
/// tags conflict across the sources are discarded.
pub fn merge_lexicons(a: &Lexicon, b: &Lexicon) -> Result<Lexicon> {
    if a.polarity != b.polarity {
        return Err(Error::InvalidValue {
            what: "merge_lexicons",
            details: format!(
                "incompatible polarity conventions: {:?} vs {:?}",
                a.polarity, b.polarity
            ),
        });
    }
    let mut merged: BTreeMap<Vec<String>, EntryTag> = a.entries.clone();
    let mut discard = Vec::new();
    for (ngram, tag) in &b.entries {
        match merged.get(ngram) {
            Some(prev) if prev != tag => discard.push(ngram.clone()),
            _ => {
                merged.insert(ngram.clone(), *tag);
            }
        }
    }
    for key in discard {
        merged.remove(&key);
    }
    if merged.is_empty() {
        return Err(Error::InvalidValue {
            what: "merge_lexicons",
            details: "merge discarded every entry".into(),
        });
    }
    Ok(Lexicon {
        name: format!("{}+{}", a.name, b.name),
        polarity: a.polarity,
        entries: merged,
    })
}
