//! Synthetic planted-rationale corpora: a toy sentiment-style task whose
//! gold rationales are exact by construction (the signal tokens causally
//! determine the label), plus distribution-shifted variants, contrast sets
//! and functional test suites built from the same grammar.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::eval::ContrastGroup;
use crate::lexicon::{EntryTag, Lexicon, Polarity};

/// A distractor token injected with label-correlated frequency into the ID
/// training distribution; the planted shortcut ER is meant to suppress.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpuriousSpec {
    pub token: String,
    /// Probability the token appears in a positive-label instance.
    pub positive_rate: f64,
    /// Probability it appears in a negative-label instance.
    pub negative_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Antonym pairs (positive token, negative token); inversion swaps within
    /// a pair, so applying it twice restores the original.
    pub signal_pairs: Vec<(String, String)>,
    pub distractors: Vec<String>,
    pub names: Vec<String>,
    pub numbers: Vec<String>,
    /// Used only by vocabulary functional tests.
    pub intensifiers: Vec<String>,
    /// Used only by robustness functional tests.
    pub punctuation: Vec<String>,
    /// Flips the polarity of the signal token that follows it; reserved for
    /// logic functional tests and never emitted into ID/OOD corpora.
    pub negator: String,
    pub len_range: (usize, usize),
    /// Probability of flipping a generated label (default 0).
    pub label_noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spurious: Option<SpuriousSpec>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        let pairs = [
            ("great", "terrible"),
            ("good", "bad"),
            ("lovely", "awful"),
            ("superb", "dreadful"),
            ("charming", "dire"),
            ("delightful", "horrid"),
            ("brilliant", "abysmal"),
            ("pleasant", "nasty"),
        ];
        TaskSpec {
            signal_pairs: pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            distractors: [
                "the", "a", "movie", "film", "plot", "acting", "scene", "story", "was", "it",
                "cast", "script", "ending", "pace", "music", "set", "tone", "style", "frame",
                "shot", "theme", "cut", "lens", "runtime",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            names: ["anna", "bob", "carol", "david", "erin", "frank", "grace", "henry"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            numbers: ["2", "3", "5", "7", "11", "13", "17", "19"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            intensifiers: ["very", "extremely", "utterly", "quite"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            punctuation: [".", "!", "?", ","].iter().map(|s| s.to_string()).collect(),
            negator: "not".to_string(),
            len_range: (6, 12),
            label_noise: 0.0,
            spurious: None,
        }
    }
}

impl TaskSpec {
    fn signal_tokens(&self) -> BTreeSet<&str> {
        self.signal_pairs
            .iter()
            .flat_map(|(p, n)| [p.as_str(), n.as_str()])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.signal_pairs.is_empty() {
            return Err(Error::Config("task spec needs at least one signal pair".into()));
        }
        if self.distractors.len() < 2 || self.names.len() < 2 || self.numbers.len() < 2 {
            return Err(Error::Config(
                "task spec needs at least two distractors, names and numbers".into(),
            ));
        }
        let (lo, hi) = self.len_range;
        if lo < 4 || hi < lo {
            return Err(Error::Config(format!("bad length range ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label noise must be in [0, 1]".into()));
        }
        let signals = self.signal_tokens();
        let mut others: Vec<&str> = Vec::new();
        others.extend(self.distractors.iter().map(String::as_str));
        others.extend(self.names.iter().map(String::as_str));
        others.extend(self.numbers.iter().map(String::as_str));
        others.extend(self.intensifiers.iter().map(String::as_str));
        others.extend(self.punctuation.iter().map(String::as_str));
        others.push(self.negator.as_str());
        if let Some(sp) = &self.spurious {
            others.push(sp.token.as_str());
            if !(0.0..=1.0).contains(&sp.positive_rate) || !(0.0..=1.0).contains(&sp.negative_rate)
            {
                return Err(Error::Config("spurious rates must be in [0, 1]".into()));
            }
        }
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for tok in others {
            if signals.contains(tok) {
                return Err(Error::Config(format!(
                    "token `{tok}` appears in both signal and non-signal vocab"
                )));
            }
            if !seen.insert(tok) {
                return Err(Error::Config(format!("duplicate non-signal token `{tok}`")));
            }
        }
        Ok(())
    }

    /// The label a majority-polarity reader assigns, honoring negators:
    /// 1 if positive signals outnumber negative ones, 0 for the reverse,
    /// `None` when the tokens leave the label undetermined.
    pub fn label_rule(&self, tokens: &[String]) -> Option<usize> {
        let positives: BTreeSet<&str> =
            self.signal_pairs.iter().map(|(p, _)| p.as_str()).collect();
        let negatives: BTreeSet<&str> =
            self.signal_pairs.iter().map(|(_, n)| n.as_str()).collect();
        let mut score = 0i64;
        let mut any = false;
        let mut negate_next = false;
        for tok in tokens {
            if tok == &self.negator {
                negate_next = true;
                continue;
            }
            let polarity = if positives.contains(tok.as_str()) {
                Some(1i64)
            } else if negatives.contains(tok.as_str()) {
                Some(-1)
            } else {
                None
            };
            if let Some(p) = polarity {
                any = true;
                score += if negate_next { -p } else { p };
            }
            negate_next = false;
        }
        if !any || score == 0 {
            None
        } else {
            Some((score > 0) as usize)
        }
    }

    /// Signal tokens tagged by polarity, importance-if-matched; on this task
    /// lexicon matching reproduces the instance-level gold rationales.
    pub fn task_lexicon(&self) -> Result<Lexicon> {
        let entries = self
            .signal_pairs
            .iter()
            .flat_map(|(p, n)| {
                [
                    (vec![p.clone()], EntryTag::Pos),
                    (vec![n.clone()], EntryTag::Neg),
                ]
            })
            .collect();
        Lexicon::new("task-signal", Polarity::ImportantIfMatched, entries)
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [String]) -> &'a String {
    &pool[rng.gen_range(0..pool.len())]
}

fn pick_different<'a>(rng: &mut ChaCha8Rng, pool: &'a [String], not: &str) -> &'a String {
    loop {
        let cand = pick(rng, pool);
        if cand != not {
            return cand;
        }
    }
}

struct DrawnInstance {
    tokens: Vec<String>,
    rationale: Vec<u8>,
    label: usize,
}

/// Core generator: a balanced label coin, then one or two signal tokens of
/// the label's polarity, the rest distractors. Signal tokens all agree with
/// the label, so the rationale marks exactly the tokens supporting it.
fn draw_instance(
    spec: &TaskSpec,
    rng: &mut ChaCha8Rng,
    forced_label: Option<usize>,
    extra_distractors: usize,
) -> DrawnInstance {
    let label = forced_label.unwrap_or_else(|| rng.gen_range(0..2usize));
    let (lo, hi) = spec.len_range;
    let len = rng.gen_range(lo..=hi) + extra_distractors;
    let signal_count = rng.gen_range(1..=2usize);

    let mut slots: Vec<(String, bool)> = Vec::with_capacity(len);
    for _ in 0..signal_count {
        let pair = &spec.signal_pairs[rng.gen_range(0..spec.signal_pairs.len())];
        let tok = if label == 1 { &pair.0 } else { &pair.1 };
        slots.push((tok.clone(), true));
    }
    while slots.len() < len {
        let roll: f64 = rng.gen();
        let tok = if roll < 0.8 {
            pick(rng, &spec.distractors)
        } else if roll < 0.9 {
            pick(rng, &spec.names)
        } else {
            pick(rng, &spec.numbers)
        };
        slots.push((tok.clone(), false));
    }
    if let Some(sp) = &spec.spurious {
        let rate = if label == 1 { sp.positive_rate } else { sp.negative_rate };
        if rng.gen::<f64>() < rate {
            // Overwrite one non-signal slot so the length stays in range.
            let distractor_slots: Vec<usize> = slots
                .iter()
                .enumerate()
                .filter(|(_, (_, is_signal))| !is_signal)
                .map(|(i, _)| i)
                .collect();
            let at = distractor_slots[rng.gen_range(0..distractor_slots.len())];
            slots[at] = (sp.token.clone(), false);
        }
    }
    slots.shuffle(rng);

    let tokens: Vec<String> = slots.iter().map(|(t, _)| t.clone()).collect();
    let rationale: Vec<u8> = slots.iter().map(|(_, s)| *s as u8).collect();
    let label = if spec.label_noise > 0.0 && rng.gen::<f64>() < spec.label_noise {
        1 - label
    } else {
        label
    };
    DrawnInstance { tokens, rationale, label }
}

/// A labeled corpus with exact gold rationales at the signal positions.
pub fn generate_id_dataset(spec: &TaskSpec, size: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if size == 0 {
        return Err(Error::InvalidValue {
            what: "generate_id_dataset",
            details: "size must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(size);
    for _ in 0..size {
        let drawn = draw_instance(spec, &mut rng, None, 0);
        let mut inst = Instance::new(drawn.tokens, drawn.label);
        inst.rationale = Some(drawn.rationale);
        instances.push(inst);
    }
    Ok(Dataset::new(instances))
}

/// Distribution shifts that leave the signal rule untouched.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OodShift {
    /// Swap in disjoint distractor/name/number vocabularies; the spurious
    /// token disappears with the old distractors.
    NewDistractors {
        distractors: Vec<String>,
        names: Vec<String>,
        numbers: Vec<String>,
    },
    /// Multiply the sequence length range.
    LongerSequences { factor: usize },
    /// Append extra distractor tokens per instance, diluting the signal.
    DistractorRatio { extra: usize },
}

impl OodShift {
    /// A built-in fresh vocabulary for the default task spec.
    pub fn fresh_distractors() -> OodShift {
        OodShift::NewDistractors {
            distractors: [
                "waiter", "menu", "table", "lunch", "dinner", "service", "place", "order",
                "dish", "meal", "staff", "cafe", "venue", "visit", "counter", "soup", "bread",
                "drink", "host", "spot", "corner", "evening", "room", "crowd",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            names: ["iris", "jack", "kate", "liam", "maya", "noah", "olga", "pete"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            numbers: ["4", "6", "8", "9", "12", "21", "23", "29"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OodShift::NewDistractors { .. } => "new_distractors",
            OodShift::LongerSequences { .. } => "longer_sequences",
            OodShift::DistractorRatio { .. } => "distractor_ratio",
        }
    }
}

/// Apply a shift to the task grammar and generate from it. Labels stay governed by
/// the same signal rule; rationales remain exact.
pub fn generate_ood_variant(
    spec: &TaskSpec,
    shift: &OodShift,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut shifted = spec.clone();
    let mut extra = 0usize;
    match shift {
        OodShift::NewDistractors { distractors, names, numbers } => {
            let signals = spec.signal_tokens();
            for tok in distractors.iter().chain(names).chain(numbers) {
                if signals.contains(tok.as_str()) {
                    return Err(Error::Config(format!(
                        "shift must not touch the signal vocab (`{tok}`)"
                    )));
                }
            }
            shifted.distractors = distractors.clone();
            shifted.names = names.clone();
            shifted.numbers = numbers.clone();
            shifted.spurious = None;
        }
        OodShift::LongerSequences { factor } => {
            if *factor == 0 {
                return Err(Error::Config("length factor must be positive".into()));
            }
            shifted.len_range = (spec.len_range.0 * factor, spec.len_range.1 * factor);
            shifted.spurious = None;
        }
        OodShift::DistractorRatio { extra: e } => {
            extra = *e;
            shifted.spurious = None;
        }
    }
    shifted.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(size);
    for _ in 0..size {
        let drawn = draw_instance(&shifted, &mut rng, None, extra);
        let mut inst = Instance::new(drawn.tokens, drawn.label);
        inst.rationale = Some(drawn.rationale);
        instances.push(inst);
    }
    Ok(Dataset::new(instances))
}

fn invert_signals(spec: &TaskSpec, tokens: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    for tok in tokens {
        let mut replaced = None;
        for (p, n) in &spec.signal_pairs {
            if tok == p {
                replaced = Some(n.clone());
                break;
            }
            if tok == n {
                replaced = Some(p.clone());
                break;
            }
        }
        out.push(replaced.unwrap_or_else(|| tok.clone()));
    }
    out
}

/// Contrast instances for a dataset: polarity inversion (label flips),
/// numeric rewrites and entity swaps (label preserved). Perturbations that
/// need a token type the instance lacks are skipped; instances yielding no
/// contrast at all are omitted from the groups.
pub fn generate_contrast_set(
    dataset: &Dataset,
    spec: &TaskSpec,
    seed: u64,
) -> Result<(Dataset, Vec<ContrastGroup>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_id = dataset.instances.iter().map(|i| i.id()).max().unwrap_or(0) + 1;
    let mut all = dataset.instances.clone();
    let mut groups = Vec::new();
    let names: BTreeSet<&str> = spec.names.iter().map(String::as_str).collect();
    let numbers: BTreeSet<&str> = spec.numbers.iter().map(String::as_str).collect();
    let regular: BTreeSet<&str> = spec.distractors.iter().map(String::as_str).collect();

    for inst in &dataset.instances {
        let mut contrasts = Vec::new();

        // Inversion applies to every instance: each signal token swaps with
        // its antonym and the gold label flips.
        {
            let tokens = invert_signals(spec, &inst.tokens);
            let label = 1 - inst.label;
            let mut c = Instance::new(tokens, label);
            c.id = Some(next_id);
            c.rationale = inst.rationale.clone();
            c.contrast_of = Some(inst.id());
            c.perturbation = Some("inversion".into());
            contrasts.push((next_id, label, "inversion".to_string()));
            all.push(c);
            next_id += 1;
        }

        if inst.tokens.iter().any(|t| numbers.contains(t.as_str())) {
            let tokens: Vec<String> = inst
                .tokens
                .iter()
                .map(|t| {
                    if numbers.contains(t.as_str()) {
                        pick_different(&mut rng, &spec.numbers, t).clone()
                    } else {
                        t.clone()
                    }
                })
                .collect();
            let mut c = Instance::new(tokens, inst.label);
            c.id = Some(next_id);
            c.rationale = inst.rationale.clone();
            c.contrast_of = Some(inst.id());
            c.perturbation = Some("number_mod".into());
            contrasts.push((next_id, inst.label, "number_mod".to_string()));
            all.push(c);
            next_id += 1;
        }

        if inst
            .tokens
            .iter()
            .any(|t| names.contains(t.as_str()) || regular.contains(t.as_str()))
        {
            let tokens: Vec<String> = inst
                .tokens
                .iter()
                .map(|t| {
                    if names.contains(t.as_str()) {
                        pick_different(&mut rng, &spec.names, t).clone()
                    } else if regular.contains(t.as_str()) {
                        pick_different(&mut rng, &spec.distractors, t).clone()
                    } else {
                        t.clone()
                    }
                })
                .collect();
            let mut c = Instance::new(tokens, inst.label);
            c.id = Some(next_id);
            c.rationale = inst.rationale.clone();
            c.contrast_of = Some(inst.id());
            c.perturbation = Some("entity_replace".into());
            contrasts.push((next_id, inst.label, "entity_replace".to_string()));
            all.push(c);
            next_id += 1;
        }

        if !contrasts.is_empty() {
            groups.push(ContrastGroup {
                original_id: inst.id(),
                original_gold: inst.label,
                contrasts,
            });
        }
    }
    Ok((Dataset { instances: all }, groups))
}

/// Rebuild contrast groups from a combined JSONL file (originals plus
/// instances whose `contrast_of` points at them).
pub fn contrast_groups_from_dataset(dataset: &Dataset) -> Vec<ContrastGroup> {
    let mut groups: std::collections::BTreeMap<u64, ContrastGroup> = dataset
        .instances
        .iter()
        .filter(|i| i.contrast_of.is_none())
        .map(|i| {
            (
                i.id(),
                ContrastGroup {
                    original_id: i.id(),
                    original_gold: i.label,
                    contrasts: Vec::new(),
                },
            )
        })
        .collect();
    for inst in &dataset.instances {
        if let Some(orig) = inst.contrast_of {
            if let Some(g) = groups.get_mut(&orig) {
                g.contrasts.push((
                    inst.id(),
                    inst.label,
                    inst.perturbation.clone().unwrap_or_default(),
                ));
            }
        }
    }
    groups.into_values().filter(|g| !g.contrasts.is_empty()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FunctionalCategory {
    Vocabulary,
    Robustness,
    Logic,
    Entity,
}

impl FunctionalCategory {
    pub const ALL: [FunctionalCategory; 4] = [
        FunctionalCategory::Vocabulary,
        FunctionalCategory::Robustness,
        FunctionalCategory::Logic,
        FunctionalCategory::Entity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FunctionalCategory::Vocabulary => "Vocabulary",
            FunctionalCategory::Robustness => "Robustness",
            FunctionalCategory::Logic => "Logic",
            FunctionalCategory::Entity => "Entity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        FunctionalCategory::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalSubtest {
    pub name: String,
    /// Labels must not change under the perturbation (robustness/entity
    /// style) as opposed to carrying a transformed expected label.
    pub expected_invariance: bool,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalSuite {
    pub category: FunctionalCategory,
    pub subtests: Vec<FunctionalSubtest>,
}

fn swap_adjacent_chars(token: &str, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = token.chars().collect();
    if chars.len() < 2 {
        return token.to_string();
    }
    let i = rng.gen_range(0..chars.len() - 1);
    let mut out = chars;
    out.swap(i, i + 1);
    out.into_iter().collect()
}

/// Build the four functional categories (two or more subtests each) from the
/// task grammar. Every instance carries its expected gold label.
pub fn generate_functional_suites(
    spec: &TaskSpec,
    per_subtest: usize,
    seed: u64,
) -> Result<Vec<FunctionalSuite>> {
    spec.validate()?;
    if per_subtest == 0 {
        return Err(Error::InvalidValue {
            what: "generate_functional_suites",
            details: "per-subtest size must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives: BTreeSet<&str> = spec.signal_pairs.iter().map(|(p, _)| p.as_str()).collect();
    let negatives: BTreeSet<&str> = spec.signal_pairs.iter().map(|(_, n)| n.as_str()).collect();
    let regular: BTreeSet<&str> = spec.distractors.iter().map(String::as_str).collect();
    let names: BTreeSet<&str> = spec.names.iter().map(String::as_str).collect();
    let numbers: BTreeSet<&str> = spec.numbers.iter().map(String::as_str).collect();
    let is_signal =
        |t: &String| positives.contains(t.as_str()) || negatives.contains(t.as_str());

    let mut make = |f: &mut dyn FnMut(&mut ChaCha8Rng) -> Instance| -> Vec<Instance> {
        (0..per_subtest).map(|_| f(&mut rng)).collect()
    };

    // Vocabulary: add supporting sentiment words / intensifiers.
    let mut add_sentiment = |rng: &mut ChaCha8Rng| -> Instance {
        let d = draw_instance(spec, rng, None, 0);
        let mut tokens = d.tokens;
        for _ in 0..2 {
            let pair = &spec.signal_pairs[rng.gen_range(0..spec.signal_pairs.len())];
            let tok = if d.label == 1 { pair.0.clone() } else { pair.1.clone() };
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, tok);
        }
        Instance::new(tokens, d.label)
    };
    let mut add_intensifier = |rng: &mut ChaCha8Rng| -> Instance {
        let d = draw_instance(spec, rng, None, 0);
        let mut tokens = d.tokens;
        let sig_pos = tokens
            .iter()
            .position(&is_signal)
            .expect("every instance has a signal token");
        tokens.insert(sig_pos, pick(rng, &spec.intensifiers).clone());
        Instance::new(tokens, d.label)
    };

    // Robustness: character-level edits that must not move the label.
    let mut add_typo = |rng: &mut ChaCha8Rng| -> Instance {
        loop {
            let d = draw_instance(spec, rng, None, 0);
            let candidates: Vec<usize> = d
                .tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| regular.contains(t.as_str()) && t.chars().count() >= 3)
                .map(|(i, _)| i)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let mut tokens = d.tokens;
            let at = candidates[rng.gen_range(0..candidates.len())];
            tokens[at] = swap_adjacent_chars(&tokens[at], rng);
            return Instance::new(tokens, d.label);
        }
    };
    let mut add_punct = |rng: &mut ChaCha8Rng| -> Instance {
        let d = draw_instance(spec, rng, None, 0);
        let mut tokens = d.tokens;
        tokens.push(pick(rng, &spec.punctuation).clone());
        Instance::new(tokens, d.label)
    };

    // Logic: a negator before every signal token flips the label.
    let negate = |rng: &mut ChaCha8Rng, from_label: usize| -> Instance {
        let d = draw_instance(spec, rng, Some(from_label), 0);
        let mut tokens = Vec::with_capacity(d.tokens.len() * 2);
        for t in d.tokens {
            if is_signal(&t) {
                tokens.push(spec.negator.clone());
            }
            tokens.push(t);
        }
        Instance::new(tokens, 1 - from_label)
    };
    let mut pos_to_neg = |rng: &mut ChaCha8Rng| negate(rng, 1);
    let mut neg_to_pos = |rng: &mut ChaCha8Rng| negate(rng, 0);

    // Entity: swap planted names/numbers for different ones.
    let mut replace_names = |rng: &mut ChaCha8Rng| -> Instance {
        let mut d = draw_instance(spec, rng, None, 0);
        if !d.tokens.iter().any(|t| names.contains(t.as_str())) {
            // Plant one over a non-signal token.
            let slot = d
                .tokens
                .iter()
                .position(|t| !is_signal(t))
                .expect("generated instances keep at least one distractor");
            d.tokens[slot] = pick(rng, &spec.names).clone();
        }
        let tokens: Vec<String> = d
            .tokens
            .iter()
            .map(|t| {
                if names.contains(t.as_str()) {
                    pick_different(rng, &spec.names, t).clone()
                } else {
                    t.clone()
                }
            })
            .collect();
        Instance::new(tokens, d.label)
    };
    let mut replace_numbers = |rng: &mut ChaCha8Rng| -> Instance {
        let mut d = draw_instance(spec, rng, None, 0);
        if !d.tokens.iter().any(|t| numbers.contains(t.as_str())) {
            let slot = d
                .tokens
                .iter()
                .position(|t| !is_signal(t))
                .expect("generated instances keep at least one distractor");
            d.tokens[slot] = pick(rng, &spec.numbers).clone();
        }
        let tokens: Vec<String> = d
            .tokens
            .iter()
            .map(|t| {
                if numbers.contains(t.as_str()) {
                    pick_different(rng, &spec.numbers, t).clone()
                } else {
                    t.clone()
                }
            })
            .collect();
        Instance::new(tokens, d.label)
    };

    let suites = vec![
        FunctionalSuite {
            category: FunctionalCategory::Vocabulary,
            subtests: vec![
                FunctionalSubtest {
                    name: "add_sentiment_words".into(),
                    expected_invariance: false,
                    instances: make(&mut add_sentiment),
                },
                FunctionalSubtest {
                    name: "add_intensifiers".into(),
                    expected_invariance: false,
                    instances: make(&mut add_intensifier),
                },
            ],
        },
        FunctionalSuite {
            category: FunctionalCategory::Robustness,
            subtests: vec![
                FunctionalSubtest {
                    name: "add_one_typo".into(),
                    expected_invariance: true,
                    instances: make(&mut add_typo),
                },
                FunctionalSubtest {
                    name: "add_punctuation".into(),
                    expected_invariance: true,
                    instances: make(&mut add_punct),
                },
            ],
        },
        FunctionalSuite {
            category: FunctionalCategory::Logic,
            subtests: vec![
                FunctionalSubtest {
                    name: "positive_to_negative".into(),
                    expected_invariance: false,
                    instances: make(&mut pos_to_neg),
                },
                FunctionalSubtest {
                    name: "negative_to_positive".into(),
                    expected_invariance: false,
                    instances: make(&mut neg_to_pos),
                },
            ],
        },
        FunctionalSuite {
            category: FunctionalCategory::Entity,
            subtests: vec![
                FunctionalSubtest {
                    name: "replace_names".into(),
                    expected_invariance: true,
                    instances: make(&mut replace_names),
                },
                FunctionalSubtest {
                    name: "replace_numbers".into(),
                    expected_invariance: true,
                    instances: make(&mut replace_numbers),
                },
            ],
        },
    ];
    Ok(suites)
}

/// Flatten suites into the standard dataset JSONL; category/subtest travel
/// in `group_tags`.
pub fn functional_suites_to_dataset(suites: &[FunctionalSuite]) -> Dataset {
    let mut instances = Vec::new();
    for suite in suites {
        for subtest in &suite.subtests {
            for inst in &subtest.instances {
                let mut inst = inst.clone();
                inst.id = None;
                inst.group_tags = vec![
                    format!("category:{}", suite.category.name()),
                    format!("subtest:{}", subtest.name),
                    format!("invariance:{}", subtest.expected_invariance),
                ];
                instances.push(inst);
            }
        }
    }
    Dataset::new(instances)
}

/// Inverse of [`functional_suites_to_dataset`].
pub fn functional_suites_from_dataset(dataset: &Dataset) -> Result<Vec<FunctionalSuite>> {
    let mut suites: Vec<FunctionalSuite> = Vec::new();
    for inst in &dataset.instances {
        let mut category = None;
        let mut subtest = None;
        let mut invariance = false;
        for tag in &inst.group_tags {
            if let Some(c) = tag.strip_prefix("category:") {
                category = FunctionalCategory::parse(c);
            } else if let Some(s) = tag.strip_prefix("subtest:") {
                subtest = Some(s.to_string());
            } else if let Some(v) = tag.strip_prefix("invariance:") {
                invariance = v == "true";
            }
        }
        let (Some(category), Some(subtest)) = (category, subtest) else {
            return Err(Error::Ingest {
                path: "functional dataset".into(),
                details: format!(
                    "instance {} lacks category/subtest tags",
                    inst.id.unwrap_or_default()
                ),
            });
        };
        let suite = match suites.iter_mut().find(|s| s.category == category) {
            Some(s) => s,
            None => {
                suites.push(FunctionalSuite { category, subtests: Vec::new() });
                suites.last_mut().unwrap()
            }
        };
        let sub = match suite.subtests.iter_mut().find(|s| s.name == subtest) {
            Some(s) => s,
            None => {
                suite.subtests.push(FunctionalSubtest {
                    name: subtest,
                    expected_invariance: invariance,
                    instances: Vec::new(),
                });
                suite.subtests.last_mut().unwrap()
            }
        };
        sub.instances.push(inst.clone());
    }
    Ok(suites)
}
