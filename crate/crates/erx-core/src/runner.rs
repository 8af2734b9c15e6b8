//! Experiment orchestration: configuration, dataset preparation, per-seed
//! training with budgeted rationale annotation, evaluation over the three
//! test families, significance against the task-loss-only baseline, and the
//! four sweep drivers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::criteria::CriterionKind;
use crate::data::{ingest_jsonl, write_jsonl, Dataset, Vocab};
use crate::datagen::{
    self, contrast_groups_from_dataset, functional_suites_from_dataset,
    functional_suites_to_dataset, FunctionalSuite, OodShift, TaskSpec,
};
use crate::error::{Error, Result};
use crate::eval::{self, ContrastGroup, PredictionRow};
use crate::extract::ExtractorKind;
use crate::lexicon::{Lexicon, Polarity};
use crate::model::{
    fit, Checkpoint, EncodedInstance, ErSettings, ModelConfig, ModelParams, TaskMode, TrainConfig,
};
use crate::report::{
    hash_canonical_json, lower_is_better, EvalReport, MetricRow, REPORT_SCHEMA_VERSION,
};
use crate::selection::{self, SelectionManifest, SelectionStrategy};

pub const BASELINE_LABEL: &str = "No-ER";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum RationaleSource {
    /// Use the rationale masks stored in the dataset.
    #[default]
    Instance,
    /// Re-annotate train/dev by lexicon matching; instances without a match
    /// train with task loss only.
    TaskLevel { lexicon: PathBuf, polarity: Polarity },
}

fn default_ood_sets() -> Vec<OodShift> {
    vec![OodShift::fresh_distractors(), OodShift::LongerSequences { factor: 4 }]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub spec: TaskSpec,
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub ood_size: usize,
    pub functional_per_subtest: usize,
    pub shifts: Vec<OodShift>,
    /// Contrast sets are built from the first `contrast_originals` test
    /// instances.
    pub contrast_originals: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            spec: TaskSpec::default(),
            seed: 0,
            train_size: 2000,
            dev_size: 400,
            test_size: 400,
            ood_size: 400,
            functional_per_subtest: 150,
            shifts: default_ood_sets(),
            contrast_originals: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodPath {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataSource {
    Generator(GeneratorConfig),
    Paths {
        train: PathBuf,
        dev: PathBuf,
        test: PathBuf,
        #[serde(default)]
        ood: Vec<OodPath>,
        #[serde(default)]
        contrast: Option<PathBuf>,
        #[serde(default)]
        functional: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Generator(GeneratorConfig::default())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyper {
    pub embed_dim: usize,
    pub n_classes: usize,
    pub max_len: usize,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper { embed_dim: 16, n_classes: 2, max_len: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Model label in reports; derived from extractor+criterion when unset.
    pub label: Option<String>,
    pub mode: TaskMode,
    pub extractor: ExtractorKind,
    pub criterion: CriterionKind,
    pub huber_delta: f64,
    /// Ablation switch: swap the positive-term-only BCE for the standard
    /// two-term form. Off by default.
    pub bce_two_term: bool,
    pub lambda_er: f64,
    pub gamma_er: f64,
    /// Annotation budget in percent of the training set; 0 means No-ER,
    /// 100 uses every available rationale.
    pub budget_k: f64,
    pub selection: SelectionStrategy,
    /// k' for the importance-score strategies.
    pub selection_top_percent: f64,
    pub rationale_source: RationaleSource,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub model: ModelHyper,
    pub train: TrainConfig,
    /// Parallel seed/cell workers.
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: 1,
            label: None,
            mode: TaskMode::Sequence,
            extractor: ExtractorKind::IxG,
            criterion: CriterionKind::Mae,
            huber_delta: 1.0,
            bce_two_term: false,
            lambda_er: 1.0,
            gamma_er: 100.0,
            budget_k: 100.0,
            selection: SelectionStrategy::Random,
            selection_top_percent: 10.0,
            rationale_source: RationaleSource::Instance,
            seeds: vec![0, 1, 2],
            data: DataSource::default(),
            model: ModelHyper::default(),
            train: TrainConfig::default(),
            workers: 3,
            output_dir: PathBuf::from("erx-out"),
        }
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_er < 0.0 {
            return Err(Error::Config("lambda_er must be nonnegative".into()));
        }
        if self.gamma_er <= 0.0 {
            return Err(Error::Config("gamma_er must be positive".into()));
        }
        if self.huber_delta <= 0.0 {
            return Err(Error::Config("huber_delta must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..=100.0).contains(&self.budget_k) {
            return Err(Error::Config("budget_k must lie in [0, 100]".into()));
        }
        if !(self.selection_top_percent > 0.0 && self.selection_top_percent < 100.0) {
            return Err(Error::Config("selection_top_percent must lie in (0, 100)".into()));
        }
        if self.train.batch_size == 0 || self.train.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if let DataSource::Generator(g) = &self.data {
            g.spec.validate()?;
            if g.train_size == 0 || g.dev_size == 0 || g.test_size == 0 {
                return Err(Error::Config("generator sizes must be positive".into()));
            }
        }
        Ok(())
    }

    /// Hash of every semantically meaningful field: output location and
    /// worker count do not affect results and are excluded.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
            map.remove("workers");
        }
        Ok(hash_canonical_json(&v))
    }

    pub fn model_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        if self.lambda_er == 0.0 || self.budget_k == 0.0 {
            return BASELINE_LABEL.to_string();
        }
        format!("{}+{}", self.extractor.name(), self.criterion.name())
    }

    pub fn er_settings(&self) -> Option<ErSettings> {
        if self.lambda_er == 0.0 || self.budget_k == 0.0 {
            return None;
        }
        let criterion = if self.criterion == CriterionKind::Bce && self.bce_two_term {
            CriterionKind::BceTwoTerm
        } else {
            self.criterion
        };
        Some(ErSettings {
            extractor: self.extractor,
            criterion,
            huber_delta: self.huber_delta,
            lambda: self.lambda_er,
            gamma: self.gamma_er,
        })
    }
}

/// Everything loaded or generated for one experiment.
pub struct LoadedData {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub oods: Vec<(String, Dataset)>,
    pub contrast: Option<(Dataset, Vec<ContrastGroup>)>,
    pub functional: Option<Vec<FunctionalSuite>>,
    /// Lexicon emitted by the generator, usable as a task-level source.
    pub lexicon_path: Option<PathBuf>,
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Generate the corpus files for a generator config. Deterministic per
/// seed, so regeneration overwrites with identical bytes.
pub fn generate_corpus(g: &GeneratorConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let train = datagen::generate_id_dataset(&g.spec, g.train_size, g.seed)?;
    let dev = datagen::generate_id_dataset(&g.spec, g.dev_size, g.seed.wrapping_add(1))?;
    let test = datagen::generate_id_dataset(&g.spec, g.test_size, g.seed.wrapping_add(2))?;
    write_jsonl(dir.join("train.jsonl"), &train)?;
    write_jsonl(dir.join("dev.jsonl"), &dev)?;
    write_jsonl(dir.join("test.jsonl"), &test)?;

    for (i, shift) in g.shifts.iter().enumerate() {
        let ood = datagen::generate_ood_variant(
            &g.spec,
            shift,
            g.ood_size,
            g.seed.wrapping_add(10 + i as u64),
        )?;
        write_jsonl(dir.join(format!("ood_{}.jsonl", shift.name())), &ood)?;
    }

    let originals = Dataset::new(
        test.instances
            .iter()
            .take(g.contrast_originals.min(test.len()))
            .cloned()
            .collect(),
    );
    let (combined, _groups) =
        datagen::generate_contrast_set(&originals, &g.spec, g.seed.wrapping_add(50))?;
    write_jsonl(dir.join("contrast.jsonl"), &combined)?;

    let suites = datagen::generate_functional_suites(
        &g.spec,
        g.functional_per_subtest,
        g.seed.wrapping_add(60),
    )?;
    write_jsonl(dir.join("functional.jsonl"), &functional_suites_to_dataset(&suites))?;

    g.spec.task_lexicon()?.save(dir.join("task_lexicon.tsv"))?;
    Ok(())
}

/// Materialize the data source. Generated corpora are written under
/// `<out>/data` and read back like any external dataset.
pub fn prepare_data(cfg: &RunConfig) -> Result<LoadedData> {
    let (train, dev, test, ood_paths, contrast, functional, lexicon_path) = match &cfg.data {
        DataSource::Generator(g) => {
            let dir = cfg.output_dir.join("data");
            generate_corpus(g, &dir)?;
            let oods: Vec<OodPath> = g
                .shifts
                .iter()
                .map(|s| OodPath {
                    name: s.name().to_string(),
                    path: dir.join(format!("ood_{}.jsonl", s.name())),
                })
                .collect();
            (
                dir.join("train.jsonl"),
                dir.join("dev.jsonl"),
                dir.join("test.jsonl"),
                oods,
                Some(dir.join("contrast.jsonl")),
                Some(dir.join("functional.jsonl")),
                Some(dir.join("task_lexicon.tsv")),
            )
        }
        DataSource::Paths { train, dev, test, ood, contrast, functional } => (
            train.clone(),
            dev.clone(),
            test.clone(),
            ood.clone(),
            contrast.clone(),
            functional.clone(),
            None,
        ),
    };

    let train = ingest_jsonl(&train)?;
    let dev = ingest_jsonl(&dev)?;
    let test = ingest_jsonl(&test)?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("train and dev sets must be nonempty".into()));
    }
    let mut oods = Vec::new();
    for p in ood_paths {
        oods.push((p.name, ingest_jsonl(&p.path)?));
    }
    let contrast = match contrast {
        Some(p) => {
            let ds = ingest_jsonl(&p)?;
            let groups = contrast_groups_from_dataset(&ds);
            Some((ds, groups))
        }
        None => None,
    };
    let functional = match functional {
        Some(p) => Some(functional_suites_from_dataset(&ingest_jsonl(&p)?)?),
        None => None,
    };
    Ok(LoadedData { train, dev, test, oods, contrast, functional, lexicon_path })
}

fn encode_dataset(ds: &Dataset, vocab: &Vocab, mode: TaskMode) -> Result<Vec<EncodedInstance>> {
    ds.instances
        .iter()
        .map(|inst| {
            let targets = match mode {
                TaskMode::Sequence => vec![inst.label],
                TaskMode::Token => inst.labels.clone().ok_or(Error::Config(format!(
                    "token mode needs per-token labels (instance {})",
                    inst.id()
                )))?,
            };
            Ok(EncodedInstance {
                id: inst.id(),
                token_ids: vocab.encode(&inst.tokens),
                targets,
                rationale: inst.rationale.clone(),
            })
        })
        .collect()
}

/// Swap in the configured rationale source. Instance-level keeps the stored
/// masks; task-level replaces them with lexicon matches.
fn apply_rationale_source(ds: &Dataset, source: &RationaleSource) -> Result<Dataset> {
    match source {
        RationaleSource::Instance => Ok(ds.clone()),
        RationaleSource::TaskLevel { lexicon, polarity } => {
            let lex = Lexicon::load(lexicon, "task-level", *polarity)?;
            let mut out = ds.clone();
            lex.annotate(&mut out);
            Ok(out)
        }
    }
}

/// Per-seed evaluation results, keyed (dataset, metric) in insertion order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SeedEval {
    pub metrics: Vec<(String, String, f64)>,
    /// "Category/subtest" → failure rate.
    pub subtest_failures: Vec<(String, f64)>,
}

/// All seeds of one model.
#[derive(Debug, Clone)]
pub struct ModelRuns {
    pub label: String,
    pub evals: Vec<SeedEval>,
}

fn predict_dataset(
    params: &ModelParams,
    vocab: &Vocab,
    ds: &Dataset,
    split: &str,
) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::with_capacity(ds.len());
    for inst in &ds.instances {
        let trace = params.forward(&vocab.encode(&inst.tokens))?;
        rows.push(PredictionRow {
            instance_id: inst.id(),
            gold: inst.label,
            pred: trace.predicted_class(),
            split: split.to_string(),
            group_tags: inst.group_tags.clone(),
        });
    }
    Ok(rows)
}

/// Evaluate one trained model over every test family. Prediction tables are
/// written under `pred_dir` when given.
pub fn evaluate_params(
    params: &ModelParams,
    vocab: &Vocab,
    data: &LoadedData,
    pred_dir: Option<&Path>,
    tag: &str,
) -> Result<SeedEval> {
    let mut out = SeedEval::default();
    let dump = |split: &str, rows: &[PredictionRow]| -> Result<()> {
        if let Some(dir) = pred_dir {
            ensure_dir(dir)?;
            eval::write_prediction_csv(dir.join(format!("{tag}_{split}.csv")), rows)?;
        }
        Ok(())
    };

    let plain = |name: &str, ds: &Dataset, out: &mut SeedEval| -> Result<()> {
        let rows = predict_dataset(params, vocab, ds, name)?;
        let preds: Vec<usize> = rows.iter().map(|r| r.pred).collect();
        let gold: Vec<usize> = rows.iter().map(|r| r.gold).collect();
        out.metrics
            .push((name.to_string(), "accuracy".into(), eval::accuracy(&preds, &gold)?));
        out.metrics
            .push((name.to_string(), "macro_f1".into(), eval::macro_f1(&preds, &gold)?));
        if rows.iter().any(|r| !r.group_tags.is_empty()) {
            if let Ok(f) = eval::fprd(&rows) {
                out.metrics.push((name.to_string(), "fprd".into(), f.value));
            }
        }
        dump(name, &rows)
    };

    plain("id_test", &data.test, &mut out)?;
    for (name, ds) in &data.oods {
        plain(&format!("ood_{name}"), ds, &mut out)?;
    }

    if let Some((ds, groups)) = &data.contrast {
        let rows = predict_dataset(params, vocab, ds, "contrast")?;
        let by_id: BTreeMap<u64, usize> =
            rows.iter().map(|r| (r.instance_id, r.pred)).collect();
        let report = eval::contrast_consistency(groups, &by_id)?;
        out.metrics
            .push(("contrast".into(), "original_acc".into(), report.original_acc));
        out.metrics
            .push(("contrast".into(), "contrast_acc".into(), report.contrast_acc));
        out.metrics
            .push(("contrast".into(), "consistency".into(), report.consistency));
        dump("contrast", &rows)?;
    }

    if let Some(suites) = &data.functional {
        for suite in suites {
            for sub in &suite.subtests {
                let ds = Dataset::new(sub.instances.clone());
                let rows = predict_dataset(params, vocab, &ds, &sub.name)?;
                let preds: Vec<usize> = rows.iter().map(|r| r.pred).collect();
                let gold: Vec<usize> = rows.iter().map(|r| r.gold).collect();
                let rate = eval::failure_rate(&preds, &gold)?;
                out.subtest_failures
                    .push((format!("{}/{}", suite.category.name(), sub.name), rate));
            }
        }
    }
    Ok(out)
}

/// Run one closure per seed on up to `workers` threads, preserving order.
fn per_seed<T, F>(seeds: &[u64], workers: usize, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync,
{
    let n = seeds.len();
    let workers = workers.clamp(1, n.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i, seeds[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|o| o.expect("every seed slot filled"))
        .collect()
}

/// Shared context for one experiment or sweep: prepared data, vocabulary,
/// and the per-seed task-loss-only baselines everything is compared to.
pub struct Workbench {
    pub cfg: RunConfig,
    pub config_hash: String,
    pub data: LoadedData,
    pub vocab: Vocab,
    pub baselines: Vec<ModelParams>,
    pub baseline_runs: ModelRuns,
    pub flags: Vec<String>,
}

impl Workbench {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            embed_dim: self.cfg.model.embed_dim,
            n_classes: self.cfg.model.n_classes,
            mode: self.cfg.mode,
            max_len: self.cfg.model.max_len,
        }
    }

    /// Prepare data, build the vocabulary, and train + evaluate the No-ER
    /// baseline for every seed.
    pub fn build(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let config_hash = cfg.hash()?;
        ensure_dir(&cfg.output_dir)?;
        let data = prepare_data(&cfg)?;
        let vocab = Vocab::build(&data.train);
        let model_cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: cfg.model.embed_dim,
            n_classes: cfg.model.n_classes,
            mode: cfg.mode,
            max_len: cfg.model.max_len,
        };
        let train_enc = encode_dataset(&data.train, &vocab, cfg.mode)?;
        let dev_enc = encode_dataset(&data.dev, &vocab, cfg.mode)?;
        let ckpt_dir = cfg.output_dir.join("checkpoints");
        ensure_dir(&ckpt_dir)?;
        let pred_dir = cfg.output_dir.join("predictions");

        let results = per_seed(&cfg.seeds, cfg.workers, |_, seed| {
            let init = ModelParams::init(model_cfg, seed);
            let (params, _log) = fit(init, &train_enc, &dev_enc, None, &cfg.train, seed)?;
            let tag = format!("{}_seed{}", BASELINE_LABEL.replace([' ', '/'], "_"), seed);
            let eval = evaluate_params(&params, &vocab, &data, Some(&pred_dir), &tag)?;
            Checkpoint::from_params(&params, &vocab, &config_hash)
                .save(ckpt_dir.join(format!("{tag}.json")))?;
            Ok((params, eval))
        });

        let mut baselines = Vec::new();
        let mut evals = Vec::new();
        let mut failures = Vec::new();
        for (seed, r) in cfg.seeds.iter().zip(results) {
            match r {
                Ok((params, eval)) => {
                    baselines.push(params);
                    evals.push(eval);
                }
                Err(e) => failures.push(format!("{BASELINE_LABEL} seed {seed} failed: {e}")),
            }
        }
        if evals.is_empty() {
            return Err(Error::Run(format!(
                "every baseline seed failed: {}",
                failures.join("; ")
            )));
        }
        Ok(Workbench {
            config_hash,
            baseline_runs: ModelRuns { label: BASELINE_LABEL.into(), evals },
            baselines,
            data,
            vocab,
            cfg,
            flags: failures,
        })
    }

    /// Pick the annotated subset for one budget/strategy. Ranked strategies
    /// aggregate scores over the per-seed baselines and share one subset;
    /// random sampling draws one subset per seed.
    fn budget_subsets(
        &self,
        train_enc: &[EncodedInstance],
        budget_k: f64,
        strategy: SelectionStrategy,
        k_prime: f64,
        gamma: f64,
    ) -> Result<Vec<Vec<u64>>> {
        let eligible: Vec<&EncodedInstance> =
            train_enc.iter().filter(|e| e.rationale.is_some()).collect();
        if eligible.is_empty() {
            return Err(Error::Config(
                "no training instance carries a rationale under the configured source".into(),
            ));
        }
        let ids: Vec<u64> = eligible.iter().map(|e| e.id).collect();
        if budget_k >= 100.0 {
            return Ok(vec![ids; self.cfg.seeds.len()]);
        }
        match strategy {
            SelectionStrategy::Random => self
                .cfg
                .seeds
                .iter()
                .map(|&s| selection::select(None, &ids, strategy, budget_k, s))
                .collect(),
            ranked => {
                let owned: Vec<EncodedInstance> =
                    eligible.iter().map(|e| (*e).clone()).collect();
                let scores =
                    selection::score_instances(&self.baselines, &owned, ranked, k_prime, gamma)?;
                let picked = selection::select(Some(&scores), &ids, ranked, budget_k, 0)?;
                Ok(vec![picked; self.cfg.seeds.len()])
            }
        }
    }

    /// Train and evaluate one ER configuration against this workbench.
    /// Failing seeds are recorded in `failures` and skipped; the cell only
    /// errors when no seed survives.
    pub fn run_cell(&self, cell: &CellSpec, failures: &mut Vec<String>) -> Result<ModelRuns> {
        let er = cell.er.clone();
        let train_ds = apply_rationale_source(&self.data.train, &cell.rationale_source)?;
        let dev_ds = apply_rationale_source(&self.data.dev, &cell.rationale_source)?;
        let train_enc = encode_dataset(&train_ds, &self.vocab, self.cfg.mode)?;
        let dev_enc = encode_dataset(&dev_ds, &self.vocab, self.cfg.mode)?;

        let subsets = self.budget_subsets(
            &train_enc,
            cell.budget_k,
            cell.selection,
            self.cfg.selection_top_percent,
            er.as_ref().map_or(self.cfg.gamma_er, |e| e.gamma),
        )?;
        let sel_dir = self.cfg.output_dir.join("selection");
        ensure_dir(&sel_dir)?;
        let safe = cell.label.replace(['+', ' ', '/', '%', '(', ')'], "_");
        for (seed, subset) in self.cfg.seeds.iter().zip(&subsets) {
            SelectionManifest {
                strategy: cell.selection.name().into(),
                k: cell.budget_k,
                seed: *seed,
                selected_ids: subset.clone(),
            }
            .save(sel_dir.join(format!("{safe}_seed{seed}.json")))?;
        }

        let model_cfg = self.model_config();
        let ckpt_dir = self.cfg.output_dir.join("checkpoints");
        ensure_dir(&ckpt_dir)?;
        let pred_dir = self.cfg.output_dir.join("predictions");
        let results = per_seed(&self.cfg.seeds, self.cfg.workers, |i, seed| {
            let keep: std::collections::BTreeSet<u64> = subsets[i].iter().copied().collect();
            let train_masked: Vec<EncodedInstance> = train_enc
                .iter()
                .map(|e| {
                    let mut e = e.clone();
                    if !keep.contains(&e.id) {
                        e.rationale = None;
                    }
                    e
                })
                .collect();
            let init = ModelParams::init(model_cfg, seed);
            let (params, _log) =
                fit(init, &train_masked, &dev_enc, er.as_ref(), &self.cfg.train, seed)?;
            let tag = format!("{safe}_seed{seed}");
            let eval = evaluate_params(&params, &self.vocab, &self.data, Some(&pred_dir), &tag)?;
            Checkpoint::from_params(&params, &self.vocab, &self.config_hash)
                .save(ckpt_dir.join(format!("{tag}.json")))?;
            Ok(eval)
        });

        collect_runs(&cell.label, &self.cfg.seeds, results, failures)
    }
}

/// Partition per-seed outcomes: surviving seeds form the model's runs,
/// failures become report flags. Only a model with zero surviving seeds
/// aborts the experiment outright.
fn collect_runs(
    label: &str,
    seeds: &[u64],
    results: Vec<Result<SeedEval>>,
    failures: &mut Vec<String>,
) -> Result<ModelRuns> {
    let mut evals = Vec::new();
    let mut local = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(e) => evals.push(e),
            Err(e) => local.push(format!("{label} seed {seed} failed: {e}")),
        }
    }
    if evals.is_empty() {
        return Err(Error::Run(format!(
            "every seed of {label} failed: {}",
            local.join("; ")
        )));
    }
    failures.extend(local);
    Ok(ModelRuns { label: label.to_string(), evals })
}

/// One trained configuration inside a sweep.
#[derive(Debug, Clone)]
pub struct CellSpec {
    pub label: String,
    pub er: Option<ErSettings>,
    pub budget_k: f64,
    pub selection: SelectionStrategy,
    pub rationale_source: RationaleSource,
}

impl CellSpec {
    fn from_config(cfg: &RunConfig) -> Self {
        CellSpec {
            label: cfg.model_label(),
            er: cfg.er_settings(),
            budget_k: cfg.budget_k,
            selection: cfg.selection,
            rationale_source: cfg.rationale_source.clone(),
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let (mean, var) = crate::stats::mean_var(values);
    if values.len() < 2 {
        (mean, None)
    } else {
        (mean, Some(var.sqrt()))
    }
}

/// Build report rows for a set of models (baseline first). Significance is
/// one-sided Welch against the baseline, oriented so a flag always means
/// improvement; normalized failure rates are min-max scaled across exactly
/// this model set.
pub fn assemble_report(
    config_hash: &str,
    seeds: &[u64],
    models: &[ModelRuns],
    mut flags: Vec<String>,
) -> EvalReport {
    let baseline = &models[0];
    let mut rows = Vec::new();

    let collect = |runs: &ModelRuns, dataset: &str, metric: &str| -> Vec<f64> {
        runs.evals
            .iter()
            .filter_map(|e| {
                e.metrics
                    .iter()
                    .find(|(d, m, _)| d == dataset && m == metric)
                    .map(|(_, _, v)| *v)
            })
            .collect()
    };

    // (dataset, metric) keys in baseline insertion order: seen metrics come
    // first because evaluation registers id_test before the OOD families.
    let keys: Vec<(String, String)> = baseline
        .evals
        .first()
        .map(|e| {
            e.metrics
                .iter()
                .map(|(d, m, _)| (d.clone(), m.clone()))
                .collect()
        })
        .unwrap_or_default();

    for runs in models {
        let is_baseline = runs.label == baseline.label;
        for (dataset, metric) in &keys {
            let per_seed = collect(runs, dataset, metric);
            if per_seed.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&per_seed);
            let (p_value, significant) = if is_baseline {
                (None, None)
            } else {
                let base_vals = collect(baseline, dataset, metric);
                welch_flag(&per_seed, &base_vals, lower_is_better(metric), &mut flags, || {
                    format!("{}:{dataset}:{metric}", runs.label)
                })
            };
            rows.push(MetricRow {
                model: runs.label.clone(),
                dataset: dataset.clone(),
                metric: metric.clone(),
                mean,
                std,
                per_seed,
                p_value,
                significant,
            });
        }
    }

    // Functional tests: raw failure rates per subtest, min-max normalized
    // rates across the compared models, category means, and the overall
    // mean normalized failure rate.
    let subtest_keys: Vec<String> = baseline
        .evals
        .first()
        .map(|e| e.subtest_failures.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    if !subtest_keys.is_empty() {
        let failure_of = |runs: &ModelRuns, key: &str| -> Vec<f64> {
            runs.evals
                .iter()
                .filter_map(|e| {
                    e.subtest_failures
                        .iter()
                        .find(|(k, _)| k == key)
                        .map(|(_, v)| *v)
                })
                .collect()
        };
        let mut normalized_per_model: Vec<Vec<f64>> = vec![Vec::new(); models.len()];
        for key in &subtest_keys {
            let mut means = Vec::new();
            for (mi, runs) in models.iter().enumerate() {
                let per_seed = failure_of(runs, key);
                let (mean, std) = mean_std(&per_seed);
                means.push(mean);
                let (p_value, significant) = if mi == 0 {
                    (None, None)
                } else {
                    let base_vals = failure_of(baseline, key);
                    welch_flag(&per_seed, &base_vals, true, &mut flags, || {
                        format!("{}:{key}", runs.label)
                    })
                };
                rows.push(MetricRow {
                    model: runs.label.clone(),
                    dataset: format!("functional/{key}"),
                    metric: "failure_rate".into(),
                    mean,
                    std,
                    per_seed,
                    p_value,
                    significant,
                });
            }
            if models.len() >= 2 {
                let norm = eval::normalize_failure_rates(&means)
                    .expect("two or more models checked above");
                for (mi, v) in norm.iter().enumerate() {
                    normalized_per_model[mi].push(*v);
                    rows.push(MetricRow {
                        model: models[mi].label.clone(),
                        dataset: format!("functional/{key}"),
                        metric: "normalized_failure_rate".into(),
                        mean: *v,
                        std: None,
                        per_seed: vec![],
                        p_value: None,
                        significant: None,
                    });
                }
            }
        }
        if models.len() >= 2 {
            // Category-level and overall means of the normalized rates.
            let categories: Vec<String> = {
                let mut cats = Vec::new();
                for key in &subtest_keys {
                    let cat = key.split('/').next().unwrap_or(key).to_string();
                    if !cats.contains(&cat) {
                        cats.push(cat);
                    }
                }
                cats
            };
            for (mi, runs) in models.iter().enumerate() {
                for cat in &categories {
                    let vals: Vec<f64> = subtest_keys
                        .iter()
                        .zip(&normalized_per_model[mi])
                        .filter(|(k, _)| k.starts_with(cat.as_str()))
                        .map(|(_, v)| *v)
                        .collect();
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    rows.push(MetricRow {
                        model: runs.label.clone(),
                        dataset: format!("functional/{cat}"),
                        metric: "normalized_failure_rate".into(),
                        mean,
                        std: None,
                        per_seed: vec![],
                        p_value: None,
                        significant: None,
                    });
                }
                let all = &normalized_per_model[mi];
                let mean = all.iter().sum::<f64>() / all.len() as f64;
                rows.push(MetricRow {
                    model: runs.label.clone(),
                    dataset: "functional".into(),
                    metric: "mean_normalized_failure_rate".into(),
                    mean,
                    std: None,
                    per_seed: vec![],
                    p_value: None,
                    significant: None,
                });
            }
        }
    }

    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        baseline_model: baseline.label.clone(),
        models: models.iter().map(|m| m.label.clone()).collect(),
        seeds: seeds.to_vec(),
        rows,
        flags,
    }
}

fn welch_flag(
    model_vals: &[f64],
    base_vals: &[f64],
    lower_better: bool,
    flags: &mut Vec<String>,
    context: impl Fn() -> String,
) -> (Option<f64>, Option<bool>) {
    if model_vals.len() < 2 || base_vals.len() < 2 {
        return (None, None);
    }
    let (a, b) = if lower_better {
        (base_vals, model_vals)
    } else {
        (model_vals, base_vals)
    };
    match eval::welch_t_test(a, b) {
        Ok(r) => (Some(r.p_value), Some(r.significant)),
        Err(_) => {
            flags.push(format!(
                "{}: degenerate variance, significance not computed",
                context()
            ));
            (None, None)
        }
    }
}

/// Persist the report JSON, CSV and rendered table under the output dir.
pub fn write_report(cfg: &RunConfig, report: &EvalReport) -> Result<()> {
    report.save_json(cfg.output_dir.join("report.json"))?;
    report.save_csv(cfg.output_dir.join("report.csv"))?;
    let summary = summary_view(report);
    std::fs::write(
        cfg.output_dir.join("report.txt"),
        crate::report::render_table(&summary),
    )
    .map_err(|e| Error::io(cfg.output_dir.display().to_string(), e))?;
    Ok(())
}

/// Table view without the per-subtest rows (they stay in the CSV/JSON).
pub fn summary_view(report: &EvalReport) -> EvalReport {
    let mut out = report.clone();
    out.rows.retain(|r| r.dataset.matches('/').count() < 2);
    out
}

/// Train and evaluate one configuration (plus its baseline when the config
/// itself is an ER model) and write the report artifacts.
pub fn run_experiment(cfg: &RunConfig) -> Result<EvalReport> {
    let bench = Workbench::build(cfg.clone())?;
    let mut failures = bench.flags.clone();
    let mut models = vec![bench.baseline_runs.clone()];
    if cfg.er_settings().is_some() {
        models.push(bench.run_cell(&CellSpec::from_config(cfg), &mut failures)?);
    }
    let partial = !failures.is_empty();
    let report = assemble_report(&bench.config_hash, &cfg.seeds, &models, failures);
    write_report(cfg, &report)?;
    if partial {
        return Err(Error::Run(format!(
            "partial report written to {}: {}",
            cfg.output_dir.display(),
            report.flags.join("; ")
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResearchQuestion {
    Rq1,
    Rq2,
    Rq3,
    Rq4,
}

impl std::str::FromStr for ResearchQuestion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rq1" | "1" => Ok(ResearchQuestion::Rq1),
            "rq2" | "2" => Ok(ResearchQuestion::Rq2),
            "rq3" | "3" => Ok(ResearchQuestion::Rq3),
            "rq4" | "4" => Ok(ResearchQuestion::Rq4),
            other => Err(Error::Config(format!("unknown research question `{other}`"))),
        }
    }
}

/// Instance-count schedule for the annotation-budget trade-off driver,
/// reinterpreted over the synthetic corpus: an initial pool of 1000 labeled
/// instances, then each arm spends its budget on new labels, on rationales
/// for existing instances, or on both.
pub const RQ4_INIT_POOL: usize = 1000;
pub const RQ4_LABEL_ONLY: [usize; 5] = [4, 13, 128, 615, 1229];
pub const RQ4_EXPL_ONLY: [usize; 5] = [5, 16, 163, 783, 1556];
pub const RQ4_LABEL_EXPL: [usize; 5] = [2, 7, 68, 328, 657];
pub const RQ4_BUDGET_NAMES: [&str; 5] = ["10min", "30min", "5hr", "24hr", "48hr"];

/// Expand a research question into its sweep cells and run them against a
/// shared baseline. RQ4 has bespoke data handling and its own path.
pub fn run_sweep(cfg: &RunConfig, rq: ResearchQuestion, extractors: &[ExtractorKind]) -> Result<EvalReport> {
    if rq == ResearchQuestion::Rq4 {
        return run_rq4(cfg);
    }
    let bench = Workbench::build(cfg.clone())?;
    let mut cells = Vec::new();
    match rq {
        ResearchQuestion::Rq1 => {
            for &ext in extractors {
                for crit in CriterionKind::ALL {
                    let mut c = cfg.clone();
                    c.extractor = ext;
                    c.criterion = crit;
                    c.budget_k = 100.0;
                    c.label = Some(format!("{}+{}", ext.name(), crit.name()));
                    cells.push(CellSpec::from_config(&c));
                }
            }
        }
        ResearchQuestion::Rq2 => {
            let lexicon = match (&cfg.rationale_source, &bench.data.lexicon_path) {
                (RationaleSource::TaskLevel { lexicon, .. }, _) => lexicon.clone(),
                (_, Some(p)) => p.clone(),
                (_, None) => {
                    return Err(Error::Config(
                        "rq2 needs a task-level lexicon (generator provides one)".into(),
                    ))
                }
            };
            for &ext in extractors {
                for crit in [CriterionKind::Mae, CriterionKind::Huber] {
                    for task_level in [false, true] {
                        let mut c = cfg.clone();
                        c.extractor = ext;
                        c.criterion = crit;
                        c.budget_k = 100.0;
                        c.rationale_source = if task_level {
                            RationaleSource::TaskLevel {
                                lexicon: lexicon.clone(),
                                polarity: Polarity::ImportantIfMatched,
                            }
                        } else {
                            RationaleSource::Instance
                        };
                        let kind = if task_level { "task" } else { "instance" };
                        c.label =
                            Some(format!("{}+{} ({kind})", ext.name(), crit.name()));
                        cells.push(CellSpec::from_config(&c));
                    }
                }
            }
        }
        ResearchQuestion::Rq3 => {
            for budget in [5.0, 15.0, 50.0] {
                for strategy in SelectionStrategy::ALL {
                    let mut c = cfg.clone();
                    c.extractor = ExtractorKind::IxG;
                    c.criterion = CriterionKind::Mae;
                    c.budget_k = budget;
                    c.selection = strategy;
                    c.label =
                        Some(format!("IxG+MAE k={budget}% {}", strategy.name()));
                    cells.push(CellSpec::from_config(&c));
                }
            }
            // Full-budget reference point.
            let mut c = cfg.clone();
            c.extractor = ExtractorKind::IxG;
            c.criterion = CriterionKind::Mae;
            c.budget_k = 100.0;
            c.label = Some("IxG+MAE k=100%".into());
            cells.push(CellSpec::from_config(&c));
        }
        ResearchQuestion::Rq4 => unreachable!(),
    }

    let mut failures = bench.flags.clone();
    let mut models = vec![bench.baseline_runs.clone()];
    for cell in &cells {
        models.push(bench.run_cell(cell, &mut failures)?);
    }
    let partial = !failures.is_empty();
    let report = assemble_report(&bench.config_hash, &cfg.seeds, &models, failures);
    write_report(cfg, &report)?;
    if partial {
        return Err(Error::Run(format!(
            "partial report written to {}: {}",
            cfg.output_dir.display(),
            report.flags.join("; ")
        )));
    }
    Ok(report)
}

/// RQ4: trade labels against rationales at matched annotation-time budgets.
fn run_rq4(cfg: &RunConfig) -> Result<EvalReport> {
    let needed = RQ4_INIT_POOL + RQ4_EXPL_ONLY[RQ4_EXPL_ONLY.len() - 1];
    if let DataSource::Generator(g) = &cfg.data {
        if g.train_size < needed {
            return Err(Error::Config(format!(
                "rq4 needs a training pool of at least {needed} instances"
            )));
        }
    }
    let bench = {
        // The shared baseline ("0 min") trains on the initial pool only, so
        // build the workbench by hand instead of using the full train set.
        let mut c = cfg.clone();
        c.label = Some("None (0min)".into());
        Workbench::build_with_train_filter(c, |idx, _| idx < RQ4_INIT_POOL)?
    };
    let full_train = &bench.data.train;
    if full_train.len() < needed {
        return Err(Error::Config(format!(
            "rq4 needs a training pool of at least {needed} instances"
        )));
    }

    let er = ErSettings {
        extractor: ExtractorKind::IxG,
        criterion: CriterionKind::Mae,
        huber_delta: cfg.huber_delta,
        lambda: if cfg.lambda_er > 0.0 { cfg.lambda_er } else { 1.0 },
        gamma: cfg.gamma_er,
    };

    let mut failures = bench.flags.clone();
    let mut models = vec![bench.baseline_runs.clone()];
    for (b_idx, name) in RQ4_BUDGET_NAMES.iter().enumerate() {
        // Label Only: more labeled instances, no rationales anywhere.
        let n = RQ4_LABEL_ONLY[b_idx];
        models.push(bench.run_rq4_arm(
            &format!("Label Only ({name})"),
            RQ4_INIT_POOL + n,
            0,
            false,
            None,
            &mut failures,
        )?);
        // Expl Only: rationales for a subset of the initial pool.
        let n = RQ4_EXPL_ONLY[b_idx];
        models.push(bench.run_rq4_arm(
            &format!("Expl Only ({name})"),
            RQ4_INIT_POOL,
            n,
            false,
            Some(&er),
            &mut failures,
        )?);
        // Label+Expl: new instances that carry both label and rationale.
        let n = RQ4_LABEL_EXPL[b_idx];
        models.push(bench.run_rq4_arm(
            &format!("Label+Expl ({name})"),
            RQ4_INIT_POOL + n,
            n,
            true,
            Some(&er),
            &mut failures,
        )?);
    }
    let partial = !failures.is_empty();
    let report = assemble_report(&bench.config_hash, &cfg.seeds, &models, failures);
    write_report(cfg, &report)?;
    if partial {
        return Err(Error::Run(format!(
            "partial report written to {}: {}",
            cfg.output_dir.display(),
            report.flags.join("; ")
        )));
    }
    Ok(report)
}

impl Workbench {
    /// Like [`Workbench::build`] but training the baseline on a filtered
    /// subset of the train set (used by the RQ4 driver).
    pub fn build_with_train_filter(
        cfg: RunConfig,
        keep: impl Fn(usize, &crate::data::Instance) -> bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let config_hash = cfg.hash()?;
        ensure_dir(&cfg.output_dir)?;
        let data = prepare_data(&cfg)?;
        // Vocabulary still comes from the full pool so later arms can add
        // instances without re-encoding.
        let vocab = Vocab::build(&data.train);
        let model_cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: cfg.model.embed_dim,
            n_classes: cfg.model.n_classes,
            mode: cfg.mode,
            max_len: cfg.model.max_len,
        };
        let initial = Dataset::new(
            data.train
                .instances
                .iter()
                .enumerate()
                .filter(|(i, inst)| keep(*i, inst))
                .map(|(_, inst)| inst.clone())
                .collect(),
        );
        let train_enc: Vec<EncodedInstance> = encode_dataset(&initial, &vocab, cfg.mode)?
            .into_iter()
            .map(|mut e| {
                e.rationale = None;
                e
            })
            .collect();
        let dev_enc = encode_dataset(&data.dev, &vocab, cfg.mode)?;
        let ckpt_dir = cfg.output_dir.join("checkpoints");
        ensure_dir(&ckpt_dir)?;
        let pred_dir = cfg.output_dir.join("predictions");
        let label = cfg.label.clone().unwrap_or_else(|| BASELINE_LABEL.into());

        let results = per_seed(&cfg.seeds, cfg.workers, |_, seed| {
            let init = ModelParams::init(model_cfg, seed);
            let (params, _log) = fit(init, &train_enc, &dev_enc, None, &cfg.train, seed)?;
            let tag = format!("{}_seed{}", label.replace([' ', '/', '(', ')'], "_"), seed);
            let eval = evaluate_params(&params, &vocab, &data, Some(&pred_dir), &tag)?;
            Checkpoint::from_params(&params, &vocab, &config_hash)
                .save(ckpt_dir.join(format!("{tag}.json")))?;
            Ok((params, eval))
        });
        let mut baselines = Vec::new();
        let mut evals = Vec::new();
        for r in results {
            let (params, eval) = r?;
            baselines.push(params);
            evals.push(eval);
        }
        Ok(Workbench {
            config_hash,
            baseline_runs: ModelRuns { label, evals },
            baselines,
            data,
            vocab,
            cfg,
            flags: Vec::new(),
        })
    }

    /// One RQ4 arm: `pool` training instances (initial pool first), with
    /// rationales on `annotated` of them, drawn from the end of the pool
    /// when `annotate_new` or uniformly from the initial pool otherwise.
    fn run_rq4_arm(
        &self,
        label: &str,
        pool: usize,
        annotated: usize,
        annotate_new: bool,
        er: Option<&ErSettings>,
        failures: &mut Vec<String>,
    ) -> Result<ModelRuns> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;

        let train_slice = Dataset::new(
            self.data.train.instances.iter().take(pool).cloned().collect(),
        );
        let enc_all = encode_dataset(&train_slice, &self.vocab, self.cfg.mode)?;
        let dev_enc = encode_dataset(&self.data.dev, &self.vocab, self.cfg.mode)?;
        let model_cfg = self.model_config();
        let pred_dir = self.cfg.output_dir.join("predictions");
        let safe = label.replace([' ', '/', '(', ')', '+'], "_");

        let results = per_seed(&self.cfg.seeds, self.cfg.workers, |_, seed| {
            let mut train: Vec<EncodedInstance> = enc_all.clone();
            // Strip rationales, then re-annotate the arm's slice.
            for e in train.iter_mut() {
                e.rationale = None;
            }
            if annotated > 0 {
                let chosen: Vec<usize> = if annotate_new {
                    (pool - annotated..pool).collect()
                } else {
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b9);
                    let mut idx: Vec<usize> = (0..RQ4_INIT_POOL.min(pool)).collect();
                    idx.shuffle(&mut rng);
                    idx.truncate(annotated);
                    idx
                };
                for i in chosen {
                    train[i].rationale = self.data.train.instances[i].rationale.clone();
                }
            }
            let init = ModelParams::init(model_cfg, seed);
            let (params, _log) = fit(init, &train, &dev_enc, er, &self.cfg.train, seed)?;
            let tag = format!("{safe}_seed{seed}");
            evaluate_params(&params, &self.vocab, &self.data, Some(&pred_dir), &tag)
        });
        collect_runs(label, &self.cfg.seeds, results, failures)
    }
}
