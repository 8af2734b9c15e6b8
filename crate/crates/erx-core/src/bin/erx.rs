//! Command-line front end: generate synthetic corpora, train/evaluate
//! rationale-regularized models, run the sweep drivers, and render reports.
//!
//! Exit codes: 0 success, 1 run failure, 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use erx_core::data::{ingest_jsonl, Dataset};
use erx_core::datagen::{contrast_groups_from_dataset, functional_suites_from_dataset};
use erx_core::error::{Error, Result};
use erx_core::extract::{self, ExtractorKind};
use erx_core::model::Checkpoint;
use erx_core::report::{render_table, EvalReport};
use erx_core::runner::{
    assemble_report, evaluate_params, generate_corpus, run_experiment, run_sweep, summary_view,
    GeneratorConfig, LoadedData, ModelRuns, ResearchQuestion, RunConfig,
};

#[derive(Parser)]
#[command(name = "erx", version, about = "Rationale-regularized text classification workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (train/dev/test, OOD variants, contrast
    /// set, functional suites, task lexicon) into a directory.
    Generate {
        /// Output directory for the JSONL files.
        #[arg(long)]
        out: PathBuf,
        /// Task spec JSON; the built-in grammar is used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 400)]
        dev: usize,
        #[arg(long, default_value_t = 400)]
        test: usize,
        #[arg(long, default_value_t = 400)]
        ood: usize,
        /// Instances per functional subtest.
        #[arg(long, default_value_t = 150)]
        functional: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train per the config (baseline plus ER model when λ_ER > 0),
    /// evaluate all test families, and write report.{json,csv,txt}.
    Train {
        /// Run config JSON; defaults apply for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate an existing checkpoint on given datasets.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// In-distribution test JSONL.
        #[arg(long)]
        data: PathBuf,
        /// Extra OOD test sets as name=path pairs.
        #[arg(long = "ood", value_name = "NAME=PATH")]
        ood: Vec<String>,
        #[arg(long)]
        contrast: Option<PathBuf>,
        #[arg(long)]
        functional: Option<PathBuf>,
        /// Where to write the metrics JSON (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export post-hoc rationales for the test set as JSONL.
        #[arg(long)]
        export_rationales: Option<PathBuf>,
        #[arg(long, default_value = "ixg")]
        extractor: String,
        #[arg(long, default_value_t = 100.0)]
        gamma: f64,
    },
    /// Run one research-question sweep (rq1..rq4) against a base config.
    Sweep {
        #[arg(long)]
        rq: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extractors for rq1/rq2 as a comma list (default: all three).
        #[arg(long)]
        extractors: Option<String>,
    },
    /// Render a stored report as an aligned table; optionally re-export CSV.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = out {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_extractors(arg: &Option<String>) -> Result<Vec<ExtractorKind>> {
    match arg {
        None => Ok(ExtractorKind::ALL.to_vec()),
        Some(list) => list.split(',').map(|s| s.trim().parse()).collect(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { out, spec, train, dev, test, ood, functional, seed } => {
            let mut gen = GeneratorConfig {
                train_size: train,
                dev_size: dev,
                test_size: test,
                ood_size: ood,
                functional_per_subtest: functional,
                seed,
                ..GeneratorConfig::default()
            };
            if let Some(path) = spec {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                gen.spec = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("bad task spec: {e}")))?;
                gen.spec.validate()?;
            }
            generate_corpus(&gen, &out)?;
            println!("corpus written to {}", out.display());
            Ok(())
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config, &out)?;
            let report = run_experiment(&cfg)?;
            print!("{}", render_table(&summary_view(&report)));
            println!("report written to {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            data,
            ood,
            contrast,
            functional,
            out,
            export_rationales,
            extractor,
            gamma,
        } => {
            let (params, vocab) = Checkpoint::load(&checkpoint)?.into_parts()?;
            let test = ingest_jsonl(&data)?;
            let mut oods = Vec::new();
            for spec in &ood {
                let (name, path) = spec.split_once('=').ok_or(Error::Config(format!(
                    "--ood expects NAME=PATH, got `{spec}`"
                )))?;
                oods.push((name.to_string(), ingest_jsonl(path)?));
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
            let loaded = LoadedData {
                train: Dataset::default(),
                dev: Dataset::default(),
                test: test.clone(),
                oods,
                contrast,
                functional,
                lexicon_path: None,
            };
            let eval = evaluate_params(&params, &vocab, &loaded, None, "eval")?;

            if let Some(path) = export_rationales {
                let kind: ExtractorKind = extractor.parse()?;
                let mut items = Vec::new();
                for inst in &test.instances {
                    let mut trace = params.forward(&vocab.encode(&inst.tokens))?;
                    let predicted = trace.predicted_class();
                    let r = extract::extract(&params, &mut trace, kind, &[predicted], gamma)?;
                    items.push((inst.id(), r));
                }
                extract::write_rationales_jsonl(&path, &items)?;
            }

            let runs = ModelRuns { label: "checkpoint".into(), evals: vec![eval] };
            let report = assemble_report("-", &[params.seed], &[runs], vec![]);
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(&p, json)
                    .map_err(|e| Error::io(p.display().to_string(), e))?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Sweep { rq, config, out, extractors } => {
            let cfg = load_config(&config, &out)?;
            let rq: ResearchQuestion = rq.parse()?;
            let extractors = parse_extractors(&extractors)?;
            let report = run_sweep(&cfg, rq, &extractors)?;
            print!("{}", render_table(&summary_view(&report)));
            println!("report written to {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Report { report, csv } => {
            let r = EvalReport::load_json(&report)?;
            print!("{}", render_table(&summary_view(&r)));
            if let Some(path) = csv {
                r.save_csv(&path)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
