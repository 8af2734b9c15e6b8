//! Acceptance suite: one test per exit criterion. Every expected value is
//! either asserted against an independent oracle computed here (finite
//! differences, brute-force enumeration, quadrature) or is a frozen hand
//! derivation. Run with `--nocapture` to see the per-criterion PASS lines.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use erx_core::criteria::{self, CriterionKind};
use erx_core::data::Vocab;
use erx_core::datagen::{self, OodShift, SpuriousSpec, TaskSpec};
use erx_core::eval;
use erx_core::extract::{self, ExtractorKind};
use erx_core::model::{
    fit, EncodedInstance, ErSettings, ModelConfig, ModelParams, OptimizerKind, TaskMode,
    TrainConfig,
};
use erx_core::selection::{self, SelectionStrategy};
use erx_core::tensor::{Tape, Tensor, TensorId};

// ── Criterion 1: gradient check over random graphs ──────────────────────

#[derive(Clone, Debug)]
enum ProgOp {
    Add(usize, usize),
    Mul(usize, usize),
    Matmul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize),
    LogOfSigmoid(usize),
    Scale(usize, f64),
    Mean(usize),
    Sum(usize),
}

#[derive(Clone, Debug)]
struct Program {
    leaf_shapes: Vec<Vec<usize>>,
    ops: Vec<ProgOp>,
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rng.gen_bool(0.5) {
        vec![rng.gen_range(1..=16)]
    } else {
        let r = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=4);
        vec![r, c]
    }
}

fn random_program(rng: &mut ChaCha8Rng) -> Program {
    let n_leaves = rng.gen_range(1..=3);
    let leaf_shapes: Vec<Vec<usize>> = (0..n_leaves).map(|_| random_shape(rng)).collect();
    let mut shapes = leaf_shapes.clone();
    let mut ops = Vec::new();
    let depth = rng.gen_range(1..=6);
    for _ in 0..depth {
        let op = loop {
            match rng.gen_range(0..8) {
                0 => {
                    // Elementwise binary over two same-shape nodes.
                    let a = rng.gen_range(0..shapes.len());
                    let same: Vec<usize> =
                        (0..shapes.len()).filter(|&j| shapes[j] == shapes[a]).collect();
                    let b = same[rng.gen_range(0..same.len())];
                    break if rng.gen_bool(0.5) { ProgOp::Add(a, b) } else { ProgOp::Mul(a, b) };
                }
                1 => {
                    let pairs: Vec<(usize, usize)> = (0..shapes.len())
                        .flat_map(|a| (0..shapes.len()).map(move |b| (a, b)))
                        .filter(|&(a, b)| {
                            shapes[a].len() == 2
                                && shapes[b].len() == 2
                                && shapes[a][1] == shapes[b][0]
                        })
                        .collect();
                    if pairs.is_empty() {
                        continue;
                    }
                    let (a, b) = pairs[rng.gen_range(0..pairs.len())];
                    break ProgOp::Matmul(a, b);
                }
                2 => break ProgOp::Sigmoid(rng.gen_range(0..shapes.len())),
                3 => break ProgOp::Tanh(rng.gen_range(0..shapes.len())),
                4 => {
                    // Softmax needs a last axis; skip scalar nodes.
                    let x = rng.gen_range(0..shapes.len());
                    if shapes[x].is_empty() {
                        continue;
                    }
                    break ProgOp::Softmax(x);
                }
                5 => break ProgOp::LogOfSigmoid(rng.gen_range(0..shapes.len())),
                6 => break ProgOp::Scale(rng.gen_range(0..shapes.len()), rng.gen_range(-2.0..2.0)),
                _ => {
                    let x = rng.gen_range(0..shapes.len());
                    break if rng.gen_bool(0.5) { ProgOp::Mean(x) } else { ProgOp::Sum(x) };
                }
            }
        };
        let shape = match &op {
            ProgOp::Add(a, _) | ProgOp::Mul(a, _) => shapes[*a].clone(),
            ProgOp::Matmul(a, b) => vec![shapes[*a][0], shapes[*b][1]],
            ProgOp::Sigmoid(x)
            | ProgOp::Tanh(x)
            | ProgOp::Softmax(x)
            | ProgOp::LogOfSigmoid(x)
            | ProgOp::Scale(x, _) => shapes[*x].clone(),
            ProgOp::Mean(_) | ProgOp::Sum(_) => vec![],
        };
        ops.push(op);
        shapes.push(shape);
    }
    // Reduce whatever came last to a scalar loss.
    let last = shapes.len() - 1;
    ops.push(if rng.gen_bool(0.5) { ProgOp::Mean(last) } else { ProgOp::Sum(last) });
    Program { leaf_shapes, ops }
}

/// Forward-evaluate a program on a fresh tape; returns the loss node and
/// the leaf ids.
fn build(program: &Program, leaves: &[Vec<f64>], tape: &mut Tape) -> (TensorId, Vec<TensorId>) {
    let mut nodes: Vec<TensorId> = Vec::new();
    for (shape, values) in program.leaf_shapes.iter().zip(leaves) {
        nodes.push(tape.leaf(Tensor::new(values.clone(), shape.clone()).unwrap()));
    }
    for op in &program.ops {
        let id = match *op {
            ProgOp::Add(a, b) => tape.add(nodes[a], nodes[b]).unwrap(),
            ProgOp::Mul(a, b) => tape.mul(nodes[a], nodes[b]).unwrap(),
            ProgOp::Matmul(a, b) => tape.matmul(nodes[a], nodes[b]).unwrap(),
            ProgOp::Sigmoid(x) => tape.sigmoid(nodes[x]),
            ProgOp::Tanh(x) => tape.tanh(nodes[x]),
            ProgOp::Softmax(x) => tape.softmax(nodes[x]).unwrap(),
            ProgOp::LogOfSigmoid(x) => {
                let s = tape.sigmoid(nodes[x]);
                tape.log(s).unwrap()
            }
            ProgOp::Scale(x, c) => tape.scale(nodes[x], c),
            ProgOp::Mean(x) => tape.mean(nodes[x]),
            ProgOp::Sum(x) => tape.sum(nodes[x]),
        };
        nodes.push(id);
    }
    (*nodes.last().unwrap(), nodes[..program.leaf_shapes.len()].to_vec())
}

fn forward_value(program: &Program, leaves: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = build(program, leaves, &mut tape);
    tape.value(loss).item()
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    for graph_idx in 0..200 {
        let program = random_program(&mut rng);
        let leaves: Vec<Vec<f64>> = program
            .leaf_shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
            })
            .collect();
        let mut tape = Tape::new();
        let (loss, leaf_ids) = build(&program, &leaves, &mut tape);
        tape.backward(loss).unwrap();
        for (li, id) in leaf_ids.iter().enumerate() {
            // A leaf the random program never used has gradient zero.
            let grad = tape
                .grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; leaves[li].len()]);
            for e in 0..leaves[li].len() {
                let mut up = leaves.clone();
                let mut dn = leaves.clone();
                up[li][e] += h;
                dn[li][e] -= h;
                let fd = (forward_value(&program, &up) - forward_value(&program, &dn)) / (2.0 * h);
                let tol = 1e-4 * fd.abs().max(1.0);
                assert!(
                    (grad[e] - fd).abs() <= tol,
                    "graph {graph_idx} leaf {li}[{e}]: autodiff {} vs fd {fd}\n{program:?}",
                    grad[e]
                );
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "gradient suite took {elapsed:?}");
    println!("[acceptance] criterion 1 (gradient suite, 200 graphs in {elapsed:.2?}): PASS");
}

// ── Criterion 2: criterion unit values + KLDiv/BCE identity ─────────────

#[test]
fn criterion_2_criterion_values() {
    let tol = 1e-9;
    let close = |got: f64, want: f64, what: &str| {
        assert!((got - want).abs() < tol, "{what}: got {got}, want {want}");
    };
    close(criteria::mse(&[0.5, 0.5], &[1, 0]).unwrap(), 0.25, "mse");
    close(criteria::mae(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5, "mae");
    close(criteria::huber(&[0.5, 0.5], &[1, 0], 1.0).unwrap(), 0.125, "huber below delta");
    close(criteria::huber(&[0.0, 1.0], &[1, 0], 1.0).unwrap(), 0.5, "huber at delta");
    close(
        criteria::bce(&[0.5, 0.5], &[1, 0]).unwrap(),
        0.5 * std::f64::consts::LN_2,
        "bce",
    );
    close(criteria::order_loss(&[0.2, 0.4], &[1, 0]).unwrap(), 0.25, "order two tokens");
    let want = (0.1f64 / 0.6 - 1.0).powi(2) + (0.3f64 / 0.6 - 1.0).powi(2);
    close(criteria::order_loss(&[0.1, 0.3, 0.6], &[1, 1, 0]).unwrap(), want, "order three");
    assert!((want - 0.9444).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=12);
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
        let mask: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        let k = criteria::kldiv(&pred, &mask).unwrap();
        let b = criteria::bce(&pred, &mask).unwrap();
        assert!((k - b).abs() < 1e-12, "kldiv {k} != bce {b}");
    }
    println!("[acceptance] criterion 2 (criterion unit suite): PASS");
}

// ── Criterion 3: metric oracles ──────────────────────────────────────────

fn oracle_macro_f1(pred: &[usize], gold: &[usize]) -> f64 {
    let mut classes: Vec<usize> = pred.iter().chain(gold).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&p, &g) in pred.iter().zip(gold) {
            if p == c && g == c {
                tp += 1.0;
            } else if p == c {
                fp += 1.0;
            } else if g == c {
                fn_ += 1.0;
            }
        }
        if 2.0 * tp + fp + fn_ > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    total / classes.len() as f64
}

/// Student-t upper-tail probability by plain quadrature on the unnormalized
/// density; independent of the incomplete-beta path under test.
fn oracle_t_sf(t: f64, df: f64) -> f64 {
    let f = |x: f64| (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let simpson = |a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    };
    let body = simpson(0.0, 50.0, 200_000);
    let tail = simpson(50.0, 4000.0, 400_000);
    let half = body + tail;
    let upper = if t <= 50.0 {
        simpson(t, 50.0, 200_000) + tail
    } else {
        simpson(t, 4000.0, 400_000)
    };
    upper / (2.0 * half)
}

#[test]
fn criterion_3_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    for _ in 0..100 {
        // Random prediction table.
        let n = rng.gen_range(4..40);
        let classes = rng.gen_range(2..4usize);
        let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let got = eval::macro_f1(&pred, &gold).unwrap();
        let want = oracle_macro_f1(&pred, &gold);
        assert!((got - want).abs() < 1e-12, "macro_f1 {got} vs oracle {want}");

        // Contrast groups over the same table.
        let n_groups = rng.gen_range(1..8usize);
        let mut groups = Vec::new();
        let mut predictions = std::collections::BTreeMap::new();
        let mut ids = 0u64..;
        for _ in 0..n_groups {
            let orig = ids.next().unwrap();
            let orig_gold = rng.gen_range(0..2usize);
            predictions.insert(orig, rng.gen_range(0..2usize));
            let contrasts: Vec<(u64, usize, String)> = (0..rng.gen_range(1..4usize))
                .map(|_| {
                    let id = ids.next().unwrap();
                    let g = rng.gen_range(0..2usize);
                    predictions.insert(id, rng.gen_range(0..2usize));
                    (id, g, "inversion".to_string())
                })
                .collect();
            groups.push(eval::ContrastGroup { original_id: orig, original_gold: orig_gold, contrasts });
        }
        let got = eval::contrast_consistency(&groups, &predictions).unwrap();
        // Brute-force group scan.
        let mut fully = 0usize;
        let mut orig_ok = 0usize;
        let mut c_ok = 0usize;
        let mut c_n = 0usize;
        for g in &groups {
            let o = predictions[&g.original_id] == g.original_gold;
            orig_ok += o as usize;
            let mut all = o;
            for (id, gg, _) in &g.contrasts {
                let ok = predictions[id] == *gg;
                c_ok += ok as usize;
                c_n += 1;
                all &= ok;
            }
            fully += all as usize;
        }
        assert!((got.consistency - fully as f64 / groups.len() as f64).abs() < 1e-12);
        assert!((got.original_acc - orig_ok as f64 / groups.len() as f64).abs() < 1e-12);
        assert!((got.contrast_acc - c_ok as f64 / c_n as f64).abs() < 1e-12);

        // FPRD with two or three tag groups.
        let rows: Vec<eval::PredictionRow> = (0..n)
            .map(|i| eval::PredictionRow {
                instance_id: i as u64,
                gold: gold[i] % 2,
                pred: pred[i] % 2,
                split: "t".into(),
                group_tags: vec![format!("g{}", i % rng.gen_range(2..4usize).max(2))],
            })
            .collect();
        if rows.iter().any(|r| r.gold == 0) {
            let got = eval::fprd(&rows).unwrap();
            let overall_fp = rows.iter().filter(|r| r.gold == 0 && r.pred == 1).count() as f64;
            let overall_n = rows.iter().filter(|r| r.gold == 0).count() as f64;
            let overall = overall_fp / overall_n;
            let tags: std::collections::BTreeSet<String> =
                rows.iter().flat_map(|r| r.group_tags.clone()).collect();
            let mut want = 0.0;
            for tag in tags {
                let members: Vec<&eval::PredictionRow> =
                    rows.iter().filter(|r| r.group_tags.contains(&tag)).collect();
                let neg: Vec<_> = members.iter().filter(|r| r.gold == 0).collect();
                if neg.is_empty() {
                    continue;
                }
                let fp = neg.iter().filter(|r| r.pred == 1).count() as f64;
                want += (fp / neg.len() as f64 - overall).abs();
            }
            assert!((got.value - want).abs() < 1e-12, "fprd {} vs {want}", got.value);
        }

        // Min-max normalization against a direct loop.
        let m = rng.gen_range(2..6usize);
        let rates: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..100.0)).collect();
        let got = eval::normalize_failure_rates(&rates).unwrap();
        let lo = rates.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (g, r) in got.iter().zip(&rates) {
            let w = if hi == lo { 0.0 } else { (r - lo) / (hi - lo) };
            assert!((g - w).abs() < 1e-12);
        }
    }

    // Welch fixture against the quadrature oracle.
    let r = eval::welch_t_test(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
    assert!((r.df - 4.0).abs() < 1e-12);
    let oracle_p = oracle_t_sf(r.t, r.df);
    assert!(
        (r.p_value - oracle_p).abs() < 1e-6,
        "welch p {} vs quadrature {oracle_p}",
        r.p_value
    );
    assert!((r.p_value - 0.1438).abs() < 5e-4);
    println!("[acceptance] criterion 3 (metric oracle suite): PASS");
}

// ── Criterion 4: IxG exactness on linear models ──────────────────────────

#[test]
fn criterion_4_ixg_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for round in 0..50 {
        let vocab = rng.gen_range(6..20);
        let dim = rng.gen_range(2..10);
        let cfg = ModelConfig::new(vocab, dim, 2, TaskMode::Sequence);
        let mut params = ModelParams::init(cfg, round);
        // Zero query/key projections give uniform attention, collapsing the
        // model to a linear bag: logit_c = Σ_t w_eff·e_t / n + b_c.
        params.w_query.iter_mut().for_each(|w| *w = 0.0);
        params.w_key.iter_mut().for_each(|w| *w = 0.0);
        let n = rng.gen_range(1..8usize);
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
        let class = rng.gen_range(0..2usize);

        let mut trace = params.forward(&tokens).unwrap();
        let r = extract::extract_ixg(&mut trace, &[class], 100.0).unwrap();

        // w_eff = Wv · w_out[:, class] / n, applied to each token embedding.
        let mut w_eff = vec![0.0; dim];
        for (d, w) in w_eff.iter_mut().enumerate() {
            for k in 0..dim {
                *w += params.w_value[d * dim + k] * params.w_out[k * 2 + class];
            }
            *w /= n as f64;
        }
        for (t, &tok) in tokens.iter().enumerate() {
            let e = &params.embedding[tok * dim..(tok + 1) * dim];
            let want: f64 = w_eff.iter().zip(e).map(|(w, e)| w * e).sum();
            assert!(
                (r.raw_scores[t] - want).abs() < 1e-10,
                "round {round} token {t}: {} vs {want}",
                r.raw_scores[t]
            );
        }
    }
    println!("[acceptance] criterion 4 (IxG exactness on linear models): PASS");
}

// ── Criteria 5 and 7 share the planted-shortcut fixture ──────────────────

fn shortcut_spec() -> TaskSpec {
    let mut spec = TaskSpec::default();
    let extra = [
        ("splendid", "woeful"),
        ("fine", "poor"),
        ("nice", "grim"),
        ("sweet", "sour"),
        ("crisp", "bleak"),
        ("fresh", "stale"),
        ("warm", "cold"),
        ("bright", "dull"),
    ];
    for (a, b) in extra {
        spec.signal_pairs.push((a.to_string(), b.to_string()));
    }
    spec.len_range = (8, 14);
    spec.spurious = Some(SpuriousSpec {
        token: "oscar".into(),
        positive_rate: 1.0,
        negative_rate: 0.0,
    });
    spec
}

struct Fixture {
    train: Vec<EncodedInstance>,
    dev: Vec<EncodedInstance>,
    id_test: Vec<(Vec<usize>, usize)>,
    ood_test: Vec<(Vec<usize>, usize)>,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
}

fn build_fixture(train_size: usize) -> Fixture {
    build_fixture_with(train_size, true)
}

fn build_fixture_with(train_size: usize, spurious: bool) -> Fixture {
    let mut spec = shortcut_spec();
    if !spurious {
        spec.spurious = None;
    }
    let train = datagen::generate_id_dataset(&spec, train_size, 0).unwrap();
    let dev = datagen::generate_id_dataset(&spec, 400, 1).unwrap();
    let id_test = datagen::generate_id_dataset(&spec, 400, 2).unwrap();
    let ood_test =
        datagen::generate_ood_variant(&spec, &OodShift::DistractorRatio { extra: 6 }, 400, 10)
            .unwrap();
    let vocab = Vocab::build(&train);
    let enc = |ds: &erx_core::data::Dataset| -> Vec<EncodedInstance> {
        ds.instances
            .iter()
            .map(|i| EncodedInstance {
                id: i.id(),
                token_ids: vocab.encode(&i.tokens),
                targets: vec![i.label],
                rationale: i.rationale.clone(),
            })
            .collect()
    };
    let pairs = |ds: &erx_core::data::Dataset| -> Vec<(Vec<usize>, usize)> {
        ds.instances.iter().map(|i| (vocab.encode(&i.tokens), i.label)).collect()
    };
    Fixture {
        train: enc(&train),
        dev: enc(&dev),
        id_test: pairs(&id_test),
        ood_test: pairs(&ood_test),
        model_cfg: ModelConfig::new(vocab.len(), 16, 2, TaskMode::Sequence),
        train_cfg: TrainConfig {
            lr: 0.3,
            batch_size: 32,
            max_epochs: 25,
            patience: 10,
            optimizer: OptimizerKind::Sgd,
        },
    }
}

fn ixg_mae_settings() -> ErSettings {
    ErSettings {
        extractor: ExtractorKind::IxG,
        criterion: CriterionKind::Mae,
        huber_delta: 1.0,
        lambda: 1.0,
        gamma: 100.0,
    }
}

fn accuracy_on(params: &ModelParams, data: &[(Vec<usize>, usize)]) -> f64 {
    let ok = data
        .iter()
        .filter(|(ids, label)| params.forward(ids).unwrap().predicted_class() == *label)
        .count();
    ok as f64 / data.len() as f64
}

fn train_arm(
    fixture: &Fixture,
    er: Option<&ErSettings>,
    seed: u64,
    strip_rationales: bool,
) -> ModelParams {
    let train: Vec<EncodedInstance> = fixture
        .train
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if strip_rationales {
                e.rationale = None;
            }
            e
        })
        .collect();
    let dev: Vec<EncodedInstance> = fixture
        .dev
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if strip_rationales {
                e.rationale = None;
            }
            e
        })
        .collect();
    let init = ModelParams::init(fixture.model_cfg, seed);
    let (params, _) = fit(init, &train, &dev, er, &fixture.train_cfg, seed).unwrap();
    params
}

#[test]
fn criterion_5_directional_er_effect() {
    let start = Instant::now();
    let fixture = build_fixture(2000);
    let seeds = [0u64, 1, 2];
    let er = ixg_mae_settings();

    let mut base_id = Vec::new();
    let mut base_ood = Vec::new();
    let mut er_id = Vec::new();
    let mut er_ood = Vec::new();
    for &seed in &seeds {
        let baseline = train_arm(&fixture, None, seed, true);
        base_id.push(accuracy_on(&baseline, &fixture.id_test));
        base_ood.push(accuracy_on(&baseline, &fixture.ood_test));
        let regularized = train_arm(&fixture, Some(&er), seed, false);
        er_id.push(accuracy_on(&regularized, &fixture.id_test));
        er_ood.push(accuracy_on(&regularized, &fixture.ood_test));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (b_id, e_id, b_ood, e_ood) =
        (mean(&base_id), mean(&er_id), mean(&base_ood), mean(&er_ood));

    assert!(
        (e_id - b_id).abs() <= 0.02,
        "ID parity violated: ER {e_id:.4} vs No-ER {b_id:.4} (per-seed {er_id:?} vs {base_id:?})"
    );
    assert!(
        e_ood >= b_ood + 0.05,
        "OOD gain too small: ER {e_ood:.4} vs No-ER {b_ood:.4} (per-seed {er_ood:?} vs {base_ood:?})"
    );
    let welch = eval::welch_t_test(&er_ood, &base_ood).unwrap();
    assert!(
        welch.p_value < 0.05,
        "OOD gain not significant: p = {} ({er_ood:?} vs {base_ood:?})",
        welch.p_value
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "directional experiment took {elapsed:?}");
    println!(
        "[acceptance] criterion 5 (directional ER effect, ID {b_id:.3}->{e_id:.3}, \
         OOD {b_ood:.3}->{e_ood:.3}, p = {:.2e}, {elapsed:.1?}): PASS",
        welch.p_value
    );
}

// ── Criterion 6: Order-loss batch behavior ───────────────────────────────

#[test]
fn criterion_6_order_loss_behavior() {
    // Probs already rank every important token above every unimportant one.
    let batch: Vec<(Vec<f64>, Vec<u8>)> = vec![
        (vec![0.9, 0.8, 0.2, 0.1], vec![1, 1, 0, 0]),
        (vec![0.7, 0.3], vec![1, 0]),
        (vec![0.6, 0.55, 0.54], vec![1, 1, 0]),
    ];
    let pairs: Vec<(&[f64], &[u8])> =
        batch.iter().map(|(p, m)| (p.as_slice(), m.as_slice())).collect();
    let (order, _) = criteria::er_loss(&pairs, CriterionKind::Order, 1.0).unwrap();
    assert_eq!(order, 0.0, "satisfied ranking must give zero Order loss");
    let (mse, _) = criteria::er_loss(&pairs, CriterionKind::Mse, 1.0).unwrap();
    assert!(mse > 0.0, "non-binary probs must give strictly positive MSE");

    // Exactly binary probs zero the MSE too.
    let binary: Vec<(Vec<f64>, Vec<u8>)> = vec![(vec![1.0, 0.0], vec![1, 0])];
    let pairs: Vec<(&[f64], &[u8])> =
        binary.iter().map(|(p, m)| (p.as_slice(), m.as_slice())).collect();
    let (mse, _) = criteria::er_loss(&pairs, CriterionKind::Mse, 1.0).unwrap();
    assert_eq!(mse, 0.0);
    println!("[acceptance] criterion 6 (Order-loss behavior): PASS");
}

// ── Criterion 7: selection trend (non-gating) ────────────────────────────

#[test]
fn criterion_7_selection_sanity() {
    // The plain planted task, no shortcut injection. (With the criterion-5
    // shortcut active the trend inverts: the baseline's top attributions sit
    // on the shortcut token in positives, so LIS spends the whole budget on
    // negative instances and never suppresses it.)
    let fixture = build_fixture_with(1000, false);
    let seeds = [0u64, 1, 2];
    let er = ixg_mae_settings();
    let budget = 5.0;

    let baselines: Vec<ModelParams> =
        seeds.iter().map(|&s| train_arm(&fixture, None, s, true)).collect();

    let all_ids: Vec<u64> = fixture.train.iter().map(|e| e.id).collect();
    let scores = selection::score_instances(
        &baselines,
        &fixture.train,
        SelectionStrategy::Lis,
        10.0,
        er.gamma,
    )
    .unwrap();
    let lis_ids =
        selection::select(Some(&scores), &all_ids, SelectionStrategy::Lis, budget, 0).unwrap();

    let run_with = |keep: &[u64], seed: u64| -> f64 {
        let keep: std::collections::BTreeSet<u64> = keep.iter().copied().collect();
        let train: Vec<EncodedInstance> = fixture
            .train
            .iter()
            .map(|e| {
                let mut e = e.clone();
                if !keep.contains(&e.id) {
                    e.rationale = None;
                }
                e
            })
            .collect();
        let init = ModelParams::init(fixture.model_cfg, seed);
        let (params, _) = fit(init, &train, &fixture.dev, Some(&er), &fixture.train_cfg, seed).unwrap();
        accuracy_on(&params, &fixture.ood_test)
    };

    let mut lis_ood = Vec::new();
    let mut random_ood = Vec::new();
    for &seed in &seeds {
        lis_ood.push(run_with(&lis_ids, seed));
        let random_ids =
            selection::select(None, &all_ids, SelectionStrategy::Random, budget, seed).unwrap();
        random_ood.push(run_with(&random_ids, seed));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (lis, random) = (mean(&lis_ood), mean(&random_ood));
    let held = lis >= random - 1e-12;
    // Trend check only: stochastic by design, logged but never gating.
    println!(
        "[acceptance] criterion 7 (selection trend, non-gating): LIS OOD {lis:.4} \
         vs Random OOD {random:.4} -> trend {} (per-seed {lis_ood:?} vs {random_ood:?})",
        if held { "held" } else { "not held" }
    );
}

// ── Criterion 8: batch-composition floor ─────────────────────────────────

#[test]
fn criterion_8_batch_composition_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (total, annotated_n, batch_size) in [(1000, 37, 32), (480, 5, 32), (100, 1, 6), (64, 64, 16)] {
        let annotated: Vec<usize> = (0..annotated_n).collect();
        let batches =
            selection::compose_batches(total, &annotated, batch_size, &mut rng).unwrap();
        let floor = batch_size.div_ceil(3);
        let mut seen = vec![false; total];
        for batch in &batches {
            let count = batch.iter().filter(|&&i| i < annotated_n).count();
            assert!(
                count >= floor,
                "batch with {count} annotated < floor {floor} (|A|={annotated_n}, bs={batch_size})"
            );
            for &i in batch {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "every instance appears at least once per epoch");
    }
    println!("[acceptance] criterion 8 (batch-composition floor): PASS");
}

// ── Criterion 9: end-to-end determinism ──────────────────────────────────

#[test]
fn criterion_9_end_to_end_determinism() {
    use erx_core::runner::{run_experiment, DataSource, GeneratorConfig, RunConfig};

    let make_cfg = |dir: &std::path::Path| -> RunConfig {
        let mut gen = GeneratorConfig {
            train_size: 150,
            dev_size: 40,
            test_size: 40,
            ood_size: 40,
            functional_per_subtest: 8,
            contrast_originals: 10,
            seed: 0,
            ..GeneratorConfig::default()
        };
        gen.shifts = vec![OodShift::DistractorRatio { extra: 4 }];
        RunConfig {
            seeds: vec![0, 1],
            budget_k: 60.0,
            data: DataSource::Generator(gen),
            train: TrainConfig {
                lr: 0.3,
                batch_size: 16,
                max_epochs: 5,
                patience: 3,
                optimizer: OptimizerKind::Sgd,
            },
            output_dir: dir.to_path_buf(),
            ..RunConfig::default()
        }
    };

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let report_a = run_experiment(&make_cfg(dir_a.path())).unwrap();
    let report_b = run_experiment(&make_cfg(dir_b.path())).unwrap();

    let csv_a = std::fs::read(dir_a.path().join("report.csv")).unwrap();
    let csv_b = std::fs::read(dir_b.path().join("report.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "report CSVs differ between identical runs");

    // The JSON reports agree modulo the timestamp field.
    let mut ja = serde_json::to_value(&report_a).unwrap();
    let mut jb = serde_json::to_value(&report_b).unwrap();
    ja.as_object_mut().unwrap().remove("created_unix");
    jb.as_object_mut().unwrap().remove("created_unix");
    assert_eq!(ja, jb, "reports differ beyond timestamps");
    println!("[acceptance] criterion 9 (end-to-end determinism): PASS");
}
