//! Property tests for the invariants that hold across the whole input
//! space rather than at hand-picked points.

use proptest::prelude::*;

use erx_core::criteria::{self, CriterionKind};
use erx_core::eval;
use erx_core::extract::{binarize_topk, ExtractorKind, Rationale};
use erx_core::lexicon::{EntryTag, Lexicon, Polarity};
use erx_core::tensor::{Tape, Tensor};

fn probs(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6..1.0 - 1e-6, 1..max_len)
}

proptest! {
    #[test]
    fn criteria_are_nonnegative_and_zero_at_equality(pred in probs(12), delta in 0.1f64..2.0) {
        let mask: Vec<u8> = pred.iter().map(|&p| (p > 0.5) as u8).collect();
        for kind in CriterionKind::ALL {
            let v = criteria::criterion_value(kind, delta, &pred, &mask).unwrap();
            prop_assert!(v >= 0.0, "{kind:?} gave {v}");
        }
        // Exact agreement zeroes the distance-style criteria.
        let binary: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
        for kind in [CriterionKind::Mse, CriterionKind::Mae, CriterionKind::Huber] {
            let v = criteria::criterion_value(kind, delta, &binary, &mask).unwrap();
            prop_assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn kldiv_equals_bce_for_binary_masks(pred in probs(16)) {
        let mask: Vec<u8> = pred.iter().enumerate().map(|(i, _)| (i % 3 == 0) as u8).collect();
        let k = criteria::kldiv(&pred, &mask).unwrap();
        let b = criteria::bce(&pred, &mask).unwrap();
        prop_assert!((k - b).abs() < 1e-12);
    }

    #[test]
    fn order_zero_iff_ranking_satisfied(pred in probs(10), mask_seed in any::<u64>()) {
        let n = pred.len();
        let mask: Vec<u8> = (0..n).map(|i| ((mask_seed >> (i % 64)) & 1) as u8).collect();
        let v = criteria::order_loss(&pred, &mask).unwrap();
        let min_imp = pred.iter().zip(&mask).filter(|(_, &m)| m == 1).map(|(&p, _)| p)
            .fold(f64::INFINITY, f64::min);
        let max_unimp = pred.iter().zip(&mask).filter(|(_, &m)| m == 0).map(|(&p, _)| p)
            .fold(f64::NEG_INFINITY, f64::max);
        if min_imp.is_finite() && max_unimp.is_finite() {
            prop_assert_eq!(v == 0.0, min_imp >= max_unimp);
        } else {
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn order_value_is_scale_invariant(pred in probs(10), scale in 0.1f64..10.0) {
        let mask: Vec<u8> = pred.iter().enumerate().map(|(i, _)| (i % 2) as u8).collect();
        let base = criteria::order_loss(&pred, &mask).unwrap();
        let scaled: Vec<f64> = pred.iter().map(|p| p * scale).collect();
        let v = criteria::order_loss(&scaled, &mask).unwrap();
        prop_assert!((v - base).abs() < 1e-9, "ratio form must ignore common scaling");
    }

    #[test]
    fn sigmoid_normalization_preserves_ranking(raw in prop::collection::vec(-0.2f64..0.2, 2..10),
                                               gamma in 1.0f64..150.0) {
        let r = Rationale {
            probs: raw.iter().map(|&s| 1.0 / (1.0 + (-gamma * s).exp())).collect(),
            raw_scores: raw,
            target_class: 0,
            extractor: ExtractorKind::IxG,
        };
        let rank = |xs: &[f64]| {
            let mut idx: Vec<usize> = (0..xs.len()).collect();
            idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap().then(a.cmp(&b)));
            idx
        };
        prop_assert_eq!(rank(&r.raw_scores), rank(&r.probs));
    }

    #[test]
    fn binarize_sets_exactly_ceil_k_percent_ones(pred in probs(14), k in 1.0f64..100.0) {
        let r = Rationale {
            raw_scores: pred.clone(),
            probs: pred.clone(),
            target_class: 0,
            extractor: ExtractorKind::Attention,
        };
        let b = binarize_topk(&r, k).unwrap();
        let want = (((k / 100.0) * pred.len() as f64).ceil() as usize).clamp(1, pred.len());
        prop_assert_eq!(b.mask.iter().filter(|&&m| m == 1).count(), want);
    }

    #[test]
    fn softmax_rows_are_stochastic(data in prop::collection::vec(-30.0f64..30.0, 6..24)) {
        let cols = 3;
        let rows = data.len() / cols;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(data[..rows * cols].to_vec(), vec![rows, cols]).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn accuracy_and_macro_f1_are_permutation_invariant(
        labels in prop::collection::vec((0usize..3, 0usize..3), 2..30),
        rot in 1usize..10,
    ) {
        let pred: Vec<usize> = labels.iter().map(|(p, _)| *p).collect();
        let gold: Vec<usize> = labels.iter().map(|(_, g)| *g).collect();
        let rot = rot % labels.len();
        let rot_pred: Vec<usize> = pred.iter().cycle().skip(rot).take(pred.len()).copied().collect();
        let rot_gold: Vec<usize> = gold.iter().cycle().skip(rot).take(gold.len()).copied().collect();
        let a = eval::accuracy(&pred, &gold).unwrap();
        let b = eval::accuracy(&rot_pred, &rot_gold).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
        let fa = eval::macro_f1(&pred, &gold).unwrap();
        let fb = eval::macro_f1(&rot_pred, &rot_gold).unwrap();
        prop_assert!((fa - fb).abs() < 1e-12);
    }

    #[test]
    fn normalized_rates_stay_in_unit_interval_with_extremes_mapped(
        rates in prop::collection::vec(0.0f64..100.0, 2..8),
    ) {
        let norm = eval::normalize_failure_rates(&rates).unwrap();
        prop_assert!(norm.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let lo = rates.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let arg_lo = rates.iter().position(|&r| r == lo).unwrap();
            let arg_hi = rates.iter().position(|&r| r == hi).unwrap();
            prop_assert_eq!(norm[arg_lo], 0.0);
            prop_assert_eq!(norm[arg_hi], 1.0);
        } else {
            prop_assert!(norm.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lexicon_polarity_flip_complements_matched_masks(
        picks in prop::collection::vec(0usize..6, 1..12),
    ) {
        let vocab = ["good", "bad", "the", "film", "plot", "was"];
        let tokens: Vec<String> = picks.iter().map(|&i| vocab[i].to_string()).collect();
        let entries = vec![
            (vec!["good".to_string()], EntryTag::Pos),
            (vec!["bad".to_string()], EntryTag::Neg),
        ];
        let important =
            Lexicon::new("lex", Polarity::ImportantIfMatched, entries.clone()).unwrap();
        let unimportant =
            Lexicon::new("lex", Polarity::UnimportantIfMatched, entries).unwrap();
        let a = important.match_tokens(&tokens);
        let b = unimportant.match_tokens(&tokens).unwrap();
        match a {
            Some(mask) => {
                prop_assert_eq!(mask.len(), tokens.len());
                for (x, y) in mask.iter().zip(&b) {
                    prop_assert_eq!(x ^ y, 1);
                }
            }
            // No match: the important-if-matched side abstains while the
            // complement marks everything.
            None => prop_assert!(b.iter().all(|&m| m == 1)),
        }
    }

    #[test]
    fn welch_p_is_monotone_in_the_mean_gap(base in prop::collection::vec(-1.0f64..1.0, 3..6),
                                           s1 in 0.0f64..2.0, s2 in 0.0f64..2.0) {
        prop_assume!(base.iter().any(|&x| x != base[0]));
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let a_lo: Vec<f64> = base.iter().map(|x| x + lo).collect();
        let a_hi: Vec<f64> = base.iter().map(|x| x + hi).collect();
        let p_lo = eval::welch_t_test(&a_lo, &base).unwrap().p_value;
        let p_hi = eval::welch_t_test(&a_hi, &base).unwrap().p_value;
        prop_assert!(p_hi <= p_lo + 1e-12);
    }
}
