//! Answer matching and aggregate metrics for evaluation reports.

use crate::error::{Error, Result};

/// Canonical answer form: lowercased, with whitespace and punctuation
/// stripped from both ends. Interior characters are preserved.
pub fn normalize_answer(s: &str) -> String {
    s.to_lowercase()
        .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .to_string()
}

/// Normalized exact match.
pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

/// Lowercased alphanumeric runs, used for token-overlap scoring. Every
/// other character separates, so span lists match regardless of the
/// delimiters around each span.
pub fn answer_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Multiset token overlap for one example: (matched, predicted, gold)
/// counts, the raw material for micro-averaged F1.
pub fn overlap_counts(prediction: &str, gold: &str) -> (usize, usize, usize) {
    let pred = answer_tokens(prediction);
    let gold_toks = answer_tokens(gold);
    let mut remaining: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for t in &gold_toks {
        *remaining.entry(t).or_insert(0) += 1;
    }
    let mut matched = 0;
    for t in &pred {
        if let Some(n) = remaining.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                matched += 1;
            }
        }
    }
    (matched, pred.len(), gold_toks.len())
}

/// Micro-averaged F1 over (prediction, gold) pairs: overlap counts are
/// pooled across the whole set before the harmonic mean.
pub fn micro_f1<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> f64 {
    let (mut tp, mut p, mut g) = (0usize, 0usize, 0usize);
    for (pred, gold) in pairs {
        let (m, np, ng) = overlap_counts(pred, gold);
        tp += m;
        p += np;
        g += ng;
    }
    f1_from_counts(tp, p, g)
}

/// F1 from pooled (matched, predicted, gold) counts. Empty prediction and
/// gold sets count as perfect agreement.
pub fn f1_from_counts(matched: usize, predicted: usize, gold: usize) -> f64 {
    if predicted == 0 && gold == 0 {
        return 1.0;
    }
    if matched == 0 {
        return 0.0;
    }
    let precision = matched as f64 / predicted as f64;
    let recall = matched as f64 / gold as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Fraction of true outcomes, exactly the mean of 0/1 scores.
pub fn accuracy(outcomes: &[bool]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().map(|&b| if b { 1.0 } else { 0.0 }).sum::<f64>() / outcomes.len() as f64
}

/// Area under the ROC curve for (score, is_positive) pairs, computed as
/// the Mann-Whitney statistic: the fraction of positive/negative pairs
/// ranked correctly, ties counting one half. Needs both classes.
pub fn auc(scored: &[(f64, bool)]) -> Result<f64> {
    let positives: Vec<f64> = scored.iter().filter(|(_, y)| *y).map(|(s, _)| *s).collect();
    let negatives: Vec<f64> = scored.iter().filter(|(_, y)| !*y).map(|(s, _)| *s).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Contract(format!(
            "auc needs both classes, got {} positive and {} negative",
            positives.len(),
            negatives.len()
        )));
    }
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Contract("auc got a NaN score".into()));
    }
    let mut wins = 0.0;
    for p in &positives {
        for n in &negatives {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_strips_case_and_boundary_noise() {
        assert_eq!(normalize_answer("  Entailment. "), "entailment");
        assert_eq!(normalize_answer("YES!"), "yes");
        assert_eq!(normalize_answer("a b, c"), "a b, c");
        assert_eq!(normalize_answer("..!?"), "");
    }

    #[test]
    fn exact_match_is_normalization_equality() {
        assert!(exact_match(" Positive.", "positive"));
        assert!(!exact_match("positive", "negative"));
        assert!(exact_match("A  B", "a  b"));
        assert!(!exact_match("A B", "A  B"));
    }

    #[test]
    fn token_overlap_counts_multisets() {
        assert_eq!(overlap_counts("a b c", "b c d"), (2, 3, 3));
        assert_eq!(overlap_counts("a a b", "a b b"), (2, 3, 3));
        assert_eq!(overlap_counts("", "x"), (0, 0, 1));
        // Delimiters do not matter for span lists.
        assert_eq!(
            overlap_counts("drug: aspirin; dose: low", "drug aspirin dose low"),
            (4, 4, 4)
        );
    }

    #[test]
    fn f1_handles_empty_edge_cases() {
        assert_eq!(f1_from_counts(0, 0, 0), 1.0);
        assert_eq!(f1_from_counts(0, 3, 0), 0.0);
        assert_eq!(f1_from_counts(0, 0, 3), 0.0);
        let f1 = f1_from_counts(2, 3, 3);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn micro_f1_pools_counts_before_averaging() {
        // Example 1: 1 of 1 matched. Example 2: 0 of 3 predicted, 3 gold.
        // Macro mean would be 0.5; micro pools to P=R=1/4, F1=1/4.
        let pairs = vec![("a", "a"), ("x y z", "p q r")];
        let micro = micro_f1(pairs);
        assert!((micro - 0.25).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_the_exact_mean() {
        assert_eq!(accuracy(&[true, true, false, false]), 0.5);
        assert_eq!(accuracy(&[true; 7]), 1.0);
        assert_eq!(accuracy(&[]), 0.0);
    }

    #[test]
    fn auc_orders_separable_classes() {
        let perfect = vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        assert_eq!(auc(&perfect).unwrap(), 1.0);
        let inverted = vec![(0.1, true), (0.9, false)];
        assert_eq!(auc(&inverted).unwrap(), 0.0);
    }

    #[test]
    fn auc_scores_ties_one_half() {
        let all_tied = vec![(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(auc(&all_tied).unwrap(), 0.5);
        // Pairs: (.9,.5)=1, (.9,.1)=1, (.5,.5)=.5, (.5,.1)=1 -> 3.5/4.
        let mixed = vec![(0.9, true), (0.5, true), (0.5, false), (0.1, false)];
        assert_eq!(auc(&mixed).unwrap(), 0.875);
    }

    #[test]
    fn auc_is_invariant_to_monotone_score_maps() {
        let scored: Vec<(f64, bool)> = vec![(0.3, true), (0.1, false), (0.7, true), (0.4, false)];
        let warped: Vec<(f64, bool)> = scored.iter().map(|&(s, y)| (s.exp() * 3.0, y)).collect();
        assert_eq!(auc(&scored).unwrap(), auc(&warped).unwrap());
    }

    #[test]
    fn auc_rejects_degenerate_inputs() {
        assert!(auc(&[(0.4, true), (0.6, true)]).is_err());
        assert!(auc(&[]).is_err());
        assert!(auc(&[(f64::NAN, true), (0.5, false)]).is_err());
    }
}
