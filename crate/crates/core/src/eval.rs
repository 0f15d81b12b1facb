//! Evaluation: the exact-match family, crossing brackets, precision and
//! recall over constituent spans, tagging error rate, the paired binomial
//! significance test, and the aggregate report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::treebank::{TreeChild, TreebankTree};

fn surfaces(tree: &TreebankTree) -> Vec<&str> {
    tree.tokens().iter().map(|t| t.surface.as_str()).collect()
}

fn tags(tree: &TreebankTree) -> Vec<&str> {
    tree.tokens().iter().map(|t| t.tag.as_str()).collect()
}

fn check_same_words(gold: &TreebankTree, pred: &TreebankTree) -> Result<()> {
    if surfaces(gold) != surfaces(pred) {
        return Err(Error::Domain(
            "evaluated trees cover different word sequences".into(),
        ));
    }
    Ok(())
}

/// True iff every constituent, label and (unless ignored) tag matches.
pub fn exact_match(gold: &TreebankTree, pred: &TreebankTree, ignore_tags: bool) -> Result<bool> {
    check_same_words(gold, pred)?;
    Ok(tree_eq(gold, pred, ignore_tags))
}

fn tree_eq(a: &TreebankTree, b: &TreebankTree, ignore_tags: bool) -> bool {
    if a.label != b.label || a.conj != b.conj || a.children.len() != b.children.len() {
        return false;
    }
    a.children
        .iter()
        .zip(&b.children)
        .all(|(x, y)| match (x, y) {
            (TreeChild::Token(t), TreeChild::Token(u)) => {
                t.surface == u.surface && (ignore_tags || t.tag == u.tag)
            }
            (TreeChild::Tree(t), TreeChild::Tree(u)) => tree_eq(t, u, ignore_tags),
            _ => false,
        })
}

/// Constituent spans of a tree, excluding the root span (it matches
/// trivially); the synthetic wrapped root is already skipped by
/// `constituents`.
fn spans_excluding_root(tree: &TreebankTree) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = tree.constituents().iter().map(|c| c.0).collect();
    if !tree.wrapped && !spans.is_empty() {
        spans.remove(0);
    }
    spans
}

fn crosses(a: (usize, usize), b: (usize, usize)) -> bool {
    let overlap = a.0 < b.1 && b.0 < a.1;
    let a_contains_b = a.0 <= b.0 && b.1 <= a.1;
    let b_contains_a = b.0 <= a.0 && a.1 <= b.1;
    overlap && !a_contains_b && !b_contains_a
}

/// The predicted constituents that straddle some gold constituent without
/// containing it or being contained by it.
pub fn crossing_spans(gold: &TreebankTree, pred: &TreebankTree) -> Vec<(usize, usize)> {
    let gold_spans = spans_excluding_root(gold);
    spans_excluding_root(pred)
        .into_iter()
        .filter(|&p| gold_spans.iter().any(|&g| crosses(p, g)))
        .collect()
}

/// Number of crossing-brackets violations in the predicted tree.
pub fn crossing_brackets(gold: &TreebankTree, pred: &TreebankTree) -> Result<usize> {
    check_same_words(gold, pred)?;
    Ok(crossing_spans(gold, pred).len())
}

/// Span precision and recall of the prediction against the gold tree.
/// Unlabeled by default; the labeled variant also requires the constituent
/// label to match. Empty sides give 1.0.
pub fn precision_recall(
    gold: &TreebankTree,
    pred: &TreebankTree,
    labeled: bool,
) -> Result<(f64, f64)> {
    check_same_words(gold, pred)?;
    let (matched, n_pred, n_gold) = span_matches(gold, pred, labeled);
    let precision = if n_pred == 0 {
        1.0
    } else {
        matched as f64 / n_pred as f64
    };
    let recall = if n_gold == 0 {
        1.0
    } else {
        matched as f64 / n_gold as f64
    };
    Ok((precision, recall))
}

fn span_matches(gold: &TreebankTree, pred: &TreebankTree, labeled: bool) -> (usize, usize, usize) {
    let key = |span: (usize, usize), label: &str| {
        if labeled {
            format!("{}:{}:{}", span.0, span.1, label)
        } else {
            format!("{}:{}", span.0, span.1)
        }
    };
    let mut gold_keys: Vec<String> = Vec::new();
    {
        let mut items = gold.constituents();
        if !gold.wrapped && !items.is_empty() {
            items.remove(0);
        }
        for (span, label, _) in items {
            gold_keys.push(key(span, label));
        }
    }
    let mut pred_keys: Vec<String> = Vec::new();
    {
        let mut items = pred.constituents();
        if !pred.wrapped && !items.is_empty() {
            items.remove(0);
        }
        for (span, label, _) in items {
            pred_keys.push(key(span, label));
        }
    }
    let n_gold = gold_keys.len();
    let n_pred = pred_keys.len();
    // Multiset intersection.
    gold_keys.sort();
    pred_keys.sort();
    let (mut i, mut j, mut matched) = (0, 0, 0);
    while i < gold_keys.len() && j < pred_keys.len() {
        match gold_keys[i].cmp(&pred_keys[j]) {
            std::cmp::Ordering::Equal => {
                matched += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    (matched, n_pred, n_gold)
}

/// Fraction of mismatched tags over aligned (gold, predicted) tag sequences.
pub fn tagging_error_rate(pairs: &[(&TreebankTree, &TreebankTree)]) -> Result<f64> {
    let mut wrong = 0usize;
    let mut total = 0usize;
    for (gold, pred) in pairs {
        check_same_words(gold, pred)?;
        for (g, p) in tags(gold).iter().zip(tags(pred)) {
            total += 1;
            if *g != p {
                wrong += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Domain("no words to score".into()));
    }
    Ok(wrong as f64 / total as f64)
}

/// Exact lower tail P(X <= k) for X ~ Binomial(n, 1/2).
pub fn exact_binomial_lower_tail(n: u64, k: u64) -> f64 {
    // Multiplicative recurrence on C(n, i) keeps everything in f64 range
    // for the trial counts used here.
    let mut coeff = 1.0f64; // C(n, 0)
    let mut sum = 1.0f64;
    for i in 1..=k {
        coeff *= (n - i + 1) as f64 / i as f64;
        sum += coeff;
    }
    sum * 0.5f64.powi(n as i32)
}

/// Continuity-corrected normal approximation to the same lower tail.
pub fn demoivre_laplace_lower_tail(n: u64, k: u64) -> f64 {
    let mean = n as f64 / 2.0;
    let sd = (n as f64).sqrt() / 2.0;
    normal_cdf((k as f64 + 0.5 - mean) / sd)
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (absolute error below 1.5e-7).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Probability that two systems with these discordant counts are equally
/// accurate: the lower tail of Binomial(c12+c21, 1/2) at the smaller count,
/// computed exactly for up to 30 trials and by the DeMoivre-Laplace
/// approximation above that. Equal counts are the no-evidence case and
/// return 0.5 exactly.
pub fn significance(c12: u64, c21: u64) -> Result<f64> {
    if c12 == 0 && c21 == 0 {
        return Err(Error::Domain(
            "no discriminating sentences: both counts are zero".into(),
        ));
    }
    if c12 == c21 {
        return Ok(0.5);
    }
    let n = c12 + c21;
    let k = c12.min(c21);
    Ok(if n <= 30 {
        exact_binomial_lower_tail(n, k)
    } else {
        demoivre_laplace_lower_tail(n, k)
    })
}

/// One sentence's evaluation inputs: the gold tree, the ranked predictions,
/// and optionally the log2 probability the model assigns the gold tree.
#[derive(Debug, Clone)]
pub struct SentenceResult {
    pub gold: TreebankTree,
    pub predictions: Vec<TreebankTree>,
    pub gold_log2: Option<f64>,
}

/// Aggregate evaluation over a result set.
#[derive(Debug, Clone)]
pub struct Report {
    pub sentences: usize,
    pub exact: f64,
    pub exnotag: f64,
    pub extop5: f64,
    pub extop20: f64,
    /// Fraction of sentences with zero crossing-brackets violations.
    pub cb_zero: f64,
    /// The same fraction restricted to sentences within the length filter:
    /// (limit, fraction, sentences within the limit).
    pub cb_zero_filtered: Option<(usize, f64, usize)>,
    pub precision: f64,
    pub recall: f64,
    pub tag_error: f64,
    /// 2^(-(1/N) * sum log2 P(gold tree | sentence)), when probabilities
    /// were supplied for every sentence.
    pub test_perplexity: Option<f64>,
}

pub fn evaluate(results: &[SentenceResult], cb_len_filter: Option<usize>) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::Domain("empty result set".into()));
    }
    let n = results.len();
    let mut exact = 0usize;
    let mut exnotag = 0usize;
    let mut extop5 = 0usize;
    let mut extop20 = 0usize;
    let mut cb_zero = 0usize;
    let mut cb_zero_f = 0usize;
    let mut n_filtered = 0usize;
    let mut matched = 0usize;
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    let mut wrong_tags = 0usize;
    let mut total_tags = 0usize;
    let mut log2_sum = 0.0f64;
    let mut have_all_logs = true;

    for r in results {
        let top = r.predictions.first();
        if let Some(top) = top {
            check_same_words(&r.gold, top)?;
            if exact_match(&r.gold, top, false)? {
                exact += 1;
            }
            if exact_match(&r.gold, top, true)? {
                exnotag += 1;
            }
            let cb = crossing_brackets(&r.gold, top)?;
            if cb == 0 {
                cb_zero += 1;
            }
            if let Some(limit) = cb_len_filter {
                if r.gold.word_count() <= limit {
                    n_filtered += 1;
                    if cb == 0 {
                        cb_zero_f += 1;
                    }
                }
            }
            let (m, np, ng) = span_matches(&r.gold, top, false);
            matched += m;
            n_pred += np;
            n_gold += ng;
            for (g, p) in tags(&r.gold).iter().zip(tags(top)) {
                total_tags += 1;
                if *g != p {
                    wrong_tags += 1;
                }
            }
        } else {
            // No parse: wrong in every column, all words mistagged, all
            // gold constituents missed.
            n_gold += spans_excluding_root(&r.gold).len();
            total_tags += r.gold.word_count();
            wrong_tags += r.gold.word_count();
            if let Some(limit) = cb_len_filter {
                if r.gold.word_count() <= limit {
                    n_filtered += 1;
                }
            }
        }
        for (rank, p) in r.predictions.iter().enumerate().take(20) {
            if exact_match(&r.gold, p, false)? {
                if rank < 5 {
                    extop5 += 1;
                }
                extop20 += 1;
                break;
            }
        }
        match r.gold_log2 {
            Some(l) => log2_sum += l,
            None => have_all_logs = false,
        }
    }

    Ok(Report {
        sentences: n,
        exact: exact as f64 / n as f64,
        exnotag: exnotag as f64 / n as f64,
        extop5: extop5 as f64 / n as f64,
        extop20: extop20 as f64 / n as f64,
        cb_zero: cb_zero as f64 / n as f64,
        cb_zero_filtered: cb_len_filter.map(|limit| {
            let frac = if n_filtered > 0 {
                cb_zero_f as f64 / n_filtered as f64
            } else {
                0.0
            };
            (limit, frac, n_filtered)
        }),
        precision: if n_pred > 0 {
            matched as f64 / n_pred as f64
        } else {
            1.0
        },
        recall: if n_gold > 0 {
            matched as f64 / n_gold as f64
        } else {
            1.0
        },
        tag_error: if total_tags > 0 {
            wrong_tags as f64 / total_tags as f64
        } else {
            0.0
        },
        test_perplexity: if have_all_logs {
            Some((-log2_sum / n as f64).exp2())
        } else {
            None
        },
    })
}

impl Report {
    /// Aligned human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<30} {:>10}", "metric", "value");
        let _ = writeln!(out, "{:<30} {:>10}", "sentences", self.sentences);
        let pct = |v: f64| format!("{:.1}%", v * 100.0);
        let _ = writeln!(out, "{:<30} {:>10}", "EXACT", pct(self.exact));
        let _ = writeln!(out, "{:<30} {:>10}", "EXNOTAG", pct(self.exnotag));
        let _ = writeln!(out, "{:<30} {:>10}", "EXTOP5", pct(self.extop5));
        let _ = writeln!(out, "{:<30} {:>10}", "EXTOP20", pct(self.extop20));
        let _ = writeln!(
            out,
            "{:<30} {:>10}",
            "zero-crossing sentences",
            pct(self.cb_zero)
        );
        if let Some((limit, frac, count)) = self.cb_zero_filtered {
            let _ = writeln!(
                out,
                "{:<30} {:>10}",
                format!("zero-crossing (<={limit}w, n={count})"),
                pct(frac)
            );
        }
        let _ = writeln!(out, "{:<30} {:>10}", "precision", pct(self.precision));
        let _ = writeln!(out, "{:<30} {:>10}", "recall", pct(self.recall));
        let _ = writeln!(out, "{:<30} {:>10}", "tag error", pct(self.tag_error));
        if let Some(p) = self.test_perplexity {
            let _ = writeln!(out, "{:<30} {:>10.2}", "test perplexity", p);
        }
        let _ = writeln!(
            out,
            "note: the zero-crossing rate counts sentences whose best parse \
             has no crossing-brackets violation"
        );
        out
    }

    /// Machine-readable key=value block.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "sentences={}", self.sentences);
        let _ = writeln!(out, "exact={:.6}", self.exact);
        let _ = writeln!(out, "exnotag={:.6}", self.exnotag);
        let _ = writeln!(out, "extop5={:.6}", self.extop5);
        let _ = writeln!(out, "extop20={:.6}", self.extop20);
        let _ = writeln!(out, "cb_zero={:.6}", self.cb_zero);
        if let Some((limit, frac, count)) = self.cb_zero_filtered {
            let _ = writeln!(out, "cb_zero_len_limit={limit}");
            let _ = writeln!(out, "cb_zero_filtered={frac:.6}");
            let _ = writeln!(out, "cb_zero_filtered_n={count}");
        }
        let _ = writeln!(out, "precision={:.6}", self.precision);
        let _ = writeln!(out, "recall={:.6}", self.recall);
        let _ = writeln!(out, "tag_error={:.6}", self.tag_error);
        if let Some(p) = self.test_perplexity {
            let _ = writeln!(out, "test_perplexity={p:.6}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::parse_bracketed;

    fn t(line: &str) -> TreebankTree {
        parse_bracketed(line).unwrap()
    }

    #[test]
    fn exact_match_variants() {
        let gold = t("[S [N the_AT cat_NN N] sat_VV S]");
        assert!(exact_match(&gold, &gold, false).unwrap());
        let retagged = t("[S [N the_AT cat_NN2 N] sat_VV S]");
        assert!(!exact_match(&gold, &retagged, false).unwrap());
        assert!(exact_match(&gold, &retagged, true).unwrap());
        let relabeled = t("[S [V the_AT cat_NN V] sat_VV S]");
        assert!(!exact_match(&gold, &relabeled, false).unwrap());
        assert!(!exact_match(&gold, &relabeled, true).unwrap());
        let other_words = t("[S [N a_AT cat_NN N] sat_VV S]");
        assert!(exact_match(&gold, &other_words, false).is_err());
    }

    #[test]
    fn crossing_brackets_worked_example() {
        // Treebank: [ [ A B ] [ C D ] [ E F ] G ]
        // Parse:    [ [ A B C ] D [ E F G ] ]
        let gold = t("[S [X A_a B_b X] [X C_c D_d X] [X E_e F_f X] G_g S]");
        let pred = t("[S [X A_a B_b C_c X] D_d [X E_e F_f G_g X] S]");
        let violations = crossing_spans(&gold, &pred);
        assert_eq!(violations, vec![(0, 3)], "[A B C] crosses, [E F G] does not");
        assert_eq!(crossing_brackets(&gold, &pred).unwrap(), 1);
        assert_eq!(crossing_brackets(&gold, &gold).unwrap(), 0);
    }

    #[test]
    fn precision_recall_counts() {
        let gold = t("[S [N a_X b_X N] [N c_X d_X N] S]");
        // One extra non-crossing constituent.
        let extra = t("[S [N a_X b_X N] [N [N c_X d_X N] N] S]");
        let (p, r) = precision_recall(&gold, &extra, false).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
        // One missing constituent.
        let missing = t("[S [N a_X b_X N] c_X d_X S]");
        let (p, r) = precision_recall(&gold, &missing, false).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        assert!((r - 0.5).abs() < 1e-12);
        let (p, r) = precision_recall(&gold, &gold, false).unwrap();
        assert!((p - 1.0).abs() < 1e-12 && (r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn labeled_precision_differs() {
        let gold = t("[S [N a_X b_X N] S]");
        let relabeled = t("[S [V a_X b_X V] S]");
        let (p_unlabeled, _) = precision_recall(&gold, &relabeled, false).unwrap();
        let (p_labeled, _) = precision_recall(&gold, &relabeled, true).unwrap();
        assert!((p_unlabeled - 1.0).abs() < 1e-12);
        assert!(p_labeled < 1.0);
    }

    #[test]
    fn exact_match_implies_no_crossings_and_perfect_pr() {
        let gold = t("[S [N a_X b_X N] [V c_X [N d_X e_X N] V] S]");
        assert!(exact_match(&gold, &gold, false).unwrap());
        assert_eq!(crossing_brackets(&gold, &gold).unwrap(), 0);
        let (p, r) = precision_recall(&gold, &gold, false).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn tag_error_rates() {
        let gold = t("[S a_X b_X c_X d_X e_X f_X g_X h_X i_X j_X S]");
        let one_wrong = t("[S a_X b_X c_X d_X e_Y f_X g_X h_X i_X j_X S]");
        assert_eq!(tagging_error_rate(&[(&gold, &gold)]).unwrap(), 0.0);
        assert!((tagging_error_rate(&[(&gold, &one_wrong)]).unwrap() - 0.1).abs() < 1e-12);
        let all_wrong = t("[S a_Y b_Y c_Y d_Y e_Y f_Y g_Y h_Y i_Y j_Y S]");
        assert_eq!(tagging_error_rate(&[(&gold, &all_wrong)]).unwrap(), 1.0);
    }

    #[test]
    fn significance_reproduces_published_rows() {
        let p = significance(11, 16).unwrap();
        assert!((p - 0.22).abs() < 0.01, "significance(11,16) = {p}");
        let p = significance(23, 30).unwrap();
        assert!((p - 0.21).abs() < 0.01, "significance(23,30) = {p}");
    }

    #[test]
    fn significance_is_symmetric_and_balanced_at_half() {
        for (a, b) in [(11u64, 16u64), (23, 30), (3, 9)] {
            let x = significance(a, b).unwrap();
            let y = significance(b, a).unwrap();
            assert!((x - y).abs() < 1e-12);
        }
        for k in [1u64, 5, 17, 40] {
            assert_eq!(significance(k, k).unwrap(), 0.5);
        }
        assert!(significance(0, 0).is_err());
    }

    #[test]
    fn exact_and_normal_tails_agree_in_band() {
        for n in 20..=60u64 {
            for k in 0..=n / 2 {
                let e = exact_binomial_lower_tail(n, k);
                let d = demoivre_laplace_lower_tail(n, k);
                assert!(
                    (e - d).abs() < 0.02,
                    "n={n} k={k}: exact {e} vs normal {d}"
                );
            }
        }
    }

    #[test]
    fn report_counts_rank_columns() {
        let gold = t("[S [N a_X b_X N] c_X S]");
        let wrong = t("[S a_X [N b_X c_X N] S]");
        let results = vec![
            SentenceResult {
                gold: gold.clone(),
                predictions: vec![gold.clone()],
                gold_log2: Some(-1.0),
            },
            SentenceResult {
                gold: gold.clone(),
                // Gold at rank 4: counts toward EXTOP5/EXTOP20 only.
                predictions: vec![wrong.clone(), wrong.clone(), wrong.clone(), gold.clone()],
                gold_log2: Some(-2.0),
            },
            SentenceResult {
                gold: gold.clone(),
                predictions: vec![],
                gold_log2: Some(-3.0),
            },
        ];
        let report = evaluate(&results, Some(25)).unwrap();
        assert!((report.exact - 1.0 / 3.0).abs() < 1e-12);
        assert!((report.extop5 - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.extop20 - 2.0 / 3.0).abs() < 1e-12);
        assert!(report.exact <= report.extop5 && report.extop5 <= report.extop20);
        let perp = report.test_perplexity.unwrap();
        assert!((perp - 2f64.powf(2.0)).abs() < 1e-9);
        assert!(!report.render_table().is_empty());
        assert!(report.render_kv().contains("exact=0.333333"));
    }
}
