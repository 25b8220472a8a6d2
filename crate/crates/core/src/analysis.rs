//! Interpretability metrics and statistics for evolved heuristics.
//!
//! Set and size similarity between rules, token usage counts, rooted-subtree
//! pattern mining with coverage, offspring-to-corpus pattern similarity, and
//! the Wilcoxon rank-sum (Mann-Whitney U) test with an exact enumeration
//! path for small samples and a tie-corrected normal approximation
//! otherwise.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use thiserror::Error;

use crate::expr::{ExprTree, Token};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("sample is empty")]
    EmptySample,
    #[error("tree size must be at least 1, got {0}")]
    InvalidSize(usize),
}

/// Jaccard similarity of two token sets; both empty counts as identical.
pub fn jaccard(a: &BTreeSet<Token>, b: &BTreeSet<Token>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// The set of terminals a rule uses.
pub fn terminal_set(tree: &ExprTree) -> BTreeSet<Token> {
    tree.nodes().iter().copied().filter(|t| t.is_terminal()).collect()
}

/// `1 - |s1 - s2| / max(s1, s2)` over node counts.
pub fn size_similarity(s1: usize, s2: usize) -> Result<f64, AnalysisError> {
    if s1 < 1 {
        return Err(AnalysisError::InvalidSize(s1));
    }
    if s2 < 1 {
        return Err(AnalysisError::InvalidSize(s2));
    }
    let diff = s1.abs_diff(s2) as f64;
    Ok(1.0 - diff / s1.max(s2) as f64)
}

/// Exact occurrence count per token; counts sum to the tree size.
pub fn usage_counts(tree: &ExprTree) -> BTreeMap<Token, usize> {
    let mut counts = BTreeMap::new();
    for &t in tree.nodes() {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

/// One mined pattern: a canonical subtree with its occurrence count and the
/// share of all observed subtrees it accounts for (percent).
#[derive(Clone, Debug)]
pub struct PatternRow {
    pub pattern: ExprTree,
    pub frequency: usize,
    pub coverage: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PatternTable {
    /// Sorted by descending frequency (ties by canonical key).
    pub rows: Vec<PatternRow>,
    pub total_subtrees: usize,
}

/// Enumerates every rooted subtree of every corpus tree (each occurrence
/// counts), groups by canonical prefix key, and returns the `top_n` most
/// frequent. Coverage over all patterns sums to 100% before truncation.
pub fn mine_patterns(corpus: &[ExprTree], top_n: usize) -> PatternTable {
    debug_assert!(!corpus.is_empty(), "pattern mining over an empty corpus");
    let mut groups: HashMap<String, (ExprTree, usize)> = HashMap::new();
    let mut total = 0usize;
    for tree in corpus {
        for k in 0..tree.size() {
            let sub = tree.subtree_at(k).expect("index in range");
            total += 1;
            groups
                .entry(sub.prefix_key())
                .and_modify(|(_, c)| *c += 1)
                .or_insert((sub, 1));
        }
    }
    let mut rows: Vec<(String, ExprTree, usize)> = groups
        .into_iter()
        .map(|(key, (tree, count))| (key, tree, count))
        .collect();
    rows.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    let rows = rows
        .into_iter()
        .take(top_n)
        .map(|(_, pattern, frequency)| PatternRow {
            pattern,
            frequency,
            coverage: frequency as f64 / total as f64 * 100.0,
        })
        .collect();
    PatternTable {
        rows,
        total_subtrees: total,
    }
}

/// Canonical keys of every distinct rooted subtree in a corpus.
pub fn pattern_key_set(corpus: &[ExprTree]) -> HashSet<String> {
    let mut keys = HashSet::new();
    for tree in corpus {
        for k in 0..tree.size() {
            keys.insert(tree.subtree_at(k).expect("index in range").prefix_key());
        }
    }
    keys
}

/// Percentage of the offspring's distinct rooted subtrees that appear in the
/// corpus pattern set.
pub fn pattern_similarity(offspring: &ExprTree, corpus_patterns: &HashSet<String>) -> f64 {
    let distinct: HashSet<String> = (0..offspring.size())
        .map(|k| offspring.subtree_at(k).expect("index in range").prefix_key())
        .collect();
    let shared = distinct
        .iter()
        .filter(|key| corpus_patterns.contains(*key))
        .count();
    shared as f64 / distinct.len() as f64 * 100.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankSumMethod {
    Exact,
    NormalApproximation,
    /// All pooled values identical; the test carries no information.
    Degenerate,
}

#[derive(Clone, Debug)]
pub struct RankSumResult {
    /// Mann-Whitney U statistic for the first sample.
    pub statistic: f64,
    pub p_value: f64,
    pub method: RankSumMethod,
}

/// Wilcoxon rank-sum test, two-sided. Uses exact enumeration for pooled
/// sizes up to 12 and the tie-corrected normal approximation with continuity
/// correction otherwise. Identical pooled values degenerate to `p = 1`.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSumResult, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::EmptySample);
    }
    let pooled_identical = a
        .iter()
        .chain(b.iter())
        .all(|&v| v == a[0]);
    if pooled_identical {
        return Ok(RankSumResult {
            statistic: (a.len() * b.len()) as f64 / 2.0,
            p_value: 1.0,
            method: RankSumMethod::Degenerate,
        });
    }
    if a.len() + b.len() <= 12 {
        rank_sum_exact(a, b)
    } else {
        rank_sum_normal(a, b)
    }
}

/// Midranks of the pooled sample, in pooled order (a then b).
fn midranks(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len() + b.len();
    let mut order: Vec<usize> = (0..n).collect();
    let value = |i: usize| if i < a.len() { a[i] } else { b[i - a.len()] };
    order.sort_by(|&x, &y| value(x).total_cmp(&value(y)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && value(order[j + 1]) == value(order[i]) {
            j += 1;
        }
        // Positions i..=j share the average rank.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let ranks = midranks(a, b);
    let r1: f64 = ranks[..a.len()].iter().sum();
    r1 - (a.len() * (a.len() + 1)) as f64 / 2.0
}

/// Exact two-sided test via the distribution of the rank sum over all
/// equally likely assignments of ranks to the first sample. Ties are handled
/// through midranks (doubled to keep integer sums); the p-value doubles the
/// smaller tail and caps at 1.
pub fn rank_sum_exact(a: &[f64], b: &[f64]) -> Result<RankSumResult, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::EmptySample);
    }
    let n1 = a.len();
    let n = n1 + b.len();
    let ranks = midranks(a, b);
    // Doubled midranks are integers.
    let doubled: Vec<usize> = {
        let mut sorted: Vec<f64> = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.iter().map(|r| (2.0 * r).round() as usize).collect()
    };
    let target: usize = ranks[..n1].iter().map(|r| (2.0 * r).round() as usize).sum();

    // dp[k][s] = number of k-subsets of the doubled ranks with sum s.
    let max_sum: usize = doubled.iter().sum();
    let mut dp = vec![vec![0u128; max_sum + 1]; n1 + 1];
    dp[0][0] = 1;
    for &r in &doubled {
        for k in (1..=n1).rev() {
            for s in (r..=max_sum).rev() {
                dp[k][s] += dp[k - 1][s - r];
            }
        }
    }
    let total: u128 = dp[n1].iter().sum();
    let lower: u128 = dp[n1][..=target].iter().sum();
    let upper: u128 = dp[n1][target..].iter().sum();
    let p_lower = lower as f64 / total as f64;
    let p_upper = upper as f64 / total as f64;
    let p = (2.0 * p_lower.min(p_upper)).min(1.0);
    Ok(RankSumResult {
        statistic: u_statistic(a, b),
        p_value: p,
        method: RankSumMethod::Exact,
    })
}

/// Normal approximation with tie correction and continuity correction.
pub fn rank_sum_normal(a: &[f64], b: &[f64]) -> Result<RankSumResult, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::EmptySample);
    }
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let n = n1 + n2;
    let u = u_statistic(a, b);
    let mu = n1 * n2 / 2.0;

    // Tie correction from the sizes of tied groups in the pooled sample.
    let mut pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1] == pooled[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(RankSumResult {
            statistic: u,
            p_value: 1.0,
            method: RankSumMethod::Degenerate,
        });
    }
    let diff = u - mu;
    let corrected = if diff > 0.0 {
        diff - 0.5
    } else if diff < 0.0 {
        diff + 0.5
    } else {
        0.0
    };
    let z = corrected / var.sqrt();
    let p = (2.0 * (1.0 - standard_normal_cdf(z.abs()))).min(1.0);
    Ok(RankSumResult {
        statistic: u,
        p_value: p,
        method: RankSumMethod::NormalApproximation,
    })
}

/// Standard normal CDF via a rational erfc approximation (absolute error
/// below 1.2e-7).
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{random_tree, GrowMethod};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(tokens: &[Token]) -> BTreeSet<Token> {
        tokens.iter().copied().collect()
    }

    fn tree(tokens: &[Token]) -> ExprTree {
        ExprTree::from_nodes(tokens.to_vec()).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        use Token::*;
        let a = set(&[Pt, Wkr, Niq]);
        assert_eq!(jaccard(&a, &a), 1.0);
        let b = set(&[Pt, Wkr, Mwt]);
        assert_eq!(jaccard(&a, &b), 0.5);
        let disjoint = set(&[Tis, Owt]);
        assert_eq!(jaccard(&a, &disjoint), 0.0);
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 1.0);
        // Symmetry and range over random sets.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x: BTreeSet<Token> = crate::expr::TERMINALS
                .iter()
                .copied()
                .filter(|_| rng.random_bool(0.5))
                .collect();
            let y: BTreeSet<Token> = crate::expr::TERMINALS
                .iter()
                .copied()
                .filter(|_| rng.random_bool(0.5))
                .collect();
            let j = jaccard(&x, &y);
            assert_eq!(j, jaccard(&y, &x));
            assert!((0.0..=1.0).contains(&j));
            assert_eq!(j == 1.0, x == y);
        }
    }

    #[test]
    fn size_similarity_examples() {
        assert_eq!(size_similarity(10, 10).unwrap(), 1.0);
        assert!((size_similarity(19, 17).unwrap() - (1.0 - 2.0 / 19.0)).abs() < 1e-12);
        assert!((size_similarity(19, 17).unwrap() - 0.8947).abs() < 1e-4);
        assert_eq!(size_similarity(10, 5).unwrap(), 0.5);
        assert_eq!(size_similarity(0, 5), Err(AnalysisError::InvalidSize(0)));
        // Symmetric, in (0, 1].
        for (x, y) in [(1, 9), (4, 4), (100, 3)] {
            let s = size_similarity(x, y).unwrap();
            assert_eq!(s, size_similarity(y, x).unwrap());
            assert!(s > 0.0 && s <= 1.0);
            assert_eq!(s == 1.0, x == y);
        }
    }

    #[test]
    fn usage_counts_examples() {
        use Token::*;
        let counts = usage_counts(&tree(&[Sub, Tis, Pt]));
        assert_eq!(counts[&Sub], 1);
        assert_eq!(counts[&Tis], 1);
        assert_eq!(counts[&Pt], 1);
        assert_eq!(counts.len(), 3);

        let single = usage_counts(&ExprTree::leaf(Pt));
        assert_eq!(single.len(), 1);
        assert_eq!(single[&Pt], 1);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = random_tree(0, 6, GrowMethod::Grow, &mut rng);
            let total: usize = usage_counts(&t).values().sum();
            assert_eq!(total, t.size());
        }
    }

    #[test]
    fn mine_patterns_hand_example() {
        use Token::*;
        let corpus = vec![tree(&[Sub, Tis, Pt]), tree(&[Sub, Tis, Pt])];
        let table = mine_patterns(&corpus, 10);
        assert_eq!(table.total_subtrees, 6);
        let top = &table.rows[0];
        assert_eq!(top.pattern.infix_string(), "-(TIS, PT)");
        assert_eq!(top.frequency, 2);
        assert!((top.coverage - 100.0 / 3.0).abs() < 1e-9);
        // Every pattern here has frequency 2: the tree, TIS, PT.
        assert_eq!(table.rows.len(), 3);
        let coverage_sum: f64 = table.rows.iter().map(|r| r.coverage).sum();
        assert!((coverage_sum - 100.0).abs() < 1e-9);
    }

    #[test]
    fn mine_patterns_single_node_corpus() {
        let corpus = vec![ExprTree::leaf(Token::Wiq)];
        let table = mine_patterns(&corpus, 5);
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].coverage, 100.0);
        assert_eq!(table.rows[0].pattern.infix_string(), "WIQ");
    }

    #[test]
    fn mine_patterns_coverage_sums_to_100_before_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corpus: Vec<ExprTree> = (0..20)
            .map(|_| random_tree(1, 5, GrowMethod::Grow, &mut rng))
            .collect();
        let table = mine_patterns(&corpus, usize::MAX);
        let coverage_sum: f64 = table.rows.iter().map(|r| r.coverage).sum();
        assert!((coverage_sum - 100.0).abs() < 1e-6);
        // Frequencies are sorted descending.
        for w in table.rows.windows(2) {
            assert!(w[0].frequency >= w[1].frequency);
        }
    }

    #[test]
    fn pattern_similarity_examples() {
        use Token::*;
        // Offspring assembled entirely from corpus subtrees scores 100.
        let corpus = vec![tree(&[Sub, Tis, Pt]), tree(&[Add, Sub, Tis, Pt, Niq])];
        let keys = pattern_key_set(&corpus);
        let offspring = tree(&[Add, Sub, Tis, Pt, Niq]);
        assert_eq!(pattern_similarity(&offspring, &keys), 100.0);

        // No shared subtree at all (not even a terminal) scores 0.
        let stranger = tree(&[Mul, Wiq, Mwt]);
        assert_eq!(pattern_similarity(&stranger, &keys), 0.0);

        // 4 of 7 distinct subtrees in the corpus: 57.14%.
        let corpus = vec![tree(&[Add, Pt, Wkr]), tree(&[Add, Tis, Niq])];
        let keys = pattern_key_set(&corpus);
        let offspring = tree(&[Add, Mul, Pt, Wkr, Sub, Tis, Niq]);
        let sim = pattern_similarity(&offspring, &keys);
        assert!((sim - 400.0 / 7.0).abs() < 1e-9, "similarity {sim}");
        assert_eq!(format!("{sim:.2}"), "57.14");
    }

    #[test]
    fn wilcoxon_separated_samples_exact() {
        let r = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.method, RankSumMethod::Exact);
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 0.1).abs() < 1e-12, "p = {}", r.p_value);
    }

    #[test]
    fn wilcoxon_identical_samples() {
        // Elementwise equal samples are uninformative.
        let r = wilcoxon_rank_sum(&[1.0, 2.0, 5.0], &[1.0, 2.0, 5.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        // Fully constant pooled sample hits the degenerate rule.
        let r = wilcoxon_rank_sum(&[2.0, 2.0], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.method, RankSumMethod::Degenerate);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn wilcoxon_empty_sample_is_error() {
        assert_eq!(
            wilcoxon_rank_sum(&[], &[1.0]).unwrap_err(),
            AnalysisError::EmptySample
        );
    }

    // Brute-force oracle: enumerate every assignment of pooled positions to
    // the first sample and tabulate the doubled rank sum directly.
    fn brute_force_two_sided_p(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() + b.len();
        let ranks = midranks(a, b);
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let observed: usize = doubled[..a.len()].iter().sum();
        let mut le = 0usize;
        let mut ge = 0usize;
        let mut total = 0usize;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != a.len() {
                continue;
            }
            let sum: usize = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| doubled[i]).sum();
            total += 1;
            if sum <= observed {
                le += 1;
            }
            if sum >= observed {
                ge += 1;
            }
        }
        let p = 2.0 * (le as f64 / total as f64).min(ge as f64 / total as f64);
        p.min(1.0)
    }

    #[test]
    fn exact_path_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 300 {
            let n1 = rng.random_range(1..=4);
            let n2 = rng.random_range(1..=(8 - n1).min(4).max(1));
            if n1 + n2 > 8 {
                continue;
            }
            // Integer samples without ties.
            let mut values: Vec<f64> = Vec::new();
            while values.len() < n1 + n2 {
                let v = rng.random_range(0..100) as f64;
                if !values.contains(&v) {
                    values.push(v);
                }
            }
            let (a, b) = values.split_at(n1);
            let exact = rank_sum_exact(a, b).unwrap();
            let brute = brute_force_two_sided_p(a, b);
            assert!(
                (exact.p_value - brute).abs() < 1e-12,
                "a={a:?} b={b:?}: exact {} vs brute {brute}",
                exact.p_value
            );
            checked += 1;
        }
    }

    #[test]
    fn normal_approximation_close_to_exact_for_n8() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let a: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 40.0).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 40.0).collect();
            let exact = rank_sum_exact(&a, &b).unwrap();
            let normal = rank_sum_normal(&a, &b).unwrap();
            assert!(
                (exact.p_value - normal.p_value).abs() <= 0.02,
                "a={a:?} b={b:?}: exact {} vs normal {}",
                exact.p_value,
                normal.p_value
            );
        }
    }

    #[test]
    fn normal_cdf_reference_values() {
        // The erfc approximation is accurate to ~1.2e-7.
        assert!((standard_normal_cdf(0.0) - 0.5).abs() < 1e-6);
        assert!((standard_normal_cdf(1.96) - 0.975).abs() < 1e-3);
        assert!((standard_normal_cdf(-1.6448536) - 0.05).abs() < 1e-5);
        assert!((standard_normal_cdf(3.0) - 0.9986501).abs() < 1e-5);
    }
}
