//! Partition agreement indices (ARI, AMI, matched accuracy) and parameter
//! estimation errors.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use pathfinding::prelude::{kuhn_munkres, Matrix};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::NOISE;

/// Cross-tabulation of two labelings. Rows follow the sorted distinct labels
/// of the first argument, columns those of the second.
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new<A: Ord + Clone, B: Ord + Clone>(a: &[A], b: &[B]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
        }
        let ra = index_labels(a);
        let rb = index_labels(b);
        let mut counts = vec![vec![0u64; rb.len()]; ra.len()];
        for (x, y) in a.iter().zip(b) {
            counts[ra[x]][rb[y]] += 1;
        }
        Ok(Self { counts, n: a.len() as u64 })
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let cols = self.counts.first().map_or(0, Vec::len);
        (0..cols).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    /// True when every row and every column has exactly one nonzero cell,
    /// i.e. the two labelings agree up to renaming.
    pub fn is_bijective(&self) -> bool {
        let rows_ok = self.counts.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1);
        let cols = self.counts.first().map_or(0, Vec::len);
        let cols_ok =
            (0..cols).all(|j| self.counts.iter().filter(|r| r[j] > 0).count() == 1);
        rows_ok && cols_ok
    }
}

fn index_labels<T: Ord + Clone>(labels: &[T]) -> BTreeMap<T, usize> {
    let mut map = BTreeMap::new();
    for l in labels {
        map.entry(l.clone()).or_insert(0);
    }
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    map
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Drops the positions whose truth label is [`NOISE`].
pub fn strip_noise<T: Clone>(pred: &[T], truth: &[i64]) -> Result<(Vec<T>, Vec<i64>)> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), found: pred.len() });
    }
    Ok(pred
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t != NOISE)
        .map(|(p, &t)| (p.clone(), t))
        .unzip())
}

/// Hubert-Arabie adjusted Rand index.
pub fn ari<A: Ord + Clone, B: Ord + Clone>(a: &[A], b: &[B]) -> Result<f64> {
    let table = ContingencyTable::new(a, b)?;
    let index: f64 = table.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let sa: f64 = table.row_sums().into_iter().map(comb2).sum();
    let sb: f64 = table.col_sums().into_iter().map(comb2).sum();
    let total = comb2(table.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        // both partitions trivial (one block or all singletons) in the same way
        return Ok(if table.is_bijective() { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AmiNormalization {
    #[default]
    Arithmetic,
    Max,
}

fn entropy(sums: &[u64], n: f64) -> f64 {
    sums.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn mutual_information(table: &ContingencyTable) -> f64 {
    let n = table.n as f64;
    let ra = table.row_sums();
    let cb = table.col_sums();
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (ra[i] as f64 * cb[j] as f64)).ln();
            }
        }
    }
    mi
}

/// Expected mutual information under the hypergeometric permutation model
/// with the margins of `table` held fixed.
pub fn expected_mutual_information(table: &ContingencyTable) -> f64 {
    let n = table.n;
    let nf = n as f64;
    let lg = |v: u64| ln_gamma(v as f64 + 1.0);
    let mut emi = 0.0;
    for &a in &table.row_sums() {
        for &b in &table.col_sums() {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let fixed = lg(a) + lg(b) + lg(n - a) + lg(n - b) - lg(n);
            for nij in lo..=hi {
                let log_p = fixed - lg(nij) - lg(a - nij) - lg(b - nij) - lg(n + nij - a - b);
                let x = nij as f64;
                emi += x / nf * (nf * x / (a as f64 * b as f64)).ln() * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with the exact expected MI and natural logs.
/// When the denominator vanishes the value is 1 for labelings equal up to
/// renaming and 0 otherwise.
pub fn ami_with<A: Ord + Clone, B: Ord + Clone>(
    a: &[A],
    b: &[B],
    norm: AmiNormalization,
) -> Result<f64> {
    let table = ContingencyTable::new(a, b)?;
    let n = table.n as f64;
    let ha = entropy(&table.row_sums(), n);
    let hb = entropy(&table.col_sums(), n);
    let mi = mutual_information(&table);
    let emi = expected_mutual_information(&table);
    let scale = match norm {
        AmiNormalization::Arithmetic => 0.5 * (ha + hb),
        AmiNormalization::Max => ha.max(hb),
    };
    let denom = scale - emi;
    if denom.abs() < 1e-15 {
        return Ok(if table.is_bijective() { 1.0 } else { 0.0 });
    }
    Ok((mi - emi) / denom)
}

pub fn ami<A: Ord + Clone, B: Ord + Clone>(a: &[A], b: &[B]) -> Result<f64> {
    ami_with(a, b, AmiNormalization::Arithmetic)
}

/// Optimal one-to-one assignment of rows to columns maximizing the total
/// count. Returns, for each row, the matched column (or `None` when there are
/// more rows than columns and the row is left over).
fn max_assignment(counts: &[Vec<u64>]) -> (u64, Vec<Option<usize>>) {
    let rows = counts.len();
    let cols = counts.first().map_or(0, Vec::len);
    let size = rows.max(cols);
    if size == 0 {
        return (0, Vec::new());
    }
    let mut data = vec![0i64; size * size];
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            data[i * size + j] = c as i64;
        }
    }
    let weights = Matrix::from_vec(size, size, data).expect("square matrix");
    let (total, assign) = kuhn_munkres(&weights);
    let rowmap = (0..rows).map(|i| (assign[i] < cols).then_some(assign[i])).collect();
    (total as u64, rowmap)
}

/// Fraction of observations correctly classified after the best one-to-one
/// matching of predicted to true labels.
pub fn accuracy<A: Ord + Clone, B: Ord + Clone>(pred: &[A], truth: &[B]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    if table.n == 0 {
        return Err(Error::InvalidParameter("empty labeling".into()));
    }
    let (matched, _) = max_assignment(&table.counts);
    Ok(matched as f64 / table.n as f64)
}

/// Trace-corrected scatter error: the estimate is rescaled to the trace of
/// the truth, then the Frobenius norm of the difference is divided by `m`.
pub fn sigma_error(sigma_true: &DMatrix<f64>, sigma_hat: &DMatrix<f64>) -> Result<f64> {
    if sigma_true.shape() != sigma_hat.shape() {
        return Err(Error::DimensionMismatch {
            expected: sigma_true.nrows(),
            found: sigma_hat.nrows(),
        });
    }
    let th = sigma_hat.trace();
    if th == 0.0 || !th.is_finite() {
        return Err(Error::InvalidParameter("estimate has zero trace".into()));
    }
    let m = sigma_true.nrows() as f64;
    let scale = sigma_true.trace() / th;
    let mut sum = 0.0;
    for (t, h) in sigma_true.iter().zip(sigma_hat.iter()) {
        let d = t - h * scale;
        sum += d * d;
    }
    Ok((sum / (m * m)).sqrt())
}

pub fn mu_error(mu_true: &DVector<f64>, mu_hat: &DVector<f64>) -> Result<f64> {
    if mu_true.len() != mu_hat.len() {
        return Err(Error::DimensionMismatch { expected: mu_true.len(), found: mu_hat.len() });
    }
    Ok((mu_true - mu_hat).norm())
}

/// Aligns estimated clusters with true ones. Entry `j` of the result is the
/// estimated cluster matched to true cluster `j`, chosen to maximize label
/// agreement. True labels equal to [`NOISE`] are ignored.
pub fn match_clusters(truth_labels: &[i64], est_labels: &[usize], k: usize) -> Result<Vec<usize>> {
    if truth_labels.len() != est_labels.len() {
        return Err(Error::DimensionMismatch {
            expected: truth_labels.len(),
            found: est_labels.len(),
        });
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &e) in truth_labels.iter().zip(est_labels) {
        if t == NOISE {
            continue;
        }
        let t = usize::try_from(t)
            .ok()
            .filter(|&t| t < k)
            .ok_or_else(|| Error::InvalidParameter(format!("true label {t} outside 0..{k}")))?;
        if e >= k {
            return Err(Error::InvalidParameter(format!("estimated label {e} outside 0..{k}")));
        }
        counts[t][e] += 1;
    }
    let (_, map) = max_assignment(&counts);
    Ok(map.into_iter().map(|c| c.expect("square table")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_count_ari(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                match (a[i] == a[j], b[i] == b[j]) {
                    (true, true) => both += 1.0,
                    (true, false) => only_a += 1.0,
                    (false, true) => only_b += 1.0,
                    (false, false) => neither += 1.0,
                }
            }
        }
        let total = both + only_a + only_b + neither;
        let expected = (both + only_a) * (both + only_b) / total;
        let max = 0.5 * ((both + only_a) + (both + only_b));
        (both - expected) / (max - expected)
    }

    #[test]
    fn ari_trivial_cases() {
        let a = [0, 0, 1, 1, 2, 2];
        assert_eq!(ari(&a, &[5, 5, 3, 3, 9, 9]).unwrap(), 1.0);
        let one = [0usize; 6];
        let singles: Vec<usize> = (0..6).collect();
        assert_eq!(ari(&one, &singles).unwrap(), 0.0);
        assert!(ari(&one, &singles[..5]).is_err());
    }

    #[test]
    fn ari_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(5..=120);
            let ka = rng.random_range(2..=4);
            let kb = rng.random_range(2..=4);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..kb)).collect();
            let oracle = pair_count_ari(&a, &b);
            if oracle.is_finite() {
                assert!((ari(&a, &b).unwrap() - oracle).abs() < 1e-12);
            }
        }
    }

    fn brute_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
        fn perms(k: usize) -> Vec<Vec<usize>> {
            if k == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(k - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, k - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(k)
            .into_iter()
            .map(|p| pred.iter().zip(truth).filter(|(a, b)| p[**a] == **b).count())
            .max()
            .unwrap() as f64
            / pred.len() as f64
    }

    #[test]
    fn accuracy_matches_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..=12);
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let got = accuracy(&pred, &truth).unwrap();
            assert!((got - brute_accuracy(&pred, &truth, 3)).abs() < 1e-12);
        }
        assert_eq!(accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(accuracy(&[2, 2, 0, 1], &[0, 0, 1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn ami_identical_and_degenerate() {
        let a = [0, 0, 1, 1, 2, 2, 2];
        assert!((ami(&a, &[4, 4, 1, 1, 0, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ami(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(ami(&[0, 0, 0, 0], &[0, 1, 2, 3]).unwrap(), 0.0);
        let max = ami_with(&a, &[0, 0, 1, 1, 2, 2, 1], AmiNormalization::Max).unwrap();
        let mean = ami(&a, &[0, 0, 1, 1, 2, 2, 1]).unwrap();
        assert!(max <= mean + 1e-12);
    }

    #[test]
    fn expected_mi_matches_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 60;
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut b: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let exact = expected_mutual_information(&ContingencyTable::new(&a, &b).unwrap());
        let reps = 10_000;
        let mut values = Vec::with_capacity(reps);
        for _ in 0..reps {
            b.shuffle(&mut rng);
            values.push(mutual_information(&ContingencyTable::new(&a, &b).unwrap()));
        }
        let mean = values.iter().sum::<f64>() / reps as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn sigma_error_examples() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let est = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        assert!((sigma_error(&eye, &est).unwrap() - 0.72f64.sqrt() / 2.0).abs() < 1e-12);
        assert!((sigma_error(&eye, &est).unwrap() - 0.4243).abs() < 5e-5);
        assert!(sigma_error(&eye, &(&eye * 3.7)).unwrap() < 1e-15);
        assert!(sigma_error(&eye, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn mu_error_examples() {
        let a = DVector::from_vec(vec![1.0, 2.0, -0.5, 0.3, 4.0]);
        let b = DVector::from_vec(vec![0.2, 2.5, 1.5, 0.3, -1.0]);
        let naive: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!((mu_error(&a, &b).unwrap() - naive).abs() < 1e-15);
        let mut e1 = DVector::zeros(5);
        e1[0] = 1.0;
        assert_eq!(mu_error(&DVector::zeros(5), &e1).unwrap(), 1.0);
        assert!(mu_error(&a, &DVector::zeros(4)).is_err());
    }

    #[test]
    fn matching_cases() {
        assert_eq!(match_clusters(&[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap(), vec![0, 1]);
        assert_eq!(match_clusters(&[0, 0, 1, 1, NOISE], &[1, 1, 0, 0, 0], 2).unwrap(), vec![1, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let truth: Vec<i64> = (0..30).map(|_| rng.random_range(0..3)).collect();
            let est: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
            let perm = match_clusters(&truth, &est, 3).unwrap();
            let agree = |p: &[usize]| {
                truth.iter().zip(&est).filter(|(t, e)| p[**t as usize] == **e).count()
            };
            let best = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]]
                .iter()
                .map(|p| agree(p))
                .max()
                .unwrap();
            assert_eq!(agree(&perm), best);
        }
    }

    #[test]
    fn noise_is_stripped() {
        let (p, t) = strip_noise(&[3usize, 4, 5], &[0, NOISE, 1]).unwrap();
        assert_eq!(p, vec![3, 5]);
        assert_eq!(t, vec![0, 1]);
    }

    proptest! {
        #[test]
        fn indices_symmetric_and_rename_invariant(
            pairs in proptest::collection::vec((0usize..4, 0usize..3), 2..80),
            shift in 1usize..5,
        ) {
            let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let renamed: Vec<usize> = a.iter().map(|v| (v + shift) * 7 % 31).collect();
            let r = ari(&a, &b).unwrap();
            prop_assert!((r - ari(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((r - ari(&renamed, &b).unwrap()).abs() < 1e-12);
            let i = ami(&a, &b).unwrap();
            prop_assert!((i - ami(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((i - ami(&renamed, &b).unwrap()).abs() < 1e-12);
            prop_assert!(i <= 1.0 + 1e-12);
        }

        #[test]
        fn constant_predictor_scores_largest_prior(truth in proptest::collection::vec(0usize..4, 1..100),
                                                   c in 0usize..4) {
            let pred = vec![c; truth.len()];
            let mut counts = [0usize; 4];
            for &t in &truth { counts[t] += 1; }
            let prior = *counts.iter().max().unwrap() as f64 / truth.len() as f64;
            prop_assert!((accuracy(&pred, &truth).unwrap() - prior).abs() < 1e-12);
        }

        #[test]
        fn sigma_error_scale_free(d in proptest::collection::vec(0.1f64..5.0, 3), c in 0.01f64..100.0) {
            let t = DMatrix::<f64>::identity(3, 3);
            let h = DMatrix::from_diagonal(&DVector::from_vec(d));
            let a = sigma_error(&t, &h).unwrap();
            let b = sigma_error(&t, &(&h * c)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
