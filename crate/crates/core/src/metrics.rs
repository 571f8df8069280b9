//! Clustering quality metrics.
//!
//! Cluster labels are arbitrary, so accuracy is computed under the best
//! one-to-one matching between predicted and true labels (Hungarian
//! algorithm on the negated confusion matrix). Normalized mutual
//! information is label-permutation invariant by construction.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label slices differ in length: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("need at least one label")]
    Empty,
}

/// Minimum-cost perfect matching on a square cost matrix, `O(n^3)`.
///
/// Returns the column assigned to each row. Ties resolve
/// deterministically.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(cost.ncols(), n, "cost matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // Potentials u, v and matching p over 1-based columns; p[0] holds the
    // row currently being augmented.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Joint label counts; rows are predicted labels, columns true labels.
/// The matrix is square over `max(label) + 1` across both slices.
pub fn confusion_matrix(pred: &[usize], truth: &[usize]) -> Result<Array2<f64>, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = pred
        .iter()
        .chain(truth.iter())
        .max()
        .expect("nonempty")
        + 1;
    let mut counts = Array2::zeros((k, k));
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        counts[[p, t]] += 1.0;
    }
    Ok(counts)
}

/// Fraction of points whose predicted cluster maps to their true label
/// under the best one-to-one relabeling.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    let counts = confusion_matrix(pred, truth)?;
    let matching = hungarian(&counts.mapv(|c| -c));
    let matched: f64 = matching
        .iter()
        .enumerate()
        .map(|(row, &col)| counts[[row, col]])
        .sum();
    Ok(matched / pred.len() as f64)
}

/// Normalized mutual information with natural logarithms, normalized by
/// the arithmetic mean of the two label entropies. A zero denominator
/// (both partitions trivial) yields zero.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    let counts = confusion_matrix(pred, truth)?;
    let n = pred.len() as f64;
    let row_sums: Vec<f64> = counts.rows().into_iter().map(|r| r.sum()).collect();
    let col_sums: Vec<f64> = counts.columns().into_iter().map(|c| c.sum()).collect();
    let mut mi = 0.0;
    for (i, &a) in row_sums.iter().enumerate() {
        for (j, &b) in col_sums.iter().enumerate() {
            let nij = counts[[i, j]];
            if nij > 0.0 {
                mi += (nij / n) * ((n * nij) / (a * b)).ln();
            }
        }
    }
    let entropy = |sums: &[f64]| -> f64 {
        sums.iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| {
                let p = s / n;
                -p * p.ln()
            })
            .sum()
    };
    let denom = 0.5 * (entropy(&row_sums) + entropy(&col_sums));
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hungarian_solves_hand_case() {
        // Optimal assignment: row 0 -> col 1, row 1 -> col 0, cost 2.
        let cost = array![[10.0, 1.0], [1.0, 10.0]];
        assert_eq!(hungarian(&cost), vec![1, 0]);
        let cost = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        // Known optimum: 1 + 2 + 2 = 5 via (0,1), (1,0), (2,2).
        assert_eq!(hungarian(&cost), vec![1, 0, 2]);
    }

    #[test]
    fn hungarian_handles_negative_costs() {
        let cost = array![[-5.0, 0.0], [0.0, -5.0]];
        assert_eq!(hungarian(&cost), vec![0, 1]);
    }

    #[test]
    fn accuracy_is_permutation_invariant() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let relabeled = vec![2, 2, 0, 0, 1, 1];
        assert_eq!(clustering_accuracy(&relabeled, &truth).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_hand_case() {
        // Predicted cluster 0 covers two of three 0s, cluster 1 covers two
        // of three 1s under the identity matching.
        let truth = vec![0, 0, 0, 1, 1, 1];
        let pred = vec![0, 0, 1, 1, 1, 0];
        assert!((clustering_accuracy(&pred, &truth).unwrap() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_rejects_mismatched_lengths() {
        assert!(matches!(
            clustering_accuracy(&[0, 1], &[0]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            clustering_accuracy(&[], &[]),
            Err(MetricsError::Empty)
        ));
    }

    #[test]
    fn nmi_extremes() {
        let truth = vec![0, 0, 1, 1];
        assert!((nmi(&[1, 1, 0, 0], &truth).unwrap() - 1.0).abs() < 1e-12);
        // One predicted cluster carries no information.
        assert_eq!(nmi(&[0, 0, 0, 0], &truth).unwrap(), 0.0);
    }

    #[test]
    fn nmi_hand_value() {
        // Contingency [[2, 1], [0, 1]]: MI and entropies by hand.
        let pred = vec![0, 0, 0, 1];
        let truth = vec![0, 0, 1, 1];
        let n = 4.0f64;
        let mi = (2.0 / n) * ((n * 2.0) / (3.0 * 2.0)).ln()
            + (1.0 / n) * ((n * 1.0) / (3.0 * 2.0)).ln()
            + (1.0 / n) * ((n * 1.0) / (1.0 * 2.0)).ln();
        let h_pred = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let h_truth = -(0.5f64 * 0.5f64.ln() + 0.5 * 0.5f64.ln());
        let expect = mi / (0.5 * (h_pred + h_truth));
        assert!((nmi(&pred, &truth).unwrap() - expect).abs() < 1e-12);
    }
}
