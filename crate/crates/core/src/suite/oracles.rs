//! Reference implementations that share no code with the production paths.

/// Cyclic Jacobi eigendecomposition of a symmetric `n x n` row-major matrix.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns of a row-major matrix.
pub fn jacobi_eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = m.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).expect("finite"));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + src];
        }
    }
    (values, vectors)
}

/// AUROC by counting every (anomalous, normal) pair.
pub fn pairwise_auroc(normal: &[f64], anomalous: &[f64]) -> f64 {
    let mut wins = 0u64;
    let mut ties = 0u64;
    for &a in anomalous {
        for &n in normal {
            if a > n {
                wins += 1;
            } else if a == n {
                ties += 1;
            }
        }
    }
    // same rounding path as the production statistic: one half-integer
    // numerator divided by the pair count
    let twice = 2 * wins + ties;
    (twice as f64 * 0.5) / (anomalous.len() as f64 * normal.len() as f64)
}

/// Lowest FPR over every candidate threshold (all observed scores plus one
/// above the maximum) whose TPR reaches `tpr`.
pub fn sweep_fpr(normal: &[f64], anomalous: &[f64], tpr: f64) -> f64 {
    let mut best = f64::INFINITY;
    let top = normal.iter().chain(anomalous).copied().fold(f64::NEG_INFINITY, f64::max);
    for t in normal.iter().chain(anomalous).copied().chain([top + 1.0]) {
        let tp = anomalous.iter().filter(|&&s| s >= t).count() as f64 / anomalous.len() as f64;
        if tp >= tpr {
            let fp = normal.iter().filter(|&&s| s >= t).count() as f64 / normal.len() as f64;
            best = best.min(fp);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        let (vals, vecs) = jacobi_eigh(&a, 3);
        for j in 0..3 {
            for i in 0..3 {
                let av: f64 = (0..3).map(|k| a[i * 3 + k] * vecs[k * 3 + j]).sum();
                assert!((av - vals[j] * vecs[i * 3 + j]).abs() < 1e-12);
            }
        }
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }

    #[test]
    fn pairwise_examples() {
        assert_eq!(pairwise_auroc(&[1.0, 3.0], &[2.0, 4.0]), 0.75);
        assert_eq!(sweep_fpr(&[1., 2., 3., 4.], &[2.5, 3.5, 4.5, 5.5], 0.95), 0.5);
    }
}
