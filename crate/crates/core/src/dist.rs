//! Row-stochastic label matrices and the small helpers shared by inference,
//! training and scoring.

use serde::{Deserialize, Serialize};

use crate::corpus::LabelId;

/// `rows x n_labels` matrix of per-instance label distributions, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatrix {
    n_labels: usize,
    data: Vec<f64>,
}

impl LabelMatrix {
    pub fn uniform(rows: usize, n_labels: usize) -> Self {
        LabelMatrix {
            n_labels,
            data: vec![1.0 / n_labels as f64; rows * n_labels],
        }
    }

    pub fn zeros(rows: usize, n_labels: usize) -> Self {
        LabelMatrix {
            n_labels,
            data: vec![0.0; rows * n_labels],
        }
    }

    /// Panics if the rows have inconsistent lengths.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], n_labels: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * n_labels);
        for r in rows {
            assert_eq!(r.as_ref().len(), n_labels, "row length mismatch");
            data.extend_from_slice(r.as_ref());
        }
        LabelMatrix { n_labels, data }
    }

    pub fn one_hot(labels: &[LabelId], n_labels: usize) -> Self {
        let mut m = LabelMatrix::zeros(labels.len(), n_labels);
        for (i, &l) in labels.iter().enumerate() {
            m.row_mut(i)[l] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        if self.n_labels == 0 {
            0
        } else {
            self.data.len() / self.n_labels
        }
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_labels..(i + 1) * self.n_labels]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_labels..(i + 1) * self.n_labels]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_labels.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn argmax(&self, i: usize) -> LabelId {
        argmax(self.row(i))
    }

    /// Largest deviation of any row sum from 1, or infinity if any entry is
    /// negative or non-finite.
    pub fn max_normalization_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in self.iter_rows() {
            if r.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return f64::INFINITY;
            }
            worst = worst.max((r.iter().sum::<f64>() - 1.0).abs());
        }
        worst
    }

    /// Selects rows in the given order.
    pub fn select(&self, ids: &[usize]) -> LabelMatrix {
        let rows: Vec<&[f64]> = ids.iter().map(|&i| self.row(i)).collect();
        LabelMatrix::from_rows(&rows, self.n_labels)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in nats; zero-probability terms contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Numerically stable log(sum(exp(xs))).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}
