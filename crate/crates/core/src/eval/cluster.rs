use std::collections::BTreeMap;

use crate::nn::Matrix;

use super::{EvalError, Result};

/// Minimum-cost assignment of rows to columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row; `None` only for rows matched to padding.
    pub columns: Vec<Option<usize>>,
    /// Sum of the selected cost cells (padding cells cost 0).
    pub cost: f64,
}

/// Hungarian algorithm with row/column potentials, O(n^3). Rectangular
/// inputs are padded with zero-cost cells to a square.
pub fn hungarian(cost: &Matrix<f64>) -> Result<Assignment> {
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Domain("cost matrix contains non-finite entries".into()));
    }
    let (rows, cols) = (cost.rows(), cost.cols());
    let n = rows.max(cols);
    if n == 0 {
        return Ok(Assignment { columns: Vec::new(), cost: 0.0 });
    }
    let at = |i: usize, j: usize| if i < rows && j < cols { cost.get(i, j) } else { 0.0 };
    // 1-based arrays; p[j] is the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut columns = vec![None; rows];
    let mut total = 0.0;
    for j in 1..=n {
        let i = p[j] - 1;
        if i < rows && j - 1 < cols {
            columns[i] = Some(j - 1);
            total += cost.get(i, j - 1);
        }
    }
    Ok(Assignment { columns, cost: total })
}

fn class_index(truth: &[u32]) -> BTreeMap<u32, usize> {
    let mut map = BTreeMap::new();
    for &t in truth {
        let next = map.len();
        map.entry(t).or_insert(next);
    }
    // Re-number in ascending label order.
    map.keys().copied().enumerate().map(|(i, k)| (k, i)).collect()
}

/// Percentage of images whose category maps to their class under the best
/// one-to-one category-to-class mapping.
pub fn clustering_accuracy(pred: &[usize], truth: &[u32], categories: usize) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(EvalError::Usage(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let classes = class_index(truth);
    if classes.len() != categories {
        return Err(EvalError::Usage(format!(
            "accuracy needs as many categories as classes ({categories} vs {}); use ARI instead",
            classes.len()
        )));
    }
    if let Some(&bad) = pred.iter().find(|&&p| p >= categories) {
        return Err(EvalError::Usage(format!("category {bad} out of range for {categories} categories")));
    }
    let mut counts = Matrix::zeros(categories, categories);
    for (&p, t) in pred.iter().zip(truth) {
        let j = classes[t];
        counts.set(p, j, counts.get(p, j) - 1.0);
    }
    let a = hungarian(&counts)?;
    Ok(-a.cost / pred.len() as f64 * 100.0)
}

fn pairs(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index (Hubert and Arabie). Partitions that are identical
/// score 1 even when the adjustment is undefined; otherwise an undefined
/// adjustment scores 0.
pub fn ari(pred: &[usize], truth: &[u32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(EvalError::Usage(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.len() < 2 {
        return Err(EvalError::Usage("ARI needs at least two items".into()));
    }
    let mut table: BTreeMap<(usize, u32), f64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cols: BTreeMap<u32, f64> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *table.entry((p, t)).or_default() += 1.0;
        *rows.entry(p).or_default() += 1.0;
        *cols.entry(t).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&n| pairs(n)).sum();
    let a: f64 = rows.values().map(|&n| pairs(n)).sum();
    let b: f64 = cols.values().map(|&n| pairs(n)).sum();
    let expected = a * b / pairs(pred.len() as f64);
    let max = 0.5 * (a + b);
    if (max - expected).abs() < 1e-12 {
        let same = table.len() == rows.len() && table.len() == cols.len();
        return Ok(if same { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Number of categories receiving fewer than `threshold * N` of the images.
pub fn degenerate_category_count(pred: &[usize], categories: usize, threshold: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(EvalError::Usage(format!("threshold must lie in [0, 1), got {threshold}")));
    }
    Ok(category_sizes(pred, categories).iter().filter(|&&n| (n as f64) < threshold * pred.len() as f64).count())
}

/// Images per category.
pub fn category_sizes(pred: &[usize], categories: usize) -> Vec<usize> {
    let mut sizes = vec![0; categories.max(pred.iter().map(|&p| p + 1).max().unwrap_or(0))];
    for &p in pred {
        sizes[p] += 1;
    }
    sizes
}
