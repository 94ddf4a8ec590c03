use crate::data::Attributes;

use super::{EvalError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeScore {
    pub attribute: String,
    pub f1: f64,
}

/// For every category, the `top` attributes that best coincide with it,
/// scored by F1 between category membership and the attribute flag.
pub fn attribute_f1(pred: &[usize], categories: usize, attrs: &Attributes, top: usize) -> Result<Vec<Vec<AttributeScore>>> {
    let a = attrs.names.len();
    if attrs.values.len() != pred.len() * a {
        return Err(EvalError::Usage(format!(
            "{} attribute values for {} images and {a} attributes",
            attrs.values.len(),
            pred.len()
        )));
    }
    if let Some(&bad) = pred.iter().find(|&&p| p >= categories) {
        return Err(EvalError::Usage(format!("category {bad} out of range for {categories} categories")));
    }
    let mut size = vec![0usize; categories];
    let mut flagged = vec![0usize; a];
    let mut both = vec![vec![0usize; a]; categories];
    for (i, &c) in pred.iter().enumerate() {
        size[c] += 1;
        for j in 0..a {
            if attrs.get(i, j) {
                flagged[j] += 1;
                both[c][j] += 1;
            }
        }
    }
    Ok((0..categories)
        .map(|c| {
            let mut scores: Vec<(usize, f64)> = (0..a)
                .map(|j| {
                    let denom = size[c] + flagged[j];
                    (j, if denom == 0 { 0.0 } else { 2.0 * both[c][j] as f64 / denom as f64 })
                })
                .collect();
            scores.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            scores.truncate(top);
            scores.into_iter().map(|(j, f1)| AttributeScore { attribute: attrs.names[j].clone(), f1 }).collect()
        })
        .collect())
}
