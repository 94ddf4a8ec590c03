use std::collections::BTreeMap;

use log::warn;

use crate::nn::{softmax_rows, AdamConfig, LayerSpec, Matrix, Mode, Net, NetSpec, ParamStore, SeededRng, Shape};

use super::{EvalError, Result};

/// Gallery draws averaged by [`one_shot_id`].
pub const ONE_SHOT_DRAWS: usize = 5;

fn check_rows(codes: &Matrix<f64>, identities: &[u32]) -> Result<()> {
    if codes.rows() != identities.len() {
        return Err(EvalError::Usage(format!("{} codes for {} identity labels", codes.rows(), identities.len())));
    }
    if codes.data().iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Domain("codes contain non-finite values".into()));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One-shot identification accuracy in percent: each identity contributes one
/// randomly chosen gallery image, every other image is a query matched to its
/// nearest gallery code. Averaged over [`ONE_SHOT_DRAWS`] gallery draws.
pub fn one_shot_id(codes: &Matrix<f64>, identities: &[u32], seed: u64) -> Result<f64> {
    check_rows(codes, identities)?;
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in identities.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    let singletons = groups.values().filter(|v| v.len() < 2).count();
    if singletons > 0 {
        warn!("one-shot identification skips {singletons} identities with a single image");
    }
    groups.retain(|_, v| v.len() >= 2);
    if groups.len() < 2 {
        return Err(EvalError::Usage("one-shot identification needs two identities with two or more images".into()));
    }
    let root = SeededRng::new(seed);
    let mut total = 0.0;
    for draw in 0..ONE_SHOT_DRAWS {
        let mut rng = root.fork(draw as u64);
        let gallery: Vec<(u32, usize)> = groups.iter().map(|(&id, v)| (id, v[rng.below(v.len())])).collect();
        let (mut hits, mut queries) = (0usize, 0usize);
        for (&id, members) in &groups {
            for &q in members {
                if gallery.iter().any(|&(_, g)| g == q) {
                    continue;
                }
                let mut best = (f64::INFINITY, 0u32);
                for &(gid, g) in &gallery {
                    let d = sq_dist(codes.row(q), codes.row(g));
                    if d < best.0 {
                        best = (d, gid);
                    }
                }
                hits += (best.1 == id) as usize;
                queries += 1;
            }
        }
        total += hits as f64 / queries as f64;
    }
    Ok(total / ONE_SHOT_DRAWS as f64 * 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of each identity's images held out for scoring.
    pub holdout: f64,
    pub adam: AdamConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: 128, epochs: 50, batch_size: 64, holdout: 0.25, adam: AdamConfig::default() }
    }
}

/// Held-out accuracy (percent) of a one-hidden-layer classifier that predicts
/// identity from codes. Features are standardized with training statistics.
pub fn probe_identity(codes: &Matrix<f64>, identities: &[u32], pc: &ProbeConfig, seed: u64) -> Result<f64> {
    check_rows(codes, identities)?;
    if !(0.0..1.0).contains(&pc.holdout) || pc.holdout == 0.0 || pc.batch_size == 0 || pc.hidden == 0 {
        return Err(EvalError::Usage(format!("invalid probe settings {pc:?}")));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in identities.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(EvalError::Usage("identity probe needs at least two identities".into()));
    }
    let root = SeededRng::new(seed);
    let mut split_rng = root.fork(0);
    let (mut train_rows, mut eval_rows) = (Vec::new(), Vec::new());
    let label: BTreeMap<u32, usize> = groups.keys().enumerate().map(|(i, &id)| (id, i)).collect();
    for members in groups.values() {
        let mut m = members.clone();
        split_rng.shuffle(&mut m);
        let held = if m.len() < 2 { 0 } else { ((m.len() as f64 * pc.holdout).round() as usize).clamp(1, m.len() - 1) };
        eval_rows.extend_from_slice(&m[..held]);
        train_rows.extend_from_slice(&m[held..]);
    }
    if eval_rows.is_empty() {
        return Err(EvalError::Usage("no identity has enough images to hold any out".into()));
    }

    let d = codes.cols();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &r in &train_rows {
        for (m, v) in mean.iter_mut().zip(codes.row(r)) {
            *m += v / train_rows.len() as f64;
        }
    }
    for &r in &train_rows {
        for j in 0..d {
            sd[j] += (codes.get(r, j) - mean[j]).powi(2) / train_rows.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let standardize = |rows: &[usize]| {
        let mut m = codes.select_rows(rows);
        for i in 0..m.rows() {
            for (j, v) in m.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) / sd[j];
            }
        }
        m
    };
    let (x_train, x_eval) = (standardize(&train_rows), standardize(&eval_rows));
    let y_train: Vec<usize> = train_rows.iter().map(|&r| label[&identities[r]]).collect();
    let y_eval: Vec<usize> = eval_rows.iter().map(|&r| label[&identities[r]]).collect();

    let classes = groups.len();
    let spec = NetSpec::new(
        Shape::Flat(d),
        vec![
            LayerSpec::Dense { inputs: d, outputs: pc.hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: pc.hidden, outputs: classes },
            LayerSpec::Linear,
        ],
    )?;
    let mut store = ParamStore::new();
    let net = Net::new("probe", spec, &mut store, &mut root.fork(1))?;
    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    let mut shuffle_rng = root.fork(2);
    for _ in 0..pc.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(pc.batch_size) {
            let x = x_train.select_rows(batch);
            let (logits, cache) = net.forward(&store, &x, Mode::Train)?;
            let mut grad = softmax_rows(&logits);
            let scale = 1.0 / batch.len() as f64;
            for (i, &b) in batch.iter().enumerate() {
                let row = grad.row_mut(i);
                row[y_train[b]] -= 1.0;
                row.iter_mut().for_each(|g| *g *= scale);
            }
            net.backward(&mut store, &cache, &grad)?;
            store.adam_step(&pc.adam)?;
        }
    }
    let logits = net.predict(&store, &x_eval, Mode::Eval)?;
    let hits = logits
        .iter_rows()
        .zip(&y_eval)
        .filter(|(row, &y)| row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b }).0 == y)
        .count();
    Ok(hits as f64 / y_eval.len() as f64 * 100.0)
}
