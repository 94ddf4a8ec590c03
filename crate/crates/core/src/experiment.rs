//! Desk-scale benchmark protocol shared by the command line and the
//! acceptance suite: data generation, training settings and evaluation.

use log::info;
use thiserror::Error;

use crate::baselines::{self, kmeans, BaselineKind};
use crate::data::{generate_synthetic, split_by_identity, DataError, GroupedDataset, SynthConfig};
use crate::eval::{self, EvalError, MetricsReport, ProbeConfig, DEGENERATE_SHARE};
use crate::model::{train, Arch, Cigmo, CigmoConfig, ModelError, TrainConfig, TrainReport, ViewDependence};
use crate::nn::{Matrix, Scalar};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Which model a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Cigmo,
    Baseline(BaselineKind),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Cigmo => "cigmo",
            Method::Baseline(kind) => kind.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub synth: SynthConfig,
    /// Share of identities held out for testing.
    pub test_fraction: f64,
    /// Model settings; the category count and group size are set per run.
    pub model: CigmoConfig,
    /// Optimizer settings; the seed is set per run and `groups_per_epoch`
    /// defaults to the number of training images.
    pub train: TrainConfig,
    pub swap_pairs: usize,
    pub probe: ProbeConfig,
    pub kmeans_restarts: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let side = synth.image_size;
        Self {
            synth,
            test_fraction: 0.25,
            model: CigmoConfig {
                arch: Arch::Mlp,
                hidden: 256,
                shape_dim: 8,
                view_dim: 6,
                category_layers: 2,
                image: crate::nn::Shape::Image { channels: 1, height: side, width: side },
                ..CigmoConfig::default()
            },
            train: TrainConfig { epochs: 20, batch_size: 20, ..TrainConfig::default() },
            swap_pairs: 200,
            probe: ProbeConfig::default(),
            kmeans_restarts: 10,
        }
    }
}

/// Train and test pools with disjoint identities.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: GroupedDataset,
    pub test: GroupedDataset,
}

/// Which metrics [`Protocol::evaluate`] computes beyond clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalPlan {
    pub one_shot: bool,
    pub probes: bool,
    pub swap: bool,
}

impl EvalPlan {
    pub const ALL: EvalPlan = EvalPlan { one_shot: true, probes: true, swap: true };
    pub const CLUSTERING: EvalPlan = EvalPlan { one_shot: false, probes: false, swap: false };
}

impl Protocol {
    /// Synthetic data and identity split, both seeded by `seed`.
    pub fn benchmark(&self, seed: u64) -> Result<Benchmark> {
        let ds = generate_synthetic(&SynthConfig { seed, ..self.synth.clone() })?;
        let split = split_by_identity(&ds.records(), self.test_fraction, seed)?;
        Ok(Benchmark { train: ds.subset(&split.train), test: ds.subset(&split.test) })
    }

    pub fn model_config(&self, method: Method, categories: usize, group_size: usize) -> CigmoConfig {
        let cfg = CigmoConfig { categories, group_size, ..self.model.clone() };
        match method {
            Method::Cigmo => cfg,
            Method::Baseline(kind) => kind.config(&cfg),
        }
    }

    pub fn train_config(&self, train: &GroupedDataset, seed: u64) -> TrainConfig {
        TrainConfig { seed, groups_per_epoch: self.train.groups_per_epoch.or(Some(train.len())), ..self.train.clone() }
    }

    pub fn fit(&self, bench: &Benchmark, method: Method, categories: usize, group_size: usize, seed: u64) -> Result<(Cigmo<f32>, TrainReport)> {
        let cfg = self.model_config(method, categories, group_size);
        info!("training {} (C={}, K={}) seed {seed}", method.name(), cfg.categories, cfg.group_size);
        Ok(train::<f32>(&bench.train, &cfg, &self.train_config(&bench.train, seed))?)
    }

    /// Every applicable metric of `model` on the test pool.
    pub fn evaluate<T: Scalar>(&self, model: &Cigmo<T>, method: Method, test: &GroupedDataset, seed: u64, plan: EvalPlan) -> Result<MetricsReport> {
        let cfg = model.config();
        let x: Matrix<T> = test.images.cast();
        let pred = model.classify(&x)?;
        let mut report = self.report_header(method, cfg, test, seed);
        let classes = test.num_classes();
        if cfg.categories == classes {
            report.accuracy = Some(eval::clustering_accuracy(&pred, &test.classes, classes)?);
        } else {
            info!("{} categories for {classes} classes: reporting ARI only", cfg.categories);
        }
        report.ari = Some(eval::ari(&pred, &test.classes)?);
        report.degenerate = Some(eval::degenerate_category_count(&pred, cfg.categories, DEGENERATE_SHARE)?);
        report.category_sizes = eval::category_sizes(&pred, cfg.categories);
        if plan.one_shot || plan.probes {
            let codes: Matrix<f64> = identity_codes(model, method, &x)?.cast();
            if plan.one_shot {
                report.one_shot = Some(eval::one_shot_id(&codes, &test.identities, seed)?);
            }
            if plan.probes {
                report.shape_probe = Some(eval::probe_identity(&codes, &test.identities, &self.probe, seed)?);
                let views = view_codes(model, &x, &pred)?;
                report.view_probe = Some(eval::probe_identity(&views, &test.identities, &self.probe, seed)?);
            }
        }
        if plan.swap && test.render.is_some() {
            report.swap_error = Some(eval::swapping_error(model, test, self.swap_pairs, seed)?.error);
        }
        Ok(report)
    }

    /// Clustering of the test pool by k-means on a trained model's identity codes.
    pub fn evaluate_kmeans<T: Scalar>(&self, model: &Cigmo<T>, method: Method, test: &GroupedDataset, k: usize, seed: u64) -> Result<MetricsReport> {
        let codes: Matrix<f64> = identity_codes(model, method, &test.images.cast())?.cast();
        let fit = kmeans(&codes, k, seed, 300, self.kmeans_restarts)?;
        let mut report = self.report_header(method, model.config(), test, seed);
        report.method = format!("{}_kmeans", method.name());
        report.variant = format!("k{k}");
        report.categories = k;
        let pred = fit.assignments;
        if k == test.num_classes() {
            report.accuracy = Some(eval::clustering_accuracy(&pred, &test.classes, k)?);
        }
        report.ari = Some(eval::ari(&pred, &test.classes)?);
        report.degenerate = Some(eval::degenerate_category_count(&pred, k, DEGENERATE_SHARE)?);
        report.category_sizes = eval::category_sizes(&pred, k);
        Ok(report)
    }

    fn report_header(&self, method: Method, cfg: &CigmoConfig, test: &GroupedDataset, seed: u64) -> MetricsReport {
        let variant = match method {
            Method::Cigmo => format!("{}-{}", cfg.combine.as_str(), cfg.view.as_str()),
            Method::Baseline(_) => cfg.fusion.as_str().to_owned(),
        };
        MetricsReport {
            method: method.name().to_owned(),
            variant,
            categories: cfg.categories,
            shape_dim: cfg.shape_dim,
            view_dim: cfg.view_dim,
            group_size: cfg.group_size,
            seed,
            fingerprint: test.fingerprint(),
            ..MetricsReport::default()
        }
    }
}

/// Codes used for identification: the blocked shape embedding for CIGMO and
/// the baseline's own codes otherwise.
pub fn identity_codes<T: Scalar>(model: &Cigmo<T>, method: Method, x: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(match method {
        Method::Cigmo => model.shape_embed(x)?,
        Method::Baseline(kind) => baselines::codes(kind, model, x)?,
    })
}

/// View means, taken from the inferred category's head when views depend on it.
pub fn view_codes<T: Scalar>(model: &Cigmo<T>, x: &Matrix<T>, pred: &[usize]) -> Result<Matrix<f64>> {
    let l = model.config().view_dim;
    let mut out = Matrix::zeros(x.rows(), l);
    match model.config().view {
        ViewDependence::Universal => {
            for (i, code) in model.infer_view(x, None)?.iter().enumerate() {
                out.row_mut(i).iter_mut().zip(&code.mean).for_each(|(o, v)| *o = v.as_f64());
            }
        }
        ViewDependence::PerCategory => {
            for c in 0..model.config().categories {
                let rows: Vec<usize> = (0..x.rows()).filter(|&i| pred[i] == c).collect();
                if rows.is_empty() {
                    continue;
                }
                for (code, &i) in model.infer_view(&x.select_rows(&rows), Some(c))?.iter().zip(&rows) {
                    out.row_mut(i).iter_mut().zip(&code.mean).for_each(|(o, v)| *o = v.as_f64());
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape;

    fn tiny() -> Protocol {
        let mut p = Protocol::default();
        p.synth.identities_per_class = 4;
        p.synth.views_per_identity = 4;
        p.synth.image_size = 8;
        p.test_fraction = 0.5;
        p.model.image = Shape::Image { channels: 1, height: 8, width: 8 };
        p.model.hidden = 16;
        p.train.epochs = 1;
        p.swap_pairs = 8;
        p.probe.epochs = 2;
        p
    }

    #[test]
    fn benchmark_splits_identities() {
        let b = tiny().benchmark(3).unwrap();
        assert_eq!(b.train.len() + b.test.len(), 3 * 4 * 4);
        assert!(b.train.identities.iter().all(|id| !b.test.identities.contains(id)));
    }

    #[test]
    fn desk_protocol_matches_the_benchmark_layout() {
        let p = Protocol::default();
        assert_eq!((p.synth.classes, p.synth.identities_per_class, p.synth.views_per_identity), (3, 80, 12));
        assert_eq!(p.model.image_dim(), 32 * 32);
        assert_eq!(p.train.epochs, 20);
    }

    #[test]
    fn evaluation_fills_the_planned_metrics() {
        let p = tiny();
        let b = p.benchmark(1).unwrap();
        let (model, report) = p.fit(&b, Method::Cigmo, 3, 2, 0).unwrap();
        assert_eq!(report.epoch_loss.len(), 1);
        let r = p.evaluate(&model, Method::Cigmo, &b.test, 0, EvalPlan::ALL).unwrap();
        assert!(r.accuracy.is_some() && r.ari.is_some() && r.one_shot.is_some());
        assert!(r.shape_probe.is_some() && r.view_probe.is_some() && r.swap_error.is_some());
        assert_eq!(r.category_sizes.iter().sum::<usize>(), b.test.len());
        let r = p.evaluate(&model, Method::Cigmo, &b.test, 0, EvalPlan::CLUSTERING).unwrap();
        assert!(r.one_shot.is_none() && r.swap_error.is_none());
        let k = p.evaluate_kmeans(&model, Method::Cigmo, &b.test, 5, 0).unwrap();
        assert!(k.accuracy.is_none());
        assert_eq!((k.method.as_str(), k.categories), ("cigmo_kmeans", 5));
    }
}
