use log::{debug, info};

use crate::data::{make_groups, singleton_groups, GroupIndex, GroupedDataset};
use crate::nn::{AdamConfig, Checkpoint, Matrix, NnError, Scalar, SeededRng};

use super::{Cigmo, CigmoConfig, ModelError, Noise, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Groups per mini-batch.
    pub batch_size: usize,
    /// Fresh groups drawn per epoch when the dataset carries no group index;
    /// `None` means one group per K training images.
    pub groups_per_epoch: Option<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 100, groups_per_epoch: None, adam: AdamConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean negative ELBO per group, one entry per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

fn epoch_groups(ds: &GroupedDataset, k: usize, per_epoch: Option<usize>, seed: u64) -> Result<GroupIndex> {
    if let Some(stored) = &ds.groups {
        let mut order: Vec<usize> = (0..stored.len()).collect();
        SeededRng::new(seed).shuffle(&mut order);
        let indices = order.iter().flat_map(|&g| stored.group(g).iter().copied()).collect();
        return Ok(GroupIndex { k: stored.k, indices });
    }
    if k == 1 {
        return Ok(singleton_groups(ds, seed));
    }
    let count = per_epoch.unwrap_or(ds.len() / k).max(1);
    Ok(make_groups(ds, k, count, seed)?)
}

/// Train a fresh model on `ds` (groups resampled every epoch unless the
/// dataset carries a fixed group index).
pub fn train<T: Scalar>(ds: &GroupedDataset, config: &CigmoConfig, tc: &TrainConfig) -> Result<(Cigmo<T>, TrainReport)> {
    let mut model = Cigmo::<T>::new(config.clone(), SeededRng::new(tc.seed).derive_seed(1))?;
    let report = model.fit(ds, tc)?;
    Ok((model, report))
}

impl<T: Scalar> Cigmo<T> {
    /// Continue training with Adam on the mean negative ELBO.
    pub fn fit(&mut self, ds: &GroupedDataset, tc: &TrainConfig) -> Result<TrainReport> {
        let k = self.config().group_size;
        if let Some(g) = &ds.groups {
            if g.k != k {
                return Err(ModelError::Usage(format!("dataset groups have K = {}, model expects {k}", g.k)));
            }
        }
        if ds.image_dim() != self.config().image_dim() {
            return Err(ModelError::Usage(format!(
                "dataset images have {} values, model expects {}",
                ds.image_dim(),
                self.config().image_dim()
            )));
        }
        if tc.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be at least 1".into()));
        }
        let root = SeededRng::new(tc.seed);
        let mut noise_rng = root.fork(3);
        let mut report = TrainReport::default();
        let mut last_good = self.to_checkpoint("cigmo");

        for epoch in 0..tc.epochs {
            let group_seed = root.derive_seed(16 + epoch as u64);
            let groups = epoch_groups(ds, k, tc.groups_per_epoch, group_seed)?;
            let mut sum = 0.0;
            let mut count = 0usize;
            for chunk in groups.indices.chunks(tc.batch_size * k) {
                let rows: Vec<usize> = chunk.iter().map(|&i| i as usize).collect();
                let x: Matrix<T> = ds.images.select_rows(&rows).cast();
                let b = rows.len() / k;
                let noise = Noise::sample(self.config(), b, k, &mut noise_rng);
                let step = self.store().step();
                let diverged = |detail: String, last_good: &Checkpoint| ModelError::Diverged {
                    epoch,
                    step,
                    detail,
                    last_good: Box::new(last_good.clone()),
                };
                let loss = match self.elbo_grad_train(&x, k, &noise) {
                    Ok(l) => l,
                    Err(e @ ModelError::NonFinite { .. }) => return Err(diverged(e.to_string(), &last_good)),
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(diverged(format!("loss {loss}"), &last_good));
                }
                match self.store_mut().adam_step(&tc.adam) {
                    Ok(()) => {}
                    Err(e @ NnError::NonFiniteGradient { .. }) => return Err(diverged(e.to_string(), &last_good)),
                    Err(e) => return Err(e.into()),
                }
                sum += loss.as_f64() * b as f64;
                count += b;
            }
            let mean = sum / count.max(1) as f64;
            info!("epoch {:>3}: loss {mean:.3}", epoch + 1);
            debug!("epoch {} used {} groups", epoch + 1, count);
            report.epoch_loss.push(mean);
            last_good = self.to_checkpoint("cigmo");
        }
        report.steps = self.store().step();
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::Arch;
    use crate::nn::{Mode, Shape};

    fn data() -> GroupedDataset {
        generate_synthetic(&SynthConfig { classes: 2, identities_per_class: 6, views_per_identity: 4, image_size: 8, ..SynthConfig::default() })
            .unwrap()
    }

    fn config() -> CigmoConfig {
        CigmoConfig {
            categories: 2,
            shape_dim: 3,
            view_dim: 2,
            group_size: 2,
            image: Shape::Image { channels: 1, height: 8, width: 8 },
            arch: Arch::Mlp,
            hidden: 16,
            ..CigmoConfig::default()
        }
    }

    fn tc(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig { epochs, batch_size: 4, adam: AdamConfig { lr, ..AdamConfig::default() }, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn zero_learning_rate_changes_nothing_trainable() {
        let ds = data();
        let mut model = Cigmo::<f64>::new(config(), 2).unwrap();
        let x: Matrix<f64> = ds.images.slice_rows(0, 8).cast();
        let noise = Noise::sample(model.config(), 4, 2, &mut SeededRng::new(1));
        let before_elbo = model.elbo(&x, 2, &noise, Mode::Train).unwrap();
        let trainable = |m: &Cigmo<f64>| m.store().iter().filter(|p| p.trainable).flat_map(|p| p.value.clone()).collect::<Vec<_>>();
        let before = trainable(&model);
        let report = model.fit(&ds, &tc(2, 0.0)).unwrap();
        assert!(report.steps > 0);
        assert_eq!(trainable(&model), before);
        assert_eq!(model.elbo(&x, 2, &noise, Mode::Train).unwrap(), before_elbo);
    }

    #[test]
    fn equal_seeds_give_identical_runs() {
        let ds = data();
        let (a, ra) = train::<f64>(&ds, &config(), &tc(2, 1e-3)).unwrap();
        let (b, rb) = train::<f64>(&ds, &config(), &tc(2, 1e-3)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.store().flat_values(), b.store().flat_values());
        let (_, rc) = train::<f64>(&ds, &config(), &TrainConfig { seed: 6, ..tc(2, 1e-3) }).unwrap();
        assert_ne!(ra.epoch_loss, rc.epoch_loss);
    }

    #[test]
    fn loss_falls_over_the_first_epochs() {
        let ds = data();
        let (_, r) = train::<f32>(&ds, &config(), &tc(4, 3e-3)).unwrap();
        let upticks = r.epoch_loss.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(r.epoch_loss.windows(2).all(|w| w[1] <= w[0] * 1.02), "{:?}", r.epoch_loss);
        assert!(upticks <= 1, "{:?}", r.epoch_loss);
        assert!(r.epoch_loss[3] < r.epoch_loss[0], "{:?}", r.epoch_loss);
    }

    #[test]
    fn divergence_reports_the_last_good_checkpoint() {
        let ds = data();
        let err = train::<f32>(&ds, &config(), &tc(5, 1e30)).unwrap_err();
        let ModelError::Diverged { last_good, .. } = err else { panic!("expected divergence, got {err}") };
        let (restored, kind) = Cigmo::<f32>::from_checkpoint(&last_good).unwrap();
        assert_eq!(kind, "cigmo");
        assert!(restored.store().flat_values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stored_groups_must_match_the_model() {
        let mut ds = data();
        ds.groups = Some(make_groups(&ds, 3, 4, 0).unwrap());
        let mut model = Cigmo::<f32>::new(config(), 0).unwrap();
        assert!(matches!(model.fit(&ds, &tc(1, 1e-3)), Err(ModelError::Usage(_))));
        let cfg3 = CigmoConfig { group_size: 3, ..config() };
        let (_, r) = train::<f32>(&ds, &cfg3, &tc(1, 1e-3)).unwrap();
        assert_eq!(r.steps, 1);
        assert!(matches!(model.fit(&data(), &TrainConfig { batch_size: 0, ..tc(1, 1e-3) }), Err(ModelError::Config(_))));
    }
}
