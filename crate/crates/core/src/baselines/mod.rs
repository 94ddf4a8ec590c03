//! Comparison methods: a vanilla VAE, a mixture of VAEs, group disentanglers
//! with a single category (averaged or precision-weighted shape fusion) and
//! k-means for clustering learned codes.
//!
//! Every neural baseline is a restricted CIGMO, so each differs from the full
//! model only in the restriction it names.

mod kmeans;

use std::fmt;
use std::str::FromStr;

use crate::data::GroupedDataset;
use crate::model::{train, Cigmo, CigmoConfig, ModelError, Result, ShapeFusion, TrainConfig, TrainReport, ViewDependence};
use crate::nn::{Matrix, Scalar};

pub use kmeans::{kmeans, KMeansResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// One category, singleton groups.
    Vae,
    /// C categories, singleton groups.
    MixtureVae,
    /// One category, groups with averaged shape posteriors.
    Gvae,
    /// One category, groups with precision-weighted shape posteriors.
    Mlvae,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::Vae, BaselineKind::MixtureVae, BaselineKind::Gvae, BaselineKind::Mlvae];

    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineKind::Vae => "vae",
            BaselineKind::MixtureVae => "mixture_vae",
            BaselineKind::Gvae => "gvae",
            BaselineKind::Mlvae => "mlvae",
        }
    }

    /// Whether the method learns from groups of K > 1 images.
    pub fn grouped(&self) -> bool {
        matches!(self, BaselineKind::Gvae | BaselineKind::Mlvae)
    }

    /// The CIGMO configuration this baseline trains, derived from `base`.
    pub fn config(&self, base: &CigmoConfig) -> CigmoConfig {
        let mut cfg = CigmoConfig { view: ViewDependence::Universal, ..base.clone() };
        match self {
            BaselineKind::Vae => {
                cfg.categories = 1;
                cfg.group_size = 1;
                cfg.fusion = ShapeFusion::Average;
            }
            BaselineKind::MixtureVae => {
                cfg.group_size = 1;
                cfg.fusion = ShapeFusion::Average;
            }
            BaselineKind::Gvae => {
                cfg.categories = 1;
                cfg.fusion = ShapeFusion::Average;
            }
            BaselineKind::Mlvae => {
                cfg.categories = 1;
                cfg.fusion = ShapeFusion::Precision;
            }
        }
        cfg
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            ModelError::Config(format!("unknown baseline `{s}` (expected vae, mixture_vae, gvae or mlvae)"))
        })
    }
}

#[derive(Debug, Clone)]
pub struct BaselineFit<T: Scalar> {
    pub kind: BaselineKind,
    pub model: Cigmo<T>,
    pub report: TrainReport,
}

impl<T: Scalar> BaselineFit<T> {
    /// Codes used for clustering and identification: the shape mean for the
    /// group models, the entire latent `[y, z]` for the ungrouped ones.
    pub fn codes(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        codes(self.kind, &self.model, x)
    }
}

/// Codes of `x` under a trained baseline model (see [`BaselineFit::codes`]).
pub fn codes<T: Scalar>(kind: BaselineKind, model: &Cigmo<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let cats = model.classify(x)?;
    let m = model.config().shape_dim;
    let mut shape = Matrix::zeros(x.rows(), m);
    for c in 0..model.config().categories {
        let rows: Vec<usize> = (0..x.rows()).filter(|&i| cats[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        for (code, &i) in model.shape_codes(&x.select_rows(&rows), c)?.iter().zip(&rows) {
            shape.row_mut(i).copy_from_slice(&code.mean);
        }
    }
    if kind.grouped() {
        return Ok(shape);
    }
    let l = model.config().view_dim;
    let views = model.infer_view(x, None)?;
    let view = Matrix::from_vec(x.rows(), l, views.into_iter().flat_map(|c| c.mean).collect());
    Ok(view.hcat(&shape))
}

/// Train a baseline on `ds`; `base` supplies the shared hyperparameters.
pub fn fit_baseline<T: Scalar>(
    kind: BaselineKind,
    ds: &GroupedDataset,
    base: &CigmoConfig,
    tc: &TrainConfig,
) -> Result<BaselineFit<T>> {
    let config = kind.config(base);
    if let Some(groups) = &ds.groups {
        if !kind.grouped() && groups.k > 1 {
            return Err(ModelError::Usage(format!(
                "{kind} learns from single images but the dataset carries groups of {}",
                groups.k
            )));
        }
        if kind.grouped() && groups.k == 1 && config.group_size > 1 {
            return Err(ModelError::Usage(format!("{kind} needs grouped data but the dataset carries single images")));
        }
    }
    let (model, report) = train::<T>(ds, &config, tc)?;
    Ok(BaselineFit { kind, model, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_groups, SynthConfig};
    use crate::model::{Arch, Noise};
    use crate::nn::{Mode, SeededRng, Shape};

    fn tiny_data() -> GroupedDataset {
        generate_synthetic(&SynthConfig { classes: 2, identities_per_class: 3, views_per_identity: 4, image_size: 8, ..SynthConfig::default() })
            .unwrap()
    }

    fn base() -> CigmoConfig {
        CigmoConfig {
            categories: 2,
            shape_dim: 3,
            view_dim: 2,
            group_size: 2,
            image: Shape::Image { channels: 1, height: 8, width: 8 },
            arch: Arch::Mlp,
            hidden: 8,
            ..CigmoConfig::default()
        }
    }

    fn tc() -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 4, seed: 9, ..TrainConfig::default() }
    }

    #[test]
    fn kinds_parse_and_restrict_the_model() {
        for kind in BaselineKind::ALL {
            assert_eq!(kind.as_str().parse::<BaselineKind>().unwrap(), kind);
        }
        assert!("iic".parse::<BaselineKind>().is_err());
        let b = base();
        assert_eq!((BaselineKind::Vae.config(&b).categories, BaselineKind::Vae.config(&b).group_size), (1, 1));
        assert_eq!((BaselineKind::MixtureVae.config(&b).categories, BaselineKind::MixtureVae.config(&b).group_size), (2, 1));
        assert_eq!(BaselineKind::Gvae.config(&b).fusion, ShapeFusion::Average);
        assert_eq!(BaselineKind::Mlvae.config(&b).fusion, ShapeFusion::Precision);
        assert_eq!(BaselineKind::Mlvae.config(&b).group_size, 2);
    }

    #[test]
    fn gvae_with_singleton_groups_is_the_vae() {
        let b = CigmoConfig { group_size: 1, ..base() };
        assert_eq!(BaselineKind::Gvae.config(&b), BaselineKind::Vae.config(&b));
        let ds = tiny_data();
        let g = fit_baseline::<f64>(BaselineKind::Gvae, &ds, &b, &tc()).unwrap();
        let v = fit_baseline::<f64>(BaselineKind::Vae, &ds, &b, &tc()).unwrap();
        assert_eq!(g.report, v.report);
    }

    #[test]
    fn single_component_mixture_is_the_vae() {
        let b = CigmoConfig { categories: 1, ..base() };
        let ds = tiny_data();
        let m = fit_baseline::<f64>(BaselineKind::MixtureVae, &ds, &b, &tc()).unwrap();
        let v = fit_baseline::<f64>(BaselineKind::Vae, &ds, &b, &tc()).unwrap();
        assert_eq!(m.report, v.report);
        let x = ds.images.cast::<f64>();
        let noise = Noise::sample(m.model.config(), x.rows(), 1, &mut SeededRng::new(4));
        let a = m.model.elbo(&x, 1, &noise, Mode::Eval).unwrap();
        let b = v.model.elbo(&x, 1, &noise, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.kl_cat == 0.0));
    }

    #[test]
    fn gvae_elbo_equals_the_single_category_model_bitwise() {
        let b = base();
        let ds = tiny_data();
        let g = fit_baseline::<f64>(BaselineKind::Gvae, &ds, &b, &tc()).unwrap();
        let (direct, report) = train::<f64>(&ds, &CigmoConfig { categories: 1, ..b.clone() }, &tc()).unwrap();
        assert_eq!(g.report, report);
        let x = ds.images.cast::<f64>().select_rows(&(0..8).collect::<Vec<_>>());
        let noise = Noise::sample(&direct.config().clone(), 4, 2, &mut SeededRng::new(2));
        let a = g.model.elbo(&x, 2, &noise, Mode::Eval).unwrap();
        let d = direct.elbo(&x, 2, &noise, Mode::Eval).unwrap();
        for (s, t) in a.iter().zip(&d) {
            assert_eq!(s.total.to_bits(), t.total.to_bits());
            assert_eq!(s.kl_cat, 0.0);
        }
    }

    #[test]
    fn grouping_mode_is_checked() {
        let mut ds = tiny_data();
        ds.groups = Some(make_groups(&ds, 2, 6, 1).unwrap());
        let err = fit_baseline::<f64>(BaselineKind::Vae, &ds, &base(), &tc()).unwrap_err();
        assert!(matches!(err, ModelError::Usage(_)), "{err}");
        assert!(fit_baseline::<f64>(BaselineKind::MixtureVae, &ds, &base(), &tc()).is_err());
        ds.groups = Some(crate::data::singleton_groups(&ds, 1));
        let err = fit_baseline::<f64>(BaselineKind::Gvae, &ds, &base(), &tc()).unwrap_err();
        assert!(matches!(err, ModelError::Usage(_)), "{err}");
    }

    #[test]
    fn codes_have_the_documented_layout() {
        let ds = tiny_data();
        let x = ds.images.cast::<f64>();
        let g = fit_baseline::<f64>(BaselineKind::Mlvae, &ds, &base(), &TrainConfig { epochs: 1, ..tc() }).unwrap();
        assert_eq!(g.codes(&x).unwrap().cols(), 3);
        let v = fit_baseline::<f64>(BaselineKind::MixtureVae, &ds, &base(), &TrainConfig { epochs: 1, ..tc() }).unwrap();
        let c = v.codes(&x).unwrap();
        assert_eq!(c.cols(), 5);
        let cats = v.model.classify(&x).unwrap();
        for (i, &k) in cats.iter().enumerate().take(5) {
            let z = &v.model.shape_codes(&x.select_rows(&[i]), k).unwrap()[0].mean;
            assert_eq!(&c.row(i)[2..], &z[..]);
        }
    }
}
