//! The CIGMO generative model: categorizer, view and shape encoders, the
//! per-category decoders, the variational objective and its training loop.

mod arch;
mod cigmo;
mod gm;
mod train;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::DataError;
use crate::nn::{Checkpoint, Matrix, NnError, Scalar, Shape};

pub use arch::{plan_nets, Arch, NetPlan};
pub use cigmo::{Cigmo, ElboTerms, Noise};
pub use gm::{gm_prior_to_cigmo, Covariance, GmPriorModel};
pub use train::{train, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite ELBO in group {group}: recon={recon} kl_cat={kl_cat} kl_view={kl_view} kl_shape={kl_shape}")]
    NonFinite { group: usize, recon: f64, kl_cat: f64, kl_view: f64, kl_shape: f64 },
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: u64, detail: String, last_good: Box<Checkpoint> },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// How instance-level category distributions are merged into a group posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CombineRule {
    #[default]
    Average,
    /// Normalized elementwise product, computed in log space.
    Product,
    /// Softmax of the mean logits.
    LogitAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ViewDependence {
    #[default]
    Universal,
    PerCategory,
}

/// How per-instance shape posteriors are merged over a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShapeFusion {
    /// Arithmetic mean of means and of variances.
    #[default]
    Average,
    /// Product of Gaussians: summed precisions, precision-weighted mean.
    Precision,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(ModelError::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}` (expected one of: {})"),
                        s,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(CombineRule { Average => "average", Product => "product", LogitAverage => "logit-average" });
text_enum!(ViewDependence { Universal => "universal", PerCategory => "per-category" });
text_enum!(ShapeFusion { Average => "average", Precision => "precision" });

#[derive(Debug, Clone, PartialEq)]
pub struct CigmoConfig {
    /// Number of categories C.
    pub categories: usize,
    /// Shape dimension M.
    pub shape_dim: usize,
    /// View dimension L.
    pub view_dim: usize,
    /// Group size K.
    pub group_size: usize,
    pub image: Shape,
    pub combine: CombineRule,
    pub view: ViewDependence,
    pub fusion: ShapeFusion,
    pub arch: Arch,
    /// Width of the fully connected hidden layers.
    pub hidden: usize,
    pub batchnorm: bool,
    /// Fully connected decoder layers owned by each category (1 or 2); the
    /// remaining decoder layers are shared.
    pub category_layers: usize,
}

impl Default for CigmoConfig {
    fn default() -> Self {
        Self {
            categories: 3,
            shape_dim: 16,
            view_dim: 2,
            group_size: 3,
            image: Shape::Image { channels: 1, height: 32, width: 32 },
            combine: CombineRule::Average,
            view: ViewDependence::Universal,
            fusion: ShapeFusion::Average,
            arch: Arch::Conv,
            hidden: 256,
            batchnorm: true,
            category_layers: 1,
        }
    }
}

impl CigmoConfig {
    pub fn image_dim(&self) -> usize {
        self.image.size()
    }

    /// Number of view encoder heads (1, or C in the per-category variant).
    pub fn view_heads(&self) -> usize {
        match self.view {
            ViewDependence::Universal => 1,
            ViewDependence::PerCategory => self.categories,
        }
    }

    pub fn view_head_for(&self, c: usize) -> usize {
        match self.view {
            ViewDependence::Universal => 0,
            ViewDependence::PerCategory => c,
        }
    }

    /// Category prior; fixed uniform.
    pub fn prior<T: Scalar>(&self) -> Vec<T> {
        vec![T::one() / T::of(self.categories as f64); self.categories]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.categories == 0 {
            return bad("categories must be at least 1");
        }
        if self.shape_dim == 0 {
            return bad("shape_dim must be at least 1");
        }
        if self.view_dim == 0 {
            return bad("view_dim must be at least 1");
        }
        if self.group_size == 0 {
            return bad("group_size must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        if self.image.size() == 0 {
            return bad("image must be non-empty");
        }
        if !(1..=2).contains(&self.category_layers) {
            return bad("category_layers must be 1 or 2");
        }
        plan_nets(self).map(|_| ())
    }

    /// Flat `key = value` form used in checkpoints and config files.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("categories", self.categories.to_string()),
            ("shape_dim", self.shape_dim.to_string()),
            ("view_dim", self.view_dim.to_string()),
            ("group_size", self.group_size.to_string()),
            ("image", self.image.to_string()),
            ("combine", self.combine.to_string()),
            ("view", self.view.to_string()),
            ("fusion", self.fusion.to_string()),
            ("arch", self.arch.to_string()),
            ("hidden", self.hidden.to_string()),
            ("batchnorm", self.batchnorm.to_string()),
            ("category_layers", self.category_layers.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }

    pub const KEYS: [&'static str; 12] = [
        "categories",
        "shape_dim",
        "view_dim",
        "group_size",
        "image",
        "combine",
        "view",
        "fusion",
        "arch",
        "hidden",
        "batchnorm",
        "category_layers",
    ];

    /// Apply one `key = value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.parse().map_err(|_| ModelError::Config(format!("`{key}` expects an integer, got `{v}`")))
        }
        match key {
            "categories" => self.categories = num(key, value)?,
            "shape_dim" => self.shape_dim = num(key, value)?,
            "view_dim" => self.view_dim = num(key, value)?,
            "group_size" => self.group_size = num(key, value)?,
            "image" => self.image = value.parse()?,
            "combine" => self.combine = value.parse()?,
            "view" => self.view = value.parse()?,
            "fusion" => self.fusion = value.parse()?,
            "arch" => self.arch = value.parse()?,
            "hidden" => self.hidden = num(key, value)?,
            "category_layers" => self.category_layers = num(key, value)?,
            "batchnorm" => {
                self.batchnorm = value
                    .parse()
                    .map_err(|_| ModelError::Config(format!("`batchnorm` expects true or false, got `{value}`")))?
            }
            _ => return Err(ModelError::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Group posterior over categories.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPosterior<T> {
    pub probs: Vec<T>,
}

impl<T: Scalar> CategoryPosterior<T> {
    /// Most probable category; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Diagonal Gaussian posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCode<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// KL(q || prior) for categorical distributions, with 0 ln 0 = 0.
pub fn kl_categorical<T: Scalar>(q: &[T], prior: &[T]) -> Result<T> {
    if q.len() != prior.len() {
        return Err(ModelError::Domain(format!("posterior has {} entries, prior {}", q.len(), prior.len())));
    }
    if let Some(p) = prior.iter().find(|&&p| p <= T::zero()) {
        return Err(ModelError::Domain(format!("prior entry {p} is not positive")));
    }
    Ok(q.iter().zip(prior).filter(|(&qc, _)| qc > T::zero()).map(|(&qc, &p)| qc * (qc / p).ln()).sum())
}

/// KL(N(mean, diag var) || N(0, I)).
pub fn kl_diag_gaussian<T: Scalar>(code: &GaussianCode<T>) -> Result<T> {
    if code.mean.len() != code.var.len() {
        return Err(ModelError::Domain("mean and variance lengths differ".into()));
    }
    if let Some(v) = code.var.iter().find(|&&v| v <= T::zero() || v.is_nan()) {
        return Err(ModelError::Domain(format!("variance {v} is not positive")));
    }
    let half = T::of(0.5);
    Ok(code.mean.iter().zip(&code.var).map(|(&m, &v)| half * (m * m + v - T::one() - v.ln())).sum())
}

pub(crate) fn log_softmax_row<T: Scalar>(a: &[T]) -> Vec<T> {
    let max = a.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + a.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    a.iter().map(|&v| v - lse).collect()
}

/// Softmax of log-weights; an all `-inf` row falls back to uniform.
pub(crate) fn normalize_log<T: Scalar>(s: &[T]) -> Vec<T> {
    let max = s.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() || max.is_nan() {
        log::warn!("product rule underflow: every category has zero probability, using uniform posterior");
        return vec![T::one() / T::of(s.len() as f64); s.len()];
    }
    let e: Vec<T> = s.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Merge K instance distributions (rows of `probs`) into one group posterior.
/// The logit-average rule needs the raw logits; the product rule uses them
/// when given and otherwise works from `ln probs`.
pub fn combine_category<T: Scalar>(probs: &Matrix<T>, logits: Option<&Matrix<T>>, rule: CombineRule) -> Result<Vec<T>> {
    let k = probs.rows();
    if k == 0 {
        return Err(ModelError::Domain("cannot combine an empty group".into()));
    }
    if let Some(l) = logits {
        if (l.rows(), l.cols()) != (probs.rows(), probs.cols()) {
            return Err(ModelError::Domain("logits and probabilities differ in shape".into()));
        }
    }
    let c = probs.cols();
    let kf = T::of(k as f64);
    match rule {
        CombineRule::Average => {
            let mut q = vec![T::zero(); c];
            for row in probs.iter_rows() {
                q.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
            q.iter_mut().for_each(|v| *v /= kf);
            Ok(q)
        }
        CombineRule::Product => {
            let mut s = vec![T::zero(); c];
            for r in 0..k {
                let logp = match logits {
                    Some(l) => log_softmax_row(l.row(r)),
                    None => probs.row(r).iter().map(|&p| p.ln()).collect(),
                };
                s.iter_mut().zip(logp).for_each(|(a, b)| *a += b);
            }
            Ok(normalize_log(&s))
        }
        CombineRule::LogitAverage => {
            let l = logits.ok_or_else(|| ModelError::Usage("the logit-average rule needs raw logits".into()))?;
            let mut s = vec![T::zero(); c];
            for row in l.iter_rows() {
                s.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
            s.iter_mut().for_each(|v| *v /= kf);
            Ok(normalize_log(&s))
        }
    }
}

/// Merge per-instance shape posteriors over a group.
pub fn fuse_shape<T: Scalar>(codes: &[GaussianCode<T>], fusion: ShapeFusion) -> Result<GaussianCode<T>> {
    let first = codes.first().ok_or_else(|| ModelError::Domain("cannot fuse an empty group".into()))?;
    let m = first.mean.len();
    if codes.iter().any(|c| c.mean.len() != m || c.var.len() != m) {
        return Err(ModelError::Domain("shape codes differ in length".into()));
    }
    let k = T::of(codes.len() as f64);
    let mut mean = vec![T::zero(); m];
    let mut var = vec![T::zero(); m];
    match fusion {
        ShapeFusion::Average => {
            for code in codes {
                for i in 0..m {
                    mean[i] += code.mean[i];
                    var[i] += code.var[i];
                }
            }
            mean.iter_mut().chain(var.iter_mut()).for_each(|v| *v /= k);
        }
        ShapeFusion::Precision => {
            if codes.iter().flat_map(|c| &c.var).any(|&v| v <= T::zero()) {
                return Err(ModelError::Domain("precision fusion needs positive variances".into()));
            }
            for code in codes {
                for i in 0..m {
                    var[i] += T::one() / code.var[i];
                    mean[i] += code.mean[i] / code.var[i];
                }
            }
            for i in 0..m {
                var[i] = T::one() / var[i];
                mean[i] *= var[i];
            }
        }
    }
    Ok(GaussianCode { mean, var })
}
