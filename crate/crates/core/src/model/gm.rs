//! Group model with a Gaussian-mixture prior on a single shape space, and its
//! rewriting as a CIGMO with per-category first decoder layers.
//!
//! The shape posterior for category `c` is parameterized relative to the
//! prior component: with `L_c` the Cholesky factor of `A_c`,
//! `q(z'|x, c) = N(b_c + L_c h̄_c, L_c diag(s̄_c) L_cᵀ)`, where `h̄_c`, `s̄_c`
//! are the fused outputs of the shape heads.

use crate::nn::{softmax_rows, Matrix, Mode, Net, ParamStore, Scalar, SeededRng};

use super::cigmo::{decoder_head_names, Nets};
use super::{fuse_shape, Cigmo, CigmoConfig, ElboTerms, GaussianCode, ModelError, Noise, Result, ViewDependence};

const DECODER_IN: &str = "decoder_in";

/// Covariance of one mixture component.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance<T> {
    Diagonal(Vec<T>),
    Full(Matrix<T>),
}

impl<T: Scalar> Covariance<T> {
    fn dense(&self) -> Matrix<T> {
        match self {
            Covariance::Diagonal(d) => {
                let mut m = Matrix::zeros(d.len(), d.len());
                for (i, &v) in d.iter().enumerate() {
                    m.set(i, i, v);
                }
                m
            }
            Covariance::Full(m) => m.clone(),
        }
    }
}

/// Lower-triangular `L` with `L Lᵀ = a`, or `None` unless `a` is symmetric positive definite.
pub(crate) fn cholesky<T: Scalar>(a: &Matrix<T>) -> Option<Matrix<T>> {
    let n = a.rows();
    if a.cols() != n {
        return None;
    }
    let tol = T::of(1e-10);
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (a.get(i, j), a.get(j, i));
            if (x - y).abs() > tol * (T::one() + x.abs().max(y.abs())) {
                return None;
            }
        }
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

/// Solve `L x = b` for lower-triangular `L`.
fn forward_solve<T: Scalar>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let mut x = b.to_vec();
    for i in 0..x.len() {
        for k in 0..i {
            let v = l.get(i, k) * x[k];
            x[i] -= v;
        }
        x[i] /= l.get(i, i);
    }
    x
}

fn lower_mul<T: Scalar>(l: &Matrix<T>, v: &[T]) -> Vec<T> {
    (0..l.rows()).map(|i| (0..=i).map(|k| l.get(i, k) * v[k]).sum()).collect()
}

/// KL(N(m1, S1) || N(m2, S2)) for full covariances.
fn kl_full<T: Scalar>(m1: &[T], s1: &Matrix<T>, m2: &[T], s2: &Matrix<T>) -> Option<T> {
    let n = m1.len();
    let l1 = cholesky(s1)?;
    let l2 = cholesky(s2)?;
    let mut trace = T::zero();
    for j in 0..n {
        let col: Vec<T> = (0..n).map(|i| l1.get(i, j)).collect();
        trace += forward_solve(&l2, &col).iter().map(|&v| v * v).sum::<T>();
    }
    let diff: Vec<T> = m1.iter().zip(m2).map(|(&a, &b)| a - b).collect();
    let maha: T = forward_solve(&l2, &diff).iter().map(|&v| v * v).sum();
    let logdet = |l: &Matrix<T>| (0..n).map(|i| l.get(i, i).ln()).sum::<T>() * T::of(2.0);
    Some(T::of(0.5) * (trace + maha - T::of(n as f64) + logdet(&l2) - logdet(&l1)))
}

#[derive(Debug, Clone)]
pub struct GmPriorModel<T> {
    config: CigmoConfig,
    store: ParamStore<T>,
    nets: Nets<T>,
    means: Vec<Vec<T>>,
    covs: Vec<Covariance<T>>,
    factors: Vec<Matrix<T>>,
}

impl<T: Scalar> GmPriorModel<T> {
    /// Fresh encoders and a single decoder, with prior components `N(b_c, A_c)`.
    pub fn new(config: CigmoConfig, means: Vec<Vec<T>>, covs: Vec<Covariance<T>>, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.categories;
        if means.len() != c || covs.len() != c {
            return Err(ModelError::Config(format!("need {c} prior means and covariances")));
        }
        let m = config.shape_dim;
        let mut factors = Vec::with_capacity(c);
        for (i, (b, a)) in means.iter().zip(&covs).enumerate() {
            let dense = a.dense();
            if b.len() != m || dense.rows() != m {
                return Err(ModelError::Config(format!("prior component {i} must have dimension {m}")));
            }
            let l = cholesky(&dense).ok_or_else(|| {
                ModelError::Domain(format!("covariance of component {i} is not symmetric positive definite"))
            })?;
            factors.push(l);
        }
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let nets = Nets::build(&config, &mut store, Some(&mut rng), &[DECODER_IN.to_owned()])?;
        Ok(Self { config, store, nets, means, covs, factors })
    }

    pub fn config(&self) -> &CigmoConfig {
        &self.config
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn prior_mean(&self, c: usize) -> &[T] {
        &self.means[c]
    }

    pub fn prior_cov(&self, c: usize) -> &Covariance<T> {
        &self.covs[c]
    }

    /// `z' = b_c + L_c z`: a standardized latent mapped into the shared shape space.
    pub fn to_shape_space(&self, c: usize, z: &[T]) -> Vec<T> {
        lower_mul(&self.factors[c], z).iter().zip(&self.means[c]).map(|(&a, &b)| a + b).collect()
    }

    /// Inverse of [`to_shape_space`](Self::to_shape_space).
    pub fn standardize(&self, c: usize, z_prime: &[T]) -> Vec<T> {
        let diff: Vec<T> = z_prime.iter().zip(&self.means[c]).map(|(&a, &b)| a - b).collect();
        forward_solve(&self.factors[c], &diff)
    }

    /// The shared decoder `f(y, z')`.
    pub fn decode(&self, y: &Matrix<T>, z_prime: &Matrix<T>) -> Result<Matrix<T>> {
        let pre = self.nets.decoder_in[0].predict(&self.store, &y.hcat(z_prime), Mode::Eval)?;
        Ok(self.nets.decoder_trunk.predict(&self.store, &pre, Mode::Eval)?)
    }

    /// Per-group ELBO, evaluated group by group with the general Gaussian KL.
    /// The shape noise for category `c` enters as `z' = μ' + L_c diag(√s̄) ε`.
    pub fn elbo(&self, x: &Matrix<T>, k: usize, noise: &Noise<T>, mode: Mode) -> Result<Vec<ElboTerms<T>>> {
        let cfg = &self.config;
        if cfg.view != ViewDependence::Universal {
            return Err(ModelError::Usage("the mixture-prior model uses a universal view space".into()));
        }
        if k == 0 || x.rows() % k != 0 {
            return Err(ModelError::Domain(format!("{} images do not form groups of {k}", x.rows())));
        }
        let (n, groups, cc, m, l) = (x.rows(), x.rows() / k, cfg.categories, cfg.shape_dim, cfg.view_dim);
        let st = &self.store;
        let nets = &self.nets;
        let logits = nets.categorizer.predict(st, x, mode)?;
        let probs = softmax_rows(&logits);
        let tv = nets.view_trunk.predict(st, x, mode)?;
        let vm = nets.view_mean[0].predict(st, &tv, mode)?;
        let vv = nets.view_var[0].predict(st, &tv, mode)?;
        let ts = nets.shape_trunk.predict(st, x, mode)?;
        let heads: Vec<(Matrix<T>, Matrix<T>)> = (0..cc)
            .map(|c| Ok((nets.shape_mean[c].predict(st, &ts, mode)?, nets.shape_var[c].predict(st, &ts, mode)?)))
            .collect::<Result<_>>()?;

        // Decoder inputs for every (category, instance), stacked category-major.
        let mut stacked = Matrix::zeros(cc * n, l + m);
        let mut kl_shape_gc = Matrix::zeros(groups, cc);
        for g in 0..groups {
            for c in 0..cc {
                let codes: Vec<GaussianCode<T>> = (g * k..(g + 1) * k)
                    .map(|i| GaussianCode { mean: heads[c].0.row(i).to_vec(), var: heads[c].1.row(i).to_vec() })
                    .collect();
                let fused = fuse_shape(&codes, cfg.fusion)?;
                let lc = &self.factors[c];
                let mu_p = self.to_shape_space(c, &fused.mean);
                let mut cov = Matrix::zeros(m, m);
                for i in 0..m {
                    for j in 0..m {
                        let v: T = (0..m).map(|t| lc.get(i, t) * fused.var[t] * lc.get(j, t)).sum();
                        cov.set(i, j, v);
                    }
                }
                let kl = kl_full(&mu_p, &cov, &self.means[c], &self.covs[c].dense())
                    .ok_or_else(|| ModelError::Domain("degenerate shape posterior".into()))?;
                kl_shape_gc.set(g, c, kl);
                let scaled: Vec<T> =
                    noise.shape[c].row(g).iter().zip(&fused.var).map(|(&e, &v)| v.sqrt() * e).collect();
                let z_p: Vec<T> = lower_mul(lc, &scaled).iter().zip(&mu_p).map(|(&a, &b)| a + b).collect();
                for i in g * k..(g + 1) * k {
                    let row = stacked.row_mut(c * n + i);
                    for a in 0..l {
                        row[a] = vm.get(i, a) + vv.get(i, a).sqrt() * noise.view[0].get(i, a);
                    }
                    row[l..].copy_from_slice(&z_p);
                }
            }
        }
        let pre = nets.decoder_in[0].predict(st, &stacked, mode)?;
        let out = nets.decoder_trunk.predict(st, &pre, mode)?;

        let d = x.cols();
        let log_norm = T::of(0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln());
        let prior = cfg.prior::<T>();
        let mut terms = Vec::with_capacity(groups);
        for g in 0..groups {
            let group_probs = probs.slice_rows(g * k, (g + 1) * k);
            let group_logits = logits.slice_rows(g * k, (g + 1) * k);
            let q = super::combine_category(&group_probs, Some(&group_logits), cfg.combine)?;
            let mut recon = T::zero();
            let mut kl_shape = T::zero();
            for c in 0..cc {
                let mut r = T::zero();
                for i in g * k..(g + 1) * k {
                    let sq: T = x.row(i).iter().zip(out.row(c * n + i)).map(|(&a, &b)| (a - b) * (a - b)).sum();
                    r += -T::of(0.5) * sq - log_norm;
                }
                recon += q[c] * r;
                kl_shape += q[c] * kl_shape_gc.get(g, c);
            }
            let mut kl_view = T::zero();
            for i in g * k..(g + 1) * k {
                let code = GaussianCode { mean: vm.row(i).to_vec(), var: vv.row(i).to_vec() };
                kl_view += super::kl_diag_gaussian(&code)?;
            }
            let kl_cat = super::kl_categorical(&q, &prior)?;
            terms.push(ElboTerms { total: recon - kl_cat - kl_view - kl_shape, recon, kl_cat, kl_view, kl_shape, q });
        }
        Ok(terms)
    }
}

/// Rewrite a mixture-prior group model as a CIGMO: `z = L_c⁻¹(z' - b_c)` and
/// `f_c(y, z) = f(y, L_c z + b_c)`, folded into a per-category first decoder
/// layer while every other weight is shared unchanged.
pub fn gm_prior_to_cigmo<T: Scalar>(gm: &GmPriorModel<T>) -> Result<Cigmo<T>> {
    let cfg = gm.config.clone();
    let (l, m) = (cfg.view_dim, cfg.shape_dim);
    let mut store = ParamStore::new();
    for p in gm.store.iter().filter(|p| !p.name.starts_with(&format!("{DECODER_IN}."))) {
        store.add(&p.name, &p.shape, p.value.clone(), p.trainable)?;
    }
    let first: &Net<T> = &gm.nets.decoder_in[0];
    let ids = first.param_ids();
    let (w_id, b_id) = (ids[0], ids[1]);
    let (w, b0) = (gm.store.value(w_id), gm.store.value(b_id));
    let hidden = b0.len();
    let cols = l + m;
    for (c, name) in decoder_head_names(cfg.categories).iter().enumerate() {
        let lc = &gm.factors[c];
        let bc = &gm.means[c];
        let mut wc = vec![T::zero(); hidden * cols];
        let mut bias = b0.to_vec();
        for o in 0..hidden {
            let row = &w[o * cols..(o + 1) * cols];
            wc[o * cols..o * cols + l].copy_from_slice(&row[..l]);
            for j in 0..m {
                wc[o * cols + l + j] = (j..m).map(|t| row[l + t] * lc.get(t, j)).sum();
            }
            bias[o] += (0..m).map(|t| row[l + t] * bc[t]).sum::<T>();
        }
        store.add(&format!("{name}.0.weight"), &[hidden, cols], wc, true)?;
        store.add(&format!("{name}.0.bias"), &[hidden], bias, true)?;
        for &id in &ids[2..] {
            let p = gm.store.param(id);
            let rest = &p.name[DECODER_IN.len()..];
            store.add(&format!("{name}{rest}"), &p.shape, p.value.clone(), p.trainable)?;
        }
    }
    Cigmo::attach(cfg, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::nn::Shape;

    fn tiny() -> CigmoConfig {
        CigmoConfig {
            categories: 2,
            shape_dim: 3,
            view_dim: 2,
            group_size: 2,
            image: Shape::Image { channels: 1, height: 4, width: 4 },
            arch: Arch::Mlp,
            hidden: 6,
            batchnorm: false,
            ..CigmoConfig::default()
        }
    }

    #[test]
    fn cholesky_reconstructs_and_rejects() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0, 0.4], vec![2.0, 3.0, 0.5], vec![0.4, 0.5, 2.0]]);
        let l = cholesky(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|t| l.get(i, t) * l.get(j, t)).sum();
                assert!((v - a.get(i, j)).abs() < 1e-12);
            }
        }
        assert!(cholesky(&Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]])).is_none());
        assert!(cholesky(&Matrix::from_rows(&[vec![1.0, 0.5], vec![0.2, 1.0]])).is_none());
    }

    #[test]
    fn full_kl_matches_diagonal_closed_form() {
        let s1 = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]);
        let id = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let kl: f64 = kl_full(&[1.0, -1.0], &s1, &[0.0, 0.0], &id).unwrap();
        let diag = super::super::kl_diag_gaussian(&GaussianCode { mean: vec![1.0, -1.0], var: vec![2.0, 0.5] }).unwrap();
        assert!((kl - diag).abs() < 1e-14);
    }

    #[test]
    fn affine_change_of_variables_hand_values() {
        let mut cfg = tiny();
        cfg.shape_dim = 1;
        let gm = GmPriorModel::<f64>::new(
            cfg,
            vec![vec![1.0], vec![0.0]],
            vec![Covariance::Diagonal(vec![4.0]), Covariance::Diagonal(vec![1.0])],
            1,
        )
        .unwrap();
        assert_eq!(gm.to_shape_space(0, &[0.0]), vec![1.0]);
        assert_eq!(gm.to_shape_space(0, &[1.5]), vec![4.0]);
        assert_eq!(gm.standardize(0, &[4.0]), vec![1.5]);
    }

    #[test]
    fn identity_prior_gives_the_shared_decoder() {
        let m = 3;
        let eye = Covariance::Diagonal(vec![1.0; m]);
        let gm = GmPriorModel::<f64>::new(tiny(), vec![vec![0.0; m]; 2], vec![eye.clone(), eye], 5).unwrap();
        let cigmo = gm_prior_to_cigmo(&gm).unwrap();
        let mut rng = SeededRng::new(3);
        let mut y = Matrix::zeros(4, 2);
        let mut z = Matrix::zeros(4, m);
        rng.fill_normal(y.data_mut());
        rng.fill_normal(z.data_mut());
        let shared = gm.decode(&y, &z).unwrap();
        for c in 0..2 {
            assert_eq!(cigmo.decode(&y, &z, c).unwrap(), shared);
        }
    }

    #[test]
    fn singular_covariance_is_a_domain_error() {
        let bad = Covariance::Diagonal(vec![1.0, 0.0, 1.0]);
        let ok = Covariance::Diagonal(vec![1.0; 3]);
        let err = GmPriorModel::<f64>::new(tiny(), vec![vec![0.0; 3]; 2], vec![ok, bad], 0).unwrap_err();
        assert!(matches!(err, ModelError::Domain(_)));
    }
}

#[cfg(test)]
mod equivalence {
    use super::*;
    use crate::model::{Arch, CombineRule};
    use crate::nn::Shape;

    fn check(covs: Vec<Covariance<f64>>, combine: CombineRule, category_layers: usize, seed: u64) {
        let cfg = CigmoConfig {
            categories: 2,
            shape_dim: 3,
            view_dim: 2,
            group_size: 3,
            image: Shape::Image { channels: 1, height: 4, width: 4 },
            arch: Arch::Mlp,
            hidden: 6,
            batchnorm: false,
            combine,
            category_layers,
            ..CigmoConfig::default()
        };
        let means = vec![vec![1.0, -0.5, 0.25], vec![-2.0, 0.0, 3.0]];
        let gm = GmPriorModel::new(cfg.clone(), means, covs, seed).unwrap();
        let cigmo = gm_prior_to_cigmo(&gm).unwrap();
        let mut rng = SeededRng::new(seed + 1);
        let x = Matrix::from_vec(6, 16, (0..96).map(|_| rng.uniform(0.0, 1.0)).collect());
        let noise = Noise::sample(&cfg, 2, 3, &mut rng);
        let a = gm.elbo(&x, 3, &noise, Mode::Eval).unwrap();
        let b = cigmo.elbo(&x, 3, &noise, Mode::Eval).unwrap();
        for (s, t) in a.iter().zip(&b) {
            assert!((s.total - t.total).abs() < 1e-8, "{} vs {}", s.total, t.total);
            assert!((s.kl_shape - t.kl_shape).abs() < 1e-8);
            assert!((s.recon - t.recon).abs() < 1e-8);
        }
    }

    #[test]
    fn diagonal_mixture_prior_elbo_equals_transformed_cigmo() {
        let covs = vec![Covariance::Diagonal(vec![4.0, 0.25, 1.5]), Covariance::Diagonal(vec![0.5, 2.0, 9.0])];
        check(covs, CombineRule::Average, 1, 3);
    }

    #[test]
    fn full_covariance_mixture_prior_elbo_equals_transformed_cigmo() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0, 0.3], vec![1.0, 2.0, -0.4], vec![0.3, -0.4, 1.5]]);
        let b = Matrix::from_rows(&[vec![0.7, 0.1, 0.0], vec![0.1, 1.2, 0.2], vec![0.0, 0.2, 3.0]]);
        check(vec![Covariance::Full(a.clone()), Covariance::Full(b.clone())], CombineRule::Product, 1, 7);
        check(vec![Covariance::Full(a), Covariance::Full(b)], CombineRule::LogitAverage, 2, 8);
    }
}
