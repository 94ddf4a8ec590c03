use std::path::Path;

use crate::nn::{softmax_rows, Checkpoint, Matrix, Mode, Net, NetCache, ParamStore, Scalar, SeededRng};

use super::{
    argmax, log_softmax_row, normalize_log, plan_nets, CategoryPosterior, CigmoConfig, CombineRule, GaussianCode,
    ModelError, Result, ShapeFusion, ViewDependence,
};

/// Checkpoint meta key holding the model kind tag.
pub const KIND_KEY: &str = "kind";

#[derive(Debug, Clone)]
pub(crate) struct Nets<T> {
    pub categorizer: Net<T>,
    pub view_trunk: Net<T>,
    pub view_mean: Vec<Net<T>>,
    pub view_var: Vec<Net<T>>,
    pub shape_trunk: Net<T>,
    pub shape_mean: Vec<Net<T>>,
    pub shape_var: Vec<Net<T>>,
    pub decoder_in: Vec<Net<T>>,
    pub decoder_trunk: Net<T>,
}

impl<T: Scalar> Nets<T> {
    /// Build (fresh when `rng` is given, otherwise attached to existing
    /// weights) with `decoder_heads` first decoder layers.
    pub fn build(
        cfg: &CigmoConfig,
        store: &mut ParamStore<T>,
        mut rng: Option<&mut SeededRng>,
        decoder_heads: &[String],
    ) -> Result<Self> {
        let plan = plan_nets(cfg)?;
        let mut make = |name: &str, spec: &crate::nn::NetSpec| -> Result<Net<T>> {
            Ok(match rng.as_deref_mut() {
                Some(r) => Net::new(name, spec.clone(), store, r)?,
                None => Net::attach(name, spec.clone(), store)?,
            })
        };
        let categorizer = make("categorizer", &plan.categorizer)?;
        let view_trunk = make("view", &plan.view_trunk)?;
        let mut view_mean = Vec::new();
        let mut view_var = Vec::new();
        for j in 0..cfg.view_heads() {
            view_mean.push(make(&format!("view_mean{j}"), &plan.view_mean)?);
            view_var.push(make(&format!("view_var{j}"), &plan.view_var)?);
        }
        let shape_trunk = make("shape", &plan.shape_trunk)?;
        let mut shape_mean = Vec::new();
        let mut shape_var = Vec::new();
        for c in 0..cfg.categories {
            shape_mean.push(make(&format!("shape_mean{c}"), &plan.shape_mean)?);
            shape_var.push(make(&format!("shape_var{c}"), &plan.shape_var)?);
        }
        let decoder_in = decoder_heads.iter().map(|n| make(n, &plan.decoder_in)).collect::<Result<Vec<_>>>()?;
        let decoder_trunk = make("decoder", &plan.decoder_trunk)?;
        Ok(Self { categorizer, view_trunk, view_mean, view_var, shape_trunk, shape_mean, shape_var, decoder_in, decoder_trunk })
    }

    pub fn all(&self) -> Vec<&Net<T>> {
        let mut v = vec![&self.categorizer, &self.view_trunk, &self.shape_trunk, &self.decoder_trunk];
        v.extend(&self.view_mean);
        v.extend(&self.view_var);
        v.extend(&self.shape_mean);
        v.extend(&self.shape_var);
        v.extend(&self.decoder_in);
        v
    }
}

pub(crate) fn decoder_head_names(categories: usize) -> Vec<String> {
    (0..categories).map(|c| format!("decoder_in{c}")).collect()
}

/// Standard-normal draws used by the reparameterization, fixed for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise<T> {
    /// One `[groups, M]` block per category.
    pub shape: Vec<Matrix<T>>,
    /// One `[groups * K, L]` block per view head, rows aligned with the instances.
    pub view: Vec<Matrix<T>>,
}

impl<T: Scalar> Noise<T> {
    pub fn sample(cfg: &CigmoConfig, groups: usize, k: usize, rng: &mut SeededRng) -> Self {
        let mut noise = Self::zeros(cfg, groups, k);
        for m in noise.shape.iter_mut().chain(noise.view.iter_mut()) {
            rng.fill_normal(m.data_mut());
        }
        noise
    }

    pub fn zeros(cfg: &CigmoConfig, groups: usize, k: usize) -> Self {
        Self {
            shape: vec![Matrix::zeros(groups, cfg.shape_dim); cfg.categories],
            view: vec![Matrix::zeros(groups * k, cfg.view_dim); cfg.view_heads()],
        }
    }

    fn check(&self, cfg: &CigmoConfig, groups: usize, k: usize) -> Result<()> {
        let ok = self.shape.len() == cfg.categories
            && self.shape.iter().all(|m| (m.rows(), m.cols()) == (groups, cfg.shape_dim))
            && self.view.len() == cfg.view_heads()
            && self.view.iter().all(|m| (m.rows(), m.cols()) == (groups * k, cfg.view_dim));
        if ok {
            Ok(())
        } else {
            Err(ModelError::Domain(format!("noise blocks do not match {groups} groups of {k}")))
        }
    }
}

/// Per-group ELBO breakdown; `total = recon - kl_cat - kl_view - kl_shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms<T> {
    pub total: T,
    pub recon: T,
    pub kl_cat: T,
    pub kl_view: T,
    pub kl_shape: T,
    /// Group category posterior.
    pub q: Vec<T>,
}

/// Gaussian head pair output.
struct Head<T> {
    mean: Matrix<T>,
    var: Matrix<T>,
    mean_cache: NetCache<T>,
    var_cache: NetCache<T>,
}

struct Forward<T> {
    groups: usize,
    k: usize,
    probs: Matrix<T>,
    q: Matrix<T>,
    cat_cache: NetCache<T>,
    view_trunk_cache: NetCache<T>,
    view: Vec<Head<T>>,
    shape_trunk_cache: NetCache<T>,
    shape: Vec<Head<T>>,
    /// Fused group shape posterior per category, `[groups, M]`.
    zmu: Vec<Matrix<T>>,
    zvar: Vec<Matrix<T>>,
    dec_in_caches: Vec<NetCache<T>>,
    dec_trunk_cache: NetCache<T>,
    /// Decoder means for every category, stacked `[C * N, D]`.
    recon_out: Matrix<T>,
    /// Per-instance log-likelihood `[C][N]`.
    loglik: Vec<Vec<T>>,
    /// Per-instance view KL `[heads][N]`.
    kl_y: Vec<Vec<T>>,
    /// Shape KL `[groups, C]`.
    kl_z: Matrix<T>,
    terms: Vec<ElboTerms<T>>,
}

#[derive(Debug, Clone)]
pub struct Cigmo<T> {
    config: CigmoConfig,
    store: ParamStore<T>,
    nets: Nets<T>,
}

fn gauss_kl_elem<T: Scalar>(m: T, v: T) -> T {
    T::of(0.5) * (m * m + v - T::one() - v.ln())
}

impl<T: Scalar> Cigmo<T> {
    pub fn new(config: CigmoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let nets = Nets::build(&config, &mut store, Some(&mut rng), &decoder_head_names(config.categories))?;
        let mut model = Self { config, store, nets };
        model.tie_category_modules();
        Ok(model)
    }

    /// Start every category module from the same weights, so categories
    /// differ only through what the categorizer routes to them.
    fn tie_category_modules(&mut self) {
        let nets = &self.nets;
        let mut families: Vec<&[Net<T>]> = vec![&nets.shape_mean, &nets.shape_var, &nets.decoder_in];
        if self.config.view == ViewDependence::PerCategory {
            families.extend([&nets.view_mean[..], &nets.view_var[..]]);
        }
        for family in families {
            let source = family[0].param_ids();
            for other in &family[1..] {
                for (&src, dst) in source.iter().zip(other.param_ids()) {
                    let v = self.store.value(src).to_vec();
                    self.store.value_mut(dst).copy_from_slice(&v);
                }
            }
        }
    }

    /// Wrap a store that already holds every weight under the standard names.
    pub fn attach(config: CigmoConfig, mut store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let nets = Nets::build(&config, &mut store, None, &decoder_head_names(config.categories))?;
        let declared: usize = nets.all().iter().map(|n| n.param_ids().len()).sum();
        if declared != store.len() {
            return Err(ModelError::Config(format!(
                "store holds {} weights but the model declares {declared}",
                store.len()
            )));
        }
        Ok(Self { config, store, nets })
    }

    pub fn config(&self) -> &CigmoConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    pub fn net_specs(&self) -> Vec<(String, String)> {
        self.nets.all().iter().map(|n| (n.name().to_owned(), n.spec().to_string())).collect()
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.config.image_dim() {
            return Err(ModelError::Domain(format!(
                "images have {} values, model expects {}",
                x.cols(),
                self.config.image_dim()
            )));
        }
        Ok(())
    }

    fn check_category(&self, c: usize) -> Result<()> {
        if c >= self.config.categories {
            return Err(ModelError::Domain(format!(
                "category {c} out of range 0..{}",
                self.config.categories
            )));
        }
        Ok(())
    }

    /// Categorizer logits, one row per image.
    pub fn instance_logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        Ok(self.nets.categorizer.predict(&self.store, x, Mode::Eval)?)
    }

    /// Per-image category distributions `u(x)`.
    pub fn instance_category(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(softmax_rows(&self.instance_logits(x)?))
    }

    /// Group posterior over categories under the configured combination rule.
    pub fn infer_category(&self, group: &Matrix<T>) -> Result<CategoryPosterior<T>> {
        if group.rows() == 0 {
            return Err(ModelError::Domain("empty group".into()));
        }
        let logits = self.instance_logits(group)?;
        let probs = softmax_rows(&logits);
        Ok(CategoryPosterior { probs: super::combine_category(&probs, Some(&logits), self.config.combine)? })
    }

    /// View posterior per image. `c` must be given exactly when views depend on the category.
    pub fn infer_view(&self, x: &Matrix<T>, c: Option<usize>) -> Result<Vec<GaussianCode<T>>> {
        let head = match (self.config.view, c) {
            (ViewDependence::Universal, None) => 0,
            (ViewDependence::Universal, Some(_)) => {
                return Err(ModelError::Usage("views are universal; no category may be given".into()))
            }
            (ViewDependence::PerCategory, Some(c)) => {
                self.check_category(c)?;
                c
            }
            (ViewDependence::PerCategory, None) => {
                return Err(ModelError::Usage("per-category views need a category".into()))
            }
        };
        self.check_input(x)?;
        let t = self.nets.view_trunk.predict(&self.store, x, Mode::Eval)?;
        let mean = self.nets.view_mean[head].predict(&self.store, &t, Mode::Eval)?;
        let var = self.nets.view_var[head].predict(&self.store, &t, Mode::Eval)?;
        Ok(codes(&mean, &var))
    }

    /// Per-image shape posteriors `(h_c(x), s_c(x))` before group fusion.
    pub fn shape_codes(&self, x: &Matrix<T>, c: usize) -> Result<Vec<GaussianCode<T>>> {
        self.check_category(c)?;
        self.check_input(x)?;
        let t = self.nets.shape_trunk.predict(&self.store, x, Mode::Eval)?;
        let mean = self.nets.shape_mean[c].predict(&self.store, &t, Mode::Eval)?;
        let var = self.nets.shape_var[c].predict(&self.store, &t, Mode::Eval)?;
        Ok(codes(&mean, &var))
    }

    /// Group shape posterior for category `c`.
    pub fn infer_shape(&self, group: &Matrix<T>, c: usize) -> Result<GaussianCode<T>> {
        if group.rows() == 0 {
            return Err(ModelError::Domain("empty group".into()));
        }
        super::fuse_shape(&self.shape_codes(group, c)?, self.config.fusion)
    }

    /// Decoder means `f_c(y, z)`, one row per `(y, z)` row pair.
    pub fn decode(&self, y: &Matrix<T>, z: &Matrix<T>, c: usize) -> Result<Matrix<T>> {
        self.check_category(c)?;
        let (l, m) = (self.config.view_dim, self.config.shape_dim);
        if y.cols() != l || z.cols() != m || y.rows() != z.rows() {
            return Err(ModelError::Domain(format!(
                "decode expects [n, {l}] views and [n, {m}] shapes, got [{}, {}] and [{}, {}]",
                y.rows(),
                y.cols(),
                z.rows(),
                z.cols()
            )));
        }
        let pre = self.nets.decoder_in[c].predict(&self.store, &y.hcat(z), Mode::Eval)?;
        Ok(self.nets.decoder_trunk.predict(&self.store, &pre, Mode::Eval)?)
    }

    /// Most probable category of each image; ties go to the lowest index.
    pub fn classify(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        Ok(self.instance_logits(x)?.iter_rows().map(argmax).collect())
    }

    /// Block shape embedding `[z^1, ..., z^C]` with only the block of the
    /// inferred category filled by its shape mean.
    pub fn shape_embed(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let cats = self.classify(x)?;
        let m = self.config.shape_dim;
        let t = self.nets.shape_trunk.predict(&self.store, x, Mode::Eval)?;
        let mut out = Matrix::zeros(x.rows(), m * self.config.categories);
        for c in 0..self.config.categories {
            let rows: Vec<usize> = (0..x.rows()).filter(|&i| cats[i] == c).collect();
            if rows.is_empty() {
                continue;
            }
            let mean = self.nets.shape_mean[c].predict(&self.store, &t.select_rows(&rows), Mode::Eval)?;
            for (j, &i) in rows.iter().enumerate() {
                out.row_mut(i)[c * m..(c + 1) * m].copy_from_slice(mean.row(j));
            }
        }
        Ok(out)
    }

    /// Per-group ELBO for `x` holding `x.rows() / k` consecutive groups of `k` images.
    pub fn elbo(&self, x: &Matrix<T>, k: usize, noise: &Noise<T>, mode: Mode) -> Result<Vec<ElboTerms<T>>> {
        Ok(self.forward(x, k, noise, mode)?.terms)
    }

    /// ELBO plus accumulation of the gradient of the loss `-mean(total)` into the store.
    /// Returns the loss and the per-group terms.
    pub fn elbo_grad(&mut self, x: &Matrix<T>, k: usize, noise: &Noise<T>, mode: Mode) -> Result<(T, Vec<ElboTerms<T>>)> {
        let fwd = self.forward(x, k, noise, mode)?;
        self.backward(&fwd, x, noise)?;
        Ok((loss_of(&fwd.terms), fwd.terms))
    }

    /// Training step body: gradient accumulation plus batchnorm running statistics.
    pub(crate) fn elbo_grad_train(&mut self, x: &Matrix<T>, k: usize, noise: &Noise<T>) -> Result<T> {
        let fwd = self.forward(x, k, noise, Mode::Train)?;
        self.backward(&fwd, x, noise)?;
        let n = &self.nets;
        n.categorizer.update_running_stats(&mut self.store, &fwd.cat_cache);
        n.view_trunk.update_running_stats(&mut self.store, &fwd.view_trunk_cache);
        n.shape_trunk.update_running_stats(&mut self.store, &fwd.shape_trunk_cache);
        n.decoder_trunk.update_running_stats(&mut self.store, &fwd.dec_trunk_cache);
        Ok(loss_of(&fwd.terms))
    }

    fn forward(&self, x: &Matrix<T>, k: usize, noise: &Noise<T>, mode: Mode) -> Result<Forward<T>> {
        self.check_input(x)?;
        if k == 0 || x.rows() == 0 || x.rows() % k != 0 {
            return Err(ModelError::Domain(format!("{} images do not form groups of {k}", x.rows())));
        }
        let cfg = &self.config;
        let (n, groups) = (x.rows(), x.rows() / k);
        let (cc, m, l, d) = (cfg.categories, cfg.shape_dim, cfg.view_dim, cfg.image_dim());
        noise.check(cfg, groups, k)?;
        let st = &self.store;
        let nets = &self.nets;

        let (logits, cat_cache) = nets.categorizer.forward(st, x, mode)?;
        let probs = softmax_rows(&logits);
        let q = combine_groups(&logits, &probs, k, cfg.combine);

        let (tv, view_trunk_cache) = nets.view_trunk.forward(st, x, mode)?;
        let mut view = Vec::with_capacity(cfg.view_heads());
        for j in 0..cfg.view_heads() {
            view.push(run_head(&nets.view_mean[j], &nets.view_var[j], st, &tv, mode)?);
        }
        let (ts, shape_trunk_cache) = nets.shape_trunk.forward(st, x, mode)?;
        let mut shape = Vec::with_capacity(cc);
        for c in 0..cc {
            shape.push(run_head(&nets.shape_mean[c], &nets.shape_var[c], st, &ts, mode)?);
        }

        let mut zmu = Vec::with_capacity(cc);
        let mut zvar = Vec::with_capacity(cc);
        for h in &shape {
            let (mu, var) = fuse_groups(&h.mean, &h.var, k, cfg.fusion);
            zmu.push(mu);
            zvar.push(var);
        }

        let y: Vec<Matrix<T>> = view.iter().zip(&noise.view).map(|(h, e)| reparam(&h.mean, &h.var, e)).collect();
        let mut dec_in_caches = Vec::with_capacity(cc);
        let mut stacked = Vec::new();
        for c in 0..cc {
            let z = reparam(&zmu[c], &zvar[c], &noise.shape[c]);
            let yc = &y[cfg.view_head_for(c)];
            let mut input = Matrix::zeros(n, l + m);
            for i in 0..n {
                let row = input.row_mut(i);
                row[..l].copy_from_slice(yc.row(i));
                row[l..].copy_from_slice(z.row(i / k));
            }
            let (pre, cache) = nets.decoder_in[c].forward(st, &input, mode)?;
            dec_in_caches.push(cache);
            stacked.extend_from_slice(pre.data());
        }
        let hidden = nets.decoder_in[0].output_size();
        let stacked = Matrix::from_vec(cc * n, hidden, stacked);
        let (recon_out, dec_trunk_cache) = nets.decoder_trunk.forward(st, &stacked, mode)?;

        let log_norm = T::of(0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln());
        let half = T::of(0.5);
        let loglik: Vec<Vec<T>> = (0..cc)
            .map(|c| {
                (0..n)
                    .map(|i| {
                        let sq: T = x.row(i).iter().zip(recon_out.row(c * n + i)).map(|(&a, &b)| (a - b) * (a - b)).sum();
                        -half * sq - log_norm
                    })
                    .collect()
            })
            .collect();
        let kl_y: Vec<Vec<T>> = view
            .iter()
            .map(|h| {
                (0..n)
                    .map(|i| h.mean.row(i).iter().zip(h.var.row(i)).map(|(&mu, &v)| gauss_kl_elem(mu, v)).sum())
                    .collect()
            })
            .collect();
        let mut kl_z = Matrix::zeros(groups, cc);
        for c in 0..cc {
            for g in 0..groups {
                let v = zmu[c].row(g).iter().zip(zvar[c].row(g)).map(|(&mu, &v)| gauss_kl_elem(mu, v)).sum();
                kl_z.set(g, c, v);
            }
        }

        let prior = T::one() / T::of(cc as f64);
        let mut terms = Vec::with_capacity(groups);
        for g in 0..groups {
            let qg = q.row(g);
            let rows = g * k..(g + 1) * k;
            let mut recon = T::zero();
            let mut kl_shape = T::zero();
            let mut kl_cat = T::zero();
            let mut kl_view = T::zero();
            for c in 0..cc {
                let r: T = rows.clone().map(|i| loglik[c][i]).sum();
                recon += qg[c] * r;
                kl_shape += qg[c] * kl_z.get(g, c);
                if qg[c] > T::zero() {
                    kl_cat += qg[c] * (qg[c] / prior).ln();
                }
            }
            match cfg.view {
                ViewDependence::Universal => kl_view = rows.clone().map(|i| kl_y[0][i]).sum(),
                ViewDependence::PerCategory => {
                    for c in 0..cc {
                        kl_view += qg[c] * rows.clone().map(|i| kl_y[c][i]).sum::<T>();
                    }
                }
            }
            let total = recon - kl_cat - kl_view - kl_shape;
            if !total.is_finite() {
                return Err(ModelError::NonFinite {
                    group: g,
                    recon: recon.as_f64(),
                    kl_cat: kl_cat.as_f64(),
                    kl_view: kl_view.as_f64(),
                    kl_shape: kl_shape.as_f64(),
                });
            }
            terms.push(ElboTerms { total, recon, kl_cat, kl_view, kl_shape, q: qg.to_vec() });
        }

        Ok(Forward {
            groups,
            k,
            probs,
            q,
            cat_cache,
            view_trunk_cache,
            view,
            shape_trunk_cache,
            shape,
            zmu,
            zvar,
            dec_in_caches,
            dec_trunk_cache,
            recon_out,
            loglik,
            kl_y,
            kl_z,
            terms,
        })
    }

    /// Accumulate d(-mean total)/d(weights).
    fn backward(&mut self, f: &Forward<T>, x: &Matrix<T>, noise: &Noise<T>) -> Result<()> {
        let cfg = self.config.clone();
        let (groups, k) = (f.groups, f.k);
        let n = groups * k;
        let (cc, m, l) = (cfg.categories, cfg.shape_dim, cfg.view_dim);
        let s = -T::one() / T::of(groups as f64);
        let half = T::of(0.5);
        let two = T::of(2.0);
        let store = &mut self.store;
        let nets = &self.nets;

        // Reconstruction: d total / d f = q_c (x - f).
        let d = x.cols();
        let mut d_out = Matrix::zeros(cc * n, d);
        for c in 0..cc {
            for i in 0..n {
                let w = s * f.q.get(i / k, c);
                let out = d_out.row_mut(c * n + i);
                for ((o, &xv), &fv) in out.iter_mut().zip(x.row(i)).zip(f.recon_out.row(c * n + i)) {
                    *o = w * (xv - fv);
                }
            }
        }
        let d_pre = nets.decoder_trunk.backward(store, &f.dec_trunk_cache, &d_out)?;
        let hidden = d_pre.cols();
        let mut d_y: Vec<Matrix<T>> = vec![Matrix::zeros(n, l); cfg.view_heads()];
        let mut d_z: Vec<Matrix<T>> = vec![Matrix::zeros(groups, m); cc];
        for c in 0..cc {
            let block = Matrix::from_vec(n, hidden, d_pre.data()[c * n * hidden..(c + 1) * n * hidden].to_vec());
            let d_in = nets.decoder_in[c].backward(store, &f.dec_in_caches[c], &block)?;
            let dy = &mut d_y[cfg.view_head_for(c)];
            for i in 0..n {
                let row = d_in.row(i);
                dy.row_mut(i).iter_mut().zip(&row[..l]).for_each(|(a, &b)| *a += b);
                d_z[c].row_mut(i / k).iter_mut().zip(&row[l..]).for_each(|(a, &b)| *a += b);
            }
        }

        // Category posterior.
        let prior = T::one() / T::of(cc as f64);
        let mut d_q = Matrix::zeros(groups, cc);
        for g in 0..groups {
            for c in 0..cc {
                let qc = f.q.get(g, c);
                let mut v: T = (g * k..(g + 1) * k).map(|i| f.loglik[c][i]).sum::<T>() - f.kl_z.get(g, c);
                if cfg.view == ViewDependence::PerCategory {
                    v -= (g * k..(g + 1) * k).map(|i| f.kl_y[c][i]).sum::<T>();
                }
                if qc > T::zero() {
                    v -= (qc / prior).ln() + T::one();
                }
                d_q.set(g, c, s * v);
            }
        }
        let d_logits = combine_groups_backward(&f.q, &f.probs, &d_q, k, cfg.combine);
        nets.categorizer.backward(store, &f.cat_cache, &d_logits)?;

        // Shape: reparameterization, KL weighted by q_c, then group fusion.
        let mut d_ts = Matrix::zeros(n, nets.shape_trunk.output_size());
        for c in 0..cc {
            let (mu, var, eps) = (&f.zmu[c], &f.zvar[c], &noise.shape[c]);
            let mut d_mu = d_z[c].clone();
            let mut d_var = Matrix::zeros(groups, m);
            for g in 0..groups {
                let w = s * f.q.get(g, c);
                for j in 0..m {
                    let (mv, vv, dz) = (mu.get(g, j), var.get(g, j), d_z[c].get(g, j));
                    let mut dv = dz * eps.get(g, j) / (two * vv.sqrt());
                    dv -= w * half * (T::one() - T::one() / vv);
                    d_var.set(g, j, dv);
                    d_mu.set(g, j, d_mu.get(g, j) - w * mv);
                }
            }
            let h = &f.shape[c];
            let (d_hm, d_hv) = fuse_groups_backward(&h.mean, &h.var, mu, var, &d_mu, &d_var, k, cfg.fusion);
            d_ts.add_assign(&nets.shape_mean[c].backward(store, &h.mean_cache, &d_hm)?);
            d_ts.add_assign(&nets.shape_var[c].backward(store, &h.var_cache, &d_hv)?);
        }
        nets.shape_trunk.backward(store, &f.shape_trunk_cache, &d_ts)?;

        // Views.
        let mut d_tv = Matrix::zeros(n, nets.view_trunk.output_size());
        for (j, h) in f.view.iter().enumerate() {
            let eps = &noise.view[j];
            let mut d_mean = d_y[j].clone();
            let mut d_var = Matrix::zeros(n, l);
            for i in 0..n {
                let w = match cfg.view {
                    ViewDependence::Universal => s,
                    ViewDependence::PerCategory => s * f.q.get(i / k, j),
                };
                for a in 0..l {
                    let (mv, vv, dy) = (h.mean.get(i, a), h.var.get(i, a), d_y[j].get(i, a));
                    d_mean.set(i, a, dy - w * mv);
                    d_var.set(i, a, dy * eps.get(i, a) / (two * vv.sqrt()) - w * half * (T::one() - T::one() / vv));
                }
            }
            d_tv.add_assign(&nets.view_mean[j].backward(store, &h.mean_cache, &d_mean)?);
            d_tv.add_assign(&nets.view_var[j].backward(store, &h.var_cache, &d_var)?);
        }
        nets.view_trunk.backward(store, &f.view_trunk_cache, &d_tv)?;
        Ok(())
    }

    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        let mut ckpt = Checkpoint::from_store(&self.store);
        ckpt.meta.push((KIND_KEY.to_owned(), kind.to_owned()));
        ckpt.meta.extend(self.config.to_pairs());
        ckpt.nets = self.net_specs();
        ckpt
    }

    /// Rebuild a model from a checkpoint; returns the model and its kind tag.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, String)> {
        let pairs = ckpt.meta.iter().filter(|(k, _)| CigmoConfig::KEYS.contains(&k.as_str()));
        let config = CigmoConfig::from_pairs(pairs.map(|(k, v)| (k.as_str(), v.as_str())))?;
        let mut model = Self::new(config, 0)?;
        for (name, spec) in &ckpt.nets {
            let ours = model.nets.all().into_iter().find(|n| n.name() == name).map(|n| n.spec().to_string());
            if ours.as_deref() != Some(spec.as_str()) {
                return Err(ModelError::Config(format!("checkpoint net `{name}` does not match the configuration")));
            }
        }
        ckpt.restore_into(&mut model.store)?;
        let kind = ckpt.meta(KIND_KEY).unwrap_or("cigmo").to_owned();
        Ok((model, kind))
    }

    /// Write a checkpoint with extra meta entries (e.g. a dataset fingerprint).
    pub fn save(&self, path: &Path, kind: &str, extra: &[(String, String)]) -> Result<()> {
        let mut ckpt = self.to_checkpoint(kind);
        ckpt.meta.extend(extra.iter().cloned());
        let file = std::fs::File::create(path).map_err(crate::nn::NnError::from)?;
        ckpt.write_to(std::io::BufWriter::new(file))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let file = std::fs::File::open(path).map_err(crate::nn::NnError::from)?;
        let ckpt = Checkpoint::read_from(file)?;
        let (model, _) = Self::from_checkpoint(&ckpt)?;
        Ok((model, ckpt))
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Cigmo<U> {
        Cigmo::attach(self.config.clone(), self.store.cast()).expect("same layout")
    }
}

fn loss_of<T: Scalar>(terms: &[ElboTerms<T>]) -> T {
    -terms.iter().map(|t| t.total).sum::<T>() / T::of(terms.len() as f64)
}

fn codes<T: Scalar>(mean: &Matrix<T>, var: &Matrix<T>) -> Vec<GaussianCode<T>> {
    (0..mean.rows()).map(|i| GaussianCode { mean: mean.row(i).to_vec(), var: var.row(i).to_vec() }).collect()
}

fn run_head<T: Scalar>(mean: &Net<T>, var: &Net<T>, st: &ParamStore<T>, t: &Matrix<T>, mode: Mode) -> Result<Head<T>> {
    let (m, mean_cache) = mean.forward(st, t, mode)?;
    let (v, var_cache) = var.forward(st, t, mode)?;
    Ok(Head { mean: m, var: v, mean_cache, var_cache })
}

fn reparam<T: Scalar>(mean: &Matrix<T>, var: &Matrix<T>, eps: &Matrix<T>) -> Matrix<T> {
    let data = mean.data().iter().zip(var.data()).zip(eps.data()).map(|((&m, &v), &e)| m + v.sqrt() * e).collect();
    Matrix::from_vec(mean.rows(), mean.cols(), data)
}

fn combine_groups<T: Scalar>(logits: &Matrix<T>, probs: &Matrix<T>, k: usize, rule: CombineRule) -> Matrix<T> {
    let groups = logits.rows() / k;
    let c = logits.cols();
    let kf = T::of(k as f64);
    let mut q = Matrix::zeros(groups, c);
    for g in 0..groups {
        let mut acc = vec![T::zero(); c];
        for i in g * k..(g + 1) * k {
            match rule {
                CombineRule::Average => acc.iter_mut().zip(probs.row(i)).for_each(|(a, &p)| *a += p),
                CombineRule::Product => {
                    acc.iter_mut().zip(log_softmax_row(logits.row(i))).for_each(|(a, p)| *a += p)
                }
                CombineRule::LogitAverage => acc.iter_mut().zip(logits.row(i)).for_each(|(a, &p)| *a += p),
            }
        }
        let row = match rule {
            CombineRule::Average => acc.into_iter().map(|v| v / kf).collect(),
            CombineRule::Product => normalize_log(&acc),
            CombineRule::LogitAverage => normalize_log(&acc.into_iter().map(|v| v / kf).collect::<Vec<_>>()),
        };
        q.row_mut(g).copy_from_slice(&row);
    }
    q
}

/// Softmax backward: `p ⊙ (dp - <dp, p>)`.
fn softmax_back<T: Scalar>(p: &[T], dp: &[T]) -> Vec<T> {
    let dot: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    p.iter().zip(dp).map(|(&a, &b)| a * (b - dot)).collect()
}

fn combine_groups_backward<T: Scalar>(
    q: &Matrix<T>,
    probs: &Matrix<T>,
    d_q: &Matrix<T>,
    k: usize,
    rule: CombineRule,
) -> Matrix<T> {
    let (groups, c) = (q.rows(), q.cols());
    let kf = T::of(k as f64);
    let mut d_logits = Matrix::zeros(groups * k, c);
    for g in 0..groups {
        let dq = d_q.row(g);
        match rule {
            CombineRule::Average => {
                let dp: Vec<T> = dq.iter().map(|&v| v / kf).collect();
                for i in g * k..(g + 1) * k {
                    d_logits.row_mut(i).copy_from_slice(&softmax_back(probs.row(i), &dp));
                }
            }
            CombineRule::Product => {
                let ds = softmax_back(q.row(g), dq);
                let total: T = ds.iter().copied().sum();
                for i in g * k..(g + 1) * k {
                    let row: Vec<T> = ds.iter().zip(probs.row(i)).map(|(&a, &p)| a - p * total).collect();
                    d_logits.row_mut(i).copy_from_slice(&row);
                }
            }
            CombineRule::LogitAverage => {
                let ds: Vec<T> = softmax_back(q.row(g), dq).into_iter().map(|v| v / kf).collect();
                for i in g * k..(g + 1) * k {
                    d_logits.row_mut(i).copy_from_slice(&ds);
                }
            }
        }
    }
    d_logits
}

fn fuse_groups<T: Scalar>(mean: &Matrix<T>, var: &Matrix<T>, k: usize, fusion: ShapeFusion) -> (Matrix<T>, Matrix<T>) {
    let (groups, m) = (mean.rows() / k, mean.cols());
    let kf = T::of(k as f64);
    let mut mu = Matrix::zeros(groups, m);
    let mut v = Matrix::zeros(groups, m);
    for g in 0..groups {
        for i in g * k..(g + 1) * k {
            for j in 0..m {
                let (hm, hv) = (mean.get(i, j), var.get(i, j));
                match fusion {
                    ShapeFusion::Average => {
                        mu.set(g, j, mu.get(g, j) + hm);
                        v.set(g, j, v.get(g, j) + hv);
                    }
                    ShapeFusion::Precision => {
                        mu.set(g, j, mu.get(g, j) + hm / hv);
                        v.set(g, j, v.get(g, j) + T::one() / hv);
                    }
                }
            }
        }
        for j in 0..m {
            match fusion {
                ShapeFusion::Average => {
                    mu.set(g, j, mu.get(g, j) / kf);
                    v.set(g, j, v.get(g, j) / kf);
                }
                ShapeFusion::Precision => {
                    let var = T::one() / v.get(g, j);
                    v.set(g, j, var);
                    mu.set(g, j, mu.get(g, j) * var);
                }
            }
        }
    }
    (mu, v)
}

#[allow(clippy::too_many_arguments)]
fn fuse_groups_backward<T: Scalar>(
    mean: &Matrix<T>,
    var: &Matrix<T>,
    mu: &Matrix<T>,
    v: &Matrix<T>,
    d_mu: &Matrix<T>,
    d_v: &Matrix<T>,
    k: usize,
    fusion: ShapeFusion,
) -> (Matrix<T>, Matrix<T>) {
    let (n, m) = (mean.rows(), mean.cols());
    let kf = T::of(k as f64);
    let mut d_mean = Matrix::zeros(n, m);
    let mut d_var = Matrix::zeros(n, m);
    for i in 0..n {
        let g = i / k;
        for j in 0..m {
            let (dm, dv) = (d_mu.get(g, j), d_v.get(g, j));
            match fusion {
                ShapeFusion::Average => {
                    d_mean.set(i, j, dm / kf);
                    d_var.set(i, j, dv / kf);
                }
                ShapeFusion::Precision => {
                    let (s, vv, mm) = (var.get(i, j), v.get(g, j), mu.get(g, j));
                    d_mean.set(i, j, dm * vv / s);
                    let r = vv / (s * s);
                    d_var.set(i, j, dm * r * (mm - mean.get(i, j)) + dv * vv * r);
                }
            }
        }
    }
    (d_mean, d_var)
}
