//! Feed-forward nets with explicit forward caches and hand-written backward passes.

use std::sync::atomic::{AtomicU64, Ordering};

use super::error::{shape_err, NnError, Result};
use super::params::{ParamId, ParamStore};
use super::rng::SeededRng;
use super::spec::{LayerSpec, NetSpec, Shape};
use super::tensor::{gemm, Matrix, Scalar, Trans};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm normalizes with batch statistics.
    Train,
    /// Batchnorm is the fixed affine map given by the running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfold one `channels x height x width` image into `[patch, positions]`.
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.pad as isize);
        let npos = self.positions();
        for c in 0..self.channels {
            let plane = &img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * npos;
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        let dst = &mut cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *d = if ix < 0 || ix >= self.width as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add columns back onto the image.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.pad as isize);
        let npos = self.positions();
        for c in 0..self.channels {
            let base = c * self.height * self.width;
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * npos;
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            img[base + iy as usize * self.width + ix as usize] += cols[row + oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Dense { w: ParamId, b: ParamId, inputs: usize, outputs: usize },
    Conv { w: ParamId, b: ParamId, filters: usize, geom: ConvGeom },
    /// Transposed convolution; `geom` describes the adjoint convolution
    /// running from the output image back to the input grid.
    Deconv { w: ParamId, b: ParamId, in_channels: usize, geom: ConvGeom },
    BatchNorm { gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId, channels: usize, spatial: usize },
    Relu,
    Softmax,
    Softplus,
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone)]
struct Layer {
    kind: Kind,
    out_size: usize,
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Input(Matrix<T>),
    Output(Matrix<T>),
    Norm { xhat: Matrix<T>, inv_std: Vec<T>, batch_mean: Vec<T>, batch_var: Vec<T>, train: bool },
    Nothing,
}

/// Everything [`Net::backward`] needs from one forward call.
#[derive(Debug, Clone)]
pub struct NetCache<T> {
    net: u64,
    store: u64,
    version: u64,
    batch: usize,
    layers: Vec<LayerCache<T>>,
}

impl<T> NetCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone)]
pub struct Net<T> {
    id: u64,
    name: String,
    spec: NetSpec,
    layers: Vec<Layer>,
    _marker: std::marker::PhantomData<T>,
}

/// Softplus that stays finite for large |x|.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn kaiming_uniform<T: Scalar>(n: usize, fan_in: f64, rng: &mut SeededRng) -> Vec<T> {
    let bound = (6.0 / fan_in.max(1.0)).sqrt();
    (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect()
}

impl<T: Scalar> Net<T> {
    /// Build a net and register freshly initialized weights under `name.*`.
    pub fn new(name: &str, spec: NetSpec, store: &mut ParamStore<T>, rng: &mut SeededRng) -> Result<Self> {
        Self::build(name, spec, store, Some(rng))
    }

    /// Build a net over weights already present in `store` (e.g. after loading).
    pub fn attach(name: &str, spec: NetSpec, store: &mut ParamStore<T>) -> Result<Self> {
        Self::build(name, spec, store, None)
    }

    fn build(name: &str, spec: NetSpec, store: &mut ParamStore<T>, mut rng: Option<&mut SeededRng>) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut input = spec.input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let fresh = rng.is_some();
        for (i, (l, &out)) in spec.layers.iter().zip(&shapes).enumerate() {
            let prefix = format!("{name}.{i}");
            let mut param = |suffix: &str, shape: &[usize], init: Vec<T>, trainable: bool| -> Result<ParamId> {
                let full = format!("{prefix}.{suffix}");
                match fresh {
                    true => store.add(&full, shape, init, trainable),
                    false => {
                        let id = store
                            .lookup(&full)
                            .ok_or_else(|| NnError::Checkpoint(format!("missing weight `{full}`")))?;
                        if store.param(id).shape != shape {
                            return Err(NnError::Checkpoint(format!(
                                "weight `{full}` has shape {:?}, net expects {shape:?}",
                                store.param(id).shape
                            )));
                        }
                        Ok(id)
                    }
                }
            };
            let kind = match *l {
                LayerSpec::Dense { inputs, outputs } => {
                    let init = match rng.as_deref_mut() {
                        Some(r) => kaiming_uniform(inputs * outputs, inputs as f64, r),
                        None => Vec::new(),
                    };
                    let w = param("weight", &[outputs, inputs], init, true)?;
                    let b = param("bias", &[outputs], vec![T::zero(); outputs], true)?;
                    Kind::Dense { w, b, inputs, outputs }
                }
                LayerSpec::Conv { filters, kernel, stride, pad } => {
                    let Shape::Image { channels, height, width } = input else { unreachable!("validated") };
                    let Shape::Image { height: out_h, width: out_w, .. } = out else { unreachable!() };
                    let geom = ConvGeom { channels, height, width, kernel, stride, pad, out_h, out_w };
                    let fan_in = geom.patch();
                    let init = match rng.as_deref_mut() {
                        Some(r) => kaiming_uniform(filters * fan_in, fan_in as f64, r),
                        None => Vec::new(),
                    };
                    let w = param("weight", &[filters, channels, kernel, kernel], init, true)?;
                    let b = param("bias", &[filters], vec![T::zero(); filters], true)?;
                    Kind::Conv { w, b, filters, geom }
                }
                LayerSpec::Deconv { filters, kernel, stride, pad } => {
                    let Shape::Image { channels: in_channels, height, width } = input else { unreachable!() };
                    let Shape::Image { height: oh, width: ow, .. } = out else { unreachable!() };
                    let geom = ConvGeom {
                        channels: filters,
                        height: oh,
                        width: ow,
                        kernel,
                        stride,
                        pad,
                        out_h: height,
                        out_w: width,
                    };
                    let fan_in = (in_channels * kernel * kernel) as f64 / (stride * stride) as f64;
                    let init = match rng.as_deref_mut() {
                        Some(r) => kaiming_uniform(in_channels * geom.patch(), fan_in, r),
                        None => Vec::new(),
                    };
                    let w = param("weight", &[in_channels, filters, kernel, kernel], init, true)?;
                    let b = param("bias", &[filters], vec![T::zero(); filters], true)?;
                    Kind::Deconv { w, b, in_channels, geom }
                }
                LayerSpec::BatchNorm => {
                    let (channels, spatial) = input.channel_split();
                    let gamma = param("gamma", &[channels], vec![T::one(); channels], true)?;
                    let beta = param("beta", &[channels], vec![T::zero(); channels], true)?;
                    let mean = param("running_mean", &[channels], vec![T::zero(); channels], false)?;
                    let var = param("running_var", &[channels], vec![T::one(); channels], false)?;
                    Kind::BatchNorm { gamma, beta, mean, var, channels, spatial }
                }
                LayerSpec::Relu => Kind::Relu,
                LayerSpec::Softmax => Kind::Softmax,
                LayerSpec::Softplus => Kind::Softplus,
                LayerSpec::Sigmoid => Kind::Sigmoid,
                LayerSpec::Linear | LayerSpec::Reshape { .. } => Kind::Identity,
            };
            layers.push(Layer { kind, out_size: out.size() });
            input = out;
        }
        Ok(Self {
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            name: name.to_owned(),
            spec,
            layers,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn input_size(&self) -> usize {
        self.spec.input.size()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(self.input_size(), |l| l.out_size)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l.kind {
                Kind::Dense { w, b, .. } | Kind::Conv { w, b, .. } | Kind::Deconv { w, b, .. } => vec![w, b],
                Kind::BatchNorm { gamma, beta, mean, var, .. } => vec![gamma, beta, mean, var],
                _ => vec![],
            })
            .collect()
    }

    /// Output of the net without keeping a cache around for the caller.
    pub fn predict(&self, store: &ParamStore<T>, x: &Matrix<T>, mode: Mode) -> Result<Matrix<T>> {
        self.forward(store, x, mode).map(|(y, _)| y)
    }

    pub fn forward(&self, store: &ParamStore<T>, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, NetCache<T>)> {
        if x.cols() != self.input_size() {
            return Err(shape_err(&format!("net `{}` input", self.name), self.input_size(), x.cols()));
        }
        let n = x.rows();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, cache) = match &layer.kind {
                Kind::Dense { w, b, outputs, inputs } => {
                    let mut out = Matrix::zeros(n, *outputs);
                    let bias = store.value(*b);
                    for r in 0..n {
                        out.row_mut(r).copy_from_slice(bias);
                    }
                    gemm(
                        T::one(),
                        cur.data(),
                        n,
                        *inputs,
                        Trans::No,
                        store.value(*w),
                        *outputs,
                        *inputs,
                        Trans::Yes,
                        T::one(),
                        out.data_mut(),
                    );
                    (out, LayerCache::Input(cur))
                }
                Kind::Conv { w, b, filters, geom } => {
                    let npos = geom.positions();
                    let mut out = Matrix::zeros(n, filters * npos);
                    let mut cols = vec![T::zero(); geom.patch() * npos];
                    let (wv, bv) = (store.value(*w), store.value(*b));
                    for r in 0..n {
                        geom.im2col(cur.row(r), &mut cols);
                        let dst = out.row_mut(r);
                        for (f, chunk) in dst.chunks_mut(npos).enumerate() {
                            chunk.iter_mut().for_each(|v| *v = bv[f]);
                        }
                        gemm(T::one(), wv, *filters, geom.patch(), Trans::No, &cols, geom.patch(), npos, Trans::No, T::one(), dst);
                    }
                    (out, LayerCache::Input(cur))
                }
                Kind::Deconv { w, b, in_channels, geom } => {
                    let in_pos = geom.positions();
                    let plane = geom.height * geom.width;
                    let mut out = Matrix::zeros(n, geom.channels * plane);
                    let mut cols = vec![T::zero(); geom.patch() * in_pos];
                    let (wv, bv) = (store.value(*w), store.value(*b));
                    for r in 0..n {
                        gemm(
                            T::one(),
                            wv,
                            *in_channels,
                            geom.patch(),
                            Trans::Yes,
                            cur.row(r),
                            *in_channels,
                            in_pos,
                            Trans::No,
                            T::zero(),
                            &mut cols,
                        );
                        let dst = out.row_mut(r);
                        geom.col2im(&cols, dst);
                        for (f, chunk) in dst.chunks_mut(plane).enumerate() {
                            chunk.iter_mut().for_each(|v| *v += bv[f]);
                        }
                    }
                    (out, LayerCache::Input(cur))
                }
                Kind::BatchNorm { gamma, beta, mean, var, channels, spatial } => {
                    let (c, s) = (*channels, *spatial);
                    let eps = T::of(BN_EPS);
                    let (batch_mean, batch_var) = if mode == Mode::Train {
                        let count = T::of((n * s) as f64);
                        let mut mu = vec![T::zero(); c];
                        let mut var_b = vec![T::zero(); c];
                        for r in 0..n {
                            for (ch, chunk) in cur.row(r).chunks(s).enumerate() {
                                mu[ch] += chunk.iter().copied().sum::<T>();
                            }
                        }
                        mu.iter_mut().for_each(|m| *m /= count);
                        for r in 0..n {
                            for (ch, chunk) in cur.row(r).chunks(s).enumerate() {
                                var_b[ch] += chunk.iter().map(|&v| (v - mu[ch]) * (v - mu[ch])).sum::<T>();
                            }
                        }
                        var_b.iter_mut().for_each(|v| *v /= count);
                        (mu, var_b)
                    } else {
                        (store.value(*mean).to_vec(), store.value(*var).to_vec())
                    };
                    let inv_std: Vec<T> = batch_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                    let (g, bt) = (store.value(*gamma), store.value(*beta));
                    let mut xhat = cur.clone();
                    let mut out = cur;
                    for r in 0..n {
                        let xr = xhat.row_mut(r);
                        for (ch, chunk) in xr.chunks_mut(s).enumerate() {
                            chunk.iter_mut().for_each(|v| *v = (*v - batch_mean[ch]) * inv_std[ch]);
                        }
                        let orow = out.row_mut(r);
                        for (ch, (o, xh)) in orow.chunks_mut(s).zip(xhat.row(r).chunks(s)).enumerate() {
                            for (ov, &xv) in o.iter_mut().zip(xh) {
                                *ov = g[ch] * xv + bt[ch];
                            }
                        }
                    }
                    let cache = LayerCache::Norm { xhat, inv_std, batch_mean, batch_var, train: mode == Mode::Train };
                    (out, cache)
                }
                Kind::Relu => {
                    let out = cur.map(|v| v.max(T::zero()));
                    (out.clone(), LayerCache::Output(out))
                }
                Kind::Sigmoid => {
                    let out = cur.map(sigmoid);
                    (out.clone(), LayerCache::Output(out))
                }
                Kind::Softmax => {
                    let out = softmax_rows(&cur);
                    (out.clone(), LayerCache::Output(out))
                }
                Kind::Softplus => (cur.map(softplus), LayerCache::Input(cur)),
                Kind::Identity => (cur, LayerCache::Nothing),
            };
            caches.push(cache);
            cur = next;
        }
        let cache = NetCache { net: self.id, store: store.id(), version: store.version(), batch: n, layers: caches };
        Ok((cur, cache))
    }

    /// Accumulate weight gradients into `store` and return the input gradient.
    pub fn backward(&self, store: &mut ParamStore<T>, cache: &NetCache<T>, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        if cache.net != self.id || cache.store != store.id() || cache.version != store.version() {
            return Err(NnError::StaleCache);
        }
        let n = cache.batch;
        if grad_out.rows() != n || grad_out.cols() != self.output_size() {
            return Err(shape_err(
                &format!("net `{}` output gradient", self.name),
                format!("{n}x{}", self.output_size()),
                format!("{}x{}", grad_out.rows(), grad_out.cols()),
            ));
        }
        let mut g = grad_out.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            g = match (&layer.kind, lc) {
                (Kind::Dense { w, b, inputs, outputs }, LayerCache::Input(x)) => {
                    {
                        let db = store.grad_mut(*b);
                        for r in 0..n {
                            for (d, &gv) in db.iter_mut().zip(g.row(r)) {
                                *d += gv;
                            }
                        }
                    }
                    let (wv, dw) = store.value_and_grad_mut(*w);
                    gemm(T::one(), g.data(), n, *outputs, Trans::Yes, x.data(), n, *inputs, Trans::No, T::one(), dw);
                    let mut dx = Matrix::zeros(n, *inputs);
                    gemm(T::one(), g.data(), n, *outputs, Trans::No, wv, *outputs, *inputs, Trans::No, T::zero(), dx.data_mut());
                    dx
                }
                (Kind::Conv { w, b, filters, geom }, LayerCache::Input(x)) => {
                    let npos = geom.positions();
                    let patch = geom.patch();
                    let mut cols = vec![T::zero(); patch * npos];
                    let mut dcols = vec![T::zero(); patch * npos];
                    let mut dx = Matrix::zeros(n, x.cols());
                    {
                        let db = store.grad_mut(*b);
                        for r in 0..n {
                            for (f, chunk) in g.row(r).chunks(npos).enumerate() {
                                db[f] += chunk.iter().copied().sum::<T>();
                            }
                        }
                    }
                    let (wv, dw) = store.value_and_grad_mut(*w);
                    for r in 0..n {
                        geom.im2col(x.row(r), &mut cols);
                        let gr = g.row(r);
                        gemm(T::one(), gr, *filters, npos, Trans::No, &cols, patch, npos, Trans::Yes, T::one(), dw);
                        gemm(T::one(), wv, *filters, patch, Trans::Yes, gr, *filters, npos, Trans::No, T::zero(), &mut dcols);
                        geom.col2im(&dcols, dx.row_mut(r));
                    }
                    dx
                }
                (Kind::Deconv { w, b, in_channels, geom }, LayerCache::Input(x)) => {
                    let in_pos = geom.positions();
                    let patch = geom.patch();
                    let plane = geom.height * geom.width;
                    let mut gcols = vec![T::zero(); patch * in_pos];
                    let mut dx = Matrix::zeros(n, x.cols());
                    {
                        let db = store.grad_mut(*b);
                        for r in 0..n {
                            for (f, chunk) in g.row(r).chunks(plane).enumerate() {
                                db[f] += chunk.iter().copied().sum::<T>();
                            }
                        }
                    }
                    let (wv, dw) = store.value_and_grad_mut(*w);
                    for r in 0..n {
                        geom.im2col(g.row(r), &mut gcols);
                        let xr = x.row(r);
                        gemm(T::one(), xr, *in_channels, in_pos, Trans::No, &gcols, patch, in_pos, Trans::Yes, T::one(), dw);
                        gemm(T::one(), wv, *in_channels, patch, Trans::No, &gcols, patch, in_pos, Trans::No, T::zero(), dx.row_mut(r));
                    }
                    dx
                }
                (Kind::BatchNorm { gamma, beta, channels, spatial, .. }, LayerCache::Norm { xhat, inv_std, train, .. }) => {
                    let (c, s) = (*channels, *spatial);
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for r in 0..n {
                        for (ch, (gc, xc)) in g.row(r).chunks(s).zip(xhat.row(r).chunks(s)).enumerate() {
                            for (&gv, &xv) in gc.iter().zip(xc) {
                                sum_g[ch] += gv;
                                sum_gx[ch] += gv * xv;
                            }
                        }
                    }
                    store.grad_mut(*beta).iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                    store.grad_mut(*gamma).iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
                    let gam = store.value(*gamma);
                    let mut dx = g.clone();
                    let count = T::of((n * s) as f64);
                    for r in 0..n {
                        let xr = xhat.row(r).to_vec();
                        for (ch, (dc, xc)) in dx.row_mut(r).chunks_mut(s).zip(xr.chunks(s)).enumerate() {
                            let scale = gam[ch] * inv_std[ch];
                            for (dv, &xv) in dc.iter_mut().zip(xc) {
                                *dv = if *train {
                                    scale * (*dv - sum_g[ch] / count - xv * sum_gx[ch] / count)
                                } else {
                                    scale * *dv
                                };
                            }
                        }
                    }
                    dx
                }
                (Kind::Relu, LayerCache::Output(y)) => {
                    let mut dx = g;
                    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        if yv <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    dx
                }
                (Kind::Sigmoid, LayerCache::Output(y)) => {
                    let mut dx = g;
                    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= yv * (T::one() - yv);
                    }
                    dx
                }
                (Kind::Softmax, LayerCache::Output(y)) => {
                    let mut dx = g;
                    for r in 0..n {
                        let yr = y.row(r);
                        let dot: T = dx.row(r).iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = yv * (*d - dot);
                        }
                    }
                    dx
                }
                (Kind::Softplus, LayerCache::Input(x)) => {
                    let mut dx = g;
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        *d *= sigmoid(xv);
                    }
                    dx
                }
                (Kind::Identity, LayerCache::Nothing) => g,
                _ => return Err(NnError::StaleCache),
            };
        }
        Ok(g)
    }

    /// Fold the batch statistics of a training-mode forward into the running averages.
    pub fn update_running_stats(&self, store: &mut ParamStore<T>, cache: &NetCache<T>) {
        let mom = T::of(BN_MOMENTUM);
        for (layer, lc) in self.layers.iter().zip(&cache.layers) {
            if let (Kind::BatchNorm { mean, var, spatial, .. }, LayerCache::Norm { batch_mean, batch_var, train: true, .. }) =
                (&layer.kind, lc)
            {
                let count = (cache.batch * spatial) as f64;
                let unbias = if count > 1.0 { T::of(count / (count - 1.0)) } else { T::one() };
                for (r, &m) in store.buffer_mut(*mean).iter_mut().zip(batch_mean) {
                    *r = (T::one() - mom) * *r + mom * m;
                }
                for (r, &v) in store.buffer_mut(*var).iter_mut().zip(batch_var) {
                    *r = (T::one() - mom) * *r + mom * v * unbias;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(spec: &str, seed: u64) -> (Net<f64>, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let net = Net::new("net", spec.parse().unwrap(), &mut store, &mut rng).unwrap();
        (net, store)
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = SeededRng::new(seed);
        let mut m = Matrix::zeros(rows, cols);
        rng.fill_normal(m.data_mut());
        m
    }

    /// Central finite differences of `sum(out * probe)` against the analytic backward pass.
    fn grad_check(spec: &str, rows: usize, mode: Mode) {
        let (net, mut store) = build(spec, 7);
        // Perturb every weight so batchnorm gamma/beta and biases are not at symmetric points.
        let mut rng = SeededRng::new(99);
        for id in net.param_ids() {
            if store.param(id).trainable {
                for v in store.value_mut(id) {
                    *v += 0.1 * rng.standard_normal::<f64>();
                }
            }
        }
        if mode == Mode::Eval {
            for id in net.param_ids() {
                let p = store.param(id);
                if !p.trainable && p.name.ends_with("running_var") {
                    let n = p.len();
                    store.buffer_mut(id).copy_from_slice(&vec![1.7; n]);
                }
            }
        }
        let x = random_input(rows, net.input_size(), 3);
        let probe = random_input(rows, net.output_size(), 4);
        let objective = |store: &ParamStore<f64>, x: &Matrix<f64>| -> f64 {
            let y = net.predict(store, x, mode).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward(&store, &x, mode).unwrap();
        store.zero_grad();
        let dx = net.backward(&mut store, &cache, &probe).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let scale = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (analytic - numeric).abs() / scale < 1e-4,
                "{spec}: {what}: analytic {analytic} vs numeric {numeric}"
            );
        };
        let analytic = store.flat_grads();
        for (i, &a) in analytic.iter().enumerate() {
            let (id, off) = store.flat_locate(i).unwrap();
            let orig = store.value(id)[off];
            let mut s = store.clone();
            s.value_mut(id)[off] = orig + h;
            let up = objective(&s, &x);
            s.value_mut(id)[off] = orig - h;
            let down = objective(&s, &x);
            check(a, (up - down) / (2.0 * h), &store.param(id).name);
        }
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let up = objective(&store, &xp);
            xp.data_mut()[i] -= 2.0 * h;
            let down = objective(&store, &xp);
            check(dx.data()[i], (up - down) / (2.0 * h), "input");
        }
    }

    #[test]
    fn gradient_check_dense_and_activations() {
        grad_check("input 5 | dense 5 4 | relu | dense 4 3 | softplus", 3, Mode::Train);
        grad_check("input 5 | dense 5 4 | sigmoid", 3, Mode::Train);
        grad_check("input 4 | dense 4 3 | softmax", 2, Mode::Train);
        grad_check("input 4 | dense 4 3 | linear", 2, Mode::Train);
    }

    #[test]
    fn gradient_check_five_weight_net() {
        // dense 2 -> 1 has 3 weights, dense 1 -> 1 has 2.
        grad_check("input 2 | dense 2 1 | sigmoid", 4, Mode::Train);
        grad_check("input 2 | dense 2 1 | relu | dense 1 1 | linear", 4, Mode::Train);
    }

    #[test]
    fn gradient_check_batchnorm_both_modes() {
        grad_check("input 4 | dense 4 3 | batchnorm | relu | dense 3 2 | linear", 5, Mode::Train);
        grad_check("input 4 | dense 4 3 | batchnorm | sigmoid", 5, Mode::Eval);
        grad_check("input 2x3x3 | batchnorm | reshape 2x3x3 | dense 18 2 | linear", 3, Mode::Train);
    }

    #[test]
    fn gradient_check_conv_and_deconv() {
        grad_check("input 2x5x5 | conv 3 3 2 1 | relu | dense 27 2 | linear", 2, Mode::Train);
        grad_check("input 1x6x6 | conv 2 5 2 2 | batchnorm | relu | conv 2 3 1 0 | linear", 2, Mode::Train);
        grad_check("input 3 | dense 3 8 | reshape 2x2x2 | deconv 2 6 2 2 | sigmoid", 2, Mode::Train);
        grad_check("input 2x3x3 | deconv 1 3 2 1 | linear", 2, Mode::Train);
    }

    #[test]
    fn dense_identity_weights_pass_input_through() {
        let (net, mut store) = build("input 2 | dense 2 2 | linear", 1);
        let w = store.lookup("net.0.weight").unwrap();
        store.value_mut(w).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let y = net.predict(&store, &Matrix::row_vector(&[3.0, -1.0]), Mode::Eval).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn output_heads_closed_forms() {
        let (net, mut store) = build("input 3 | dense 3 3 | softmax", 1);
        let w = store.lookup("net.0.weight").unwrap();
        store.value_mut(w).iter_mut().for_each(|v| *v = 0.0);
        let y = net.predict(&store, &Matrix::row_vector(&[0.3, 2.0, -1.0]), Mode::Eval).unwrap();
        for &p in y.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-800.0f64) >= 0.0 && softplus(800.0f64).is_finite());
        assert!(softplus(-30.0f64) > 0.0);
    }

    #[test]
    fn linear_backward_base_case_and_zero_gradient() {
        let (net, mut store) = build("input 3 | dense 3 2 | linear", 5);
        let x = Matrix::row_vector(&[1.0, -2.0, 0.5]);
        let (_, cache) = net.forward(&store, &x, Mode::Train).unwrap();
        let g = Matrix::row_vector(&[2.0, -1.0]);
        net.backward(&mut store, &cache, &g).unwrap();
        let w = store.lookup("net.0.weight").unwrap();
        assert_eq!(store.grad(w), &[2.0, -4.0, 1.0, -1.0, 2.0, -0.5]);

        store.zero_grad();
        let (_, cache) = net.forward(&store, &x, Mode::Train).unwrap();
        let dx = net.backward(&mut store, &cache, &Matrix::zeros(1, 2)).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(store.flat_grads().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (net, mut store) = build("input 2 | dense 2 2 | linear", 1);
        let x = Matrix::row_vector(&[1.0, 2.0]);
        let (_, cache) = net.forward(&store, &x, Mode::Train).unwrap();
        let w = store.lookup("net.0.weight").unwrap();
        store.value_mut(w)[0] = 5.0;
        let err = net.backward(&mut store, &cache, &Matrix::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, NnError::StaleCache));
        let (other, _) = build("input 2 | dense 2 2 | linear", 1);
        let (_, cache) = net.forward(&store, &x, Mode::Train).unwrap();
        assert!(matches!(other.backward(&mut store, &cache, &Matrix::zeros(1, 2)), Err(NnError::StaleCache)));
    }

    #[test]
    fn eval_batchnorm_is_batch_independent() {
        let (net, mut store) = build("input 3 | batchnorm | linear", 2);
        let x = random_input(6, 3, 8);
        let (_, cache) = net.forward(&store, &x, Mode::Train).unwrap();
        net.update_running_stats(&mut store, &cache);
        let full = net.predict(&store, &x, Mode::Eval).unwrap();
        for r in 0..6 {
            let single = net.predict(&store, &x.slice_rows(r, r + 1), Mode::Eval).unwrap();
            assert_eq!(single.row(0), full.row(r));
        }
    }

    #[test]
    fn input_shape_mismatch_is_a_configuration_error() {
        let (net, store) = build("input 4 | dense 4 2 | linear", 1);
        let err = net.forward(&store, &Matrix::zeros(1, 3), Mode::Eval).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { .. }));
    }
}
