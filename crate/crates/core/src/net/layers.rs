use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{par, Error, Result};

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A differentiable layer. `backward` consumes the state cached by the most
/// recent `forward`, accumulates parameter gradients and returns the input
/// gradient.
pub trait Layer<T: Scalar>: Send {
    fn name(&self) -> &str;
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&self) -> Vec<&Tensor<T>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Vec::new()
    }
    /// Non-learned state saved with checkpoints (batch-norm running stats).
    fn buffers(&self) -> Vec<&Tensor<T>> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Vec::new()
    }
}

fn mismatch(layer: &str, detail: String) -> Error {
    Error::ShapeMismatch {
        layer: layer.to_string(),
        detail,
    }
}

fn no_cache(layer: &str) -> Error {
    mismatch(layer, "backward called before forward".into())
}

fn kaiming<T: Scalar>(n: usize, fan_in: f64, rng: &mut impl Rng) -> Vec<T> {
    let std = (2.0 / fan_in).sqrt();
    (0..n)
        .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn check_grad_shape<T: Scalar>(layer: &str, expected: &[usize], g: &Tensor<T>) -> Result<()> {
    if g.shape() != expected {
        return Err(mismatch(
            layer,
            format!("gradient shape {:?}, expected {:?}", g.shape(), expected),
        ));
    }
    Ok(())
}

fn add_into<T: Scalar>(acc: &mut [T], parts: impl IntoIterator<Item = Vec<T>>) {
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
}

/// 2D convolution, weight `(C_out, C_in, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    weight: Tensor<T>,
    bias: Tensor<T>,
    cache: Option<(Vec<usize>, Vec<Vec<T>>)>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(cin > 0 && cout > 0 && k > 0 && stride > 0);
        let w = kaiming(cout * cin * k * k, (cin * k * k) as f64, rng);
        Conv2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
            weight: Tensor::param(vec![cout, cin, k, k], w),
            bias: Tensor::param(vec![cout], vec![T::zero(); cout]),
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let o = |n: usize| (n + 2 * self.pad).checked_sub(self.k).map(|v| v / self.stride + 1);
        Some((o(h)?, o(w)?))
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let np = oh * ow;
        let mut cols = vec![T::zero(); self.cin * k * k * np];
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * np..][..np];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &x[(c * h + iy as usize) * w..][..w];
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                row[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let np = oh * ow;
        let mut x = vec![T::zero(); self.cin * h * w];
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * np..][..np];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * h + iy as usize) * w..][..w];
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cin {
            return Err(mismatch(
                &self.name,
                format!("expected (N, {}, H, W), got {:?}", self.cin, s),
            ));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let (oh, ow) = self
            .output_size(h, w)
            .ok_or_else(|| mismatch(&self.name, format!("input {h}x{w} smaller than kernel {}", self.k)))?;
        let (kk, np, cout) = (self.cin * self.k * self.k, oh * ow, self.cout);
        let this = &*self;
        let results: Vec<(Vec<T>, Vec<T>)> = par::map_range(n, |b| {
            let cols = this.im2col(x.sample(b), h, w, oh, ow);
            let mut out = vec![T::zero(); cout * np];
            for (co, row) in out.chunks_mut(np).enumerate() {
                row.fill(this.bias.data()[co]);
            }
            T::gemm(
                cout,
                kk,
                np,
                T::one(),
                this.weight.data(),
                kk as isize,
                1,
                &cols,
                np as isize,
                1,
                T::one(),
                &mut out,
                np as isize,
                1,
            );
            (cols, out)
        });
        let (cols, outs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        self.cache = Some((s.to_vec(), cols));
        Tensor::new(vec![n, cout, oh, ow], outs.concat())
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (in_shape, cols) = self.cache.take().ok_or_else(|| no_cache(&self.name))?;
        let (n, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
        let (oh, ow) = self.output_size(h, w).expect("cached shape");
        check_grad_shape(&self.name, &[n, self.cout, oh, ow], g)?;
        let (kk, np, cout) = (self.cin * self.k * self.k, oh * ow, self.cout);
        let this = &*self;
        let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_range(n, |b| {
            let gy = g.sample(b);
            let mut dw = vec![T::zero(); cout * kk];
            T::gemm(
                cout,
                np,
                kk,
                T::one(),
                gy,
                np as isize,
                1,
                &cols[b],
                1,
                np as isize,
                T::zero(),
                &mut dw,
                kk as isize,
                1,
            );
            let db: Vec<T> = gy.chunks(np).map(|r| r.iter().copied().sum()).collect();
            let mut dcols = vec![T::zero(); kk * np];
            T::gemm(
                kk,
                cout,
                np,
                T::one(),
                this.weight.data(),
                1,
                kk as isize,
                gy,
                np as isize,
                1,
                T::zero(),
                &mut dcols,
                np as isize,
                1,
            );
            (dw, db, this.col2im(&dcols, h, w, oh, ow))
        });
        let mut dx = Vec::with_capacity(n * self.cin * h * w);
        let mut dws = Vec::with_capacity(n);
        let mut dbs = Vec::with_capacity(n);
        for (dw, db, x) in parts {
            dws.push(dw);
            dbs.push(db);
            dx.extend(x);
        }
        add_into(self.weight.grad_mut().expect("param"), dws);
        add_into(self.bias.grad_mut().expect("param"), dbs);
        Tensor::new(in_shape, dx)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 3D transposed convolution, weight `(C_in, C_out, k, k, k)`. Output size per
/// axis is `(n - 1)·stride - 2·pad + k`.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d<T> {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    weight: Tensor<T>,
    bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose3d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin as f64 * (k as f64 / stride as f64).powi(3);
        let w = kaiming(cin * cout * k * k * k, fan_in, rng);
        Self::with_weights(name, cin, cout, k, stride, pad, w)
    }

    /// All-zero weights and bias.
    pub fn zeros(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self::with_weights(name, cin, cout, k, stride, pad, vec![T::zero(); cin * cout * k * k * k])
    }

    fn with_weights(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        w: Vec<T>,
    ) -> Self {
        assert!(cin > 0 && cout > 0 && k > 0 && stride > 0);
        ConvTranspose3d {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
            weight: Tensor::param(vec![cin, cout, k, k, k], w),
            bias: Tensor::param(vec![cout], vec![T::zero(); cout]),
            cache: None,
        }
    }

    pub fn output_size(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let o = |n: usize| {
            ((n - 1) * self.stride + self.k)
                .checked_sub(2 * self.pad)
                .filter(|&v| v > 0)
        };
        Some([o(dims[0])?, o(dims[1])?, o(dims[2])?])
    }

    /// Visits every (kernel row, input index, output index) triple that lies
    /// inside the output.
    fn for_each_tap(&self, d: [usize; 3], o: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let k3 = k * k * k;
        let pin = d[0] * d[1] * d[2];
        let pout = o[0] * o[1] * o[2];
        for co in 0..self.cout {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let r = co * k3 + (kz * k + ky) * k + kx;
                        for iz in 0..d[0] {
                            let oz = iz as isize * s + kz as isize - p;
                            if oz < 0 || oz >= o[0] as isize {
                                continue;
                            }
                            for iy in 0..d[1] {
                                let oy = iy as isize * s + ky as isize - p;
                                if oy < 0 || oy >= o[1] as isize {
                                    continue;
                                }
                                for ix in 0..d[2] {
                                    let ox = ix as isize * s + kx as isize - p;
                                    if ox < 0 || ox >= o[2] as isize {
                                        continue;
                                    }
                                    let q = (iz * d[1] + iy) * d[2] + ix;
                                    let out = co * pout + (oz as usize * o[1] + oy as usize) * o[2] + ox as usize;
                                    f(r * pin + q, out, co);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Layer<T> for ConvTranspose3d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.cin {
            return Err(mismatch(
                &self.name,
                format!("expected (N, {}, D1, D2, D3), got {:?}", self.cin, s),
            ));
        }
        let d = [s[2], s[3], s[4]];
        let o = self
            .output_size(d)
            .ok_or_else(|| mismatch(&self.name, format!("empty output for input {d:?}")))?;
        let (n, pin, pout) = (s[0], d.iter().product::<usize>(), o.iter().product::<usize>());
        let rows = self.cout * self.k.pow(3);
        let this = &*self;
        let outs: Vec<Vec<T>> = par::map_range(n, |b| {
            let mut cols = vec![T::zero(); rows * pin];
            T::gemm(
                rows,
                this.cin,
                pin,
                T::one(),
                this.weight.data(),
                1,
                rows as isize,
                x.sample(b),
                pin as isize,
                1,
                T::zero(),
                &mut cols,
                pin as isize,
                1,
            );
            let mut out = vec![T::zero(); this.cout * pout];
            for (co, ch) in out.chunks_mut(pout).enumerate() {
                ch.fill(this.bias.data()[co]);
            }
            this.for_each_tap(d, o, |ci, oi, _| out[oi] += cols[ci]);
            out
        });
        self.cache = Some(x.clone());
        Tensor::new(vec![n, self.cout, o[0], o[1], o[2]], outs.concat())
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| no_cache(&self.name))?;
        let s = x.shape();
        let d = [s[2], s[3], s[4]];
        let o = self.output_size(d).expect("cached shape");
        check_grad_shape(&self.name, &[s[0], self.cout, o[0], o[1], o[2]], g)?;
        let (n, pin, pout) = (s[0], d.iter().product::<usize>(), o.iter().product::<usize>());
        let rows = self.cout * self.k.pow(3);
        let this = &*self;
        let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_range(n, |b| {
            let gy = g.sample(b);
            let mut dcols = vec![T::zero(); rows * pin];
            this.for_each_tap(d, o, |ci, oi, _| dcols[ci] = gy[oi]);
            let mut dx = vec![T::zero(); this.cin * pin];
            T::gemm(
                this.cin,
                rows,
                pin,
                T::one(),
                this.weight.data(),
                rows as isize,
                1,
                &dcols,
                pin as isize,
                1,
                T::zero(),
                &mut dx,
                pin as isize,
                1,
            );
            let mut dw = vec![T::zero(); this.cin * rows];
            T::gemm(
                this.cin,
                pin,
                rows,
                T::one(),
                x.sample(b),
                pin as isize,
                1,
                &dcols,
                1,
                pin as isize,
                T::zero(),
                &mut dw,
                rows as isize,
                1,
            );
            let db = gy.chunks(pout).map(|c| c.iter().copied().sum()).collect();
            (dx, dw, db)
        });
        let mut dx = Vec::with_capacity(x.len());
        let mut dws = Vec::with_capacity(n);
        let mut dbs = Vec::with_capacity(n);
        for (a, w, b) in parts {
            dx.extend(a);
            dws.push(w);
            dbs.push(b);
        }
        add_into(self.weight.grad_mut().expect("param"), dws);
        add_into(self.bias.grad_mut().expect("param"), dbs);
        Tensor::new(s.to_vec(), dx)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    shape: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

/// Batch normalization over all axes but the channel axis (axis 1).
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    name: String,
    channels: usize,
    eps: f64,
    momentum: f64,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            name: name.into(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Tensor::param(vec![channels], vec![T::one(); channels]),
            beta: Tensor::param(vec![channels], vec![T::zero(); channels]),
            running_mean: Tensor::new(vec![channels], vec![T::zero(); channels]).expect("shape"),
            running_var: Tensor::new(vec![channels], vec![T::one(); channels]).expect("shape"),
            cache: None,
        }
    }
}

fn channel_indices(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    (n, c, spatial)
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(mismatch(
                &self.name,
                format!("expected (N, {}, ...), got {shape:?}", self.channels),
            ));
        }
        let (n, c, sp) = channel_indices(&shape);
        let m = n * sp;
        if mode == Mode::Train && m < 2 {
            return Err(mismatch(
                &self.name,
                format!("training needs more than one value per channel, got {shape:?}"),
            ));
        }
        let xd = x.data();
        let channel = |ch: usize| (0..n).flat_map(move |b| ((b * c + ch) * sp)..((b * c + ch) * sp + sp));
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![T::zero(); c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mf = m as f64;
                    let mean = channel(ch).map(|i| xd[i].as_f64()).sum::<f64>() / mf;
                    let var = channel(ch).map(|i| (xd[i].as_f64() - mean).powi(2)).sum::<f64>() / mf;
                    let mo = self.momentum;
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = T::of((1.0 - mo) * rm.as_f64() + mo * mean);
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = T::of((1.0 - mo) * rv.as_f64() + mo * var * mf / (mf - 1.0));
                    (mean, var)
                }
                Mode::Eval => (
                    self.running_mean.data()[ch].as_f64(),
                    self.running_var.data()[ch].as_f64(),
                ),
            };
            means[ch] = T::of(mean);
            inv_std[ch] = T::of(1.0 / (var + self.eps).sqrt());
        }
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let (g, be) = (self.gamma.data()[ch], self.beta.data()[ch]);
                let base = (b * c + ch) * sp;
                for i in base..base + sp {
                    xhat[i] = (xd[i] - means[ch]) * inv_std[ch];
                    y[i] = g * xhat[i] + be;
                }
            }
        }
        self.cache = Some(BnCache {
            shape: shape.clone(),
            xhat,
            inv_std,
            mode,
        });
        Tensor::new(shape, y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| no_cache(&self.name))?;
        check_grad_shape(&self.name, &cache.shape, g)?;
        let (n, c, sp) = channel_indices(&cache.shape);
        let m = T::of((n * sp) as f64);
        let gd = g.data();
        let mut dx = vec![T::zero(); gd.len()];
        for ch in 0..c {
            let idx = || (0..n).flat_map(move |b| ((b * c + ch) * sp)..((b * c + ch) * sp + sp));
            let sum_dy: T = idx().map(|i| gd[i]).sum();
            let sum_dy_xhat: T = idx().map(|i| gd[i] * cache.xhat[i]).sum();
            self.gamma.grad_mut().expect("param")[ch] += sum_dy_xhat;
            self.beta.grad_mut().expect("param")[ch] += sum_dy;
            let scale = self.gamma.data()[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    for i in idx() {
                        dx[i] = scale / m * (m * gd[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
                    }
                }
                Mode::Eval => {
                    for i in idx() {
                        dx[i] = scale * gd[i];
                    }
                }
            }
        }
        Tensor::new(cache.shape, dx)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Tensor<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

/// Parametric ReLU with one learned slope per channel (initially 0.25).
#[derive(Clone, Debug)]
pub struct PRelu<T> {
    name: String,
    slope: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> PRelu<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        PRelu {
            name: name.into(),
            slope: Tensor::param(vec![channels], vec![T::of(0.25); channels]),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for PRelu<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.slope.len() {
            return Err(mismatch(
                &self.name,
                format!("expected (N, {}, ...), got {s:?}", self.slope.len()),
            ));
        }
        let (_, c, sp) = channel_indices(s);
        let a = self.slope.data();
        let y: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > T::zero() { v } else { a[(i / sp) % c] * v })
            .collect();
        self.cache = Some(x.clone());
        Tensor::new(s.to_vec(), y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| no_cache(&self.name))?;
        check_grad_shape(&self.name, x.shape(), g)?;
        let (_, c, sp) = channel_indices(x.shape());
        let mut da = vec![T::zero(); c];
        let a = self.slope.data();
        let dx: Vec<T> = x
            .data()
            .iter()
            .zip(g.data())
            .enumerate()
            .map(|(i, (&v, &gy))| {
                if v > T::zero() {
                    gy
                } else {
                    let ch = (i / sp) % c;
                    da[ch] += gy * v;
                    a[ch] * gy
                }
            })
            .collect();
        add_into(self.slope.grad_mut().expect("param"), [da]);
        Tensor::new(x.shape().to_vec(), dx)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.slope]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.slope]
    }
}

/// Additive Gaussian noise during training; identity in evaluation.
#[derive(Clone, Debug)]
pub struct Anl {
    name: String,
    sigma: f64,
    rng: ChaCha8Rng,
}

impl Anl {
    pub fn new(name: impl Into<String>, sigma: f64, seed: u64) -> Self {
        Anl {
            name: name.into(),
            sigma,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

impl<T: Scalar> Layer<T> for Anl {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Eval || self.sigma == 0.0 {
            return Ok(x.map(|v| v));
        }
        let mut y = x.map(|v| v);
        for v in y.data_mut() {
            *v += T::of(self.sigma * self.rng.sample::<f64, _>(StandardNormal));
        }
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(g.map(|v| v))
    }
}

/// Parameter-free reinterpretation of the per-sample shape.
#[derive(Clone, Debug)]
pub struct Reshape {
    name: String,
    from: Vec<usize>,
    to: Vec<usize>,
}

impl Reshape {
    pub fn new(name: impl Into<String>, from: Vec<usize>, to: Vec<usize>) -> Result<Self> {
        let name = name.into();
        if from.iter().product::<usize>() != to.iter().product::<usize>() {
            return Err(mismatch(
                &name,
                format!("cannot reshape {from:?} into {to:?}: element counts differ"),
            ));
        }
        Ok(Reshape { name, from, to })
    }

    fn apply<T: Scalar>(&self, x: &Tensor<T>, from: &[usize], to: &[usize]) -> Result<Tensor<T>> {
        if &x.shape()[1..] != from {
            return Err(mismatch(
                &self.name,
                format!("expected (N, {from:?}), got {:?}", x.shape()),
            ));
        }
        let mut shape = vec![x.shape()[0]];
        shape.extend_from_slice(to);
        x.reshaped(shape)
    }
}

impl<T: Scalar> Layer<T> for Reshape {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.apply(x, &self.from, &self.to)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(g, &self.to, &self.from)
    }
}

/// Fixed multiplier.
#[derive(Clone, Debug)]
pub struct Scale {
    name: String,
    factor: f64,
}

impl Scale {
    pub fn new(name: impl Into<String>, factor: f64) -> Self {
        Scale {
            name: name.into(),
            factor,
        }
    }
}

impl<T: Scalar> Layer<T> for Scale {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let f = T::of(self.factor);
        Ok(x.map(|v| v * f))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let f = T::of(self.factor);
        Ok(g.map(|v| v * f))
    }
}

/// Strided residual block: `prelu(bn(conv3(prelu(bn(conv3_s(x))))) + bn(conv1_s(x)))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    name: String,
    conv_a: Conv2d<T>,
    bn_a: BatchNorm<T>,
    act_a: PRelu<T>,
    conv_b: Conv2d<T>,
    bn_b: BatchNorm<T>,
    skip_conv: Conv2d<T>,
    skip_bn: BatchNorm<T>,
    act_out: PRelu<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let name = name.into();
        ResidualBlock {
            conv_a: Conv2d::new(format!("{name}.conv_a"), cin, cout, 3, stride, 1, rng),
            bn_a: BatchNorm::new(format!("{name}.bn_a"), cout),
            act_a: PRelu::new(format!("{name}.act_a"), cout),
            conv_b: Conv2d::new(format!("{name}.conv_b"), cout, cout, 3, 1, 1, rng),
            bn_b: BatchNorm::new(format!("{name}.bn_b"), cout),
            skip_conv: Conv2d::new(format!("{name}.skip_conv"), cin, cout, 1, stride, 0, rng),
            skip_bn: BatchNorm::new(format!("{name}.skip_bn"), cout),
            act_out: PRelu::new(format!("{name}.act_out"), cout),
            name,
        }
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let a = self.conv_a.forward(x, mode)?;
        let a = self.bn_a.forward(&a, mode)?;
        let a = self.act_a.forward(&a, mode)?;
        let b = self.conv_b.forward(&a, mode)?;
        let mut b = self.bn_b.forward(&b, mode)?;
        let s = self.skip_conv.forward(x, mode)?;
        let s = self.skip_bn.forward(&s, mode)?;
        b.data_mut().iter_mut().zip(s.data()).for_each(|(v, w)| *v += *w);
        self.act_out.forward(&b, mode)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.act_out.backward(g)?;
        let gb = self.bn_b.backward(&g)?;
        let ga = self.conv_b.backward(&gb)?;
        let ga = self.act_a.backward(&ga)?;
        let ga = self.bn_a.backward(&ga)?;
        let mut gx = self.conv_a.backward(&ga)?;
        let gs = self.skip_bn.backward(&g)?;
        let gs = self.skip_conv.backward(&gs)?;
        gx.data_mut().iter_mut().zip(gs.data()).for_each(|(v, w)| *v += *w);
        Ok(gx)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.conv_a.params();
        p.extend(self.bn_a.params());
        p.extend(self.act_a.params());
        p.extend(self.conv_b.params());
        p.extend(self.bn_b.params());
        p.extend(self.skip_conv.params());
        p.extend(self.skip_bn.params());
        p.extend(self.act_out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.conv_a.params_mut();
        p.extend(self.bn_a.params_mut());
        p.extend(self.act_a.params_mut());
        p.extend(self.conv_b.params_mut());
        p.extend(self.bn_b.params_mut());
        p.extend(self.skip_conv.params_mut());
        p.extend(self.skip_bn.params_mut());
        p.extend(self.act_out.params_mut());
        p
    }

    fn buffers(&self) -> Vec<&Tensor<T>> {
        let mut b = self.bn_a.buffers();
        b.extend(self.bn_b.buffers());
        b.extend(self.skip_bn.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut b = self.bn_a.buffers_mut();
        b.extend(self.bn_b.buffers_mut());
        b.extend(self.skip_bn.buffers_mut());
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn input(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of input and parameter gradients of
    /// `L = Σ w ⊙ layer(x)` for a fixed random weighting `w`.
    fn gradcheck<L: Layer<f64> + Clone>(layer: &L, x: &Tensor<f64>, mode: Mode) {
        let mut l = layer.clone();
        let y = l.forward(x, mode).unwrap();
        let w = input(y.shape().to_vec(), 99);
        let loss = |l: &mut L, x: &Tensor<f64>| -> f64 {
            let y = l.forward(x, mode).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let gx = l.backward(&w).unwrap();
        let h = 1e-6;
        for i in (0..x.len()).step_by((x.len() / 40).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&mut layer.clone(), &xp) - loss(&mut layer.clone(), &xm)) / (2.0 * h);
            let an = gx.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "input {i}: fd {fd} vs analytic {an}"
            );
        }
        let grads: Vec<Vec<f64>> = l.params().iter().map(|p| p.grad().unwrap().to_vec()).collect();
        for (pi, g) in grads.iter().enumerate() {
            for j in (0..g.len()).step_by((g.len() / 20).max(1)) {
                let bump = |d: f64| {
                    let mut c = layer.clone();
                    c.params_mut()[pi].data_mut()[j] += d;
                    loss(&mut c, x)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!(
                    (fd - g[j]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pi}[{j}]: fd {fd} vs analytic {}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn conv2d_output_sizes() {
        let c = Conv2d::<f64>::new("c", 1, 2, 4, 2, 1, &mut rng());
        assert_eq!(c.output_size(64, 64), Some((32, 32)));
        let c = Conv2d::<f64>::new("c", 1, 2, 3, 2, 1, &mut rng());
        assert_eq!(c.output_size(32, 16), Some((16, 8)));
        let c = Conv2d::<f64>::new("c", 1, 2, 1, 2, 0, &mut rng());
        assert_eq!(c.output_size(32, 32), Some((16, 16)));
    }

    #[test]
    fn conv2d_dirac_kernel_is_identity() {
        let mut c = Conv2d::<f64>::new("c", 2, 2, 3, 1, 1, &mut rng());
        let w = c.weight.data_mut();
        w.fill(0.0);
        for ch in 0..2 {
            w[((ch * 2 + ch) * 3 + 1) * 3 + 1] = 1.0;
        }
        let x = input(vec![2, 2, 5, 4], 3);
        let y = c.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_hand_picked_weights() {
        let mut c = Conv2d::<f64>::new("c", 1, 1, 3, 1, 0, &mut rng());
        c.weight
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, -1.0, 2.0, 0.5, 0.0, 0.0, -3.0, 1.0]);
        c.bias.data_mut()[0] = 0.25;
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = c
            .forward(&Tensor::new(vec![1, 1, 4, 4], x).unwrap(), Mode::Eval)
            .unwrap();
        // Window at (r, c) sums w[i][j]·(4(r+i) + c+j); the weights sum to 0.5
        // and Σ w·(4i + j) = -8.5, so every output is 0.5·(4r + c) - 8.25.
        let want = [-8.25, -7.75, -6.25, -5.75];
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        for (g, w) in y.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut c = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, &mut rng());
        let x = input(vec![1, 2, 5, 6], 1);
        let y = c.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        let w = c.weight.data();
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = c.bias.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    acc += w[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(co * 3 + oy) * 3 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_matches_scatter() {
        let mut c = ConvTranspose3d::<f64>::new("t", 2, 2, 4, 2, 1, &mut rng());
        let x = input(vec![1, 2, 2, 1, 3], 2);
        let y = c.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 2, 6]);
        let o = [4usize, 2, 6];
        let mut expect = vec![0.0; 2 * 48];
        let w = c.weight.data();
        for ci in 0..2 {
            for (q, &xv) in x.sample(0)[ci * 6..ci * 6 + 6].iter().enumerate() {
                let (iz, iy, ix) = (q / 3, 0, q % 3);
                for co in 0..2 {
                    for kz in 0..4 {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let oz = (iz * 2 + kz) as isize - 1;
                                let oy = (iy * 2 + ky) as isize - 1;
                                let ox = (ix * 2 + kx) as isize - 1;
                                if (0..4).contains(&oz) && (0..2).contains(&oy) && (0..6).contains(&ox) {
                                    expect[co * 48 + (oz as usize * o[1] + oy as usize) * o[2] + ox as usize] +=
                                        w[(((ci * 2 + co) * 4 + kz) * 4 + ky) * 4 + kx] * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng();
        gradcheck(
            &Conv2d::new("c", 2, 3, 4, 2, 1, &mut r),
            &input(vec![2, 2, 6, 6], 3),
            Mode::Train,
        );
        gradcheck(
            &ConvTranspose3d::new("t", 3, 2, 4, 2, 1, &mut r),
            &input(vec![2, 3, 2, 1, 2], 4),
            Mode::Train,
        );
        gradcheck(
            &ConvTranspose3d::new("t", 2, 2, 3, 1, 1, &mut r),
            &input(vec![1, 2, 3, 2, 3], 5),
            Mode::Train,
        );
        let mut bn = BatchNorm::new("bn", 3);
        bn.gamma.data_mut().copy_from_slice(&[0.7, 1.3, -0.4]);
        bn.beta.data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        gradcheck(&bn, &input(vec![2, 3, 2, 3], 6), Mode::Train);
        gradcheck(&bn, &input(vec![2, 3, 2, 3], 6), Mode::Eval);
        gradcheck(&PRelu::new("p", 3), &input(vec![2, 3, 4], 7), Mode::Train);
        gradcheck(
            &ResidualBlock::new("r", 2, 4, 2, &mut r),
            &input(vec![2, 2, 4, 4], 8),
            Mode::Train,
        );
        gradcheck(
            &Reshape::new("s", vec![4, 2, 2], vec![2, 2, 2, 2]).unwrap(),
            &input(vec![1, 4, 2, 2], 9),
            Mode::Train,
        );
    }

    #[test]
    fn batchnorm_running_stats_use_unbiased_variance() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert!(bn
            .forward(&Tensor::new(vec![1, 1], vec![1.0]).unwrap(), Mode::Train)
            .is_err());
    }

    #[test]
    fn anl_is_identity_in_eval_and_seeded_in_train() {
        let x = input(vec![1, 2, 3], 10);
        let mut a = Anl::new("n", 0.5, 3);
        assert_eq!(Layer::<f64>::forward(&mut a, &x, Mode::Eval).unwrap().data(), x.data());
        let y1 = Layer::<f64>::forward(&mut Anl::new("n", 0.5, 3), &x, Mode::Train).unwrap();
        let y2 = Layer::<f64>::forward(&mut Anl::new("n", 0.5, 3), &x, Mode::Train).unwrap();
        assert_eq!(y1, y2);
        assert_ne!(y1.data(), x.data());
    }

    #[test]
    fn reshape_rejects_count_mismatch_and_wrong_input() {
        assert!(Reshape::new("s", vec![4, 2], vec![3, 3]).is_err());
        let mut s = Reshape::new("s", vec![4, 2], vec![2, 2, 2]).unwrap();
        assert!(Layer::<f64>::forward(&mut s, &input(vec![1, 2, 4], 1), Mode::Eval).is_err());
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut c = Conv2d::<f64>::new("c", 1, 1, 3, 1, 1, &mut rng());
        assert!(c.backward(&input(vec![1, 1, 3, 3], 1)).is_err());
    }
}
