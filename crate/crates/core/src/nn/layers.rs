//! Layer implementations. Each layer caches what its backward pass needs
//! during `forward`; `backward` consumes the cache and accumulates parameter
//! gradients, returning the gradient w.r.t. its input.

use ndarray::{Array1, Array2, Array4, Axis, Zip};

use super::{Param, StateVisitor};
use crate::nn::init::Init;

pub trait Module {
    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64>;
    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64>;
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);
    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor);
    /// Channel count this layer produces for the given input channel count.
    fn out_channels(&self, c_in: usize) -> usize;
}

fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// im2col for one sample: output shape [C*kh*kw, OH*OW].
fn im2col_sample(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((c_in * kh * kw, oh * ow));
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = c * kh * kw + ky * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a column gradient back to the input layout of one sample.
fn col2im_sample(
    col_grad: &Array2<f64>,
    grad_x: &mut ndarray::ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c_in, h, w) = grad_x.dim();
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = c * kh * kw + ky * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        grad_x[[c, iy as usize, ix as usize]] += col_grad[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

pub struct Conv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    kernel: (usize, usize),
    in_ch: usize,
    out_ch: usize,
    cache_x: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: &mut Init,
    ) -> Self {
        let w = Param::new(
            "weight",
            init.conv_weight(out_ch, in_ch, kernel, kernel).into_dyn(),
        );
        let b = bias.then(|| Param::new("bias", Array1::<f64>::zeros(out_ch).into_dyn()));
        Conv2d {
            w,
            b,
            stride,
            pad,
            kernel: (kernel, kernel),
            in_ch,
            out_ch,
            cache_x: None,
        }
    }
}

impl Module for Conv2d {
    fn forward(&mut self, x: &Array4<f64>, _train: bool) -> Array4<f64> {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.in_ch, "conv input channels");
        let (kh, kw) = self.kernel;
        let oh = conv_out_len(h, kh, self.stride, self.pad);
        let ow = conv_out_len(w, kw, self.stride, self.pad);
        let k = c_in * kh * kw;
        let w_mat = self.w.value.to_shape((self.out_ch, k)).unwrap();
        let mut y = Array4::<f64>::zeros((n, self.out_ch, oh, ow));
        for i in 0..n {
            let col = im2col_sample(&x.index_axis(Axis(0), i), kh, kw, self.stride, self.pad, oh, ow);
            let y_mat = w_mat.dot(&col); // [out, OH*OW]
            let y_i = y_mat.into_shape_with_order((self.out_ch, oh, ow)).unwrap();
            y.index_axis_mut(Axis(0), i).assign(&y_i);
        }
        if let Some(b) = &self.b {
            let bv = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for oc in 0..self.out_ch {
                y.index_axis_mut(Axis(1), oc).mapv_inplace(|v| v + bv[oc]);
            }
        }
        self.cache_x = Some(x.clone());
        y
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let x = self.cache_x.take().expect("conv backward without forward");
        let (n, c_in, h, w) = x.dim();
        let (kh, kw) = self.kernel;
        let (_, _, oh, ow) = grad_out.dim();
        let k = c_in * kh * kw;
        let w_mat = self.w.value.to_shape((self.out_ch, k)).unwrap().to_owned();
        let mut grad_w = Array2::<f64>::zeros((self.out_ch, k));
        let mut grad_x = Array4::<f64>::zeros((n, c_in, h, w));
        for i in 0..n {
            let col = im2col_sample(&x.index_axis(Axis(0), i), kh, kw, self.stride, self.pad, oh, ow);
            let g_i = grad_out
                .index_axis(Axis(0), i)
                .to_shape((self.out_ch, oh * ow))
                .unwrap()
                .to_owned();
            grad_w += &g_i.dot(&col.t());
            let grad_col = w_mat.t().dot(&g_i); // [K, OH*OW]
            col2im_sample(
                &grad_col,
                &mut grad_x.index_axis_mut(Axis(0), i),
                kh,
                kw,
                self.stride,
                self.pad,
                oh,
                ow,
            );
        }
        {
            let mut gview = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((self.out_ch, k))
                .unwrap();
            gview += &grad_w;
        }
        if let Some(b) = &mut self.b {
            let mut gb = b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            for oc in 0..self.out_ch {
                gb[oc] += grad_out.index_axis(Axis(1), oc).sum();
            }
        }
        grad_x
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        if let Some(b) = &mut self.b {
            out.push(b);
        }
    }

    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        v.visit(&format!("{prefix}.weight"), &mut self.w.value);
        if let Some(b) = &mut self.b {
            v.visit(&format!("{prefix}.bias"), &mut b.value);
        }
    }

    fn out_channels(&self, _c_in: usize) -> usize {
        self.out_ch
    }
}

enum BnMode {
    Train,
    Eval,
}

pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
    cache: Option<(Array4<f64>, Array1<f64>, BnMode)>, // (x_hat, invstd, mode)
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new("gamma", Array1::<f64>::ones(channels).into_dyn()),
            beta: Param::new("beta", Array1::<f64>::zeros(channels).into_dyn()),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            channels,
            cache: None,
        }
    }
}

impl Module for BatchNorm2d {
    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batchnorm channels");
        let m = (n * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = Array4::<f64>::zeros((n, c, h, w));
        let mut x_hat = Array4::<f64>::zeros((n, c, h, w));
        let mut invstd = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let xc = x.index_axis(Axis(1), ch);
            let (mean, var) = if train {
                let mean = xc.sum() / m;
                let var = xc.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / m;
                // Running stats track the unbiased variance.
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                self.running_mean[ch] =
                    (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                self.running_var[ch] =
                    (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            invstd[ch] = istd;
            let (g, b) = (gamma[ch], beta[ch]);
            Zip::from(x_hat.index_axis_mut(Axis(1), ch))
                .and(y.index_axis_mut(Axis(1), ch))
                .and(xc)
                .for_each(|xh, yv, &xv| {
                    let norm = (xv - mean) * istd;
                    *xh = norm;
                    *yv = g * norm + b;
                });
        }
        self.cache = Some((x_hat, invstd, if train { BnMode::Train } else { BnMode::Eval }));
        y
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let (x_hat, invstd, mode) = self.cache.take().expect("bn backward without forward");
        let (n, c, h, w) = grad_out.dim();
        let m = (n * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut grad_x = Array4::<f64>::zeros((n, c, h, w));
        let mut dgamma = self.gamma.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut dbeta = self.beta.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
        for ch in 0..c {
            let g = grad_out.index_axis(Axis(1), ch);
            let xh = x_hat.index_axis(Axis(1), ch);
            let sum_g = g.sum();
            let sum_gx = Zip::from(g).and(xh).fold(0.0, |acc, &gv, &xv| acc + gv * xv);
            dgamma[ch] += sum_gx;
            dbeta[ch] += sum_g;
            let scale = gamma[ch] * invstd[ch];
            match mode {
                BnMode::Train => {
                    Zip::from(grad_x.index_axis_mut(Axis(1), ch))
                        .and(g)
                        .and(xh)
                        .for_each(|dx, &gv, &xv| {
                            *dx = scale / m * (m * gv - sum_g - xv * sum_gx);
                        });
                }
                BnMode::Eval => {
                    Zip::from(grad_x.index_axis_mut(Axis(1), ch))
                        .and(g)
                        .for_each(|dx, &gv| *dx = scale * gv);
                }
            }
        }
        grad_x
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        v.visit(&format!("{prefix}.gamma"), &mut self.gamma.value);
        v.visit(&format!("{prefix}.beta"), &mut self.beta.value);
        let mut rm = self.running_mean.clone().into_dyn();
        v.visit(&format!("{prefix}.running_mean"), &mut rm);
        self.running_mean = rm.into_dimensionality().unwrap();
        let mut rv = self.running_var.clone().into_dyn();
        v.visit(&format!("{prefix}.running_var"), &mut rv);
        self.running_var = rv.into_dimensionality().unwrap();
    }

    fn out_channels(&self, c_in: usize) -> usize {
        c_in
    }
}

#[derive(Default)]
pub struct ReLU {
    mask: Option<Array4<f64>>,
}

impl ReLU {
    pub fn new() -> Self {
        ReLU::default()
    }
}

impl Module for ReLU {
    fn forward(&mut self, x: &Array4<f64>, _train: bool) -> Array4<f64> {
        let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let mask = self.mask.take().expect("relu backward without forward");
        grad_out * &mask
    }

    fn collect_params<'a>(&'a mut self, _out: &mut Vec<&'a mut Param>) {}

    fn visit_state(&mut self, _prefix: &str, _v: &mut dyn StateVisitor) {}

    fn out_channels(&self, c_in: usize) -> usize {
        c_in
    }
}

pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<u32>, (usize, usize, usize, usize), (usize, usize))>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }
}

impl Module for MaxPool2d {
    fn forward(&mut self, x: &Array4<f64>, _train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let oh = conv_out_len(h, self.kernel, self.stride, self.pad);
        let ow = conv_out_len(w, self.kernel, self.stride, self.pad);
        let mut y = Array4::<f64>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u32; n * c * oh * ow];
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x[[i, ch, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = (iy as usize * w + ix as usize) as u32;
                                }
                            }
                        }
                        y[[i, ch, oy, ox]] = best;
                        argmax[((i * c + ch) * oh + oy) * ow + ox] = best_idx;
                    }
                }
            }
        }
        self.cache = Some((argmax, (n, c, h, w), (oh, ow)));
        y
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let (argmax, (n, c, h, w), (oh, ow)) =
            self.cache.take().expect("maxpool backward without forward");
        let mut grad_x = Array4::<f64>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let flat = argmax[((i * c + ch) * oh + oy) * ow + ox] as usize;
                        grad_x[[i, ch, flat / w, flat % w]] += grad_out[[i, ch, oy, ox]];
                    }
                }
            }
        }
        grad_x
    }

    fn collect_params<'a>(&'a mut self, _out: &mut Vec<&'a mut Param>) {}

    fn visit_state(&mut self, _prefix: &str, _v: &mut dyn StateVisitor) {}

    fn out_channels(&self, c_in: usize) -> usize {
        c_in
    }
}

pub struct AvgPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<((usize, usize, usize, usize), (usize, usize))>,
}

impl AvgPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        AvgPool2d {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }
}

impl Module for AvgPool2d {
    fn forward(&mut self, x: &Array4<f64>, _train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let oh = conv_out_len(h, self.kernel, self.stride, self.pad);
        let ow = conv_out_len(w, self.kernel, self.stride, self.pad);
        let denom = (self.kernel * self.kernel) as f64;
        let mut y = Array4::<f64>::zeros((n, c, oh, ow));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[[i, ch, iy as usize, ix as usize]];
                            }
                        }
                        y[[i, ch, oy, ox]] = acc / denom;
                    }
                }
            }
        }
        self.cache = Some(((n, c, h, w), (oh, ow)));
        y
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let ((n, c, h, w), (oh, ow)) = self.cache.take().expect("avgpool backward without forward");
        let denom = (self.kernel * self.kernel) as f64;
        let mut grad_x = Array4::<f64>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad_out[[i, ch, oy, ox]] / denom;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                grad_x[[i, ch, iy as usize, ix as usize]] += g;
                            }
                        }
                    }
                }
            }
        }
        grad_x
    }

    fn collect_params<'a>(&'a mut self, _out: &mut Vec<&'a mut Param>) {}

    fn visit_state(&mut self, _prefix: &str, _v: &mut dyn StateVisitor) {}

    fn out_channels(&self, c_in: usize) -> usize {
        c_in
    }
}

/// Spatial mean over H and W: [N,C,H,W] -> [N,C].
#[derive(Default)]
pub struct GlobalAvgPool {
    cache: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool::default()
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        self.cache = Some((h, w));
        let mut y = Array2::<f64>::zeros((n, c));
        let denom = (h * w) as f64;
        for i in 0..n {
            for ch in 0..c {
                y[[i, ch]] = x.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum() / denom;
            }
        }
        y
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array4<f64> {
        let (h, w) = self.cache.take().expect("gap backward without forward");
        let (n, c) = grad_out.dim();
        let denom = (h * w) as f64;
        let mut grad_x = Array4::<f64>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                grad_x
                    .index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ch)
                    .fill(grad_out[[i, ch]] / denom);
            }
        }
        grad_x
    }
}

/// Fully connected layer on [N, in] batches.
pub struct Linear {
    pub w: Param,
    pub b: Param,
    in_dim: usize,
    out_dim: usize,
    cache_x: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, init: &mut Init) -> Self {
        Linear {
            w: Param::new("weight", init.linear_weight(out_dim, in_dim).into_dyn()),
            b: Param::new("bias", Array1::<f64>::zeros(out_dim).into_dyn()),
            in_dim,
            out_dim,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_dim, "linear input dim");
        let w = self.w.value.to_shape((self.out_dim, self.in_dim)).unwrap();
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array2<f64> {
        let x = self.cache_x.take().expect("linear backward without forward");
        let w = self.w.value.to_shape((self.out_dim, self.in_dim)).unwrap().to_owned();
        {
            let mut gw = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((self.out_dim, self.in_dim))
                .unwrap();
            gw += &grad_out.t().dot(&x);
        }
        {
            let mut gb = self.b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            gb += &grad_out.sum_axis(Axis(0));
        }
        grad_out.dot(&w)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }

    pub fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        v.visit(&format!("{prefix}.weight"), &mut self.w.value);
        v.visit(&format!("{prefix}.bias"), &mut self.b.value);
    }
}

/// Ordered pipeline of modules.
pub struct Sequential {
    layers: Vec<Box<dyn Module>>,
}

impl Sequential {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Module + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Default for Sequential {
    fn default() -> Self {
        Self::new()
    }
}

impl Module for Sequential {
    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, train);
        }
        cur
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let mut cur = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for layer in &mut self.layers {
            layer.collect_params(out);
        }
    }

    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_state(&format!("{prefix}.{i}"), v);
        }
    }

    fn out_channels(&self, c_in: usize) -> usize {
        self.layers.iter().fold(c_in, |c, l| l.out_channels(c))
    }
}

/// Runs every branch on the same input and concatenates their outputs along
/// the channel axis; the backward pass splits the gradient per branch and
/// sums the input gradients.
pub struct ParallelConcat {
    pub branches: Vec<Sequential>,
    out_sizes: Vec<usize>,
}

impl ParallelConcat {
    pub fn new(branches: Vec<Sequential>) -> Self {
        ParallelConcat {
            branches,
            out_sizes: Vec::new(),
        }
    }
}

impl Module for ParallelConcat {
    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let outputs: Vec<Array4<f64>> = self
            .branches
            .iter_mut()
            .map(|b| b.forward(x, train))
            .collect();
        self.out_sizes = outputs.iter().map(|o| o.dim().1).collect();
        let views: Vec<&Array4<f64>> = outputs.iter().collect();
        concat_channels(&views)
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let parts = split_channels(grad_out, &self.out_sizes);
        let mut grad_x: Option<Array4<f64>> = None;
        for (branch, part) in self.branches.iter_mut().zip(parts.iter()) {
            let g = branch.backward(part);
            grad_x = Some(match grad_x {
                None => g,
                Some(acc) => acc + g,
            });
        }
        grad_x.expect("at least one branch")
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for b in &mut self.branches {
            b.collect_params(out);
        }
    }

    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_state(&format!("{prefix}.branch{i}"), v);
        }
    }

    fn out_channels(&self, c_in: usize) -> usize {
        self.branches.iter().map(|b| b.out_channels(c_in)).sum()
    }
}

/// Concatenate along the channel axis.
pub fn concat_channels(parts: &[&Array4<f64>]) -> Array4<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("channel concat")
}

/// Split a channel-axis gradient back into chunks of the given channel sizes.
pub fn split_channels(grad: &Array4<f64>, sizes: &[usize]) -> Vec<Array4<f64>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        out.push(
            grad.slice(ndarray::s![.., start..start + s, .., ..])
                .to_owned(),
        );
        start += s;
    }
    assert_eq!(start, grad.dim().1, "channel split sizes");
    out
}
