use ndarray::{Array2, Array4, ArrayView4, Axis, Ix1};
use rand::Rng;

use crate::init::Init;
use crate::ops::{col2im, conv_out, from_rows, im2col, to_rows};
use crate::{join, Param, Parameters};

/// 2-D convolution over `[N, C, H, W]` with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

/// Patch matrix kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    input_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    /// Same-padded convolution (`padding = kernel / 2`).
    pub fn same<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        kernel: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self::new(input, output, kernel, 1, kernel / 2, init, rng)
    }

    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let kk = kernel * kernel;
        let weight = init.draw(&[output, input, kernel, kernel], input * kk, output * kk, rng);
        let bias = match init {
            Init::FanInUniform => init.draw(&[output], input * kk, output * kk, rng),
            _ => crate::init::zeros(&[output]),
        };
        Self { weight: Param::new(weight), bias: Param::new(bias), stride, padding }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let out = self.out_channels();
        self.weight
            .value
            .view()
            .into_shape_with_order((out, self.weight.len() / out))
            .expect("contiguous weight")
            .to_owned()
    }

    fn bias_view(&self) -> ndarray::ArrayView1<'_, f64> {
        self.bias.value.view().into_dimensionality::<Ix1>().expect("rank-1 bias")
    }

    pub fn forward(&self, x: ArrayView4<f64>) -> Array4<f64> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: ArrayView4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, _, h, w) = x.dim();
        let k = self.kernel();
        let ho = conv_out(h, k, self.stride, self.padding);
        let wo = conv_out(w, k, self.stride, self.padding);
        let cols = if k == 1 && self.stride == 1 && self.padding == 0 {
            to_rows(x)
        } else {
            im2col(x, k, self.stride, self.padding)
        };
        let rows = cols.dot(&self.weight_matrix().t()) + self.bias_view();
        let y = from_rows(rows, n, ho, wo);
        (y, ConvCache { cols, input_shape: x.dim() })
    }

    pub fn backward(&mut self, cache: ConvCache, dy: ArrayView4<f64>) -> Array4<f64> {
        let k = self.kernel();
        let dyr = to_rows(dy);
        let dw = dyr.t().dot(&cache.cols);
        let out = self.out_channels();
        {
            let mut g = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((out, dw.ncols()))
                .expect("contiguous grad");
            g += &dw;
        }
        {
            let mut bg = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("rank 1");
            bg += &dyr.sum_axis(Axis(0));
        }
        let dcols = dyr.dot(&self.weight_matrix());
        let (n, _, h, w) = cache.input_shape;
        if k == 1 && self.stride == 1 && self.padding == 0 {
            from_rows(dcols, n, h, w)
        } else {
            col2im(dcols.view(), cache.input_shape, k, self.stride, self.padding)
        }
    }
}

impl Parameters for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-channel batch normalisation for `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array4<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ndarray::ArrayD::ones(ndarray::IxDyn(&[channels]))),
            beta: Param::new(crate::init::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: ArrayView4<f64>) -> Array4<f64> {
        let mut y = x.to_owned();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let m = self.running_mean[c];
            plane.mapv_inplace(|v| (v - m) * inv * g + b);
        }
        y
    }

    /// Normalises with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: ArrayView4<f64>) -> (Array4<f64>, BatchNormCache) {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Vec::with_capacity(c);
        for (ch, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let mean = plane.sum() / count;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let inv = 1.0 / (var + self.eps).sqrt();
            plane.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
        }
        let mut y = xhat.clone();
        for (ch, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            plane.mapv_inplace(|v| v * g + b);
        }
        (y, BatchNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: BatchNormCache, dy: ArrayView4<f64>) -> Array4<f64> {
        let (n, _, h, w) = dy.dim();
        let count = (n * h * w) as f64;
        let mut dx = Array4::<f64>::zeros(dy.raw_dim());
        for (ch, (mut dxp, (dyp, xh))) in dx
            .axis_iter_mut(Axis(1))
            .zip(dy.axis_iter(Axis(1)).zip(cache.xhat.axis_iter(Axis(1))))
            .enumerate()
        {
            let dgamma: f64 = dyp.iter().zip(xh.iter()).map(|(g, x)| g * x).sum();
            let dbeta: f64 = dyp.sum();
            self.gamma.grad[ch] += dgamma;
            self.beta.grad[ch] += dbeta;
            let g = self.gamma.value[ch];
            let scale = g * cache.inv_std[ch] / count;
            ndarray::Zip::from(&mut dxp)
                .and(&dyp)
                .and(&xh)
                .for_each(|d, &gy, &x| *d = scale * (count * gy - dbeta - x * dgamma));
        }
        dx
    }
}

impl Parameters for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
