use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView4, Ix1, Ix2, IxDyn};
use nullsample_nn::ops::{from_rows, to_rows};
use nullsample_nn::{join, Param, Parameters};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Learned channel mixing `y = W x` at every pixel, with `W = P L U` kept in
/// LU form so the log-determinant is `H * W * sum(log|diag U|)`.
#[derive(Debug, Clone)]
pub struct Invertible1x1Conv {
    /// Fixed permutation matrix.
    permutation: Array2<f64>,
    /// Fixed signs of the diagonal of `U`.
    sign: Array1<f64>,
    /// Strictly lower part is used; the diagonal of `L` is one.
    lower: Param,
    /// Strictly upper part is used.
    upper: Param,
    log_scale: Param,
}

#[derive(Debug, Clone)]
pub struct MixingCache {
    rows: Array2<f64>,
    spatial: usize,
}

impl Invertible1x1Conv {
    /// Initialised from the LU decomposition of a random rotation.
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let gaussian = DMatrix::<f64>::from_fn(channels, channels, |_, _| StandardNormal.sample(rng));
        let rotation = gaussian.qr().q();
        let lu = rotation.lu();
        // nalgebra factors P A = L U, hence A = P^T L U.
        let mut p = DMatrix::<f64>::identity(channels, channels);
        lu.p().permute_rows(&mut p);
        let p = p.transpose();
        let l = lu.l();
        let u = lu.u();
        let to_nd = |m: &DMatrix<f64>| Array2::from_shape_fn((channels, channels), |(i, j)| m[(i, j)]);
        let diag: Vec<f64> = (0..channels).map(|i| u[(i, i)]).collect();
        Self {
            permutation: to_nd(&p),
            sign: diag.iter().map(|d| d.signum()).collect(),
            lower: Param::new(strict_lower(&to_nd(&l)).into_dyn()),
            upper: Param::new(strict_upper(&to_nd(&u)).into_dyn()),
            log_scale: Param::new(ArrayD::from_shape_vec(IxDyn(&[channels]), diag.iter().map(|d| d.abs().ln()).collect()).unwrap()),
        }
    }

    pub fn channels(&self) -> usize {
        self.sign.len()
    }

    fn lower_full(&self) -> Array2<f64> {
        strict_lower(&as2(&self.lower.value)) + Array2::<f64>::eye(self.channels())
    }

    fn upper_full(&self) -> Array2<f64> {
        let mut u = strict_upper(&as2(&self.upper.value));
        let ls = self.log_scale.value.view().into_dimensionality::<Ix1>().unwrap();
        for i in 0..self.channels() {
            u[[i, i]] = self.sign[i] * ls[i].exp();
        }
        u
    }

    pub fn weight(&self) -> Array2<f64> {
        self.permutation.dot(&self.lower_full()).dot(&self.upper_full())
    }

    pub fn inverse_weight(&self) -> Array2<f64> {
        let w = self.weight();
        let c = self.channels();
        let m = DMatrix::from_fn(c, c, |i, j| w[[i, j]]);
        let inv = m.try_inverse().expect("diagonal of U is nonzero by construction");
        Array2::from_shape_fn((c, c), |(i, j)| inv[(i, j)])
    }

    /// Log-determinant for one `[C, H, W]` example.
    pub fn log_det(&self, spatial: usize) -> f64 {
        spatial as f64 * self.log_scale.value.sum()
    }

    pub fn forward(&self, x: ArrayView4<f64>) -> (Array4<f64>, f64) {
        let (n, _, h, w) = x.dim();
        let rows = to_rows(x).dot(&self.weight().t());
        (from_rows(rows, n, h, w), self.log_det(h * w))
    }

    pub fn inverse(&self, y: ArrayView4<f64>) -> Array4<f64> {
        let (n, _, h, w) = y.dim();
        from_rows(to_rows(y).dot(&self.inverse_weight().t()), n, h, w)
    }

    pub fn forward_train(&self, x: ArrayView4<f64>) -> (Array4<f64>, f64, MixingCache) {
        let (_, _, h, w) = x.dim();
        let (y, logdet) = self.forward(x);
        (y, logdet, MixingCache { rows: to_rows(x), spatial: h * w })
    }

    pub fn inverse_train(&self, y: ArrayView4<f64>) -> (Array4<f64>, MixingCache) {
        let (_, _, h, w) = y.dim();
        (self.inverse(y), MixingCache { rows: to_rows(y), spatial: h * w })
    }

    pub fn backward(&mut self, cache: MixingCache, dy: ArrayView4<f64>, dlogdet_total: f64) -> Array4<f64> {
        let (n, _, h, w) = dy.dim();
        let dyr = to_rows(dy);
        let dw = dyr.t().dot(&cache.rows);
        let dx = dyr.dot(&self.weight());
        self.accumulate_weight_grad(&dw, cache.spatial as f64 * dlogdet_total);
        from_rows(dx, n, h, w)
    }

    pub fn backward_inverse(&mut self, cache: MixingCache, dx: ArrayView4<f64>) -> Array4<f64> {
        let (n, _, h, w) = dx.dim();
        let dxr = to_rows(dx);
        let a = self.inverse_weight();
        let da = dxr.t().dot(&cache.rows);
        // d(W^-1) = -W^-1 dW W^-1
        let dw = -a.t().dot(&da).dot(&a.t());
        let dy = dxr.dot(&a);
        self.accumulate_weight_grad(&dw, 0.0);
        from_rows(dy, n, h, w)
    }

    /// Chains `dL/dW` into the LU parameters; `dlog_scale_extra` is added
    /// to every log-scale entry (log-det contribution).
    fn accumulate_weight_grad(&mut self, dw: &Array2<f64>, dlog_scale_extra: f64) {
        let l = self.lower_full();
        let u = self.upper_full();
        let dl = self.permutation.t().dot(dw).dot(&u.t());
        let du = self.permutation.dot(&l).t().dot(dw);
        {
            let mut g = self.lower.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            g += &strict_lower(&dl);
        }
        {
            let mut g = self.upper.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            g += &strict_upper(&du);
        }
        let ls = self.log_scale.value.clone();
        let mut g = self.log_scale.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        for i in 0..self.sign.len() {
            g[i] += du[[i, i]] * self.sign[i] * ls[i].exp() + dlog_scale_extra;
        }
    }

    pub(crate) fn buffers(&self) -> Vec<(&'static str, ArrayD<f64>)> {
        vec![("permutation", self.permutation.clone().into_dyn()), ("sign", self.sign.clone().into_dyn())]
    }

    pub(crate) fn set_buffer(&mut self, name: &str, value: ArrayD<f64>) -> bool {
        match name {
            "permutation" => value.into_dimensionality::<Ix2>().map(|v| self.permutation = v).is_ok(),
            "sign" => value.into_dimensionality::<Ix1>().map(|v| self.sign = v).is_ok(),
            _ => false,
        }
    }
}

impl Parameters for Invertible1x1Conv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "lower"), &self.lower);
        f(&join(prefix, "upper"), &self.upper);
        f(&join(prefix, "log_scale"), &self.log_scale);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "lower"), &mut self.lower);
        f(&join(prefix, "upper"), &mut self.upper);
        f(&join(prefix, "log_scale"), &mut self.log_scale);
    }
}

fn as2(x: &ArrayD<f64>) -> Array2<f64> {
    x.view().into_dimensionality::<Ix2>().expect("square matrix").to_owned()
}

fn strict_lower(m: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(m.raw_dim(), |(i, j)| if i > j { m[[i, j]] } else { 0.0 })
}

fn strict_upper(m: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(m.raw_dim(), |(i, j)| if i < j { m[[i, j]] } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(m: &Array2<f64>) -> f64 {
        let c = m.nrows();
        DMatrix::from_fn(c, c, |i, j| m[[i, j]]).determinant()
    }

    #[test]
    fn weight_is_orthogonal_at_init_and_log_det_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Invertible1x1Conv::new(6, &mut rng);
        let w = conv.weight();
        let wwt = w.dot(&w.t());
        for ((i, j), v) in wwt.indexed_iter() {
            let expected = if i == j { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-10);
        }
        assert!((conv.log_det(1) - det(&w).abs().ln()).abs() < 1e-10);
    }

    #[test]
    fn log_det_tracks_determinant_after_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Invertible1x1Conv::new(5, &mut rng);
        conv.visit_mut("", &mut |_, p| p.value.mapv_inplace(|v| v + 0.1 * v.sin()));
        let w = conv.weight();
        assert!((conv.log_det(7) - 7.0 * det(&w).abs().ln()).abs() < 1e-9);
        let x = Array4::from_shape_fn((2, 5, 2, 3), |(a, b, c, d)| (a + 2 * b + 3 * c + 5 * d) as f64 * 0.1 - 1.0);
        let (y, _) = conv.forward(x.view());
        let back = conv.inverse(y.view());
        assert!((&back - &x).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut conv = Invertible1x1Conv::new(3, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(a, b, c, d)| ((a * 7 + b * 5 + c * 3 + d) as f64).sin());
        let wy = Array4::from_shape_fn((2, 3, 2, 2), |(a, b, c, d)| ((a + b * 2 + c * 3 + d * 4) as f64).cos());
        let wl = 0.37;
        let objective = |c: &Invertible1x1Conv| {
            let (y, ld) = c.forward(x.view());
            (&y * &wy).sum() + wl * 2.0 * ld
        };
        let (_, _, cache) = conv.forward_train(x.view());
        conv.backward(cache, wy.view(), wl * 2.0);
        let mut grads = Vec::new();
        conv.visit("", &mut |name, p| grads.push((name.to_string(), p.grad.clone())));
        let h = 1e-6;
        for (name, grad) in grads {
            for idx in 0..grad.len() {
                let bump = |c: &mut Invertible1x1Conv, delta: f64| {
                    c.visit_mut("", &mut |n, p| {
                        if n == name {
                            p.value.as_slice_mut().unwrap()[idx] += delta;
                        }
                    })
                };
                let mut up = conv.clone();
                bump(&mut up, h);
                let mut dn = conv.clone();
                bump(&mut dn, -h);
                let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                let analytic = grad.as_slice().unwrap()[idx];
                // Only the strict triangles of lower/upper are live.
                assert!((fd - analytic).abs() < 1e-6, "{name}[{idx}]: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn inverse_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut conv = Invertible1x1Conv::new(3, &mut rng);
        let y = Array4::from_shape_fn((1, 3, 2, 1), |(_, b, c, _)| (b as f64) - 0.5 * c as f64);
        let wx = Array4::from_shape_fn((1, 3, 2, 1), |(_, b, c, _)| 1.0 + (b * c) as f64);
        let (_, cache) = conv.inverse_train(y.view());
        let dy = conv.backward_inverse(cache, wx.view());
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 2, 1, 0)] {
            let mut up = y.clone();
            up[idx] += h;
            let mut dn = y.clone();
            dn[idx] -= h;
            let fd = ((&conv.inverse(up.view()) * &wx).sum() - (&conv.inverse(dn.view()) * &wx).sum()) / (2.0 * h);
            assert!((fd - dy[idx]).abs() < 1e-6);
        }
        let mut grads = Vec::new();
        conv.visit("", &mut |name, p| grads.push((name.to_string(), p.grad.clone())));
        for (name, grad) in grads {
            for idx in 0..grad.len() {
                let bump = |c: &mut Invertible1x1Conv, delta: f64| {
                    c.visit_mut("", &mut |n, p| {
                        if n == name {
                            p.value.as_slice_mut().unwrap()[idx] += delta;
                        }
                    })
                };
                let mut up = conv.clone();
                bump(&mut up, h);
                let mut dn = conv.clone();
                bump(&mut dn, -h);
                let fd = ((&up.inverse(y.view()) * &wx).sum() - (&dn.inverse(y.view()) * &wx).sum()) / (2.0 * h);
                assert!((fd - grad.as_slice().unwrap()[idx]).abs() < 1e-6, "{name}[{idx}]");
            }
        }
    }
}
