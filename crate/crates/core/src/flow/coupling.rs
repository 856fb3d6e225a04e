use ndarray::{concatenate, s, Array1, Array4, ArrayD, ArrayView4, Axis, Ix4, Zip};
use nullsample_nn::init::Init;
use nullsample_nn::layers::{sigmoid, Activation, Conv2d, Layer, LayerCache, Sequential};
use nullsample_nn::{join, Param, Parameters};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Keeps the sigmoid strictly inside (0, 1) so scales never touch the
/// boundary of (0.5, 1.5).
const SIGMOID_MARGIN: f64 = 1e-6;

/// Multiplicative coupling scale: `sigmoid(logit) + 0.5`, in (0.5, 1.5).
pub fn coupling_scale(logit: f64) -> f64 {
    sigmoid(logit).clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN) + 0.5
}

fn coupling_scale_grad(logit: f64) -> f64 {
    let p = sigmoid(logit);
    if p <= SIGMOID_MARGIN || p >= 1.0 - SIGMOID_MARGIN {
        0.0
    } else {
        p * (1.0 - p)
    }
}

/// How a coupling splits its input into the conditioning and transformed
/// parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingMask {
    /// First/second half of the channels, swapped on odd parity.
    ChannelHalves,
    /// Spatial checkerboard over all channels.
    Checkerboard,
}

/// Affine coupling `y_b = x_b * s(x_a) + t(x_a)`, `y_a = x_a`.
#[derive(Debug, Clone)]
pub struct AffineCoupling {
    mask: CouplingMask,
    parity: bool,
    channels: usize,
    net: Sequential,
}

#[derive(Debug, Clone)]
pub struct CouplingCache {
    net: Vec<LayerCache>,
    logits: Array4<f64>,
    scale: Array4<f64>,
    /// Transformed part: the input on the forward pass, the output on the
    /// inverse pass.
    b: Array4<f64>,
}

impl AffineCoupling {
    /// Subnet of three convolutions (`kernel`, 1x1, `kernel`) whose last layer
    /// starts at zero, so the fresh coupling is the identity.
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        hidden: usize,
        kernel: usize,
        mask: CouplingMask,
        parity: bool,
        rng: &mut R,
    ) -> Self {
        let (cond, out) = match mask {
            CouplingMask::ChannelHalves => {
                let (a, b) = halves(channels, parity);
                (a, 2 * b)
            }
            CouplingMask::Checkerboard => (channels, 2 * channels),
        };
        let net = Sequential::new(vec![
            Layer::Conv2d(Conv2d::same(cond, hidden, kernel, Init::Xavier, rng)),
            Layer::Act(Activation::Relu),
            Layer::Conv2d(Conv2d::same(hidden, hidden, 1, Init::Xavier, rng)),
            Layer::Act(Activation::Relu),
            Layer::Conv2d(Conv2d::same(hidden, out, kernel, Init::Zeros, rng)),
        ]);
        Self { mask, parity, channels, net }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Splits `x` into (conditioning input, transformed part).
    fn split(&self, x: ArrayView4<f64>) -> (Array4<f64>, Array4<f64>) {
        match self.mask {
            CouplingMask::ChannelHalves => {
                let (ca, _) = halves(self.channels, self.parity);
                let c = self.channels;
                if self.parity {
                    (x.slice(s![.., c - ca.., .., ..]).to_owned(), x.slice(s![.., ..c - ca, .., ..]).to_owned())
                } else {
                    (x.slice(s![.., ..ca, .., ..]).to_owned(), x.slice(s![.., ca.., .., ..]).to_owned())
                }
            }
            CouplingMask::Checkerboard => {
                let mut a = x.to_owned();
                let parity = self.parity;
                for ((_, _, h, w), v) in a.indexed_iter_mut() {
                    if !checker(h, w, parity) {
                        *v = 0.0;
                    }
                }
                (a, x.to_owned())
            }
        }
    }

    fn merge(&self, a: Array4<f64>, b: Array4<f64>) -> Array4<f64> {
        match self.mask {
            CouplingMask::ChannelHalves if self.parity => concatenate(Axis(1), &[b.view(), a.view()]).unwrap(),
            CouplingMask::ChannelHalves => concatenate(Axis(1), &[a.view(), b.view()]).unwrap(),
            // The transformed part already carries the untouched positions.
            CouplingMask::Checkerboard => b,
        }
    }

    /// Effective scale and shift over the transformed part; identity where
    /// the checkerboard keeps the input.
    fn scale_shift(&self, h: &Array4<f64>) -> (Array4<f64>, Array4<f64>, Array4<f64>) {
        let cb = h.dim().1 / 2;
        let logits = h.slice(s![.., ..cb, .., ..]).to_owned();
        let mut scale = logits.mapv(coupling_scale);
        let mut shift = h.slice(s![.., cb.., .., ..]).to_owned();
        if self.mask == CouplingMask::Checkerboard {
            let parity = self.parity;
            Zip::indexed(&mut scale).and(&mut shift).for_each(|(_, _, hh, ww), s, t| {
                if checker(hh, ww, parity) {
                    *s = 1.0;
                    *t = 0.0;
                }
            });
        }
        (logits, scale, shift)
    }

    fn conditioner(&self, a: &Array4<f64>) -> Array4<f64> {
        as4(self.net.forward(&a.clone().into_dyn()))
    }

    pub fn forward(&self, x: ArrayView4<f64>) -> (Array4<f64>, Array1<f64>) {
        let (a, b) = self.split(x);
        let (_, scale, shift) = self.scale_shift(&self.conditioner(&a));
        let logdet = per_sample_log_sum(&scale);
        (self.merge(a, b * &scale + &shift), logdet)
    }

    pub fn inverse(&self, y: ArrayView4<f64>) -> Array4<f64> {
        let (a, b) = self.split(y);
        let (_, scale, shift) = self.scale_shift(&self.conditioner(&a));
        self.merge(a, (b - &shift) / &scale)
    }

    pub fn forward_train(&mut self, x: ArrayView4<f64>) -> (Array4<f64>, Array1<f64>, CouplingCache) {
        let (a, b) = self.split(x);
        let (h, net) = self.net.forward_train(a.clone().into_dyn());
        let (logits, scale, shift) = self.scale_shift(&as4(h));
        let logdet = per_sample_log_sum(&scale);
        let y = self.merge(a, &b * &scale + &shift);
        (y, logdet, CouplingCache { net, logits, scale, b })
    }

    pub fn inverse_train(&mut self, y: ArrayView4<f64>) -> (Array4<f64>, CouplingCache) {
        let (a, b) = self.split(y);
        let (h, net) = self.net.forward_train(a.clone().into_dyn());
        let (logits, scale, shift) = self.scale_shift(&as4(h));
        let xb = (b - &shift) / &scale;
        (self.merge(a, xb.clone()), CouplingCache { net, logits, scale, b: xb })
    }

    /// Backpropagates `dy` and a per-sample log-det cotangent through the
    /// forward map. Returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: CouplingCache, dy: ArrayView4<f64>, dlogdet: &Array1<f64>) -> Array4<f64> {
        let (dy_a, dy_b) = self.split_grad(dy);
        let mut dscale = &dy_b * &cache.b;
        for (mut plane, (s_plane, &g)) in dscale
            .axis_iter_mut(Axis(0))
            .zip(cache.scale.axis_iter(Axis(0)).zip(dlogdet.iter()))
        {
            Zip::from(&mut plane).and(&s_plane).for_each(|d, &s| *d += g / s);
        }
        let dshift = dy_b.clone();
        let dx_b = &dy_b * &cache.scale;
        let da = self.net_backward(cache.net, &cache.logits, dscale, dshift);
        self.merge_grad(dy_a, dx_b, da)
    }

    /// Backpropagates `dx` through the inverse map. Returns the gradient
    /// w.r.t. the inverse's input.
    pub fn backward_inverse(&mut self, cache: CouplingCache, dx: ArrayView4<f64>) -> Array4<f64> {
        let (dx_a, dx_b) = self.split_grad(dx);
        let dy_b = &dx_b / &cache.scale;
        let dshift = -&dy_b;
        let dscale = -(&dy_b * &cache.b);
        let da = self.net_backward(cache.net, &cache.logits, dscale, dshift);
        self.merge_grad(dx_a, dy_b, da)
    }

    fn net_backward(
        &mut self,
        caches: Vec<LayerCache>,
        logits: &Array4<f64>,
        mut dscale: Array4<f64>,
        mut dshift: Array4<f64>,
    ) -> Array4<f64> {
        if self.mask == CouplingMask::Checkerboard {
            let parity = self.parity;
            Zip::indexed(&mut dscale).and(&mut dshift).for_each(|(_, _, h, w), s, t| {
                if checker(h, w, parity) {
                    *s = 0.0;
                    *t = 0.0;
                }
            });
        }
        Zip::from(&mut dscale).and(logits).for_each(|d, &l| *d *= coupling_scale_grad(l));
        let dh = concatenate(Axis(1), &[dscale.view(), dshift.view()]).unwrap();
        as4(self.net.backward(caches, dh.into_dyn()))
    }

    /// Splits an output cotangent the same way `split` splits values; for the
    /// checkerboard the whole cotangent flows through the transformed part.
    fn split_grad(&self, d: ArrayView4<f64>) -> (Option<Array4<f64>>, Array4<f64>) {
        match self.mask {
            CouplingMask::ChannelHalves => {
                let (a, b) = self.split(d);
                (Some(a), b)
            }
            CouplingMask::Checkerboard => (None, d.to_owned()),
        }
    }

    fn merge_grad(&self, direct_a: Option<Array4<f64>>, d_b: Array4<f64>, mut da: Array4<f64>) -> Array4<f64> {
        match direct_a {
            Some(direct) => self.merge(da + direct, d_b),
            None => {
                let parity = self.parity;
                Zip::indexed(&mut da).for_each(|(_, _, h, w), v| {
                    if !checker(h, w, parity) {
                        *v = 0.0;
                    }
                });
                d_b + da
            }
        }
    }
}

impl Parameters for AffineCoupling {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.net.visit(&join(prefix, "net"), f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_mut(&join(prefix, "net"), f)
    }
}

/// (conditioning, transformed) channel counts.
fn halves(channels: usize, parity: bool) -> (usize, usize) {
    let first = channels / 2;
    if parity {
        (channels - first, first)
    } else {
        (first, channels - first)
    }
}

/// True where the checkerboard passes the input through unchanged.
fn checker(h: usize, w: usize, parity: bool) -> bool {
    (h + w).is_multiple_of(2) != parity
}

fn per_sample_log_sum(scale: &Array4<f64>) -> Array1<f64> {
    scale.axis_iter(Axis(0)).map(|p| p.iter().map(|s| s.ln()).sum()).collect()
}

fn as4(x: ArrayD<f64>) -> Array4<f64> {
    x.into_dimensionality::<Ix4>().expect("rank-4 subnet output")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randomise(c: &mut AffineCoupling, rng: &mut ChaCha8Rng) {
        c.visit_mut("", &mut |_, p| {
            p.value.mapv_inplace(|_| { let v: f64 = StandardNormal.sample(&mut *rng); 0.3 * v });
        });
    }

    fn input(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || -> f64 { StandardNormal.sample(&mut *rng) })
    }

    #[test]
    fn fresh_coupling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = AffineCoupling::new(4, 8, 3, CouplingMask::ChannelHalves, false, &mut rng);
        let x = input(&mut rng, (2, 4, 4, 4));
        let (y, logdet) = c.forward(x.view());
        assert_eq!(y, x);
        assert!(logdet.iter().all(|l| l.abs() < 1e-12));
    }

    #[test]
    fn inverse_undoes_forward_for_both_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mask in [CouplingMask::ChannelHalves, CouplingMask::Checkerboard] {
            for parity in [false, true] {
                let mut c = AffineCoupling::new(3, 6, 3, mask, parity, &mut rng);
                randomise(&mut c, &mut rng);
                let x = input(&mut rng, (2, 3, 4, 4));
                let (y, _) = c.forward(x.view());
                let back = c.inverse(y.view());
                let err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(err < 1e-12, "{mask:?} {parity}: {err}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mask in [CouplingMask::ChannelHalves, CouplingMask::Checkerboard] {
            let mut c = AffineCoupling::new(3, 5, 3, mask, true, &mut rng);
            randomise(&mut c, &mut rng);
            let x = input(&mut rng, (2, 3, 2, 2));
            let wy = input(&mut rng, (2, 3, 2, 2));
            let wl = Array1::from(vec![0.7, -1.3]);
            let objective = |c: &AffineCoupling, x: &Array4<f64>| {
                let (y, l) = c.forward(x.view());
                (&y * &wy).sum() + (&l * &wl).sum()
            };
            let (_, _, cache) = c.forward_train(x.view());
            let dx = c.backward(cache, wy.view(), &wl);
            let h = 1e-6;
            for idx in [(0, 0, 0, 0), (1, 2, 1, 0), (0, 1, 1, 1)] {
                let mut up = x.clone();
                up[idx] += h;
                let mut dn = x.clone();
                dn[idx] -= h;
                let fd = (objective(&c, &up) - objective(&c, &dn)) / (2.0 * h);
                assert!((fd - dx[idx]).abs() < 1e-6, "{mask:?} {idx:?}: {fd} vs {}", dx[idx]);
            }
        }
    }

    #[test]
    fn inverse_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mask in [CouplingMask::ChannelHalves, CouplingMask::Checkerboard] {
            let mut c = AffineCoupling::new(4, 5, 1, mask, false, &mut rng);
            randomise(&mut c, &mut rng);
            let y = input(&mut rng, (2, 4, 2, 2));
            let w = input(&mut rng, (2, 4, 2, 2));
            let (_, cache) = c.inverse_train(y.view());
            let dy = c.backward_inverse(cache, w.view());
            let h = 1e-6;
            for idx in [(0, 0, 0, 0), (1, 3, 1, 0), (0, 2, 0, 1)] {
                let mut up = y.clone();
                up[idx] += h;
                let mut dn = y.clone();
                dn[idx] -= h;
                let fd = ((&c.inverse(up.view()) * &w).sum() - (&c.inverse(dn.view()) * &w).sum()) / (2.0 * h);
                assert!((fd - dy[idx]).abs() < 1e-6, "{mask:?} {idx:?}");
            }
        }
    }

    #[test]
    fn scale_stays_inside_open_interval() {
        for logit in [-1e6, -50.0, -1.0, 0.0, 3.0, 50.0, 1e6] {
            let s = coupling_scale(logit);
            assert!(s > 0.5 && s < 1.5, "{logit} -> {s}");
        }
    }
}
