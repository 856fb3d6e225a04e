//! Layers and the [`Sequential`] container.

mod activation;
mod conv;
mod dense;

pub use activation::{sigmoid, Activation};
pub use conv::{BatchNorm2d, BatchNormCache, Conv2d, ConvCache};
pub use dense::{Dense, ResidualCache, ResidualDense};

use ndarray::{ArrayD, Ix2, Ix4};

use crate::ops;
use crate::{join, Param, Parameters};

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Act(Activation),
    Residual(ResidualDense),
    MaxPool2,
    GlobalAvgPool,
    Upsample2,
    /// `[N, C, H, W]` to `[N, C*H*W]`.
    Flatten,
    /// `[N, C*H*W]` back to `[N, C, H, W]`.
    Unflatten([usize; 3]),
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Input(ArrayD<f64>),
    Conv(ConvCache),
    BatchNorm(BatchNormCache),
    Act { x: ArrayD<f64>, y: ArrayD<f64> },
    Residual(ResidualCache),
    MaxPool { arg: Vec<usize>, shape: (usize, usize, usize, usize) },
    Shape(Vec<usize>),
}

fn rank2(x: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    x.view().into_dimensionality::<Ix2>().expect("layer expects [N, D] input")
}

fn rank4(x: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    x.view().into_dimensionality::<Ix4>().expect("layer expects [N, C, H, W] input")
}

impl Layer {
    pub fn forward(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        match self {
            Layer::Dense(d) => d.forward(rank2(x)).into_dyn(),
            Layer::Conv2d(c) => c.forward(rank4(x)).into_dyn(),
            Layer::BatchNorm2d(bn) => bn.forward(rank4(x)).into_dyn(),
            Layer::Act(a) => a.apply(x),
            Layer::Residual(r) => r.forward(rank2(x)).into_dyn(),
            Layer::MaxPool2 => ops::max_pool2(rank4(x)).0.into_dyn(),
            Layer::GlobalAvgPool => ops::global_avg_pool(rank4(x)).into_dyn(),
            Layer::Upsample2 => ops::upsample2(rank4(x)).into_dyn(),
            Layer::Flatten => flatten(x),
            Layer::Unflatten(shape) => unflatten(x, shape),
        }
    }

    pub fn forward_train(&mut self, x: ArrayD<f64>) -> (ArrayD<f64>, LayerCache) {
        match self {
            Layer::Dense(d) => {
                let y = d.forward(rank2(&x)).into_dyn();
                (y, LayerCache::Input(x))
            }
            Layer::Conv2d(c) => {
                let (y, cache) = c.forward_train(rank4(&x));
                (y.into_dyn(), LayerCache::Conv(cache))
            }
            Layer::BatchNorm2d(bn) => {
                let (y, cache) = bn.forward_train(rank4(&x));
                (y.into_dyn(), LayerCache::BatchNorm(cache))
            }
            Layer::Act(a) => {
                let y = a.apply(&x);
                (y.clone(), LayerCache::Act { x, y })
            }
            Layer::Residual(r) => {
                let (y, cache) = r.forward_train(rank2(&x));
                (y.into_dyn(), LayerCache::Residual(cache))
            }
            Layer::MaxPool2 => {
                let v = rank4(&x);
                let (y, arg) = ops::max_pool2(v);
                (y.into_dyn(), LayerCache::MaxPool { arg, shape: v.dim() })
            }
            Layer::GlobalAvgPool | Layer::Upsample2 | Layer::Flatten | Layer::Unflatten(_) => {
                let y = self.forward(&x);
                (y, LayerCache::Shape(x.shape().to_vec()))
            }
        }
    }

    pub fn backward(&mut self, cache: LayerCache, dy: ArrayD<f64>) -> ArrayD<f64> {
        match (self, cache) {
            (Layer::Dense(d), LayerCache::Input(x)) => d.backward(rank2(&x), rank2(&dy)).into_dyn(),
            (Layer::Conv2d(c), LayerCache::Conv(cache)) => c.backward(cache, rank4(&dy)).into_dyn(),
            (Layer::BatchNorm2d(bn), LayerCache::BatchNorm(cache)) => {
                bn.backward(cache, rank4(&dy)).into_dyn()
            }
            (Layer::Act(a), LayerCache::Act { x, y }) => a.backward(&x, &y, &dy),
            (Layer::Residual(r), LayerCache::Residual(cache)) => {
                r.backward(cache, rank2(&dy)).into_dyn()
            }
            (Layer::MaxPool2, LayerCache::MaxPool { arg, shape }) => {
                ops::max_pool2_backward(rank4(&dy), &arg, shape).into_dyn()
            }
            (Layer::GlobalAvgPool, LayerCache::Shape(s)) => {
                ops::global_avg_pool_backward(rank2(&dy), s[2], s[3]).into_dyn()
            }
            (Layer::Upsample2, LayerCache::Shape(_)) => ops::upsample2_backward(rank4(&dy)).into_dyn(),
            (Layer::Flatten | Layer::Unflatten(_), LayerCache::Shape(s)) => {
                dy.into_shape_with_order(ndarray::IxDyn(&s)).expect("element count preserved")
            }
            (layer, cache) => panic!("cache {cache:?} does not belong to layer {layer:?}"),
        }
    }
}

fn flatten(x: &ArrayD<f64>) -> ArrayD<f64> {
    let n = x.shape()[0];
    let rest = x.len() / n.max(1);
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order(ndarray::IxDyn(&[n, rest]))
        .expect("contiguous")
}

fn unflatten(x: &ArrayD<f64>, shape: &[usize; 3]) -> ArrayD<f64> {
    let n = x.shape()[0];
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order(ndarray::IxDyn(&[n, shape[0], shape[1], shape[2]]))
        .expect("element count matches target shape")
}

impl Parameters for Layer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Layer::Dense(d) => d.visit(prefix, f),
            Layer::Conv2d(c) => c.visit(prefix, f),
            Layer::BatchNorm2d(bn) => bn.visit(prefix, f),
            Layer::Residual(r) => r.visit(prefix, f),
            _ => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Layer::Dense(d) => d.visit_mut(prefix, f),
            Layer::Conv2d(c) => c.visit_mut(prefix, f),
            Layer::BatchNorm2d(bn) => bn.visit_mut(prefix, f),
            Layer::Residual(r) => r.visit_mut(prefix, f),
            _ => {}
        }
    }
}

/// A chain of layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        h
    }

    pub fn forward_train(&mut self, x: ArrayD<f64>) -> (ArrayD<f64>, Vec<LayerCache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &mut self.layers {
            let (next, cache) = layer.forward_train(h);
            caches.push(cache);
            h = next;
        }
        (h, caches)
    }

    pub fn backward(&mut self, caches: Vec<LayerCache>, dy: ArrayD<f64>) -> ArrayD<f64> {
        let mut g = dy;
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            g = layer.backward(cache, g);
        }
        g
    }
}

impl Parameters for Sequential {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
