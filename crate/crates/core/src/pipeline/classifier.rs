use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2};
use nullsample_nn::init::Init;
use nullsample_nn::layers::{Activation, BatchNorm2d, Conv2d, Dense, Layer, Sequential};
use nullsample_nn::loss::{argmax_rows, softmax_cross_entropy, softmax_entropy};
use nullsample_nn::{zero_grad, NnError, RAdam};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Architecture of a downstream or baseline classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierArch {
    /// Levels of two (conv 3x3, batch norm, ReLU) blocks and a 2x2 max pool,
    /// doubling the filters each level; global average pooling and a linear
    /// head.
    Cnn { input: [usize; 3], filters: usize, levels: usize },
    Mlp { hidden: usize },
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// A classifier split into a feature trunk and a linear head, so that a
/// second head can read the same features.
#[derive(Debug, Clone)]
pub struct Classifier {
    trunk: Sequential,
    head: Dense,
}

fn as2(x: ArrayD<f64>) -> Array2<f64> {
    x.into_dimensionality::<Ix2>().expect("trunk emits rows")
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(arch: ClassifierArch, input_dim: usize, classes: usize, rng: &mut R) -> Self {
        let (layers, features) = match arch {
            ClassifierArch::Cnn { input, filters, levels } => {
                let mut layers = vec![Layer::Unflatten(input)];
                let (mut c, mut f) = (input[0], filters);
                for _ in 0..levels {
                    for _ in 0..2 {
                        layers.push(Layer::Conv2d(Conv2d::same(c, f, 3, Init::FanInUniform, rng)));
                        layers.push(Layer::BatchNorm2d(BatchNorm2d::new(f)));
                        layers.push(Layer::Act(Activation::Relu));
                        c = f;
                    }
                    layers.push(Layer::MaxPool2);
                    f *= 2;
                }
                layers.push(Layer::GlobalAvgPool);
                (layers, c)
            }
            ClassifierArch::Mlp { hidden } => (
                vec![Layer::Dense(Dense::new(input_dim, hidden, Init::FanInUniform, rng)), Layer::Act(Activation::Relu)],
                hidden,
            ),
            ClassifierArch::Logistic => (Vec::new(), input_dim),
        };
        Self { trunk: Sequential::new(layers), head: Dense::new(features, classes, Init::FanInUniform, rng) }
    }

    pub fn features(&self, x: ArrayView2<f64>) -> Array2<f64> {
        as2(self.trunk.forward(&x.to_owned().into_dyn()))
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        const CHUNK: usize = 512;
        let parts: Vec<Array2<f64>> = (0..x.nrows())
            .step_by(CHUNK)
            .map(|s| self.head.forward(self.features(x.slice(ndarray::s![s..(s + CHUNK).min(x.nrows()), ..])).view()))
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).unwrap_or_else(|_| Array2::zeros((0, self.head.output_dim())))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        argmax_rows(self.logits(x).view())
    }

    /// Cross-entropy training on `(x, y)`; returns the mean loss per epoch.
    pub fn fit<R: Rng + ?Sized>(
        &mut self,
        x: ArrayView2<f64>,
        y: &[usize],
        options: &TrainOptions,
        rng: &mut R,
    ) -> Result<Vec<f64>, NnError> {
        self.fit_inner(x, y, None, options, rng)
    }

    /// Training with an auxiliary head that predicts `s` from the features.
    /// The head is fitted normally, while the trunk is additionally pushed to
    /// maximise the entropy of the head's predictions, weighted by `weight`.
    pub fn fit_with_entropy_penalty<R: Rng + ?Sized>(
        &mut self,
        x: ArrayView2<f64>,
        y: &[usize],
        s: &[usize],
        s_classes: usize,
        weight: f64,
        options: &TrainOptions,
        rng: &mut R,
    ) -> Result<Vec<f64>, NnError> {
        let features = self.head.input_dim();
        let mut s_head = Dense::new(features, s_classes.max(2), Init::FanInUniform, rng);
        self.fit_inner(x, y, Some((s, &mut s_head, weight)), options, rng)
    }

    fn fit_inner<R: Rng + ?Sized>(
        &mut self,
        x: ArrayView2<f64>,
        y: &[usize],
        mut penalty: Option<(&[usize], &mut Dense, f64)>,
        options: &TrainOptions,
        rng: &mut R,
    ) -> Result<Vec<f64>, NnError> {
        let mut opt_trunk = RAdam::new(options.lr);
        let mut opt_head = RAdam::new(options.lr);
        let mut opt_s = RAdam::new(options.lr);
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        let mut trace = Vec::with_capacity(options.epochs);
        for _ in 0..options.epochs {
            order.shuffle(rng);
            let (mut total, mut batches) = (0.0, 0usize);
            for chunk in order.chunks(options.batch_size.max(1)) {
                let xb = x.select(Axis(0), chunk).into_dyn();
                let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                let (feats, tape) = self.trunk.forward_train(xb);
                let feats = as2(feats);
                let logits = self.head.forward(feats.view());
                let (loss, dlogits) = softmax_cross_entropy(logits.view(), &yb)?;
                let mut dfeats = self.head.backward(feats.view(), dlogits.view());
                if let Some((s, s_head, weight)) = penalty.as_mut() {
                    let sb: Vec<usize> = chunk.iter().map(|&i| s[i]).collect();
                    let s_logits = s_head.forward(feats.view());
                    let (_, ds) = softmax_cross_entropy(s_logits.view(), &sb)?;
                    s_head.backward(feats.view(), ds.view());
                    opt_s.step(&mut **s_head);
                    zero_grad(&mut **s_head);
                    // Gradient of the negated entropy, routed through a
                    // scratch copy so the head's own parameters are untouched.
                    let (_, dentropy) = softmax_entropy(s_logits.view());
                    let mut scratch = s_head.clone();
                    dfeats = dfeats - scratch.backward(feats.view(), dentropy.view()) * *weight;
                }
                self.trunk.backward(tape, dfeats.into_dyn());
                opt_trunk.step(&mut self.trunk);
                opt_head.step(&mut self.head);
                zero_grad(&mut self.trunk);
                zero_grad(&mut self.head);
                total += loss;
                batches += 1;
            }
            trace.push(total / batches.max(1) as f64);
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_of_each_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_fn((5, 48), |(i, j)| ((i * 7 + j) % 5) as f64 / 5.0);
        for arch in [
            ClassifierArch::Cnn { input: [3, 4, 4], filters: 4, levels: 2 },
            ClassifierArch::Mlp { hidden: 8 },
            ClassifierArch::Logistic,
        ] {
            let c = Classifier::new(arch, 48, 3, &mut rng);
            assert_eq!(c.logits(x.view()).dim(), (5, 3));
        }
    }

    #[test]
    fn mlp_learns_a_separable_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((64, 2), |(i, j)| if j == 0 { (i % 2) as f64 * 2.0 - 1.0 } else { (i as f64).sin() });
        let y: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let mut c = Classifier::new(ClassifierArch::Mlp { hidden: 8 }, 2, 2, &mut rng);
        let opts = TrainOptions { epochs: 30, batch_size: 16, lr: 1e-2 };
        let trace = c.fit(x.view(), &y, &opts, &mut rng).unwrap();
        assert!(trace.last().unwrap() < &trace[0]);
        assert_eq!(c.predict(x.view()), y);
    }
}
