//! Gradient reversal and the ensemble of adversaries that predict the
//! sensitive attribute from a representation.

use ndarray::{Array2, ArrayD, ArrayView2, Ix2};
use nullsample_nn::init::Init;
use nullsample_nn::layers::{Activation, Dense, Layer, ResidualDense, Sequential};
use nullsample_nn::loss::softmax_cross_entropy;
use nullsample_nn::{NnError, Param, Parameters, RAdam};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("an ensemble needs at least one member")]
    NoMembers,
    #[error("reinitialisation probability {0} is outside [0, 1]")]
    BadProbability(f64),
    #[error("unknown dataset `{0}` for choosing the adversary input")]
    UnknownDataset(String),
    #[error("null-sample input requested but the model cannot produce null-samples")]
    NullSamplesUnavailable,
}

pub type Result<T> = std::result::Result<T, AdversaryError>;

/// Identity on the forward pass; scales the incoming gradient by `-lambda`
/// on the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReversal {
    pub lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Self {
        Self { lambda }
    }

    pub fn forward<T: Clone>(&self, t: &T) -> T {
        t.clone()
    }

    pub fn backward(&self, grad: ArrayView2<f64>) -> Array2<f64> {
        grad.mapv(|g| -self.lambda * g)
    }
}

/// Shape of each ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemberArch {
    /// Fully-connected residual network with SELU activations.
    ResNet { hidden: usize, blocks: usize },
    /// One hidden layer.
    Mlp { hidden: usize },
}

impl MemberArch {
    /// Two residual blocks of width 256, used for image representations.
    pub fn image() -> Self {
        MemberArch::ResNet { hidden: 256, blocks: 2 }
    }

    /// One hidden layer of 256 units, used for tabular data.
    pub fn tabular() -> Self {
        MemberArch::Mlp { hidden: 256 }
    }

    pub fn build<R: Rng + ?Sized>(&self, input: usize, classes: usize, rng: &mut R) -> Sequential {
        match *self {
            MemberArch::ResNet { hidden, blocks } => {
                let mut layers = vec![Layer::Dense(Dense::new(input, hidden, Init::LecunNormal, rng))];
                for _ in 0..blocks {
                    layers.push(Layer::Residual(ResidualDense::new(hidden, Activation::Selu, Init::LecunNormal, rng)));
                }
                layers.push(Layer::Act(Activation::Selu));
                layers.push(Layer::Dense(Dense::new(hidden, classes, Init::LecunNormal, rng)));
                Sequential::new(layers)
            }
            MemberArch::Mlp { hidden } => Sequential::new(vec![
                Layer::Dense(Dense::new(input, hidden, Init::FanInUniform, rng)),
                Layer::Act(Activation::Relu),
                Layer::Dense(Dense::new(hidden, classes, Init::FanInUniform, rng)),
            ]),
        }
    }
}

/// Ensemble settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: usize,
    pub reinit_probability: f64,
    pub arch: MemberArch,
}

impl EnsembleSpec {
    pub fn cmnist() -> Self {
        Self { members: 5, reinit_probability: 0.2, arch: MemberArch::image() }
    }

    pub fn celeba() -> Self {
        Self { members: 10, reinit_probability: 0.33, arch: MemberArch::image() }
    }

    pub fn adult() -> Self {
        Self { members: 1, reinit_probability: 0.0, arch: MemberArch::tabular() }
    }
}

/// Classifiers of `s` trained jointly with an encoder; the encoder sees
/// their reversed gradient.
#[derive(Debug, Clone)]
pub struct AdversaryEnsemble {
    members: Vec<Sequential>,
    optimisers: Vec<RAdam>,
    spec: EnsembleSpec,
    input: usize,
    classes: usize,
    lr: f64,
}

impl AdversaryEnsemble {
    pub fn new<R: Rng + ?Sized>(spec: EnsembleSpec, input: usize, classes: usize, lr: f64, rng: &mut R) -> Result<Self> {
        if spec.members == 0 {
            return Err(AdversaryError::NoMembers);
        }
        if !(0.0..=1.0).contains(&spec.reinit_probability) {
            return Err(AdversaryError::BadProbability(spec.reinit_probability));
        }
        let members = (0..spec.members).map(|_| spec.arch.build(input, classes, rng)).collect();
        let optimisers = (0..spec.members).map(|_| RAdam::new(lr)).collect();
        Ok(Self { members, optimisers, spec, input, classes, lr })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn member_logits(&self, reps: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let x = reps.to_owned().into_dyn();
        self.members.iter().map(|m| as2(m.forward(&x))).collect()
    }

    /// Mean over members of the mean cross-entropy against `s`.
    pub fn loss(&self, reps: ArrayView2<f64>, s: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for logits in self.member_logits(reps) {
            total += softmax_cross_entropy(logits.view(), s)?.0;
        }
        Ok(total / self.members.len() as f64)
    }

    /// Majority-free accuracy of each member on `(reps, s)`.
    pub fn member_accuracies(&self, reps: ArrayView2<f64>, s: &[usize]) -> Vec<f64> {
        self.member_logits(reps)
            .iter()
            .map(|l| {
                let preds = nullsample_nn::loss::argmax_rows(l.view());
                preds.iter().zip(s).filter(|(p, t)| p == t).count() as f64 / s.len().max(1) as f64
            })
            .collect()
    }

    /// Computes the ensemble loss, accumulates member gradients and returns
    /// `(loss, dloss/dreps)`. Parameters are not updated.
    pub fn loss_and_grad(&mut self, reps: ArrayView2<f64>, s: &[usize]) -> Result<(f64, Array2<f64>)> {
        let k = self.members.len() as f64;
        let mut total = 0.0;
        let mut dreps = Array2::zeros(reps.raw_dim());
        for member in &mut self.members {
            let (logits, caches) = member.forward_train(reps.to_owned().into_dyn());
            let (loss, dlogits) = softmax_cross_entropy(as2(logits).view(), s)?;
            total += loss;
            let dx = member.backward(caches, (dlogits / k).into_dyn());
            dreps += &as2(dx);
        }
        Ok((total / k, dreps))
    }

    /// One optimiser step per member on the gradients accumulated so far,
    /// then clears them.
    pub fn step(&mut self) {
        for (member, opt) in self.members.iter_mut().zip(&mut self.optimisers) {
            opt.step(member);
            nullsample_nn::zero_grad(member);
        }
    }

    /// Full adversarial update on a batch: returns `(loss, gradient for the
    /// encoder after reversal)`.
    pub fn adversarial_step(
        &mut self,
        reps: ArrayView2<f64>,
        s: &[usize],
        grl: GradientReversal,
    ) -> Result<(f64, Array2<f64>)> {
        let (loss, dreps) = self.loss_and_grad(reps, s)?;
        self.step();
        Ok((loss, grl.backward(dreps.view())))
    }

    /// Replaces each member by a fresh one with the configured probability.
    pub fn maybe_reinitialize<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let mut count = 0;
        for (member, opt) in self.members.iter_mut().zip(&mut self.optimisers) {
            if rng.random::<f64>() < self.spec.reinit_probability {
                *member = self.spec.arch.build(self.input, self.classes, rng);
                *opt = RAdam::new(self.lr);
                count += 1;
            }
        }
        count
    }

    pub fn tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit("adversary", &mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }
}

impl Parameters for AdversaryEnsemble {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, m) in self.members.iter().enumerate() {
            m.visit(&nullsample_nn::join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, m) in self.members.iter_mut().enumerate() {
            m.visit_mut(&nullsample_nn::join(prefix, &i.to_string()), f);
        }
    }
}

/// What the adversary sees during encoder training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryInput {
    /// The invariant part of the code.
    Encodings,
    /// Data-domain null-samples reconstructed from the invariant part.
    NullSamples,
}

impl AdversaryInput {
    /// Per-dataset default: null-samples for tabular data, encodings for
    /// images.
    pub fn for_dataset(name: &str) -> Result<Self> {
        match name {
            "adult" => Ok(AdversaryInput::NullSamples),
            "cmnist" | "mnist" | "celeba" | "celeba-subset" => Ok(AdversaryInput::Encodings),
            other => Err(AdversaryError::UnknownDataset(other.to_string())),
        }
    }
}

/// Picks the adversary's input among the available candidates.
pub fn adversary_input<'a>(
    source: AdversaryInput,
    encodings: ArrayView2<'a, f64>,
    null_samples: Option<ArrayView2<'a, f64>>,
) -> Result<ArrayView2<'a, f64>> {
    match source {
        AdversaryInput::Encodings => Ok(encodings),
        AdversaryInput::NullSamples => null_samples.ok_or(AdversaryError::NullSamplesUnavailable),
    }
}

fn as2(x: ArrayD<f64>) -> Array2<f64> {
    x.into_dimensionality::<Ix2>().expect("rank-2 logits")
}
