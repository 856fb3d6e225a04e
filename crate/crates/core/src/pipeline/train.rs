use ndarray::{s, Array2, ArrayView2, Axis};
use nullsample_nn::{zero_grad, RAdam};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::adversary::{AdversaryEnsemble, AdversaryInput, GradientReversal};
use crate::cvae::{CvaeError, CvaeModel};
use crate::flow::{nll_objective, FlowError, FlowModel};
use crate::invariance::{mask_sensitive, PartitionSpec, Plateau};

/// Losses of one encoder-training epoch, averaged over batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    /// Per-dimension NLL for a flow; reconstruction + weighted KL for a cVAE.
    pub objective: f64,
    /// Mean ensemble cross-entropy on the training batches.
    pub adversary: f64,
    /// Ensemble cross-entropy on held-out data, when provided.
    pub held_out_adversary: Option<f64>,
    pub reinitialized: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Extra adversary-only updates per batch before the joint step.
    pub adversary_steps: usize,
    /// Uniform noise amplitude added to flow inputs.
    pub dequantize: f64,
    /// Stop early once the objective plateaus.
    pub stop_on_plateau: bool,
}

fn diverged(epoch: usize, detail: impl Into<String>) -> PipelineError {
    PipelineError::Divergence { epoch, detail: detail.into() }
}

fn flow_failure(epoch: usize, e: FlowError) -> PipelineError {
    match e {
        FlowError::NumericalInstability { .. } => diverged(epoch, e.to_string()),
        other => other.into(),
    }
}

/// Held-out inputs for monitoring the adversary.
pub type HeldOut<'a> = Option<(ArrayView2<'a, f64>, &'a [usize])>;

/// Flow training: per-dimension NLL plus the reversed adversary loss on the
/// invariant code (or its null-sample).
#[allow(clippy::too_many_arguments)]
pub fn train_flow<R: Rng + ?Sized>(
    flow: &mut FlowModel,
    partition: &PartitionSpec,
    ensemble: &mut AdversaryEnsemble,
    source: AdversaryInput,
    x: ArrayView2<f64>,
    s: &[usize],
    held_out: HeldOut<'_>,
    options: &EncoderTraining,
    rng: &mut R,
) -> Result<Vec<EpochTrace>> {
    let grl = GradientReversal::new(options.lambda);
    let mut optimiser = RAdam::new(options.lr);
    let mut plateau = Plateau::default();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let du = partition.invariant();
    let mut traces = Vec::new();
    for epoch in 0..options.epochs {
        order.shuffle(rng);
        let (mut nll_sum, mut adv_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(options.batch_size.max(1)) {
            let mut xb = x.select(Axis(0), chunk);
            if options.dequantize > 0.0 {
                xb.mapv_inplace(|v| v + options.dequantize * rng.random::<f64>());
            }
            let sb: Vec<usize> = chunk.iter().map(|&i| s[i]).collect();
            let (z, logdet, tape) = flow.forward_train(xb.view()).map_err(|e| flow_failure(epoch, e))?;
            let (nll, mut dz, dlogdet) = nll_objective(z.view(), &logdet);
            if !nll.is_finite() {
                return Err(diverged(epoch, format!("non-finite NLL after {batches} batches")));
            }
            let adv = match source {
                AdversaryInput::Encodings => {
                    let zu = z.slice(s![.., ..du]);
                    train_adversary(ensemble, zu, &sb, options.adversary_steps)?;
                    let (adv, reversed) = ensemble.adversarial_step(zu, &sb, grl)?;
                    let mut head = dz.slice_mut(s![.., ..du]);
                    head += &reversed;
                    adv
                }
                AdversaryInput::NullSamples => {
                    let masked = mask_sensitive(z.view(), partition)?;
                    let (xu, inverse_tape) = flow.inverse_train(masked.view()).map_err(|e| flow_failure(epoch, e))?;
                    train_adversary(ensemble, xu.view(), &sb, options.adversary_steps)?;
                    let (adv, reversed) = ensemble.adversarial_step(xu.view(), &sb, grl)?;
                    let dmasked = flow.backward_inverse(inverse_tape, reversed.view());
                    let mut head = dz.slice_mut(s![.., ..du]);
                    head += &dmasked.slice(s![.., ..du]);
                    adv
                }
            };
            flow.backward(tape, dz.view(), &dlogdet);
            optimiser.step(flow);
            zero_grad(flow);
            nll_sum += nll;
            adv_sum += adv;
            batches += 1;
        }
        let reinitialized = ensemble.maybe_reinitialize(rng);
        let held_out_adversary = match held_out {
            Some((hx, hs)) => Some(held_out_flow_loss(flow, partition, ensemble, source, hx, hs, epoch)?),
            None => None,
        };
        let objective = nll_sum / batches.max(1) as f64;
        let trace = EpochTrace { epoch, objective, adversary: adv_sum / batches.max(1) as f64, held_out_adversary, reinitialized };
        log::info!("flow epoch {epoch}: nll {:.4} adversary {:.4}", trace.objective, trace.adversary);
        traces.push(trace);
        if options.stop_on_plateau && plateau.observe(objective) {
            break;
        }
    }
    Ok(traces)
}

fn train_adversary(ensemble: &mut AdversaryEnsemble, reps: ArrayView2<f64>, s: &[usize], steps: usize) -> Result<()> {
    for _ in 0..steps {
        ensemble.loss_and_grad(reps, s)?;
        ensemble.step();
    }
    Ok(())
}

fn held_out_flow_loss(
    flow: &FlowModel,
    partition: &PartitionSpec,
    ensemble: &AdversaryEnsemble,
    source: AdversaryInput,
    x: ArrayView2<f64>,
    s: &[usize],
    epoch: usize,
) -> Result<f64> {
    let (z, _) = flow.forward(x).map_err(|e| flow_failure(epoch, e))?;
    let reps: Array2<f64> = match source {
        AdversaryInput::Encodings => z.slice(s![.., ..partition.invariant()]).to_owned(),
        AdversaryInput::NullSamples => {
            flow.inverse(mask_sensitive(z.view(), partition)?.view()).map_err(|e| flow_failure(epoch, e))?
        }
    };
    Ok(ensemble.loss(reps.view(), s)?)
}

/// cVAE training: reconstruction + beta KL plus the reversed adversary loss
/// on the sampled code.
#[allow(clippy::too_many_arguments)]
pub fn train_cvae<R: Rng + ?Sized>(
    cvae: &mut CvaeModel,
    ensemble: &mut AdversaryEnsemble,
    x: ArrayView2<f64>,
    s: &[usize],
    held_out: HeldOut<'_>,
    options: &EncoderTraining,
    rng: &mut R,
) -> Result<Vec<EpochTrace>> {
    let grl = GradientReversal::new(options.lambda);
    let mut optimiser = RAdam::new(options.lr);
    let mut plateau = Plateau::default();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut traces = Vec::new();
    for epoch in 0..options.epochs {
        order.shuffle(rng);
        let (mut obj_sum, mut adv_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(options.batch_size.max(1)) {
            let xb = x.select(Axis(0), chunk);
            let sb: Vec<usize> = chunk.iter().map(|&i| s[i]).collect();
            let loss = cvae.train_step(xb.view(), &sb, Some((&mut *ensemble, grl)), &mut optimiser, rng).map_err(|e| {
                match e {
                    CvaeError::NumericalInstability => diverged(epoch, format!("non-finite loss after {batches} batches")),
                    other => other.into(),
                }
            })?;
            obj_sum += loss.recon + cvae.config().beta * loss.kl;
            adv_sum += if options.lambda > 0.0 { loss.adv / options.lambda } else { 0.0 };
            batches += 1;
        }
        let reinitialized = ensemble.maybe_reinitialize(rng);
        let held_out_adversary = match held_out {
            Some((hx, hs)) => {
                let (mu, _) = cvae.encode(hx)?;
                Some(ensemble.loss(mu.view(), hs)?)
            }
            None => None,
        };
        let objective = obj_sum / batches.max(1) as f64;
        let trace = EpochTrace { epoch, objective, adversary: adv_sum / batches.max(1) as f64, held_out_adversary, reinitialized };
        log::info!("cvae epoch {epoch}: objective {:.4} adversary {:.4}", trace.objective, trace.adversary);
        traces.push(trace);
        if options.stop_on_plateau && plateau.observe(objective) {
            break;
        }
    }
    Ok(traces)
}
