//! A two-dimensional conditional denoiser trained with condition dropout.
//!
//! Each example moves a source point by one of two offsets picked by a
//! discrete instruction. Conditioned on the source alone the target is
//! bimodal; the instruction picks the mode, so text guidance should push
//! samples into the requested one.

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sampler::{edit_latent, NoiseSchedule, SamplingSchedule};
use super::{dropout_conditions, ConditioningPair, DropoutConfig, GuidanceScales, LatentState, TrainHyperparams};
use crate::backends::Denoiser;
use crate::error::{Error, Result};
use crate::seed::rng_from_parts;

pub const TOY_OFFSETS: [[f64; 2]; 2] = [[1.2, 0.0], [-1.2, 0.0]];
const SOURCE_SPREAD: f64 = 0.5;
const TARGET_NOISE: f64 = 0.05;
const TIME_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTriple {
    pub source: [f64; 2],
    pub target: [f64; 2],
    pub instruction: usize,
}

pub fn one_hot(instruction: usize) -> Vec<f64> {
    let mut v = vec![0.0; TOY_OFFSETS.len()];
    v[instruction] = 1.0;
    v
}

fn normal2(rng: &mut ChaCha8Rng, scale: f64) -> [f64; 2] {
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    [a * scale, b * scale]
}

pub fn two_mode_dataset(n: usize, seed: u64) -> Vec<ToyTriple> {
    let mut rng = rng_from_parts(&[b"toy-data", &seed.to_le_bytes()]);
    (0..n)
        .map(|i| {
            let k = i % TOY_OFFSETS.len();
            let source = normal2(&mut rng, SOURCE_SPREAD);
            let jitter = normal2(&mut rng, TARGET_NOISE);
            let d = TOY_OFFSETS[k];
            ToyTriple {
                source,
                target: [source[0] + d[0] + jitter[0], source[1] + d[1] + jitter[1]],
                instruction: k,
            }
        })
        .collect()
}

/// Fully connected tanh network with all parameters in one flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        let mut rng = rng_from_parts(&[b"mlp-init", &seed.to_le_bytes()]);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let o = offset;
            offset += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    /// Activations of every layer, input first.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let last = self.sizes.len() - 2;
        let mut acts = vec![x.to_vec()];
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let a = acts.last().expect("input present");
            let (w, b) = self.params[off..off + n_in * n_out + n_out].split_at(n_in * n_out);
            let out = (0..n_out)
                .map(|j| {
                    let z = b[j] + w[j * n_in..(j + 1) * n_in].iter().zip(a).map(|(w, a)| w * a).sum::<f64>();
                    if l == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    /// Accumulates `∂loss/∂params` into `grad` given `∂loss/∂output`.
    pub fn backward(&self, acts: &[Vec<f64>], d_out: &[f64], grad: &mut [f64]) {
        let layers: Vec<_> = self.layers().collect();
        let last = layers.len() - 1;
        let mut delta = d_out.to_vec();
        for (l, &(off, n_in, n_out)) in layers.iter().enumerate().rev() {
            if l != last {
                for (d, a) in delta.iter_mut().zip(&acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let input = &acts[l];
            let mut d_in = vec![0.0; n_in];
            for j in 0..n_out {
                let row = off + j * n_in;
                for i in 0..n_in {
                    grad[row + i] += delta[j] * input[i];
                    d_in[i] += self.params[row + i] * delta[j];
                }
                grad[off + n_in * n_out + j] += delta[j];
            }
            delta = d_in;
        }
    }
}

/// Noise predictor over 2-D latents with optional one-hot text and 2-D image
/// conditions. Each condition carries a presence flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDenoiser {
    pub net: Mlp,
    pub train_steps: usize,
}

impl ToyDenoiser {
    pub fn new(hidden: usize, train_steps: usize, seed: u64) -> Self {
        let input = 2 + TIME_FEATURES + (TOY_OFFSETS.len() + 1) + (2 + 1);
        ToyDenoiser {
            net: Mlp::new(&[input, hidden, hidden, 2], seed),
            train_steps,
        }
    }

    pub fn features(&self, z: &[f64], t: usize, c_text: Option<&[f64]>, c_image: Option<&[f64]>) -> Vec<f64> {
        let tn = t as f64 / (self.train_steps.max(2) - 1) as f64;
        let pi = std::f64::consts::PI;
        let mut f = Vec::with_capacity(self.net.sizes[0]);
        f.extend_from_slice(z);
        f.extend([tn, (pi * tn).sin(), (pi * tn).cos(), (2.0 * pi * tn).sin(), (2.0 * pi * tn).cos()]);
        match c_text {
            Some(c) => f.extend(c.iter().copied().chain([1.0])),
            None => f.extend(std::iter::repeat_n(0.0, TOY_OFFSETS.len() + 1)),
        }
        match c_image {
            Some(c) => f.extend(c.iter().copied().chain([1.0])),
            None => f.extend([0.0; 3]),
        }
        f
    }
}

impl Denoiser for ToyDenoiser {
    fn name(&self) -> &str {
        "toy-denoiser"
    }

    fn score(&self, latent: &LatentState, c_text: Option<&[f64]>, c_image: Option<&[f64]>) -> Result<Vec<f64>> {
        if latent.values.len() != 2 {
            return Err(Error::dims(2, latent.values.len()));
        }
        if let Some(c) = c_text {
            if c.len() != TOY_OFFSETS.len() {
                return Err(Error::dims(TOY_OFFSETS.len(), c.len()));
            }
        }
        if let Some(c) = c_image {
            if c.len() != 2 {
                return Err(Error::dims(2, c.len()));
            }
        }
        let f = self.features(&latent.values, latent.t, c_text, c_image);
        Ok(self.net.forward(&f).pop().expect("output layer"))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTrainOutput {
    pub model: ToyDenoiser,
    /// Mean per-sample loss of each epoch.
    pub losses: Vec<f64>,
}

/// Denoising score matching with condition dropout, gradient accumulation
/// and norm clipping. Deterministic for a given seed.
pub fn toy_train(
    dataset: &[ToyTriple],
    model: ToyDenoiser,
    dropout: &DropoutConfig,
    hyper: &TrainHyperparams,
    noise: &NoiseSchedule,
    seed: u64,
) -> Result<ToyTrainOutput> {
    dropout.validate()?;
    if noise.len() != model.train_steps {
        return Err(Error::Config(format!(
            "noise schedule has {} steps, model expects {}",
            noise.len(),
            model.train_steps
        )));
    }
    let mut model = model;
    let mut losses = Vec::with_capacity(hyper.epochs as usize);
    if dataset.is_empty() || hyper.epochs == 0 {
        return Ok(ToyTrainOutput { model, losses });
    }
    let batch = hyper.per_worker_batch.max(1) as usize;
    let accum = hyper.grad_accum.max(1) as usize;
    let n_params = model.net.params.len();
    let mut adam = Adam::new(n_params);
    let mut grad = vec![0.0; n_params];
    let mut rng = rng_from_parts(&[b"toy-train", &seed.to_le_bytes()]);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..hyper.epochs as usize {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(batch).collect();
        for group in chunks.chunks(accum) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let count: usize = group.iter().map(|c| c.len()).sum();
            for &i in group.iter().flat_map(|c| c.iter()) {
                let ex = &dataset[i];
                let t = rng.random_range(0..noise.len());
                let a = noise.alphas_cumprod[t];
                let eps = normal2(&mut rng, 1.0);
                let z: Vec<f64> = (0..2).map(|d| a.sqrt() * ex.target[d] + (1.0 - a).sqrt() * eps[d]).collect();
                let pair = dropout_conditions(
                    ConditioningPair {
                        c_text: Some(one_hot(ex.instruction)),
                        c_image: Some(ex.source.to_vec()),
                    },
                    dropout,
                    rng.random::<f64>(),
                );
                let f = model.features(&z, t, pair.c_text.as_deref(), pair.c_image.as_deref());
                let acts = model.net.forward(&f);
                let out = acts.last().expect("output layer");
                let mut d_out = [0.0; 2];
                for d in 0..2 {
                    let diff = out[d] - eps[d];
                    epoch_loss += diff * diff / 2.0;
                    d_out[d] = diff / count as f64;
                }
                model.net.backward(&acts, &d_out, &mut grad);
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            if hyper.max_grad_norm > 0.0 && norm > hyper.max_grad_norm {
                let s = hyper.max_grad_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.update(&mut model.net.params, &grad, hyper.lr);
        }
        let mean = epoch_loss / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        losses.push(mean);
    }
    Ok(ToyTrainOutput { model, losses })
}

/// Fraction of guided samples that land nearer the requested mode than the other.
pub fn toy_hit_rate(
    model: &ToyDenoiser,
    schedule: &SamplingSchedule,
    scales: GuidanceScales,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Precondition("need at least one sample".into()));
    }
    let mut rng = rng_from_parts(&[b"toy-sample", &seed.to_le_bytes()]);
    let mut hits = 0usize;
    for i in 0..samples {
        let k = i % TOY_OFFSETS.len();
        let source = normal2(&mut rng, SOURCE_SPREAD);
        let start = LatentState::new(normal2(&mut rng, 1.0).to_vec(), vec![2], schedule.first_timestep());
        let x = edit_latent(start, Some(&one_hot(k)), Some(&source), model, scales, schedule)?.values;
        let dist = |d: [f64; 2]| (x[0] - source[0] - d[0]).powi(2) + (x[1] - source[1] - d[1]).powi(2);
        if (0..TOY_OFFSETS.len()).all(|j| j == k || dist(TOY_OFFSETS[k]) < dist(TOY_OFFSETS[j])) {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples as f64)
}

/// Noise schedule used by the toy harness.
pub fn toy_noise_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(50, 1e-3, 0.2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_matches_finite_differences() {
        let net = Mlp::new(&[3, 4, 2], 5);
        let x = [0.3, -0.7, 1.1];
        let d_out = [0.4, -1.3];
        let mut grad = vec![0.0; net.params.len()];
        net.backward(&net.forward(&x), &d_out, &mut grad);
        let loss = |n: &Mlp| {
            let o = n.forward(&x).pop().unwrap();
            o[0] * d_out[0] + o[1] * d_out[1]
        };
        for i in 0..net.params.len() {
            let h = 1e-6;
            let mut p = net.clone();
            p.params[i] += h;
            let mut m = net.clone();
            m.params[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let data = two_mode_dataset(64, 1);
        let model = ToyDenoiser::new(8, 50, 2);
        let mut h = TrainHyperparams::toy();
        h.epochs = 0;
        let out = toy_train(&data, model.clone(), &DropoutConfig::default(), &h, &toy_noise_schedule(), 3).unwrap();
        assert_eq!(out.model, model);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = two_mode_dataset(64, 1);
        let mut model = ToyDenoiser::new(8, 50, 2);
        model.net.params[0] = f64::NAN;
        let err = toy_train(&data, model, &DropoutConfig::default(), &TrainHyperparams::toy(), &toy_noise_schedule(), 3)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0 }));
    }

    #[test]
    fn dataset_is_two_mode() {
        let data = two_mode_dataset(10, 4);
        for ex in &data {
            let d = TOY_OFFSETS[ex.instruction];
            assert!((ex.target[0] - ex.source[0] - d[0]).abs() < 0.5);
        }
        assert_eq!(data, two_mode_dataset(10, 4));
    }
}
