//! Deterministic DDIM sampling with dual-condition guidance, and latent
//! chaining for several edits in a row.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{cfg_combine, GuidanceScales, LatentState};
use crate::backends::Denoiser;
use crate::error::{Error, Result};
use crate::raster::Rgb;

/// Cumulative signal levels `ᾱ_t` for `t = 0..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas = (0..train_steps).map(|i| {
            if train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
            }
        });
        Self::from_betas(betas)
    }

    /// Linear in `sqrt(β)`, as used by latent diffusion models.
    pub fn scaled_linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let betas = (0..train_steps).map(|i| {
            let f = if train_steps == 1 { 0.0 } else { i as f64 / (train_steps - 1) as f64 };
            (a + (b - a) * f).powi(2)
        });
        Self::from_betas(betas)
    }

    fn from_betas(betas: impl Iterator<Item = f64>) -> Self {
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        NoiseSchedule { alphas_cumprod }
    }

    pub fn len(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas_cumprod.is_empty()
    }
}

/// The timesteps visited during sampling, in decreasing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub noise: NoiseSchedule,
    pub timesteps: Vec<usize>,
}

impl SamplingSchedule {
    /// `steps` timesteps spread evenly from `T−1` down to 0.
    pub fn uniform(noise: NoiseSchedule, steps: usize) -> Result<Self> {
        let top = noise
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Config("noise schedule is empty".into()))?;
        if steps > noise.len() {
            return Err(Error::Config(format!("{steps} steps exceed {} training timesteps", noise.len())));
        }
        let timesteps = match steps {
            0 => Vec::new(),
            1 => vec![top],
            _ => (0..steps)
                .map(|i| ((top * (steps - 1 - i)) as f64 / (steps - 1) as f64).round() as usize)
                .collect(),
        };
        Ok(SamplingSchedule { noise, timesteps })
    }

    pub fn first_timestep(&self) -> usize {
        self.timesteps.first().copied().unwrap_or(0)
    }

    fn alpha(&self, t: usize) -> Result<f64> {
        self.noise
            .alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("timestep {t} outside schedule of {}", self.noise.len())))
    }
}

/// One deterministic DDIM update from `ᾱ_t` to `ᾱ_prev` given predicted noise.
pub fn ddim_step(z: &[f64], eps: &[f64], alpha_t: f64, alpha_prev: f64) -> Vec<f64> {
    let (sa, sn) = (alpha_t.sqrt(), (1.0 - alpha_t).sqrt());
    let (pa, pn) = (alpha_prev.sqrt(), (1.0 - alpha_prev).sqrt());
    z.iter()
        .zip(eps)
        .map(|(&z, &e)| {
            let x0 = (z - sn * e) / sa;
            pa * x0 + pn * e
        })
        .collect()
}

/// Guided noise prediction: three denoiser calls combined by [`cfg_combine`].
pub fn guided_score(
    latent: &LatentState,
    c_text: Option<&[f64]>,
    c_image: Option<&[f64]>,
    denoiser: &dyn Denoiser,
    scales: GuidanceScales,
) -> Result<Vec<f64>> {
    let e_u = denoiser.score(latent, None, None)?;
    let e_i = denoiser.score(latent, None, c_image)?;
    let e_f = denoiser.score(latent, c_text, c_image)?;
    for e in [&e_u, &e_i, &e_f] {
        if e.len() != latent.values.len() {
            return Err(Error::dims(latent.values.len(), e.len()));
        }
    }
    cfg_combine(&e_u, &e_i, &e_f, scales)
}

/// Runs the sampling schedule from `latent`. An empty schedule returns the input.
pub fn edit_latent(
    latent: LatentState,
    c_text: Option<&[f64]>,
    c_image: Option<&[f64]>,
    denoiser: &dyn Denoiser,
    scales: GuidanceScales,
    schedule: &SamplingSchedule,
) -> Result<LatentState> {
    let mut z = latent;
    for (i, &t) in schedule.timesteps.iter().enumerate() {
        z.t = t;
        let eps = guided_score(&z, c_text, c_image, denoiser, scales)?;
        let alpha_t = schedule.alpha(t)?;
        let alpha_prev = match schedule.timesteps.get(i + 1) {
            Some(&p) => schedule.alpha(p)?,
            None => 1.0,
        };
        let next_t = schedule.timesteps.get(i + 1).copied().unwrap_or(0);
        z = z.with_values(ddim_step(&z.values, &eps, alpha_t, alpha_prev), next_t);
    }
    Ok(z)
}

pub trait LatentCodec {
    fn encode(&self, image: &Rgb) -> Result<LatentState>;
    fn decode(&self, latent: &LatentState) -> Result<Rgb>;
}

/// Pixel-space "latent" in [-1, 1]; decoding quantizes back to 8 bits, so a
/// decode/encode round trip is lossy.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubCodec;

impl LatentCodec for StubCodec {
    fn encode(&self, image: &Rgb) -> Result<LatentState> {
        let values = image.as_raw().iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
        Ok(LatentState::new(values, vec![image.height() as usize, image.width() as usize, 3], 0))
    }

    fn decode(&self, latent: &LatentState) -> Result<Rgb> {
        let [h, w, 3] = latent.shape[..] else {
            return Err(Error::Precondition(format!("cannot decode latent of shape {:?}", latent.shape)));
        };
        if latent.values.len() != h * w * 3 {
            return Err(Error::dims(h * w * 3, latent.values.len()));
        }
        let raw = latent
            .values
            .iter()
            .map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect();
        Rgb::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Precondition("latent does not fit an image".into()))
    }
}

/// Counts encode and decode calls on the wrapped codec.
#[derive(Debug, Default)]
pub struct CountingCodec<C> {
    pub inner: C,
    encodes: AtomicUsize,
    decodes: AtomicUsize,
}

impl<C> CountingCodec<C> {
    pub fn new(inner: C) -> Self {
        CountingCodec {
            inner,
            encodes: AtomicUsize::new(0),
            decodes: AtomicUsize::new(0),
        }
    }

    pub fn encodes(&self) -> usize {
        self.encodes.load(Ordering::SeqCst)
    }

    pub fn decodes(&self) -> usize {
        self.decodes.load(Ordering::SeqCst)
    }
}

impl<C: LatentCodec> LatentCodec for CountingCodec<C> {
    fn encode(&self, image: &Rgb) -> Result<LatentState> {
        self.encodes.fetch_add(1, Ordering::SeqCst);
        self.inner.encode(image)
    }

    fn decode(&self, latent: &LatentState) -> Result<Rgb> {
        self.decodes.fetch_add(1, Ordering::SeqCst);
        self.inner.decode(latent)
    }
}

/// Seeded standard-normal start latent for edit `index` of a chain.
pub fn start_noise(like: &LatentState, t: usize, seed: u64, index: usize) -> LatentState {
    let mut rng = crate::seed::rng_from_parts(&[b"edit-noise", &seed.to_le_bytes(), &(index as u64).to_le_bytes()]);
    let values = (0..like.values.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    like.with_values(values, t)
}

/// Applies the instructions in order, staying in latent space between edits:
/// one encode before the first and one decode after the last.
pub fn multi_edit_latent_chain(
    initial_image: &Rgb,
    instructions: &[Vec<f64>],
    codec: &dyn LatentCodec,
    denoiser: &dyn Denoiser,
    scales: GuidanceScales,
    schedule: &SamplingSchedule,
    seed: u64,
) -> Result<Rgb> {
    if instructions.is_empty() {
        return Err(Error::Precondition("at least one instruction is required".into()));
    }
    let mut current = codec.encode(initial_image)?;
    for (i, instruction) in instructions.iter().enumerate() {
        current = edit_once(&current, instruction, denoiser, scales, schedule, seed, i)?;
    }
    codec.decode(&current)
}

/// One edit conditioned on the image latent `condition`.
pub fn edit_once(
    condition: &LatentState,
    instruction: &[f64],
    denoiser: &dyn Denoiser,
    scales: GuidanceScales,
    schedule: &SamplingSchedule,
    seed: u64,
    index: usize,
) -> Result<LatentState> {
    let start = start_noise(condition, schedule.first_timestep(), seed, index);
    edit_latent(start, Some(instruction), Some(&condition.values), denoiser, scales, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::stub::StubDenoiser;

    fn schedule(steps: usize) -> SamplingSchedule {
        SamplingSchedule::uniform(NoiseSchedule::linear(100, 1e-3, 0.05), steps).unwrap()
    }

    #[test]
    fn uniform_timesteps() {
        assert_eq!(schedule(5).timesteps, vec![99, 74, 50, 25, 0]);
        assert_eq!(schedule(1).timesteps, vec![99]);
        assert!(schedule(0).timesteps.is_empty());
        assert!(SamplingSchedule::uniform(NoiseSchedule::linear(3, 0.1, 0.2), 4).is_err());
    }

    #[test]
    fn zero_steps_is_identity() {
        let z = LatentState::new(vec![0.3, -1.0], vec![2], 7);
        let d = StubDenoiser::new(1);
        let s = GuidanceScales::new(7.5, 1.5).unwrap();
        assert_eq!(edit_latent(z.clone(), Some(&[1.0]), None, &d, s, &schedule(0)).unwrap(), z);
    }

    #[test]
    fn empty_chain_is_error() {
        let img = Rgb::new(2, 2);
        let d = StubDenoiser::new(1);
        let s = GuidanceScales::new(1.0, 1.0).unwrap();
        assert!(multi_edit_latent_chain(&img, &[], &StubCodec, &d, s, &schedule(3), 0).is_err());
    }

    #[test]
    fn stub_codec_round_trip() {
        let img = Rgb::from_fn(3, 2, |x, y| image::Rgb([x as u8 * 90, y as u8 * 200, 17]));
        assert_eq!(StubCodec.decode(&StubCodec.encode(&img).unwrap()).unwrap(), img);
    }
}
