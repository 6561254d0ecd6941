//! Forward diffusion: the variance schedule and the image/latent codec.
//!
//! Latents are pixel-space maps scaled to [-1, 1]; there is no learned
//! autoencoder in this profile, so encoding and decoding are exact affine
//! maps and the denoiser works at full image resolution.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use image::RgbImage;

/// Variance schedule of the forward noising process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Schedule("schedule needs at least 2 steps".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
            )));
        }
        let mut betas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for i in 0..steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
            prod *= 1.0 - beta;
            betas.push(beta);
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Default ramp used by the pipeline: the thousand-step linear
    /// reference (1e-4 to 0.02) resampled to `steps` points by
    /// interpolating cumulative log signal retention. The terminal
    /// alpha-bar stays at the reference's ~4e-5 for any step count, so a
    /// sampler starting from pure noise matches what training saw at the
    /// last timestep.
    pub fn default_linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Schedule("schedule needs at least 2 steps".into()));
        }
        const REF_STEPS: usize = 1000;
        const REF_START: f64 = 1e-4;
        const REF_END: f64 = 0.02;
        let mut log_bars = Vec::with_capacity(REF_STEPS);
        let mut acc = 0.0;
        for j in 0..REF_STEPS {
            let beta = REF_START + (REF_END - REF_START) * j as f64 / (REF_STEPS - 1) as f64;
            acc += (1.0 - beta).ln();
            log_bars.push(acc);
        }
        let log_bar_at = |x: f64| -> f64 {
            let lo = x.floor() as usize;
            if lo + 1 >= REF_STEPS {
                return log_bars[REF_STEPS - 1];
            }
            let frac = x - lo as f64;
            log_bars[lo] * (1.0 - frac) + log_bars[lo + 1] * frac
        };
        let span = (REF_STEPS - 1) as f64 / (steps - 1) as f64;
        let mut betas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prev = 1.0f64;
        for i in 0..steps {
            let bar = log_bar_at(i as f64 * span).exp();
            betas.push(1.0 - bar / prev);
            alpha_bars.push(bar);
            prev = bar;
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// Cumulative signal retention up to and including step `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Per-step signal retention, `1 - beta_t`.
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    /// Standard deviation of the reverse-step posterior,
    /// `sqrt((1 - abar_{t-1}) / (1 - abar_t) beta_t)`; zero at the final
    /// step so sampling terminates on the mean.
    pub fn posterior_sigma(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        ((1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t]).sqrt()
    }

    /// Noises a clean latent to timestep `t`:
    /// `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        if t >= self.steps() {
            return Err(Error::Schedule(format!(
                "timestep {t} out of range 0..{}",
                self.steps()
            )));
        }
        if z0.shape != eps.shape {
            return Err(Error::Schedule(format!(
                "latent shape {:?} does not match noise shape {:?}",
                z0.shape, eps.shape
            )));
        }
        let ab = self.alpha_bars[t];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = z0
            .data
            .iter()
            .zip(&eps.data)
            .map(|(z, e)| sa * z + sn * e)
            .collect();
        Ok(Tensor::new(z0.shape.clone(), data))
    }
}

/// Encodes an image into a [-1, 1] latent of shape [3, h, w].
pub fn encode_image(image: &RgbImage) -> Tensor {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in image.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Decodes a latent back to an image, clamping out-of-range values.
pub fn decode_latent(z: &Tensor) -> Result<RgbImage> {
    if z.shape.len() != 3 || z.shape[0] != 3 {
        return Err(Error::Input(format!(
            "latent must be [3, h, w], got {:?}",
            z.shape
        )));
    }
    let (h, w) = (z.shape[1], z.shape[2]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = (z.data[c * h * w + y * w + x].clamp(-1.0, 1.0) + 1.0) * 127.5;
                px[c] = v.round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}
