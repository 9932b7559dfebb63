use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassInfo, DataError, Dataset, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Sinusoids summed into each class template.
    pub components: usize,
    /// Highest spatial frequency, in cycles per image side.
    pub max_frequency: u32,
    /// Per-pixel Gaussian noise, in [-1, 1] intensity units.
    pub noise_std: f64,
    /// Largest circular translation, in pixels along each axis.
    pub max_shift: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class: 50,
            image_size: 40,
            channels: 3,
            components: 4,
            max_frequency: 2,
            noise_std: 0.15,
            max_shift: 2,
        }
    }
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amplitude: f64,
}

/// Per-class template in [-1, 1] intensity units, C×S×S.
fn template(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<f64> {
    let s = cfg.image_size;
    let f = cfg.max_frequency as i64;
    let mut out = vec![0.0; cfg.channels * s * s];
    for plane in out.chunks_mut(s * s) {
        let waves: Vec<Wave> = (0..cfg.components)
            .map(|_| Wave {
                fy: rng.random_range(-f..=f) as f64,
                fx: rng.random_range(-f..=f) as f64,
                phase: rng.random_range(0.0..TAU),
                amplitude: rng.random_range(0.5..1.0),
            })
            .collect();
        let norm: f64 = waves.iter().map(|w| w.amplitude).sum::<f64>().max(1e-12);
        for (i, v) in plane.iter_mut().enumerate() {
            let (y, x) = ((i / s) as f64 / s as f64, (i % s) as f64 / s as f64);
            let sum: f64 = waves
                .iter()
                .map(|w| w.amplitude * (TAU * (w.fy * y + w.fx * x) + w.phase).cos())
                .sum();
            *v = 0.8 * sum / norm;
        }
    }
    out
}

fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// The per-class templates that [`synth_dataset`] draws for `(cfg, seed)`,
/// as quantized pixels.
pub fn synth_templates(cfg: &SynthConfig, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.num_classes)
        .map(|_| template(cfg, &mut rng).into_iter().map(quantize).collect())
        .collect()
}

/// Class-conditional images: a random low-frequency template per class;
/// each sample is its template circularly shifted by up to `max_shift`
/// pixels, plus Gaussian noise, quantized to u8. Samples are ordered class
/// by class and the output is a pure function of `(cfg, seed)`.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset, DataError> {
    if cfg.num_classes == 0 || cfg.per_class == 0 || cfg.image_size == 0 || cfg.channels == 0 {
        return Err(DataError::Invalid("synthetic dataset counts must be positive".into()));
    }
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) || u32::try_from(cfg.num_classes).is_err() {
        return Err(DataError::Invalid("noise_std must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let shift = cfg.max_shift.min(s - 1) as i64;
    let mut classes = Vec::with_capacity(cfg.num_classes);
    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    let mut pixels = Vec::with_capacity(cfg.num_classes * cfg.per_class * cfg.channels * s * s);
    let templates: Vec<Vec<f64>> = (0..cfg.num_classes).map(|_| template(cfg, &mut rng)).collect();
    for (k, t) in templates.iter().enumerate() {
        classes.push(ClassInfo {
            id: k as u32,
            name: format!("class_{k:03}"),
        });
        for _ in 0..cfg.per_class {
            let dy = rng.random_range(-shift..=shift).rem_euclid(s as i64) as usize;
            let dx = rng.random_range(-shift..=shift).rem_euclid(s as i64) as usize;
            for plane in t.chunks(s * s) {
                for y in 0..s {
                    for x in 0..s {
                        let src = plane[((y + dy) % s) * s + (x + dx) % s];
                        let noise: f64 = if cfg.noise_std > 0.0 {
                            cfg.noise_std * rng.sample::<f64, _>(StandardNormal)
                        } else {
                            0.0
                        };
                        pixels.push(quantize(src + noise));
                    }
                }
            }
            samples.push(Sample {
                id: samples.len() as u64,
                class_id: k as u32,
            });
        }
    }
    Dataset::new((cfg.channels, s, s), classes, samples, pixels)
}
