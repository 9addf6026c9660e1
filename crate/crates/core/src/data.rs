//! Synthetic heterogeneous federations and segmentation metrics.
//!
//! Each client draws blob images along three heterogeneity axes: target
//! size (blob radius band), intensity distribution (foreground/background
//! levels plus pixel noise), and sample count. Generation is a pure
//! function of the seeds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{rng_for, standard_normal, uniform};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("client {client_id}: {reason}")]
    InvalidSpec { client_id: u16, reason: String },
    #[error("no client specs given")]
    EmptyFederation,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Generation recipe for one client's local dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDatasetSpec {
    pub client_id: u16,
    pub n_samples: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Blob radius band in pixels, inclusive.
    pub blob_radius: (f64, f64),
    /// Blobs per image, inclusive.
    pub blobs_per_image: (usize, usize),
    pub fg_intensity: f64,
    pub bg_intensity: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl ClientDatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: String| DataError::InvalidSpec {
            client_id: self.client_id,
            reason,
        };
        if self.n_samples < 1 {
            return Err(fail("n_samples must be at least 1".into()));
        }
        let (r_min, r_max) = self.blob_radius;
        let half_min_side = self.image_h.min(self.image_w) as f64 / 2.0;
        if !(r_min > 0.0 && r_min <= r_max && r_max < half_min_side) {
            return Err(fail(format!(
                "blob radius band ({r_min}, {r_max}) must satisfy 0 < r_min <= r_max < {half_min_side}"
            )));
        }
        if self.blobs_per_image.0 < 1 || self.blobs_per_image.0 > self.blobs_per_image.1 {
            return Err(fail(format!(
                "blobs_per_image range {:?} must be ordered and start at 1 or more",
                self.blobs_per_image
            )));
        }
        for (name, v) in [("fg_intensity", self.fg_intensity), ("bg_intensity", self.bg_intensity)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(fail(format!("{name} {v} must lie in [0, 1]")));
            }
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(fail(format!("noise_std {} must be finite and >= 0", self.noise_std)));
        }
        Ok(())
    }
}

/// One image/mask pair. The image lives in [0, 1]; the mask is strictly
/// binary.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Per-channel intensity statistics of a client's training pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Standard deviations below this floor are reported as the floor, so
/// downstream Gaussian sampling always sees sigma > 0.
pub const STATS_STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub spec: ClientDatasetSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl ClientDataset {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }
}

fn generate_sample(spec: &ClientDatasetSpec, rng: &mut impl rand::Rng) -> Sample {
    let (h, w) = (spec.image_h, spec.image_w);
    let mut mask = Tensor::<f32>::zeros(vec![1, h, w]);
    let blobs = if spec.blobs_per_image.0 == spec.blobs_per_image.1 {
        spec.blobs_per_image.0
    } else {
        rng.gen_range(spec.blobs_per_image.0..=spec.blobs_per_image.1)
    };
    for _ in 0..blobs {
        let cy = uniform(rng, 0.0, h as f64);
        let cx = uniform(rng, 0.0, w as f64);
        let r = if spec.blob_radius.0 == spec.blob_radius.1 {
            spec.blob_radius.0
        } else {
            uniform(rng, spec.blob_radius.0, spec.blob_radius.1)
        };
        let r2 = r * r;
        let y_lo = ((cy - r).floor().max(0.0)) as usize;
        let y_hi = ((cy + r).ceil().min(h as f64 - 1.0)) as usize;
        let x_lo = ((cx - r).floor().max(0.0)) as usize;
        let x_hi = ((cx + r).ceil().min(w as f64 - 1.0)) as usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                if dy * dy + dx * dx <= r2 {
                    let idx = mask.idx3(0, y, x);
                    mask.data_mut()[idx] = 1.0;
                }
            }
        }
    }
    let mut image = Tensor::<f32>::zeros(vec![1, h, w]);
    for i in 0..image.len() {
        let base = if mask.data()[i] > 0.5 {
            spec.fg_intensity
        } else {
            spec.bg_intensity
        };
        let noisy = if spec.noise_std > 0.0 {
            base + spec.noise_std * standard_normal(rng)
        } else {
            base
        };
        image.data_mut()[i] = noisy.clamp(0.0, 1.0) as f32;
    }
    Sample { image, mask }
}

/// Deterministically generates every client's dataset, already split
/// 80/20 into train/eval (the eval slice is the tail).
pub fn generate_federation(
    specs: &[ClientDatasetSpec],
    master_seed: u64,
) -> Result<Vec<ClientDataset>, DataError> {
    if specs.is_empty() {
        return Err(DataError::EmptyFederation);
    }
    specs.iter().try_for_each(ClientDatasetSpec::validate)?;
    Ok(specs
        .iter()
        .map(|spec| {
            let mut rng = rng_for(master_seed, &[0xda7a, spec.seed, spec.client_id as u64]);
            let mut samples: Vec<Sample> = (0..spec.n_samples)
                .map(|_| generate_sample(spec, &mut rng))
                .collect();
            let n_eval = (spec.n_samples / 5).max(1).min(spec.n_samples);
            let eval = samples.split_off(spec.n_samples - n_eval);
            ClientDataset {
                spec: spec.clone(),
                train: samples,
                eval,
            }
        })
        .collect())
}

/// Mean and population standard deviation over all training pixels.
pub fn compute_stats(dataset: &ClientDataset) -> ChannelStats {
    let mut count = 0usize;
    let mut sum = 0.0f64;
    for s in &dataset.train {
        for &v in s.image.data() {
            sum += v as f64;
            count += 1;
        }
    }
    if count == 0 {
        return ChannelStats { mean: 0.0, std: STATS_STD_FLOOR };
    }
    let mean = sum / count as f64;
    let mut sq = 0.0f64;
    for s in &dataset.train {
        for &v in s.image.data() {
            let d = v as f64 - mean;
            sq += d * d;
        }
    }
    let std = (sq / count as f64).sqrt();
    ChannelStats {
        mean,
        std: std.max(STATS_STD_FLOOR),
    }
}

/// Thresholds a probability map into a binary mask.
pub fn binarize<T: Scalar>(pred: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t = T::from_f64(threshold);
    pred.map(|v| if v >= t { T::ONE } else { T::ZERO })
}

/// Dice overlap 2|A∩B| / (|A| + |B|); two empty masks count as a perfect
/// match.
pub fn dice<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, TensorError> {
    a.check_same_shape(b, "dice")?;
    let mut inter = 0usize;
    let mut total = 0usize;
    let half = T::from_f64(0.5);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let xa = x > half;
        let yb = y > half;
        inter += (xa && yb) as usize;
        total += xa as usize + yb as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Fraction of pixels on which the two binary masks agree.
pub fn pixel_accuracy<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, TensorError> {
    a.check_same_shape(b, "pixel_accuracy")?;
    let half = T::from_f64(0.5);
    let matches = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(&x, &y)| (x > half) == (y > half))
        .count();
    Ok(matches as f64 / a.len() as f64)
}

/// The default five-client heterogeneous federation: radius bands span
/// small to large targets, sample counts 10-70, intensity contrast and
/// noise vary per client. Image sides scale with the radius band so every
/// blob fits.
pub fn desk5_specs() -> Vec<ClientDatasetSpec> {
    let bands: [(f64, f64); 5] = [(2.0, 4.0), (3.0, 6.0), (5.0, 10.0), (8.0, 16.0), (12.0, 24.0)];
    let counts = [10usize, 20, 30, 50, 70];
    let sides = [16usize, 16, 24, 40, 56];
    let fg = [0.75, 0.70, 0.66, 0.62, 0.60];
    let bg = [0.30, 0.28, 0.26, 0.28, 0.24];
    let noise = [0.10, 0.14, 0.18, 0.24, 0.30];
    (0..5)
        .map(|i| ClientDatasetSpec {
            client_id: i as u16,
            n_samples: counts[i],
            image_h: sides[i],
            image_w: sides[i],
            blob_radius: bands[i],
            blobs_per_image: (1, 3),
            fg_intensity: fg[i],
            bg_intensity: bg[i],
            noise_std: noise[i],
            seed: i as u64,
        })
        .collect()
}

/// Seven-client variant with sample counts echoing a 30-210 imbalance.
pub fn paper7_specs() -> Vec<ClientDatasetSpec> {
    let bands: [(f64, f64); 7] = [
        (2.0, 4.0),
        (2.0, 5.0),
        (3.0, 6.0),
        (5.0, 10.0),
        (6.0, 12.0),
        (8.0, 16.0),
        (12.0, 24.0),
    ];
    let counts = [30usize, 45, 60, 90, 120, 165, 210];
    let sides = [16usize, 16, 16, 24, 32, 40, 56];
    (0..7)
        .map(|i| ClientDatasetSpec {
            client_id: i as u16,
            n_samples: counts[i],
            image_h: sides[i],
            image_w: sides[i],
            blob_radius: bands[i],
            blobs_per_image: (1, 3),
            fg_intensity: 0.85 - 0.04 * i as f64,
            bg_intensity: 0.20 + 0.02 * i as f64,
            noise_std: 0.02 + 0.015 * i as f64,
            seed: i as u64,
        })
        .collect()
}
