//! Synthetic stand-in for labelled tissue blocks.
//!
//! Each block's ground-truth mask is a smoothed random field thresholded so a
//! prescribed fraction of pixels is positive. The image renders the mask as a
//! colour shift plus a fine texture, buried under illumination drift and pixel
//! noise. A surrogate classifier turns the true fraction into a binned
//! low-resolution label.

mod labels;
mod store;
mod table;

pub use labels::{simulate_low_res_label, simulate_low_res_label_max, BinScheme, LabelerConfig};
pub use store::{load_dataset, save_dataset, MANIFEST_FILE, RECORDS_FILE};
pub use table::{
    annotation_sample, build_table_mask_estimation, build_table_visual_approx, AnnotationPlan,
    AnnotatorNoise, CountDistributionTable, Provenance, TableRow,
};

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LsrError, Result};
use crate::seed;

const STREAM_LABEL: u64 = 0x4c41_4245_4c00_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub block_side: usize,
    pub channels: usize,
    /// Gaussian smoothing (pixels) of the field that shapes the mask.
    pub blob_sigma: f64,
    /// Target fractions are drawn from Beta(a, b).
    pub fraction_beta_a: f64,
    pub fraction_beta_b: f64,
    /// Per-channel intensity shift between negative and positive pixels.
    pub class_contrast: f64,
    /// Amplitude of the fine texture present only on positive pixels.
    pub texture_amplitude: f64,
    /// Amplitude of the smooth, class-independent illumination drift.
    pub illumination_amplitude: f64,
    pub pixel_noise: f64,
    pub labeler: LabelerConfig,
    pub bins: BinScheme,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            block_side: 32,
            channels: 3,
            blob_sigma: 3.0,
            fraction_beta_a: 1.0,
            fraction_beta_b: 1.6,
            class_contrast: 0.18,
            texture_amplitude: 0.12,
            illumination_amplitude: 0.1,
            pixel_noise: 0.12,
            labeler: LabelerConfig::default(),
            bins: BinScheme::default(),
            n_train: 2000,
            n_val: 200,
            n_test: 400,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_side < 2 {
            return Err(LsrError::config("block_side", "must be at least 2"));
        }
        if self.channels == 0 {
            return Err(LsrError::config("channels", "must be at least 1"));
        }
        if !(self.blob_sigma > 0.0 && self.blob_sigma.is_finite()) {
            return Err(LsrError::config("blob_sigma", "must be positive"));
        }
        for (field, v) in [
            ("fraction_beta_a", self.fraction_beta_a),
            ("fraction_beta_b", self.fraction_beta_b),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LsrError::config(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("class_contrast", self.class_contrast),
            ("texture_amplitude", self.texture_amplitude),
            ("illumination_amplitude", self.illumination_amplitude),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LsrError::config(field, "must be non-negative"));
            }
        }
        self.labeler.validate()?;
        self.bins.validate()?;
        Ok(())
    }

    pub fn fraction_distribution(&self) -> Result<Beta<f64>> {
        Beta::new(self.fraction_beta_a, self.fraction_beta_b)
            .map_err(|e| LsrError::config("fraction_beta", e.to_string()))
    }
}

/// A rendered block before it receives a low-resolution label.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedBlock {
    pub seed: u64,
    pub side: usize,
    pub channels: usize,
    /// Channel-planar `(C, H, W)` values, each a multiple of 1/255 in [0, 1].
    pub image: Vec<f64>,
    /// Row-major `(H, W)` mask, 1 for the positive class.
    pub gt_mask: Vec<u8>,
    pub true_fraction: f64,
    /// Fractions of the four quadrants, row-major.
    pub quadrant_fractions: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBlock {
    pub block_id: u32,
    pub split: Split,
    pub block: GeneratedBlock,
    pub low_res_label: usize,
}

impl DatasetBlock {
    pub fn true_fraction(&self) -> f64 {
        self.block.true_fraction
    }

    pub fn side(&self) -> usize {
        self.block.side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub blocks: Vec<DatasetBlock>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&DatasetBlock> {
        self.blocks.iter().filter(|b| b.split == split).collect()
    }

    /// Blocks per low-resolution bin across the whole dataset.
    pub fn bin_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.config.bins.len()];
        for b in &self.blocks {
            counts[b.low_res_label] += 1;
        }
        counts
    }
}

/// Sets pixels whose field value is `>= threshold` to 1.
pub fn mask_from_field(field: &[f64], threshold: f64) -> Vec<u8> {
    field.iter().map(|&v| (v >= threshold) as u8).collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// White noise on a padded canvas, blurred separably, cropped to `side x side`
/// and standardised to zero mean and unit variance.
fn smooth_field<R: Rng>(rng: &mut R, side: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let padded = side + 2 * radius;
    let noise: Vec<f64> = (0..padded * padded).map(|_| rng.sample(StandardNormal)).collect();
    let mut rows = vec![0.0; padded * side];
    for y in 0..padded {
        for x in 0..side {
            rows[y * side + x] = kernel.iter().enumerate().map(|(k, w)| w * noise[y * padded + x + k]).sum();
        }
    }
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = kernel.iter().enumerate().map(|(k, w)| w * rows[(y + k) * side + x]).sum();
        }
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let sd = (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    out
}

/// Threshold hitting exactly `k` positives under `>=` (absent ties).
fn threshold_for_count(field: &[f64], k: usize) -> f64 {
    if k == 0 {
        return f64::INFINITY;
    }
    let mut sorted = field.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[k - 1]
}

pub fn generate_block(seed: u64, cfg: &GeneratorConfig) -> Result<GeneratedBlock> {
    cfg.validate()?;
    let mut rng = seed::rng(seed);
    let target = cfg.fraction_distribution()?.sample(&mut rng);
    let pixels = cfg.block_side * cfg.block_side;
    let field = smooth_field(&mut rng, cfg.block_side, cfg.blob_sigma);
    let k = ((target * pixels as f64).round() as usize).min(pixels);
    render_block(&mut rng, seed, cfg, &field, threshold_for_count(&field, k))
}

/// Like [`generate_block`] but with an explicit mask threshold on the
/// standardised shape field instead of a sampled target fraction.
pub fn generate_block_with_threshold(seed: u64, cfg: &GeneratorConfig, threshold: f64) -> Result<GeneratedBlock> {
    cfg.validate()?;
    let mut rng = seed::rng(seed);
    let _ = cfg.fraction_distribution()?.sample(&mut rng);
    let field = smooth_field(&mut rng, cfg.block_side, cfg.blob_sigma);
    render_block(&mut rng, seed, cfg, &field, threshold)
}

fn render_block<R: Rng>(
    rng: &mut R,
    seed: u64,
    cfg: &GeneratorConfig,
    field: &[f64],
    threshold: f64,
) -> Result<GeneratedBlock> {
    let side = cfg.block_side;
    let pixels = side * side;
    let mask = mask_from_field(field, threshold);
    let texture = smooth_field(rng, side, 0.7);
    let illumination = smooth_field(rng, side, (side as f64 / 4.0).max(1.0));

    // Channel 0 brightens on positives, channel 1 darkens, further channels
    // carry only the texture; every channel sees drift and noise.
    let mut image = Vec::with_capacity(cfg.channels * pixels);
    for c in 0..cfg.channels {
        let shift = match c {
            0 => cfg.class_contrast,
            1 => -cfg.class_contrast,
            _ => 0.0,
        };
        for i in 0..pixels {
            let m = mask[i] as f64;
            let noise: f64 = rng.sample(StandardNormal);
            let v = 0.5
                + shift * (m - 0.5)
                + cfg.texture_amplitude * m * texture[i]
                + cfg.illumination_amplitude * illumination[i]
                + cfg.pixel_noise * noise;
            image.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
    }

    let positives = mask.iter().filter(|&&m| m == 1).count();
    let quadrant_fractions = quadrant_fractions(&mask, side);

    Ok(GeneratedBlock {
        seed,
        side,
        channels: cfg.channels,
        image,
        gt_mask: mask,
        true_fraction: positives as f64 / pixels as f64,
        quadrant_fractions,
    })
}

/// Positive fractions of the four quadrants, row-major.
fn quadrant_fractions(mask: &[u8], side: usize) -> [f64; 4] {
    let half = side / 2;
    let mut out = [0.0; 4];
    for (q, frac) in out.iter_mut().enumerate() {
        let (y0, x0) = ((q / 2) * half, (q % 2) * half);
        let h = if q / 2 == 0 { half } else { side - half };
        let w = if q % 2 == 0 { half } else { side - half };
        let count: usize = (y0..y0 + h)
            .map(|y| (x0..x0 + w).filter(|&x| mask[y * side + x] == 1).count())
            .sum();
        *frac = count as f64 / (h * w).max(1) as f64;
    }
    out
}

/// Seed of block `block_id` within a dataset generated from `dataset_seed`.
pub fn block_seed(dataset_seed: u64, block_id: u32) -> u64 {
    seed::derive(dataset_seed, block_id as u64)
}

pub fn label_block(block: &GeneratedBlock, cfg: &GeneratorConfig) -> usize {
    let label_seed = seed::derive(block.seed, STREAM_LABEL);
    if cfg.labeler.max_of_quadrants {
        simulate_low_res_label_max(&block.quadrant_fractions, &cfg.bins, &cfg.labeler, label_seed)
    } else {
        simulate_low_res_label(block.true_fraction, &cfg.bins, &cfg.labeler, label_seed)
    }
}

/// Generates train, validation and test splits, in that block-id order.
pub fn generate_dataset(cfg: &GeneratorConfig, dataset_seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    let mut blocks = Vec::with_capacity(total);
    for id in 0..total as u32 {
        let split = if (id as usize) < cfg.n_train {
            Split::Train
        } else if (id as usize) < cfg.n_train + cfg.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let block = generate_block(block_seed(dataset_seed, id), cfg)?;
        let low_res_label = label_block(&block, cfg);
        blocks.push(DatasetBlock {
            block_id: id,
            split,
            block,
            low_res_label,
        });
    }
    Ok(Dataset {
        config: cfg.clone(),
        seed: dataset_seed,
        blocks,
    })
}
