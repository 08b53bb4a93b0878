use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{segment_grid, Instance, LimeConfig, LimeError, Mask, RgbImage, SegmentationSpec};

/// Masks for the instance at position 0. See [`sample_masks_stream`].
pub fn sample_masks(d: usize, config: &LimeConfig) -> Vec<Mask> {
    sample_masks_stream(d, config, 0)
}

/// `config.num_samples` masks: the all-ones anchor, then independent
/// Bernoulli(`on_probability`) bits. Each instance of a batch draws from its
/// own ChaCha stream so results do not depend on scheduling.
pub fn sample_masks_stream(d: usize, config: &LimeConfig, stream: u64) -> Vec<Mask> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut masks = Vec::with_capacity(config.num_samples);
    if config.num_samples == 0 {
        return masks;
    }
    masks.push(Mask::all_on(d));
    for _ in 1..config.num_samples {
        masks.push(Mask {
            bits: (0..d).map(|_| rng.random_bool(config.on_probability)).collect(),
        });
    }
    masks
}

/// Every mask over `d` bits, bit `j` of the counter driving segment `j`.
pub fn all_masks(d: usize) -> Vec<Mask> {
    assert!(d < 25, "exhaustive enumeration is for small d");
    (0..1u32 << d)
        .map(|m| Mask {
            bits: (0..d).map(|j| m >> j & 1 == 1).collect(),
        })
        .collect()
}

/// `exp(-D^2 / sigma^2)` with `D` the fraction of segments switched off.
pub fn kernel_weight(mask: &Mask, sigma: f64) -> f64 {
    let d = mask.len().max(1) as f64;
    let distance = 1.0 - mask.popcount() as f64 / d;
    (-(distance * distance) / (sigma * sigma)).exp()
}

pub fn perturb(
    instance: &Instance,
    mask: &Mask,
    seg: &SegmentationSpec,
) -> Result<Instance, LimeError> {
    if mask.len() != seg.segment_count() {
        return Err(LimeError::Instance(format!(
            "mask has {} bits but segmentation has {} segments",
            mask.len(),
            seg.segment_count()
        )));
    }
    match (instance, seg) {
        (Instance::Tabular(values), SegmentationSpec::Tabular { neutral_values }) => {
            if values.len() != neutral_values.len() {
                return Err(LimeError::Instance(format!(
                    "instance has {} features, segmentation expects {}",
                    values.len(),
                    neutral_values.len()
                )));
            }
            Ok(Instance::Tabular(
                values
                    .iter()
                    .zip(neutral_values)
                    .zip(&mask.bits)
                    .map(|((v, n), on)| if *on { *v } else { *n })
                    .collect(),
            ))
        }
        (
            Instance::Image(img),
            SegmentationSpec::ImageGrid {
                width,
                height,
                cell_w,
                cell_h,
                neutral_color,
            },
        ) => {
            if img.width != *width || img.height != *height {
                return Err(LimeError::Instance(format!(
                    "image is {}x{}, segmentation expects {}x{}",
                    img.width, img.height, width, height
                )));
            }
            let map = segment_grid(*width, *height, *cell_w, *cell_h)?;
            let mut pixels = img.pixels.clone();
            for (i, &segment) in map.ids().iter().enumerate() {
                if !mask.bits[segment as usize] {
                    pixels[i * 3..i * 3 + 3].copy_from_slice(neutral_color);
                }
            }
            Ok(Instance::Image(RgbImage::new(*width, *height, pixels)?))
        }
        _ => Err(LimeError::Instance(
            "instance kind does not match segmentation kind".into(),
        )),
    }
}
