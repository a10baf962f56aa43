//! Segmentation samples: PNG dataset loading, geometric augmentation, a
//! procedural dataset, and deterministic batching.

mod augment;
mod loader;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::LabelMap;
use crate::network::Normalization;
use crate::tensor::Tensor;

pub use augment::{augment, hflip, AugmentConfig};
pub use loader::{
    default_palette, load_dataset, load_image, read_class_table, resize_bilinear, save_mask_png, save_rgb_png,
    ClassEntry, ClassTable,
};
pub use synth::{synth_shapes, SHAPE_KINDS};

/// One image with its class-index mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// File stem or generated identifier.
    pub name: String,
    /// `[1, 3, h, w]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, h, w]`.
    pub mask: LabelMap,
}

impl SegSample {
    pub fn new(name: impl Into<String>, image: Tensor<f32>, mask: LabelMap) -> Result<Self> {
        let [n, c, h, w] = image.shape();
        if n != 1 || c != 3 || mask.shape() != [1, h, w] {
            return Err(Error::shape(
                "sample",
                [1, 3, h, w],
                format!("image {:?}, mask {:?}", image.shape(), mask.shape()),
            ));
        }
        Ok(Self {
            name: name.into(),
            image,
            mask,
        })
    }

    pub fn hw(&self) -> [usize; 2] {
        [self.image.h(), self.image.w()]
    }
}

/// A stacked batch plus the sample indices it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SegBatch {
    pub indices: Vec<usize>,
    /// `[n, 3, h, w]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub masks: LabelMap,
}

impl SegBatch {
    pub fn from_samples(indices: Vec<usize>, samples: &[&SegSample]) -> Result<Self> {
        let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
        let masks: Vec<&LabelMap> = samples.iter().map(|s| &s.mask).collect();
        Ok(Self {
            indices,
            images: Tensor::stack(&images)?,
            masks: LabelMap::stack(&masks)?,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Mix a list of integers into one seed (splitmix64 finaliser per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// A generator seeded from `parts`, so each (seed, epoch, index) gets its own stream.
pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Partition `0..n` into batches of `batch_size` (the last may be shorter),
/// optionally shuffled by `seed`.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Iterate a sample list in batches.
pub fn batch_iter(
    samples: &[SegSample],
    batch_size: usize,
    shuffle: Option<u64>,
) -> Result<impl Iterator<Item = Result<SegBatch>> + '_> {
    let batches = batch_indices(samples.len(), batch_size, shuffle)?;
    Ok(batches.into_iter().map(move |idx| {
        let picked: Vec<&SegSample> = idx.iter().map(|&i| &samples[i]).collect();
        SegBatch::from_samples(idx, &picked)
    }))
}

/// Standardise `[n, 3, h, w]` images per channel.
pub fn normalize(images: &Tensor<f32>, norm: &Normalization) -> Tensor<f32> {
    let [n, c, h, w] = images.shape();
    let hw = h * w;
    let mut out = images.clone();
    for i in 0..n {
        for j in 0..c {
            let (m, s) = (norm.mean[j % 3], norm.std[j % 3]);
            for v in &mut out.data_mut()[(i * c + j) * hw..(i * c + j + 1) * hw] {
                *v = (*v - m) / s;
            }
        }
    }
    out
}

/// FNV-1a hash of a sample name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Split off a validation set of roughly `fraction` of the samples, chosen by
/// a hash of each name so membership does not depend on ordering.
pub fn split_holdout(samples: Vec<SegSample>, fraction: f64) -> (Vec<SegSample>, Vec<SegSample>) {
    let threshold = (fraction.clamp(0.0, 1.0) * 10_000.0).round() as u64;
    samples
        .into_iter()
        .partition(|s| name_hash(&s.name) % 10_000 >= threshold)
}
