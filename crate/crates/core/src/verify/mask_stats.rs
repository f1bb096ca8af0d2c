//! Empirical drop fraction and block-shape histogram of sampled masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::disout::{component_sizes, sample_block_mask, sample_element_mask, MaskKind};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskStatsOptions {
    pub p: f64,
    pub kind: MaskKind,
    pub block_size: usize,
    /// Side of the square feature maps.
    pub map_size: usize,
    /// Total mask elements to draw.
    pub samples: usize,
    pub seed: u64,
}

impl Default for MaskStatsOptions {
    fn default() -> Self {
        MaskStatsOptions {
            p: 0.1,
            kind: MaskKind::Element,
            block_size: 3,
            map_size: 16,
            samples: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskStatsReport {
    pub options: MaskStatsOptions,
    /// Elements actually drawn (whole maps).
    pub elements: usize,
    pub drop_fraction: f64,
    /// Binomial standard deviation of the fraction at the target `p`.
    pub sigma: f64,
    /// `(fraction − p) / sigma`; 0 when `sigma` is 0.
    pub z: f64,
    /// Element-mask fraction from the same seed and shape, for block masks.
    pub element_fraction: Option<f64>,
    /// `(component size, count)` of 4-connected masked regions, ascending.
    pub histogram: Vec<(usize, usize)>,
}

impl MaskStatsReport {
    /// Element masks must fall within 4σ of `p`; block masks always pass.
    pub fn passed(&self) -> bool {
        match self.options.kind {
            MaskKind::Element => self.z.abs() <= 4.0,
            MaskKind::Block => true,
        }
    }
}

fn draw(opts: &MaskStatsOptions, kind: MaskKind, maps: usize) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shape = [maps, 1, opts.map_size, opts.map_size];
    match kind {
        MaskKind::Element => sample_element_mask(&shape, opts.p, &mut rng),
        MaskKind::Block => sample_block_mask(&shape, opts.p, opts.block_size, &mut rng),
    }
}

pub fn mask_stats(opts: &MaskStatsOptions) -> Result<MaskStatsReport> {
    if opts.map_size == 0 || opts.samples == 0 {
        return Err(config_err!("mask-stats needs a positive map size and sample count"));
    }
    let area = opts.map_size * opts.map_size;
    let maps = opts.samples.div_ceil(area);
    let elements = maps * area;
    let mask = draw(opts, opts.kind, maps)?;
    let drop_fraction = mask.sum() / elements as f64;
    let sigma = (opts.p * (1.0 - opts.p) / elements as f64).sqrt();
    let z = if sigma > 0.0 { (drop_fraction - opts.p) / sigma } else { 0.0 };
    let element_fraction = match opts.kind {
        MaskKind::Block => Some(draw(opts, MaskKind::Element, maps)?.sum() / elements as f64),
        MaskKind::Element => None,
    };
    let mut sizes = component_sizes(&mask)?;
    sizes.sort_unstable();
    let mut histogram: Vec<(usize, usize)> = Vec::new();
    for s in sizes {
        match histogram.last_mut() {
            Some((size, count)) if *size == s => *count += 1,
            _ => histogram.push((s, 1)),
        }
    }
    Ok(MaskStatsReport {
        options: opts.clone(),
        elements,
        drop_fraction,
        sigma,
        z,
        element_fraction,
        histogram,
    })
}
