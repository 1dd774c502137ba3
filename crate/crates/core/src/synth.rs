//! Seeded generator for synthetic fine-tuning deltas.
//!
//! Each layer's delta is a planted low-rank product (decaying spectrum
//! 8.0 * 0.8^i over unit factor vectors) plus a sparse set of outsized
//! spikes plus dense Gaussian noise, the structure the compressor is built
//! to exploit. Spikes run several times the typical low-rank entry but stay
//! small enough that the bulk of the energy remains low-rank; a spike-heavy
//! delta would be a job for plain top-s sparsification, not factorization.
//! Importance comes from a rank-1 lognormal gradient so that
//! importance-aware selection has real signal to work with. One ChaCha8
//! stream drawn in a fixed order makes every output a pure function of the
//! config.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matio::{DenseMatrix, Layer, LayerSet};
use crate::osd::{importance_from_gradient, ImportanceMap};

/// Leading planted singular value.
const SPECTRUM_BASE: f64 = 8.0;
/// Per-direction decay of the planted spectrum.
const SPECTRUM_DECAY: f64 = 0.8;
/// Minimum spike magnitude; roughly eight times the typical low-rank entry
/// at the default shape.
const SPIKE_FLOOR: f64 = 0.25;
/// Half-normal spread added on top of the spike floor.
const SPIKE_SPREAD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub layers: usize,
    pub rows: usize,
    pub cols: usize,
    pub true_rank: usize,
    /// Fraction of entries replaced by large sparse spikes.
    pub spike_frac: f64,
    /// Standard deviation of the dense Gaussian noise floor.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 1,
            rows: 256,
            cols: 256,
            true_rank: 8,
            spike_frac: 0.01,
            noise: 0.01,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::Argument(format!(
                "synthetic shape {}x{}x{} layers must be nonzero",
                self.layers, self.rows, self.cols
            )));
        }
        if self.true_rank == 0 || self.true_rank > self.rows.min(self.cols) {
            return Err(Error::Argument(format!(
                "true rank {} must be in 1..={} for {}x{} layers",
                self.true_rank,
                self.rows.min(self.cols),
                self.rows,
                self.cols
            )));
        }
        if !(0.0..=1.0).contains(&self.spike_frac) {
            return Err(Error::Argument(format!(
                "spike fraction {} must be within [0, 1]",
                self.spike_frac
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Argument(format!(
                "noise scale {} must be finite and nonnegative",
                self.noise
            )));
        }
        self.rows.checked_mul(self.cols).ok_or_else(|| {
            Error::Argument(format!("layer {}x{} overflows", self.rows, self.cols))
        })?;
        Ok(())
    }
}

/// Matched containers for one synthetic instance. `finetuned` equals
/// `pretrained + delta` rounded once, so a delta re-derived from the weight
/// containers differs from `delta` by at most one rounding step per entry.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub pretrained: LayerSet,
    pub finetuned: LayerSet,
    pub delta: LayerSet,
    pub gradient: LayerSet,
    pub importance: Vec<ImportanceMap>,
}

/// Generates all containers for `cfg`. Layer ids are `layer0`, `layer1`, ...
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, d) = (cfg.rows, cfg.cols);
    let mut pretrained = Vec::with_capacity(cfg.layers);
    let mut finetuned = Vec::with_capacity(cfg.layers);
    let mut delta = Vec::with_capacity(cfg.layers);
    let mut gradient = Vec::with_capacity(cfg.layers);
    let mut importance = Vec::with_capacity(cfg.layers);
    for idx in 0..cfg.layers {
        let id = format!("layer{idx}");
        let wp: Vec<f32> = (0..n * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();

        let mut acc = vec![0.0f64; n * d];
        for i in 0..cfg.true_rank {
            let x = unit_vector(&mut rng, n);
            let y = unit_vector(&mut rng, d);
            let sigma = SPECTRUM_BASE * SPECTRUM_DECAY.powi(i as i32);
            for (row, &xv) in x.iter().enumerate() {
                let scale = sigma * xv;
                for (col, &yv) in y.iter().enumerate() {
                    acc[row * d + col] += scale * yv;
                }
            }
        }
        let spike_count = (cfg.spike_frac * (n * d) as f64).floor() as usize;
        if spike_count > 0 {
            for flat in sample(&mut rng, n * d, spike_count) {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let mag: f64 =
                    SPIKE_FLOOR + SPIKE_SPREAD * rng.sample::<f64, _>(StandardNormal).abs();
                acc[flat] = sign * mag;
            }
        }
        if cfg.noise > 0.0 {
            for v in &mut acc {
                *v += cfg.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let dv: Vec<f32> = acc.iter().map(|&v| v as f32).collect();

        let grad: Vec<f32> = {
            let row_profile: Vec<f64> = (0..n)
                .map(|_| (0.5 * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect();
            let col_profile: Vec<f64> = (0..d)
                .map(|_| (0.5 * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect();
            let mut g = Vec::with_capacity(n * d);
            for &rp in &row_profile {
                for &cp in &col_profile {
                    g.push((rp * cp) as f32);
                }
            }
            g
        };

        let wf: Vec<f32> = wp
            .iter()
            .zip(&dv)
            .map(|(&w, &dl)| (w as f64 + dl as f64) as f32)
            .collect();
        let wp_m = DenseMatrix::new(n, d, wp)?;
        let wf_m = DenseMatrix::new(n, d, wf)?;
        let grad_m = DenseMatrix::new(n, d, grad)?;
        // Importance pairs the gradient with the fine-tuned weights, the
        // point the loss is evaluated at.
        importance.push(importance_from_gradient(&grad_m, &wf_m)?);
        pretrained.push(Layer { id: id.clone(), matrix: wp_m });
        finetuned.push(Layer { id: id.clone(), matrix: wf_m });
        delta.push(Layer {
            id: id.clone(),
            matrix: DenseMatrix::new(n, d, dv)?,
        });
        gradient.push(Layer { id, matrix: grad_m });
    }
    Ok(SynthOutput {
        pretrained: LayerSet::new(pretrained)?,
        finetuned: LayerSet::new(finetuned)?,
        delta: LayerSet::new(delta)?,
        gradient: LayerSet::new(gradient)?,
        importance,
    })
}

fn unit_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // A zero draw of every coordinate has probability zero; guard anyway.
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}
