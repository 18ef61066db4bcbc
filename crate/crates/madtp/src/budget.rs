//! Compute accounting for pruned forward passes and the epoch-level
//! temperature controller that steers measured cost toward a target
//! reduction ratio.
//!
//! Counting convention, recorded verbatim in every report header:
//! `flops=2*MAC; softmax/norm excluded`. Only the dominant matrix products
//! are counted: QKVO projections, the two attention products, and both FFN
//! matrices. Guidance-module overhead is excluded unless explicitly enabled.

use crate::error::{MadtpError, Result};
use crate::vlt::{InstanceTrace, VltConfig};
use serde::{Deserialize, Serialize};

/// The convention string echoed into report headers.
pub const FLOPS_CONVENTION: &str = "flops=2*MAC; softmax/norm excluded";

/// Per-block cost of one transformer block at token count `n` and width `d`:
/// `4nd^2 + 2n^2 d` for attention plus `2 * ffn_mult * n d^2` for the FFN.
pub fn block_flops(n: usize, d: usize, _heads: usize, ffn_mult: usize) -> f64 {
    attention_flops(n, d) + ffn_flops(n, d, ffn_mult)
}

fn attention_flops(n: usize, d: usize) -> f64 {
    let n = n as f64;
    let d = d as f64;
    4.0 * n * d * d + 2.0 * n * n * d
}

fn ffn_flops(n: usize, d: usize, ffn_mult: usize) -> f64 {
    2.0 * ffn_mult as f64 * n as f64 * (d * d) as f64
}

fn cross_flops(n_q: usize, n_ctx: usize, d: usize) -> f64 {
    let (n_q, n_ctx, d) = (n_q as f64, n_ctx as f64, d as f64);
    2.0 * n_q * d * d + 2.0 * n_ctx * d * d + 2.0 * n_q * n_ctx * d
}

/// Static description of the model's cost structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub d_vision: usize,
    pub d_language: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub layers: usize,
    pub cross_attention: bool,
    /// One-time embedding cost per pair.
    pub embed_flops: f64,
    /// One-time head cost per pair.
    pub head_flops: f64,
    /// Count the alignment-guidance projections and attention too.
    pub include_guidance_overhead: bool,
    pub learnable_count: usize,
    pub learnable_width: usize,
}

impl FlopsModel {
    pub fn from_config(config: &VltConfig) -> Self {
        let dv = config.d_vision as f64;
        let dl = config.d_language as f64;
        FlopsModel {
            d_vision: config.d_vision,
            d_language: config.d_language,
            heads: config.heads,
            ffn_mult: config.ffn_mult,
            layers: config.layers,
            cross_attention: config.cross_attention,
            embed_flops: config.patch_count as f64 * dv * dv + config.word_count as f64 * dl * dl,
            head_flops: (dv + dl) * 2.0,
            include_guidance_overhead: false,
            learnable_count: config.learnable_count,
            learnable_width: config.learnable_width,
        }
    }

    /// Removes the per-pair constants; block terms only.
    pub fn without_constants(mut self) -> Self {
        self.embed_flops = 0.0;
        self.head_flops = 0.0;
        self
    }

    fn guidance_overhead(&self, n: usize, d_in: usize) -> f64 {
        if !self.include_guidance_overhead {
            return 0.0;
        }
        let (n, d_in) = (n as f64, d_in as f64);
        let dk = self.learnable_width as f64;
        let k = self.learnable_count as f64;
        n * d_in * dk + 2.0 * k * n * dk
    }

    /// Cost of one pair's forward pass in GFLOPs, from the per-layer alive
    /// counts the pruning reports recorded. Attention runs on the tokens a
    /// layer receives; the FFN (and cross attention) run on what survives
    /// the prune step.
    pub fn model_flops(&self, trace: &InstanceTrace) -> Result<f64> {
        if trace.vision_layers.len() != self.layers || trace.language_layers.len() != self.layers
        {
            return Err(MadtpError::invalid(format!(
                "model_flops: trace covers {}/{} layers, model has {}",
                trace.vision_layers.len(),
                trace.language_layers.len(),
                self.layers
            )));
        }
        let mut total = self.embed_flops + self.head_flops;
        for layer in 0..self.layers {
            let v = &trace.vision_layers[layer];
            let l = &trace.language_layers[layer];
            total += attention_flops(v.alive_in, self.d_vision)
                + ffn_flops(v.alive_out, self.d_vision, self.ffn_mult)
                + self.guidance_overhead(v.alive_in, self.d_vision);
            total += attention_flops(l.alive_in, self.d_language)
                + ffn_flops(l.alive_out, self.d_language, self.ffn_mult)
                + self.guidance_overhead(l.alive_in, self.d_language);
            if self.cross_attention {
                total += cross_flops(l.alive_out, v.alive_out, self.d_language);
            }
        }
        Ok(total / 1e9)
    }

    /// Closed-form cost with no pruning anywhere, in GFLOPs.
    pub fn baseline_gflops(&self, patch_count: usize, word_count: usize) -> f64 {
        let nv = patch_count + 1;
        let nl = word_count + 1;
        let mut total = self.embed_flops + self.head_flops;
        for _ in 0..self.layers {
            total += block_flops(nv, self.d_vision, self.heads, self.ffn_mult)
                + self.guidance_overhead(nv, self.d_vision);
            total += block_flops(nl, self.d_language, self.heads, self.ffn_mult)
                + self.guidance_overhead(nl, self.d_language);
            if self.cross_attention {
                total += cross_flops(nl, nv, self.d_language);
            }
        }
        total / 1e9
    }
}

/// Arithmetic mean over per-pair costs.
pub fn dataset_average_flops(per_pair: &[f64]) -> Result<f64> {
    if per_pair.is_empty() {
        return Err(MadtpError::invalid("dataset_average_flops: empty input"));
    }
    Ok(per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

/// Controller state: target band, temperature, and the adjustment history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetState {
    pub target_reduce_ratio: f64,
    pub baseline_gflops: f64,
    pub target_gflops: f64,
    pub temperature: f64,
    /// Exponent damping the multiplicative update.
    pub gain: f64,
    pub temperature_min: f64,
    pub temperature_max: f64,
    /// `(iteration, measured GFLOPs, temperature after update)`.
    pub history: Vec<(usize, f64, f64)>,
}

impl BudgetState {
    pub fn new(target_reduce_ratio: f64, baseline_gflops: f64, temperature: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&target_reduce_ratio) {
            return Err(MadtpError::invalid("budget: reduce ratio must be in [0, 1)"));
        }
        if baseline_gflops <= 0.0 {
            return Err(MadtpError::invalid("budget: baseline must be positive"));
        }
        let target_gflops = (1.0 - target_reduce_ratio) * baseline_gflops;
        Ok(BudgetState {
            target_reduce_ratio,
            baseline_gflops,
            target_gflops,
            temperature,
            gain: 0.5,
            temperature_min: 1e-3,
            temperature_max: 1e3,
            history: Vec::new(),
        })
    }

    /// Multiplicative update: `T <- clamp(T * (measured / target)^gain)`.
    /// Costs above the target raise the temperature (prune harder); costs
    /// below it lower the temperature.
    pub fn adjust_temperature(&mut self, measured_gflops: f64) -> Result<f64> {
        if measured_gflops <= 0.0 || !measured_gflops.is_finite() {
            return Err(MadtpError::invalid("adjust_temperature: measured must be positive"));
        }
        let factor = (measured_gflops / self.target_gflops).powf(self.gain);
        self.temperature =
            (self.temperature * factor).clamp(self.temperature_min, self.temperature_max);
        let iteration = self.history.len();
        self.history.push((iteration, measured_gflops, self.temperature));
        Ok(self.temperature)
    }

    /// Relative distance of the last measurement from the target.
    pub fn relative_error(&self, measured_gflops: f64) -> f64 {
        (measured_gflops - self.target_gflops).abs() / self.target_gflops
    }
}
