//! Attended-pair accounting and the analytic FLOPs model.
//!
//! Sparsity is `1 - attended / N^2`, where `attended` counts distinct
//! (query, key) pairs touched by any stream. Per-stream pair counts are also
//! reported so MoGA-only sparsity can be read off separately.
//!
//! FLOPs are split into an attention term, `4 * pairs * d_model * layers`
//! (score and value products, one multiply-accumulate = 2 FLOPs), and a dense
//! per-token term for the projections and feed-forward layers of the
//! surrounding transformer block. A single scale `kappa` is fit once on a
//! reference measurement and then held fixed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{latent_dims_for_duration, latent_frames_for_duration, LatentGrid, ShotMap};
use crate::routing::RoutingResult;
use crate::stga::{kv_frames, near_equal_split, StaticGroupSpec, StaticGroups};
use crate::tensor::Real;

/// Largest sequence for which the N×N mask is materialized.
pub const DEFAULT_EXACT_BOUND: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_tokens: usize,
    pub pairs_full: u64,
    pub pairs_moga: u64,
    pub pairs_window_shot: u64,
    pub pairs_per_frame: u64,
    pub pairs_static: u64,
    pub pairs_union: u64,
    pub sparsity: f64,
    pub sparsity_moga: f64,
    /// Variant name → FLOPs; filled by [`CostReport::with_flops`].
    pub flops: BTreeMap<String, f64>,
}

impl CostReport {
    pub fn with_flops(mut self, model: &FlopsModel) -> Self {
        let variants = [
            ("full", self.pairs_full),
            ("moga", self.pairs_moga),
            ("static", self.pairs_static),
            ("moga_stga", self.pairs_moga + self.pairs_static),
        ];
        for (name, pairs) in variants {
            self.flops.insert(name.to_string(), model.attention(pairs));
        }
        self
    }

    /// `(variant, pairs, sparsity, flops)` rows for CSV export.
    pub fn rows(&self) -> Vec<(String, u64, f64, Option<f64>)> {
        let sparsity = |p: u64| 1.0 - p as f64 / self.pairs_full.max(1) as f64;
        let flops = |k: &str| self.flops.get(k).copied();
        vec![
            ("full".into(), self.pairs_full, 0.0, flops("full")),
            ("moga".into(), self.pairs_moga, self.sparsity_moga, flops("moga")),
            ("window_shot".into(), self.pairs_window_shot, sparsity(self.pairs_window_shot), None),
            ("per_frame".into(), self.pairs_per_frame, sparsity(self.pairs_per_frame), None),
            ("static".into(), self.pairs_static, sparsity(self.pairs_static), flops("static")),
            ("union".into(), self.pairs_union, self.sparsity, flops("moga_stga")),
        ]
    }
}

struct PairMask {
    n: usize,
    bits: Vec<u64>,
}

impl PairMask {
    fn new(n: usize) -> Self {
        Self { n, bits: vec![0; (n * n).div_ceil(64)] }
    }

    #[inline]
    fn set(&mut self, q: usize, k: usize) {
        let i = q * self.n + k;
        self.bits[i / 64] |= 1 << (i % 64);
    }

    fn count(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }
}

/// Exact pair accounting by materializing the attended mask.
pub fn count_pairs_exact<T: Real>(
    routing: Option<&RoutingResult<T>>,
    groups: &StaticGroups,
    n: usize,
    bound: usize,
) -> Result<CostReport> {
    if n > bound {
        return Err(Error::TooLarge { n, bound });
    }
    let mut mask = PairMask::new(n);
    let mut pairs_moga = 0;
    if let Some(routing) = routing {
        if routing.len() != n {
            return Err(Error::Shape(format!("routing covers {} tokens, expected {n}", routing.len())));
        }
        let mut members = vec![Vec::new(); routing.n_groups()];
        for (t, &g) in routing.assignment().iter().enumerate() {
            members[g].push(t);
        }
        for m in &members {
            pairs_moga += (m.len() as u64).pow(2);
            for &q in m {
                for &k in m {
                    mask.set(q, k);
                }
            }
        }
    }
    let mut stream_pairs = [0u64; 2];
    for (slot, stream) in [&groups.window_shot, &groups.per_frame].into_iter().enumerate() {
        for g in stream {
            if g.query_tokens.iter().chain(&g.kv_tokens).any(|&t| t >= n) {
                return Err(Error::Coverage(format!("static group references a token outside [0, {n})")));
            }
            stream_pairs[slot] += g.pair_count();
            for &q in &g.query_tokens {
                for &k in &g.kv_tokens {
                    mask.set(q, k);
                }
            }
        }
    }
    let pairs_full = (n as u64).pow(2);
    let pairs_union = mask.count();
    let frac = |p: u64| if pairs_full == 0 { 0.0 } else { 1.0 - p as f64 / pairs_full as f64 };
    Ok(CostReport {
        n_tokens: n,
        pairs_full,
        pairs_moga,
        pairs_window_shot: stream_pairs[0],
        pairs_per_frame: stream_pairs[1],
        pairs_static: stream_pairs[0] + stream_pairs[1],
        pairs_union,
        sparsity: frac(pairs_union),
        sparsity_moga: frac(pairs_moga),
        flops: BTreeMap::new(),
    })
}

/// `sum_i n_i^2` for `n` tokens split as evenly as possible over `m` groups.
pub fn uniform_group_pairs(n: usize, m: usize) -> u64 {
    near_equal_split(n, m.max(1)).iter().map(|r| (r.len() as u64).pow(2)).sum()
}

/// Pair counts of the window-shot and per-frame streams, without building groups.
pub fn static_pairs_analytic(grid: &LatentGrid, spec: &StaticGroupSpec) -> Result<(u64, u64)> {
    grid.validate()?;
    spec.validate(grid)?;
    let sq = |parts: Vec<std::ops::Range<usize>>| -> u64 { parts.iter().map(|r| (r.len() as u64).pow(2)).sum() };
    // sum over windows of (window area)^2 factorizes over rows and columns
    let window_sq = sq(near_equal_split(grid.h, spec.spatial_grid.0)) * sq(near_equal_split(grid.w, spec.spatial_grid.1));
    let shots = grid.shots.shot_ranges(grid.t);
    let frame_products: u64 = (0..shots.len())
        .map(|s| shots[s].len() as u64 * kv_frames(&shots, s, spec.boundary_augment).len() as u64)
        .sum();
    let per_frame = if spec.per_frame { grid.t as u64 * (grid.frame_tokens() as u64).pow(2) } else { 0 };
    Ok((window_sq * frame_products, per_frame))
}

/// Transformer block dimensions used by the dense FLOPs term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Text tokens attended by each block's cross-attention.
    pub text_tokens: usize,
}

impl ModelShape {
    /// Estimated Wan2.1-1.3B shape (width 1536, 30 blocks, FFN 8960, 512 text tokens).
    pub const WAN_1_3B: Self = Self { d_model: 1536, layers: 30, ffn_dim: 8960, text_tokens: 512 };

    /// Forward FLOPs per token per layer outside self-attention scores:
    /// QKVO projections, cross-attention Q/O projections and scores over the
    /// text tokens, and the two FFN matmuls.
    pub fn dense_flops_per_token(&self) -> f64 {
        let d = self.d_model as f64;
        let self_proj = 4.0 * d * d;
        let cross_proj = 2.0 * d * d;
        let ffn = 2.0 * d * self.ffn_dim as f64;
        2.0 * (self_proj + cross_proj + ffn) + 4.0 * self.text_tokens as f64 * d
    }
}

impl Default for ModelShape {
    fn default() -> Self {
        Self::WAN_1_3B
    }
}

/// `kappa * 4 * pairs * d_model * layers`.
pub fn attention_flops(pairs: u64, d_model: usize, layers: usize, kappa: f64) -> f64 {
    kappa * 4.0 * pairs as f64 * d_model as f64 * layers as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsModel {
    pub shape: ModelShape,
    pub kappa: f64,
}

impl FlopsModel {
    pub fn attention(&self, pairs: u64) -> f64 {
        attention_flops(pairs, self.shape.d_model, self.shape.layers, self.kappa)
    }

    pub fn dense(&self, n_tokens: usize) -> f64 {
        self.kappa * self.shape.dense_flops_per_token() * n_tokens as f64 * self.shape.layers as f64
    }

    /// Router scoring cost: one `d_model x M` projection per token per layer.
    pub fn router(&self, n_tokens: usize, n_groups: usize) -> f64 {
        self.kappa * 2.0 * self.shape.d_model as f64 * n_groups as f64 * n_tokens as f64 * self.shape.layers as f64
    }

    /// Full-attention forward FLOPs of one sequence.
    pub fn full_model(&self, n_tokens: usize) -> f64 {
        self.attention((n_tokens as u64).pow(2)) + self.dense(n_tokens)
    }

    /// `kappa` such that `full_model(n_tokens) == target_flops`.
    pub fn calibrate(shape: ModelShape, n_tokens: usize, target_flops: f64) -> Self {
        let unit = Self { shape, kappa: 1.0 };
        Self { shape, kappa: target_flops / unit.full_model(n_tokens) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsCurveConfig {
    pub shape: ModelShape,
    pub kappa: f64,
    pub fps: f64,
    pub pixel_h: usize,
    pub pixel_w: usize,
    pub statics: StaticGroupSpec,
    /// Length of each shot; `None` means one shot per video.
    pub shot_seconds: Option<f64>,
}

impl Default for FlopsCurveConfig {
    fn default() -> Self {
        Self {
            shape: ModelShape::WAN_1_3B,
            kappa: 1.0,
            fps: 16.0,
            pixel_h: 480,
            pixel_w: 832,
            statics: StaticGroupSpec::default(),
            shot_seconds: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsRow {
    pub duration_s: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub variant: &'static str,
    pub pairs: u64,
    pub pflops: f64,
}

/// Analytic compute table. Variants per duration: `full` and `full_attn`
/// (M = 1); per M: `moga_attn` (attention over uniform groups only), `moga`
/// (plus dense and router terms) and `moga_stga` (plus both static streams).
pub fn flops_curve(cfg: &FlopsCurveConfig, durations: &[f64], m_values: &[usize]) -> Result<Vec<FlopsRow>> {
    let model = FlopsModel { shape: cfg.shape, kappa: cfg.kappa };
    let mut rows = Vec::new();
    for &secs in durations {
        let (t, h, w) = latent_dims_for_duration(secs, cfg.fps, cfg.pixel_h, cfg.pixel_w)?;
        let n = t * h * w;
        let shots = match cfg.shot_seconds {
            Some(s) => ShotMap::uniform(t, latent_frames_for_duration(s, cfg.fps)?)?,
            None => ShotMap::single(),
        };
        let grid = LatentGrid::new(t, h, w, cfg.shape.d_model, shots)?;
        let (ws, pf) = static_pairs_analytic(&grid, &cfg.statics)?;
        let full_pairs = (n as u64).pow(2);
        let pf_of = |f: f64| f / 1e15;
        rows.push(FlopsRow { duration_s: secs, m: 1, variant: "full", pairs: full_pairs, pflops: pf_of(model.full_model(n)) });
        rows.push(FlopsRow { duration_s: secs, m: 1, variant: "full_attn", pairs: full_pairs, pflops: pf_of(model.attention(full_pairs)) });
        for &m in m_values {
            let moga = uniform_group_pairs(n, m);
            let base = model.dense(n) + model.router(n, m);
            rows.push(FlopsRow { duration_s: secs, m, variant: "moga_attn", pairs: moga, pflops: pf_of(model.attention(moga)) });
            rows.push(FlopsRow { duration_s: secs, m, variant: "moga", pairs: moga, pflops: pf_of(model.attention(moga) + base) });
            let combined = moga + ws + pf;
            rows.push(FlopsRow { duration_s: secs, m, variant: "moga_stga", pairs: combined, pflops: pf_of(model.attention(combined) + base) });
        }
    }
    Ok(rows)
}
