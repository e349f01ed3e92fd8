//! Static spatial-temporal group attention.
//!
//! Two static streams: window × shot groups (keys/values augmented with up to
//! `boundary_augment` latent frames from each adjacent shot, queries never
//! augmented) and per-frame groups. Both are combined with the MoGA stream by
//! an unweighted mean.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grouped::{attend_block, moga_attention, softmax_scale, AttentionHeads};
use crate::latent::LatentGrid;
use crate::routing::RoutingResult;
use crate::tensor::{Matrix, Real};

fn default_augment() -> usize {
    2
}

fn default_per_frame() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticGroupSpec {
    /// Window counts along (rows, cols).
    pub spatial_grid: (usize, usize),
    #[serde(default = "default_per_frame")]
    pub per_frame: bool,
    #[serde(default = "default_augment")]
    pub boundary_augment: usize,
}

impl Default for StaticGroupSpec {
    fn default() -> Self {
        Self { spatial_grid: (2, 2), per_frame: true, boundary_augment: 2 }
    }
}

impl StaticGroupSpec {
    pub fn validate(&self, grid: &LatentGrid) -> Result<()> {
        let (gh, gw) = self.spatial_grid;
        if gh == 0 || gw == 0 {
            return Err(shape_err("spatial_grid entries must be >= 1"));
        }
        if gh > grid.h {
            return Err(shape_err(format!("spatial_grid rows {gh} > latent h {}", grid.h)));
        }
        if gw > grid.w {
            return Err(shape_err(format!("spatial_grid cols {gw} > latent w {}", grid.w)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticGroup {
    pub query_tokens: Vec<usize>,
    /// Ascending; a superset of `query_tokens`.
    pub kv_tokens: Vec<usize>,
}

impl StaticGroup {
    pub fn pair_count(&self) -> u64 {
        self.query_tokens.len() as u64 * self.kv_tokens.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StaticGroups {
    pub window_shot: Vec<StaticGroup>,
    /// Empty when the per-frame stream is disabled.
    pub per_frame: Vec<StaticGroup>,
}

impl StaticGroups {
    /// Non-empty streams, window-shot first.
    pub fn streams(&self) -> Vec<&[StaticGroup]> {
        [&self.window_shot[..], &self.per_frame[..]]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect()
    }

    pub fn all(&self) -> impl Iterator<Item = &StaticGroup> {
        self.window_shot.iter().chain(&self.per_frame)
    }
}

/// Splits `len` into `parts` contiguous ranges; the first `len % parts`
/// ranges get one extra element.
pub fn near_equal_split(len: usize, parts: usize) -> Vec<Range<usize>> {
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

fn window_tokens(grid: &LatentGrid, frames: Range<usize>, rows: &Range<usize>, cols: &Range<usize>) -> Vec<usize> {
    let mut out = Vec::with_capacity(frames.len() * rows.len() * cols.len());
    for f in frames {
        for r in rows.clone() {
            let base = f * grid.frame_tokens() + r * grid.w;
            out.extend(cols.clone().map(|c| base + c));
        }
    }
    out
}

/// Latent frames whose tokens a shot's groups attend to as keys/values.
pub fn kv_frames(shots: &[Range<usize>], shot: usize, augment: usize) -> Range<usize> {
    let own = &shots[shot];
    let before = if shot > 0 { augment.min(shots[shot - 1].len()) } else { 0 };
    let after = shots.get(shot + 1).map_or(0, |s| augment.min(s.len()));
    own.start - before..own.end + after
}

pub fn build_static_groups(grid: &LatentGrid, spec: &StaticGroupSpec) -> Result<StaticGroups> {
    grid.validate()?;
    spec.validate(grid)?;
    let rows = near_equal_split(grid.h, spec.spatial_grid.0);
    let cols = near_equal_split(grid.w, spec.spatial_grid.1);
    let shots = grid.shots.shot_ranges(grid.t);
    let mut window_shot = Vec::with_capacity(rows.len() * cols.len() * shots.len());
    for (s, frames) in shots.iter().enumerate() {
        let kv = kv_frames(&shots, s, spec.boundary_augment);
        for r in &rows {
            for c in &cols {
                window_shot.push(StaticGroup {
                    query_tokens: window_tokens(grid, frames.clone(), r, c),
                    kv_tokens: window_tokens(grid, kv.clone(), r, c),
                });
            }
        }
    }
    let per_frame = if spec.per_frame {
        (0..grid.t)
            .map(|f| {
                let tokens: Vec<usize> = grid.frame_range(f).collect();
                StaticGroup { query_tokens: tokens.clone(), kv_tokens: tokens }
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(StaticGroups { window_shot, per_frame })
}

/// Verifies that `groups` use every token in `[0, n)` as a query exactly once.
pub fn check_coverage(groups: &[StaticGroup], n: usize) -> Result<()> {
    let mut hits = vec![0u32; n];
    for g in groups {
        for &t in &g.query_tokens {
            if t >= n {
                return Err(Error::Coverage(format!("query token {t} outside [0, {n})")));
            }
            hits[t] += 1;
        }
        if let Some(&t) = g.kv_tokens.iter().find(|&&t| t >= n) {
            return Err(Error::Coverage(format!("kv token {t} outside [0, {n})")));
        }
        if g.kv_tokens.is_empty() && !g.query_tokens.is_empty() {
            return Err(Error::Coverage("group with queries but no keys".into()));
        }
    }
    if let Some(t) = hits.iter().position(|&h| h != 1) {
        return Err(Error::Coverage(format!(
            "token {t} is a query in {} groups (expected 1)",
            hits[t]
        )));
    }
    Ok(())
}

/// Dense attention inside each static group; outputs land on the query rows.
pub fn static_group_attention<T: Real>(heads: &AttentionHeads<T>, groups: &[StaticGroup]) -> Result<Matrix<T>> {
    let n = heads.n_tokens();
    check_coverage(groups, n)?;
    let d = heads.d_head();
    let scale = softmax_scale::<T>(d);
    let mut head_outs = Vec::with_capacity(heads.n_heads());
    let mut scores = Vec::new();
    for h in 0..heads.n_heads() {
        let mut out = Matrix::zeros(n, d);
        for g in groups {
            let q = heads.q(h).gather_rows(&g.query_tokens)?;
            let k = heads.k(h).gather_rows(&g.kv_tokens)?;
            let v = heads.v(h).gather_rows(&g.kv_tokens)?;
            let mut block = Matrix::zeros(q.rows(), d);
            attend_block(q.data(), k.data(), v.data(), d, scale, &mut scores, block.data_mut());
            for (i, &t) in g.query_tokens.iter().enumerate() {
                out.row_mut(t).copy_from_slice(block.row(i));
            }
        }
        head_outs.push(out);
    }
    Matrix::hcat(&head_outs)?.ensure_finite("static_group_attention")
}

/// Elementwise mean of equally shaped streams.
pub fn combine_streams<T: Real>(streams: &[Matrix<T>]) -> Result<Matrix<T>> {
    let first = streams.first().ok_or_else(|| shape_err("combine_streams needs at least one stream"))?;
    if streams.iter().any(|s| s.shape() != first.shape()) {
        return Err(shape_err("combine_streams: stream shapes differ"));
    }
    let count = T::of(streams.len() as f64);
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let mut acc = T::zero();
        for s in streams {
            acc = acc + s.data()[i];
        }
        *o = acc / count;
    }
    Ok(out)
}

/// MoGA stream plus every static stream, averaged.
pub fn combined_attention<T: Real>(
    heads: &AttentionHeads<T>,
    routing: &RoutingResult<T>,
    groups: &StaticGroups,
) -> Result<Matrix<T>> {
    let mut streams = vec![moga_attention(heads, routing)?];
    for s in groups.streams() {
        streams.push(static_group_attention(heads, s)?);
    }
    combine_streams(&streams)
}
