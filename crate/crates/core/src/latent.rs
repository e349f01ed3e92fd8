//! Latent video token geometry.
//!
//! Tokens are packed frame-major: `idx = frame * (h * w) + row * w + col`, so
//! every latent frame (and every run of frames) is a contiguous index range.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Temporal downsampling of the video VAE.
pub const VAE_TEMPORAL_STRIDE: usize = 4;
/// Spatial downsampling of the VAE (8) times the spatial patch size (2).
pub const SPATIAL_STRIDE: usize = 16;

/// Start frame of every shot, ascending, first entry 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShotMap {
    boundaries: Vec<usize>,
}

impl ShotMap {
    pub fn single() -> Self {
        Self { boundaries: vec![0] }
    }

    /// Validates `boundaries` against a video of `t` latent frames.
    pub fn new(boundaries: Vec<usize>, t: usize) -> Result<Self> {
        let map = Self { boundaries };
        map.validate(t)?;
        Ok(map)
    }

    /// Shots of `len` latent frames each (the last one may be shorter).
    pub fn uniform(t: usize, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(shape_err("shot length must be positive"));
        }
        Self::new((0..t).step_by(len).collect(), t)
    }

    pub fn validate(&self, t: usize) -> Result<()> {
        if self.boundaries.first() != Some(&0) {
            return Err(shape_err("shot boundaries must start with 0"));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(shape_err("shot boundaries must be strictly ascending"));
        }
        if let Some(&last) = self.boundaries.last() {
            if last >= t {
                return Err(shape_err(format!(
                    "shot boundary {last} outside [0, {t})"
                )));
            }
        }
        Ok(())
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    /// Shot containing `frame`; a boundary frame belongs to the shot it starts.
    pub fn shot_of_frame(&self, frame: usize) -> usize {
        self.boundaries.partition_point(|&b| b <= frame) - 1
    }

    /// Latent-frame range of every shot for a video of `t` frames.
    pub fn shot_ranges(&self, t: usize) -> Vec<Range<usize>> {
        self.boundaries
            .iter()
            .enumerate()
            .map(|(i, &start)| start..self.boundaries.get(i + 1).copied().unwrap_or(t))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d_model: usize,
    pub shots: ShotMap,
}

impl LatentGrid {
    pub fn new(t: usize, h: usize, w: usize, d_model: usize, shots: ShotMap) -> Result<Self> {
        let grid = Self { t, h, w, d_model, shots };
        grid.validate()?;
        Ok(grid)
    }

    pub fn single_shot(t: usize, h: usize, w: usize, d_model: usize) -> Result<Self> {
        Self::new(t, h, w, d_model, ShotMap::single())
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(shape_err(format!(
                "grid dims must be >= 1, got t={} h={} w={}",
                self.t, self.h, self.w
            )));
        }
        self.shots.validate(self.t)
    }

    #[inline]
    pub fn frame_tokens(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn n_tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn token_index(&self, frame: usize, row: usize, col: usize) -> Result<usize> {
        if frame >= self.t || row >= self.h || col >= self.w {
            return Err(shape_err(format!(
                "position ({frame}, {row}, {col}) outside {}x{}x{} grid",
                self.t, self.h, self.w
            )));
        }
        Ok(frame * self.frame_tokens() + row * self.w + col)
    }

    /// Inverse of [`token_index`](Self::token_index).
    pub fn position(&self, idx: usize) -> Result<(usize, usize, usize)> {
        if idx >= self.n_tokens() {
            return Err(shape_err(format!("token {idx} outside [0, {})", self.n_tokens())));
        }
        let frame = idx / self.frame_tokens();
        let rem = idx % self.frame_tokens();
        Ok((frame, rem / self.w, rem % self.w))
    }

    pub fn frame_range(&self, frame: usize) -> Range<usize> {
        frame * self.frame_tokens()..(frame + 1) * self.frame_tokens()
    }
}

/// Latent frame count for a clip: `floor(fps * seconds / 4)`, at least 1.
pub fn latent_frames_for_duration(seconds: f64, fps: f64) -> Result<usize> {
    if !(seconds > 0.0) || !(fps > 0.0) {
        return Err(shape_err(format!(
            "duration and fps must be positive, got {seconds} s at {fps} fps"
        )));
    }
    let frames = (seconds * fps).round() as usize;
    Ok((frames / VAE_TEMPORAL_STRIDE).max(1))
}

/// Pixel frame count matching [`latent_frames_for_duration`]: `4 * t - 3`
/// (77 frames for 5 s at 16 fps).
pub fn pixel_frames_for_duration(seconds: f64, fps: f64) -> Result<usize> {
    let t = latent_frames_for_duration(seconds, fps)?;
    Ok(VAE_TEMPORAL_STRIDE * (t - 1) + 1)
}

/// Latent grid dims `(t, h, w)` for a clip at the given pixel resolution.
pub fn latent_dims_for_duration(
    seconds: f64,
    fps: f64,
    pixel_h: usize,
    pixel_w: usize,
) -> Result<(usize, usize, usize)> {
    if pixel_h == 0 || pixel_w == 0 {
        return Err(shape_err("pixel dims must be positive"));
    }
    if !pixel_h.is_multiple_of(SPATIAL_STRIDE) || !pixel_w.is_multiple_of(SPATIAL_STRIDE) {
        return Err(shape_err(format!(
            "pixel dims {pixel_h}x{pixel_w} not divisible by {SPATIAL_STRIDE}"
        )));
    }
    let t = latent_frames_for_duration(seconds, fps)?;
    Ok((t, pixel_h / SPATIAL_STRIDE, pixel_w / SPATIAL_STRIDE))
}

pub fn tokens_for_duration(seconds: f64, fps: f64, pixel_h: usize, pixel_w: usize) -> Result<usize> {
    let (t, h, w) = latent_dims_for_duration(seconds, fps, pixel_h, pixel_w)?;
    Ok(t * h * w)
}
