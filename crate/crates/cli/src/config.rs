//! JSON run configuration. Every section has defaults, so `{}` is a valid
//! config; defaults follow the 480p Wan setting (M = 5, 2×2 windows, α = 0.1).

use std::path::{Path, PathBuf};

use moga_core::cost::{FlopsCurveConfig, FlopsModel, ModelShape};
use moga_core::latent::{tokens_for_duration, LatentGrid, ShotMap};
use moga_core::stga::StaticGroupSpec;
use moga_core::Router;
use moga_core::Real;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub attention: AttentionConfig,
    pub router: RouterConfig,
    pub training: TrainingConfig,
    pub cost: CostConfig,
    pub verify: VerifyConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d_model: usize,
    pub shots: ShotMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_head: usize,
    /// Router group count M.
    pub groups: usize,
    pub statics: StaticGroupSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInit {
    /// Centered uniform in ±1/√d.
    Uniform,
    Zero,
    /// Uniform plus a bias that sends every token to group 0.
    Collapsed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub init: RouterInit,
    /// Group-0 bias for the collapsed init.
    pub dominance: f64,
    /// Rank of the synthetic feature structure.
    pub feature_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub lr: f64,
    pub steps: usize,
    pub init: RouterInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub seconds: f64,
    pub pflops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    /// Transformer shape for the FLOPs model. The Wan2.1-1.3B values are
    /// external estimates, not published by the MoGA authors.
    pub model: ModelShape,
    /// Fixed scale; when absent it is fit on `calibration`.
    pub kappa: Option<f64>,
    pub calibration: Calibration,
    pub durations: Vec<f64>,
    pub groups: Vec<usize>,
    pub fps: f64,
    pub pixel_h: usize,
    pub pixel_w: usize,
    pub statics: StaticGroupSpec,
    pub shot_seconds: Option<f64>,
    /// Largest N for exact mask counting.
    pub exact_bound: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random instances per randomized check.
    pub instances: usize,
    pub max_tokens: usize,
    pub max_groups: usize,
    pub max_heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { t: 8, h: 8, w: 8, d_model: 16, shots: ShotMap::new(vec![0, 4], 8).expect("valid shots") }
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { n_heads: 2, d_head: 8, groups: 5, statics: StaticGroupSpec::default() }
    }
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self { init: RouterInit::Uniform, dominance: 4.0, feature_rank: 4 }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { alpha: moga_core::routing::DEFAULT_ALPHA, lr: 1.0, steps: 500, init: RouterInit::Collapsed }
    }
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            model: ModelShape::WAN_1_3B,
            kappa: None,
            calibration: Calibration { seconds: 30.0, pflops: 6.94 },
            durations: vec![5.0, 10.0, 15.0, 20.0, 30.0],
            groups: vec![5, 10, 20],
            fps: 16.0,
            pixel_h: 480,
            pixel_w: 832,
            statics: StaticGroupSpec::default(),
            shot_seconds: Some(5.0),
            exact_bound: moga_core::cost::DEFAULT_EXACT_BOUND,
        }
    }
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { instances: 20, max_tokens: 128, max_groups: 8, max_heads: 4 }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

fn bad(field: &str, msg: impl Into<String>) -> CliError {
    CliError::Config { field: field.to_string(), msg: msg.into() }
}

impl RunConfig {
    /// Long-context preset: 4×4 spatial windows and M = 20.
    pub fn long_context() -> Self {
        let mut cfg = Self::default();
        cfg.attention.groups = 20;
        cfg.attention.statics.spatial_grid = (4, 4);
        cfg.cost.statics.spatial_grid = (4, 4);
        cfg.cost.groups = vec![20];
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let g = &self.grid;
        if g.t == 0 || g.h == 0 || g.w == 0 {
            return Err(bad("grid", "t, h and w must be >= 1"));
        }
        g.shots.validate(g.t).map_err(|e| bad("grid.shots", e.to_string()))?;
        let a = &self.attention;
        if a.n_heads == 0 || a.d_head == 0 {
            return Err(bad("attention.n_heads", "n_heads and d_head must be >= 1"));
        }
        if a.n_heads * a.d_head != g.d_model {
            return Err(bad(
                "attention.d_head",
                format!("n_heads * d_head = {} but grid.d_model = {}", a.n_heads * a.d_head, g.d_model),
            ));
        }
        if a.groups == 0 {
            return Err(bad("attention.groups", "must be >= 1"));
        }
        let (gh, gw) = a.statics.spatial_grid;
        if gh == 0 || gh > g.h {
            return Err(bad("attention.statics.spatial_grid", format!("rows {gh} must be in [1, h={}]", g.h)));
        }
        if gw == 0 || gw > g.w {
            return Err(bad("attention.statics.spatial_grid", format!("cols {gw} must be in [1, w={}]", g.w)));
        }
        let t = &self.training;
        if !(t.alpha >= 0.0) || !t.alpha.is_finite() {
            return Err(bad("training.alpha", "must be finite and >= 0"));
        }
        if !(t.lr >= 0.0) || !t.lr.is_finite() {
            return Err(bad("training.lr", "must be finite and >= 0"));
        }
        if !self.router.dominance.is_finite() {
            return Err(bad("router.dominance", "must be finite"));
        }
        let c = &self.cost;
        if c.model.d_model == 0 || c.model.layers == 0 {
            return Err(bad("cost.model", "d_model and layers must be >= 1"));
        }
        if let Some(k) = c.kappa {
            if !(k >= 0.0) || !k.is_finite() {
                return Err(bad("cost.kappa", "must be finite and >= 0"));
            }
        }
        if c.durations.iter().any(|d| !(*d > 0.0)) {
            return Err(bad("cost.durations", "durations must be positive"));
        }
        if c.groups.contains(&0) {
            return Err(bad("cost.groups", "group counts must be >= 1"));
        }
        if !(c.fps > 0.0) {
            return Err(bad("cost.fps", "must be positive"));
        }
        tokens_for_duration(c.calibration.seconds, c.fps, c.pixel_h, c.pixel_w)
            .map_err(|e| bad("cost.pixel_h", e.to_string()))?;
        if !(c.calibration.pflops > 0.0) {
            return Err(bad("cost.calibration.pflops", "must be positive"));
        }
        if c.statics.spatial_grid.0 == 0 || c.statics.spatial_grid.1 == 0 {
            return Err(bad("cost.statics.spatial_grid", "entries must be >= 1"));
        }
        if let Some(s) = c.shot_seconds {
            if !(s > 0.0) {
                return Err(bad("cost.shot_seconds", "must be positive"));
            }
        }
        let v = &self.verify;
        if v.instances == 0 || v.max_tokens < 2 || v.max_groups == 0 || v.max_heads == 0 {
            return Err(bad("verify", "instances, max_groups and max_heads must be >= 1 and max_tokens >= 2"));
        }
        Ok(())
    }

    pub fn latent_grid(&self) -> LatentGrid {
        let g = &self.grid;
        LatentGrid::new(g.t, g.h, g.w, g.d_model, g.shots.clone()).expect("validated grid")
    }

    /// FLOPs model with `kappa` either fixed or fit on the calibration row.
    pub fn flops_model(&self) -> FlopsModel {
        let c = &self.cost;
        match c.kappa {
            Some(kappa) => FlopsModel { shape: c.model, kappa },
            None => {
                let n = tokens_for_duration(c.calibration.seconds, c.fps, c.pixel_h, c.pixel_w).expect("validated");
                FlopsModel::calibrate(c.model, n, c.calibration.pflops * 1e15)
            }
        }
    }

    pub fn flops_curve_config(&self) -> FlopsCurveConfig {
        let c = &self.cost;
        FlopsCurveConfig {
            shape: c.model,
            kappa: self.flops_model().kappa,
            fps: c.fps,
            pixel_h: c.pixel_h,
            pixel_w: c.pixel_w,
            statics: c.statics,
            shot_seconds: c.shot_seconds,
        }
    }

    pub fn build_router<T: Real>(&self, init: RouterInit, d: usize, m: usize, seed: u64) -> Router<T> {
        let r = match init {
            RouterInit::Uniform => Router::uniform_init(d, m, seed),
            RouterInit::Zero => Router::zeros(d, m),
            RouterInit::Collapsed => Router::collapsed_init(d, m, seed, self.router.dominance),
        };
        r.expect("validated router shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        RunConfig::long_context().validate().unwrap();
    }

    #[test]
    fn window_grid_larger_than_latent_is_rejected() {
        let err = RunConfig::from_json(r#"{"attention": {"statics": {"spatial_grid": [9, 2]}}}"#).unwrap_err();
        match err {
            CliError::Config { field, .. } => assert_eq!(field, "attention.statics.spatial_grid"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = RunConfig::from_json("{\n  \"seed\": ,\n}").unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 2, .. }));
        let err = RunConfig::from_json(r#"{"sed": 1}"#).unwrap_err();
        assert!(err.to_string().contains("sed"));
    }

    #[test]
    fn head_width_must_match() {
        let err = RunConfig::from_json(r#"{"attention": {"n_heads": 3}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config { ref field, .. } if field == "attention.d_head"));
    }

    #[test]
    fn shots_must_fit_grid() {
        let err = RunConfig::from_json(r#"{"grid": {"shots": [0, 9]}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config { ref field, .. } if field == "grid.shots"));
    }

    #[test]
    fn calibrated_kappa_is_near_one() {
        let k = RunConfig::default().flops_model().kappa;
        assert!((k - 1.0).abs() < 0.05, "{k}");
    }
}
