use std::fmt;
use std::str::FromStr;

use clap::Args;
use evmae_core::event::{SegmentConfig, SensorGeometry};
use evmae_core::intensity::{IntensityConfig, IntensityMethod};
use evmae_core::masking::{DEFAULT_MASK_RATIO, DEFAULT_PATCH_SIZE};
use serde::Serialize;

/// `WxH`, e.g. `346x260`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeometryArg(pub SensorGeometry);

impl FromStr for GeometryArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
        let w: u16 = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
        let h: u16 = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
        SensorGeometry::new(w, h).map(GeometryArg).map_err(|e| e.to_string())
    }
}

impl fmt::Display for GeometryArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Sensor size for text event files.
    #[arg(long, global = true, value_name = "WxH")]
    pub geometry: Option<GeometryArg>,
    /// Segment length T in milliseconds.
    #[arg(long, global = true, default_value_t = 50)]
    pub segment_ms: u64,
    /// Temporal bins B per segment.
    #[arg(long, global = true, default_value_t = 10)]
    pub bins: usize,
    /// Decay factor alpha.
    #[arg(long, global = true, default_value_t = 5.0)]
    pub alpha: f64,
    /// Event-count normalizer N of the adaptive rule.
    #[arg(long, global = true, default_value_t = 5000.0)]
    pub normalizer: f64,
    /// Contrast threshold C.
    #[arg(long, global = true, default_value_t = 1.0)]
    pub threshold: f64,
    /// Tube masking ratio.
    #[arg(long, global = true, default_value_t = DEFAULT_MASK_RATIO)]
    pub ratio: f64,
    /// Patch size in pixels (default 32, or 8 for the toy model).
    #[arg(long, global = true)]
    pub patch: Option<usize>,
    /// Seed for masks, noise and model initialization.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Print the resolved configuration as JSON before running.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineConfig {
    pub geometry: Option<String>,
    pub segment_us: u64,
    pub bins: usize,
    pub bin_us: u64,
    pub method: &'static str,
    pub alpha: f64,
    pub threshold: f64,
    pub normalizer: f64,
    pub mask_ratio: f64,
    pub patch: usize,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl GlobalOpts {
    pub fn segment(&self) -> evmae_core::Result<SegmentConfig> {
        SegmentConfig::new(self.segment_ms.saturating_mul(1000), self.bins)
    }

    pub fn intensity(&self, method: IntensityMethod) -> evmae_core::Result<IntensityConfig> {
        let cfg = IntensityConfig {
            method,
            alpha: self.alpha,
            threshold: self.threshold,
            normalizer: self.normalizer,
            bin_us: self.segment()?.bin_us(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(
        &self,
        method: IntensityMethod,
        default_patch: usize,
        inputs: &[&std::path::Path],
        outputs: &[&std::path::Path],
    ) -> evmae_core::Result<PipelineConfig> {
        let seg = self.segment()?;
        let int = self.intensity(method)?;
        let patch = self.patch.unwrap_or(default_patch);
        if patch == 0 {
            return Err(evmae_core::Error::InvalidConfig("patch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(evmae_core::Error::InvalidConfig(format!(
                "masking ratio must lie in [0, 1], got {}",
                self.ratio
            )));
        }
        Ok(PipelineConfig {
            geometry: self.geometry.map(|g| g.to_string()),
            segment_us: seg.segment_us,
            bins: seg.bins,
            bin_us: seg.bin_us(),
            method: match int.method {
                IntensityMethod::PerEventDecay => "decay",
                IntensityMethod::AdaptiveBatch => "adaptive",
            },
            alpha: int.alpha,
            threshold: int.threshold,
            normalizer: int.normalizer,
            mask_ratio: self.ratio,
            patch,
            seed: self.seed,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        })
    }
}

pub fn default_patch() -> usize {
    DEFAULT_PATCH_SIZE
}
