//! Flat `section.key = value` configuration files for [`PipelineConfig`].
//!
//! Blank lines and text after `#` are ignored. Optional values accept
//! `auto` for "estimate at run time".

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

trait ConfigValue: Sized {
    fn parse(text: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(text: &str) -> std::result::Result<Self, String> {
                text.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, bool);

impl ConfigValue for Option<f64> {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        if text == "auto" {
            Ok(None)
        } else {
            f64::parse(text).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.to_string())
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        /// Every recognized key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_key(cfg: &mut PipelineConfig, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
            match key {
                $($key => Some(ConfigValue::parse(value).map(|v| cfg.$($field).+ = v)),)*
                _ => None,
            }
        }

        fn entries(cfg: &PipelineConfig) -> Vec<(&'static str, String)> {
            vec![$(($key, cfg.$($field).+.render())),*]
        }
    };
}

config_keys! {
    "pipeline.keyframe_translation" => keyframe_translation,
    "pipeline.keyframe_rotation_deg" => keyframe_rotation_deg,
    "pipeline.keyframe_max_gap" => keyframe_max_gap,
    "pipeline.window_size" => window_size,
    "pipeline.init_iterations" => init_iterations,
    "pipeline.seed" => seed,
    "tracker.n_virtual" => tracker.n_virtual,
    "tracker.pyramid_levels" => tracker.pyramid_levels,
    "tracker.huber_delta" => tracker.huber_delta,
    "tracker.max_iterations" => tracker.max_iterations,
    "tracker.lm_lambda_init" => tracker.lm_lambda_init,
    "tracker.convergence_tol" => tracker.convergence_tol,
    "tracker.max_keypoints" => tracker.max_keypoints,
    "tracker.gradient_threshold" => tracker.gradient_threshold,
    "tracker.patch_size" => tracker.patch_size,
    "mapper.n_virtual" => mapper.n_virtual,
    "mapper.lambda_color" => mapper.lambda_color,
    "mapper.lambda_ssim" => mapper.lambda_ssim,
    "mapper.lambda_depth" => mapper.lambda_depth,
    "mapper.lambda_reg" => mapper.lambda_reg,
    "mapper.reg_ratio" => mapper.reg_ratio,
    "mapper.iterations" => mapper.iterations,
    "mapper.seed_alpha" => mapper.seed_alpha,
    "mapper.seed_stride" => mapper.seed_stride,
    "mapper.seed_opacity" => mapper.seed_opacity,
    "mapper.densify_interval" => mapper.densify_interval,
    "mapper.densify_grad_threshold" => mapper.densify_grad_threshold,
    "mapper.densify_scale_fraction" => mapper.densify_scale_fraction,
    "mapper.prune_opacity" => mapper.prune_opacity,
    "mapper.prune_scale_fraction" => mapper.prune_scale_fraction,
    "mapper.scene_extent" => mapper.scene_extent,
    "mapper.optimize_trajectories" => mapper.optimize_trajectories,
    "mapper.seed" => mapper.seed,
    "mapper.lr_mean" => mapper.learning_rates.mean,
    "mapper.lr_scale" => mapper.learning_rates.scale,
    "mapper.lr_rotation" => mapper.learning_rates.rotation,
    "mapper.lr_opacity" => mapper.learning_rates.opacity,
    "mapper.lr_color" => mapper.learning_rates.color,
    "mapper.lr_trajectory_rotation" => mapper.learning_rates.trajectory_rotation,
    "mapper.lr_trajectory_translation" => mapper.learning_rates.trajectory_translation,
}

/// Applies one `key = value` assignment.
pub fn set_value(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<()> {
    match set_key(cfg, key, value) {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::InvalidArgument(format!("{key}: {e}"))),
        None => Err(Error::InvalidArgument(format!("unknown key {key}"))),
    }
}

/// Applies every assignment in `text` on top of `cfg`, then validates.
pub fn apply_config_text(cfg: &mut PipelineConfig, text: &str, path: &Path) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedLine {
            path: path.into(),
            line: i + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed("expected key = value".into()))?;
        set_value(cfg, key.trim(), value.trim()).map_err(|e| malformed(e.to_string()))?;
    }
    cfg.validate()
}

/// Reads a configuration file on top of the built-in defaults.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    if !path.is_file() {
        return Err(Error::MissingFile { path: path.into() });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = PipelineConfig::default();
    apply_config_text(&mut cfg, &text, path)?;
    Ok(cfg)
}

/// Every key with its value, one `key = value` per line; parses back to
/// the same configuration.
pub fn format_config(cfg: &PipelineConfig) -> String {
    entries(cfg)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
