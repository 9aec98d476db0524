//! One JSON document configures a whole run: phantom generation, network
//! architecture, stitcher geometry, loss weights, and the optimizer. Every
//! field is optional and defaults to the documented value; unknown keys are
//! rejected so typos fail loudly instead of silently training the wrong
//! model. The parsed config is echoed verbatim into metrics, checkpoints,
//! and reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::net::NetConfig;
use crate::phantom::PhantomSpec;
use crate::stitcher::StitchConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub net: NetConfig,
    pub stitch: StitchConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Patch edge lengths implied by the phantom dims and the patch count.
    pub fn patch_dims(&self) -> [usize; 3] {
        let n = self.train.n;
        let [w, h, d] = self.phantom.dims;
        [w / n, h / n, d / n]
    }

    /// Check every section and their interplay: dims must split into n³
    /// patches, each patch must split into the stitcher's m³ regions and
    /// survive the encoder's halvings, and the contrastive term needs more
    /// than one patch.
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let n = self.train.n;
        let dims = self.phantom.dims;
        if dims.iter().any(|&e| e % n != 0) {
            return Err(Error::Config(format!(
                "dims {dims:?} not divisible into {n} patches per axis"
            )));
        }
        let patch = self.patch_dims();
        if patch.iter().any(|&e| e < 2) {
            return Err(Error::Config(format!("patch dims {patch:?} too small to warp")));
        }
        self.net.validate(patch)?;
        self.stitch.resolve(patch)?;
        if self.loss.lambda_contrast > 0.0 && n < 2 {
            return Err(Error::Config(format!(
                "the contrastive term needs at least 2 patches per axis, got n = {n}"
            )));
        }
        if self.loss.ncc_window % 2 == 0 || dims.iter().any(|&e| e < self.loss.ncc_window) {
            return Err(Error::Config(format!(
                "ncc_window {} must be odd and fit dims {dims:?}",
                self.loss.ncc_window
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_an_empty_document_and_validate() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.phantom.dims, [32, 32, 32]);
        assert_eq!(cfg.train.n, 2);
        assert_eq!(cfg.patch_dims(), [16, 16, 16]);
        assert_eq!(cfg.stitch.m, 4);
        assert_eq!(cfg.train.epochs, 200);
        assert_eq!(cfg.loss.lambda_contrast, 0.1);
    }

    #[test]
    fn partial_documents_override_only_what_they_name() {
        let cfg = RunConfig::from_json(
            r#"{"train": {"epochs": 10, "seed": 9}, "loss": {"tau": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.loss.tau, 0.5);
        assert_eq!(cfg.train.lr0, 1e-3);
        assert_eq!(cfg.phantom, PhantomSpec::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(RunConfig::from_json(r#"{"nett": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"phantom": {"dim": [16,16,16]}}"#).is_err());
    }

    #[test]
    fn json_roundtrip_preserves_the_document() {
        let cfg = RunConfig::from_json(r#"{"train": {"n": 4}, "stitch": {"m": 2}}"#).unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn cross_section_validation_catches_geometry_conflicts() {
        // 32³ with n = 3 does not split evenly.
        let cfg = RunConfig::from_json(r#"{"train": {"n": 3}}"#).unwrap();
        assert!(cfg.validate().is_err());
        // Patch 8³ cannot host m = 3 regions per axis.
        let cfg = RunConfig::from_json(r#"{"train": {"n": 4}, "stitch": {"m": 3}}"#).unwrap();
        assert!(cfg.validate().is_err());
        // Patch 8³ with a 4-level encoder is fine; a 5-level one is not.
        let cfg = RunConfig::from_json(
            r#"{"train": {"n": 4}, "stitch": {"m": 2},
                "net": {"enc_channels": [4,4,4,4,4], "dec_channels": [4,4,4,4,4]}}"#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
        // Contrastive weight with a single patch is a config error.
        let cfg = RunConfig::from_json(r#"{"train": {"n": 1}, "stitch": {"m": 4}}"#).unwrap();
        assert!(cfg.validate().is_err());
        // Window 9 does not fit 8³ phantoms even though it is a valid default.
        let cfg = RunConfig::from_json(
            r#"{"phantom": {"dims": [16,16,16], "control_spacing": 4, "field_amplitude": 2.0},
                "loss": {"ncc_window": 17}}"#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
    }
}
