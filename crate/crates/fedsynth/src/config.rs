//! JSON run configuration: one file, unknown keys rejected, every field
//! defaulted so a minimal `{}` is a valid run.

use std::path::Path;

use crate::error::{Error, Result};
use crate::federation::{TrainCfg, TransferRunCfg, UploadPolicy};
use crate::netmodel::NetCfg;
use crate::renderer::GeneratorArch;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RosterCfg {
    pub horizontal: usize,
    pub vertical: usize,
    pub shifted_domain: bool,
}

impl Default for RosterCfg {
    fn default() -> Self {
        RosterCfg {
            horizontal: 5,
            vertical: 3,
            shifted_domain: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: GeneratorArch,
    pub roster: RosterCfg,
    pub train: TrainCfg,
    pub transfer: TransferRunCfg,
    pub net: NetCfg,
    pub upload: UploadPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            arch: GeneratorArch::default(),
            roster: RosterCfg::default(),
            train: TrainCfg::default(),
            transfer: TransferRunCfg::default(),
            net: NetCfg::default(),
            upload: UploadPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch
            .validate()
            .map_err(|e| Error::Config(format!("arch: {}", e)))?;
        self.train.validate()?;
        self.transfer.validate()?;
        self.net.validate()?;
        self.upload
            .validate()
            .map_err(|_| Error::Config("upload policy must partition the generator tags".to_string()))?;
        if self.roster.horizontal + self.roster.vertical == 0 {
            return Err(Error::Config("roster must contain at least one client".to_string()));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("parse: {}", e)))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.arch.enc_levels, 10);
        assert_eq!(cfg.transfer.transfer.lambda1, 5.0);
        assert_eq!(cfg.transfer.transfer.lambda2, 0.2);
        assert_eq!(cfg.transfer.transfer.lambda3, 1.0);
        assert_eq!(cfg.train.ema_decay, 0.95);
    }

    #[test]
    fn negative_decay_names_the_field() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"train": {"ema_decay": -0.1}}"#).unwrap();
        match cfg.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("ema.decay"), "{}", msg),
            other => panic!("expected config error, got {:?}", other),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"foo": 1}"#).unwrap_err();
        assert!(err.to_string().contains("foo"));
    }

    #[test]
    fn partial_nested_override_keeps_other_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"net": {"noise": 0.5}, "seed": 42}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.net.noise, 0.5);
        assert_eq!(cfg.net.bandwidth, 1e7);
    }

    #[test]
    fn load_from_file_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"seed": 7}"#).unwrap();
        assert_eq!(load_config(&p).unwrap().seed, 7);
        assert!(load_config(&dir.path().join("absent.json")).is_err());
    }
}
