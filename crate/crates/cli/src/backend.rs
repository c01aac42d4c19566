//! `replay:<path>` and `synthetic:[<model.json>]` backend selection.

use std::path::{Path, PathBuf};

use tinycount::backends::{
    ReplayDensity, ReplayDetector, ReplayLoadError, SyntheticDensity, SyntheticDetector,
    SyntheticErrorModel,
};
use tinycount::{DensityBackend, DetectorBackend, KernelConfig, Scene};

use crate::commands::{Failure, ResultExt};

#[derive(Debug, Clone, PartialEq)]
pub enum BackendUri {
    Replay(PathBuf),
    Synthetic(Option<PathBuf>),
}

impl BackendUri {
    pub fn parse(s: &str) -> Result<Self, Failure> {
        match s.split_once(':') {
            Some(("replay", p)) if !p.is_empty() => Ok(Self::Replay(p.into())),
            Some(("synthetic", "")) => Ok(Self::Synthetic(None)),
            Some(("synthetic", p)) => Ok(Self::Synthetic(Some(p.into()))),
            _ => Err(Failure::usage(format!(
                "backend `{s}` is not `replay:<path>` or `synthetic:[<model.json>]`"
            ))),
        }
    }
}

/// Error model from a JSON file (missing fields take defaults); the seed
/// always comes from `--seed`.
pub fn load_model(path: Option<&Path>, seed: u64) -> Result<SyntheticErrorModel, Failure> {
    let model = match path {
        None => SyntheticErrorModel::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).io_ctx(p)?;
            serde_json::from_str::<SyntheticErrorModel>(&text)
                .invalid_ctx(format!("error model {}", p.display()))?
        }
    };
    model
        .validate()
        .map_err(|e| Failure::invalid(format!("error model: {e}")))?;
    Ok(model.with_seed(seed))
}

fn replay_err(path: &Path, e: ReplayLoadError) -> Failure {
    match e {
        ReplayLoadError::Io(io) => Failure::io(format!("{}: {io}", path.display())),
        other => Failure::invalid(format!("{}: {other}", path.display())),
    }
}

pub fn detector(uri: &BackendUri, scenes: &[Scene], seed: u64) -> Result<Box<dyn DetectorBackend>, Failure> {
    Ok(match uri {
        BackendUri::Replay(p) => Box::new(ReplayDetector::load(p).map_err(|e| replay_err(p, e))?),
        BackendUri::Synthetic(p) => {
            Box::new(SyntheticDetector::new(load_model(p.as_deref(), seed)?, scenes))
        }
    })
}

pub fn density(
    uri: &BackendUri,
    scenes: &[Scene],
    seed: u64,
    scale: u32,
    kernel: KernelConfig,
) -> Result<Box<dyn DensityBackend>, Failure> {
    if scale == 0 {
        return Err(Failure::usage("density scale must be at least 1"));
    }
    Ok(match uri {
        BackendUri::Replay(p) => {
            Box::new(ReplayDensity::load(p, scale).map_err(|e| replay_err(p, e))?)
        }
        BackendUri::Synthetic(p) => Box::new(SyntheticDensity::new(
            load_model(p.as_deref(), seed)?,
            kernel,
            scale,
            scenes,
        )),
    })
}
