//! JSON configuration file. Every key mirrors a library default; unknown
//! keys are rejected.

use std::fs;
use std::path::Path;

use detcore::augment::Transform;
use detcore::cascade::{CascadeConfig, CascadeSimulation, ScoreFusion};
use detcore::pyramid::PyramidSpec;
use detcore::schedule::ScheduleConfig;
use detcore::suppression::{SoftNmsMethod, DETECTION_IOU_THR, SCORE_THR};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub eval: EvalSection,
    pub nms: NmsSection,
    pub augment: AugmentSection,
    pub anchors: AnchorsSection,
    pub cascade: CascadeSection,
    pub schedule: ScheduleConfig,
    pub gradcheck: GradcheckSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_min: f64,
    pub iou_max: f64,
    pub iou_step: f64,
    pub max_dets: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_min: 0.5,
            iou_max: 0.95,
            iou_step: 0.05,
            max_dets: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsSection {
    pub soft: bool,
    pub method: SoftNmsMethod,
    pub iou_thr: f64,
    pub sigma: f64,
    pub score_floor: f64,
    pub score_thr: f64,
    pub class_agnostic: bool,
}

impl Default for NmsSection {
    fn default() -> Self {
        Self {
            soft: false,
            method: SoftNmsMethod::Gaussian,
            iou_thr: DETECTION_IOU_THR,
            sigma: 0.5,
            score_floor: 0.0,
            score_thr: SCORE_THR,
            class_agnostic: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub chain: Vec<Transform>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorsSection {
    pub pyramid: PyramidSpec,
    pub width: Option<u32>,
    pub height: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeSection {
    pub thresholds: Vec<f64>,
    pub score_fusion: ScoreFusion,
    pub simulation: CascadeSimulation,
}

impl Default for CascadeSection {
    fn default() -> Self {
        let c = CascadeConfig::default();
        Self {
            thresholds: c.thresholds,
            score_fusion: c.score_fusion,
            simulation: CascadeSimulation::default(),
        }
    }
}

impl CascadeSection {
    pub fn stages(&self) -> CascadeConfig {
        CascadeConfig {
            thresholds: self.thresholds.clone(),
            score_fusion: self.score_fusion,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub instances: usize,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            instances: 20,
            tolerance: 1e-4,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
