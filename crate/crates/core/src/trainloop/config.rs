use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clipops::{SpatialConfig, TransformSpace};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;

/// Which transformation families ψ must be equivariant to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equivariance {
    None,
    Temporal,
    Spatial,
    Both,
}

impl Equivariance {
    pub fn temporal(self) -> bool {
        matches!(self, Equivariance::Temporal | Equivariance::Both)
    }

    pub fn spatial(self) -> bool {
        matches!(self, Equivariance::Spatial | Equivariance::Both)
    }
}

impl FromStr for Equivariance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Equivariance::None),
            "temporal" => Ok(Equivariance::Temporal),
            "spatial" => Ok(Equivariance::Spatial),
            "both" => Ok(Equivariance::Both),
            other => Err(Error::Config(format!("unknown equivariance set {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Inst,
    Equi,
    Aux,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inst" => Ok(Objective::Inst),
            "equi" => Ok(Objective::Equi),
            "aux" => Ok(Objective::Aux),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxTask {
    Speed,
    Rev,
    Order,
}

impl FromStr for AuxTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speed" => Ok(AuxTask::Speed),
            "rev" | "direction" => Ok(AuxTask::Rev),
            "order" | "overlap" => Ok(AuxTask::Order),
            other => Err(Error::Config(format!("unknown auxiliary task {other:?}"))),
        }
    }
}

/// Full model, or the baseline that contrasts temporal crops as separate
/// instances without the ψ pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Equivariant,
    Distinctive,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Equivariant => "equivariant",
            Arm::Distinctive => "distinctive",
        })
    }
}

/// Every knob of a pretraining run; serialized as a flat TOML table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub equivariance: Equivariance,
    pub objectives: Vec<Objective>,
    pub aux_tasks: Vec<AuxTask>,
    pub arm: Arm,
    pub weight_equi: f64,
    pub weight_inst: f64,
    pub weight_speed: f64,
    pub weight_direction: f64,
    pub weight_overlap: f64,
    pub speeds: Vec<u8>,
    pub allow_reverse: bool,
    pub min_crop_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the run length; the schedule is stretched over the capped length.
    pub max_steps: Option<u64>,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub temperature: f64,
    pub seed: u64,
    pub workers: usize,
    pub checkpoint_every: u64,
    pub clip_len: usize,
    pub resolution: usize,
    pub widths: [usize; 4],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            equivariance: Equivariance::Temporal,
            objectives: vec![Objective::Inst, Objective::Equi, Objective::Aux],
            aux_tasks: vec![AuxTask::Speed, AuxTask::Rev, AuxTask::Order],
            arm: Arm::Equivariant,
            weight_equi: 1.0,
            weight_inst: 1.0,
            weight_speed: 1.0,
            weight_direction: 1.0,
            weight_overlap: 1.0,
            speeds: vec![0, 1, 2, 3],
            allow_reverse: true,
            min_crop_fraction: 0.7,
            batch_size: 32,
            epochs: 30,
            max_steps: None,
            base_lr: 3e-4,
            warmup_fraction: 0.05,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            temperature: 0.1,
            seed: 0,
            workers: 1,
            checkpoint_every: 0,
            clip_len: 16,
            resolution: 32,
            widths: [16, 32, 64, 128],
        }
    }
}

/// Ablation rows (a) through (o).
pub const PRESETS: [char; 15] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o'];

impl TrainConfig {
    pub fn preset(name: char) -> Result<Self> {
        use AuxTask::*;
        use Objective::*;
        let base = Self::default();
        let with = |eq: Equivariance, objs: &[Objective], aux: &[AuxTask], reverse: bool| TrainConfig {
            equivariance: eq,
            objectives: objs.to_vec(),
            aux_tasks: aux.to_vec(),
            allow_reverse: reverse,
            ..base.clone()
        };
        let all_aux = [Speed, Rev, Order];
        let cfg = match name {
            'a' | 'e' => with(Equivariance::None, &[Inst], &[], true),
            'b' => with(Equivariance::Spatial, &[Inst, Equi], &[], true),
            'c' => with(Equivariance::Both, &[Inst, Equi, Aux], &all_aux, true),
            'd' | 'k' | 'o' => with(Equivariance::Temporal, &[Inst, Equi, Aux], &all_aux, true),
            'f' => with(Equivariance::Temporal, &[Equi], &[], true),
            'g' => with(Equivariance::Temporal, &[Aux], &all_aux, true),
            'h' => with(Equivariance::Temporal, &[Inst, Equi], &[], true),
            'i' => with(Equivariance::Temporal, &[Inst, Aux], &all_aux, true),
            'j' => with(Equivariance::Temporal, &[Equi, Aux], &all_aux, true),
            'l' => with(Equivariance::Temporal, &[Inst, Equi, Aux], &[Speed], false),
            'm' => with(Equivariance::Temporal, &[Inst, Equi, Aux], &[Speed, Order], false),
            'n' => with(Equivariance::Temporal, &[Inst, Equi, Aux], &[Speed, Rev], true),
            other => return Err(Error::Config(format!("unknown preset {other:?}, expected one of a..o"))),
        };
        Ok(cfg)
    }

    pub fn has(&self, o: Objective) -> bool {
        self.objectives.contains(&o)
    }

    fn aux_on(&self, t: AuxTask) -> bool {
        self.has(Objective::Aux) && self.aux_tasks.contains(&t)
    }

    /// Weights with disabled objectives and tasks forced to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let on = |b: bool, w: f64| if b { w } else { 0.0 };
        LossWeights {
            equi: on(self.has(Objective::Equi), self.weight_equi),
            inst: on(self.has(Objective::Inst), self.weight_inst),
            speed: on(self.aux_on(AuxTask::Speed), self.weight_speed),
            direction: on(self.aux_on(AuxTask::Rev), self.weight_direction),
            overlap: on(self.aux_on(AuxTask::Order), self.weight_overlap),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::with_widths(self.clip_len, self.resolution, self.widths)
    }

    pub fn transform_space(&self) -> TransformSpace {
        TransformSpace {
            speeds: self.speeds.clone(),
            allow_reverse: self.allow_reverse,
        }
    }

    pub fn spatial_config(&self) -> SpatialConfig {
        SpatialConfig {
            min_crop_fraction: self.min_crop_fraction,
            ..SpatialConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.transform_space().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return bad(format!("batch size must be even and at least 4, got {}", self.batch_size));
        }
        if self.objectives.is_empty() {
            return bad("at least one objective is required".into());
        }
        if self.has(Objective::Equi) && self.equivariance == Equivariance::None {
            return bad("the equi objective needs a non-empty equivariance set".into());
        }
        if self.has(Objective::Aux) && self.aux_tasks.is_empty() {
            return bad("the aux objective needs at least one auxiliary task".into());
        }
        if self.aux_on(AuxTask::Rev) && !self.allow_reverse {
            return bad("direction prediction needs reversal in the transform space".into());
        }
        if self.arm == Arm::Distinctive && self.objectives != [Objective::Inst] {
            return bad("the distinctive arm trains the instance objective only".into());
        }
        let ws = [
            self.weight_equi,
            self.weight_inst,
            self.weight_speed,
            self.weight_direction,
            self.weight_overlap,
        ];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("invalid learning-rate schedule".into());
        }
        if !(self.temperature > 0.0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return bad("temperature and clip norm must be positive, weight decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.min_crop_fraction) || self.min_crop_fraction == 0.0 {
            return bad("min_crop_fraction must lie in (0, 1]".into());
        }
        if self.epochs == 0 || self.workers == 0 {
            return bad("epochs and workers must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn steps_per_epoch(&self, n_videos: usize) -> u64 {
        (n_videos / self.batch_size) as u64
    }

    pub fn total_steps(&self, n_videos: usize) -> u64 {
        let full = self.steps_per_epoch(n_videos) * self.epochs as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}
