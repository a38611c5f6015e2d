//! Hyperparameter sweeps over defense, attack, and batch-size axes.

use super::{eval_defense, EvalConfig, EvalReport};
use crate::attack::AttackConfig;
use crate::data::Dataset;
use crate::defense::DefenseKind;
use crate::error::{Error, Result};
use crate::model::ClassifierModel;

use serde::{Deserialize, Serialize};

/// Swept quantity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    Delta,
    P,
    Alpha,
    BatchSize,
    SquareSize,
    UpdateStep,
    RndSigma,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Delta => "delta",
            SweepAxis::P => "p",
            SweepAxis::Alpha => "alpha",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::SquareSize => "square_size",
            SweepAxis::UpdateStep => "update_step",
            SweepAxis::RndSigma => "rnd_sigma",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(SweepAxis::Delta),
            "p" => Ok(SweepAxis::P),
            "alpha" => Ok(SweepAxis::Alpha),
            "batch_size" => Ok(SweepAxis::BatchSize),
            "square_size" => Ok(SweepAxis::SquareSize),
            "update_step" => Ok(SweepAxis::UpdateStep),
            "rnd_sigma" => Ok(SweepAxis::RndSigma),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// One sweep: an axis, its values, and the seeds each value runs under.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        Ok(())
    }
}

/// A single sweep cell in long format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub report: EvalReport,
}

fn apply_axis(
    axis: SweepAxis,
    value: f64,
    kind: &mut DefenseKind,
    attacks: &mut [AttackConfig],
    eval: &mut EvalConfig,
) -> Result<()> {
    match axis {
        SweepAxis::Delta | SweepAxis::P | SweepAxis::Alpha => match kind {
            DefenseKind::UniG(cfg) => {
                match axis {
                    SweepAxis::Delta => cfg.delta = value,
                    SweepAxis::P => cfg.p = value.max(1.0) as usize,
                    SweepAxis::Alpha => cfg.alpha = value,
                    _ => unreachable!(),
                }
                Ok(())
            }
            _ => Err(Error::Config(format!(
                "axis {} needs the unig defense",
                axis.name()
            ))),
        },
        SweepAxis::RndSigma => match kind {
            DefenseKind::Rnd { sigma } => {
                *sigma = value;
                Ok(())
            }
            _ => Err(Error::Config("axis rnd_sigma needs the rnd defense".into())),
        },
        SweepAxis::BatchSize => {
            let b = value as usize;
            if b == 0 {
                return Err(Error::Config("batch_size must be positive".into()));
            }
            eval.batch = b;
            Ok(())
        }
        SweepAxis::SquareSize => {
            for a in attacks.iter_mut() {
                a.square_p_init = value;
            }
            Ok(())
        }
        SweepAxis::UpdateStep => {
            for a in attacks.iter_mut() {
                a.nes_step = value;
                a.bandits_step = value;
            }
            Ok(())
        }
    }
}

/// Runs one evaluation per (value, seed) and returns a tidy long table.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    spec: &SweepSpec,
    model: &ClassifierModel,
    base_kind: &DefenseKind,
    base_attacks: &[AttackConfig],
    dataset: &Dataset,
    base_eval: &EvalConfig,
    reservoir: Option<&Dataset>,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &value in &spec.values {
        for &seed in &spec.seeds {
            let mut kind = base_kind.clone();
            let mut attacks = base_attacks.to_vec();
            let mut eval = base_eval.clone();
            eval.seed = seed;
            for a in attacks.iter_mut() {
                a.seed = seed;
            }
            apply_axis(spec.axis, value, &mut kind, &mut attacks, &mut eval)?;
            let reports = eval_defense(model, &kind, &attacks, dataset, &eval, reservoir)?;
            for report in reports {
                rows.push(SweepRow {
                    axis: spec.axis.name().into(),
                    value,
                    report,
                });
            }
        }
    }
    Ok(rows)
}
