use super::config::{ArchConfig, Decomposition};
use super::model::{ForwardOptions, GroupWiring, ModelGraph, Wiring};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which saturated gate configuration to compare.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateMode {
    /// Every gate 0: blocks are approximated independently.
    Closed,
    /// Every gate 1: one cascade per branch through the whole network.
    Open,
    /// One flag per block boundary; `true` joins the two blocks into a group.
    Pattern(Vec<bool>),
}

impl GateMode {
    fn flags(&self, boundaries: usize) -> Result<Vec<bool>> {
        match self {
            GateMode::Closed => Ok(vec![false; boundaries]),
            GateMode::Open => Ok(vec![true; boundaries]),
            GateMode::Pattern(p) if p.len() == boundaries => Ok(p.clone()),
            GateMode::Pattern(p) => Err(Error::Structure(format!(
                "gate pattern has {} entries for {boundaries} block boundaries",
                p.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegeneracyReport {
    pub partition: Vec<Vec<usize>>,
    pub decomposition: Decomposition,
    pub max_abs_diff: f64,
    pub equal: bool,
}

/// The hard group-wise model a soft model reduces to when its gates saturate
/// as `mode` describes. Parameters are shared; each group is combined with
/// the λ of its last block.
pub fn harden<T: Real>(model: &ModelGraph<T>, mode: &GateMode) -> Result<ModelGraph<T>> {
    let Wiring::Soft { lambdas, .. } = &model.wiring else {
        return Err(Error::Structure(format!(
            "gate degeneracy needs a soft-gated model, got {}",
            model.config.decomposition.name()
        )));
    };
    let nb = model.blocks.len();
    let flags = mode.flags(nb - 1)?;
    let mut partition: Vec<Vec<usize>> = vec![vec![0]];
    for (n, &joined) in (1..nb).zip(&flags) {
        if joined {
            partition.last_mut().expect("non-empty").push(n);
        } else {
            partition.push(vec![n]);
        }
    }
    let decomposition = if partition.len() == 1 {
        Decomposition::GbdV3
    } else if partition.iter().all(|g| g.len() == 2) {
        Decomposition::GbdV2
    } else {
        Decomposition::GbdV1
    };
    let all_single = partition.iter().all(|g| g.len() == 1);
    let config = ArchConfig {
        decomposition,
        groups: (decomposition == Decomposition::GbdV1 && !all_single).then(|| partition.clone()),
        ..model.config.clone()
    };
    config.validate()?;
    let groups = partition
        .iter()
        .map(|g| GroupWiring {
            blocks: g.clone(),
            lambda: lambdas[*g.last().expect("non-empty")],
        })
        .collect();
    Ok(ModelGraph {
        config,
        wiring: Wiring::Groups(groups),
        ..model.clone()
    })
}

/// Runs the soft model with gates clamped per `mode` and the corresponding
/// hard model on the same inputs (eval mode) and compares them.
pub fn gate_degeneracy_check<T: Real>(
    model: &ModelGraph<T>,
    mode: &GateMode,
    inputs: &Tensor<T>,
    tol: f64,
) -> Result<DegeneracyReport> {
    let mut hard = harden(model, mode)?;
    let flags = mode.flags(model.blocks.len() - 1)?;
    let gates = flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    let mut soft = model.clone();
    let a = soft.predict(inputs, &ForwardOptions::eval().with_gates(gates))?;
    let b = hard.predict(inputs, &ForwardOptions::eval())?;
    let max_abs_diff = a.max_abs_diff(&b);
    let Wiring::Groups(groups) = &hard.wiring else {
        unreachable!("harden always yields groups")
    };
    Ok(DegeneracyReport {
        partition: groups.iter().map(|g| g.blocks.clone()).collect(),
        decomposition: hard.config.decomposition,
        max_abs_diff,
        equal: max_abs_diff <= tol,
    })
}
