//! Four-objective deployment cost with multiplicative punishment.
//!
//! Each objective is normalized into `[0, w_j]`, so with weights summing to one
//! the signed aggregate `c1 + c2 - c3 - c4` stays in `[-1, 1]`. The punishment
//! factor multiplies the aggregate shifted by one, which keeps the multiplicand
//! non-negative and makes every violation strictly more expensive.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{count_violations, AreaId, Device, EnvState, ModelSpec, Placement};
use crate::error::{Error, Result};

/// Guards the priority normalizer against an all-zero roster.
pub const PRIORITY_EPS: f64 = 1e-12;

/// Priority of a device that has not reported a local accuracy yet.
pub const UNKNOWN_PRIORITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl ObjectiveWeights {
    pub fn new(w1: f64, w2: f64, w3: f64, w4: f64) -> Result<Self> {
        let w = Self { w1, w2, w3, w4 };
        w.validate()?;
        Ok(w)
    }

    pub fn equal() -> Self {
        Self {
            w1: 0.25,
            w2: 0.25,
            w3: 0.25,
            w4: 0.25,
        }
    }

    /// Scales the given raw weights so they sum to one, keeping zero weights
    /// at zero.
    pub fn normalized(w1: f64, w2: f64, w3: f64, w4: f64) -> Result<Self> {
        let sum = w1 + w2 + w3 + w4;
        if !(sum > 0.0) || [w1, w2, w3, w4].iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidConfig(
                "weights must be non-negative with a positive sum".into(),
            ));
        }
        Self::new(w1 / sum, w2 / sum, w3 / sum, w4 / sum)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w1, self.w2, self.w3, self.w4]
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.as_array();
        if ws.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidConfig("each weight must lie in [0,1]".into()));
        }
        let sum: f64 = ws.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "weights must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self::equal()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub pun: u32,
    pub raw: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn from_objectives(c1: f64, c2: f64, c3: f64, c4: f64, pun: u32) -> Self {
        let raw = c1 + c2 - c3 - c4;
        Self {
            c1,
            c2,
            c3,
            c4,
            pun,
            raw,
            total: (raw + 1.0) * f64::from(pun),
        }
    }
}

/// Fraction of active hosts, scaled by `w1`.
pub fn objective_active_hosts(placement: &Placement, w1: f64) -> Result<f64> {
    let n = placement.len();
    if n == 0 {
        return Err(Error::EmptyEnvironment);
    }
    Ok(w1 * placement.count() as f64 / n as f64)
}

/// Low when the selection spans many areas and moves a lot; 1 for an empty
/// selection.
pub fn variation_rate(selected: &[&Device], num_areas: usize) -> f64 {
    let m = selected.len();
    if m == 0 {
        return 1.0;
    }
    let distinct: BTreeSet<AreaId> = selected.iter().map(|d| d.area).collect();
    let mobile = selected.iter().filter(|d| d.high_mobility).count();
    let area_share = distinct.len() as f64 / m.min(num_areas.max(1)) as f64;
    let mobile_share = mobile as f64 / m as f64;
    1.0 - (area_share + mobile_share) / 2.0
}

pub fn objective_diversity(selected: &[&Device], num_areas: usize, w2: f64) -> f64 {
    w2 * variation_rate(selected, num_areas)
}

/// Share of the roster's total priority captured by the placement, scaled by `w3`.
pub fn objective_priority(placement: &Placement, priorities: &[f64], w3: f64) -> Result<f64> {
    if priorities.len() != placement.len() {
        return Err(Error::DimensionMismatch {
            context: "priorities",
            expected: placement.len(),
            actual: priorities.len(),
        });
    }
    let captured: f64 = placement.selected().map(|i| priorities[i]).sum();
    let total: f64 = priorities.iter().sum();
    Ok(w3 * captured / total.max(PRIORITY_EPS))
}

pub fn request_fulfillment_rate(selected: &[&Device], da: &BTreeSet<AreaId>) -> f64 {
    if da.is_empty() {
        return 1.0;
    }
    if selected.is_empty() {
        return 0.0;
    }
    let hits = selected.iter().filter(|d| da.contains(&d.area)).count();
    hits as f64 / selected.len() as f64
}

pub fn objective_requests(selected: &[&Device], da: &BTreeSet<AreaId>, w4: f64) -> f64 {
    w4 * request_fulfillment_rate(selected, da)
}

/// Priority from how closely a client's last local accuracy tracks the
/// global model.
pub fn device_priority(last_local_accuracy: Option<f64>, global_accuracy: f64) -> f64 {
    match last_local_accuracy {
        Some(local) => (1.0 - (local - global_accuracy).abs()).clamp(0.0, 1.0),
        None => UNKNOWN_PRIORITY,
    }
}

/// Everything besides the state and action that the cost depends on.
#[derive(Debug, Clone, Copy)]
pub struct CostContext<'a> {
    pub devices: &'a [Device],
    pub spec: &'a ModelSpec,
    pub priorities: &'a [f64],
    pub weights: &'a ObjectiveWeights,
    pub t_min: u32,
    pub num_areas: usize,
}

pub fn total_cost(state: &EnvState, action: &Placement, ctx: &CostContext<'_>) -> Result<CostBreakdown> {
    let n = ctx.devices.len();
    if n == 0 {
        return Err(Error::EmptyEnvironment);
    }
    action.ensure_len(n)?;
    if state.k.len() != n {
        return Err(Error::DimensionMismatch {
            context: "state placement",
            expected: n,
            actual: state.k.len(),
        });
    }
    let selected: Vec<&Device> = action.selected().map(|i| &ctx.devices[i]).collect();
    let w = ctx.weights;
    let c1 = objective_active_hosts(action, w.w1)?;
    let c2 = objective_diversity(&selected, ctx.num_areas, w.w2);
    let c3 = objective_priority(action, ctx.priorities, w.w3)?;
    let c4 = objective_requests(&selected, &state.da, w.w4);
    let pun = 1 + count_violations(action, ctx.devices, ctx.spec, ctx.t_min)?;
    Ok(CostBreakdown::from_objectives(c1, c2, c3, c4, pun))
}

/// Exhaustive minimizer over all `2^n` placements. Ties keep the first
/// placement in binary counting order.
pub fn brute_force_optimum(state: &EnvState, ctx: &CostContext<'_>) -> Result<(Placement, CostBreakdown)> {
    let n = ctx.devices.len();
    if n > 20 {
        return Err(Error::InvalidConfig(format!(
            "exhaustive search over {n} devices is too large"
        )));
    }
    let mut best: Option<(Placement, CostBreakdown)> = None;
    for mask in 0u32..(1u32 << n) {
        let k = Placement::from_indices(n, (0..n).filter(|i| mask & (1 << i) != 0));
        let c = total_cost(state, &k, ctx)?;
        if best.as_ref().is_none_or(|(_, b)| c.total < b.total) {
            best = Some((k, c));
        }
    }
    Ok(best.expect("at least one placement"))
}
