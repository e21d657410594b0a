//! Domain types shared across the simulator and the feasibility predicates
//! that back the punishment term of the cost function.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a geographic area served by one orchestrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AreaId(pub usize);

impl AreaId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A volunteer fog device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: usize,
    pub cpu: f64,
    pub memory: f64,
    pub diskspace: f64,
    pub battery: f64,
    pub area: AreaId,
    /// Whole rounds the device will remain in its current area after the
    /// current one. Zero means it leaves during the current round.
    pub availability: u32,
    pub high_mobility: bool,
    pub rounds_participated: u32,
    pub last_local_accuracy: Option<f64>,
    /// Mean dwell time of this device's mobility profile, in rounds.
    pub dwell_mean: f64,
}

impl Device {
    /// A device with the given resources, resident in area 0 with no history.
    pub fn with_resources(id: usize, cpu: f64, memory: f64, diskspace: f64, battery: f64) -> Self {
        Self {
            id,
            cpu,
            memory,
            diskspace,
            battery,
            area: AreaId(0),
            availability: 0,
            high_mobility: false,
            rounds_participated: 0,
            last_local_accuracy: None,
            dwell_mean: 1.0,
        }
    }

    pub fn is_valid(&self, num_areas: usize) -> bool {
        [self.cpu, self.memory, self.diskspace, self.battery]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.area.0 < num_areas
    }
}

/// Resource demands and priority of the deployable model container.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub cpu: f64,
    pub memory: f64,
    pub diskspace: f64,
    pub battery: f64,
    pub priority: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let demands = [self.cpu, self.memory, self.diskspace, self.battery];
        if demands.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "model demands must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.priority) {
            return Err(Error::InvalidConfig("model priority must lie in [0,1]".into()));
        }
        Ok(())
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            cpu: 2.0,
            memory: 2.0,
            diskspace: 2.0,
            battery: 2.0,
            priority: 0.5,
        }
    }
}

/// Deployment vector: entry `i` is true when the model runs on device `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Placement(Vec<bool>);

impl Placement {
    pub fn zeros(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn from_indices(n: usize, selected: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; n];
        for i in selected {
            bits[i] = true;
        }
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_selected(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.0[i] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    /// Selected device indices in ascending order.
    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn ensure_len(&self, n: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(Error::MalformedAction {
                expected: n,
                actual: self.0.len(),
            });
        }
        Ok(())
    }
}

/// MDP state `(k, AC, r, DA)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub k: Placement,
    /// Global-accuracy change produced by the previous round.
    pub ac: f64,
    pub r: usize,
    /// Areas with a pending orchestrator deployment request.
    pub da: BTreeSet<AreaId>,
}

impl EnvState {
    pub fn initial(n: usize) -> Self {
        Self {
            k: Placement::zeros(n),
            ac: 0.0,
            r: 0,
            da: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: EnvState,
    pub a: Placement,
    pub c: f64,
    pub s_next: EnvState,
}

/// Per-round outcome of the federated round and the cost charged for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected: Vec<usize>,
    pub received: Vec<usize>,
    pub accepted: bool,
    pub global_accuracy: f64,
    pub cost: crate::cost::CostBreakdown,
}

/// Resource constraints: every demand at most the device's capacity.
pub fn fits(device: &Device, spec: &ModelSpec) -> bool {
    resource_violations(device, spec) == 0
}

pub fn available_long_enough(device: &Device, t_min: u32) -> bool {
    device.availability >= t_min
}

fn resource_violations(device: &Device, spec: &ModelSpec) -> u32 {
    [
        (spec.cpu, device.cpu),
        (spec.memory, device.memory),
        (spec.diskspace, device.diskspace),
        (spec.battery, device.battery),
    ]
    .iter()
    .filter(|(demand, capacity)| demand > capacity)
    .count() as u32
}

/// Violated constraint instances over the selected devices: one per
/// exceeded resource and one for insufficient availability.
pub fn count_violations(
    placement: &Placement,
    devices: &[Device],
    spec: &ModelSpec,
    t_min: u32,
) -> Result<u32> {
    placement.ensure_len(devices.len())?;
    Ok(placement
        .selected()
        .map(|i| {
            let d = &devices[i];
            resource_violations(d, spec) + u32::from(!available_long_enough(d, t_min))
        })
        .sum())
}
