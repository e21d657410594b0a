//! Synthetic, area-skewed classification data.
//!
//! Each area has its own label distribution drawn from a symmetric Dirichlet;
//! features are unit-variance Gaussians around fixed per-class centers. A
//! device emits records from whatever area it currently occupies, so mobility
//! shifts the label mix a client sees.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{AreaId, Device};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Dirichlet concentration of per-area label distributions.
    pub area_skew: f64,
    pub records_per_round_static: usize,
    pub records_per_move: usize,
    pub test_set_size: usize,
    /// Standard deviation of the class centers around the origin.
    pub center_scale: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            feature_dim: 8,
            area_skew: 0.3,
            records_per_round_static: 2,
            records_per_move: 4,
            test_set_size: 600,
            center_scale: 0.8,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("dataset: {m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be positive");
        }
        if !(self.area_skew > 0.0 && self.area_skew.is_finite()) {
            return bad("area_skew must be positive");
        }
        if self.test_set_size < 1 {
            return bad("test_set_size must be positive");
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return bad("center_scale must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub features: Vec<f64>,
    pub label: usize,
    /// Area the record was produced in.
    pub area: AreaId,
}

/// Label distribution per area plus the shared class centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaDistributions {
    pub label_probs: Vec<Vec<f64>>,
    pub centers: Vec<Vec<f64>>,
}

impl AreaDistributions {
    pub fn num_areas(&self) -> usize {
        self.label_probs.len()
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, area: AreaId, rng: &mut R) -> Record {
        let label = sample_categorical(&self.label_probs[area.0], rng);
        let features = self.centers[label]
            .iter()
            .map(|c| c + rng.sample::<f64, _>(StandardNormal))
            .collect();
        Record {
            features,
            label,
            area,
        }
    }

    /// Equal-weight mixture of the area label distributions.
    pub fn mixture(&self) -> Vec<f64> {
        let a = self.num_areas() as f64;
        (0..self.num_classes())
            .map(|c| self.label_probs.iter().map(|p| p[c]).sum::<f64>() / a)
            .collect()
    }
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Symmetric Dirichlet sample computed in log space so tiny concentrations
/// do not underflow: `ln G = ln G' + ln(U) / beta` with `G' ~ Gamma(beta + 1)`.
pub fn sample_dirichlet<R: Rng + ?Sized>(beta: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(beta + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / beta
        })
        .collect();
    crate::nn::softmax(&logs)
}

pub fn init_area_distributions(config: &DatasetConfig, num_areas: usize, seed: u64) -> Result<AreaDistributions> {
    config.validate()?;
    if num_areas == 0 {
        return Err(Error::InvalidConfig("at least one area required".into()));
    }
    let mut rng = seed::rng(seed, &[seed::AREAS]);
    let label_probs = (0..num_areas)
        .map(|_| sample_dirichlet(config.area_skew, config.num_classes, &mut rng))
        .collect();
    let centers = (0..config.num_classes)
        .map(|_| {
            (0..config.feature_dim)
                .map(|_| config.center_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    Ok(AreaDistributions {
        label_probs,
        centers,
    })
}

/// Records held by one device.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClientDataset {
    pub owner: usize,
    pub records: Vec<Record>,
}

impl ClientDataset {
    pub fn new(owner: usize) -> Self {
        Self {
            owner,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The most recent `limit` records, or all of them.
    pub fn recent(&self, limit: Option<usize>) -> &[Record] {
        match limit {
            Some(l) if l < self.records.len() => &self.records[self.records.len() - l..],
            _ => &self.records,
        }
    }
}

/// Appends this round's records for `device`: the static quota plus the
/// movement bonus when it changed area. Returns the number appended.
pub fn emit_records<R: Rng + ?Sized>(
    dataset: &mut ClientDataset,
    device: &Device,
    moved: bool,
    config: &DatasetConfig,
    dists: &AreaDistributions,
    rng: &mut R,
) -> usize {
    let count = config.records_per_round_static + if moved { config.records_per_move } else { 0 };
    dataset
        .records
        .extend((0..count).map(|_| dists.sample(device.area, rng)));
    count
}

/// Held-out evaluation set drawn from the equal-weight area mixture on a
/// dedicated stream.
pub fn global_test_set(config: &DatasetConfig, dists: &AreaDistributions, seed: u64) -> Vec<Record> {
    let mut rng = seed::rng(seed, &[seed::TEST_SET]);
    let a = dists.num_areas();
    (0..config.test_set_size)
        .map(|_| {
            let area = AreaId(rng.random_range(0..a));
            dists.sample(area, &mut rng)
        })
        .collect()
}

/// Writes records as CSV: `f0..f{d-1},label,area`.
pub fn write_records_csv<W: Write>(records: &[Record], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = records.first().map_or(0, |r| r.features.len());
    let mut header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("area".into());
    w.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = r.features.iter().map(f64::to_string).collect();
        row.push(r.label.to_string());
        row.push(r.area.0.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
