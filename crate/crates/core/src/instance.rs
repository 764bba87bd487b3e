//! Problem instances: generation, validation and the JSON file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::Rng;

pub const FORMAT_VERSION: u32 = 1;

/// Knobs of the random instance generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub fleet_size: u32,
    pub capacity_raw: f64,
    /// Raw demands are drawn uniformly from `1..=max_raw_demand`.
    pub max_raw_demand: u32,
    pub min_end_time: f64,
    pub max_end_time: f64,
    pub depot_end_time: f64,
    pub speed: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            fleet_size: 5,
            capacity_raw: 40.0,
            max_raw_demand: 10,
            min_end_time: 50.0,
            max_end_time: 10_000.0,
            depot_end_time: 10_000.0,
            speed: 0.014,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.fleet_size == 0 {
            return bad("fleet_size must be at least 1");
        }
        if !(self.capacity_raw > 0.0 && self.capacity_raw.is_finite()) {
            return bad("capacity_raw must be positive");
        }
        if self.max_raw_demand == 0 {
            return bad("max_raw_demand must be at least 1");
        }
        if f64::from(self.max_raw_demand) > self.capacity_raw {
            return bad("max_raw_demand must not exceed capacity_raw");
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return bad("speed must be positive");
        }
        if !(self.min_end_time > 0.0 && self.min_end_time <= self.max_end_time) {
            return bad("end-time range must satisfy 0 < min <= max");
        }
        if self.max_end_time > self.depot_end_time {
            return bad("customer end-times must not exceed the depot end-time");
        }
        Ok(())
    }
}

/// A static problem definition. Node 0 is the depot.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub coords: Vec<[f64; 2]>,
    /// Raw demand units as stored on disk.
    pub demand_raw: Vec<f64>,
    /// Demand as a fraction of vehicle capacity (`demand_raw / capacity_raw`).
    pub demand: Vec<f64>,
    /// Service deadlines in seconds.
    pub end_times: Vec<f64>,
    pub fleet_size: u32,
    pub capacity_raw: f64,
    /// Distance units per second.
    pub speed: f64,
    pub seed: Option<u64>,
}

impl Instance {
    /// Builds and validates an instance from raw node data.
    pub fn new(
        coords: Vec<[f64; 2]>,
        demand_raw: Vec<f64>,
        end_times: Vec<f64>,
        fleet_size: u32,
        capacity_raw: f64,
        speed: f64,
        seed: Option<u64>,
    ) -> Result<Self> {
        let demand = demand_raw.iter().map(|d| d / capacity_raw).collect();
        let inst = Instance {
            coords,
            demand_raw,
            demand,
            end_times,
            fleet_size,
            capacity_raw,
            speed,
            seed,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn num_customers(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        let fail = |m: String| Err(Error::Validation(m));
        if n < 2 {
            return fail(format!("need a depot and at least one customer, got {n} nodes"));
        }
        if self.demand_raw.len() != n || self.end_times.len() != n || self.demand.len() != n {
            return fail("node arrays have inconsistent lengths".into());
        }
        if self.fleet_size == 0 {
            return fail("fleet_size must be at least 1".into());
        }
        if !(self.capacity_raw > 0.0 && self.capacity_raw.is_finite()) {
            return fail(format!("capacity_raw must be positive, got {}", self.capacity_raw));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return fail(format!("speed must be positive, got {}", self.speed));
        }
        for (i, c) in self.coords.iter().enumerate() {
            if !c.iter().all(|v| (0.0..=1.0).contains(v)) {
                return fail(format!("node {i}: coordinate ({}, {}) outside [0,1]^2", c[0], c[1]));
            }
        }
        if self.demand_raw[0] != 0.0 {
            return fail(format!("depot demand must be 0, got {}", self.demand_raw[0]));
        }
        for i in 1..n {
            let d = self.demand[i];
            if !(d > 0.0 && d <= 1.0) {
                return fail(format!("node {i}: demand fraction {d} outside (0, 1]"));
            }
        }
        let depot_end = self.end_times[0];
        if !(depot_end > 0.0 && depot_end.is_finite()) {
            return fail(format!("depot end-time must be positive, got {depot_end}"));
        }
        for i in 1..n {
            let e = self.end_times[i];
            if !(e > 0.0 && e <= depot_end) {
                return fail(format!("node {i}: end-time {e} outside (0, {depot_end}]"));
            }
        }
        Ok(())
    }

    /// Euclidean distance between two nodes.
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        let n = self.num_nodes();
        for index in [i, j] {
            if index >= n {
                return Err(Error::Index { index, len: n });
            }
        }
        Ok(self.dist(i, j))
    }

    /// Unchecked distance for hot loops; panics on a bad index.
    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coords[i], self.coords[j]);
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    pub fn total_customer_demand(&self) -> f64 {
        self.demand[1..].iter().sum()
    }

    pub fn to_json(&self) -> String {
        let file = InstanceFile {
            version: FORMAT_VERSION,
            seed: self.seed,
            speed: self.speed,
            capacity_raw: self.capacity_raw,
            fleet_size: self.fleet_size,
            nodes: (0..self.num_nodes())
                .map(|i| NodeRecord {
                    x: self.coords[i][0],
                    y: self.coords[i][1],
                    demand_raw: self.demand_raw[i],
                    end_time: self.end_times[i],
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("instance serializes")
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: context.to_string(),
            message: format!("line {} column {}: {}", e.line(), e.column(), e),
        })?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Parse {
                context: context.to_string(),
                message: format!("unsupported instance format version {}", file.version),
            });
        }
        Instance::new(
            file.nodes.iter().map(|n| [n.x, n.y]).collect(),
            file.nodes.iter().map(|n| n.demand_raw).collect(),
            file.nodes.iter().map(|n| n.end_time).collect(),
            file.fleet_size,
            file.capacity_raw,
            file.speed,
            file.seed,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    version: u32,
    seed: Option<u64>,
    speed: f64,
    capacity_raw: f64,
    fleet_size: u32,
    nodes: Vec<NodeRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    x: f64,
    y: f64,
    demand_raw: f64,
    end_time: f64,
}

/// Draws a random instance with `num_customers` customers plus a depot.
///
/// Draw order from the seeded stream is fixed: all coordinates (depot first,
/// x then y per node), then customer demands, then customer end-times.
pub fn generate_instance(num_customers: usize, seed: u64, config: &GenerationConfig) -> Result<Instance> {
    if num_customers == 0 {
        return Err(Error::Config("num_customers must be at least 1".into()));
    }
    config.validate()?;
    let n = num_customers + 1;
    let mut rng = Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let x = rng.uniform();
            let y = rng.uniform();
            [x, y]
        })
        .collect();
    let mut demand_raw = vec![0.0; n];
    for d in demand_raw.iter_mut().skip(1) {
        *d = rng.int_inclusive(1, u64::from(config.max_raw_demand)) as f64;
    }
    let mut end_times = vec![config.depot_end_time; n];
    for e in end_times.iter_mut().skip(1) {
        *e = rng.uniform_range(config.min_end_time, config.max_end_time);
    }
    let inst = Instance::new(
        coords,
        demand_raw,
        end_times,
        config.fleet_size,
        config.capacity_raw,
        config.speed,
        Some(seed),
    )?;
    if num_customers >= 40 && *config == GenerationConfig::default() {
        let fleet_capacity = f64::from(inst.fleet_size);
        if fleet_capacity >= inst.total_customer_demand() {
            log::warn!(
                "instance seed {seed}: fleet capacity {fleet_capacity} covers total demand {:.3}",
                inst.total_customer_demand()
            );
        }
    }
    Ok(inst)
}
