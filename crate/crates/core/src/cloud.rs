//! Spot-instance regions behind per-region scale sets.
//!
//! The provider is clock-agnostic: every mutating call takes `now` and hands
//! back what the caller must schedule (boot completions) or tear down
//! (pilots on instances that disappeared).

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{RngStream, SimTime, SECONDS_PER_DAY};
use crate::workload::GIB;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("image not yet replicated to region `{0}`")]
    ImageUnavailable(String),
    #[error("unknown region index {0}")]
    UnknownRegion(usize),
}

/// Fixed-point currency, micro-units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(pub i64);

impl Money {
    pub fn from_f64(value: f64) -> Self {
        Money((value * 1e6).round() as i64)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // round half away from zero to cents
        let cents = (self.0 + self.0.signum() * 5_000) / 10_000;
        let sign = if cents < 0 { "-" } else { "" };
        write!(f, "{sign}{}.{:02}", cents.abs() / 100, cents.abs() % 100)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceType {
    pub name: String,
    pub cores: u32,
    pub memory_gib: u64,
}

impl InstanceType {
    /// 16 cores, 32 GiB.
    pub fn f16s_v2() -> Self {
        Self {
            name: "F16s_v2".into(),
            cores: 16,
            memory_gib: 32,
        }
    }

    pub fn memory(&self) -> u64 {
        self.memory_gib * GIB
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootDelay {
    pub min: f64,
    pub max: f64,
}

impl Default for BootDelay {
    fn default() -> Self {
        Self { min: 120.0, max: 300.0 }
    }
}

impl BootDelay {
    fn sample(&self, rng: &mut RngStream) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..self.max)
        } else {
            self.min
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    pub capacity: u32,
    /// preemptions per instance-day at zero load
    pub hazard_base: f64,
    pub hazard_load_coeff: f64,
    pub boot_delay: BootDelay,
    pub price_per_instance_day: f64,
    pub image_ready_at: Option<SimTime>,
}

impl Region {
    pub fn image_replicated(&self, now: SimTime) -> bool {
        self.image_ready_at.is_some_and(|t| now >= t)
    }

    /// Per-day hazard at `live` instances.
    pub fn hazard(&self, live: usize) -> f64 {
        let load = if self.capacity == 0 {
            0.0
        } else {
            live as f64 / f64::from(self.capacity)
        };
        self.hazard_base * (1.0 + self.hazard_load_coeff * load)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.hazard_base >= 0.0 && self.hazard_base.is_finite()) {
            return Err("hazard_base must be >= 0".into());
        }
        if !(self.hazard_load_coeff >= 0.0 && self.hazard_load_coeff.is_finite()) {
            return Err("hazard_load_coeff must be >= 0".into());
        }
        if !(self.price_per_instance_day > 0.0 && self.price_per_instance_day.is_finite()) {
            return Err("price_per_instance_day must be > 0".into());
        }
        if !(self.boot_delay.min >= 0.0 && self.boot_delay.max >= self.boot_delay.min) {
            return Err("boot_delay must satisfy 0 <= min <= max".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstanceState {
    Booting,
    Running,
    Preempted,
    Deallocated,
}

impl InstanceState {
    pub fn is_live(self) -> bool {
        matches!(self, InstanceState::Booting | InstanceState::Running)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudInstance {
    pub id: InstanceId,
    pub region: usize,
    pub cores: u32,
    pub memory: u64,
    pub state: InstanceState,
    pub created: SimTime,
    pub boot_time: SimTime,
    pub end_time: Option<SimTime>,
}

impl CloudInstance {
    pub fn alive_seconds(&self, now: SimTime) -> f64 {
        self.end_time.unwrap_or(now) - self.created
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScaleSet {
    pub target: u32,
    pub running: BTreeSet<InstanceId>,
    pub pending: BTreeSet<InstanceId>,
}

impl ScaleSet {
    pub fn live(&self) -> usize {
        self.running.len() + self.pending.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TargetOutcome {
    pub boots: Vec<(InstanceId, SimTime)>,
    pub deallocated: Vec<InstanceId>,
    pub unmet: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreemptionOutcome {
    pub preempted: Vec<InstanceId>,
    pub replacement_boots: Vec<(InstanceId, SimTime)>,
}

#[derive(Debug)]
pub struct CloudProvider {
    pub regions: Vec<Region>,
    pub instance_type: InstanceType,
    pub scale_sets: Vec<ScaleSet>,
    pub instances: Vec<CloudInstance>,
    /// refill preempted capacity immediately instead of at the next policy tick
    pub reconcile: bool,
    preempt_rngs: Vec<RngStream>,
    boot_rngs: Vec<RngStream>,
    instance_seconds: Vec<f64>,
    last_accrual: SimTime,
    pub preemptions: Vec<u64>,
    /// Sum of per-draw preemption probabilities; the expected preemption count.
    pub expected_preemptions: Vec<f64>,
    /// binomial variance of the preemption count, summed over draws
    pub preemption_variance: Vec<f64>,
    /// instance-seconds exposed to preemption draws
    pub exposure_seconds: Vec<f64>,
}

impl CloudProvider {
    pub fn new(regions: Vec<Region>, instance_type: InstanceType, reconcile: bool, master_seed: u64) -> Self {
        let n = regions.len();
        let preempt_rngs = regions
            .iter()
            .map(|r| RngStream::derive(master_seed, &format!("preemption/{}", r.name)))
            .collect();
        let boot_rngs = regions
            .iter()
            .map(|r| RngStream::derive(master_seed, &format!("boot/{}", r.name)))
            .collect();
        Self {
            regions,
            instance_type,
            scale_sets: vec![ScaleSet::default(); n],
            instances: Vec::new(),
            reconcile,
            preempt_rngs,
            boot_rngs,
            instance_seconds: vec![0.0; n],
            last_accrual: 0.0,
            preemptions: vec![0; n],
            expected_preemptions: vec![0.0; n],
            preemption_variance: vec![0.0; n],
            exposure_seconds: vec![0.0; n],
        }
    }

    pub fn instance(&self, id: InstanceId) -> &CloudInstance {
        &self.instances[id.0]
    }

    pub fn live(&self, region: usize) -> usize {
        self.scale_sets[region].live()
    }

    pub fn total_live(&self) -> usize {
        self.scale_sets.iter().map(ScaleSet::live).sum()
    }

    pub fn running_cores(&self) -> u64 {
        self.scale_sets
            .iter()
            .map(|s| s.running.len() as u64 * u64::from(self.instance_type.cores))
            .sum()
    }

    /// Starts image replication; every listed region is ready at `now + delay`.
    pub fn replicate_image(&mut self, regions: &[usize], delay: f64, now: SimTime) -> Vec<(usize, SimTime)> {
        regions
            .iter()
            .map(|&r| {
                let at = now + delay.max(0.0);
                self.regions[r].image_ready_at = Some(at);
                (r, at)
            })
            .collect()
    }

    /// Charges every live instance up to `now`. Returns (per-region, total) added.
    pub fn accrue_cost(&mut self, now: SimTime) -> (Vec<f64>, f64) {
        let dt = (now - self.last_accrual).max(0.0);
        self.last_accrual = now;
        let mut added = Vec::with_capacity(self.regions.len());
        for (r, set) in self.scale_sets.iter().enumerate() {
            let inst_secs = set.live() as f64 * dt;
            self.instance_seconds[r] += inst_secs;
            added.push(inst_secs * self.regions[r].price_per_instance_day / SECONDS_PER_DAY);
        }
        let total = added.iter().sum();
        (added, total)
    }

    pub fn region_cost(&self, region: usize) -> f64 {
        self.instance_seconds[region] * self.regions[region].price_per_instance_day / SECONDS_PER_DAY
    }

    pub fn total_cost(&self) -> f64 {
        (0..self.regions.len()).map(|r| self.region_cost(r)).sum()
    }

    /// Per-instance recomputation of cost, for conservation checks.
    pub fn cost_from_instances(&self, now: SimTime) -> f64 {
        self.instances
            .iter()
            .map(|i| i.alive_seconds(now) * self.regions[i.region].price_per_instance_day / SECONDS_PER_DAY)
            .sum()
    }

    fn start_boot(&mut self, region: usize, now: SimTime) -> (InstanceId, SimTime) {
        let id = InstanceId(self.instances.len());
        let ready = now + self.regions[region].boot_delay.sample(&mut self.boot_rngs[region]);
        self.instances.push(CloudInstance {
            id,
            region,
            cores: self.instance_type.cores,
            memory: self.instance_type.memory(),
            state: InstanceState::Booting,
            created: now,
            boot_time: ready,
            end_time: None,
        });
        self.scale_sets[region].pending.insert(id);
        (id, ready)
    }

    fn end_instance(&mut self, id: InstanceId, state: InstanceState, now: SimTime) {
        let inst = &mut self.instances[id.0];
        debug_assert!(inst.state.is_live());
        let set = &mut self.scale_sets[inst.region];
        set.pending.remove(&id);
        set.running.remove(&id);
        inst.state = state;
        inst.end_time = Some(now);
    }

    pub fn set_target(&mut self, region: usize, n: u32, now: SimTime) -> Result<TargetOutcome, CloudError> {
        let r = self.regions.get(region).ok_or(CloudError::UnknownRegion(region))?;
        if !r.image_replicated(now) {
            return Err(CloudError::ImageUnavailable(r.name.clone()));
        }
        let capacity = r.capacity;
        self.accrue_cost(now);
        self.scale_sets[region].target = n;
        let mut out = TargetOutcome {
            unmet: n.saturating_sub(capacity),
            ..TargetOutcome::default()
        };
        let want = n.min(capacity) as usize;
        let live = self.live(region);
        if want > live {
            for _ in live..want {
                out.boots.push(self.start_boot(region, now));
            }
        } else if want < live {
            let set = &self.scale_sets[region];
            let mut newest: Vec<InstanceId> = set.running.iter().chain(set.pending.iter()).copied().collect();
            newest.sort_unstable_by(|a, b| b.cmp(a));
            for id in newest.into_iter().take(live - want) {
                self.end_instance(id, InstanceState::Deallocated, now);
                out.deallocated.push(id);
            }
        }
        Ok(out)
    }

    /// Marks a booting instance running. False if it died while booting.
    pub fn complete_boot(&mut self, id: InstanceId) -> bool {
        let inst = &mut self.instances[id.0];
        if inst.state != InstanceState::Booting {
            return false;
        }
        inst.state = InstanceState::Running;
        let set = &mut self.scale_sets[inst.region];
        set.pending.remove(&id);
        set.running.insert(id);
        true
    }

    /// Independent Bernoulli preemption of every live instance over `dt` seconds.
    pub fn preemption_tick(&mut self, region: usize, dt: f64, now: SimTime) -> PreemptionOutcome {
        debug_assert!(dt > 0.0);
        self.accrue_cost(now);
        let live = self.live(region);
        let mut out = PreemptionOutcome::default();
        if live == 0 {
            return out;
        }
        let lambda = self.regions[region].hazard(live);
        let p = 1.0 - (-lambda * dt / SECONDS_PER_DAY).exp();
        self.expected_preemptions[region] += p * live as f64;
        self.preemption_variance[region] += p * (1.0 - p) * live as f64;
        self.exposure_seconds[region] += live as f64 * dt;
        if p > 0.0 {
            let set = &self.scale_sets[region];
            let ids: Vec<InstanceId> = set.pending.iter().chain(set.running.iter()).copied().collect::<BTreeSet<_>>().into_iter().collect();
            let rng = &mut self.preempt_rngs[region];
            for id in ids {
                if rng.gen::<f64>() < p {
                    out.preempted.push(id);
                }
            }
        }
        for &id in &out.preempted {
            self.end_instance(id, InstanceState::Preempted, now);
        }
        self.preemptions[region] += out.preempted.len() as u64;
        if self.reconcile {
            let want = self.scale_sets[region].target.min(self.regions[region].capacity) as usize;
            for _ in self.live(region)..want {
                out.replacement_boots.push(self.start_boot(region, now));
            }
        }
        out
    }

    pub fn total_preemptions(&self) -> u64 {
        self.preemptions.iter().sum()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for (r, set) in self.scale_sets.iter().enumerate() {
            if set.live() > self.regions[r].capacity as usize {
                return Err(format!("region {} over capacity", self.regions[r].name));
            }
        }
        Ok(())
    }
}

/// Fills regions in list order up to capacity.
pub fn split_by_preference(instances: u32, regions: &[Region]) -> Vec<u32> {
    let mut left = instances;
    regions
        .iter()
        .map(|r| {
            let take = left.min(r.capacity);
            left -= take;
            take
        })
        .collect()
}

/// What a provisioning policy gets to look at.
#[derive(Debug, Clone, Default)]
pub struct Observables {
    pub now: SimTime,
    pub live_instances: Vec<usize>,
    pub preemptions_since_last: Vec<u64>,
    pub spend_rate_per_day: f64,
    /// idle demand per VO, already clamped by VO caps
    pub demand_cores: u64,
    pub busy_cores: u64,
}

pub trait ProvisioningPolicy: Send {
    /// New per-region instance targets, or `None` to leave them alone.
    fn targets(&mut self, obs: &Observables, regions: &[Region], instance: &InstanceType) -> Option<Vec<u32>>;
}

/// Replays a piecewise-constant core target.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSchedule {
    /// (start time, cores); sorted by time
    pub entries: Vec<(SimTime, u64)>,
}

impl OperatorSchedule {
    pub fn cores_at(&self, now: SimTime) -> Option<u64> {
        self.entries.iter().rev().find(|(t, _)| *t <= now).map(|(_, c)| *c)
    }
}

impl ProvisioningPolicy for OperatorSchedule {
    fn targets(&mut self, obs: &Observables, regions: &[Region], instance: &InstanceType) -> Option<Vec<u32>> {
        let cores = self.cores_at(obs.now)?;
        let n = cores.div_ceil(u64::from(instance.cores)) as u32;
        Some(split_by_preference(n, regions))
    }
}

/// Sizes the fleet to demand, never exceeding a daily spend cap.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptivePolicy {
    pub spend_cap_per_day: f64,
    pub max_cores: Option<u64>,
}

impl ProvisioningPolicy for AdaptivePolicy {
    fn targets(&mut self, obs: &Observables, regions: &[Region], instance: &InstanceType) -> Option<Vec<u32>> {
        let mut cores = obs.busy_cores + obs.demand_cores;
        if let Some(max) = self.max_cores {
            cores = cores.min(max);
        }
        let mut want = cores.div_ceil(u64::from(instance.cores)) as u32;
        let mut budget = self.spend_cap_per_day;
        let mut out = Vec::with_capacity(regions.len());
        for r in regions {
            let affordable = (budget / r.price_per_instance_day).floor().max(0.0) as u32;
            let take = want.min(r.capacity).min(affordable);
            budget -= f64::from(take) * r.price_per_instance_day;
            want -= take;
            out.push(take);
        }
        Some(out)
    }
}
