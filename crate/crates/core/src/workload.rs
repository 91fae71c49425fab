//! Multi-VO job populations built from campaign descriptions.

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{RngStream, SimTime, SECONDS_PER_DAY, SECONDS_PER_HOUR};

pub const GIB: u64 = 1 << 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("invalid config at `{path}`: {reason}")]
    ConfigInvalid { path: String, reason: String },
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> WorkloadError {
    WorkloadError::ConfigInvalid {
        path: path.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualOrganization {
    pub name: String,
    /// Lower is more important.
    pub priority_rank: u32,
    pub core_cap: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JobId(pub usize);

/// Per-job CPU demand in core-seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum CpuDistribution {
    Deterministic { value: f64 },
    /// `sigma` is the standard deviation of the underlying normal.
    LogNormal { mean: f64, sigma: f64 },
    Exponential { mean: f64 },
    Uniform { min: f64, max: f64 },
}

impl CpuDistribution {
    pub fn mean(&self) -> f64 {
        match *self {
            CpuDistribution::Deterministic { value } => value,
            CpuDistribution::LogNormal { mean, .. } => mean,
            CpuDistribution::Exponential { mean } => mean,
            CpuDistribution::Uniform { min, max } => 0.5 * (min + max),
        }
    }

    fn validate(&self, path: &str) -> Result<(), WorkloadError> {
        let ok = match *self {
            CpuDistribution::Deterministic { value } => value.is_finite() && value > 0.0,
            CpuDistribution::LogNormal { mean, sigma } => {
                mean.is_finite() && mean > 0.0 && sigma.is_finite() && sigma >= 0.0
            }
            CpuDistribution::Exponential { mean } => mean.is_finite() && mean > 0.0,
            CpuDistribution::Uniform { min, max } => min.is_finite() && min > 0.0 && max >= min,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(path, "distribution needs a finite, positive mean"))
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match *self {
            CpuDistribution::Deterministic { value } => value,
            CpuDistribution::LogNormal { mean, sigma } => {
                if sigma == 0.0 {
                    return mean;
                }
                let mu = mean.ln() - 0.5 * sigma * sigma;
                LogNormal::new(mu, sigma).expect("validated").sample(rng)
            }
            CpuDistribution::Exponential { mean } => {
                Exp::new(1.0 / mean).expect("validated").sample(rng)
            }
            CpuDistribution::Uniform { min, max } => {
                if max > min {
                    rng.gen_range(min..max)
                } else {
                    min
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Arrival {
    /// Every job submitted at `at`.
    Burst {
        #[serde(default)]
        at: SimTime,
    },
    /// Exponential inter-arrival times starting at `start`.
    Poisson {
        rate_per_hour: f64,
        #[serde(default)]
        start: SimTime,
    },
}

impl Default for Arrival {
    fn default() -> Self {
        Arrival::Burst { at: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub name: String,
    pub vo: String,
    pub user: String,
    pub job_count: usize,
    pub cores_per_job: u32,
    pub mem_per_core: u64,
    pub cpu_seconds: CpuDistribution,
    pub io_profile: String,
    pub arrival: Arrival,
}

impl Campaign {
    pub fn validate(&self, path: &str) -> Result<(), WorkloadError> {
        if self.job_count < 1 {
            return Err(invalid(format!("{path}.job_count"), "must be >= 1"));
        }
        if self.cores_per_job < 1 {
            return Err(invalid(format!("{path}.cores_per_job"), "must be >= 1"));
        }
        if self.mem_per_core == 0 {
            return Err(invalid(format!("{path}.mem_per_core_gib"), "must be > 0"));
        }
        self.cpu_seconds.validate(&format!("{path}.cpu_seconds"))?;
        if let Arrival::Poisson { rate_per_hour, .. } = self.arrival {
            if !(rate_per_hour.is_finite() && rate_per_hour > 0.0) {
                return Err(invalid(format!("{path}.arrival.rate_per_hour"), "must be > 0"));
            }
        }
        Ok(())
    }

    /// Expected total demand in core-hours.
    pub fn expected_core_hours(&self) -> f64 {
        self.job_count as f64 * self.cpu_seconds.mean() / SECONDS_PER_HOUR
    }
}

/// Built-in campaign shapes addressable by name.
pub fn campaign_preset(name: &str) -> Option<Campaign> {
    let base = |job_count, cores, cpu: CpuDistribution, io: &str| Campaign {
        name: name.to_string(),
        vo: String::new(),
        user: String::new(),
        job_count,
        cores_per_job: cores,
        mem_per_core: 2 * GIB,
        cpu_seconds: cpu,
        io_profile: io.to_string(),
        arrival: Arrival::Burst { at: 0.0 },
    };
    let preset = match name {
        // 20k likelihood fits of ~2 CPU-days each.
        "dimuon" => base(
            20_000,
            1,
            CpuDistribution::LogNormal {
                mean: 2.0 * SECONDS_PER_DAY,
                sigma: 0.2,
            },
            "cms-default",
        ),
        // Event generation; 8-core jobs, placeholder runtimes.
        "vvh-gen" => base(
            10_000,
            8,
            CpuDistribution::LogNormal {
                mean: 8.0 * 6.0 * SECONDS_PER_HOUR,
                sigma: 0.3,
            },
            "cms-default",
        ),
        "top-w" => base(
            20_000,
            1,
            CpuDistribution::LogNormal {
                mean: 12.0 * SECONDS_PER_HOUR,
                sigma: 0.3,
            },
            "cms-default",
        ),
        "backfill-generic" => base(
            300_000,
            1,
            CpuDistribution::LogNormal {
                mean: 12.0 * SECONDS_PER_HOUR,
                sigma: 0.5,
            },
            "cms-light",
        ),
        _ => return None,
    };
    Some(preset)
}

pub const CAMPAIGN_PRESETS: [&str; 4] = ["dimuon", "vvh-gen", "top-w", "backfill-generic"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JobState {
    Queued,
    Running,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Retention {
    /// Preempted jobs restart from scratch.
    #[default]
    None,
    /// Preempted jobs keep their accrued progress.
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub id: JobId,
    pub campaign: usize,
    pub vo: VoId,
    pub user: UserId,
    pub cores: u32,
    pub memory: u64,
    pub cpu_seconds_total: f64,
    pub cpu_seconds_done: f64,
    pub state: JobState,
    pub preempt_count: u32,
    pub submit_time: SimTime,
    pub start_time: Option<SimTime>,
    pub finish_time: Option<SimTime>,
    /// Efficiency of the most recent run segment.
    pub efficiency: f64,
}

impl Job {
    pub fn remaining(&self) -> f64 {
        (self.cpu_seconds_total - self.cpu_seconds_done).max(0.0)
    }

    /// Wall time needed to finish on `cores` cores at `efficiency`.
    pub fn wall_to_complete(&self, cores: u32, efficiency: f64) -> f64 {
        self.remaining() / (f64::from(cores) * efficiency)
    }
}

pub fn job_requirements(job: &Job) -> (u32, u64) {
    (job.cores, job.memory)
}

/// Adds `slot_cores * wall_seconds * efficiency` CPU-seconds, clamped at the
/// job total. Returns the amount actually added. Reaching the total marks the
/// job completed.
pub fn accrue_progress(job: &mut Job, slot_cores: u32, wall_seconds: f64, efficiency: f64) -> f64 {
    debug_assert!(efficiency > 0.0 && efficiency <= 1.0);
    let want = f64::from(slot_cores) * wall_seconds.max(0.0) * efficiency;
    let added = want.min(job.remaining());
    job.cpu_seconds_done += added;
    // Absorb float dust so completion is exact.
    if job.remaining() <= job.cpu_seconds_total * 1e-12 {
        job.cpu_seconds_done = job.cpu_seconds_total;
        job.state = JobState::Completed;
    }
    added
}

pub fn requeue_on_preemption(job: &mut Job, retention: Retention) {
    debug_assert_eq!(job.state, JobState::Running);
    job.state = JobState::Queued;
    job.preempt_count += 1;
    if retention == Retention::None {
        job.cpu_seconds_done = 0.0;
    }
}

#[derive(Debug, Clone)]
pub struct UserInfo {
    pub name: String,
    pub vo: VoId,
}

/// Materialized jobs plus the VO/user tables they index into.
#[derive(Debug, Clone)]
pub struct Workload {
    pub vos: Vec<VirtualOrganization>,
    pub users: Vec<UserInfo>,
    pub campaigns: Vec<Campaign>,
    pub jobs: Vec<Job>,
}

impl Workload {
    pub fn vo_id(&self, name: &str) -> Option<VoId> {
        self.vos.iter().position(|v| v.name == name).map(VoId)
    }

    pub fn campaign_index(&self, name: &str) -> Option<usize> {
        self.campaigns.iter().position(|c| c.name == name)
    }

    pub fn total_cpu_seconds(&self, campaign: usize) -> f64 {
        self.jobs
            .iter()
            .filter(|j| j.campaign == campaign)
            .map(|j| j.cpu_seconds_total)
            .sum()
    }
}

pub fn validate_vos(vos: &[VirtualOrganization]) -> Result<(), WorkloadError> {
    for (i, vo) in vos.iter().enumerate() {
        if vo.core_cap == Some(0) {
            return Err(invalid(format!("vos.{i}.core_cap"), "must be > 0"));
        }
        if vos[..i].iter().any(|o| o.priority_rank == vo.priority_rank) {
            return Err(invalid(
                format!("vos.{i}.priority_rank"),
                "priority ranks must be unique",
            ));
        }
        if vos[..i].iter().any(|o| o.name == vo.name) {
            return Err(invalid(format!("vos.{i}.name"), "duplicate VO name"));
        }
    }
    Ok(())
}

/// Materializes every campaign's jobs in campaign order. Runtimes and arrival
/// times come from per-campaign streams, so adding a campaign leaves the
/// draws of the others untouched.
pub fn build_campaigns(
    vos: &[VirtualOrganization],
    campaigns: &[Campaign],
    master_seed: u64,
) -> Result<Workload, WorkloadError> {
    validate_vos(vos)?;
    let mut users: Vec<UserInfo> = Vec::new();
    let mut jobs = Vec::new();
    for (ci, campaign) in campaigns.iter().enumerate() {
        let path = format!("campaigns.{ci}");
        campaign.validate(&path)?;
        if campaigns[..ci].iter().any(|c| c.name == campaign.name) {
            return Err(invalid(format!("{path}.name"), "duplicate campaign name"));
        }
        let vo = vos
            .iter()
            .position(|v| v.name == campaign.vo)
            .map(VoId)
            .ok_or_else(|| invalid(format!("{path}.vo"), format!("unknown VO `{}`", campaign.vo)))?;
        let user = match users
            .iter()
            .position(|u| u.name == campaign.user && u.vo == vo)
        {
            Some(u) => UserId(u),
            None => {
                users.push(UserInfo {
                    name: campaign.user.clone(),
                    vo,
                });
                UserId(users.len() - 1)
            }
        };
        let mut runtime_rng = RngStream::derive(master_seed, &format!("workload/runtime/{}", campaign.name));
        let mut arrival_rng = RngStream::derive(master_seed, &format!("workload/arrival/{}", campaign.name));
        let mut clock = match campaign.arrival {
            Arrival::Burst { at } => at,
            Arrival::Poisson { start, .. } => start,
        };
        let memory = u64::from(campaign.cores_per_job) * campaign.mem_per_core;
        for _ in 0..campaign.job_count {
            let submit_time = match campaign.arrival {
                Arrival::Burst { at } => at,
                Arrival::Poisson { rate_per_hour, .. } => {
                    let gap = Exp::new(rate_per_hour / SECONDS_PER_HOUR)
                        .expect("validated")
                        .sample(&mut arrival_rng);
                    clock += gap;
                    clock
                }
            };
            let cpu = campaign.cpu_seconds.sample(&mut runtime_rng);
            jobs.push(Job {
                id: JobId(jobs.len()),
                campaign: ci,
                vo,
                user,
                cores: campaign.cores_per_job,
                memory,
                cpu_seconds_total: cpu,
                cpu_seconds_done: 0.0,
                state: JobState::Queued,
                preempt_count: 0,
                submit_time,
                start_time: None,
                finish_time: None,
                efficiency: 1.0,
            });
        }
    }
    Ok(Workload {
        vos: vos.to_vec(),
        users,
        campaigns: campaigns.to_vec(),
        jobs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vos() -> Vec<VirtualOrganization> {
        vec![
            VirtualOrganization {
                name: "UCSD".into(),
                priority_rank: 0,
                core_cap: Some(20_000),
            },
            VirtualOrganization {
                name: "Fermilab".into(),
                priority_rank: 1,
                core_cap: None,
            },
        ]
    }

    fn campaign(name: &str) -> Campaign {
        let mut c = campaign_preset(name).unwrap();
        c.vo = "UCSD".into();
        c.user = "alice".into();
        c
    }

    #[test]
    fn dimuon_demand_envelope() {
        let c = campaign("dimuon");
        // 20_000 fits x 2 CPU-days x 24 h
        assert_eq!(c.expected_core_hours(), 960_000.0);
        let w = build_campaigns(&vos(), &[c], 3).unwrap();
        let total: f64 = w.total_cpu_seconds(0) / SECONDS_PER_HOUR;
        assert!((total / 960_000.0 - 1.0).abs() < 0.01, "{total}");
    }

    #[test]
    fn single_deterministic_job() {
        let mut c = campaign("top-w");
        c.job_count = 1;
        c.cpu_seconds = CpuDistribution::Deterministic { value: 3600.0 };
        let w = build_campaigns(&vos(), &[c], 3).unwrap();
        assert_eq!(w.jobs.len(), 1);
        assert_eq!(w.jobs[0].cpu_seconds_total, 3600.0);
        assert_eq!(w.jobs[0].cores, 1);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cs = [campaign("dimuon"), {
            let mut c = campaign("top-w");
            c.arrival = Arrival::Poisson {
                rate_per_hour: 50.0,
                start: 0.0,
            };
            c
        }];
        let a = build_campaigns(&vos(), &cs, 11).unwrap();
        let b = build_campaigns(&vos(), &cs, 11).unwrap();
        let c = build_campaigns(&vos(), &cs, 12).unwrap();
        let cpu = |w: &Workload| w.jobs.iter().map(|j| (j.cpu_seconds_total, j.submit_time)).collect::<Vec<_>>();
        assert_eq!(cpu(&a), cpu(&b));
        assert_ne!(cpu(&a), cpu(&c));
    }

    #[test]
    fn adding_a_campaign_keeps_other_draws() {
        let a = build_campaigns(&vos(), &[campaign("dimuon")], 5).unwrap();
        let b = build_campaigns(&vos(), &[campaign("top-w"), campaign("dimuon")], 5).unwrap();
        let tail: Vec<f64> = b.jobs.iter().filter(|j| j.campaign == 1).map(|j| j.cpu_seconds_total).collect();
        let head: Vec<f64> = a.jobs.iter().map(|j| j.cpu_seconds_total).collect();
        assert_eq!(head, tail);
    }

    #[test]
    fn requirements_follow_memory_per_core() {
        let mut c = campaign("vvh-gen");
        c.job_count = 1;
        let w = build_campaigns(&vos(), &[c.clone()], 1).unwrap();
        assert_eq!(job_requirements(&w.jobs[0]), (8, 16 * GIB));
        c.cores_per_job = 1;
        let w = build_campaigns(&vos(), &[c.clone()], 1).unwrap();
        assert_eq!(job_requirements(&w.jobs[0]), (1, 2 * GIB));
        c.cores_per_job = 16;
        let w = build_campaigns(&vos(), &[c], 1).unwrap();
        assert_eq!(job_requirements(&w.jobs[0]), (16, 32 * GIB));
    }

    #[test]
    fn unknown_vo_reports_path() {
        let mut c = campaign("dimuon");
        c.vo = "ATLAS".into();
        let err = build_campaigns(&vos(), &[c], 1).unwrap_err();
        assert!(matches!(err, WorkloadError::ConfigInvalid { ref path, .. } if path == "campaigns.0.vo"));
    }

    #[test]
    fn invalid_fields_rejected() {
        let mut c = campaign("dimuon");
        c.job_count = 0;
        assert!(build_campaigns(&vos(), &[c], 1).is_err());
        let mut c = campaign("dimuon");
        c.cpu_seconds = CpuDistribution::Exponential { mean: -1.0 };
        assert!(build_campaigns(&vos(), &[c], 1).is_err());
        let mut v = vos();
        v[1].priority_rank = 0;
        assert!(build_campaigns(&v, &[], 1).is_err());
    }

    fn running_job(total: f64, done: f64) -> Job {
        Job {
            id: JobId(0),
            campaign: 0,
            vo: VoId(0),
            user: UserId(0),
            cores: 8,
            memory: 16 * GIB,
            cpu_seconds_total: total,
            cpu_seconds_done: done,
            state: JobState::Running,
            preempt_count: 0,
            submit_time: 0.0,
            start_time: Some(0.0),
            finish_time: None,
            efficiency: 1.0,
        }
    }

    #[test]
    fn progress_accrual() {
        let mut j = running_job(1e6, 0.0);
        assert_eq!(accrue_progress(&mut j, 8, 1000.0, 1.0), 8000.0);
        let mut j = running_job(1e6, 0.0);
        assert!((accrue_progress(&mut j, 8, 1000.0, 0.9) - 7200.0).abs() < 1e-9);
        let mut j = running_job(1000.0, 900.0);
        assert_eq!(j.wall_to_complete(8, 1.0), 12.5);
        assert_eq!(accrue_progress(&mut j, 8, 50.0, 1.0), 100.0);
        assert_eq!(j.state, JobState::Completed);
        assert_eq!(j.cpu_seconds_done, j.cpu_seconds_total);
    }

    #[test]
    fn preemption_retention_policies() {
        let mut j = running_job(1000.0, 400.0);
        requeue_on_preemption(&mut j, Retention::None);
        assert_eq!(j.state, JobState::Queued);
        assert_eq!(j.preempt_count, 1);
        assert_eq!(j.cpu_seconds_done, 0.0);
        let mut j = running_job(1000.0, 400.0);
        requeue_on_preemption(&mut j, Retention::Checkpoint);
        assert_eq!(j.cpu_seconds_done, 400.0);
    }
}
