//! Scenario orchestration: builds every component from a config, drives them
//! from one event queue, samples the time series and writes the summary.

use std::collections::BTreeSet;

use thiserror::Error;
use toml::{Table, Value};

use crate::cdn::{DataLayer, IoProfile};
use crate::cloud::{AdaptivePolicy, CloudError, CloudProvider, InstanceId, InstanceState, Money, Observables, OperatorSchedule, ProvisioningPolicy};
use crate::config::{from_tree, set_path, ConfigError, PolicySpec, ScenarioConfig};
use crate::kernel::{Event, Kernel, SimTime, SECONDS_PER_DAY, SECONDS_PER_HOUR};
use crate::pool::{Placement, PlacementHandle, Pool, SlotId, SlotSpec};
use crate::wms::{
    accounting_summary, factory_dispatch, frontend_assess, pilot_join, pilot_terminate, requeue_evicted, ComputeEntrypoint, Credential,
    CredentialMap, DecisionTrace, EndReason, Frontend, Ledger, Pilot, PilotId, PilotState, RecordKind, VoPressure,
};
use crate::workload::{build_campaigns, accrue_progress, JobId, JobState, Retention, VoId, Workload};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cloud: {0}")]
    Cloud(#[from] CloudError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompareError {
    #[error("campaign `{0}` missing from a summary")]
    CampaignMissing(String),
    #[error("campaign `{0}` did not finish within the horizon")]
    CampaignIncomplete(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesRecord {
    pub time_s: SimTime,
    pub instances_live: Vec<u32>,
    pub instances_pending: Vec<u32>,
    pub provisioned_cores: u64,
    pub busy_cores: Vec<u64>,
    pub idle_cores: u64,
    pub queue_depth: Vec<u64>,
    pub cum_preemptions: u64,
    pub cum_cost: Money,
    pub cache_hit_rate: Vec<Option<f64>>,
    pub mean_efficiency: Option<f64>,
}

impl TimeSeriesRecord {
    pub fn total_busy(&self) -> u64 {
        self.busy_cores.iter().sum()
    }
}

/// Column names for the series, in output order.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesLayout {
    pub regions: Vec<String>,
    pub vos: Vec<String>,
    pub sites: Vec<String>,
}

/// Per-sample bookkeeping that is not part of the CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleAux {
    pub last_join: Option<SimTime>,
    pub last_negotiation: Option<SimTime>,
    /// booting plus running instances
    pub live_instances: usize,
    /// policy ticks handled so far, retries included
    pub policy_epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSummary {
    pub name: String,
    pub vo: String,
    pub user: String,
    pub jobs: usize,
    pub completed: usize,
    pub start: SimTime,
    pub last_completion: Option<SimTime>,
}

impl CampaignSummary {
    /// Start of the campaign to its last completion, once every job is done.
    pub fn makespan(&self) -> Option<f64> {
        (self.completed == self.jobs)
            .then(|| self.last_completion.map(|t| t - self.start))
            .flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub campaign: String,
    pub makespan_a: f64,
    pub makespan_b: f64,
    /// makespan_b / makespan_a
    pub speedup: f64,
    pub cost_a: Money,
    pub cost_b: Money,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryReport {
    pub master_seed: u64,
    pub config_digest: u64,
    pub horizon_seconds: f64,
    pub vos: Vec<String>,
    pub vo_core_hours: Vec<f64>,
    pub vo_pilot_core_hours: Vec<f64>,
    pub campaigns: Vec<CampaignSummary>,
    pub total_cost: Money,
    pub preemptions: u64,
    pub job_preemptions: u64,
    pub jobs_started: u64,
    pub jobs_completed: u64,
    pub efficiency_mean: Option<f64>,
    pub efficiency_p10: Option<f64>,
    pub efficiency_p50: Option<f64>,
    pub origin_bytes: u64,
    pub events_processed: u64,
    pub speedup: Option<(String, Comparison)>,
}

impl SummaryReport {
    pub fn delivered_core_hours(&self) -> f64 {
        self.vo_core_hours.iter().sum()
    }

    pub fn cost_per_core_hour(&self) -> Option<f64> {
        let h = self.delivered_core_hours();
        (h > 0.0).then(|| self.total_cost.as_f64() / h)
    }

    pub fn campaign(&self, name: &str) -> Option<&CampaignSummary> {
        self.campaigns.iter().find(|c| c.name == name)
    }
}

/// speedup = makespan_b / makespan_a for `campaign`.
pub fn compare(a: &SummaryReport, b: &SummaryReport, campaign: &str) -> Result<Comparison, CompareError> {
    let ca = a.campaign(campaign).ok_or_else(|| CompareError::CampaignMissing(campaign.into()))?;
    let cb = b.campaign(campaign).ok_or_else(|| CompareError::CampaignMissing(campaign.into()))?;
    let ma = ca.makespan().ok_or_else(|| CompareError::CampaignIncomplete(campaign.into()))?;
    let mb = cb.makespan().ok_or_else(|| CompareError::CampaignIncomplete(campaign.into()))?;
    Ok(Comparison {
        campaign: campaign.into(),
        makespan_a: ma,
        makespan_b: mb,
        speedup: mb / ma,
        cost_a: a.total_cost,
        cost_b: b.total_cost,
    })
}

/// Everything a run produced, including internals the acceptance checks audit.
#[derive(Debug)]
pub struct ScenarioRun {
    pub layout: SeriesLayout,
    pub series: Vec<TimeSeriesRecord>,
    pub aux: Vec<SampleAux>,
    pub summary: SummaryReport,
    pub ledger: Ledger,
    pub trace: DecisionTrace,
    pub cloud: CloudProvider,
    pub data: DataLayer,
    /// exact integral of busy cores over time, per VO, in core-seconds
    pub busy_core_seconds: Vec<f64>,
    /// largest running-plus-pending pilot cores seen per VO
    pub max_pilot_commitment: Vec<u64>,
    /// times the live-instance count rose outside a policy tick
    pub live_increases_between_ticks: u64,
    pub final_cost_from_instances: f64,
    pub pilots: Vec<Pilot>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ev {
    PolicyTick { periodic: bool },
    FrontendTick,
    Negotiate,
    Sample,
    PreemptionTick,
    Submit(JobId),
    BootComplete(InstanceId),
    JobComplete(JobId),
    PilotLifetime(PilotId),
    PilotIdleCheck(PilotId),
}

#[derive(Debug, Clone, Copy)]
struct JobRun {
    slot: SlotId,
    start: SimTime,
    efficiency: f64,
    completion: crate::kernel::EventId,
    record: usize,
}

struct World<'a> {
    cfg: &'a ScenarioConfig,
    wl: Workload,
    pool: Pool,
    cloud: CloudProvider,
    data: DataLayer,
    profiles: Vec<IoProfile>,
    campaign_profile: Vec<u32>,
    ces: Vec<ComputeEntrypoint>,
    region_ce: Vec<Option<usize>>,
    frontends: Vec<Frontend>,
    credentials: CredentialMap,
    vo_names: Vec<String>,
    pilots: Vec<Pilot>,
    pilot_idle_since: Vec<Option<SimTime>>,
    instance_pilots: Vec<Vec<PilotId>>,
    instance_free: Vec<u32>,
    unclaimed: BTreeSet<InstanceId>,
    /// running+retiring pilot cores per VO
    running_pilot_cores: Vec<u64>,
    provisioning_pilot_cores: Vec<u64>,
    onprem_cores: u64,
    policy: Option<Box<dyn ProvisioningPolicy>>,
    runs: Vec<Option<JobRun>>,
    ledger: Ledger,
    trace: DecisionTrace,
    busy: Vec<u64>,
    busy_core_seconds: Vec<f64>,
    busy_since: SimTime,
    eff_sum: f64,
    eff_all: Vec<f64>,
    job_preemptions: u64,
    jobs_completed: u64,
    campaign_done: Vec<usize>,
    campaign_last: Vec<Option<SimTime>>,
    last_join: Option<SimTime>,
    last_negotiation: Option<SimTime>,
    policy_epoch: u64,
    retry_pending: bool,
    preemptions_at_last_policy: Vec<u64>,
    max_commitment: Vec<u64>,
    live_increases: u64,
    in_policy_tick: bool,
    series: Vec<TimeSeriesRecord>,
    aux: Vec<SampleAux>,
}

impl<'a> World<'a> {
    fn new(cfg: &'a ScenarioConfig, seed: u64) -> Result<Self, ScenarioError> {
        let wl = build_campaigns(&cfg.vos, &cfg.campaigns, seed).map_err(ConfigError::from)?;
        let vo_ranks = cfg.vos.iter().map(|v| v.priority_rank).collect();
        let user_vo = wl.users.iter().map(|u| u.vo).collect();
        let pool = Pool::new(vo_ranks, user_vo)
            .with_discipline(cfg.user_discipline)
            .with_user_core_cap(cfg.user_core_cap);
        let cloud = CloudProvider::new(cfg.regions.clone(), cfg.instance_type.clone(), cfg.cloud.reconcile, seed);
        let data = DataLayer::new(&cfg.site_names(), cfg.caches.enabled, cfg.caches.capacity_bytes, cfg.latency_model);
        let profile_names: Vec<&String> = cfg.io_profiles.keys().collect();
        let profiles = cfg.io_profiles.values().cloned().collect();
        let campaign_profile = cfg
            .campaigns
            .iter()
            .map(|c| profile_names.iter().position(|n| **n == c.io_profile).expect("validated") as u32)
            .collect();
        let ces = cfg
            .ces
            .iter()
            .map(|c| ComputeEntrypoint::new(c.name.clone(), c.regions.clone(), c.vo_allowlist.clone(), c.local_priority.clone()))
            .collect();
        let region_ce = (0..cfg.regions.len())
            .map(|r| cfg.ces.iter().position(|c| c.regions.contains(&r)))
            .collect();
        let mut credentials = CredentialMap::default();
        let mut frontends = Vec::new();
        for (v, spec) in cfg.vo_pilots.iter().enumerate() {
            credentials.insert(Credential(spec.credential.clone()), VoId(v));
            if let Some(ce) = spec.ce {
                frontends.push(Frontend {
                    vo: VoId(v),
                    ce: cfg.ces[ce].name.clone(),
                    credential: Credential(spec.credential.clone()),
                    cores_per_pilot: spec.cores_per_pilot,
                });
            }
        }
        let policy: Option<Box<dyn ProvisioningPolicy>> = match &cfg.policy {
            PolicySpec::None => None,
            PolicySpec::Schedule(entries) => Some(Box::new(OperatorSchedule { entries: entries.clone() })),
            PolicySpec::Adaptive {
                spend_cap_per_day,
                max_cores,
            } => Some(Box::new(AdaptivePolicy {
                spend_cap_per_day: *spend_cap_per_day,
                max_cores: *max_cores,
            })),
        };
        let n_vos = cfg.vos.len();
        let n_regions = cfg.regions.len();
        let n_campaigns = cfg.campaigns.len();
        let n_jobs = wl.jobs.len();
        Ok(Self {
            cfg,
            wl,
            pool,
            cloud,
            data,
            profiles,
            campaign_profile,
            ces,
            region_ce,
            frontends,
            credentials,
            vo_names: cfg.vos.iter().map(|v| v.name.clone()).collect(),
            pilots: Vec::new(),
            pilot_idle_since: Vec::new(),
            instance_pilots: Vec::new(),
            instance_free: Vec::new(),
            unclaimed: BTreeSet::new(),
            running_pilot_cores: vec![0; n_vos],
            provisioning_pilot_cores: vec![0; n_vos],
            onprem_cores: 0,
            policy,
            runs: vec![None; n_jobs],
            ledger: Ledger::default(),
            trace: DecisionTrace::new(cfg.output.decision_trace),
            busy: vec![0; n_vos],
            busy_core_seconds: vec![0.0; n_vos],
            busy_since: 0.0,
            eff_sum: 0.0,
            eff_all: Vec::new(),
            job_preemptions: 0,
            jobs_completed: 0,
            campaign_done: vec![0; n_campaigns],
            campaign_last: vec![None; n_campaigns],
            last_join: None,
            last_negotiation: None,
            policy_epoch: 0,
            retry_pending: false,
            preemptions_at_last_policy: vec![0; n_regions],
            max_commitment: vec![0; n_vos],
            live_increases: 0,
            in_policy_tick: false,
            series: Vec::new(),
            aux: Vec::new(),
        })
    }

    fn start(&mut self, k: &mut Kernel<Ev>) {
        let all: Vec<usize> = (0..self.cfg.regions.len()).collect();
        for (r, at) in self.cloud.replicate_image(&all, self.cfg.cloud.image_replication_delay, 0.0) {
            self.trace.log(0.0, "cloud", || format!("image replicating to {} ready at {at:.0}", self.cfg.regions[r].name));
        }
        if let Some(o) = &self.cfg.onprem {
            let site = self.cfg.regions.len();
            let mut left = o.cores;
            while left > 0 {
                let cores = u64::from(o.slot_cores).min(left) as u32;
                self.pool.add_slot(SlotSpec {
                    pilot: None,
                    site,
                    cores,
                    memory: u64::from(cores) * o.memory_per_core,
                    accepts: o.accepts.clone(),
                });
                left -= u64::from(cores);
            }
            self.onprem_cores = o.cores;
        }
        for j in 0..self.wl.jobs.len() {
            let t = self.wl.jobs[j].submit_time;
            if t <= 0.0 {
                self.pool.enqueue(&self.wl.jobs[j]);
            } else {
                k.schedule(Ev::Submit(JobId(j)), t).expect("future");
            }
        }
        if self.policy.is_some() {
            k.schedule(Ev::PolicyTick { periodic: true }, 0.0).expect("t0");
        }
        if !self.frontends.is_empty() {
            k.schedule(Ev::FrontendTick, 0.0).expect("t0");
        }
        k.schedule(Ev::Negotiate, 0.0).expect("t0");
        k.schedule(Ev::Sample, 0.0).expect("t0");
        if !self.cfg.regions.is_empty() {
            k.schedule(Ev::PreemptionTick, self.cfg.preemption_period).expect("future");
        }
    }

    fn handle(&mut self, k: &mut Kernel<Ev>, ev: Event<Ev>) {
        let now = ev.fire_time;
        match ev.payload {
            Ev::PolicyTick { periodic } => {
                if periodic {
                    k.schedule_in(Ev::PolicyTick { periodic: true }, self.cfg.policy_period);
                } else {
                    self.retry_pending = false;
                }
                self.policy_tick(k, now);
            }
            Ev::FrontendTick => {
                k.schedule_in(Ev::FrontendTick, self.cfg.frontend_period);
                self.frontend_tick(k, now);
            }
            Ev::Negotiate => {
                k.schedule_in(Ev::Negotiate, self.cfg.negotiation_period);
                self.negotiate(k, now);
            }
            Ev::Sample => {
                k.schedule_in(Ev::Sample, self.cfg.sample_period);
                self.sample(now);
            }
            Ev::PreemptionTick => {
                k.schedule_in(Ev::PreemptionTick, self.cfg.preemption_period);
                self.preemption_tick(k, now);
            }
            Ev::Submit(j) => self.pool.enqueue(&self.wl.jobs[j.0]),
            Ev::BootComplete(id) => self.boot_complete(k, id, now),
            Ev::JobComplete(j) => self.job_complete(k, j, now),
            Ev::PilotLifetime(p) => self.pilot_lifetime(k, p, now),
            Ev::PilotIdleCheck(p) => {
                let due = self.pilot_idle_since[p.0].zip(self.cfg.pilots.idle_retire());
                if let Some((since, limit)) = due {
                    if self.pilots[p.0].state == PilotState::Running && now - since >= limit - 1e-9 {
                        self.trace.log(now, "pilot", || format!("pilot {} idle retire", p.0));
                        self.end_pilot(k, p, EndReason::Retired, now, true);
                    }
                }
            }
        }
    }

    fn advance_busy(&mut self, now: SimTime) {
        let dt = now - self.busy_since;
        if dt > 0.0 {
            for (acc, &b) in self.busy_core_seconds.iter_mut().zip(&self.busy) {
                *acc += b as f64 * dt;
            }
        }
        self.busy_since = now;
    }

    fn observables(&self, now: SimTime) -> Observables {
        let n = self.cfg.regions.len();
        Observables {
            now,
            live_instances: (0..n).map(|r| self.cloud.live(r)).collect(),
            preemptions_since_last: (0..n)
                .map(|r| self.cloud.preemptions[r] - self.preemptions_at_last_policy[r])
                .collect(),
            spend_rate_per_day: (0..n)
                .map(|r| self.cloud.live(r) as f64 * self.cfg.regions[r].price_per_instance_day)
                .sum(),
            demand_cores: (0..self.cfg.vos.len()).map(|v| self.pool.queued_cores(VoId(v))).sum(),
            busy_cores: self.busy.iter().sum(),
        }
    }

    fn policy_tick(&mut self, k: &mut Kernel<Ev>, now: SimTime) {
        self.policy_epoch += 1;
        let obs = self.observables(now);
        self.preemptions_at_last_policy = self.cloud.preemptions.clone();
        let Some(policy) = self.policy.as_mut() else {
            return;
        };
        let Some(targets) = policy.targets(&obs, &self.cfg.regions, &self.cfg.instance_type) else {
            self.trace.log(now, "policy", || "no target change".into());
            return;
        };
        self.in_policy_tick = true;
        let mut retry_at: Option<SimTime> = None;
        for (r, &n) in targets.iter().enumerate() {
            match self.cloud.set_target(r, n, now) {
                Ok(outcome) => {
                    self.trace.log(now, "policy", || {
                        format!(
                            "target {}={} boots={} deallocated={} unmet={}",
                            self.cfg.regions[r].name,
                            n,
                            outcome.boots.len(),
                            outcome.deallocated.len(),
                            outcome.unmet
                        )
                    });
                    for id in outcome.deallocated {
                        self.instance_gone(k, id, EndReason::Retired, now);
                    }
                    for (id, ready) in outcome.boots {
                        self.new_instance(k, id, ready, now);
                    }
                }
                Err(e) => {
                    self.trace.log(now, "policy", || e.to_string());
                    if let Some(t) = self.cloud.regions[r].image_ready_at {
                        retry_at = Some(retry_at.map_or(t, |x: f64| x.max(t)));
                    }
                }
            }
        }
        self.in_policy_tick = false;
        if let Some(t) = retry_at {
            if !self.retry_pending && t > now {
                self.retry_pending = true;
                k.schedule(Ev::PolicyTick { periodic: false }, t).expect("future");
            }
        }
    }

    fn new_instance(&mut self, k: &mut Kernel<Ev>, id: InstanceId, ready: SimTime, now: SimTime) {
        if !self.in_policy_tick {
            self.live_increases += 1;
        }
        debug_assert_eq!(id.0, self.instance_pilots.len());
        self.instance_pilots.push(Vec::new());
        self.instance_free.push(self.cfg.instance_type.cores);
        self.unclaimed.insert(id);
        k.schedule(Ev::BootComplete(id), ready).expect("future");
        self.bind_instance(k, id, now);
    }

    /// Hands free instance cores to the CE's highest-priority queued pilots.
    fn bind_instance(&mut self, k: &mut Kernel<Ev>, id: InstanceId, now: SimTime) {
        let inst = self.cloud.instance(id);
        let (region, state, memory) = (inst.region, inst.state, inst.memory);
        if !state.is_live() {
            self.unclaimed.remove(&id);
            return;
        }
        let Some(ce_idx) = self.region_ce[region] else {
            return;
        };
        let total = self.cfg.instance_type.cores;
        while self.instance_free[id.0] > 0 {
            let queued: Vec<(VoId, u32)> = if self.trace.enabled {
                (0..self.cfg.vos.len())
                    .map(|v| (VoId(v), self.ces[ce_idx].queued_pilots(VoId(v))))
                    .filter(|(_, n)| *n > 0)
                    .collect()
            } else {
                Vec::new()
            };
            let Some((vo, cores)) = self.ces[ce_idx].take_next(self.instance_free[id.0]) else {
                break;
            };
            self.trace.log(now, "ce", || {
                let q: Vec<String> = queued.iter().map(|(v, n)| format!("{}:{n}", self.vo_names[v.0])).collect();
                format!("bind instance={} vo={} queued={}", id.0, self.vo_names[vo.0], q.join(";"))
            });
            let pid = PilotId(self.pilots.len());
            self.pilots.push(Pilot {
                id: pid,
                vo,
                ce: ce_idx,
                region,
                cores,
                memory: memory * u64::from(cores) / u64::from(total),
                state: PilotState::Provisioning,
                created: now,
                start_time: None,
                end_time: None,
                instance: id,
                slot: None,
                record: None,
                accepts: self.cfg.vo_pilots[vo.0].accepts.clone(),
            });
            self.pilot_idle_since.push(None);
            self.instance_free[id.0] -= cores;
            self.instance_pilots[id.0].push(pid);
            self.provisioning_pilot_cores[vo.0] += u64::from(cores);
            if state == InstanceState::Running {
                self.join(k, pid, now);
            }
        }
        if self.instance_free[id.0] == 0 {
            self.unclaimed.remove(&id);
        }
    }

    fn join(&mut self, k: &mut Kernel<Ev>, pid: PilotId, now: SimTime) {
        let pilot = &mut self.pilots[pid.0];
        let vo = pilot.vo;
        let cores = u64::from(pilot.cores);
        let region = pilot.region;
        self.provisioning_pilot_cores[vo.0] -= cores;
        let ok = self.cfg.region_secret_valid[region];
        match pilot_join(pilot, ok, region, now, &mut self.pool, &mut self.ledger) {
            Ok(_) => {
                self.running_pilot_cores[vo.0] += cores;
                self.last_join = Some(now);
                if let Some(limit) = self.cfg.pilots.max_lifetime() {
                    k.schedule_in(Ev::PilotLifetime(pid), limit);
                }
                self.mark_idle(k, pid, now);
            }
            Err(e) => {
                self.trace.log(now, "pilot", || format!("pilot {} {e}", pid.0));
                // cores stay with the instance; rebinding waits for the next frontend pass
                let inst = self.pilots[pid.0].instance;
                self.release_instance_cores(inst, pid);
            }
        }
    }

    fn release_instance_cores(&mut self, inst: InstanceId, pid: PilotId) {
        let cores = self.pilots[pid.0].cores;
        self.instance_pilots[inst.0].retain(|p| *p != pid);
        self.instance_free[inst.0] += cores;
        if self.cloud.instance(inst).state.is_live() {
            self.unclaimed.insert(inst);
        }
    }

    fn mark_idle(&mut self, k: &mut Kernel<Ev>, pid: PilotId, now: SimTime) {
        self.pilot_idle_since[pid.0] = Some(now);
        if let Some(limit) = self.cfg.pilots.idle_retire() {
            k.schedule_in(Ev::PilotIdleCheck(pid), limit);
        }
    }

    fn boot_complete(&mut self, k: &mut Kernel<Ev>, id: InstanceId, now: SimTime) {
        if !self.cloud.complete_boot(id) {
            return;
        }
        let bound: Vec<PilotId> = self.instance_pilots[id.0].clone();
        for pid in bound {
            if self.pilots[pid.0].state == PilotState::Provisioning {
                self.join(k, pid, now);
            }
        }
        self.bind_instance(k, id, now);
    }

    /// Instance preempted or deallocated: its pilots end and their jobs requeue.
    fn instance_gone(&mut self, k: &mut Kernel<Ev>, id: InstanceId, reason: EndReason, now: SimTime) {
        self.unclaimed.remove(&id);
        let bound = std::mem::take(&mut self.instance_pilots[id.0]);
        for pid in bound {
            self.end_pilot(k, pid, reason, now, false);
        }
        self.instance_free[id.0] = 0;
    }

    fn end_pilot(&mut self, k: &mut Kernel<Ev>, pid: PilotId, reason: EndReason, now: SimTime, rebind: bool) {
        let pilot = &self.pilots[pid.0];
        if pilot.state.is_terminal() {
            return;
        }
        let vo = pilot.vo;
        let cores = u64::from(pilot.cores);
        match pilot.state {
            PilotState::Provisioning | PilotState::Requested => self.provisioning_pilot_cores[vo.0] -= cores,
            PilotState::Running | PilotState::Retiring => self.running_pilot_cores[vo.0] -= cores,
            _ => {}
        }
        let evicted = pilot_terminate(&mut self.pilots[pid.0], reason, now, &mut self.pool, &mut self.ledger);
        self.evict(k, &evicted, reason, now);
        if rebind {
            let inst = self.pilots[pid.0].instance;
            self.release_instance_cores(inst, pid);
            self.bind_instance(k, inst, now);
        }
    }

    fn evict(&mut self, k: &mut Kernel<Ev>, evicted: &[Placement], reason: EndReason, now: SimTime) {
        if evicted.is_empty() {
            return;
        }
        self.advance_busy(now);
        for p in evicted {
            let run = self.runs[p.job.0].take().expect("evicted job was running");
            k.cancel(run.completion);
            let job = &mut self.wl.jobs[p.job.0];
            if self.cfg.retention == Retention::Checkpoint {
                accrue_progress(job, job.cores, now - run.start, run.efficiency);
            }
            self.ledger.close(run.record, now, reason);
            self.busy[job.vo.0] -= u64::from(job.cores);
            self.job_preemptions += 1;
        }
        requeue_evicted(evicted, &mut self.wl.jobs, &mut self.pool, self.cfg.retention);
    }

    fn pilot_lifetime(&mut self, k: &mut Kernel<Ev>, pid: PilotId, now: SimTime) {
        if self.pilots[pid.0].state != PilotState::Running {
            return;
        }
        let slot = self.pilots[pid.0].slot.expect("running pilot has a slot");
        let empty = self.pool.slot(slot).is_some_and(|s| s.placements.is_empty());
        self.trace.log(now, "pilot", || format!("pilot {} reached max lifetime", pid.0));
        if empty {
            self.end_pilot(k, pid, EndReason::Retired, now, true);
        } else {
            self.pool.drain(slot);
            self.pilots[pid.0].state = PilotState::Retiring;
        }
    }

    fn frontend_tick(&mut self, k: &mut Kernel<Ev>, now: SimTime) {
        let mut pressures = Vec::new();
        for fe in &self.frontends {
            let vo = fe.vo;
            let ce = self.ces.iter().find(|c| c.name == fe.ce).expect("validated");
            pressures.push(VoPressure {
                vo,
                idle_demand_cores: self.pool.queued_cores(vo),
                running_pilot_cores: self.running_pilot_cores[vo.0],
                pending_pilot_cores: ce.queued_cores(vo) + self.provisioning_pilot_cores[vo.0],
                core_cap: self.cfg.vos[vo.0].core_cap.map(u64::from),
            });
        }
        // drop unbound pilots that no longer have work waiting
        for p in &pressures {
            let fe = self.frontends.iter().find(|f| f.vo == p.vo).expect("present");
            let excess = p.pending_pilot_cores.saturating_sub(p.idle_demand_cores) / u64::from(fe.cores_per_pilot);
            if excess > 0 {
                let ce = self.ces.iter_mut().find(|c| c.name == fe.ce).expect("validated");
                let n = ce.withdraw(p.vo, u32::try_from(excess).unwrap_or(u32::MAX));
                if n > 0 {
                    self.trace.log(now, "frontend", || format!("withdraw {} pilots vo={}", n, self.vo_names[p.vo.0]));
                }
            }
        }
        let pressures: Vec<VoPressure> = pressures
            .into_iter()
            .map(|mut p| {
                let fe = self.frontends.iter().find(|f| f.vo == p.vo).expect("present");
                let ce = self.ces.iter().find(|c| c.name == fe.ce).expect("validated");
                p.pending_pilot_cores = ce.queued_cores(p.vo) + self.provisioning_pilot_cores[p.vo.0];
                p
            })
            .collect();
        let requests = frontend_assess(&self.frontends, &pressures, now);
        for r in &requests {
            self.trace.log(now, "frontend", || {
                format!("request {} pilots x {} cores vo={}", r.pilot_count, r.cores_per_pilot, self.vo_names[r.vo.0])
            });
        }
        let report = factory_dispatch(requests, &mut self.ces, &self.credentials, &self.vo_names);
        for (req, err) in &report.rejected {
            self.trace.log(now, "factory", || format!("rejected vo={}: {err}", self.vo_names[req.vo.0]));
        }
        let waiting: Vec<InstanceId> = self.unclaimed.iter().copied().collect();
        for id in waiting {
            self.bind_instance(k, id, now);
        }
        for (v, max) in self.max_commitment.iter_mut().enumerate() {
            let queued: u64 = self.ces.iter().map(|c| c.queued_cores(VoId(v))).sum();
            let total = self.running_pilot_cores[v] + self.provisioning_pilot_cores[v] + queued;
            *max = (*max).max(total);
        }
    }

    fn negotiate(&mut self, k: &mut Kernel<Ev>, now: SimTime) {
        self.last_negotiation = Some(now);
        let decisions = self.pool.negotiate(&self.wl.jobs, now);
        if decisions.is_empty() {
            return;
        }
        self.advance_busy(now);
        for d in decisions {
            let slot = self.pool.slot(d.slot).expect("just matched");
            let (site, pilot) = (slot.site, slot.pilot);
            if let Some(p) = pilot {
                self.pilot_idle_since[p] = None;
            }
            let job = &self.wl.jobs[d.job.0];
            let campaign = job.campaign;
            let key = self.campaign_profile[campaign];
            let stall = self.data.job_stall_time(&self.profiles[key as usize], key, site);
            let cpu_wall = job.remaining() / f64::from(job.cores);
            let efficiency = cpu_wall / (cpu_wall + stall);
            let wall = job.wall_to_complete(job.cores, efficiency);
            let job = &mut self.wl.jobs[d.job.0];
            job.state = JobState::Running;
            job.start_time = Some(now);
            job.efficiency = efficiency;
            let completion = k.schedule_in(Ev::JobComplete(d.job), wall);
            let record = self
                .ledger
                .open(RecordKind::Job, job.vo, Some(job.user), site, job.cores, now);
            self.busy[job.vo.0] += u64::from(job.cores);
            self.eff_sum += efficiency;
            self.eff_all.push(efficiency);
            self.runs[d.job.0] = Some(JobRun {
                slot: d.slot,
                start: now,
                efficiency,
                completion,
                record,
            });
        }
    }

    fn job_complete(&mut self, k: &mut Kernel<Ev>, j: JobId, now: SimTime) {
        let run = self.runs[j.0].take().expect("completing job was running");
        self.advance_busy(now);
        let job = &mut self.wl.jobs[j.0];
        accrue_progress(job, job.cores, now - run.start, run.efficiency);
        job.cpu_seconds_done = job.cpu_seconds_total;
        job.state = JobState::Completed;
        job.finish_time = Some(now);
        self.busy[job.vo.0] -= u64::from(job.cores);
        self.jobs_completed += 1;
        self.campaign_done[job.campaign] += 1;
        self.campaign_last[job.campaign] = Some(now);
        self.ledger.close(run.record, now, EndReason::Completed);
        self.pool.release(PlacementHandle { slot: run.slot, job: j });
        let slot = self.pool.slot(run.slot).expect("slot of a running job");
        if let (Some(p), true) = (slot.pilot, slot.placements.is_empty()) {
            let pid = PilotId(p);
            match self.pilots[p].state {
                PilotState::Retiring => self.end_pilot(k, pid, EndReason::Retired, now, true),
                PilotState::Running => self.mark_idle(k, pid, now),
                _ => {}
            }
        }
    }

    fn preemption_tick(&mut self, k: &mut Kernel<Ev>, now: SimTime) {
        let dt = self.cfg.preemption_period;
        for r in 0..self.cfg.regions.len() {
            let outcome = self.cloud.preemption_tick(r, dt, now);
            for &id in &outcome.preempted {
                self.trace.log(now, "cloud", || format!("preempted instance={} region={}", id.0, self.cfg.regions[r].name));
                self.instance_gone(k, id, EndReason::Preempted, now);
            }
            for (id, ready) in outcome.replacement_boots {
                self.new_instance(k, id, ready, now);
            }
        }
    }

    fn sample(&mut self, now: SimTime) {
        self.advance_busy(now);
        self.cloud.accrue_cost(now);
        let n = self.cfg.regions.len();
        let instance_cores = u64::from(self.cfg.instance_type.cores);
        let running_cores: u64 = (0..n)
            .map(|r| self.cloud.scale_sets[r].running.len() as u64 * instance_cores)
            .sum();
        let provisioned = running_cores + self.onprem_cores;
        let busy_total: u64 = self.busy.iter().sum();
        debug_assert!(busy_total <= provisioned, "busy {busy_total} > provisioned {provisioned}");
        let started = self.eff_all.len();
        self.series.push(TimeSeriesRecord {
            time_s: now,
            instances_live: (0..n).map(|r| self.cloud.scale_sets[r].running.len() as u32).collect(),
            instances_pending: (0..n).map(|r| self.cloud.scale_sets[r].pending.len() as u32).collect(),
            provisioned_cores: provisioned,
            busy_cores: self.busy.clone(),
            idle_cores: provisioned.saturating_sub(busy_total),
            queue_depth: (0..self.cfg.vos.len())
                .map(|v| self.pool.queue_depth(VoId(v)) as u64)
                .collect(),
            cum_preemptions: self.cloud.total_preemptions(),
            cum_cost: Money::from_f64(self.cloud.total_cost()),
            cache_hit_rate: (0..self.data.site_count())
                .map(|s| self.data.cache_stats(s).hit_rate)
                .collect(),
            mean_efficiency: (started > 0).then(|| self.eff_sum / started as f64),
        });
        self.aux.push(SampleAux {
            last_join: self.last_join,
            last_negotiation: self.last_negotiation,
            live_instances: self.cloud.total_live(),
            policy_epoch: self.policy_epoch,
        });
    }

    fn finish(mut self, seed: u64, events: u64) -> ScenarioRun {
        let horizon = self.cfg.horizon_seconds;
        self.advance_busy(horizon);
        self.cloud.accrue_cost(horizon);
        let n_vos = self.cfg.vos.len();
        let acct = accounting_summary(&self.ledger, n_vos, (0.0, horizon), horizon);
        let mut effs = self.eff_all.clone();
        effs.sort_by(f64::total_cmp);
        let pct = |q: f64| -> Option<f64> {
            (!effs.is_empty()).then(|| effs[((effs.len() - 1) as f64 * q).round() as usize])
        };
        let campaigns = self
            .cfg
            .campaigns
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let start = self
                    .wl
                    .jobs
                    .iter()
                    .filter(|j| j.campaign == i)
                    .map(|j| j.submit_time)
                    .fold(f64::INFINITY, f64::min);
                CampaignSummary {
                    name: c.name.clone(),
                    vo: c.vo.clone(),
                    user: c.user.clone(),
                    jobs: c.job_count,
                    completed: self.campaign_done[i],
                    start,
                    last_completion: self.campaign_last[i],
                }
            })
            .collect();
        let summary = SummaryReport {
            master_seed: seed,
            config_digest: self.cfg.digest(),
            horizon_seconds: horizon,
            vos: self.vo_names.clone(),
            vo_core_hours: acct.iter().map(|a| a.job_core_hours).collect(),
            vo_pilot_core_hours: acct.iter().map(|a| a.pilot_core_hours).collect(),
            campaigns,
            total_cost: Money::from_f64(self.cloud.total_cost()),
            preemptions: self.cloud.total_preemptions(),
            job_preemptions: self.job_preemptions,
            jobs_started: self.eff_all.len() as u64,
            jobs_completed: self.jobs_completed,
            efficiency_mean: (!effs.is_empty()).then(|| self.eff_sum / effs.len() as f64),
            efficiency_p10: pct(0.1),
            efficiency_p50: pct(0.5),
            origin_bytes: self.data.total_origin_bytes(),
            events_processed: events,
            speedup: None,
        };
        let final_cost_from_instances = self.cloud.cost_from_instances(horizon);
        ScenarioRun {
            layout: SeriesLayout {
                regions: self.cfg.regions.iter().map(|r| r.name.clone()).collect(),
                vos: self.vo_names,
                sites: self.cfg.site_names(),
            },
            series: self.series,
            aux: self.aux,
            summary,
            ledger: self.ledger,
            trace: self.trace,
            cloud: self.cloud,
            data: self.data,
            busy_core_seconds: self.busy_core_seconds,
            max_pilot_commitment: self.max_commitment,
            live_increases_between_ticks: self.live_increases,
            final_cost_from_instances,
            pilots: self.pilots,
        }
    }

    fn check_invariants(&self) -> Result<(), String> {
        self.pool.check_invariants()?;
        self.cloud.check_invariants()?;
        let slot_cores: u64 = self
            .pool
            .slots()
            .filter(|s| s.pilot.is_some())
            .map(|s| u64::from(s.total_cores))
            .sum();
        let pilot_cores: u64 = self.running_pilot_cores.iter().sum();
        if slot_cores != pilot_cores {
            return Err(format!("pilot cores {pilot_cores} != slot cores {slot_cores}"));
        }
        for p in &self.pilots {
            if p.state.holds_slot() && self.cloud.instance(p.instance).state != InstanceState::Running {
                return Err(format!("pilot {} runs on a dead instance", p.id.0));
            }
        }
        Ok(())
    }
}

/// Runs `cfg` to its horizon. `seed_override` replaces the configured master seed.
pub fn run_scenario(cfg: &ScenarioConfig, seed_override: Option<u64>) -> Result<ScenarioRun, ScenarioError> {
    let seed = seed_override.unwrap_or(cfg.master_seed);
    let mut world = World::new(cfg, seed)?;
    let mut kernel: Kernel<Ev> = Kernel::new(seed);
    world.start(&mut kernel);
    let audit = cfg!(debug_assertions);
    let mut failure = None;
    let stats = kernel.run_until(cfg.horizon_seconds, |k, ev| {
        let sample = matches!(ev.payload, Ev::Sample);
        world.handle(k, ev);
        if audit && sample && failure.is_none() {
            if let Err(e) = world.check_invariants() {
                failure = Some(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(ScenarioError::Invariant(e));
    }
    Ok(world.finish(seed, stats.events_processed))
}

/// One run per value of the scalar at `path`; run `i` uses seed `master_seed + i`.
/// Runs execute on separate threads.
pub fn sweep(tree: &Table, path: &str, values: &[Value]) -> Result<Vec<(Value, SummaryReport)>, ScenarioError> {
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut t = tree.clone();
        set_path(&mut t, path, v)?;
        configs.push(from_tree(t)?);
    }
    let results: Vec<Result<SummaryReport, ScenarioError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .enumerate()
            .map(|(i, cfg)| s.spawn(move || run_scenario(cfg, Some(cfg.master_seed.wrapping_add(i as u64))).map(|r| r.summary)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep member panicked")).collect()
    });
    values
        .iter()
        .cloned()
        .zip(results)
        .map(|(v, r)| r.map(|s| (v, s)))
        .collect()
}

/// Core-hours under the trapezoid of sampled busy cores.
pub fn trapezoid_core_hours(series: &[TimeSeriesRecord]) -> f64 {
    series
        .windows(2)
        .map(|w| 0.5 * (w[0].total_busy() + w[1].total_busy()) as f64 * (w[1].time_s - w[0].time_s))
        .sum::<f64>()
        / SECONDS_PER_HOUR
}

pub fn days(seconds: f64) -> f64 {
    seconds / SECONDS_PER_DAY
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::load_config_str;

    const SMALL: &str = r#"
master_seed = 3
horizon_seconds = 172800
sample_period = 600
[cloud]
image_replication_delay = 0
[[regions]]
name = "a"
capacity = 40
hazard_base = 0.5
[[regions]]
name = "b"
capacity = 40
hazard_base = 0.5
[[vos]]
name = "UCSD"
priority_rank = 0
core_cap = 480
[[vos]]
name = "Fermilab"
priority_rank = 1
[[ces]]
name = "ce"
regions = ["a", "b"]
vo_allowlist = ["UCSD", "Fermilab"]
[policy]
period = 21600
schedule = [{ day = 0, cores = 800 }, { day = 1, cores = 400 }]
[[campaigns]]
name = "ana"
vo = "UCSD"
job_count = 600
cores_per_job = 4
cpu_seconds = { family = "exponential", mean = 20000 }
[[campaigns]]
preset = "backfill-generic"
vo = "Fermilab"
job_count = 3000
cpu_seconds = { family = "exponential", mean = 7200 }
io_profile = "cms-light"
"#;

    fn small() -> ScenarioConfig {
        load_config_str(SMALL).unwrap()
    }

    #[test]
    fn small_run_is_consistent() {
        let cfg = small();
        let run = run_scenario(&cfg, None).unwrap();
        assert_eq!(run.series.len(), 172_800 / 600 + 1);
        for r in &run.series {
            assert_eq!(r.provisioned_cores, r.total_busy() + r.idle_cores);
        }
        // ledger and exact integral agree
        for v in 0..2 {
            let exact = run.busy_core_seconds[v] / SECONDS_PER_HOUR;
            assert!((exact - run.summary.vo_core_hours[v]).abs() < 1e-6 * exact.max(1.0));
        }
        assert!(run.max_pilot_commitment[0] <= 480 + 15);
        assert_eq!(run.live_increases_between_ticks, 0);
        assert!(run.summary.preemptions > 0);
        assert!((run.cloud.total_cost() - run.final_cost_from_instances).abs() < 1e-6);
        let fermi_busy = run.series.iter().map(|r| r.busy_cores[1]).max().unwrap();
        assert!(fermi_busy > 0);
    }

    #[test]
    fn every_ended_pilot_has_one_closed_record() {
        let run = run_scenario(&small(), None).unwrap();
        let pilot_records = run.ledger.records.iter().filter(|r| r.kind == RecordKind::Pilot).count();
        let with_record = run.pilots.iter().filter(|p| p.record.is_some()).count();
        assert_eq!(pilot_records, with_record);
        for p in &run.pilots {
            if p.state.is_terminal() {
                let r = &run.ledger.records[p.record.expect("ended pilots have records")];
                assert!(r.end.is_some());
            }
        }
    }

    #[test]
    fn seeds_change_traces_not_config() {
        let cfg = small();
        let a = run_scenario(&cfg, Some(1)).unwrap();
        let b = run_scenario(&cfg, Some(2)).unwrap();
        assert_eq!(a.summary.config_digest, b.summary.config_digest);
        let pa: Vec<u64> = a.series.iter().map(|r| r.cum_preemptions).collect();
        let pb: Vec<u64> = b.series.iter().map(|r| r.cum_preemptions).collect();
        assert_ne!(pa, pb);
    }

    #[test]
    fn zero_campaigns_still_costs() {
        let cfg = load_config_str(SMALL.split("[[campaigns]]").next().unwrap()).unwrap();
        let run = run_scenario(&cfg, None).unwrap();
        assert!(run.series.iter().all(|r| r.total_busy() == 0));
        assert!(run.summary.total_cost.as_f64() > 0.0);
    }

    #[test]
    fn image_not_ready_retries() {
        let text = SMALL.replace("image_replication_delay = 0", "image_replication_delay = 3600") + "\n[output]\ndecision_trace = true\n";
        let cfg = load_config_str(&text).unwrap();
        let run = run_scenario(&cfg, None).unwrap();
        assert!(run.trace.rows.iter().any(|(t, _, d)| *t == 0.0 && d.contains("image")));
        let first_instance = run.cloud.instances.first().unwrap();
        assert_eq!(first_instance.created, 3600.0);
    }

    #[test]
    fn compare_semantics() {
        let run = run_scenario(&small(), None).unwrap();
        let c = compare(&run.summary, &run.summary, "ana").unwrap();
        assert_eq!(c.speedup, 1.0);
        assert_eq!(compare(&run.summary, &run.summary, "nope"), Err(CompareError::CampaignMissing("nope".into())));
    }

    #[test]
    fn sweep_single_value_matches_run() {
        let cfg = small();
        let out = sweep(&cfg.tree, "regions.*.hazard_base", &[Value::Float(0.5)]).unwrap();
        let direct = run_scenario(&cfg, None).unwrap();
        assert_eq!(out[0].1, direct.summary);
        assert!(matches!(
            sweep(&cfg.tree, "regions.*.nope", &[Value::Float(0.5)]),
            Err(ScenarioError::Config(ConfigError::Validation { .. }))
        ));
    }

    #[test]
    fn pilot_lifetime_and_idle_retire() {
        let text = format!("{SMALL}\n[pilots]\nmax_lifetime = 20000\nidle_retire = 600\n");
        let run = run_scenario(&load_config_str(&text).unwrap(), None).unwrap();
        let retired = run
            .ledger
            .records
            .iter()
            .filter(|r| r.kind == RecordKind::Pilot && r.end_reason == Some(EndReason::Retired))
            .count();
        assert!(retired > 0);
        for r in run.ledger.records.iter().filter(|r| r.kind == RecordKind::Pilot) {
            if let Some(end) = r.end {
                assert!(end >= r.start);
                assert_eq!(r.core_seconds, f64::from(r.cores) * (end - r.start));
            }
        }
    }
}
