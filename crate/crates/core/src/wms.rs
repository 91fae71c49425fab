//! Overlay workload management: the Frontend measures queue pressure, the
//! Factory forwards pilot requests to Compute Entrypoints, CEs turn them into
//! local provisioning and bind pilots to instances, pilots join the pool, and
//! every pilot and job ends up in the accounting ledger.

use std::collections::HashMap;
use std::io::{self, Write};

use thiserror::Error;

use crate::cloud::InstanceId;
use crate::kernel::{SimTime, SECONDS_PER_HOUR};
use crate::pool::{Placement, Pool, SlotId, SlotSpec};
use crate::workload::{requeue_on_preemption, Job, Retention, UserId, VoId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WmsError {
    #[error("CE `{ce}` does not serve VO `{vo}`")]
    VoNotAllowed { ce: String, vo: String },
    #[error("unknown CE `{0}`")]
    UnknownCe(String),
    #[error("credential does not map to a VO")]
    CredentialUnmapped,
    #[error("pilot failed pool authentication")]
    AuthFailed,
}

/// Opaque token standing in for a delegated proxy.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Credential(pub String);

#[derive(Debug, Clone, Default)]
pub struct CredentialMap {
    map: HashMap<Credential, VoId>,
}

impl CredentialMap {
    pub fn insert(&mut self, token: Credential, vo: VoId) {
        self.map.insert(token, vo);
    }

    pub fn lookup(&self, token: &Credential) -> Option<VoId> {
        self.map.get(token).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotRequest {
    pub vo: VoId,
    pub ce: String,
    pub pilot_count: u32,
    pub cores_per_pilot: u32,
    pub issue_time: SimTime,
    pub credential: Credential,
}

/// What the Frontend sees for one VO at assessment time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoPressure {
    pub vo: VoId,
    pub idle_demand_cores: u64,
    pub running_pilot_cores: u64,
    pub pending_pilot_cores: u64,
    pub core_cap: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frontend {
    pub vo: VoId,
    pub ce: String,
    pub credential: Credential,
    pub cores_per_pilot: u32,
}

/// Cores to ask for: idle demand not already covered by pending pilots,
/// clamped so running plus pending stays within the cap.
pub fn requested_cores(p: &VoPressure) -> u64 {
    let uncovered = p.idle_demand_cores.saturating_sub(p.pending_pilot_cores);
    let room = match p.core_cap {
        Some(cap) => cap.saturating_sub(p.running_pilot_cores + p.pending_pilot_cores),
        None => u64::MAX,
    };
    uncovered.min(room)
}

pub fn frontend_assess(frontends: &[Frontend], pressures: &[VoPressure], now: SimTime) -> Vec<PilotRequest> {
    let mut out = Vec::new();
    for p in pressures {
        let Some(fe) = frontends.iter().find(|f| f.vo == p.vo) else {
            continue;
        };
        let cores = requested_cores(p);
        if cores == 0 {
            continue;
        }
        let pilots = cores.div_ceil(u64::from(fe.cores_per_pilot));
        out.push(PilotRequest {
            vo: p.vo,
            ce: fe.ce.clone(),
            pilot_count: u32::try_from(pilots).unwrap_or(u32::MAX),
            cores_per_pilot: fe.cores_per_pilot,
            issue_time: now,
            credential: fe.credential.clone(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeEntrypoint {
    pub name: String,
    pub regions: Vec<usize>,
    pub vo_allowlist: Vec<VoId>,
    /// local rank per VO, lower first
    pub local_priority: Vec<(VoId, u32)>,
    queued: HashMap<VoId, (u32, u32)>,
    pub ledger: Vec<PilotRequest>,
}

impl ComputeEntrypoint {
    pub fn new(name: impl Into<String>, regions: Vec<usize>, vo_allowlist: Vec<VoId>, local_priority: Vec<(VoId, u32)>) -> Self {
        Self {
            name: name.into(),
            regions,
            vo_allowlist,
            local_priority,
            queued: HashMap::new(),
            ledger: Vec::new(),
        }
    }

    pub fn allows(&self, vo: VoId) -> bool {
        self.vo_allowlist.contains(&vo)
    }

    fn rank(&self, vo: VoId) -> u32 {
        self.local_priority
            .iter()
            .find(|(v, _)| *v == vo)
            .map_or(u32::MAX, |(_, r)| *r)
    }

    /// Pilots waiting for an instance, per VO.
    pub fn queued_pilots(&self, vo: VoId) -> u32 {
        self.queued.get(&vo).map_or(0, |q| q.0)
    }

    pub fn queued_cores(&self, vo: VoId) -> u64 {
        self.queued
            .get(&vo)
            .map_or(0, |&(n, c)| u64::from(n) * u64::from(c))
    }

    pub fn cores_per_pilot(&self, vo: VoId) -> Option<u32> {
        self.queued.get(&vo).map(|q| q.1)
    }

    fn enqueue(&mut self, request: &PilotRequest) {
        let entry = self.queued.entry(request.vo).or_insert((0, request.cores_per_pilot));
        entry.0 += request.pilot_count;
        entry.1 = request.cores_per_pilot;
        self.ledger.push(request.clone());
    }

    /// Drops up to `pilots` not-yet-bound pilots of `vo`; returns how many went.
    pub fn withdraw(&mut self, vo: VoId, pilots: u32) -> u32 {
        match self.queued.get_mut(&vo) {
            Some(q) => {
                let n = pilots.min(q.0);
                q.0 -= n;
                n
            }
            None => 0,
        }
    }

    /// Highest-priority VO with a queued pilot that fits in `free_cores`.
    /// Removes that pilot from the queue.
    pub fn take_next(&mut self, free_cores: u32) -> Option<(VoId, u32)> {
        let mut best: Option<(u32, VoId)> = None;
        for (&vo, &(n, cpp)) in &self.queued {
            if n == 0 || cpp > free_cores {
                continue;
            }
            let key = (self.rank(vo), vo);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        let (_, vo) = best?;
        let q = self.queued.get_mut(&vo).expect("present");
        q.0 -= 1;
        Some((vo, q.1))
    }

    /// Instance counts per region for a request, routed in preference order
    /// within `headroom` (free capacity per entry of `self.regions`).
    pub fn ce_translate(
        &self,
        request: &PilotRequest,
        credentials: &CredentialMap,
        instance_cores: u32,
        headroom: &[u32],
    ) -> Result<Vec<u32>, WmsError> {
        if credentials.lookup(&request.credential) != Some(request.vo) {
            return Err(WmsError::CredentialUnmapped);
        }
        let per_instance = (instance_cores / request.cores_per_pilot.max(1)).max(1);
        let mut left = request.pilot_count.div_ceil(per_instance);
        Ok(headroom
            .iter()
            .map(|h| {
                let take = left.min(*h);
                left -= take;
                take
            })
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DispatchReport {
    pub accepted: Vec<PilotRequest>,
    pub rejected: Vec<(PilotRequest, WmsError)>,
}

/// Forwards requests to their CEs. Accepted requests are queued at the CE.
pub fn factory_dispatch(
    requests: Vec<PilotRequest>,
    ces: &mut [ComputeEntrypoint],
    credentials: &CredentialMap,
    vo_names: &[String],
) -> DispatchReport {
    let mut report = DispatchReport::default();
    for req in requests {
        let Some(ce) = ces.iter_mut().find(|c| c.name == req.ce) else {
            let err = WmsError::UnknownCe(req.ce.clone());
            report.rejected.push((req, err));
            continue;
        };
        if !ce.allows(req.vo) {
            let err = WmsError::VoNotAllowed {
                ce: ce.name.clone(),
                vo: vo_names.get(req.vo.0).cloned().unwrap_or_default(),
            };
            report.rejected.push((req, err));
            continue;
        }
        if credentials.lookup(&req.credential) != Some(req.vo) {
            report.rejected.push((req, WmsError::CredentialUnmapped));
            continue;
        }
        if req.pilot_count > 0 {
            ce.enqueue(&req);
        }
        report.accepted.push(req);
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PilotId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PilotState {
    Requested,
    Provisioning,
    Running,
    Retiring,
    Terminated,
    Preempted,
}

impl PilotState {
    pub fn is_terminal(self) -> bool {
        matches!(self, PilotState::Terminated | PilotState::Preempted)
    }

    pub fn holds_slot(self) -> bool {
        matches!(self, PilotState::Running | PilotState::Retiring)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pilot {
    pub id: PilotId,
    pub vo: VoId,
    pub ce: usize,
    pub region: usize,
    pub cores: u32,
    pub memory: u64,
    pub state: PilotState,
    pub created: SimTime,
    pub start_time: Option<SimTime>,
    pub end_time: Option<SimTime>,
    pub instance: InstanceId,
    pub slot: Option<SlotId>,
    pub record: Option<usize>,
    pub accepts: Vec<VoId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Pilot,
    Job,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EndReason {
    Completed,
    Preempted,
    Retired,
}

impl EndReason {
    pub fn as_str(self) -> &'static str {
        match self {
            EndReason::Completed => "completed",
            EndReason::Preempted => "preempted",
            EndReason::Retired => "retired",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccountingRecord {
    pub kind: RecordKind,
    pub vo: VoId,
    pub user: Option<UserId>,
    pub region: usize,
    pub cores: u32,
    pub start: SimTime,
    pub end: Option<SimTime>,
    pub core_seconds: f64,
    pub end_reason: Option<EndReason>,
}

impl AccountingRecord {
    /// Core-seconds inside `[from, to]`, treating an open record as running until `now`.
    pub fn core_seconds_in(&self, from: SimTime, to: SimTime, now: SimTime) -> f64 {
        let end = self.end.unwrap_or(now);
        let lo = self.start.max(from);
        let hi = end.min(to);
        if hi > lo {
            f64::from(self.cores) * (hi - lo)
        } else {
            0.0
        }
    }
}

/// Central accounting: append-only, records closed in place.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    pub records: Vec<AccountingRecord>,
}

impl Ledger {
    pub fn open(&mut self, kind: RecordKind, vo: VoId, user: Option<UserId>, region: usize, cores: u32, start: SimTime) -> usize {
        self.records.push(AccountingRecord {
            kind,
            vo,
            user,
            region,
            cores,
            start,
            end: None,
            core_seconds: 0.0,
            end_reason: None,
        });
        self.records.len() - 1
    }

    pub fn close(&mut self, idx: usize, end: SimTime, reason: EndReason) {
        let r = &mut self.records[idx];
        debug_assert!(r.end.is_none(), "record closed twice");
        debug_assert!(end >= r.start);
        r.end = Some(end);
        r.core_seconds = f64::from(r.cores) * (end - r.start);
        r.end_reason = Some(reason);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VoAccounting {
    pub job_core_hours: f64,
    pub pilot_core_hours: f64,
    pub pilot_count: u64,
    pub pilot_preemptions: u64,
    pub job_preemptions: u64,
    pub jobs_completed: u64,
}

/// Per-VO sums over records clipped to `window`.
pub fn accounting_summary(ledger: &Ledger, n_vos: usize, window: (SimTime, SimTime), now: SimTime) -> Vec<VoAccounting> {
    let mut out = vec![VoAccounting::default(); n_vos];
    for r in &ledger.records {
        let acc = &mut out[r.vo.0];
        let hours = r.core_seconds_in(window.0, window.1, now) / SECONDS_PER_HOUR;
        let ended_in_window = r.end.is_some_and(|e| e >= window.0 && e <= window.1);
        match r.kind {
            RecordKind::Pilot => {
                acc.pilot_core_hours += hours;
                if r.start <= window.1 && r.end.unwrap_or(now) >= window.0 {
                    acc.pilot_count += 1;
                }
                if ended_in_window && r.end_reason == Some(EndReason::Preempted) {
                    acc.pilot_preemptions += 1;
                }
            }
            RecordKind::Job => {
                acc.job_core_hours += hours;
                if ended_in_window {
                    match r.end_reason {
                        Some(EndReason::Preempted) => acc.job_preemptions += 1,
                        Some(EndReason::Completed) => acc.jobs_completed += 1,
                        _ => {}
                    }
                }
            }
        }
    }
    out
}

/// Registers a booted pilot with the pool. A bad shared secret terminates the
/// pilot with a zero-length record.
pub fn pilot_join(
    pilot: &mut Pilot,
    secret_ok: bool,
    site: usize,
    now: SimTime,
    pool: &mut Pool,
    ledger: &mut Ledger,
) -> Result<SlotId, WmsError> {
    debug_assert_eq!(pilot.state, PilotState::Provisioning);
    let record = ledger.open(RecordKind::Pilot, pilot.vo, None, pilot.region, pilot.cores, now);
    pilot.record = Some(record);
    if !secret_ok {
        ledger.close(record, now, EndReason::Retired);
        pilot.state = PilotState::Terminated;
        pilot.end_time = Some(now);
        return Err(WmsError::AuthFailed);
    }
    let slot = pool.add_slot(SlotSpec {
        pilot: Some(pilot.id.0),
        site,
        cores: pilot.cores,
        memory: pilot.memory,
        accepts: pilot.accepts.clone(),
    });
    pilot.state = PilotState::Running;
    pilot.start_time = Some(now);
    pilot.slot = Some(slot);
    Ok(slot)
}

/// Ends a pilot: removes its slot and closes its record. The evicted
/// placements are returned for the caller to requeue.
pub fn pilot_terminate(pilot: &mut Pilot, reason: EndReason, now: SimTime, pool: &mut Pool, ledger: &mut Ledger) -> Vec<Placement> {
    if pilot.state.is_terminal() {
        return Vec::new();
    }
    let evicted = match pilot.slot.take() {
        Some(slot) => pool.remove_slot(slot),
        None => Vec::new(),
    };
    let record = match pilot.record {
        Some(r) => r,
        // never joined: a zero-length record still marks its end
        None => {
            let r = ledger.open(RecordKind::Pilot, pilot.vo, None, pilot.region, pilot.cores, now);
            pilot.record = Some(r);
            r
        }
    };
    ledger.close(record, now, reason);
    pilot.state = match reason {
        EndReason::Preempted => PilotState::Preempted,
        _ => PilotState::Terminated,
    };
    pilot.end_time = Some(now);
    evicted
}

/// Puts evicted jobs back in the queue under `retention`.
pub fn requeue_evicted(evicted: &[Placement], jobs: &mut [Job], pool: &mut Pool, retention: Retention) {
    for p in evicted {
        let job = &mut jobs[p.job.0];
        requeue_on_preemption(job, retention);
        pool.enqueue(job);
    }
}

/// Append-only `(time, actor, decision)` log.
#[derive(Debug, Clone, Default)]
pub struct DecisionTrace {
    pub enabled: bool,
    pub rows: Vec<(SimTime, String, String)>,
}

impl DecisionTrace {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            rows: Vec::new(),
        }
    }

    pub fn log(&mut self, time: SimTime, actor: &str, decision: impl FnOnce() -> String) {
        if self.enabled {
            self.rows.push((time, actor.to_string(), decision()));
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "time_s,actor,decision")?;
        for (t, actor, decision) in &self.rows {
            writeln!(w, "{t:.3},{actor},\"{}\"", decision.replace('"', "\"\""))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{JobId, JobState, GIB};

    const UCSD: VoId = VoId(0);
    const FNAL: VoId = VoId(1);

    fn creds() -> CredentialMap {
        let mut c = CredentialMap::default();
        c.insert(Credential("ucsd-token".into()), UCSD);
        c.insert(Credential("fnal-token".into()), FNAL);
        c
    }

    fn ce() -> ComputeEntrypoint {
        ComputeEntrypoint::new("azure-ce", vec![0, 1], vec![UCSD, FNAL], vec![(UCSD, 0), (FNAL, 1)])
    }

    fn frontends() -> Vec<Frontend> {
        vec![
            Frontend {
                vo: UCSD,
                ce: "azure-ce".into(),
                credential: Credential("ucsd-token".into()),
                cores_per_pilot: 16,
            },
            Frontend {
                vo: FNAL,
                ce: "azure-ce".into(),
                credential: Credential("fnal-token".into()),
                cores_per_pilot: 16,
            },
        ]
    }

    fn pressure(idle: u64, running: u64, pending: u64, cap: Option<u64>) -> VoPressure {
        VoPressure {
            vo: UCSD,
            idle_demand_cores: idle,
            running_pilot_cores: running,
            pending_pilot_cores: pending,
            core_cap: cap,
        }
    }

    #[test]
    fn capped_request() {
        let reqs = frontend_assess(&frontends(), &[pressure(32_000, 0, 0, Some(20_000))], 0.0);
        assert_eq!(reqs.len(), 1);
        assert_eq!(reqs[0].pilot_count, 1250);
        assert_eq!(reqs[0].cores_per_pilot, 16);
    }

    #[test]
    fn empty_queue_requests_nothing() {
        assert!(frontend_assess(&frontends(), &[pressure(0, 0, 0, Some(20_000))], 0.0).is_empty());
    }

    #[test]
    fn pending_pilots_cover_demand() {
        assert!(frontend_assess(&frontends(), &[pressure(100, 0, 100, None)], 0.0).is_empty());
    }

    #[test]
    fn rounding_up_overshoots_cap_by_less_than_a_pilot() {
        // 19_990 running leaves room for 10 cores; one whole pilot is asked for
        let reqs = frontend_assess(&frontends(), &[pressure(500, 19_990, 0, Some(20_000))], 0.0);
        assert_eq!(reqs[0].pilot_count, 1);
        assert_eq!(reqs[0].cores_per_pilot, 16);
        assert!(frontend_assess(&frontends(), &[pressure(500, 20_006, 0, Some(20_000))], 0.0).is_empty());
    }

    #[test]
    fn dispatch_accepts_allowlisted_vo() {
        let mut ces = vec![ce()];
        let reqs = frontend_assess(&frontends(), &[pressure(160, 0, 0, None)], 0.0);
        let report = factory_dispatch(reqs, &mut ces, &creds(), &["UCSD".into(), "Fermilab".into()]);
        assert_eq!(report.accepted.len(), 1);
        assert_eq!(ces[0].queued_pilots(UCSD), 10);
    }

    #[test]
    fn dispatch_rejects_unknown_ce_and_foreign_vo() {
        let mut ces = vec![ComputeEntrypoint::new("ucsd-only", vec![0], vec![UCSD], vec![])];
        let mut bad_ce = frontend_assess(&frontends(), &[pressure(16, 0, 0, None)], 0.0);
        bad_ce[0].ce = "nowhere".into();
        let mut fnal = frontend_assess(&frontends(), &[VoPressure { vo: FNAL, ..pressure(16, 0, 0, None) }], 0.0);
        fnal[0].ce = "ucsd-only".into();
        let names = ["UCSD".to_string(), "Fermilab".to_string()];
        let report = factory_dispatch(bad_ce.into_iter().chain(fnal).collect(), &mut ces, &creds(), &names);
        assert!(report.accepted.is_empty());
        assert_eq!(report.rejected[0].1, WmsError::UnknownCe("nowhere".into()));
        assert_eq!(
            report.rejected[1].1,
            WmsError::VoNotAllowed {
                ce: "ucsd-only".into(),
                vo: "Fermilab".into()
            }
        );
    }

    #[test]
    fn zero_pilot_request_is_a_noop() {
        let mut ces = vec![ce()];
        let req = PilotRequest {
            vo: UCSD,
            ce: "azure-ce".into(),
            pilot_count: 0,
            cores_per_pilot: 16,
            issue_time: 0.0,
            credential: Credential("ucsd-token".into()),
        };
        let report = factory_dispatch(vec![req], &mut ces, &creds(), &[]);
        assert_eq!(report.accepted.len(), 1);
        assert_eq!(ces[0].queued_pilots(UCSD), 0);
    }

    #[test]
    fn translate_counts_instances() {
        let c = ce();
        let mut req = PilotRequest {
            vo: UCSD,
            ce: "azure-ce".into(),
            pilot_count: 1250,
            cores_per_pilot: 16,
            issue_time: 0.0,
            credential: Credential("ucsd-token".into()),
        };
        assert_eq!(c.ce_translate(&req, &creds(), 16, &[2000, 2000]).unwrap(), vec![1250, 0]);
        assert_eq!(c.ce_translate(&req, &creds(), 16, &[1000, 2000]).unwrap(), vec![1000, 250]);
        req.pilot_count = 10;
        req.cores_per_pilot = 8;
        assert_eq!(c.ce_translate(&req, &creds(), 16, &[100, 100]).unwrap(), vec![5, 0]);
        req.credential = Credential("forged".into());
        assert_eq!(c.ce_translate(&req, &creds(), 16, &[100]), Err(WmsError::CredentialUnmapped));
    }

    #[test]
    fn local_priority_serves_ucsd_first() {
        let mut c = ce();
        let names = ["UCSD".to_string(), "Fermilab".to_string()];
        let mut reqs = frontend_assess(&frontends(), &[VoPressure { vo: FNAL, ..pressure(64, 0, 0, None) }], 0.0);
        reqs.extend(frontend_assess(&frontends(), &[pressure(64, 0, 0, None)], 0.0));
        let mut ces = vec![c.clone()];
        factory_dispatch(reqs, &mut ces, &creds(), &names);
        c = ces.remove(0);
        assert_eq!(c.take_next(16), Some((UCSD, 16)));
        assert_eq!(c.queued_pilots(UCSD), 3);
        c.withdraw(UCSD, 10);
        assert_eq!(c.take_next(16), Some((FNAL, 16)));
        assert_eq!(c.take_next(8), None);
    }

    fn pilot() -> Pilot {
        Pilot {
            id: PilotId(0),
            vo: UCSD,
            ce: 0,
            region: 0,
            cores: 16,
            memory: 32 * GIB,
            state: PilotState::Provisioning,
            created: 0.0,
            start_time: None,
            end_time: None,
            instance: InstanceId(0),
            slot: None,
            record: None,
            accepts: vec![UCSD],
        }
    }

    fn job(id: usize, cores: u32) -> Job {
        Job {
            id: JobId(id),
            campaign: 0,
            vo: UCSD,
            user: UserId(0),
            cores,
            memory: u64::from(cores) * 2 * GIB,
            cpu_seconds_total: 1e5,
            cpu_seconds_done: 5e4,
            state: JobState::Queued,
            preempt_count: 0,
            submit_time: 0.0,
            start_time: None,
            finish_time: None,
            efficiency: 1.0,
        }
    }

    #[test]
    fn join_adds_a_full_instance_slot() {
        let mut pool = Pool::new(vec![0, 1], vec![UCSD]);
        let mut ledger = Ledger::default();
        let mut p = pilot();
        let slot = pilot_join(&mut p, true, 0, 10.0, &mut pool, &mut ledger).unwrap();
        assert_eq!(pool.slot(slot).unwrap().free_cores, 16);
        assert_eq!(p.state, PilotState::Running);
        assert_eq!(ledger.records.len(), 1);
    }

    #[test]
    fn bad_secret_terminates_pilot() {
        let mut pool = Pool::new(vec![0, 1], vec![UCSD]);
        let mut ledger = Ledger::default();
        let mut p = pilot();
        assert_eq!(pilot_join(&mut p, false, 0, 10.0, &mut pool, &mut ledger), Err(WmsError::AuthFailed));
        assert_eq!(pool.slots().count(), 0);
        assert_eq!(p.state, PilotState::Terminated);
        assert_eq!(ledger.records[0].end_reason, Some(EndReason::Retired));
    }

    #[test]
    fn preempted_during_boot_never_joins() {
        let mut pool = Pool::new(vec![0, 1], vec![UCSD]);
        let mut ledger = Ledger::default();
        let mut p = pilot();
        let evicted = pilot_terminate(&mut p, EndReason::Preempted, 100.0, &mut pool, &mut ledger);
        assert!(evicted.is_empty());
        assert_eq!(p.state, PilotState::Preempted);
        assert_eq!(p.start_time, None);
        assert_eq!(ledger.records[0].core_seconds, 0.0);
    }

    #[test]
    fn preemption_requeues_running_jobs() {
        let mut pool = Pool::new(vec![0, 1], vec![UCSD]);
        let mut ledger = Ledger::default();
        let mut p = pilot();
        let slot = pilot_join(&mut p, true, 0, 0.0, &mut pool, &mut ledger).unwrap();
        let mut jobs = vec![job(0, 8), job(1, 8)];
        for j in jobs.iter_mut() {
            pool.partition(slot, j, j.cores, j.memory).unwrap();
            j.state = JobState::Running;
        }
        let evicted = pilot_terminate(&mut p, EndReason::Preempted, 3600.0, &mut pool, &mut ledger);
        requeue_evicted(&evicted, &mut jobs, &mut pool, Retention::None);
        for j in &jobs {
            assert_eq!(j.state, JobState::Queued);
            assert_eq!(j.preempt_count, 1);
            assert_eq!(j.cpu_seconds_done, 0.0);
            assert!(pool.is_queued(j));
        }
        assert_eq!(pool.queue_depth(UCSD), 2);
        assert_eq!(ledger.records[0].core_seconds, 16.0 * 3600.0);
    }

    #[test]
    fn idle_retirement_record() {
        let mut pool = Pool::new(vec![0, 1], vec![UCSD]);
        let mut ledger = Ledger::default();
        let mut p = pilot();
        pilot_join(&mut p, true, 0, 0.0, &mut pool, &mut ledger).unwrap();
        pilot_terminate(&mut p, EndReason::Retired, 86_400.0, &mut pool, &mut ledger);
        assert_eq!(ledger.records[0].end_reason, Some(EndReason::Retired));
        let summary = accounting_summary(&ledger, 2, (0.0, 86_400.0), 86_400.0);
        assert_eq!(summary[0].pilot_core_hours, 384.0);
        assert_eq!(summary[0].pilot_count, 1);
        // terminal states are absorbing
        assert!(pilot_terminate(&mut p, EndReason::Preempted, 90_000.0, &mut pool, &mut ledger).is_empty());
        assert_eq!(p.state, PilotState::Terminated);
    }

    #[test]
    fn empty_ledger_summary() {
        let s = accounting_summary(&Ledger::default(), 2, (0.0, 1e6), 1e6);
        assert_eq!(s, vec![VoAccounting::default(); 2]);
    }

    #[test]
    fn summary_clips_to_window() {
        let mut ledger = Ledger::default();
        let r = ledger.open(RecordKind::Job, UCSD, Some(UserId(0)), 0, 2, 0.0);
        ledger.close(r, 7200.0, EndReason::Completed);
        ledger.open(RecordKind::Job, UCSD, Some(UserId(0)), 0, 1, 3600.0);
        let s = accounting_summary(&ledger, 1, (3600.0, 7200.0), 10_800.0);
        // 2 cores x 1 h + 1 core x 1 h
        assert_eq!(s[0].job_core_hours, 3.0);
        assert_eq!(s[0].jobs_completed, 1);
    }

    #[test]
    fn trace_csv() {
        let mut t = DecisionTrace::new(true);
        t.log(1.5, "ce", || "bind \"UCSD\"".into());
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "time_s,actor,decision\n1.500,ce,\"bind \"\"UCSD\"\"\"\n");
        let mut off = DecisionTrace::new(false);
        off.log(0.0, "x", || unreachable!());
        assert!(off.rows.is_empty());
    }
}
