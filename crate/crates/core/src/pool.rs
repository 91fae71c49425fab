//! The overlay pool: partitionable slots carved out of pilots, a queue of
//! idle jobs, and the negotiator that matches one to the other.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Bound;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::SimTime;
use crate::workload::{Job, JobId, UserId, VoId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("slot {slot:?} has {free_cores} cores / {free_memory} bytes free, asked for {cores} / {memory}")]
    InsufficientResources {
        slot: SlotId,
        cores: u32,
        memory: u64,
        free_cores: u32,
        free_memory: u64,
    },
    #[error("no such slot {0:?}")]
    UnknownSlot(SlotId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId(pub usize);

/// Intra-VO ordering of users' jobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UserDiscipline {
    #[default]
    RoundRobin,
    Fifo,
}

/// What a new slot looks like; `accepts` empty means any VO may run there.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSpec {
    pub pilot: Option<usize>,
    pub site: usize,
    pub cores: u32,
    pub memory: u64,
    pub accepts: Vec<VoId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub job: JobId,
    pub vo: VoId,
    pub user: UserId,
    pub cores: u32,
    pub memory: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub id: SlotId,
    pub pilot: Option<usize>,
    pub site: usize,
    pub total_cores: u32,
    pub total_memory: u64,
    pub free_cores: u32,
    pub free_memory: u64,
    pub accepts: Vec<VoId>,
    pub placements: Vec<Placement>,
    /// Draining slots keep running jobs but take no new ones.
    pub draining: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlacementHandle {
    pub slot: SlotId,
    pub job: JobId,
}

/// `(vo priority_rank, round, user)` for round-robin, `(rank, 0, 0)` for FIFO
/// where submit order breaks the tie.
pub type RankTuple = (u32, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct MatchDecision {
    pub time: SimTime,
    pub job: JobId,
    pub slot: SlotId,
    pub cores: u32,
    pub memory: u64,
    pub rank: RankTuple,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Utilization {
    pub busy_cores: u64,
    pub provisioned_cores: u64,
    pub fraction: f64,
}

type QueueKey = (OrderedFloat<f64>, JobId);

#[derive(Debug, Default, Clone)]
struct UserQueue {
    jobs: BTreeSet<QueueKey>,
    /// queued job count per core size
    by_cores: BTreeMap<u32, usize>,
    running_cores: u64,
}

impl UserQueue {
    fn min_cores(&self) -> Option<u32> {
        self.by_cores.keys().next().copied()
    }
}

#[derive(Debug, Clone)]
pub struct Pool {
    vo_ranks: Vec<u32>,
    user_vo: Vec<VoId>,
    discipline: UserDiscipline,
    user_core_cap: Option<u64>,
    slots: Vec<Option<Slot>>,
    /// per-VO best-fit index over non-draining slots with free cores
    free_index: Vec<BTreeSet<(u32, SlotId)>>,
    users: Vec<UserQueue>,
    vo_queue_depth: Vec<usize>,
    vo_queued_cores: Vec<u64>,
    vo_busy_cores: Vec<u64>,
    busy_cores: u64,
    provisioned_cores: u64,
}

impl Pool {
    /// `vo_ranks[v]` is the priority rank of VO `v`; `user_vo[u]` the VO of user `u`.
    pub fn new(vo_ranks: Vec<u32>, user_vo: Vec<VoId>) -> Self {
        let n_vos = vo_ranks.len();
        let n_users = user_vo.len();
        Self {
            vo_ranks,
            user_vo,
            discipline: UserDiscipline::RoundRobin,
            user_core_cap: None,
            slots: Vec::new(),
            free_index: vec![BTreeSet::new(); n_vos],
            users: vec![UserQueue::default(); n_users],
            vo_queue_depth: vec![0; n_vos],
            vo_queued_cores: vec![0; n_vos],
            vo_busy_cores: vec![0; n_vos],
            busy_cores: 0,
            provisioned_cores: 0,
        }
    }

    pub fn with_discipline(mut self, discipline: UserDiscipline) -> Self {
        self.discipline = discipline;
        self
    }

    /// Caps the cores any single user may hold at once.
    pub fn with_user_core_cap(mut self, cap: Option<u64>) -> Self {
        self.user_core_cap = cap;
        self
    }

    pub fn slot(&self, id: SlotId) -> Option<&Slot> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.iter().flatten()
    }

    pub fn queue_depth(&self, vo: VoId) -> usize {
        self.vo_queue_depth[vo.0]
    }

    pub fn queued_cores(&self, vo: VoId) -> u64 {
        self.vo_queued_cores[vo.0]
    }

    pub fn busy_cores_for(&self, vo: VoId) -> u64 {
        self.vo_busy_cores[vo.0]
    }

    pub fn user_running_cores(&self, user: UserId) -> u64 {
        self.users[user.0].running_cores
    }

    pub fn is_queued(&self, job: &Job) -> bool {
        self.users[job.user.0]
            .jobs
            .contains(&(OrderedFloat(job.submit_time), job.id))
    }

    fn accepts(slot: &Slot, vo: VoId) -> bool {
        slot.accepts.is_empty() || slot.accepts.contains(&vo)
    }

    fn index_remove(&mut self, id: SlotId) {
        let slot = self.slots[id.0].as_ref().expect("live slot");
        let key = (slot.free_cores, id);
        for v in 0..self.free_index.len() {
            if Self::accepts(slot, VoId(v)) {
                self.free_index[v].remove(&key);
            }
        }
    }

    fn index_insert(&mut self, id: SlotId) {
        let slot = self.slots[id.0].as_ref().expect("live slot");
        if slot.free_cores == 0 || slot.draining {
            return;
        }
        let key = (slot.free_cores, id);
        for v in 0..self.free_index.len() {
            if Self::accepts(slot, VoId(v)) {
                self.free_index[v].insert(key);
            }
        }
    }

    pub fn add_slot(&mut self, spec: SlotSpec) -> SlotId {
        let id = SlotId(self.slots.len());
        self.provisioned_cores += u64::from(spec.cores);
        self.slots.push(Some(Slot {
            id,
            pilot: spec.pilot,
            site: spec.site,
            total_cores: spec.cores,
            total_memory: spec.memory,
            free_cores: spec.cores,
            free_memory: spec.memory,
            accepts: spec.accepts,
            placements: Vec::new(),
            draining: false,
        }));
        self.index_insert(id);
        id
    }

    /// Drops the slot and returns the jobs that were running on it. The caller
    /// owns putting them back in the queue.
    pub fn remove_slot(&mut self, id: SlotId) -> Vec<Placement> {
        if self.slot(id).is_none() {
            return Vec::new();
        }
        self.index_remove(id);
        let slot = self.slots[id.0].take().expect("checked");
        self.provisioned_cores -= u64::from(slot.total_cores);
        for p in &slot.placements {
            self.note_release(p);
        }
        slot.placements
    }

    /// Stops new matches on a slot; running jobs continue.
    pub fn drain(&mut self, id: SlotId) {
        if self.slot(id).is_some() {
            self.index_remove(id);
            self.slots[id.0].as_mut().expect("checked").draining = true;
        }
    }

    fn note_release(&mut self, p: &Placement) {
        self.busy_cores -= u64::from(p.cores);
        self.vo_busy_cores[p.vo.0] -= u64::from(p.cores);
        self.users[p.user.0].running_cores -= u64::from(p.cores);
    }

    pub fn enqueue(&mut self, job: &Job) {
        let q = &mut self.users[job.user.0];
        if q.jobs.insert((OrderedFloat(job.submit_time), job.id)) {
            *q.by_cores.entry(job.cores).or_insert(0) += 1;
            self.vo_queue_depth[job.vo.0] += 1;
            self.vo_queued_cores[job.vo.0] += u64::from(job.cores);
        }
    }

    fn dequeue(&mut self, job: &Job) {
        let q = &mut self.users[job.user.0];
        if q.jobs.remove(&(OrderedFloat(job.submit_time), job.id)) {
            let c = q.by_cores.get_mut(&job.cores).expect("counted");
            *c -= 1;
            if *c == 0 {
                q.by_cores.remove(&job.cores);
            }
            self.vo_queue_depth[job.vo.0] -= 1;
            self.vo_queued_cores[job.vo.0] -= u64::from(job.cores);
        }
    }

    /// Carves `cores`/`memory` for `job` out of a slot.
    pub fn partition(&mut self, id: SlotId, job: &Job, cores: u32, memory: u64) -> Result<PlacementHandle, PoolError> {
        let slot = self.slot(id).ok_or(PoolError::UnknownSlot(id))?;
        if cores > slot.free_cores || memory > slot.free_memory {
            return Err(PoolError::InsufficientResources {
                slot: id,
                cores,
                memory,
                free_cores: slot.free_cores,
                free_memory: slot.free_memory,
            });
        }
        self.index_remove(id);
        let slot = self.slots[id.0].as_mut().expect("checked");
        slot.free_cores -= cores;
        slot.free_memory -= memory;
        slot.placements.push(Placement {
            job: job.id,
            vo: job.vo,
            user: job.user,
            cores,
            memory,
        });
        self.index_insert(id);
        self.busy_cores += u64::from(cores);
        self.vo_busy_cores[job.vo.0] += u64::from(cores);
        self.users[job.user.0].running_cores += u64::from(cores);
        Ok(PlacementHandle { slot: id, job: job.id })
    }

    /// Returns the placement's resources to its slot. False if it is no longer active.
    pub fn release(&mut self, handle: PlacementHandle) -> bool {
        let Some(slot) = self.slot(handle.slot) else {
            return false;
        };
        let Some(pos) = slot.placements.iter().position(|p| p.job == handle.job) else {
            return false;
        };
        self.index_remove(handle.slot);
        let slot = self.slots[handle.slot.0].as_mut().expect("checked");
        let p = slot.placements.swap_remove(pos);
        slot.free_cores += p.cores;
        slot.free_memory += p.memory;
        self.index_insert(handle.slot);
        self.note_release(&p);
        true
    }

    pub fn utilization(&self) -> Utilization {
        Self::utilization_of(self.busy_cores, self.provisioned_cores)
    }

    pub fn utilization_of(busy_cores: u64, provisioned_cores: u64) -> Utilization {
        let fraction = if provisioned_cores == 0 {
            1.0
        } else {
            busy_cores as f64 / provisioned_cores as f64
        };
        Utilization {
            busy_cores,
            provisioned_cores,
            fraction,
        }
    }

    fn max_free(&self, vo: VoId) -> u32 {
        self.free_index[vo.0].iter().next_back().map_or(0, |k| k.0)
    }

    fn best_fit(&self, vo: VoId, cores: u32, memory: u64) -> Option<SlotId> {
        self.free_index[vo.0]
            .range((Bound::Included((cores, SlotId(0))), Bound::Unbounded))
            .map(|&(_, id)| id)
            .find(|id| self.slots[id.0].as_ref().is_some_and(|s| s.free_memory >= memory))
    }

    fn cap_room(&self, user: UserId) -> u64 {
        match self.user_core_cap {
            Some(cap) => cap.saturating_sub(self.users[user.0].running_cores),
            None => u64::MAX,
        }
    }

    /// One negotiation cycle. Jobs are visited by VO rank, then per-user round
    /// robin (or submit order under FIFO); each is placed on the best-fit
    /// eligible slot or skipped. Placements are applied to the pool before
    /// returning.
    pub fn negotiate(&mut self, jobs: &[Job], now: SimTime) -> Vec<MatchDecision> {
        let mut decisions = Vec::new();
        let mut vo_order: Vec<usize> = (0..self.vo_ranks.len()).collect();
        vo_order.sort_by_key(|&v| self.vo_ranks[v]);
        for v in vo_order {
            let vo = VoId(v);
            if self.vo_queue_depth[v] == 0 || self.free_index[v].is_empty() {
                continue;
            }
            let users: Vec<UserId> = (0..self.user_vo.len())
                .filter(|&u| self.user_vo[u] == vo && !self.users[u].jobs.is_empty())
                .map(UserId)
                .collect();
            match self.discipline {
                UserDiscipline::RoundRobin => self.negotiate_round_robin(vo, &users, jobs, now, &mut decisions),
                UserDiscipline::Fifo => self.negotiate_fifo(vo, &users, jobs, now, &mut decisions),
            }
        }
        decisions
    }

    fn user_exhausted(&self, vo: VoId, user: UserId) -> bool {
        let q = &self.users[user.0];
        match q.min_cores() {
            None => true,
            Some(min) => u64::from(min) > self.cap_room(user) || min > self.max_free(vo),
        }
    }

    fn try_place(&mut self, vo: VoId, job: &Job, now: SimTime, rank: RankTuple, out: &mut Vec<MatchDecision>) -> bool {
        if u64::from(job.cores) > self.cap_room(job.user) {
            return false;
        }
        let Some(slot) = self.best_fit(vo, job.cores, job.memory) else {
            return false;
        };
        self.dequeue(job);
        self.partition(slot, job, job.cores, job.memory)
            .expect("best_fit checked capacity");
        out.push(MatchDecision {
            time: now,
            job: job.id,
            slot,
            cores: job.cores,
            memory: job.memory,
            rank,
        });
        true
    }

    fn negotiate_round_robin(&mut self, vo: VoId, users: &[UserId], jobs: &[Job], now: SimTime, out: &mut Vec<MatchDecision>) {
        let rank = self.vo_ranks[vo.0];
        let mut cursors: Vec<(UserId, Option<QueueKey>)> = users.iter().map(|&u| (u, None)).collect();
        let mut round = 0usize;
        while !cursors.is_empty() {
            if self.free_index[vo.0].is_empty() {
                return;
            }
            let mut i = 0;
            while i < cursors.len() {
                let (user, cursor) = cursors[i];
                if self.user_exhausted(vo, user) {
                    cursors.remove(i);
                    continue;
                }
                let lower = match cursor {
                    None => Bound::Unbounded,
                    Some(k) => Bound::Excluded(k),
                };
                let next = self.users[user.0].jobs.range((lower, Bound::Unbounded)).next().copied();
                let Some(key) = next else {
                    cursors.remove(i);
                    continue;
                };
                cursors[i].1 = Some(key);
                let job = &jobs[key.1 .0];
                self.try_place(vo, job, now, (rank, round, user.0), out);
                i += 1;
            }
            round += 1;
        }
    }

    fn negotiate_fifo(&mut self, vo: VoId, users: &[UserId], jobs: &[Job], now: SimTime, out: &mut Vec<MatchDecision>) {
        let rank = self.vo_ranks[vo.0];
        let mut merged: BTreeSet<(QueueKey, UserId)> = BTreeSet::new();
        for &u in users {
            if let Some(k) = self.users[u.0].jobs.iter().next() {
                merged.insert((*k, u));
            }
        }
        while let Some((key, user)) = merged.pop_first() {
            if self.free_index[vo.0].is_empty() {
                return;
            }
            if !self.user_exhausted(vo, user) {
                let job = &jobs[key.1 .0];
                self.try_place(vo, job, now, (rank, 0, 0), out);
                if let Some(k) = self.users[user.0]
                    .jobs
                    .range((Bound::Excluded(key), Bound::Unbounded))
                    .next()
                {
                    merged.insert((*k, user));
                }
            }
        }
    }

    /// Bookkeeping cross-check used by tests and debug builds.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut busy = 0u64;
        let mut prov = 0u64;
        for s in self.slots() {
            let placed: u32 = s.placements.iter().map(|p| p.cores).sum();
            let placed_mem: u64 = s.placements.iter().map(|p| p.memory).sum();
            if placed + s.free_cores != s.total_cores {
                return Err(format!("slot {:?}: cores do not add up", s.id));
            }
            if placed_mem + s.free_memory != s.total_memory {
                return Err(format!("slot {:?}: memory does not add up", s.id));
            }
            busy += u64::from(placed);
            prov += u64::from(s.total_cores);
        }
        if busy != self.busy_cores || prov != self.provisioned_cores {
            return Err(format!(
                "pool totals busy={} prov={} but slots say {busy}/{prov}",
                self.busy_cores, self.provisioned_cores
            ));
        }
        if self.vo_busy_cores.iter().sum::<u64>() != busy {
            return Err("per-VO busy cores do not add up".into());
        }
        Ok(())
    }
}
