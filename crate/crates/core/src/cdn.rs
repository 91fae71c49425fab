//! Regional content caches in front of a distant origin.
//!
//! Software and calibration objects go through a per-region LRU cache when
//! one exists; bulk physics data always streams from its home servers and is
//! charged bandwidth time only. Stall time feeds job CPU efficiency.

use std::collections::BTreeMap;

use lru::LruCache;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectClass {
    Software,
    Calibration,
    Bulk,
}

impl ObjectClass {
    pub fn cacheable(self) -> bool {
        !matches!(self, ObjectClass::Bulk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mutability {
    Immutable,
    SlowChanging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DataObject {
    pub id: ObjectId,
    pub class: ObjectClass,
    pub size: u64,
    pub mutability: Mutability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub cache_rtt: f64,
    pub origin_rtt: f64,
    /// bytes/s
    pub cache_bandwidth: f64,
    pub wan_bandwidth: f64,
    pub bulk_bandwidth: f64,
    /// How many small requests are in flight at once; 1 means strictly serial.
    pub concurrency: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            cache_rtt: 0.002,
            origin_rtt: 0.120,
            cache_bandwidth: 1.25e9,
            wan_bandwidth: 5.0e6,
            bulk_bandwidth: 5.0e8,
            concurrency: 1.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.cache_rtt >= 0.0 && self.origin_rtt > self.cache_rtt) {
            return Err("origin_rtt must exceed cache_rtt >= 0".into());
        }
        for (name, bw) in [
            ("cache_bandwidth", self.cache_bandwidth),
            ("wan_bandwidth", self.wan_bandwidth),
            ("bulk_bandwidth", self.bulk_bandwidth),
            ("concurrency", self.concurrency),
        ] {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(format!("{name} must be > 0"));
            }
        }
        Ok(())
    }

    pub fn hit_latency(&self, size: u64) -> f64 {
        self.cache_rtt + size as f64 / self.cache_bandwidth
    }

    pub fn origin_latency(&self, size: u64) -> f64 {
        self.origin_rtt + size as f64 / self.wan_bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RequestSpread {
    #[default]
    StartupBurst,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoProfile {
    pub software_requests: u32,
    pub software_bytes: u64,
    pub calibration_requests: u32,
    pub calibration_bytes: u64,
    pub bulk_bytes_in: u64,
    pub bulk_bytes_out: u64,
    #[serde(default)]
    pub request_spread: RequestSpread,
}

impl IoProfile {
    /// 2000 x 20 kB calibration lookups, 500 x 100 kB software files,
    /// 2 GB in / 0.5 GB out of bulk data.
    pub fn cms_default() -> Self {
        Self {
            software_requests: 500,
            software_bytes: 100_000,
            calibration_requests: 2000,
            calibration_bytes: 20_000,
            bulk_bytes_in: 2_000_000_000,
            bulk_bytes_out: 500_000_000,
            request_spread: RequestSpread::StartupBurst,
        }
    }

    pub fn cms_light() -> Self {
        Self {
            software_requests: 50,
            software_bytes: 100_000,
            calibration_requests: 200,
            calibration_bytes: 20_000,
            bulk_bytes_in: 500_000_000,
            bulk_bytes_out: 100_000_000,
            request_spread: RequestSpread::StartupBurst,
        }
    }

    pub fn none() -> Self {
        Self {
            software_requests: 0,
            software_bytes: 0,
            calibration_requests: 0,
            calibration_bytes: 0,
            bulk_bytes_in: 0,
            bulk_bytes_out: 0,
            request_spread: RequestSpread::StartupBurst,
        }
    }

    pub fn cacheable_requests(&self) -> u64 {
        u64::from(self.software_requests) + u64::from(self.calibration_requests)
    }

    /// The small objects a job with this profile reads. Jobs sharing a
    /// profile key read the same objects (same release, same conditions).
    pub fn objects(&self, profile_key: u32) -> impl Iterator<Item = DataObject> + '_ {
        let base = u64::from(profile_key) << 40;
        let software = (0..self.software_requests).map(move |i| DataObject {
            id: ObjectId(base | u64::from(i)),
            class: ObjectClass::Software,
            size: self.software_bytes,
            mutability: Mutability::Immutable,
        });
        let calibration = (0..self.calibration_requests).map(move |i| DataObject {
            id: ObjectId(base | (1 << 32) | u64::from(i)),
            class: ObjectClass::Calibration,
            size: self.calibration_bytes,
            mutability: Mutability::SlowChanging,
        });
        software.chain(calibration)
    }
}

pub fn builtin_io_profiles() -> BTreeMap<String, IoProfile> {
    BTreeMap::from([
        ("cms-default".to_string(), IoProfile::cms_default()),
        ("cms-light".to_string(), IoProfile::cms_light()),
        ("none".to_string(), IoProfile::none()),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Cache,
    Origin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheStats {
    pub hit_rate: Option<f64>,
    pub bytes_from_origin: u64,
    pub evictions: u64,
}

/// Byte-bounded LRU object cache for one region.
#[derive(Debug)]
pub struct CacheNode {
    pub region: String,
    pub capacity_bytes: u64,
    contents: LruCache<ObjectId, u64>,
    used_bytes: u64,
    pub hits: u64,
    pub misses: u64,
    pub bytes_from_origin: u64,
    pub evictions: u64,
}

impl CacheNode {
    pub fn new(region: impl Into<String>, capacity_bytes: u64) -> Self {
        Self {
            region: region.into(),
            capacity_bytes,
            contents: LruCache::unbounded(),
            used_bytes: 0,
            hits: 0,
            misses: 0,
            bytes_from_origin: 0,
            evictions: 0,
        }
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn contains(&self, id: ObjectId) -> bool {
        self.contents.contains(&id)
    }

    /// Cached ids from least to most recently used.
    pub fn lru_order(&self) -> Vec<ObjectId> {
        self.contents.iter().rev().map(|(k, _)| *k).collect()
    }

    pub fn fetch(&mut self, object: &DataObject, latency: &LatencyModel) -> (f64, Source) {
        debug_assert!(object.class.cacheable());
        if self.contents.get(&object.id).is_some() {
            self.hits += 1;
            return (latency.hit_latency(object.size), Source::Cache);
        }
        self.misses += 1;
        self.bytes_from_origin += object.size;
        if object.size <= self.capacity_bytes {
            while self.used_bytes + object.size > self.capacity_bytes {
                let (_, size) = self.contents.pop_lru().expect("non-empty while over capacity");
                self.used_bytes -= size;
                self.evictions += 1;
            }
            self.contents.put(object.id, object.size);
            self.used_bytes += object.size;
        }
        (latency.origin_latency(object.size), Source::Origin)
    }

    pub fn stats(&self) -> CacheStats {
        let total = self.hits + self.misses;
        CacheStats {
            hit_rate: (total > 0).then(|| self.hits as f64 / total as f64),
            bytes_from_origin: self.bytes_from_origin,
            evictions: self.evictions,
        }
    }
}

/// All sites' caches plus origin-only accounting for sites without one.
#[derive(Debug)]
pub struct DataLayer {
    pub latency: LatencyModel,
    caches: Vec<Option<CacheNode>>,
    site_names: Vec<String>,
    uncached_origin_bytes: Vec<u64>,
}

impl DataLayer {
    /// One cache of `capacity_bytes` per site when `caches_enabled`, none otherwise.
    pub fn new(sites: &[String], caches_enabled: bool, capacity_bytes: u64, latency: LatencyModel) -> Self {
        Self {
            latency,
            caches: sites
                .iter()
                .map(|s| caches_enabled.then(|| CacheNode::new(s.clone(), capacity_bytes)))
                .collect(),
            site_names: sites.to_vec(),
            uncached_origin_bytes: vec![0; sites.len()],
        }
    }

    pub fn site_count(&self) -> usize {
        self.site_names.len()
    }

    pub fn site_name(&self, site: usize) -> &str {
        &self.site_names[site]
    }

    pub fn cache(&self, site: usize) -> Option<&CacheNode> {
        self.caches[site].as_ref()
    }

    pub fn fetch(&mut self, object: &DataObject, site: usize) -> (f64, Source) {
        match self.caches[site].as_mut() {
            Some(cache) => cache.fetch(object, &self.latency),
            None => {
                self.uncached_origin_bytes[site] += object.size;
                (self.latency.origin_latency(object.size), Source::Origin)
            }
        }
    }

    /// Seconds a job with `profile` spends waiting on data at `site`.
    pub fn job_stall_time(&mut self, profile: &IoProfile, profile_key: u32, site: usize) -> f64 {
        let mut small = 0.0;
        for object in profile.objects(profile_key) {
            small += self.fetch(&object, site).0;
        }
        let bulk = (profile.bulk_bytes_in + profile.bulk_bytes_out) as f64 / self.latency.bulk_bandwidth;
        small / self.latency.concurrency + bulk
    }

    pub fn cache_stats(&self, site: usize) -> CacheStats {
        match &self.caches[site] {
            Some(c) => c.stats(),
            None => CacheStats {
                hit_rate: None,
                bytes_from_origin: self.uncached_origin_bytes[site],
                evictions: 0,
            },
        }
    }

    pub fn total_origin_bytes(&self) -> u64 {
        (0..self.site_count()).map(|s| self.cache_stats(s).bytes_from_origin).sum()
    }
}

/// CPU time over CPU plus stall; in (0, 1].
pub fn job_efficiency(cpu_seconds: f64, stall_seconds: f64) -> f64 {
    debug_assert!(cpu_seconds > 0.0 && stall_seconds >= 0.0);
    cpu_seconds / (cpu_seconds + stall_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn obj(id: u64, size: u64) -> DataObject {
        DataObject {
            id: ObjectId(id),
            class: ObjectClass::Calibration,
            size,
            mutability: Mutability::SlowChanging,
        }
    }

    #[test]
    fn miss_then_hit() {
        let lat = LatencyModel::default();
        let mut c = CacheNode::new("r", 1 << 30);
        let (first, s1) = c.fetch(&obj(1, 10_000), &lat);
        let (second, s2) = c.fetch(&obj(1, 10_000), &lat);
        assert!(second < first);
        assert_eq!((s1, s2), (Source::Origin, Source::Cache));
        assert_eq!((c.hits, c.misses), (1, 1));
    }

    #[test]
    fn first_inserted_is_evicted() {
        let lat = LatencyModel::default();
        let mb = 1_000_000;
        let mut c = CacheNode::new("r", 10 * mb);
        for id in 0..3 {
            c.fetch(&obj(id, 5 * mb), &lat);
        }
        assert!(!c.contains(ObjectId(0)));
        assert!(c.contains(ObjectId(1)) && c.contains(ObjectId(2)));
        assert_eq!(c.evictions, 1);
        assert!(c.used_bytes() <= c.capacity_bytes);
    }

    #[test]
    fn origin_only_rtt_floor() {
        let lat = LatencyModel::default();
        let mut d = DataLayer::new(&["r".into()], false, 0, lat);
        let profile = IoProfile {
            calibration_requests: 100,
            calibration_bytes: 1,
            ..IoProfile::none()
        };
        let stall = d.job_stall_time(&profile, 0, 0);
        assert!(stall >= 100.0 * 0.12, "{stall}");
    }

    #[test]
    fn empty_profile_no_stall() {
        let mut d = DataLayer::new(&["r".into()], true, 1 << 30, LatencyModel::default());
        assert_eq!(d.job_stall_time(&IoProfile::none(), 0, 0), 0.0);
    }

    #[test]
    fn warm_versus_origin_stall() {
        let lat = LatencyModel::default();
        let profile = IoProfile {
            calibration_requests: 1000,
            calibration_bytes: 10_000,
            ..IoProfile::none()
        };
        let mut warm = DataLayer::new(&["r".into()], true, 1 << 30, lat);
        warm.job_stall_time(&profile, 0, 0);
        let warm_stall = warm.job_stall_time(&profile, 0, 0);
        // 1000 x (2 ms + 10 kB at cache bandwidth)
        let expect_warm = 1000.0 * (0.002 + 10_000.0 / lat.cache_bandwidth);
        assert!((warm_stall - expect_warm).abs() < 1e-9);
        let mut origin = DataLayer::new(&["r".into()], false, 0, lat);
        let origin_stall = origin.job_stall_time(&profile, 0, 0);
        let expect_origin = 1000.0 * (0.120 + 10_000.0 / lat.wan_bandwidth);
        assert!((origin_stall - expect_origin).abs() < 1e-9);
        // RTT components alone keep the 60x ratio
        assert!(((1000.0_f64 * 0.120) / (1000.0 * 0.002) - 60.0).abs() < 1e-12);
    }

    #[test]
    fn efficiency_definition() {
        assert_eq!(job_efficiency(3600.0, 400.0), 0.9);
        assert_eq!(job_efficiency(3600.0, 0.0), 1.0);
        assert_eq!(job_efficiency(3600.0, 3600.0), 0.5);
    }

    #[test]
    fn stats_hit_rate() {
        let mut c = CacheNode::new("r", 1 << 30);
        assert_eq!(c.stats().hit_rate, None);
        c.hits = 95;
        c.misses = 5;
        assert_eq!(c.stats().hit_rate, Some(0.95));
    }

    #[test]
    fn shared_objects_hit_rate_bound() {
        let profile = IoProfile::cms_default();
        let mut d = DataLayer::new(&["r".into()], true, 100_000_000_000, LatencyModel::default());
        let jobs = 20;
        for _ in 0..jobs {
            d.job_stall_time(&profile, 3, 0);
        }
        let unique = profile.cacheable_requests() as f64;
        let total = unique * jobs as f64;
        assert!(d.cache_stats(0).hit_rate.unwrap() >= 1.0 - unique / total);
    }

    #[test]
    fn later_jobs_never_touch_origin() {
        let profile = IoProfile::cms_default();
        let mut d = DataLayer::new(&["r".into()], true, 100_000_000_000, LatencyModel::default());
        d.job_stall_time(&profile, 0, 0);
        let after_first = d.cache_stats(0).bytes_from_origin;
        for _ in 0..3 {
            d.job_stall_time(&profile, 0, 0);
        }
        assert_eq!(d.cache_stats(0).bytes_from_origin, after_first);
    }

    /// Reference LRU: a deque ordered oldest to newest.
    fn reference_lru(requests: &[(u64, u64)], capacity: u64) -> (Vec<u64>, u64) {
        let mut q: VecDeque<(u64, u64)> = VecDeque::new();
        let mut origin = 0;
        for &(id, size) in requests {
            if let Some(pos) = q.iter().position(|e| e.0 == id) {
                let e = q.remove(pos).unwrap();
                q.push_back(e);
                continue;
            }
            origin += size;
            if size > capacity {
                continue;
            }
            while q.iter().map(|e| e.1).sum::<u64>() + size > capacity {
                q.pop_front();
            }
            q.push_back((id, size));
        }
        (q.into_iter().map(|e| e.0).collect(), origin)
    }

    proptest! {
        #[test]
        fn matches_reference_lru(reqs in proptest::collection::vec((0u64..12, 1u64..6), 0..100), cap in 1u64..20) {
            // object sizes are a function of id
            let reqs: Vec<(u64, u64)> = reqs.into_iter().map(|(id, _)| (id, 1 + id % 5)).collect();
            let lat = LatencyModel::default();
            let mut c = CacheNode::new("r", cap);
            for &(id, size) in &reqs {
                c.fetch(&obj(id, size), &lat);
            }
            let (order, origin) = reference_lru(&reqs, cap);
            prop_assert_eq!(c.lru_order(), order.into_iter().map(ObjectId).collect::<Vec<_>>());
            prop_assert_eq!(c.bytes_from_origin, origin);
            prop_assert_eq!(c.hits + c.misses, reqs.len() as u64);
        }

        #[test]
        fn caching_never_costs_bandwidth(reqs in proptest::collection::vec(0u64..30, 0..100), cap in 0u64..200) {
            let lat = LatencyModel::default();
            let mut cached = DataLayer::new(&["r".into()], true, cap, lat);
            let mut bare = DataLayer::new(&["r".into()], false, cap, lat);
            let mut cached_stall = 0.0;
            let mut bare_stall = 0.0;
            for id in reqs {
                let o = obj(id, 1 + id % 7);
                cached_stall += cached.fetch(&o, 0).0;
                bare_stall += bare.fetch(&o, 0).0;
            }
            prop_assert!(cached.total_origin_bytes() <= bare.total_origin_bytes());
            prop_assert!(cached_stall <= bare_stall + 1e-9);
        }
    }
}
