//! Scenario configuration: a TOML tree, optionally layered over a built-in
//! preset, deserialized and then cross-checked into a ready-to-run config.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;
use toml::{Table, Value};

use crate::cdn::{builtin_io_profiles, IoProfile, LatencyModel};
use crate::cloud::{BootDelay, InstanceType, Region};
use crate::kernel::SECONDS_PER_DAY;
use crate::pool::UserDiscipline;
use crate::workload::{
    campaign_preset, validate_vos, Arrival, Campaign, CpuDistribution, Retention, VirtualOrganization, VoId, WorkloadError, GIB,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config at `{path}`: {reason}")]
    Validation { path: String, reason: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    /// Field path for validation errors.
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Validation { path, .. } => Some(path),
            _ => None,
        }
    }
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        path: path.into(),
        reason: reason.into(),
    }
}

impl From<WorkloadError> for ConfigError {
    fn from(e: WorkloadError) -> Self {
        match e {
            WorkloadError::ConfigInvalid { path, reason } => ConfigError::Validation { path, reason },
        }
    }
}

pub const SCENARIO_PRESETS: [(&str, &str); 2] = [
    ("may2021", include_str!("../presets/may2021.toml")),
    ("onprem-fairshare", include_str!("../presets/onprem-fairshare.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    SCENARIO_PRESETS.iter().map(|(n, _)| *n)
}

fn default_seed() -> u64 {
    1
}
fn default_sample_period() -> f64 {
    300.0
}
fn default_negotiation_period() -> f64 {
    60.0
}
fn default_frontend_period() -> f64 {
    300.0
}
fn default_preemption_period() -> f64 {
    300.0
}
fn default_instance_type() -> String {
    "F16s_v2".into()
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_seed")]
    master_seed: u64,
    horizon_seconds: f64,
    #[serde(default = "default_sample_period")]
    sample_period: f64,
    #[serde(default = "default_negotiation_period")]
    negotiation_period: f64,
    #[serde(default = "default_frontend_period")]
    frontend_period: f64,
    #[serde(default = "default_preemption_period")]
    preemption_period: f64,
    #[serde(default)]
    retention: Retention,
    #[serde(default)]
    user_discipline: UserDiscipline,
    #[serde(default)]
    user_core_cap: Option<u64>,
    #[serde(default)]
    instance_types: Vec<InstanceType>,
    #[serde(default = "default_instance_type")]
    instance_type: String,
    #[serde(default)]
    cloud: CloudSettings,
    #[serde(default)]
    regions: Vec<RawRegion>,
    #[serde(default)]
    vos: Vec<RawVo>,
    #[serde(default)]
    campaigns: Vec<RawCampaign>,
    #[serde(default)]
    ces: Vec<RawCe>,
    #[serde(default)]
    onprem: Option<RawOnprem>,
    #[serde(default)]
    pilots: PilotSettings,
    #[serde(default)]
    caches: RawCaches,
    #[serde(default)]
    latency_model: LatencyModel,
    #[serde(default)]
    io_profiles: BTreeMap<String, IoProfile>,
    #[serde(default)]
    policy: RawPolicy,
    #[serde(default)]
    output: OutputSettings,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloudSettings {
    /// Scale sets refill to target after every preemption tick.
    pub reconcile: bool,
    pub image_replication_delay: f64,
}

impl Default for CloudSettings {
    fn default() -> Self {
        Self {
            reconcile: false,
            image_replication_delay: 3600.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegion {
    name: String,
    capacity: u32,
    #[serde(default = "RawRegion::default_hazard")]
    hazard_base: f64,
    #[serde(default = "RawRegion::default_coeff")]
    hazard_load_coeff: f64,
    #[serde(default)]
    boot_delay: BootDelay,
    #[serde(default = "RawRegion::default_price")]
    price_per_instance_day: f64,
    /// Whether pilots booted from this region's image pass pool authentication.
    #[serde(default = "default_true")]
    image_secret_valid: bool,
}

impl RawRegion {
    fn default_hazard() -> f64 {
        0.05
    }
    fn default_coeff() -> f64 {
        2.0
    }
    fn default_price() -> f64 {
        3.3
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVo {
    name: String,
    priority_rank: u32,
    #[serde(default)]
    core_cap: Option<u32>,
    #[serde(default)]
    cores_per_pilot: Option<u32>,
    /// VOs whose jobs may run on this VO's pilots; defaults to the VO itself.
    #[serde(default)]
    pilot_accepts: Option<Vec<String>>,
    #[serde(default)]
    credential: Option<String>,
    #[serde(default)]
    ce: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCampaign {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    vo: Option<String>,
    #[serde(default)]
    user: Option<String>,
    #[serde(default)]
    job_count: Option<usize>,
    #[serde(default)]
    cores_per_job: Option<u32>,
    #[serde(default)]
    mem_per_core_gib: Option<f64>,
    #[serde(default)]
    cpu_seconds: Option<CpuDistribution>,
    #[serde(default)]
    io_profile: Option<String>,
    #[serde(default)]
    arrival: Option<Arrival>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCe {
    name: String,
    regions: Vec<String>,
    vo_allowlist: Vec<String>,
    #[serde(default)]
    local_priority: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOnprem {
    cores: u64,
    #[serde(default = "RawOnprem::default_slot_cores")]
    slot_cores: u32,
    #[serde(default = "RawOnprem::default_mem")]
    memory_per_core_gib: u64,
    #[serde(default = "RawOnprem::default_site")]
    site: String,
    #[serde(default)]
    accepts: Vec<String>,
}

impl RawOnprem {
    fn default_slot_cores() -> u32 {
        8
    }
    fn default_mem() -> u64 {
        2
    }
    fn default_site() -> String {
        "onprem".into()
    }
}

/// Pilot lifetime limits in seconds; 0 disables a limit.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PilotSettings {
    pub max_lifetime: f64,
    pub idle_retire: f64,
}

impl Default for PilotSettings {
    fn default() -> Self {
        Self {
            max_lifetime: 48.0 * 3600.0,
            idle_retire: 600.0,
        }
    }
}

impl PilotSettings {
    pub fn max_lifetime(&self) -> Option<f64> {
        (self.max_lifetime > 0.0).then_some(self.max_lifetime)
    }

    pub fn idle_retire(&self) -> Option<f64> {
        (self.idle_retire > 0.0).then_some(self.idle_retire)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawCaches {
    enabled: bool,
    capacity_gib: f64,
}

impl Default for RawCaches {
    fn default() -> Self {
        Self {
            enabled: true,
            capacity_gib: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    #[default]
    Schedule,
    Adaptive,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub day: f64,
    pub cores: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawPolicy {
    kind: PolicyKind,
    period: f64,
    schedule: Vec<ScheduleEntry>,
    spend_cap_per_day: Option<f64>,
    max_cores: Option<u64>,
}

impl Default for RawPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Schedule,
            period: 43_200.0,
            schedule: Vec::new(),
            spend_cap_per_day: None,
            max_cores: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSettings {
    pub decision_trace: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoPilotSpec {
    pub cores_per_pilot: u32,
    pub accepts: Vec<VoId>,
    pub credential: String,
    pub ce: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeSpec {
    pub name: String,
    pub regions: Vec<usize>,
    pub vo_allowlist: Vec<VoId>,
    pub local_priority: Vec<(VoId, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnpremSpec {
    pub cores: u64,
    pub slot_cores: u32,
    pub memory_per_core: u64,
    pub site: String,
    pub accepts: Vec<VoId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Schedule(Vec<(f64, u64)>),
    Adaptive { spend_cap_per_day: f64, max_cores: Option<u64> },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheSettings {
    pub enabled: bool,
    pub capacity_bytes: u64,
}

/// Validated scenario with every cross-reference resolved to an index.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub master_seed: u64,
    pub horizon_seconds: f64,
    pub sample_period: f64,
    pub negotiation_period: f64,
    pub frontend_period: f64,
    pub preemption_period: f64,
    pub retention: Retention,
    pub user_discipline: UserDiscipline,
    pub user_core_cap: Option<u64>,
    pub instance_type: InstanceType,
    pub cloud: CloudSettings,
    pub regions: Vec<Region>,
    pub region_secret_valid: Vec<bool>,
    pub vos: Vec<VirtualOrganization>,
    pub vo_pilots: Vec<VoPilotSpec>,
    pub campaigns: Vec<Campaign>,
    pub ces: Vec<CeSpec>,
    pub onprem: Option<OnpremSpec>,
    pub pilots: PilotSettings,
    pub caches: CacheSettings,
    pub latency_model: LatencyModel,
    pub io_profiles: BTreeMap<String, IoProfile>,
    pub policy: PolicySpec,
    pub policy_period: f64,
    pub output: OutputSettings,
    /// Resolved tree, presets expanded.
    pub tree: Table,
}

impl ScenarioConfig {
    /// Data-layer sites: every region, then the on-prem site if any.
    pub fn site_names(&self) -> Vec<String> {
        let mut sites: Vec<String> = self.regions.iter().map(|r| r.name.clone()).collect();
        if let Some(o) = &self.onprem {
            sites.push(o.site.clone());
        }
        sites
    }

    /// FNV-1a of the resolved tree without the seed; equal for runs that
    /// differ only in seed.
    pub fn digest(&self) -> u64 {
        let mut tree = self.tree.clone();
        tree.remove("master_seed");
        let text = toml::to_string(&tree).unwrap_or_default();
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

fn parse_error(text: &str, err: &toml::de::Error) -> ConfigError {
    let line = err
        .span()
        .map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    ConfigError::Parse {
        line,
        message: err.message().to_string(),
    }
}

pub fn parse_tree(text: &str) -> Result<Table, ConfigError> {
    text.parse::<Table>().map_err(|e| parse_error(text, &e))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Expands a top-level `preset = "<name>"` by layering the tree over it.
pub fn expand_presets(mut tree: Table) -> Result<Table, ConfigError> {
    let mut depth = 0;
    while let Some(preset) = tree.remove("preset") {
        let name = preset
            .as_str()
            .ok_or_else(|| invalid("preset", "must be a string"))?
            .to_string();
        let text = SCENARIO_PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| ConfigError::UnknownPreset(name.clone()))?;
        let mut base = parse_tree(text)?;
        merge(&mut base, tree);
        tree = base;
        depth += 1;
        if depth > 8 {
            return Err(invalid("preset", "preset chain too deep"));
        }
    }
    Ok(tree)
}

pub fn load_tree(path: &Path) -> Result<Table, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    expand_presets(parse_tree(&text)?)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    from_tree(load_tree(path)?)
}

pub fn load_config_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    from_tree(expand_presets(parse_tree(text)?)?)
}

pub fn preset_config(name: &str) -> Result<ScenarioConfig, ConfigError> {
    load_config_str(&format!("preset = \"{name}\""))
}

/// Replaces (or adds) the scalar at a dotted path. Numeric segments index
/// arrays and `*` matches every element or key.
pub fn set_path(tree: &mut Table, path: &str, value: &Value) -> Result<(), ConfigError> {
    let segs: Vec<&str> = path.split('.').collect();
    if path.is_empty() || segs.iter().any(|s| s.is_empty()) {
        return Err(invalid(path, "empty path segment"));
    }
    let mut hits = 0;
    set_in_table(tree, &segs, value, path, &mut hits)?;
    if hits == 0 {
        return Err(invalid(path, "path matches nothing"));
    }
    Ok(())
}

fn set_in_value(node: &mut Value, segs: &[&str], value: &Value, path: &str, hits: &mut usize) -> Result<(), ConfigError> {
    if segs.is_empty() {
        if matches!(node, Value::Table(_) | Value::Array(_)) {
            return Err(invalid(path, "does not name a scalar"));
        }
        *node = value.clone();
        *hits += 1;
        return Ok(());
    }
    match node {
        Value::Table(t) => set_in_table(t, segs, value, path, hits),
        Value::Array(items) => {
            if segs[0] == "*" {
                for item in items.iter_mut() {
                    set_in_value(item, &segs[1..], value, path, hits)?;
                }
                Ok(())
            } else {
                let idx: usize = segs[0]
                    .parse()
                    .map_err(|_| invalid(path, format!("`{}` is not an array index", segs[0])))?;
                let item = items
                    .get_mut(idx)
                    .ok_or_else(|| invalid(path, format!("index {idx} out of range")))?;
                set_in_value(item, &segs[1..], value, path, hits)
            }
        }
        _ => Err(invalid(path, "descends into a scalar")),
    }
}

fn set_in_table(t: &mut Table, segs: &[&str], value: &Value, path: &str, hits: &mut usize) -> Result<(), ConfigError> {
    if segs[0] == "*" {
        for (_, v) in t.iter_mut() {
            set_in_value(v, &segs[1..], value, path, hits)?;
        }
        return Ok(());
    }
    if segs.len() == 1 && !t.contains_key(segs[0]) {
        // a defaulted key; unknown names fail validation afterwards
        t.insert(segs[0].to_string(), value.clone());
        *hits += 1;
        return Ok(());
    }
    let node = t
        .get_mut(segs[0])
        .ok_or_else(|| invalid(path, format!("no key `{}`", segs[0])))?;
    set_in_value(node, &segs[1..], value, path, hits)
}

/// Parses a bare TOML value such as `0.05`, `true` or `"x"`.
pub fn parse_scalar(text: &str) -> Result<Value, ConfigError> {
    let wrapped = format!("v = {text}");
    match wrapped.parse::<Table>() {
        Ok(mut t) => Ok(t.remove("v").expect("key present")),
        // bare words are taken as strings
        Err(_) => Ok(Value::String(text.to_string())),
    }
}

fn positive(path: &str, x: f64) -> Result<(), ConfigError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(invalid(path, "must be > 0"))
    }
}

pub fn from_tree(tree: Table) -> Result<ScenarioConfig, ConfigError> {
    let raw: RawConfig = serde_path_to_error::deserialize(Value::Table(tree.clone())).map_err(|e| {
        let path = e.path().to_string();
        invalid(if path == "." { String::new() } else { path }, e.inner().to_string())
    })?;
    resolve(raw, tree)
}

fn resolve(raw: RawConfig, tree: Table) -> Result<ScenarioConfig, ConfigError> {
    positive("horizon_seconds", raw.horizon_seconds)?;
    positive("sample_period", raw.sample_period)?;
    positive("negotiation_period", raw.negotiation_period)?;
    positive("frontend_period", raw.frontend_period)?;
    positive("preemption_period", raw.preemption_period)?;
    if raw.cloud.image_replication_delay < 0.0 {
        return Err(invalid("cloud.image_replication_delay", "must be >= 0"));
    }
    if raw.user_core_cap == Some(0) {
        return Err(invalid("user_core_cap", "must be > 0"));
    }

    let mut types = vec![InstanceType::f16s_v2()];
    for (i, t) in raw.instance_types.iter().enumerate() {
        if t.cores == 0 || t.memory_gib == 0 {
            return Err(invalid(format!("instance_types.{i}"), "cores and memory must be > 0"));
        }
        types.retain(|o| o.name != t.name);
        types.push(t.clone());
    }
    let instance_type = types
        .into_iter()
        .find(|t| t.name == raw.instance_type)
        .ok_or_else(|| invalid("instance_type", format!("unknown instance type `{}`", raw.instance_type)))?;

    let mut regions = Vec::new();
    let mut region_secret_valid = Vec::new();
    for (i, r) in raw.regions.iter().enumerate() {
        let region = Region {
            name: r.name.clone(),
            capacity: r.capacity,
            hazard_base: r.hazard_base,
            hazard_load_coeff: r.hazard_load_coeff,
            boot_delay: r.boot_delay,
            price_per_instance_day: r.price_per_instance_day,
            image_ready_at: None,
        };
        region
            .validate()
            .map_err(|reason| invalid(format!("regions.{i}"), reason))?;
        if regions.iter().any(|o: &Region| o.name == r.name) {
            return Err(invalid(format!("regions.{i}.name"), "duplicate region"));
        }
        regions.push(region);
        region_secret_valid.push(r.image_secret_valid);
    }
    let region_index = |name: &str| regions.iter().position(|r| r.name == name);

    if raw.vos.is_empty() {
        return Err(invalid("vos", "at least one VO is required"));
    }
    let vos: Vec<VirtualOrganization> = raw
        .vos
        .iter()
        .map(|v| VirtualOrganization {
            name: v.name.clone(),
            priority_rank: v.priority_rank,
            core_cap: v.core_cap,
        })
        .collect();
    validate_vos(&vos)?;
    let vo_index = |name: &str| vos.iter().position(|v| v.name == name).map(VoId);

    let mut ces = Vec::new();
    for (i, c) in raw.ces.iter().enumerate() {
        let path = format!("ces.{i}");
        if ces.iter().any(|o: &CeSpec| o.name == c.name) {
            return Err(invalid(format!("{path}.name"), "duplicate CE"));
        }
        let mut ce_regions = Vec::new();
        for (j, r) in c.regions.iter().enumerate() {
            ce_regions.push(region_index(r).ok_or_else(|| invalid(format!("{path}.regions.{j}"), format!("unknown region `{r}`")))?);
        }
        let mut allow = Vec::new();
        for (j, v) in c.vo_allowlist.iter().enumerate() {
            allow.push(vo_index(v).ok_or_else(|| invalid(format!("{path}.vo_allowlist.{j}"), format!("unknown VO `{v}`")))?);
        }
        let mut local = Vec::new();
        for (v, rank) in &c.local_priority {
            let vo = vo_index(v).ok_or_else(|| invalid(format!("{path}.local_priority.{v}"), format!("unknown VO `{v}`")))?;
            local.push((vo, *rank));
        }
        // VOs without a local rank fall back to their global one, after the ranked ones
        for &vo in &allow {
            if !local.iter().any(|(v, _)| *v == vo) {
                local.push((vo, 1_000_000 + vos[vo.0].priority_rank));
            }
        }
        ces.push(CeSpec {
            name: c.name.clone(),
            regions: ce_regions,
            vo_allowlist: allow,
            local_priority: local,
        });
    }

    let mut vo_pilots = Vec::new();
    for (i, v) in raw.vos.iter().enumerate() {
        let path = format!("vos.{i}");
        let cores_per_pilot = v.cores_per_pilot.unwrap_or(instance_type.cores);
        if cores_per_pilot == 0 || cores_per_pilot > instance_type.cores {
            return Err(invalid(
                format!("{path}.cores_per_pilot"),
                format!("must be in 1..={}", instance_type.cores),
            ));
        }
        let accepts = match &v.pilot_accepts {
            None => vec![VoId(i)],
            Some(names) => {
                let mut out = Vec::new();
                for (j, n) in names.iter().enumerate() {
                    out.push(vo_index(n).ok_or_else(|| invalid(format!("{path}.pilot_accepts.{j}"), format!("unknown VO `{n}`")))?);
                }
                out
            }
        };
        let ce = match &v.ce {
            Some(name) => {
                let idx = ces
                    .iter()
                    .position(|c| &c.name == name)
                    .ok_or_else(|| invalid(format!("{path}.ce"), format!("unknown CE `{name}`")))?;
                if !ces[idx].vo_allowlist.contains(&VoId(i)) {
                    return Err(invalid(format!("{path}.ce"), format!("CE `{name}` does not allow `{}`", v.name)));
                }
                Some(idx)
            }
            None => ces.iter().position(|c| c.vo_allowlist.contains(&VoId(i))),
        };
        vo_pilots.push(VoPilotSpec {
            cores_per_pilot,
            accepts,
            credential: v.credential.clone().unwrap_or_else(|| format!("{}-token", v.name)),
            ce,
        });
    }

    let mut io_profiles = builtin_io_profiles();
    for (name, p) in &raw.io_profiles {
        io_profiles.insert(name.clone(), p.clone());
    }

    let mut campaigns = Vec::new();
    for (i, c) in raw.campaigns.iter().enumerate() {
        let campaign = resolve_campaign(c, &format!("campaigns.{i}"))?;
        if vo_index(&campaign.vo).is_none() {
            return Err(invalid(format!("campaigns.{i}.vo"), format!("unknown VO `{}`", campaign.vo)));
        }
        if !io_profiles.contains_key(&campaign.io_profile) {
            return Err(invalid(
                format!("campaigns.{i}.io_profile"),
                format!("unknown IO profile `{}`", campaign.io_profile),
            ));
        }
        campaign.validate(&format!("campaigns.{i}"))?;
        if campaigns.iter().any(|o: &Campaign| o.name == campaign.name) {
            return Err(invalid(format!("campaigns.{i}.name"), "duplicate campaign name"));
        }
        campaigns.push(campaign);
    }

    let onprem = match &raw.onprem {
        None => None,
        Some(o) => {
            if o.cores == 0 {
                return Err(invalid("onprem.cores", "must be > 0"));
            }
            if o.slot_cores == 0 {
                return Err(invalid("onprem.slot_cores", "must be > 0"));
            }
            if o.memory_per_core_gib == 0 {
                return Err(invalid("onprem.memory_per_core_gib", "must be > 0"));
            }
            if region_index(&o.site).is_some() {
                return Err(invalid("onprem.site", "clashes with a region name"));
            }
            let mut accepts = Vec::new();
            for (j, n) in o.accepts.iter().enumerate() {
                accepts.push(vo_index(n).ok_or_else(|| invalid(format!("onprem.accepts.{j}"), format!("unknown VO `{n}`")))?);
            }
            Some(OnpremSpec {
                cores: o.cores,
                slot_cores: o.slot_cores,
                memory_per_core: o.memory_per_core_gib * GIB,
                site: o.site.clone(),
                accepts,
            })
        }
    };

    if raw.caches.enabled {
        positive("caches.capacity_gib", raw.caches.capacity_gib)?;
    }
    let caches = CacheSettings {
        enabled: raw.caches.enabled,
        capacity_bytes: (raw.caches.capacity_gib.max(0.0) * GIB as f64) as u64,
    };
    raw.latency_model
        .validate()
        .map_err(|reason| invalid("latency_model", reason))?;

    if raw.pilots.max_lifetime < 0.0 || raw.pilots.idle_retire < 0.0 {
        return Err(invalid("pilots", "limits must be >= 0"));
    }

    positive("policy.period", raw.policy.period)?;
    let policy = match raw.policy.kind {
        PolicyKind::None => PolicySpec::None,
        PolicyKind::Schedule => {
            for (i, w) in raw.policy.schedule.windows(2).enumerate() {
                if w[1].day < w[0].day {
                    return Err(invalid(format!("policy.schedule.{}.day", i + 1), "schedule must be sorted by day"));
                }
            }
            if raw.policy.schedule.iter().any(|e| e.day.is_nan() || e.day < 0.0) {
                return Err(invalid("policy.schedule", "days must be >= 0"));
            }
            PolicySpec::Schedule(
                raw.policy
                    .schedule
                    .iter()
                    .map(|e| (e.day * SECONDS_PER_DAY, e.cores))
                    .collect(),
            )
        }
        PolicyKind::Adaptive => {
            let cap = raw
                .policy
                .spend_cap_per_day
                .ok_or_else(|| invalid("policy.spend_cap_per_day", "required for the adaptive policy"))?;
            positive("policy.spend_cap_per_day", cap)?;
            PolicySpec::Adaptive {
                spend_cap_per_day: cap,
                max_cores: raw.policy.max_cores,
            }
        }
    };

    Ok(ScenarioConfig {
        master_seed: raw.master_seed,
        horizon_seconds: raw.horizon_seconds,
        sample_period: raw.sample_period,
        negotiation_period: raw.negotiation_period,
        frontend_period: raw.frontend_period,
        preemption_period: raw.preemption_period,
        retention: raw.retention,
        user_discipline: raw.user_discipline,
        user_core_cap: raw.user_core_cap,
        instance_type,
        cloud: raw.cloud,
        regions,
        region_secret_valid,
        vos,
        vo_pilots,
        campaigns,
        ces,
        onprem,
        pilots: raw.pilots,
        caches,
        latency_model: raw.latency_model,
        io_profiles,
        policy,
        policy_period: raw.policy.period,
        output: raw.output,
        tree,
    })
}

fn resolve_campaign(c: &RawCampaign, path: &str) -> Result<Campaign, ConfigError> {
    let base = match &c.preset {
        Some(name) => Some(campaign_preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.clone()))?),
        None => None,
    };
    let required = |field: &str| invalid(format!("{path}.{field}"), "required without a campaign preset");
    let name = c
        .name
        .clone()
        .or_else(|| base.as_ref().map(|b| b.name.clone()))
        .ok_or_else(|| required("name"))?;
    let vo = c.vo.clone().ok_or_else(|| invalid(format!("{path}.vo"), "required"))?;
    let user = c.user.clone().unwrap_or_else(|| name.clone());
    let job_count = c
        .job_count
        .or(base.as_ref().map(|b| b.job_count))
        .ok_or_else(|| required("job_count"))?;
    let cores_per_job = c
        .cores_per_job
        .or(base.as_ref().map(|b| b.cores_per_job))
        .unwrap_or(1);
    let mem_per_core = match c.mem_per_core_gib {
        Some(g) if g.is_finite() && g > 0.0 => (g * GIB as f64) as u64,
        Some(_) => return Err(invalid(format!("{path}.mem_per_core_gib"), "must be > 0")),
        None => base.as_ref().map_or(2 * GIB, |b| b.mem_per_core),
    };
    let cpu_seconds = c
        .cpu_seconds
        .clone()
        .or(base.as_ref().map(|b| b.cpu_seconds.clone()))
        .ok_or_else(|| required("cpu_seconds"))?;
    let io_profile = c
        .io_profile
        .clone()
        .or(base.as_ref().map(|b| b.io_profile.clone()))
        .unwrap_or_else(|| "cms-default".into());
    let arrival = c
        .arrival
        .clone()
        .or(base.as_ref().map(|b| b.arrival.clone()))
        .unwrap_or_default();
    Ok(Campaign {
        name,
        vo,
        user,
        job_count,
        cores_per_job,
        mem_per_core,
        cpu_seconds,
        io_profile,
        arrival,
    })
}
