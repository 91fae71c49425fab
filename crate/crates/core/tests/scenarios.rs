use glidesim::config::{load_config_str, parse_tree, preset_config};
use glidesim::scenario::{run_scenario, sweep};
use toml::Value;

fn contested(ce_priority: &str) -> String {
    format!(
        r#"
master_seed = 5
horizon_seconds = 172800
[cloud]
image_replication_delay = 0
[[regions]]
name = "a"
capacity = 30
hazard_base = 2.0
[[vos]]
name = "UCSD"
priority_rank = 0
[[vos]]
name = "Fermilab"
priority_rank = 1
[[ces]]
name = "ce"
regions = ["a"]
vo_allowlist = ["UCSD", "Fermilab"]
local_priority = {ce_priority}
[policy]
period = 3600
schedule = [{{ day = 0, cores = 480 }}]
[output]
decision_trace = true
[[campaigns]]
name = "ana"
vo = "UCSD"
job_count = 4000
cores_per_job = 4
cpu_seconds = {{ family = "exponential", mean = 20000 }}
[[campaigns]]
preset = "backfill-generic"
vo = "Fermilab"
job_count = 20000
"#
    )
}

/// (winner, queued VOs) for every CE bind in the trace.
fn binds(text: &str) -> Vec<(String, Vec<String>)> {
    let run = run_scenario(&load_config_str(text).unwrap(), None).unwrap();
    run.trace
        .rows
        .iter()
        .filter(|(_, actor, d)| actor == "ce" && d.starts_with("bind "))
        .map(|(_, _, d)| {
            let field = |k: &str| {
                d.split(' ')
                    .find_map(|w| w.strip_prefix(k))
                    .unwrap_or_default()
                    .to_string()
            };
            let queued = field("queued=")
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.split(':').next().unwrap().to_string())
                .collect();
            (field("vo="), queued)
        })
        .collect()
}

fn assert_winner(text: &str, winner: &str) {
    let rows = binds(text);
    let both: Vec<_> = rows.iter().filter(|(_, q)| q.len() == 2).collect();
    assert!(both.len() >= 10, "only {} contested binds", both.len());
    for (vo, queued) in both {
        assert_eq!(vo, winner, "queued {queued:?}");
    }
}

#[test]
fn contested_instance_goes_to_higher_ce_priority() {
    assert_winner(&contested("{ UCSD = 0, Fermilab = 1 }"), "UCSD");
}

#[test]
fn ce_local_priority_overrides_vo_order() {
    assert_winner(&contested("{ UCSD = 1, Fermilab = 0 }"), "Fermilab");
}

#[test]
fn hazard_sweep_delivers_no_more_with_more_preemption() {
    let tree = parse_tree(
        r#"
horizon_seconds = 345600
[cloud]
image_replication_delay = 0
[[regions]]
name = "a"
capacity = 300
hazard_load_coeff = 0.0
[[regions]]
name = "b"
capacity = 300
hazard_load_coeff = 0.0
[[vos]]
name = "Fermilab"
priority_rank = 0
[[ces]]
name = "ce"
regions = ["a", "b"]
vo_allowlist = ["Fermilab"]
[pilots]
max_lifetime = 0
idle_retire = 0
[policy]
schedule = [{ day = 0, cores = 6400 }]
[[campaigns]]
preset = "backfill-generic"
vo = "Fermilab"
job_count = 400000
"#,
    )
    .unwrap();
    let values: Vec<Value> = [0.0, 0.05, 0.1].into_iter().map(Value::Float).collect();
    let rows = sweep(&tree, "regions.*.hazard_base", &values).unwrap();
    let hours: Vec<f64> = rows.iter().map(|(_, s)| s.delivered_core_hours()).collect();
    assert_eq!(rows[0].1.preemptions, 0);
    assert!(rows[2].1.preemptions > rows[1].1.preemptions);
    // queue never drains, so busy time tracks provisioned capacity
    assert!(hours.windows(2).all(|w| w[1] <= w[0]), "{hours:?}");
}

#[test]
fn sweep_rejects_bad_path() {
    let tree = parse_tree("preset = \"onprem-fairshare\"").unwrap();
    let tree = glidesim::config::expand_presets(tree).unwrap();
    assert!(sweep(&tree, "regions.*.no_such_field", &[Value::Float(0.1)]).is_err());
    assert!(sweep(&tree, "pilots..max_lifetime", &[Value::Integer(1)]).is_err());
}

#[test]
fn pool_jobs_stay_inside_pilot_cores() {
    let mut cfg = preset_config("may2021").unwrap();
    cfg.horizon_seconds = 3.0 * 86_400.0;
    let run = run_scenario(&cfg, Some(3)).unwrap();
    for r in &run.series {
        assert!(r.busy_cores[0] <= 20_000 + 16);
        assert_eq!(r.provisioned_cores, r.total_busy() + r.idle_cores);
    }
    assert!(run.max_pilot_commitment[0] <= 20_000 + 16);
}
