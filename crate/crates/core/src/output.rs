//! Byte-stable text outputs: the time-series CSV and the `key: value` summary.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::scenario::{SeriesLayout, SummaryReport, TimeSeriesRecord};

pub fn timeseries_header(layout: &SeriesLayout) -> String {
    let mut cols = vec!["time_s".to_string()];
    for r in &layout.regions {
        cols.push(format!("instances_live_{r}"));
        cols.push(format!("instances_pending_{r}"));
    }
    cols.push("provisioned_cores".into());
    cols.extend(layout.vos.iter().map(|v| format!("busy_cores_{v}")));
    cols.push("idle_cores".into());
    cols.extend(layout.vos.iter().map(|v| format!("queue_depth_{v}")));
    cols.push("cum_preemptions".into());
    cols.push("cum_cost".into());
    cols.extend(layout.sites.iter().map(|s| format!("cache_hit_rate_{s}")));
    cols.push("mean_efficiency".into());
    cols.join(",")
}

fn opt6(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn timeseries_row(r: &TimeSeriesRecord) -> String {
    let mut cols = vec![format!("{:.3}", r.time_s)];
    for (live, pending) in r.instances_live.iter().zip(&r.instances_pending) {
        cols.push(live.to_string());
        cols.push(pending.to_string());
    }
    cols.push(r.provisioned_cores.to_string());
    cols.extend(r.busy_cores.iter().map(u64::to_string));
    cols.push(r.idle_cores.to_string());
    cols.extend(r.queue_depth.iter().map(u64::to_string));
    cols.push(r.cum_preemptions.to_string());
    cols.push(r.cum_cost.to_string());
    cols.extend(r.cache_hit_rate.iter().map(|h| opt6(*h)));
    cols.push(opt6(r.mean_efficiency));
    cols.join(",")
}

pub fn write_timeseries<W: Write>(layout: &SeriesLayout, series: &[TimeSeriesRecord], mut w: W) -> io::Result<()> {
    writeln!(w, "{}", timeseries_header(layout))?;
    for r in series {
        writeln!(w, "{}", timeseries_row(r))?;
    }
    w.flush()
}

pub fn emit_timeseries(layout: &SeriesLayout, series: &[TimeSeriesRecord], path: &Path) -> io::Result<()> {
    write_timeseries(layout, series, BufWriter::new(File::create(path)?))
}

pub fn write_summary<W: Write>(s: &SummaryReport, mut w: W) -> io::Result<()> {
    writeln!(w, "seed: {}", s.master_seed)?;
    writeln!(w, "config_digest: {:016x}", s.config_digest)?;
    writeln!(w, "horizon_seconds: {:.3}", s.horizon_seconds)?;
    for (vo, (jobs, pilots)) in s.vos.iter().zip(s.vo_core_hours.iter().zip(&s.vo_pilot_core_hours)) {
        writeln!(w, "core_hours.{vo}: {jobs:.3}")?;
        writeln!(w, "pilot_core_hours.{vo}: {pilots:.3}")?;
    }
    writeln!(w, "core_hours.total: {:.3}", s.delivered_core_hours())?;
    writeln!(w, "total_cost: {}", s.total_cost)?;
    match s.cost_per_core_hour() {
        Some(c) => writeln!(w, "cost_per_core_hour: {c:.6}")?,
        None => writeln!(w, "cost_per_core_hour: n/a")?,
    }
    writeln!(w, "preemptions: {}", s.preemptions)?;
    writeln!(w, "job_preemptions: {}", s.job_preemptions)?;
    writeln!(w, "jobs_started: {}", s.jobs_started)?;
    writeln!(w, "jobs_completed: {}", s.jobs_completed)?;
    for (key, v) in [
        ("efficiency_mean", s.efficiency_mean),
        ("efficiency_p10", s.efficiency_p10),
        ("efficiency_p50", s.efficiency_p50),
    ] {
        match v {
            Some(x) => writeln!(w, "{key}: {x:.6}")?,
            None => writeln!(w, "{key}: n/a")?,
        }
    }
    writeln!(w, "origin_bytes: {}", s.origin_bytes)?;
    writeln!(w, "events_processed: {}", s.events_processed)?;
    for c in &s.campaigns {
        writeln!(w, "campaign.{}.vo: {}", c.name, c.vo)?;
        writeln!(w, "campaign.{}.user: {}", c.name, c.user)?;
        writeln!(w, "campaign.{}.jobs: {}", c.name, c.jobs)?;
        writeln!(w, "campaign.{}.completed: {}", c.name, c.completed)?;
        match c.makespan() {
            Some(m) => writeln!(w, "campaign.{}.makespan_days: {:.4}", c.name, m / 86_400.0)?,
            None => writeln!(w, "campaign.{}.makespan_days: incomplete", c.name)?,
        }
    }
    if let Some((baseline, cmp)) = &s.speedup {
        writeln!(w, "speedup.baseline: {baseline}")?;
        writeln!(w, "speedup.campaign: {}", cmp.campaign)?;
        writeln!(w, "speedup.makespan_days: {:.4}", cmp.makespan_a / 86_400.0)?;
        writeln!(w, "speedup.baseline_makespan_days: {:.4}", cmp.makespan_b / 86_400.0)?;
        writeln!(w, "speedup.value: {:.4}", cmp.speedup)?;
        writeln!(w, "speedup.baseline_cost: {}", cmp.cost_b)?;
    }
    w.flush()
}

pub fn emit_summary(s: &SummaryReport, path: &Path) -> io::Result<()> {
    write_summary(s, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Money;

    fn layout() -> SeriesLayout {
        SeriesLayout {
            regions: vec!["east".into()],
            vos: vec!["UCSD".into(), "Fermilab".into()],
            sites: vec!["east".into()],
        }
    }

    fn record(t: f64) -> TimeSeriesRecord {
        TimeSeriesRecord {
            time_s: t,
            instances_live: vec![2],
            instances_pending: vec![1],
            provisioned_cores: 32,
            busy_cores: vec![20, 10],
            idle_cores: 2,
            queue_depth: vec![5, 0],
            cum_preemptions: 1,
            cum_cost: Money::from_f64(12.345),
            cache_hit_rate: vec![None],
            mean_efficiency: Some(0.975),
        }
    }

    #[test]
    fn header_order() {
        assert_eq!(
            timeseries_header(&layout()),
            "time_s,instances_live_east,instances_pending_east,provisioned_cores,busy_cores_UCSD,busy_cores_Fermilab,\
             idle_cores,queue_depth_UCSD,queue_depth_Fermilab,cum_preemptions,cum_cost,cache_hit_rate_east,mean_efficiency"
        );
    }

    #[test]
    fn row_format() {
        assert_eq!(timeseries_row(&record(300.0)), "300.000,2,1,32,20,10,2,5,0,1,12.35,,0.975000");
    }

    #[test]
    fn ten_samples_eleven_lines() {
        let series: Vec<_> = (0..10).map(|i| record(f64::from(i) * 300.0)).collect();
        let mut out = Vec::new();
        write_timeseries(&layout(), &series, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 11);
    }

    #[test]
    fn empty_series_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ts.csv");
        emit_timeseries(&layout(), &[], &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, format!("{}\n", timeseries_header(&layout())));
    }
}
