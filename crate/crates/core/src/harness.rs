//! Experiment harness: scheme-by-seed matrices, parameter sweeps, summary
//! tables, CDF plot data and the coordinate convergence contrast.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::adversary::{AdversaryConfig, AttackMode};
use crate::baselines::mercury::Mercury;
use crate::config::ScenarioConfig;
use crate::controller::Controller;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::overlay::{LatencyField, Overlay};
use crate::rng;
use crate::sim::{bandwidth_factor, build_topology, ms_to_us, run_single, sample_telemetry, RunMetrics, RunOptions, SchemeId};
use crate::stats;

/// Bumped whenever a CSV layout changes.
pub const CSV_VERSION: u32 = 1;

/// Runs every configured scheme on every seed. Results are ordered by
/// scheme (in config order), then seed (in config order), whatever the
/// completion order.
pub fn run_matrix(cfg: &ScenarioConfig) -> Result<Vec<RunMetrics>> {
    cfg.validate()?;
    let seeds = cfg.seeds.to_vec();
    let jobs: Vec<(SchemeId, u64)> = cfg
        .scheme
        .ids
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    crate::par::map(&jobs, |&(s, seed)| run_single(cfg, s, seed, RunOptions::default()))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scheme: SchemeId,
    pub runs: usize,
    pub partial_runs: usize,
    /// Pooled over every delivered transaction of every run.
    pub median_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub bytes_per_tx: f64,
    /// Bytes per transaction relative to `random8` on the same seeds, when
    /// `random8` is part of the matrix.
    pub bytes_norm: Option<f64>,
    pub control_frac: f64,
}

fn pooled(runs: &[&RunMetrics]) -> Vec<f64> {
    let mut all: Vec<f64> = runs.iter().flat_map(|m| m.coverage_times()).collect();
    all.sort_by(f64::total_cmp);
    all
}

/// Bytes sent per byte needed, `1 + beta`, pooled over runs.
fn pooled_bytes_factor(runs: &[&RunMetrics]) -> f64 {
    let need: f64 = runs.iter().map(|m| m.honest_deliveries as f64 * m.tx_bytes as f64).sum();
    let sent: f64 = runs.iter().map(|m| m.bytes.total() as f64).sum();
    if need == 0.0 {
        f64::INFINITY
    } else {
        sent / need
    }
}

fn by_scheme(runs: &[RunMetrics]) -> BTreeMap<SchemeId, Vec<&RunMetrics>> {
    let mut out: BTreeMap<SchemeId, Vec<&RunMetrics>> = BTreeMap::new();
    for m in runs {
        out.entry(m.scheme).or_default().push(m);
    }
    out
}

/// One row per scheme, in first-appearance order.
pub fn summarize(runs: &[RunMetrics]) -> Vec<SummaryRow> {
    let groups = by_scheme(runs);
    let random = groups.get(&SchemeId::Random8);
    let mut order: Vec<SchemeId> = Vec::new();
    for m in runs {
        if !order.contains(&m.scheme) {
            order.push(m.scheme);
        }
    }
    order
        .into_iter()
        .map(|s| {
            let g = &groups[&s];
            let cov = pooled(g);
            let txs: usize = g.iter().map(|m| m.txs.len()).sum();
            let bytes: u64 = g.iter().map(|m| m.bytes.total()).sum();
            let dp: u64 = g.iter().map(|m| m.bytes.data + m.bytes.duplicate).sum();
            let control: u64 = g.iter().map(|m| m.bytes.control).sum();
            let bytes_norm = random.and_then(|r| {
                let seeds: Vec<u64> = g.iter().map(|m| m.seed).collect();
                let base: Vec<&RunMetrics> = r.iter().copied().filter(|m| seeds.contains(&m.seed)).collect();
                (base.len() == g.len()).then(|| pooled_bytes_factor(g) / pooled_bytes_factor(&base))
            });
            SummaryRow {
                scheme: s,
                runs: g.len(),
                partial_runs: g.iter().filter(|m| m.partial).count(),
                median_ms: (!cov.is_empty()).then(|| stats::percentile_sorted(&cov, 50.0)),
                p99_ms: (!cov.is_empty()).then(|| stats::percentile_sorted(&cov, 99.0)),
                bytes_per_tx: if txs == 0 { 0.0 } else { bytes as f64 / txs as f64 },
                bytes_norm,
                control_frac: if dp == 0 { 0.0 } else { control as f64 / dp as f64 },
            }
        })
        .collect()
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_default()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("# blocksdn summary v{CSV_VERSION}\n");
    s.push_str("scheme,runs,partial_runs,median_ms,p99_ms,bytes_per_tx,bytes_norm,control_frac\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.1},{},{:.6}",
            r.scheme,
            r.runs,
            r.partial_runs,
            opt(r.median_ms, 1),
            opt(r.p99_ms, 1),
            r.bytes_per_tx,
            opt(r.bytes_norm, 4),
            r.control_frac
        );
    }
    s
}

/// Human-readable table with the comparison columns. Schemes with partial
/// runs are marked.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!("{:<22} {:>10} {:>10} {:>10}  {}\n", "Scheme", "Median", "99th", "Bytes/tx", "Notes");
    for r in rows {
        let bytes = match r.bytes_norm {
            Some(b) => format!("{b:.2}x"),
            None => format!("{:.0} B", r.bytes_per_tx),
        };
        let note = if r.partial_runs > 0 {
            format!("PARTIAL: {} of {} runs left honest nodes uncovered", r.partial_runs, r.runs)
        } else {
            String::new()
        };
        let _ = writeln!(
            s,
            "{:<22} {:>10} {:>10} {:>10}  {}",
            r.scheme.name(),
            r.median_ms.map(|m| format!("{m:.0} ms")).unwrap_or_else(|| "-".into()),
            r.p99_ms.map(|m| format!("{m:.0} ms")).unwrap_or_else(|| "-".into()),
            bytes,
            note
        );
    }
    s
}

/// One row per run.
pub fn runs_csv(runs: &[RunMetrics]) -> String {
    let mut s = format!("# blocksdn runs v{CSV_VERSION}\n");
    s.push_str("scheme,seed,txs,median_ms,p90_ms,p99_ms,bytes_factor,control_frac,partial,undelivered\n");
    for m in runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{:.6},{},{}",
            m.scheme,
            m.seed,
            m.txs.len(),
            opt(m.median_ms(), 1),
            opt(m.percentile_ms(90.0), 1),
            opt(m.percentile_ms(99.0), 1),
            1.0 + bandwidth_factor(m),
            m.control_frac(),
            m.partial,
            m.undelivered
        );
    }
    s
}

/// Sorted `(latency_ms, cumulative_fraction)` points of an empirical CDF.
pub fn cdf_points(samples: &[f64]) -> Vec<(f64, f64)> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect()
}

pub fn cdf_csv(scheme: SchemeId, points: &[(f64, f64)]) -> String {
    let mut s = format!("# blocksdn cdf v{CSV_VERSION} scheme={scheme}\nlatency_ms,cumulative_fraction\n");
    for (x, f) in points {
        let _ = writeln!(s, "{x:.3},{f:.6}");
    }
    s
}

/// Per seed, per scheme median coverage time, for matched-seed comparisons.
pub fn per_seed_medians(runs: &[RunMetrics]) -> BTreeMap<u64, BTreeMap<SchemeId, f64>> {
    let mut out: BTreeMap<u64, BTreeMap<SchemeId, f64>> = BTreeMap::new();
    for m in runs {
        if let Some(med) = m.median_ms() {
            out.entry(m.seed).or_default().insert(m.scheme, med);
        }
    }
    out
}

/// What a report wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    pub partial_runs: usize,
    pub files: Vec<String>,
}

fn write(dir: &Path, name: &str, text: &str, files: &mut Vec<String>) -> Result<()> {
    std::fs::write(dir.join(name), text)?;
    files.push(name.to_string());
    Ok(())
}

/// Writes the effective config, per-run rows, the summary and one CDF file
/// per scheme into `dir`.
pub fn write_report(dir: &Path, cfg: &ScenarioConfig, runs: &[RunMetrics]) -> Result<Report> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    write(dir, "effective_config.toml", &cfg.to_toml(), &mut files)?;
    write(dir, "runs.csv", &runs_csv(runs), &mut files)?;
    let rows = summarize(runs);
    write(dir, "summary.csv", &summary_csv(&rows), &mut files)?;
    write(dir, "summary.txt", &summary_table(&rows), &mut files)?;
    for (scheme, g) in by_scheme(runs) {
        let pts = cdf_points(&pooled(&g));
        write(dir, &format!("cdf_{scheme}.csv"), &cdf_csv(scheme, &pts), &mut files)?;
    }
    let partial_runs = runs.iter().filter(|m| m.partial).count();
    Ok(Report { rows, partial_runs, files })
}

/// The same scenario with the adversary switched off.
pub fn attack_free(cfg: &ScenarioConfig) -> ScenarioConfig {
    let mut base = cfg.clone();
    base.adversary = AdversaryConfig {
        mode: AttackMode::None,
        tau: 0.0,
        ..cfg.adversary.clone()
    };
    base
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Slowdown {
    pub scheme: SchemeId,
    pub baseline_median_ms: Option<f64>,
    pub attacked_median_ms: Option<f64>,
    /// `attacked / baseline - 1` on pooled medians.
    pub slowdown: Option<f64>,
}

/// Pooled-median slowdown of every scheme under attack relative to the
/// attack-free runs on the same seeds.
pub fn slowdowns(baseline: &[RunMetrics], attacked: &[RunMetrics]) -> Vec<Slowdown> {
    let b = summarize(baseline);
    summarize(attacked)
        .into_iter()
        .map(|a| {
            let base = b.iter().find(|r| r.scheme == a.scheme).and_then(|r| r.median_ms);
            Slowdown {
                scheme: a.scheme,
                baseline_median_ms: base,
                attacked_median_ms: a.median_ms,
                slowdown: base.zip(a.median_ms).map(|(b, a)| a / b - 1.0),
            }
        })
        .collect()
}

pub fn slowdown_csv(rows: &[Slowdown]) -> String {
    let mut s = format!("# blocksdn slowdown v{CSV_VERSION}\n");
    s.push_str("scheme,baseline_median_ms,attacked_median_ms,slowdown\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.scheme,
            opt(r.baseline_median_ms, 1),
            opt(r.attacked_median_ms, 1),
            opt(r.slowdown, 4)
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub scheme: SchemeId,
    pub seed: u64,
    pub median_ms: Option<f64>,
    pub p90_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub bytes_factor: f64,
    pub control_frac: f64,
    pub partial: bool,
}

/// Runs the full matrix once per axis value. Seeds do not depend on the
/// value, so each point of the sweep is reproducible on its own.
pub fn run_sweep(base: &ScenarioConfig, axis: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config(axis, "no sweep values given"));
    }
    let cfgs: Vec<ScenarioConfig> = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set_path(axis, v)?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(&cfgs) {
        for m in run_matrix(cfg)? {
            rows.push(SweepRow {
                axis: axis.to_string(),
                value: value.clone(),
                scheme: m.scheme,
                seed: m.seed,
                median_ms: m.median_ms(),
                p90_ms: m.percentile_ms(90.0),
                p99_ms: m.percentile_ms(99.0),
                bytes_factor: 1.0 + bandwidth_factor(&m),
                control_frac: m.control_frac(),
                partial: m.partial,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("# blocksdn sweep v{CSV_VERSION}\n");
    s.push_str("axis,value,scheme,seed,median_ms,p90_ms,p99_ms,bytes_factor,control_frac,partial\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.6},{:.6},{}",
            r.axis,
            r.value,
            r.scheme,
            r.seed,
            opt(r.median_ms, 1),
            opt(r.p90_ms, 1),
            opt(r.p99_ms, 1),
            r.bytes_factor,
            r.control_frac,
            r.partial
        );
    }
    s
}

/// Per value, the pooled statistic over all seeds of the sweep.
pub fn sweep_curve(rows: &[SweepRow], stat: impl Fn(&SweepRow) -> Option<f64>) -> Vec<(String, f64)> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for r in rows {
        let Some(x) = stat(r) else { continue };
        match out.iter_mut().find(|(v, _)| *v == r.value) {
            Some((_, xs)) => xs.push(x),
            None => out.push((r.value.clone(), vec![x])),
        }
    }
    out.into_iter()
        .filter_map(|(v, xs)| stats::median(&xs).map(|m| (v, m)))
        .collect()
}

/// Median over links of `| |x_u - x_v| - prop(u, v) | / prop(u, v)`.
pub fn median_link_error(overlay: &Overlay, field: &LatencyField, x: &[Vec3]) -> f64 {
    let errs: Vec<f64> = overlay
        .edges()
        .iter()
        .map(|&(u, v)| {
            let p = field.prop(u, v).expect("edge");
            ((x[u.idx()] - x[v.idx()]).norm() - p).abs() / p
        })
        .collect();
    stats::median(&errs).unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Convergence {
    pub target: f64,
    /// Decentralized probe rounds until the median link error first drops
    /// below the target; `None` if it never did within the budget.
    pub vivaldi_rounds: Option<usize>,
    pub vivaldi_error: Vec<f64>,
    /// Controller windows until the same holds for the controller's
    /// coordinates.
    pub controller_windows: Option<usize>,
    pub controller_error: Vec<f64>,
}

/// Embeds the scenario's topology for `seed` both ways and records the
/// median link error after every probe round and every controller window.
pub fn convergence_contrast(cfg: &ScenarioConfig, seed: u64, max_rounds: usize, max_windows: usize, target: f64) -> Result<Convergence> {
    let (overlay, field) = build_topology(cfg, seed)?;
    let n = overlay.n();

    let mut m = Mercury::new(&overlay, cfg.scheme.mercury, seed);
    let mut r = rng::stream(seed, "mercury.probe", 0);
    let interval = ms_to_us(cfg.scheme.mercury.probe_interval_ms);
    let mut vivaldi_error = Vec::with_capacity(max_rounds);
    for round in 1..=max_rounds as u64 {
        let t = round * interval;
        m.probe_round(
            &overlay,
            &mut r,
            |u, p, r| {
                let e = overlay.edge_id(u, p).expect("peer");
                (field.sample_edge(e, t, r) + field.sample_edge(e, t, r)) / 2.0
            },
            |_, c| c,
        );
        let x: Vec<Vec3> = m.coords.iter().map(|c| c.x).collect();
        vivaldi_error.push(median_link_error(&overlay, &field, &x));
    }

    let c = &cfg.controller;
    let mut ctrl = Controller::new(n, c.params(n), seed);
    let theta = ms_to_us(c.theta_ms);
    let mut controller_error = Vec::with_capacity(max_windows);
    for w in 1..=max_windows as u64 {
        let t = w * theta;
        let samples = sample_telemetry(&overlay, &field, c.telemetry_links, seed, w, t);
        ctrl.tick(t, &samples, &overlay)?;
        controller_error.push(median_link_error(&overlay, &field, ctrl.coords()));
    }

    let first = |e: &[f64]| e.iter().position(|&x| x < target).map(|i| i + 1);
    Ok(Convergence {
        target,
        vivaldi_rounds: first(&vivaldi_error),
        vivaldi_error,
        controller_windows: first(&controller_error),
        controller_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::sim::TxMetrics;

    fn metrics(scheme: SchemeId, seed: u64, cov: &[f64], bytes: u64) -> RunMetrics {
        RunMetrics {
            version: 1,
            scheme,
            seed,
            n: 4,
            honest: 4,
            tx_bytes: 100,
            txs: cov
                .iter()
                .enumerate()
                .map(|(i, &c)| TxMetrics {
                    id: i as u32,
                    origin: 0,
                    t0_ms: 0.0,
                    coverage_ms: Some(c),
                    missing_honest: 0,
                    max_depth: 1,
                })
                .collect(),
            bytes: crate::sim::metrics::ByteCounters {
                data: bytes,
                control: 0,
                duplicate: 0,
            },
            data_plane_sent: bytes,
            honest_deliveries: 3 * cov.len() as u64,
            windows: 0,
            discarded_windows: 0,
            blacklisted: Vec::new(),
            fanout_hist: Vec::new(),
            depth_hist: Vec::new(),
            partial: false,
            undelivered: 0,
            end_ms: 0.0,
            first_receipt_ms: None,
        }
    }

    #[test]
    fn cdf_single_point_and_monotone() {
        assert_eq!(cdf_points(&[5.0]), vec![(5.0, 1.0)]);
        let pts = cdf_points(&[3.0, 1.0, 2.0, 2.0]);
        assert_eq!(pts.last().unwrap().1, 1.0);
        assert!(pts.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        let csv = cdf_csv(SchemeId::Random8, &pts);
        assert!(csv.starts_with("# blocksdn cdf v1"));
        assert_eq!(csv, cdf_csv(SchemeId::Random8, &cdf_points(&[3.0, 1.0, 2.0, 2.0])));
    }

    #[test]
    fn summary_pools_and_normalizes() {
        let runs = vec![
            metrics(SchemeId::BlockSdnFull, 1, &[100.0, 200.0], 600),
            metrics(SchemeId::BlockSdnFull, 2, &[300.0], 300),
            metrics(SchemeId::Random8, 1, &[400.0, 500.0], 600),
            metrics(SchemeId::Random8, 2, &[600.0], 300),
        ];
        let rows = summarize(&runs);
        assert_eq!(rows[0].scheme, SchemeId::BlockSdnFull);
        assert_eq!(rows[0].median_ms, Some(200.0));
        assert_eq!(rows[0].bytes_norm, Some(1.0));
        assert_eq!(rows[1].median_ms, Some(500.0));
        let mut partial = runs.clone();
        partial[1].partial = true;
        let table = summary_table(&summarize(&partial));
        assert!(table.contains("PARTIAL: 1 of 2"), "{table}");
    }

    #[test]
    fn sweep_rejects_non_numeric_value() {
        let cfg = preset("smoke").unwrap();
        let err = run_sweep(&cfg, "controller.d_near", &["six".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn sweep_curve_takes_median_per_value() {
        let row = |v: &str, m: f64| SweepRow {
            axis: "a".into(),
            value: v.into(),
            scheme: SchemeId::Random8,
            seed: 0,
            median_ms: Some(m),
            p90_ms: None,
            p99_ms: None,
            bytes_factor: 1.0,
            control_frac: 0.0,
            partial: false,
        };
        let rows = vec![row("1", 10.0), row("2", 5.0), row("1", 30.0), row("1", 20.0)];
        assert_eq!(sweep_curve(&rows, |r| r.median_ms), vec![("1".to_string(), 20.0), ("2".to_string(), 5.0)]);
    }
}
