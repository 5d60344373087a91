//! Scenario configuration (TOML) with strict parsing and validation.

use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryConfig, AttackMode};
use crate::baselines::mercury::MercuryParams;
use crate::baselines::perigee::PerigeeParams;
use crate::baselines::SchemeId;
use crate::cluster::D_MAX;
use crate::controller::{CongestionRule, ControllerParams, SafeguardParams};
use crate::error::{Error, Result};
use crate::overlay::{CongestionEpisode, GeoParams, Jitter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    List(Vec<u64>),
    Range { start: u64, count: u64 },
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::Range { start: 0, count: 1 }
    }
}

impl Seeds {
    pub fn to_vec(&self) -> Vec<u64> {
        match self {
            Seeds::List(v) => v.clone(),
            Seeds::Range { start, count } => (*start..start + count).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub n: usize,
    pub degree_cap: usize,
    pub k_continents: usize,
    pub intra_range_ms: [f64; 2],
    pub inter_multiplier: [f64; 2],
    pub jitter_mu_ms: f64,
    pub jitter_sigma_ms: f64,
    pub floor_ms: f64,
    pub congestion_episodes: Vec<CongestionEpisode>,
    /// Fixes the topology across run seeds when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            n: 1000,
            degree_cap: 64,
            k_continents: 3,
            intra_range_ms: [10.0, 60.0],
            inter_multiplier: [2.0, 5.0],
            jitter_mu_ms: 0.0,
            jitter_sigma_ms: 5.0,
            floor_ms: 1.0,
            congestion_episodes: Vec::new(),
            seed: None,
        }
    }
}

impl TopologyConfig {
    pub fn geo_params(&self) -> GeoParams {
        GeoParams {
            k_continents: self.k_continents,
            intra_range_ms: (self.intra_range_ms[0], self.intra_range_ms[1]),
            inter_multiplier: (self.inter_multiplier[0], self.inter_multiplier[1]),
            jitter: Jitter {
                mu_ms: self.jitter_mu_ms,
                sigma_ms: self.jitter_sigma_ms,
            },
            floor_ms: self.floor_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeConfig {
    pub ids: Vec<SchemeId>,
    pub random_fanout: usize,
    pub blockp2p_fanout: usize,
    pub perigee: PerigeeParams,
    pub mercury: MercuryParams,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            ids: vec![SchemeId::BlockSdnFull],
            random_fanout: 8,
            blockp2p_fanout: 8,
            perigee: PerigeeParams::default(),
            mercury: MercuryParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub theta_ms: f64,
    pub epsilon_ms: f64,
    pub k_observations: usize,
    pub e_stable: f64,
    pub f_c_ms: f64,
    pub f_max_ms: f64,
    pub mad_k: f64,
    pub force_window: usize,
    pub min_force_history: usize,
    pub t_drift_ms: f64,
    pub rho: f64,
    pub window_reject_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_override: Option<usize>,
    pub d_near: usize,
    /// Defaults to `d_max - d_near`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_far: Option<usize>,
    pub d_max: usize,
    pub cg_iterations: usize,
    pub bootstrap: bool,
    pub landmarks: usize,
    pub bootstrap_refine: usize,
    pub centroid_sample: usize,
    pub control_latency_ms: f64,
    /// Links per node whose one-way delay is exported each window.
    pub telemetry_links: usize,
    /// The controller stops ticking at this time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub halt_at_ms: Option<f64>,
    pub congestion_rule: CongestionRule,
    pub congestion_percentile: f64,
    pub utilization_threshold: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            theta_ms: 2000.0,
            epsilon_ms: 5.0,
            k_observations: 8,
            e_stable: 0.30,
            f_c_ms: 75.0,
            f_max_ms: 100.0,
            mad_k: 8.0,
            force_window: 32,
            min_force_history: 4,
            t_drift_ms: 50.0,
            rho: 500.0,
            window_reject_fraction: 0.30,
            k_override: None,
            d_near: 6,
            d_far: None,
            d_max: D_MAX,
            cg_iterations: 2,
            bootstrap: true,
            landmarks: 24,
            bootstrap_refine: 50,
            centroid_sample: 128,
            control_latency_ms: 5.0,
            telemetry_links: 32,
            halt_at_ms: None,
            congestion_rule: CongestionRule::Percentile,
            congestion_percentile: 70.0,
            utilization_threshold: 0.70,
        }
    }
}

impl ControllerConfig {
    pub fn d_far(&self) -> usize {
        self.d_far.unwrap_or(self.d_max.saturating_sub(self.d_near))
    }

    pub fn params(&self, n: usize) -> ControllerParams {
        ControllerParams {
            theta_ms: self.theta_ms,
            epsilon_ms: self.epsilon_ms,
            k_observations: self.k_observations,
            safeguards: SafeguardParams {
                f_max_ms: self.f_max_ms,
                mad_k: self.mad_k,
                window: self.force_window,
                min_history: self.min_force_history,
                e_stable: self.e_stable,
                f_c_ms: self.f_c_ms,
                t_drift_ms: self.t_drift_ms,
                rho: self.rho,
            },
            window_reject_fraction: self.window_reject_fraction,
            k_clusters: self.k_override.unwrap_or_else(|| crate::cluster::default_k(n)),
            d_near: self.d_near,
            d_far: self.d_far(),
            cg_iterations: self.cg_iterations,
            bootstrap: self.bootstrap,
            landmarks: self.landmarks,
            bootstrap_refine: self.bootstrap_refine,
            centroid_sample: self.centroid_sample,
            congestion_rule: self.congestion_rule,
            congestion_percentile: self.congestion_percentile,
            utilization_threshold: self.utilization_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisseminationConfig {
    pub delta_ms: f64,
    pub b_max: usize,
    pub t_timeout_s: f64,
    pub body_direct: bool,
    pub digest_bytes: u64,
    pub body_bytes: u64,
    pub bitmap_bytes: u64,
    pub outburst_cap: usize,
    /// How long a node keeps announcing a transaction it has relayed to
    /// peers that newly enter its relay list.
    pub relay_memory_ms: f64,
}

impl Default for DisseminationConfig {
    fn default() -> Self {
        DisseminationConfig {
            delta_ms: 400.0,
            b_max: 8000,
            t_timeout_s: 30.0,
            body_direct: false,
            digest_bytes: 36,
            body_bytes: 300,
            bitmap_bytes: 8,
            outburst_cap: 128,
            relay_memory_ms: 5000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// Measured transactions per run.
    pub txs: usize,
    pub rate_per_s: f64,
    /// First measured injection; the time before it lets coordinates settle.
    pub start_ms: f64,
    /// Unmeasured transactions injected before `start_ms` for schemes that
    /// learn from traffic.
    pub warmup_txs: usize,
    /// Horizon after the last injection.
    pub drain_ms: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            txs: 500,
            rate_per_s: 4.0,
            start_ms: 0.0,
            warmup_txs: 0,
            drain_ms: 120_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seeds: Seeds,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub topology: TopologyConfig,
    pub scheme: SchemeConfig,
    pub controller: ControllerConfig,
    pub dissemination: DisseminationConfig,
    pub adversary: AdversaryConfig,
    pub workload: WorkloadConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "scenario".into(),
            seeds: Seeds::default(),
            output_dir: None,
            topology: TopologyConfig::default(),
            scheme: SchemeConfig::default(),
            controller: ControllerConfig::default(),
            dissemination: DisseminationConfig::default(),
            adversary: AdversaryConfig::default(),
            workload: WorkloadConfig::default(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Best-effort line of a dotted config path such as `controller.d_near`.
fn locate(text: &str, path: &str) -> Option<usize> {
    let (section, key) = match path.rsplit_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, path),
    };
    let mut in_section = section.is_none();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            let name = t.trim_matches(|c| c == '[' || c == ']').trim();
            in_section = Some(name) == section;
            continue;
        }
        if in_section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

/// Parses and validates a scenario. Unknown keys are rejected; errors carry
/// the offending path and, where known, the line.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
        path: String::new(),
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Config {
            line: inner.span().map(|s| line_of(text, s.start)).or_else(|| locate(text, &path)),
            path,
            message: inner.message().to_string(),
        }
    })?;
    cfg.validate().map_err(|e| match e {
        Error::Config { path, message, line: None } => Error::Config {
            line: locate(text, &path),
            path,
            message,
        },
        other => other,
    })?;
    Ok(cfg)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.topology;
        if t.n < 2 {
            return Err(Error::config("topology.n", "need at least 2 nodes"));
        }
        if t.degree_cap < 2 {
            return Err(Error::config("topology.degree_cap", "must be at least 2"));
        }
        if t.k_continents == 0 {
            return Err(Error::config("topology.k_continents", "must be at least 1"));
        }
        if !(t.intra_range_ms[0] > 0.0 && t.intra_range_ms[1] >= t.intra_range_ms[0]) {
            return Err(Error::config("topology.intra_range_ms", "need 0 < lo <= hi"));
        }
        if !(t.inter_multiplier[0] >= 1.0 && t.inter_multiplier[1] >= t.inter_multiplier[0]) {
            return Err(Error::config("topology.inter_multiplier", "need 1 <= lo <= hi"));
        }
        if !(t.jitter_sigma_ms >= 0.0) {
            return Err(Error::config("topology.jitter_sigma_ms", "must be non-negative"));
        }
        if !(t.floor_ms > 0.0) {
            return Err(Error::config("topology.floor_ms", "must be positive"));
        }
        if self.scheme.ids.is_empty() {
            return Err(Error::config("scheme.ids", "at least one scheme is required"));
        }
        if self.seeds.to_vec().is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let c = &self.controller;
        if c.d_max > D_MAX {
            return Err(Error::config("controller.d_max", format!("at most {D_MAX}")));
        }
        if c.d_near + c.d_far() > c.d_max {
            return Err(Error::config(
                "controller.d_near",
                format!("d_near + d_far = {} exceeds d_max = {}", c.d_near + c.d_far(), c.d_max),
            ));
        }
        if !(c.theta_ms > 0.0) {
            return Err(Error::config("controller.theta_ms", "must be positive"));
        }
        if c.k_observations == 0 {
            return Err(Error::config("controller.k_observations", "must be at least 1"));
        }
        if let Some(k) = c.k_override {
            if k == 0 || k > t.n {
                return Err(Error::config("controller.k_override", format!("must be in [1, {}]", t.n)));
            }
        }
        if !(0.0..=1.0).contains(&c.window_reject_fraction) {
            return Err(Error::config("controller.window_reject_fraction", "must be in [0, 1]"));
        }
        let d = &self.dissemination;
        if !(d.delta_ms >= 0.0) {
            return Err(Error::config("dissemination.delta_ms", "must be non-negative"));
        }
        if d.b_max == 0 {
            return Err(Error::config("dissemination.b_max", "must be at least 1"));
        }
        if !(d.relay_memory_ms >= 0.0) {
            return Err(Error::config("dissemination.relay_memory_ms", "must be non-negative"));
        }
        if d.outburst_cap == 0 {
            return Err(Error::config("dissemination.outburst_cap", "must be at least 1"));
        }
        let w = &self.workload;
        if !(w.rate_per_s > 0.0) {
            return Err(Error::config("workload.rate_per_s", "must be positive"));
        }
        if !(w.start_ms >= 0.0 && w.drain_ms > 0.0) {
            return Err(Error::config("workload.start_ms", "times must be non-negative"));
        }
        self.adversary.validate()?;
        if self.adversary.mode != AttackMode::None && self.adversary.coordinate_forgery_requested() {
            if let Some(id) = self.scheme.ids.iter().find(|id| !id.is_decentralized_vcs()) {
                return Err(Error::config(
                    "adversary.forge_coordinates",
                    format!("scheme {id} has no self-reported coordinates to forge"),
                ));
            }
        }
        Ok(())
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets a numeric or boolean field addressed by a dotted path.
    pub fn set_path(&mut self, path: &str, value: &str) -> Result<()> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        let parts: Vec<&str> = path.split('.').collect();
        let (last, parents) = parts.split_last().expect("non-empty path");
        let mut node = &mut doc;
        for p in parents {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::config(path, format!("`{p}` is not a section")))?;
        }
        let parsed: toml::Value = if let Ok(i) = value.parse::<i64>() {
            toml::Value::Integer(i)
        } else if let Ok(f) = value.parse::<f64>() {
            toml::Value::Float(f)
        } else if let Ok(b) = value.parse::<bool>() {
            toml::Value::Boolean(b)
        } else {
            toml::Value::String(value.to_string())
        };
        let parsed = match (node.get(*last), parsed) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (Some(toml::Value::Integer(_)) | Some(toml::Value::Float(_)), toml::Value::String(s)) => {
                return Err(Error::config(path, format!("`{s}` is not a number")));
            }
            (_, v) => v,
        };
        node.insert(last.to_string(), parsed);
        *self = parse_config(&toml::to_string(&doc).expect("table serializes"))?;
        Ok(())
    }
}

impl AdversaryConfig {
    fn coordinate_forgery_requested(&self) -> bool {
        self.forge_coordinates == Some(true)
    }
}

pub const PRESET_NAMES: [&str; 7] = ["table1", "attacks", "fallback", "sweep_k", "sweep_dnear", "sweep_theta", "smoke"];

pub fn preset_text(name: &str) -> Result<&'static str> {
    Ok(match name {
        "table1" => include_str!("../presets/table1.toml"),
        "attacks" => include_str!("../presets/attacks.toml"),
        "fallback" => include_str!("../presets/fallback.toml"),
        "sweep_k" => include_str!("../presets/sweep_k.toml"),
        "sweep_dnear" => include_str!("../presets/sweep_dnear.toml"),
        "sweep_theta" => include_str!("../presets/sweep_theta.toml"),
        "smoke" => include_str!("../presets/smoke.toml"),
        other => return Err(Error::UnknownPreset(other.to_string())),
    })
}

pub fn preset(name: &str) -> Result<ScenarioConfig> {
    parse_config(preset_text(name)?)
}
