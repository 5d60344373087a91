//! Byzantine behaviors: delay-report forgery, coordinate forgery against
//! decentralized schemes, and black-hole dropping.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{random_unit, Vec3};
use crate::overlay::NodeId;
use crate::rng;

pub const MAX_TAU: f64 = 0.49;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    #[default]
    None,
    Inflate,
    Deflate,
    Oscillate,
    Blackhole,
    /// Oscillating delay forgery (plus coordinate forgery where peers report
    /// coordinates) together with black-hole dropping.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversaryConfig {
    pub tau: f64,
    pub mode: AttackMode,
    pub magnitude_ms: f64,
    pub period_windows: u64,
    /// Per-send drop probability; defaults to 0.5 in combined mode and 0
    /// otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// Whether compromised peers misreport their own coordinates. Defaults
    /// to on in combined mode; only meaningful for schemes whose peers
    /// report coordinates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forge_coordinates: Option<bool>,
    /// Coordinate displacement reported by forging peers; defaults to the
    /// delay magnitude.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coordinate_displacement_ms: Option<f64>,
    pub seed: u64,
    /// Simulation time at which compromised nodes start misbehaving.
    pub onset_ms: f64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            tau: 0.0,
            mode: AttackMode::None,
            magnitude_ms: 300.0,
            period_windows: 2,
            theta: None,
            forge_coordinates: None,
            coordinate_displacement_ms: None,
            seed: 0,
            onset_ms: 20_000.0,
        }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_TAU).contains(&self.tau) {
            return Err(Error::config("adversary.tau", format!("{} outside [0, {MAX_TAU}]", self.tau)));
        }
        if let Some(t) = self.theta {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("adversary.theta", format!("{t} outside [0, 1]")));
            }
        }
        if !(self.magnitude_ms >= 0.0) {
            return Err(Error::config("adversary.magnitude_ms", "must be non-negative"));
        }
        if self.period_windows == 0 {
            return Err(Error::config("adversary.period_windows", "must be at least 1"));
        }
        if !(self.onset_ms >= 0.0) {
            return Err(Error::config("adversary.onset_ms", "must be non-negative"));
        }
        Ok(())
    }

    pub fn theta(&self) -> f64 {
        self.theta.unwrap_or(match self.mode {
            AttackMode::Combined => 0.5,
            _ => 0.0,
        })
    }

    pub fn forges_delays(&self) -> bool {
        matches!(
            self.mode,
            AttackMode::Inflate | AttackMode::Deflate | AttackMode::Oscillate | AttackMode::Combined
        )
    }

    pub fn forges_coordinates(&self) -> bool {
        self.forge_coordinates.unwrap_or(self.mode == AttackMode::Combined)
    }

    pub fn drops(&self) -> bool {
        matches!(self.mode, AttackMode::Blackhole | AttackMode::Combined) && self.theta() > 0.0
    }

    pub fn is_active(&self) -> bool {
        self.tau > 0.0 && self.mode != AttackMode::None
    }
}

/// Compromised set: `round(tau * n)` nodes chosen uniformly with the
/// adversary seed.
pub fn compromised_set(cfg: &AdversaryConfig, n: usize) -> Vec<bool> {
    let mut out = vec![false; n];
    if !cfg.is_active() {
        return out;
    }
    let m = ((cfg.tau * n as f64).round() as usize).min(n);
    let mut r = rng::stream(cfg.seed, "adversary.compromised", 0);
    for i in sample(&mut r, n, m) {
        out[i] = true;
    }
    out
}

/// Delay a compromised node reports instead of `true_delay` in `window`.
pub fn forge_delay(cfg: &AdversaryConfig, true_delay: f64, window: u64, floor_ms: f64) -> f64 {
    let m = cfg.magnitude_ms;
    let mode = match cfg.mode {
        AttackMode::Combined => AttackMode::Oscillate,
        other => other,
    };
    match mode {
        AttackMode::Inflate => true_delay + m,
        AttackMode::Deflate => (true_delay - m).max(floor_ms),
        AttackMode::Oscillate => {
            let half = (cfg.period_windows / 2).max(1);
            if (window / half) % 2 == 0 {
                true_delay + m
            } else {
                (true_delay - m).max(floor_ms)
            }
        }
        _ => true_delay,
    }
}

/// Whether a compromised sender drops this relayed send. Own submissions
/// are never dropped.
pub fn blackhole_filter<R: Rng + ?Sized>(cfg: &AdversaryConfig, own_tx: bool, rng: &mut R) -> bool {
    if own_tx || !cfg.drops() {
        return false;
    }
    rng.random::<f64>() < cfg.theta()
}

/// Coordinate a forging peer claims: its true coordinate displaced by the
/// configured distance in a direction fixed per (node, window).
pub fn forge_coordinate(cfg: &AdversaryConfig, scheme_decentralized: bool, node: NodeId, window: u64, true_coord: Vec3) -> Result<Vec3> {
    if !scheme_decentralized {
        return Err(Error::Adversary(
            "coordinate forgery needs self-reported coordinates; controller-maintained coordinates have none".into(),
        ));
    }
    let disp = cfg.coordinate_displacement_ms.unwrap_or(cfg.magnitude_ms);
    if disp == 0.0 {
        return Ok(true_coord);
    }
    let mut r = rng::stream(cfg.seed, "adversary.coordinate", (node.0 as u64) << 32 | (window & 0xffff_ffff));
    Ok(true_coord + random_unit(&mut r) * disp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: AttackMode) -> AdversaryConfig {
        AdversaryConfig {
            tau: 0.25,
            mode,
            ..AdversaryConfig::default()
        }
    }

    #[test]
    fn none_is_identity() {
        assert_eq!(forge_delay(&cfg(AttackMode::None), 100.0, 3, 1.0), 100.0);
        assert!(compromised_set(&AdversaryConfig::default(), 100).iter().all(|c| !c));
    }

    #[test]
    fn inflate_and_deflate() {
        assert_eq!(forge_delay(&cfg(AttackMode::Inflate), 100.0, 0, 1.0), 400.0);
        assert_eq!(forge_delay(&cfg(AttackMode::Deflate), 100.0, 0, 1.0), 1.0);
        assert_eq!(forge_delay(&cfg(AttackMode::Deflate), 400.0, 0, 1.0), 100.0);
    }

    #[test]
    fn oscillation_alternates() {
        let c = AdversaryConfig {
            magnitude_ms: 50.0,
            ..cfg(AttackMode::Oscillate)
        };
        let v: Vec<f64> = (0..8).map(|w| forge_delay(&c, 100.0, w, 1.0)).collect();
        assert_eq!(v, vec![150.0, 50.0, 150.0, 50.0, 150.0, 50.0, 150.0, 50.0]);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert_eq!(mean, 100.0);
    }

    #[test]
    fn compromised_set_deterministic() {
        let c = cfg(AttackMode::Inflate);
        let a = compromised_set(&c, 1000);
        assert_eq!(a, compromised_set(&c, 1000));
        assert_eq!(a.iter().filter(|x| **x).count(), 250);
        let other = AdversaryConfig { seed: 1, ..c };
        assert_ne!(a, compromised_set(&other, 1000));
    }

    #[test]
    fn drop_rates() {
        let mut r = rng::stream(1, "t", 0);
        let none = AdversaryConfig {
            theta: Some(0.0),
            ..cfg(AttackMode::Blackhole)
        };
        assert!((0..1000).all(|_| !blackhole_filter(&none, false, &mut r)));
        let half = AdversaryConfig {
            theta: Some(0.5),
            ..cfg(AttackMode::Blackhole)
        };
        let drops = (0..10_000).filter(|_| blackhole_filter(&half, false, &mut r)).count();
        assert!((drops as f64 / 1e4 - 0.5).abs() <= 0.02);
        assert!((0..1000).all(|_| !blackhole_filter(&half, true, &mut r)));
        assert_eq!(cfg(AttackMode::Combined).theta(), 0.5);
        assert!(!cfg(AttackMode::Inflate).drops());
    }

    #[test]
    fn coordinate_forgery() {
        let c = AdversaryConfig {
            coordinate_displacement_ms: Some(0.0),
            ..cfg(AttackMode::Combined)
        };
        let x = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(forge_coordinate(&c, true, NodeId(3), 1, x).unwrap(), x);
        let c = cfg(AttackMode::Combined);
        let f = forge_coordinate(&c, true, NodeId(3), 1, x).unwrap();
        assert!(((f - x).norm() - 300.0).abs() < 1e-9);
        assert!(matches!(forge_coordinate(&c, false, NodeId(3), 1, x), Err(Error::Adversary(_))));
    }

    #[test]
    fn validation() {
        assert!(AdversaryConfig { tau: 0.5, ..cfg(AttackMode::Inflate) }.validate().is_err());
        assert!(AdversaryConfig { theta: Some(1.5), ..cfg(AttackMode::Blackhole) }.validate().is_err());
        assert!(cfg(AttackMode::Combined).validate().is_ok());
    }
}
