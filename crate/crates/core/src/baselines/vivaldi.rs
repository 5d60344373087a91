//! Decentralized Vivaldi spring relaxation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{random_unit, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VivaldiParams {
    pub cc: f64,
    pub ce: f64,
    pub initial_error: f64,
}

impl Default for VivaldiParams {
    fn default() -> Self {
        VivaldiParams {
            cc: 0.25,
            ce: 0.25,
            initial_error: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VivaldiCoord {
    pub x: Vec3,
    pub err: f64,
}

impl VivaldiCoord {
    pub fn origin(params: &VivaldiParams) -> Self {
        VivaldiCoord {
            x: Vec3::zeros(),
            err: params.initial_error,
        }
    }
}

/// One spring update of `local` against a peer's reported coordinate and a
/// measured delay.
pub fn mercury_vivaldi_step<R: Rng + ?Sized>(
    local: VivaldiCoord,
    peer: VivaldiCoord,
    measured_ms: f64,
    params: &VivaldiParams,
    rng: &mut R,
) -> VivaldiCoord {
    if !(measured_ms > 0.0) || !measured_ms.is_finite() {
        return local;
    }
    let diff = local.x - peer.x;
    let predicted = diff.norm();
    let w = if local.err + peer.err > 0.0 {
        local.err / (local.err + peer.err)
    } else {
        0.5
    };
    let sample_err = (predicted - measured_ms).abs() / measured_ms;
    let err = (sample_err * params.ce * w + local.err * (1.0 - params.ce * w)).max(0.0);
    let delta = params.cc * w;
    let dir = crate::geom::unit(&diff).unwrap_or_else(|| random_unit(rng));
    VivaldiCoord {
        x: local.x + dir * (delta * (measured_ms - predicted)),
        err,
    }
}
