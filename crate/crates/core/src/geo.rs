//! Planar approximation used for along-shape distances.

use serde::{Deserialize, Serialize};

use crate::spatial_grid::LatLng;

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Equirectangular tangent plane anchored at `origin`, in meters.
///
/// Accurate to well under a meter across a metropolitan area, which is the
/// scale at which shapes and reports are compared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: LatLng,
    cos_lat: f64,
}

impl LocalFrame {
    pub fn new(origin: LatLng) -> Self {
        LocalFrame {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        }
    }

    pub fn project(&self, p: LatLng) -> [f64; 2] {
        let mut dlng = p.lng - self.origin.lng;
        if dlng > 180.0 {
            dlng -= 360.0;
        } else if dlng < -180.0 {
            dlng += 360.0;
        }
        [
            dlng.to_radians() * EARTH_RADIUS_M * self.cos_lat,
            (p.lat - self.origin.lat).to_radians() * EARTH_RADIUS_M,
        ]
    }

    pub fn unproject(&self, xy: [f64; 2]) -> LatLng {
        let lat = self.origin.lat + (xy[1] / EARTH_RADIUS_M).to_degrees();
        let mut lng = self.origin.lng + (xy[0] / (EARTH_RADIUS_M * self.cos_lat)).to_degrees();
        if lng >= 180.0 {
            lng -= 360.0;
        } else if lng < -180.0 {
            lng += 360.0;
        }
        LatLng {
            lat: lat.clamp(-90.0, 90.0),
            lng,
        }
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Closest point on segment `ab` to `p`: returns `(t in [0,1], distance)`.
pub fn project_onto_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * dx, a[1] + t * dy];
    (t, dist(p, q))
}
