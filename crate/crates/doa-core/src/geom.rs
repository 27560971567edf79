//! Directions on the sphere and angle wrapping helpers.

use std::f64::consts::{PI, TAU};

/// Unit vector for azimuth `az` (counterclockwise from +X) and elevation
/// `el` (up positive), both in radians.
pub fn unit_vector(az: f64, el: f64) -> [f64; 3] {
    [az.cos() * el.cos(), az.sin() * el.cos(), el.sin()]
}

/// Great-circle angle in radians between two (azimuth, elevation) pairs.
///
/// Returns exactly 0.0 when the pairs are bitwise equal, so estimates that
/// land exactly on the ground-truth grid report an error of exactly zero
/// instead of an acos rounding residue.
pub fn great_circle(a: (f64, f64), b: (f64, f64)) -> f64 {
    if a == b {
        return 0.0;
    }
    let u = unit_vector(a.0, a.1);
    let v = unit_vector(b.0, b.1);
    let dot = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).clamp(-1.0, 1.0);
    dot.acos()
}

/// Wrap an angle in radians to [-pi, pi). In-range input passes through
/// bitwise unchanged.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let x = (a + PI).rem_euclid(TAU) - PI;
    if x >= PI {
        -PI
    } else {
        x
    }
}

/// Wrap an angle in degrees to [-180, 180). In-range input passes through
/// bitwise unchanged.
pub fn wrap_degrees(d: f64) -> f64 {
    if (-180.0..180.0).contains(&d) {
        return d;
    }
    let x = (d + 180.0).rem_euclid(360.0) - 180.0;
    if x >= 180.0 {
        -180.0
    } else {
        x
    }
}
