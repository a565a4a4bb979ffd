//! Physical constants (CODATA 2018 exact values).

/// Elementary charge in coulombs.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// One picofarad in farads.
pub const PICOFARAD: f64 = 1e-12;
