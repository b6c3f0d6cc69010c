//! Two-point battery controller.
//!
//! The same rule runs inside the plant simulator and inside fitted models
//! that bind the controller as a known deterministic mechanism, so a value
//! reconstructed from observed inputs matches the simulator bit for bit.

use serde::{Deserialize, Serialize};

/// Controller output. Encoded on the wire and in traces as -1 / 0 / +1.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatteryMode {
    Unload,
    Idle,
    Load,
}

impl BatteryMode {
    pub fn signal(self) -> f64 {
        match self {
            BatteryMode::Unload => -1.0,
            BatteryMode::Idle => 0.0,
            BatteryMode::Load => 1.0,
        }
    }

    /// Nearest mode for a (possibly noisy) numeric signal.
    pub fn from_signal(value: f64) -> Self {
        if value <= -0.5 {
            BatteryMode::Unload
        } else if value >= 0.5 {
            BatteryMode::Load
        } else {
            BatteryMode::Idle
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryControlParams {
    /// Two-step grid average above which unloading starts.
    pub unload_start_kw: f64,
    /// Unloading continues until the average falls to this level.
    pub unload_stop_kw: f64,
    /// State of charge below which the battery loads regardless of draw.
    pub soc_low: f64,
    /// A load cycle runs until the state of charge reaches this level.
    pub soc_high: f64,
}

/// One controller decision.
///
/// Priority: the low-charge override wins over everything, a started load
/// cycle runs to `soc_high`, then the two-point rule on the grid average
/// applies with hysteresis between `unload_start_kw` and `unload_stop_kw`.
pub fn battery_mode(
    p: &BatteryControlParams,
    grid_avg_kw: f64,
    soc_prev: f64,
    prev: BatteryMode,
) -> BatteryMode {
    if soc_prev < p.soc_low {
        return BatteryMode::Load;
    }
    if prev == BatteryMode::Load && soc_prev < p.soc_high {
        return BatteryMode::Load;
    }
    if grid_avg_kw > p.unload_start_kw {
        return BatteryMode::Unload;
    }
    if prev == BatteryMode::Unload && grid_avg_kw > p.unload_stop_kw {
        return BatteryMode::Unload;
    }
    BatteryMode::Idle
}
