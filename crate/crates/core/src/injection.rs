//! Fault injection: reproducible disturbances applied to a plant run, and
//! the paired-run bookkeeping used to label the grid peaks they cause.

use serde::{Deserialize, Serialize};

use crate::plant::{nodes, PeakEvent, PlantConfig, PlantError, PlantTrace, Simulation};
use crate::rng::child_seed;

/// A disturbance kind with its strength parameters.
///
/// Every kind overrides one mechanism of the plant for the minutes the
/// injection is active; the rest of the simulation, including its random
/// streams, is untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InjectionKind {
    /// Pin the hall temperature to a fixed value.
    TemperatureSurge { temp_c: f64 },
    /// Pin the cooling draw to a fixed value.
    CoolingSurge { kw: f64 },
    /// Replace the cooling power-per-degree coefficient.
    CoolingScale { kw_per_deg: f64 },
    /// Force battery throughput to zero.
    BatteryFailure,
    /// Drop the state of charge to a fixed level at one instant.
    SocLoss { soc: f64 },
    /// Queue extra work items at park a, spread over the active window.
    WorkArrival { items: usize },
    /// Replace the grid noise scale.
    GridNoise { sigma_kw: f64 },
}

impl InjectionKind {
    /// Stable kebab-case name, also used as the CLI argument.
    pub fn label(&self) -> &'static str {
        match self {
            InjectionKind::TemperatureSurge { .. } => "temperature-surge",
            InjectionKind::CoolingSurge { .. } => "cooling-surge",
            InjectionKind::CoolingScale { .. } => "cooling-scale",
            InjectionKind::BatteryFailure => "battery-failure",
            InjectionKind::SocLoss { .. } => "soc-loss",
            InjectionKind::WorkArrival { .. } => "work-arrival",
            InjectionKind::GridNoise { .. } => "grid-noise",
        }
    }

    /// Kind with default strength for a label, if the label is known.
    pub fn from_label(label: &str) -> Option<Self> {
        Self::catalog().into_iter().find(|k| k.label() == label)
    }

    /// The node whose mechanism the injection tampers with.
    pub fn affected_node(&self) -> &'static str {
        match self {
            InjectionKind::TemperatureSurge { .. } => nodes::TEMPERATURE,
            InjectionKind::CoolingSurge { .. } => nodes::COOLING,
            InjectionKind::CoolingScale { .. } => nodes::COOLING,
            InjectionKind::BatteryFailure => nodes::BATTERY_USE,
            InjectionKind::SocLoss { .. } => nodes::SOC,
            InjectionKind::WorkArrival { .. } => nodes::UTILIZATION_A,
            InjectionKind::GridNoise { .. } => nodes::GRID,
        }
    }

    /// How long the disturbance stays active unless overridden.
    pub fn default_duration(&self) -> usize {
        match self {
            InjectionKind::TemperatureSurge { .. } => 10,
            InjectionKind::CoolingSurge { .. } => 10,
            InjectionKind::CoolingScale { .. } => 10,
            InjectionKind::BatteryFailure => 15,
            InjectionKind::SocLoss { .. } => 0,
            InjectionKind::WorkArrival { .. } => 3,
            InjectionKind::GridNoise { .. } => 10,
        }
    }

    /// All kinds at default strength, in label order.
    pub fn catalog() -> Vec<Self> {
        vec![
            InjectionKind::BatteryFailure,
            InjectionKind::CoolingScale { kw_per_deg: 75.0 },
            InjectionKind::CoolingSurge { kw: 265.0 },
            InjectionKind::GridNoise { sigma_kw: 550.0 },
            InjectionKind::SocLoss { soc: 0.69 },
            InjectionKind::TemperatureSurge { temp_c: 31.0 },
            InjectionKind::WorkArrival { items: 3 },
        ]
    }
}

/// A disturbance kind placed on the timeline.
///
/// The active window is `[t_i, t_i + duration)` in absolute minutes. A zero
/// duration still permits point effects at `t_i` itself (state-of-charge
/// loss rewrites the stored charge level once).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub kind: InjectionKind,
    pub t_i: usize,
    pub duration: usize,
}

impl InjectionSpec {
    pub fn new(kind: InjectionKind, t_i: usize) -> Self {
        let duration = kind.default_duration();
        InjectionSpec { kind, t_i, duration }
    }

    pub fn with_duration(kind: InjectionKind, t_i: usize, duration: usize) -> Self {
        InjectionSpec { kind, t_i, duration }
    }

    pub fn active_at(&self, t: usize) -> bool {
        t >= self.t_i && t < self.t_i + self.duration
    }

    /// End of the active window (first minute no longer active).
    pub fn window_end(&self) -> usize {
        self.t_i + self.duration
    }

    pub fn pins_temperature(&self, t: usize) -> Option<f64> {
        match self.kind {
            InjectionKind::TemperatureSurge { temp_c } if self.active_at(t) => Some(temp_c),
            _ => None,
        }
    }

    pub fn pins_cooling(&self, t: usize) -> Option<f64> {
        match self.kind {
            InjectionKind::CoolingSurge { kw } if self.active_at(t) => Some(kw),
            _ => None,
        }
    }

    pub fn cooling_scale(&self, t: usize) -> Option<f64> {
        match self.kind {
            InjectionKind::CoolingScale { kw_per_deg } if self.active_at(t) => Some(kw_per_deg),
            _ => None,
        }
    }

    pub fn pins_battery_zero(&self, t: usize) -> bool {
        matches!(self.kind, InjectionKind::BatteryFailure) && self.active_at(t)
    }

    pub fn soc_override(&self, t: usize) -> Option<f64> {
        match self.kind {
            InjectionKind::SocLoss { soc } if t == self.t_i => Some(soc),
            _ => None,
        }
    }

    /// Extra park-a work items queued at minute `t`, one per minute over the
    /// active window with any remainder front-loaded.
    pub fn extra_work_items(&self, t: usize) -> usize {
        let InjectionKind::WorkArrival { items } = self.kind else {
            return 0;
        };
        if !self.active_at(t) {
            return 0;
        }
        let offset = t - self.t_i;
        let base = items / self.duration;
        let extra = usize::from(offset < items % self.duration);
        base + extra
    }

    pub fn grid_sigma(&self, t: usize) -> Option<f64> {
        match self.kind {
            InjectionKind::GridNoise { sigma_kw } if self.active_at(t) => Some(sigma_kw),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InjectionError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("fault window [{t_i}, {end}) lies outside the run [{t_start}, {t_end})")]
    WindowOutsideRun { t_i: usize, end: usize, t_start: usize, t_end: usize },
    #[error("paired runs diverge at minute {t}, before the fault at {t_i}")]
    PrefixDivergence { t: usize, t_i: usize },
}

/// A fault run next to its fault-free twin on the same random streams.
///
/// Both runs share every noise draw, so they are bitwise identical until
/// the fault starts and any later difference is caused by it.
#[derive(Debug, Clone)]
pub struct PairedRun {
    pub spec: InjectionSpec,
    pub faulty: PlantTrace,
    pub baseline: PlantTrace,
}

impl PairedRun {
    /// Simulate both runs and check the shared prefix really is identical.
    pub fn simulate(
        cfg: &PlantConfig,
        seed: u64,
        t_start: usize,
        duration: usize,
        spec: InjectionSpec,
    ) -> Result<Self, InjectionError> {
        let t_end = t_start + duration;
        if spec.t_i < t_start || spec.window_end() > t_end || spec.t_i >= t_end {
            return Err(InjectionError::WindowOutsideRun {
                t_i: spec.t_i,
                end: spec.window_end(),
                t_start,
                t_end,
            });
        }
        let faulty = Simulation::run(cfg, seed, t_start, duration, Some(&spec))?;
        let baseline = Simulation::run(cfg, seed, t_start, duration, None)?;
        let paired = PairedRun { spec, faulty, baseline };
        paired.verify_prefix()?;
        Ok(paired)
    }

    /// First minute before the fault at which the runs differ, if any.
    pub fn verify_prefix(&self) -> Result<(), InjectionError> {
        let t_start = self.faulty.t_start;
        let shared = self.spec.t_i.saturating_sub(t_start).min(self.faulty.len());
        for name in nodes::COLUMNS {
            let f = &self.faulty.column(name)[..shared];
            let b = &self.baseline.column(name)[..shared];
            if let Some(step) = (0..shared).find(|&s| f[s] != b[s]) {
                return Err(InjectionError::PrefixDivergence {
                    t: t_start + step,
                    t_i: self.spec.t_i,
                });
            }
        }
        if self.faulty.grid_noise[..shared] != self.baseline.grid_noise[..shared] {
            let step = (0..shared)
                .find(|&s| self.faulty.grid_noise[s] != self.baseline.grid_noise[s])
                .unwrap();
            return Err(InjectionError::PrefixDivergence { t: t_start + step, t_i: self.spec.t_i });
        }
        Ok(())
    }

    /// Peaks of the faulty run that the fault answers for: they top out
    /// within `tau` minutes of the fault start and no overlapping fault-free
    /// peak reaches their magnitude.
    pub fn attributable_peaks(&self, limit: f64, min_width: usize, tau: usize) -> Vec<PeakEvent> {
        let t_start = self.faulty.t_start;
        let base_peaks = self.baseline.peaks(limit, min_width);
        self.faulty
            .peaks(limit, min_width)
            .into_iter()
            .filter(|p| {
                let t_abs = t_start + p.t;
                t_abs >= self.spec.t_i && t_abs <= self.spec.t_i + tau
            })
            .filter(|p| {
                !base_peaks.iter().any(|b| {
                    b.start <= p.end && p.start <= b.end && b.magnitude >= p.magnitude
                })
            })
            .collect()
    }
}

/// Everything one benchmark case carries: the fault, its paired runs, and
/// the peaks the fault must answer for.
#[derive(Debug, Clone)]
pub struct InjectionCase {
    pub seed: u64,
    /// Position within the case's injection kind.
    pub index: usize,
    pub run: PairedRun,
    pub peaks: Vec<PeakEvent>,
}

/// Deterministic seed for one benchmark case.
pub fn case_seed(master_seed: u64, kind: &InjectionKind, index: usize) -> u64 {
    child_seed(master_seed, &format!("case-{}-{index}", kind.label()))
}

/// Deterministic seed for one fault-free training run.
pub fn train_seed(master_seed: u64, index: usize) -> u64 {
    child_seed(master_seed, &format!("train-{index}"))
}
