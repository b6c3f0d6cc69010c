//! Minute-resolution simulator of a small factory's electricity demand.
//!
//! Two tool parks, a temperature-driven cooling unit and a peak-shaving
//! battery feed a single grid connection. The simulator records every node
//! of the causal graph plus the raw grid noise, so a run can later be
//! replayed, refit, or checked peak by peak.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{battery_mode, BatteryControlParams, BatteryMode};
use crate::graph::SummaryGraph;
use crate::injection::InjectionSpec;
use crate::rng::child_rng;
use crate::series::{Series, SeriesError};

/// Column names of a plant trace, in recording order.
pub mod nodes {
    pub const GRID: &str = "Grid";
    pub const TOOL_POWER_A: &str = "TPa";
    pub const TOOL_POWER_B: &str = "TPb";
    pub const UTILIZATION_A: &str = "UTa";
    pub const UTILIZATION_B: &str = "UTb";
    pub const COOLING: &str = "CL";
    pub const TEMPERATURE: &str = "T";
    pub const DAYTIME: &str = "DT";
    pub const BATTERY_USE: &str = "BU";
    pub const SOC: &str = "SOC";
    pub const BATTERY_CONTROL: &str = "BC";

    /// Column name of the noise sidecar written next to a trace.
    pub const GRID_NOISE_COLUMN: &str = "GridNoise";

    pub const COLUMNS: [&str; 11] = [
        GRID,
        TOOL_POWER_A,
        TOOL_POWER_B,
        UTILIZATION_A,
        UTILIZATION_B,
        COOLING,
        TEMPERATURE,
        DAYTIME,
        BATTERY_USE,
        SOC,
        BATTERY_CONTROL,
    ];
}

#[derive(Debug, thiserror::Error)]
pub enum PlantError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("temperature data ends at minute {have}, run needs minute {need}")]
    TemperatureRange { need: usize, have: usize },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One park of identical machines working through a shared job queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParkConfig {
    pub machines: usize,
    /// Steady draw of a busy machine.
    pub plateau_kw: f64,
    pub ramp_up_min: u32,
    pub plateau_min: u32,
    pub ramp_down_min: u32,
    /// Standby draw of an idle machine.
    pub idle_kw: f64,
    /// Mean of the exponential job inter-arrival time.
    pub arrival_mean_min: f64,
    pub noise_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoolingConfig {
    pub on_threshold_c: f64,
    pub off_threshold_c: f64,
    /// Temperature average window feeding the switch, current minute included.
    pub avg_window_min: usize,
    /// Minutes a switch decision takes to reach the compressor.
    pub delay_min: usize,
    pub scale_kw_per_deg: f64,
    pub noise_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub unload_start_kw: f64,
    pub unload_stop_kw: f64,
    /// Grid average window feeding the controller, previous minutes only.
    pub avg_window_min: usize,
    pub soc_low: f64,
    pub soc_high: f64,
    pub capacity_kwh: f64,
    pub charge_kw: f64,
    pub discharge_kw: f64,
    pub slew_kw_per_min: f64,
    pub initial_soc: f64,
    pub noise_kw: f64,
}

impl BatteryConfig {
    pub fn control_params(&self) -> BatteryControlParams {
        BatteryControlParams {
            unload_start_kw: self.unload_start_kw,
            unload_stop_kw: self.unload_stop_kw,
            soc_low: self.soc_low,
            soc_high: self.soc_high,
        }
    }
}

/// Smooth multi-day weather model: a slow sweep over daily base levels and
/// amplitudes plus a first-order autoregressive perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWeather {
    pub seed: u64,
    pub base_c: f64,
    pub base_day_swing_c: f64,
    pub amp_c: f64,
    pub amp_day_swing_c: f64,
    pub perturbation_ar: f64,
    pub perturbation_std_c: f64,
}

impl Default for SyntheticWeather {
    fn default() -> Self {
        SyntheticWeather {
            seed: 7,
            base_c: 16.0,
            base_day_swing_c: 1.6,
            amp_c: 4.9,
            amp_day_swing_c: 0.7,
            perturbation_ar: 0.95,
            perturbation_std_c: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TemperatureSource {
    /// The outdoor trace shipped with the crate.
    Bundled,
    /// A CSV file with `minute,temp_c` rows, linearly interpolated.
    File { path: PathBuf },
    /// Generate weather on the fly.
    Synthetic(SyntheticWeather),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    /// Pull of the hall temperature toward its previous value.
    pub ar_coeff: f64,
    pub noise_c: f64,
    pub source: TemperatureSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub grid_noise_kw: f64,
    pub peak_limit_kw: f64,
    pub peak_min_width: usize,
    /// Minutes to drop from the start of a run before fitting or scoring.
    pub warmup_minutes: usize,
    pub park_a: ParkConfig,
    pub park_b: ParkConfig,
    pub cooling: CoolingConfig,
    pub battery: BatteryConfig,
    pub temperature: TemperatureConfig,
}

impl PlantConfig {
    /// The calibrated defaults shipped with the crate.
    pub fn bundled() -> Self {
        let cfg: PlantConfig = toml::from_str(include_str!("../data/default_config.toml"))
            .expect("bundled config parses");
        cfg.validate().expect("bundled config is valid");
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PlantError> {
        let cfg: PlantConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Content hash of the canonical serialized form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let fail = |msg: String| Err(PlantError::InvalidConfig(msg));
        for (name, park) in [("park_a", &self.park_a), ("park_b", &self.park_b)] {
            if park.machines == 0 {
                return fail(format!("{name}: needs at least one machine"));
            }
            if park.plateau_min == 0 {
                return fail(format!("{name}: plateau must last at least a minute"));
            }
            if park.arrival_mean_min <= 0.0 {
                return fail(format!("{name}: arrival mean must be positive"));
            }
            if park.plateau_kw < 0.0 || park.idle_kw < 0.0 || park.noise_kw < 0.0 {
                return fail(format!("{name}: powers must be nonnegative"));
            }
        }
        if self.cooling.on_threshold_c <= self.cooling.off_threshold_c {
            return fail("cooling: on threshold must exceed off threshold".into());
        }
        if self.cooling.avg_window_min == 0 {
            return fail("cooling: average window must cover at least a minute".into());
        }
        if self.cooling.scale_kw_per_deg < 0.0 || self.cooling.noise_kw < 0.0 {
            return fail("cooling: powers must be nonnegative".into());
        }
        let b = &self.battery;
        if b.unload_start_kw <= b.unload_stop_kw {
            return fail("battery: unload start must exceed unload stop".into());
        }
        if b.avg_window_min == 0 {
            return fail("battery: average window must cover at least a minute".into());
        }
        if !(0.0 <= b.soc_low && b.soc_low < b.soc_high && b.soc_high <= 1.0) {
            return fail("battery: charge band must be ordered within [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&b.initial_soc) {
            return fail("battery: initial charge must lie in [0, 1]".into());
        }
        if b.capacity_kwh <= 0.0 {
            return fail("battery: capacity must be positive".into());
        }
        if b.charge_kw < 0.0 || b.discharge_kw < 0.0 || b.slew_kw_per_min <= 0.0 {
            return fail("battery: ratings must be nonnegative, slew positive".into());
        }
        if b.noise_kw < 0.0 {
            return fail("battery: noise must be nonnegative".into());
        }
        let t = &self.temperature;
        if !(0.0..1.0).contains(&t.ar_coeff) {
            return fail("temperature: autoregressive weight must lie in [0, 1)".into());
        }
        if t.noise_c < 0.0 {
            return fail("temperature: noise must be nonnegative".into());
        }
        if self.grid_noise_kw < 0.0 {
            return fail("grid noise must be nonnegative".into());
        }
        if self.peak_limit_kw <= 0.0 {
            return fail("peak limit must be positive".into());
        }
        Ok(())
    }
}

/// The causal structure the simulator realizes, with the grid as target.
pub fn summary_graph() -> SummaryGraph {
    SummaryGraph::from_text(include_str!("../data/plant_graph.txt"))
        .expect("bundled graph parses")
}

/// Daily rhythm in [-1, 1], peaking at 15:00.
pub fn diurnal(minute: usize) -> f64 {
    let m = (minute % 1440) as f64;
    (TAU * (m - 540.0) / 1440.0).sin()
}

fn lerp(a: f64, b: f64, u: f64) -> f64 {
    a + (b - a) * u
}

fn day_base(cfg: &SyntheticWeather, day: f64) -> f64 {
    cfg.base_c
        + cfg.base_day_swing_c
            * ((TAU * day / 9.3 + 0.8).sin() + 0.35 * (TAU * day / 3.7 + 2.1).sin())
}

fn day_amp(cfg: &SyntheticWeather, day: f64) -> f64 {
    (cfg.amp_c + cfg.amp_day_swing_c * (TAU * day / 5.1 + 2.9).sin()).max(0.5)
}

/// Deterministic part of the synthetic weather at an absolute minute.
fn ambient(cfg: &SyntheticWeather, minute: usize) -> f64 {
    let day = (minute / 1440) as f64;
    let u = (minute % 1440) as f64 / 1440.0;
    let base = lerp(day_base(cfg, day), day_base(cfg, day + 1.0), u);
    let amp = lerp(day_amp(cfg, day), day_amp(cfg, day + 1.0), u);
    base + amp * diurnal(minute)
}

/// An outdoor temperature trace sampled at arbitrary minutes.
#[derive(Debug, Clone)]
pub struct WeatherTrace {
    /// Strictly increasing minutes with their temperatures.
    rows: Vec<(f64, f64)>,
}

impl WeatherTrace {
    pub fn from_str(text: &str) -> Result<Self, PlantError> {
        let mut rows: Vec<(f64, f64)> = Vec::new();
        let mut saw_header = false;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != "minute,temp_c" {
                    return Err(PlantError::Format(format!(
                        "weather line {}: header must be `minute,temp_c`",
                        idx + 1
                    )));
                }
                saw_header = true;
                continue;
            }
            let mut fields = line.split(',');
            let parse = |field: Option<&str>| {
                field
                    .and_then(|f| f.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        PlantError::Format(format!("weather line {}: bad row", idx + 1))
                    })
            };
            let minute = parse(fields.next())?;
            let temp = parse(fields.next())?;
            if fields.next().is_some() {
                return Err(PlantError::Format(format!(
                    "weather line {}: expected two fields",
                    idx + 1
                )));
            }
            if let Some(&(prev, _)) = rows.last() {
                if minute <= prev {
                    return Err(PlantError::Format(format!(
                        "weather line {}: minutes must increase",
                        idx + 1
                    )));
                }
            }
            rows.push((minute, temp));
        }
        if rows.len() < 2 {
            return Err(PlantError::Format("weather trace needs at least two rows".into()));
        }
        Ok(WeatherTrace { rows })
    }

    pub fn from_path(path: &Path) -> Result<Self, PlantError> {
        WeatherTrace::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("minute,temp_c\n");
        for (minute, temp) in &self.rows {
            out.push_str(&format!("{minute},{temp}\n"));
        }
        out
    }

    /// Last covered minute.
    pub fn end_minute(&self) -> usize {
        self.rows.last().map(|&(m, _)| m as usize).unwrap_or(0)
    }

    pub fn at(&self, minute: usize) -> Result<f64, PlantError> {
        let m = minute as f64;
        let first = self.rows[0].0;
        let last = self.rows[self.rows.len() - 1].0;
        if m < first || m > last {
            return Err(PlantError::TemperatureRange { need: minute, have: last as usize });
        }
        let pos = self.rows.partition_point(|&(row_m, _)| row_m <= m);
        if pos == self.rows.len() {
            return Ok(self.rows[pos - 1].1);
        }
        let (m0, t0) = self.rows[pos - 1];
        let (m1, t1) = self.rows[pos];
        Ok(lerp(t0, t1, (m - m0) / (m1 - m0)))
    }
}

/// Minute-by-minute outdoor temperature, from a trace or generated live.
enum Weather {
    Trace(WeatherTrace),
    Synthetic { cfg: SyntheticWeather, rng: ChaCha8Rng, next_minute: usize, p: f64, last: f64 },
}

impl Weather {
    fn new(source: &TemperatureSource) -> Result<Self, PlantError> {
        match source {
            TemperatureSource::Bundled => Ok(Weather::Trace(WeatherTrace::from_str(
                include_str!("../data/temperature.csv"),
            )?)),
            TemperatureSource::File { path } => {
                Ok(Weather::Trace(WeatherTrace::from_path(path)?))
            }
            TemperatureSource::Synthetic(cfg) => Ok(Weather::Synthetic {
                rng: child_rng(cfg.seed, "weather-perturbation"),
                cfg: cfg.clone(),
                next_minute: 0,
                p: 0.0,
                last: f64::NAN,
            }),
        }
    }

    /// Temperature at an absolute minute. Synthetic weather advances its
    /// perturbation one minute at a time, so queries must not go backward.
    fn at(&mut self, minute: usize) -> Result<f64, PlantError> {
        match self {
            Weather::Trace(trace) => trace.at(minute),
            Weather::Synthetic { cfg, rng, next_minute, p, last } => {
                assert!(
                    minute + 1 >= *next_minute,
                    "synthetic weather queried backward: {minute} < {}",
                    *next_minute - 1
                );
                while *next_minute <= minute {
                    let z: f64 = rng.sample(StandardNormal);
                    *p = cfg.perturbation_ar * *p + cfg.perturbation_std_c * z;
                    *last = ambient(cfg, *next_minute) + *p;
                    *next_minute += 1;
                }
                Ok(*last)
            }
        }
    }
}

impl SyntheticWeather {
    /// Materialize the generator as a trace sampled every `step_min` minutes
    /// from zero through `end_minute` inclusive.
    pub fn sample_trace(&self, end_minute: usize, step_min: usize) -> WeatherTrace {
        assert!(step_min > 0);
        let mut weather = Weather::new(&TemperatureSource::Synthetic(self.clone()))
            .expect("synthetic weather always constructs");
        let mut rows = Vec::new();
        let mut minute = 0;
        while minute <= end_minute {
            let temp = weather.at(minute).expect("synthetic weather has no range limit");
            rows.push((minute as f64, temp));
            minute += step_min;
        }
        WeatherTrace { rows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Active { age: u32 },
}

/// Machine park state: job queue, per-machine phases, and noise stream.
struct Park {
    cfg: ParkConfig,
    phases: Vec<Phase>,
    pending: usize,
    next_arrival: f64,
    arrivals: ChaCha8Rng,
    noise: ChaCha8Rng,
    inter_arrival: Exp<f64>,
}

impl Park {
    fn new(cfg: &ParkConfig, seed: u64, suffix: &str, t_start: usize) -> Self {
        let mut arrivals = child_rng(seed, &format!("park-arrivals-{suffix}"));
        let noise = child_rng(seed, &format!("park-noise-{suffix}"));
        let inter_arrival = Exp::new(1.0 / cfg.arrival_mean_min).expect("validated mean");
        let first: f64 = arrivals.sample(inter_arrival);
        Park {
            cfg: cfg.clone(),
            phases: vec![Phase::Idle; cfg.machines],
            pending: 0,
            next_arrival: t_start as f64 + first,
            arrivals,
            noise,
            inter_arrival,
        }
    }

    fn job_minutes(&self) -> u32 {
        self.cfg.ramp_up_min + self.cfg.plateau_min + self.cfg.ramp_down_min
    }

    fn draw_kw(&self, age: u32) -> f64 {
        let c = &self.cfg;
        if age < c.ramp_up_min {
            c.plateau_kw * f64::from(age + 1) / f64::from(c.ramp_up_min + 1)
        } else if age < c.ramp_up_min + c.plateau_min {
            c.plateau_kw
        } else {
            let left = self.job_minutes() - age;
            c.plateau_kw * f64::from(left) / f64::from(c.ramp_down_min + 1)
        }
    }

    /// Advance one minute: take arrivals, age running jobs, start queued
    /// ones on machines that just freed up. Returns (power, utilization).
    fn step(&mut self, t: usize, extra_items: usize) -> (f64, f64) {
        while self.next_arrival < (t + 1) as f64 {
            self.pending += 1;
            let gap: f64 = self.arrivals.sample(self.inter_arrival);
            self.next_arrival += gap;
        }
        self.pending += extra_items;

        let total = self.job_minutes();
        for phase in &mut self.phases {
            if let Phase::Active { age } = *phase {
                *phase = if age + 1 >= total { Phase::Idle } else { Phase::Active { age: age + 1 } };
            }
        }
        for phase in &mut self.phases {
            if self.pending == 0 {
                break;
            }
            if *phase == Phase::Idle {
                *phase = Phase::Active { age: 0 };
                self.pending -= 1;
            }
        }

        let mut power = 0.0;
        let mut active = 0usize;
        for phase in &self.phases {
            match *phase {
                Phase::Idle => power += self.cfg.idle_kw,
                Phase::Active { age } => {
                    power += self.draw_kw(age);
                    active += 1;
                }
            }
        }
        let z: f64 = self.noise.sample(StandardNormal);
        power += self.cfg.noise_kw * z;
        (power, active as f64 / self.cfg.machines as f64)
    }
}

/// Cooling unit: hysteresis switch on a short temperature average, actuated
/// through a fixed delay line.
struct Cooling {
    cfg: CoolingConfig,
    window: VecDeque<f64>,
    latch: bool,
    delay: VecDeque<bool>,
    noise: ChaCha8Rng,
}

impl Cooling {
    fn new(cfg: &CoolingConfig, seed: u64) -> Self {
        Cooling {
            cfg: cfg.clone(),
            window: VecDeque::with_capacity(cfg.avg_window_min),
            latch: false,
            delay: VecDeque::from(vec![false; cfg.delay_min]),
            noise: child_rng(seed, "cooling-noise"),
        }
    }

    fn step(&mut self, temp: f64, scale: f64, pinned: Option<f64>) -> f64 {
        if self.window.len() == self.cfg.avg_window_min {
            self.window.pop_front();
        }
        self.window.push_back(temp);
        let avg: f64 = self.window.iter().sum::<f64>() / self.window.len() as f64;
        if avg > self.cfg.on_threshold_c {
            self.latch = true;
        } else if avg < self.cfg.off_threshold_c {
            self.latch = false;
        }
        self.delay.push_back(self.latch);
        let effective = self.delay.pop_front().expect("delay line never empty");

        // The stream stays aligned across paired runs whether or not the
        // unit is on.
        let z: f64 = self.noise.sample(StandardNormal);
        if let Some(kw) = pinned {
            return kw;
        }
        if effective {
            scale * (temp - self.cfg.off_threshold_c).max(0.0) + self.cfg.noise_kw * z
        } else {
            0.0
        }
    }
}

/// Battery state: controller mode, throughput with slew limits, charge level.
struct Battery {
    cfg: BatteryConfig,
    params: BatteryControlParams,
    mode: BatteryMode,
    bu: f64,
    soc: f64,
    noise: ChaCha8Rng,
}

impl Battery {
    fn new(cfg: &BatteryConfig, seed: u64) -> Self {
        Battery {
            params: cfg.control_params(),
            cfg: cfg.clone(),
            mode: BatteryMode::Idle,
            bu: 0.0,
            soc: cfg.initial_soc,
            noise: child_rng(seed, "battery-noise"),
        }
    }

    /// One controller decision and throughput update. The charge level
    /// integrates the previous minute's throughput.
    fn step(&mut self, grid_avg: f64, pin_zero: bool, soc_override: Option<f64>) -> (f64, f64, f64) {
        if let Some(soc) = soc_override {
            self.soc = soc;
        }
        let soc_prev = self.soc;
        let bu_prev = self.bu;
        let mode = battery_mode(&self.params, grid_avg, soc_prev, self.mode);
        let target = match mode {
            BatteryMode::Load => self.cfg.charge_kw,
            BatteryMode::Unload => -self.cfg.discharge_kw,
            BatteryMode::Idle => 0.0,
        };
        let slew = self.cfg.slew_kw_per_min;
        let moved = bu_prev + (target - bu_prev).clamp(-slew, slew);
        let z: f64 = self.noise.sample(StandardNormal);
        let bu = if pin_zero {
            0.0
        } else if moved == 0.0 && target == 0.0 {
            // A settled idle battery draws exactly nothing.
            0.0
        } else {
            moved + self.cfg.noise_kw * z
        };
        let soc = (soc_prev + bu_prev / (60.0 * self.cfg.capacity_kwh)).clamp(0.0, 1.0);
        self.mode = mode;
        self.bu = bu;
        self.soc = soc;
        (mode.signal(), bu, soc)
    }
}

/// A recorded run: all graph nodes plus the raw grid noise, with enough
/// metadata to reproduce or verify it.
#[derive(Debug, Clone)]
pub struct PlantTrace {
    pub series: Series,
    /// Grid noise as recorded, defined as grid minus the consumer sum.
    pub grid_noise: Vec<f64>,
    pub seed: u64,
    pub t_start: usize,
    pub config_hash: String,
}

impl PlantTrace {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn column(&self, name: &str) -> &[f64] {
        self.series.column(&name.into()).expect("plant traces carry all columns")
    }

    /// Grid minus consumers at one step, associated exactly as the
    /// simulator sums them.
    pub fn noise_residual(&self, step: usize) -> f64 {
        let grid = self.column(nodes::GRID)[step];
        let tpa = self.column(nodes::TOOL_POWER_A)[step];
        let tpb = self.column(nodes::TOOL_POWER_B)[step];
        let cl = self.column(nodes::COOLING)[step];
        let bu = self.column(nodes::BATTERY_USE)[step];
        grid - (tpa + tpb + cl + bu)
    }

    /// Grid peaks above `limit` that are at least `min_width` minutes wide
    /// between their surrounding turning points.
    pub fn peaks(&self, limit: f64, min_width: usize) -> Vec<PeakEvent> {
        detect_peaks(self.column(nodes::GRID), limit, min_width)
    }

    fn noise_path(path: &Path) -> PathBuf {
        path.with_extension("noise.csv")
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config".to_owned(), self.config_hash.clone()),
            ("seed".to_owned(), self.seed.to_string()),
        ])
    }

    /// Write the trace as CSV plus a `.noise.csv` sidecar with the grid
    /// noise column.
    pub fn save(&self, path: &Path) -> Result<(), PlantError> {
        let meta = self.metadata();
        let file = File::create(path)?;
        self.series.write_csv(self.t_start, &meta, BufWriter::new(file))?;

        let mut noise = Series::new([nodes::GRID_NOISE_COLUMN])?;
        for &v in &self.grid_noise {
            noise.push_row(&[v])?;
        }
        let file = File::create(Self::noise_path(path))?;
        noise.write_csv(self.t_start, &meta, BufWriter::new(file))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PlantError> {
        let main = File::open(path)?;
        let (series, t_start, meta) = Series::read_csv(BufReader::new(main))?;
        let noise_file = File::open(Self::noise_path(path))?;
        let (noise, noise_start, noise_meta) = Series::read_csv(BufReader::new(noise_file))?;
        if noise_start != t_start || noise_meta != meta {
            return Err(PlantError::Format(
                "noise sidecar does not match its trace".into(),
            ));
        }
        let grid_noise = noise.column(&nodes::GRID_NOISE_COLUMN.into())?.to_vec();
        if grid_noise.len() != series.len() {
            return Err(PlantError::Format("noise sidecar length differs from trace".into()));
        }
        for name in nodes::COLUMNS {
            if !series.has_column(&name.into()) {
                return Err(PlantError::Format(format!("trace misses column {name}")));
            }
        }
        let seed = meta
            .get("seed")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| PlantError::Format("trace misses seed metadata".into()))?;
        let config_hash = meta
            .get("config")
            .cloned()
            .ok_or_else(|| PlantError::Format("trace misses config metadata".into()))?;
        Ok(PlantTrace { series, grid_noise, seed, t_start, config_hash })
    }
}

/// A grid excursion above the peak limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakEvent {
    /// Step of the first maximal value.
    pub t: usize,
    pub magnitude: f64,
    /// Turning point left of the excursion.
    pub start: usize,
    /// Turning point right of the excursion.
    pub end: usize,
}

impl PeakEvent {
    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

/// Find excursions above `limit` and keep those at least `min_width` wide.
///
/// An excursion's extent runs between the nearest turning points: walking
/// outward from the exceedance, downhill or flat steps extend the extent and
/// the first rise ends it.
pub fn detect_peaks(values: &[f64], limit: f64, min_width: usize) -> Vec<PeakEvent> {
    let mut peaks = Vec::new();
    let mut i = 0;
    while i < values.len() {
        if values[i] <= limit {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < values.len() && values[j + 1] > limit {
            j += 1;
        }
        let mut t = i;
        for k in i..=j {
            if values[k] > values[t] {
                t = k;
            }
        }
        let mut start = i;
        while start > 0 && values[start - 1] <= values[start] {
            start -= 1;
        }
        let mut end = j;
        while end + 1 < values.len() && values[end + 1] <= values[end] {
            end += 1;
        }
        if end - start >= min_width {
            peaks.push(PeakEvent { t, magnitude: values[t], start, end });
        }
        i = j + 1;
    }
    peaks
}

/// One plant run in progress.
pub struct Simulation {
    cfg: PlantConfig,
    seed: u64,
    t_start: usize,
    t: usize,
    weather: Weather,
    park_a: Park,
    park_b: Park,
    cooling: Cooling,
    battery: Battery,
    temp_prev: f64,
    temp_noise: ChaCha8Rng,
    grid_noise_rng: ChaCha8Rng,
    grid_window: VecDeque<f64>,
    series: Series,
    grid_noise: Vec<f64>,
}

impl Simulation {
    pub fn new(cfg: &PlantConfig, seed: u64, t_start: usize) -> Result<Self, PlantError> {
        cfg.validate()?;
        let mut weather = Weather::new(&cfg.temperature.source)?;
        // The hall starts in equilibrium with the outdoors.
        let temp_prev = weather.at(t_start)?;
        Ok(Simulation {
            seed,
            t_start,
            t: t_start,
            park_a: Park::new(&cfg.park_a, seed, "a", t_start),
            park_b: Park::new(&cfg.park_b, seed, "b", t_start),
            cooling: Cooling::new(&cfg.cooling, seed),
            battery: Battery::new(&cfg.battery, seed),
            temp_prev,
            temp_noise: child_rng(seed, "temperature-noise"),
            grid_noise_rng: child_rng(seed, "grid-noise"),
            grid_window: VecDeque::with_capacity(cfg.battery.avg_window_min),
            series: Series::new(nodes::COLUMNS)?,
            grid_noise: Vec::new(),
            weather,
            cfg: cfg.clone(),
        })
    }

    /// Absolute minute the next step will record.
    pub fn now(&self) -> usize {
        self.t
    }

    /// Advance one minute, applying whatever `injection` prescribes for it.
    pub fn step(&mut self, injection: Option<&InjectionSpec>) -> Result<(), PlantError> {
        let t = self.t;
        let cfg = &self.cfg;

        let outdoor = self.weather.at(t)?;
        let daytime = diurnal(t);
        let z: f64 = self.temp_noise.sample(StandardNormal);
        let ar = cfg.temperature.ar_coeff;
        let mut temp = ar * self.temp_prev + (1.0 - ar) * outdoor + cfg.temperature.noise_c * z;
        if let Some(pinned) = injection.and_then(|s| s.pins_temperature(t)) {
            temp = pinned;
        }
        self.temp_prev = temp;

        let scale = injection
            .and_then(|s| s.cooling_scale(t))
            .unwrap_or(cfg.cooling.scale_kw_per_deg);
        let pinned_cl = injection.and_then(|s| s.pins_cooling(t));
        let cooling = self.cooling.step(temp, scale, pinned_cl);

        let extra = injection.map_or(0, |s| s.extra_work_items(t));
        let (tool_a, util_a) = self.park_a.step(t, extra);
        let (tool_b, util_b) = self.park_b.step(t, 0);

        let grid_avg = if self.grid_window.is_empty() {
            0.0
        } else {
            self.grid_window.iter().sum::<f64>() / self.grid_window.len() as f64
        };
        let pin_zero = injection.is_some_and(|s| s.pins_battery_zero(t));
        let soc_override = injection.and_then(|s| s.soc_override(t));
        let (control, battery_use, soc) = self.battery.step(grid_avg, pin_zero, soc_override);

        let z: f64 = self.grid_noise_rng.sample(StandardNormal);
        let sigma = injection.and_then(|s| s.grid_sigma(t)).unwrap_or(cfg.grid_noise_kw);
        let consumers = tool_a + tool_b + cooling + battery_use;
        let grid = consumers + sigma * z;
        // Recorded so that grid minus consumers reproduces it bit for bit.
        let recorded_noise = grid - consumers;

        if self.grid_window.len() == cfg.battery.avg_window_min {
            self.grid_window.pop_front();
        }
        self.grid_window.push_back(grid);

        self.series.push_row(&[
            grid,
            tool_a,
            tool_b,
            util_a,
            util_b,
            cooling,
            temp,
            daytime,
            battery_use,
            soc,
            control,
        ])?;
        self.grid_noise.push(recorded_noise);
        self.t += 1;
        Ok(())
    }

    pub fn into_trace(self) -> PlantTrace {
        PlantTrace {
            series: self.series,
            grid_noise: self.grid_noise,
            seed: self.seed,
            t_start: self.t_start,
            config_hash: self.cfg.hash(),
        }
    }

    /// Run `duration` minutes from `t_start` and collect the trace.
    pub fn run(
        cfg: &PlantConfig,
        seed: u64,
        t_start: usize,
        duration: usize,
        injection: Option<&InjectionSpec>,
    ) -> Result<PlantTrace, PlantError> {
        let mut sim = Simulation::new(cfg, seed, t_start)?;
        for _ in 0..duration {
            sim.step(injection)?;
        }
        Ok(sim.into_trace())
    }
}

/// A fault-free run.
pub fn simulate(
    cfg: &PlantConfig,
    seed: u64,
    t_start: usize,
    duration: usize,
) -> Result<PlantTrace, PlantError> {
    Simulation::run(cfg, seed, t_start, duration, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::InjectionKind;

    fn synthetic_config() -> PlantConfig {
        let mut cfg = PlantConfig::bundled();
        cfg.temperature.source = TemperatureSource::Synthetic(SyntheticWeather::default());
        cfg
    }

    #[test]
    fn bundled_config_is_valid() {
        let cfg = PlantConfig::bundled();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.hash().len(), 64);

        let round = PlantConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(round, cfg);
        assert_eq!(round.hash(), cfg.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = synthetic_config();
        cfg.cooling.on_threshold_c = cfg.cooling.off_threshold_c;
        assert!(matches!(cfg.validate(), Err(PlantError::InvalidConfig(_))));

        let mut cfg = synthetic_config();
        cfg.battery.soc_low = 0.95;
        assert!(cfg.validate().is_err());

        let mut cfg = synthetic_config();
        cfg.park_a.arrival_mean_min = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn graph_matches_recorded_columns() {
        let graph = summary_graph();
        assert_eq!(graph.node_count(), nodes::COLUMNS.len());
        for name in nodes::COLUMNS {
            assert!(graph.contains(&name.into()), "graph misses {name}");
        }
        // Every consumer feeds the grid within the minute.
        for name in [nodes::TOOL_POWER_A, nodes::TOOL_POWER_B, nodes::COOLING, nodes::BATTERY_USE]
        {
            let parents = graph.parents(&nodes::GRID.into());
            assert!(parents.contains(&(name.into(), 0)), "grid misses parent {name}");
        }
    }

    #[test]
    fn runs_are_deterministic_with_common_prefixes() {
        let cfg = synthetic_config();
        let a = simulate(&cfg, 11, 0, 240).unwrap();
        let b = simulate(&cfg, 11, 0, 240).unwrap();
        for name in nodes::COLUMNS {
            assert_eq!(a.column(name), b.column(name), "column {name} differs");
        }
        assert_eq!(a.grid_noise, b.grid_noise);

        let long = simulate(&cfg, 11, 0, 480).unwrap();
        for name in nodes::COLUMNS {
            assert_eq!(&long.column(name)[..240], a.column(name), "prefix of {name} differs");
        }

        let other = simulate(&cfg, 12, 0, 240).unwrap();
        assert_ne!(a.column(nodes::GRID), other.column(nodes::GRID));
    }

    #[test]
    fn noise_residual_reproduces_recorded_noise_exactly() {
        let cfg = synthetic_config();
        let trace = simulate(&cfg, 3, 0, 600).unwrap();
        for step in 0..trace.len() {
            assert_eq!(trace.noise_residual(step), trace.grid_noise[step], "step {step}");
        }
    }

    #[test]
    fn quiet_plant_draws_exactly_the_standby_power() {
        let mut cfg = synthetic_config();
        cfg.grid_noise_kw = 0.0;
        cfg.park_a.noise_kw = 0.0;
        cfg.park_b.noise_kw = 0.0;
        cfg.park_a.arrival_mean_min = 1e12;
        cfg.park_b.arrival_mean_min = 1e12;
        // Freezing weather keeps the cooling latch off.
        cfg.temperature.source = TemperatureSource::Synthetic(SyntheticWeather {
            base_c: -15.0,
            base_day_swing_c: 0.0,
            amp_c: 1.0,
            amp_day_swing_c: 0.0,
            ..SyntheticWeather::default()
        });

        let trace = simulate(&cfg, 5, 0, 300).unwrap();
        let standby = cfg.park_a.idle_kw * cfg.park_a.machines as f64
            + cfg.park_b.idle_kw * cfg.park_b.machines as f64;
        for (step, &grid) in trace.column(nodes::GRID).iter().enumerate() {
            assert!((grid - standby).abs() < 1e-9, "step {step}: grid {grid} vs {standby}");
        }
        assert!(trace.column(nodes::COOLING).iter().all(|&v| v == 0.0));
        assert!(trace.column(nodes::BATTERY_USE).iter().all(|&v| v == 0.0));
        assert!(trace.column(nodes::SOC).iter().all(|&v| v == cfg.battery.initial_soc));
    }

    #[test]
    fn soc_stays_in_range_and_recovers_into_band() {
        let cfg = synthetic_config();
        let spec = InjectionSpec::new(InjectionKind::SocLoss { soc: 0.4 }, 120);
        let trace = Simulation::run(&cfg, 21, 0, 600, Some(&spec)).unwrap();
        let soc = trace.column(nodes::SOC);
        assert!(soc.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // The low-charge override must charge the battery back into its band
        // within the worst-case time plus slew slack.
        let band = cfg.battery.soc_low - 0.4;
        let worst = (band * 60.0 * cfg.battery.capacity_kwh / cfg.battery.charge_kw).ceil();
        let deadline = 121 + worst as usize + 10;
        assert!(
            soc[deadline..].iter().take(60).all(|&v| v >= cfg.battery.soc_low),
            "charge level failed to recover into the band"
        );
    }

    #[test]
    fn battery_unload_stops_only_below_the_stop_level() {
        let mut cfg = synthetic_config();
        // A trigger below typical demand keeps the controller busy.
        cfg.battery.unload_start_kw = 1150.0;
        cfg.battery.unload_stop_kw = 1050.0;
        let trace = simulate(&cfg, 33, 0, 3 * 1440).unwrap();
        let bc = trace.column(nodes::BATTERY_CONTROL);
        let grid = trace.column(nodes::GRID);
        let soc = trace.column(nodes::SOC);
        let mut unload_seen = false;
        for t in 1..trace.len() {
            if bc[t - 1] == BatteryMode::Unload.signal() {
                unload_seen = true;
                if bc[t] == BatteryMode::Idle.signal() {
                    let from = t.saturating_sub(cfg.battery.avg_window_min);
                    let avg = grid[from..t].iter().sum::<f64>() / (t - from) as f64;
                    assert!(
                        avg <= cfg.battery.unload_stop_kw,
                        "minute {t}: unload stopped at average {avg}"
                    );
                }
                if bc[t] == BatteryMode::Load.signal() {
                    assert!(soc[t - 1] < cfg.battery.soc_low, "minute {t}: load without need");
                }
            }
        }
        assert!(unload_seen, "the lowered trigger should see at least one unload");
    }

    #[test]
    fn work_arrival_raises_park_a_utilization() {
        let cfg = synthetic_config();
        let t_i = 300;
        let spec = InjectionSpec::new(InjectionKind::WorkArrival { items: 3 }, t_i);
        let base = simulate(&cfg, 9, 0, 400).unwrap();
        let faulty = Simulation::run(&cfg, 9, 0, 400, Some(&spec)).unwrap();
        assert_eq!(&base.column(nodes::UTILIZATION_A)[..t_i], &faulty.column(nodes::UTILIZATION_A)[..t_i]);
        let gained: f64 = (t_i..t_i + 10)
            .map(|t| faulty.column(nodes::UTILIZATION_A)[t] - base.column(nodes::UTILIZATION_A)[t])
            .sum();
        assert!(gained > 0.0, "extra items must busy extra machines");
        assert_eq!(base.column(nodes::UTILIZATION_B), faulty.column(nodes::UTILIZATION_B));
    }

    #[test]
    fn cooling_follows_pinned_temperature_immediately_when_on() {
        let mut cfg = synthetic_config();
        // A mild steady climate that keeps the latch on.
        cfg.temperature.source = TemperatureSource::Synthetic(SyntheticWeather {
            base_c: 22.0,
            base_day_swing_c: 0.0,
            amp_c: 1.0,
            amp_day_swing_c: 0.0,
            ..SyntheticWeather::default()
        });
        let t_i = 200;
        let spec = InjectionSpec::new(InjectionKind::TemperatureSurge { temp_c: 31.0 }, t_i);
        let trace = Simulation::run(&cfg, 2, 0, 260, Some(&spec)).unwrap();
        assert_eq!(trace.column(nodes::TEMPERATURE)[t_i], 31.0);
        let expected = cfg.cooling.scale_kw_per_deg * (31.0 - cfg.cooling.off_threshold_c);
        let cl = trace.column(nodes::COOLING)[t_i];
        assert!(
            (cl - expected).abs() < 5.0 * cfg.cooling.noise_kw,
            "cooling {cl} should jump to about {expected}"
        );
    }

    #[test]
    fn peak_detection_keeps_wide_and_drops_narrow_excursions() {
        // Plateau peak: extent reaches the surrounding turning points.
        let peaks = detect_peaks(&[1400.0, 1600.0, 1600.0, 1400.0], 1500.0, 2);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].t, 1);
        assert_eq!(peaks[0].magnitude, 1600.0);
        assert_eq!((peaks[0].start, peaks[0].end), (0, 3));

        // A single exceedance still spans its shoulders.
        let peaks = detect_peaks(&[1400.0, 1600.0, 1400.0], 1500.0, 2);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].width(), 2);

        // Boundary spike: only one shoulder, too narrow.
        let peaks = detect_peaks(&[1600.0, 1400.0], 1500.0, 2);
        assert!(peaks.is_empty());

        // Flat shoulders extend the extent.
        let peaks = detect_peaks(&[3.0, 3.0, 1600.0, 1200.0, 1300.0], 1500.0, 2);
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks[0].start, peaks[0].end), (0, 3));

        // Separate excursions stay separate peaks.
        let peaks =
            detect_peaks(&[0.0, 1600.0, 0.0, 1700.0, 0.0], 1500.0, 2);
        assert_eq!(peaks.len(), 2);
        assert_eq!(peaks[0].t, 1);
        assert_eq!(peaks[1].t, 3);

        assert!(detect_peaks(&[], 1500.0, 2).is_empty());
    }

    #[test]
    fn synthetic_weather_is_warmer_at_noon_than_at_night() {
        let cfg = SyntheticWeather { perturbation_std_c: 0.0, ..SyntheticWeather::default() };
        let mut weather = Weather::new(&TemperatureSource::Synthetic(cfg.clone())).unwrap();
        let night = weather.at(2 * 1440 + 180).unwrap();
        let afternoon = weather.at(2 * 1440 + 900).unwrap();
        assert!(afternoon > night + 3.0, "afternoon {afternoon} vs night {night}");
        // Matches the closed form when the perturbation is silenced.
        assert!((afternoon - ambient(&cfg, 2 * 1440 + 900)).abs() < 1e-12);
    }

    #[test]
    fn weather_trace_interpolates_and_checks_range() {
        let trace = WeatherTrace::from_str("minute,temp_c\n0,10\n10,20\n").unwrap();
        assert_eq!(trace.at(0).unwrap(), 10.0);
        assert_eq!(trace.at(5).unwrap(), 15.0);
        assert_eq!(trace.at(10).unwrap(), 20.0);
        assert!(matches!(
            trace.at(11),
            Err(PlantError::TemperatureRange { need: 11, have: 10 })
        ));

        assert!(WeatherTrace::from_str("minute,temp_c\n5,1\n4,2\n").is_err());
        assert!(WeatherTrace::from_str("wrong,header\n1,2\n").is_err());

        let regen = trace.to_csv_string();
        assert_eq!(WeatherTrace::from_str(&regen).unwrap().rows, trace.rows);
    }

    #[test]
    fn trace_round_trips_through_csv() {
        let cfg = synthetic_config();
        let trace = simulate(&cfg, 17, 100, 50).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        trace.save(&path).unwrap();
        let back = PlantTrace::load(&path).unwrap();
        assert_eq!(back.seed, 17);
        assert_eq!(back.t_start, 100);
        assert_eq!(back.config_hash, trace.config_hash);
        assert_eq!(back.grid_noise, trace.grid_noise);
        for name in nodes::COLUMNS {
            assert_eq!(back.column(name), trace.column(name), "column {name}");
        }

        std::fs::remove_file(dir.path().join("run.noise.csv")).unwrap();
        assert!(PlantTrace::load(&path).is_err(), "the noise sidecar is required");
    }

    /// Regenerates the bundled outdoor temperature file when
    /// `REGEN_BUNDLED_DATA=1`; otherwise verifies it matches the generator.
    #[test]
    fn bundled_temperature_matches_generator() {
        let days = 31;
        let trace = SyntheticWeather::default().sample_trace(days * 1440, 10);
        let expected = trace.to_csv_string();
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/temperature.csv");
        if std::env::var("REGEN_BUNDLED_DATA").as_deref() == Ok("1") {
            std::fs::write(path, &expected).unwrap();
        }
        let bundled = std::fs::read_to_string(path).unwrap();
        assert_eq!(bundled, expected, "regenerate with REGEN_BUNDLED_DATA=1");
    }
}
