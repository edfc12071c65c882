//! FD-node charge dynamics for spliced tiles of pixel units.
//!
//! A tile is a rectangular block of pixel units whose FD nodes are tied
//! together through the convlink wires. During exposure every photodiode in
//! the tile discharges the shared node for a time proportional to its weight
//! magnitude, so the node ends at
//!
//! ```text
//! U = U_rst - k / (n C) * sum_i (I_i + I_dark) * w_i
//! ```
//!
//! for `n` units of capacitance `C`. Integration is done analytically over the
//! piecewise-constant current between PWM window edges; a parallel leakage
//! resistor per unit discharges the node towards 0 V.

use serde::{Deserialize, Serialize};

use crate::config::{ValidatedConfig, MAX_WEIGHT_MAGNITUDE};
use crate::error::{Error, Result};
use crate::kernel::{Phase, PhaseWeights};
use crate::optics::PhotocurrentMap;

/// Fraction of the usable swing auto-exposure aims the worst tile at.
pub const AUTO_EXPOSURE_HEADROOM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TilePhase {
    Reset,
    /// Exposed and holding its result for the given phase.
    Ready(Phase),
    /// Result already converted.
    Read(Phase),
}

impl std::fmt::Display for TilePhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TilePhase::Reset => f.write_str("reset"),
            TilePhase::Ready(p) => write!(f, "ready{p}"),
            TilePhase::Read(p) => write!(f, "read{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileState {
    pub id: u64,
    /// Top-left unit (x, y).
    pub origin: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    /// Per-unit FD capacitance, row-major.
    pub caps: Vec<f64>,
    /// Per-unit FD voltage, row-major.
    pub volts: Vec<f64>,
    pub phase: TilePhase,
    pub saturated: bool,
}

impl TileState {
    /// A freshly reset tile with every unit at the nominal capacitance.
    pub fn new(id: u64, origin: (usize, usize), rows: usize, cols: usize, cfg: &ValidatedConfig) -> Self {
        Self::with_caps(id, origin, rows, cols, vec![cfg.c_fd; rows * cols], cfg)
    }

    pub fn with_caps(
        id: u64,
        origin: (usize, usize),
        rows: usize,
        cols: usize,
        caps: Vec<f64>,
        cfg: &ValidatedConfig,
    ) -> Self {
        assert_eq!(caps.len(), rows * cols, "one capacitance per unit");
        Self {
            id,
            origin,
            rows,
            cols,
            volts: vec![cfg.v_rst; rows * cols],
            caps,
            phase: TilePhase::Reset,
            saturated: false,
        }
    }

    pub fn units(&self) -> usize {
        self.rows * self.cols
    }

    pub fn total_capacitance(&self) -> f64 {
        self.caps.iter().sum()
    }

    /// Voltage of the spliced node (charge-weighted mean of the units).
    pub fn shared_voltage(&self) -> f64 {
        splice_voltages(&self.volts, &self.caps)
    }

    pub fn total_charge(&self) -> f64 {
        self.caps.iter().zip(&self.volts).map(|(c, v)| c * v).sum()
    }

    /// Unit coordinates (x, y) covered by this tile.
    pub fn unit_coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (ox, oy) = self.origin;
        (0..self.rows).flat_map(move |dy| (0..self.cols).map(move |dx| (ox + dx, oy + dy)))
    }
}

/// Force every unit to `v_rst`.
pub fn reset_tile(mut t: TileState, cfg: &ValidatedConfig) -> TileState {
    t.volts.iter_mut().for_each(|v| *v = cfg.v_rst);
    t.phase = TilePhase::Reset;
    t.saturated = false;
    t
}

/// Voltage after connecting nodes in parallel: `sum(C_j V_j) / sum(C_j)`.
pub fn splice_voltages(unit_voltages: &[f64], unit_caps: &[f64]) -> f64 {
    assert!(
        !unit_voltages.is_empty() && unit_voltages.len() == unit_caps.len(),
        "splice needs equal-length, non-empty inputs"
    );
    let q: f64 = unit_voltages.iter().zip(unit_caps).map(|(v, c)| v * c).sum();
    let c: f64 = unit_caps.iter().sum();
    q / c
}

/// Timing parameters of one exposure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureParams {
    /// Seconds of exposure per weight LSB.
    pub k_expo: f64,
    /// PWM time step; `None` integrates the exact window `k * w`.
    pub pwm_tick: Option<f64>,
    /// Charge is held on the node until this time after the exposure start.
    /// Defaults to the longest possible window, `128 * k`.
    pub window: f64,
    /// Extra hold before readout.
    pub hold: f64,
    pub leakage: bool,
}

impl ExposureParams {
    pub fn new(k_expo: f64) -> Self {
        Self {
            k_expo,
            pwm_tick: None,
            window: k_expo * MAX_WEIGHT_MAGNITUDE as f64,
            hold: 0.0,
            leakage: true,
        }
    }

    pub fn from_config(cfg: &ValidatedConfig) -> Self {
        Self::new(cfg.k_expo())
    }

    pub fn without_leakage(mut self) -> Self {
        self.leakage = false;
        self
    }

    /// PWM on-time for a weight magnitude.
    pub fn on_time(&self, magnitude: u8) -> f64 {
        let t = self.k_expo * magnitude as f64;
        match self.pwm_tick {
            Some(tick) if tick > 0.0 => (t / tick).round() * tick,
            _ => t,
        }
    }
}

/// One photodiode's contribution: constant current over its PWM window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdDrive {
    /// Photocurrent plus dark current, amps.
    pub current: f64,
    pub magnitude: u8,
}

/// Expose a reset tile with per-photodiode weights taken from `weights`
/// (a `2*rows x 2*cols` grid aligned with the tile) and currents from the
/// map, adding the configured dark current.
pub fn expose_tile(
    state: TileState,
    phase: Phase,
    weights: &PhaseWeights,
    currents: &PhotocurrentMap,
    cfg: &ValidatedConfig,
    params: &ExposureParams,
) -> Result<TileState> {
    let drives = tile_drives(&state, weights, |x, y| currents.at(x, y) + cfg.i_dark)?;
    expose_with_drives(state, phase, &drives, cfg, params)
}

/// Collect the drives for a tile from a per-photodiode current function.
pub fn tile_drives(
    state: &TileState,
    weights: &PhaseWeights,
    current_at: impl Fn(usize, usize) -> f64,
) -> Result<Vec<PdDrive>> {
    let (h, w) = (2 * state.rows, 2 * state.cols);
    if weights.width() != w || weights.height() != h {
        return Err(Error::DimensionMismatch(format!(
            "tile is {w}x{h} photodiodes, weights are {}x{}",
            weights.width(),
            weights.height()
        )));
    }
    let (ox, oy) = (2 * state.origin.0, 2 * state.origin.1);
    let mut drives = Vec::with_capacity(h * w);
    for py in 0..h {
        for px in 0..w {
            drives.push(PdDrive {
                current: current_at(ox + px, oy + py),
                magnitude: weights.at(py, px),
            });
        }
    }
    Ok(drives)
}

/// Expose a reset tile given explicit photodiode drives.
///
/// All unit nodes are spliced for the whole window, so the tile ends at a
/// single shared voltage. Results below `v_min` are clamped and flagged.
pub fn expose_with_drives(
    mut state: TileState,
    phase: Phase,
    drives: &[PdDrive],
    cfg: &ValidatedConfig,
    params: &ExposureParams,
) -> Result<TileState> {
    if state.phase != TilePhase::Reset {
        return Err(Error::InvalidPhase {
            tile: state.id,
            phase: state.phase.to_string(),
        });
    }
    let c_total = state.total_capacitance();
    let leak_conductance = if params.leakage && cfg.r_leak.is_finite() {
        state.units() as f64 / cfg.r_leak
    } else {
        0.0
    };
    let v0 = state.shared_voltage();

    let mut windows: Vec<(f64, f64)> = drives
        .iter()
        .map(|d| (params.on_time(d.magnitude), d.current))
        .filter(|(t, _)| *t > 0.0)
        .collect();
    windows.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut v = v0;
    let mut active: f64 = windows.iter().map(|(_, i)| i).sum();
    let mut t_prev = 0.0;
    let mut idx = 0;
    while idx < windows.len() {
        let t_end = windows[idx].0;
        v = discharge(v, active, t_end - t_prev, c_total, leak_conductance);
        while idx < windows.len() && windows[idx].0 == t_end {
            active -= windows[idx].1;
            idx += 1;
        }
        if idx == windows.len() {
            active = 0.0;
        }
        t_prev = t_end;
    }
    let hold = (params.window - t_prev).max(0.0) + params.hold;
    v = discharge(v, 0.0, hold, c_total, leak_conductance);

    state.saturated = v < cfg.v_min;
    let v = v.max(cfg.v_min);
    state.volts.iter_mut().for_each(|u| *u = v);
    state.phase = TilePhase::Ready(phase);
    Ok(state)
}

/// Advance a node of capacitance `c` drained by current `j` and leakage
/// conductance `g` (towards 0 V) for `dt` seconds.
fn discharge(v: f64, j: f64, dt: f64, c: f64, g: f64) -> f64 {
    if dt <= 0.0 {
        return v;
    }
    if g > 0.0 {
        let v_inf = -j / g;
        // v + (v_inf - v) * (1 - exp(-dt/tau)), written with expm1 so the tiny
        // leakage step keeps full precision.
        v - (v_inf - v) * (-dt * g / c).exp_m1()
    } else {
        v - j * dt / c
    }
}

/// Exposure constant that puts the worst-case drop at 90% of the swing.
///
/// `worst_drop_per_lsb` is the largest `sum(I w) / (n C)` over all tiles and
/// phases, i.e. the drop in volts per second-per-LSB of `k`.
pub fn auto_exposure_constant(worst_drop_per_lsb: f64, cfg: &ValidatedConfig) -> f64 {
    if worst_drop_per_lsb > 0.0 && worst_drop_per_lsb.is_finite() {
        AUTO_EXPOSURE_HEADROOM * cfg.swing() / worst_drop_per_lsb
    } else {
        cfg.k_expo()
    }
}
