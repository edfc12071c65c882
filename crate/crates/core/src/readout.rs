//! Column ADC, two-phase subtraction and group readout.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::kernel::Phase;
use crate::pixel::{TilePhase, TileState};
use crate::scheduler::Step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdcMode {
    /// Round-to-nearest quantization.
    Model,
    /// Pass voltages through unchanged.
    Bypass,
}

impl FromStr for AdcMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(AdcMode::Model),
            "bypass" => Ok(AdcMode::Bypass),
            other => Err(Error::Input(format!(
                "unknown adc mode `{other}` (expected model or bypass)"
            ))),
        }
    }
}

impl std::fmt::Display for AdcMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdcMode::Model => "model",
            AdcMode::Bypass => "bypass",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcModel {
    pub bits: u32,
    pub v_lo: f64,
    pub v_hi: f64,
    pub f_adc: f64,
    pub mode: AdcMode,
}

/// A quantized sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Code {
    pub value: u32,
    /// The input was outside the full-scale range.
    pub clipped: bool,
}

impl AdcModel {
    pub fn from_config(cfg: &ValidatedConfig, mode: AdcMode) -> Self {
        Self {
            bits: cfg.adc_bits,
            v_lo: cfg.v_min,
            v_hi: cfg.v_rst,
            f_adc: cfg.f_adc,
            mode,
        }
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Volts per code step.
    pub fn lsb(&self) -> f64 {
        (self.v_hi - self.v_lo) / self.max_code() as f64
    }

    pub fn quantize(&self, v: f64) -> Code {
        let max = self.max_code() as f64;
        let x = ((v - self.v_lo) / (self.v_hi - self.v_lo) * max).round();
        Code {
            value: x.clamp(0.0, max) as u32,
            clipped: !(0.0..=max).contains(&x),
        }
    }

    pub fn dequantize(&self, code: u32) -> f64 {
        self.v_lo + code as f64 * self.lsb()
    }

    /// Voltage as seen after conversion: quantized and reconstructed, or
    /// unchanged in bypass mode.
    pub fn convert(&self, v: f64) -> Sample {
        match self.mode {
            AdcMode::Bypass => Sample { volts: v, code: None },
            AdcMode::Model => {
                let c = self.quantize(v);
                Sample {
                    volts: self.dequantize(c.value),
                    code: Some(c),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub volts: f64,
    pub code: Option<Code>,
}

/// One tile's converted result for one phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Readout {
    pub tile: u64,
    pub phase: Phase,
    pub sample: Sample,
}

/// Known scale from differential volts back to `sum(I w)`: `n C / k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacScale {
    pub units: usize,
    pub c_fd: f64,
    pub k_expo: f64,
}

impl MacScale {
    pub fn new(units: usize, cfg: &ValidatedConfig) -> Self {
        Self {
            units,
            c_fd: cfg.c_fd,
            k_expo: cfg.k_expo(),
        }
    }
    pub fn amps_per_volt(&self) -> f64 {
        self.units as f64 * self.c_fd / self.k_expo
    }
}

/// `(U- - U+) * n C / k`, the reconstructed `sum(I w)` including the residual
/// `i_dark * sum(w)` term.
pub fn subtract_phases(neg: &Readout, pos: &Readout, scale: &MacScale) -> Result<f64> {
    if neg.tile != pos.tile || neg.phase != Phase::Negative || pos.phase != Phase::Positive {
        return Err(Error::PhaseMismatch {
            pos: pos.tile,
            neg: neg.tile,
        });
    }
    Ok((neg.sample.volts - pos.sample.volts) * scale.amps_per_volt())
}

/// Residual dark term `i_dark * sum(w)` to subtract when correcting.
pub fn dark_term(i_dark: f64, weight_sum: i64) -> f64 {
    i_dark * weight_sum as f64
}

/// Convert every tile of a group and mark it read. `states` is indexed like
/// `step.tiles`. Reading a group that is not holding a fresh result fails
/// with [`Error::NotReady`] and leaves every state untouched.
pub fn read_group(step: &Step, group: usize, states: &mut [TileState], adc: &AdcModel) -> Result<Vec<Readout>> {
    let g = step.groups.get(group).ok_or_else(|| Error::NotReady {
        group,
        reason: format!("step {} has {} groups", step.index, step.groups.len()),
    })?;
    if states.len() != step.tiles.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} tile states for {} tiles",
            states.len(),
            step.tiles.len()
        )));
    }
    let phase = match g.tiles.first().map(|&i| states[i].phase) {
        Some(TilePhase::Ready(p)) => p,
        Some(other) => {
            return Err(Error::NotReady {
                group,
                reason: format!("tiles are in phase {other}"),
            })
        }
        None => return Ok(Vec::new()),
    };
    if let Some(&i) = g.tiles.iter().find(|&&i| states[i].phase != TilePhase::Ready(phase)) {
        return Err(Error::NotReady {
            group,
            reason: format!("tile {} is in phase {}", states[i].id, states[i].phase),
        });
    }
    let mut out = Vec::with_capacity(g.tiles.len());
    for &i in &g.tiles {
        let st = &mut states[i];
        out.push(Readout {
            tile: st.id,
            phase,
            sample: adc.convert(st.shared_voltage()),
        });
        st.phase = TilePhase::Read(phase);
    }
    Ok(out)
}

/// Raw code dump row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRecord {
    pub step: usize,
    pub group: usize,
    pub column: usize,
    pub code: u32,
}

pub fn codes_csv(records: &[CodeRecord]) -> String {
    let mut out = String::from("step,group,column,code\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.group, r.column, r.code);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SensorConfig;
    use crate::scheduler::{plan_on, Lattice, Policy};
    use proptest::prelude::*;

    fn cfg() -> ValidatedConfig {
        SensorConfig {
            width_px: 16,
            height_px: 16,
            ..Default::default()
        }
        .validate()
        .unwrap()
    }

    fn adc() -> AdcModel {
        AdcModel::from_config(&cfg(), AdcMode::Model)
    }

    #[test]
    fn quantize_examples() {
        let a = adc();
        assert_eq!(a.quantize(1.8).value, 1023);
        assert_eq!(a.quantize(0.4).value, 0);
        assert_eq!(a.quantize(1.1).value, 512);
        assert!(a.quantize(2.0).clipped);
        assert_eq!(a.quantize(-1.0).value, 0);
    }

    #[test]
    fn identical_codes_subtract_to_zero() {
        let s = adc().convert(1.2);
        let neg = Readout {
            tile: 3,
            phase: Phase::Negative,
            sample: s,
        };
        let pos = Readout {
            phase: Phase::Positive,
            ..neg
        };
        assert_eq!(subtract_phases(&neg, &pos, &MacScale::new(9, &cfg())).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_tiles_rejected() {
        let s = adc().convert(1.2);
        let neg = Readout {
            tile: 3,
            phase: Phase::Negative,
            sample: s,
        };
        let pos = Readout {
            tile: 4,
            phase: Phase::Positive,
            sample: s,
        };
        assert!(matches!(
            subtract_phases(&neg, &pos, &MacScale::new(9, &cfg())),
            Err(Error::PhaseMismatch { pos: 4, neg: 3 })
        ));
    }

    #[test]
    fn one_sided_kernel() {
        let c = cfg();
        let a = AdcModel::from_config(&c, AdcMode::Bypass);
        let neg = Readout {
            tile: 0,
            phase: Phase::Negative,
            sample: a.convert(c.v_rst),
        };
        let pos = Readout {
            tile: 0,
            phase: Phase::Positive,
            sample: a.convert(c.v_rst - 0.25),
        };
        let scale = MacScale::new(9, &c);
        let mac = subtract_phases(&neg, &pos, &scale).unwrap();
        assert!((mac - 0.25 * scale.amps_per_volt()).abs() < 1e-12 * mac);
    }

    #[test]
    fn read_group_state_machine() {
        let c = cfg();
        let sched = plan_on(3, 2, &c, Policy::FullCoverage, Lattice::Unit).unwrap();
        let step = &sched.steps[0];
        let mut states: Vec<TileState> = step
            .tiles
            .iter()
            .map(|t| {
                let mut s = TileState::new(t.id, t.origin, t.rows, t.cols, &c);
                s.phase = TilePhase::Ready(Phase::Positive);
                s
            })
            .collect();
        let a = adc();
        let first = read_group(step, 0, &mut states, &a).unwrap();
        assert_eq!(first.len(), step.groups[0].tiles.len());
        assert!(first.iter().all(|r| r.sample.code.unwrap().value == 1023));
        assert!(matches!(
            read_group(step, 0, &mut states, &a),
            Err(Error::NotReady { group: 0, .. })
        ));
    }

    #[test]
    fn codes_dump() {
        let csv = codes_csv(&[CodeRecord {
            step: 1,
            group: 2,
            column: 3,
            code: 512,
        }]);
        assert_eq!(csv, "step,group,column,code\n1,2,3,512\n");
    }

    proptest! {
        #[test]
        fn quantize_monotone(a in 0.0f64..2.2, b in 0.0f64..2.2, bits in 1u32..=16) {
            let mut m = adc();
            m.bits = bits;
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(m.quantize(lo).value <= m.quantize(hi).value);
        }

        #[test]
        fn code_round_trip(code in 0u32..1024) {
            let m = adc();
            prop_assert_eq!(m.quantize(m.dequantize(code)).value, code);
        }
    }
}
