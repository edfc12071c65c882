//! Sensor configuration and the flat `key = value` config file format.
//!
//! The file format is one `key = value` pair per line in SI units. `#` starts
//! a comment. Keys prefixed `noise.` are routed to [`crate::noise::NoiseModel`].
//!
//! ```text
//! # 128x128 array with the default FD node
//! width_px   = 128
//! height_px  = 128
//! c_fd       = 22.2e-15   # farads
//! r_leak     = 8.07e15    # ohms, `inf` disables leakage
//! k_expo     = auto       # seconds per weight LSB; auto = t_expo_max / 128
//! ```

use std::collections::BTreeMap;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest weight magnitude; the longest PWM window is `128 * k_expo`.
pub const MAX_WEIGHT_MAGNITUDE: u32 = 128;

/// Default maximum exposure per PWM window: 1 / (60 fps * 64 channels * 10
/// equivalent exposures), printed as 26.04 us.
pub const DEFAULT_T_EXPO_MAX: f64 = 1.0 / 38_400.0;

/// Physical and timing constants of the modeled sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub width_px: usize,
    pub height_px: usize,
    /// FD capacitance per pixel unit, farads.
    pub c_fd: f64,
    /// FD leakage resistance, ohms. `f64::INFINITY` disables leakage.
    pub r_leak: f64,
    pub v_rst: f64,
    /// Lowest usable FD voltage; anything below saturates.
    pub v_min: f64,
    /// Photodiode responsivity, A/W.
    pub responsivity: f64,
    /// Photodiode area, m^2.
    pub pd_area: f64,
    /// Dark current per photodiode, amps.
    pub i_dark: f64,
    pub t_rst: f64,
    /// Per-group readout time. `None` derives `1 / f_adc`.
    pub t_rd: Option<f64>,
    /// Seconds of exposure per weight LSB. `None` derives `t_expo_max / 128`.
    pub k_expo: Option<f64>,
    pub t_expo_max: f64,
    pub adc_bits: u32,
    pub f_adc: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            width_px: 128,
            height_px: 128,
            c_fd: 22.2e-15,
            r_leak: 8.07e15,
            v_rst: 1.8,
            v_min: 0.4,
            responsivity: 0.35,
            pd_area: 1.0e-10,
            i_dark: 1.0e-15,
            t_rst: 100e-9,
            t_rd: None,
            k_expo: None,
            t_expo_max: DEFAULT_T_EXPO_MAX,
            adc_bits: 10,
            f_adc: 330e3,
        }
    }
}

impl SensorConfig {
    /// Check every invariant and resolve derived fields.
    ///
    /// All violations are collected so a bad file is reported in one pass.
    pub fn validate(self) -> Result<ValidatedConfig> {
        let mut v = Vec::new();

        if self.width_px < 4 || !self.width_px.is_multiple_of(2) {
            v.push(format!("width_px must be even and >= 4 (got {})", self.width_px));
        }
        if self.height_px < 4 || !self.height_px.is_multiple_of(2) {
            v.push(format!("height_px must be even and >= 4 (got {})", self.height_px));
        }

        let finite_positive = [
            ("c_fd", self.c_fd),
            ("responsivity", self.responsivity),
            ("pd_area", self.pd_area),
            ("t_rst", self.t_rst),
            ("t_expo_max", self.t_expo_max),
            ("f_adc", self.f_adc),
        ];
        for (name, value) in finite_positive {
            if !(value.is_finite() && value > 0.0) {
                v.push(format!("{name} must be finite and > 0 (got {value})"));
            }
        }
        if self.r_leak.is_nan() || self.r_leak <= 0.0 {
            v.push(format!("r_leak must be > 0 (got {})", self.r_leak));
        }
        if !(self.i_dark.is_finite() && self.i_dark >= 0.0) {
            v.push(format!("i_dark must be finite and >= 0 (got {})", self.i_dark));
        }
        if !(self.v_min.is_finite() && self.v_min >= 0.0) {
            v.push(format!("v_min must be finite and >= 0 (got {})", self.v_min));
        }
        if !self.v_rst.is_finite() || self.v_rst <= self.v_min {
            v.push(format!(
                "v_rst must exceed v_min (got v_rst = {}, v_min = {})",
                self.v_rst, self.v_min
            ));
        }
        if let Some(t_rd) = self.t_rd {
            if !(t_rd.is_finite() && t_rd > 0.0) {
                v.push(format!("t_rd must be finite and > 0 (got {t_rd})"));
            }
        }
        if let Some(k) = self.k_expo {
            if !(k.is_finite() && k > 0.0) {
                v.push(format!("k_expo must be finite and > 0 (got {k})"));
            }
        }
        if !(1..=16).contains(&self.adc_bits) {
            v.push(format!("adc_bits must be in 1..=16 (got {})", self.adc_bits));
        }

        if !v.is_empty() {
            return Err(Error::InvalidConfig(v));
        }

        let t_rd = self.t_rd.unwrap_or(1.0 / self.f_adc);
        let k_expo = self.k_expo.unwrap_or(self.t_expo_max / MAX_WEIGHT_MAGNITUDE as f64);
        Ok(ValidatedConfig {
            unit_width: self.width_px / 2,
            unit_height: self.height_px / 2,
            t_rd,
            k_expo,
            inner: self,
        })
    }

    /// Apply `key = value` entries on top of `self`. Unknown non-`noise.` keys
    /// are rejected.
    pub fn apply_entries(mut self, entries: &ConfigEntries) -> Result<Self> {
        let mut errors = Vec::new();
        for (key, (value, line)) in &entries.0 {
            if key.starts_with("noise.") {
                continue;
            }
            let res = match key.as_str() {
                "width_px" => parse_usize(value).map(|x| self.width_px = x),
                "height_px" => parse_usize(value).map(|x| self.height_px = x),
                "c_fd" => parse_f64(value).map(|x| self.c_fd = x),
                "r_leak" => parse_f64(value).map(|x| self.r_leak = x),
                "v_rst" => parse_f64(value).map(|x| self.v_rst = x),
                "v_min" => parse_f64(value).map(|x| self.v_min = x),
                "responsivity" => parse_f64(value).map(|x| self.responsivity = x),
                "pd_area" => parse_f64(value).map(|x| self.pd_area = x),
                "i_dark" => parse_f64(value).map(|x| self.i_dark = x),
                "t_rst" => parse_f64(value).map(|x| self.t_rst = x),
                "t_rd" => parse_auto(value).map(|x| self.t_rd = x),
                "k_expo" => parse_auto(value).map(|x| self.k_expo = x),
                "t_expo_max" => parse_f64(value).map(|x| self.t_expo_max = x),
                "adc_bits" => parse_usize(value).map(|x| self.adc_bits = x as u32),
                "f_adc" => parse_f64(value).map(|x| self.f_adc = x),
                _ => Err(format!("unknown key `{key}`")),
            };
            if let Err(e) = res {
                errors.push(format!("line {line}: {e}"));
            }
        }
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(errors))
        }
    }

    /// Render as a config file that [`ConfigEntries::parse`] reads back.
    pub fn to_config_text(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(|| "auto".to_string(), |v| format!("{v:e}"));
        format!(
            "width_px = {}\nheight_px = {}\nc_fd = {:e}\nr_leak = {:e}\nv_rst = {}\nv_min = {}\n\
             responsivity = {}\npd_area = {:e}\ni_dark = {:e}\nt_rst = {:e}\nt_rd = {}\n\
             k_expo = {}\nt_expo_max = {:e}\nadc_bits = {}\nf_adc = {:e}\n",
            self.width_px,
            self.height_px,
            self.c_fd,
            self.r_leak,
            self.v_rst,
            self.v_min,
            self.responsivity,
            self.pd_area,
            self.i_dark,
            self.t_rst,
            opt(self.t_rd),
            opt(self.k_expo),
            self.t_expo_max,
            self.adc_bits,
            self.f_adc
        )
    }
}

/// A configuration that passed [`SensorConfig::validate`], with derived fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    inner: SensorConfig,
    unit_width: usize,
    unit_height: usize,
    t_rd: f64,
    k_expo: f64,
}

impl Deref for ValidatedConfig {
    type Target = SensorConfig;
    fn deref(&self) -> &SensorConfig {
        &self.inner
    }
}

impl ValidatedConfig {
    pub fn unit_width(&self) -> usize {
        self.unit_width
    }
    pub fn unit_height(&self) -> usize {
        self.unit_height
    }
    pub fn t_rd(&self) -> f64 {
        self.t_rd
    }
    pub fn k_expo(&self) -> f64 {
        self.k_expo
    }
    /// Longest PWM window at the configured exposure constant.
    pub fn t_expo(&self) -> f64 {
        self.k_expo * MAX_WEIGHT_MAGNITUDE as f64
    }
    /// Usable FD swing, `v_rst - v_min`.
    pub fn swing(&self) -> f64 {
        self.inner.v_rst - self.inner.v_min
    }
    pub fn config(&self) -> &SensorConfig {
        &self.inner
    }
    /// Same configuration with a different exposure constant.
    pub fn with_k_expo(&self, k_expo: f64) -> Result<ValidatedConfig> {
        SensorConfig {
            k_expo: Some(k_expo),
            ..self.inner.clone()
        }
        .validate()
    }
}

/// Parsed `key = value` lines, keyed by name with the source line number.
#[derive(Debug, Clone, Default)]
pub struct ConfigEntries(pub BTreeMap<String, (String, usize)>);

impl ConfigEntries {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut errors = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {line_no}: expected `key = value`"));
                continue;
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                errors.push(format!("line {line_no}: empty key or value"));
                continue;
            }
            if map.insert(key.clone(), (value, line_no)).is_some() {
                errors.push(format!("line {line_no}: duplicate key `{key}`"));
            }
        }
        if errors.is_empty() {
            Ok(Self(map))
        } else {
            Err(Error::InvalidConfig(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.0.get(key).map(|(v, l)| (v.as_str(), *l))
    }
}

pub(crate) fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("`{s}` is not a number"))
}

fn parse_usize(s: &str) -> std::result::Result<usize, String> {
    s.parse::<usize>()
        .map_err(|_| format!("`{s}` is not a non-negative integer"))
}

fn parse_auto(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = SensorConfig::default().validate().unwrap();
        assert_eq!(cfg.unit_width(), 64);
        assert_eq!(cfg.unit_height(), 64);
        assert_eq!(cfg.c_fd, 22.2e-15);
        assert_eq!(cfg.v_rst, 1.8);
        assert_eq!(cfg.responsivity, 0.35);
        assert!((cfg.t_expo() - 26.041_666e-6).abs() < 1e-11);
        assert!((cfg.t_rd() - 1.0 / 330e3).abs() < 1e-15);
    }

    #[test]
    fn odd_width_rejected() {
        let err = SensorConfig {
            width_px: 127,
            ..Default::default()
        }
        .validate()
        .unwrap_err();
        match err {
            Error::InvalidConfig(v) => {
                assert_eq!(v.len(), 1);
                assert!(v[0].contains("width_px"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reset_below_min_rejected() {
        let err = SensorConfig {
            v_rst: 0.3,
            v_min: 0.4,
            ..Default::default()
        }
        .validate()
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(ref v) if v.iter().any(|m| m.contains("v_rst"))));
    }

    #[test]
    fn every_violation_listed() {
        let err = SensorConfig {
            width_px: 3,
            height_px: 7,
            c_fd: -1.0,
            adc_bits: 0,
            f_adc: f64::NAN,
            ..Default::default()
        }
        .validate()
        .unwrap_err();
        let Error::InvalidConfig(v) = err else { panic!() };
        assert_eq!(v.len(), 5, "{v:?}");
    }

    #[test]
    fn infinite_leak_allowed() {
        let cfg = SensorConfig {
            r_leak: f64::INFINITY,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_text_round_trips() {
        let cfg = SensorConfig {
            k_expo: Some(1.5e-7),
            width_px: 32,
            ..Default::default()
        };
        let entries = ConfigEntries::parse(&cfg.to_config_text()).unwrap();
        let back = SensorConfig::default().apply_entries(&entries).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_reports_bad_lines() {
        let text = "width_px = 64\nbogus line\nc_fd = abc # comment\nwhat = 1\n";
        let entries = ConfigEntries::parse("width_px = 64\nc_fd = abc # c\nwhat = 1\n").unwrap();
        let err = SensorConfig::default().apply_entries(&entries).unwrap_err();
        let Error::InvalidConfig(v) = err else { panic!() };
        assert_eq!(v.len(), 2);
        assert!(ConfigEntries::parse(text).is_err());
    }

    #[test]
    fn noise_keys_pass_through() {
        let entries = ConfigEntries::parse("noise.read_sigma = 1e-3\nheight_px = 16").unwrap();
        let cfg = SensorConfig::default().apply_entries(&entries).unwrap();
        assert_eq!(cfg.height_px, 16);
    }
}
