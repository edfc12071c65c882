//! Temporal noise, fixed-pattern noise and FD capacitance mismatch.
//!
//! Fixed-pattern draws (capacitances, PRNU gains, DSNU dark currents, readout
//! offsets) belong to a [`SensorInstance`] and are drawn once per seed.
//! Temporal draws (reset, shot, read) come from a fresh stream per
//! `(seed, tile, event)`, so results do not depend on evaluation order.
//!
//! None of the default magnitudes are measured values; they are placeholders
//! in a plausible range and every one is configurable through `noise.*` keys.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{parse_f64, ConfigEntries, ValidatedConfig};
use crate::error::{Error, Result};
use crate::pixel::TileState;

pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Mismatch draws beyond this many sigmas are redrawn.
pub const MISMATCH_TRUNCATION: f64 = 4.0;
/// Smallest capacitance a mismatch draw may produce, as a fraction of nominal.
pub const MISMATCH_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Poisson noise on the integrated electrons.
    pub shot: bool,
    /// kT/C noise on every reset.
    pub reset: bool,
    /// Read noise per conversion, volts rms.
    pub read_sigma: f64,
    /// Per-photodiode dark current offset, amps rms.
    pub dsnu_sigma: f64,
    /// Per-photodiode gain error, fraction rms.
    pub prnu_sigma: f64,
    /// Per-unit readout offset, volts rms. Identical for both phases.
    pub offset_sigma: f64,
    /// FD capacitance spread, fraction of nominal.
    pub mismatch_sigma: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            shot: true,
            reset: true,
            read_sigma: 0.25e-3,
            dsnu_sigma: 0.1e-15,
            prnu_sigma: 0.01,
            offset_sigma: 1.0e-3,
            mismatch_sigma: 0.0,
            temperature: 300.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    /// Every source disabled.
    pub fn off() -> Self {
        Self {
            shot: false,
            reset: false,
            read_sigma: 0.0,
            dsnu_sigma: 0.0,
            prnu_sigma: 0.0,
            offset_sigma: 0.0,
            mismatch_sigma: 0.0,
            ..Default::default()
        }
    }

    pub fn is_off(&self) -> bool {
        !self.shot && !self.reset && self.has_no_fpn() && self.read_sigma == 0.0
    }

    fn has_no_fpn(&self) -> bool {
        self.dsnu_sigma == 0.0 && self.prnu_sigma == 0.0 && self.offset_sigma == 0.0 && self.mismatch_sigma == 0.0
    }

    /// Apply `noise.*` keys from a config file on top of `self`.
    pub fn apply_entries(mut self, entries: &ConfigEntries) -> Result<Self> {
        let mut errors = Vec::new();
        for (key, (value, line)) in &entries.0 {
            let Some(name) = key.strip_prefix("noise.") else {
                continue;
            };
            let res = match name {
                "shot" => parse_switch(value).map(|x| self.shot = x),
                "reset" => parse_switch(value).map(|x| self.reset = x),
                "read_sigma" => parse_f64(value).map(|x| self.read_sigma = x),
                "dsnu_sigma" => parse_f64(value).map(|x| self.dsnu_sigma = x),
                "prnu_sigma" => parse_f64(value).map(|x| self.prnu_sigma = x),
                "offset_sigma" => parse_f64(value).map(|x| self.offset_sigma = x),
                "mismatch_sigma" => parse_f64(value).map(|x| self.mismatch_sigma = x),
                "temperature" => parse_f64(value).map(|x| self.temperature = x),
                "seed" => value
                    .parse()
                    .map(|x| self.seed = x)
                    .map_err(|_| format!("`{value}` is not a seed")),
                _ => Err(format!("unknown key `{key}`")),
            };
            if let Err(e) = res {
                errors.push(format!("line {line}: {e}"));
            }
        }
        errors.extend(self.violations());
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(errors))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("noise.read_sigma", self.read_sigma),
            ("noise.dsnu_sigma", self.dsnu_sigma),
            ("noise.prnu_sigma", self.prnu_sigma),
            ("noise.offset_sigma", self.offset_sigma),
            ("noise.mismatch_sigma", self.mismatch_sigma),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                v.push(format!("{name} must be finite and >= 0 (got {x})"));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            v.push(format!("noise.temperature must be > 0 (got {})", self.temperature));
        }
        v
    }
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("`{s}` is not on/off")),
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and labels.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix(seed), |acc, &l| mix(acc ^ mix(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

/// Temporal events a tile goes through, used to label RNG streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    ResetPositive = 1,
    ExposePositive = 2,
    ReadPositive = 3,
    ResetNegative = 4,
    ExposeNegative = 5,
    ReadNegative = 6,
    Differential = 7,
}

/// Fixed-pattern state of one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorInstance {
    /// Per-unit FD capacitance, row-major over units.
    pub caps: Vec<f64>,
    /// Per-photodiode photocurrent gain.
    pub gain: Vec<f64>,
    /// Per-photodiode dark current, amps.
    pub dark: Vec<f64>,
    /// Per-unit readout offset, volts.
    pub offset: Vec<f64>,
    unit_width: usize,
    width_px: usize,
}

impl SensorInstance {
    /// A perfectly uniform sensor.
    pub fn ideal(cfg: &ValidatedConfig) -> Self {
        let units = cfg.unit_width() * cfg.unit_height();
        let pixels = cfg.width_px * cfg.height_px;
        Self {
            caps: vec![cfg.c_fd; units],
            gain: vec![1.0; pixels],
            dark: vec![cfg.i_dark; pixels],
            offset: vec![0.0; units],
            unit_width: cfg.unit_width(),
            width_px: cfg.width_px,
        }
    }

    /// Draw every fixed pattern from `model.seed`.
    pub fn sample(cfg: &ValidatedConfig, model: &NoiseModel) -> Self {
        let mut s = Self::ideal(cfg);
        s.caps = apply_mismatch(cfg, model.mismatch_sigma, derive_seed(model.seed, &[0xC0]));
        if model.prnu_sigma > 0.0 {
            let mut rng = stream(model.seed, &[0x9A]);
            for g in &mut s.gain {
                let z: f64 = rng.sample(StandardNormal);
                *g = (1.0 + model.prnu_sigma * z).max(0.0);
            }
        }
        if model.dsnu_sigma > 0.0 {
            let mut rng = stream(model.seed, &[0xD5]);
            for d in &mut s.dark {
                let z: f64 = rng.sample(StandardNormal);
                *d = (*d + model.dsnu_sigma * z).max(0.0);
            }
        }
        if model.offset_sigma > 0.0 {
            let mut rng = stream(model.seed, &[0x0F]);
            for o in &mut s.offset {
                let z: f64 = rng.sample(StandardNormal);
                *o = model.offset_sigma * z;
            }
        }
        s
    }

    pub fn with_caps(mut self, caps: Vec<f64>) -> Self {
        assert_eq!(caps.len(), self.caps.len(), "one capacitance per unit");
        self.caps = caps;
        self
    }

    pub fn unit_cap(&self, x: usize, y: usize) -> f64 {
        self.caps[y * self.unit_width + x]
    }

    pub fn unit_offset(&self, x: usize, y: usize) -> f64 {
        self.offset[y * self.unit_width + x]
    }

    /// Effective current of photodiode (x, y) given its photocurrent.
    pub fn pd_current(&self, x: usize, y: usize, photo: f64) -> f64 {
        let i = y * self.width_px + x;
        photo * self.gain[i] + self.dark[i]
    }

    /// Readout offset seen by a tile: the capacitance-weighted mean of its
    /// units' offsets, as the spliced node averages them.
    pub fn tile_offset(&self, t: &TileState) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (x, y) in t.unit_coords() {
            let c = self.unit_cap(x, y);
            num += c * self.unit_offset(x, y);
            den += c;
        }
        num / den
    }
}

/// kT/C reset noise on every unit of a freshly reset tile.
pub fn apply_reset_noise<R: Rng>(t: &mut TileState, model: &NoiseModel, rng: &mut R) {
    if !model.reset {
        return;
    }
    for (v, c) in t.volts.iter_mut().zip(&t.caps) {
        let z: f64 = rng.sample(StandardNormal);
        *v += (BOLTZMANN * model.temperature / c).sqrt() * z;
    }
}

/// Poisson noise on the charge removed during exposure. `v_before` is the
/// shared voltage at the start of exposure.
pub fn apply_shot_noise<R: Rng>(t: &mut TileState, v_before: f64, model: &NoiseModel, rng: &mut R) {
    if !model.shot || t.saturated {
        return;
    }
    let c = t.total_capacitance();
    let v = t.shared_voltage();
    let electrons = (v_before - v) * c / ELEMENTARY_CHARGE;
    if electrons <= 0.0 {
        return;
    }
    let n = poisson(electrons, rng);
    let noisy = v_before - n * ELEMENTARY_CHARGE / c;
    t.volts.iter_mut().for_each(|u| *u = noisy);
}

fn poisson<R: Rng>(lambda: f64, rng: &mut R) -> f64 {
    match Poisson::new(lambda) {
        Ok(p) => p.sample(rng),
        // Beyond the sampler's range the normal limit is exact enough.
        Err(_) => {
            let z: f64 = rng.sample(StandardNormal);
            (lambda + lambda.sqrt() * z).round().max(0.0)
        }
    }
}

/// Voltage presented to the ADC: the shared node plus the fixed readout offset
/// and fresh read noise.
pub fn read_voltage<R: Rng>(t: &TileState, offset: f64, model: &NoiseModel, rng: &mut R) -> f64 {
    let mut v = t.shared_voltage() + offset;
    if model.read_sigma > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        v += model.read_sigma * z;
    }
    v
}

/// Noise power and SNR gain from averaging `r^2` independent units.
pub fn averaging_gain(r: usize, sigma: f64) -> (f64, f64) {
    let n = (r * r) as f64;
    (sigma * sigma / n, n)
}

/// Per-unit capacitances drawn from `N(c_fd, (sigma_c c_fd)^2)`, redrawn
/// beyond 4 sigma and floored at `0.1 c_fd`.
pub fn apply_mismatch(cfg: &ValidatedConfig, sigma_c: f64, seed: u64) -> Vec<f64> {
    let n = cfg.unit_width() * cfg.unit_height();
    let c = cfg.c_fd;
    if sigma_c <= 0.0 {
        return vec![c; n];
    }
    let sd = sigma_c * c;
    let dist = Normal::new(c, sd).expect("finite positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let x: f64 = dist.sample(&mut rng);
            if (x - c).abs() <= MISMATCH_TRUNCATION * sd {
                break x.max(MISMATCH_FLOOR * c);
            }
        })
        .collect()
}

/// Additive noise sigma that puts `signal_power` at `target_snr_db` above the
/// noise. An infinite target gives zero.
pub fn inject_target_snr(signal_power: f64, target_snr_db: f64) -> Result<f64> {
    if !(signal_power.is_finite() && signal_power > 0.0) {
        return Err(Error::Input(format!("signal power must be > 0 (got {signal_power})")));
    }
    if target_snr_db.is_nan() {
        return Err(Error::Input("target SNR is NaN".into()));
    }
    Ok((signal_power / 10f64.powf(target_snr_db / 10.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SensorConfig;

    fn cfg() -> ValidatedConfig {
        SensorConfig {
            width_px: 16,
            height_px: 16,
            ..Default::default()
        }
        .validate()
        .unwrap()
    }

    fn var(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn everything_off_is_identity() {
        let c = cfg();
        let m = NoiseModel::off();
        let mut t = TileState::new(0, (0, 0), 3, 3, &c);
        t.volts.iter_mut().for_each(|v| *v = 1.234);
        let before = t.clone();
        let mut rng = stream(1, &[2]);
        apply_reset_noise(&mut t, &m, &mut rng);
        apply_shot_noise(&mut t, 1.8, &m, &mut rng);
        assert_eq!(t, before);
        assert_eq!(read_voltage(&t, 0.0, &m, &mut rng), 1.234);
        assert_eq!(SensorInstance::sample(&c, &m), SensorInstance::ideal(&c));
    }

    #[test]
    fn reset_noise_is_kt_over_c() {
        let c = cfg();
        let m = NoiseModel {
            reset: true,
            ..NoiseModel::off()
        };
        let mut rng = stream(7, &[]);
        let mut samples = Vec::with_capacity(100_000);
        let mut t = TileState::new(0, (0, 0), 1, 1, &c);
        for _ in 0..100_000 {
            t.volts[0] = c.v_rst;
            apply_reset_noise(&mut t, &m, &mut rng);
            samples.push(t.volts[0]);
        }
        let (_, v) = var(&samples);
        let want = BOLTZMANN * 300.0 / c.c_fd;
        assert!((v / want - 1.0).abs() < 0.05, "{v} vs {want}");
    }

    #[test]
    fn shot_noise_variance_tracks_signal() {
        let c = cfg();
        let m = NoiseModel {
            shot: true,
            ..NoiseModel::off()
        };
        let mut rng = stream(3, &[]);
        let mut measure = |drop: f64| {
            let xs: Vec<f64> = (0..20_000)
                .map(|_| {
                    let mut t = TileState::new(0, (0, 0), 3, 3, &c);
                    t.volts.iter_mut().for_each(|v| *v = c.v_rst - drop);
                    apply_shot_noise(&mut t, c.v_rst, &m, &mut rng);
                    t.shared_voltage()
                })
                .collect();
            var(&xs).1
        };
        let (a, b) = (measure(0.05), measure(0.2));
        assert!((b / a / 4.0 - 1.0).abs() < 0.05, "ratio {}", b / a);
        let electrons = 0.2 * 9.0 * c.c_fd / ELEMENTARY_CHARGE;
        let want = electrons * (ELEMENTARY_CHARGE / (9.0 * c.c_fd)).powi(2);
        assert!((b / want - 1.0).abs() < 0.05);
    }

    #[test]
    fn averaging_examples() {
        assert_eq!(averaging_gain(3, 3.0), (1.0, 9.0));
        assert_eq!(averaging_gain(1, 2.0), (4.0, 1.0));
    }

    #[test]
    fn averaging_monte_carlo() {
        let mut rng = stream(11, &[]);
        let sigma = 2.0;
        let means: Vec<f64> = (0..50_000)
            .map(|_| {
                (0..9)
                    .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                    .sum::<f64>()
                    / 9.0
            })
            .collect();
        let (_, v) = var(&means);
        let (want, _) = averaging_gain(3, sigma);
        assert!((v / want - 1.0).abs() < 0.05);
    }

    #[test]
    fn mismatch_statistics() {
        let c = SensorConfig {
            width_px: 632,
            height_px: 634,
            ..Default::default()
        }
        .validate()
        .unwrap();
        assert!(apply_mismatch(&c, 0.0, 1).iter().all(|&x| x == c.c_fd));
        let caps = apply_mismatch(&c, 0.05, 1);
        assert!(caps.len() >= 100_000);
        let (m, v) = var(&caps);
        let cv = v.sqrt() / m;
        assert!((0.045..=0.055).contains(&cv), "{cv}");
        assert!(caps.iter().all(|&x| (x - c.c_fd).abs() <= 4.0 * 0.05 * c.c_fd + 1e-30));
        assert_eq!(caps, apply_mismatch(&c, 0.05, 1));
        assert_ne!(caps, apply_mismatch(&c, 0.05, 2));
    }

    #[test]
    fn mismatch_floor() {
        let caps = apply_mismatch(&cfg(), 2.0, 5);
        assert!(caps.iter().all(|&x| x >= 0.1 * cfg().c_fd));
    }

    #[test]
    fn target_snr_definition() {
        assert_eq!(inject_target_snr(4.0, 0.0).unwrap(), 2.0);
        assert!((inject_target_snr(1.0, 20.0).unwrap().powi(2) - 0.01).abs() < 1e-15);
        assert_eq!(inject_target_snr(1.0, f64::INFINITY).unwrap(), 0.0);
        assert!(inject_target_snr(0.0, 10.0).is_err());
    }

    #[test]
    fn measured_snr_near_target() {
        let mut rng = stream(5, &[]);
        let signal: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = signal.iter().map(|s| s * s).sum::<f64>() / signal.len() as f64;
        for snr in [0.0, 10.0, 20.0, 40.0] {
            let sigma = inject_target_snr(p, snr).unwrap();
            let noise: Vec<f64> = (0..signal.len())
                .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let pn = noise.iter().map(|n| n * n).sum::<f64>() / noise.len() as f64;
            let measured = 10.0 * (p / pn).log10();
            assert!((measured - snr).abs() < 0.5, "{measured} vs {snr}");
        }
    }

    #[test]
    fn fixed_pattern_is_seeded() {
        let c = cfg();
        let m = NoiseModel {
            seed: 9,
            mismatch_sigma: 0.1,
            ..Default::default()
        };
        assert_eq!(SensorInstance::sample(&c, &m), SensorInstance::sample(&c, &m));
        let other = NoiseModel { seed: 10, ..m.clone() };
        assert_ne!(SensorInstance::sample(&c, &m), SensorInstance::sample(&c, &other));
    }

    #[test]
    fn streams_differ_by_label() {
        let a: u64 = stream(1, &[2, 3]).random();
        let b: u64 = stream(1, &[3, 2]).random();
        let c: u64 = stream(1, &[2, 3]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn noise_keys_parse() {
        let e =
            ConfigEntries::parse("noise.shot = off\nnoise.read_sigma = 1e-3\nnoise.seed = 42\nwidth_px = 8").unwrap();
        let m = NoiseModel::default().apply_entries(&e).unwrap();
        assert!(!m.shot);
        assert_eq!(m.read_sigma, 1e-3);
        assert_eq!(m.seed, 42);
        let bad = ConfigEntries::parse("noise.read_sigma = -1\nnoise.nope = 1").unwrap();
        let Err(Error::InvalidConfig(v)) = NoiseModel::default().apply_entries(&bad) else {
            panic!()
        };
        assert_eq!(v.len(), 2);
    }
}
