//! Scene ingestion and photodiode currents.
//!
//! Inputs are already-mosaicked RGGB rasters. Within each 2x2 pixel unit the
//! colour planes sit at (row, col) = (0,0) R, (0,1) G1, (1,0) G2, (1,1) B.

use std::path::Path;

use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::feature::grid_to_csv;

/// Luminous efficacy used to approximate W/m^2 from lux at 555 nm.
pub const LUMENS_PER_WATT_555NM: f64 = 683.0;

/// Full-scale illuminance the default `lux_scale` maps code 255 to.
pub const DEFAULT_FULL_SCALE_LUX: f64 = 1500.0;

pub fn lux_to_watts_per_m2(lux: f64) -> f64 {
    lux / LUMENS_PER_WATT_555NM
}

/// Default W/m^2 per full-scale code (about 1500 lux).
pub fn default_lux_scale() -> f64 {
    lux_to_watts_per_m2(DEFAULT_FULL_SCALE_LUX)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColorPlane {
    R,
    G1,
    G2,
    B,
}

impl ColorPlane {
    /// Plane of the photodiode at pixel (x, y).
    pub fn at(x: usize, y: usize) -> Self {
        match (y % 2, x % 2) {
            (0, 0) => ColorPlane::R,
            (0, _) => ColorPlane::G1,
            (_, 0) => ColorPlane::G2,
            _ => ColorPlane::B,
        }
    }

    /// Offset (dx, dy) of this plane inside a unit.
    pub fn offset(self) -> (usize, usize) {
        match self {
            ColorPlane::R => (0, 0),
            ColorPlane::G1 => (1, 0),
            ColorPlane::G2 => (0, 1),
            ColorPlane::B => (1, 1),
        }
    }
}

/// An 8-bit mosaic raster as read from disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub codes: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "raster {width}x{height} needs {} codes, got {}",
                width * height,
                codes.len()
            )));
        }
        Ok(Self { width, height, codes })
    }

    /// Load an 8-bit grayscale PGM or PNG. Colour images are converted to
    /// luma and still treated as a mosaic.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Input(format!("{}: {other}", path.display())),
        })?;
        let gray = img.into_luma8();
        let (w, h) = gray.dimensions();
        Self::new(w as usize, h as usize, gray.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.codes.clone())
            .ok_or_else(|| Error::Internal("raster buffer size".into()))?;
        buf.save(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }
}

/// Optical power density reaching each photodiode, W/m^2.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    width: usize,
    height: usize,
    power: Vec<f64>,
}

impl Scene {
    pub fn new(width: usize, height: usize, power: Vec<f64>) -> Result<Self> {
        if power.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "scene {width}x{height} needs {} values, got {}",
                width * height,
                power.len()
            )));
        }
        if let Some(p) = power.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Input(format!("scene power must be finite and >= 0, got {p}")));
        }
        Ok(Self { width, height, power })
    }

    pub fn uniform(width: usize, height: usize, power: f64) -> Result<Self> {
        Self::new(width, height, vec![power; width * height])
    }

    /// `P_in = code / 255 * lux_scale` for each photodiode.
    pub fn from_raster(raster: &Raster, lux_scale: f64, cfg: &ValidatedConfig) -> Result<Self> {
        if raster.width != cfg.width_px || raster.height != cfg.height_px {
            return Err(Error::DimensionMismatch(format!(
                "raster is {}x{}, sensor is {}x{}",
                raster.width, raster.height, cfg.width_px, cfg.height_px
            )));
        }
        if !(lux_scale.is_finite() && lux_scale > 0.0) {
            return Err(Error::Input(format!("lux_scale must be > 0, got {lux_scale}")));
        }
        let power = raster.codes.iter().map(|&c| c as f64 / 255.0 * lux_scale).collect();
        Self::new(raster.width, raster.height, power)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn power(&self) -> &[f64] {
        &self.power
    }
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.power[y * self.width + x]
    }

    pub fn to_csv(&self) -> String {
        grid_to_csv(self.width, &self.power)
    }
}

/// Per-photodiode photocurrent, amps.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotocurrentMap {
    width: usize,
    height: usize,
    currents: Vec<f64>,
}

impl PhotocurrentMap {
    pub fn new(width: usize, height: usize, currents: Vec<f64>) -> Result<Self> {
        if currents.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "current map {width}x{height} needs {} values, got {}",
                width * height,
                currents.len()
            )));
        }
        if let Some(c) = currents.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(Error::Input(format!("photocurrent must be finite and >= 0, got {c}")));
        }
        Ok(Self {
            width,
            height,
            currents,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn currents(&self) -> &[f64] {
        &self.currents
    }
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.currents[y * self.width + x]
    }
    pub fn plane_at(&self, x: usize, y: usize) -> ColorPlane {
        ColorPlane::at(x, y)
    }

    pub fn transposed(&self) -> Self {
        let mut c = vec![0.0; self.currents.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                c[x * self.height + y] = self.currents[y * self.width + x];
            }
        }
        Self {
            width: self.height,
            height: self.width,
            currents: c,
        }
    }

    pub fn to_csv(&self) -> String {
        grid_to_csv(self.width, &self.currents)
    }
}

/// `I = responsivity * P_in * pd_area` elementwise.
pub fn photocurrents(scene: &Scene, cfg: &ValidatedConfig) -> PhotocurrentMap {
    let gain = cfg.responsivity * cfg.pd_area;
    PhotocurrentMap {
        width: scene.width,
        height: scene.height,
        currents: scene.power.iter().map(|p| gain * p).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SensorConfig;

    fn cfg(w: usize, h: usize) -> ValidatedConfig {
        SensorConfig {
            width_px: w,
            height_px: h,
            ..Default::default()
        }
        .validate()
        .unwrap()
    }

    #[test]
    fn dark_raster_gives_dark_scene() {
        let c = cfg(4, 4);
        let r = Raster::new(4, 4, vec![0; 16]).unwrap();
        let s = Scene::from_raster(&r, 2.0, &c).unwrap();
        assert!(s.power().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn full_scale_raster() {
        let c = cfg(4, 4);
        let r = Raster::new(4, 4, vec![255; 16]).unwrap();
        let s = Scene::from_raster(&r, 2.0, &c).unwrap();
        assert!(s.power().iter().all(|&p| p == 2.0));
    }

    #[test]
    fn checkerboard_preserved() {
        let c = cfg(4, 4);
        let codes = (0..16)
            .map(|i| if (i % 4 + i / 4) % 2 == 0 { 255 } else { 0 })
            .collect();
        let r = Raster::new(4, 4, codes).unwrap();
        let s = Scene::from_raster(&r, 3.0, &c).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = if (x + y) % 2 == 0 { 3.0 } else { 0.0 };
                assert_eq!(s.at(x, y), want);
            }
        }
    }

    #[test]
    fn raster_size_checked() {
        let c = cfg(4, 4);
        let r = Raster::new(6, 4, vec![0; 24]).unwrap();
        assert!(matches!(
            Scene::from_raster(&r, 1.0, &c),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn current_from_power() {
        let c = cfg(4, 4);
        let s = Scene::uniform(4, 4, 2.0).unwrap();
        let i = photocurrents(&s, &c);
        // 0.35 A/W * 2.0 W/m^2 * 1e-10 m^2
        for &v in i.currents() {
            assert!((v - 7.0e-11).abs() < 1e-24);
        }
        let dark = photocurrents(&Scene::uniform(4, 4, 0.0).unwrap(), &c);
        assert!(dark.currents().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn current_is_linear() {
        let c = cfg(4, 4);
        let p: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let a = photocurrents(&Scene::new(4, 4, p.clone()).unwrap(), &c);
        let b = photocurrents(&Scene::new(4, 4, p.iter().map(|x| 2.0 * x).collect()).unwrap(), &c);
        for (x, y) in a.currents().iter().zip(b.currents()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs());
        }
    }

    #[test]
    fn rggb_layout() {
        assert_eq!(ColorPlane::at(0, 0), ColorPlane::R);
        assert_eq!(ColorPlane::at(1, 0), ColorPlane::G1);
        assert_eq!(ColorPlane::at(0, 1), ColorPlane::G2);
        assert_eq!(ColorPlane::at(1, 1), ColorPlane::B);
        assert_eq!(ColorPlane::at(5, 3), ColorPlane::B);
        for p in [ColorPlane::R, ColorPlane::G1, ColorPlane::G2, ColorPlane::B] {
            let (dx, dy) = p.offset();
            assert_eq!(ColorPlane::at(dx + 2, dy + 4), p);
        }
    }

    #[test]
    fn pgm_and_png_load() {
        let dir = std::env::temp_dir().join(format!("pipsim-optics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let pgm = dir.join("a.pgm");
        let mut bytes = b"P5\n4 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 10, 20, 30, 40, 50, 60, 255]);
        std::fs::write(&pgm, bytes).unwrap();
        let r = Raster::load(&pgm).unwrap();
        assert_eq!((r.width, r.height), (4, 2));
        assert_eq!(r.codes, vec![0, 10, 20, 30, 40, 50, 60, 255]);

        let png = dir.join("a.png");
        r.save_png(&png).unwrap();
        assert_eq!(Raster::load(&png).unwrap(), r);
        std::fs::remove_dir_all(&dir).ok();
    }
}
