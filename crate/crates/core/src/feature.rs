//! Output feature maps and their file formats.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::readout::AdcMode;
use crate::scheduler::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// Reference convolution.
    Oracle,
    /// Simulated with every noise source off.
    Ideal,
    Noisy {
        seed: u64,
    },
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Oracle => f.write_str("oracle"),
            Source::Ideal => f.write_str("ideal"),
            Source::Noisy { seed } => write!(f, "noisy:{seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub channel: usize,
    pub r: usize,
    /// Output stride in pixels.
    pub stride_px: usize,
    pub policy: Option<Policy>,
    pub source: Source,
    pub adc: Option<AdcMode>,
}

/// One output channel. Values are reconstructed `sum(I w)` in amps-LSB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub meta: FeatureMeta,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, meta: FeatureMeta) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            meta,
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn header(&self) -> String {
        let m = &self.meta;
        format!(
            "# channel={} r={} stride={} width={} height={} policy={} source={} adc={}",
            m.channel,
            m.r,
            m.stride_px,
            self.width,
            self.height,
            m.policy.map_or("none".to_string(), |p| p.to_string()),
            m.source,
            m.adc.map_or("none".to_string(), |a| a.to_string()),
        )
    }

    /// Header comment line, then one CSV row per output row.
    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for row in self.values.chunks(self.width.max(1)) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Values of a CSV written by [`FeatureMap::to_csv`] as (width, height,
    /// values). The header is skipped.
    pub fn parse_csv_values(text: &str) -> Result<(usize, usize, Vec<f64>)> {
        let mut values = Vec::new();
        let mut width = None;
        let mut height = 0;
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let row: Vec<f64> = line
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Input(format!("bad value `{c}`")))
                })
                .collect::<Result<_>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::DimensionMismatch(format!(
                        "row of {} values, expected {w}",
                        row.len()
                    )))
                }
                _ => {}
            }
            values.extend(row);
            height += 1;
        }
        Ok((width.unwrap_or(0), height, values))
    }

    /// Raw little-endian f64 values plus a JSON sidecar with the geometry.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = path.with_extension("json");
        let header = serde_json::json!({
            "width": self.width,
            "height": self.height,
            "dtype": "f64le",
            "meta": self.meta,
        });
        std::fs::write(&sidecar, serde_json::to_string_pretty(&header).expect("serializable"))
            .map_err(|e| Error::io(&sidecar, e))
    }

    pub fn read_binary_values(path: &Path) -> Result<Vec<f64>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Input(format!(
                "{}: length is not a multiple of 8",
                path.display()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Grid of values as CSV without a header.
pub fn grid_to_csv(width: usize, values: &[f64]) -> String {
    let mut out = String::new();
    for row in values.chunks(width.max(1)) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:e}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> FeatureMap {
        FeatureMap {
            width: 3,
            height: 2,
            values: vec![1.0, -2.5e-12, 0.0, 3.25, 1e300, -7.0],
            meta: FeatureMeta {
                channel: 2,
                r: 3,
                stride_px: 2,
                policy: Some(Policy::FullCoverage),
                source: Source::Ideal,
                adc: Some(AdcMode::Bypass),
            },
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = map();
        let csv = m.to_csv();
        assert!(csv.starts_with("# channel=2 r=3 stride=2 width=3 height=2 policy=full-coverage"));
        let (w, h, v) = FeatureMap::parse_csv_values(&csv).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(v, m.values);
    }

    #[test]
    fn binary_round_trip() {
        let dir = std::env::temp_dir().join(format!("pipsim-feature-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c0.f64");
        map().write_binary(&p).unwrap();
        assert_eq!(FeatureMap::read_binary_values(&p).unwrap(), map().values);
        assert!(dir.join("c0.json").exists());
        std::fs::remove_dir_all(&dir).ok();
    }
}
