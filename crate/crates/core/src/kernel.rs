//! Signed 8-bit convolution kernels at photodiode granularity.
//!
//! A kernel of side `r` (in pixel units) holds `2r x 2r` weights, one per
//! photodiode of the RGGB mosaic it covers. Weights are stored row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WEIGHT_MIN: i16 = -128;
pub const WEIGHT_MAX: i16 = 127;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightKernel {
    r: usize,
    weights: Vec<i16>,
    channel_id: usize,
}

impl WeightKernel {
    pub fn new(r: usize, weights: Vec<i16>, channel_id: usize) -> Result<Self> {
        if r == 0 || r.is_multiple_of(2) {
            return Err(Error::InvalidKernel(format!(
                "kernel side must be odd and >= 1, got {r}"
            )));
        }
        let side = 2 * r;
        if weights.len() != side * side {
            return Err(Error::InvalidKernel(format!(
                "kernel r={r} needs {} weights, got {}",
                side * side,
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(WEIGHT_MIN..=WEIGHT_MAX).contains(*w)) {
            return Err(Error::InvalidKernel(format!("weight {w} outside [-128, 127]")));
        }
        Ok(Self { r, weights, channel_id })
    }

    pub fn zeros(r: usize, channel_id: usize) -> Result<Self> {
        Self::new(r, vec![0; 4 * r * r], channel_id)
    }

    /// Side length in pixel units.
    pub fn r(&self) -> usize {
        self.r
    }
    /// Side length in photodiodes (`2r`).
    pub fn side(&self) -> usize {
        2 * self.r
    }
    pub fn channel_id(&self) -> usize {
        self.channel_id
    }
    pub fn weights(&self) -> &[i16] {
        &self.weights
    }
    /// Weight at photodiode row `py`, column `px` within the kernel window.
    pub fn at(&self, py: usize, px: usize) -> i16 {
        self.weights[py * self.side() + px]
    }
    pub fn sum(&self) -> i64 {
        self.weights.iter().map(|&w| w as i64).sum()
    }

    pub fn transposed(&self) -> Self {
        let n = self.side();
        let mut w = vec![0; n * n];
        for y in 0..n {
            for x in 0..n {
                w[x * n + y] = self.weights[y * n + x];
            }
        }
        Self {
            r: self.r,
            weights: w,
            channel_id: self.channel_id,
        }
    }

    /// Split into non-negative positive and negative phase magnitudes.
    pub fn decompose(&self) -> (PhaseWeights, PhaseWeights) {
        let pos = self.weights.iter().map(|&w| w.max(0) as u8).collect();
        let neg = self.weights.iter().map(|&w| (-w).max(0) as u8).collect();
        (
            PhaseWeights {
                width: self.side(),
                height: self.side(),
                magnitudes: pos,
            },
            PhaseWeights {
                width: self.side(),
                height: self.side(),
                magnitudes: neg,
            },
        )
    }
}

/// Which of the two exposures a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Positive,
    Negative,
}

impl Phase {
    pub const BOTH: [Phase; 2] = [Phase::Positive, Phase::Negative];

    pub fn index(self) -> usize {
        match self {
            Phase::Positive => 0,
            Phase::Negative => 1,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Positive => "+",
            Phase::Negative => "-",
        })
    }
}

/// Non-negative weight magnitudes for one exposure phase (0..=128), on a
/// `width x height` photodiode grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseWeights {
    width: usize,
    height: usize,
    magnitudes: Vec<u8>,
}

impl PhaseWeights {
    pub fn new(width: usize, height: usize, magnitudes: Vec<u8>) -> Result<Self> {
        if magnitudes.len() != width * height {
            return Err(Error::InvalidKernel(format!(
                "phase grid {width}x{height} needs {} entries, got {}",
                width * height,
                magnitudes.len()
            )));
        }
        if magnitudes.iter().any(|&m| m > 128) {
            return Err(Error::InvalidKernel("phase magnitude above 128".into()));
        }
        Ok(Self {
            width,
            height,
            magnitudes,
        })
    }
    pub fn square(side: usize, magnitudes: Vec<u8>) -> Result<Self> {
        Self::new(side, side, magnitudes)
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn magnitudes(&self) -> &[u8] {
        &self.magnitudes
    }
    pub fn at(&self, py: usize, px: usize) -> u8 {
        self.magnitudes[py * self.width + px]
    }
    pub fn sum(&self) -> u64 {
        self.magnitudes.iter().map(|&m| m as u64).sum()
    }

    /// Columns `col0..col0 + width` of this grid, with columns listed in
    /// `zeroed` (relative to the slice) cleared.
    pub fn column_slice(&self, col0: usize, width: usize, zeroed: &[usize]) -> Self {
        let mut m = Vec::with_capacity(width * self.height);
        for y in 0..self.height {
            for x in 0..width {
                m.push(if zeroed.contains(&x) { 0 } else { self.at(y, col0 + x) });
            }
        }
        Self {
            width,
            height: self.height,
            magnitudes: m,
        }
    }
}

/// Recombine two phases into signed weights (`w = w+ - w-`).
pub fn recombine(pos: &PhaseWeights, neg: &PhaseWeights) -> Vec<i16> {
    pos.magnitudes
        .iter()
        .zip(&neg.magnitudes)
        .map(|(&p, &n)| p as i16 - n as i16)
        .collect()
}

/// A set of kernels sharing `r` and stride, as read from a weights file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSet {
    pub r: usize,
    /// Stride in pixels.
    pub stride_px: usize,
    pub kernels: Vec<WeightKernel>,
}

impl KernelSet {
    /// Parse the weights text format: a header `r s channels`, then for each
    /// channel `2r x 2r` signed integers in row-major order. Whitespace and
    /// line breaks between numbers are free-form; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let mut header = |name: &str| -> Result<usize> {
            let t = tokens
                .next()
                .ok_or_else(|| Error::Input(format!("weights file: missing header field `{name}`")))?;
            t.parse()
                .map_err(|_| Error::Input(format!("weights file: bad `{name}` value `{t}`")))
        };
        let r = header("r")?;
        let stride_px = header("s")?;
        let channels = header("channels")?;
        if channels == 0 {
            return Err(Error::Input("weights file declares zero channels".into()));
        }
        let per = 4 * r * r;
        let mut kernels = Vec::with_capacity(channels);
        for ch in 0..channels {
            let mut w = Vec::with_capacity(per);
            for i in 0..per {
                let t = tokens.next().ok_or_else(|| {
                    Error::Input(format!("weights file: channel {ch} truncated at entry {i} of {per}"))
                })?;
                let v: i16 = t
                    .parse()
                    .map_err(|_| Error::Input(format!("weights file: bad weight `{t}`")))?;
                w.push(v);
            }
            kernels.push(WeightKernel::new(r, w, ch)?);
        }
        if let Some(extra) = tokens.next() {
            return Err(Error::Input(format!(
                "weights file: trailing data starting at `{extra}`"
            )));
        }
        Ok(Self { r, stride_px, kernels })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.r, self.stride_px, self.kernels.len());
        for k in &self.kernels {
            out.push_str(&format!("# channel {}\n", k.channel_id()));
            for row in k.weights().chunks(k.side()) {
                let line: Vec<String> = row.iter().map(|w| w.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sign_split() {
        // r = 1 gives a 2x2 kernel; pad the [+5, -3] example with zeros.
        let k = WeightKernel::new(1, vec![5, -3, 0, 0], 0).unwrap();
        let (p, n) = k.decompose();
        assert_eq!(p.magnitudes(), &[5, 0, 0, 0]);
        assert_eq!(n.magnitudes(), &[0, 3, 0, 0]);
    }

    #[test]
    fn zero_kernel_has_zero_phases() {
        let k = WeightKernel::zeros(3, 0).unwrap();
        let (p, n) = k.decompose();
        assert_eq!(p.sum(), 0);
        assert_eq!(n.sum(), 0);
    }

    #[test]
    fn most_negative_weight() {
        let k = WeightKernel::new(1, vec![-128, 127, 0, 1], 0).unwrap();
        let (p, n) = k.decompose();
        assert_eq!(p.at(0, 0), 0);
        assert_eq!(n.at(0, 0), 128);
        assert_eq!(p.at(0, 1), 127);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(WeightKernel::new(1, vec![128, 0, 0, 0], 0).is_err());
        assert!(WeightKernel::new(1, vec![-129, 0, 0, 0], 0).is_err());
        assert!(WeightKernel::new(2, vec![0; 16], 0).is_err());
        assert!(WeightKernel::new(3, vec![0; 35], 0).is_err());
    }

    #[test]
    fn weights_file_round_trip() {
        let k0 = WeightKernel::new(3, (0..36).map(|i| i as i16 - 18).collect(), 0).unwrap();
        let k1 = WeightKernel::new(3, (0..36).map(|i| 100 - 5 * i as i16).collect(), 1).unwrap();
        let set = KernelSet {
            r: 3,
            stride_px: 2,
            kernels: vec![k0, k1],
        };
        assert_eq!(KernelSet::parse(&set.to_text()).unwrap(), set);
    }

    #[test]
    fn weights_file_errors() {
        assert!(KernelSet::parse("").is_err());
        assert!(KernelSet::parse("3 2 1\n1 2 3").is_err());
        let mut text = String::from("1 2 1\n1 2 3 4 5");
        assert!(KernelSet::parse(&text).is_err());
        text = String::from("1 2 1\n1 2 3 400");
        assert!(KernelSet::parse(&text).is_err());
    }

    proptest! {
        #[test]
        fn decompose_round_trips(r in prop::sample::select(vec![1usize, 3, 5, 7, 9]), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<i16> = (0..4 * r * r).map(|_| rng.random_range(-128..=127)).collect();
            let k = WeightKernel::new(r, w.clone(), 0).unwrap();
            let (p, n) = k.decompose();
            prop_assert_eq!(recombine(&p, &n), w);
            for (&a, &b) in p.magnitudes().iter().zip(n.magnitudes()) {
                prop_assert!(a == 0 || b == 0);
            }
        }
    }
}
