//! End-to-end simulation: computing-mode feature maps, the traditional
//! rolling-shutter frame and the RMS-vs-SNR sweep.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{compare_all, oracle_conv};
use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, FeatureMeta, Source};
use crate::kernel::{Phase, PhaseWeights, WeightKernel};
use crate::noise::{
    apply_reset_noise, apply_shot_noise, derive_seed, inject_target_snr, read_voltage, stream, Event, NoiseModel,
    SensorInstance,
};
use crate::optics::PhotocurrentMap;
use crate::pixel::{auto_exposure_constant, expose_with_drives, reset_tile, tile_drives, ExposureParams, TileState};
use crate::readout::{dark_term, read_group, subtract_phases, AdcMode, AdcModel, CodeRecord, MacScale, Readout};
use crate::scheduler::{
    build_timeline, output_stride_units, plan_on, Lattice, Policy, Step, TileSchedule, TimingParams,
};

/// White noise added to every tile's differential voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffNoise {
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub policy: Policy,
    pub adc: AdcMode,
    pub noise: NoiseModel,
    pub leakage: bool,
    /// Subtract the residual `i_dark * sum(w)` term.
    pub dark_correction: bool,
    /// Pick the exposure constant so the worst tile uses 90% of the swing.
    pub auto_exposure: bool,
    pub pwm_tick: Option<f64>,
    pub diff_noise: Option<DiffNoise>,
}

impl SimOptions {
    /// Leakage off, noise off, ADC bypassed, dark term corrected.
    pub fn ideal(policy: Policy) -> Self {
        Self {
            policy,
            adc: AdcMode::Bypass,
            noise: NoiseModel::off(),
            leakage: false,
            dark_correction: true,
            auto_exposure: false,
            pwm_tick: None,
            diff_noise: None,
        }
    }

    pub fn source(&self) -> Source {
        if self.noise.is_off() && self.diff_noise.is_none() {
            Source::Ideal
        } else {
            Source::Noisy { seed: self.noise.seed }
        }
    }
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            policy: Policy::FullCoverage,
            adc: AdcMode::Model,
            noise: NoiseModel::off(),
            leakage: true,
            dark_correction: false,
            auto_exposure: false,
            pwm_tick: None,
            diff_noise: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub maps: Vec<FeatureMap>,
    pub schedule: TileSchedule,
    /// Raw ADC codes, empty in bypass mode.
    pub codes: Vec<ChannelCode>,
    pub k_expo: f64,
    pub saturated_tiles: usize,
    /// Mean square of the noiseless-path differential voltages, volts^2.
    pub diff_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelCode {
    pub channel: usize,
    pub phase: Phase,
    pub record: CodeRecord,
}

/// Code dump with the four core columns first.
pub fn codes_csv(codes: &[ChannelCode]) -> String {
    let mut out = String::from("step,group,column,code,channel,phase\n");
    for c in codes {
        let r = c.record;
        let p = if c.phase == Phase::Positive { "pos" } else { "neg" };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.group, r.column, r.code, c.channel, p
        );
    }
    out
}

/// Phase weights of every sub-kernel pass. Column `2j` of the unit window is
/// shared between passes `j - 1` and `j`; it stays with the earlier one.
fn sub_kernels(k: &WeightKernel, passes: usize) -> Vec<(PhaseWeights, PhaseWeights, i64)> {
    let (pos, neg) = k.decompose();
    (0..passes)
        .map(|j| {
            let zeroed: &[usize] = if j == 0 { &[] } else { &[0, 1] };
            let p = pos.column_slice(4 * j, 6, zeroed);
            let n = neg.column_slice(4 * j, 6, zeroed);
            let sum = p.sum() as i64 - n.sum() as i64;
            (p, n, sum)
        })
        .collect()
}

fn check_inputs(currents: &PhotocurrentMap, kernels: &[WeightKernel], cfg: &ValidatedConfig) -> Result<usize> {
    if (currents.width(), currents.height()) != (cfg.width_px, cfg.height_px) {
        return Err(Error::DimensionMismatch(format!(
            "current map {}x{}, sensor {}x{}",
            currents.width(),
            currents.height(),
            cfg.width_px,
            cfg.height_px
        )));
    }
    let r = kernels
        .first()
        .map(WeightKernel::r)
        .ok_or_else(|| Error::Input("no kernels given".into()))?;
    if kernels.iter().any(|k| k.r() != r) {
        return Err(Error::DimensionMismatch("kernels differ in size".into()));
    }
    Ok(r)
}

fn fresh_tile(t: &crate::scheduler::Tile, inst: &SensorInstance, cfg: &ValidatedConfig) -> TileState {
    let caps = (0..t.rows)
        .flat_map(|dy| (0..t.cols).map(move |dx| (t.origin.0 + dx, t.origin.1 + dy)))
        .map(|(x, y)| inst.unit_cap(x, y))
        .collect();
    TileState::with_caps(t.id, t.origin, t.rows, t.cols, caps, cfg)
}

/// Largest `sum(I w) / C_total` over every tile, phase and channel.
fn worst_drop_per_lsb(
    sched: &TileSchedule,
    subs: &[Vec<(PhaseWeights, PhaseWeights, i64)>],
    currents: &PhotocurrentMap,
    inst: &SensorInstance,
    cfg: &ValidatedConfig,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for ch in subs {
        for step in &sched.steps {
            for t in &step.tiles {
                let st = fresh_tile(t, inst, cfg);
                let c = st.total_capacitance();
                let (p, n, _) = &ch[step.pass];
                for w in [p, n] {
                    let drives = tile_drives(&st, w, |x, y| inst.pd_current(x, y, currents.at(x, y)))?;
                    let q: f64 = drives.iter().map(|d| d.current * d.magnitude as f64).sum();
                    worst = worst.max(q / c);
                }
            }
        }
    }
    Ok(worst)
}

struct ChannelResult {
    map: FeatureMap,
    codes: Vec<ChannelCode>,
    saturated: usize,
    diff_sq: f64,
    diffs: usize,
}

struct Ctx<'a> {
    sched: &'a TileSchedule,
    currents: &'a PhotocurrentMap,
    inst: &'a SensorInstance,
    cfg: &'a ValidatedConfig,
    params: ExposureParams,
    adc: AdcModel,
    opts: &'a SimOptions,
}

impl Ctx<'_> {
    fn run_phase(
        &self,
        step: &Step,
        states: &mut [TileState],
        phase: Phase,
        weights: &PhaseWeights,
        channel: usize,
        codes: &mut Vec<ChannelCode>,
    ) -> Result<Vec<Readout>> {
        let noise = &self.opts.noise;
        let (reset_ev, expose_ev, read_ev) = match phase {
            Phase::Positive => (Event::ResetPositive, Event::ExposePositive, Event::ReadPositive),
            Phase::Negative => (Event::ResetNegative, Event::ExposeNegative, Event::ReadNegative),
        };
        let labels = |id: u64, ev: Event| [channel as u64, id, ev as u64];
        for st in states.iter_mut() {
            let mut s = reset_tile(st.clone(), self.cfg);
            let id = s.id;
            apply_reset_noise(&mut s, noise, &mut stream(noise.seed, &labels(id, reset_ev)));
            let v0 = s.shared_voltage();
            let drives = tile_drives(&s, weights, |x, y| self.inst.pd_current(x, y, self.currents.at(x, y)))?;
            let mut s = expose_with_drives(s, phase, &drives, self.cfg, &self.params)?;
            apply_shot_noise(&mut s, v0, noise, &mut stream(noise.seed, &labels(id, expose_ev)));
            let v = read_voltage(
                &s,
                self.inst.tile_offset(&s),
                noise,
                &mut stream(noise.seed, &labels(id, read_ev)),
            );
            s.volts.iter_mut().for_each(|u| *u = v);
            *st = s;
        }
        let mut out: Vec<Option<Readout>> = vec![None; states.len()];
        for g in &step.groups {
            let reads = read_group(step, g.index, states, &self.adc)?;
            for (&i, rd) in g.tiles.iter().zip(reads) {
                if let Some(code) = rd.sample.code {
                    codes.push(ChannelCode {
                        channel,
                        phase,
                        record: CodeRecord {
                            step: step.index,
                            group: g.index,
                            column: step.tiles[i].origin.0,
                            code: code.value,
                        },
                    });
                }
                out[i] = Some(rd);
            }
        }
        out.into_iter()
            .map(|r| r.ok_or_else(|| Error::Internal(format!("tile left unread in step {}", step.index))))
            .collect()
    }

    fn run_channel(&self, kernel: &WeightKernel, subs: &[(PhaseWeights, PhaseWeights, i64)]) -> Result<ChannelResult> {
        let channel = kernel.channel_id();
        let (ow, oh) = self.sched.out_size;
        let mut acc = vec![0.0; ow * oh];
        let mut hits = vec![vec![0u32; ow * oh]; self.sched.passes];
        let mut codes = Vec::new();
        let mut saturated = 0;
        let mut diff_sq = 0.0;
        let mut diffs = 0;
        for step in &self.sched.steps {
            let (pos_w, neg_w, wsum) = &subs[step.pass];
            let mut states: Vec<TileState> = step.tiles.iter().map(|t| fresh_tile(t, self.inst, self.cfg)).collect();
            let pos = self.run_phase(step, &mut states, Phase::Positive, pos_w, channel, &mut codes)?;
            saturated += states.iter().filter(|s| s.saturated).count();
            let neg = self.run_phase(step, &mut states, Phase::Negative, neg_w, channel, &mut codes)?;
            saturated += states.iter().filter(|s| s.saturated).count();
            for ((tile, p), n) in step.tiles.iter().zip(&pos).zip(&neg) {
                let scale = MacScale::new(tile.rows * tile.cols, self.cfg);
                let mut mac = subtract_phases(n, p, &scale)?;
                diff_sq += (n.sample.volts - p.sample.volts).powi(2);
                diffs += 1;
                if let Some(dn) = self.opts.diff_noise {
                    let z: f64 =
                        stream(dn.seed, &[channel as u64, tile.id, Event::Differential as u64]).sample(StandardNormal);
                    mac += dn.sigma * z * scale.amps_per_volt();
                }
                if self.opts.dark_correction {
                    mac -= dark_term(self.cfg.i_dark, *wsum);
                }
                let (x, y) = tile.output;
                acc[y * ow + x] += mac;
                hits[step.pass][y * ow + x] += 1;
            }
        }
        if hits.iter().flatten().any(|&h| h != 1) {
            return Err(Error::Internal(
                "schedule did not produce every output exactly once".into(),
            ));
        }
        Ok(ChannelResult {
            map: FeatureMap {
                width: ow,
                height: oh,
                values: acc,
                meta: FeatureMeta {
                    channel,
                    r: kernel.r(),
                    stride_px: 2 * self.sched.site_stride,
                    policy: Some(self.sched.policy),
                    source: self.opts.source(),
                    adc: Some(self.opts.adc),
                },
            },
            codes,
            saturated,
            diff_sq,
            diffs,
        })
    }
}

/// Run the computing mode over every kernel. `s` is the stride in pixels.
pub fn simulate(
    currents: &PhotocurrentMap,
    kernels: &[WeightKernel],
    s: usize,
    cfg: &ValidatedConfig,
    opts: &SimOptions,
) -> Result<SimOutput> {
    let r = check_inputs(currents, kernels, cfg)?;
    opts.noise.validate()?;
    let sched = plan_on(r, s, cfg, opts.policy, Lattice::Unit)?;
    let inst = SensorInstance::sample(cfg, &opts.noise);
    let subs: Vec<_> = kernels.iter().map(|k| sub_kernels(k, sched.passes)).collect();

    let cfg = if opts.auto_exposure {
        let worst = worst_drop_per_lsb(&sched, &subs, currents, &inst, cfg)?;
        cfg.with_k_expo(auto_exposure_constant(worst, cfg))?
    } else {
        cfg.clone()
    };
    let mut params = ExposureParams::from_config(&cfg);
    params.leakage = opts.leakage;
    params.pwm_tick = opts.pwm_tick;
    let sched = build_timeline(sched, &TimingParams::from_config(&cfg))?;

    let ctx = Ctx {
        sched: &sched,
        currents,
        inst: &inst,
        cfg: &cfg,
        params,
        adc: AdcModel::from_config(&cfg, opts.adc),
        opts,
    };
    let results: Vec<ChannelResult> = kernels
        .par_iter()
        .zip(&subs)
        .map(|(k, sub)| ctx.run_channel(k, sub))
        .collect::<Result<_>>()?;

    let diffs: usize = results.iter().map(|r| r.diffs).sum();
    let diff_power = results.iter().map(|r| r.diff_sq).sum::<f64>() / diffs.max(1) as f64;
    let saturated_tiles = results.iter().map(|r| r.saturated).sum();
    let mut maps = Vec::with_capacity(results.len());
    let mut codes = Vec::new();
    for r in results {
        maps.push(r.map);
        codes.extend(r.codes);
    }
    let k_expo = cfg.k_expo();
    Ok(SimOutput {
        maps,
        schedule: sched,
        codes,
        k_expo,
        saturated_tiles,
        diff_power,
    })
}

/// Reference maps for the geometry a policy produces.
pub fn reference_maps(
    currents: &PhotocurrentMap,
    kernels: &[WeightKernel],
    s: usize,
    policy: Policy,
) -> Result<Vec<FeatureMap>> {
    oracle_conv(currents, kernels, output_stride_units(policy, s))
}

/// Rolling-shutter frame: every photodiode exposed for `t_expo` on its own
/// unit node and read separately. Returns the per-photodiode photocurrent
/// estimate with the nominal dark current removed.
pub fn simulate_traditional(
    currents: &PhotocurrentMap,
    cfg: &ValidatedConfig,
    adc: AdcMode,
    noise: &NoiseModel,
    t_expo: f64,
    leakage: bool,
) -> Result<PhotocurrentMap> {
    if (currents.width(), currents.height()) != (cfg.width_px, cfg.height_px) {
        return Err(Error::DimensionMismatch(format!(
            "current map {}x{}, sensor {}x{}",
            currents.width(),
            currents.height(),
            cfg.width_px,
            cfg.height_px
        )));
    }
    let inst = SensorInstance::sample(cfg, noise);
    let adc = AdcModel::from_config(cfg, adc);
    let mut params = ExposureParams::new(t_expo / crate::config::MAX_WEIGHT_MAGNITUDE as f64);
    params.leakage = leakage;
    let full = crate::config::MAX_WEIGHT_MAGNITUDE as u8;
    let (w, h) = (cfg.width_px, cfg.height_px);
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (ux, uy) = (x / 2, y / 2);
                    let id = (y * w + x) as u64;
                    let mut st = TileState::with_caps(id, (ux, uy), 1, 1, vec![inst.unit_cap(ux, uy)], cfg);
                    apply_reset_noise(&mut st, noise, &mut stream(noise.seed, &[u64::MAX, id, 1]));
                    let v0 = st.shared_voltage();
                    let drive = crate::pixel::PdDrive {
                        current: inst.pd_current(x, y, currents.at(x, y)),
                        magnitude: full,
                    };
                    let mut st = expose_with_drives(st, Phase::Positive, &[drive], cfg, &params)?;
                    apply_shot_noise(&mut st, v0, noise, &mut stream(noise.seed, &[u64::MAX, id, 2]));
                    let v = read_voltage(
                        &st,
                        inst.unit_offset(ux, uy),
                        noise,
                        &mut stream(noise.seed, &[u64::MAX, id, 3]),
                    );
                    let v = adc.convert(v).volts;
                    Ok(((cfg.v_rst - v) * cfg.c_fd / t_expo - cfg.i_dark).max(0.0))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    PhotocurrentMap::new(w, h, rows.into_iter().flatten().collect())
}

/// Map photocurrent estimates back to 8-bit scene codes.
pub fn currents_to_codes(est: &PhotocurrentMap, cfg: &ValidatedConfig, lux_scale: f64) -> Vec<u8> {
    let per_code = cfg.responsivity * cfg.pd_area * lux_scale / 255.0;
    est.currents()
        .iter()
        .map(|i| (i / per_code).round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub snr_db: Vec<f64>,
    pub mismatch: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            snr_db: vec![60.0, 40.0, 20.0, 0.0],
            mismatch: vec![0.05, 0.10, 0.20],
            trials: 4,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mismatch: f64,
    pub snr_db: f64,
    pub mean_rms: f64,
    pub std_rms: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Mean normalized RMS error against the reference convolution over a grid
/// of capacitance mismatch and target SNR.
///
/// Each trial is a new sensor instance. The same trial seeds are used for
/// every grid cell, so cells differ only in the swept parameters.
pub fn sweep_noise(
    currents: &PhotocurrentMap,
    kernels: &[WeightKernel],
    s: usize,
    cfg: &ValidatedConfig,
    base: &SimOptions,
    grid: &SweepSpec,
) -> Result<Vec<SweepCell>> {
    let mut problems = Vec::new();
    if grid.trials == 0 {
        problems.push("trials must be >= 1".to_string());
    }
    if grid.snr_db.is_empty() || grid.mismatch.is_empty() {
        problems.push("SNR and mismatch grids must be non-empty".to_string());
    }
    if let Some(m) = grid.mismatch.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
        problems.push(format!("mismatch must be >= 0 (got {m})"));
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let reference = reference_maps(currents, kernels, s, base.policy)?;
    let clean = SimOptions {
        noise: NoiseModel {
            mismatch_sigma: 0.0,
            ..base.noise.clone()
        },
        diff_noise: None,
        ..base.clone()
    };
    let signal_power = simulate(currents, kernels, s, cfg, &clean)?.diff_power;

    let mut cells = Vec::new();
    for &m in &grid.mismatch {
        let mut per_snr = vec![Vec::with_capacity(grid.trials); grid.snr_db.len()];
        for t in 0..grid.trials {
            let trial_seed = derive_seed(grid.seed, &[t as u64]);
            for (i, &snr) in grid.snr_db.iter().enumerate() {
                let sigma = inject_target_snr(signal_power, snr)?;
                let opts = SimOptions {
                    noise: NoiseModel {
                        mismatch_sigma: m,
                        seed: trial_seed,
                        ..base.noise.clone()
                    },
                    diff_noise: (sigma > 0.0).then_some(DiffNoise {
                        sigma,
                        seed: derive_seed(trial_seed, &[0xD1FF]),
                    }),
                    ..base.clone()
                };
                let out = simulate(currents, kernels, s, cfg, &opts)?;
                per_snr[i].push(compare_all(&out.maps, &reference)?.rms);
            }
        }
        for (i, &snr) in grid.snr_db.iter().enumerate() {
            let v = &per_snr[i];
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            cells.push(SweepCell {
                mismatch: m,
                snr_db: snr,
                mean_rms: mean,
                std_rms: var.sqrt(),
                trials: grid.trials,
                seed: grid.seed,
            });
        }
    }
    Ok(cells)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("mismatch,snr_db,mean_rms,std_rms,trials,seed\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{},{}",
            c.mismatch, c.snr_db, c.mean_rms, c.std_rms, c.trials, c.seed
        );
    }
    out
}
