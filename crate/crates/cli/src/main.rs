use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pipsim_core::analysis::{
    frame_rate_curve, log_grid, power_model, power_table, rate_report, Mode, PowerCalibration, PowerReport,
};
use pipsim_core::config::DEFAULT_T_EXPO_MAX;
use pipsim_core::optics::{default_lux_scale, photocurrents};
use pipsim_core::scheduler::{build_timeline, plan_steps, Pacing, TimingParams, SUPPORTED_KERNELS};
use pipsim_core::sim::{codes_csv, reference_maps, simulate, sweep_csv, sweep_noise, SimOptions, SweepSpec};
use pipsim_core::{
    AdcMode, ConfigEntries, Error, ErrorClass, KernelSet, NoiseModel, PhotocurrentMap, Policy, Raster, Scene,
    SensorConfig, ValidatedConfig,
};

const EXIT_CONFIG: u8 = 10;
const EXIT_INPUT: u8 = 11;
const EXIT_GEOMETRY: u8 = 12;
const EXIT_TIMING: u8 = 13;
const EXIT_INTERNAL: u8 = 70;

const MANIFEST: &str = "manifest.json";

/// Processing-in-pixel sensor simulator and rate/power calculator.
///
/// Exit codes: 0 ok, 2 usage, 10 config, 11 input, 12 unsupported geometry,
/// 13 infeasible timing, 70 internal.
#[derive(Parser, Debug)]
#[command(name = "pipsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Run the computing mode over a scene and write one CSV per channel.
    Simulate(SimulateArgs),
    /// ADC and frame-rate requirements.
    Rates(RatesArgs),
    /// Power, efficiency and figure of merit.
    Power(PowerArgs),
    /// Mean RMS error over a grid of capacitance mismatch and SNR.
    SweepNoise(SweepArgs),
    /// Dump the step plan and timeline as CSV.
    Schedule(ScheduleArgs),
    /// Maximum frame rate against illuminance for both modes.
    FrameRate(FrameRateArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct Inputs {
    /// `key = value` sensor config. Keys under `noise.` configure the noise model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grayscale image (PNG or PGM).
    #[arg(long)]
    scene: PathBuf,
    /// Weights file: header `r s channels`, then 2r x 2r integers per channel.
    #[arg(long)]
    weights: PathBuf,
    /// Optical power density for code 255, W/m^2. Defaults to about 1500 lux.
    #[arg(long)]
    lux_scale: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ChainArgs {
    #[arg(long, default_value = "full-coverage")]
    policy: Policy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "off")]
    noise: Switch,
    #[arg(long, default_value = "model")]
    adc: AdcMode,
    #[arg(long, value_enum, default_value = "on")]
    leakage: Switch,
    /// Remove the residual dark-current term.
    #[arg(long)]
    dark_correction: bool,
    /// Scale the exposure so the brightest tile uses 90% of the swing.
    #[arg(long)]
    auto_exposure: bool,
    /// Leakage off, noise off, ADC bypassed, dark term removed.
    #[arg(long)]
    ideal: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SimulateArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    chain: ChainArgs,
    /// Also write the reference convolution as oracle_c<k>.csv.
    #[arg(long)]
    oracle: bool,
    /// Also write raw little-endian f64 maps with JSON sidecars.
    #[arg(long)]
    binary: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct RatesArgs {
    /// Kernel sides; all supported sizes when omitted.
    #[arg(long, value_delimiter = ',')]
    r: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    s: usize,
    /// Target frames per second.
    #[arg(long, default_value_t = 60.0)]
    fps: f64,
    /// Output channels.
    #[arg(long, default_value_t = 64.0)]
    channels: f64,
    /// Sensor heights in pixels.
    #[arg(long, value_delimiter = ',', default_value = "128")]
    height: Vec<usize>,
    /// Longest exposure, seconds.
    #[arg(long, default_value_t = DEFAULT_T_EXPO_MAX)]
    t_expo: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct PowerArgs {
    /// Single operating point; the six-row baseline table when all are omitted.
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    chain: ChainArgs,
    /// Target SNRs in dB; `inf` disables the injected noise.
    #[arg(long, value_delimiter = ',', default_value = "60,40,20,0")]
    snr: Vec<f64>,
    /// Capacitance mismatch sigmas as fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    mismatch: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ScheduleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    r: usize,
    #[arg(long, default_value_t = 2)]
    s: usize,
    #[arg(long, default_value = "paper-steps")]
    policy: Policy,
    /// Fail instead of stretching when a step cannot keep the readout busy.
    #[arg(long)]
    strict: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct FrameRateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    r: usize,
    #[arg(long, default_value_t = 2)]
    s: usize,
    #[arg(long, default_value_t = 0.1)]
    lux_min: f64,
    #[arg(long, default_value_t = 1e6)]
    lux_max: f64,
    #[arg(long, default_value_t = 50)]
    points: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Compare every regenerated file against the recorded run.
    #[arg(long)]
    verify: bool,
}

/// Written next to every simulate and sweep-noise output.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    tool: String,
    version: String,
    command: Command,
    config: Option<PathBuf>,
    scene: PathBuf,
    weights: PathBuf,
    seed: u64,
    out: PathBuf,
    files: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_CONFIG);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("PIPSIM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::InvalidConfig(vec![format!("PIPSIM_THREADS must be a positive integer (got `{v}`)")]))?;
    if n == 0 {
        return Err(Error::InvalidConfig(vec!["PIPSIM_THREADS must be >= 1".into()]).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("building the worker pool")
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::class) {
        Some(ErrorClass::Config) => EXIT_CONFIG,
        Some(ErrorClass::Input) => EXIT_INPUT,
        Some(ErrorClass::Geometry) => EXIT_GEOMETRY,
        Some(ErrorClass::Timing) => EXIT_TIMING,
        Some(ErrorClass::Internal) | None => EXIT_INTERNAL,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Rates(a) => cmd_rates(&a),
        Command::Power(a) => cmd_power(&a),
        Command::SweepNoise(a) => cmd_sweep(a),
        Command::Schedule(a) => cmd_schedule(&a),
        Command::FrameRate(a) => cmd_frame_rate(&a),
        Command::Replay(a) => cmd_replay(&a),
    }
}

fn load_entries(path: Option<&Path>) -> Result<ConfigEntries> {
    match path {
        Some(p) => Ok(ConfigEntries::load(p)?),
        None => Ok(ConfigEntries::default()),
    }
}

/// Sensor config from file, with the array size taken from `size` unless the
/// file sets it.
fn sensor_config(entries: &ConfigEntries, size: Option<(usize, usize)>) -> Result<ValidatedConfig> {
    let mut cfg = SensorConfig::default();
    if let Some((w, h)) = size {
        cfg.width_px = w;
        cfg.height_px = h;
    }
    let cfg = cfg.apply_entries(entries)?;
    if let Some((w, h)) = size {
        if (cfg.width_px, cfg.height_px) != (w, h) {
            return Err(Error::DimensionMismatch(format!(
                "scene is {w}x{h}, config sets {}x{}",
                cfg.width_px, cfg.height_px
            ))
            .into());
        }
    }
    Ok(cfg.validate()?)
}

struct Loaded {
    cfg: ValidatedConfig,
    entries: ConfigEntries,
    currents: PhotocurrentMap,
    kernels: KernelSet,
}

fn load_inputs(inputs: &Inputs) -> Result<Loaded> {
    let entries = load_entries(inputs.config.as_deref())?;
    let raster = Raster::load(&inputs.scene)?;
    let kernels = KernelSet::load(&inputs.weights)?;
    let cfg = sensor_config(&entries, Some((raster.width, raster.height)))?;
    let lux_scale = inputs.lux_scale.unwrap_or_else(default_lux_scale);
    let scene = Scene::from_raster(&raster, lux_scale, &cfg)?;
    Ok(Loaded {
        currents: photocurrents(&scene, &cfg),
        cfg,
        entries,
        kernels,
    })
}

fn sim_options(chain: &ChainArgs, entries: &ConfigEntries) -> Result<SimOptions> {
    if chain.ideal {
        return Ok(SimOptions::ideal(chain.policy));
    }
    let noise = match chain.noise {
        Switch::On => NoiseModel {
            seed: chain.seed,
            ..NoiseModel::default().apply_entries(entries)?
        },
        Switch::Off => NoiseModel {
            seed: chain.seed,
            ..NoiseModel::off()
        },
    };
    Ok(SimOptions {
        policy: chain.policy,
        adc: chain.adc,
        noise,
        leakage: chain.leakage == Switch::On,
        dark_correction: chain.dark_correction,
        auto_exposure: chain.auto_exposure,
        pwm_tick: None,
        diff_noise: None,
    })
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>, files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    files.push(name.to_string());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Io {
            path: dir.display().to_string(),
            source: e,
        }
        .into()
    })
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn write_manifest(cmd: Command, inputs: &Inputs, seed: u64, out: &Path, files: Vec<String>) -> Result<()> {
    let m = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd,
        config: inputs.config.as_deref().map(absolute),
        scene: absolute(&inputs.scene),
        weights: absolute(&inputs.weights),
        seed,
        out: absolute(out),
        files,
    };
    let text = serde_json::to_string_pretty(&m).context("serializing manifest")?;
    fs::write(out.join(MANIFEST), text + "\n").with_context(|| format!("writing {}", out.join(MANIFEST).display()))
}

/// Recorded form of a command: input paths made absolute so a replay works
/// from any directory.
fn recorded(cmd: &Command) -> Command {
    let fix = |i: &Inputs| Inputs {
        config: i.config.as_deref().map(absolute),
        scene: absolute(&i.scene),
        weights: absolute(&i.weights),
        lux_scale: i.lux_scale,
    };
    match cmd {
        Command::Simulate(a) => Command::Simulate(SimulateArgs {
            inputs: fix(&a.inputs),
            out: absolute(&a.out),
            ..a.clone()
        }),
        Command::SweepNoise(a) => Command::SweepNoise(SweepArgs {
            inputs: fix(&a.inputs),
            out: absolute(&a.out),
            ..a.clone()
        }),
        other => other.clone(),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let l = load_inputs(&a.inputs)?;
    let opts = sim_options(&a.chain, &l.entries)?;
    let s = l.kernels.stride_px;
    let out = simulate(&l.currents, &l.kernels.kernels, s, &l.cfg, &opts)?;

    create_dir(&a.out)?;
    let mut files = Vec::new();
    for m in &out.maps {
        let name = format!("c{}.csv", m.meta.channel);
        write(&a.out, &name, m.to_csv(), &mut files)?;
        if a.binary {
            let bin = format!("c{}.f64", m.meta.channel);
            m.write_binary(&a.out.join(&bin))?;
            files.push(bin);
            files.push(format!("c{}.json", m.meta.channel));
        }
    }
    if a.oracle {
        for m in reference_maps(&l.currents, &l.kernels.kernels, s, opts.policy)? {
            write(
                &a.out,
                &format!("oracle_c{}.csv", m.meta.channel),
                m.to_csv(),
                &mut files,
            )?;
        }
    }
    write(&a.out, "schedule.csv", out.schedule.to_csv(), &mut files)?;
    if !out.codes.is_empty() {
        write(&a.out, "codes.csv", codes_csv(&out.codes), &mut files)?;
    }
    write_manifest(
        recorded(&Command::Simulate(a.clone())),
        &a.inputs,
        a.chain.seed,
        &a.out,
        files,
    )?;

    eprintln!(
        "{} channel(s), {}x{} outputs, {} steps, k_expo {:.4e} s/LSB, {} saturated tile(s) -> {}",
        out.maps.len(),
        out.schedule.out_size.0,
        out.schedule.out_size.1,
        out.schedule.steps.len(),
        out.k_expo,
        out.saturated_tiles,
        a.out.display()
    );
    Ok(())
}

fn cmd_rates(a: &RatesArgs) -> Result<()> {
    let kernels: Vec<usize> = if a.r.is_empty() {
        SUPPORTED_KERNELS.to_vec()
    } else {
        a.r.clone()
    };
    let mut out = String::from("r,s,height,f_adc_min_khz,f_real_max,f_real_floor,f_adc_target_khz\n");
    for &h in &a.height {
        for &r in &kernels {
            let rep = rate_report(r, a.s, a.fps, a.channels, h as f64, a.t_expo)?;
            let _ = writeln!(
                out,
                "{},{},{},{:.2},{:.2},{},{:.2}",
                r,
                a.s,
                h,
                rep.f_adc_min / 1e3,
                rep.f_real_max,
                rep.f_real_floor,
                rep.f_adc_target / 1e3
            );
        }
    }
    print!("{out}");
    Ok(())
}

fn power_row(out: &mut String, p: &PowerReport) {
    let _ = writeln!(
        out,
        "{},{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
        p.fps,
        p.r,
        p.s,
        p.p_pixel * 1e6,
        p.p_readout * 1e6,
        p.p_adc * 1e6,
        p.p_total * 1e6,
        p.efficiency / 1e12,
        p.fom * 1e12
    );
}

fn cmd_power(a: &PowerArgs) -> Result<()> {
    let calib = PowerCalibration::default();
    let mut out = String::from("fps,r,s,p_pixel_uw,p_readout_uw,p_adc_uw,p_total_uw,tops_per_w,fom_pj\n");
    if a.fps.is_none() && a.r.is_none() && a.s.is_none() {
        for p in power_table(&calib) {
            power_row(&mut out, &p);
        }
    } else {
        let p = power_model(
            a.fps.unwrap_or(calib.fps),
            a.r.unwrap_or(calib.r),
            a.s.unwrap_or(calib.s),
            &calib,
        )?;
        power_row(&mut out, &p);
    }
    print!("{out}");
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let l = load_inputs(&a.inputs)?;
    let base = sim_options(&a.chain, &l.entries)?;
    let grid = SweepSpec {
        snr_db: a.snr.clone(),
        mismatch: a.mismatch.clone(),
        trials: a.trials,
        seed: a.chain.seed,
    };
    let cells = sweep_noise(
        &l.currents,
        &l.kernels.kernels,
        l.kernels.stride_px,
        &l.cfg,
        &base,
        &grid,
    )?;
    create_dir(&a.out)?;
    let csv = sweep_csv(&cells);
    let mut files = Vec::new();
    write(&a.out, "sweep.csv", &csv, &mut files)?;
    write_manifest(
        recorded(&Command::SweepNoise(a.clone())),
        &a.inputs,
        a.chain.seed,
        &a.out,
        files,
    )?;
    print!("{csv}");
    Ok(())
}

fn cmd_schedule(a: &ScheduleArgs) -> Result<()> {
    let cfg = sensor_config(&load_entries(a.config.as_deref())?, None)?;
    let mut timing = TimingParams::from_config(&cfg);
    if a.strict {
        timing.pacing = Pacing::Strict;
    }
    let sched = build_timeline(plan_steps(a.r, a.s, &cfg, a.policy)?, &timing)?;
    let csv = sched.to_csv();
    match &a.out {
        Some(p) => fs::write(p, csv).map_err(|e| Error::Io {
            path: p.display().to_string(),
            source: e,
        })?,
        None => print!("{csv}"),
    }
    if let Some(tl) = &sched.timeline {
        eprintln!(
            "{} steps, {} readouts per step, {} stalls, frame time {:.4e} s",
            sched.steps.len(),
            sched.readouts_per_step(),
            tl.stalls.len(),
            tl.frame_time
        );
    }
    Ok(())
}

fn cmd_frame_rate(a: &FrameRateArgs) -> Result<()> {
    if !(a.lux_min > 0.0 && a.lux_max >= a.lux_min) || a.points == 0 {
        return Err(Error::InvalidConfig(vec![format!(
            "need 0 < lux_min <= lux_max and points >= 1 (got {}, {}, {})",
            a.lux_min, a.lux_max, a.points
        )])
        .into());
    }
    let cfg = sensor_config(&load_entries(a.config.as_deref())?, None)?;
    let lux = log_grid(a.lux_min, a.lux_max, a.points);
    let comp = frame_rate_curve(&lux, &cfg, Mode::Computing, a.r, a.s)?;
    let trad = frame_rate_curve(&lux, &cfg, Mode::Traditional, a.r, a.s)?;
    let mut out = String::from("lux,t_required,computing_fps,traditional_fps\n");
    for (c, t) in comp.iter().zip(&trad) {
        let _ = writeln!(out, "{:e},{:e},{:e},{:e}", c.lux, c.t_required, c.fps, t.fps);
    }
    print!("{out}");
    Ok(())
}

fn cmd_replay(a: &ReplayArgs) -> Result<()> {
    let text = fs::read_to_string(&a.manifest).map_err(|e| Error::Io {
        path: a.manifest.display().to_string(),
        source: e,
    })?;
    let m: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", a.manifest.display())))?;
    let out = a.out.clone().unwrap_or_else(|| m.out.clone());
    let cmd = match m.command {
        Command::Simulate(s) => Command::Simulate(SimulateArgs { out: out.clone(), ..s }),
        Command::SweepNoise(s) => Command::SweepNoise(SweepArgs { out: out.clone(), ..s }),
        other => bail!(Error::Input(format!(
            "manifest records a {other:?} run, which writes no outputs"
        ))),
    };
    run(cmd)?;
    if a.verify {
        let mut differ = Vec::new();
        for f in &m.files {
            let (old, new) = (fs::read(m.out.join(f)), fs::read(out.join(f)));
            match (old, new) {
                (Ok(x), Ok(y)) if x == y => {}
                _ => differ.push(f.clone()),
            }
        }
        if !differ.is_empty() {
            bail!(Error::Internal(format!("replay differs in {}", differ.join(", "))));
        }
        eprintln!("{} file(s) identical", m.files.len());
    }
    Ok(())
}
