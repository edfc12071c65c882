//! Step planning, interlaced group readout timing and wiring checks.
//!
//! A kernel of side `r` is executed as `(r - 1) / 2` passes of `r x 3`
//! sub-kernels, one pass per column offset `2j`. Each pass is split into steps
//! whose tiles are pairwise disjoint; tiles of a step are grouped three
//! tile-rows at a time and each group is read out in one slot.
//!
//! Two tilings are offered:
//!
//! * [`Policy::PaperSteps`] strides tiles by `s` lattice sites with an x period
//!   of `2s` and a y period of `s * ceil((r + 1) / s)`. This gives the step and
//!   readout counts used for rate accounting (4 steps and 11 readouts per step
//!   for `r = 3, s = 2` at 128 px) but only produces every other output.
//! * [`Policy::FullCoverage`] strides by `s / 2` units with an x period of 4 and
//!   a y period of `r + 1`, so every valid output is produced exactly once.
//!
//! Steps are ordered pass, then x phase, then y phase.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::kernel::Phase;

pub const SUPPORTED_KERNELS: [usize; 4] = [3, 5, 7, 9];
pub const SUPPORTED_STRIDES: [usize; 2] = [2, 4];
/// Unit columns covered by one sub-kernel tile.
pub const SUB_KERNEL_COLS: usize = 3;
pub const ROWS_PER_GROUP: usize = 3;
/// Period of the zigzag column wiring W1 W2 W3 W2.
pub const WIRE_PERIOD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    PaperSteps,
    FullCoverage,
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-steps" => Ok(Policy::PaperSteps),
            "full-coverage" => Ok(Policy::FullCoverage),
            other => Err(Error::Input(format!(
                "unknown policy `{other}` (expected paper-steps or full-coverage)"
            ))),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Policy::PaperSteps => "paper-steps",
            Policy::FullCoverage => "full-coverage",
        })
    }
}

/// Grid the tiles are laid out on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lattice {
    /// One site per pixel unit; used for simulation.
    Unit,
    /// One site per pixel pitch; used for rate and readout accounting.
    PixelPitch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Wire {
    W1,
    W2,
    W3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowEnable {
    C1,
    C2,
    C3,
}

impl RowEnable {
    pub const ALL: [RowEnable; 3] = [RowEnable::C1, RowEnable::C2, RowEnable::C3];
}

/// Column wire bank. The odd bank is the zigzag shifted by one column, used
/// by tiles whose origin sits on an odd unit column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WireBank {
    Even,
    Odd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WireOrder {
    Forward,
    Reversed,
}

/// Wire driving column `col` in a bank.
pub fn wire_at(bank: WireBank, col: usize) -> Wire {
    let shift = match bank {
        WireBank::Even => 0,
        WireBank::Odd => WIRE_PERIOD - 1,
    };
    [Wire::W1, Wire::W2, Wire::W3, Wire::W2][(col + shift) % WIRE_PERIOD]
}

/// Orientation of a three-column wire sequence, or `None` if it is not a
/// valid tile.
pub fn wire_order(seq: [Wire; 3]) -> Option<WireOrder> {
    match seq {
        [Wire::W1, Wire::W2, Wire::W3] => Some(WireOrder::Forward),
        [Wire::W3, Wire::W2, Wire::W1] => Some(WireOrder::Reversed),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    /// Unique across the whole schedule.
    pub id: u64,
    pub pass: usize,
    /// Top-left lattice site (x, y).
    pub origin: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    /// Output position (column, row) this tile contributes to.
    pub output: (usize, usize),
    /// Rank of this tile's row within its step.
    pub tile_row: usize,
    pub group: usize,
    pub enable: RowEnable,
    pub bank: WireBank,
}

impl Tile {
    pub fn wires(&self) -> Vec<Wire> {
        (0..self.cols).map(|c| wire_at(self.bank, self.origin.0 + c)).collect()
    }

    pub fn sites(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (ox, oy) = self.origin;
        (0..self.rows).flat_map(move |dy| (0..self.cols).map(move |dx| (ox + dx, oy + dy)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub index: usize,
    /// Origin y of each tile-row in the group.
    pub tile_rows: Vec<usize>,
    /// Lattice rows covered, half-open.
    pub span: (usize, usize),
    /// Indices into the step's tile list.
    pub tiles: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub pass: usize,
    pub x_phase: usize,
    pub y_phase: usize,
    pub tiles: Vec<Tile>,
    pub groups: Vec<Group>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSchedule {
    pub r: usize,
    pub stride_px: usize,
    pub policy: Policy,
    pub lattice: Lattice,
    pub lattice_size: (usize, usize),
    /// Tile stride in lattice sites.
    pub site_stride: usize,
    pub passes: usize,
    pub steps_per_pass: usize,
    /// Output grid (width, height).
    pub out_size: (usize, usize),
    pub steps: Vec<Step>,
    pub timeline: Option<Timeline>,
}

impl TileSchedule {
    /// Largest number of readout slots any step needs.
    pub fn readouts_per_step(&self) -> usize {
        self.steps.iter().map(|s| s.groups.len()).max().unwrap_or(0)
    }

    pub fn tiles(&self) -> impl Iterator<Item = (&Step, &Tile)> {
        self.steps.iter().flat_map(|s| s.tiles.iter().map(move |t| (s, t)))
    }

    /// Every step's tiles are pairwise disjoint. Returns the offending steps.
    pub fn disjointness_violations(&self) -> Vec<usize> {
        let mut bad = Vec::new();
        for step in &self.steps {
            let mut seen = std::collections::HashSet::new();
            if !step.tiles.iter().flat_map(Tile::sites).all(|s| seen.insert(s)) {
                bad.push(step.index);
            }
        }
        bad
    }

    /// Per pass, how often each output position is produced. A complete
    /// schedule has every count equal to one.
    pub fn coverage_counts(&self) -> Vec<Vec<u32>> {
        let (w, h) = self.out_size;
        let mut counts = vec![vec![0u32; w * h]; self.passes];
        for (step, tile) in self.tiles() {
            let (x, y) = tile.output;
            counts[step.pass][y * w + x] += 1;
        }
        counts
    }

    pub fn covers_exactly_once(&self) -> bool {
        self.coverage_counts().iter().all(|c| c.iter().all(|&n| n == 1))
    }

    /// Schedule dump as CSV, one row per tile. Timestamps are empty when no
    /// timeline has been built.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,pass,tile,origin_x,origin_y,group,enable,\
             expose_pos_start,read_pos_start,expose_neg_start,read_neg_start\n",
        );
        let index: BTreeMap<(usize, usize, usize), &GroupEvent> = self
            .timeline
            .iter()
            .flat_map(|t| &t.events)
            .map(|e| ((e.step, e.group, e.phase.index()), e))
            .collect();
        for (step, tile) in self.tiles() {
            let ev = |p: Phase| index.get(&(step.index, tile.group, p.index()));
            let fmt =
                |e: Option<&&GroupEvent>, f: fn(&GroupEvent) -> f64| e.map_or(String::new(), |e| format!("{:e}", f(e)));
            let (p, n) = (ev(Phase::Positive), ev(Phase::Negative));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:?},{},{},{},{}",
                step.index,
                step.pass,
                tile.id,
                tile.origin.0,
                tile.origin.1,
                tile.group,
                tile.enable,
                fmt(p, |e| e.expose_start),
                fmt(p, |e| e.read_start),
                fmt(n, |e| e.expose_start),
                fmt(n, |e| e.read_start),
            );
        }
        out
    }
}

pub fn check_geometry(r: usize, s: usize) -> Result<()> {
    if !SUPPORTED_KERNELS.contains(&r) {
        return Err(Error::UnsupportedGeometry(format!(
            "kernel side {r} (supported: 3, 5, 7, 9)"
        )));
    }
    if !SUPPORTED_STRIDES.contains(&s) {
        return Err(Error::UnsupportedGeometry(format!("stride {s} (supported: 2, 4)")));
    }
    Ok(())
}

/// Output stride in pixel units for a policy and a stride in pixels.
pub fn output_stride_units(policy: Policy, s: usize) -> usize {
    match policy {
        Policy::PaperSteps => s,
        Policy::FullCoverage => s / 2,
    }
}

/// Number of sub-kernel passes, `(r - 1) / 2`.
pub fn pass_count(r: usize) -> usize {
    (r - 1) / 2
}

/// Closed-form step count over all passes, `ceil((r + 1) / s) * (r - 1)`.
pub fn step_count_formula(r: usize, s: usize) -> usize {
    (r + 1).div_ceil(s) * (r - 1)
}

/// `[2 ceil((r + 1) / s) + 1] (r - 1)`: exposures per output channel once the
/// column-direction waits are included.
pub fn equivalent_exposures(r: usize, s: usize) -> usize {
    (2 * (r + 1).div_ceil(s) + 1) * (r - 1)
}

/// Exposures per output channel without the column-direction waits.
pub fn exposures_without_wait(r: usize, s: usize) -> usize {
    2 * step_count_formula(r, s)
}

/// Plan on the default lattice for the policy: pixel pitch for
/// [`Policy::PaperSteps`], pixel units for [`Policy::FullCoverage`].
pub fn plan_steps(r: usize, s: usize, cfg: &ValidatedConfig, policy: Policy) -> Result<TileSchedule> {
    let lattice = match policy {
        Policy::PaperSteps => Lattice::PixelPitch,
        Policy::FullCoverage => Lattice::Unit,
    };
    plan_on(r, s, cfg, policy, lattice)
}

pub fn plan_on(r: usize, s: usize, cfg: &ValidatedConfig, policy: Policy, lattice: Lattice) -> Result<TileSchedule> {
    check_geometry(r, s)?;
    let (w, h) = match lattice {
        Lattice::Unit => (cfg.unit_width(), cfg.unit_height()),
        Lattice::PixelPitch => (cfg.width_px, cfg.height_px),
    };
    let (stride, period_x, period_y) = match policy {
        Policy::PaperSteps => (s, 2 * s, s * (r + 1).div_ceil(s)),
        Policy::FullCoverage => {
            if lattice != Lattice::Unit {
                return Err(Error::UnsupportedGeometry(
                    "full-coverage tiling is defined on the unit lattice only".into(),
                ));
            }
            (output_stride_units(policy, s), WIRE_PERIOD, r + 1)
        }
    };
    if w < r || h < r {
        return Err(Error::UnsupportedGeometry(format!(
            "a {r}x{r} kernel does not fit a {w}x{h} lattice"
        )));
    }
    let out_size = ((w - r) / stride + 1, (h - r) / stride + 1);
    let passes = pass_count(r);

    let mut steps = Vec::new();
    let mut next_id = 0u64;
    for pass in 0..passes {
        for x_phase in (0..period_x).step_by(stride) {
            for y_phase in (0..period_y).step_by(stride) {
                let xs: Vec<usize> = (x_phase..=w - r).step_by(period_x).collect();
                let ys: Vec<usize> = (y_phase..=h - r).step_by(period_y).collect();
                let mut tiles = Vec::with_capacity(xs.len() * ys.len());
                for (row, &oy) in ys.iter().enumerate() {
                    for &ox in &xs {
                        let x = ox + 2 * pass;
                        tiles.push(Tile {
                            id: next_id,
                            pass,
                            origin: (x, oy),
                            rows: r,
                            cols: SUB_KERNEL_COLS,
                            output: (ox / stride, oy / stride),
                            tile_row: row,
                            group: row / ROWS_PER_GROUP,
                            enable: RowEnable::ALL[row % ROWS_PER_GROUP],
                            bank: if x % 2 == 0 { WireBank::Even } else { WireBank::Odd },
                        });
                        next_id += 1;
                    }
                }
                let groups = ys
                    .chunks(ROWS_PER_GROUP)
                    .enumerate()
                    .map(|(g, rows)| Group {
                        index: g,
                        tile_rows: rows.to_vec(),
                        span: (rows[0], rows[rows.len() - 1] + r),
                        tiles: tiles
                            .iter()
                            .enumerate()
                            .filter(|(_, t)| t.group == g)
                            .map(|(i, _)| i)
                            .collect(),
                    })
                    .collect();
                steps.push(Step {
                    index: steps.len(),
                    pass,
                    x_phase,
                    y_phase,
                    tiles,
                    groups,
                });
            }
        }
    }
    let steps_per_pass = steps.len() / passes;
    Ok(TileSchedule {
        r,
        stride_px: s,
        policy,
        lattice,
        lattice_size: (w, h),
        site_stride: stride,
        passes,
        steps_per_pass,
        out_size,
        steps,
        timeline: None,
    })
}

/// Result of the interlaced-pipeline condition `(n - 1) t_rd >= t_rst + t_expo`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineCheck {
    pub satisfied: bool,
    pub slack: f64,
}

/// While `n_rd - 1` other groups are being read, a freshly read group must be
/// able to reset and expose again.
pub fn check_pipeline(n_rd: usize, t_rd: f64, t_rst: f64, t_expo: f64) -> PipelineCheck {
    let slack = n_rd.saturating_sub(1) as f64 * t_rd - t_rst - t_expo;
    PipelineCheck {
        satisfied: slack >= 0.0,
        slack,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pacing {
    /// Let readout slots slip when an exposure is not finished in time.
    Stretch,
    /// Refuse any step that cannot keep the readout chain busy.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingParams {
    pub t_rst: f64,
    pub t_expo: f64,
    pub t_rd: f64,
    pub pacing: Pacing,
}

impl TimingParams {
    pub fn from_config(cfg: &ValidatedConfig) -> Self {
        Self {
            t_rst: cfg.t_rst,
            t_expo: cfg.t_expo(),
            t_rd: cfg.t_rd(),
            pacing: Pacing::Stretch,
        }
    }
}

/// Reset, exposure and readout of one group in one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupEvent {
    pub step: usize,
    pub pass: usize,
    pub phase: Phase,
    pub group: usize,
    /// Earliest time the group's units are free to reset.
    pub release: f64,
    pub expose_start: f64,
    pub expose_end: f64,
    pub read_start: f64,
    pub read_end: f64,
}

impl GroupEvent {
    /// Idle time between the end of exposure and the start of readout.
    pub fn slack(&self) -> f64 {
        self.read_start - self.expose_end
    }
}

/// A column-direction transition where the next step waits for the previous
/// one to finish completely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stall {
    pub from_step: usize,
    pub to_step: usize,
    /// The transition back to the first step of the next frame.
    pub wraps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<GroupEvent>,
    pub stalls: Vec<Stall>,
    pub frame_time: f64,
}

impl Timeline {
    /// Exposures per frame counting each stall as one extra exposure slot.
    pub fn equivalent_exposures(&self, steps: usize) -> usize {
        2 * steps + self.stalls.len()
    }
}

struct PrevStep {
    /// Group span and negative-phase read end.
    reads: Vec<((usize, usize), f64)>,
    /// Start of the step's first readout; later steps never start earlier.
    first_read: f64,
    done: f64,
}

fn column_transition(a: &Step, b: &Step) -> bool {
    a.x_phase != b.x_phase || a.pass != b.pass
}

/// Assign reset/expose/read times to every group of every step.
///
/// Reads are serial on the shared column chain in the order pass, step,
/// phase, group. A group resets as soon as its units are free: the negative
/// exposure right after its positive readout, the positive exposure of the
/// next step once every overlapping group of the previous step has been read.
/// When the next step moves in the column direction it waits for the whole
/// previous step instead.
pub fn build_timeline(mut sched: TileSchedule, timing: &TimingParams) -> Result<TileSchedule> {
    let TimingParams {
        t_rst,
        t_expo,
        t_rd,
        pacing,
    } = *timing;
    if pacing == Pacing::Strict {
        for step in &sched.steps {
            let n = step.groups.len();
            let check = check_pipeline(n, t_rd, t_rst, t_expo);
            if n >= 2 && !check.satisfied {
                return Err(Error::InfeasibleTiming(format!(
                    "step {} has {n} groups; slack {:.3e} s < 0",
                    step.index, check.slack
                )));
            }
        }
    }

    let mut events = Vec::new();
    let mut stalls = Vec::new();
    let mut chain_free = 0.0f64;
    let mut prev: Option<PrevStep> = None;

    for k in 0..sched.steps.len() {
        let step = &sched.steps[k];
        let col = k > 0 && column_transition(&sched.steps[k - 1], step);
        if col {
            stalls.push(Stall {
                from_step: k - 1,
                to_step: k,
                wraps: false,
            });
        }
        let mut pos_read_end = vec![0.0; step.groups.len()];
        let mut neg_done = Vec::with_capacity(step.groups.len());
        for phase in Phase::BOTH {
            for g in &step.groups {
                let release = match (phase, &prev) {
                    (Phase::Negative, _) => pos_read_end[g.index],
                    (Phase::Positive, None) => 0.0,
                    (Phase::Positive, Some(p)) if col => p.done,
                    (Phase::Positive, Some(p)) => p
                        .reads
                        .iter()
                        .filter(|(s, _)| s.0 < g.span.1 && g.span.0 < s.1)
                        .map(|(_, t)| *t)
                        .fold(p.first_read, f64::max),
                };
                let expose_start = release + t_rst;
                let expose_end = expose_start + t_expo;
                let read_start = expose_end.max(chain_free);
                let read_end = read_start + t_rd;
                chain_free = read_end;
                match phase {
                    Phase::Positive => pos_read_end[g.index] = read_end,
                    Phase::Negative => neg_done.push((g.span, read_end)),
                }
                events.push(GroupEvent {
                    step: step.index,
                    pass: step.pass,
                    phase,
                    group: g.index,
                    release,
                    expose_start,
                    expose_end,
                    read_start,
                    read_end,
                });
            }
        }
        let first_read = events
            .iter()
            .rev()
            .take_while(|e: &&GroupEvent| e.step == step.index)
            .last()
            .map_or(chain_free, |e| e.read_start);
        let done = prev.as_ref().map_or(0.0, |p| p.done).max(chain_free);
        prev = Some(PrevStep {
            reads: neg_done,
            first_read,
            done,
        });
    }
    let n = sched.steps.len();
    if n > 1 && column_transition(&sched.steps[n - 1], &sched.steps[0]) {
        stalls.push(Stall {
            from_step: n - 1,
            to_step: 0,
            wraps: true,
        });
    }
    sched.timeline = Some(Timeline {
        events,
        stalls,
        frame_time: chain_free,
    });
    Ok(sched)
}

/// Timeline legality: every violated ordering rule, empty when legal.
pub fn timeline_violations(tl: &Timeline, timing: &TimingParams) -> Vec<String> {
    let eps = 1e-15;
    let mut v = Vec::new();
    let mut last_read_end = f64::NEG_INFINITY;
    let mut pos_read: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for e in &tl.events {
        if e.slack() < -eps {
            v.push(format!(
                "step {} group {} {}: read before exposure end",
                e.step, e.group, e.phase
            ));
        }
        if e.expose_start + eps < e.release + timing.t_rst {
            v.push(format!(
                "step {} group {} {}: exposure before reset",
                e.step, e.group, e.phase
            ));
        }
        if e.read_start + eps < last_read_end {
            v.push(format!(
                "step {} group {} {}: overlapping readouts",
                e.step, e.group, e.phase
            ));
        }
        match e.phase {
            Phase::Positive => {
                pos_read.insert((e.step, e.group), e.read_end);
            }
            Phase::Negative => match pos_read.get(&(e.step, e.group)) {
                Some(&t) if e.release + eps >= t => {}
                _ => v.push(format!(
                    "step {} group {}: negative phase before positive read",
                    e.step, e.group
                )),
            },
        }
        last_read_end = e.read_end;
    }
    v
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WiringReport {
    pub forward: usize,
    pub reversed: usize,
    pub violations: Vec<String>,
}

/// Check every tile sees (W1, W2, W3) or (W3, W2, W1) and that the tile-rows
/// of each group sit on distinct row enables.
pub fn wiring_check(sched: &TileSchedule) -> WiringReport {
    let mut rep = WiringReport::default();
    for step in &sched.steps {
        for t in &step.tiles {
            let w = t.wires();
            match <[Wire; 3]>::try_from(w.as_slice()).ok().and_then(wire_order) {
                Some(WireOrder::Forward) => rep.forward += 1,
                Some(WireOrder::Reversed) => rep.reversed += 1,
                None => rep.violations.push(format!(
                    "step {} tile {} at {:?}: wire sequence {:?}",
                    step.index, t.id, t.origin, w
                )),
            }
        }
        for g in &step.groups {
            if g.tile_rows.len() > ROWS_PER_GROUP {
                rep.violations.push(format!(
                    "step {} group {}: {} tile-rows",
                    step.index,
                    g.index,
                    g.tile_rows.len()
                ));
            }
            let mut by_row: BTreeMap<usize, RowEnable> = BTreeMap::new();
            for &i in &g.tiles {
                let t = &step.tiles[i];
                if let Some(prev) = by_row.insert(t.origin.1, t.enable) {
                    if prev != t.enable {
                        rep.violations.push(format!(
                            "step {} group {}: tile-row {} split across enables",
                            step.index, g.index, t.origin.1
                        ));
                    }
                }
            }
            let mut enables: Vec<RowEnable> = by_row.values().copied().collect();
            enables.sort_by_key(|e| *e as u8);
            let n = enables.len();
            enables.dedup();
            if enables.len() != n {
                rep.violations.push(format!(
                    "step {} group {}: tile-rows share a row enable",
                    step.index, g.index
                ));
            }
        }
    }
    rep
}

/// One unit-row of a rolling-shutter frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowEvent {
    pub row: usize,
    pub reset_start: f64,
    pub expose_start: f64,
    pub expose_end: f64,
    pub read_start: f64,
    pub read_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingPlan {
    pub rows: Vec<RowEvent>,
    /// Conversions per unit-row (one per photodiode of the shared FD node).
    pub conversions_per_row: usize,
    pub frame_time: f64,
}

/// Conventional rolling shutter: unit-rows are reset one readout apart and
/// read in order, four conversions per row.
pub fn traditional_mode_plan(cfg: &ValidatedConfig, t_expo: f64) -> RollingPlan {
    let conversions = 4;
    let t_row = conversions as f64 / cfg.f_adc;
    let mut rows = Vec::with_capacity(cfg.unit_height());
    let mut free = 0.0f64;
    for row in 0..cfg.unit_height() {
        let reset_start = row as f64 * t_row;
        let expose_start = reset_start + cfg.t_rst;
        let expose_end = expose_start + t_expo;
        let read_start = expose_end.max(free);
        let read_end = read_start + t_row;
        free = read_end;
        rows.push(RowEvent {
            row,
            reset_start,
            expose_start,
            expose_end,
            read_start,
            read_end,
        });
    }
    RollingPlan {
        rows,
        conversions_per_row: conversions,
        frame_time: free,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SensorConfig;
    use proptest::prelude::*;

    fn cfg(px: usize) -> ValidatedConfig {
        SensorConfig {
            width_px: px,
            height_px: px,
            ..Default::default()
        }
        .validate()
        .unwrap()
    }

    #[test]
    fn stepped_policy_counts() {
        let c = cfg(128);
        for (r, per_pass) in [(3, 4), (5, 6), (7, 8), (9, 10)] {
            let s = plan_steps(r, 2, &c, Policy::PaperSteps).unwrap();
            assert_eq!(s.steps_per_pass, per_pass, "r = {r}");
            assert_eq!(s.steps.len(), step_count_formula(r, 2));
        }
    }

    #[test]
    fn eleven_readouts_per_step() {
        let s = plan_steps(3, 2, &cfg(128), Policy::PaperSteps).unwrap();
        assert!(s.steps.iter().all(|st| st.groups.len() == 11));
        assert_eq!(s.steps[0].groups.last().unwrap().tile_rows.len(), 2);
    }

    #[test]
    fn exposure_counts() {
        assert_eq!(equivalent_exposures(3, 2), 10);
        assert_eq!(equivalent_exposures(5, 2), 28);
        assert_eq!(exposures_without_wait(3, 2), 8);
    }

    #[test]
    fn timeline_stalls_match_exposure_formula() {
        let c = cfg(128);
        for r in SUPPORTED_KERNELS {
            let s = plan_steps(r, 2, &c, Policy::PaperSteps).unwrap();
            let n = s.steps.len();
            let s = build_timeline(s, &TimingParams::from_config(&c)).unwrap();
            let tl = s.timeline.unwrap();
            assert_eq!(tl.equivalent_exposures(n), equivalent_exposures(r, 2), "r = {r}");
        }
    }

    #[test]
    fn stalls_sit_at_column_transitions() {
        let c = cfg(128);
        let s = plan_steps(3, 2, &c, Policy::PaperSteps).unwrap();
        let tl = build_timeline(s, &TimingParams::from_config(&c))
            .unwrap()
            .timeline
            .unwrap();
        let at: Vec<(usize, usize)> = tl.stalls.iter().map(|s| (s.from_step, s.to_step)).collect();
        assert_eq!(at, vec![(1, 2), (3, 0)]);
    }

    #[test]
    fn pipeline_examples() {
        let p = check_pipeline(11, 9.09e-6, 0.1e-6, 26.04e-6);
        assert!(p.satisfied);
        assert!((p.slack - 64.76e-6).abs() < 1e-9);
        let p = check_pipeline(1, 9.09e-6, 0.1e-6, 26.04e-6);
        assert!(!p.satisfied);
        assert!((p.slack + 26.14e-6).abs() < 1e-12);
        assert!(check_pipeline(2, 1e-6, 0.0, 0.0).satisfied);
    }

    #[test]
    fn single_group_reads_after_exposure() {
        let c = cfg(8);
        let s = plan_on(3, 4, &c, Policy::PaperSteps, Lattice::Unit).unwrap();
        assert_eq!(s.steps[0].groups.len(), 1);
        let timing = TimingParams::from_config(&c);
        let tl = build_timeline(s, &timing).unwrap().timeline.unwrap();
        for e in &tl.events {
            assert!(e.read_start >= e.expose_end);
        }
        assert!(timeline_violations(&tl, &timing).is_empty());
    }

    #[test]
    fn strict_pacing_rejects_short_pipeline() {
        let c = cfg(128);
        let s = plan_steps(3, 2, &c, Policy::PaperSteps).unwrap();
        let mut timing = TimingParams::from_config(&c);
        timing.pacing = Pacing::Strict;
        assert!(build_timeline(s.clone(), &timing).is_ok());
        timing.t_rd = 1e-6;
        assert!(matches!(build_timeline(s, &timing), Err(Error::InfeasibleTiming(_))));
    }

    #[test]
    fn wiring_clean_for_stepped_policy() {
        let s = plan_steps(3, 2, &cfg(128), Policy::PaperSteps).unwrap();
        let rep = wiring_check(&s);
        assert!(rep.violations.is_empty(), "{:?}", rep.violations);
        assert!(rep.forward > 0 && rep.reversed > 0);
        // Steps 1-2 run forward, steps 3-4 reversed.
        for st in &s.steps {
            let want = if st.index < 2 {
                WireOrder::Forward
            } else {
                WireOrder::Reversed
            };
            for t in &st.tiles {
                let w: [Wire; 3] = t.wires().try_into().unwrap();
                assert_eq!(wire_order(w), Some(want));
            }
        }
    }

    #[test]
    fn shifted_tile_is_reversed_not_wrong() {
        let mut s = plan_steps(3, 2, &cfg(128), Policy::PaperSteps).unwrap();
        s.steps[0].tiles[0].origin.0 += 2;
        let rep = wiring_check(&s);
        assert!(rep.violations.is_empty());
        s.steps[0].tiles[0].origin.0 += 1;
        assert_eq!(wiring_check(&s).violations.len(), 1);
    }

    #[test]
    fn two_rows_on_one_enable_reported() {
        let mut s = plan_steps(3, 2, &cfg(128), Policy::PaperSteps).unwrap();
        let step = &mut s.steps[0];
        for i in step.groups[0].tiles.clone() {
            if step.tiles[i].tile_row == 1 {
                step.tiles[i].enable = RowEnable::C1;
            }
        }
        let rep = wiring_check(&s);
        assert_eq!(rep.violations.len(), 1, "{:?}", rep.violations);
    }

    #[test]
    fn traditional_rows_in_order() {
        let c = cfg(128);
        let plan = traditional_mode_plan(&c, c.t_expo());
        assert_eq!(plan.rows.len(), 64);
        assert!(plan.rows.windows(2).all(|w| w[1].read_start >= w[0].read_end));
        assert!(plan.rows.iter().all(|r| r.read_start >= r.expose_end));
        let t_row = 4.0 / c.f_adc;
        let want = c.t_rst + c.t_expo() + 64.0 * t_row;
        assert!((plan.frame_time - want).abs() < 1e-12);
    }

    #[test]
    fn unsupported_geometry() {
        let c = cfg(128);
        assert!(matches!(
            plan_steps(4, 2, &c, Policy::PaperSteps),
            Err(Error::UnsupportedGeometry(_))
        ));
        assert!(matches!(
            plan_steps(3, 3, &c, Policy::PaperSteps),
            Err(Error::UnsupportedGeometry(_))
        ));
        assert!(plan_steps(9, 2, &cfg(16), Policy::FullCoverage).is_err());
    }

    /// Brute-force oracle: place tiles greedily from an explicit list of all
    /// valid output positions and check the planner's union against it.
    fn brute_force_outputs(units_w: usize, units_h: usize, r: usize, stride: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        let mut y = 0;
        while y + r <= units_h {
            let mut x = 0;
            while x + r <= units_w {
                v.push((x / stride, y / stride));
                x += stride;
            }
            y += stride;
        }
        v
    }

    #[test]
    fn full_coverage_phase_count_r3_s2() {
        let s = plan_steps(3, 2, &cfg(128), Policy::FullCoverage).unwrap();
        assert_eq!(s.steps_per_pass, 16);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn schedules_are_legal(
            r in prop::sample::select(SUPPORTED_KERNELS.to_vec()),
            s in prop::sample::select(SUPPORTED_STRIDES.to_vec()),
            half in 10usize..40,
            policy in prop::sample::select(vec![Policy::PaperSteps, Policy::FullCoverage]),
        ) {
            let c = cfg(2 * half);
            let sched = plan_on(r, s, &c, policy, Lattice::Unit).unwrap();
            prop_assert!(sched.disjointness_violations().is_empty());
            prop_assert!(sched.covers_exactly_once());
            let mut want = brute_force_outputs(half, half, r, sched.site_stride);
            want.sort();
            for p in 0..sched.passes {
                let mut got: Vec<(usize, usize)> = sched.tiles().filter(|(st, _)| st.pass == p).map(|(_, t)| t.output).collect();
                got.sort();
                prop_assert_eq!(&got, &want);
            }
            prop_assert!(wiring_check(&sched).violations.is_empty());
            let timing = TimingParams::from_config(&c);
            let tl = build_timeline(sched, &timing).unwrap().timeline.unwrap();
            prop_assert!(timeline_violations(&tl, &timing).is_empty());
        }
    }
}
