//! The stages behind the CLI subcommands and the artifacts they write.
//!
//! Every artifact is a pure function of the configuration and the seed, and
//! floats are printed in shortest round-trip form, so repeated runs produce
//! byte-identical CSV files.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::barriers::{
    check_mixed_derivative, check_nonparallelity, check_smooth, extract_barriers, forbidden_slope, mode_agreement, smooth_barriers,
    time_indices, BarrierField, NodeMargin, SmoothBarriers, SmoothCheck,
};
use crate::config::RunConfig;
use crate::error::{ConfigError, PipelineError};
use crate::evaluate::{estimate_j, simulate_controlled_path, write_path_csv, EvaluationReport, PathPoint, SystemState, MIN_PATHS};
use crate::filter::{simulate_truth_and_filter, FilterPath, TruthOptions};
use crate::hjb::{backward_solve_with, mixed_derivative_margin, Grid4D, GridSpec, MixedMargin, Mode, PolicyField, SolveStats, ValueField};
use crate::model::ModelParams;
use crate::rng::{path_stream, stream};
use crate::transform::{storage_system_spec, StorageSystem};

/// Stream indices at and above this are reserved for the filter demo, away
/// from the `(start, path)` indices of the controlled paths.
const FILTER_STREAM_BASE: u64 = 1 << 63;

const DUMP_MAGIC: &[u8; 4] = b"ESVF";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Extract,
    Check,
    Simulate,
    Evaluate,
    FilterDemo,
    All,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Extract => "extract",
            Command::Check => "check",
            Command::Simulate => "simulate",
            Command::Evaluate => "evaluate",
            Command::FilterDemo => "filter-demo",
            Command::All => "all",
        }
    }
}

/// A validated configuration with its resolved parameters.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub params: ModelParams,
}

impl Run {
    pub fn new(config: RunConfig) -> Result<Self, ConfigError> {
        let params = config.validate()?;
        Ok(Self { config, params })
    }
}

/// Output directory of one invocation and the files written into it.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    files: Vec<String>,
}

#[derive(Debug, Serialize)]
struct FileEntry {
    name: String,
    bytes: u64,
    sha256: String,
}

/// What went into a run, recorded in `manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestInputs {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub config_sha256: Option<String>,
    pub field_path: Option<PathBuf>,
    pub field_sha256: Option<String>,
    pub threads: usize,
    pub resolved_config: RunConfig,
    pub params: ModelParams,
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl RunDir {
    /// Creates `<root>/<subcommand>_<UTC timestamp>`, with a numeric suffix
    /// if that name is taken.
    pub fn create(root: &Path, subcommand: &str) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let base = format!("{subcommand}_{stamp}");
        let mut path = root.join(&base);
        let mut k = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    k += 1;
                    path = root.join(format!("{base}-{k}"));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(Self { path, files: Vec::new() })
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> io::Result<()> {
        let mut out = BufWriter::new(File::create(self.path.join(name))?);
        f(&mut out)?;
        out.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> io::Result<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)
        })
    }

    /// Writes `manifest.json` with the inputs and a checksum of every file so far.
    pub fn write_manifest(&self, inputs: &ManifestInputs) -> io::Result<()> {
        let files = self
            .files
            .iter()
            .map(|name| {
                let p = self.path.join(name);
                Ok(FileEntry {
                    name: name.clone(),
                    bytes: fs::metadata(&p)?.len(),
                    sha256: sha256_file(&p)?,
                })
            })
            .collect::<io::Result<Vec<_>>>()?;
        let manifest = serde_json::json!({
            "package": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "created": chrono::Utc::now().to_rfc3339(),
            "inputs": inputs,
            "files": files,
        });
        let mut out = BufWriter::new(File::create(self.path.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut out, &manifest)?;
        writeln!(out)?;
        out.flush()
    }
}

pub struct Solved {
    pub value: ValueField,
    pub policy: PolicyField,
    pub stats: SolveStats,
}

pub fn solve(run: &Run) -> Result<Solved, PipelineError> {
    log::info!("solving on a {:?} grid", run.config.grid);
    let (value, policy, stats) = backward_solve_with(&run.params, &run.config.grid, &run.config.solver)?;
    Ok(Solved { value, policy, stats })
}

/// Long-format CSV `s,q,nu1,t,V,mode,rate` over every `time_stride`-th slice.
pub fn write_value_policy_csv<W: Write + ?Sized>(value: &ValueField, policy: &PolicyField, time_stride: usize, out: &mut W) -> io::Result<()> {
    let g = &value.grid;
    writeln!(out, "s,q,nu1,t,V,mode,rate")?;
    for i_t in time_indices(g.n_t(), time_stride) {
        for i_q in 0..g.n_q() {
            for i_nu in 0..g.n_nu() {
                for i_s in 0..g.n_s() {
                    let mode = policy.mode(i_s, i_q, i_nu, i_t);
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{}",
                        g.s[i_s],
                        g.q[i_q],
                        g.nu[i_nu],
                        g.t[i_t],
                        value.at(i_s, i_q, i_nu, i_t),
                        mode.as_str(),
                        policy.rate(i_s, i_q, i_nu, i_t)
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Binary dump of the full value and policy fields (little endian): magic,
/// version, grid spec, capacity and horizon, then every value and mode code.
pub fn write_field_dump<W: Write + ?Sized>(value: &ValueField, policy: &PolicyField, params: &ModelParams, out: &mut W) -> io::Result<()> {
    let spec = value.grid.spec();
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&DUMP_VERSION.to_le_bytes())?;
    for x in [spec.s_min, spec.s_max] {
        out.write_all(&x.to_le_bytes())?;
    }
    for n in [spec.n_s, spec.n_q, spec.n_nu, spec.n_t] {
        out.write_all(&(n as u64).to_le_bytes())?;
    }
    for x in [params.q_lo, params.q_hi, params.horizon] {
        out.write_all(&x.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(value.values.len() * 8);
    for v in &value.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    let codes: Vec<u8> = policy.modes.iter().map(|m| *m as u8).collect();
    out.write_all(&codes)
}

/// Reads a dump written by [`write_field_dump`]. The capacity and horizon
/// must match `params`.
pub fn read_field_dump<R: Read + ?Sized>(input: &mut R, params: &ModelParams) -> Result<Solved, PipelineError> {
    let bad = |m: String| PipelineError::Dump(m);
    let mut head = [0u8; 4];
    input.read_exact(&mut head)?;
    if &head != DUMP_MAGIC {
        return Err(bad("not a field dump".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != DUMP_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let f = |input: &mut R| -> io::Result<[u8; 8]> {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        Ok(b)
    };
    let s_min = f64::from_le_bytes(f(input)?);
    let s_max = f64::from_le_bytes(f(input)?);
    let mut counts = [0usize; 4];
    for c in &mut counts {
        *c = usize::try_from(u64::from_le_bytes(f(input)?)).map_err(|_| bad("node count overflows".into()))?;
    }
    let stored = [f64::from_le_bytes(f(input)?), f64::from_le_bytes(f(input)?), f64::from_le_bytes(f(input)?)];
    if stored != [params.q_lo, params.q_hi, params.horizon] {
        return Err(bad(format!(
            "dump was made for q in [{}, {}] and T = {}, parameters have [{}, {}] and {}",
            stored[0], stored[1], stored[2], params.q_lo, params.q_hi, params.horizon
        )));
    }
    let spec = GridSpec {
        s_min,
        s_max,
        n_s: counts[0],
        n_q: counts[1],
        n_nu: counts[2],
        n_t: counts[3],
    };
    let grid = Grid4D::new(&spec, params).map_err(|e| bad(e.to_string()))?;
    let n = grid.slice_len() * grid.n_t();
    let mut raw = vec![0u8; n * 8];
    input.read_exact(&mut raw)?;
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut codes = vec![0u8; n];
    input.read_exact(&mut codes)?;
    let modes = codes
        .iter()
        .map(|&c| Mode::from_u8(c).ok_or_else(|| bad(format!("invalid mode code {c}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if input.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    let bounds = grid.q.iter().map(|&q| params.rate_bounds(q)).collect();
    Ok(Solved {
        value: ValueField { grid: grid.clone(), values },
        policy: PolicyField { grid, modes, bounds },
        stats: SolveStats::default(),
    })
}

pub fn load_field(path: &Path, params: &ModelParams) -> Result<Solved, PipelineError> {
    let mut input = io::BufReader::new(File::open(path)?);
    read_field_dump(&mut input, params)
}

/// Levels on the grid line closest to `(q, nu1, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub q: f64,
    pub nu1: f64,
    pub t: f64,
    pub buy: f64,
    pub buy_status: &'static str,
    pub sell: f64,
    pub sell_status: &'static str,
}

pub fn thresholds_at(barriers: &BarrierField, q: f64, nu1: f64, t: f64) -> Thresholds {
    let (i_q, i_nu, i_t) = (Grid4D::nearest(&barriers.q, q), Grid4D::nearest(&barriers.nu, nu1), Grid4D::nearest(&barriers.t, t));
    let (b, s) = (barriers.buy_at(i_q, i_nu, i_t), barriers.sell_at(i_q, i_nu, i_t));
    Thresholds {
        q: barriers.q[i_q],
        nu1: barriers.nu[i_nu],
        t: barriers.t[i_t],
        buy: b.value(),
        buy_status: b.label(),
        sell: s.value(),
        sell_status: s.label(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub grid: GridSpec,
    pub stats: SolveStats,
    pub max_abs_value: f64,
    /// Switching levels at mid capacity, `nu1 = 0.5`, `t = 0`.
    pub thresholds: Thresholds,
}

pub fn solve_summary(run: &Run, solved: &Solved) -> SolveSummary {
    let barriers = extract_barriers(&solved.policy);
    let mid = 0.5 * (run.params.q_lo + run.params.q_hi);
    SolveSummary {
        grid: solved.value.grid.spec(),
        stats: solved.stats,
        max_abs_value: solved.value.max_abs(),
        thresholds: thresholds_at(&barriers, mid, 0.5, 0.0),
    }
}

pub struct Extracted {
    pub barriers: BarrierField,
    pub smooth: SmoothBarriers,
    /// Fraction of grid nodes whose mode the smoothed rule reproduces.
    pub agreement: f64,
}

pub fn extract(run: &Run, solved: &Solved) -> Result<Extracted, PipelineError> {
    let barriers = extract_barriers(&solved.policy);
    let smooth = smooth_barriers(&barriers, run.config.smoothing)?;
    let agreement = mode_agreement(&solved.policy, &smooth);
    Ok(Extracted { barriers, smooth, agreement })
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelFit {
    pub nodes: usize,
    pub max_deviation: f64,
    pub rms_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractSummary {
    pub flagged_lines: usize,
    pub mode_agreement: f64,
    pub buy: LevelFit,
    pub sell: LevelFit,
}

pub fn extract_summary(ex: &Extracted) -> ExtractSummary {
    let fit = |l: &crate::barriers::SmoothLevel| LevelFit {
        nodes: l.nodes,
        max_deviation: l.max_deviation,
        rms_deviation: l.rms_deviation,
    };
    ExtractSummary {
        flagged_lines: ex.barriers.flagged().len(),
        mode_agreement: ex.agreement,
        buy: fit(&ex.smooth.buy),
        sell: fit(&ex.smooth.sell),
    }
}

/// Smoothed levels on the `(q, nu1, t)` nodes: `q,nu1,t,buy,sell`.
pub fn write_smooth_levels_csv<W: Write + ?Sized>(smooth: &SmoothBarriers, barriers: &BarrierField, time_stride: usize, out: &mut W) -> io::Result<()> {
    writeln!(out, "q,nu1,t,buy,sell")?;
    for i_t in time_indices(barriers.t.len(), time_stride) {
        for &q in &barriers.q {
            for &nu in &barriers.nu {
                let t = barriers.t[i_t];
                writeln!(out, "{},{},{},{},{}", q, nu, t, smooth.buy.poly.eval(q, nu, t), smooth.sell.poly.eval(q, nu, t))?;
            }
        }
    }
    Ok(())
}

/// Admissibility of the solved field and the extracted levels.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    /// `min |V_sq - 1|` over all slices.
    pub mixed: MixedMargin,
    /// The same on the terminal slice alone, where it equals `1 - cS`.
    pub terminal_mixed: MixedMargin,
    pub parallel_min_margin: f64,
    pub parallel_min_signed_margin: f64,
    pub parallel_worst: Option<NodeMargin>,
    pub parallel_nodes_checked: usize,
    pub parallel_failing: usize,
    pub smooth: SmoothCheck,
    pub forbidden_slope_mid: f64,
    pub flagged_lines: usize,
    pub passed: bool,
    pub failures: Vec<String>,
}

pub fn check(run: &Run, solved: &Solved, ex: &Extracted) -> (CheckReport, Vec<NodeMargin>) {
    let g = &solved.value.grid;
    let mixed = check_mixed_derivative(&solved.value);
    let terminal_mixed = mixed_derivative_margin(&solved.value, [g.n_t() - 1]);
    let parallel = check_nonparallelity(&ex.barriers, &run.params);
    let smooth = check_smooth(&ex.smooth, &run.params, &g.q, &g.nu, &g.t);
    let mut failures = Vec::new();
    if !(mixed.min_margin > 0.0) {
        failures.push(format!("min |V_sq - 1| = {} at s={}, q={}, nu1={}, t={}", mixed.min_margin, mixed.at_s, mixed.at_q, mixed.at_nu1, mixed.at_t));
    }
    if !(parallel.min_margin > 0.0) {
        failures.push(format!("{} node(s) with nonpositive non-parallelity margin", parallel.failing.len()));
    }
    if !(smooth.min_gap > 0.0) {
        failures.push(format!("smoothed levels cross at (q, nu1, t) = {:?}", smooth.gap_at));
    }
    if !(smooth.min_signed_margin > 0.0) {
        failures.push(format!(
            "smoothed levels reach the forbidden slope at (q, nu1, t) = {:?} (margin {})",
            smooth.margin_at, smooth.min_signed_margin
        ));
    }
    let report = CheckReport {
        mixed,
        terminal_mixed,
        parallel_min_margin: parallel.min_margin,
        parallel_min_signed_margin: parallel.min_signed_margin,
        parallel_worst: parallel.worst,
        parallel_nodes_checked: parallel.nodes_checked,
        parallel_failing: parallel.failing.len(),
        smooth,
        forbidden_slope_mid: forbidden_slope(&run.params, 0.5),
        flagged_lines: ex.barriers.flagged().len(),
        passed: failures.is_empty(),
        failures,
    };
    (report, parallel.failing)
}

pub fn write_node_margins_csv<W: Write + ?Sized>(nodes: &[NodeMargin], out: &mut W) -> io::Result<()> {
    writeln!(out, "barrier,q,nu1,t,slope,margin,signed")?;
    for n in nodes {
        writeln!(out, "{},{},{},{},{},{},{}", n.barrier, n.q, n.nu1, n.t, n.slope, n.margin, n.signed)?;
    }
    Ok(())
}

/// The switching system of the smoothed levels, checked on the grid axes.
pub fn storage_system(run: &Run, solved: &Solved, ex: &Extracted) -> Result<StorageSystem, PipelineError> {
    let g = &solved.value.grid;
    Ok(storage_system_spec(&run.params, &ex.smooth, &g.q, &g.nu, &g.t)?)
}

/// Path count actually used: at least the estimator's minimum.
pub fn effective_paths(requested: usize) -> usize {
    if requested < MIN_PATHS {
        log::warn!("{requested} paths requested, using the minimum of {MIN_PATHS}");
    }
    requested.max(MIN_PATHS)
}

pub fn evaluate(run: &Run, solved: &Solved, system: &StorageSystem) -> Result<EvaluationReport, PipelineError> {
    let sim = &run.config.simulation;
    let mut spec = sim.spec();
    spec.n_paths = effective_paths(spec.n_paths);
    let mut report = estimate_j(&run.params, system, &sim.starts, &spec, run.config.seed)?;
    report.attach_grid(&solved.value);
    Ok(report)
}

pub struct SimulatedPath {
    pub start: usize,
    pub path: usize,
    pub reward: f64,
    pub terminal: SystemState,
    pub tube_steps: usize,
    pub steps: usize,
    pub points: Vec<PathPoint>,
}

/// The first `dump_paths` paths of every start, drawn from the same streams
/// as the evaluation.
pub fn simulate(run: &Run, system: &StorageSystem) -> Result<Vec<SimulatedPath>, PipelineError> {
    let sim = &run.config.simulation;
    let spec = sim.spec();
    let mut out = Vec::new();
    for (i, &start) in sim.starts.iter().enumerate() {
        for p in 0..sim.dump_paths {
            let mut rng = stream(run.config.seed, path_stream(i, p));
            let mut points = Vec::new();
            let o = simulate_controlled_path(&run.params, system, start, &spec, 1.0, &mut rng, Some(&mut points))?;
            out.push(SimulatedPath {
                start: i,
                path: p,
                reward: o.reward,
                terminal: o.terminal,
                tube_steps: o.tube_steps,
                steps: o.steps,
                points,
            });
        }
    }
    Ok(out)
}

pub fn write_simulate_summary<W: Write + ?Sized>(run: &Run, paths: &[SimulatedPath], out: &mut W) -> io::Result<()> {
    writeln!(out, "start,path,s0,q0,nu1_0,t0,reward,S_T,Q_T,nu1_T,steps,tube_steps")?;
    for p in paths {
        let s = run.config.simulation.starts[p.start];
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            p.start, p.path, s.s, s.q, s.pi1, s.t, p.reward, p.terminal.s, p.terminal.q, p.terminal.pi1, p.steps, p.tube_steps
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterDemoSummary {
    pub path: usize,
    pub mean_pi1: f64,
    pub min_component: f64,
    pub max_sum_error: f64,
}

pub fn filter_demo(run: &Run) -> Vec<FilterPath> {
    let fd = &run.config.filter_demo;
    let mut opts = TruthOptions::new(fd.horizon.unwrap_or(run.params.horizon), fd.dt);
    opts.record_every = fd.record_every.max(1);
    (0..fd.n_paths)
        .map(|k| {
            let mut rng = stream(run.config.seed, FILTER_STREAM_BASE + k as u64);
            simulate_truth_and_filter(&run.params, &opts, &mut rng)
        })
        .collect()
}

/// Runs `cmd`, writing its artifacts into `dir`. With `field`, the solve is
/// replaced by reloading a dump.
pub fn execute(cmd: Command, run: &Run, dir: &mut RunDir, field: Option<&Path>) -> Result<(), PipelineError> {
    let stride = run.config.output.time_stride;
    if cmd == Command::FilterDemo || cmd == Command::All {
        let paths = filter_demo(run);
        let mut summary = Vec::new();
        for (k, p) in paths.iter().enumerate() {
            dir.write_with(&format!("filter_path_{k}.csv"), |w| p.write_csv(w))?;
            summary.push(FilterDemoSummary {
                path: k,
                mean_pi1: p.mean_pi1,
                min_component: p.min_component,
                max_sum_error: p.max_sum_error,
            });
        }
        dir.write_json("filter_demo.json", &summary)?;
        if cmd == Command::FilterDemo {
            return Ok(());
        }
    }

    let solved = match field {
        Some(path) => load_field(path, &run.params)?,
        None => solve(run)?,
    };
    if matches!(cmd, Command::Solve | Command::All) {
        dir.write_with("value_policy.csv", |w| write_value_policy_csv(&solved.value, &solved.policy, stride, w))?;
        dir.write_with("field.bin", |w| write_field_dump(&solved.value, &solved.policy, &run.params, w))?;
        dir.write_json("solve.json", &solve_summary(run, &solved))?;
        if cmd == Command::Solve {
            return Ok(());
        }
    }

    let ex = extract(run, &solved)?;
    if matches!(cmd, Command::Extract | Command::All) {
        dir.write_with("barriers.csv", |w| ex.barriers.write_csv(w, stride))?;
        dir.write_with("smooth_levels.csv", |w| write_smooth_levels_csv(&ex.smooth, &ex.barriers, stride, w))?;
        dir.write_json("smooth_barriers.json", &ex.smooth)?;
        dir.write_json("extract.json", &extract_summary(&ex))?;
        if cmd == Command::Extract {
            return Ok(());
        }
    }

    if matches!(cmd, Command::Check | Command::All) {
        let (report, failing) = check(run, &solved, &ex);
        dir.write_json("check.json", &report)?;
        dir.write_with("check_failing_nodes.csv", |w| write_node_margins_csv(&failing, w))?;
        if cmd == Command::Check {
            return Ok(());
        }
        if !report.passed {
            return Err(PipelineError::Admissibility(report.failures.join("; ")));
        }
    }

    let system = storage_system(run, &solved, &ex)?;
    if matches!(cmd, Command::Simulate | Command::All) {
        let paths = simulate(run, &system)?;
        for p in &paths {
            dir.write_with(&format!("path_{}_{}.csv", p.start, p.path), |w| write_path_csv(&p.points, w))?;
        }
        dir.write_with("simulate_summary.csv", |w| write_simulate_summary(run, &paths, w))?;
        if cmd == Command::Simulate {
            return Ok(());
        }
    }

    let report = evaluate(run, &solved, &system)?;
    dir.write_with("evaluation.csv", |w| report.write_csv(w))?;
    dir.write_json("evaluation.json", &report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_run() -> Run {
        let grid = GridSpec { n_s: 31, n_q: 6, n_nu: 4, n_t: 11, ..GridSpec::default() };
        Run::new(RunConfig { grid, ..RunConfig::default() }).unwrap()
    }

    fn dump(run: &Run, solved: &Solved) -> Vec<u8> {
        let mut buf = Vec::new();
        write_field_dump(&solved.value, &solved.policy, &run.params, &mut buf).unwrap();
        buf
    }

    #[test]
    fn dump_round_trips() {
        let run = small_run();
        let solved = solve(&run).unwrap();
        let bytes = dump(&run, &solved);
        let back = read_field_dump(&mut bytes.as_slice(), &run.params).unwrap();
        assert_eq!(back.value.values, solved.value.values);
        assert_eq!(back.policy.modes, solved.policy.modes);
        assert_eq!(back.value.grid.s, solved.value.grid.s);
        assert_eq!(back.value.grid.t, solved.value.grid.t);
    }

    #[test]
    fn corrupt_dumps_are_rejected() {
        let run = small_run();
        let bytes = dump(&run, &solve(&run).unwrap());
        let err = |b: &[u8], params: &ModelParams| read_field_dump(&mut &b[..], params).err().unwrap().to_string();

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(err(&magic, &run.params).contains("not a field dump"));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(err(&version, &run.params).contains("version"));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(err(&trailing, &run.params).contains("trailing"));

        let mut mode = bytes.clone();
        *mode.last_mut().unwrap() = 200;
        assert!(err(&mode, &run.params).contains("mode code"));

        assert!(read_field_dump(&mut &bytes[..bytes.len() - 3], &run.params).is_err());

        let mut other = run.params.clone();
        other.q_hi = 120.0;
        assert!(err(&bytes, &other).contains("dump was made for"));
    }

    #[test]
    fn value_policy_csv_strides_time() {
        let run = small_run();
        let solved = solve(&run).unwrap();
        let mut buf = Vec::new();
        write_value_policy_csv(&solved.value, &solved.policy, 5, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("s,q,nu1,t,V,mode,rate"));
        let g = &solved.value.grid;
        let slices = time_indices(g.n_t(), 5).len();
        assert_eq!(lines.count(), slices * g.slice_len());
    }

    #[test]
    fn few_paths_are_raised() {
        assert_eq!(effective_paths(10), MIN_PATHS);
        assert_eq!(effective_paths(MIN_PATHS + 1), MIN_PATHS + 1);
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let root = tempfile::tempdir().unwrap();
        let a = RunDir::create(root.path(), "solve").unwrap();
        let b = RunDir::create(root.path(), "solve").unwrap();
        assert_ne!(a.path, b.path);
    }
}
