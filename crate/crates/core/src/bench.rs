//! Weak-scaling benchmark harness: repeated solver runs with a timing
//! breakdown per repetition, averaged into summary rows and emitted as CSV.
//!
//! Every repetition launches the full runtime, runs the solver on a
//! seed-randomized initial field, and records three per-unit timers (averaged
//! across units): compute, halo-get time, and barrier time. The CSV reports
//! `exchange_s` as gets + barriers (the whole halo-exchange overhead),
//! `sync_s` as barriers alone, and `pure_exchange_s` as their difference.

use std::io::Write;

use thiserror::Error;

use crate::gaspace::RuntimeConfig;
use crate::heat3d::{self, GridSpec, HeatError, SolverParams};
use crate::oracle::{Field, OracleError};
use crate::transport::RoutingMode;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error(transparent)]
    Heat(#[from] HeatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("field dump failed: {0}")]
    Dump(#[from] OracleError),
}

// ---------------------------------------------------------------------------
// Experiment description

/// One benchmark configuration: machine shape, routing mode, grid, and
/// repetition count. The solver runs with fixed physics — constant unit
/// diffusivity, zero boundary, seeded random interior, dt at the stability
/// bound, no early stop — so only the communication setup varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Experiment {
    pub nx: u32,
    pub ny: u32,
    pub nz: u32,
    pub units: u32,
    pub node_size: u32,
    pub blades_per_chassis: u32,
    pub chassis_per_group: u32,
    pub mode: RoutingMode,
    pub iterations: u32,
    pub repetitions: u32,
    pub seed: u64,
}

impl Default for Experiment {
    fn default() -> Experiment {
        Experiment {
            nx: 64,
            ny: 64,
            nz: 128,
            units: 8,
            node_size: 8,
            blades_per_chassis: 2,
            chassis_per_group: 2,
            mode: RoutingMode::LocalityAware,
            iterations: 100,
            repetitions: 25,
            seed: 42,
        }
    }
}

impl Experiment {
    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.nx, self.ny, self.nz).with_seed(self.seed)
    }

    pub fn solver_params(&self) -> SolverParams {
        let mut params = SolverParams {
            iterations: self.iterations,
            convergence_eps: None,
            alpha0: 1.0,
            alpha_slope: 0.0,
            ..Default::default()
        };
        params.dt = params.max_stable_dt(&self.grid());
        params
    }

    pub fn runtime_config(&self) -> RuntimeConfig {
        let mut cfg = RuntimeConfig::new(self.units, self.node_size)
            .with_routing(self.mode);
        cfg.blades_per_chassis = self.blades_per_chassis;
        cfg.chassis_per_group = self.chassis_per_group;
        cfg
    }

    /// Checks repetition count, machine shape, and decomposition feasibility
    /// before anything runs.
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.repetitions == 0 {
            return Err(BenchError::Config("repetitions must be >= 1".into()));
        }
        self.runtime_config()
            .validate()
            .map_err(|e| BenchError::Config(e.to_string()))?;
        heat3d::validate(&self.grid(), &self.solver_params(), self.units)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Results

/// Which CSV row a [`ResultRow`] is: one repetition, the mean, or the sample
/// standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowLabel {
    Run(u32),
    Mean,
    Std,
}

impl std::fmt::Display for RowLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RowLabel::Run(i) => write!(f, "{i}"),
            RowLabel::Mean => f.write_str("mean"),
            RowLabel::Std => f.write_str("std"),
        }
    }
}

/// One CSV row: the experiment parameters plus the timing breakdown
/// (unit-averaged seconds). For run and mean rows,
/// `exchange_s = sync_s + pure_exchange_s` up to timer resolution; the std
/// row carries per-column dispersions instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultRow {
    pub label: RowLabel,
    pub units: u32,
    pub node_size: u32,
    pub blades_per_chassis: u32,
    pub chassis_per_group: u32,
    pub mode: RoutingMode,
    pub nx: u32,
    pub ny: u32,
    pub nz: u32,
    pub iters: u32,
    pub compute_s: f64,
    pub exchange_s: f64,
    pub sync_s: f64,
    pub pure_exchange_s: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Run all repetitions of an experiment. Returns the per-repetition rows
/// followed by a mean and a sample-standard-deviation row, plus (when
/// `collect_last_field` is set) the assembled global field of the final
/// repetition.
pub fn run_experiment(
    e: &Experiment,
    collect_last_field: bool,
) -> Result<(Vec<ResultRow>, Option<Field>), BenchError> {
    e.validate()?;
    let grid = e.grid();
    let params = e.solver_params();

    let row_shell = |label: RowLabel, c: f64, ex: f64, sy: f64, pure: f64| ResultRow {
        label,
        units: e.units,
        node_size: e.node_size,
        blades_per_chassis: e.blades_per_chassis,
        chassis_per_group: e.chassis_per_group,
        mode: e.mode,
        nx: e.nx,
        ny: e.ny,
        nz: e.nz,
        iters: e.iterations,
        compute_s: c,
        exchange_s: ex,
        sync_s: sy,
        pure_exchange_s: pure,
    };

    let mut rows = Vec::with_capacity(e.repetitions as usize + 2);
    let mut field = None;
    let (mut computes, mut exchanges, mut syncs, mut pures) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rep in 0..e.repetitions {
        let collect = collect_last_field && rep + 1 == e.repetitions;
        let summary = heat3d::run(&grid, &params, e.runtime_config(), collect)?;
        let n = summary.reports.len() as f64;
        let compute_s = summary.reports.iter().map(|r| r.compute_seconds).sum::<f64>() / n;
        let sync_s = summary.reports.iter().map(|r| r.sync_seconds).sum::<f64>() / n;
        let exchange_s = summary
            .reports
            .iter()
            .map(|r| r.exchange_seconds + r.sync_seconds)
            .sum::<f64>()
            / n;
        let pure = exchange_s - sync_s;
        rows.push(row_shell(RowLabel::Run(rep + 1), compute_s, exchange_s, sync_s, pure));
        computes.push(compute_s);
        exchanges.push(exchange_s);
        syncs.push(sync_s);
        pures.push(pure);
        if collect {
            field = summary.field;
        }
    }

    let (mc, me, ms) = (mean(&computes), mean(&exchanges), mean(&syncs));
    rows.push(row_shell(RowLabel::Mean, mc, me, ms, me - ms));
    rows.push(row_shell(
        RowLabel::Std,
        sample_std(&computes),
        sample_std(&exchanges),
        sample_std(&syncs),
        sample_std(&pures),
    ));
    Ok((rows, field))
}

// ---------------------------------------------------------------------------
// CSV

pub const CSV_HEADER: &str = "run,units,node_size,blades_per_chassis,chassis_per_group,mode,nx,ny,nz,iters,compute_s,exchange_s,sync_s,pure_exchange_s";

/// Write the rows as CSV; numeric columns use the shortest representation
/// that parses back to the identical value.
pub fn emit_csv<W: Write>(w: &mut W, rows: &[ResultRow]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.units,
            r.node_size,
            r.blades_per_chassis,
            r.chassis_per_group,
            r.mode,
            r.nx,
            r.ny,
            r.nz,
            r.iters,
            r.compute_s,
            r.exchange_s,
            r.sync_s,
            r.pure_exchange_s
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration text and flag patching

/// Optional overrides collected from a config file or CLI flags; unset fields
/// fall through to the layer below (defaults ← config file ← flags).
#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct ExperimentPatch {
    pub units: Option<u32>,
    pub node_size: Option<u32>,
    pub blades_per_chassis: Option<u32>,
    pub chassis_per_group: Option<u32>,
    pub grid: Option<(u32, u32, u32)>,
    pub iters: Option<u32>,
    pub mode: Option<RoutingMode>,
    pub reps: Option<u32>,
    pub seed: Option<u64>,
}

pub const CONFIG_KEYS: [&str; 9] = [
    "units",
    "node_size",
    "blades_per_chassis",
    "chassis_per_group",
    "grid",
    "iters",
    "mode",
    "reps",
    "seed",
];

/// `NXxNYxNZ`, e.g. `64x64x128`.
pub fn parse_grid(s: &str) -> Result<(u32, u32, u32), String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("grid {s:?} is not of the form NXxNYxNZ"));
    }
    let dim = |p: &str| -> Result<u32, String> {
        p.trim()
            .parse::<u32>()
            .map_err(|e| format!("bad grid extent {p:?}: {e}"))
    };
    Ok((dim(parts[0])?, dim(parts[1])?, dim(parts[2])?))
}

impl ExperimentPatch {
    /// Parse line-oriented `key = value` text; `#` starts a comment and blank
    /// lines are skipped. Unknown keys are rejected with the list of valid
    /// ones.
    pub fn parse_config(text: &str) -> Result<ExperimentPatch, BenchError> {
        let mut patch = ExperimentPatch::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let n = lineno + 1;
            let bad = |msg: String| BenchError::Config(format!("config line {n}: {msg}"));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |field: &str| -> Result<u32, BenchError> {
                value.parse::<u32>().map_err(|e| bad(format!("bad {field} value {value:?}: {e}")))
            };
            match key {
                "units" => patch.units = Some(int("units")?),
                "node_size" => patch.node_size = Some(int("node_size")?),
                "blades_per_chassis" => patch.blades_per_chassis = Some(int("blades_per_chassis")?),
                "chassis_per_group" => patch.chassis_per_group = Some(int("chassis_per_group")?),
                "grid" => patch.grid = Some(parse_grid(value).map_err(bad)?),
                "iters" => patch.iters = Some(int("iters")?),
                "mode" => {
                    patch.mode = Some(value.parse::<RoutingMode>().map_err(bad)?);
                }
                "reps" => patch.reps = Some(int("reps")?),
                "seed" => {
                    patch.seed = Some(
                        value
                            .parse::<u64>()
                            .map_err(|e| bad(format!("bad seed value {value:?}: {e}")))?,
                    );
                }
                other => {
                    return Err(bad(format!(
                        "unknown key {other:?}; valid keys: {}",
                        CONFIG_KEYS.join(", ")
                    )));
                }
            }
        }
        Ok(patch)
    }

    /// Apply the set fields over a base experiment.
    pub fn apply(&self, mut base: Experiment) -> Experiment {
        if let Some(v) = self.units {
            base.units = v;
        }
        if let Some(v) = self.node_size {
            base.node_size = v;
        }
        if let Some(v) = self.blades_per_chassis {
            base.blades_per_chassis = v;
        }
        if let Some(v) = self.chassis_per_group {
            base.chassis_per_group = v;
        }
        if let Some((nx, ny, nz)) = self.grid {
            (base.nx, base.ny, base.nz) = (nx, ny, nz);
        }
        if let Some(v) = self.iters {
            base.iterations = v;
        }
        if let Some(v) = self.mode {
            base.mode = v;
        }
        if let Some(v) = self.reps {
            base.repetitions = v;
        }
        if let Some(v) = self.seed {
            base.seed = v;
        }
        base
    }
}
