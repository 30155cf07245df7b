//! Explicit 3-D heat conduction on a checkerboard-decomposed grid.
//!
//! The global grid of `NX×NY×NZ` cells is split along all three axes over the
//! units; each unit stores its sub-grid with a one-cell halo on every face in
//! a collectively allocated segment (two buffers for Jacobi-style double
//! buffering). Every iteration pulls the six neighbor faces with blocking
//! gets — one directional round per neighbor, each round opened by a barrier —
//! then updates all interior cells from the old buffer into the other one.
//!
//! Boundary condition: the one-cell layer *outside* the global grid holds
//! `boundary_temp` for the whole run. Halo faces with no neighbor are
//! pre-filled with it in both buffers and never written again, which keeps
//! them constant by construction.
//!
//! The per-cell update is, in this exact evaluation order (kept fixed so the
//! parallel field is bit-identical to the serial reference):
//!
//! ```text
//! a     = alpha0 + alpha_slope·T          (clamped to ≥ 0)
//! lx    = ((T_E − 2·T) + T_W) / dx²
//! ly    = ((T_N − 2·T) + T_S) / dy²       (divisions precomputed as factors)
//! lz    = ((T_U − 2·T) + T_D) / dz²
//! T'    = T + (dt·a)·((lx + ly) + lz)
//! ```

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::error::{LaunchError, RtError};
use crate::gaspace::{
    launch, GlobalPointer, LocalRegion, RuntimeConfig, Unit, UnitId, UnitStats, TEAM_ALL,
};
use crate::oracle::Field;
use crate::transport::CounterSnapshot;

/// Errors from grid/solver configuration or from the run itself.
#[derive(Debug, Error)]
pub enum HeatError {
    #[error("invalid heat configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Launch(#[from] LaunchError),
}

// ---------------------------------------------------------------------------
// Configuration

/// The global problem: cell counts, spacings, and the temperature data.
///
/// All `nx·ny·nz` cells are updated every step; the surrounding one-cell layer
/// is the constant-temperature boundary. The initial interior is either
/// uniform `initial_temp` or, when `seed` is set, a per-cell hash of the
/// global cell index (uniform in `[0, 1)`), so it is independent of the
/// decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: u32,
    pub ny: u32,
    pub nz: u32,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub boundary_temp: f64,
    pub initial_temp: f64,
    pub seed: Option<u64>,
}

impl GridSpec {
    pub fn new(nx: u32, ny: u32, nz: u32) -> GridSpec {
        GridSpec {
            nx,
            ny,
            nz,
            dx: 1.0,
            dy: 1.0,
            dz: 1.0,
            boundary_temp: 0.0,
            initial_temp: 0.0,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> GridSpec {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), HeatError> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(HeatError::Config("grid extents must be >= 1".into()));
        }
        for (name, v) in [("dx", self.dx), ("dy", self.dy), ("dz", self.dz)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(HeatError::Config(format!("{name} must be finite and > 0")));
            }
        }
        if !self.boundary_temp.is_finite() || !self.initial_temp.is_finite() {
            return Err(HeatError::Config("temperatures must be finite".into()));
        }
        Ok(())
    }

    /// Initial temperature of the interior cell at global 0-based (gx,gy,gz).
    pub fn initial_cell(&self, gx: u32, gy: u32, gz: u32) -> f64 {
        match self.seed {
            None => self.initial_temp,
            Some(seed) => {
                let idx =
                    (gx as u64 * self.ny as u64 + gy as u64) * self.nz as u64 + gz as u64;
                hash01(seed, idx)
            }
        }
    }

    /// Temperature range the field can ever attain (discrete maximum
    /// principle): boundary plus the initial interior extremes.
    fn temp_range(&self) -> (f64, f64) {
        let (ilo, ihi) = match self.seed {
            None => (self.initial_temp, self.initial_temp),
            Some(_) => (0.0, 1.0),
        };
        (self.boundary_temp.min(ilo), self.boundary_temp.max(ihi))
    }
}

/// Decomposition-independent per-cell hash: splitmix64 finalizer over
/// `seed + index·phi64`, mapped to `[0, 1)`.
fn hash01(seed: u64, index: u64) -> f64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Time stepping parameters. The diffusivity is `alpha0 + alpha_slope·T`
/// evaluated at the center cell's old temperature and clamped to ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    pub iterations: u32,
    pub dt: f64,
    pub alpha0: f64,
    pub alpha_slope: f64,
    /// When set, the run stops early once the global max |ΔT| of a step drops
    /// below this, checked every `check_every` iterations.
    pub convergence_eps: Option<f64>,
    pub check_every: u32,
}

impl Default for SolverParams {
    fn default() -> SolverParams {
        SolverParams {
            iterations: 5000,
            dt: 1.0 / 6.0,
            alpha0: 1.0,
            alpha_slope: 0.0,
            convergence_eps: None,
            check_every: 100,
        }
    }
}

impl SolverParams {
    /// Largest explicit-scheme-stable dt for this grid, using the worst-case
    /// diffusivity over the attainable temperature range (the diffusivity is
    /// affine in T, so the extremes are at the range endpoints).
    pub fn max_stable_dt(&self, grid: &GridSpec) -> f64 {
        let (lo, hi) = grid.temp_range();
        let a_lo = (self.alpha0 + self.alpha_slope * lo).max(0.0);
        let a_hi = (self.alpha0 + self.alpha_slope * hi).max(0.0);
        let a_max = a_lo.max(a_hi);
        if a_max == 0.0 {
            return f64::INFINITY;
        }
        let s = 1.0 / (grid.dx * grid.dx) + 1.0 / (grid.dy * grid.dy) + 1.0 / (grid.dz * grid.dz);
        1.0 / (2.0 * a_max * s)
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<(), HeatError> {
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(HeatError::Config("dt must be finite and > 0".into()));
        }
        if !self.alpha0.is_finite() || !self.alpha_slope.is_finite() {
            return Err(HeatError::Config("diffusivity parameters must be finite".into()));
        }
        if let Some(eps) = self.convergence_eps {
            if !eps.is_finite() || eps < 0.0 {
                return Err(HeatError::Config("convergence_eps must be finite and >= 0".into()));
            }
        }
        if self.check_every == 0 {
            return Err(HeatError::Config("check_every must be >= 1".into()));
        }
        let bound = self.max_stable_dt(grid);
        if self.dt > bound {
            return Err(HeatError::Config(format!(
                "dt {} exceeds the stability bound {bound}",
                self.dt
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Decomposition

/// The six face neighbors: x axis is West/East, y is South/North, z is
/// Down/Up. Exchange rounds run in this declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    South,
    North,
    West,
    East,
    Up,
    Down,
}

impl Direction {
    pub const EXCHANGE_ORDER: [Direction; 6] = [
        Direction::South,
        Direction::North,
        Direction::West,
        Direction::East,
        Direction::Up,
        Direction::Down,
    ];

    pub fn index(self) -> usize {
        match self {
            Direction::South => 0,
            Direction::North => 1,
            Direction::West => 2,
            Direction::East => 3,
            Direction::Up => 4,
            Direction::Down => 5,
        }
    }

    fn delta(self) -> (i64, i64, i64) {
        match self {
            Direction::South => (0, -1, 0),
            Direction::North => (0, 1, 0),
            Direction::West => (-1, 0, 0),
            Direction::East => (1, 0, 0),
            Direction::Up => (0, 0, 1),
            Direction::Down => (0, 0, -1),
        }
    }
}

/// Choose the factorization Px·Py·Pz = n minimizing max−min of the factors,
/// ties broken toward larger Pz, then larger Py.
pub fn checkerboard_factors(n: u32) -> (u32, u32, u32) {
    assert!(n >= 1, "unit count must be >= 1");
    let mut best: Option<(u32, u32, u32, (u32, u32, u32))> = None;
    for px in 1..=n {
        if n % px != 0 {
            continue;
        }
        let rest = n / px;
        for py in 1..=rest {
            if rest % py != 0 {
                continue;
            }
            let pz = rest / py;
            let hi = px.max(py).max(pz);
            let lo = px.min(py).min(pz);
            let spread = hi - lo;
            let better = match best {
                None => true,
                Some((bs, bz, by, _)) => {
                    spread < bs || (spread == bs && (pz > bz || (pz == bz && py > by)))
                }
            };
            if better {
                best = Some((spread, pz, py, (px, py, pz)));
            }
        }
    }
    best.expect("every n >= 1 has at least the 1*1*n factorization").3
}

/// Process grid over the units: rank = (cx·Py + cy)·Pz + cz.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CartTopology {
    pub px: u32,
    pub py: u32,
    pub pz: u32,
}

impl CartTopology {
    pub fn new(num_units: u32) -> CartTopology {
        let (px, py, pz) = checkerboard_factors(num_units);
        CartTopology { px, py, pz }
    }

    pub fn num_ranks(&self) -> u32 {
        self.px * self.py * self.pz
    }

    pub fn coords_of(&self, rank: u32) -> (u32, u32, u32) {
        let cz = rank % self.pz;
        let cy = (rank / self.pz) % self.py;
        let cx = rank / (self.pz * self.py);
        (cx, cy, cz)
    }

    pub fn rank_of(&self, cx: u32, cy: u32, cz: u32) -> u32 {
        (cx * self.py + cy) * self.pz + cz
    }

    /// Face neighbor in `dir`, or None at the domain edge (no wraparound).
    pub fn neighbor(&self, rank: u32, dir: Direction) -> Option<u32> {
        let (cx, cy, cz) = self.coords_of(rank);
        let (dx, dy, dz) = dir.delta();
        let nx = cx as i64 + dx;
        let ny = cy as i64 + dy;
        let nz = cz as i64 + dz;
        if nx < 0 || ny < 0 || nz < 0 {
            return None;
        }
        let (nx, ny, nz) = (nx as u32, ny as u32, nz as u32);
        if nx >= self.px || ny >= self.py || nz >= self.pz {
            return None;
        }
        Some(self.rank_of(nx, ny, nz))
    }
}

/// Axis split: `total/parts` each, remainder cells to the lower coordinates.
fn split_lengths(total: u32, parts: u32) -> Vec<u32> {
    let base = total / parts;
    let rem = total % parts;
    (0..parts).map(|i| base + u32::from(i < rem)).collect()
}

/// One rank's sub-grid: interior extents, global offset of its first interior
/// cell, and its six optional neighbors (indexed by `Direction::index`).
/// Storage is `(xcell+2)·(ycell+2)·(zcell+2)` cells, z fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubDomain {
    pub xcell: u32,
    pub ycell: u32,
    pub zcell: u32,
    pub x0: u32,
    pub y0: u32,
    pub z0: u32,
    pub neighbors: [Option<u32>; 6],
}

impl SubDomain {
    pub fn of(grid: &GridSpec, topo: &CartTopology, rank: u32) -> SubDomain {
        let (cx, cy, cz) = topo.coords_of(rank);
        let xs = split_lengths(grid.nx, topo.px);
        let ys = split_lengths(grid.ny, topo.py);
        let zs = split_lengths(grid.nz, topo.pz);
        let mut neighbors = [None; 6];
        for dir in Direction::EXCHANGE_ORDER {
            neighbors[dir.index()] = topo.neighbor(rank, dir);
        }
        SubDomain {
            xcell: xs[cx as usize],
            ycell: ys[cy as usize],
            zcell: zs[cz as usize],
            x0: xs[..cx as usize].iter().sum(),
            y0: ys[..cy as usize].iter().sum(),
            z0: zs[..cz as usize].iter().sum(),
            neighbors,
        }
    }

    /// Storage cells including the halo.
    pub fn vol(&self) -> usize {
        (self.xcell as usize + 2) * (self.ycell as usize + 2) * (self.zcell as usize + 2)
    }

    /// Flat index into the padded storage; (0,0,0) is the low halo corner.
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (x * (self.ycell as usize + 2) + y) * (self.zcell as usize + 2) + z
    }

    /// Gets this rank issues per halo exchange.
    pub fn expected_gets(&self) -> u64 {
        let (xc, yc) = (self.xcell as u64, self.ycell as u64);
        let mut gets = 0;
        for dir in Direction::EXCHANGE_ORDER {
            if self.neighbors[dir.index()].is_none() {
                continue;
            }
            gets += match dir {
                Direction::South | Direction::North => xc,
                Direction::West | Direction::East => yc,
                Direction::Up | Direction::Down => xc * yc,
            };
        }
        gets
    }
}

/// Full configuration check for a run: grid, parameters (including the
/// stability bound), and decomposition feasibility.
pub fn validate(grid: &GridSpec, params: &SolverParams, num_units: u32) -> Result<CartTopology, HeatError> {
    grid.validate()?;
    params.validate(grid)?;
    if num_units == 0 {
        return Err(HeatError::Config("num_units must be >= 1".into()));
    }
    let topo = CartTopology::new(num_units);
    for (axis, factor, cells) in [
        ("x", topo.px, grid.nx),
        ("y", topo.py, grid.ny),
        ("z", topo.pz, grid.nz),
    ] {
        if factor > cells {
            return Err(HeatError::Config(format!(
                "decomposition factor {factor} on {axis} exceeds the {cells} cells of that axis"
            )));
        }
    }
    Ok(topo)
}

// ---------------------------------------------------------------------------
// The per-unit solver

/// Per-unit solver state: the exposed double-buffered sub-grid plus the
/// exchange/compute machinery. Build one inside each unit, then alternate
/// [`Solver::exchange`] and [`Solver::step`].
///
/// Construction requires a configuration that passed [`validate`] apart from
/// the stability bound (so single steps of unstable schemes can be examined);
/// infeasible decompositions panic.
pub struct Solver {
    params: SolverParams,
    sub: SubDomain,
    nb: [Option<(u32, SubDomain)>; 6],
    seg: GlobalPointer,
    local: LocalRegion,
    max_vol: usize,
    phase: usize,
    inv_dx2: f64,
    inv_dy2: f64,
    inv_dz2: f64,
    old: Vec<f64>,
    row: Vec<f64>,
    scratch: Vec<u8>,
    last_max_delta: f64,
    compute: Duration,
    exch: Duration,
    sync: Duration,
    stats0: UnitStats,
}

impl Solver {
    pub fn new(u: &mut Unit, grid: GridSpec, params: SolverParams) -> Result<Solver, RtError> {
        grid.validate().unwrap_or_else(|e| panic!("{e}"));
        let topo = CartTopology::new(u.size());
        for (factor, cells) in [(topo.px, grid.nx), (topo.py, grid.ny), (topo.pz, grid.nz)] {
            assert!(factor <= cells, "decomposition factor exceeds cell count; run validate() first");
        }
        let rank = u.myid().0;
        let sub = SubDomain::of(&grid, &topo, rank);
        let mut nb: [Option<(u32, SubDomain)>; 6] = Default::default();
        for dir in Direction::EXCHANGE_ORDER {
            nb[dir.index()] = sub.neighbors[dir.index()]
                .map(|r| (r, SubDomain::of(&grid, &topo, r)));
        }
        let max_vol = (0..topo.num_ranks())
            .map(|r| SubDomain::of(&grid, &topo, r).vol())
            .max()
            .expect("at least one rank");

        let seg = u.team_memalloc_aligned(TEAM_ALL, (2 * max_vol * 8) as u64)?;
        let local = u.local_region(seg.set_unit(u.myid()))?;

        // Both buffers start as all-boundary; the working buffer then gets the
        // initial interior. Halo faces without a neighbor are never written
        // again, which keeps the boundary condition constant.
        let vol = sub.vol();
        let mut init = vec![grid.boundary_temp; vol];
        local.write_f64s(max_vol * 8, &init);
        for x in 1..=sub.xcell as usize {
            for y in 1..=sub.ycell as usize {
                for z in 1..=sub.zcell as usize {
                    let gx = sub.x0 + (x as u32 - 1);
                    let gy = sub.y0 + (y as u32 - 1);
                    let gz = sub.z0 + (z as u32 - 1);
                    init[sub.idx(x, y, z)] = grid.initial_cell(gx, gy, gz);
                }
            }
        }
        local.write_f64s(0, &init);

        let scratch_len = (sub.zcell as usize).max(1) * 8;
        let row = vec![0.0; sub.zcell as usize];
        let stats0 = u.stats();
        Ok(Solver {
            inv_dx2: 1.0 / (grid.dx * grid.dx),
            inv_dy2: 1.0 / (grid.dy * grid.dy),
            inv_dz2: 1.0 / (grid.dz * grid.dz),
            params,
            sub,
            nb,
            seg,
            local,
            max_vol,
            phase: 0,
            old: vec![0.0; vol],
            row,
            scratch: vec![0u8; scratch_len],
            last_max_delta: 0.0,
            compute: Duration::ZERO,
            exch: Duration::ZERO,
            sync: Duration::ZERO,
            stats0,
        })
    }

    pub fn sub(&self) -> &SubDomain {
        &self.sub
    }

    fn phase_base(&self) -> usize {
        self.phase * self.max_vol * 8
    }

    /// Pull the six neighbor faces into this unit's halo: one round per
    /// direction in the fixed order South, North, West, East, Up, Down, each
    /// round opened by a barrier. Ranks without the round's neighbor skip the
    /// gets but join the barrier.
    pub fn exchange(&mut self, u: &mut Unit) -> Result<(), RtError> {
        let (xc, yc, zc) = (
            self.sub.xcell as usize,
            self.sub.ycell as usize,
            self.sub.zcell as usize,
        );
        for dir in Direction::EXCHANGE_ORDER {
            let t0 = Instant::now();
            u.barrier(TEAM_ALL)?;
            self.sync += t0.elapsed();

            let Some((nrank, nsub)) = self.nb[dir.index()].clone() else {
                continue;
            };
            let pb = self.phase_base();
            let t1 = Instant::now();
            match dir {
                Direction::South | Direction::North => {
                    // xcell runs of zcell contiguous cells at a fixed y plane.
                    let (ry, my) = if dir == Direction::South {
                        (nsub.ycell as usize, 0)
                    } else {
                        (1, yc + 1)
                    };
                    for x in 1..=xc {
                        self.pull_run(u, &nrank, &nsub, pb, nsub.idx(x, ry, 1), self.sub.idx(x, my, 1), zc)?;
                    }
                }
                Direction::West | Direction::East => {
                    let (rx, mx) = if dir == Direction::West {
                        (nsub.xcell as usize, 0)
                    } else {
                        (1, xc + 1)
                    };
                    for y in 1..=yc {
                        self.pull_run(u, &nrank, &nsub, pb, nsub.idx(rx, y, 1), self.sub.idx(mx, y, 1), zc)?;
                    }
                }
                Direction::Up | Direction::Down => {
                    // xcell·ycell single cells at a fixed z plane.
                    let (rz, mz) = if dir == Direction::Up {
                        (1, zc + 1)
                    } else {
                        (nsub.zcell as usize, 0)
                    };
                    for x in 1..=xc {
                        for y in 1..=yc {
                            self.pull_run(u, &nrank, &nsub, pb, nsub.idx(x, y, rz), self.sub.idx(x, y, mz), 1)?;
                        }
                    }
                }
            }
            self.exch += t1.elapsed();
        }
        Ok(())
    }

    fn pull_run(
        &mut self,
        u: &mut Unit,
        nrank: &u32,
        _nsub: &SubDomain,
        phase_base: usize,
        remote_cell: usize,
        my_cell: usize,
        cells: usize,
    ) -> Result<(), RtError> {
        let nbytes = cells * 8;
        let ptr = self
            .seg
            .set_unit(UnitId(*nrank))
            .inc_addr((phase_base + remote_cell * 8) as u64);
        u.get(ptr, &mut self.scratch[..nbytes])?;
        self.local.write_bytes(phase_base + my_cell * 8, &self.scratch[..nbytes]);
        Ok(())
    }

    /// One explicit step: read the current buffer (halos included), update
    /// every interior cell into the other buffer, swap. Records the step's
    /// max |ΔT| for convergence checks.
    pub fn step(&mut self) {
        let t0 = Instant::now();
        let vol = self.sub.vol();
        let pb = self.phase_base();
        self.local.read_f64s(pb, &mut self.old[..vol]);

        let (xc, yc, zc) = (
            self.sub.xcell as usize,
            self.sub.ycell as usize,
            self.sub.zcell as usize,
        );
        let (alpha0, slope, dt) = (self.params.alpha0, self.params.alpha_slope, self.params.dt);
        let (ivx, ivy, ivz) = (self.inv_dx2, self.inv_dy2, self.inv_dz2);
        let new_base = (self.phase ^ 1) * self.max_vol * 8;
        let mut maxd = 0.0f64;

        for x in 1..=xc {
            for y in 1..=yc {
                let i0 = self.sub.idx(x, y, 1);
                {
                    let old = &self.old;
                    let c = &old[i0..i0 + zc];
                    let e = &old[self.sub.idx(x + 1, y, 1)..self.sub.idx(x + 1, y, 1) + zc];
                    let w = &old[self.sub.idx(x - 1, y, 1)..self.sub.idx(x - 1, y, 1) + zc];
                    let n = &old[self.sub.idx(x, y + 1, 1)..self.sub.idx(x, y + 1, 1) + zc];
                    let s = &old[self.sub.idx(x, y - 1, 1)..self.sub.idx(x, y - 1, 1) + zc];
                    let up = &old[i0 + 1..i0 + 1 + zc];
                    let dn = &old[i0 - 1..i0 - 1 + zc];
                    for z in 0..zc {
                        let tc = c[z];
                        let a_raw = alpha0 + slope * tc;
                        let a = if a_raw > 0.0 { a_raw } else { 0.0 };
                        let coeff = dt * a;
                        let lx = ((e[z] - 2.0 * tc) + w[z]) * ivx;
                        let ly = ((n[z] - 2.0 * tc) + s[z]) * ivy;
                        let lz = ((up[z] - 2.0 * tc) + dn[z]) * ivz;
                        let out = tc + coeff * ((lx + ly) + lz);
                        let d = (out - tc).abs();
                        if d > maxd {
                            maxd = d;
                        }
                        self.row[z] = out;
                    }
                }
                self.local.write_f64s(new_base + i0 * 8, &self.row[..zc]);
            }
        }

        self.last_max_delta = maxd;
        self.phase ^= 1;
        self.compute += t0.elapsed();
    }

    /// Max |ΔT| of the most recent step on this unit.
    pub fn last_max_delta(&self) -> f64 {
        self.last_max_delta
    }

    /// Current-buffer value at padded-local coordinates (halo at 0).
    pub fn cell(&self, x: usize, y: usize, z: usize) -> f64 {
        self.local.read_f64(self.phase_base() + self.sub.idx(x, y, z) * 8)
    }

    /// Overwrite a current-buffer cell (test setup and custom initial data).
    pub fn set_cell(&mut self, x: usize, y: usize, z: usize, v: f64) {
        self.local.write_f64(self.phase_base() + self.sub.idx(x, y, z) * 8, v);
    }

    /// (min, max) over this unit's interior cells of the current buffer.
    pub fn interior_minmax(&mut self) -> (f64, f64) {
        let (xc, yc, zc) = (
            self.sub.xcell as usize,
            self.sub.ycell as usize,
            self.sub.zcell as usize,
        );
        let pb = self.phase_base();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in 1..=xc {
            for y in 1..=yc {
                self.local.read_f64s(pb + self.sub.idx(x, y, 1) * 8, &mut self.row[..zc]);
                for v in &self.row[..zc] {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
            }
        }
        (lo, hi)
    }

    /// This unit's interior cells of the current buffer, z fastest.
    pub fn interior_values(&mut self) -> Vec<f64> {
        let (xc, yc, zc) = (
            self.sub.xcell as usize,
            self.sub.ycell as usize,
            self.sub.zcell as usize,
        );
        let pb = self.phase_base();
        let mut out = Vec::with_capacity(xc * yc * zc);
        for x in 1..=xc {
            for y in 1..=yc {
                self.local.read_f64s(pb + self.sub.idx(x, y, 1) * 8, &mut self.row[..zc]);
                out.extend_from_slice(&self.row[..zc]);
            }
        }
        out
    }

    /// Timing and schedule report for this unit.
    pub fn report(&self, u: &Unit, iterations_done: u32, final_max_delta: f64) -> RunReport {
        let s = u.stats();
        RunReport {
            compute_seconds: self.compute.as_secs_f64(),
            exchange_seconds: self.exch.as_secs_f64(),
            sync_seconds: self.sync.as_secs_f64(),
            iterations_done,
            final_max_delta,
            gets_issued: s.gets - self.stats0.gets,
            barriers_entered: s.barriers - self.stats0.barriers,
        }
    }

    /// Collectively release the field segment.
    pub fn free(self, u: &mut Unit) -> Result<(), RtError> {
        u.team_memfree(TEAM_ALL, self.seg)
    }
}

// ---------------------------------------------------------------------------
// Whole-run driver

/// Per-unit timing/schedule breakdown of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunReport {
    /// Time inside `step` (snapshot + stencil + write-back).
    pub compute_seconds: f64,
    /// Time inside the halo get calls only.
    pub exchange_seconds: f64,
    /// Time inside the exchange barrier calls only.
    pub sync_seconds: f64,
    pub iterations_done: u32,
    /// Global max |ΔT| of the last completed step (0 for zero iterations).
    pub final_max_delta: f64,
    pub gets_issued: u64,
    pub barriers_entered: u64,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunSummary {
    /// One report per unit, indexed by unit id.
    pub reports: Vec<RunReport>,
    /// The assembled global field (when requested).
    pub field: Option<Field>,
    /// Final transport counters of the run.
    pub counters: CounterSnapshot,
}

/// Validate, launch, and run the solver to completion.
///
/// Iterates exchange → step; when `convergence_eps` is set, every
/// `check_every` iterations the units agree on the global max |ΔT| and stop
/// early once it drops below the threshold. With `collect_field`, each unit
/// hands back its interior and the global field is assembled for comparison
/// against the serial reference.
pub fn run(
    grid: &GridSpec,
    params: &SolverParams,
    config: RuntimeConfig,
    collect_field: bool,
) -> Result<RunSummary, HeatError> {
    validate(grid, params, config.num_units)?;
    let (grid, params) = (*grid, *params);

    let out = launch(config, move |u| {
        let mut solver = Solver::new(u, grid, params)?;
        let mut done = 0u32;
        for it in 0..params.iterations {
            solver.exchange(u)?;
            solver.step();
            done = it + 1;
            if let Some(eps) = params.convergence_eps {
                if done % params.check_every == 0 {
                    let global = u.allreduce_max(TEAM_ALL, solver.last_max_delta())?;
                    if global < eps {
                        break;
                    }
                }
            }
        }
        let final_delta = if done > 0 {
            u.allreduce_max(TEAM_ALL, solver.last_max_delta())?
        } else {
            0.0
        };
        let report = solver.report(u, done, final_delta);
        let interior = if collect_field { Some(solver.interior_values()) } else { None };
        let sub = solver.sub().clone();
        solver.free(u)?;
        Ok((report, sub, interior))
    })?;

    let mut reports = Vec::with_capacity(out.results.len());
    let mut field = collect_field.then(|| Field::filled(grid.nx, grid.ny, grid.nz, grid.boundary_temp));
    for (report, sub, interior) in out.results {
        reports.push(report);
        if let (Some(field), Some(vals)) = (field.as_mut(), interior) {
            let mut i = 0;
            for x in 0..sub.xcell {
                for y in 0..sub.ycell {
                    for z in 0..sub.zcell {
                        field.set(sub.x0 + x + 1, sub.y0 + y + 1, sub.z0 + z + 1, vals[i]);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(RunSummary { reports, field, counters: out.counters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::transport::LatencyModel;

    fn quiet_cfg(units: u32, node_size: u32) -> RuntimeConfig {
        let mut cfg = RuntimeConfig::new(units, node_size);
        cfg.latency = LatencyModel { base_s: [0.0; 4], invbw_s_per_byte: [0.0; 4] };
        cfg
    }

    #[test]
    fn factor_choices_match_hand_enumeration() {
        assert_eq!(checkerboard_factors(1), (1, 1, 1));
        assert_eq!(checkerboard_factors(2), (1, 1, 2));
        assert_eq!(checkerboard_factors(8), (2, 2, 2));
        assert_eq!(checkerboard_factors(12), (2, 2, 3));
        assert_eq!(checkerboard_factors(16), (2, 2, 4));
        assert_eq!(checkerboard_factors(32), (2, 4, 4));
        assert_eq!(checkerboard_factors(64), (4, 4, 4));
    }

    #[test]
    fn split_gives_remainder_to_lower_coordinates() {
        assert_eq!(split_lengths(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(split_lengths(9, 3), vec![3, 3, 3]);
        assert_eq!(split_lengths(5, 1), vec![5]);
        assert_eq!(split_lengths(4, 4), vec![1, 1, 1, 1]);
    }

    #[test]
    fn validate_rejects_oversplit_and_unstable_configs() {
        let grid = GridSpec::new(1, 1, 1);
        let params = SolverParams { iterations: 1, ..Default::default() };
        assert!(matches!(validate(&grid, &params, 8), Err(HeatError::Config(_))));

        let grid = GridSpec { initial_temp: 1.0, ..GridSpec::new(8, 8, 8) };
        let bound = params.max_stable_dt(&grid);
        let bad = SolverParams { dt: bound * 1.01, ..params };
        assert!(matches!(validate(&grid, &bad, 2), Err(HeatError::Config(_))));
        let good = SolverParams { dt: bound, ..params };
        assert!(validate(&grid, &good, 2).is_ok());
    }

    #[test]
    fn neighbor_map_for_three_cubed() {
        let topo = CartTopology::new(27);
        assert_eq!((topo.px, topo.py, topo.pz), (3, 3, 3));
        let center = topo.rank_of(1, 1, 1);
        for dir in Direction::EXCHANGE_ORDER {
            assert!(topo.neighbor(center, dir).is_some());
        }
        // Corner (0,0,0): only North (+y), East (+x), Up (+z) exist.
        let corner = topo.rank_of(0, 0, 0);
        assert_eq!(topo.neighbor(corner, Direction::South), None);
        assert_eq!(topo.neighbor(corner, Direction::West), None);
        assert_eq!(topo.neighbor(corner, Direction::Down), None);
        assert_eq!(topo.neighbor(corner, Direction::North), Some(topo.rank_of(0, 1, 0)));
        assert_eq!(topo.neighbor(corner, Direction::East), Some(topo.rank_of(1, 0, 0)));
        assert_eq!(topo.neighbor(corner, Direction::Up), Some(topo.rank_of(0, 0, 1)));
    }

    #[test]
    fn uniform_field_at_boundary_temperature_is_a_fixed_point() {
        let grid = GridSpec {
            boundary_temp: 0.7,
            initial_temp: 0.7,
            ..GridSpec::new(6, 6, 6)
        };
        let params = SolverParams { iterations: 5, ..Default::default() };
        let out = run(&grid, &params, quiet_cfg(2, 2), true).unwrap();
        let field = out.field.unwrap();
        let expected = Field::filled(6, 6, 6, 0.7);
        let cmp = oracle::compare(&field, &expected).unwrap();
        assert_eq!(cmp.max_abs_diff, 0.0);
        assert_eq!(cmp.first_diff, None);
        assert_eq!(out.reports[0].final_max_delta, 0.0);
    }

    #[test]
    fn hand_checked_single_step_on_a_three_cell_line() {
        // Interior (0,1,0) along x, boundary held at 1.0, dt·alpha = 0.25: the
        // y/z curvatures vanish and the center cell relaxes to 0.5 exactly.
        // (dt 0.25 is beyond the stability bound, which is fine for examining
        // a single step of the raw solver.)
        let grid = GridSpec {
            boundary_temp: 1.0,
            initial_temp: 0.0,
            ..GridSpec::new(3, 1, 1)
        };
        let params = SolverParams { iterations: 1, dt: 0.25, ..Default::default() };
        launch(quiet_cfg(1, 1), move |u| {
            let mut solver = Solver::new(u, grid, params)?;
            solver.set_cell(2, 1, 1, 1.0);
            solver.exchange(u)?;
            solver.step();
            assert_eq!(solver.cell(2, 1, 1), 0.5);
            solver.free(u)?;
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn parallel_field_is_bit_identical_to_serial_reference() {
        let grid = GridSpec::new(6, 6, 6).with_seed(7);
        let params = SolverParams {
            iterations: 10,
            dt: SolverParams::default().max_stable_dt(&grid),
            ..Default::default()
        };
        let reference = oracle::serial_solve(&grid, &params).unwrap();
        for units in [1, 2, 4] {
            let out = run(&grid, &params, quiet_cfg(units, 2), true).unwrap();
            let cmp = oracle::compare(out.field.as_ref().unwrap(), &reference).unwrap();
            assert_eq!(cmp.max_abs_diff, 0.0, "{units} units diverged: {cmp:?}");
            assert_eq!(cmp.first_diff, None);
        }
    }

    #[test]
    fn exchange_schedule_counts_match_the_closed_form() {
        let grid = GridSpec::new(8, 8, 8).with_seed(3);
        let params = SolverParams {
            iterations: 2,
            dt: SolverParams::default().max_stable_dt(&grid),
            ..Default::default()
        };
        let out = launch(quiet_cfg(8, 4), move |u| {
            let mut solver = Solver::new(u, grid, params)?;
            let mut per_iter = Vec::new();
            for _ in 0..2 {
                let before = u.stats();
                solver.exchange(u)?;
                let after = u.stats();
                per_iter.push((after.gets - before.gets, after.barriers - before.barriers));
                solver.step();
            }
            let expected = solver.sub().expected_gets();
            solver.free(u)?;
            Ok((per_iter, expected))
        })
        .unwrap();
        for (per_iter, expected) in out.results {
            for (gets, barriers) in per_iter {
                assert_eq!(gets, expected);
                assert_eq!(barriers, 6);
            }
        }
    }

    #[test]
    fn zero_iterations_returns_the_initial_condition() {
        let grid = GridSpec::new(5, 4, 3).with_seed(11);
        let params = SolverParams { iterations: 0, ..Default::default() };
        let out = run(&grid, &params, quiet_cfg(2, 2), true).unwrap();
        let report = out.reports[0];
        assert_eq!(report.iterations_done, 0);
        assert_eq!(report.final_max_delta, 0.0);
        assert_eq!(report.gets_issued, 0);
        assert_eq!(report.barriers_entered, 0);

        let mut expected = Field::filled(5, 4, 3, grid.boundary_temp);
        for x in 0..5 {
            for y in 0..4 {
                for z in 0..3 {
                    expected.set(x + 1, y + 1, z + 1, grid.initial_cell(x, y, z));
                }
            }
        }
        let cmp = oracle::compare(out.field.as_ref().unwrap(), &expected).unwrap();
        assert_eq!(cmp.max_abs_diff, 0.0);
    }

    #[test]
    fn convergence_stops_at_the_first_check_on_a_fixed_point() {
        let grid = GridSpec {
            boundary_temp: 0.2,
            initial_temp: 0.2,
            ..GridSpec::new(4, 4, 4)
        };
        let params = SolverParams {
            iterations: 20,
            convergence_eps: Some(1e-12),
            check_every: 5,
            ..Default::default()
        };
        let out = run(&grid, &params, quiet_cfg(2, 2), false).unwrap();
        for r in &out.reports {
            assert_eq!(r.iterations_done, 5);
        }
    }

    #[test]
    fn seeded_initial_condition_is_decomposition_invariant_and_in_range() {
        let grid = GridSpec::new(7, 5, 6).with_seed(99);
        for x in 0..7 {
            for y in 0..5 {
                for z in 0..6 {
                    let v = grid.initial_cell(x, y, z);
                    assert!((0.0..1.0).contains(&v));
                }
            }
        }
        // Two different unit counts, zero iterations: identical assembled fields.
        let params = SolverParams { iterations: 0, ..Default::default() };
        let a = run(&grid, &params, quiet_cfg(1, 1), true).unwrap();
        let b = run(&grid, &params, quiet_cfg(6, 2), true).unwrap();
        let cmp = oracle::compare(a.field.as_ref().unwrap(), b.field.as_ref().unwrap()).unwrap();
        assert_eq!(cmp.max_abs_diff, 0.0);
    }
}
