//! Independent serial reference for the heat solver, plus field comparison
//! and a simple binary dump format.
//!
//! `serial_solve` is deliberately a straight-line re-implementation — plain
//! nested loops over two padded buffers, its own copy of the initial-condition
//! hash, its own validation — sharing nothing with the parallel solver except
//! the configuration types. Agreement between the two is therefore evidence,
//! not tautology. The arithmetic is kept in the same evaluation order so the
//! comparison can demand bit equality.

use std::io::{Read, Write};

use thiserror::Error;

use crate::heat3d::{GridSpec, SolverParams};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid reference configuration: {0}")]
    Config(String),
    #[error("field shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (u32, u32, u32), b: (u32, u32, u32) },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("field file is malformed: {0}")]
    Format(String),
}

// ---------------------------------------------------------------------------
// Field storage

/// A global temperature field of `nx·ny·nz` cells stored with its one-cell
/// boundary layer: `(nx+2)·(ny+2)·(nz+2)` values, z fastest. Padded
/// coordinates: interior is `1..=nx` etc., the boundary layer sits at 0 and
/// `n+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub nx: u32,
    pub ny: u32,
    pub nz: u32,
    pub data: Vec<f64>,
}

impl Field {
    pub fn filled(nx: u32, ny: u32, nz: u32, value: f64) -> Field {
        let vol = (nx as usize + 2) * (ny as usize + 2) * (nz as usize + 2);
        Field { nx, ny, nz, data: vec![value; vol] }
    }

    pub fn shape(&self) -> (u32, u32, u32) {
        (self.nx, self.ny, self.nz)
    }

    /// Flat index for padded coordinates.
    pub fn idx(&self, x: u32, y: u32, z: u32) -> usize {
        (x as usize * (self.ny as usize + 2) + y as usize) * (self.nz as usize + 2) + z as usize
    }

    pub fn get(&self, x: u32, y: u32, z: u32) -> f64 {
        self.data[self.idx(x, y, z)]
    }

    pub fn set(&mut self, x: u32, y: u32, z: u32, value: f64) {
        let i = self.idx(x, y, z);
        self.data[i] = value;
    }
}

// ---------------------------------------------------------------------------
// Comparison

/// Outcome of an exact field comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareReport {
    /// Largest |a − b| over all cells; infinite if any pair involves a NaN
    /// that is not bit-identical on both sides.
    pub max_abs_diff: f64,
    /// Padded coordinates of the first cell (scan order: x, then y, then z)
    /// whose bit patterns differ, or None when the fields are bit-identical.
    pub first_diff: Option<(u32, u32, u32)>,
}

/// Exact (bit-level) comparison of two fields of the same shape.
pub fn compare(a: &Field, b: &Field) -> Result<CompareReport, OracleError> {
    if a.shape() != b.shape() {
        return Err(OracleError::ShapeMismatch { a: a.shape(), b: b.shape() });
    }
    let mut max_abs_diff = 0.0f64;
    let mut first_diff = None;
    let mut i = 0;
    for x in 0..a.nx + 2 {
        for y in 0..a.ny + 2 {
            for z in 0..a.nz + 2 {
                let (va, vb) = (a.data[i], b.data[i]);
                i += 1;
                if va.to_bits() == vb.to_bits() {
                    continue;
                }
                if first_diff.is_none() {
                    first_diff = Some((x, y, z));
                }
                let d = (va - vb).abs();
                let d = if d.is_nan() { f64::INFINITY } else { d };
                if d > max_abs_diff {
                    max_abs_diff = d;
                }
            }
        }
    }
    Ok(CompareReport { max_abs_diff, first_diff })
}

// ---------------------------------------------------------------------------
// Serial reference solver

/// Oracle-private copy of the per-cell initial-condition hash (splitmix64
/// finalizer mapped to [0, 1)); kept separate from the parallel solver's copy
/// on purpose.
fn hash01(seed: u64, index: u64) -> f64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Run the explicit scheme serially and return the final field (boundary
/// layer included). Performs its own configuration checks, including the
/// stability bound, and honors the same early-stop rule as the parallel
/// solver (max |ΔT| below `convergence_eps`, tested every `check_every`
/// iterations).
pub fn serial_solve(grid: &GridSpec, params: &SolverParams) -> Result<Field, OracleError> {
    // Independent validation.
    if grid.nx == 0 || grid.ny == 0 || grid.nz == 0 {
        return Err(OracleError::Config("grid extents must be >= 1".into()));
    }
    for (name, v) in [("dx", grid.dx), ("dy", grid.dy), ("dz", grid.dz)] {
        if !v.is_finite() || v <= 0.0 {
            return Err(OracleError::Config(format!("{name} must be finite and > 0")));
        }
    }
    if !grid.boundary_temp.is_finite() || !grid.initial_temp.is_finite() {
        return Err(OracleError::Config("temperatures must be finite".into()));
    }
    if !params.dt.is_finite() || params.dt <= 0.0 {
        return Err(OracleError::Config("dt must be finite and > 0".into()));
    }
    if !params.alpha0.is_finite() || !params.alpha_slope.is_finite() {
        return Err(OracleError::Config("diffusivity parameters must be finite".into()));
    }
    if params.check_every == 0 {
        return Err(OracleError::Config("check_every must be >= 1".into()));
    }
    let (ilo, ihi) = match grid.seed {
        None => (grid.initial_temp, grid.initial_temp),
        Some(_) => (0.0, 1.0),
    };
    let lo = grid.boundary_temp.min(ilo);
    let hi = grid.boundary_temp.max(ihi);
    let a_max = (params.alpha0 + params.alpha_slope * lo)
        .max(0.0)
        .max((params.alpha0 + params.alpha_slope * hi).max(0.0));
    if a_max > 0.0 {
        let s = 1.0 / (grid.dx * grid.dx)
            + 1.0 / (grid.dy * grid.dy)
            + 1.0 / (grid.dz * grid.dz);
        let bound = 1.0 / (2.0 * a_max * s);
        if params.dt > bound {
            return Err(OracleError::Config(format!(
                "dt {} exceeds the stability bound {bound}",
                params.dt
            )));
        }
    }

    let (nx, ny, nz) = (grid.nx as usize, grid.ny as usize, grid.nz as usize);
    let mut cur = Field::filled(grid.nx, grid.ny, grid.nz, grid.boundary_temp);
    let mut nxt = cur.clone();
    for x in 0..grid.nx {
        for y in 0..grid.ny {
            for z in 0..grid.nz {
                let v = match grid.seed {
                    None => grid.initial_temp,
                    Some(seed) => {
                        let index =
                            (x as u64 * grid.ny as u64 + y as u64) * grid.nz as u64 + z as u64;
                        hash01(seed, index)
                    }
                };
                cur.set(x + 1, y + 1, z + 1, v);
            }
        }
    }

    let inv_dx2 = 1.0 / (grid.dx * grid.dx);
    let inv_dy2 = 1.0 / (grid.dy * grid.dy);
    let inv_dz2 = 1.0 / (grid.dz * grid.dz);
    let sy = nz + 2; // stride for +1 in y
    let sx = (ny + 2) * (nz + 2); // stride for +1 in x

    for it in 0..params.iterations {
        let mut max_delta = 0.0f64;
        for x in 1..=nx {
            for y in 1..=ny {
                for z in 1..=nz {
                    let i = (x * (ny + 2) + y) * (nz + 2) + z;
                    let tc = cur.data[i];
                    let a_raw = params.alpha0 + params.alpha_slope * tc;
                    let a = if a_raw > 0.0 { a_raw } else { 0.0 };
                    let coeff = params.dt * a;
                    let lx = ((cur.data[i + sx] - 2.0 * tc) + cur.data[i - sx]) * inv_dx2;
                    let ly = ((cur.data[i + sy] - 2.0 * tc) + cur.data[i - sy]) * inv_dy2;
                    let lz = ((cur.data[i + 1] - 2.0 * tc) + cur.data[i - 1]) * inv_dz2;
                    let out = tc + coeff * ((lx + ly) + lz);
                    let d = (out - tc).abs();
                    if d > max_delta {
                        max_delta = d;
                    }
                    nxt.data[i] = out;
                }
            }
        }
        std::mem::swap(&mut cur, &mut nxt);
        if let Some(eps) = params.convergence_eps {
            if (it + 1) % params.check_every == 0 && max_delta < eps {
                break;
            }
        }
    }
    Ok(cur)
}

// ---------------------------------------------------------------------------
// Binary dump format

/// Write a field with its spacings: a 48-byte header — nx, ny, nz as u64
/// little-endian, then dx, dy, dz as f64 little-endian — followed by the
/// padded data as f64 little-endian in storage order (z fastest).
pub fn write_field<W: Write>(
    w: &mut W,
    field: &Field,
    spacing: (f64, f64, f64),
) -> Result<(), OracleError> {
    for n in [field.nx, field.ny, field.nz] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for d in [spacing.0, spacing.1, spacing.2] {
        w.write_all(&d.to_le_bytes())?;
    }
    for v in &field.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a field written by [`write_field`]; rejects truncated or oversized
/// input.
pub fn read_field<R: Read>(r: &mut R) -> Result<(Field, (f64, f64, f64)), OracleError> {
    let mut header = [0u8; 48];
    r.read_exact(&mut header)?;
    let word = |i: usize| -> [u8; 8] { header[i * 8..(i + 1) * 8].try_into().unwrap() };
    let dim = |i: usize| -> Result<u32, OracleError> {
        u32::try_from(u64::from_le_bytes(word(i)))
            .map_err(|_| OracleError::Format(format!("grid extent {} does not fit u32", i)))
    };
    let (nx, ny, nz) = (dim(0)?, dim(1)?, dim(2)?);
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(OracleError::Format("grid extents must be >= 1".into()));
    }
    let spacing = (
        f64::from_le_bytes(word(3)),
        f64::from_le_bytes(word(4)),
        f64::from_le_bytes(word(5)),
    );
    let vol = (nx as usize + 2)
        .checked_mul(ny as usize + 2)
        .and_then(|v| v.checked_mul(nz as usize + 2))
        .ok_or_else(|| OracleError::Format("field volume overflows".into()))?;
    let mut data = vec![0.0f64; vol];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    if r.read(&mut buf)? != 0 {
        return Err(OracleError::Format("trailing bytes after field data".into()));
    }
    Ok((Field { nx, ny, nz, data }, spacing))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_grid() -> GridSpec {
        GridSpec::new(4, 3, 5).with_seed(42)
    }

    fn stable_params(grid: &GridSpec, iterations: u32) -> SolverParams {
        let p = SolverParams { iterations, ..Default::default() };
        SolverParams { dt: p.max_stable_dt(grid), ..p }
    }

    #[test]
    fn zero_iterations_returns_the_initial_condition() {
        let grid = tiny_grid();
        let field = serial_solve(&grid, &stable_params(&grid, 0)).unwrap();
        for x in 0..grid.nx {
            for y in 0..grid.ny {
                for z in 0..grid.nz {
                    assert_eq!(field.get(x + 1, y + 1, z + 1), grid.initial_cell(x, y, z));
                }
            }
        }
        assert_eq!(field.get(0, 0, 0), grid.boundary_temp);
    }

    #[test]
    fn uniform_field_at_boundary_temperature_is_exactly_stationary() {
        let grid = GridSpec {
            boundary_temp: 1.5,
            initial_temp: 1.5,
            ..GridSpec::new(5, 5, 5)
        };
        let field = serial_solve(&grid, &stable_params(&grid, 25)).unwrap();
        assert!(field.data.iter().all(|v| *v == 1.5));
    }

    #[test]
    fn solve_is_deterministic() {
        let grid = tiny_grid();
        let params = stable_params(&grid, 13);
        let a = serial_solve(&grid, &params).unwrap();
        let b = serial_solve(&grid, &params).unwrap();
        assert_eq!(compare(&a, &b).unwrap().first_diff, None);
    }

    #[test]
    fn unstable_dt_is_rejected() {
        let grid = tiny_grid();
        let mut params = stable_params(&grid, 5);
        params.dt *= 1.5;
        assert!(matches!(serial_solve(&grid, &params), Err(OracleError::Config(_))));
    }

    #[test]
    fn hash_is_deterministic_uniform_and_seed_sensitive() {
        let a = hash01(42, 7);
        assert_eq!(a, hash01(42, 7));
        assert!((0.0..1.0).contains(&a));
        assert_ne!(hash01(42, 7), hash01(43, 7));
        assert_ne!(hash01(42, 7), hash01(42, 8));
        // Coarse uniformity: mean of many samples near 1/2.
        let mean = (0..10_000).map(|i| hash01(1, i)).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn compare_reports_the_first_bit_difference() {
        let grid = tiny_grid();
        let params = stable_params(&grid, 3);
        let a = serial_solve(&grid, &params).unwrap();
        let mut b = a.clone();
        assert_eq!(
            compare(&a, &b).unwrap(),
            CompareReport { max_abs_diff: 0.0, first_diff: None }
        );

        let v = b.get(2, 3, 1);
        b.set(2, 3, 1, v + 1e-9);
        let report = compare(&a, &b).unwrap();
        assert_eq!(report.first_diff, Some((2, 3, 1)));
        assert!((report.max_abs_diff - 1e-9).abs() < 1e-15);
    }

    #[test]
    fn compare_treats_nan_divergence_as_infinite() {
        let a = Field::filled(2, 2, 2, 0.0);
        let mut b = a.clone();
        b.set(1, 1, 1, f64::NAN);
        let report = compare(&a, &b).unwrap();
        assert_eq!(report.max_abs_diff, f64::INFINITY);
        assert_eq!(report.first_diff, Some((1, 1, 1)));
    }

    #[test]
    fn compare_rejects_shape_mismatch() {
        let a = Field::filled(2, 2, 2, 0.0);
        let b = Field::filled(2, 2, 3, 0.0);
        assert!(matches!(compare(&a, &b), Err(OracleError::ShapeMismatch { .. })));
    }

    #[test]
    fn dump_round_trips_bit_exactly() {
        let grid = tiny_grid();
        let field = serial_solve(&grid, &stable_params(&grid, 4)).unwrap();
        let mut buf = Vec::new();
        write_field(&mut buf, &field, (1.0, 0.5, 2.0)).unwrap();
        assert_eq!(buf.len(), 48 + field.data.len() * 8);
        let (back, spacing) = read_field(&mut buf.as_slice()).unwrap();
        assert_eq!(spacing, (1.0, 0.5, 2.0));
        assert_eq!(compare(&field, &back).unwrap().first_diff, None);

        // Truncated and padded inputs are both rejected.
        let short = &buf[..buf.len() - 1];
        assert!(read_field(&mut &short[..]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_field(&mut long.as_slice()), Err(OracleError::Format(_))));
    }

    #[test]
    fn early_stop_leaves_a_fixed_point_untouched() {
        let grid = GridSpec {
            boundary_temp: 0.3,
            initial_temp: 0.3,
            ..GridSpec::new(4, 4, 4)
        };
        let params = SolverParams {
            convergence_eps: Some(1e-12),
            check_every: 2,
            ..stable_params(&grid, 50)
        };
        let field = serial_solve(&grid, &params).unwrap();
        assert!(field.data.iter().all(|v| *v == 0.3));
    }
}
