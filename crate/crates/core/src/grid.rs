//! Discrete domain: a 2-D x-z slice (optionally extruded in y) over a
//! Gaussian hill, with terrain-following vertical coordinates and an
//! emulated-rank partition of the flattened point array.

use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("invalid partition: nranks = {nranks}, nglobal = {nglobal}")]
    InvalidPartition { nranks: usize, nglobal: usize },
}

fn default_ny() -> usize {
    1
}

/// Physical description of the domain and the hill profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Grid points in x (periodic direction).
    pub nx: usize,
    /// Vertical levels.
    pub nz: usize,
    /// Points in y; 1 selects the 2-D slice.
    #[serde(default = "default_ny")]
    pub ny: usize,
    /// Horizontal extent [m].
    pub lx: f64,
    /// Domain height H [m].
    pub height: f64,
    /// Maximum hill height h0 [m].
    pub h0: f64,
    /// Hill radius [m].
    pub hr: f64,
    /// Hill center [m].
    pub xc: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.nx < 4 || self.nz < 4 {
            return Err(GridError::InvalidSpec(format!(
                "nx and nz must be >= 4 (got nx={}, nz={})",
                self.nx, self.nz
            )));
        }
        if self.ny < 1 {
            return Err(GridError::InvalidSpec("ny must be >= 1".into()));
        }
        if !(self.lx > 0.0) || !(self.height > 0.0) || !(self.hr > 0.0) {
            return Err(GridError::InvalidSpec(
                "lx, height and hr must be positive".into(),
            ));
        }
        if !(self.h0 >= 0.0) || self.h0 >= self.height {
            return Err(GridError::InvalidSpec(format!(
                "hill height h0={} must satisfy 0 <= h0 < H={}",
                self.h0, self.height
            )));
        }
        if !(0.0 <= self.xc && self.xc <= self.lx) {
            return Err(GridError::InvalidSpec("xc must lie in [0, lx]".into()));
        }
        Ok(())
    }

    pub fn nglobal(&self) -> usize {
        self.nx * self.ny * self.nz
    }
}

/// Gaussian hill profile h(x) = h0 * exp(-((x - xc)/hr)^2).
pub fn hill_height(x: f64, spec: &DomainSpec) -> f64 {
    let s = (x - spec.xc) / spec.hr;
    spec.h0 * (-s * s).exp()
}

/// Contiguous balanced decomposition of the flattened array, standing in
/// for the per-process ownership of an MPI run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub nranks: usize,
    pub nglobal: usize,
    pub ranges: Vec<Range<usize>>,
}

impl Partition {
    /// Rank owning global index `i`.
    pub fn rank_of(&self, i: usize) -> usize {
        self.ranges
            .binary_search_by(|r| {
                if i < r.start {
                    std::cmp::Ordering::Greater
                } else if i >= r.end {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .expect("index within nglobal")
    }
}

/// Balanced contiguous ranges covering [0, nglobal); sizes differ by at most 1.
pub fn make_partition(nglobal: usize, nranks: usize) -> Result<Partition, GridError> {
    if nranks == 0 || nranks > nglobal {
        return Err(GridError::InvalidPartition { nranks, nglobal });
    }
    let base = nglobal / nranks;
    let extra = nglobal % nranks;
    let mut ranges = Vec::with_capacity(nranks);
    let mut start = 0;
    for r in 0..nranks {
        let len = base + usize::from(r < extra);
        ranges.push(start..start + len);
        start += len;
    }
    debug_assert_eq!(start, nglobal);
    Ok(Partition {
        nranks,
        nglobal,
        ranges,
    })
}

/// The discrete grid: point coordinates and terrain-following metric
/// coefficients. Flattened index layout is ((iy * nx + ix) * nz + iz),
/// i.e. the vertical runs fastest (columns are contiguous).
#[derive(Debug, Clone)]
pub struct Grid {
    pub spec: DomainSpec,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    /// Terrain height per x-column.
    pub terrain: Vec<f64>,
    /// Terrain slope per x-column (centered differences, periodic).
    pub dhdx: Vec<f64>,
    /// Jacobian dz/dz~ = (H - h)/H per point, strictly positive.
    pub jac: Vec<f64>,
    /// Cross metric dz~/dx per point [1/1].
    pub g13: Vec<f64>,
    /// Vertical metric dz~/dz = H/(H - h) per point.
    pub g33: Vec<f64>,
}

impl Grid {
    #[inline]
    pub fn idx(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iy * self.spec.nx + ix) * self.spec.nz + iz
    }

    pub fn nglobal(&self) -> usize {
        self.spec.nglobal()
    }

    pub fn x(&self, ix: usize) -> f64 {
        ix as f64 * self.dx
    }

    /// Computational (terrain-following) height of level iz.
    pub fn zt(&self, iz: usize) -> f64 {
        iz as f64 * self.dz
    }

    /// Physical height of a point: z = h + z~ (H - h)/H.
    pub fn z(&self, ix: usize, iz: usize) -> f64 {
        let h = self.terrain[ix];
        // written so flat terrain (h = 0) maps identically, not to within a ULP
        h + self.zt(iz) * (1.0 - h / self.spec.height)
    }
}

/// Builds the grid with the Gal-Chen transform z~ = H (z - h)/(H - h).
/// Metric coefficients come from centered differences of the terrain.
pub fn build_grid(spec: &DomainSpec) -> Result<Grid, GridError> {
    spec.validate()?;
    let (nx, ny, nz) = (spec.nx, spec.ny, spec.nz);
    let dx = spec.lx / nx as f64;
    let dz = spec.height / (nz - 1) as f64;
    let dy = dx;

    let terrain: Vec<f64> = (0..nx).map(|i| hill_height(i as f64 * dx, spec)).collect();
    // centered differences with periodic wrap in x
    let dhdx: Vec<f64> = (0..nx)
        .map(|i| {
            let e = terrain[(i + 1) % nx];
            let w = terrain[(i + nx - 1) % nx];
            (e - w) / (2.0 * dx)
        })
        .collect();

    let n = spec.nglobal();
    let mut jac = vec![0.0; n];
    let mut g13 = vec![0.0; n];
    let mut g33 = vec![0.0; n];
    let hh = spec.height;
    for iy in 0..ny {
        for ix in 0..nx {
            let h = terrain[ix];
            let hp = dhdx[ix];
            let j_col = (hh - h) / hh;
            for iz in 0..nz {
                let p = (iy * nx + ix) * nz + iz;
                let zt = iz as f64 * dz;
                jac[p] = j_col;
                g33[p] = hh / (hh - h);
                g13[p] = hp * (zt - hh) / (hh - h);
            }
        }
    }
    if jac.iter().any(|&j| !(j > 0.0)) {
        return Err(GridError::InvalidSpec(
            "terrain transform singular: Jacobian not positive".into(),
        ));
    }

    Ok(Grid {
        spec: spec.clone(),
        dx,
        dy,
        dz,
        terrain,
        dhdx,
        jac,
        g13,
        g33,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(nx: usize, nz: usize, h0: f64) -> DomainSpec {
        DomainSpec {
            nx,
            nz,
            ny: 1,
            lx: 2.4e6,
            height: 40800.0,
            h0,
            hr: 3.0e5,
            xc: 1.2e6,
        }
    }

    #[test]
    fn hill_peak_and_decay() {
        let s = spec(16, 8, 4000.0);
        assert_eq!(hill_height(s.xc, &s), 4000.0);
        // one hill radius away: h0 / e
        assert_relative_eq!(
            hill_height(s.xc + s.hr, &s),
            4000.0 * (-1.0f64).exp(),
            max_relative = 1e-14
        );
        assert!(hill_height(s.xc + 20.0 * s.hr, &s) < 1e-10);
        // symmetry about xc
        for d in [1.0e4, 7.7e4, 2.9e5] {
            assert_eq!(hill_height(s.xc + d, &s), hill_height(s.xc - d, &s));
        }
    }

    #[test]
    fn flat_terrain_metrics_are_identity() {
        let g = build_grid(&spec(16, 8, 0.0)).unwrap();
        for p in 0..g.nglobal() {
            assert_eq!(g.jac[p], 1.0);
            assert_eq!(g.g13[p], 0.0);
            assert_eq!(g.g33[p], 1.0);
        }
        // z~ = z everywhere
        for iz in 0..8 {
            assert_eq!(g.z(3, iz), g.zt(iz));
        }
    }

    #[test]
    fn transform_maps_terrain_and_lid() {
        let g = build_grid(&spec(32, 10, 4000.0)).unwrap();
        for ix in 0..32 {
            assert_relative_eq!(g.z(ix, 0), g.terrain[ix], max_relative = 1e-14);
            assert_relative_eq!(g.z(ix, 9), 40800.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn half_height_hill_doubles_vertical_metric() {
        let mut s = spec(16, 8, 0.0);
        s.h0 = s.height / 2.0;
        let g = build_grid(&s).unwrap();
        // at the hill peak the vertical metric term is H/(H - h0) = 2
        let ix = 8; // x = xc for this layout
        assert_eq!(g.x(ix), s.xc);
        let p = g.idx(ix, 0, 4);
        assert_relative_eq!(g.g33[p], 2.0, max_relative = 1e-14);
        assert_relative_eq!(g.jac[p], 0.5, max_relative = 1e-14);
    }

    #[test]
    fn rejects_singular_transform() {
        let mut s = spec(16, 8, 0.0);
        s.h0 = s.height;
        assert!(build_grid(&s).is_err());
        s.h0 = s.height * 1.5;
        assert!(build_grid(&s).is_err());
    }

    #[test]
    fn partition_examples() {
        let p = make_partition(10, 1).unwrap();
        assert_eq!(p.ranges, vec![0..10]);

        let p = make_partition(10, 3).unwrap();
        let sizes: Vec<usize> = p.ranges.iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);

        // O40 global point count over 36 ranks
        let p = make_partition(399_840, 36).unwrap();
        assert_eq!(p.ranges.len(), 36);
        assert!(p.ranges.iter().all(|r| r.len() == 11106 || r.len() == 11107));
        assert_eq!(p.ranges.iter().map(|r| r.len()).sum::<usize>(), 399_840);
    }

    #[test]
    fn partition_rejects_bad_rank_counts() {
        assert!(make_partition(10, 0).is_err());
        assert!(make_partition(10, 11).is_err());
        assert!(make_partition(10, 10).is_ok());
    }

    #[test]
    fn partition_covers_and_is_ordered() {
        for (n, r) in [(17, 4), (100, 7), (8192, 36)] {
            let p = make_partition(n, r).unwrap();
            let mut next = 0;
            for range in &p.ranges {
                assert_eq!(range.start, next);
                next = range.end;
            }
            assert_eq!(next, n);
            assert_eq!(p.rank_of(0), 0);
            assert_eq!(p.rank_of(n - 1), r - 1);
        }
    }
}
