//! Topology-preserving thinning of binary masks and volumes.
//!
//! Both dimensions use directional sub-iterations: for each axis direction
//! (4 in 2D, 6 in 3D) the border points facing that direction that are
//! simple and are not curve ends are collected in parallel, then removed one
//! at a time with their simplicity re-checked against the current image.
//! Sweeps repeat until nothing changes. Curve ends (points with a single
//! neighbour) are never removed, so thin inputs are returned unchanged.
//!
//! Simple points are characterised locally: in 2D by the 8-connectivity
//! Yokoi number, in 3D by the (26, 6) topological numbers.

use std::collections::HashSet;
use std::sync::OnceLock;

use nalgebra::SVector;

use crate::error::{Error, Result};
use crate::skeleton::{offset, SkeletonPointSet};

/// Row-major binary raster, `data[y * width + x]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn foreground(&self) -> impl Iterator<Item = [i64; 2]> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| [(i % self.width) as i64, (i / self.width) as i64])
    }
}

/// Binary voxel grid, x-fastest: `data[(z * ny + y) * nx + x]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub data: Vec<bool>,
}

impl VoxelGrid {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self {
            nx,
            ny,
            nz,
            data: vec![false; nx * ny * nz],
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[(z * self.ny + y) * self.nx + x]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        self.data[(z * self.ny + y) * self.nx + x] = value;
    }

    pub fn foreground(&self) -> impl Iterator<Item = [i64; 3]> + '_ {
        let (nx, ny) = (self.nx, self.ny);
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| [(i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64])
    }
}

/// Skeleton of a binary mask, as pixel coordinates `(x, y)` on a unit grid.
pub fn thin_mask_2d(mask: &BinaryImage) -> Result<SkeletonPointSet<2>> {
    let cells: HashSet<[i64; 2]> = mask.foreground().collect();
    if cells.is_empty() {
        return Err(Error::EmptyMask);
    }
    to_point_set(thin_cells(cells))
}

/// Curve skeleton of a binary volume, as voxel coordinates `(x, y, z)` on a
/// unit grid.
pub fn thin_volume_3d(volume: &VoxelGrid) -> Result<SkeletonPointSet<3>> {
    let cells: HashSet<[i64; 3]> = volume.foreground().collect();
    if cells.is_empty() {
        return Err(Error::EmptyVolume);
    }
    to_point_set(thin_cells(cells))
}

fn to_point_set<const D: usize>(cells: Vec<[i64; D]>) -> Result<SkeletonPointSet<D>> {
    let points = cells
        .iter()
        .map(|c| SVector::<f64, D>::from_fn(|k, _| c[k] as f64))
        .collect();
    SkeletonPointSet::from_points(points)
}

/// Thins a sparse set of grid cells (D = 2 or 3). Output is sorted in raster
/// order (last axis slowest).
pub fn thin_cells<const D: usize>(mut cells: HashSet<[i64; D]>) -> Vec<[i64; D]> {
    assert!(D == 2 || D == 3, "thinning supports 2D and 3D grids only");
    let neighbourhood = cube_offsets::<D>();
    let directions: Vec<[i64; D]> = (0..D)
        .flat_map(|axis| {
            [-1i64, 1].map(move |sign| {
                let mut d = [0i64; D];
                d[axis] = sign;
                d
            })
        })
        .collect();

    loop {
        let mut changed = false;
        for dir in &directions {
            let mut candidates: Vec<[i64; D]> = cells
                .iter()
                .filter(|c| !cells.contains(&offset(c, dir)))
                .filter(|c| is_deletable(&cells, c, &neighbourhood))
                .copied()
                .collect();
            candidates.sort_unstable_by(raster_order);
            for c in candidates {
                if is_deletable(&cells, &c, &neighbourhood) {
                    cells.remove(&c);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut out: Vec<[i64; D]> = cells.into_iter().collect();
    out.sort_unstable_by(raster_order);
    out
}

fn raster_order<const D: usize>(a: &[i64; D], b: &[i64; D]) -> std::cmp::Ordering {
    a.iter().rev().cmp(b.iter().rev())
}

/// Offsets of the 3^D cube in bit order: bit index = Σ (d_k + 1) 3^k.
fn cube_offsets<const D: usize>() -> Vec<[i64; D]> {
    (0..3usize.pow(D as u32))
        .map(|mut code| {
            let mut off = [0i64; D];
            for o in off.iter_mut() {
                *o = (code % 3) as i64 - 1;
                code /= 3;
            }
            off
        })
        .collect()
}

fn is_deletable<const D: usize>(cells: &HashSet<[i64; D]>, c: &[i64; D], cube: &[[i64; D]]) -> bool {
    let center = cube.len() / 2;
    let mut bits = 0u32;
    let mut count = 0;
    for (i, d) in cube.iter().enumerate() {
        if i != center && cells.contains(&offset(c, d)) {
            bits |= 1 << i;
            count += 1;
        }
    }
    if count < 2 {
        return false;
    }
    match D {
        2 => is_simple_2d(bits),
        _ => is_simple_3d(bits),
    }
}

/// 8-connectivity Yokoi number equals 1.
pub(crate) fn is_simple_2d(bits: u32) -> bool {
    // neighbours counter-clockwise from east: E, NE, N, NW, W, SW, S, SE
    // with bit index (dx + 1) + 3 (dy + 1) and N meaning dy = -1
    const RING: [usize; 8] = [5, 2, 1, 0, 3, 6, 7, 8];
    let bg = |k: usize| -> i32 { i32::from(bits & (1 << RING[k % 8]) == 0) };
    let c8: i32 = [0, 2, 4, 6]
        .iter()
        .map(|&k| bg(k) - bg(k) * bg(k + 1) * bg(k + 2))
        .sum();
    c8 == 1
}

struct Tables3d {
    /// 26-neighbours of each cube cell, within the cube, excluding the center.
    adj26: Vec<Vec<usize>>,
    /// 6-neighbours of each 18-neighbourhood cell, within the 18-neighbourhood.
    adj6_n18: Vec<Vec<usize>>,
    n18: Vec<bool>,
    face: Vec<bool>,
}

fn tables_3d() -> &'static Tables3d {
    static TABLES: OnceLock<Tables3d> = OnceLock::new();
    TABLES.get_or_init(|| {
        let cube = cube_offsets::<3>();
        let l1 = |d: &[i64; 3]| d.iter().map(|v| v.abs()).sum::<i64>();
        let n18: Vec<bool> = cube.iter().map(|d| (1..=2).contains(&l1(d))).collect();
        let face: Vec<bool> = cube.iter().map(|d| l1(d) == 1).collect();
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6_n18 = vec![Vec::new(); 27];
        for i in 0..27 {
            for j in 0..27 {
                if i == j || i == 13 || j == 13 {
                    continue;
                }
                let diff: Vec<i64> = (0..3).map(|k| (cube[i][k] - cube[j][k]).abs()).collect();
                if diff.iter().all(|&v| v <= 1) {
                    adj26[i].push(j);
                }
                if n18[i] && n18[j] && diff.iter().sum::<i64>() == 1 {
                    adj6_n18[i].push(j);
                }
            }
        }
        Tables3d {
            adj26,
            adj6_n18,
            n18,
            face,
        }
    })
}

/// (26, 6) simple point: one 26-component of foreground in the punctured
/// 26-neighbourhood, one 6-component of background in the 18-neighbourhood
/// that touches a face neighbour.
pub(crate) fn is_simple_3d(bits: u32) -> bool {
    let t = tables_3d();
    let fg = |i: usize| bits & (1 << i) != 0;

    let mut seen = [false; 27];
    let mut components = 0;
    for start in (0..27).filter(|&i| i != 13 && fg(i)) {
        if seen[start] {
            continue;
        }
        components += 1;
        if components > 1 {
            return false;
        }
        flood(start, &mut seen, |i| t.adj26[i].iter().copied().filter(|&j| fg(j)));
    }
    if components != 1 {
        return false;
    }

    let mut seen = [false; 27];
    let mut bg_components = 0;
    for start in (0..27).filter(|&i| t.face[i] && !fg(i)) {
        if seen[start] {
            continue;
        }
        bg_components += 1;
        if bg_components > 1 {
            return false;
        }
        flood(start, &mut seen, |i| {
            t.adj6_n18[i].iter().copied().filter(|&j| t.n18[j] && !fg(j))
        });
    }
    bg_components == 1
}

fn flood<I, F>(start: usize, seen: &mut [bool; 27], next: F)
where
    F: Fn(usize) -> I,
    I: Iterator<Item = usize>,
{
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(u) = stack.pop() {
        for v in next(u) {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
}
