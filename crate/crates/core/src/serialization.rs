//! Voxelization, Morton (Z-order) codes, serial ordering and window layout.

use std::ops::Range;

use crate::error::{Error, Result};

pub const MAX_BITS_PER_AXIS: u32 = 21;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub cell_size: f64,
    pub bits_per_axis: u32,
}

impl VoxelGrid {
    pub fn new(origin: [f64; 3], cell_size: f64, bits_per_axis: u32) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Config(format!("cell_size must be > 0, got {cell_size}")));
        }
        if !(1..=MAX_BITS_PER_AXIS).contains(&bits_per_axis) {
            return Err(Error::Config(format!(
                "bits_per_axis must be in [1, {MAX_BITS_PER_AXIS}], got {bits_per_axis}"
            )));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(VoxelGrid {
            origin,
            cell_size,
            bits_per_axis,
        })
    }

    /// Grid anchored at the minimum corner of `coords`.
    pub fn fitted(coords: &[[f64; 3]], cell_size: f64, bits_per_axis: u32) -> Result<Self> {
        let mut origin = [f64::INFINITY; 3];
        for p in coords {
            for a in 0..3 {
                origin[a] = origin[a].min(p[a]);
            }
        }
        if coords.is_empty() {
            origin = [0.0; 3];
        }
        VoxelGrid::new(origin, cell_size, bits_per_axis)
    }

    /// Like [`VoxelGrid::fitted`] but with the origin snapped down to a
    /// multiple of `cell_size`, so every subset of a cloud shares its voxels.
    pub fn aligned(coords: &[[f64; 3]], cell_size: f64, bits_per_axis: u32) -> Result<Self> {
        let mut g = VoxelGrid::fitted(coords, cell_size, bits_per_axis)?;
        for o in &mut g.origin {
            *o = (*o / cell_size).floor() * cell_size;
        }
        Ok(g)
    }

    pub fn max_coord(&self) -> u32 {
        ((1u64 << self.bits_per_axis) - 1) as u32
    }

    /// Center of voxel `v` in meters.
    pub fn center(&self, v: [u32; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + (v[a] as f64 + 0.5) * self.cell_size;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Voxelized {
    pub voxels: Vec<[u32; 3]>,
    /// Number of points with at least one clamped axis.
    pub clamped: usize,
}

/// `floor((p − origin) / cell_size)` per axis, clamped into the grid.
pub fn voxelize(coords: &[[f64; 3]], grid: &VoxelGrid) -> Result<Voxelized> {
    let max = grid.max_coord() as f64;
    let mut voxels = Vec::with_capacity(coords.len());
    let mut clamped = 0;
    for (i, p) in coords.iter().enumerate() {
        let mut v = [0u32; 3];
        let mut was_clamped = false;
        for a in 0..3 {
            if !p[a].is_finite() {
                return Err(Error::Input(format!("point {i} has non-finite coordinate {:?}", p)));
            }
            let f = ((p[a] - grid.origin[a]) / grid.cell_size).floor();
            let c = f.clamp(0.0, max);
            was_clamped |= c != f;
            v[a] = c as u32;
        }
        clamped += was_clamped as usize;
        voxels.push(v);
    }
    Ok(Voxelized { voxels, clamped })
}

fn spread3(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | x << 32) & 0x001f_0000_0000_ffff;
    x = (x | x << 16) & 0x001f_0000_ff00_00ff;
    x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
    x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
    x = (x | x << 2) & 0x1249_2492_4924_9249;
    x
}

fn compact3(v: u64) -> u64 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | x >> 2) & 0x10c3_0c30_c30c_30c3;
    x = (x | x >> 4) & 0x100f_00f0_0f00_f00f;
    x = (x | x >> 8) & 0x001f_0000_ff00_00ff;
    x = (x | x >> 16) & 0x001f_0000_0000_ffff;
    x = (x | x >> 32) & 0x1f_ffff;
    x
}

/// Interleaves bits: bit `b` of x lands at code bit `3b`, y at `3b+1`, z at `3b+2`.
pub fn morton_encode(v: [u32; 3], bits_per_axis: u32) -> Result<u64> {
    if bits_per_axis == 0 || bits_per_axis > MAX_BITS_PER_AXIS {
        return Err(Error::Range(format!("bits_per_axis {bits_per_axis} outside [1, 21]")));
    }
    let limit = 1u64 << bits_per_axis;
    if let Some(a) = (0..3).find(|&a| v[a] as u64 >= limit) {
        return Err(Error::Range(format!(
            "component {} = {} does not fit in {bits_per_axis} bits",
            ["x", "y", "z"][a],
            v[a]
        )));
    }
    Ok(spread3(v[0] as u64) | spread3(v[1] as u64) << 1 | spread3(v[2] as u64) << 2)
}

pub fn morton_decode(code: u64) -> [u32; 3] {
    [
        compact3(code) as u32,
        compact3(code >> 1) as u32,
        compact3(code >> 2) as u32,
    ]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerialOrder {
    pub codes: Vec<u64>,
    /// `perm[i]` is the original index of the `i`-th point in curve order.
    pub perm: Vec<usize>,
    /// `inverse_perm[perm[i]] == i`.
    pub inverse_perm: Vec<usize>,
}

impl SerialOrder {
    pub fn sorted_codes(&self) -> impl Iterator<Item = u64> + '_ {
        self.perm.iter().map(|&i| self.codes[i])
    }
}

/// Stable sort by code; equal codes keep their original order.
pub fn serialize(codes: Vec<u64>) -> SerialOrder {
    let mut perm: Vec<usize> = (0..codes.len()).collect();
    perm.sort_by_key(|&i| (codes[i], i));
    let mut inverse_perm = vec![0; perm.len()];
    for (pos, &i) in perm.iter().enumerate() {
        inverse_perm[i] = pos;
    }
    SerialOrder {
        codes,
        perm,
        inverse_perm,
    }
}

/// Consecutive windows of `window_size`; the last one holds the remainder.
pub fn window_partition(order_length: usize, window_size: usize) -> Result<Vec<Range<usize>>> {
    if window_size == 0 {
        return Err(Error::Config("window_size must be >= 1".into()));
    }
    if order_length == 0 {
        return Err(Error::Input("cannot partition an empty sequence".into()));
    }
    Ok((0..order_length)
        .step_by(window_size)
        .map(|s| s..(s + window_size).min(order_length))
        .collect())
}
