//! Hierarchical discretization of the sphere into cells.
//!
//! Points are projected onto the six faces of a cube (gnomonic projection),
//! and each face is subdivided as a quadtree. Each cell is addressed by a
//! Z-order key built from the bits of its `(i, j)` face coordinates, with the
//! `j` bit leading each pair. Integer level `L` uses `2L` key bits, and the
//! half level `L + 0.5` keeps one extra `j` bit, so it is the level `L + 1`
//! cell with the lowest `i` bit dropped: a pair of adjacent finer cells.
//!
//! Because every level is a prefix of the same 60-bit key, taking a parent
//! is a truncation and containment holds by construction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finest integer level; face coordinates carry this many bits each.
pub const MAX_LEVEL: u32 = 30;
const MAX_TWICE_LEVEL: u8 = 60;
const FACE_SHIFT: u32 = 61;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLng {
    pub lat: f64,
    pub lng: f64,
}

impl LatLng {
    pub fn new(lat: f64, lng: f64) -> Result<Self> {
        let p = LatLng { lat, lng };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || !self.lng.is_finite() {
            return Err(Error::InputDomain(format!(
                "non-finite coordinate ({}, {})",
                self.lat, self.lng
            )));
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::InputDomain(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !(-180.0..180.0).contains(&self.lng) {
            return Err(Error::InputDomain(format!(
                "longitude {} outside [-180, 180)",
                self.lng
            )));
        }
        Ok(())
    }

    /// Unit vector on the sphere.
    pub fn to_xyz(&self) -> [f64; 3] {
        let (lat, lng) = (self.lat.to_radians(), self.lng.to_radians());
        [lat.cos() * lng.cos(), lat.cos() * lng.sin(), lat.sin()]
    }
}

/// A grid level stored as twice its value, so `12.5` is `25`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridLevel(u8);

impl GridLevel {
    pub const L15: GridLevel = GridLevel(30);
    pub const L12_5: GridLevel = GridLevel(25);
    pub const L4_5: GridLevel = GridLevel(9);

    pub fn from_twice(twice_level: u8) -> Result<Self> {
        if twice_level > MAX_TWICE_LEVEL {
            return Err(Error::InvalidArgument(format!(
                "twice_level {twice_level} exceeds {MAX_TWICE_LEVEL}"
            )));
        }
        Ok(GridLevel(twice_level))
    }

    pub fn from_level(level: f64) -> Result<Self> {
        let twice = level * 2.0;
        if twice.fract() != 0.0 || !(0.0..=MAX_TWICE_LEVEL as f64).contains(&twice) {
            return Err(Error::InvalidArgument(format!("unsupported grid level {level}")));
        }
        Ok(GridLevel(twice as u8))
    }

    pub fn twice(self) -> u8 {
        self.0
    }

    pub fn level(self) -> f64 {
        self.0 as f64 / 2.0
    }
}

impl fmt::Display for GridLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.level())
    }
}

/// The three levels the model embeds, finest first.
pub const MODEL_LEVELS: [GridLevel; 3] = [GridLevel::L15, GridLevel::L12_5, GridLevel::L4_5];

/// A cell identifier packed into 64 bits: 3 face bits, `twice_level`
/// position bits, then a single sentinel bit marking the level.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId(u64);

impl CellId {
    fn from_parts(face: u8, level: GridLevel, position: u64) -> CellId {
        let t = level.0 as u32;
        let pos = if t == 0 { 0 } else { position << (FACE_SHIFT - t) };
        CellId(((face as u64) << FACE_SHIFT) | pos | (1u64 << (60 - t)))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn face(self) -> u8 {
        (self.0 >> FACE_SHIFT) as u8
    }

    pub fn level(self) -> GridLevel {
        GridLevel((60 - self.0.trailing_zeros()) as u8)
    }

    /// The `twice_level` position bits.
    pub fn position(self) -> u64 {
        let t = self.level().0 as u32;
        if t == 0 {
            0
        } else {
            (self.0 >> (FACE_SHIFT - t)) & ((1u64 << t) - 1)
        }
    }
}

impl fmt::Debug for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CellId({self})")
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{:x}", self.face(), self.level().0, self.position())
    }
}

impl FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed cell id {s:?}"));
        let mut parts = s.split('/');
        let (Some(face), Some(twice), Some(pos), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let face: u8 = face.parse().map_err(|_| bad())?;
        let level = GridLevel::from_twice(twice.parse().map_err(|_| bad())?)?;
        let position = u64::from_str_radix(pos, 16).map_err(|_| bad())?;
        if face > 5 || (level.0 < 64 && position >> level.0 != 0) {
            return Err(bad());
        }
        Ok(CellId::from_parts(face, level, position))
    }
}

impl Serialize for CellId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Cube face and gnomonic face coordinates `(u, v)` in `[-1, 1]`.
pub fn face_uv(p: &LatLng) -> (u8, f64, f64) {
    let [x, y, z] = p.to_xyz();
    let (ax, ay, az) = (x.abs(), y.abs(), z.abs());
    let axis = if ax >= ay && ax >= az {
        0
    } else if ay >= az {
        1
    } else {
        2
    };
    let negative = [x, y, z][axis] < 0.0;
    let face = axis as u8 + if negative { 3 } else { 0 };
    let (u, v) = match face {
        0 => (y / x, z / x),
        1 => (-x / y, z / y),
        2 => (-x / z, -y / z),
        3 => (z / x, y / x),
        4 => (z / y, -x / y),
        _ => (-y / z, -x / z),
    };
    (face, u, v)
}

fn uv_to_coord(u: f64) -> u64 {
    let n = (1u64 << MAX_LEVEL) as f64;
    let st = 0.5 * (u + 1.0);
    ((st * n).floor().max(0.0) as u64).min((1u64 << MAX_LEVEL) - 1)
}

fn interleave_key(i: u64, j: u64) -> u64 {
    let mut key = 0u64;
    for b in (0..MAX_LEVEL).rev() {
        key = (key << 1) | ((j >> b) & 1);
        key = (key << 1) | ((i >> b) & 1);
    }
    key
}

/// The cell containing `p` at `level`.
pub fn cell_at(p: LatLng, level: GridLevel) -> Result<CellId> {
    p.validate()?;
    let (face, u, v) = face_uv(&p);
    let key = interleave_key(uv_to_coord(u), uv_to_coord(v));
    let t = level.0 as u32;
    let position = if t == 0 { 0 } else { key >> (60 - t) };
    Ok(CellId::from_parts(face, level, position))
}

/// The cell at `level` containing `c`; `level` must not be finer than `c`.
pub fn parent(c: CellId, level: GridLevel) -> Result<CellId> {
    let own = c.level();
    if level > own {
        return Err(Error::InvalidArgument(format!(
            "requested level {level} is finer than cell level {own}"
        )));
    }
    let drop = (own.0 - level.0) as u32;
    let position = if drop >= 64 { 0 } else { c.position() >> drop };
    Ok(CellId::from_parts(c.face(), level, position))
}

/// The three model-level cells for a point, finest first.
pub fn model_cells(p: LatLng) -> Result<[CellId; 3]> {
    let fine = cell_at(p, GridLevel::L15)?;
    Ok([fine, parent(fine, GridLevel::L12_5)?, parent(fine, GridLevel::L4_5)?])
}
