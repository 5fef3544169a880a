//! Binary masks, mask file formats, connected components and patch tiling.
//!
//! Every mask is stored internally with a three-axis shape `(z, y, x)`. A 2D
//! mask has `z` extent 1 and `ndim() == 2`; its public dims are `(rows, cols)`.
//! Points are `[z, y, x]` triples with `z == 0` for 2D masks.

use bitvec::prelude::*;
use std::collections::VecDeque;
use thiserror::Error;

/// Voxel coordinate `(z, y, x)`. 2D masks use `z == 0`.
pub type Point = [i32; 3];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RasterError {
    #[error("unknown magic bytes")]
    UnknownMagic,
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("mask has a zero-length dimension")]
    ZeroDimension,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("voxel byte {0} is not 0 or 1")]
    InvalidVoxel(u8),
    #[error("masks must be 2D or 3D, got {0} dims")]
    UnsupportedRank(usize),
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch(Vec<usize>, Vec<usize>),
    #[error("component has no points")]
    EmptyComponent,
    #[error("patch layout mismatch: {0}")]
    LayoutMismatch(String),
}

/// Voxel adjacency used by labeling and skeleton analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    /// 4-adjacency in 2D, 6-adjacency in 3D.
    Faces,
    /// 8-adjacency in 2D, 26-adjacency in 3D.
    #[default]
    Full,
}

/// Neighbor offsets for the given connectivity and rank, in raster order.
pub fn neighbor_offsets(conn: Connectivity, ndim: usize) -> Vec<Point> {
    let zr: std::ops::RangeInclusive<i32> = if ndim == 3 { -1..=1 } else { 0..=0 };
    let mut out = Vec::with_capacity(26);
    for dz in zr {
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let manhattan = dz.abs() + dy.abs() + dx.abs();
                if manhattan == 0 {
                    continue;
                }
                if conn == Connectivity::Faces && manhattan > 1 {
                    continue;
                }
                out.push([dz, dy, dx]);
            }
        }
    }
    out
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    ndim: usize,
    shape: [usize; 3],
    bits: BitVec<u64, Lsb0>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("dims", &self.dims())
            .field("foreground", &self.count_ones())
            .finish()
    }
}

impl BinaryMask {
    /// Empty mask with the given public dims (2 or 3 extents).
    pub fn zeros(dims: &[usize]) -> Result<Self, RasterError> {
        let (ndim, shape) = shape_from_dims(dims)?;
        let len = shape.iter().product();
        Ok(Self {
            ndim,
            shape,
            bits: bitvec![u64, Lsb0; 0; len],
        })
    }

    pub fn new_2d(rows: usize, cols: usize) -> Self {
        Self::zeros(&[rows, cols]).expect("non-zero 2D dims")
    }

    pub fn new_3d(depth: usize, rows: usize, cols: usize) -> Self {
        Self::zeros(&[depth, rows, cols]).expect("non-zero 3D dims")
    }

    /// Mask of the given dims with exactly the listed points set. Points outside are ignored.
    pub fn from_points(dims: &[usize], points: &[Point]) -> Result<Self, RasterError> {
        let mut m = Self::zeros(dims)?;
        for &p in points {
            m.set(p, true);
        }
        Ok(m)
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    /// Internal `(z, y, x)` shape; `z == 1` for 2D.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Public dims: `(rows, cols)` in 2D, `(slices, rows, cols)` in 3D.
    pub fn dims(&self) -> &[usize] {
        &self.shape[3 - self.ndim..]
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.not_any()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn in_bounds(&self, p: Point) -> bool {
        p.iter()
            .zip(self.shape.iter())
            .all(|(&c, &n)| c >= 0 && (c as usize) < n)
    }

    #[inline]
    pub fn index(&self, p: Point) -> usize {
        (p[0] as usize * self.shape[1] + p[1] as usize) * self.shape[2] + p[2] as usize
    }

    #[inline]
    pub fn point(&self, index: usize) -> Point {
        let x = index % self.shape[2];
        let rest = index / self.shape[2];
        let y = rest % self.shape[1];
        let z = rest / self.shape[1];
        [z as i32, y as i32, x as i32]
    }

    /// Value at `p`; out-of-range points read as background.
    #[inline]
    pub fn get(&self, p: Point) -> bool {
        self.in_bounds(p) && self.bits[self.index(p)]
    }

    /// Sets `p`; out-of-range points are ignored.
    #[inline]
    pub fn set(&mut self, p: Point, value: bool) {
        if self.in_bounds(p) {
            let i = self.index(p);
            self.bits.set(i, value);
        }
    }

    pub fn get_index(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set_index(&mut self, i: usize, value: bool) {
        self.bits.set(i, value);
    }

    /// Foreground points in raster order.
    pub fn points(&self) -> Vec<Point> {
        self.bits.iter_ones().map(|i| self.point(i)).collect()
    }

    pub fn same_dims(&self, other: &BinaryMask) -> Result<(), RasterError> {
        if self.ndim != other.ndim || self.shape != other.shape {
            return Err(RasterError::DimsMismatch(self.dims().to_vec(), other.dims().to_vec()));
        }
        Ok(())
    }

    /// Voxel-wise OR with a mask of identical dims.
    pub fn or_assign(&mut self, other: &BinaryMask) -> Result<(), RasterError> {
        self.same_dims(other)?;
        self.bits |= other.bits.as_bitslice();
        Ok(())
    }

    /// True when every foreground voxel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape == other.shape && self.bits.iter_ones().all(|i| other.bits[i])
    }

    /// Copy of the region covered by `bbox` (clipped to the mask).
    pub fn crop(&self, bbox: &BoundingBox) -> BinaryMask {
        let dims = bbox.dims();
        let mut out = BinaryMask::zeros(&dims).expect("bbox dims are positive");
        for z in bbox.min[0]..=bbox.max[0] {
            for y in bbox.min[1]..=bbox.max[1] {
                for x in bbox.min[2]..=bbox.max[2] {
                    if self.get([z, y, x]) {
                        out.set([z - bbox.min[0], y - bbox.min[1], x - bbox.min[2]], true);
                    }
                }
            }
        }
        out
    }

    /// ORs `src` into `self` with its origin placed at `origin`; voxels falling outside are dropped.
    pub fn paste_or(&mut self, src: &BinaryMask, origin: Point) {
        for i in src.bits.iter_ones() {
            let p = src.point(i);
            self.set([p[0] + origin[0], p[1] + origin[1], p[2] + origin[2]], true);
        }
    }
}

fn shape_from_dims(dims: &[usize]) -> Result<(usize, [usize; 3]), RasterError> {
    let shape = match dims.len() {
        2 => [1, dims[0], dims[1]],
        3 => [dims[0], dims[1], dims[2]],
        n => return Err(RasterError::UnsupportedRank(n)),
    };
    if dims.contains(&0) {
        return Err(RasterError::ZeroDimension);
    }
    Ok((dims.len(), shape))
}

/// Grayscale image with values in `[0, 1]`, same axis conventions as [`BinaryMask`].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    ndim: usize,
    shape: [usize; 3],
    data: Vec<f32>,
}

impl GrayImage {
    pub fn zeros(dims: &[usize]) -> Result<Self, RasterError> {
        let (ndim, shape) = shape_from_dims(dims)?;
        Ok(Self {
            ndim,
            shape,
            data: vec![0.0; shape.iter().product()],
        })
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn dims(&self) -> &[usize] {
        &self.shape[3 - self.ndim..]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, p: Point) -> f32 {
        let inside = p
            .iter()
            .zip(self.shape.iter())
            .all(|(&c, &n)| c >= 0 && (c as usize) < n);
        if !inside {
            return 0.0;
        }
        self.data[(p[0] as usize * self.shape[1] + p[1] as usize) * self.shape[2] + p[2] as usize]
    }

    pub fn set(&mut self, p: Point, v: f32) {
        let i = (p[0] as usize * self.shape[1] + p[1] as usize) * self.shape[2] + p[2] as usize;
        self.data[i] = v;
    }

    pub fn crop(&self, bbox: &BoundingBox) -> GrayImage {
        let mut out = GrayImage::zeros(&bbox.dims()).expect("bbox dims are positive");
        for z in bbox.min[0]..=bbox.max[0] {
            for y in bbox.min[1]..=bbox.max[1] {
                for x in bbox.min[2]..=bbox.max[2] {
                    let v = self.get([z, y, x]);
                    out.set([z - bbox.min[0], y - bbox.min[1], x - bbox.min[2]], v);
                }
            }
        }
        out
    }

    /// 8-bit binary PGM (`P5`), 2D only.
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.shape[2], self.shape[1]).into_bytes();
        out.extend(
            self.data
                .iter()
                .take(self.shape[1] * self.shape[2])
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self, RasterError> {
        if !bytes.starts_with(b"P5") {
            return Err(RasterError::UnknownMagic);
        }
        let mut cur = HeaderCursor::new(bytes, 2);
        let w = cur.next_number()?;
        let h = cur.next_number()?;
        let maxval = cur.next_number()?;
        if maxval == 0 || maxval > 255 {
            return Err(RasterError::MalformedHeader(format!("maxval {maxval}")));
        }
        let payload = cur.payload()?;
        let mut img = GrayImage::zeros(&[h, w])?;
        if payload.len() < w * h {
            return Err(RasterError::TruncatedPayload {
                expected: w * h,
                found: payload.len(),
            });
        }
        for (dst, &b) in img.data.iter_mut().zip(payload) {
            *dst = b as f32 / maxval as f32;
        }
        Ok(img)
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn next_number(&mut self) -> Result<usize, RasterError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(RasterError::MalformedHeader("expected a number".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RasterError::MalformedHeader("number out of range".into()))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn payload(self) -> Result<&'a [u8], RasterError> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            _ => Err(RasterError::MalformedHeader("missing header terminator".into())),
        }
    }
}

const MAGIC_3D: &[u8] = b"VSR3D";

/// Parses a `P4` portable bitmap (2D) or a `VSR3D` raw volume (3D).
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask, RasterError> {
    if bytes.starts_with(b"P4") {
        decode_pbm(bytes)
    } else if bytes.starts_with(MAGIC_3D) {
        decode_vsr3d(bytes)
    } else {
        Err(RasterError::UnknownMagic)
    }
}

fn decode_pbm(bytes: &[u8]) -> Result<BinaryMask, RasterError> {
    let mut cur = HeaderCursor::new(bytes, 2);
    let w = cur.next_number()?;
    let h = cur.next_number()?;
    if w == 0 || h == 0 {
        return Err(RasterError::ZeroDimension);
    }
    let payload = cur.payload()?;
    let row_bytes = w.div_ceil(8);
    let expected = row_bytes * h;
    if payload.len() < expected {
        return Err(RasterError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let mut mask = BinaryMask::new_2d(h, w);
    for y in 0..h {
        let row = &payload[y * row_bytes..(y + 1) * row_bytes];
        for x in 0..w {
            if row[x / 8] & (0x80 >> (x % 8)) != 0 {
                mask.set([0, y as i32, x as i32], true);
            }
        }
    }
    Ok(mask)
}

fn decode_vsr3d(bytes: &[u8]) -> Result<BinaryMask, RasterError> {
    let header = MAGIC_3D.len() + 12;
    if bytes.len() < header {
        return Err(RasterError::TruncatedPayload {
            expected: header,
            found: bytes.len(),
        });
    }
    let dim = |k: usize| {
        let o = MAGIC_3D.len() + 4 * k;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    };
    let (d, h, w) = (dim(0), dim(1), dim(2));
    let mut mask = BinaryMask::zeros(&[d, h, w])?;
    let payload = &bytes[header..];
    if payload.len() < mask.len() {
        return Err(RasterError::TruncatedPayload {
            expected: mask.len(),
            found: payload.len(),
        });
    }
    for (i, &b) in payload.iter().take(mask.len()).enumerate() {
        match b {
            0 => {}
            1 => mask.set_index(i, true),
            other => return Err(RasterError::InvalidVoxel(other)),
        }
    }
    Ok(mask)
}

/// Serializes a mask: `P4` for 2D, `VSR3D` for 3D.
pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    encode_mask_with_comment(mask, None)
}

/// Like [`encode_mask`]; 2D output carries `comment` as a `#` header line.
pub fn encode_mask_with_comment(mask: &BinaryMask, comment: Option<&str>) -> Vec<u8> {
    let [d, h, w] = mask.shape();
    if mask.ndim() == 3 {
        let mut out = MAGIC_3D.to_vec();
        for v in [d, h, w] {
            out.extend((v as u32).to_le_bytes());
        }
        out.extend((0..mask.len()).map(|i| mask.get_index(i) as u8));
        return out;
    }
    let mut out = b"P4\n".to_vec();
    if let Some(c) = comment {
        for line in c.lines() {
            out.extend(format!("# {line}\n").bytes());
        }
    }
    out.extend(format!("{w} {h}\n").bytes());
    let row_bytes = w.div_ceil(8);
    for y in 0..h {
        let mut row = vec![0u8; row_bytes];
        for x in 0..w {
            if mask.get([0, y as i32, x as i32]) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend(row);
    }
    out
}

/// Inclusive per-axis voxel range, stored as `(z, y, x)` triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub ndim: usize,
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    /// `(min, max)` along public axis `axis` (0 = rows in 2D, slices in 3D).
    pub fn axis(&self, axis: usize) -> (i32, i32) {
        let k = axis + 3 - self.ndim;
        (self.min[k], self.max[k])
    }

    pub fn extent(&self, k: usize) -> usize {
        (self.max[k] - self.min[k] + 1) as usize
    }

    /// Public dims of the box (2 or 3 extents).
    pub fn dims(&self) -> Vec<usize> {
        (3 - self.ndim..3).map(|k| self.extent(k)).collect()
    }

    pub fn volume(&self) -> usize {
        (0..3).map(|k| self.extent(k)).product()
    }

    pub fn contains(&self, p: Point) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        let mut out = *self;
        for k in 0..3 {
            out.min[k] = out.min[k].min(other.min[k]);
            out.max[k] = out.max[k].max(other.max[k]);
        }
        out
    }

    /// Grows the box by `pad` voxels per in-plane axis and clips it to `shape`.
    pub fn padded(&self, pad: i32, shape: [usize; 3]) -> BoundingBox {
        let mut out = *self;
        for k in 3 - self.ndim..3 {
            out.min[k] = (out.min[k] - pad).max(0);
            out.max[k] = (out.max[k] + pad).min(shape[k] as i32 - 1);
        }
        out
    }

    /// Squared Euclidean gap between two boxes (0 when they overlap).
    pub fn gap_sq(&self, other: &BoundingBox) -> i64 {
        (0..3)
            .map(|k| {
                let d = (other.min[k] - self.max[k]).max(self.min[k] - other.max[k]).max(0) as i64;
                d * d
            })
            .sum()
    }
}

/// Tight axis-aligned box around `points`.
pub fn minimum_enclosing_box(points: &[Point], ndim: usize) -> Result<BoundingBox, RasterError> {
    let first = *points.first().ok_or(RasterError::EmptyComponent)?;
    let mut bbox = BoundingBox {
        ndim,
        min: first,
        max: first,
    };
    for p in &points[1..] {
        for k in 0..3 {
            bbox.min[k] = bbox.min[k].min(p[k]);
            bbox.max[k] = bbox.max[k].max(p[k]);
        }
    }
    Ok(bbox)
}

/// One connected foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// 1-based id.
    pub id: u32,
    /// Member voxels in raster order.
    pub points: Vec<Point>,
    pub bbox: BoundingBox,
}

impl Component {
    pub fn voxel_count(&self) -> usize {
        self.points.len()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k] as f64;
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLabeling {
    pub ndim: usize,
    pub shape: [usize; 3],
    pub connectivity: Connectivity,
    /// Per-voxel component id, 0 for background.
    pub label_map: Vec<u32>,
    /// `components[i].id == i + 1`.
    pub components: Vec<Component>,
}

impl ComponentLabeling {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn label_at(&self, p: Point) -> u32 {
        let inside = p
            .iter()
            .zip(self.shape.iter())
            .all(|(&c, &n)| c >= 0 && (c as usize) < n);
        if !inside {
            return 0;
        }
        self.label_map[(p[0] as usize * self.shape[1] + p[1] as usize) * self.shape[2] + p[2] as usize]
    }
}

/// Flood-fill labeling; ids follow first-encounter raster order.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabeling {
    let offsets = neighbor_offsets(connectivity, mask.ndim());
    let mut label_map = vec![0u32; mask.len()];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in mask.bits.iter_ones() {
        if label_map[start] != 0 {
            continue;
        }
        let id = components.len() as u32 + 1;
        label_map[start] = id;
        queue.push_back(start);
        let mut points = Vec::new();
        while let Some(i) = queue.pop_front() {
            let p = mask.point(i);
            points.push(p);
            for off in &offsets {
                let q = [p[0] + off[0], p[1] + off[1], p[2] + off[2]];
                if mask.get(q) {
                    let j = mask.index(q);
                    if label_map[j] == 0 {
                        label_map[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        points.sort_unstable();
        let bbox = minimum_enclosing_box(&points, mask.ndim()).expect("component has its seed");
        components.push(Component { id, points, bbox });
    }
    ComponentLabeling {
        ndim: mask.ndim(),
        shape: mask.shape(),
        connectivity,
        label_map,
        components,
    }
}

/// Number of connected components under `connectivity`.
pub fn count_components(mask: &BinaryMask, connectivity: Connectivity) -> usize {
    label_components(mask, connectivity).len()
}

/// Non-overlapping tiling of a padded parent volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLayout {
    pub ndim: usize,
    /// Original `(z, y, x)` shape.
    pub original: [usize; 3],
    /// Zero-padded `(z, y, x)` shape, an exact multiple of `window`.
    pub padded: [usize; 3],
    pub window: [usize; 3],
    /// Patch origins in parent coordinates, raster order.
    pub origins: Vec<[usize; 3]>,
}

/// Side of the cubic 3D window.
pub const WINDOW_3D: usize = 64;

impl PatchLayout {
    /// Layout for a mask of public dims `dims`: 4×4 tiles in 2D, 64³ tiles in 3D.
    pub fn for_dims(dims: &[usize]) -> Result<Self, RasterError> {
        let (ndim, original) = shape_from_dims(dims)?;
        let window = if ndim == 2 {
            [1, original[1].div_ceil(4), original[2].div_ceil(4)]
        } else {
            [WINDOW_3D; 3]
        };
        let mut padded = [0; 3];
        for k in 0..3 {
            padded[k] = original[k].div_ceil(window[k]) * window[k];
        }
        let mut origins = Vec::new();
        for z in (0..padded[0]).step_by(window[0]) {
            for y in (0..padded[1]).step_by(window[1]) {
                for x in (0..padded[2]).step_by(window[2]) {
                    origins.push([z, y, x]);
                }
            }
        }
        Ok(Self {
            ndim,
            original,
            padded,
            window,
            origins,
        })
    }

    pub fn window_dims(&self) -> Vec<usize> {
        self.window[3 - self.ndim..].to_vec()
    }

    pub fn patch_box(&self, i: usize) -> BoundingBox {
        let o = self.origins[i];
        BoundingBox {
            ndim: self.ndim,
            min: [o[0] as i32, o[1] as i32, o[2] as i32],
            max: [
                (o[0] + self.window[0] - 1) as i32,
                (o[1] + self.window[1] - 1) as i32,
                (o[2] + self.window[2] - 1) as i32,
            ],
        }
    }

    /// Index of the patch containing parent voxel `p`.
    pub fn patch_of(&self, p: Point) -> usize {
        let per = [
            self.padded[0] / self.window[0],
            self.padded[1] / self.window[1],
            self.padded[2] / self.window[2],
        ];
        let c = [
            p[0] as usize / self.window[0],
            p[1] as usize / self.window[1],
            p[2] as usize / self.window[2],
        ];
        (c[0] * per[1] + c[1]) * per[2] + c[2]
    }

    /// Cuts `mask` (which must have the layout's original dims) into patches.
    pub fn extract(&self, mask: &BinaryMask) -> Vec<BinaryMask> {
        (0..self.origins.len())
            .map(|i| mask.crop_padded(&self.patch_box(i)))
            .collect()
    }

    pub fn extract_gray(&self, image: &GrayImage) -> Vec<GrayImage> {
        (0..self.origins.len())
            .map(|i| {
                let b = self.patch_box(i);
                let mut out = GrayImage::zeros(&b.dims()).expect("window dims are positive");
                for z in b.min[0]..=b.max[0] {
                    for y in b.min[1]..=b.max[1] {
                        for x in b.min[2]..=b.max[2] {
                            let v = image.get([z, y, x]);
                            out.set([z - b.min[0], y - b.min[1], x - b.min[2]], v);
                        }
                    }
                }
                out
            })
            .collect()
    }
}

impl BinaryMask {
    /// Crop that may extend past the mask; outside voxels read as zero.
    fn crop_padded(&self, bbox: &BoundingBox) -> BinaryMask {
        let mut out = BinaryMask::zeros(&bbox.dims()).expect("bbox dims are positive");
        let [d, h, w] = self.shape;
        for z in bbox.min[0]..=bbox.max[0].min(d as i32 - 1) {
            for y in bbox.min[1]..=bbox.max[1].min(h as i32 - 1) {
                for x in bbox.min[2]..=bbox.max[2].min(w as i32 - 1) {
                    if self.get([z, y, x]) {
                        out.set([z - bbox.min[0], y - bbox.min[1], x - bbox.min[2]], true);
                    }
                }
            }
        }
        out
    }
}

/// Splits a mask into the layout's zero-padded, non-overlapping patches.
pub fn tile_patches(mask: &BinaryMask) -> (PatchLayout, Vec<BinaryMask>) {
    let layout = PatchLayout::for_dims(mask.dims()).expect("mask dims are valid");
    let patches = layout.extract(mask);
    (layout, patches)
}

/// Places every patch at its origin (voxel-wise OR) and crops the padding away.
pub fn recombine(layout: &PatchLayout, patches: &[BinaryMask]) -> Result<BinaryMask, RasterError> {
    if patches.len() != layout.origins.len() {
        return Err(RasterError::LayoutMismatch(format!(
            "{} patches for {} origins",
            patches.len(),
            layout.origins.len()
        )));
    }
    let window = layout.window_dims();
    let dims: Vec<usize> = layout.original[3 - layout.ndim..].to_vec();
    let mut out = BinaryMask::zeros(&dims)?;
    for (patch, origin) in patches.iter().zip(&layout.origins) {
        if patch.dims() != window.as_slice() {
            return Err(RasterError::LayoutMismatch(format!(
                "patch dims {:?}, window {:?}",
                patch.dims(),
                window
            )));
        }
        out.paste_or(patch, [origin[0] as i32, origin[1] as i32, origin[2] as i32]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_p4_header_and_payload() {
        // rows are byte-padded, so a 2x2 bitmap carries one byte per row
        let mut bytes = b"P4\n2 2\n".to_vec();
        bytes.extend([0b1000_0000, 0]);
        let m = decode_mask(&bytes).unwrap();
        assert_eq!(m.dims(), &[2, 2]);
        assert_eq!(m.points(), vec![[0, 0, 0]]);
    }

    #[test]
    fn p4_single_byte_for_two_rows_is_truncated() {
        let mut bytes = b"P4\n2 2\n".to_vec();
        bytes.push(0b1000_0000);
        assert_eq!(
            decode_mask(&bytes),
            Err(RasterError::TruncatedPayload { expected: 2, found: 1 })
        );
    }

    #[test]
    fn p4_with_comment_lines() {
        let mut bytes = b"P4\n# made by hand\n3 1\n".to_vec();
        bytes.push(0b0110_0000);
        let m = decode_mask(&bytes).unwrap();
        assert_eq!(m.points(), vec![[0, 0, 1], [0, 0, 2]]);
    }

    #[test]
    fn decodes_vsr3d() {
        let mut bytes = b"VSR3D".to_vec();
        for d in [2u32, 2, 2] {
            bytes.extend(d.to_le_bytes());
        }
        bytes.extend([1u8; 8]);
        let m = decode_mask(&bytes).unwrap();
        assert_eq!(m.dims(), &[2, 2, 2]);
        assert_eq!(m.count_ones(), 8);
    }

    #[test]
    fn decode_errors() {
        assert_eq!(decode_mask(b"P5\n1 1\n255\n\0"), Err(RasterError::UnknownMagic));
        assert_eq!(decode_mask(b"P4\n0 3\n"), Err(RasterError::ZeroDimension));
        let mut bytes = b"VSR3D".to_vec();
        for d in [2u32, 0, 2] {
            bytes.extend(d.to_le_bytes());
        }
        assert_eq!(decode_mask(&bytes), Err(RasterError::ZeroDimension));
        let mut bytes = b"VSR3D".to_vec();
        for d in [1u32, 1, 2] {
            bytes.extend(d.to_le_bytes());
        }
        bytes.push(1);
        assert!(matches!(decode_mask(&bytes), Err(RasterError::TruncatedPayload { .. })));
        bytes.push(7);
        assert_eq!(decode_mask(&bytes), Err(RasterError::InvalidVoxel(7)));
    }

    #[test]
    fn encode_decode_both_formats() {
        let mut m = BinaryMask::new_2d(3, 11);
        for p in [[0, 0, 0], [0, 1, 9], [0, 2, 10]] {
            m.set(p, true);
        }
        assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
        let with_comment = encode_mask_with_comment(&m, Some("seed=3"));
        assert_eq!(decode_mask(&with_comment).unwrap(), m);

        let mut v = BinaryMask::new_3d(2, 3, 4);
        v.set([1, 2, 3], true);
        assert_eq!(decode_mask(&encode_mask(&v)).unwrap(), v);
    }

    #[test]
    fn labeling_connectivity() {
        let m = BinaryMask::new_2d(4, 4);
        assert_eq!(label_components(&m, Connectivity::Full).len(), 0);

        let m = BinaryMask::from_points(&[4, 4], &[[0, 0, 0], [0, 1, 1]]).unwrap();
        assert_eq!(label_components(&m, Connectivity::Faces).len(), 2);
        assert_eq!(label_components(&m, Connectivity::Full).len(), 1);

        let v = BinaryMask::from_points(&[3, 3, 3], &[[0, 0, 0], [1, 1, 1], [2, 2, 2]]).unwrap();
        assert_eq!(label_components(&v, Connectivity::Full).len(), 1);
        assert_eq!(label_components(&v, Connectivity::Faces).len(), 3);
    }

    #[test]
    fn labeling_ids_follow_raster_order() {
        let m = BinaryMask::from_points(&[3, 5], &[[0, 2, 0], [0, 0, 4], [0, 0, 3]]).unwrap();
        let l = label_components(&m, Connectivity::Full);
        assert_eq!(l.components[0].points, vec![[0, 0, 3], [0, 0, 4]]);
        assert_eq!(l.components[1].points, vec![[0, 2, 0]]);
        assert_eq!(l.label_at([0, 2, 0]), 2);
    }

    #[test]
    fn enclosing_boxes() {
        let b = minimum_enclosing_box(&[[0, 2, 3]], 2).unwrap();
        assert_eq!((b.axis(0), b.axis(1)), ((2, 2), (3, 3)));
        let b = minimum_enclosing_box(&[[0, 0, 0], [0, 4, 7]], 2).unwrap();
        assert_eq!((b.axis(0), b.axis(1)), ((0, 4), (0, 7)));
        let b = minimum_enclosing_box(&[[1, 2, 3], [5, 2, 9]], 3).unwrap();
        assert_eq!((b.axis(0), b.axis(1), b.axis(2)), ((1, 5), (2, 2), (3, 9)));
        assert_eq!(minimum_enclosing_box(&[], 2), Err(RasterError::EmptyComponent));
    }

    #[test]
    fn tiling_layouts() {
        let (layout, patches) = tile_patches(&BinaryMask::new_2d(400, 400));
        assert_eq!(patches.len(), 16);
        assert!(patches.iter().all(|p| p.dims() == [100, 100]));
        assert_eq!(layout.padded, [1, 400, 400]);

        let (layout, patches) = tile_patches(&BinaryMask::new_2d(565, 584));
        assert_eq!(layout.window_dims(), vec![142, 146]);
        assert_eq!(layout.padded, [1, 568, 584]);
        assert_eq!(patches.len(), 16);
        // every parent voxel sits in exactly one patch
        let mut cover = vec![0u8; 568 * 584];
        for i in 0..layout.origins.len() {
            let b = layout.patch_box(i);
            for y in b.min[1]..=b.max[1] {
                for x in b.min[2]..=b.max[2] {
                    cover[y as usize * 584 + x as usize] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c == 1));

        let (layout, patches) = tile_patches(&BinaryMask::new_3d(128, 128, 64));
        assert_eq!(patches.len(), 4);
        assert_eq!(layout.window_dims(), vec![64, 64, 64]);
    }

    #[test]
    fn recombine_places_patches() {
        let m = BinaryMask::new_2d(10, 10);
        let (layout, mut patches) = tile_patches(&m);
        // window 3x3, padded 12x12; the last patch row/col only has 1 real voxel
        let last = patches.len() - 1;
        patches[last] = BinaryMask::from_points(
            &[3, 3],
            &(0..3).flat_map(|y| (0..3).map(move |x| [0, y, x])).collect::<Vec<_>>(),
        )
        .unwrap();
        let out = recombine(&layout, &patches).unwrap();
        assert_eq!(out.points(), vec![[0, 9, 9]]);

        assert!(matches!(
            recombine(&layout, &patches[..3]),
            Err(RasterError::LayoutMismatch(_))
        ));
    }
}
