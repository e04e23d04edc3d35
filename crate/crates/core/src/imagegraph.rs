//! Incomplete images and their pixel-graph representation.
//!
//! Coordinates follow the planar convention shared by every module: a pixel
//! at `(row, col)` of an `n`-row image becomes node coordinate
//! `x = col`, `y = n - 1 - row`, so `+y` points up and offset `(1, 1)` is the
//! right-upper neighbor.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Image values plus the set `J` of unknown pixels.
///
/// Values at unknown pixels are stored as zero and never read.
#[derive(Clone, Debug, PartialEq)]
pub struct IncompleteImage {
    height: usize,
    width: usize,
    channels: usize,
    values: Tensor,
    missing: Vec<bool>,
}

impl IncompleteImage {
    /// Wrap a `[rows x cols x channels]` tensor with no missing pixels.
    pub fn complete(values: Tensor) -> Result<Self> {
        let (height, width, channels) = match *values.dims() {
            [h, w, c] if h > 0 && w > 0 && c > 0 => (h, w, c),
            _ => return Err(Error::shape("IncompleteImage", values.dims(), &[0, 0, 0])),
        };
        Ok(IncompleteImage {
            height,
            width,
            channels,
            values,
            missing: vec![false; height * width],
        })
    }

    /// Mark `(row, col)` pixels as unknown and zero their stored values.
    pub fn with_missing(values: Tensor, missing: &[(usize, usize)]) -> Result<Self> {
        let mut img = Self::complete(values)?;
        for &(r, c) in missing {
            img.mark_missing(r, c)?;
        }
        Ok(img)
    }

    fn mark_missing(&mut self, row: usize, col: usize) -> Result<()> {
        if row >= self.height || col >= self.width {
            return Err(Error::CoordOutOfBounds {
                row: row as i64,
                col: col as i64,
                height: self.height,
                width: self.width,
            });
        }
        self.missing[row * self.width + col] = true;
        let l = self.channels;
        let base = (row * self.width + col) * l;
        self.values.data_mut()[base..base + l].fill(0.0);
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Stored values; zero at unknown pixels, so this is also the zero-imputed image.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[row * self.width + col]
    }

    /// Row-major missing flags, one per pixel.
    pub fn missing_mask(&self) -> &[bool] {
        &self.missing
    }

    pub fn missing_coords(&self) -> Vec<(usize, usize)> {
        (0..self.height * self.width)
            .filter(|&p| self.missing[p])
            .map(|p| (p / self.width, p % self.width))
            .collect()
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn observed_count(&self) -> usize {
        self.missing.len() - self.missing_count()
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.channels;
        &self.values.data()[base..base + self.channels]
    }
}

/// Planar node coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub x: i64,
    pub y: i64,
}

/// Relative position `dst - src` of an edge, each component in `{-1, 0, 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Offset {
    pub dx: i8,
    pub dy: i8,
}

impl Offset {
    pub const fn new(dx: i8, dy: i8) -> Self {
        Offset { dx, dy }
    }

    /// Position in [`OFFSETS`].
    #[inline]
    pub fn index(self) -> usize {
        ((1 - self.dy) * 3 + (self.dx + 1)) as usize
    }

    pub fn neg(self) -> Self {
        Offset::new(-self.dx, -self.dy)
    }

    pub fn as_f64(self) -> [f64; 2] {
        [f64::from(self.dx), f64::from(self.dy)]
    }
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.dx, self.dy)
    }
}

/// The nine offsets in visual row-major order: top row (`dy = 1`) first,
/// left to right. `OFFSETS[o.index()] == o`.
pub const OFFSETS: [Offset; 9] = [
    Offset::new(-1, 1),
    Offset::new(0, 1),
    Offset::new(1, 1),
    Offset::new(-1, 0),
    Offset::new(0, 0),
    Offset::new(1, 0),
    Offset::new(-1, -1),
    Offset::new(0, -1),
    Offset::new(1, -1),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub offset: Offset,
}

/// One node per observed pixel; directed edges between every ordered pair of
/// nodes at Chebyshev distance at most one, self-edges included.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGraph {
    coords: Vec<Coord>,
    index: CoordIndex,
    edges: Vec<Edge>,
    features: Tensor,
}

/// Dense coordinate-to-node lookup over the bounding box of the nodes.
#[derive(Clone, Debug, PartialEq)]
struct CoordIndex {
    origin: Coord,
    cols: usize,
    rows: usize,
    slots: Vec<u32>,
}

const VACANT: u32 = u32::MAX;

impl CoordIndex {
    fn build(coords: &[Coord]) -> Self {
        let (mut lo, mut hi) = (coords[0], coords[0]);
        for c in coords {
            lo.x = lo.x.min(c.x);
            lo.y = lo.y.min(c.y);
            hi.x = hi.x.max(c.x);
            hi.y = hi.y.max(c.y);
        }
        let cols = (hi.x - lo.x + 1) as usize;
        let rows = (hi.y - lo.y + 1) as usize;
        let mut slots = vec![VACANT; cols * rows];
        for (i, c) in coords.iter().enumerate() {
            slots[(c.y - lo.y) as usize * cols + (c.x - lo.x) as usize] = i as u32;
        }
        CoordIndex {
            origin: lo,
            cols,
            rows,
            slots,
        }
    }

    fn get(&self, c: Coord) -> Option<usize> {
        let x = c.x - self.origin.x;
        let y = c.y - self.origin.y;
        if x < 0 || y < 0 || x as usize >= self.cols || y as usize >= self.rows {
            return None;
        }
        match self.slots[y as usize * self.cols + x as usize] {
            VACANT => None,
            id => Some(id as usize),
        }
    }
}

impl PixelGraph {
    /// Build a graph from explicit node coordinates and feature rows.
    /// Coordinates must be distinct.
    pub fn from_nodes(coords: Vec<Coord>, features: Tensor) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let (n, _) = features.matrix_dims()?;
        if n != coords.len() {
            return Err(Error::shape("PixelGraph", features.dims(), &[coords.len()]));
        }
        let index = CoordIndex::build(&coords);
        let mut edges = Vec::with_capacity(coords.len() * 9);
        for (src, &c) in coords.iter().enumerate() {
            for off in OFFSETS {
                let nb = Coord {
                    x: c.x + i64::from(off.dx),
                    y: c.y + i64::from(off.dy),
                };
                if let Some(dst) = index.get(nb) {
                    edges.push(Edge { src, dst, offset: off });
                }
            }
        }
        Ok(PixelGraph {
            coords,
            index,
            edges,
            features,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    /// Edges sorted by source node, then by offset order within a source.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// `[N x l]` node features.
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn node_at(&self, c: Coord) -> Option<usize> {
        self.index.get(c)
    }

    /// Number of edges whose source is `node` (self-edge included).
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for e in &self.edges {
            deg[e.src] += 1;
        }
        deg
    }

    /// Same topology with new coordinates shifted by a constant vector.
    pub fn translated(&self, dx: i64, dy: i64) -> PixelGraph {
        let coords: Vec<Coord> = self
            .coords
            .iter()
            .map(|c| Coord {
                x: c.x + dx,
                y: c.y + dy,
            })
            .collect();
        PixelGraph {
            index: CoordIndex::build(&coords),
            coords,
            edges: self.edges.clone(),
            features: self.features.clone(),
        }
    }

    pub fn with_features(&self, features: Tensor) -> Result<PixelGraph> {
        let (n, _) = features.matrix_dims()?;
        if n != self.num_nodes() {
            return Err(Error::shape("with_features", features.dims(), self.features.dims()));
        }
        Ok(PixelGraph {
            features,
            ..self.clone()
        })
    }
}

pub fn coord_of(height: usize, row: usize, col: usize) -> Coord {
    Coord {
        x: col as i64,
        y: (height - 1 - row) as i64,
    }
}

/// `(row, col)` for a node coordinate in an image of the given height.
pub fn pixel_of(height: usize, c: Coord) -> (i64, i64) {
    (height as i64 - 1 - c.y, c.x)
}

/// One node per observed pixel (row-major), features are the pixel values.
pub fn build_graph(img: &IncompleteImage) -> Result<PixelGraph> {
    let n = img.observed_count();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let l = img.channels();
    let mut coords = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * l);
    for r in 0..img.height() {
        for c in 0..img.width() {
            if !img.is_missing(r, c) {
                coords.push(coord_of(img.height(), r, c));
                feats.extend_from_slice(img.pixel(r, c));
            }
        }
    }
    PixelGraph::from_nodes(coords, Tensor::from_vec([n, l], feats)?)
}

/// Write node feature rows back onto an `n x m` grid.
///
/// Pixels without a node get `fill`. With `with_mask_channel`, one extra
/// channel is appended holding 1 where there is no node and 0 elsewhere.
pub fn scatter_to_grid(
    graph: &PixelGraph,
    node_features: &Tensor,
    height: usize,
    width: usize,
    fill: f64,
    with_mask_channel: bool,
) -> Result<Tensor> {
    let (rows, c) = node_features.matrix_dims()?;
    if rows != graph.num_nodes() {
        return Err(Error::shape("scatter_to_grid", node_features.dims(), &[graph.num_nodes(), c]));
    }
    let out_c = c + usize::from(with_mask_channel);
    let mut out = vec![fill; height * width * out_c];
    if with_mask_channel {
        for p in 0..height * width {
            out[p * out_c + c] = 1.0;
        }
    }
    for (i, &coord) in graph.coords().iter().enumerate() {
        let (r, col) = pixel_of(height, coord);
        if r < 0 || col < 0 || r as usize >= height || col as usize >= width {
            return Err(Error::CoordOutOfBounds { row: r, col, height, width });
        }
        let base = (r as usize * width + col as usize) * out_c;
        out[base..base + c].copy_from_slice(node_features.row(i));
        if with_mask_channel {
            out[base + c] = 0.0;
        }
    }
    Tensor::from_vec([height, width, out_c], out)
}

/// Square missing patch, fully inside the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl PatchSpec {
    pub fn new(top: usize, left: usize, size: usize, height: usize, width: usize) -> Result<Self> {
        if size == 0 || top + size > height || left + size > width {
            return Err(Error::PatchOutOfBounds { size, height, width });
        }
        Ok(PatchSpec { top, left, size })
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.size).contains(&row) && (self.left..self.left + self.size).contains(&col)
    }

    pub fn coords(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.size * self.size);
        for r in self.top..self.top + self.size {
            for c in self.left..self.left + self.size {
                out.push((r, c));
            }
        }
        out
    }
}

/// Patch position drawn uniformly over every fully contained placement.
pub fn sample_patch(rng: &mut Rng, height: usize, width: usize, size: usize) -> Result<PatchSpec> {
    if size == 0 || size > height.min(width) {
        return Err(Error::PatchOutOfBounds { size, height, width });
    }
    let top = rng.index(height - size + 1);
    let left = rng.index(width - size + 1);
    Ok(PatchSpec { top, left, size })
}

/// Hide the patch in a complete image. Any previous missing set is replaced.
pub fn apply_patch(values: &Tensor, patch: PatchSpec) -> Result<IncompleteImage> {
    let img = IncompleteImage::complete(values.clone())?;
    PatchSpec::new(patch.top, patch.left, patch.size, img.height(), img.width())?;
    IncompleteImage::with_missing(values.clone(), &patch.coords())
}

/// One patch per image index, drawn from a seeded stream.
pub fn frozen_masks(count: usize, height: usize, width: usize, size: usize, seed: u64) -> Result<Vec<PatchSpec>> {
    let mut rng = Rng::new(seed);
    (0..count).map(|_| sample_patch(&mut rng, height, width, size)).collect()
}

/// Mask files hold one `index top left size` line per image.
pub fn write_mask_file(path: impl AsRef<Path>, masks: &[PatchSpec]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, p) in masks.iter().enumerate() {
        writeln!(out, "{i} {} {} {}", p.top, p.left, p.size).expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_mask_file(path: impl AsRef<Path>) -> Result<Vec<PatchSpec>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_masks(&text)
}

pub fn parse_masks(text: &str) -> Result<Vec<PatchSpec>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format("mask", format!("line {}: {line:?}", lineno + 1)))?;
        let [idx, top, left, size] = nums[..] else {
            return Err(Error::format("mask", format!("line {}: expected 4 fields", lineno + 1)));
        };
        if idx != out.len() {
            return Err(Error::format("mask", format!("line {}: index {idx} out of sequence", lineno + 1)));
        }
        out.push(PatchSpec { top, left, size });
    }
    Ok(out)
}

/// Several graphs laid side by side as one disjoint union.
///
/// Graph `g` is translated `g * (width + 2)` columns to the right, so no edge
/// can join two members and every layer sees exactly the individual graphs.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub graph: PixelGraph,
    pub membership: Vec<usize>,
    pub ranges: Vec<Range<usize>>,
    pub height: usize,
    pub width: usize,
}

impl GraphBatch {
    pub fn new(graphs: &[PixelGraph], height: usize, width: usize) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let l = graphs[0].features().matrix_dims()?.1;
        let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut coords = Vec::with_capacity(total);
        let mut feats = Vec::with_capacity(total * l);
        let mut edges = Vec::with_capacity(graphs.iter().map(|g| g.edges().len()).sum());
        let mut membership = Vec::with_capacity(total);
        let mut ranges = Vec::with_capacity(graphs.len());
        let stride = width as i64 + 2;
        for (gi, g) in graphs.iter().enumerate() {
            if g.features().matrix_dims()?.1 != l {
                return Err(Error::shape("GraphBatch", g.features().dims(), graphs[0].features().dims()));
            }
            let base = coords.len();
            coords.extend(g.coords().iter().map(|c| Coord {
                x: c.x + gi as i64 * stride,
                y: c.y,
            }));
            feats.extend_from_slice(g.features().data());
            edges.extend(g.edges().iter().map(|e| Edge {
                src: e.src + base,
                dst: e.dst + base,
                offset: e.offset,
            }));
            membership.extend(std::iter::repeat_n(gi, g.num_nodes()));
            ranges.push(base..coords.len());
        }
        let graph = PixelGraph {
            index: CoordIndex::build(&coords),
            coords,
            edges,
            features: Tensor::from_vec([total, l], feats)?,
        };
        Ok(GraphBatch {
            graph,
            membership,
            ranges,
            height,
            width,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.ranges.len()
    }

    fn grid_position(&self, node: usize) -> usize {
        let g = self.membership[node];
        let c = self.graph.coords[node];
        let x = c.x - g as i64 * (self.width as i64 + 2);
        let (r, col) = pixel_of(self.height, Coord { x, y: c.y });
        r as usize * self.width + col as usize
    }

    /// Batched [`scatter_to_grid`]: `[N x C]` to `[B x n x m x C(+1)]`.
    pub fn scatter(&self, node_features: &Tensor, fill: f64, with_mask_channel: bool) -> Result<Tensor> {
        let (rows, c) = node_features.matrix_dims()?;
        if rows != self.graph.num_nodes() {
            return Err(Error::shape("scatter", node_features.dims(), &[self.graph.num_nodes(), c]));
        }
        let out_c = c + usize::from(with_mask_channel);
        let plane = self.height * self.width;
        let mut out = vec![fill; self.num_graphs() * plane * out_c];
        if with_mask_channel {
            for p in 0..self.num_graphs() * plane {
                out[p * out_c + c] = 1.0;
            }
        }
        for i in 0..rows {
            let p = self.membership[i] * plane + self.grid_position(i);
            out[p * out_c..p * out_c + c].copy_from_slice(node_features.row(i));
            if with_mask_channel {
                out[p * out_c + c] = 0.0;
            }
        }
        Tensor::from_vec([self.num_graphs(), self.height, self.width, out_c], out)
    }

    /// Adjoint of [`GraphBatch::scatter`]: read the first `channels` grid
    /// channels back at node positions.
    pub fn gather(&self, grid: &Tensor, channels: usize) -> Result<Tensor> {
        let dims = grid.dims();
        if dims.len() != 4 || dims[0] != self.num_graphs() || dims[1] != self.height || dims[2] != self.width {
            return Err(Error::shape(
                "gather",
                dims,
                &[self.num_graphs(), self.height, self.width, channels],
            ));
        }
        let gc = dims[3];
        let plane = self.height * self.width;
        let n = self.graph.num_nodes();
        let mut out = vec![0.0; n * channels];
        for i in 0..n {
            let p = self.membership[i] * plane + self.grid_position(i);
            out[i * channels..(i + 1) * channels].copy_from_slice(&grid.data()[p * gc..p * gc + channels]);
        }
        Tensor::from_vec([n, channels], out)
    }
}
