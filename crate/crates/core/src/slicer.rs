//! Partitioning filter tensors into fixed-shape slices and back.
//!
//! A filter set of shape `(s1, s2, s3, s4)` is cut into
//! `⌈s1/ŝ1⌉·⌈s2/ŝ2⌉·⌈s3/ŝ3⌉·⌈s4/ŝ4⌉` blocks. Trailing blocks along an axis may
//! be fractional; they are materialized at full slice shape with zeros past
//! their valid extent, and reassembly ignores whatever sits there. Slices are
//! enumerated row-major over block indices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_shape, Shape4, Tensor4};

/// Shape `(ŝ1, ŝ2, ŝ3, ŝ4)` of a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 4]", into = "[usize; 4]")]
pub struct SliceShape([usize; 4]);

impl SliceShape {
    pub fn new(dims: [usize; 4]) -> Result<Self> {
        check_shape(&dims)?;
        Ok(Self(dims))
    }

    pub fn dims(self) -> [usize; 4] {
        self.0
    }

    /// `ŝ1·ŝ2·ŝ3·ŝ4`.
    pub fn element_count(self) -> usize {
        self.0.iter().product()
    }
}

impl TryFrom<[usize; 4]> for SliceShape {
    type Error = Error;
    fn try_from(dims: [usize; 4]) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<SliceShape> for [usize; 4] {
    fn from(s: SliceShape) -> Self {
        s.0
    }
}

impl fmt::Display for SliceShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "[{a},{b},{c},{d}]")
    }
}

/// Parses `A,B,C,D`.
impl FromStr for SliceShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().trim_matches(|c| c == '[' || c == ']').split(',').collect();
        if parts.len() != 4 {
            return Err(Error::InvalidConfig(format!("slice shape `{s}` needs four components")));
        }
        let mut dims = [0usize; 4];
        for (d, p) in dims.iter_mut().zip(&parts) {
            *d = p
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad slice shape component `{p}`")))?;
        }
        Self::new(dims)
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Partition metadata for one filter set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr")]
pub struct SliceGrid {
    filter_shape: Shape4,
    slice_shape: SliceShape,
    counts: [usize; 4],
}

#[derive(Deserialize)]
struct GridRepr {
    filter_shape: Shape4,
    slice_shape: SliceShape,
    #[serde(default)]
    counts: Option<[usize; 4]>,
}

impl TryFrom<GridRepr> for SliceGrid {
    type Error = Error;
    fn try_from(r: GridRepr) -> Result<Self> {
        let grid = make_grid(r.filter_shape, r.slice_shape)?;
        match r.counts {
            Some(c) if c != grid.counts => Err(Error::ShapeMismatch(format!(
                "grid counts {c:?} disagree with {:?} for filters {:?} and slices {}",
                grid.counts, r.filter_shape, r.slice_shape
            ))),
            _ => Ok(grid),
        }
    }
}

/// Builds the grid cutting `filter_shape` into slices of `slice_shape`.
pub fn make_grid(filter_shape: Shape4, slice_shape: SliceShape) -> Result<SliceGrid> {
    check_shape(&filter_shape)?;
    let s = slice_shape.dims();
    let counts = [0, 1, 2, 3].map(|a| ceil_div(filter_shape[a], s[a]));
    Ok(SliceGrid { filter_shape, slice_shape, counts })
}

impl SliceGrid {
    pub fn filter_shape(&self) -> Shape4 {
        self.filter_shape
    }

    pub fn slice_shape(&self) -> SliceShape {
        self.slice_shape
    }

    pub fn counts(&self) -> [usize; 4] {
        self.counts
    }

    pub fn slice_count(&self) -> usize {
        self.counts.iter().product()
    }

    /// Block coordinates of slice `i`; axis 1 outermost, axis 4 innermost.
    pub fn block_index(&self, i: usize) -> [usize; 4] {
        assert!(i < self.slice_count(), "slice index {i} out of range");
        let [_, c2, c3, c4] = self.counts;
        [i / (c2 * c3 * c4), (i / (c3 * c4)) % c2, (i / c4) % c3, i % c4]
    }

    /// Filter-tensor coordinates of slice `i`'s first element.
    pub fn origin(&self, i: usize) -> [usize; 4] {
        let b = self.block_index(i);
        let s = self.slice_shape.dims();
        [0, 1, 2, 3].map(|a| b[a] * s[a])
    }

    /// Valid sub-block size of slice `i` along each axis.
    pub fn extent(&self, i: usize) -> [usize; 4] {
        let o = self.origin(i);
        let s = self.slice_shape.dims();
        [0, 1, 2, 3].map(|a| s[a].min(self.filter_shape[a] - o[a]))
    }

    pub fn extents(&self) -> Vec<[usize; 4]> {
        (0..self.slice_count()).map(|i| self.extent(i)).collect()
    }

    /// Visits every valid `(slice offset, filter offset)` pair of slice `i`.
    pub(crate) fn for_each_valid(&self, i: usize, mut f: impl FnMut(usize, usize)) {
        let o = self.origin(i);
        let e = self.extent(i);
        let s = self.slice_shape.dims();
        let fs = self.filter_shape;
        for a in 0..e[0] {
            for b in 0..e[1] {
                for c in 0..e[2] {
                    let slice_row = ((a * s[1] + b) * s[2] + c) * s[3];
                    let filter_row = (((o[0] + a) * fs[1] + o[1] + b) * fs[2] + o[2] + c) * fs[3] + o[3];
                    for d in 0..e[3] {
                        f(slice_row + d, filter_row + d);
                    }
                }
            }
        }
    }
}

/// Cuts `filters` into slices, zero-filling past each slice's valid extent.
pub fn partition(filters: &Tensor4, slice_shape: SliceShape) -> Result<(SliceGrid, Vec<Tensor4>)> {
    let grid = make_grid(filters.shape(), slice_shape)?;
    let src = filters.as_slice();
    let slices = (0..grid.slice_count())
        .map(|i| {
            let mut s = Tensor4::zeros(slice_shape.dims());
            let dst = s.as_mut_slice();
            grid.for_each_valid(i, |so, fo| dst[so] = src[fo]);
            s
        })
        .collect();
    Ok((grid, slices))
}

/// Inverse of [`partition`]; entries outside a slice's extent are ignored.
pub fn reassemble(grid: &SliceGrid, slices: &[Tensor4]) -> Result<Tensor4> {
    if slices.len() != grid.slice_count() {
        return Err(Error::ShapeMismatch(format!(
            "grid has {} slices, got {}",
            grid.slice_count(),
            slices.len()
        )));
    }
    let want = grid.slice_shape.dims();
    if let Some(bad) = slices.iter().find(|s| s.shape() != want) {
        return Err(Error::ShapeMismatch(format!(
            "slice shape {:?} differs from grid slice shape {want:?}",
            bad.shape()
        )));
    }
    let mut out = Tensor4::zeros(grid.filter_shape);
    let dst = out.as_mut_slice();
    for (i, s) in slices.iter().enumerate() {
        let src = s.as_slice();
        grid.for_each_valid(i, |so, fo| dst[fo] = src[so]);
    }
    Ok(out)
}
