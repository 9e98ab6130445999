//! COO sparse tensors and the sparse convolution engine.
//!
//! A [`SparseTensor`] stores the occupied sites of a `[B, C, T, H, W]` grid
//! as coordinate rows `(batch, t, h, w)` with one `C`-channel feature row per
//! site. Rows are unique and kept in canonical lexicographic order, which makes
//! every downstream result independent of how the tensor was built.
//!
//! Convolutions run in two steps: [`build_rulebook`] enumerates the
//! `(input row, output row)` pairs touched by each kernel tap, and
//! [`sparse_conv_forward`] gathers, multiplies and scatter-adds along them.
//! For a fixed tap the pairing is injective in both directions, so every output
//! row receives at most one contribution per tap and the accumulation order is
//! always "bias, then taps in offset order", whatever the thread count.

mod conv;
mod dump;
mod pool;
mod rulebook;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Real};

pub use conv::{
    sparse_conv_backward, sparse_conv_forward, sparse_transposed_conv, sparse_transposed_conv_backward, upsample_reach,
    SparseConvGrads,
};
pub use dump::{read_sparse_dump, write_sparse_dump, SPARSE_DUMP_MAGIC};
pub use pool::{sparse_maxpool, sparse_maxpool_backward, sparse_maxpool_with_routing, SparsePoolResult};
pub use rulebook::{build_rulebook, build_transposed_rulebook, Rulebook, SparseConvMode};

/// `(batch, t, h, w)`
pub type Coord = [u32; 4];

/// Marks an absent neighbor in rulebook lookup tables.
pub(crate) const NONE: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor<T = f32> {
    coords: Vec<Coord>,
    feats: Vec<T>,
    channels: usize,
    dense_shape: [usize; 4],
}

impl<T: Real> SparseTensor<T> {
    /// Validates uniqueness, canonical order and bounds.
    pub fn new(coords: Vec<Coord>, feats: Vec<T>, channels: usize, dense_shape: [usize; 4]) -> Result<Self> {
        if feats.len() != coords.len() * channels {
            return Err(Error::shape(
                "SparseTensor::new",
                "feature count",
                coords.len() * channels,
                feats.len(),
            ));
        }
        for c in &coords {
            check_bounds(c, &dense_shape)?;
        }
        if let Some(pos) = coords.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "coordinate rows {} and {} are duplicated or out of canonical order",
                pos,
                pos + 1
            )));
        }
        Ok(Self {
            coords,
            feats,
            channels,
            dense_shape,
        })
    }

    /// Sorts rows into canonical order. Duplicate coordinates are an error.
    pub fn from_unsorted(coords: Vec<Coord>, feats: Vec<T>, channels: usize, dense_shape: [usize; 4]) -> Result<Self> {
        if feats.len() != coords.len() * channels {
            return Err(Error::shape(
                "SparseTensor::from_unsorted",
                "feature count",
                coords.len() * channels,
                feats.len(),
            ));
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_unstable_by_key(|&i| coords[i]);
        let sorted_coords = order.iter().map(|&i| coords[i]).collect();
        let mut sorted_feats = Vec::with_capacity(feats.len());
        for &i in &order {
            sorted_feats.extend_from_slice(&feats[i * channels..(i + 1) * channels]);
        }
        Self::new(sorted_coords, sorted_feats, channels, dense_shape)
    }

    pub fn empty(channels: usize, dense_shape: [usize; 4]) -> Self {
        Self {
            coords: Vec::new(),
            feats: Vec::new(),
            channels,
            dense_shape,
        }
    }

    /// Same coordinates, new features.
    pub fn with_feats(&self, feats: Vec<T>, channels: usize) -> Result<Self> {
        if feats.len() != self.coords.len() * channels {
            return Err(Error::shape(
                "with_feats",
                "feature count",
                self.coords.len() * channels,
                feats.len(),
            ));
        }
        Ok(Self {
            coords: self.coords.clone(),
            feats,
            channels,
            dense_shape: self.dense_shape,
        })
    }

    pub(crate) fn from_parts_unchecked(
        coords: Vec<Coord>,
        feats: Vec<T>,
        channels: usize,
        dense_shape: [usize; 4],
    ) -> Self {
        debug_assert_eq!(feats.len(), coords.len() * channels);
        Self {
            coords,
            feats,
            channels,
            dense_shape,
        }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn feats(&self) -> &[T] {
        &self.feats
    }

    pub fn feats_mut(&mut self) -> &mut [T] {
        &mut self.feats
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dense_shape(&self) -> [usize; 4] {
        self.dense_shape
    }

    pub fn nnz(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn index(&self) -> CoordIndex {
        CoordIndex::new(&self.coords)
    }

    pub fn cast<U: Real>(&self) -> SparseTensor<U> {
        SparseTensor {
            coords: self.coords.clone(),
            feats: self.feats.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            channels: self.channels,
            dense_shape: self.dense_shape,
        }
    }
}

fn check_bounds(c: &Coord, shape: &[usize; 4]) -> Result<()> {
    if c.iter().zip(shape).any(|(&v, &d)| v as usize >= d) {
        return Err(Error::CoordOutOfBounds {
            coord: *c,
            shape: *shape,
        });
    }
    Ok(())
}

/// Hash map from coordinate to row index.
#[derive(Clone, Debug, Default)]
pub struct CoordIndex {
    map: FxHashMap<u64, u32>,
}

#[inline]
pub(crate) fn pack(c: &Coord) -> u64 {
    // batch gets 16 bits, each spatial axis 16 bits.
    ((c[0] as u64) << 48) | ((c[1] as u64) << 32) | ((c[2] as u64) << 16) | c[3] as u64
}

impl CoordIndex {
    pub fn new(coords: &[Coord]) -> Self {
        let mut map = FxHashMap::with_capacity_and_hasher(coords.len(), Default::default());
        for (i, c) in coords.iter().enumerate() {
            map.insert(pack(c), i as u32);
        }
        Self { map }
    }

    pub fn get(&self, c: &Coord) -> Option<usize> {
        self.map.get(&pack(c)).map(|&i| i as usize)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Keeps every site of `[B, C, T, H, W]` where some channel has `|value| > threshold`.
pub fn dense_to_sparse<T: Real>(x: &DenseTensor<T>, threshold: T) -> Result<SparseTensor<T>> {
    let [b, c, t, h, w] = x.dims5("dense_to_sparse")?;
    if [b, t, h, w].iter().any(|&d| d > u16::MAX as usize) {
        return Err(Error::InvalidConfig("dense_to_sparse: axis longer than 65535".into()));
    }
    let plane = t * h * w;
    let data = x.data();
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for bi in 0..b {
        let base = bi * c * plane;
        for site in 0..plane {
            if (0..c).any(|ch| data[base + ch * plane + site].abs() > threshold) {
                let (ti, rest) = (site / (h * w), site % (h * w));
                coords.push([bi as u32, ti as u32, (rest / w) as u32, (rest % w) as u32]);
                feats.extend((0..c).map(|ch| data[base + ch * plane + site]));
            }
        }
    }
    Ok(SparseTensor::from_parts_unchecked(coords, feats, c, [b, t, h, w]))
}

/// Zeros everywhere except the listed sites.
pub fn sparse_to_dense<T: Real>(s: &SparseTensor<T>) -> Result<DenseTensor<T>> {
    let [b, t, h, w] = s.dense_shape;
    let c = s.channels;
    let plane = t * h * w;
    let mut out = vec![T::zero(); b * c * plane];
    for (row, coord) in s.coords.iter().enumerate() {
        check_bounds(coord, &s.dense_shape)?;
        let [bi, ti, hi, wi] = coord.map(|v| v as usize);
        let site = (ti * h + hi) * w + wi;
        for ch in 0..c {
            out[(bi * c + ch) * plane + site] = s.feats[row * c + ch];
        }
    }
    DenseTensor::new(vec![b, c, t, h, w], out)
}

/// Adjoint of [`sparse_to_dense`]: reads a dense gradient at the listed sites.
pub fn gather_dense_rows<T: Real>(grad: &DenseTensor<T>, like: &SparseTensor<T>) -> Result<Vec<T>> {
    let [b, t, h, w] = like.dense_shape;
    let c = like.channels;
    grad.expect_shape("gather_dense_rows", &[b, c, t, h, w])?;
    let plane = t * h * w;
    let g = grad.data();
    let mut out = Vec::with_capacity(like.feats.len());
    for coord in &like.coords {
        let [bi, ti, hi, wi] = coord.map(|v| v as usize);
        let site = (ti * h + hi) * w + wi;
        out.extend((0..c).map(|ch| g[(bi * c + ch) * plane + site]));
    }
    Ok(out)
}

/// Fraction of occupied sites: `N / (B * T * H * W)`.
pub fn nnz_rate<T: Real>(s: &SparseTensor<T>) -> f64 {
    let total: usize = s.dense_shape.iter().product();
    if total == 0 {
        0.0
    } else {
        s.nnz() as f64 / total as f64
    }
}

pub fn sparse_relu<T: Real>(s: &SparseTensor<T>) -> SparseTensor<T> {
    let feats = s
        .feats
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    SparseTensor::from_parts_unchecked(s.coords.clone(), feats, s.channels, s.dense_shape)
}

pub fn sparse_relu_backward<T: Real>(grad: &[T], cached_input: &SparseTensor<T>) -> Result<Vec<T>> {
    if grad.len() != cached_input.feats.len() {
        return Err(Error::shape(
            "sparse_relu_backward",
            "rows*channels",
            cached_input.feats.len(),
            grad.len(),
        ));
    }
    Ok(grad
        .iter()
        .zip(&cached_input.feats)
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect())
}

/// Concatenates the features of two tensors with identical coordinate tables.
pub fn sparse_concat<T: Real>(a: &SparseTensor<T>, b: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    if a.coords != b.coords {
        return Err(Error::ModelMismatch("sparse_concat: coordinate tables differ".into()));
    }
    let c = a.channels + b.channels;
    let mut feats = Vec::with_capacity(a.nnz() * c);
    for i in 0..a.nnz() {
        feats.extend_from_slice(a.row(i));
        feats.extend_from_slice(b.row(i));
    }
    Ok(SparseTensor::from_parts_unchecked(
        a.coords.clone(),
        feats,
        c,
        a.dense_shape,
    ))
}

/// Splits per-row features `[.., a | b ..]` into two gradient buffers.
pub fn sparse_split_feats<T: Real>(feats: &[T], rows: usize, widths: [usize; 2]) -> (Vec<T>, Vec<T>) {
    let c = widths[0] + widths[1];
    let mut a = Vec::with_capacity(rows * widths[0]);
    let mut b = Vec::with_capacity(rows * widths[1]);
    for r in 0..rows {
        a.extend_from_slice(&feats[r * c..r * c + widths[0]]);
        b.extend_from_slice(&feats[r * c + widths[0]..(r + 1) * c]);
    }
    (a, b)
}

/// Re-expresses `s` over the coordinate table `target` (a superset of its
/// coordinates); rows absent from `s` are zero. Also returns, per target row,
/// the source row or [`NONE`], which is what the backward pass needs.
pub fn align_to<T: Real>(s: &SparseTensor<T>, target: &[Coord]) -> Result<(SparseTensor<T>, Vec<u32>)> {
    let index = s.index();
    let c = s.channels;
    let mut feats = vec![T::zero(); target.len() * c];
    let mut src = Vec::with_capacity(target.len());
    for (o, coord) in target.iter().enumerate() {
        match index.get(coord) {
            Some(i) => {
                feats[o * c..(o + 1) * c].copy_from_slice(s.row(i));
                src.push(i as u32);
            }
            None => src.push(NONE),
        }
    }
    let found = src.iter().filter(|&&i| i != NONE).count();
    if found != s.nnz() {
        return Err(Error::ModelMismatch(format!(
            "align_to: target table covers {found} of {} source rows",
            s.nnz()
        )));
    }
    Ok((
        SparseTensor::from_parts_unchecked(target.to_vec(), feats, c, s.dense_shape),
        src,
    ))
}

pub fn align_backward<T: Real>(grad: &[T], src: &[u32], source_rows: usize, channels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); source_rows * channels];
    for (o, &i) in src.iter().enumerate() {
        if i != NONE {
            let i = i as usize;
            out[i * channels..(i + 1) * channels].copy_from_slice(&grad[o * channels..(o + 1) * channels]);
        }
    }
    out
}

/// Sorted union of two canonical coordinate tables.
pub fn union_coords(a: &[Coord], b: &[Coord]) -> Vec<Coord> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_is_empty() {
        let x = DenseTensor::<f32>::zeros(&[2, 3, 2, 4, 4]);
        let s = dense_to_sparse(&x, 0.0).unwrap();
        assert!(s.is_empty());
        assert_eq!(nnz_rate(&s), 0.0);
        assert_eq!(sparse_to_dense(&s).unwrap(), x);
    }

    #[test]
    fn fully_dense_rate_is_one() {
        let x = DenseTensor::<f32>::filled(&[1, 2, 2, 3, 3], 1.0);
        let s = dense_to_sparse(&x, 0.0).unwrap();
        assert_eq!(s.nnz(), 18);
        assert_eq!(nnz_rate(&s), 1.0);
    }

    #[test]
    fn single_coord_densifies() {
        let s = SparseTensor::<f32>::new(vec![[0, 1, 2, 3]], vec![1.0, 2.0], 2, [1, 2, 4, 4]).unwrap();
        let d = sparse_to_dense(&s).unwrap();
        assert_eq!(d.count_nonzero(), 2);
        assert_eq!(d.at(&[0, 0, 1, 2, 3]), 1.0);
        assert_eq!(d.at(&[0, 1, 1, 2, 3]), 2.0);
    }

    #[test]
    fn invariants_are_enforced() {
        let shape = [1, 1, 4, 4];
        assert!(SparseTensor::<f32>::new(vec![[0, 0, 1, 1], [0, 0, 1, 1]], vec![1.0, 1.0], 1, shape).is_err());
        assert!(SparseTensor::<f32>::new(vec![[0, 0, 2, 1], [0, 0, 1, 1]], vec![1.0, 1.0], 1, shape).is_err());
        assert!(matches!(
            SparseTensor::<f32>::new(vec![[0, 0, 4, 0]], vec![1.0], 1, shape),
            Err(Error::CoordOutOfBounds { .. })
        ));
        let s = SparseTensor::<f32>::from_unsorted(vec![[0, 0, 2, 1], [0, 0, 1, 1]], vec![2.0, 1.0], 1, shape).unwrap();
        assert_eq!(s.coords(), &[[0, 0, 1, 1], [0, 0, 2, 1]]);
        assert_eq!(s.feats(), &[1.0, 2.0]);
    }

    #[test]
    fn out_of_bounds_densify_errors() {
        let s = SparseTensor::<f32>::from_parts_unchecked(vec![[0, 0, 9, 0]], vec![1.0], 1, [1, 1, 4, 4]);
        assert!(matches!(sparse_to_dense(&s), Err(Error::CoordOutOfBounds { .. })));
    }

    #[test]
    fn threshold_filters_small_values() {
        let x = DenseTensor::<f32>::new(vec![1, 1, 1, 1, 3], vec![0.5, -2.0, 0.0]).unwrap();
        assert_eq!(dense_to_sparse(&x, 1.0).unwrap().nnz(), 1);
        assert_eq!(dense_to_sparse(&x, 0.0).unwrap().nnz(), 2);
    }

    #[test]
    fn union_and_align() {
        let a = vec![[0, 0, 0, 1], [0, 0, 0, 3]];
        let b = vec![[0, 0, 0, 2], [0, 0, 0, 3]];
        let u = union_coords(&a, &b);
        assert_eq!(u, vec![[0, 0, 0, 1], [0, 0, 0, 2], [0, 0, 0, 3]]);
        let s = SparseTensor::<f64>::new(a, vec![1.0, 2.0], 1, [1, 1, 1, 4]).unwrap();
        let (al, src) = align_to(&s, &u).unwrap();
        assert_eq!(al.feats(), &[1.0, 0.0, 2.0]);
        assert_eq!(align_backward(&[5.0, 6.0, 7.0], &src, 2, 1), vec![5.0, 7.0]);
        assert!(align_to(&s, &b).is_err());
    }
}
