use super::{Coord, SparseTensor, NONE};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SparseConvMode {
    /// Output sites are exactly the input sites. Stride must be 1.
    Submanifold,
    /// Output sites are every in-bounds site reachable from an input site
    /// through some kernel tap (only strided sites when stride > 1).
    Generalized,
}

/// Gather/scatter plan of one sparse convolution.
///
/// For tap `k` with offset `delta`, a pair `(i, o)` means input row `i` sits at
/// `stride * coord(o) + delta` (forward convolution) or output row `o` sits at
/// `stride * coord(i) + delta` (transposed convolution). Pairs in each tap list
/// are sorted by output row.
#[derive(Clone, Debug)]
pub struct Rulebook {
    spec: ConvSpec,
    pairs: Vec<Vec<(u32, u32)>>,
    out_coords: Vec<Coord>,
    out_shape: [usize; 4],
    n_in: usize,
    /// `[out_row * taps + tap]` -> input row
    out_nbr: Vec<u32>,
    /// `[in_row * taps + tap]` -> output row
    in_nbr: Vec<u32>,
}

impl Rulebook {
    fn from_output_table(
        spec: ConvSpec,
        out_coords: Vec<Coord>,
        out_shape: [usize; 4],
        n_in: usize,
        out_nbr: Vec<u32>,
    ) -> Self {
        let taps = spec.kernel_volume();
        let mut pairs = vec![Vec::new(); taps];
        let mut in_nbr = vec![NONE; n_in * taps];
        for (o, nbrs) in out_nbr.chunks_exact(taps.max(1)).enumerate() {
            for (k, &i) in nbrs.iter().enumerate() {
                if i != NONE {
                    pairs[k].push((i, o as u32));
                    in_nbr[i as usize * taps + k] = o as u32;
                }
            }
        }
        Self {
            spec,
            pairs,
            out_coords,
            out_shape,
            n_in,
            out_nbr,
            in_nbr,
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    /// `(input_row, output_row)` pairs of every tap, in offset order.
    pub fn pairs(&self) -> &[Vec<(u32, u32)>] {
        &self.pairs
    }

    pub fn out_coords(&self) -> &[Coord] {
        &self.out_coords
    }

    pub fn out_shape(&self) -> [usize; 4] {
        self.out_shape
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.out_coords.len()
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    pub(crate) fn taps(&self) -> usize {
        self.spec.kernel_volume()
    }

    pub(crate) fn out_nbr(&self) -> &[u32] {
        &self.out_nbr
    }

    pub(crate) fn in_nbr(&self) -> &[u32] {
        &self.in_nbr
    }
}

#[inline]
fn shifted(c: &Coord, stride: [usize; 3], delta: &[isize; 3], shape: &[usize; 4]) -> Option<Coord> {
    let mut out = [c[0], 0, 0, 0];
    for a in 0..3 {
        let v = c[a + 1] as isize * stride[a] as isize + delta[a];
        if v < 0 || v >= shape[a + 1] as isize {
            return None;
        }
        out[a + 1] = v as u32;
    }
    Some(out)
}

/// Inverse of [`shifted`]: the site `o` with `stride * o + delta == c`, if any.
#[inline]
fn unshifted(c: &Coord, stride: [usize; 3], delta: &[isize; 3], shape: &[usize; 4]) -> Option<Coord> {
    let mut out = [c[0], 0, 0, 0];
    for a in 0..3 {
        let v = c[a + 1] as isize - delta[a];
        let s = stride[a] as isize;
        if v < 0 || v % s != 0 || v / s >= shape[a + 1] as isize {
            return None;
        }
        out[a + 1] = (v / s) as u32;
    }
    Some(out)
}

fn check_kernel(spec: &ConvSpec) -> Result<()> {
    if spec.kernel.iter().any(|k| k % 2 == 0) {
        return Err(Error::InvalidConfig(format!(
            "sparse convolution needs odd kernel extents, got {:?}",
            spec.kernel
        )));
    }
    Ok(())
}

/// Builds the rulebook of a forward sparse convolution over `input`.
pub fn build_rulebook<T: Real>(input: &SparseTensor<T>, spec: &ConvSpec, mode: SparseConvMode) -> Result<Rulebook> {
    check_kernel(spec)?;
    let in_shape = input.dense_shape();
    let offsets = spec.offsets();
    let taps = offsets.len();
    let index = input.index();

    let (out_coords, out_shape) = match mode {
        SparseConvMode::Submanifold => {
            if spec.stride != [1; 3] {
                return Err(Error::InvalidConfig("submanifold convolution requires stride 1".into()));
            }
            if (0..3).any(|a| 2 * spec.padding[a] + 1 != spec.kernel[a]) {
                return Err(Error::InvalidConfig(
                    "submanifold convolution requires centered kernels (padding = kernel / 2)".into(),
                ));
            }
            (input.coords().to_vec(), in_shape)
        }
        SparseConvMode::Generalized => {
            let sp = spec.output_dims([in_shape[1], in_shape[2], in_shape[3]])?;
            let out_shape = [in_shape[0], sp[0], sp[1], sp[2]];
            let mut coords: Vec<Coord> = Vec::with_capacity(input.nnz() * taps);
            for c in input.coords() {
                for d in &offsets {
                    if let Some(o) = unshifted(c, spec.stride, d, &out_shape) {
                        coords.push(o);
                    }
                }
            }
            coords.sort_unstable();
            coords.dedup();
            (coords, out_shape)
        }
    };

    let mut out_nbr = vec![NONE; out_coords.len() * taps];
    for (o, c) in out_coords.iter().enumerate() {
        for (k, d) in offsets.iter().enumerate() {
            if let Some(src) = shifted(c, spec.stride, d, &in_shape) {
                if let Some(i) = index.get(&src) {
                    out_nbr[o * taps + k] = i as u32;
                }
            }
        }
    }
    Ok(Rulebook::from_output_table(
        *spec,
        out_coords,
        out_shape,
        input.nnz(),
        out_nbr,
    ))
}

/// Builds the rulebook of a transposed (upsampling) convolution whose output
/// lives exactly on `target` (canonically sorted) inside `target_shape`.
pub fn build_transposed_rulebook<T: Real>(
    input: &SparseTensor<T>,
    spec: &ConvSpec,
    target: &[Coord],
    target_shape: [usize; 4],
) -> Result<Rulebook> {
    check_kernel(spec)?;
    if target.is_empty() && !input.is_empty() {
        return Err(Error::InvalidConfig(
            "transposed convolution has input rows but an empty target table".into(),
        ));
    }
    let offsets = spec.offsets();
    let taps = offsets.len();
    let index = input.index();
    let in_shape = input.dense_shape();
    let mut out_nbr = vec![NONE; target.len() * taps];
    for (o, c) in target.iter().enumerate() {
        for (k, d) in offsets.iter().enumerate() {
            if let Some(src) = unshifted(c, spec.stride, d, &in_shape) {
                if let Some(i) = index.get(&src) {
                    out_nbr[o * taps + k] = i as u32;
                }
            }
        }
    }
    Ok(Rulebook::from_output_table(
        *spec,
        target.to_vec(),
        target_shape,
        input.nnz(),
        out_nbr,
    ))
}

/// Every in-bounds site reached by upsampling `coords` through `spec`.
pub(crate) fn transposed_reach(coords: &[Coord], spec: &ConvSpec, target_shape: [usize; 4]) -> Vec<Coord> {
    let offsets = spec.offsets();
    let mut out = Vec::with_capacity(coords.len() * offsets.len());
    for c in coords {
        for d in &offsets {
            if let Some(o) = shifted(c, spec.stride, d, &target_shape) {
                out.push(o);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_voxel(c: Coord, shape: [usize; 4]) -> SparseTensor<f32> {
        SparseTensor::new(vec![c], vec![1.0], 1, shape).unwrap()
    }

    #[test]
    fn single_voxel_submanifold_has_one_pair() {
        let s = one_voxel([0, 2, 2, 2], [1, 5, 5, 5]);
        let rb = build_rulebook(&s, &ConvSpec::same(1, 1), SparseConvMode::Submanifold).unwrap();
        assert_eq!(rb.n_out(), 1);
        assert_eq!(rb.total_pairs(), 1);
        assert_eq!(rb.pairs()[13], vec![(0, 0)]);
    }

    #[test]
    fn single_interior_voxel_generalized_reaches_27() {
        let s = one_voxel([0, 2, 2, 2], [1, 5, 5, 5]);
        let rb = build_rulebook(&s, &ConvSpec::same(1, 1), SparseConvMode::Generalized).unwrap();
        assert_eq!(rb.n_out(), 27);
        assert_eq!(rb.total_pairs(), 27);
        assert!(rb.pairs().iter().all(|p| p.len() == 1));
    }

    #[test]
    fn submanifold_rejects_stride() {
        let s = one_voxel([0, 0, 0, 0], [1, 4, 4, 4]);
        let spec = ConvSpec {
            stride: [2; 3],
            ..ConvSpec::same(1, 1)
        };
        assert!(build_rulebook(&s, &spec, SparseConvMode::Submanifold).is_err());
        assert!(build_rulebook(&s, &spec, SparseConvMode::Generalized).is_ok());
    }

    #[test]
    fn transposed_needs_target() {
        let s = one_voxel([0, 0, 1, 1], [1, 1, 2, 2]);
        let err = build_transposed_rulebook(&s, &ConvSpec::upsample(1, 1), &[], [1, 1, 4, 4]);
        assert!(err.is_err());
        let empty = SparseTensor::<f32>::empty(1, [1, 1, 2, 2]);
        assert!(build_transposed_rulebook(&empty, &ConvSpec::upsample(1, 1), &[], [1, 1, 4, 4]).is_ok());
    }
}
