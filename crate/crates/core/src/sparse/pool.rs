use rustc_hash::FxHashMap;

use super::{pack, Coord, SparseTensor};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct SparsePoolResult<T = f32> {
    pub output: SparseTensor<T>,
    /// Input row chosen for each `(output row, channel)`.
    pub argmax: Vec<u32>,
}

/// Stride-2 max pool: input site `c` maps to `floor(c / 2)` on every spatial
/// axis, batch preserved. Each channel takes the max over the rows that map to
/// an output site; ties keep the first row in canonical order.
pub fn sparse_maxpool<T: Real>(input: &SparseTensor<T>) -> SparseTensor<T> {
    sparse_maxpool_with_routing(input).output
}

pub fn sparse_maxpool_with_routing<T: Real>(input: &SparseTensor<T>) -> SparsePoolResult<T> {
    let c = input.channels();
    let [b, t, h, w] = input.dense_shape();
    let out_shape = [b, t.div_ceil(2), h.div_ceil(2), w.div_ceil(2)];
    let parent = |x: &Coord| [x[0], x[1] / 2, x[2] / 2, x[3] / 2];

    let mut out_coords: Vec<Coord> = input.coords().iter().map(parent).collect();
    out_coords.sort_unstable();
    out_coords.dedup();
    let mut slot: FxHashMap<u64, usize> = FxHashMap::default();
    slot.reserve(out_coords.len());
    for (o, oc) in out_coords.iter().enumerate() {
        slot.insert(pack(oc), o);
    }

    let mut feats = vec![T::zero(); out_coords.len() * c];
    let mut argmax = vec![u32::MAX; out_coords.len() * c];
    for (i, coord) in input.coords().iter().enumerate() {
        let o = slot[&pack(&parent(coord))];
        for (ch, &v) in input.row(i).iter().enumerate() {
            let k = o * c + ch;
            if argmax[k] == u32::MAX || v > feats[k] {
                feats[k] = v;
                argmax[k] = i as u32;
            }
        }
    }
    SparsePoolResult {
        output: SparseTensor::from_parts_unchecked(out_coords, feats, c, out_shape),
        argmax,
    }
}

/// Routes each output gradient to the input row that won the max.
pub fn sparse_maxpool_backward<T: Real>(
    grad_out: &[T],
    argmax: &[u32],
    input_rows: usize,
    channels: usize,
) -> Result<Vec<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(
            "sparse_maxpool_backward",
            "routing entries",
            argmax.len(),
            grad_out.len(),
        ));
    }
    let mut grad = vec![T::zero(); input_rows * channels];
    for (k, (&g, &i)) in grad_out.iter().zip(argmax).enumerate() {
        grad[i as usize * channels + k % channels] += g;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_moves_to_parent() {
        let s = SparseTensor::<f32>::new(vec![[0, 3, 5, 7]], vec![1.0, -2.0], 2, [1, 8, 8, 8]).unwrap();
        let p = sparse_maxpool(&s);
        assert_eq!(p.coords(), &[[0, 1, 2, 3]]);
        assert_eq!(p.feats(), &[1.0, -2.0]);
        assert_eq!(p.dense_shape(), [1, 4, 4, 4]);
    }

    #[test]
    fn channelwise_max() {
        let s = SparseTensor::<f32>::new(
            vec![[0, 0, 0, 0], [0, 0, 1, 1]],
            vec![1.0, 5.0, 3.0, 2.0],
            2,
            [1, 1, 2, 2],
        )
        .unwrap();
        let r = sparse_maxpool_with_routing(&s);
        assert_eq!(r.output.feats(), &[3.0, 5.0]);
        assert_eq!(r.argmax, vec![1, 0]);
        let g = sparse_maxpool_backward(&[10.0, 20.0], &r.argmax, 2, 2).unwrap();
        assert_eq!(g, vec![0.0, 20.0, 10.0, 0.0]);
    }

    #[test]
    fn ties_pick_first_row() {
        let s = SparseTensor::<f32>::new(vec![[0, 0, 0, 0], [0, 0, 0, 1]], vec![2.0, 2.0], 1, [1, 1, 1, 2]).unwrap();
        assert_eq!(sparse_maxpool_with_routing(&s).argmax, vec![0]);
    }
}
