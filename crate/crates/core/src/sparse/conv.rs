use rayon::prelude::*;

use super::rulebook::{build_transposed_rulebook, transposed_reach};
use super::{Coord, Rulebook, SparseTensor, NONE};
use crate::error::{Error, Result};
use crate::tensor::{KernelWeights, Mat, Real};

#[derive(Clone, Debug)]
pub struct SparseConvGrads<T = f32> {
    /// Gradient w.r.t. the input feature rows, `N_in x C_in`.
    pub input: Vec<T>,
    pub params: KernelWeights<T>,
}

fn check(op: &'static str, input: &SparseTensor<impl Real>, w: &KernelWeights<impl Real>, rb: &Rulebook) -> Result<()> {
    if input.channels() != w.spec.in_channels {
        return Err(Error::shape(op, "input channels", w.spec.in_channels, input.channels()));
    }
    if input.nnz() != rb.n_in() {
        return Err(Error::shape(op, "input rows", rb.n_in(), input.nnz()));
    }
    if w.spec.kernel_volume() != rb.taps() {
        return Err(Error::shape(op, "kernel taps", rb.taps(), w.spec.kernel_volume()));
    }
    Ok(())
}

/// Output rows handled by one parallel task.
const BLOCK: usize = 256;

/// `dst[r] += src[nbr[r, k]] * M_k` summed over taps in order, where `M_k` is
/// the `src_w x dst_w` matrix returned by `mat(k)`. Each block of destination
/// rows gathers its neighbours into one matrix per tap and runs a single GEMM.
fn accumulate<'w, T: Real>(
    dst: &mut [T],
    dst_w: usize,
    src: &[T],
    src_w: usize,
    nbr: &[u32],
    taps: usize,
    mat: impl Fn(usize) -> Mat<'w, T> + Sync,
) {
    if dst_w == 0 || src_w == 0 {
        return;
    }
    dst.par_chunks_mut(BLOCK * dst_w).enumerate().for_each(|(blk, d)| {
        let r0 = blk * BLOCK;
        let rows = d.len() / dst_w;
        let mut hits = Vec::with_capacity(rows);
        let mut a = Vec::with_capacity(rows * src_w);
        let mut y = Vec::with_capacity(rows * dst_w);
        for k in 0..taps {
            hits.clear();
            a.clear();
            for r in 0..rows {
                let s = nbr[(r0 + r) * taps + k];
                if s != NONE {
                    hits.push(r);
                    a.extend_from_slice(&src[s as usize * src_w..][..src_w]);
                }
            }
            if hits.is_empty() {
                continue;
            }
            y.clear();
            y.resize(hits.len() * dst_w, T::zero());
            T::gemm(
                hits.len(),
                src_w,
                dst_w,
                (&a, src_w, 1),
                mat(k),
                T::zero(),
                (&mut y, dst_w, 1),
            );
            for (row, &r) in y.chunks_exact(dst_w).zip(&hits) {
                for (o, &v) in d[r * dst_w..][..dst_w].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
    });
}

/// Gathers input rows along each tap's pairs, multiplies by that tap's
/// `C_in x C_out` matrix, and scatter-adds into the rulebook's output rows.
pub fn sparse_conv_forward<T: Real>(
    input: &SparseTensor<T>,
    w: &KernelWeights<T>,
    rb: &Rulebook,
) -> Result<SparseTensor<T>> {
    check("sparse_conv_forward", input, w, rb)?;
    let (cin, cout, taps) = (w.spec.in_channels, w.spec.out_channels, rb.taps());
    let mut out = vec![T::zero(); rb.n_out() * cout];
    if let Some(bias) = &w.bias {
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
    }
    accumulate(&mut out, cout, input.feats(), cin, rb.out_nbr(), taps, |k| {
        (w.tap(k), cout, 1)
    });
    Ok(SparseTensor::from_parts_unchecked(
        rb.out_coords().to_vec(),
        out,
        cout,
        rb.out_shape(),
    ))
}

/// Adjoint of [`sparse_conv_forward`]: every pair list is walked in reverse.
pub fn sparse_conv_backward<T: Real>(
    grad_out: &[T],
    cached_input: &SparseTensor<T>,
    w: &KernelWeights<T>,
    rb: &Rulebook,
) -> Result<SparseConvGrads<T>> {
    check("sparse_conv_backward", cached_input, w, rb)?;
    let (cin, cout, taps) = (w.spec.in_channels, w.spec.out_channels, rb.taps());
    if grad_out.len() != rb.n_out() * cout {
        return Err(Error::shape(
            "sparse_conv_backward",
            "grad_out rows*channels",
            rb.n_out() * cout,
            grad_out.len(),
        ));
    }
    let x = cached_input.feats();

    let mut grad_in = vec![T::zero(); rb.n_in() * cin];
    accumulate(&mut grad_in, cin, grad_out, cout, rb.in_nbr(), taps, |k| {
        (w.tap(k), 1, cout)
    });

    let mut grad_w = vec![T::zero(); w.weights.len()];
    grad_w
        .par_chunks_mut(cin * cout)
        .zip(rb.pairs().par_iter())
        .for_each(|(dst, pairs)| {
            if pairs.is_empty() {
                return;
            }
            let mut a = Vec::with_capacity(pairs.len() * cin);
            let mut g = Vec::with_capacity(pairs.len() * cout);
            for &(i, o) in pairs {
                a.extend_from_slice(&x[i as usize * cin..][..cin]);
                g.extend_from_slice(&grad_out[o as usize * cout..][..cout]);
            }
            T::gemm(
                cin,
                pairs.len(),
                cout,
                (&a, 1, cin),
                (&g, cout, 1),
                T::zero(),
                (dst, cout, 1),
            );
        });

    let grad_b = w.bias.as_ref().map(|_| {
        let mut sums = vec![T::zero(); cout];
        for row in grad_out.chunks_exact(cout) {
            for (s, &g) in sums.iter_mut().zip(row) {
                *s += g;
            }
        }
        sums
    });

    Ok(SparseConvGrads {
        input: grad_in,
        params: KernelWeights {
            spec: w.spec,
            weights: grad_w,
            bias: grad_b,
        },
    })
}

/// Upsampling convolution onto an explicit coordinate table, normally the
/// cached table of the matching encoder level. Returns the output together with
/// the rulebook, which the backward pass reuses.
pub fn sparse_transposed_conv<T: Real>(
    input: &SparseTensor<T>,
    w: &KernelWeights<T>,
    target_coords: &[Coord],
    target_shape: [usize; 4],
) -> Result<(SparseTensor<T>, Rulebook)> {
    let rb = build_transposed_rulebook(input, &w.spec, target_coords, target_shape)?;
    let out = sparse_conv_forward(input, w, &rb)?;
    Ok((out, rb))
}

pub fn sparse_transposed_conv_backward<T: Real>(
    grad_out: &[T],
    cached_input: &SparseTensor<T>,
    w: &KernelWeights<T>,
    rb: &Rulebook,
) -> Result<SparseConvGrads<T>> {
    sparse_conv_backward(grad_out, cached_input, w, rb)
}

/// Sites reached by upsampling `input` through `spec`, restricted to `target_shape`.
pub fn upsample_reach<T: Real>(
    input: &SparseTensor<T>,
    spec: &crate::tensor::ConvSpec,
    target_shape: [usize; 4],
) -> Vec<Coord> {
    transposed_reach(input.coords(), spec, target_shape)
}
