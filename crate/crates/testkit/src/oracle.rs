//! Reference implementations. Nothing here calls into the convolution code
//! it checks.

/// Direct cross-correlation with zero padding. `x` is `[B, Cin, T, H, W]`,
/// `w` is `[kt][kh][kw][ci][co]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_oracle(
    x: &[f64],
    dims: [usize; 5],
    w: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [b, cin, t, h, wd] = dims;
    let od = |d: usize, a: usize| (d + 2 * pad[a] - kernel[a]) / stride[a] + 1;
    let (ot, oh, ow) = (od(t, 0), od(h, 1), od(wd, 2));
    let mut out = vec![0.0; b * cout * ot * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for zt in 0..ot {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb[co]);
                        for ci in 0..cin {
                            for kt in 0..kernel[0] {
                                for kh in 0..kernel[1] {
                                    for kw in 0..kernel[2] {
                                        let it = (zt * stride[0] + kt) as isize - pad[0] as isize;
                                        let ih = (zh * stride[1] + kh) as isize - pad[1] as isize;
                                        let iw = (zw * stride[2] + kw) as isize - pad[2] as isize;
                                        if it < 0 || ih < 0 || iw < 0 {
                                            continue;
                                        }
                                        let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                        if it >= t || ih >= h || iw >= wd {
                                            continue;
                                        }
                                        let xi = (((bi * cin + ci) * t + it) * h + ih) * wd + iw;
                                        let tap = (kt * kernel[1] + kh) * kernel[2] + kw;
                                        acc += x[xi] * w[(tap * cin + ci) * cout + co];
                                    }
                                }
                            }
                        }
                        out[(((bi * cout + co) * ot + zt) * oh + zh) * ow + zw] = acc;
                    }
                }
            }
        }
    }
    (out, [b, cout, ot, oh, ow])
}

/// Direct transposed convolution: input site `i` feeds output `i * stride + k - pad`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose3d_oracle(
    x: &[f64],
    dims: [usize; 5],
    w: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out_sp: [usize; 3],
) -> Vec<f64> {
    let [b, cin, t, h, wd] = dims;
    let [ot, oh, ow] = out_sp;
    let mut out = vec![0.0; b * cout * ot * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for zt in 0..ot {
                for zh in 0..oh {
                    for zw in 0..ow {
                        out[(((bi * cout + co) * ot + zt) * oh + zh) * ow + zw] = bias.map_or(0.0, |bb| bb[co]);
                    }
                }
            }
        }
        for ci in 0..cin {
            for it in 0..t {
                for ih in 0..h {
                    for iw in 0..wd {
                        let xv = x[(((bi * cin + ci) * t + it) * h + ih) * wd + iw];
                        for kt in 0..kernel[0] {
                            for kh in 0..kernel[1] {
                                for kw in 0..kernel[2] {
                                    let zt = (it * stride[0] + kt) as isize - pad[0] as isize;
                                    let zh = (ih * stride[1] + kh) as isize - pad[1] as isize;
                                    let zw = (iw * stride[2] + kw) as isize - pad[2] as isize;
                                    if zt < 0 || zh < 0 || zw < 0 {
                                        continue;
                                    }
                                    let (zt, zh, zw) = (zt as usize, zh as usize, zw as usize);
                                    if zt >= ot || zh >= oh || zw >= ow {
                                        continue;
                                    }
                                    let tap = (kt * kernel[1] + kh) * kernel[2] + kw;
                                    for co in 0..cout {
                                        out[(((bi * cout + co) * ot + zt) * oh + zh) * ow + zw] +=
                                            xv * w[(tap * cin + ci) * cout + co];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Window-2 stride-2 max pool with floor coordinates, by explicit window scan.
pub fn maxpool_oracle(x: &[f64], dims: [usize; 5]) -> (Vec<f64>, [usize; 5]) {
    let [b, c, t, h, w] = dims;
    let (pt, ph, pw) = (t.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(b * c * pt * ph * pw);
    for p in 0..b * c {
        for zt in 0..pt {
            for zh in 0..ph {
                for zw in 0..pw {
                    let mut best = f64::NEG_INFINITY;
                    for it in 2 * zt..(2 * zt + 2).min(t) {
                        for ih in 2 * zh..(2 * zh + 2).min(h) {
                            for iw in 2 * zw..(2 * zw + 2).min(w) {
                                best = best.max(x[((p * t + it) * h + ih) * w + iw]);
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    (out, [b, c, pt, ph, pw])
}

/// Central finite difference of `f` with respect to every entry of `params`.
pub fn finite_diff(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Asserts `|a - n| <= tol * max(|a|, |n|)`, with an absolute floor for
/// entries whose true gradient is (numerically) zero.
pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        assert!(
            diff <= tol * scale || diff <= 1e-9,
            "{what}[{i}]: analytic {a} vs numeric {n} (diff {diff})"
        );
    }
}

pub fn assert_rel_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let diff = (x - y).abs();
        assert!(
            diff <= tol * x.abs().max(y.abs()).max(1e-12) || diff <= 1e-12,
            "{what}[{i}]: {x} vs {y}"
        );
    }
}

/// Weighted-sum loss `sum(out * proj)` used to probe gradients.
pub fn project(out: &[f64], proj: &[f64]) -> f64 {
    out.iter().zip(proj).map(|(a, b)| a * b).sum()
}
