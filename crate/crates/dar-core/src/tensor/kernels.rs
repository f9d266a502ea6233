//! Raw numeric kernels behind the tape operations.
//!
//! Heavy kernels (matmul, conv) parallelize over disjoint output chunks via
//! [`crate::par`]; every output element is computed by the same fixed-order
//! loop in both modes, so results are bitwise identical with and without the
//! `parallel` feature. `*_acc` kernels add into their output buffer.

use super::Scalar;
use crate::par;

/// out[m,n] = a[m,k] · b[k,n]
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(out.len(), m * n);
    par::for_each_chunk_mut(out, n, |i, row| {
        row.fill(F::zero());
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    });
}

/// out[m,n] = a[m,k] · b[k,n] with each output element summed in ascending
/// value order. The summation result then depends only on the multiset of
/// addends, which makes attention aggregation bitwise invariant under
/// permutations of the key/value rows.
pub fn matmul_value_sorted<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(out.len(), m * n);
    par::for_each_chunk_mut(out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        let mut buf: Vec<F> = vec![F::zero(); k];
        for (j, o) in row.iter_mut().enumerate() {
            for p in 0..k {
                buf[p] = arow[p] * b[p * n + j];
            }
            buf.sort_unstable_by(|x, y| x.total_order(*y));
            let mut s = F::zero();
            for &v in buf.iter() {
                s += v;
            }
            *o = s;
        }
    });
}

/// da[m,k] += g[m,n] · bᵀ  (b is [k,n])
pub fn matmul_acc_nt<F: Scalar>(g: &[F], b: &[F], _m: usize, k: usize, n: usize, da: &mut [F]) {
    par::for_each_chunk_mut(da, k, |i, row| {
        let grow = &g[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *o += s;
        }
    });
}

/// db[k,n] += aᵀ · g  (a is [m,k], g is [m,n])
pub fn matmul_acc_tn<F: Scalar>(a: &[F], g: &[F], m: usize, k: usize, n: usize, db: &mut [F]) {
    par::for_each_chunk_mut(db, n, |p, row| {
        for i in 0..m {
            let aip = a[i * k + p];
            let grow = &g[i * n..(i + 1) * n];
            for (o, &gv) in row.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    });
}

/// out[n,m] = xᵀ for x[m,n]
pub fn transpose<F: Scalar>(x: &[F], m: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
}

/// Output spatial extent of a conv / pool along one axis.
pub fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Valid output range [lo, hi) along one spatial axis for a kernel offset,
/// i.e. the `o` with `0 <= o*stride + koff - pad < extent`.
fn valid_range(out_extent: usize, extent: usize, stride: usize, pad: usize, koff: usize) -> (usize, usize) {
    let lo = if koff >= pad { 0 } else { (pad - koff + stride - 1) / stride };
    let upper = extent + pad;
    if upper <= koff {
        return (0, 0);
    }
    let hi = ((upper - koff - 1) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

/// Cross-correlation forward: x[b,cin,h,w] * kern[cout,cin,kh,kw] -> out[b,cout,oh,ow].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<F: Scalar>(
    x: &[F],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    kern: &[F],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [F],
    oh: usize,
    ow: usize,
) {
    let in_sz = cin * h * w;
    let out_sz = cout * oh * ow;
    debug_assert_eq!(x.len(), batch * in_sz);
    debug_assert_eq!(out.len(), batch * out_sz);
    par::for_each_chunk_mut(out, out_sz, |b, ob| {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        ob.fill(F::zero());
        for oc in 0..cout {
            let och = &mut ob[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..cin {
                let xch = &xb[ic * h * w..(ic + 1) * h * w];
                let kbase = (oc * cin + ic) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kern[kbase + ky * kw + kx];
                        let (lo, hi) = valid_range(ow, w, stride, pad, kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xch[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut och[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = lo + kx - pad;
                                for (o, &xv) in orow[lo..hi].iter_mut().zip(&xrow[ix0..ix0 + (hi - lo)]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - pad;
                                    orow[ox] += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// dx[b,cin,h,w] += conv2d backward w.r.t. the input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_dx<F: Scalar>(
    dout: &[F],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    kern: &[F],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [F],
    oh: usize,
    ow: usize,
) {
    let in_sz = cin * h * w;
    let out_sz = cout * oh * ow;
    debug_assert_eq!(dx.len(), batch * in_sz);
    par::for_each_chunk_mut(dx, in_sz, |b, dxb| {
        let gb = &dout[b * out_sz..(b + 1) * out_sz];
        for oc in 0..cout {
            let gch = &gb[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..cin {
                let dxch = &mut dxb[ic * h * w..(ic + 1) * h * w];
                let kbase = (oc * cin + ic) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kern[kbase + ky * kw + kx];
                        let (lo, hi) = valid_range(ow, w, stride, pad, kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dxrow = &mut dxch[iy as usize * w..(iy as usize + 1) * w];
                            let grow = &gch[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = lo + kx - pad;
                                for (o, &gv) in dxrow[ix0..ix0 + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                                    *o += wv * gv;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - pad;
                                    dxrow[ix] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// dk[cout,cin,kh,kw] += conv2d backward w.r.t. the kernels.
///
/// Parallel over output channels; the batch reduction inside runs in index
/// order, keeping the result independent of thread count.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_dk<F: Scalar>(
    x: &[F],
    dout: &[F],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dk: &mut [F],
    oh: usize,
    ow: usize,
) {
    let in_sz = cin * h * w;
    let out_sz = cout * oh * ow;
    par::for_each_chunk_mut(dk, cin * kh * kw, |oc, dkc| {
        for b in 0..batch {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let gch = &dout[b * out_sz + oc * oh * ow..b * out_sz + (oc + 1) * oh * ow];
            for ic in 0..cin {
                let xch = &xb[ic * h * w..(ic + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (lo, hi) = valid_range(ow, w, stride, pad, kx);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = F::zero();
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xch[iy as usize * w..(iy as usize + 1) * w];
                            let grow = &gch[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = lo + kx - pad;
                                for (&xv, &gv) in xrow[ix0..ix0 + (hi - lo)].iter().zip(&grow[lo..hi]) {
                                    acc += xv * gv;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - pad;
                                    acc += xrow[ix] * grow[ox];
                                }
                            }
                        }
                        dkc[(ic * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });
}

/// Max pooling; ties resolve to the first maximum in row-major window order.
/// `argmax` receives, per output element, the flat index into `x`.
#[allow(clippy::too_many_arguments)]
pub fn maxpool2d_forward<F: Scalar>(
    x: &[F],
    batch_channels: usize,
    h: usize,
    w: usize,
    win: usize,
    stride: usize,
    out: &mut [F],
    argmax: &mut [usize],
    oh: usize,
    ow: usize,
) {
    for bc in 0..batch_channels {
        let xch = &x[bc * h * w..(bc + 1) * h * w];
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = F::neg_infinity();
                let mut best_idx = 0usize;
                for ky in 0..win {
                    let iy = oy * stride + ky;
                    if iy >= h {
                        break;
                    }
                    for kx in 0..win {
                        let ix = ox * stride + kx;
                        if ix >= w {
                            break;
                        }
                        let v = xch[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                out[bc * oh * ow + oy * ow + ox] = best;
                argmax[bc * oh * ow + oy * ow + ox] = base + best_idx;
            }
        }
    }
}

/// Row softmax with max subtraction. The normalizer sums the exponentials in
/// ascending value order, so rows are bitwise invariant under permutations of
/// their entries.
pub fn softmax_rows<F: Scalar>(x: &[F], rows: usize, cols: usize, out: &mut [F]) {
    let mut buf: Vec<F> = vec![F::zero(); cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut mx = F::neg_infinity();
        for &v in xr {
            if v > mx {
                mx = v;
            }
        }
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mx).exp();
        }
        buf.copy_from_slice(or);
        buf.sort_unstable_by(|a, b| a.total_order(*b));
        let mut denom = F::zero();
        for &v in buf.iter() {
            denom += v;
        }
        for o in or.iter_mut() {
            *o = *o / denom;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 4];
        matmul(&eye, &b, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn conv_extent_rejects_oversized_kernel() {
        assert_eq!(conv_extent(3, 5, 1, 0), None);
        assert_eq!(conv_extent(3, 5, 1, 1), Some(1));
        assert_eq!(conv_extent(32, 3, 1, 1), Some(32));
    }

    #[test]
    fn sorted_matmul_matches_plain() {
        let a = vec![0.5f64, -1.25, 2.0, 0.125, 3.0, -0.75];
        let b = vec![1.5f64, 0.25, -2.0, 0.5, 1.0, -1.0];
        let mut plain = vec![0.0; 4];
        let mut sorted = vec![0.0; 4];
        matmul(&a, &b, 2, 3, 2, &mut plain);
        matmul_value_sorted(&a, &b, 2, 3, 2, &mut sorted);
        for (p, s) in plain.iter().zip(&sorted) {
            assert!((p - s).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f32 / (1u64 << 31) as f32) - 0.5
        };
        let x: Vec<f32> = (0..2 * 3 * 9 * 7).map(|_| next()).collect();
        let k: Vec<f32> = (0..4 * 3 * 3 * 3).map(|_| next()).collect();
        let (oh, ow) = (conv_extent(9, 3, 1, 1).unwrap(), conv_extent(7, 3, 1, 1).unwrap());
        let mut a = vec![0.0f32; 2 * 4 * oh * ow];
        let mut b = vec![0.0f32; 2 * 4 * oh * ow];
        conv2d_forward(&x, 2, 3, 9, 7, &k, 4, 3, 3, 1, 1, &mut a, oh, ow);
        crate::par::set_force_sequential(true);
        conv2d_forward(&x, 2, 3, 9, 7, &k, 4, 3, 3, 1, 1, &mut b, oh, ow);
        crate::par::set_force_sequential(false);
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
