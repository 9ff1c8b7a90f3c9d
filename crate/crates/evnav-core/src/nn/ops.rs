//! Numeric kernels for the sparse layers.
//!
//! Feature buffers are site-major slices (`n_sites * channels` values) as
//! stored by [`crate::sparse::SparseTensor`]. Kernels are plain functions so
//! forward passes, gradients, and test oracles all share one implementation.

use crate::error::{Error, Result};
use crate::nn::rulebook::{ConvRulebook, PoolRulebook};
use crate::scalar::Scalar;

/// 3x3 convolution kernel layout: `w[(k * cin + ci) * cout + co]` where `k`
/// indexes [`crate::nn::rulebook::KERNEL_OFFSETS`].
pub fn conv_weight_len(cin: usize, cout: usize) -> usize {
    9 * cin * cout
}

pub fn conv_forward<T: Scalar>(
    rb: &ConvRulebook,
    x: &[T],
    cin: usize,
    cout: usize,
    w: &[T],
    b: &[T],
) -> Vec<T> {
    debug_assert_eq!(x.len(), rb.n_sites * cin);
    debug_assert_eq!(w.len(), conv_weight_len(cin, cout));
    debug_assert_eq!(b.len(), cout);
    let mut out = vec![T::zero(); rb.n_sites * cout];
    for oi in 0..rb.n_sites {
        out[oi * cout..(oi + 1) * cout].copy_from_slice(b);
    }
    for (k, pairs) in rb.pairs.iter().enumerate() {
        let w_tap = &w[k * cin * cout..(k + 1) * cin * cout];
        for &(ii, oi) in pairs {
            let xs = &x[ii as usize * cin..(ii as usize + 1) * cin];
            let os = &mut out[oi as usize * cout..(oi as usize + 1) * cout];
            for (ci, &xv) in xs.iter().enumerate() {
                let wr = &w_tap[ci * cout..(ci + 1) * cout];
                for (ov, &wv) in os.iter_mut().zip(wr) {
                    *ov += xv * wv;
                }
            }
        }
    }
    out
}

pub fn conv_backward_input<T: Scalar>(
    rb: &ConvRulebook,
    g_out: &[T],
    cin: usize,
    cout: usize,
    w: &[T],
) -> Vec<T> {
    let mut g_in = vec![T::zero(); rb.n_sites * cin];
    for (k, pairs) in rb.pairs.iter().enumerate() {
        let w_tap = &w[k * cin * cout..(k + 1) * cin * cout];
        for &(ii, oi) in pairs {
            let gs = &g_out[oi as usize * cout..(oi as usize + 1) * cout];
            let gi = &mut g_in[ii as usize * cin..(ii as usize + 1) * cin];
            for (ci, giv) in gi.iter_mut().enumerate() {
                let wr = &w_tap[ci * cout..(ci + 1) * cout];
                let mut acc = T::zero();
                for (&gv, &wv) in gs.iter().zip(wr) {
                    acc += gv * wv;
                }
                *giv += acc;
            }
        }
    }
    g_in
}

pub fn conv_accumulate_param_grads<T: Scalar>(
    rb: &ConvRulebook,
    x: &[T],
    g_out: &[T],
    cin: usize,
    cout: usize,
    g_w: &mut [T],
    g_b: &mut [T],
) {
    debug_assert_eq!(g_w.len(), conv_weight_len(cin, cout));
    debug_assert_eq!(g_b.len(), cout);
    for (k, pairs) in rb.pairs.iter().enumerate() {
        let gw_tap = &mut g_w[k * cin * cout..(k + 1) * cin * cout];
        for &(ii, oi) in pairs {
            let xs = &x[ii as usize * cin..(ii as usize + 1) * cin];
            let gs = &g_out[oi as usize * cout..(oi as usize + 1) * cout];
            for (ci, &xv) in xs.iter().enumerate() {
                let gw_row = &mut gw_tap[ci * cout..(ci + 1) * cout];
                for (gw, &gv) in gw_row.iter_mut().zip(gs) {
                    *gw += xv * gv;
                }
            }
        }
    }
    for oi in 0..rb.n_sites {
        let gs = &g_out[oi * cout..(oi + 1) * cout];
        for (gb, &gv) in g_b.iter_mut().zip(gs) {
            *gb += gv;
        }
    }
}

/// Max over present input sites per 2x2 field and channel. Returns the
/// pooled buffer and, per output value, the winning input site index (ties
/// go to the lowest site index).
pub fn pool_forward<T: Scalar>(rb: &PoolRulebook, x: &[T], ch: usize) -> (Vec<T>, Vec<u32>) {
    let n_out = rb.out_sites.len();
    let mut out = vec![T::zero(); n_out * ch];
    let mut argmax = vec![0u32; n_out * ch];
    for oi in 0..n_out {
        let field =
            &rb.field_items[rb.field_start[oi] as usize..rb.field_start[oi + 1] as usize];
        for c in 0..ch {
            let mut best = x[field[0] as usize * ch + c];
            let mut best_site = field[0];
            for &ii in &field[1..] {
                let v = x[ii as usize * ch + c];
                if v > best {
                    best = v;
                    best_site = ii;
                }
            }
            out[oi * ch + c] = best;
            argmax[oi * ch + c] = best_site;
        }
    }
    (out, argmax)
}

pub fn pool_backward<T: Scalar>(
    g_out: &[T],
    argmax: &[u32],
    ch: usize,
    n_in_sites: usize,
) -> Vec<T> {
    let mut g_in = vec![T::zero(); n_in_sites * ch];
    for (j, &g) in g_out.iter().enumerate() {
        let c = j % ch;
        g_in[argmax[j] as usize * ch + c] += g;
    }
    g_in
}

#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub invstd: Vec<T>,
    /// Active-site count contributing per channel.
    pub n: usize,
}

/// Per-channel mean and biased variance over all active-site values across a
/// batch of feature buffers.
pub fn bn_stats<T: Scalar>(buffers: &[&[T]], ch: usize, eps: T) -> Result<BnStats<T>> {
    let n: usize = buffers.iter().map(|b| b.len() / ch).sum();
    if n == 0 {
        return Err(Error::Statistics(
            "batch norm over zero active sites".to_string(),
        ));
    }
    let inv_n = T::one() / T::from_usize(n);
    let mut mean = vec![T::zero(); ch];
    for buf in buffers {
        for site in buf.chunks_exact(ch) {
            for (m, &v) in mean.iter_mut().zip(site) {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m *= inv_n;
    }
    let mut var = vec![T::zero(); ch];
    for buf in buffers {
        for site in buf.chunks_exact(ch) {
            for (c, &v) in site.iter().enumerate() {
                let d = v - mean[c];
                var[c] += d * d;
            }
        }
    }
    for v in &mut var {
        *v *= inv_n;
    }
    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    Ok(BnStats {
        mean,
        var,
        invstd,
        n,
    })
}

pub fn bn_apply<T: Scalar>(
    x: &[T],
    ch: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (site_out, site_in) in out.chunks_exact_mut(ch).zip(x.chunks_exact(ch)) {
        for c in 0..ch {
            site_out[c] = (site_in[c] - mean[c]) * invstd[c] * gamma[c] + beta[c];
        }
    }
    out
}

/// Batch-norm backward over the whole batch: returns per-buffer input
/// gradients plus gamma/beta gradients.
#[allow(clippy::type_complexity)]
pub fn bn_backward_batch<T: Scalar>(
    xs: &[&[T]],
    g_ys: &[&[T]],
    ch: usize,
    stats: &BnStats<T>,
    gamma: &[T],
) -> (Vec<Vec<T>>, Vec<T>, Vec<T>) {
    let inv_n = T::one() / T::from_usize(stats.n);
    let mut sum_gy = vec![T::zero(); ch];
    let mut sum_gy_xhat = vec![T::zero(); ch];
    for (x, gy) in xs.iter().zip(g_ys) {
        for (xs_site, gy_site) in x.chunks_exact(ch).zip(gy.chunks_exact(ch)) {
            for c in 0..ch {
                let xhat = (xs_site[c] - stats.mean[c]) * stats.invstd[c];
                sum_gy[c] += gy_site[c];
                sum_gy_xhat[c] += gy_site[c] * xhat;
            }
        }
    }
    let g_beta = sum_gy.clone();
    let g_gamma = sum_gy_xhat.clone();
    let mut g_xs = Vec::with_capacity(xs.len());
    for (x, gy) in xs.iter().zip(g_ys) {
        let mut g_x = vec![T::zero(); x.len()];
        for ((gx_site, x_site), gy_site) in g_x
            .chunks_exact_mut(ch)
            .zip(x.chunks_exact(ch))
            .zip(gy.chunks_exact(ch))
        {
            for c in 0..ch {
                let xhat = (x_site[c] - stats.mean[c]) * stats.invstd[c];
                gx_site[c] = gamma[c]
                    * stats.invstd[c]
                    * (gy_site[c] - sum_gy[c] * inv_n - xhat * sum_gy_xhat[c] * inv_n);
            }
        }
        g_xs.push(g_x);
    }
    (g_xs, g_gamma, g_beta)
}

/// `weight` is row-major `nout x nin`.
pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], nin: usize, nout: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), nin);
    debug_assert_eq!(w.len(), nin * nout);
    debug_assert_eq!(b.len(), nout);
    let mut out = b.to_vec();
    for (o, ov) in out.iter_mut().enumerate() {
        let row = &w[o * nin..(o + 1) * nin];
        let mut acc = T::zero();
        for (&wv, &xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *ov += acc;
    }
    out
}

pub fn linear_backward_input<T: Scalar>(g_y: &[T], w: &[T], nin: usize, nout: usize) -> Vec<T> {
    let mut g_x = vec![T::zero(); nin];
    for o in 0..nout {
        let row = &w[o * nin..(o + 1) * nin];
        let g = g_y[o];
        for (gx, &wv) in g_x.iter_mut().zip(row) {
            *gx += g * wv;
        }
    }
    g_x
}

pub fn linear_accumulate_param_grads<T: Scalar>(
    x: &[T],
    g_y: &[T],
    nin: usize,
    g_w: &mut [T],
    g_b: &mut [T],
) {
    for (o, &g) in g_y.iter().enumerate() {
        let gw_row = &mut g_w[o * nin..(o + 1) * nin];
        for (gw, &xv) in gw_row.iter_mut().zip(x) {
            *gw += g * xv;
        }
        g_b[o] += g;
    }
}

pub fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub fn sigmoid<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| T::one() / (T::one() + (-v).exp()))
        .collect()
}

pub fn tanh<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.tanh()).collect()
}
