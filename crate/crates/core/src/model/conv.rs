//! Same-padded 3×3 and 1×1 convolution kernels on planar buffers.
//!
//! Loops run over whole rows so the innermost iteration is a contiguous
//! multiply-add the compiler can vectorise. Each output plane is written by
//! exactly one task, so results do not depend on scheduling.

use crate::par;
use crate::tensor::Real;

/// Valid destination span `[lo, hi)` for a tap offset `d ∈ {-1, 0, 1}`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n - 1 } else { n };
    (lo.min(n), hi.max(lo.min(n)))
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `out[o] = bias[o] + Σ_i weight[o,i] ⋆ input[i]`, weight laid out `[cout][cin][3][3]`.
pub fn conv3x3_forward<T: Real>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); cout * hw];
    par::for_each_chunk_mut(&mut out, hw, |o, plane| {
        plane.fill(bias[o]);
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = span(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = span(dx, w);
                    let k = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        axpy(&mut plane[y * w + x0..y * w + x1], srow, k);
                    }
                }
            }
        }
    });
    out
}

/// Gradients of a 3×3 convolution.
///
/// Returns `(d_weight, d_bias, d_input)`; `d_input` is skipped when
/// `want_input` is false.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    dout: &[T],
    cout: usize,
    want_input: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let hw = h * w;
    let per_out = par::map_range(cout, |o| {
        let g = &dout[o * hw..(o + 1) * hw];
        let mut dw = vec![T::zero(); cin * 9];
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = span(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = span(dx, w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        acc = acc
                            + dot(
                                &g[y * w + x0..y * w + x1],
                                &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)],
                            );
                    }
                    dw[(i * 3 + ky) * 3 + kx] = acc;
                }
            }
        }
        let db = g.iter().fold(T::zero(), |a, &v| a + v);
        (dw, db)
    });
    let mut d_weight = Vec::with_capacity(cout * cin * 9);
    let mut d_bias = Vec::with_capacity(cout);
    for (dw, db) in per_out {
        d_weight.extend(dw);
        d_bias.push(db);
    }

    let d_input = want_input.then(|| {
        let mut din = vec![T::zero(); cin * hw];
        par::for_each_chunk_mut(&mut din, hw, |i, plane| {
            for o in 0..cout {
                let g = &dout[o * hw..(o + 1) * hw];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, w);
                        let k = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                        // out[y, x] read in[y+dy, x+dx]: scatter back
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            axpy(
                                &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)],
                                &g[y * w + x0..y * w + x1],
                                k,
                            );
                        }
                    }
                }
            }
        });
        din
    });
    (d_weight, d_bias, d_input)
}

/// Pointwise (1×1) layer, weight laid out `[cout][cin]`.
pub fn conv1x1_forward<T: Real>(
    input: &[T],
    cin: usize,
    hw: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); cout * hw];
    par::for_each_chunk_mut(&mut out, hw, |o, plane| {
        plane.fill(bias[o]);
        for i in 0..cin {
            axpy(plane, &input[i * hw..(i + 1) * hw], weight[o * cin + i]);
        }
    });
    out
}

pub fn conv1x1_backward<T: Real>(
    input: &[T],
    cin: usize,
    hw: usize,
    weight: &[T],
    dout: &[T],
    cout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut d_weight = vec![T::zero(); cout * cin];
    let mut d_bias = vec![T::zero(); cout];
    for o in 0..cout {
        let g = &dout[o * hw..(o + 1) * hw];
        d_bias[o] = g.iter().fold(T::zero(), |a, &v| a + v);
        for i in 0..cin {
            d_weight[o * cin + i] = dot(g, &input[i * hw..(i + 1) * hw]);
        }
    }
    let mut d_input = vec![T::zero(); cin * hw];
    par::for_each_chunk_mut(&mut d_input, hw, |i, plane| {
        for o in 0..cout {
            axpy(plane, &dout[o * hw..(o + 1) * hw], weight[o * cin + i]);
        }
    });
    (d_weight, d_bias, d_input)
}
