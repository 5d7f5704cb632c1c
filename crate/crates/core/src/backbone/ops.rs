//! Forward and backward kernels for the handful of 3D layers the backbone
//! uses. Weights are stored row-major:
//!
//! - `conv3`: `[co][ci][3][3][3]`, stride 1, zero padding 1
//! - `conv1`: `[co][ci]`
//! - `down2`: `[co][ci][2][2][2]`, stride 2
//! - `up2`:   `[ci][co][2][2][2]`, transposed, stride 2

use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;

/// Output positions `p` for which `p + offset` stays inside `0..len`.
#[inline]
fn valid(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

#[inline]
fn row3(out: &mut [f64], inp: &[f64], w: &[f64]) {
    let n = out.len();
    let (w0, w1, w2) = (w[0], w[1], w[2]);
    if n == 1 {
        out[0] += w1 * inp[0];
        return;
    }
    out[0] += w1 * inp[0] + w2 * inp[1];
    out[n - 1] += w0 * inp[n - 2] + w1 * inp[n - 1];
    let mid = &mut out[1..n - 1];
    for (((o, a), b), c) in mid.iter_mut().zip(&inp[..n - 2]).zip(&inp[1..n - 1]).zip(&inp[2..]) {
        *o += w0 * a + w1 * b + w2 * c;
    }
}

#[inline]
fn row3_transpose(gin: &mut [f64], gout: &[f64], w: &[f64]) {
    let n = gin.len();
    let (w0, w1, w2) = (w[0], w[1], w[2]);
    if n == 1 {
        gin[0] += w1 * gout[0];
        return;
    }
    gin[0] += w0 * gout[1] + w1 * gout[0];
    gin[n - 1] += w1 * gout[n - 1] + w2 * gout[n - 2];
    let mid = &mut gin[1..n - 1];
    for (((g, a), b), c) in mid.iter_mut().zip(&gout[2..]).zip(&gout[1..n - 1]).zip(&gout[..n - 2]) {
        *g += w0 * a + w1 * b + w2 * c;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn row3_weight_grad(gout: &[f64], inp: &[f64], gw: &mut [f64]) {
    let n = gout.len();
    gw[1] += dot(gout, inp);
    if n > 1 {
        gw[0] += dot(&gout[1..], &inp[..n - 1]);
        gw[2] += dot(&gout[..n - 1], &inp[1..]);
    }
}

pub fn conv3_forward(input: &Tensor, w: &[f64], b: &[f64], co: usize) -> Tensor {
    let ci = input.channels;
    let [d, h, wd] = input.dims;
    debug_assert_eq!(w.len(), co * ci * 27);
    let mut out = Tensor::zeros(co, input.dims);
    for o in 0..co {
        let out_o = out.plane_mut(o);
        out_o.fill(b[o]);
        for i in 0..ci {
            let in_i = input.plane(i);
            for kd in 0..3 {
                let dz = kd as isize - 1;
                let (z0, z1) = valid(d, dz);
                for kh in 0..3 {
                    let dy = kh as isize - 1;
                    let (y0, y1) = valid(h, dy);
                    let wk = &w[(((o * ci + i) * 3 + kd) * 3 + kh) * 3..][..3];
                    for z in z0..z1 {
                        let zi = (z as isize + dz) as usize;
                        for y in y0..y1 {
                            let yi = (y as isize + dy) as usize;
                            let orow = &mut out_o[(z * h + y) * wd..][..wd];
                            let irow = &in_i[(zi * h + yi) * wd..][..wd];
                            row3(orow, irow, wk);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// requested.
pub fn conv3_backward(
    input: &Tensor,
    w: &[f64],
    gout: &Tensor,
    gw: &mut [f64],
    gb: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let ci = input.channels;
    let co = gout.channels;
    let [d, h, wd] = input.dims;
    let mut gin = need_input_grad.then(|| Tensor::zeros(ci, input.dims));
    for o in 0..co {
        let g_o = gout.plane(o);
        gb[o] += g_o.iter().sum::<f64>();
        for i in 0..ci {
            let in_i = input.plane(i);
            for kd in 0..3 {
                let dz = kd as isize - 1;
                let (z0, z1) = valid(d, dz);
                for kh in 0..3 {
                    let dy = kh as isize - 1;
                    let (y0, y1) = valid(h, dy);
                    let base = (((o * ci + i) * 3 + kd) * 3 + kh) * 3;
                    let wk = &w[base..base + 3];
                    let gwk = &mut gw[base..base + 3];
                    for z in z0..z1 {
                        let zi = (z as isize + dz) as usize;
                        for y in y0..y1 {
                            let yi = (y as isize + dy) as usize;
                            let grow = &g_o[(z * h + y) * wd..][..wd];
                            let irow = &in_i[(zi * h + yi) * wd..][..wd];
                            row3_weight_grad(grow, irow, gwk);
                        }
                    }
                    if let Some(gin) = gin.as_mut() {
                        let gin_i = gin.plane_mut(i);
                        for z in z0..z1 {
                            let zi = (z as isize + dz) as usize;
                            for y in y0..y1 {
                                let yi = (y as isize + dy) as usize;
                                let grow = &g_o[(z * h + y) * wd..][..wd];
                                let girow = &mut gin_i[(zi * h + yi) * wd..][..wd];
                                row3_transpose(girow, grow, wk);
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

pub fn conv1_forward(input: &Tensor, w: &[f64], b: &[f64], co: usize) -> Tensor {
    let ci = input.channels;
    let mut out = Tensor::zeros(co, input.dims);
    for o in 0..co {
        let out_o = out.plane_mut(o);
        out_o.fill(b[o]);
        for i in 0..ci {
            let wv = w[o * ci + i];
            for (y, x) in out_o.iter_mut().zip(input.plane(i)) {
                *y += wv * x;
            }
        }
    }
    out
}

pub fn conv1_backward(
    input: &Tensor,
    w: &[f64],
    gout: &Tensor,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Tensor {
    let ci = input.channels;
    let co = gout.channels;
    let mut gin = Tensor::zeros(ci, input.dims);
    for o in 0..co {
        let g_o = gout.plane(o);
        gb[o] += g_o.iter().sum::<f64>();
        for i in 0..ci {
            gw[o * ci + i] += dot(g_o, input.plane(i));
            let wv = w[o * ci + i];
            for (g, go) in gin.plane_mut(i).iter_mut().zip(g_o) {
                *g += wv * go;
            }
        }
    }
    gin
}

pub fn down2_forward(input: &Tensor, w: &[f64], b: &[f64], co: usize) -> Tensor {
    let ci = input.channels;
    let [d, h, wd] = input.dims;
    let od = [d / 2, h / 2, wd / 2];
    let mut out = Tensor::zeros(co, od);
    for o in 0..co {
        let out_o = out.plane_mut(o);
        out_o.fill(b[o]);
        for i in 0..ci {
            let in_i = input.plane(i);
            for a in 0..2 {
                for bb in 0..2 {
                    let base = (((o * ci + i) * 2 + a) * 2 + bb) * 2;
                    let (w0, w1) = (w[base], w[base + 1]);
                    for z in 0..od[0] {
                        for y in 0..od[1] {
                            let orow = &mut out_o[(z * od[1] + y) * od[2]..][..od[2]];
                            let irow = &in_i[((2 * z + a) * h + 2 * y + bb) * wd..][..wd];
                            for (ov, pair) in orow.iter_mut().zip(irow.chunks_exact(2)) {
                                *ov += w0 * pair[0] + w1 * pair[1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn down2_backward(
    input: &Tensor,
    w: &[f64],
    gout: &Tensor,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Tensor {
    let ci = input.channels;
    let co = gout.channels;
    let [_, h, wd] = input.dims;
    let od = gout.dims;
    let mut gin = Tensor::zeros(ci, input.dims);
    for o in 0..co {
        let g_o = gout.plane(o);
        gb[o] += g_o.iter().sum::<f64>();
        for i in 0..ci {
            let in_i = input.plane(i);
            for a in 0..2 {
                for bb in 0..2 {
                    let base = (((o * ci + i) * 2 + a) * 2 + bb) * 2;
                    let (w0, w1) = (w[base], w[base + 1]);
                    let (mut s0, mut s1) = (0.0, 0.0);
                    for z in 0..od[0] {
                        for y in 0..od[1] {
                            let grow = &g_o[(z * od[1] + y) * od[2]..][..od[2]];
                            let off = ((2 * z + a) * h + 2 * y + bb) * wd;
                            let irow = &in_i[off..off + wd];
                            for (g, pair) in grow.iter().zip(irow.chunks_exact(2)) {
                                s0 += g * pair[0];
                                s1 += g * pair[1];
                            }
                            let girow = &mut gin.plane_mut(i)[off..off + wd];
                            for (g, pair) in grow.iter().zip(girow.chunks_exact_mut(2)) {
                                pair[0] += w0 * g;
                                pair[1] += w1 * g;
                            }
                        }
                    }
                    gw[base] += s0;
                    gw[base + 1] += s1;
                }
            }
        }
    }
    gin
}

pub fn up2_forward(input: &Tensor, w: &[f64], b: &[f64], co: usize) -> Tensor {
    let ci = input.channels;
    let [d, h, wd] = input.dims;
    let od = [2 * d, 2 * h, 2 * wd];
    let mut out = Tensor::zeros(co, od);
    for o in 0..co {
        let out_o = out.plane_mut(o);
        out_o.fill(b[o]);
        for i in 0..ci {
            let in_i = input.plane(i);
            for a in 0..2 {
                for bb in 0..2 {
                    let base = (((i * co + o) * 2 + a) * 2 + bb) * 2;
                    let (w0, w1) = (w[base], w[base + 1]);
                    for z in 0..d {
                        for y in 0..h {
                            let irow = &in_i[(z * h + y) * wd..][..wd];
                            let orow = &mut out_o[((2 * z + a) * od[1] + 2 * y + bb) * od[2]..][..od[2]];
                            for (pair, x) in orow.chunks_exact_mut(2).zip(irow) {
                                pair[0] += w0 * x;
                                pair[1] += w1 * x;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn up2_backward(
    input: &Tensor,
    w: &[f64],
    gout: &Tensor,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Tensor {
    let ci = input.channels;
    let co = gout.channels;
    let [d, h, wd] = input.dims;
    let od = gout.dims;
    let mut gin = Tensor::zeros(ci, input.dims);
    for o in 0..co {
        let g_o = gout.plane(o);
        gb[o] += g_o.iter().sum::<f64>();
        for i in 0..ci {
            let in_i = input.plane(i);
            for a in 0..2 {
                for bb in 0..2 {
                    let base = (((i * co + o) * 2 + a) * 2 + bb) * 2;
                    let (w0, w1) = (w[base], w[base + 1]);
                    let (mut s0, mut s1) = (0.0, 0.0);
                    for z in 0..d {
                        for y in 0..h {
                            let off = (z * h + y) * wd;
                            let irow = &in_i[off..off + wd];
                            let grow = &g_o[((2 * z + a) * od[1] + 2 * y + bb) * od[2]..][..od[2]];
                            for (pair, x) in grow.chunks_exact(2).zip(irow) {
                                s0 += pair[0] * x;
                                s1 += pair[1] * x;
                            }
                            let girow = &mut gin.plane_mut(i)[off..off + wd];
                            for (g, pair) in girow.iter_mut().zip(grow.chunks_exact(2)) {
                                *g += w0 * pair[0] + w1 * pair[1];
                            }
                        }
                    }
                    gw[base] += s0;
                    gw[base + 1] += s1;
                }
            }
        }
    }
    gin
}

pub fn leaky_relu_inplace(t: &mut Tensor) {
    for v in t.data.iter_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Gradient through a leaky ReLU given its output (the sign is preserved).
pub fn leaky_relu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, y) in grad.data.iter_mut().zip(&output.data) {
        if *y < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

pub fn add_inplace(a: &mut Tensor, b: &Tensor) {
    debug_assert!(a.same_shape(b));
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.channels + b.channels, a.dims, data)
}

pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let n = t.voxels();
    let (a, b) = t.data.split_at(first * n);
    (
        Tensor::from_vec(first, t.dims, a.to_vec()),
        Tensor::from_vec(t.channels - first, t.dims, b.to_vec()),
    )
}

/// Per-voxel softmax over channels.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.channels;
    let n = logits.voxels();
    let mut out = Tensor::zeros(c, logits.dims);
    for v in 0..n {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(logits.data[k * n + v]);
        }
        let mut s = 0.0;
        for k in 0..c {
            let e = (logits.data[k * n + v] - m).exp();
            out.data[k * n + v] = e;
            s += e;
        }
        for k in 0..c {
            out.data[k * n + v] /= s;
        }
    }
    out
}

/// Maps `dL/dp` to `dL/dz` for `p = softmax(z)`.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Tensor {
    let c = probs.channels;
    let n = probs.voxels();
    let mut out = Tensor::zeros(c, probs.dims);
    for v in 0..n {
        let mut inner = 0.0;
        for k in 0..c {
            inner += grad_probs.data[k * n + v] * probs.data[k * n + v];
        }
        for k in 0..c {
            out.data[k * n + v] = probs.data[k * n + v] * (grad_probs.data[k * n + v] - inner);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(c: usize, dims: [usize; 3], seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, &[]);
        let n = c * dims.iter().product::<usize>();
        Tensor::from_vec(c, dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn naive_conv3(input: &Tensor, w: &[f64], b: &[f64], co: usize) -> Tensor {
        let [d, h, wd] = input.dims;
        let mut out = Tensor::zeros(co, input.dims);
        for o in 0..co {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..wd {
                        let mut acc = b[o];
                        for i in 0..input.channels {
                            for kd in 0..3 {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let (zz, yy, xx) = (z + kd, y + kh, x + kw);
                                        if zz < 1 || yy < 1 || xx < 1 || zz > d || yy > h || xx > wd {
                                            continue;
                                        }
                                        let wi = (((o * input.channels + i) * 3 + kd) * 3 + kh) * 3 + kw;
                                        acc += w[wi] * input.get(i, zz - 1, yy - 1, xx - 1);
                                    }
                                }
                            }
                        }
                        let idx = out.index(o, z, y, x);
                        out.data[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3_matches_naive_loops() {
        for dims in [[4, 5, 6], [1, 1, 1], [2, 3, 1]] {
            let input = random(2, dims, 1);
            let w: Vec<f64> = random(3 * 2 * 27, [1, 1, 1], 2).data;
            let b = vec![0.1, -0.2, 0.3];
            let fast = conv3_forward(&input, &w, &b, 3);
            let slow = naive_conv3(&input, &w, &b, 3);
            for (a, e) in fast.data.iter().zip(&slow.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    /// Adjoint identity `<A x, g> = <x, Aᵀ g>` and `∂<A x, g>/∂w` for each
    /// linear layer, checked against directional finite differences.
    fn check_layer(
        fwd: &dyn Fn(&Tensor, &[f64], &[f64]) -> Tensor,
        bwd: &dyn Fn(&Tensor, &[f64], &Tensor, &mut [f64], &mut [f64]) -> Tensor,
        input: Tensor,
        nw: usize,
        nb: usize,
    ) {
        let w = random(nw, [1, 1, 1], 5).data;
        let b = random(nb, [1, 1, 1], 6).data;
        let out = fwd(&input, &w, &b);
        let g = random(out.channels, out.dims, 7);
        let mut gw = vec![0.0; nw];
        let mut gb = vec![0.0; nb];
        let gin = bwd(&input, &w, &g, &mut gw, &mut gb);
        let inner = |t: &Tensor| dot(&t.data, &g.data);
        let base = inner(&out);
        // input adjoint (layer is affine in its input)
        let dx = random(input.channels, input.dims, 8);
        let mut shifted = input.clone();
        add_inplace(&mut shifted, &dx);
        let lhs = inner(&fwd(&shifted, &w, &b)) - base;
        assert!((lhs - dot(&dx.data, &gin.data)).abs() < 1e-9 * (1.0 + lhs.abs()));
        // weights (affine in the weights as well)
        let dw = random(nw, [1, 1, 1], 9).data;
        let w2: Vec<f64> = w.iter().zip(&dw).map(|(a, b)| a + b).collect();
        let lhs = inner(&fwd(&input, &w2, &b)) - base;
        assert!((lhs - dot(&dw, &gw)).abs() < 1e-9 * (1.0 + lhs.abs()));
        let db = random(nb, [1, 1, 1], 10).data;
        let b2: Vec<f64> = b.iter().zip(&db).map(|(a, b)| a + b).collect();
        let lhs = inner(&fwd(&input, &w, &b2)) - base;
        assert!((lhs - dot(&db, &gb)).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn conv3_adjoint() {
        check_layer(
            &|x, w, b| conv3_forward(x, w, b, 3),
            &|x, w, g, gw, gb| conv3_backward(x, w, g, gw, gb, true).unwrap(),
            random(2, [4, 3, 5], 3),
            3 * 2 * 27,
            3,
        );
    }

    #[test]
    fn conv1_adjoint() {
        check_layer(
            &|x, w, b| conv1_forward(x, w, b, 2),
            &|x, w, g, gw, gb| conv1_backward(x, w, g, gw, gb),
            random(3, [2, 2, 2], 3),
            6,
            2,
        );
    }

    #[test]
    fn down2_adjoint() {
        check_layer(
            &|x, w, b| down2_forward(x, w, b, 3),
            &|x, w, g, gw, gb| down2_backward(x, w, g, gw, gb),
            random(2, [4, 6, 2], 3),
            3 * 2 * 8,
            3,
        );
    }

    #[test]
    fn up2_adjoint() {
        check_layer(
            &|x, w, b| up2_forward(x, w, b, 2),
            &|x, w, g, gw, gb| up2_backward(x, w, g, gw, gb),
            random(3, [2, 3, 1], 3),
            3 * 2 * 8,
            2,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = random(3, [2, 2, 2], 11);
        let p = softmax(&z);
        for v in 0..8 {
            let s: f64 = (0..3).map(|k| p.data[k * 8 + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
