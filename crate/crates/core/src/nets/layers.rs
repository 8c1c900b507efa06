//! Forward and backward kernels shared by both networks. Sequences are laid
//! out feature-major: a `(features, frames)` matrix per utterance.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_grad(pre: f64, slope: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        slope
    }
}

/// `W x + b` for every column of `x`.
pub fn affine(w: ArrayView2<f64>, b: ArrayView1<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    let mut y = w.dot(&x);
    y += &b.insert_axis(Axis(1));
    y
}

/// Accumulates parameter gradients of [`affine`] and returns the input gradient.
pub fn affine_backward(
    w: ArrayView2<f64>,
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    mut gw: ArrayViewMut2<f64>,
    mut gb: ArrayViewMut1<f64>,
) -> Array2<f64> {
    gw += &dy.dot(&x.t());
    gb += &dy.sum_axis(Axis(1));
    w.t().dot(&dy)
}

/// State kept from a forward pass of one LSTM direction.
#[derive(Clone, Debug)]
pub struct LstmCache {
    /// Post-activation gates `[i; f; g; o]`, `(4H, N)`.
    gates: Array2<f64>,
    c: Array2<f64>,
    h: Array2<f64>,
    reverse: bool,
}

impl LstmCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.h
    }
}

pub struct LstmWeights<'a> {
    pub w_ih: ArrayView2<'a, f64>,
    pub w_hh: ArrayView2<'a, f64>,
    pub bias: ArrayView1<'a, f64>,
}

fn step_order(n: usize, reverse: bool) -> Vec<usize> {
    if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    }
}

/// Runs one direction over `x` (`(in, N)`). Outputs are stored at their
/// original time index regardless of direction.
pub fn lstm_forward(w: &LstmWeights, x: ArrayView2<f64>, reverse: bool) -> LstmCache {
    let hidden = w.w_hh.ncols();
    let n = x.ncols();
    let pre = affine(w.w_ih, w.bias, x);
    let mut gates = Array2::zeros((4 * hidden, n));
    let mut c = Array2::zeros((hidden, n));
    let mut h = Array2::zeros((hidden, n));
    let mut h_prev = Array1::<f64>::zeros(hidden);
    let mut c_prev = Array1::<f64>::zeros(hidden);
    for t in step_order(n, reverse) {
        let a = &pre.column(t) + &w.w_hh.dot(&h_prev);
        let mut g = gates.column_mut(t);
        for k in 0..hidden {
            let i = sigmoid(a[k]);
            let f = sigmoid(a[hidden + k]);
            let gg = a[2 * hidden + k].tanh();
            let o = sigmoid(a[3 * hidden + k]);
            g[k] = i;
            g[hidden + k] = f;
            g[2 * hidden + k] = gg;
            g[3 * hidden + k] = o;
            let ct = f * c_prev[k] + i * gg;
            c[[k, t]] = ct;
            h[[k, t]] = o * ct.tanh();
        }
        h_prev.assign(&h.column(t));
        c_prev.assign(&c.column(t));
    }
    LstmCache { gates, c, h, reverse }
}

pub struct LstmGrads<'a> {
    pub w_ih: ArrayViewMut2<'a, f64>,
    pub w_hh: ArrayViewMut2<'a, f64>,
    pub bias: ArrayViewMut1<'a, f64>,
}

/// Backpropagation through time for one direction; returns `dL/dx`.
pub fn lstm_backward(
    w: &LstmWeights,
    x: ArrayView2<f64>,
    cache: &LstmCache,
    dh_out: ArrayView2<f64>,
    grads: LstmGrads,
) -> Array2<f64> {
    let hidden = w.w_hh.ncols();
    let n = x.ncols();
    let order = step_order(n, cache.reverse);
    // Previous hidden state seen by each step, for the recurrent weight gradient.
    let mut h_prev_mat = Array2::<f64>::zeros((hidden, n));
    for pair in order.windows(2) {
        h_prev_mat.column_mut(pair[1]).assign(&cache.h.column(pair[0]));
    }
    let mut da_all = Array2::<f64>::zeros((4 * hidden, n));
    let mut dh_next = Array1::<f64>::zeros(hidden);
    let mut dc_next = Array1::<f64>::zeros(hidden);
    for (pos, &t) in order.iter().enumerate().rev() {
        let g = cache.gates.column(t);
        let mut da = da_all.column_mut(t);
        for k in 0..hidden {
            let (i, f, gg, o) = (g[k], g[hidden + k], g[2 * hidden + k], g[3 * hidden + k]);
            let ct = cache.c[[k, t]];
            let c_prev = if pos > 0 { cache.c[[k, order[pos - 1]]] } else { 0.0 };
            let tc = ct.tanh();
            let dh = dh_out[[k, t]] + dh_next[k];
            let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
            da[k] = dc * gg * i * (1.0 - i);
            da[hidden + k] = dc * c_prev * f * (1.0 - f);
            da[2 * hidden + k] = dc * i * (1.0 - gg * gg);
            da[3 * hidden + k] = dh * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        dh_next = w.w_hh.t().dot(&da);
    }
    let LstmGrads {
        mut w_ih,
        mut w_hh,
        mut bias,
    } = grads;
    w_ih += &da_all.dot(&x.t());
    w_hh += &da_all.dot(&h_prev_mat.t());
    bias += &da_all.sum_axis(Axis(1));
    w.w_ih.t().dot(&da_all)
}

/// Geometry of a stride-1, zero-padded ("same") square convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Frames per im2col chunk so that the patch matrix stays cache-sized.
fn chunk_frames(shape: &ConvShape, bins: usize, frames: usize) -> usize {
    let budget = 1usize << 18;
    (budget / (shape.patch_len() * bins).max(1)).clamp(1, frames.max(1))
}

/// Output frames `n0..n1` whose source frame `n + kx - pad` is in range,
/// as (first output frame, count).
fn valid_span(n0: usize, n1: usize, kx: usize, pad: usize, frames: usize) -> (usize, usize) {
    let lo = n0.max(pad.saturating_sub(kx));
    let hi = n1.min((frames + pad).saturating_sub(kx));
    (lo, hi.saturating_sub(lo))
}

/// Patch matrix for output frames `n0..n1`: rows `(c, ky, kx)`, columns
/// `(f, n - n0)`.
fn im2col(input: &Array3<f64>, shape: &ConvShape, n0: usize, n1: usize) -> Array2<f64> {
    let (_, bins, frames) = input.dim();
    let width = n1 - n0;
    let k = shape.kernel;
    let pad = k / 2;
    let mut cols = Array2::<f64>::zeros((shape.patch_len(), bins * width));
    for c in 0..shape.in_channels {
        let plane = input.index_axis(Axis(0), c);
        for ky in 0..k {
            let (f_lo, f_hi) = (pad.saturating_sub(ky), (bins + pad).saturating_sub(ky).min(bins));
            for kx in 0..k {
                let (lo, count) = valid_span(n0, n1, kx, pad, frames);
                if count == 0 {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("contiguous row");
                for f in f_lo..f_hi {
                    let src = plane.row(f + ky - pad);
                    let src = src.as_slice().expect("contiguous plane");
                    let start = f * width + lo - n0;
                    let s0 = lo + kx - pad;
                    dst[start..start + count].copy_from_slice(&src[s0..s0 + count]);
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &Array2<f64>, shape: &ConvShape, n0: usize, n1: usize, dinput: &mut Array3<f64>) {
    let (_, bins, frames) = dinput.dim();
    let width = n1 - n0;
    let k = shape.kernel;
    let pad = k / 2;
    for c in 0..shape.in_channels {
        let mut plane = dinput.index_axis_mut(Axis(0), c);
        for ky in 0..k {
            let (f_lo, f_hi) = (pad.saturating_sub(ky), (bins + pad).saturating_sub(ky).min(bins));
            for kx in 0..k {
                let (lo, count) = valid_span(n0, n1, kx, pad, frames);
                if count == 0 {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let src = dcols.row(row);
                let src = src.as_slice().expect("contiguous row");
                for f in f_lo..f_hi {
                    let mut dst = plane.row_mut(f + ky - pad);
                    let dst = dst.as_slice_mut().expect("contiguous plane");
                    let start = f * width + lo - n0;
                    let d0 = lo + kx - pad;
                    for (d, v) in dst[d0..d0 + count].iter_mut().zip(&src[start..start + count]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Same-padded convolution; `weight` is `(out, in * k * k)`.
pub fn conv2d_forward(
    input: &Array3<f64>,
    weight: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    shape: &ConvShape,
) -> Array3<f64> {
    let (_, bins, frames) = input.dim();
    let mut out = Array3::<f64>::zeros((shape.out_channels, bins, frames));
    let step = chunk_frames(shape, bins, frames);
    let mut n0 = 0;
    while n0 < frames {
        let n1 = (n0 + step).min(frames);
        let cols = im2col(input, shape, n0, n1);
        let y = weight.dot(&cols);
        let width = n1 - n0;
        for o in 0..shape.out_channels {
            let yo = y.row(o);
            let mut plane = out.index_axis_mut(Axis(0), o);
            for f in 0..bins {
                plane
                    .slice_mut(s![f, n0..n1])
                    .assign(&yo.slice(s![f * width..(f + 1) * width]));
            }
            plane.slice_mut(s![.., n0..n1]).mapv_inplace(|v| v + bias[o]);
        }
        n0 = n1;
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input` is set.
pub fn conv2d_backward(
    input: &Array3<f64>,
    weight: ArrayView2<f64>,
    dout: &Array3<f64>,
    shape: &ConvShape,
    mut gw: ArrayViewMut2<f64>,
    mut gb: ArrayViewMut1<f64>,
    need_input: bool,
) -> Option<Array3<f64>> {
    let (_, bins, frames) = input.dim();
    for o in 0..shape.out_channels {
        gb[o] += dout.index_axis(Axis(0), o).sum();
    }
    let mut dinput = need_input.then(|| Array3::<f64>::zeros(input.dim()));
    let step = chunk_frames(shape, bins, frames);
    let mut n0 = 0;
    while n0 < frames {
        let n1 = (n0 + step).min(frames);
        let width = n1 - n0;
        let cols = im2col(input, shape, n0, n1);
        let mut dy = Array2::<f64>::zeros((shape.out_channels, bins * width));
        for o in 0..shape.out_channels {
            let plane = dout.index_axis(Axis(0), o);
            let mut row = dy.row_mut(o);
            for f in 0..bins {
                row.slice_mut(s![f * width..(f + 1) * width])
                    .assign(&plane.slice(s![f, n0..n1]));
            }
        }
        gw += &dy.dot(&cols.t());
        if let Some(din) = dinput.as_mut() {
            let dcols = weight.t().dot(&dy);
            col2im_add(&dcols, shape, n0, n1, din);
        }
        n0 = n1;
    }
    dinput
}

pub fn leaky_inplace(x: &mut Array3<f64>, slope: f64) {
    x.mapv_inplace(|v| leaky_relu(v, slope));
}

/// `dout * leaky'(pre)` elementwise.
pub fn leaky_backward3(pre: &Array3<f64>, dout: &Array3<f64>, slope: f64) -> Array3<f64> {
    Zip::from(pre)
        .and(dout)
        .map_collect(|p, d| d * leaky_relu_grad(*p, slope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution.
    fn conv_reference(input: &Array3<f64>, w: &Array2<f64>, b: &Array1<f64>, shape: &ConvShape) -> Array3<f64> {
        let (_, bins, frames) = input.dim();
        let k = shape.kernel as isize;
        let pad = k / 2;
        Array3::from_shape_fn((shape.out_channels, bins, frames), |(o, f, n)| {
            let mut acc = b[o];
            for c in 0..shape.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let (sf, sn) = (f as isize + ky - pad, n as isize + kx - pad);
                        if sf >= 0 && sf < bins as isize && sn >= 0 && sn < frames as isize {
                            let col = (c * shape.kernel + ky as usize) * shape.kernel + kx as usize;
                            acc += w[[o, col]] * input[[c, sf as usize, sn as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = ConvShape {
            in_channels: 2,
            out_channels: 3,
            kernel: 5,
        };
        let input = Array3::from_shape_fn((2, 9, 7), |_| rng.random_range(-1.0..1.0));
        let w = rand2(&mut rng, 3, shape.patch_len());
        let b = Array1::from_vec(vec![0.1, -0.2, 0.3]);
        let got = conv2d_forward(&input, w.view(), b.view(), &shape);
        let want = conv_reference(&input, &w, &b, &shape);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_input_gradient_is_adjoint() {
        // <conv(x), y> = <x, conv^T(y)> with zero bias.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = ConvShape {
            in_channels: 2,
            out_channels: 2,
            kernel: 3,
        };
        let x = Array3::from_shape_fn((2, 6, 5), |_| rng.random_range(-1.0..1.0));
        let y = Array3::from_shape_fn((2, 6, 5), |_| rng.random_range(-1.0..1.0));
        let w = rand2(&mut rng, 2, shape.patch_len());
        let zero = Array1::zeros(2);
        let fx = conv2d_forward(&x, w.view(), zero.view(), &shape);
        let mut gw = Array2::zeros(w.dim());
        let mut gb = Array1::zeros(2);
        let xt = conv2d_backward(&x, w.view(), &y, &shape, gw.view_mut(), gb.view_mut(), true).unwrap();
        let lhs: f64 = fx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(xt.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn lstm_directions_match_manual_reversal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (inp, hid, n) = (3, 2, 5);
        let w_ih = rand2(&mut rng, 4 * hid, inp);
        let w_hh = rand2(&mut rng, 4 * hid, hid);
        let b = Array1::from_shape_fn(4 * hid, |_| rng.random_range(-1.0..1.0));
        let x = rand2(&mut rng, inp, n);
        let w = LstmWeights {
            w_ih: w_ih.view(),
            w_hh: w_hh.view(),
            bias: b.view(),
        };
        let rev = lstm_forward(&w, x.view(), true);
        let mut flipped = x.clone();
        flipped.invert_axis(Axis(1));
        let mut fwd = lstm_forward(&w, flipped.view(), false).output().clone();
        fwd.invert_axis(Axis(1));
        for (a, b) in rev.output().iter().zip(fwd.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.3) + sigmoid(-0.3) - 1.0).abs() < 1e-15);
    }
}
