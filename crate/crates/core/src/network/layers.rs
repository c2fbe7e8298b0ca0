//! Convolution, pooling and their adjoints on channel-major tensors.

use crate::tensor::Tensor;

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn w(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((oc * self.in_channels + ic) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        let (c, h, w) = input.shape();
        debug_assert_eq!(c, self.in_channels);
        let constants = constant_planes(input);
        let mut out = Tensor::zeros(self.out_channels, h, w);
        for oc in 0..self.out_channels {
            let dst = out.plane_mut(oc);
            dst.fill(self.bias[oc]);
            // Constant planes (e.g. attribute channels) only contribute the
            // sum of the in-bounds taps, folded into one 3x3 table.
            let mut folded = [[0.0; 3]; 3];
            let mut any_constant = false;
            for (ic, constant) in constants.iter().enumerate() {
                if let Some(v) = *constant {
                    any_constant = true;
                    for (ky, row) in folded.iter_mut().enumerate() {
                        for (kx, f) in row.iter_mut().enumerate() {
                            *f += v * self.w(oc, ic, ky, kx);
                        }
                    }
                    continue;
                }
                let src = input.plane(ic);
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(dx, w);
                        let wt = self.w(oc, ic, ky, kx);
                        if wt == 0.0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let sstart = (sy * w) as isize + x0 as isize + dx;
                            let srow = &src[sstart as usize..sstart as usize + (x1 - x0)];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
            if any_constant {
                add_folded(dst, h, w, &folded);
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        input: &Tensor,
        d_out: &Tensor,
        grad: &mut Conv3x3,
        need_input: bool,
    ) -> Option<Tensor> {
        let (c, h, w) = input.shape();
        let mut d_in = need_input.then(|| Tensor::zeros(c, h, w));
        // Without an input gradient, constant planes need only rectangle sums of `g`.
        let constants = if need_input {
            vec![None; c]
        } else {
            constant_planes(input)
        };
        let has_constant = constants.iter().any(Option::is_some);
        for oc in 0..self.out_channels {
            let g = d_out.plane(oc);
            grad.bias[oc] += g.iter().sum::<f64>();
            let tap_sums = has_constant.then(|| tap_rect_sums(g, h, w));
            for (ic, constant) in constants.iter().enumerate() {
                if let (Some(v), Some(sums)) = (*constant, tap_sums.as_ref()) {
                    for (ky, row) in sums.iter().enumerate() {
                        for (kx, s) in row.iter().enumerate() {
                            grad.weight[((oc * self.in_channels + ic) * 3 + ky) * 3 + kx] += v * s;
                        }
                    }
                    continue;
                }
                let src = input.plane(ic);
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(dx, w);
                        let widx = ((oc * self.in_channels + ic) * 3 + ky) * 3 + kx;
                        let wt = self.weight[widx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            let sstart = ((sy * w) as isize + x0 as isize + dx) as usize;
                            let srow = &src[sstart..sstart + (x1 - x0)];
                            for (a, b) in grow.iter().zip(srow) {
                                acc += a * b;
                            }
                            if let Some(d_in) = d_in.as_mut() {
                                let drow = &mut d_in.plane_mut(ic)[sstart..sstart + (x1 - x0)];
                                for (d, a) in drow.iter_mut().zip(grow) {
                                    *d += wt * a;
                                }
                            }
                        }
                        grad.weight[widx] += acc;
                    }
                }
            }
        }
        d_in
    }
}

/// The value of every spatially constant plane.
fn constant_planes(input: &Tensor) -> Vec<Option<f64>> {
    (0..input.channels())
        .map(|ic| {
            let p = input.plane(ic);
            let v = p[0];
            p.iter().all(|&x| x == v).then_some(v)
        })
        .collect()
}

/// Adds, at every pixel, the sum of `folded[ky][kx]` over the taps that fall
/// inside the image.
fn add_folded(dst: &mut [f64], h: usize, w: usize, folded: &[[f64; 3]; 3]) {
    let col_valid = |x: usize, kx: usize| x + kx >= 1 && x + kx <= w;
    for y in 0..h {
        let mut by_kx = [0.0; 3];
        for (ky, row) in folded.iter().enumerate() {
            if y + ky >= 1 && y + ky <= h {
                for kx in 0..3 {
                    by_kx[kx] += row[kx];
                }
            }
        }
        let interior = by_kx[0] + by_kx[1] + by_kx[2];
        for x in 0..w {
            dst[y * w + x] += if x >= 1 && x + 1 < w {
                interior
            } else {
                (0..3).filter(|&kx| col_valid(x, kx)).map(|kx| by_kx[kx]).sum()
            };
        }
    }
}

/// For each tap, the sum of `g` over the output pixels where that tap is in bounds.
fn tap_rect_sums(g: &[f64], h: usize, w: usize) -> [[f64; 3]; 3] {
    let mut sums = [[0.0; 3]; 3];
    for (ky, row) in sums.iter_mut().enumerate() {
        let (y0, y1) = valid_range(ky as isize - 1, h);
        for (kx, s) in row.iter_mut().enumerate() {
            let (x0, x1) = valid_range(kx as isize - 1, w);
            *s = (y0..y1).map(|y| g[y * w + x0..y * w + x1].iter().sum::<f64>()).sum();
        }
    }
    sums
}

/// Output rows `y` for which `y + d` stays inside `[0, n)`.
#[inline]
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the activation output was clipped.
pub fn relu_backward_in_place(d: &mut Tensor, activated: &Tensor) {
    for (g, &a) in d.data_mut().iter_mut().zip(activated.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling, stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled tensor and the flat argmax index of every output cell.
pub fn max_pool2(input: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let src = input.plane(ch);
        for y in 0..oh {
            for x in 0..ow {
                let mut best = 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * y + dy) * w + 2 * x + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.set(ch, y, x, src[best]);
                argmax.push(ch * h * w + best);
            }
        }
    }
    (out, argmax)
}

pub fn max_pool2_backward(d_out: &Tensor, argmax: &[usize], input_shape: (usize, usize, usize)) -> Tensor {
    let (c, h, w) = input_shape;
    let mut d_in = Tensor::zeros(c, h, w);
    let buf = d_in.data_mut();
    for (&i, &g) in argmax.iter().zip(d_out.data()) {
        buf[i] += g;
    }
    d_in
}

pub fn global_average(input: &Tensor) -> Vec<f64> {
    let n = (input.height() * input.width()) as f64;
    (0..input.channels())
        .map(|c| input.plane(c).iter().sum::<f64>() / n)
        .collect()
}

pub fn global_average_backward(d: &[f64], height: usize, width: usize) -> Tensor {
    let n = (height * width) as f64;
    Tensor::from_fn(d.len(), height, width, |c, _, _| d[c] / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(layer: &Conv3x3, input: &Tensor) -> Tensor {
        let (_, h, w) = input.shape();
        Tensor::from_fn(layer.out_channels, h, w, |oc, y, x| {
            let mut acc = layer.bias[oc];
            for ic in 0..layer.in_channels {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = x as isize + kx as isize - 1;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += layer.w(oc, ic, ky, kx) * input.get(ic, sy as usize, sx as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn layer(ic: usize, oc: usize) -> Conv3x3 {
        let mut l = Conv3x3::zeros(ic, oc);
        for (i, v) in l.weight.iter_mut().enumerate() {
            *v = ((i * 37 % 17) as f64 - 8.0) / 9.0;
        }
        for (i, v) in l.bias.iter_mut().enumerate() {
            *v = i as f64 * 0.1 - 0.05;
        }
        l
    }

    #[test]
    fn conv_matches_naive() {
        let l = layer(3, 4);
        for (h, w) in [(1, 1), (2, 3), (5, 7), (8, 8)] {
            let x = Tensor::from_fn(3, h, w, |c, y, x| ((c * 13 + y * 5 + x * 3) % 11) as f64 / 10.0 - 0.4);
            assert!(l.forward(&x).max_abs_diff(&naive_conv(&l, &x)) < 1e-12);
        }
    }

    fn with_constant_planes(h: usize, w: usize) -> Tensor {
        // Plane 0 varies, planes 1..=3 are constant (one of them zero).
        Tensor::from_fn(4, h, w, |c, y, x| match c {
            0 => ((y * 5 + x * 3) % 11) as f64 / 10.0,
            1 => 1.0,
            2 => 0.0,
            _ => -0.7,
        })
    }

    #[test]
    fn constant_plane_path_matches_naive() {
        let l = layer(4, 3);
        for (h, w) in [(1, 1), (1, 4), (2, 2), (3, 5), (8, 8)] {
            let x = with_constant_planes(h, w);
            assert!(l.forward(&x).max_abs_diff(&naive_conv(&l, &x)) < 1e-12, "{h}x{w}");
        }
    }

    #[test]
    fn constant_plane_weight_gradient_matches_general_path() {
        let l = layer(4, 3);
        for (h, w) in [(1, 1), (2, 3), (6, 5)] {
            let x = with_constant_planes(h, w);
            let g = Tensor::from_fn(3, h, w, |c, y, xx| ((5 * c + y + 2 * xx) % 7) as f64 / 7.0 - 0.4);
            let mut fast = Conv3x3::zeros(4, 3);
            assert!(l.backward(&x, &g, &mut fast, false).is_none());
            let mut general = Conv3x3::zeros(4, 3);
            l.backward(&x, &g, &mut general, true).unwrap();
            for (a, b) in fast.weight.iter().zip(&general.weight) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(fast.bias, general.bias);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x) - b, g> == <x, conv^T g> and dW from the same identity.
        let l = layer(2, 3);
        let x = Tensor::from_fn(2, 5, 4, |c, y, xx| ((c + 2 * y + 3 * xx) % 7) as f64 / 7.0);
        let g = Tensor::from_fn(3, 5, 4, |c, y, xx| ((5 * c + y + xx) % 5) as f64 / 5.0 - 0.3);
        let mut grad = Conv3x3::zeros(2, 3);
        let dx = l.backward(&x, &g, &mut grad, true).unwrap();
        let y = l.forward(&x);
        let mut lhs = 0.0;
        for oc in 0..3 {
            for (i, (&a, &b)) in y.plane(oc).iter().zip(g.plane(oc)).enumerate() {
                let _ = i;
                lhs += (a - l.bias[oc]) * b;
            }
        }
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let wdot: f64 = l.weight.iter().zip(&grad.weight).map(|(a, b)| a * b).sum();
        assert!((lhs - wdot).abs() < 1e-10);
    }

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let x = Tensor::from_vec(1, 2, 4, vec![1.0, 3.0, 0.0, -1.0, 2.0, 0.5, 4.0, 0.0]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data(), &[3.0, 4.0]);
        let g = Tensor::from_vec(1, 1, 2, vec![10.0, 20.0]).unwrap();
        let dx = max_pool2_backward(&g, &arg, x.shape());
        assert_eq!(dx.data(), &[0.0, 10.0, 0.0, 0.0, 0.0, 0.0, 20.0, 0.0]);
    }

    #[test]
    fn gap_of_constant_planes() {
        let x = Tensor::from_fn(3, 4, 5, |c, _, _| c as f64 * 1.5 - 1.0);
        assert_eq!(global_average(&x), vec![-1.0, 0.5, 2.0]);
    }
}
