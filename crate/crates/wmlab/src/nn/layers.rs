//! Minimal layer zoo with explicit forward/backward passes.
//!
//! Feature maps are `(N, C, H, W)` f32 arrays; convolution uses im2col so the
//! hot path is a single GEMM per layer.

use ndarray::{Array1, Array2, Array4, Axis, ShapeBuilder};

/// 3x3 (or kxk) convolution with padding and stride, bias included.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// (cout, cin*k*k)
    pub w: Array2<f32>,
    pub b: Array1<f32>,
    pub gw: Array2<f32>,
    pub gb: Array1<f32>,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Array2<f32>,
    #[allow(dead_code)]
    n: usize,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut crate::rng::Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let fan_in = (cin * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let w = Array2::from_shape_fn((cout, cin * k * k), |_| normal.sample(rng));
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            w,
            b: Array1::zeros(cout),
            gw: Array2::zeros((cout, cin * k * k)),
            gb: Array1::zeros(cout),
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv input channel mismatch");
        let (ho, wo) = self.out_hw(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, ho, wo);
        // (cout, ckk) x (ckk, n*ho*wo)
        let mut y = self.w.dot(&cols);
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(self.b.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        self.cache = Some(ConvCache { cols, n, h, w });
        cols_to_nchw(&y, n, self.cout, ho, wo)
    }

    /// Backward: accumulates `gw`/`gb`, returns gradient w.r.t. the input.
    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.as_ref().expect("forward before backward");
        let (n, cout, ho, wo) = dy.dim();
        assert_eq!(cout, self.cout);
        let dy_mat = nchw_to_cols(dy, n, cout, ho, wo);
        self.gw += &dy_mat.dot(&cache.cols.t());
        self.gb += &dy_mat.sum_axis(Axis(1));
        let dcols = self.w.t().dot(&dy_mat);
        col2im(
            &dcols, n, self.cin, cache.h, cache.w, self.k, self.stride, self.pad, ho, wo,
        )
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// x (N,Cin,H,W) -> cols (Cin*k*k, N*Ho*Wo), column index = ((n*Ho)+ho)*Wo+wo.
fn im2col(x: &Array4<f32>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f32> {
    let (n, cin, h, w) = x.dim();
    let mut cols = Array2::<f32>::zeros((cin * k * k, n * ho * wo).f());
    let xs = x.as_slice().expect("contiguous input");
    {
        let cs = cols.as_slice_memory_order_mut().expect("contiguous cols");
        // column-major: column j occupies cs[j*ckk .. (j+1)*ckk]
        let ckk = cin * k * k;
        for ni in 0..n {
            for hi in 0..ho {
                let ybase = hi * stride;
                for wi in 0..wo {
                    let xbase = wi * stride;
                    let col = ((ni * ho) + hi) * wo + wi;
                    let dst = &mut cs[col * ckk..(col + 1) * ckk];
                    let mut idx = 0;
                    for c in 0..cin {
                        let plane = &xs[(ni * cin + c) * h * w..(ni * cin + c + 1) * h * w];
                        for ky in 0..k {
                            let yy = ybase + ky;
                            if yy < pad || yy >= h + pad {
                                for _ in 0..k {
                                    dst[idx] = 0.0;
                                    idx += 1;
                                }
                                continue;
                            }
                            let yy = yy - pad;
                            for kx in 0..k {
                                let xx = xbase + kx;
                                dst[idx] = if xx < pad || xx >= w + pad {
                                    0.0
                                } else {
                                    plane[yy * w + (xx - pad)]
                                };
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f32>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f32> {
    let mut dx = Array4::<f32>::zeros((n, cin, h, w));
    let dxs = dx.as_slice_mut().expect("contiguous");
    for ni in 0..n {
        for hi in 0..ho {
            let ybase = hi * stride;
            for wi in 0..wo {
                let xbase = wi * stride;
                let col = ((ni * ho) + hi) * wo + wi;
                let mut idx = 0;
                for c in 0..cin {
                    let off = (ni * cin + c) * h * w;
                    for ky in 0..k {
                        let yy = ybase + ky;
                        if yy < pad || yy >= h + pad {
                            idx += k;
                            continue;
                        }
                        let yy = yy - pad;
                        for kx in 0..k {
                            let xx = xbase + kx;
                            if xx >= pad && xx < w + pad {
                                dxs[off + yy * w + (xx - pad)] += dcols[[idx, col]];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// (cout, n*ho*wo) -> (n, cout, ho, wo)
fn cols_to_nchw(y: &Array2<f32>, n: usize, cout: usize, ho: usize, wo: usize) -> Array4<f32> {
    let mut out = Array4::<f32>::zeros((n, cout, ho, wo));
    let os = out.as_slice_mut().unwrap();
    for c in 0..cout {
        let row = y.row(c);
        let row = row.as_slice().unwrap_or(&[]);
        if row.is_empty() {
            for ni in 0..n {
                for p in 0..ho * wo {
                    os[(ni * cout + c) * ho * wo + p] = y[[c, ni * ho * wo + p]];
                }
            }
        } else {
            for ni in 0..n {
                let src = &row[ni * ho * wo..(ni + 1) * ho * wo];
                let dst = &mut os[(ni * cout + c) * ho * wo..(ni * cout + c + 1) * ho * wo];
                dst.copy_from_slice(src);
            }
        }
    }
    out
}

/// (n, cout, ho, wo) -> (cout, n*ho*wo)
fn nchw_to_cols(dy: &Array4<f32>, n: usize, cout: usize, ho: usize, wo: usize) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((cout, n * ho * wo));
    let dys = dy.as_slice().expect("contiguous");
    for c in 0..cout {
        for ni in 0..n {
            let src = &dys[(ni * cout + c) * ho * wo..(ni * cout + c + 1) * ho * wo];
            let dst = out.row_mut(c);
            let dst = &mut dst.into_slice().unwrap()[ni * ho * wo..(ni + 1) * ho * wo];
            dst.copy_from_slice(src);
        }
    }
    out
}

/// Fully connected layer, weight shape (out, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
    pub gw: Array2<f32>,
    pub gb: Array1<f32>,
    cache: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut crate::rng::Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let std = (2.0 / input as f32).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            w: Array2::from_shape_fn((output, input), |_| normal.sample(rng)),
            b: Array1::zeros(output),
            gw: Array2::zeros((output, input)),
            gb: Array1::zeros(output),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.w.t());
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.b;
        }
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.cache.as_ref().expect("forward before backward");
        self.gw += &dy.t().dot(x);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// ReLU over 4-d maps; caches the activation sign.
#[derive(Debug, Clone, Default)]
pub struct Relu4 {
    mask: Option<Array4<f32>>,
}

impl Relu4 {
    pub fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let y = x.mapv(|v| v.max(0.0));
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        y
    }

    pub fn backward(&self, dy: &Array4<f32>) -> Array4<f32> {
        dy * self.mask.as_ref().expect("forward before backward")
    }
}

/// Global average pooling (N,C,H,W) -> (N,C).
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let mut out = Array2::<f32>::zeros((n, c));
    let scale = 1.0 / (h * w) as f32;
    for ni in 0..n {
        for ci in 0..c {
            let mut s = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    s += x[[ni, ci, hi, wi]];
                }
            }
            out[[ni, ci]] = s * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward(dy: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c) = dy.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = dy[[ni, ci]] * scale;
            for hi in 0..h {
                for wi in 0..w {
                    dx[[ni, ci, hi, wi]] = g;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array4;

    /// Finite-difference check of the conv backward pass.
    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = rng::derive(0, "convtest");
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |(a, b, c, d)| {
            ((a * 7 + b * 3 + c * 5 + d) as f32 * 0.37).sin()
        });
        let y = conv.forward(&x);
        // loss = sum(y^2)/2, dy = y
        let dx = conv.backward(&y.clone());
        let eps = 1e-3f32;
        // input gradient spot checks
        for &(ni, ci, hi, wi) in &[(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 4, 4)] {
            let mut xp = x.clone();
            xp[[ni, ci, hi, wi]] += eps;
            let mut xm = x.clone();
            xm[[ni, ci, hi, wi]] -= eps;
            let lp: f32 = conv.forward(&xp).iter().map(|v| v * v * 0.5).sum();
            let lm: f32 = conv.forward(&xm).iter().map(|v| v * v * 0.5).sum();
            let fd = (lp - lm) / (2.0 * eps);
            let an = dx[[ni, ci, hi, wi]];
            assert!((fd - an).abs() < 2e-2, "input grad mismatch: fd={fd} an={an}");
        }
        // weight gradient spot checks
        conv.gw.fill(0.0);
        conv.gb.fill(0.0);
        let y = conv.forward(&x);
        conv.backward(&y.clone());
        for &(o, i) in &[(0, 0), (2, 17), (1, 9)] {
            let mut cp = conv.clone();
            cp.w[[o, i]] += eps;
            let mut cm = conv.clone();
            cm.w[[o, i]] -= eps;
            let lp: f32 = cp.forward(&x).iter().map(|v| v * v * 0.5).sum();
            let lm: f32 = cm.forward(&x).iter().map(|v| v * v * 0.5).sum();
            let fd = (lp - lm) / (2.0 * eps);
            let an = conv.gw[[o, i]];
            assert!((fd - an).abs() < 2e-2, "weight grad mismatch: fd={fd} an={an}");
        }
    }

    #[test]
    fn strided_conv_shapes() {
        let mut rng = rng::derive(0, "convtest2");
        let mut conv = Conv2d::new(4, 8, 3, 2, 1, &mut rng);
        let x = Array4::<f32>::zeros((3, 4, 16, 16));
        let y = conv.forward(&x);
        assert_eq!(y.dim(), (3, 8, 8, 8));
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = rng::derive(0, "lintest");
        let mut lin = Linear::new(5, 3, &mut rng);
        let x = Array2::from_shape_fn((4, 5), |(a, b)| ((a * 5 + b) as f32 * 0.11).cos());
        let y = lin.forward(&x);
        let dx = lin.backward(&y.clone());
        let eps = 1e-3f32;
        let mut xp = x.clone();
        xp[[1, 2]] += eps;
        let mut xm = x.clone();
        xm[[1, 2]] -= eps;
        let lp: f32 = lin.forward(&xp).iter().map(|v| v * v * 0.5).sum();
        let lm: f32 = lin.forward(&xm).iter().map(|v| v * v * 0.5).sum();
        let fd = (lp - lm) / (2.0 * eps);
        assert!((fd - dx[[1, 2]]).abs() < 1e-2);
    }

    #[test]
    fn gap_backward_distributes_evenly() {
        let x = Array4::from_elem((1, 1, 2, 2), 1.0f32);
        let y = global_avg_pool(&x);
        assert_eq!(y[[0, 0]], 1.0);
        let dx = global_avg_pool_backward(&y, 2, 2);
        assert!((dx[[0, 0, 1, 1]] - 0.25).abs() < 1e-7);
    }
}
