//! Dense row-major `f64` tensors and the convolution kernels used by the
//! networks. Image batches are laid out `[N, C, H, W]`; for volumes the
//! depth axis is the batch axis so every 2D operator acts per slice.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(&shape, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected rank-4 tensor, got {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m × k` and `op(b)` is
/// `k × n`; `a_t`/`b_t` read the stored row-major matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Zero padding applied before a convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn same(kernel: usize) -> Self {
        let p = kernel / 2;
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        ConvSpec {
            stride: (1, 1),
            padding: Padding::same(kernel),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        if ph < kh || pw < kw {
            return Err(Error::InvalidInput(format!(
                "padded input {ph}x{pw} smaller than kernel {kh}x{kw}"
            )));
        }
        Ok(((ph - kh) / self.stride.0 + 1, (pw - kw) / self.stride.1 + 1))
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Offset of the input pixel read by output `(o, kernel k)` along one
    /// axis, or `None` when it falls in the zero padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let i = (o * stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (sh, sw) = self.spec.stride;
        let p = self.spec.padding;
        let hw = self.cols();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match Self::src(oy, ki, sh, p.top, self.h) {
                            None => out.fill(0.0),
                            Some(iy) => {
                                let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in out.iter_mut().enumerate() {
                                    *v = Self::src(ox, kj, sw, p.left, self.w)
                                        .map_or(0.0, |ix| src_row[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (sh, sw) = self.spec.stride;
        let p = self.spec.padding;
        let hw = self.cols();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let Some(iy) = Self::src(oy, ki, sh, p.top, self.h) else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(ix) = Self::src(ox, kj, sw, p.left, self.w) {
                                plane[iy * self.w + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<(ConvGeom, usize, usize)> {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, kh, kw) = w.dims4();
    if wc != c {
        return Err(Error::shape(format!("{c} input channels"), w.shape()));
    }
    let (ho, wo) = spec.output_hw(h, wd, kh, kw)?;
    Ok((
        ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            spec,
        },
        n,
        o,
    ))
}

/// Cross-correlation of `x: [N,C,H,W]` with `w: [O,C,kh,kw]` plus optional
/// bias `[O]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let (g, n, o) = conv_geom(x, w, spec)?;
    let (rows, hw) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(&[n, o, g.ho, g.wo]);
    let mut cols = vec![0.0; rows * hw];
    let in_stride = g.c * g.h * g.w;
    for b in 0..n {
        g.im2col(&x.data[b * in_stride..(b + 1) * in_stride], &mut cols);
        let y = &mut out.data[b * o * hw..(b + 1) * o * hw];
        gemm(o, rows, hw, &w.data, false, &cols, false, y, 0.0);
        if let Some(bias) = bias {
            for (oc, plane) in y.chunks_mut(hw).enumerate() {
                let bv = bias.data[oc];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (g, n, o) = conv_geom(x, w, spec)?;
    let (rows, hw) = (g.rows(), g.cols());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut cols = vec![0.0; rows * hw];
    let mut dcols = vec![0.0; rows * hw];
    let in_stride = g.c * g.h * g.w;
    for b in 0..n {
        let xs = &x.data[b * in_stride..(b + 1) * in_stride];
        let dys = &dy.data[b * o * hw..(b + 1) * o * hw];
        g.im2col(xs, &mut cols);
        gemm(o, hw, rows, dys, false, &cols, true, &mut dw.data, 1.0);
        gemm(rows, o, hw, &w.data, true, dys, false, &mut dcols, 0.0);
        g.col2im(&dcols, &mut dx.data[b * in_stride..(b + 1) * in_stride]);
        for (oc, plane) in dys.chunks(hw).enumerate() {
            db.data[oc] += plane.iter().sum::<f64>();
        }
    }
    Ok((dx, dw, db))
}

/// Transposed convolution with a 2×2 kernel and stride 2: `x: [N,C,H,W]`,
/// `w: [C,O,2,2]`, `bias: [O]`, output `[N,O,2H,2W]`.
pub fn conv_transpose2x2(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4();
    let (wc, o, kh, kw) = w.dims4();
    if wc != c || kh != 2 || kw != 2 {
        return Err(Error::shape(format!("[{c}, O, 2, 2]"), w.shape()));
    }
    let hw = h * wd;
    let mut out = Tensor::zeros(&[n, o, 2 * h, 2 * wd]);
    let mut buf = vec![0.0; o * 4 * hw];
    for b in 0..n {
        let xs = &x.data[b * c * hw..(b + 1) * c * hw];
        // buf[(o,a,b'), pixel] = sum_c w[c,(o,a,b')] x[c,pixel]
        gemm(o * 4, c, hw, &w.data, true, xs, false, &mut buf, 0.0);
        let y = &mut out.data[b * o * 4 * hw..(b + 1) * o * 4 * hw];
        for oc in 0..o {
            let bv = bias.data[oc];
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &buf[((oc * 2 + a) * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..wd {
                            y[(oc * 2 * h + 2 * i + a) * 2 * wd + 2 * j + bb] = src[i * wd + j] + bv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv_transpose2x2_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, wd) = x.dims4();
    let (_, o, _, _) = w.dims4();
    let hw = h * wd;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut buf = vec![0.0; o * 4 * hw];
    for b in 0..n {
        let dys = &dy.data[b * o * 4 * hw..(b + 1) * o * 4 * hw];
        for oc in 0..o {
            for a in 0..2 {
                for bb in 0..2 {
                    let dst = &mut buf[((oc * 2 + a) * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..wd {
                            let g = dys[(oc * 2 * h + 2 * i + a) * 2 * wd + 2 * j + bb];
                            dst[i * wd + j] = g;
                            db.data[oc] += g;
                        }
                    }
                }
            }
        }
        let xs = &x.data[b * c * hw..(b + 1) * c * hw];
        gemm(c, hw, o * 4, xs, false, &buf, true, &mut dw.data, 1.0);
        gemm(c, o * 4, hw, &w.data, false, &buf, false, &mut dx.data[b * c * hw..(b + 1) * c * hw], 0.0);
    }
    Ok((dx, dw, db))
}

/// 2×2 max pooling with stride 2 (floor mode). Returns the pooled tensor and
/// the flat input index of each selected maximum (first on ties).
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = (plane * ho + i) * wo + j;
                out.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Tensor {
        let (n, c, h, wd) = x.dims4();
        let (o, _, kh, kw) = w.dims4();
        let (ho, wo) = spec.output_hw(h, wd, kh, kw).unwrap();
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for bi in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data[oc];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * spec.stride.0 + ki) as isize - spec.padding.top as isize;
                                    let ix = (ox * spec.stride.1 + kj) as isize - spec.padding.left as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data[((oc * c + ci) * kh + ki) * kw + kj]
                                        * x.data[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) * scale).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = ramp(&[2, 3, 7, 6], 0.1);
        let w = ramp(&[4, 3, 3, 3], 0.05);
        let b = ramp(&[4], 0.3);
        for spec in [
            ConvSpec::same(3),
            ConvSpec {
                stride: (3, 3),
                padding: Padding::default(),
            },
            ConvSpec {
                stride: (2, 1),
                padding: Padding {
                    top: 0,
                    bottom: 2,
                    left: 1,
                    right: 0,
                },
            },
        ] {
            let fast = conv2d(&x, &w, Some(&b), spec).unwrap();
            let slow = naive_conv(&x, &w, &b, spec);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn stride_three_trace_from_256() {
        let spec = ConvSpec {
            stride: (3, 3),
            padding: Padding::default(),
        };
        let mut n = 256;
        let mut trace = vec![n];
        for _ in 0..4 {
            n = spec.output_hw(n, n, 3, 3).unwrap().0;
            trace.push(n);
        }
        assert_eq!(trace, [256, 85, 28, 9, 3]);
    }

    #[test]
    fn transpose_conv_places_each_tap() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        let y = conv_transpose2x2(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[1.5, 2.5, 2.5, 4.5, 3.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn max_pool_picks_block_maxima() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 0.0]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }
}
