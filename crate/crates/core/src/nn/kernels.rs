//! Convolution, transposed convolution, instance normalisation and PReLU,
//! forward and backward.
//!
//! Convolutions lower to im2col + dgemm over fixed column chunks of
//! [`CHUNK`] output positions. Chunks are the unit of parallel work; weight
//! gradients are summed over chunks in chunk order.

use super::Volume;
use crate::parallel;

/// Output positions per im2col chunk.
pub const CHUNK: usize = 2048;
/// Chunks whose column gradients are materialised at once in the backward pass.
const CHUNK_GROUP: usize = 8;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Kernel `k` with "same" padding `k/2` along each axis and the given stride.
    pub fn same(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn pointwise(stride: [usize; 3]) -> Self {
        Self {
            kernel: [1, 1, 1],
            stride,
            pad: [0, 0, 0],
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn out_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for i in 0..3 {
            out[i] = (input[i] + 2 * self.pad[i] - self.kernel[i]) / self.stride[i] + 1;
        }
        out
    }
}

/// `C = A * B (+ beta * C)` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let last = |r: usize, rs: usize, cc: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(last(m, rsa, k, csa) < a.len(), "gemm: A view out of bounds");
    assert!(last(k, rsb, n, csb) < b.len(), "gemm: B view out of bounds");
    assert!(last(m, rsc, n, csc) < c.len(), "gemm: C view out of bounds");
    // SAFETY: the asserts above bound every element the strided views touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

struct ConvPlan {
    cin: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    geom: ConvGeom,
}

impl ConvPlan {
    fn new(x_shape: [usize; 4], geom: ConvGeom) -> Self {
        let in_dims = [x_shape[1], x_shape[2], x_shape[3]];
        Self {
            cin: x_shape[0],
            in_dims,
            out_dims: geom.out_dims(in_dims),
            geom,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.geom.kernel_volume()
    }

    fn positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn chunks(&self) -> usize {
        self.positions().div_ceil(CHUNK)
    }

    fn chunk_range(&self, c: usize) -> (usize, usize) {
        let p0 = c * CHUNK;
        (p0, (p0 + CHUNK).min(self.positions()))
    }

    /// Input-space origin of each output position in `[p0, p1)`.
    fn origins(&self, p0: usize, p1: usize) -> Vec<[isize; 3]> {
        let [_, oh, ow] = self.out_dims;
        let g = &self.geom;
        (p0..p1)
            .map(|p| {
                let (od, r) = (p / (oh * ow), p % (oh * ow));
                let (y, x) = (r / ow, r % ow);
                [
                    (od * g.stride[0]) as isize - g.pad[0] as isize,
                    (y * g.stride[1]) as isize - g.pad[1] as isize,
                    (x * g.stride[2]) as isize - g.pad[2] as isize,
                ]
            })
            .collect()
    }

    /// Visit every (row, column, input offset) triple of the chunk's column
    /// matrix whose receptive-field tap lands inside the input.
    fn for_each_tap(&self, ci: usize, origins: &[[isize; 3]], mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.in_dims;
        let [kd, kh, kw] = self.geom.kernel;
        let kvol = kd * kh * kw;
        let plane = d * h * w;
        let mut row = ci * kvol;
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    for (j, o) in origins.iter().enumerate() {
                        let (z, y, x) = (o[0] + a as isize, o[1] + b as isize, o[2] + c as isize);
                        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
                            continue;
                        }
                        f(row, j, ci * plane + ((z as usize * h) + y as usize) * w + x as usize);
                    }
                    row += 1;
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], origins: &[[isize; 3]]) -> Vec<f64> {
        let n = origins.len();
        let mut col = vec![0.0; self.rows() * n];
        for ci in 0..self.cin {
            self.for_each_tap(ci, origins, |row, j, off| col[row * n + j] = x[off]);
        }
        col
    }
}

/// Output shape of a convolution.
pub fn conv3d_shape(x_shape: [usize; 4], cout: usize, geom: &ConvGeom) -> [usize; 4] {
    let o = geom.out_dims([x_shape[1], x_shape[2], x_shape[3]]);
    [cout, o[0], o[1], o[2]]
}

/// `weight` is `cout x cin x kd x kh x kw`.
pub fn conv3d_forward(x: &Volume, weight: &[f64], bias: Option<&[f64]>, cout: usize, geom: &ConvGeom) -> Volume {
    let plan = ConvPlan::new(x.shape, *geom);
    let rows = plan.rows();
    assert_eq!(weight.len(), cout * rows, "conv weight size");
    let p_total = plan.positions();
    let pieces = parallel::map_indexed(plan.chunks(), |c| {
        let (p0, p1) = plan.chunk_range(c);
        let origins = plan.origins(p0, p1);
        let col = plan.im2col(&x.data, &origins);
        let n = p1 - p0;
        let mut out = vec![0.0; cout * n];
        gemm(cout, rows, n, weight, rows, 1, &col, n, 1, 0.0, &mut out, n, 1);
        out
    });
    let mut y = Volume::zeros(conv3d_shape(x.shape, cout, geom));
    for (c, piece) in pieces.iter().enumerate() {
        let (p0, p1) = plan.chunk_range(c);
        let n = p1 - p0;
        for co in 0..cout {
            y.data[co * p_total + p0..co * p_total + p1].copy_from_slice(&piece[co * n..(co + 1) * n]);
        }
    }
    if let Some(b) = bias {
        for co in 0..cout {
            y.data[co * p_total..(co + 1) * p_total]
                .iter_mut()
                .for_each(|v| *v += b[co]);
        }
    }
    y
}

pub struct ConvGrads {
    pub dx: Option<Volume>,
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

pub fn conv3d_backward(
    x: &Volume,
    weight: &[f64],
    cout: usize,
    geom: &ConvGeom,
    dy: &Volume,
    need_dx: bool,
) -> ConvGrads {
    let plan = ConvPlan::new(x.shape, *geom);
    let rows = plan.rows();
    let p_total = plan.positions();
    assert_eq!(dy.data.len(), cout * p_total, "conv output gradient size");

    // dW = sum over chunks of dY_chunk * col_chunk^T
    let partials = parallel::map_indexed(plan.chunks(), |c| {
        let (p0, p1) = plan.chunk_range(c);
        let origins = plan.origins(p0, p1);
        let col = plan.im2col(&x.data, &origins);
        let n = p1 - p0;
        let mut dw = vec![0.0; cout * rows];
        gemm(cout, n, rows, &dy.data[p0..], p_total, 1, &col, 1, n, 0.0, &mut dw, rows, 1);
        dw
    });
    let mut dweight = vec![0.0; cout * rows];
    for p in &partials {
        dweight.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let dbias = (0..cout)
        .map(|co| dy.data[co * p_total..(co + 1) * p_total].iter().sum())
        .collect();

    let dx = need_dx.then(|| {
        let mut dx = Volume::zeros(x.shape);
        let plane = plan.in_dims.iter().product::<usize>();
        let chunks = plan.chunks();
        let mut start = 0;
        while start < chunks {
            let end = (start + CHUNK_GROUP).min(chunks);
            // dcol = W^T * dY_chunk, one buffer per chunk of this group
            let dcols = parallel::map_indexed(end - start, |i| {
                let (p0, p1) = plan.chunk_range(start + i);
                let n = p1 - p0;
                let mut dcol = vec![0.0; rows * n];
                gemm(rows, cout, n, weight, 1, rows, &dy.data[p0..], p_total, 1, 0.0, &mut dcol, n, 1);
                (plan.origins(p0, p1), dcol)
            });
            parallel::for_each_chunk_mut(&mut dx.data, plane, |ci, dplane| {
                for (origins, dcol) in &dcols {
                    let n = origins.len();
                    plan.for_each_tap(ci, origins, |row, j, off| {
                        dplane[off - ci * plane] += dcol[row * n + j];
                    });
                }
            });
            start = end;
        }
        dx
    });

    ConvGrads { dx, dweight, dbias }
}

/// Output shape of a transposed convolution whose kernel equals its stride.
pub fn conv_transpose_shape(x_shape: [usize; 4], cout: usize, kernel: [usize; 3]) -> [usize; 4] {
    [cout, x_shape[1] * kernel[0], x_shape[2] * kernel[1], x_shape[3] * kernel[2]]
}

fn for_each_upsampled(x_shape: [usize; 4], kernel: [usize; 3], cout: usize, mut f: impl FnMut(usize, usize)) {
    // f(index into the cout*kvol x P product, index into the output volume)
    let [_, d, h, w] = x_shape;
    let [kd, kh, kw] = kernel;
    let (od, oh, ow) = (d * kd, h * kh, w * kw);
    let p = d * h * w;
    let kvol = kd * kh * kw;
    for co in 0..cout {
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let row = co * kvol + (a * kh + b) * kw + c;
                    for z in 0..d {
                        for y in 0..h {
                            for x in 0..w {
                                let src = row * p + (z * h + y) * w + x;
                                let dst = ((co * od + z * kd + a) * oh + y * kh + b) * ow + x * kw + c;
                                f(src, dst);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping transposed convolution (kernel == stride). `weight` is
/// `cin x cout x kd x kh x kw`.
pub fn conv_transpose_forward(x: &Volume, weight: &[f64], bias: Option<&[f64]>, cout: usize, kernel: [usize; 3]) -> Volume {
    let cin = x.channels();
    let kvol: usize = kernel.iter().product();
    let p = x.spatial();
    let m = cout * kvol;
    assert_eq!(weight.len(), cin * m, "transposed conv weight size");
    let mut tmp = vec![0.0; m * p];
    gemm(m, cin, p, weight, 1, m, &x.data, p, 1, 0.0, &mut tmp, p, 1);
    let mut y = Volume::zeros(conv_transpose_shape(x.shape, cout, kernel));
    for_each_upsampled(x.shape, kernel, cout, |src, dst| y.data[dst] = tmp[src]);
    if let Some(b) = bias {
        let s = y.spatial();
        for co in 0..cout {
            y.data[co * s..(co + 1) * s].iter_mut().for_each(|v| *v += b[co]);
        }
    }
    y
}

pub fn conv_transpose_backward(
    x: &Volume,
    weight: &[f64],
    cout: usize,
    kernel: [usize; 3],
    dy: &Volume,
    need_dx: bool,
) -> ConvGrads {
    let cin = x.channels();
    let kvol: usize = kernel.iter().product();
    let p = x.spatial();
    let m = cout * kvol;
    let mut dtmp = vec![0.0; m * p];
    for_each_upsampled(x.shape, kernel, cout, |src, dst| dtmp[src] = dy.data[dst]);
    let mut dweight = vec![0.0; cin * m];
    gemm(cin, p, m, &x.data, p, 1, &dtmp, 1, p, 0.0, &mut dweight, m, 1);
    let s = dy.spatial();
    let dbias = (0..cout).map(|co| dy.data[co * s..(co + 1) * s].iter().sum()).collect();
    let dx = need_dx.then(|| {
        let mut dx = Volume::zeros(x.shape);
        gemm(cin, m, p, weight, m, 1, &dtmp, p, 1, 0.0, &mut dx.data, p, 1);
        dx
    });
    ConvGrads { dx, dweight, dbias }
}

/// Per-channel normalisation over depth, height and width (no affine).
/// Returns the output and each channel's `1 / sqrt(var + eps)`.
pub fn instance_norm_forward(x: &Volume) -> (Volume, Vec<f64>) {
    let s = x.spatial();
    let per_channel = parallel::map_indexed(x.channels(), |c| {
        let v = x.channel(c);
        let mean = v.iter().sum::<f64>() / s as f64;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / s as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        (v.iter().map(|a| (a - mean) * inv).collect::<Vec<f64>>(), inv)
    });
    let mut y = Volume::zeros(x.shape);
    let mut inv_std = Vec::with_capacity(x.channels());
    for (c, (vals, inv)) in per_channel.into_iter().enumerate() {
        y.data[c * s..(c + 1) * s].copy_from_slice(&vals);
        inv_std.push(inv);
    }
    (y, inv_std)
}

pub fn instance_norm_backward(y: &Volume, inv_std: &[f64], dy: &Volume) -> Volume {
    let s = y.spatial();
    let mut dx = Volume::zeros(y.shape);
    parallel::for_each_chunk_mut(&mut dx.data, s, |c, out| {
        let yc = y.channel(c);
        let g = dy.channel(c);
        let mean_g = g.iter().sum::<f64>() / s as f64;
        let mean_gy = g.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / s as f64;
        for i in 0..s {
            out[i] = inv_std[c] * (g[i] - mean_g - yc[i] * mean_gy);
        }
    });
    dx
}

pub fn prelu_forward(x: &Volume, alpha: f64) -> Volume {
    Volume {
        shape: x.shape,
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { alpha * v }).collect(),
    }
}

/// Returns `(dx, dalpha)`.
pub fn prelu_backward(x: &Volume, alpha: f64, dy: &Volume) -> (Volume, f64) {
    let mut dalpha = 0.0;
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            if v > 0.0 {
                g
            } else {
                dalpha += g * v;
                alpha * g
            }
        })
        .collect();
    (Volume { shape: x.shape, data }, dalpha)
}
