use super::gemm::gemm;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Largest output-channel count for which the input gradient of a
/// unit-stride layer skips the unrolled `(C·k·k) × (N·P)` buffer. With so
/// few GEMM rows, filling and scattering that buffer costs more than the
/// arithmetic.
const DIRECT_MAX_OUT: usize = 4;

fn direct(g: &ConvGeom) -> bool {
    g.stride == 1 && g.out_channels <= DIRECT_MAX_OUT
}

/// Resolved geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weights: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = *input else {
            return shape_err("conv2d", format!("input must be NCHW, got {input:?}"));
        };
        let [out_channels, w_in, kh, kw] = *weights else {
            return shape_err("conv2d", format!("weights must be OIkk, got {weights:?}"));
        };
        if w_in != in_channels {
            return shape_err(
                "conv2d",
                format!("input channels {in_channels} != weight input channels {w_in}"),
            );
        }
        if kh != kw || kh == 0 {
            return shape_err("conv2d", format!("kernel must be square and non-empty, got {kh}x{kw}"));
        }
        if stride == 0 {
            return shape_err("conv2d", "stride must be >= 1");
        }
        if height + 2 * padding < kh {
            return shape_err(
                "conv2d",
                format!("height {height} + 2*padding {padding} smaller than kernel {kh}"),
            );
        }
        if width + 2 * padding < kw {
            return shape_err(
                "conv2d",
                format!("width {width} + 2*padding {padding} smaller than kernel {kw}"),
            );
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            stride,
            padding,
            out_height: (height + 2 * padding - kh) / stride + 1,
            out_width: (width + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height, self.out_width]
    }
}

/// Output columns `lo..hi` whose input column `ox·s + kj − p` lies inside a row of width `w`.
fn valid_span(w: usize, out_w: usize, kj: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kj).div_ceil(s);
    let hi = if w + p > kj {
        ((w - 1 + p - kj) / s + 1).min(out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Doubles allowed in one unrolled block. Batches are unrolled a few
/// samples at a time so the buffer stays in cache.
const BLOCK_BUDGET: usize = 1 << 13;

/// Samples per unrolled block.
fn block_len(g: &ConvGeom) -> usize {
    (BLOCK_BUDGET / (g.patch_len() * g.out_plane()).max(1)).clamp(1, g.batch.max(1))
}

/// Unrolls the patches of samples `n0..n1` into a `(C·k·k) × (b·Ho·Wo)`
/// row-major matrix, `b = n1 − n0`.
fn im2col(x: &[f64], g: &ConvGeom, n0: usize, n1: usize, cols: &mut Vec<f64>) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let in_plane = g.height * g.width;
    cols.clear();
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_span(g.width, g.out_width, kj, s, p);
                for n in n0..n1 {
                    let src = &x[(n * g.in_channels + c) * in_plane..][..in_plane];
                    for oy in 0..g.out_height {
                        let iy = (oy * s + ki).wrapping_sub(p);
                        if iy >= g.height {
                            cols.extend(std::iter::repeat_n(0.0, g.out_width));
                            continue;
                        }
                        let row = &src[iy * g.width..][..g.width];
                        cols.extend(std::iter::repeat_n(0.0, lo));
                        if s == 1 {
                            let x0 = lo + kj - p;
                            cols.extend_from_slice(&row[x0..x0 + hi - lo]);
                        } else {
                            cols.extend((lo..hi).map(|ox| row[ox * s + kj - p]));
                        }
                        cols.extend(std::iter::repeat_n(0.0, g.out_width - hi));
                    }
                }
            }
        }
    }
}

/// Scatter-adds an unrolled gradient of samples `n0..n1` back onto the
/// input layout (adjoint of `im2col`).
fn col2im(cols: &[f64], g: &ConvGeom, n0: usize, n1: usize, dx: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = g.out_plane();
    let ncols = (n1 - n0) * plane;
    let in_plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_span(g.width, g.out_width, kj, s, p);
                let row = (c * k + ki) * k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in n0..n1 {
                    let dst = &mut dx[(n * g.in_channels + c) * in_plane..][..in_plane];
                    let src = &src_row[(n - n0) * plane..][..plane];
                    for oy in 0..g.out_height {
                        let iy = (oy * s + ki).wrapping_sub(p);
                        if iy >= g.height {
                            continue;
                        }
                        let dst_row = &mut dst[iy * g.width..][..g.width];
                        let src_row = &src[oy * g.out_width..][lo..hi];
                        if s == 1 {
                            let x0 = lo + kj - p;
                            for (d, v) in dst_row[x0..x0 + hi - lo].iter_mut().zip(src_row) {
                                *d += v;
                            }
                        } else {
                            for (ox, v) in (lo..hi).zip(src_row) {
                                dst_row[ox * s + kj - p] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(ki, kj, oy, iy, x0, lo, hi)` for every kernel tap and output row
/// of a unit-stride layer whose input row `iy` is inside the image. Output
/// columns `lo..hi` read input columns `x0..x0 + hi - lo`.
fn unit_stride_taps(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
    let (k, p) = (g.kernel, g.padding);
    for ki in 0..k {
        for kj in 0..k {
            let (lo, hi) = valid_span(g.width, g.out_width, kj, 1, p);
            for oy in 0..g.out_height {
                let iy = (oy + ki).wrapping_sub(p);
                if iy < g.height && lo < hi {
                    f(ki, kj, oy, iy, lo + kj - p, lo, hi);
                }
            }
        }
    }
}

/// Input gradient by direct scatter of every kernel tap.
fn direct_input_grad(dout: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.kernel * g.kernel;
    let (in_plane, plane) = (g.height * g.width, g.out_plane());
    let mut dx = vec![0.0; g.batch * g.in_channels * in_plane];
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let dst = &mut dx[(n * g.in_channels + c) * in_plane..][..in_plane];
            for o in 0..g.out_channels {
                let dy = &dout[(n * g.out_channels + o) * plane..][..plane];
                let taps = &w[(o * g.in_channels + c) * kk..][..kk];
                unit_stride_taps(g, |ki, kj, oy, iy, x0, lo, hi| {
                    let wv = taps[ki * g.kernel + kj];
                    let d = &mut dst[iy * g.width + x0..][..hi - lo];
                    for (d, v) in d.iter_mut().zip(&dy[oy * g.out_width..][lo..hi]) {
                        *d += wv * v;
                    }
                });
            }
        }
    }
    dx
}

/// Forward pass.
pub(crate) fn forward(x: &Tensor, weights: &Tensor, bias: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let plane = g.out_plane();
    let kk = g.patch_len();
    let step = block_len(g);
    let mut out = vec![0.0; g.batch * g.out_channels * plane];
    let (mut cols, mut tmp) = (Vec::new(), Vec::new());
    for n0 in (0..g.batch).step_by(step) {
        let n1 = (n0 + step).min(g.batch);
        let ncols = (n1 - n0) * plane;
        im2col(x.data(), g, n0, n1, &mut cols);
        // O × (b·P), then scattered into b × O × P
        tmp.resize(g.out_channels * ncols, 0.0);
        gemm(
            g.out_channels,
            kk,
            ncols,
            weights.data(),
            (kk, 1),
            &cols,
            (ncols, 1),
            0.0,
            &mut tmp,
            (ncols, 1),
        );
        for o in 0..g.out_channels {
            let bo = bias.map_or(0.0, |b| b.data()[o]);
            let src = &tmp[o * ncols..(o + 1) * ncols];
            for n in n0..n1 {
                let dst = &mut out[(n * g.out_channels + o) * plane..][..plane];
                for (d, s) in dst.iter_mut().zip(&src[(n - n0) * plane..][..plane]) {
                    *d = s + bo;
                }
            }
        }
    }
    Tensor::new(g.output_shape(), out).expect("conv output shape")
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub bias: Vec<f64>,
}

pub(crate) fn backward(
    dout: &[f64],
    input: &[f64],
    weights: &Tensor,
    g: &ConvGeom,
    want_input: bool,
    want_weights: bool,
) -> ConvGrads {
    let plane = g.out_plane();
    let kk = g.patch_len();
    let bias = (0..g.out_channels)
        .map(|o| {
            (0..g.batch)
                .map(|n| dout[(n * g.out_channels + o) * plane..][..plane].iter().sum::<f64>())
                .sum()
        })
        .collect();
    let scatter = want_input && !direct(g);
    let mut dw = want_weights.then(|| vec![0.0; g.out_channels * kk]);
    let mut dx = scatter.then(|| vec![0.0; g.batch * g.in_channels * g.height * g.width]);
    if want_weights || scatter {
        let step = block_len(g);
        let (mut dmat, mut cols, mut dcols) = (Vec::new(), Vec::new(), Vec::new());
        for n0 in (0..g.batch).step_by(step) {
            let n1 = (n0 + step).min(g.batch);
            let ncols = (n1 - n0) * plane;
            // gather dOut into O × (b·P)
            dmat.clear();
            for o in 0..g.out_channels {
                for n in n0..n1 {
                    dmat.extend_from_slice(&dout[(n * g.out_channels + o) * plane..][..plane]);
                }
            }
            if let Some(dw) = dw.as_mut() {
                // dW += dOut · colsᵀ
                im2col(input, g, n0, n1, &mut cols);
                gemm(
                    g.out_channels,
                    ncols,
                    kk,
                    &dmat,
                    (ncols, 1),
                    &cols,
                    (1, ncols),
                    1.0,
                    dw,
                    (kk, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = Wᵀ · dOut
                dcols.resize(kk * ncols, 0.0);
                gemm(
                    kk,
                    g.out_channels,
                    ncols,
                    weights.data(),
                    (1, kk),
                    &dmat,
                    (ncols, 1),
                    0.0,
                    &mut dcols,
                    (ncols, 1),
                );
                col2im(&dcols, g, n0, n1, dx);
            }
        }
    }
    if want_input && direct(g) {
        dx = Some(direct_input_grad(dout, weights.data(), g));
    }
    ConvGrads {
        input: dx,
        weights: dw,
        bias,
    }
}

/// 2-D convolution over an NCHW batch with an `O×C×k×k` kernel.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), weights.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return shape_err(
                "conv2d",
                format!("bias length {} != output channels {}", b.len(), g.out_channels),
            );
        }
    }
    Ok(forward(input, weights, bias, &g))
}
