//! Shape-moving ops: nearest upsampling, channel concatenation and the
//! batch→channel fold used to join two encoder branches.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for (plane_in, plane_out) in x.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            let src = &plane_in[(y / 2) * w..][..w];
            let dst = &mut plane_out[y * w2..][..w2];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

pub(crate) fn upsample2_backward(dy: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let w2 = 2 * w;
    let mut dx = vec![0.0; in_shape.iter().product()];
    for (plane_in, plane_out) in dx.chunks_mut(h * w).zip(dy.chunks(4 * h * w)) {
        for (y, row) in plane_out.chunks(w2).enumerate() {
            let dst = &mut plane_in[(y / 2) * w..][..w];
            for (xx, v) in row.iter().enumerate() {
                dst[xx / 2] += v;
            }
        }
    }
    dx
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return shape_err("concat_channels", "no inputs");
    };
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return shape_err(
                "concat_channels",
                format!("part {:?} incompatible with {:?}", p.shape(), first.shape()),
            );
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[b * pc * plane..(b + 1) * pc * plane]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

pub(crate) fn concat_channels_backward(dy: &[f64], shapes: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let (n, plane) = (shapes[0][0], shapes[0][2] * shapes[0][3]);
    let total_c: usize = shapes.iter().map(|s| s[1]).sum();
    let mut grads: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for b in 0..n {
        let mut off = b * total_c * plane;
        for (g, s) in grads.iter_mut().zip(shapes) {
            let len = s[1] * plane;
            g.extend_from_slice(&dy[off..off + len]);
            off += len;
        }
    }
    grads
}

/// Maps a `2N×C×H×W` batch (first half, second half) onto `N×2C×H×W`, placing
/// sample `i`'s channels before those of sample `N + i`.
pub fn fold_batch(x: &Tensor) -> Result<Tensor> {
    let (n2, c, h, w) = x.dims4()?;
    if n2 % 2 != 0 {
        return shape_err("fold_batch", format!("batch {n2} is odd"));
    }
    let n = n2 / 2;
    let first = x.batch_slice(0, n)?;
    let second = x.batch_slice(n, n2)?;
    let _ = (c, h, w);
    concat_channels(&[&first, &second])
}

pub(crate) fn fold_batch_backward(dy: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let (n2, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let half = vec![n2 / 2, c, h, w];
    let parts = concat_channels_backward(dy, &[half.clone(), half]);
    parts.concat()
}
