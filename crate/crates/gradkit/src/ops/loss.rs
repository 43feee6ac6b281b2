use crate::error::{shape_err, GradError, Result};
use crate::tensor::Tensor;

/// Softmax over the class axis (axis 1) of an `N×C×H×W` tensor, log-sum-exp stabilised.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..c {
                mx = mx.max(x[base + k * plane + p]);
            }
            let mut z = 0.0;
            for k in 0..c {
                let e = (x[base + k * plane + p] - mx).exp();
                out[base + k * plane + p] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * plane + p] /= z;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(dy: &[f64], probs: &Tensor) -> Vec<f64> {
    let s = probs.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let y = probs.data();
    let mut dx = vec![0.0; y.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let dot: f64 = (0..c).map(|k| dy[base + k * plane + p] * y[base + k * plane + p]).sum();
            for k in 0..c {
                let i = base + k * plane + p;
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
    }
    dx
}

pub(crate) struct CrossEntropy {
    pub loss: f64,
    pub probs: Tensor,
}

pub(crate) fn validate_ce(logits: &Tensor, labels: &[usize], weights: &[f64]) -> Result<()> {
    let (n, c, h, w) = logits.dims4()?;
    if labels.len() != n * h * w {
        return shape_err(
            "weighted_cross_entropy",
            format!("{} labels for {n}x{h}x{w} pixels", labels.len()),
        );
    }
    if weights.len() != c {
        return shape_err(
            "weighted_cross_entropy",
            format!("{} class weights for {c} classes", weights.len()),
        );
    }
    if let Some(&wt) = weights.iter().find(|w| !(**w > 0.0)) {
        return Err(GradError::BadWeight(wt));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(GradError::LabelOutOfRange { label, classes: c });
    }
    Ok(())
}

/// Mean over pixels of `weight[label] · -log softmax(logits)[label]`.
pub(crate) fn cross_entropy(logits: &Tensor, labels: &[usize], weights: &[f64]) -> CrossEntropy {
    let s = logits.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let x = logits.data();
    let mut probs = vec![0.0; x.len()];
    let mut total = 0.0;
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut arg = 0;
            for k in 1..c {
                if x[base + k * plane + p] > x[base + arg * plane + p] {
                    arg = k;
                }
            }
            let mx = x[base + arg * plane + p];
            // the max term contributes exactly 1; ln_1p keeps tiny losses accurate
            let mut rest = 0.0;
            for k in 0..c {
                let e = if k == arg {
                    1.0
                } else {
                    (x[base + k * plane + p] - mx).exp()
                };
                probs[base + k * plane + p] = e;
                if k != arg {
                    rest += e;
                }
            }
            let z = 1.0 + rest;
            let y = labels[b * plane + p];
            total += weights[y] * ((mx - x[base + y * plane + p]) + rest.ln_1p());
            for k in 0..c {
                probs[base + k * plane + p] /= z;
            }
        }
    }
    CrossEntropy {
        loss: total / (n * plane) as f64,
        probs: Tensor::new(s.to_vec(), probs).expect("same shape"),
    }
}

pub(crate) fn cross_entropy_backward(upstream: f64, probs: &Tensor, labels: &[usize], weights: &[f64]) -> Vec<f64> {
    let s = probs.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let scale = upstream / (n * plane) as f64;
    let mut dx = probs.data().to_vec();
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let y = labels[b * plane + p];
            let wy = weights[y] * scale;
            for k in 0..c {
                dx[base + k * plane + p] *= wy;
            }
            dx[base + y * plane + p] -= wy;
        }
    }
    dx
}

/// Weighted pixel-wise cross-entropy of `N×C×H×W` logits against `N·H·W` class ids.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[usize], class_weights: &[f64]) -> Result<f64> {
    validate_ce(logits, labels, class_weights)?;
    Ok(cross_entropy(logits, labels, class_weights).loss)
}
