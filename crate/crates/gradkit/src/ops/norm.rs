use crate::error::{GradError, Result};
use crate::tensor::Tensor;

/// Where batch norm takes its normalisation statistics from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormMode {
    /// Statistics of the current batch; running statistics are updated.
    Train,
    /// Running statistics. Bit-reproducible and independent of batch composition.
    EvalDeterministic,
    /// Statistics of a reference mini-batch supplied by the caller (Monte Carlo batch norm).
    EvalStochastic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: NormMode,
}

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            mode: NormMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds a batch estimate into the running statistics.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Per-channel mean and biased variance of an NCHW tensor over N, H and W.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x.data()[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        let mu = s / count;
        let mut ss = 0.0;
        for b in 0..n {
            ss += x.data()[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / count;
    }
    Ok((mean, var))
}

pub(crate) struct Normalized {
    pub out: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn normalize(
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    epsilon: f64,
    gamma: &[f64],
    beta: &[f64],
) -> Normalized {
    let (n, c, h, w) = x.dims4().expect("normalize on NCHW");
    let plane = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + plane {
                let z = (x.data()[i] - mu) * is;
                xhat[i] = z;
                out[i] = z * g + bt;
            }
        }
    }
    Normalized {
        out: Tensor::new(x.shape().to_vec(), out).expect("same shape"),
        xhat,
        inv_std,
    }
}

pub(crate) struct NormGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Backward of batch norm. `batch_stats` selects whether the statistics were
/// computed from the normalised batch itself (and so depend on the input).
pub(crate) fn backward(
    dy: &[f64],
    shape: &[usize],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    batch_stats: bool,
) -> NormGrads {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            if batch_stats {
                let (sdy, sdyx) = (dbeta[ch] / count, dgamma[ch] / count);
                for i in off..off + plane {
                    dx[i] = scale * (dy[i] - sdy - xhat[i] * sdyx);
                }
            } else {
                for i in off..off + plane {
                    dx[i] = scale * dy[i];
                }
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Applies batch norm according to `state.mode`.
///
/// In `Train` mode the running statistics of `state` are updated. In
/// `EvalStochastic` mode `reference` must hold at least two samples, and its
/// per-channel statistics are used to normalise `input`.
pub fn batchnorm_forward(input: &Tensor, state: &mut BatchNormState, reference: Option<&Tensor>) -> Result<Tensor> {
    let (_, c, _, _) = input.dims4()?;
    if c != state.channels() {
        return Err(GradError::Shape {
            op: "batchnorm",
            detail: format!("input channels {c} != state channels {}", state.channels()),
        });
    }
    let (mean, var) = match state.mode {
        NormMode::Train => {
            let (mean, var) = channel_stats(input)?;
            state.update_running(&mean, &var);
            (mean, var)
        }
        NormMode::EvalDeterministic => (state.running_mean.data().to_vec(), state.running_var.data().to_vec()),
        NormMode::EvalStochastic => reference_stats(reference, c)?,
    };
    Ok(normalize(input, &mean, &var, state.epsilon, state.gamma.data(), state.beta.data()).out)
}

/// Statistics of a Monte Carlo reference batch.
pub fn reference_stats(reference: Option<&Tensor>, channels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = reference.ok_or_else(|| GradError::BatchNorm("stochastic mode requires a reference batch".into()))?;
    let (n, rc, _, _) = r.dims4()?;
    if n < 2 {
        return Err(GradError::BatchNorm(format!(
            "reference batch has {n} sample(s); at least 2 are needed for a batch variance"
        )));
    }
    if rc != channels {
        return Err(GradError::Shape {
            op: "batchnorm",
            detail: format!("reference channels {rc} != input channels {channels}"),
        });
    }
    channel_stats(r)
}
