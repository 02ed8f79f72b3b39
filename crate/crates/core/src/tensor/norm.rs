use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormConfig {
    /// Weight of the current batch in the running-average update.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

/// Saved intermediates for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes `x` (`[n, c, h, w]`) per channel. In train mode the batch
/// statistics are used and folded into `state` (unbiased variance for the
/// running estimate); in eval mode the running statistics are used.
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    (n, c, plane): (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    state: &mut BatchNormState<T>,
    mode: NormMode,
    cfg: &BatchNormConfig,
) -> (Vec<T>, NormSaved<T>) {
    let eps = T::from_f64_lossy(cfg.eps);
    let count = n * plane;
    let mut inv_std = vec![T::zero(); c];
    let mut mean = vec![T::zero(); c];
    match mode {
        NormMode::Train => {
            let momentum = T::from_f64_lossy(cfg.momentum);
            let cnt = T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    for v in &x[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        s += *v;
                    }
                }
                let mu = s / cnt;
                let mut sq = T::zero();
                for b in 0..n {
                    for v in &x[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        let d = *v - mu;
                        sq += d * d;
                    }
                }
                let var = sq / cnt;
                mean[ch] = mu;
                inv_std[ch] = T::one() / (var + eps).sqrt();
                let unbiased = sq / T::from_usize(count - 1).unwrap();
                state.running_mean[ch] =
                    (T::one() - momentum) * state.running_mean[ch] + momentum * mu;
                state.running_var[ch] =
                    (T::one() - momentum) * state.running_var[ch] + momentum * unbiased;
            }
        }
        NormMode::Eval => {
            for ch in 0..c {
                mean[ch] = state.running_mean[ch];
                inv_std[ch] = T::one() / (state.running_var[ch] + eps).sqrt();
            }
        }
    }
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for ((xh, yv), xv) in xhat[range.clone()]
                .iter_mut()
                .zip(&mut y[range.clone()])
                .zip(&x[range])
            {
                *xh = (*xv - mu) * is;
                *yv = g * *xh + bt;
            }
        }
    }
    (y, NormSaved { xhat, inv_std })
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub(crate) fn backward<T: Scalar>(
    grad_out: &[T],
    (n, c, plane): (usize, usize, usize),
    gamma: &[T],
    saved: &NormSaved<T>,
    mode: NormMode,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for (g, xh) in grad_out[range.clone()].iter().zip(&saved.xhat[range]) {
                dbeta[ch] += *g;
                dgamma[ch] += *g * *xh;
            }
        }
    }
    let mut dx = vec![T::zero(); grad_out.len()];
    let cnt = T::from_usize(n * plane).unwrap();
    for ch in 0..c {
        let scale = gamma[ch] * saved.inv_std[ch];
        for b in 0..n {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for ((d, g), xh) in dx[range.clone()]
                .iter_mut()
                .zip(&grad_out[range.clone()])
                .zip(&saved.xhat[range])
            {
                *d = match mode {
                    // dx = gamma * inv_std / N * (N g - sum g - xhat * sum(g xhat))
                    NormMode::Train => {
                        scale * (*g - dbeta[ch] / cnt - *xh * dgamma[ch] / cnt)
                    }
                    NormMode::Eval => scale * *g,
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
