use crate::error::{Error, Result};
use crate::params::Mode;
use crate::volcore::{Backward, Real, Tensor, Var};

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for the running estimate.
    pub var_unbiased: Vec<T>,
}

struct BatchNormRule<T> {
    mode: Mode,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for BatchNormRule<T> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let inner: usize = x.shape()[2..].iter().product();
        let m = T::lit((n * inner) as f64);
        let gd = g.data();
        let mut gx = vec![T::zero(); x.len()];
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        for ch in 0..c {
            let idx = |b: usize| (b * c + ch) * inner..(b * c + ch + 1) * inner;
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for b in 0..n {
                for i in idx(b) {
                    sum_g += gd[i];
                    sum_gx += gd[i] * self.xhat[i];
                }
            }
            ggamma[ch] = sum_gx;
            gbeta[ch] = sum_g;
            let gam = gamma.data()[ch];
            let inv = self.inv_std[ch];
            for b in 0..n {
                for i in idx(b) {
                    gx[i] = match self.mode {
                        Mode::Eval => gd[i] * gam * inv,
                        Mode::Train => {
                            gam * inv / m * (m * gd[i] - sum_g - self.xhat[i] * sum_gx)
                        }
                    };
                }
            }
        }
        vec![
            Some(Tensor::from_parts(x.shape().to_vec(), gx)),
            Some(Tensor::from_parts(vec![c], ggamma)),
            Some(Tensor::from_parts(vec![c], gbeta)),
        ]
    }
}

/// `y = (x - μ) / sqrt(σ² + ε) · γ + β` over `x[N, C, ...]`, per channel.
///
/// Train mode uses biased batch statistics over the batch and spatial axes
/// and also returns them for the running estimate; eval mode uses
/// `running_mean` / `running_var`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<'t, T: Real>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    mode: Mode,
) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
    let xv = x.value();
    if xv.ndim() < 2 {
        return Err(Error::InvalidArgument(format!(
            "batchnorm expects [N, C, ...], got {:?}",
            xv.shape()
        )));
    }
    let (n, c) = (xv.shape()[0], xv.shape()[1]);
    for t in [&*gamma.value(), &*beta.value(), running_mean, running_var] {
        if t.shape() != [c] {
            return Err(Error::shape("batchnorm", &[c], t.shape()));
        }
    }
    if mode == Mode::Train && n < 2 {
        return Err(Error::InvalidArgument(
            "batchnorm in train mode needs a batch of at least 2".into(),
        ));
    }
    let inner: usize = xv.shape()[2..].iter().product();
    let m = n * inner;
    let xd = xv.data();
    let (gv, bv) = (gamma.value(), beta.value());

    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    match mode {
        Mode::Train => {
            for ch in 0..c {
                let vals = (0..n).flat_map(|b| (b * c + ch) * inner..(b * c + ch + 1) * inner);
                let mu = vals.clone().map(|i| xd[i]).sum::<T>() / T::lit(m as f64);
                let v = vals.map(|i| (xd[i] - mu) * (xd[i] - mu)).sum::<T>() / T::lit(m as f64);
                mean[ch] = mu;
                var[ch] = v;
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(running_mean.data());
            var.copy_from_slice(running_var.data());
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for (i, (&xi, (h, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
        let ch = (i / inner) % c;
        *h = (xi - mean[ch]) * inv_std[ch];
        *o = *h * gv.data()[ch] + bv.data()[ch];
    }
    let stats = (mode == Mode::Train).then(|| {
        let correction = T::lit(m as f64 / (m - 1).max(1) as f64);
        BatchStats {
            mean: mean.clone(),
            var_unbiased: var.iter().map(|&v| v * correction).collect(),
        }
    });
    let y = x.tape().record(
        &[x, gamma, beta],
        Tensor::from_parts(xv.shape().to_vec(), out),
        BatchNormRule { mode, xhat, inv_std },
    )?;
    Ok((y, stats))
}
