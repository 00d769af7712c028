use crate::error::{Error, Result};
use crate::volcore::{Backward, Real, Tensor, Var, LOG_CLAMP};

fn check_binary<T: Real>(op: &'static str, y: &Tensor<T>) -> Result<()> {
    match y.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(Error::InvalidArgument(format!("{op}: target value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

fn clamped_ln<T: Real>(x: T) -> T {
    x.max(T::lit(LOG_CLAMP)).ln()
}

struct BceRule<T: Real> {
    target: Tensor<T>,
}

impl<T: Real> Backward<T> for BceRule<T> {
    fn name(&self) -> &'static str {
        "bce_loss"
    }

    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let floor = T::lit(LOG_CLAMP);
        let scale = g.item() / T::lit(inputs[0].len() as f64);
        let grad = inputs[0]
            .zip_map(&self.target, |p, y| {
                let q = T::one() - p;
                let mut d = T::zero();
                if p > floor {
                    d -= y / p;
                }
                if q > floor {
                    d += (T::one() - y) / q;
                }
                d * scale
            })
            .expect("shapes checked in forward");
        vec![Some(grad)]
    }
}

/// Mean binary cross-entropy of probabilities `p` against a binary target.
///
/// Both `p` and `1 - p` are floored at `1e-12` before the logarithm, so the
/// loss never exceeds `-ln(1e-12)` per element and saturated entries stop
/// contributing gradient.
pub fn bce_loss<'t, T: Real>(p: Var<'t, T>, y: &Tensor<T>) -> Result<Var<'t, T>> {
    let pv = p.value();
    if pv.shape() != y.shape() {
        return Err(Error::shape("bce_loss", pv.shape(), y.shape()));
    }
    check_binary("bce_loss", y)?;
    if pv.is_empty() {
        return Err(Error::InvalidArgument("bce_loss: empty input".into()));
    }
    let total: T = pv
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| y * clamped_ln(p) + (T::one() - y) * clamped_ln(T::one() - p))
        .sum();
    let loss = -total / T::lit(pv.len() as f64);
    p.tape().record(&[p], Tensor::scalar(loss), BceRule { target: y.clone() })
}

fn check_one_hot<T: Real>(op: &'static str, probs: &[usize], y: &Tensor<T>) -> Result<()> {
    if probs != y.shape() || probs.len() != 2 {
        return Err(Error::shape(op, probs, y.shape()));
    }
    check_binary(op, y)?;
    let c = probs[1];
    for (row, chunk) in y.data().chunks(c).enumerate() {
        if chunk.iter().filter(|&&v| v == T::one()).count() != 1 {
            return Err(Error::InvalidArgument(format!("{op}: row {row} of the target is not one-hot")));
        }
    }
    Ok(())
}

struct CategoricalRule<T: Real> {
    target: Tensor<T>,
}

impl<T: Real> Backward<T> for CategoricalRule<T> {
    fn name(&self) -> &'static str {
        "categorical_ce"
    }

    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let floor = T::lit(LOG_CLAMP);
        let scale = g.item() / T::lit(inputs[0].shape()[0] as f64);
        let grad = inputs[0]
            .zip_map(&self.target, |p, y| if p > floor { -y / p * scale } else { T::zero() })
            .expect("shapes checked in forward");
        vec![Some(grad)]
    }
}

/// Cross-entropy `-Σ y log ŷ` of probability rows `[N, C]` against one-hot
/// rows, averaged over the batch. Probabilities are floored at `1e-12`.
pub fn categorical_ce<'t, T: Real>(probs: Var<'t, T>, y: &Tensor<T>) -> Result<Var<'t, T>> {
    let pv = probs.value();
    check_one_hot("categorical_ce", pv.shape(), y)?;
    let n = pv.shape()[0];
    let total: T = pv.data().iter().zip(y.data()).map(|(&p, &y)| y * clamped_ln(p)).sum();
    probs
        .tape()
        .record(&[probs], Tensor::scalar(-total / T::lit(n as f64)), CategoricalRule { target: y.clone() })
}

struct SoftmaxCeRule<T: Real> {
    target: Tensor<T>,
    probs: Tensor<T>,
}

impl<T: Real> Backward<T> for SoftmaxCeRule<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let scale = g.item() / T::lit(self.probs.shape()[0] as f64);
        let grad = self.probs.zip_map(&self.target, |p, y| (p - y) * scale).expect("same shape");
        vec![Some(grad)]
    }
}

/// Softmax over the last axis of `logits[N, C]` followed by
/// [`categorical_ce`], computed from the log-sum-exp so that confidently
/// wrong rows keep a gradient of `ŷ - y` instead of vanishing at the clamp.
pub fn softmax_cross_entropy<'t, T: Real>(logits: Var<'t, T>, y: &Tensor<T>) -> Result<Var<'t, T>> {
    let lv = logits.value();
    check_one_hot("softmax_cross_entropy", lv.shape(), y)?;
    let (n, c) = (lv.shape()[0], lv.shape()[1]);
    let mut probs = Vec::with_capacity(n * c);
    let mut total = T::zero();
    for (row, target) in lv.data().chunks(c).zip(y.data().chunks(c)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
        for (&z, &t) in row.iter().zip(target) {
            let log_p = z - lse;
            probs.push(log_p.exp());
            total -= t * log_p.max(T::lit(LOG_CLAMP).ln());
        }
    }
    let rule = SoftmaxCeRule {
        target: y.clone(),
        probs: Tensor::new(lv.shape().to_vec(), probs)?,
    };
    logits.tape().record(&[logits], Tensor::scalar(total / T::lit(n as f64)), rule)
}

/// One-hot rows `[N, n_classes]` for integer labels.
pub fn one_hot<T: Real>(labels: &[usize], n_classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {n_classes} classes")));
    }
    Ok(Tensor::from_fn([labels.len(), n_classes], |i| {
        if labels[i / n_classes] == i % n_classes {
            T::one()
        } else {
            T::zero()
        }
    }))
}
