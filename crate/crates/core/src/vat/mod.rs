//! Virtual adversarial training.
//!
//! For an input `x` and the model's own prediction `p(y | x)` taken as a
//! constant target (the *virtual label*), the virtual adversarial direction
//! is the unit vector `d` that maximizes `KL(p(y | x) || p(y | x + eps * d))`.
//! It is estimated with power iteration on the KL's curvature: start from a
//! random unit `d`, take the gradient of the KL at the probe `x + xi * d`
//! with respect to `d`, renormalize, repeat.
//!
//! The local distribution smoothness (LDS) of a sample is the KL at the
//! perturbed input `x + eps * r_adv`. Its batch mean over unlabeled samples
//! is the regularizer added to the supervised cross-entropy.
//!
//! All forwards inside this module run batch norm on batch statistics
//! without updating the running estimates.

use crate::autodiff::{Distribution, Graph, NormMode, Var};
use crate::error::{Error, Result};
use crate::model::{BoundParams, Model};
use crate::rng::Rng;
use crate::tensor::{Tensor, MIN_DIRECTION_NORM};

/// Batch-norm mode for every forward pass made on behalf of VAT.
pub const VAT_NORM_MODE: NormMode = NormMode::Train {
    update_stats: false,
};

#[derive(Clone, Debug, PartialEq)]
pub struct VatConfig {
    /// L2 norm of the applied perturbation.
    pub epsilon: f64,
    /// Probe scale used during power iteration.
    pub xi: f64,
    pub power_iterations: usize,
    /// Weight of the regularizer in the combined loss.
    pub alpha: f64,
    /// Also apply the regularizer to labeled samples.
    pub include_labeled: bool,
}

impl Default for VatConfig {
    fn default() -> Self {
        VatConfig {
            epsilon: 2.5,
            xi: 10.0,
            power_iterations: 1,
            alpha: 1.0,
            include_labeled: false,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("vat.epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.xi > 0.0) {
            return Err(Error::Config(format!("vat.xi must be > 0, got {}", self.xi)));
        }
        if self.power_iterations < 1 {
            return Err(Error::Config("vat.power_iterations must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("vat.alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// The model's clean-input prediction, detached from differentiation.
pub fn virtual_label(model: &Model, x: &Tensor) -> Result<Distribution> {
    Distribution::from_logits(&model.logits(x, VAT_NORM_MODE)?)
}

/// Output of [`estimate_r_adv`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialDirection {
    /// Per-sample unit vectors, same dims as the input.
    pub direction: Tensor,
    /// Samples whose KL gradient vanished and whose start direction was
    /// redrawn.
    pub resampled: usize,
    /// Samples whose gradient vanished even after the redraw. Their returned
    /// direction is the redrawn random one.
    pub degenerate: Vec<bool>,
}

impl AdversarialDirection {
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}

/// Draws per-sample standard-normal directions scaled to unit norm.
pub fn random_unit_directions(dims: &[usize], rng: &mut Rng) -> Tensor {
    let mut d = Tensor::from_fn(dims, |_| rng.normal());
    for b in 0..d.batch() {
        normalize_item(&mut d, b, rng);
    }
    d
}

/// Normalizes item `b` in place, redrawing it until its norm is usable.
fn normalize_item(d: &mut Tensor, b: usize, rng: &mut Rng) {
    loop {
        let norm = d.item(b).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > MIN_DIRECTION_NORM {
            d.item_mut(b).iter_mut().for_each(|v| *v /= norm);
            return;
        }
        d.item_mut(b).iter_mut().for_each(|v| *v = rng.normal());
    }
}

/// Gradient of `KL(target || p(. | x + xi * d))` with respect to `d`.
fn kl_gradient(model: &Model, x: &Tensor, target: &Distribution, d: &Tensor, xi: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let dv = g.variable(d.clone());
    let probe = g.add_scaled(xv, dv, xi)?;
    let pass = model.forward(&mut g, &bound, probe, VAT_NORM_MODE)?;
    let kl = g.kl_divergence(target, pass.logits)?;
    g.backward(kl)?;
    Tensor::new(d.dims(), g.grad(dv).expect("direction is a variable").to_vec())
}

/// Estimates the virtual adversarial direction of every sample in `x`.
pub fn estimate_r_adv(model: &Model, x: &Tensor, cfg: &VatConfig, rng: &mut Rng) -> Result<AdversarialDirection> {
    let target = virtual_label(model, x)?;
    let start = random_unit_directions(x.dims(), rng);
    estimate_r_adv_from(model, x, &target, start, cfg, rng)
}

/// Power iteration from a given unit start direction.
pub fn estimate_r_adv_from(
    model: &Model,
    x: &Tensor,
    target: &Distribution,
    start: Tensor,
    cfg: &VatConfig,
    rng: &mut Rng,
) -> Result<AdversarialDirection> {
    if start.dims() != x.dims() {
        return Err(Error::Shape(format!(
            "start direction {:?} does not match input {:?}",
            start.dims(),
            x.dims()
        )));
    }
    let batch = x.batch();
    let mut d = start;
    let mut resampled = 0;
    let mut degenerate = vec![false; batch];
    for _ in 0..cfg.power_iterations {
        let mut grad = kl_gradient(model, x, target, &d, cfg.xi)?;
        let stuck: Vec<usize> = grad
            .item_norms()
            .iter()
            .enumerate()
            .filter(|(_, &n)| !(n > MIN_DIRECTION_NORM))
            .map(|(b, _)| b)
            .collect();
        if !stuck.is_empty() {
            for &b in &stuck {
                d.item_mut(b).iter_mut().for_each(|v| *v = rng.normal());
                normalize_item(&mut d, b, rng);
            }
            resampled += stuck.len();
            let retry = kl_gradient(model, x, target, &d, cfg.xi)?;
            let retry_norms = retry.item_norms();
            for &b in &stuck {
                if retry_norms[b] > MIN_DIRECTION_NORM {
                    grad.item_mut(b).copy_from_slice(retry.item(b));
                } else {
                    degenerate[b] = true;
                }
            }
        }
        let norms = grad.item_norms();
        for b in 0..batch {
            if norms[b] > MIN_DIRECTION_NORM {
                let n = norms[b];
                d.item_mut(b)
                    .iter_mut()
                    .zip(grad.item(b))
                    .for_each(|(dv, gv)| *dv = gv / n);
            }
        }
    }
    if degenerate.iter().any(|&x| x) {
        log::debug!(
            "VAT direction degenerate for {} of {batch} samples",
            degenerate.iter().filter(|&&x| x).count()
        );
    }
    Ok(AdversarialDirection {
        direction: d,
        resampled,
        degenerate,
    })
}

/// `KL(target || p(. | x + eps * r_adv))` built into `g`. Gradients reach the
/// parameters only through the perturbed branch.
pub fn lds_value(
    g: &mut Graph,
    model: &Model,
    bound: &BoundParams,
    x: &Tensor,
    r_adv: &Tensor,
    cfg: &VatConfig,
) -> Result<Var> {
    let target = virtual_label(model, x)?;
    lds_with_target(g, model, bound, x, &target, r_adv, cfg.epsilon)
}

fn lds_with_target(
    g: &mut Graph,
    model: &Model,
    bound: &BoundParams,
    x: &Tensor,
    target: &Distribution,
    r_adv: &Tensor,
    epsilon: f64,
) -> Result<Var> {
    let perturbed = g.constant(x.add_scaled(r_adv, epsilon)?);
    let pass = model.forward(g, bound, perturbed, VAT_NORM_MODE)?;
    g.kl_divergence(target, pass.logits)
}

/// Output of [`vat_regularizer`].
pub struct VatLoss {
    /// Batch mean of the per-sample LDS.
    pub loss: Var,
    pub direction: AdversarialDirection,
}

/// Mean LDS over a batch of unlabeled samples, with freshly estimated
/// directions.
pub fn vat_regularizer(
    g: &mut Graph,
    model: &Model,
    bound: &BoundParams,
    unlabeled: &Tensor,
    cfg: &VatConfig,
    rng: &mut Rng,
) -> Result<VatLoss> {
    let start = random_unit_directions(unlabeled.dims(), rng);
    vat_regularizer_from(g, model, bound, unlabeled, start, cfg, rng)
}

/// [`vat_regularizer`] with caller-supplied start directions.
pub fn vat_regularizer_from(
    g: &mut Graph,
    model: &Model,
    bound: &BoundParams,
    unlabeled: &Tensor,
    start: Tensor,
    cfg: &VatConfig,
    rng: &mut Rng,
) -> Result<VatLoss> {
    if unlabeled.is_empty() {
        return Err(Error::Shape("VAT regularizer needs a nonempty batch".into()));
    }
    let target = virtual_label(model, unlabeled)?;
    let direction = estimate_r_adv_from(model, unlabeled, &target, start, cfg, rng)?;
    let loss = lds_with_target(g, model, bound, unlabeled, &target, &direction.direction, cfg.epsilon)?;
    Ok(VatLoss { loss, direction })
}

/// `ce + alpha * r_adv`.
pub fn combined_loss(g: &mut Graph, ce: Var, r_adv: Var, alpha: f64) -> Result<Var> {
    g.add_scaled(ce, r_adv, alpha)
}

#[cfg(test)]
mod tests;
