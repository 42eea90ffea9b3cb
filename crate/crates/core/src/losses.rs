//! Loss terms of the training objective and their weighted combination.
//!
//! Every L1 term is mean-reduced over all elements so the default weights do
//! not depend on image size. All functions are differentiable tensor
//! expressions and work in any float dtype.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarmonError, Result};
use crate::nets::standard_normal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cont: f64,
    pub lambda_ca: f64,
    pub lambda_sty: f64,
    pub lambda_cyc: f64,
    pub lambda_g: f64,
    pub lambda_id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cont: 10.0, lambda_ca: 0.01, lambda_sty: 10.0, lambda_cyc: 10.0, lambda_g: 0.1, lambda_id: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cont, self.lambda_ca, self.lambda_sty, self.lambda_cyc, self.lambda_g, self.lambda_id];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(HarmonError::invalid_config(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

/// Per-term switches for ablation runs. A disabled term is not computed into
/// the objective and is logged as 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub adv: bool,
    pub cont: bool,
    pub sty: bool,
    pub ca: bool,
    pub cyc: bool,
    pub id: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self { adv: true, cont: true, sty: true, ca: true, cyc: true, id: true }
    }
}

/// One training iteration's loss values; serialized as one JSON line per
/// iteration in the training log. `nash` is the mean discriminator
/// probability assigned to generated images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub cont: f64,
    pub sty: f64,
    pub ca: f64,
    pub cyc: f64,
    pub id: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub nash: f64,
}

impl LossReport {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("adv_d", self.adv_d),
            ("adv_g", self.adv_g),
            ("cont", self.cont),
            ("sty", self.sty),
            ("ca", self.ca),
            ("cyc", self.cyc),
            ("id", self.id),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Discriminator loss `-[log s(real) + log(1 - s(fake))]`, batch-averaged.
pub fn adversarial_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = softplus(&real_logits.neg()?)?.mean_all()?;
    let fake = softplus(fake_logits)?.mean_all()?;
    Ok((real + fake)?)
}

/// Non-saturating generator loss `-log s(fake)`.
pub fn adversarial_g_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(softplus(&fake_logits.neg()?)?.mean_all()?)
}

/// Scalar convenience form returning `(loss_d, loss_g)`.
pub fn adversarial_loss(real_logit: f64, fake_logit: f64) -> (f64, f64) {
    let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    (sp(-real_logit) + sp(fake_logit), sp(-fake_logit))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(HarmonError::invalid_arg(format!("{what}: shape {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn mean_abs_diff(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    same_shape(a, b, what)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn content_consistency_loss(c: &Tensor, c_tilde: &Tensor) -> Result<Tensor> {
    mean_abs_diff(c, c_tilde, "content consistency")
}

pub fn style_consistency_loss(s: &Tensor, s_tilde: &Tensor) -> Result<Tensor> {
    mean_abs_diff(s, s_tilde, "style consistency")
}

/// KL(N(c, I) || N(0, I)) per element, i.e. `0.5 * mean(c^2)`.
pub fn content_alignment_loss(c: &Tensor) -> Result<Tensor> {
    Ok((c.sqr()?.mean_all()? * 0.5)?)
}

/// Add unit Gaussian noise to a content code in training mode; identity otherwise.
pub fn perturb_content<R: Rng + ?Sized>(c: &Tensor, training: bool, rng: &mut R) -> Result<Tensor> {
    if !training {
        return Ok(c.clone());
    }
    let eta = standard_normal(c.dims(), rng)?.to_dtype(c.dtype())?;
    Ok((c + eta)?)
}

/// Forward differences along width and height of `[B, C, H, W]` with
/// replicate edges (the last column/row difference is 0), concatenated along
/// the channel axis: `[B, 2C, H, W]`.
pub fn image_gradients(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dx = if w > 1 {
        let d = (x.narrow(3, 1, w - 1)? - x.narrow(3, 0, w - 1)?)?;
        d.pad_with_zeros(D::Minus1, 0, 1)?
    } else {
        x.zeros_like()?
    };
    let dy = if h > 1 {
        let d = (x.narrow(2, 1, h - 1)? - x.narrow(2, 0, h - 1)?)?;
        d.pad_with_zeros(D::Minus2, 0, 1)?
    } else {
        x.zeros_like()?
    };
    Ok(Tensor::cat(&[dx, dy], 1)?)
}

/// `mean|x - x_hat| + lambda_g * mean|g(x) - g(x_hat)|`.
pub fn cycle_loss(x: &Tensor, x_hat: &Tensor, lambda_g: f64) -> Result<Tensor> {
    same_shape(x, x_hat, "cycle")?;
    let pixel = (x - x_hat)?.abs()?.mean_all()?;
    let grad = (image_gradients(x)? - image_gradients(x_hat)?)?.abs()?.mean_all()?;
    Ok((pixel + (grad * lambda_g)?)?)
}

pub fn identity_loss(x: &Tensor, x_bar: &Tensor) -> Result<Tensor> {
    mean_abs_diff(x, x_bar, "identity")
}

/// Values of the individual terms of one translation instance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<T> {
    pub adv_g: T,
    pub adv_d: T,
    pub cont: T,
    pub ca: T,
    pub sty: T,
    pub cyc: T,
    pub id: T,
}

/// `(total_g, total_d)`: the generator side gets the adversarial term plus the
/// weighted reconstruction terms; the discriminator only its adversarial term.
/// The gradient term's `lambda_g` is already inside `cyc`.
pub fn total_loss(t: &LossTerms<f64>, w: &LossWeights) -> (f64, f64) {
    let total_g = t.adv_g
        + w.lambda_cont * t.cont
        + w.lambda_ca * t.ca
        + w.lambda_sty * t.sty
        + w.lambda_cyc * t.cyc
        + w.lambda_id * t.id;
    (total_g, t.adv_d)
}

/// Tensor form of the generator-side objective; `None` terms are skipped.
pub fn total_generator_loss(t: &LossTerms<Option<Tensor>>, w: &LossWeights) -> Result<Tensor> {
    let weighted = [
        (&t.adv_g, 1.0),
        (&t.cont, w.lambda_cont),
        (&t.ca, w.lambda_ca),
        (&t.sty, w.lambda_sty),
        (&t.cyc, w.lambda_cyc),
        (&t.id, w.lambda_id),
    ];
    let mut total: Option<Tensor> = None;
    for (term, weight) in weighted {
        if let Some(v) = term {
            let v = (v * weight)?;
            total = Some(match total {
                Some(acc) => (acc + v)?,
                None => v,
            });
        }
    }
    total.ok_or_else(|| HarmonError::invalid_config("every generator loss term is disabled"))
}
