//! Training objectives and the optimizer.
//!
//! The adversarial terms use the classic cross-entropy objective over patch
//! logits; the generator side defaults to the non-saturating variant with
//! the literal saturating form behind a flag. The reconstruction term is an
//! L1 over the lower half of the frame only (the mouth region), feature
//! matching runs over discriminator intermediates, and the perceptual term
//! accepts any [`FeatureExtractor`] (the desk-scale default is a frozen
//! random conv stack).

use crate::autodiff::{join_path, Module, Param, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, InitRng};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanSide {
    Generator,
    Discriminator,
}

/// Cross-entropy adversarial loss over per-scale patch logits, averaged over
/// patches within a scale and over scales.
///
/// Discriminator side: mean softplus(-real) + softplus(fake).
/// Generator side (non-saturating): mean softplus(-fake);
/// saturating: -mean softplus(fake), the literal log(1 - D(G)) objective.
pub fn adversarial_loss<'t>(
    d_out_real: &[Tensor<'t>],
    d_out_fake: &[Tensor<'t>],
    side: GanSide,
    saturating: bool,
) -> Tensor<'t> {
    match side {
        GanSide::Discriminator => {
            assert_eq!(d_out_real.len(), d_out_fake.len());
            let mut acc: Option<Tensor> = None;
            for (r, f) in d_out_real.iter().zip(d_out_fake) {
                let term = r.neg().softplus().mean_all().add(&f.softplus().mean_all());
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term),
                });
            }
            acc.unwrap().scale(1.0 / d_out_real.len() as f64)
        }
        GanSide::Generator => {
            let mut acc: Option<Tensor> = None;
            for f in d_out_fake {
                let term = if saturating {
                    f.softplus().mean_all().neg()
                } else {
                    f.neg().softplus().mean_all()
                };
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term),
                });
            }
            acc.unwrap().scale(1.0 / d_out_fake.len() as f64)
        }
    }
}

/// Same cross-entropy form applied to the per-scale CAM logits.
pub fn cam_loss<'t>(
    cam_real: &[Tensor<'t>],
    cam_fake: &[Tensor<'t>],
    side: GanSide,
    saturating: bool,
) -> Tensor<'t> {
    adversarial_loss(cam_real, cam_fake, side, saturating)
}

/// Mean absolute difference over the lower half of the image only
/// (rows H/2 .. H, all channels).
pub fn recon_lower_half<'t>(real: &Tensor<'t>, fake: &Tensor<'t>) -> Result<Tensor<'t>> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let h = real.shape()[2];
    if h % 2 != 0 {
        return Err(Error::OddHeight(h));
    }
    let r = real.slice_axis(2, h / 2, h);
    let f = fake.slice_axis(2, h / 2, h);
    Ok(r.sub(&f).abs().mean_all())
}

/// Sum over scales and layers of the per-layer mean absolute difference
/// between real and fake discriminator features.
pub fn feature_matching_loss<'t>(
    d_features_real: &[Vec<Tensor<'t>>],
    d_features_fake: &[Vec<Tensor<'t>>],
) -> Result<Tensor<'t>> {
    if d_features_real.len() != d_features_fake.len() {
        return Err(Error::StructureMismatch(format!(
            "{} vs {} scales",
            d_features_real.len(),
            d_features_fake.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (scale_r, scale_f) in d_features_real.iter().zip(d_features_fake) {
        if scale_r.len() != scale_f.len() {
            return Err(Error::StructureMismatch(format!(
                "{} vs {} layers",
                scale_r.len(),
                scale_f.len()
            )));
        }
        for (r, f) in scale_r.iter().zip(scale_f) {
            if r.shape() != f.shape() {
                return Err(Error::StructureMismatch(format!(
                    "layer shapes {:?} vs {:?}",
                    r.shape(),
                    f.shape()
                )));
            }
            let term = r.sub(f).abs().mean_all();
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term),
            });
        }
    }
    acc.ok_or_else(|| Error::StructureMismatch("no feature layers".into()))
}

/// Deterministic, differentiable multi-layer feature producer.
pub trait FeatureExtractor {
    fn features<'t>(&self, x: &Tensor<'t>) -> Vec<Tensor<'t>>;
}

/// Frozen randomly initialized conv stack: a valid perceptual proxy at desk
/// scale, with the interface slot left open for a real pretrained extractor.
pub struct RandomConvExtractor {
    convs: Vec<Conv2d>,
}

impl RandomConvExtractor {
    pub fn new(in_channels: usize, rng: &mut InitRng) -> Self {
        let widths = [in_channels, 8, 16, 32];
        let convs: Vec<Conv2d> = (0..3)
            .map(|i| Conv2d::new(widths[i], widths[i + 1], 3, 2, 1, rng))
            .collect();
        for c in &convs {
            c.weight.freeze();
            c.bias.freeze();
        }
        RandomConvExtractor { convs }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features<'t>(&self, x: &Tensor<'t>) -> Vec<Tensor<'t>> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h).leaky_relu(0.2);
            out.push(h.clone());
        }
        out
    }
}

impl Module for RandomConvExtractor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_params(&join_path(prefix, &format!("conv{i}")), f);
        }
    }
}

/// lambda * sum_i mean |F_i(real) - F_i(fake)|.
pub fn perceptual_loss<'t>(
    real: &Tensor<'t>,
    fake: &Tensor<'t>,
    fx: Option<&dyn FeatureExtractor>,
    lambda: f64,
) -> Result<Tensor<'t>> {
    let fx = fx.ok_or(Error::ExtractorMissing)?;
    let fr = fx.features(real);
    let ff = fx.features(fake);
    let mut acc: Option<Tensor> = None;
    for (r, f) in fr.iter().zip(&ff) {
        let term = r.sub(f).abs().mean_all();
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    Ok(acc.expect("extractor produced no layers").scale(lambda))
}

/// Mean squared error, used for the keypoint-heatmap and optical-flow
/// predictor objectives.
pub fn predictor_mse_loss<'t>(pred: &Tensor<'t>, target: &Tensor<'t>) -> Result<Tensor<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.sub(target).square().mean_all())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_gan: f64,
    pub w_cam: f64,
    pub w_recon: f64,
    pub w_fm: f64,
    pub w_perc: f64,
    pub w_pred: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_gan: 1.0,
            w_cam: 1.0,
            w_recon: 10.0,
            w_fm: 10.0,
            w_perc: 1.0,
            w_pred: 10.0,
        }
    }
}

/// Individual generator-side loss terms; any absent term contributes zero.
pub struct GeneratorLossParts<'t> {
    pub gan: Option<Tensor<'t>>,
    pub cam: Option<Tensor<'t>>,
    pub recon: Option<Tensor<'t>>,
    pub fm: Option<Tensor<'t>>,
    pub perc: Option<Tensor<'t>>,
    pub pred: Option<Tensor<'t>>,
}

/// Weighted sum of the parts plus per-component values for logging.
pub fn total_generator_loss<'t>(
    parts: &GeneratorLossParts<'t>,
    weights: &LossWeights,
) -> (Tensor<'t>, Vec<(&'static str, f64)>) {
    let terms: [(&'static str, &Option<Tensor<'t>>, f64); 6] = [
        ("gan", &parts.gan, weights.w_gan),
        ("cam", &parts.cam, weights.w_cam),
        ("recon", &parts.recon, weights.w_recon),
        ("fm", &parts.fm, weights.w_fm),
        ("perc", &parts.perc, weights.w_perc),
        ("pred", &parts.pred, weights.w_pred),
    ];
    let mut log = Vec::new();
    let mut acc: Option<Tensor<'t>> = None;
    let mut tape = None;
    for (name, t, w) in terms {
        if let Some(t) = t {
            tape = Some(t.tape());
            log.push((name, t.item()));
            let scaled = t.scale(w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => a.add(&scaled),
            });
        } else {
            log.push((name, 0.0));
        }
    }
    let total = match acc {
        Some(t) => t,
        None => tape.expect("at least one loss part").scalar(0.0),
    };
    (total, log)
}

/// Adaptive-moment optimizer; defaults follow the training setup used for
/// the generator and discriminators (lr 0.002, beta1 0.0, beta2 0.90).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    params: Vec<Param>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: Vec<Param>, lr: f64) -> Self {
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(ndarray::IxDyn(&p.shape())))
            .collect();
        let v = params
            .iter()
            .map(|p| ArrayD::zeros(ndarray::IxDyn(&p.shape())))
            .collect();
        Adam {
            lr,
            beta1: 0.0,
            beta2: 0.90,
            eps: 1e-8,
            params,
            m,
            v,
            t: 0,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update from the gradients currently accumulated in the params.
    pub fn step(&mut self) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in self.params.iter().enumerate() {
            p.update(|value, grad| {
                ndarray::Zip::from(&mut self.m[i])
                    .and(grad)
                    .for_each(|m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
                ndarray::Zip::from(&mut self.v[i])
                    .and(grad)
                    .for_each(|v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
                ndarray::Zip::from(value)
                    .and(&self.m[i])
                    .and(&self.v[i])
                    .for_each(|x, &m, &v| {
                        let mhat = m / bc1;
                        let vhat = v / bc2;
                        *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    });
            });
        }
    }

    pub fn state(&self) -> (u64, &[ArrayD<f64>], &[ArrayD<f64>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), self.params.len());
        assert_eq!(v.len(), self.params.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }
}
