//! Dense distillation on all aspects.
//!
//! Every tapped layer and the pre-classifier embedding of the live model are
//! pulled towards the frozen snapshot by a per-pixel KL divergence between
//! class-probability maps. Intermediate layers are weighted by the attenuated
//! layer-aware weight (deeper layers count more, later epochs count less).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{StepSnapshot, TapModel, TapOutput};

/// Probabilities are floored at this value inside the KL logarithms.
pub const PROB_FLOOR: f64 = 1e-8;

/// Tolerance on per-pixel probability sums accepted by [`pixel_kl_divergence`].
pub const SIMPLEX_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlwConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub total_epochs: usize,
    pub num_layers: usize,
}

impl AlwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config("train.dada.alpha", "must be > 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("train.dada.gamma", "must lie in (0, 1)"));
        }
        if self.total_epochs == 0 || self.num_layers == 0 {
            return Err(Error::Contract(
                "ALW needs at least one epoch and one layer".into(),
            ));
        }
        Ok(())
    }
}

/// Serialized DADA settings; epoch and layer counts come from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DadaParams {
    /// Weight `λ` of the output-layer term.
    pub lambda_out: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Include intermediate-layer distillation.
    pub intermediate: bool,
    /// Include output-layer distillation.
    pub output: bool,
}

impl Default for DadaParams {
    fn default() -> Self {
        Self {
            lambda_out: 2.0,
            alpha: 1.0,
            gamma: 0.9,
            intermediate: true,
            output: true,
        }
    }
}

impl DadaParams {
    pub fn enabled(&self) -> bool {
        self.intermediate || self.output
    }

    pub fn resolve(&self, total_epochs: usize, num_layers: usize) -> DadaConfig {
        DadaConfig {
            lambda_out: self.lambda_out,
            intermediate: self.intermediate,
            output: self.output,
            alw: AlwConfig {
                alpha: self.alpha,
                gamma: self.gamma,
                total_epochs,
                num_layers,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DadaConfig {
    pub lambda_out: f64,
    pub intermediate: bool,
    pub output: bool,
    pub alw: AlwConfig,
}

impl DadaConfig {
    pub fn new(lambda_out: f64, alw: AlwConfig) -> Self {
        Self {
            lambda_out,
            intermediate: true,
            output: true,
            alw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_out >= 0.0) {
            return Err(Error::config("train.dada.lambda_out", "must be >= 0"));
        }
        self.alw.validate()
    }
}

/// Attenuated layer-aware weight `α · ln(1 + n_l/N_l) · γ^(n_e/N_e)` for the
/// 1-based layer index `layer` and 0-based epoch index `epoch`.
pub fn alw_weight(layer: usize, epoch: usize, cfg: &AlwConfig) -> f64 {
    let depth = layer as f64 / cfg.num_layers as f64;
    let progress = epoch as f64 / cfg.total_epochs as f64;
    cfg.alpha * depth.ln_1p() * cfg.gamma.powf(progress)
}

/// Per-channel softmax over dim 1.
pub(crate) fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Mean per-pixel `KL(old ‖ new)` with probabilities floored at [`PROB_FLOOR`].
/// Gradients flow only through `probs_new`.
pub(crate) fn kl_unchecked(probs_old: &Tensor, probs_new: &Tensor) -> Result<Tensor> {
    let old = probs_old.detach();
    let log_old = old.maximum(PROB_FLOOR)?.log()?;
    let log_new = probs_new.maximum(PROB_FLOOR)?.log()?;
    let per_pixel = (old * (log_old - log_new)?)?.sum(1)?;
    Ok(per_pixel.mean_all()?)
}

/// `(1/(W'H')) Σ_i KL(p_i^old ‖ p_i^new)`, averaged over the batch. Inputs are
/// `B×K×H'×W'` maps whose pixels are probability distributions.
pub fn pixel_kl_divergence(probs_old: &Tensor, probs_new: &Tensor) -> Result<Tensor> {
    if probs_old.dims() != probs_new.dims() {
        return Err(Error::Shape(format!(
            "probability maps differ: {:?} vs {:?}",
            probs_old.dims(),
            probs_new.dims()
        )));
    }
    if probs_old.rank() != 4 {
        return Err(Error::Shape(format!(
            "expected B×K×H×W maps, got {:?}",
            probs_old.dims()
        )));
    }
    check_simplex(probs_old, "probs_old")?;
    check_simplex(probs_new, "probs_new")?;
    kl_unchecked(probs_old, probs_new)
}

fn check_simplex(p: &Tensor, name: &str) -> Result<()> {
    let min = p
        .flatten_all()?
        .min(0)?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    if min < 0.0 {
        return Err(Error::NotSimplex(format!("{name} has negative entry {min}")));
    }
    let sums = p
        .sum(1)?
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?;
    if let Some(s) = sums.iter().find(|s| (**s - 1.0).abs() > SIMPLEX_TOL) {
        return Err(Error::NotSimplex(format!("{name} has a pixel summing to {s}")));
    }
    Ok(())
}

/// Scalar components of the DADA objective.
pub struct DadaLoss {
    pub total: Tensor,
    pub il_d: Tensor,
    pub ol_d: Tensor,
}

/// DADA from precomputed forward passes. Both maps are compared over the
/// snapshot's channel width (old classes plus background).
pub fn dada_from_outputs(
    old: &TapOutput,
    new: &TapOutput,
    epoch_index: usize,
    cfg: &DadaConfig,
) -> Result<DadaLoss> {
    cfg.validate()?;
    if epoch_index >= cfg.alw.total_epochs {
        return Err(Error::Contract(format!(
            "epoch index {epoch_index} outside {} epochs",
            cfg.alw.total_epochs
        )));
    }
    let n_layers = old.layer_logits.len();
    if n_layers != new.layer_logits.len() || n_layers != cfg.alw.num_layers {
        return Err(Error::Topology(format!(
            "snapshot has {n_layers} taps, model has {}, config expects {}",
            new.layer_logits.len(),
            cfg.alw.num_layers
        )));
    }
    let old_width = old.coarse_logits.dim(1)?;
    if new.coarse_logits.dim(1)? < old_width {
        return Err(Error::Topology(format!(
            "model predicts {} channels, fewer than the snapshot's {old_width}",
            new.coarse_logits.dim(1)?
        )));
    }
    let zero = Tensor::zeros((), new.logits.dtype(), new.logits.device())?;

    let il_d = if cfg.intermediate {
        let mut acc = zero.clone();
        for (l, (o, n)) in old.layer_logits.iter().zip(&new.layer_logits).enumerate() {
            let eta = alw_weight(l + 1, epoch_index, &cfg.alw);
            let d = kl_unchecked(
                &softmax_channels(o)?,
                &softmax_channels(&n.narrow(1, 0, old_width)?)?,
            )?;
            acc = (acc + (d * eta)?)?;
        }
        (acc / n_layers as f64)?
    } else {
        zero.clone()
    };

    let ol_d = if cfg.output {
        kl_unchecked(
            &softmax_channels(&old.coarse_logits)?,
            &softmax_channels(&new.coarse_logits.narrow(1, 0, old_width)?)?,
        )?
    } else {
        zero
    };
    let total = (&il_d + (&ol_d * cfg.lambda_out)?)?;
    Ok(DadaLoss { total, il_d, ol_d })
}

/// Run both models on `batch` and compute the DADA objective for the live model.
pub fn dada_loss(
    snapshot: &StepSnapshot,
    model: &TapModel,
    batch: &Tensor,
    epoch_index: usize,
    cfg: &DadaConfig,
) -> Result<DadaLoss> {
    if snapshot.model().num_taps() != model.num_taps() {
        return Err(Error::Topology(format!(
            "snapshot has {} taps, model has {}",
            snapshot.model().num_taps(),
            model.num_taps()
        )));
    }
    let old = snapshot.forward(batch)?;
    let new = model.forward_with_taps(batch)?;
    dada_from_outputs(&old, &new, epoch_index, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn probs(data: &[f64], b: usize, k: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(data.to_vec(), (b, k, h, w), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn alw(total_epochs: usize, num_layers: usize) -> AlwConfig {
        AlwConfig {
            alpha: 1.0,
            gamma: 0.9,
            total_epochs,
            num_layers,
        }
    }

    #[test]
    fn kl_of_identical_maps_is_zero() {
        let p = probs(&[0.2, 0.7, 0.8, 0.3], 1, 2, 1, 2);
        assert_eq!(scalar(&pixel_kl_divergence(&p, &p).unwrap()), 0.0);
    }

    #[test]
    fn kl_single_pixel_hand_value() {
        let old = probs(&[0.5, 0.5], 1, 2, 1, 1);
        let new = probs(&[0.9, 0.1], 1, 2, 1, 1);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = scalar(&pixel_kl_divergence(&old, &new).unwrap());
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kl_zero_probability_uses_floor() {
        let old = probs(&[0.5, 0.5], 1, 2, 1, 1);
        let new = probs(&[1.0, 0.0], 1, 2, 1, 1);
        let got = scalar(&pixel_kl_divergence(&old, &new).unwrap());
        let expected = 0.5 * (0.5f64 / 1.0).ln() + 0.5 * (0.5f64 / PROB_FLOOR).ln();
        assert!(got.is_finite());
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_averages_over_pixels_and_batch() {
        // two pixels, one identical, one from the hand example
        let old = probs(&[0.5, 0.3, 0.5, 0.7], 1, 2, 1, 2);
        let new = probs(&[0.9, 0.3, 0.1, 0.7], 1, 2, 1, 2);
        let one = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = scalar(&pixel_kl_divergence(&old, &new).unwrap());
        assert!((got - one / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_input_errors() {
        let a = probs(&[0.5, 0.5], 1, 2, 1, 1);
        let b = probs(&[0.5, 0.5, 0.5, 0.5], 1, 2, 1, 2);
        assert_eq!(pixel_kl_divergence(&a, &b).unwrap_err().code(), "SHAPE_ERROR");
        let bad = probs(&[0.5, 0.6], 1, 2, 1, 1);
        assert_eq!(pixel_kl_divergence(&a, &bad).unwrap_err().code(), "NOT_SIMPLEX");
        let neg = probs(&[1.5, -0.5], 1, 2, 1, 1);
        assert_eq!(pixel_kl_divergence(&neg, &a).unwrap_err().code(), "NOT_SIMPLEX");
    }

    #[test]
    fn alw_hand_values() {
        let cfg = alw(30, 3);
        assert!((alw_weight(3, 0, &cfg) - 2f64.ln()).abs() < 1e-12);
        assert!((alw_weight(1, 0, &cfg) - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        for l in 1..=3 {
            let ratio = alw_weight(l, 30, &cfg) / alw_weight(l, 0, &cfg);
            assert!((ratio - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn alw_config_validation() {
        let mut cfg = alw(10, 3);
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        cfg.gamma = 0.5;
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err());
    }

    fn output(layers: Vec<Tensor>, coarse: Tensor) -> TapOutput {
        TapOutput {
            layer_embeddings: vec![],
            layer_logits: layers,
            out_embedding: coarse.clone(),
            logits: coarse.clone(),
            coarse_logits: coarse,
        }
    }

    fn logits(data: &[f64], k: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(data.to_vec(), (1, k, h, w), &Device::Cpu).unwrap()
    }

    /// Loops over layers and pixels with plain floats.
    fn scalar_dada(
        old_layers: &[Vec<Vec<f64>>],
        new_layers: &[Vec<Vec<f64>>],
        old_out: &[Vec<f64>],
        new_out: &[Vec<f64>],
        epoch: usize,
        cfg: &DadaConfig,
    ) -> (f64, f64, f64) {
        fn softmax(z: &[f64]) -> Vec<f64> {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }
        fn d(old: &[Vec<f64>], new: &[Vec<f64>]) -> f64 {
            let mut total = 0.0;
            for (o, n) in old.iter().zip(new) {
                let k = o.len();
                let p = softmax(o);
                let q = softmax(&n[..k]);
                for c in 0..k {
                    total += p[c] * (p[c].max(PROB_FLOOR).ln() - q[c].max(PROB_FLOOR).ln());
                }
            }
            total / old.len() as f64
        }
        let nl = old_layers.len();
        let mut il = 0.0;
        for l in 0..nl {
            let eta = cfg.alw.alpha
                * (1.0 + (l + 1) as f64 / nl as f64).ln()
                * cfg.alw.gamma.powf(epoch as f64 / cfg.alw.total_epochs as f64);
            il += eta * d(&old_layers[l], &new_layers[l]);
        }
        il /= nl as f64;
        let ol = d(old_out, new_out);
        (il + cfg.lambda_out * ol, il, ol)
    }

    /// Pixel-major per-pixel logit vectors from a 1×K×H×W buffer.
    fn pixels(data: &[f64], k: usize, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..k).map(|c| data[c * n + i]).collect()).collect()
    }

    #[test]
    fn dada_matches_scalar_loop() {
        // 2 layers, old width 2 (bg + 1 class), new width 3, 2x2 maps
        let old_l0 = [0.1, 0.5, -0.3, 1.0, 0.2, -0.1, 0.4, 0.0];
        let new_l0 = [0.0, 0.4, 0.2, 0.9, 0.3, 0.1, 0.5, -0.2, 1.0, 2.0, -1.0, 0.0];
        let old_l1 = [1.0, -1.0, 0.5, 0.5, -0.5, 0.3, 0.0, 0.7];
        let new_l1 = [0.8, -0.5, 0.4, 0.1, -0.2, 0.6, 0.2, 0.9, 0.0, 0.0, 0.0, 0.0];
        let old_o = [2.0, 0.1, -0.4, 0.3, -1.0, 0.2, 0.6, 0.0];
        let new_o = [1.5, 0.3, -0.1, 0.0, -0.5, 0.1, 0.9, 0.2, 3.0, 0.0, 0.0, 1.0];
        let old = output(
            vec![logits(&old_l0, 2, 2, 2), logits(&old_l1, 2, 2, 2)],
            logits(&old_o, 2, 2, 2),
        );
        let new = output(
            vec![logits(&new_l0, 3, 2, 2), logits(&new_l1, 3, 2, 2)],
            logits(&new_o, 3, 2, 2),
        );
        let cfg = DadaConfig::new(2.0, alw(5, 2));
        for epoch in [0, 3] {
            let got = dada_from_outputs(&old, &new, epoch, &cfg).unwrap();
            let (t, il, ol) = scalar_dada(
                &[pixels(&old_l0, 2, 4), pixels(&old_l1, 2, 4)],
                &[pixels(&new_l0, 3, 4), pixels(&new_l1, 3, 4)],
                &pixels(&old_o, 2, 4),
                &pixels(&new_o, 3, 4),
                epoch,
                &cfg,
            );
            assert!((scalar(&got.total) - t).abs() < 1e-12);
            assert!((scalar(&got.il_d) - il).abs() < 1e-12);
            assert!((scalar(&got.ol_d) - ol).abs() < 1e-12);
        }

        let no_out = DadaConfig::new(0.0, alw(5, 2));
        let got = dada_from_outputs(&old, &new, 1, &no_out).unwrap();
        assert_eq!(scalar(&got.total), scalar(&got.il_d));
    }

    #[test]
    fn dada_errors() {
        let a = output(vec![logits(&[0.0, 0.0], 2, 1, 1)], logits(&[0.0, 0.0], 2, 1, 1));
        let b = output(vec![], logits(&[0.0, 0.0], 2, 1, 1));
        let cfg = DadaConfig::new(2.0, alw(5, 1));
        assert_eq!(
            dada_from_outputs(&a, &b, 0, &cfg).err().unwrap().code(),
            "TOPOLOGY_ERROR"
        );
        assert_eq!(
            dada_from_outputs(&a, &a, 5, &cfg).err().unwrap().code(),
            "CONTRACT_ERROR"
        );
    }
}
