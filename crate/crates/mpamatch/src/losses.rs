//! Training objectives: the supervised cross-entropy + Dice hybrid, the
//! dual-stream consistency loss on unlabeled images, the prototype
//! alignment (PAL) and prototype contrast (PCL) losses, and their
//! weighted combination into the total objective.

use crate::error::{MpaError, Result};
use crate::tensor::{Data, Tensor};
use ndarray::{Axis, IxDyn};
use serde::{Deserialize, Serialize};

const LN_FLOOR: f64 = 1e-12;

/// Every scalar coefficient of the objective in one validated record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// weight of the feature-perturbed consistency term
    pub lambda: f64,
    /// weight shared by the two strong-view consistency terms
    pub mu: f64,
    /// pseudo-label confidence threshold
    pub tau: f64,
    /// PAL weight inside the prototype loss
    pub alpha1: f64,
    /// PCL weight inside the prototype loss
    pub alpha2: f64,
    /// prototype loss weight in the total
    pub alpha: f64,
    /// supervised loss weight in the total
    pub beta: f64,
    /// unlabeled loss weight in the total
    pub gamma: f64,
    /// Dice stabilizer
    pub epsilon: f64,
    /// temperature dividing similarity scores before PAL/PCL softmax
    pub temperature: f64,
    /// use the weak distribution itself instead of its argmax as target
    pub soft_pseudo: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.5,
            mu: 0.5,
            tau: 0.95,
            alpha1: 0.5,
            alpha2: 0.5,
            alpha: 0.25,
            beta: 0.5,
            gamma: 0.25,
            epsilon: 1e-6,
            temperature: 0.1,
            soft_pseudo: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(MpaError::config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(MpaError::config(format!(
                "tau must lie in (0,1), got {}",
                self.tau
            )));
        }
        if self.temperature <= 0.0 {
            return Err(MpaError::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Per-step scalar record written to the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub l_label: f64,
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_unlabel: f64,
    pub l_pal_visual: Option<f64>,
    pub l_pal_text: Option<f64>,
    pub l_pcl_visual: Option<f64>,
    pub l_pcl_text: Option<f64>,
    pub l_proto: f64,
    pub l_total: f64,
    pub retention: f64,
}

impl LossReport {
    /// Named components for finiteness checks and numeric aborts.
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("l_label", self.l_label),
            ("l_ce", self.l_ce),
            ("l_dice", self.l_dice),
            ("l_unlabel", self.l_unlabel),
            ("l_proto", self.l_proto),
            ("l_total", self.l_total),
            ("retention", self.retention),
        ];
        if let Some(x) = self.l_pal_visual {
            v.push(("l_pal_visual", x));
        }
        if let Some(x) = self.l_pal_text {
            v.push(("l_pal_text", x));
        }
        if let Some(x) = self.l_pcl_visual {
            v.push(("l_pcl_visual", x));
        }
        if let Some(x) = self.l_pcl_text {
            v.push(("l_pcl_text", x));
        }
        v
    }
}

/// The supervised hybrid loss with its two parts kept for reporting.
pub struct SupervisedLoss {
    pub total: Tensor,
    pub ce: Tensor,
    pub dice: Tensor,
}

fn check_probs_shape(probs: &Tensor, onehot: &Data) -> Result<(usize, usize, usize, usize)> {
    let shape = probs.shape();
    if shape.len() != 4 {
        return Err(MpaError::shape(format!(
            "expected probabilities of shape (N,C,H,W), got {shape:?}"
        )));
    }
    if shape != onehot.shape() {
        return Err(MpaError::shape(format!(
            "probabilities {:?} and one-hot labels {:?} disagree",
            shape,
            onehot.shape()
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Mean of cross-entropy and Dice over a batch of probability maps.
/// Dice runs per class over flattened pixels, then averages over classes
/// and batch items; cross-entropy is the mean per-pixel negative
/// log-likelihood.
pub fn supervised_loss(probs: &Tensor, onehot: &Data, epsilon: f64) -> Result<SupervisedLoss> {
    let (n, _c, h, w) = check_probs_shape(probs, onehot)?;
    let log_p = probs.ln_stable(LN_FLOOR);
    let ce = log_p
        .mul_const(onehot)
        .sum_all()
        .scale(-1.0 / (n * h * w) as f64);

    // (N,C) reductions over the pixel axes
    let inter = probs.mul_const(onehot).sum_axis(3).sum_axis(2);
    let psum = probs.sum_axis(3).sum_axis(2);
    let ysum = onehot.sum_axis(Axis(3)).sum_axis(Axis(2));
    let numer = inter.scale(2.0).add_scalar(epsilon);
    let denom = psum.add_scalar(epsilon).add(&Tensor::constant(ysum.into_dyn()));
    let dice = numer.div(&denom).mean_all().scale(-1.0).add_scalar(1.0);

    let total = ce.add(&dice).scale(0.5);
    Ok(SupervisedLoss { total, ce, dice })
}

/// One-hot encode an index mask batch into (N,C,H,W).
pub fn one_hot(masks: &[ndarray::Array2<usize>], num_classes: usize) -> Data {
    let n = masks.len();
    let (h, w) = masks[0].dim();
    let mut out = Data::zeros(IxDyn(&[n, num_classes, h, w]));
    for (i, m) in masks.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let c = m[[y, x]];
                debug_assert!(c < num_classes);
                out[[i, c, y, x]] = 1.0;
            }
        }
    }
    out
}

/// Pseudo-label data extracted from a no-grad weak prediction.
pub struct PseudoLabels {
    /// per-pixel argmax class, flattened row-major over (N,H,W)
    pub classes: Vec<usize>,
    /// per-pixel max probability
    pub confidence: Vec<f64>,
    /// the full weak distribution, (N*H*W, C) row-major
    pub distribution: ndarray::Array2<f64>,
    pub height: usize,
    pub width: usize,
}

/// Argmax pseudo-labels and confidences from a weak probability map
/// (N,C,H,W). The input must already be detached from any graph.
pub fn pseudo_labels(p_w: &Data) -> PseudoLabels {
    let shape = p_w.shape().to_vec();
    assert_eq!(shape.len(), 4, "pseudo_labels expects (N,C,H,W)");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut classes = Vec::with_capacity(n * h * w);
    let mut confidence = Vec::with_capacity(n * h * w);
    let mut dist = ndarray::Array2::<f64>::zeros((n * h * w, c));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = (i * h + y) * w + x;
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for ch in 0..c {
                    let v = p_w[[i, ch, y, x]];
                    dist[[row, ch]] = v;
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                classes.push(best);
                confidence.push(best_v);
            }
        }
    }
    PseudoLabels {
        classes,
        confidence,
        distribution: dist,
        height: h,
        width: w,
    }
}

/// Cross-entropy of one prediction stream against pseudo-labels,
/// averaged over the retained pixel set. Returns the loss term and the
/// retention fraction. Zero loss (still graph-connected) when nothing is
/// retained.
pub fn consistency_term(
    pseudo: &PseudoLabels,
    stream: &Tensor,
    tau: f64,
    soft: bool,
) -> (Tensor, f64) {
    let shape = stream.shape();
    assert_eq!(shape.len(), 4, "consistency_term expects (N,C,H,W)");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let total = n * h * w;
    assert_eq!(pseudo.classes.len(), total, "pseudo-label size mismatch");
    let mask: Vec<f64> = pseudo
        .confidence
        .iter()
        .map(|&v| if v >= tau { 1.0 } else { 0.0 })
        .collect();
    let retained: f64 = mask.iter().sum();
    let retention = retained / total as f64;
    let flat = stream.permute_axes(&[0, 2, 3, 1]).reshape(&[total, c]); // (pixels, C)
    if retained == 0.0 {
        return (flat.sum_all().scale(0.0), 0.0);
    }
    let mask_arr = Data::from_shape_vec(IxDyn(&[total]), mask).unwrap();
    let nll = if soft {
        let logp = flat.ln_stable(LN_FLOOR);
        logp.mul_const(&pseudo.distribution.clone().into_dyn())
            .sum_axis(1)
            .scale(-1.0)
    } else {
        flat.gather_rows(&pseudo.classes).ln_stable(LN_FLOOR).scale(-1.0)
    };
    let loss = nll.mul_const(&mask_arr).sum_all().scale(1.0 / retained);
    (loss, retention)
}

/// Dual-stream consistency objective on aligned probability maps: the
/// weak view supplies pseudo-labels, the feature-perturbed and two
/// strong views are pulled toward them wherever confidence clears `tau`.
pub fn unlabeled_loss(
    p_w: &Data,
    p_fp: &Tensor,
    p_s1: &Tensor,
    p_s2: &Tensor,
    weights: &LossWeights,
) -> (Tensor, f64) {
    let pseudo = pseudo_labels(p_w);
    let (t_fp, retention) = consistency_term(&pseudo, p_fp, weights.tau, weights.soft_pseudo);
    let (t_s1, _) = consistency_term(&pseudo, p_s1, weights.tau, weights.soft_pseudo);
    let (t_s2, _) = consistency_term(&pseudo, p_s2, weights.tau, weights.soft_pseudo);
    let loss = t_fp
        .scale(weights.lambda)
        .add(&t_s1.add(&t_s2).scale(weights.mu / 2.0));
    (loss, retention)
}

/// Build the per-row candidate mask for PCL: the assigned prototype plus
/// every prototype of a different class.
fn pcl_mask(y: &[usize], p: usize, k: usize) -> Data {
    let n = y.len();
    let mut mask = Data::zeros(IxDyn(&[n, p]));
    for (i, &yi) in y.iter().enumerate() {
        let own_class = yi / k;
        for j in 0..p {
            if j == yi || j / k != own_class {
                mask[[i, j]] = 1.0;
            }
        }
    }
    mask
}

/// Prototype alignment loss: softmax cross-entropy of each pixel's
/// similarity row against its assigned prototype. Rows excluded by
/// `valid` do not contribute; returns the count that did.
pub fn pal_loss(
    sim: &Tensor,
    y: &[usize],
    valid: Option<&[bool]>,
    temperature: f64,
) -> (Tensor, usize) {
    let shape = sim.shape();
    assert_eq!(shape.len(), 2, "pal_loss expects (N,P) similarities");
    let (n, p) = (shape[0], shape[1]);
    assert_eq!(y.len(), n, "pal_loss: assignment length mismatch");
    let ones = Data::from_elem(IxDyn(&[n, p]), 1.0);
    masked_proto_loss(sim, y, valid, temperature, &ones)
}

/// Prototype contrast loss: like PAL but the softmax denominator keeps
/// only the assigned prototype and prototypes of other classes, so
/// same-class siblings never compete.
pub fn pcl_loss(
    sim: &Tensor,
    y: &[usize],
    valid: Option<&[bool]>,
    k: usize,
    temperature: f64,
) -> Result<(Tensor, usize)> {
    let shape = sim.shape();
    assert_eq!(shape.len(), 2, "pcl_loss expects (N,P) similarities");
    let (n, p) = (shape[0], shape[1]);
    assert_eq!(y.len(), n, "pcl_loss: assignment length mismatch");
    if k == 0 || p % k != 0 {
        return Err(MpaError::shape(format!(
            "pcl_loss: prototype count {p} not divisible by per-class count {k}"
        )));
    }
    let mask = pcl_mask(y, p, k);
    Ok(masked_proto_loss(sim, y, valid, temperature, &mask))
}

fn masked_proto_loss(
    sim: &Tensor,
    y: &[usize],
    valid: Option<&[bool]>,
    temperature: f64,
    candidate_mask: &Data,
) -> (Tensor, usize) {
    let n = y.len();
    let valid_mask: Vec<f64> = match valid {
        Some(v) => v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        None => vec![1.0; n],
    };
    let count = valid_mask.iter().filter(|&&v| v > 0.0).count();
    if count == 0 {
        return (sim.sum_all().scale(0.0), 0);
    }
    let z = sim.scale(1.0 / temperature);
    let lse = z.masked_logsumexp_rows(candidate_mask);
    let picked = z.gather_rows(y);
    let per_pixel = lse.sub(&picked);
    let vm = Data::from_shape_vec(IxDyn(&[n]), valid_mask).unwrap();
    let loss = per_pixel.mul_const(&vm).sum_all().scale(1.0 / count as f64);
    (loss, count)
}

/// PAL/PCL terms per branch; `None` marks a disabled branch.
#[derive(Default)]
pub struct ProtoLossTerms {
    pub pal_visual: Option<Tensor>,
    pub pcl_visual: Option<Tensor>,
    pub pal_text: Option<Tensor>,
    pub pcl_text: Option<Tensor>,
}

impl ProtoLossTerms {
    pub fn any(&self) -> bool {
        self.pal_visual.is_some() || self.pal_text.is_some()
    }
}

fn average(parts: &[&Option<Tensor>]) -> Option<Tensor> {
    let present: Vec<&Tensor> = parts.iter().filter_map(|p| p.as_ref()).collect();
    if present.is_empty() {
        return None;
    }
    let mut acc = present[0].clone();
    for t in &present[1..] {
        acc = acc.add(t);
    }
    Some(acc.scale(1.0 / present.len() as f64))
}

/// Combine the supervised, unlabeled and prototype terms into the total
/// objective. PAL and PCL are each averaged over whichever of the visual
/// and text branches are enabled. Fails with a numeric abort naming the
/// offending component if anything is non-finite.
pub fn total_loss(
    supervised: &SupervisedLoss,
    unlabeled: Option<&Tensor>,
    retention: f64,
    proto: &ProtoLossTerms,
    weights: &LossWeights,
    step: usize,
) -> Result<(Tensor, LossReport)> {
    let zero = || Tensor::constant(Data::from_elem(IxDyn(&[1]), 0.0));

    let pal = average(&[&proto.pal_visual, &proto.pal_text]);
    let pcl = average(&[&proto.pcl_visual, &proto.pcl_text]);
    let l_proto = match (&pal, &pcl) {
        (Some(pal), Some(pcl)) => pal.scale(weights.alpha1).add(&pcl.scale(weights.alpha2)),
        (Some(pal), None) => pal.scale(weights.alpha1),
        (None, Some(pcl)) => pcl.scale(weights.alpha2),
        (None, None) => zero(),
    };
    let l_unlabel = unlabeled.cloned().unwrap_or_else(zero);
    let total = l_proto
        .scale(weights.alpha)
        .add(&supervised.total.scale(weights.beta))
        .add(&l_unlabel.scale(weights.gamma));

    let report = LossReport {
        l_label: supervised.total.item(),
        l_ce: supervised.ce.item(),
        l_dice: supervised.dice.item(),
        l_unlabel: l_unlabel.item(),
        l_pal_visual: proto.pal_visual.as_ref().map(Tensor::item),
        l_pal_text: proto.pal_text.as_ref().map(Tensor::item),
        l_pcl_visual: proto.pcl_visual.as_ref().map(Tensor::item),
        l_pcl_text: proto.pcl_text.as_ref().map(Tensor::item),
        l_proto: l_proto.item(),
        l_total: total.item(),
        retention,
    };
    for (name, value) in report.components() {
        if !value.is_finite() {
            return Err(MpaError::Numeric {
                component: name.to_string(),
                step,
            });
        }
    }
    Ok((total, report))
}
