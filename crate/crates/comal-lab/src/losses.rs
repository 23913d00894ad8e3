//! Scalar training objectives: cross-entropy, entropy, class-balanced
//! weights, pseudo-labels, and the combined adaptation objectives.
//!
//! Reductions are per-pixel means so the loss-mixing coefficients are
//! resolution-independent; the raw-sum entropy form is kept alongside the
//! mean for metric parity.

use crate::bimal::{self, FlowModel, TauForm};
use crate::costruct::{self, StructNet};
use crate::synthworld::LabelMap;
use crate::{Error, Real, Result, Tensor};

/// Length-C nonnegative reals summing to one.
pub type ClassDistribution = Vec<Real>;

/// Sentinel for pixels excluded from supervision.
pub const IGNORE: usize = usize::MAX;

/// Hard per-pixel targets where some entries may be ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl PseudoLabelMap {
    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Weighted ignore-aware cross-entropy against hard targets, averaged over
/// the non-ignored pixels.
pub fn cross_entropy(y: &Tensor, targets: &[usize], weights: Option<&[Real]>) -> Result<Tensor> {
    if y.rank() != 3 {
        return Err(Error::InvalidArg(format!(
            "cross_entropy expects (h,w,C), got {:?}",
            y.shape()
        )));
    }
    let (h, w, c) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    if targets.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![h, w],
            rhs: vec![targets.len()],
        });
    }
    if let Some(ws) = weights {
        if ws.len() != c {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_weights",
                lhs: vec![c],
                rhs: vec![ws.len()],
            });
        }
    }
    let keep: Vec<usize> = (0..h * w).filter(|&i| targets[i] != IGNORE).collect();
    if keep.is_empty() {
        return Err(Error::AllPixelsIgnored);
    }
    if let Some(&bad) = keep.iter().map(|&i| &targets[i]).find(|&&t| t >= c) {
        return Err(Error::InvalidArg(format!(
            "cross_entropy: target class {bad} out of range"
        )));
    }
    let flat = y.reshape(&[h * w, c])?;
    let rows = flat.gather(0, &keep)?;
    let classes: Vec<usize> = keep.iter().map(|&i| targets[i]).collect();
    let logp = rows.take_per_row(&classes)?.log();
    let weighted = match weights {
        Some(ws) => {
            let pixw: Vec<Real> = classes.iter().map(|&t| ws[t]).collect();
            logp.mul(&Tensor::from_vec(pixw, &[classes.len()])?)?
        }
        None => logp,
    };
    Ok(weighted.mean_all().neg())
}

/// Cross-entropy against a ground-truth label map.
pub fn cross_entropy_labels(
    y: &Tensor,
    labels: &LabelMap,
    weights: Option<&[Real]>,
) -> Result<Tensor> {
    cross_entropy(y, &labels.indices(), weights)
}

/// Normalized Shannon entropy summed over pixels: each pixel contributes
/// in [0, 1], a uniform map totals h*w.
pub fn entropy_loss(y: &Tensor) -> Result<Tensor> {
    if y.rank() != 3 {
        return Err(Error::InvalidArg(format!(
            "entropy_loss expects (h,w,C), got {:?}",
            y.shape()
        )));
    }
    let c = y.shape()[2] as Real;
    Ok(y.mul(&y.log())?.sum_all().mul_scalar(-1.0 / c.ln()))
}

/// Per-pixel mean of the normalized entropy (reporting/objective variant).
pub fn entropy_loss_mean(y: &Tensor) -> Result<Tensor> {
    let pixels = (y.shape()[0] * y.shape()[1]) as Real;
    Ok(entropy_loss(y)?.mul_scalar(1.0 / pixels))
}

pub fn uniform_distribution(classes: usize) -> ClassDistribution {
    vec![1.0 / classes as Real; classes]
}

/// Per-class weights `min(q'_c / q_c, clamp)` with `q` floored at 1e-6.
pub fn class_weights(
    q: &ClassDistribution,
    qprime: &ClassDistribution,
    clamp: Real,
) -> Result<Vec<Real>> {
    if q.len() != qprime.len() {
        return Err(Error::ShapeMismatch {
            op: "class_weights",
            lhs: vec![q.len()],
            rhs: vec![qprime.len()],
        });
    }
    for dist in [q, qprime] {
        let sum: Real = dist.iter().sum();
        if dist.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArg(format!(
                "class_weights: not a distribution (sum {sum})"
            )));
        }
    }
    Ok(q.iter()
        .zip(qprime)
        .map(|(&qc, &qpc)| (qpc / qc.max(1e-6)).min(clamp))
        .collect())
}

/// Confidence-thresholded hard targets from a predicted map.
pub fn pseudo_labels(y: &Tensor, threshold: Real) -> Result<PseudoLabelMap> {
    if !(0.5..1.0).contains(&threshold) {
        return Err(Error::InvalidArg(format!(
            "pseudo-label threshold must lie in [0.5, 1), got {threshold}"
        )));
    }
    if y.rank() != 3 {
        return Err(Error::InvalidArg(format!(
            "pseudo_labels expects (h,w,C), got {:?}",
            y.shape()
        )));
    }
    let (h, w, c) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let labels = y
        .data()
        .chunks(c)
        .map(|pixel| {
            let mut best = 0;
            for (k, &p) in pixel.iter().enumerate() {
                if p > pixel[best] {
                    best = k;
                }
            }
            if pixel[best] >= threshold {
                best
            } else {
                IGNORE
            }
        })
        .collect();
    Ok(PseudoLabelMap {
        height: h,
        width: w,
        labels,
    })
}

/// Settings shared by the combined objectives.
#[derive(Clone, Debug)]
pub struct ObjectiveCfg {
    pub lambda_bimal: Real,
    pub lambda_comal: Real,
    pub lambda_ent: Real,
    pub pseudo_threshold: Real,
    pub weight_clamp: Real,
    /// None = uniform ideal distribution.
    pub qprime: Option<ClassDistribution>,
    pub sigma1: Real,
    pub sigma2: Real,
    pub tau_form: TauForm,
    /// Disable the smoothness term (likelihood-only ablation).
    pub use_tau: bool,
    /// Disable the conditional likelihood term (class-weights-only ablation).
    pub use_comal: bool,
    pub num_anchors: usize,
}

impl Default for ObjectiveCfg {
    fn default() -> Self {
        ObjectiveCfg {
            lambda_bimal: 1e-3,
            lambda_comal: 1e-3,
            lambda_ent: 0.25,
            pseudo_threshold: 0.9,
            weight_clamp: 10.0,
            qprime: None,
            sigma1: bimal::SIGMA_DEFAULT,
            sigma2: bimal::SIGMA_DEFAULT,
            tau_form: TauForm::Bilateral,
            use_tau: true,
            use_comal: true,
            num_anchors: 1,
        }
    }
}

/// Decomposition of the flow-likelihood objective on one batch.
pub struct BimalParts {
    pub total: Tensor,
    pub source_ce: Tensor,
    pub target_llk: Tensor,
    pub target_tau: Tensor,
}

/// Supervised cross-entropy on source predictions plus the weighted
/// flow-likelihood loss on target predictions.
pub fn objective_bimal(
    source: &[(&Tensor, &LabelMap)],
    target: &[(&Tensor, &Tensor)],
    flow: &FlowModel,
    cfg: &ObjectiveCfg,
) -> Result<BimalParts> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ce = Tensor::scalar(0.0);
    for (probs, labels) in source {
        ce = ce.add(&cross_entropy_labels(probs, labels, None)?)?;
    }
    let source_ce = ce.mul_scalar(1.0 / source.len() as Real);

    let mut llk = Tensor::scalar(0.0);
    let mut smooth = Tensor::scalar(0.0);
    for (image, probs) in target {
        let code = bimal::relax(&bimal::subsample2_soft(probs)?, bimal::RELAX_EPS)?;
        llk = llk.add(&bimal::nll(flow, &code)?)?;
        if cfg.use_tau {
            smooth = smooth.add(&bimal::tau(image, probs, cfg.sigma1, cfg.sigma2, cfg.tau_form)?)?;
        }
    }
    let target_llk = llk.mul_scalar(1.0 / target.len() as Real);
    let target_tau = smooth.mul_scalar(1.0 / target.len() as Real);

    let total = source_ce
        .add(&target_llk.add(&target_tau)?.mul_scalar(cfg.lambda_bimal))?;
    Ok(BimalParts {
        total,
        source_ce,
        target_llk,
        target_tau,
    })
}

/// Decomposition of the long-tail conditional objective on one batch.
pub struct ComalParts {
    pub total: Tensor,
    pub source_ce: Tensor,
    pub target_ce: Option<Tensor>,
    pub comal_source: Tensor,
    pub comal_target: Tensor,
    /// True when every target pixel fell below the pseudo-label threshold.
    pub target_ce_skipped: bool,
}

/// Class-weighted supervised loss on source, class-weighted pseudo-label
/// loss on target, and the conditional likelihood term on both domains'
/// predictions (evaluated on the structure network's grid).
pub fn objective_comal(
    source: &[(&Tensor, &LabelMap)],
    target: &[&Tensor],
    structnet: &StructNet,
    q_source: &ClassDistribution,
    q_target: Option<&ClassDistribution>,
    cfg: &ObjectiveCfg,
    seed: u64,
) -> Result<ComalParts> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = q_source.len();
    let qprime = cfg
        .qprime
        .clone()
        .unwrap_or_else(|| uniform_distribution(classes));
    let weights = class_weights(q_source, &qprime, cfg.weight_clamp)?;
    let target_weights = match q_target {
        Some(qt) => class_weights(qt, &qprime, cfg.weight_clamp)?,
        None => weights.clone(),
    };

    let mut ce = Tensor::scalar(0.0);
    for (probs, labels) in source {
        ce = ce.add(&cross_entropy_labels(probs, labels, Some(&weights))?)?;
    }
    let source_ce = ce.mul_scalar(1.0 / source.len() as Real);

    let mut target_terms = Vec::new();
    for probs in target {
        let pl = pseudo_labels(&probs.detach(), cfg.pseudo_threshold)?;
        if pl.labeled_count() > 0 {
            target_terms.push(cross_entropy(probs, &pl.labels, Some(&target_weights))?);
        }
    }
    let target_ce_skipped = target_terms.is_empty();
    let target_ce = if target_ce_skipped {
        None
    } else {
        let mut acc = Tensor::scalar(0.0);
        let n = target_terms.len() as Real;
        for t in target_terms {
            acc = acc.add(&t)?;
        }
        Some(acc.mul_scalar(1.0 / n))
    };

    let (comal_source, comal_target) = if cfg.use_comal {
        let mut cs = Tensor::scalar(0.0);
        for (i, (probs, _)) in source.iter().enumerate() {
            let sub = bimal::subsample2_soft(probs)?;
            cs = cs.add(&costruct::comal_loss(
                structnet,
                &sub,
                cfg.num_anchors,
                seed.wrapping_add(i as u64),
            )?)?;
        }
        let mut ct = Tensor::scalar(0.0);
        for (i, probs) in target.iter().enumerate() {
            let sub = bimal::subsample2_soft(probs)?;
            ct = ct.add(&costruct::comal_loss(
                structnet,
                &sub,
                cfg.num_anchors,
                seed.wrapping_add(0x9e37 + i as u64),
            )?)?;
        }
        (
            cs.mul_scalar(1.0 / source.len() as Real),
            ct.mul_scalar(1.0 / target.len() as Real),
        )
    } else {
        (Tensor::scalar(0.0), Tensor::scalar(0.0))
    };

    let mut total = source_ce.clone();
    if let Some(tce) = &target_ce {
        total = total.add(tce)?;
    }
    total = total.add(
        &comal_source
            .add(&comal_target)?
            .mul_scalar(cfg.lambda_comal),
    )?;
    Ok(ComalParts {
        total,
        source_ce,
        target_ce,
        comal_source,
        comal_target,
        target_ce_skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::check::{grad_check, DEFAULT_STEP};
    use crate::rng::DetRng;

    fn soft_map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = DetRng::new(seed);
        Tensor::from_vec(
            (0..h * w * c).map(|_| rng.uniform_in(-2.0, 2.0)).collect(),
            &[h, w, c],
        )
        .unwrap()
        .softmax(2)
        .unwrap()
        .detach()
    }

    #[test]
    fn cross_entropy_closed_forms() {
        // perfect one-hot prediction
        let y = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[1, 2, 2]).unwrap();
        let labels = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        assert!(cross_entropy_labels(&y, &labels, None).unwrap().item() <= 1e-10);
        // uniform prediction, C=2
        let u = Tensor::full(&[1, 2, 2], 0.5).unwrap();
        let l = cross_entropy_labels(&u, &labels, None).unwrap().item();
        assert!((l - (2.0 as Real).ln()).abs() < 1e-12);
        // probs 0.9 and 0.5 at the true classes
        let y2 = Tensor::from_vec(vec![0.9, 0.1, 0.5, 0.5], &[1, 2, 2]).unwrap();
        let l2 = cross_entropy_labels(&y2, &labels, None).unwrap().item();
        let want = -((0.9 as Real).ln() + (0.5 as Real).ln()) / 2.0;
        assert!((l2 - want).abs() < 1e-12);
        assert!((l2 - 0.3993).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_ignores_and_errors() {
        let y = Tensor::full(&[1, 2, 2], 0.5).unwrap();
        let l = cross_entropy(&y, &[0, IGNORE], None).unwrap().item();
        assert!((l - (2.0 as Real).ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&y, &[IGNORE, IGNORE], None),
            Err(Error::AllPixelsIgnored)
        ));
    }

    #[test]
    fn entropy_closed_forms() {
        let c = 4;
        let u = Tensor::full(&[3, 5, c], 1.0 / c as Real).unwrap();
        let e = entropy_loss(&u).unwrap().item();
        assert!((e - 15.0).abs() < 1e-9, "uniform map entropy {e}");
        let one_hot = {
            let mut data = vec![0.0; 2 * 2 * c];
            for p in 0..4 {
                data[p * c] = 1.0;
            }
            Tensor::from_vec(data, &[2, 2, c]).unwrap()
        };
        assert!(entropy_loss(&one_hot).unwrap().item().abs() < 1e-9);
        let p = Tensor::from_vec(vec![0.9, 0.1], &[1, 1, 2]).unwrap();
        let e2 = entropy_loss(&p).unwrap().item();
        assert!((e2 - 0.4690).abs() < 1e-4, "{e2}");
    }

    #[test]
    fn entropy_is_maximal_at_uniform() {
        let c = 3;
        let u = Tensor::full(&[1, 1, c], 1.0 / 3.0).unwrap();
        let eu = entropy_loss(&u).unwrap().item();
        let mut rng = DetRng::new(3);
        for _ in 0..50 {
            let y = soft_map(1, 1, c, rng.next_u64());
            let e = entropy_loss(&y).unwrap().item();
            assert!(e <= eu + 1e-12);
            assert!(e >= 0.0);
        }
    }

    #[test]
    fn class_weights_cases() {
        let uniform = uniform_distribution(4);
        let w = class_weights(&uniform, &uniform, 10.0).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        let q = vec![0.75, 0.25];
        let w2 = class_weights(&q, &uniform_distribution(2), 10.0).unwrap();
        assert!((w2[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w2[1] - 2.0).abs() < 1e-12);
        // clamped tiny class
        let q3 = vec![0.9999999, 1e-7];
        let w3 = class_weights(&q3, &uniform_distribution(2), 10.0).unwrap();
        assert_eq!(w3[1], 10.0);
        // invalid simplex
        assert!(class_weights(&vec![0.5, 0.6], &uniform_distribution(2), 10.0).is_err());
    }

    #[test]
    fn pseudo_label_thresholding() {
        let y = Tensor::from_vec(vec![0.95, 0.05, 0.6, 0.4], &[1, 2, 2]).unwrap();
        let pl = pseudo_labels(&y, 0.9).unwrap();
        assert_eq!(pl.labels, vec![0, IGNORE]);
        let pl2 = pseudo_labels(&y, 0.5).unwrap();
        assert_eq!(pl2.labels, vec![0, 0]);
        assert!(pseudo_labels(&y, 0.4).is_err());
        assert!(pseudo_labels(&y, 1.0).is_err());
    }

    #[test]
    fn objective_bimal_reductions() {
        let flow = crate::bimal::FlowModel::init(0, 2 * 2 * 3, 4).frozen();
        let y_s = soft_map(4, 4, 3, 1);
        let labels = LabelMap::new(4, 4, vec![0; 16]).unwrap();
        let img_t = soft_map(4, 4, 3, 2); // any (4,4,3) tensor as image
        let y_t = soft_map(4, 4, 3, 3);
        let mut cfg = ObjectiveCfg {
            lambda_bimal: 0.0,
            ..Default::default()
        };
        let parts = objective_bimal(&[(&y_s, &labels)], &[(&img_t, &y_t)], &flow, &cfg).unwrap();
        // lambda 0 -> equals plain CE
        let ce = cross_entropy_labels(&y_s, &labels, None).unwrap().item();
        assert_eq!(parts.total.item(), ce);
        // decomposition at lambda > 0
        cfg.lambda_bimal = 0.5;
        let parts = objective_bimal(&[(&y_s, &labels)], &[(&img_t, &y_t)], &flow, &cfg).unwrap();
        let want = parts.source_ce.item()
            + 0.5 * (parts.target_llk.item() + parts.target_tau.item());
        assert!((parts.total.item() - want).abs() < 1e-12);
    }

    #[test]
    fn objective_bimal_gradient_matches_finite_differences() {
        let flow = crate::bimal::tests::perturbed_model(5, 2 * 2 * 2, 3).frozen();
        let labels = LabelMap::new(4, 4, vec![1; 16]).unwrap();
        let img = soft_map(4, 4, 2, 7);
        let cfg = ObjectiveCfg {
            lambda_bimal: 0.1,
            ..Default::default()
        };
        let mut rng = DetRng::new(9);
        let logits0 = Tensor::from_vec(
            (0..4 * 4 * 2).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
            &[4, 4, 2],
        )
        .unwrap();
        let f = |logits: &Tensor| {
            let y = logits.softmax(2)?;
            let parts = objective_bimal(&[(&y, &labels)], &[(&img, &y)], &flow, &cfg)?;
            Ok(parts.total)
        };
        let err = grad_check(f, &logits0, DEFAULT_STEP).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn objective_comal_reduces_to_plain_ce() {
        let net = StructNet::init(0, 3, 2, 2).frozen();
        let y_s = soft_map(4, 4, 3, 11);
        let labels = LabelMap::new(4, 4, vec![2; 16]).unwrap();
        let y_t = soft_map(4, 4, 3, 12);
        let q = uniform_distribution(3);
        let cfg = ObjectiveCfg {
            lambda_comal: 0.0,
            use_comal: false,
            pseudo_threshold: 0.5,
            ..Default::default()
        };
        let parts = objective_comal(&[(&y_s, &labels)], &[&y_t], &net, &q, None, &cfg, 0).unwrap();
        let ce_s = cross_entropy_labels(&y_s, &labels, None).unwrap().item();
        let pl = pseudo_labels(&y_t, 0.5).unwrap();
        let ce_t = cross_entropy(&y_t, &pl.labels, None).unwrap().item();
        assert!((parts.total.item() - (ce_s + ce_t)).abs() < 1e-12);
        assert!(!parts.target_ce_skipped);
    }

    #[test]
    fn objective_comal_decomposes() {
        let net = StructNet::init(1, 3, 2, 2).frozen();
        let y_s = soft_map(4, 4, 3, 21);
        let labels = LabelMap::new(4, 4, vec![0; 16]).unwrap();
        let y_t = soft_map(4, 4, 3, 22);
        let q = vec![0.6, 0.3, 0.1];
        let cfg = ObjectiveCfg {
            lambda_comal: 0.2,
            pseudo_threshold: 0.5,
            num_anchors: 2,
            ..Default::default()
        };
        let parts = objective_comal(&[(&y_s, &labels)], &[&y_t], &net, &q, None, &cfg, 3).unwrap();
        let want = parts.source_ce.item()
            + parts.target_ce.as_ref().unwrap().item()
            + 0.2 * (parts.comal_source.item() + parts.comal_target.item());
        assert!((parts.total.item() - want).abs() < 1e-12);
    }

    #[test]
    fn objective_comal_skips_unconfident_target() {
        let net = StructNet::init(2, 3, 2, 2).frozen();
        let y_s = soft_map(4, 4, 3, 31);
        let labels = LabelMap::new(4, 4, vec![1; 16]).unwrap();
        // near-uniform target predictions never clear a 0.9 threshold
        let y_t = Tensor::full(&[4, 4, 3], 1.0 / 3.0).unwrap();
        let q = uniform_distribution(3);
        let cfg = ObjectiveCfg {
            pseudo_threshold: 0.9,
            use_comal: false,
            ..Default::default()
        };
        let parts = objective_comal(&[(&y_s, &labels)], &[&y_t], &net, &q, None, &cfg, 0).unwrap();
        assert!(parts.target_ce_skipped);
        assert!(parts.target_ce.is_none());
    }

    #[test]
    fn head_class_gradients_dominate_and_weights_restore_parity() {
        // two-class map, N0 << N1, identical per-pixel confidence: grouped
        // by ground truth, summed gradient magnitude into the logits is
        // proportional to pixel count under unweighted CE
        let (h, w) = (4, 8);
        let n = h * w;
        let n0 = 2usize;
        let mut labels = vec![1usize; n];
        labels[3] = 0;
        labels[17] = 0;
        let p_true: Real = 0.7;
        let grads_for = |weights: Option<Vec<Real>>| -> (Real, Real) {
            let mut logits_data = vec![0.0; n * 2];
            for (i, &t) in labels.iter().enumerate() {
                // logit gap giving p(true) = p_true
                let gap = (p_true / (1.0 - p_true)).ln();
                logits_data[i * 2 + t] = gap / 2.0;
                logits_data[i * 2 + 1 - t] = -gap / 2.0;
            }
            let logits = Tensor::param(logits_data, &[h, w, 2]).unwrap();
            let y = logits.softmax(2).unwrap();
            let loss = cross_entropy(&y, &labels, weights.as_deref()).unwrap();
            loss.backward().unwrap();
            let g = logits.grad().unwrap();
            let mut sums = (0.0, 0.0);
            for (i, &t) in labels.iter().enumerate() {
                let mag = g[i * 2].abs() + g[i * 2 + 1].abs();
                if t == 0 {
                    sums.0 += mag;
                } else {
                    sums.1 += mag;
                }
            }
            sums
        };
        let (g0, g1) = grads_for(None);
        assert!(
            g1 > 5.0 * g0,
            "head class should dominate: class0 {g0} class1 {g1}"
        );
        // inverse-frequency weights restore parity
        let q = vec![n0 as Real / n as Real, (n - n0) as Real / n as Real];
        let ws = class_weights(&q, &uniform_distribution(2), 100.0).unwrap();
        let (w0, w1) = grads_for(Some(ws));
        let ratio = w1 / w0;
        assert!(
            (0.8..1.25).contains(&ratio),
            "weighted gradients should be near parity, got {ratio}"
        );
    }

    #[test]
    fn weight_scaling_leaves_weighted_ce_argmin_unchanged() {
        // scaling q' by a positive constant scales all weights uniformly,
        // so the ordering of losses over predictions is preserved
        let q = vec![0.7, 0.2, 0.1];
        let w1 = class_weights(&q, &uniform_distribution(3), 50.0).unwrap();
        let w2: Vec<Real> = w1.iter().map(|&x| 3.7 * x).collect();
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let a = soft_map(2, 2, 3, 41);
        let b = soft_map(2, 2, 3, 42);
        let la1 = cross_entropy_labels(&a, &labels, Some(&w1)).unwrap().item();
        let lb1 = cross_entropy_labels(&b, &labels, Some(&w1)).unwrap().item();
        let la2 = cross_entropy_labels(&a, &labels, Some(&w2)).unwrap().item();
        let lb2 = cross_entropy_labels(&b, &labels, Some(&w2)).unwrap().item();
        assert_eq!(la1 < lb1, la2 < lb2);
        assert!((la2 / la1 - 3.7).abs() < 1e-9);
    }

    #[test]
    fn gibbs_inequality_on_random_pairs() {
        let mut rng = DetRng::new(55);
        for _ in 0..1000 {
            let c = 2 + rng.below(7);
            let draw = |rng: &mut DetRng| {
                let mut v: Vec<Real> = (0..c).map(|_| rng.uniform() + 1e-9).collect();
                let s: Real = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            let ce: Real = -p.iter().zip(&q).map(|(&a, &b)| a * b.ln()).sum::<Real>();
            let h: Real = -p.iter().map(|&a| a * a.ln()).sum::<Real>();
            assert!(ce >= h - 1e-12);
        }
    }
}
