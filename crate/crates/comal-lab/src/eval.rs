//! Segmentation metrics, per-class gradient analysis, and rendering.

use crate::segnet::SegNet;
use crate::synthworld::{LabelMap, NUM_CLASSES, TAIL_CLASSES};
use crate::{Error, Real, Result, Tensor};

/// Row = ground truth, column = prediction.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn record(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.height != pred.height || gt.width != pred.width {
            return Err(Error::ShapeMismatch {
                op: "confusion",
                lhs: vec![gt.height, gt.width],
                rhs: vec![pred.height, pred.width],
            });
        }
        for (&g, &p) in gt.raw().iter().zip(pred.raw()) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Per-class intersection over union; `None` when the class appears in
    /// neither ground truth nor prediction.
    pub fn iou(&self) -> Vec<Option<Real>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..self.classes).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let fne: u64 = (0..self.classes).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let denom = tp + fp + fne;
                if denom == 0 {
                    None
                } else {
                    Some(tp as Real / denom as Real)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    /// `None` marks classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<Real>>,
    /// Mean IoU over present classes.
    pub miou: Real,
    /// Mean IoU over the head (non-tail) classes present.
    pub head_iou: Real,
    /// Mean IoU over the tail classes present.
    pub tail_iou: Real,
    pub pixels: u64,
}

fn mean_over(ious: &[Option<Real>], keep: impl Fn(usize) -> bool) -> Real {
    let vals: Vec<Real> = ious
        .iter()
        .enumerate()
        .filter(|(c, v)| keep(*c) && v.is_some())
        .map(|(_, v)| v.unwrap())
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<Real>() / vals.len() as Real
    }
}

/// Mean intersection-over-union across a prediction/ground-truth set.
/// Classes absent from both sides are excluded from every mean.
pub fn miou(preds: &[LabelMap], gts: &[LabelMap]) -> Result<MetricsReport> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::InvalidArg(format!(
            "miou: got {} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for (p, g) in preds.iter().zip(gts) {
        cm.record(g, p)?;
    }
    let per_class_iou = cm.iou();
    Ok(MetricsReport {
        miou: mean_over(&per_class_iou, |_| true),
        head_iou: mean_over(&per_class_iou, |c| !TAIL_CLASSES.contains(&c)),
        tail_iou: mean_over(&per_class_iou, |c| TAIL_CLASSES.contains(&c)),
        per_class_iou,
        pixels: cm.total(),
    })
}

/// Hard prediction from a soft map.
pub fn argmax_labels(probs: &Tensor) -> Result<LabelMap> {
    if probs.rank() != 3 {
        return Err(Error::InvalidArg(format!(
            "argmax_labels expects (h,w,C), got {:?}",
            probs.shape()
        )));
    }
    let (h, w, c) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let mut labels = Vec::with_capacity(h * w);
    for pixel in probs.data().chunks(c) {
        let mut best = 0;
        for (k, &p) in pixel.iter().enumerate() {
            if p > pixel[best] {
                best = k;
            }
        }
        labels.push(best as u8);
    }
    LabelMap::new(h, w, labels)
}

/// Per-class normalized gradient mass: for each ground-truth class, the
/// summed magnitude of the loss gradient into the logits of that class's
/// pixels, divided by the largest entry (absent classes report 0).
///
/// `loss_fn` receives the per-image logit graphs and builds the scalar
/// objective under the regime being analyzed.
pub fn grad_per_class<F>(
    net: &SegNet,
    batch: &[(Tensor, LabelMap)],
    loss_fn: F,
) -> Result<Vec<Real>>
where
    F: FnOnce(&[Tensor]) -> Result<Tensor>,
{
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut logit_graphs = Vec::with_capacity(batch.len());
    for (image, _) in batch {
        let out = net.forward(image)?;
        logit_graphs.push(out.logits);
    }
    let loss = loss_fn(&logit_graphs)?;
    loss.backward()?;
    let mut mass = vec![0.0; NUM_CLASSES];
    let mut seen = vec![false; NUM_CLASSES];
    for ((_, labels), logits) in batch.iter().zip(&logit_graphs) {
        let c = logits.shape()[2];
        let g = logits
            .grad()
            .ok_or_else(|| Error::InvalidArg("loss does not reach the logits".into()))?;
        for (i, &l) in labels.indices().iter().enumerate() {
            seen[l] = true;
            let row = &g[i * c..(i + 1) * c];
            mass[l] += row.iter().map(|v| v.abs()).sum::<Real>() / c as Real;
        }
    }
    let max = mass.iter().cloned().fold(0.0, Real::max);
    if max > 0.0 {
        mass.iter_mut().for_each(|v| *v /= max);
    }
    for (c, m) in mass.iter_mut().enumerate() {
        if !seen[c] {
            *m = 0.0;
        }
    }
    Ok(mass)
}

/// Default rendering palette (RGB bytes per class).
pub fn default_palette() -> Vec<[u8; 3]> {
    vec![
        [135, 206, 235], // sky
        [140, 89, 71],   // building
        [66, 66, 77],    // road
        [168, 161, 140], // sidewalk
        [209, 31, 31],   // vehicle
        [242, 158, 51],  // pedestrian
        [117, 117, 117], // pole
        [237, 219, 31],  // sign
    ]
}

/// Encode a label map as a binary portable pixmap (P6).
pub fn render(labels: &LabelMap, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    for &l in labels.raw() {
        if l as usize >= palette.len() {
            return Err(Error::InvalidArg(format!(
                "render: label {l} has no palette entry ({} colors)",
                palette.len()
            )));
        }
    }
    let mut out = format!("P6\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    for &l in labels.raw() {
        out.extend_from_slice(&palette[l as usize]);
    }
    Ok(out)
}

/// Encode a float image in [0,1] (h,w,3) as a binary portable pixmap.
pub fn render_image(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::InvalidArg(format!(
            "render_image expects (h,w,3), got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{self, IGNORE};
    use crate::rng::DetRng;
    use crate::synthworld::{self, Domain, WorldConfig};

    #[test]
    fn miou_perfect_and_disjoint() {
        let a = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let r = miou(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert_eq!(r.miou, 1.0);
        // full two-class swap
        let gt = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let pred = LabelMap::new(1, 2, vec![1, 0]).unwrap();
        let r2 = miou(std::slice::from_ref(&pred), std::slice::from_ref(&gt)).unwrap();
        assert_eq!(r2.miou, 0.0);
    }

    #[test]
    fn miou_hand_case() {
        // pred [0,0,1,1] vs gt [0,1,1,1]: IoU0 = 1/2, IoU1 = 2/3
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let pred = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let r = miou(std::slice::from_ref(&pred), std::slice::from_ref(&gt)).unwrap();
        assert!((r.per_class_iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((r.miou - 0.5833).abs() < 1e-4);
        // classes absent from both sides are excluded
        assert!(r.per_class_iou[5].is_none());
    }

    #[test]
    fn confusion_conserves_pixels_and_permutes() {
        let cfg = WorldConfig::default();
        let a = synthworld::generate(1, Domain::Source, &cfg).unwrap().labels;
        let b = synthworld::generate(2, Domain::Source, &cfg).unwrap().labels;
        let mut cm = ConfusionMatrix::new(NUM_CLASSES);
        cm.record(&a, &b).unwrap();
        assert_eq!(cm.total(), (32 * 32) as u64);
        // consistent relabeling leaves the miou unchanged
        let swap = |m: &LabelMap| {
            let data = m.raw().iter().map(|&l| match l {
                0 => 1,
                1 => 0,
                x => x,
            });
            LabelMap::new(m.height, m.width, data.collect()).unwrap()
        };
        let r1 = miou(std::slice::from_ref(&b), std::slice::from_ref(&a)).unwrap();
        let r2 = miou(&[swap(&b)], &[swap(&a)]).unwrap();
        assert!((r1.miou - r2.miou).abs() < 1e-12);
    }

    #[test]
    fn grad_mass_focuses_on_present_classes() {
        let net = SegNet::init(3, NUM_CLASSES);
        let mut rng = DetRng::new(0);
        let image = Tensor::from_vec(
            (0..8 * 8 * 3).map(|_| rng.uniform()).collect(),
            &[8, 8, 3],
        )
        .unwrap();
        let labels = LabelMap::filled(8, 8, 2);
        let g = grad_per_class(&net, &[(image, labels.clone())], |logits| {
            let probs = logits[0].softmax(2)?;
            losses::cross_entropy_labels(&probs, &labels, None)
        })
        .unwrap();
        assert_eq!(g[2], 1.0);
        for (c, &v) in g.iter().enumerate() {
            if c != 2 {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn grad_mass_is_scale_invariant_and_symmetric() {
        let net = SegNet::init(5, NUM_CLASSES);
        let mut rng = DetRng::new(7);
        let image = Tensor::from_vec(
            (0..8 * 8 * 3).map(|_| rng.uniform()).collect(),
            &[8, 8, 3],
        )
        .unwrap();
        // two classes, equal pixel counts, symmetric layout
        let labels = LabelMap::new(
            8,
            8,
            (0..64).map(|i| if i % 2 == 0 { 0u8 } else { 1u8 }).collect(),
        )
        .unwrap();
        // uniform predictions: zeroed net gives exactly symmetric gradients
        let znet = SegNet::zeros(NUM_CLASSES);
        let run = |net: &SegNet, scale: Real| {
            grad_per_class(net, &[(image.detach(), labels.clone())], |logits| {
                let probs = logits[0].softmax(2)?;
                Ok(losses::cross_entropy_labels(&probs, &labels, None)?.mul_scalar(scale))
            })
            .unwrap()
        };
        let g = run(&znet, 1.0);
        assert!((g[0] - g[1]).abs() < 1e-9, "{g:?}");
        let a = run(&net, 1.0);
        let b = run(&net, 7.5);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn render_cases() {
        let palette = default_palette();
        let m = LabelMap::new(1, 1, vec![0]).unwrap();
        let bytes = render(&m, &palette).unwrap();
        let header = b"P6\n1 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &palette[0]);
        // distinct maps render to distinct bytes under an injective palette
        let m2 = LabelMap::new(1, 1, vec![3]).unwrap();
        assert_ne!(render(&m2, &palette).unwrap(), bytes);
        // short palette rejected
        assert!(render(&m2, &palette[..2].to_vec()).is_err());
        // header fields parse back
        let text = String::from_utf8_lossy(&bytes[..header.len()]).to_string();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("P6"));
        assert_eq!(lines.next(), Some("1 1"));
        assert_eq!(lines.next(), Some("255"));
    }

    #[test]
    fn ignore_is_out_of_band() {
        assert!(IGNORE > NUM_CLASSES);
    }
}
