//! Conditional structure network: a masked multi-head-attention model of
//! the density of a segmentation map's unknown pixels given its known ones.
//!
//! Every pixel is a token. Known positions contribute their class content
//! (an embedding row for hard labels, the expectation of embedding rows
//! under the pixel's distribution for soft maps); masked positions
//! contribute only the learned mask token, so the network cannot read their
//! content. Attention keys are gated to known positions plus self, with
//! gated-out weights exactly zero after normalization.

use std::path::Path;

use crate::ndgrad::io;
use crate::rng::DetRng;
use crate::synthworld::LabelMap;
use crate::{Error, Real, Result, Tensor};

/// Token embedding width.
pub const EMBED: usize = 64;
/// Attention blocks.
pub const BLOCKS: usize = 4;
/// Heads per block.
pub const HEADS: usize = 4;
/// Hidden width of the residual perceptron.
pub const MLP_HIDDEN: usize = 128;
const LN_EPS: Real = 1e-5;

/// Binary mask over an h x w grid; `true` marks an unknown (masked) pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    masked: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, masked: Vec<bool>) -> Result<BinaryMask> {
        if masked.len() != height * width {
            return Err(Error::InvalidArg(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                masked.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            masked,
        })
    }

    pub fn all_masked(height: usize, width: usize) -> BinaryMask {
        BinaryMask::new(height, width, vec![true; height * width]).unwrap()
    }

    pub fn all_known(height: usize, width: usize) -> BinaryMask {
        BinaryMask::new(height, width, vec![false; height * width]).unwrap()
    }

    pub fn single_known(height: usize, width: usize, known_pos: usize) -> BinaryMask {
        let mut m = vec![true; height * width];
        m[known_pos] = false;
        BinaryMask::new(height, width, m).unwrap()
    }

    #[inline]
    pub fn is_masked(&self, pos: usize) -> bool {
        self.masked[pos]
    }

    pub fn raw(&self) -> &[bool] {
        &self.masked
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn set(&mut self, pos: usize, masked: bool) {
        self.masked[pos] = masked;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskScheme {
    /// Bernoulli mask with rate drawn uniformly from [0.15, 1]; always at
    /// least one masked position.
    UniformRate,
    /// Exactly one known pixel.
    SingleKnown,
    /// Everything masked (models the unconditional likelihood).
    AllMasked,
}

/// Deterministic mask draw for a scheme.
pub fn sample_mask(seed: u64, height: usize, width: usize, scheme: MaskScheme) -> BinaryMask {
    let mut rng = DetRng::new(seed).derive_str("mask");
    let n = height * width;
    match scheme {
        MaskScheme::AllMasked => BinaryMask::all_masked(height, width),
        MaskScheme::SingleKnown => BinaryMask::single_known(height, width, rng.below(n)),
        MaskScheme::UniformRate => {
            let rate = rng.uniform_in(0.15, 1.0);
            let mut masked: Vec<bool> = (0..n).map(|_| rng.uniform() < rate).collect();
            if !masked.iter().any(|&m| m) {
                let pos = rng.below(n);
                masked[pos] = true;
            }
            BinaryMask::new(height, width, masked).unwrap()
        }
    }
}

#[derive(Clone)]
pub struct AttnBlock {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

impl AttnBlock {
    fn init(rng: &mut DetRng) -> AttnBlock {
        let lin = |rng: &mut DetRng, n_in: usize, n_out: usize| {
            let bound = 1.0 / (n_in as Real).sqrt();
            let data = (0..n_in * n_out).map(|_| rng.uniform_in(-bound, bound)).collect();
            Tensor::param(data, &[n_in, n_out]).unwrap()
        };
        let zeros = |n: usize| Tensor::param(vec![0.0; n], &[n]).unwrap();
        let ones = |n: usize| Tensor::param(vec![1.0; n], &[n]).unwrap();
        AttnBlock {
            ln1_g: ones(EMBED),
            ln1_b: zeros(EMBED),
            wq: lin(rng, EMBED, EMBED),
            bq: zeros(EMBED),
            wk: lin(rng, EMBED, EMBED),
            bk: zeros(EMBED),
            wv: lin(rng, EMBED, EMBED),
            bv: zeros(EMBED),
            wo: lin(rng, EMBED, EMBED),
            bo: zeros(EMBED),
            ln2_g: ones(EMBED),
            ln2_b: zeros(EMBED),
            w_up: lin(rng, EMBED, MLP_HIDDEN),
            b_up: zeros(MLP_HIDDEN),
            w_down: lin(rng, MLP_HIDDEN, EMBED),
            b_down: zeros(EMBED),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w_up, &self.b_up, &self.w_down,
            &self.b_down,
        ]
    }

    /// Pre-norm attention + residual perceptron.
    ///
    /// Attention reaches known positions plus self, so scores are built
    /// against the known-key block and one self column instead of the full
    /// N x N matrix; `gate` marks, per row, which of those nk+1 columns are
    /// admissible (a known row must not count itself twice).
    fn forward(&self, x: &Tensor, known: &[usize], gate: &[bool]) -> Result<Tensor> {
        let dh = EMBED / HEADS;
        let nk = known.len();
        let h = x.layer_norm(&self.ln1_g, &self.ln1_b, LN_EPS)?;
        let q = h.matmul(&self.wq)?.add_bias(&self.bq)?;
        let k = h.matmul(&self.wk)?.add_bias(&self.bk)?;
        let v = h.matmul(&self.wv)?.add_bias(&self.bv)?;
        let scale = 1.0 / (dh as Real).sqrt();
        let ones_row = Tensor::full(&[1, dh], 1.0)?;
        let mut head_outs = Vec::with_capacity(HEADS);
        for j in 0..HEADS {
            let qj = q.slice(1, j * dh, dh)?;
            let kj = k.slice(1, j * dh, dh)?;
            let vj = v.slice(1, j * dh, dh)?;
            let n = qj.shape()[0];
            let self_scores = qj.mul(&kj)?.sum_axis(1)?.reshape(&[n, 1])?;
            let scores = if nk > 0 {
                let k_known = kj.gather(0, known)?;
                let block = qj.matmul(&k_known.transpose(0, 1)?)?;
                Tensor::concat(&[block, self_scores], 1)?
            } else {
                self_scores
            };
            let attn = scores.mul_scalar(scale).masked_softmax_last(gate)?;
            let self_w = attn.slice(1, nk, 1)?;
            let self_part = self_w.matmul(&ones_row)?.mul(&vj)?;
            let out_j = if nk > 0 {
                let v_known = vj.gather(0, known)?;
                attn.slice(1, 0, nk)?.matmul(&v_known)?.add(&self_part)?
            } else {
                self_part
            };
            head_outs.push(out_j);
        }
        let merged = Tensor::concat(&head_outs, 1)?;
        let attn_out = merged.matmul(&self.wo)?.add_bias(&self.bo)?;
        let a = x.add(&attn_out)?;
        let h2 = a.layer_norm(&self.ln2_g, &self.ln2_b, LN_EPS)?;
        let mlp = h2
            .matmul(&self.w_up)?
            .add_bias(&self.b_up)?
            .tanh()
            .matmul(&self.w_down)?
            .add_bias(&self.b_down)?;
        a.add(&mlp)
    }
}

/// Masked multi-head-attention conditional density network over an
/// `height x width` token grid.
#[derive(Clone)]
pub struct StructNet {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// (C+1, E); row C is the mask token.
    pub embed: Tensor,
    /// (N, E) learned positional embedding.
    pub pos: Tensor,
    pub blocks: Vec<AttnBlock>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    /// (E, C) output projection to per-class logits; zero-initialized so a
    /// fresh network predicts the uniform distribution.
    pub proj: Tensor,
    pub proj_b: Tensor,
}

impl StructNet {
    pub fn init(seed: u64, classes: usize, height: usize, width: usize) -> StructNet {
        let mut rng = DetRng::new(seed).derive_str("structnet");
        let n = height * width;
        let emb = |rng: &mut DetRng, rows: usize| {
            let data = (0..rows * EMBED).map(|_| 0.05 * rng.normal()).collect();
            Tensor::param(data, &[rows, EMBED]).unwrap()
        };
        let embed = emb(&mut rng, classes + 1);
        let pos = emb(&mut rng, n);
        let blocks = (0..BLOCKS).map(|_| AttnBlock::init(&mut rng)).collect();
        StructNet {
            classes,
            height,
            width,
            embed,
            pos,
            blocks,
            lnf_g: Tensor::param(vec![1.0; EMBED], &[EMBED]).unwrap(),
            lnf_b: Tensor::param(vec![0.0; EMBED], &[EMBED]).unwrap(),
            proj: Tensor::param(vec![0.0; EMBED * classes], &[EMBED, classes]).unwrap(),
            proj_b: Tensor::param(vec![0.0; classes], &[classes]).unwrap(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.embed, &self.pos];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend([&self.lnf_g, &self.lnf_b, &self.proj, &self.proj_b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![&mut self.embed, &mut self.pos];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.push(&mut self.lnf_g);
        v.push(&mut self.lnf_b);
        v.push(&mut self.proj);
        v.push(&mut self.proj_b);
        v
    }

    pub fn frozen(&self) -> StructNet {
        let mut net = self.clone();
        for p in net.params_mut() {
            *p = p.detach();
        }
        net
    }

    /// Per-row gate over the known-block-plus-self score columns. Known
    /// rows already appear in the block, so their self column is shut off;
    /// the resulting weights are exactly those of the N x N gate
    /// `allowed[i][j] = !masked[j] || i == j`.
    fn key_gate(&self, mask: &BinaryMask) -> (Vec<usize>, Vec<bool>) {
        let n = self.num_tokens();
        let known: Vec<usize> = (0..n).filter(|&j| !mask.is_masked(j)).collect();
        let cols = known.len() + 1;
        let mut gate = vec![true; n * cols];
        for i in 0..n {
            gate[i * cols + known.len()] = mask.is_masked(i);
        }
        (known, gate)
    }

    fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.height, self.width) {
            return Err(Error::ShapeMismatch {
                op: "structnet",
                lhs: vec![h, w],
                rhs: vec![self.height, self.width],
            });
        }
        Ok(())
    }

    /// Run the blocks over embedded content; returns per-position class
    /// distributions (N, C).
    fn forward_embedded(&self, content: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
        let (known, gate) = self.key_gate(mask);
        let mut x = content.add(&self.pos)?;
        for block in &self.blocks {
            x = block.forward(&x, &known, &gate)?;
        }
        let logits = x
            .layer_norm(&self.lnf_g, &self.lnf_b, LN_EPS)?
            .matmul(&self.proj)?
            .add_bias(&self.proj_b)?;
        logits.softmax(1)
    }

    /// Forward with hard labels: known positions embed their class row,
    /// masked positions the mask token (selected by index, so masked
    /// content never enters the computation).
    pub fn forward_hard(&self, labels: &LabelMap, mask: &BinaryMask) -> Result<Tensor> {
        self.check_grid(labels.height, labels.width)?;
        let idx: Vec<usize> = labels
            .indices()
            .iter()
            .enumerate()
            .map(|(i, &l)| if mask.is_masked(i) { self.classes } else { l })
            .collect();
        let content = self.embed.gather(0, &idx)?;
        self.forward_embedded(&content, mask)
    }

    /// Forward with a soft map: known positions carry the expectation of
    /// class embeddings under the pixel's distribution; masked positions
    /// contribute exactly the mask token.
    pub fn forward_soft(&self, y: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
        if y.rank() != 3 || y.shape()[2] != self.classes {
            return Err(Error::ShapeMismatch {
                op: "structnet_soft",
                lhs: y.shape().to_vec(),
                rhs: vec![self.height, self.width, self.classes],
            });
        }
        self.check_grid(y.shape()[0], y.shape()[1])?;
        let n = self.num_tokens();
        let y_flat = y.reshape(&[n, self.classes])?;
        let class_rows = self.embed.slice(0, 0, self.classes)?;
        let soft = y_flat.matmul(&class_rows)?;
        // zero out masked rows, then add the broadcast mask token there
        let keep: Vec<Real> = (0..n * EMBED)
            .map(|i| if mask.is_masked(i / EMBED) { 0.0 } else { 1.0 })
            .collect();
        let keep = Tensor::from_vec(keep, &[n, EMBED])?;
        let drop: Vec<Real> = (0..n)
            .map(|i| if mask.is_masked(i) { 1.0 } else { 0.0 })
            .collect();
        let drop = Tensor::from_vec(drop, &[n, 1])?;
        let mask_row = self.embed.slice(0, self.classes, 1)?;
        let content = soft.mul(&keep)?.add(&drop.matmul(&mask_row)?)?;
        self.forward_embedded(&content, mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut items: Vec<(String, Tensor)> = vec![(
            "meta".to_string(),
            Tensor::from_vec(
                vec![
                    self.classes as Real,
                    self.height as Real,
                    self.width as Real,
                    self.blocks.len() as Real,
                ],
                &[4],
            )?,
        )];
        items.push(("embed".into(), self.embed.clone()));
        items.push(("pos".into(), self.pos.clone()));
        let block_names = [
            "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b",
            "w_up", "b_up", "w_down", "b_down",
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in block_names.iter().zip(b.params()) {
                items.push((format!("block{i}/{name}"), t.clone()));
            }
        }
        items.push(("lnf_g".into(), self.lnf_g.clone()));
        items.push(("lnf_b".into(), self.lnf_b.clone()));
        items.push(("proj".into(), self.proj.clone()));
        items.push(("proj_b".into(), self.proj_b.clone()));
        io::save_container(path, &items)
    }

    pub fn load(path: &Path) -> Result<StructNet> {
        let items = io::load_container(path)?;
        let get = |name: &str| -> Result<Tensor> {
            items
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.to_param())
                .ok_or_else(|| Error::Parse(format!("structnet checkpoint missing {name}")))
        };
        let meta = get("meta")?;
        let classes = meta.data()[0] as usize;
        let height = meta.data()[1] as usize;
        let width = meta.data()[2] as usize;
        let nblocks = meta.data()[3] as usize;
        let mut blocks = Vec::with_capacity(nblocks);
        for i in 0..nblocks {
            let g = |name: &str| get(&format!("block{i}/{name}"));
            blocks.push(AttnBlock {
                ln1_g: g("ln1_g")?,
                ln1_b: g("ln1_b")?,
                wq: g("wq")?,
                bq: g("bq")?,
                wk: g("wk")?,
                bk: g("bk")?,
                wv: g("wv")?,
                bv: g("bv")?,
                wo: g("wo")?,
                bo: g("bo")?,
                ln2_g: g("ln2_g")?,
                ln2_b: g("ln2_b")?,
                w_up: g("w_up")?,
                b_up: g("b_up")?,
                w_down: g("w_down")?,
                b_down: g("b_down")?,
            });
        }
        Ok(StructNet {
            classes,
            height,
            width,
            embed: get("embed")?,
            pos: get("pos")?,
            blocks,
            lnf_g: get("lnf_g")?,
            lnf_b: get("lnf_b")?,
            proj: get("proj")?,
            proj_b: get("proj_b")?,
        })
    }
}

/// Mean negative log-probability of the true classes at masked positions,
/// from a (N, C) prediction.
pub fn masked_nll_from_probs(
    probs: &Tensor,
    labels: &LabelMap,
    mask: &BinaryMask,
) -> Result<Tensor> {
    let masked = mask.masked_positions();
    if masked.is_empty() {
        return Err(Error::InvalidArg(
            "masked_nll: mask has no masked position".into(),
        ));
    }
    let idx = labels.indices();
    let rows = probs.gather(0, &masked)?;
    let classes: Vec<usize> = masked.iter().map(|&p| idx[p]).collect();
    Ok(rows.take_per_row(&classes)?.log().mean_all().neg())
}

/// `-(1/|m|) sum_{i masked} log p_i(labels_i)` under the network.
pub fn masked_nll(net: &StructNet, labels: &LabelMap, mask: &BinaryMask) -> Result<Tensor> {
    let probs = net.forward_hard(labels, mask)?;
    masked_nll_from_probs(&probs, labels, mask)
}

/// Conditional likelihood loss of a soft map: average over sampled anchors
/// `i` of the soft-target masked NLL with the single-known mask at `i`.
/// `num_anchors == N` runs every anchor exactly once; smaller values draw
/// anchors uniformly with replacement. Differentiable w.r.t. `y`.
pub fn comal_loss(net: &StructNet, y: &Tensor, num_anchors: usize, seed: u64) -> Result<Tensor> {
    if num_anchors == 0 {
        return Err(Error::InvalidArg("comal_loss: need at least one anchor".into()));
    }
    let n = net.num_tokens();
    let anchors: Vec<usize> = if num_anchors >= n {
        (0..n).collect()
    } else {
        let mut rng = DetRng::new(seed).derive_str("comal-anchors");
        (0..num_anchors).map(|_| rng.below(n)).collect()
    };
    let y_flat = y.reshape(&[n, net.classes])?;
    let mut total = Tensor::scalar(0.0);
    for &anchor in &anchors {
        let mask = BinaryMask::single_known(net.height, net.width, anchor);
        let probs = net.forward_soft(y, &mask)?;
        let masked = mask.masked_positions();
        let p_rows = probs.gather(0, &masked)?;
        let y_rows = y_flat.gather(0, &masked)?;
        let per_pos = p_rows.log().mul(&y_rows)?.sum_axis(1)?;
        total = total.add(&per_pos.mean_all().neg())?;
    }
    Ok(total.mul_scalar(1.0 / anchors.len() as Real))
}

/// Configuration for structure-network training.
#[derive(Clone, Copy, Debug)]
pub struct StructTrainCfg {
    pub epochs: usize,
    pub lr: Real,
    pub batch: usize,
    /// When set, every draw uses this scheme; otherwise 10% single-known,
    /// 10% all-masked, 80% uniform-rate.
    pub force_scheme: Option<MaskScheme>,
}

impl StructTrainCfg {
    pub fn new(epochs: usize, lr: Real) -> StructTrainCfg {
        StructTrainCfg {
            epochs,
            lr,
            batch: 4,
            force_scheme: None,
        }
    }
}

/// Minimize the masked objective over source ground-truth maps with fresh
/// mask draws each step. Deterministic from `seed`.
pub fn train_struct(
    net: StructNet,
    maps: &[LabelMap],
    cfg: StructTrainCfg,
    seed: u64,
) -> Result<StructNet> {
    if maps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = net;
    let mut rng = DetRng::new(seed).derive_str("train-struct");
    let momentum: Real = 0.9;
    let clip: Real = 5.0;
    let batch = cfg.batch.max(1).min(maps.len());
    let mut velocity: Vec<Vec<Real>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..maps.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let mut loss = Tensor::scalar(0.0);
            for &i in chunk {
                let scheme = cfg.force_scheme.unwrap_or_else(|| {
                    let u = rng.uniform();
                    if u < 0.1 {
                        MaskScheme::SingleKnown
                    } else if u < 0.2 {
                        MaskScheme::AllMasked
                    } else {
                        MaskScheme::UniformRate
                    }
                });
                let mask = sample_mask(rng.next_u64(), net.height, net.width, scheme);
                loss = loss.add(&masked_nll(&net, &maps[i], &mask)?)?;
            }
            let loss = loss.mul_scalar(1.0 / chunk.len() as Real);
            if !loss.all_finite() {
                return Err(Error::Diverged { step });
            }
            loss.backward()?;
            let grads: Vec<Vec<Real>> = net
                .params()
                .iter()
                .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
                .collect();
            if grads.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Diverged { step });
            }
            let norm: Real = grads.iter().flatten().map(|&g| g * g).sum::<Real>().sqrt();
            let scale = if norm > clip { clip / norm } else { 1.0 };
            for ((p, v), g) in net.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                let mut data = p.data().to_vec();
                for ((pv, vel), gv) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vel = momentum * *vel + scale * gv;
                    *pv -= cfg.lr * *vel;
                }
                **p = Tensor::param(data, p.shape())?;
            }
            step += 1;
        }
    }
    Ok(net)
}

/// Iterative confidence-ordered decoding: repeatedly run the network,
/// commit the most confident masked position with a temperature-scaled
/// categorical draw, unmask it, and continue until nothing is masked.
/// Known pixels are never altered.
pub fn sample(
    net: &StructNet,
    mask: &BinaryMask,
    known: &LabelMap,
    temperature: Real,
    seed: u64,
) -> Result<LabelMap> {
    net.check_grid(known.height, known.width)?;
    let frozen = net.frozen();
    let mut rng = DetRng::new(seed).derive_str("struct-sample");
    let mut labels = known.clone();
    let mut cur = mask.clone();
    let w = net.width;
    while cur.masked_count() > 0 {
        let probs = frozen.forward_hard(&labels, &cur)?;
        // most confident masked position
        let mut best_pos = usize::MAX;
        let mut best_conf = -1.0;
        for pos in cur.masked_positions() {
            let row = &probs.data()[pos * net.classes..(pos + 1) * net.classes];
            let conf = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            if conf > best_conf {
                best_conf = conf;
                best_pos = pos;
            }
        }
        let row = &probs.data()[best_pos * net.classes..(best_pos + 1) * net.classes];
        let class = draw_class(row, temperature, &mut rng);
        labels.set(best_pos / w, best_pos % w, class as u8);
        cur.set(best_pos, false);
    }
    Ok(labels)
}

fn draw_class(probs: &[Real], temperature: Real, rng: &mut DetRng) -> usize {
    if temperature <= 1e-9 {
        let mut best = 0;
        for (k, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = k;
            }
        }
        return best;
    }
    let scaled: Vec<Real> = probs.iter().map(|&p| p.max(1e-300).powf(1.0 / temperature)).collect();
    let z: Real = scaled.iter().sum();
    let mut u = rng.uniform() * z;
    for (k, &p) in scaled.iter().enumerate() {
        if u < p {
            return k;
        }
        u -= p;
    }
    scaled.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::check::{grad_check, DEFAULT_STEP};

    fn tiny_net(seed: u64) -> StructNet {
        StructNet::init(seed, 4, 4, 4)
    }

    fn random_labels(h: usize, w: usize, classes: usize, seed: u64) -> LabelMap {
        let mut rng = DetRng::new(seed);
        LabelMap::new(h, w, (0..h * w).map(|_| rng.below(classes) as u8).collect()).unwrap()
    }

    #[test]
    fn mask_schemes() {
        let m = sample_mask(0, 4, 4, MaskScheme::AllMasked);
        assert_eq!(m.masked_count(), 16);
        let s = sample_mask(1, 4, 4, MaskScheme::SingleKnown);
        assert_eq!(s.masked_count(), 15);
        assert_eq!(sample_mask(2, 4, 4, MaskScheme::UniformRate), sample_mask(2, 4, 4, MaskScheme::UniformRate));
        for seed in 0..50 {
            assert!(sample_mask(seed, 4, 4, MaskScheme::UniformRate).masked_count() >= 1);
        }
    }

    #[test]
    fn forward_rows_are_distributions() {
        let net = tiny_net(0);
        let labels = random_labels(4, 4, 4, 1);
        let mask = sample_mask(3, 4, 4, MaskScheme::UniformRate);
        let probs = net.forward_hard(&labels, &mask).unwrap();
        assert_eq!(probs.shape(), &[16, 4]);
        for row in probs.data().chunks(4) {
            let s: Real = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_projection_gives_uniform_rows() {
        let net = tiny_net(2); // proj is zero-initialized
        let labels = random_labels(4, 4, 4, 3);
        let probs = net.forward_hard(&labels, &BinaryMask::all_masked(4, 4)).unwrap();
        for &p in probs.data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_content_is_invisible_bitwise() {
        let net = tiny_net(4);
        let mask = sample_mask(7, 4, 4, MaskScheme::UniformRate);
        let labels = random_labels(4, 4, 4, 5);
        let base = net.forward_hard(&labels, &mask).unwrap();
        let mut rng = DetRng::new(11);
        for _ in 0..20 {
            let mut perturbed = labels.clone();
            for pos in mask.masked_positions() {
                perturbed.set(pos / 4, pos % 4, rng.below(4) as u8);
            }
            let out = net.forward_hard(&perturbed, &mask).unwrap();
            for (a, b) in base.data().iter().zip(out.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn soft_forward_ignores_masked_rows_bitwise() {
        let net = tiny_net(6);
        let mask = sample_mask(9, 4, 4, MaskScheme::UniformRate);
        let mut rng = DetRng::new(13);
        let mk_soft = |rng: &mut DetRng, keep_from: &Option<Tensor>| {
            let mut data: Vec<Real> = (0..16 * 4).map(|_| rng.uniform() + 0.1).collect();
            if let Some(prev) = keep_from {
                for i in 0..16 {
                    if !mask.is_masked(i) {
                        data[i * 4..(i + 1) * 4].copy_from_slice(&prev.data()[i * 4..(i + 1) * 4]);
                    }
                }
            }
            let t = Tensor::from_vec(data, &[4, 4, 4]).unwrap();
            let flat = t.reshape(&[16, 4]).unwrap();
            let s = flat.sum_axis(1).unwrap();
            let mut out = vec![0.0; 16 * 4];
            for i in 0..16 {
                for c in 0..4 {
                    out[i * 4 + c] = flat.data()[i * 4 + c] / s.data()[i];
                }
            }
            Tensor::from_vec(out, &[4, 4, 4]).unwrap()
        };
        let y0 = mk_soft(&mut rng, &None);
        let base = net.forward_soft(&y0, &mask).unwrap();
        let y0_flat = Some(y0.reshape(&[16, 4]).unwrap());
        for _ in 0..5 {
            let y1 = mk_soft(&mut rng, &y0_flat);
            let out = net.forward_soft(&y1, &mask).unwrap();
            for (a, b) in base.data().iter().zip(out.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn masked_nll_closed_forms() {
        let labels = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        // perfect prediction at the single masked position -> 0
        let probs = Tensor::from_vec(vec![1.0, 0.0, 0.5, 0.5], &[2, 2]).unwrap();
        let m = BinaryMask::new(1, 2, vec![true, false]).unwrap();
        assert!(masked_nll_from_probs(&probs, &labels, &m).unwrap().item().abs() < 1e-10);
        // one masked pixel predicted 0.5 -> log 2
        let m2 = BinaryMask::new(1, 2, vec![false, true]).unwrap();
        let l2 = masked_nll_from_probs(&probs, &labels, &m2).unwrap().item();
        assert!((l2 - (2.0 as Real).ln()).abs() < 1e-12);
        // probs 0.5 and 0.25 -> 1.5 log 2
        let probs3 = Tensor::from_vec(vec![0.5, 0.5, 0.75, 0.25], &[2, 2]).unwrap();
        let m3 = BinaryMask::new(1, 2, vec![true, true]).unwrap();
        let l3 = masked_nll_from_probs(&probs3, &labels, &m3).unwrap().item();
        assert!((l3 - 1.5 * (2.0 as Real).ln()).abs() < 1e-12);
        // no masked position is an error
        assert!(masked_nll_from_probs(&probs, &labels, &BinaryMask::all_known(1, 2)).is_err());
    }

    #[test]
    fn train_zero_epochs_is_identity() {
        let net = tiny_net(8);
        let before: Vec<Vec<Real>> = net.params().iter().map(|p| p.data().to_vec()).collect();
        let maps = vec![random_labels(4, 4, 4, 1)];
        let out = train_struct(net, &maps, StructTrainCfg::new(0, 0.01), 0).unwrap();
        let after: Vec<Vec<Real>> = out.params().iter().map(|p| p.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn all_masked_training_reaches_marginal_floor() {
        // single map, all-masked draws: the optimum of the per-position
        // objective is the map itself, so the loss must fall to (or below)
        // the position-agnostic marginal cross-entropy floor
        let map = random_labels(4, 4, 4, 21);
        let hist = crate::synthworld::class_histogram(std::slice::from_ref(&map)).unwrap();
        let floor: Real = -map
            .raw()
            .iter()
            .map(|&l| (hist[l as usize]).ln())
            .sum::<Real>()
            / 16.0;
        let mut cfg = StructTrainCfg::new(160, 0.02);
        cfg.force_scheme = Some(MaskScheme::AllMasked);
        let net = train_struct(tiny_net(9), std::slice::from_ref(&map), cfg, 3).unwrap();
        let nll = masked_nll(&net, &map, &BinaryMask::all_masked(4, 4)).unwrap().item();
        let init = (4.0 as Real).ln();
        assert!(nll < init, "no progress: {nll} vs init {init}");
        assert!(
            nll < floor + 0.15,
            "nll {nll} did not approach the marginal floor {floor}"
        );
    }

    #[test]
    fn comal_exhaustive_matches_explicit_average() {
        let net = tiny_net(10).frozen();
        let y = {
            let mut rng = DetRng::new(31);
            let logits: Vec<Real> = (0..16 * 4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            Tensor::from_vec(logits, &[4, 4, 4]).unwrap().softmax(2).unwrap().detach()
        };
        let exhaustive = comal_loss(&net, &y, 16, 0).unwrap().item();
        // manual average over all anchors
        let mut acc = 0.0;
        let y_flat = y.reshape(&[16, 4]).unwrap();
        for anchor in 0..16 {
            let mask = BinaryMask::single_known(4, 4, anchor);
            let probs = net.forward_soft(&y, &mask).unwrap();
            let mut per = 0.0;
            let mut cnt = 0;
            for pos in mask.masked_positions() {
                let mut s = 0.0;
                for c in 0..4 {
                    s += y_flat.data()[pos * 4 + c] * probs.data()[pos * 4 + c].ln();
                }
                per += -s;
                cnt += 1;
            }
            acc += per / cnt as Real;
        }
        acc /= 16.0;
        assert!((exhaustive - acc).abs() < 1e-10, "{exhaustive} vs {acc}");
    }

    #[test]
    fn comal_gradient_matches_finite_differences() {
        let net = tiny_net(12).frozen();
        let logits0 = {
            let mut rng = DetRng::new(41);
            Tensor::from_vec(
                (0..16 * 4).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
                &[4, 4, 4],
            )
            .unwrap()
        };
        let f = |logits: &Tensor| {
            let y = logits.softmax(2)?;
            comal_loss(&net, &y, 3, 17)
        };
        let err = grad_check(f, &logits0, DEFAULT_STEP).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn sample_respects_known_and_determinism() {
        let net = tiny_net(14);
        let known = random_labels(4, 4, 4, 51);
        // nothing masked: returns known unchanged
        let out = sample(&net, &BinaryMask::all_known(4, 4), &known, 0.7, 0).unwrap();
        assert_eq!(out, known);
        // half masked: known pixels never change, same seed same result
        let mask = sample_mask(5, 4, 4, MaskScheme::UniformRate);
        let a = sample(&net, &mask, &known, 0.9, 7).unwrap();
        let b = sample(&net, &mask, &known, 0.9, 7).unwrap();
        assert_eq!(a, b);
        for pos in 0..16 {
            if !mask.is_masked(pos) {
                assert_eq!(a.get(pos / 4, pos % 4), known.get(pos / 4, pos % 4));
            }
        }
    }

    #[test]
    fn degenerate_single_class_sampling_collapses() {
        // train on maps that are always class 2; low temperature sampling
        // must then emit class 2 everywhere
        let maps = vec![LabelMap::filled(4, 4, 2); 4];
        let mut cfg = StructTrainCfg::new(60, 0.05);
        cfg.force_scheme = Some(MaskScheme::UniformRate);
        let net = train_struct(tiny_net(15), &maps, cfg, 5).unwrap();
        let blank = LabelMap::filled(4, 4, 0);
        let out = sample(&net, &BinaryMask::all_masked(4, 4), &blank, 1e-12, 3).unwrap();
        assert!(out.raw().iter().all(|&l| l == 2), "{:?}", out.raw());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = tiny_net(16);
        let dir = std::env::temp_dir().join(format!("costruct-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("struct.ndgc");
        net.save(&path).unwrap();
        let back = StructNet::load(&path).unwrap();
        assert_eq!(back.height, 4);
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(a.data(), b.data());
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
