// Scratch timing/quality harness used while tuning defaults; not shipped.
use std::time::Instant;

use comal_lab::bimal;
use comal_lab::costruct::{self, BinaryMask, MaskScheme, StructTrainCfg};
use comal_lab::rng::DetRng;
use comal_lab::segnet::SegNet;
use comal_lab::synthworld::{self, Domain, NUM_CLASSES};
use comal_lab::trainer::{self, Regime, TrainConfig};
use comal_lab::Tensor;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "micro".into());
    match which.as_str() {
        "micro" => micro(),
        "phase" => phase(),
        "ablation" => ablation(),
        "sampling" => sampling(),
        "micro2" => micro2(),
        "micro3" => micro3(),
        "micro4" => micro4(),
        "micro5" => micro5(),
        other => eprintln!("unknown mode {other}"),
    }
}

fn micro() {
    let cfg = TrainConfig::default();
    let world = cfg.world();
    let sample = synthworld::generate(0, Domain::Source, &world).unwrap();
    let net = SegNet::init(0, NUM_CLASSES);

    // segnet forward
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let _ = net.forward(&sample.image).unwrap();
    }
    println!("segnet fwd (no grad build w/ params requiring grad...): {:?}/it", t0.elapsed() / reps);

    // segnet fwd+bwd
    let t0 = Instant::now();
    for _ in 0..reps {
        let out = net.forward(&sample.image).unwrap();
        let loss = comal_lab::losses::cross_entropy_labels(&out.probs, &sample.labels, None).unwrap();
        loss.backward().unwrap();
        for p in net.params() {
            p.clear_grad();
        }
    }
    println!("segnet fwd+bwd: {:?}/it", t0.elapsed() / reps);

    // structnet 16x16 forward (frozen)
    let sn = costruct::StructNet::init(0, NUM_CLASSES, 16, 16).frozen();
    let half = sample.labels.subsample2();
    let mask = costruct::sample_mask(0, 16, 16, MaskScheme::UniformRate);
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = sn.forward_hard(&half, &mask).unwrap();
    }
    println!("structnet16 fwd frozen: {:?}/it", t0.elapsed() / reps);

    // structnet fwd+bwd (trainable)
    let sn_t = costruct::StructNet::init(0, NUM_CLASSES, 16, 16);
    let t0 = Instant::now();
    for _ in 0..reps {
        let loss = costruct::masked_nll(&sn_t, &half, &mask).unwrap();
        loss.backward().unwrap();
        for p in sn_t.params() {
            p.clear_grad();
        }
    }
    println!("structnet16 fwd+bwd: {:?}/it", t0.elapsed() / reps);

    // comal_loss on soft map, 1 anchor, frozen net (fwd+bwd wrt y)
    let y = {
        let mut rng = DetRng::new(1);
        let data: Vec<f64> = (0..16 * 16 * 8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        Tensor::param(data, &[16, 16, 8]).unwrap().softmax(2).unwrap()
    };
    let t0 = Instant::now();
    for _ in 0..reps {
        let loss = costruct::comal_loss(&sn, &y, 1, 0).unwrap();
        loss.backward().unwrap();
    }
    println!("comal 1-anchor fwd+bwd: {:?}/it", t0.elapsed() / reps);

    // flow nll fwd+bwd at d=2048
    let codes = {
        let half = sample.labels.subsample2();
        bimal::relax(&bimal::one_hot(&half, NUM_CLASSES), bimal::RELAX_EPS).unwrap()
    };
    let flow = bimal::FlowModel::init(0, codes.len(), bimal::NUM_LAYERS);
    let t0 = Instant::now();
    for _ in 0..reps {
        let loss = bimal::nll(&flow, &codes.detach()).unwrap();
        loss.backward().unwrap();
        for p in flow.params() {
            p.clear_grad();
        }
    }
    println!("flow2048 nll fwd+bwd: {:?}/it", t0.elapsed() / reps);

    // struct sampling: one full 256-step decode
    let blank = synthworld::LabelMap::filled(16, 16, 0);
    let t0 = Instant::now();
    let _ = costruct::sample(&sn, &BinaryMask::all_masked(16, 16), &blank, 0.8, 0).unwrap();
    println!("struct full decode (256 commits): {:?}", t0.elapsed());
}

fn phase() {
    let mut cfg = TrainConfig::default();
    cfg.warmup_epochs = 30;
    if let Ok(lr) = std::env::var("CAL_LR") { cfg.lr = lr.parse().unwrap(); }
    if let Ok(e) = std::env::var("CAL_EPOCHS") { cfg.warmup_epochs = e.parse().unwrap(); }
    if let Ok(n) = std::env::var("CAL_COUNT") { cfg.source_count = n.parse().unwrap(); cfg.target_count = n.parse().unwrap(); }
    println!("lr={} epochs={} count={}", cfg.lr, cfg.warmup_epochs, cfg.source_count);
    let t0 = Instant::now();
    let data = trainer::generate_datasets(&cfg).unwrap();
    println!("datasets: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let warm = trainer::run_phase(
        Regime::SourceOnly,
        &cfg,
        &data,
        &trainer::FrozenModels::default(),
        trainer::Start::Fresh,
        cfg.warmup_epochs,
    )
    .unwrap();
    println!("warmup {} epochs: {:?}", cfg.warmup_epochs, t0.elapsed());
    for m in &warm.history {
        if m.miou >= 0.0 {
            println!(
                "epoch {:>3} loss {:.4} miou {:.4} tail {:.4}",
                m.epoch, m.loss, m.miou, m.tail_iou
            );
        }
    }
    // source-domain eval for contrast
    let src_eval: Vec<_> = data.source.iter().take(16).cloned().collect();
    let frozen = warm.net.frozen();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for s in &src_eval {
        preds.push(comal_lab::eval::argmax_labels(&frozen.forward(&s.image).unwrap().probs).unwrap());
        gts.push(s.labels.clone());
    }
    let r = comal_lab::eval::miou(&preds, &gts).unwrap();
    println!("source-domain miou: {:.4}", r.miou);
}

fn ablation() {
    let cfg = TrainConfig::default();
    let dir = std::env::temp_dir().join("comal-calibrate-ablation");
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    let table = trainer::ablation_suite(&cfg, &dir).unwrap();
    println!("ablation total: {:?}", t0.elapsed());
    println!("{table}");
}

fn sampling() {
    let mut cfg = TrainConfig::default();
    if let Ok(e) = std::env::var("CAL_SEPOCHS") { cfg.struct_epochs = e.parse().unwrap(); }
    if let Ok(lr) = std::env::var("CAL_SLR") { cfg.struct_lr = lr.parse().unwrap(); }
    if let Ok(n) = std::env::var("CAL_SCOUNT") { cfg.source_count = n.parse().unwrap(); }
    let temps: Vec<f64> = std::env::var("CAL_TEMPS").unwrap_or("0.3,0.5,0.8".into())
        .split(',').map(|t| t.parse().unwrap()).collect();
    println!("struct_epochs={} struct_lr={} maps={}", cfg.struct_epochs, cfg.struct_lr, cfg.source_count);
    let data = trainer::generate_datasets(&cfg).unwrap();
    let t0 = Instant::now();
    let sn = trainer::train_struct_for(&cfg, &data).unwrap();
    println!("struct training: {:?}", t0.elapsed());
    let frozen = sn.frozen();
    let blank = synthworld::LabelMap::filled(16, 16, 0);
    for &temp in &temps {
        let t0 = Instant::now();
        let mut ok = 0;
        let mut total_viol = 0;
        let n = 20;
        for seed in 0..n {
            let s = costruct::sample(&frozen, &BinaryMask::all_masked(16, 16), &blank, temp, seed).unwrap();
            let v = synthworld::validate_structure(&s);
            total_viol += v.len();
            if v.len() <= 2 { ok += 1; }
        }
        println!("T={temp}: decode {}: pass {}/{} (mean viol {:.2})", 
            humantime(t0.elapsed()), ok, n, total_viol as f64 / n as f64);
    }
}

fn humantime(d: std::time::Duration) -> String { format!("{:.1}s", d.as_secs_f64()) }

fn micro2() {
    use comal_lab::Real;
    let mut rng = DetRng::new(0);
    let mk = |rng: &mut DetRng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect::<Vec<Real>>(), shape).unwrap()
    };
    let a = mk(&mut rng, &[256, 64]);
    let w = mk(&mut rng, &[64, 64]);
    let reps = 200u32;
    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.matmul(&w).unwrap(); }
    println!("matmul 256x64@64x64: {:?}/it", t0.elapsed() / reps);

    let g = mk(&mut rng, &[64]);
    let b = mk(&mut rng, &[64]);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.layer_norm(&g, &b, 1e-5).unwrap(); }
    println!("layer_norm 256x64: {:?}/it", t0.elapsed() / reps);

    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.slice(1, 16, 16).unwrap(); }
    println!("slice 256x64 -> 256x16: {:?}/it", t0.elapsed() / reps);

    let idx: Vec<usize> = (0..110).map(|i| i * 2).collect();
    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.gather(0, &idx).unwrap(); }
    println!("gather 110 rows of 256x64: {:?}/it", t0.elapsed() / reps);

    let q = mk(&mut rng, &[256, 16]);
    let kk = mk(&mut rng, &[110, 16]);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = q.matmul(&kk.transpose(0,1).unwrap()).unwrap(); }
    println!("scores 256x16@16x110 (with transpose): {:?}/it", t0.elapsed() / reps);

    let scores = mk(&mut rng, &[256, 111]);
    let gate = vec![true; 256*111];
    let t0 = Instant::now();
    for _ in 0..reps { let _ = scores.masked_softmax_last(&gate).unwrap(); }
    println!("masked_softmax 256x111: {:?}/it", t0.elapsed() / reps);

    let up = mk(&mut rng, &[64, 128]);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.matmul(&up).unwrap().tanh(); }
    println!("mlp-up+tanh 256x64@64x128: {:?}/it", t0.elapsed() / reps);

    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.tanh(); }
    println!("tanh 256x64: {:?}/it", t0.elapsed() / reps);

    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.exp(); }
    println!("exp 256x64: {:?}/it", t0.elapsed() / reps);
}

fn micro3() {
    use comal_lab::Real;
    // replicate one attention block stage by stage on realistic shapes
    let mut rng = DetRng::new(0);
    let mk = |rng: &mut DetRng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect::<Vec<Real>>(), shape).unwrap()
    };
    let sn = costruct::StructNet::init(0, NUM_CLASSES, 16, 16).frozen();
    let labels = synthworld::generate(0, Domain::Source, &TrainConfig::default().world()).unwrap().labels.subsample2();
    for rate in [0.3, 0.6, 0.9] {
        let n = 256;
        let mut rng2 = DetRng::new(7);
        let masked: Vec<bool> = (0..n).map(|_| rng2.uniform() < rate).collect();
        let mask = BinaryMask::new(16, 16, masked).unwrap();
        let reps = 20u32;
        let t0 = Instant::now();
        for _ in 0..reps { let _ = sn.forward_hard(&labels, &mask).unwrap(); }
        println!("fwd rate {rate}: {:?}/it (known={})", t0.elapsed() / reps, 256 - mask.masked_count());
    }
    // the merged concat of four (256,16) tensors
    let parts: Vec<Tensor> = (0..4).map(|_| mk(&mut rng, &[256, 16])).collect();
    let reps = 200u32;
    let t0 = Instant::now();
    for _ in 0..reps { let _ = Tensor::concat(&parts, 1).unwrap(); }
    println!("concat 4x(256,16) axis1: {:?}/it", t0.elapsed() / reps);
    // add_bias and residual add
    let a = mk(&mut rng, &[256, 64]);
    let b = mk(&mut rng, &[64]);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.add_bias(&b).unwrap(); }
    println!("add_bias 256x64: {:?}/it", t0.elapsed() / reps);
    let c = mk(&mut rng, &[256, 64]);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.add(&c).unwrap(); }
    println!("add 256x64: {:?}/it", t0.elapsed() / reps);
    // transpose of (110,16)
    let kkn = mk(&mut rng, &[110, 16]);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = kkn.transpose(0, 1).unwrap(); }
    println!("transpose 110x16: {:?}/it", t0.elapsed() / reps);
    // final projection and softmax
    let proj = mk(&mut rng, &[64, 8]);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.matmul(&proj).unwrap().softmax(1).unwrap(); }
    println!("proj+softmax 256x64->256x8: {:?}/it", t0.elapsed() / reps);
}

fn micro4() {
    // cumulative stage timing of one replicated block forward
    let sn = costruct::StructNet::init(0, NUM_CLASSES, 16, 16).frozen();
    let labels = synthworld::generate(0, Domain::Source, &TrainConfig::default().world()).unwrap().labels.subsample2();
    let mut rng2 = DetRng::new(7);
    let masked: Vec<bool> = (0..256).map(|_| rng2.uniform() < 0.3).collect();
    let mask = BinaryMask::new(16, 16, masked).unwrap();
    let known: Vec<usize> = (0..256).filter(|&j| !mask.is_masked(j)).collect();
    let nk = known.len();
    let cols = nk + 1;
    let mut gate = vec![true; 256 * cols];
    for i in 0..256 { gate[i * cols + nk] = mask.is_masked(i); }
    let idx: Vec<usize> = labels.indices().iter().enumerate()
        .map(|(i, &l)| if mask.is_masked(i) { 8 } else { l }).collect();
    let content = sn.embed.gather(0, &idx).unwrap();
    let x0 = content.add(&sn.pos).unwrap();
    let b = &sn.blocks[0];
    let reps = 50u32;
    let dh = 16usize;
    let scale = 1.0 / (dh as f64).sqrt();

    let time = |label: &str, f: &dyn Fn() -> Tensor| {
        let t0 = Instant::now();
        for _ in 0..reps { let _ = f(); }
        println!("{label}: {:?}/it", t0.elapsed() / reps);
    };

    time("ln1", &|| x0.layer_norm(&b.ln1_g, &b.ln1_b, 1e-5).unwrap());
    let h = x0.layer_norm(&b.ln1_g, &b.ln1_b, 1e-5).unwrap();
    time("qkv", &|| {
        let q = h.matmul(&b.wq).unwrap().add_bias(&b.bq).unwrap();
        let _k = h.matmul(&b.wk).unwrap().add_bias(&b.bk).unwrap();
        let _v = h.matmul(&b.wv).unwrap().add_bias(&b.bv).unwrap();
        q
    });
    let q = h.matmul(&b.wq).unwrap().add_bias(&b.bq).unwrap();
    let k = h.matmul(&b.wk).unwrap().add_bias(&b.bk).unwrap();
    let v = h.matmul(&b.wv).unwrap().add_bias(&b.bv).unwrap();
    time("one head scores+softmax+apply", &|| {
        let qj = q.slice(1, 0, dh).unwrap();
        let kj = k.slice(1, 0, dh).unwrap();
        let vj = v.slice(1, 0, dh).unwrap();
        let self_scores = qj.mul(&kj).unwrap().sum_axis(1).unwrap().reshape(&[256, 1]).unwrap();
        let k_known = kj.gather(0, &known).unwrap();
        let block = qj.matmul(&k_known.transpose(0, 1).unwrap()).unwrap();
        let scores = Tensor::concat(&[block, self_scores], 1).unwrap();
        let attn = scores.mul_scalar(scale).masked_softmax_last(&gate).unwrap();
        let self_w = attn.slice(1, nk, 1).unwrap();
        let ones_row = Tensor::full(&[1, dh], 1.0).unwrap();
        let self_part = self_w.matmul(&ones_row).unwrap().mul(&vj).unwrap();
        let v_known = vj.gather(0, &known).unwrap();
        attn.slice(1, 0, nk).unwrap().matmul(&v_known).unwrap().add(&self_part).unwrap()
    });
    // sub-stages of a head
    let qj = q.slice(1, 0, dh).unwrap();
    let kj = k.slice(1, 0, dh).unwrap();
    let vj = v.slice(1, 0, dh).unwrap();
    let k_known = kj.gather(0, &known).unwrap();
    let kt = k_known.transpose(0, 1).unwrap();
    time("  scores mm", &|| qj.matmul(&kt).unwrap());
    let block = qj.matmul(&kt).unwrap();
    let self_scores = qj.mul(&kj).unwrap().sum_axis(1).unwrap().reshape(&[256, 1]).unwrap();
    let scores = Tensor::concat(&[block.clone(), self_scores], 1).unwrap();
    time("  concat", &|| Tensor::concat(&[block.clone(), qj.sum_axis(1).unwrap().reshape(&[256,1]).unwrap()], 1).unwrap());
    time("  softmax", &|| scores.mul_scalar(scale).masked_softmax_last(&gate).unwrap());
    let attn = scores.mul_scalar(scale).masked_softmax_last(&gate).unwrap();
    let v_known = vj.gather(0, &known).unwrap();
    time("  apply", &|| attn.slice(1, 0, nk).unwrap().matmul(&v_known).unwrap());
    let merged = Tensor::concat(&[vj.clone(), vj.clone(), vj.clone(), vj.clone()], 1).unwrap();
    time("wo", &|| merged.matmul(&b.wo).unwrap().add_bias(&b.bo).unwrap());
    let a2 = x0.add(&merged).unwrap();
    time("ln2+mlp", &|| {
        let h2 = a2.layer_norm(&b.ln2_g, &b.ln2_b, 1e-5).unwrap();
        h2.matmul(&b.w_up).unwrap().add_bias(&b.b_up).unwrap().tanh()
            .matmul(&b.w_down).unwrap().add_bias(&b.b_down).unwrap()
    });
}

fn micro5() {
    use comal_lab::Real;
    let mut rng = DetRng::new(0);
    let n = 256usize;
    let cols = 176usize;
    let data: Vec<Real> = (0..n * cols).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let scores = Tensor::from_vec(data, &[n, cols]).unwrap();
    let reps = 500u32;
    // all-true gate
    let gate_all = vec![true; n * cols];
    let t0 = Instant::now();
    for _ in 0..reps { let _ = scores.masked_softmax_last(&gate_all).unwrap(); }
    println!("softmax all-true 256x176: {:?}/it", t0.elapsed() / reps);
    // mixed: 175 rows with last-col false
    let mut gate_mix = vec![true; n * cols];
    for i in 0..175 { gate_mix[i * cols + cols - 1] = false; }
    let t0 = Instant::now();
    for _ in 0..reps { let _ = scores.masked_softmax_last(&gate_mix).unwrap(); }
    println!("softmax mixed 256x176: {:?}/it", t0.elapsed() / reps);
    // raw exp throughput on same data
    let t0 = Instant::now();
    for _ in 0..reps { let _: Vec<Real> = scores.data().iter().map(|v| v.exp()).collect(); }
    println!("raw exp 45k: {:?}/it", t0.elapsed() / reps);
    // with wide spread (attention-like logits)
    let data2: Vec<Real> = (0..n * cols).map(|_| rng.uniform_in(-30.0, 5.0)).collect();
    let wide = Tensor::from_vec(data2, &[n, cols]).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps { let _ = wide.masked_softmax_last(&gate_all).unwrap(); }
    println!("softmax wide-spread: {:?}/it", t0.elapsed() / reps);
}
