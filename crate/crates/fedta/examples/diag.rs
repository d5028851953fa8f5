//! Scratch diagnostic for tuning the desk preset. Not part of the suite.

use fedta::config::ExperimentConfig;
use fedta::experiment::Simulation;
use fedta::federation::client::InferenceRule;
use fedta::federation::Method;

fn envf(name: &str) -> Option<f64> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn envu(name: &str) -> Option<usize> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn main() {
    let mut cfg = ExperimentConfig::desk();
    let seed: u64 = envu("SEED").map(|v| v as u64).unwrap_or(42);
    let method = match std::env::var("METHOD").as_deref() {
        Ok("no-ta") => Method::FedtaNoTa,
        Ok("frozen-head") => Method::FrozenHead,
        Ok("fedavg-head") => Method::FedavgHead,
        Ok("no-sikf") => Method::FedtaNoSikf,
        Ok("no-bgps") => Method::FedtaNoBgps,
        _ => Method::Fedta,
    };
    cfg.method = method;
    if let Some(v) = envf("MIX_ALPHA") {
        cfg.stage2.mix_alpha = v;
    }
    if let Some(v) = envu("ANCHOR_POOL") {
        cfg.stage2.anchor_pool = v;
    }
    if let Some(v) = envf("S2LR") {
        cfg.stage2.learning_rate = v;
    }
    if let Some(v) = envu("S2EPOCHS") {
        cfg.stage2.epochs = v;
    }
    if let Some(v) = envf("S1LR") {
        cfg.stage1.learning_rate = v;
    }
    if let Some(v) = envu("S1EPOCHS") {
        cfg.stage1.epochs = v;
    }
    if let Some(v) = envu("NSEL") {
        cfg.stage1.n_select = v;
    }
    if let Some(v) = envu("BASE_SIZE") {
        cfg.stage1.base_size = v;
    }
    if let Some(v) = envu("BASE_TOKENS") {
        cfg.encoder.num_base_tokens = v;
    }
    if let Some(v) = envu("ESEED") {
        cfg.encoder.seed = v as u64;
    }
    if let Some(v) = envu("EMBED") {
        cfg.encoder.embed_dim = v;
    }
    if let Some(v) = envu("HIDDEN") {
        cfg.encoder.hidden_dim = v;
    }
    if let Some(v) = envf("SIGMA") {
        if let fedta::config::DatasetConfig::Synthetic { ref mut sigma, .. } = cfg.dataset {
            *sigma = v;
        }
    }
    if let Some(v) = envu("RAW_DIM") {
        if let fedta::config::DatasetConfig::Synthetic { ref mut raw_dim, .. } = cfg.dataset {
            *raw_dim = v;
        }
    }
    if let Some(v) = envf("LAMBDA2") {
        cfg.stage2.lambda2 = v;
    }
    if let Some(v) = envf("LAMBDA3") {
        cfg.stage2.lambda3 = v;
    }
    if let Some(v) = envf("THR") {
        cfg.server.thr = v;
    }
    if let Some(v) = envf("DISTILL_LR") {
        cfg.server.distill_lr = v;
    }
    if let Some(v) = envu("DISTILL_STEPS") {
        cfg.server.distill_steps = v;
    }
    if std::env::var("TLC").is_ok() {
        cfg.stage2.task_local_ce = true;
    }
    if let Ok(v) = std::env::var("INFERENCE") {
        cfg.inference = match v.as_str() {
            "head-logits" => InferenceRule::HeadLogits,
            _ => InferenceRule::NearestPrototype,
        };
    }
    cfg.validate().unwrap();
    let rule = cfg.effective_rule();

    let mut sim = Simulation::new(&cfg, seed).unwrap();
    {
        use fedta::anchor::enhanced_feature;
        use fedta::numkit::{cosine_similarity, Vector};
        let client = &sim.clients()[0];
        let mut by_class: std::collections::BTreeMap<u32, Vec<Vector>> = Default::default();
        let mut norm_sum = 0.0;
        let mut count = 0usize;
        for s in sim.dataset().samples() {
            let f = enhanced_feature(&s.features, client.kb(), sim.encoder(), cfg.stage1.n_select)
                .unwrap();
            norm_sum += f.norm();
            count += 1;
            by_class.entry(s.label).or_default().push(f);
        }
        let means: Vec<Vector> = by_class
            .values()
            .map(|fs| {
                let mut m = Vector::zeros(fs[0].dim());
                for f in fs {
                    m.add_scaled(f, 1.0 / fs.len() as f64).unwrap();
                }
                m
            })
            .collect();
        let mut sum = 0.0;
        let mut max = -1.0f64;
        let mut n = 0usize;
        for i in 0..means.len() {
            for j in (i + 1)..means.len() {
                let s = cosine_similarity(&means[i], &means[j]).unwrap();
                sum += s;
                max = max.max(s);
                n += 1;
            }
        }
        println!(
            "geometry: mean |F_out|={:.3} cross-class cos mean={:.3} max={:.3}",
            norm_sum / count as f64,
            sum / n as f64,
            max
        );
    }
    let mut probe_base: Vec<(usize, usize, fedta::numkit::Vector)> = Vec::new();
    let total = sim.total_rounds();
    println!(
        "method={method:?} seed={seed} alpha={} m={} s2lr={} s2ep={} thr={}",
        cfg.stage2.mix_alpha,
        cfg.stage2.anchor_pool,
        cfg.stage2.learning_rate,
        cfg.stage2.epochs,
        cfg.server.thr
    );
    for round in 0..total {
        let res = sim.step();
        let task = round / cfg.rounds_per_task;
        let nclients = sim.clients().len();
        let mut rows = Vec::new();
        for i in 0..nclients {
            let client = &sim.clients()[i];
            let tasks = &sim.partition().clients[i].tasks;
            let eval_local = |idx: &[usize]| -> f64 {
                let mut hit = 0usize;
                for &s in idx {
                    let sample = sim.dataset().sample(s);
                    let p = client
                        .predict_local(&sample.features, sim.encoder(), sim.stage2(), rule)
                        .unwrap();
                    if p == sample.label {
                        hit += 1;
                    }
                }
                hit as f64 / idx.len() as f64
            };
            let first = eval_local(&tasks[0].test_indices);
            let cur = eval_local(&tasks[task].test_indices);
            let glob = if method == Method::FrozenHead || method == Method::FedavgHead {
                f64::NAN
            } else if let Some(kb_g) = sim.server().kb.as_ref() {
                let idx = &tasks[task].test_indices;
                let mut hit = 0usize;
                for &s in idx {
                    let sample = sim.dataset().sample(s);
                    let p = client
                        .predict_global(
                            &sample.features,
                            kb_g,
                            &sim.server().prototypes,
                            sim.encoder(),
                            sim.stage2(),
                            rule,
                        )
                        .unwrap();
                    if p == sample.label {
                        hit += 1;
                    }
                }
                hit as f64 / idx.len() as f64
            } else {
                f64::NAN
            };
            rows.push((first, cur, glob));
        }
        let fixed = sim
            .server()
            .prototypes
            .iter()
            .filter(|(_, p)| p.fixed)
            .count();
        let ntotal = sim.server().prototypes.iter().count();
        print!("round {round} task {task}: fixed={fixed}/{ntotal}");
        match &res {
            Ok(log) => {
                println!(" kr_t={:.3} kr_s={:.3}", log.kr_t, log.kr_s);
            }
            Err(e) => println!(" STEP ERROR: {e}"),
        }
        for (i, (first, cur, glob)) in rows.iter().enumerate() {
            let locked = sim.clients()[i].locked_anchors().len();
            println!(
                "  client {i}: task0={first:.3} cur={cur:.3} glob={glob:.3} locked={locked}"
            );
            if *cur <= 0.34 && task > 0 {
                let client = &sim.clients()[i];
                let t = &sim.partition().clients[i].tasks[task];
                let mut per_class: std::collections::BTreeMap<u32, Vec<u32>> =
                    Default::default();
                for &s in &t.test_indices {
                    let sample = sim.dataset().sample(s);
                    let p = client
                        .predict_local(&sample.features, sim.encoder(), sim.stage2(), rule)
                        .unwrap();
                    per_class.entry(sample.label).or_default().push(p);
                }
                for (c, preds) in per_class {
                    println!("    true {c}: preds {preds:?}");
                }
            }
        }
        {
            use fedta::anchor::{enhanced_feature, query_ta};
            let client = &sim.clients()[0];
            let t0 = &sim.partition().clients[0].tasks[0];
            if probe_base.is_empty() {
                for &s in &t0.test_indices {
                    let f = enhanced_feature(
                        &sim.dataset().sample(s).features,
                        client.kb(),
                        sim.encoder(),
                        cfg.stage1.n_select,
                    )
                    .unwrap();
                    let a = query_ta(&f, client.anchors()).unwrap();
                    probe_base.push((s, a, f));
                }
            } else {
                let mut same = 0usize;
                let mut dead = 0usize;
                let mut drift = 0.0;
                for (s, a0, f0) in &probe_base {
                    let f = enhanced_feature(
                        &sim.dataset().sample(*s).features,
                        client.kb(),
                        sim.encoder(),
                        cfg.stage1.n_select,
                    )
                    .unwrap();
                    let a = query_ta(&f, client.anchors()).unwrap();
                    if a == *a0 {
                        same += 1;
                    }
                    let anchor = &client.anchors().entries()[a].anchor;
                    if anchor.norm() < 0.1 {
                        dead += 1;
                    }
                    let mut d = f.clone();
                    d.add_scaled(f0, -1.0).unwrap();
                    drift += d.norm();
                }
                let n = probe_base.len() as f64;
                println!(
                    "  c0 task0 probes: retrieval_same={:.2} dead_anchor={:.2} |drift|={:.2}",
                    same as f64 / n,
                    dead as f64 / n,
                    drift / n
                );
            }
        }
        if res.is_err() {
            break;
        }
    }
    if rule == InferenceRule::NearestPrototype {
        let client = &sim.clients()[0];
        println!("client 0 memory has {} classes", client.memory().len());
    }
}
