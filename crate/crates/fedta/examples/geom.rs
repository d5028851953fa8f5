//! Scratch geometry scan: cross-class feature similarity and nearest-mean
//! accuracy under candidate encoder shapes. Not part of the suite.

use std::collections::BTreeMap;

use fedta::datagen::synth_gaussian_dataset;
use fedta::encoder::{Encoder, FrozenEncoder, FrozenEncoderSpec};
use fedta::numkit::{cosine_similarity, Vector};

fn stats(raw_dim: usize, sigma: f64, embed: usize, hidden: usize, tokens: usize, eseed: u64) {
    let num_classes = 40u32;
    let per_class = 12usize;
    let ds = synth_gaussian_dataset(num_classes, per_class, raw_dim, sigma, 99).unwrap();
    let enc = FrozenEncoder::new(FrozenEncoderSpec {
        seed: eseed,
        input_dim: raw_dim,
        embed_dim: embed,
        hidden_dim: hidden,
        num_base_tokens: tokens,
    })
    .unwrap();
    let mut feats: Vec<(u32, Vector)> = Vec::new();
    for s in ds.samples() {
        let f = enc.encode(&enc.embed(&s.features).unwrap()).unwrap();
        feats.push((s.label, f));
    }
    let mut by_class: BTreeMap<u32, Vec<&Vector>> = BTreeMap::new();
    for (c, f) in &feats {
        by_class.entry(*c).or_default().push(f);
    }
    let means: BTreeMap<u32, Vector> = by_class
        .iter()
        .map(|(c, fs)| {
            let mut m = Vector::zeros(embed);
            for f in fs {
                m.add_scaled(f, 1.0 / fs.len() as f64).unwrap();
            }
            (*c, m)
        })
        .collect();
    let mut cross_sum = 0.0;
    let mut cross_max = -1.0f64;
    let mut n = 0;
    let keys: Vec<u32> = means.keys().copied().collect();
    for i in 0..keys.len() {
        for j in (i + 1)..keys.len() {
            let s = cosine_similarity(&means[&keys[i]], &means[&keys[j]]).unwrap();
            cross_sum += s;
            cross_max = cross_max.max(s);
            n += 1;
        }
    }
    // nearest-class-mean accuracy by cosine, all samples
    let mut hits = 0usize;
    for (c, f) in &feats {
        let mut best = (f64::NEG_INFINITY, 0u32);
        for (mc, m) in &means {
            let s = cosine_similarity(f, m).unwrap();
            if s > best.0 {
                best = (s, *mc);
            }
        }
        if best.1 == *c {
            hits += 1;
        }
    }
    let mean_norm: f64 =
        feats.iter().map(|(_, f)| f.norm()).sum::<f64>() / feats.len() as f64;
    println!(
        "raw={raw_dim} sig={sigma} d={embed} h={hidden} tok={tokens} seed={eseed}: cross mean={:.3} max={:.3} ncm_acc={:.3} fnorm={:.3}",
        cross_sum / n as f64,
        cross_max,
        hits as f64 / feats.len() as f64,
        mean_norm
    );
}

fn main() {
    // current desk shape
    stats(24, 0.12, 16, 32, 4, 7);
    // wider feature dims
    stats(32, 0.12, 32, 64, 4, 7);
    stats(64, 0.12, 32, 64, 4, 7);
    stats(64, 0.12, 64, 128, 4, 7);
    // fewer base tokens
    stats(32, 0.12, 32, 64, 2, 7);
    stats(32, 0.12, 32, 64, 1, 7);
    // tighter blobs
    stats(32, 0.05, 32, 64, 2, 7);
    stats(64, 0.05, 32, 64, 2, 7);
    // other encoder seeds
    stats(32, 0.12, 32, 64, 2, 11);
    stats(32, 0.12, 32, 64, 2, 23);
    stats(32, 0.12, 32, 64, 2, 5);
}
