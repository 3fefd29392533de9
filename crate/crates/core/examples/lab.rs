//! Scratch harness for dialing in desk-scale experiment configurations.
//! Run with `cargo run --release -p camadapt-core --example lab -- <mode>`.

use camadapt_core::eval;
use camadapt_core::losses::SchemeKind;
use camadapt_core::trainer::{run_training, TrainConfig, TripletMode};
use camadapt_core::world::{generate_world, LabelVisibility, WorldConfig};

fn world() -> WorldConfig {
    WorldConfig {
        cameras_source: 3,
        cameras_target: 3,
        identities: 24,
        eval_identities: 12,
        feature_dim: 16,
        style_within: 0.5,
        style_cross: 0.7,
        offset_within: 0.8,
        offset_cross: 1.2,
        sigma: 0.08,
        track_min: 3,
        track_max: 6,
        reappear_prob: 0.15,
        appearance_prob: 1.0,
        query_fraction: 0.3,
        target_labels: LabelVisibility::Hidden,
    }
}

fn train(scheme: SchemeKind, triplets: TripletMode, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        iters_per_epoch: 0,
        batch_per_domain: 32,
        p: 3,
        q: 4,
        k: 4,
        k_n: 2,
        margin: 0.3,
        lambda1: 1.0,
        lambda2: 1.0,
        lr_backbone: 0.02,
        lr_new: 0.01,
        weight_decay: 1e-3,
        backbone_hidden: vec![32],
        embed_dim: 16,
        disc_hidden: 32,
        eval_every: 0,
        scheme,
        triplets,
        seed,
        ..TrainConfig::default()
    }
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "grid".into());
    match mode.as_str() {
        "proposition" => proposition(),
        _ => grid(),
    }
}

/// Criterion-7 style run: CCE training, posterior statistics + inter-domain.
fn proposition() {
    let data = generate_world(&world(), 77).unwrap();
    println!(
        "world: src {} samples, tgt {} samples, {} queries, {} gallery",
        data.source_train.len(),
        data.target_train.len(),
        data.target_query.len(),
        data.target_gallery.len()
    );
    let mut cfg = train(SchemeKind::Cce, TripletMode::None, 1);
    cfg.eval_every = 5;
    if let Ok(l2) = std::env::var("LAMBDA2") { cfg.lambda2 = l2.parse().unwrap(); }
    if let Ok(wd) = std::env::var("WD") { cfg.weight_decay = wd.parse().unwrap(); }
    if let Ok(lr) = std::env::var("LRB") { cfg.lr_backbone = lr.parse().unwrap(); }
    if let Ok(lrn) = std::env::var("LRN") { cfg.lr_new = lrn.parse().unwrap(); }
    if let Ok(dh) = std::env::var("DH") { cfg.disc_hidden = dh.parse().unwrap(); }
    if let Ok(it) = std::env::var("ITERS") { cfg.iters_per_epoch = it.parse().unwrap(); }
    if let Ok(m) = std::env::var("MOM") { cfg.momentum = m.parse().unwrap(); }
    let t0 = std::time::Instant::now();
    let out = run_training(&cfg, &data).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let init = out.history.initial_metrics.as_ref().unwrap();
    println!(
        "epoch0: inter_domain {:.3} inter_cam {:.3} dev {:.3} mass {:.3} map {:.3}",
        init.inter_domain_distance,
        init.inter_camera_distance,
        init.posterior_uniformity,
        init.opposite_domain_mass,
        init.map
    );
    for e in &out.history.epochs {
        if let Some(m) = &e.metrics {
            println!(
                "epoch{:>3}: inter_domain {:.3} inter_cam {:.3} dev {:.3} mass {:.3} map {:.3} | cal_d {:.3} cal_b {:.3} cross {:.3}",
                e.epoch,
                m.inter_domain_distance,
                m.inter_camera_distance,
                m.posterior_uniformity,
                m.opposite_domain_mass,
                m.map,
                e.mean_cal_d,
                e.mean_cal_b,
                e.mean_cross
            );
        }
    }
    println!("wall: {secs:.1}s");
}

/// Criterion-8/9/10 style grid over seeds.
fn grid() {
    let seeds: Vec<u64> = (0..5).collect();
    let variants: Vec<(&str, SchemeKind, TripletMode)> = vec![
        ("BL        ", SchemeKind::None, TripletMode::None),
        ("BL+UOTeud ", SchemeKind::None, TripletMode::UotEuclid),
        ("BL+UOT    ", SchemeKind::None, TripletMode::Uot),
        ("BL+UOT+CCE", SchemeKind::Cce, TripletMode::Uot),
        ("BL+UOT+DAL", SchemeKind::Dal, TripletMode::Uot),
        ("BL+SOT    ", SchemeKind::None, TripletMode::Sot),
        ("BL+OFFLINE", SchemeKind::None, TripletMode::Offline),
    ];
    let t0 = std::time::Instant::now();
    for (name, scheme, triplets) in variants {
        let mut maps = Vec::new();
        let mut cams = Vec::new();
        let mut doms = Vec::new();
        for &seed in &seeds {
            let data = generate_world(&world(), 1000 + seed).unwrap();
            let cfg = train(scheme, triplets, seed);
            let out = run_training(&cfg, &data).unwrap();
            let m = eval::evaluate(&out.models, &data, Default::default()).unwrap();
            maps.push(m.map);
            cams.push(m.inter_camera_distance);
            doms.push(m.inter_domain_distance);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{name} mAP {:.4} (per-seed {:?}) inter_cam {:.3} inter_dom {:.3}",
            mean(&maps),
            maps.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            mean(&cams),
            mean(&doms),
        );
    }
    println!("wall: {:.1}s", t0.elapsed().as_secs_f64());
}
