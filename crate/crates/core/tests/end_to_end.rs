use num_complex::Complex64;
use xlmimo_core::channel::{CarrierConfig, SceneConfig};
use xlmimo_core::geometry::ArrayKind;
use xlmimo_core::metrics::{mpe, nmse_single};
use xlmimo_core::pipeline::{
    channel_net_config, position_net_config, train_stage1, train_stage2, Model, Scales, SystemModel, TrainConfig,
    TwoStage,
};
use xlmimo_core::sample::{Dataset, GenConfig};

fn small_system(scene: SceneConfig, noise: bool, samples: u64) -> (Dataset, SystemModel, Scales) {
    let cfg = GenConfig {
        array: ArrayKind::Na { inner: 2, outer: 6 },
        carrier: CarrierConfig { subcarriers: 8, ..CarrierConfig::default() },
        scene,
        slots: 2,
        n_rf: 4,
        noise,
        samples,
        seed: 21,
        ..GenConfig::default()
    };
    let ds = Dataset::generate(cfg).unwrap();
    let system = SystemModel::from_dataset(&ds).unwrap();
    let scales = Scales::from_records(&ds.records, ds.config.r_max).unwrap();
    (ds, system, scales)
}

fn tiny(mut c: xlmimo_core::net::NetConfig) -> xlmimo_core::net::NetConfig {
    c.stages = 2;
    c.c0 = 4;
    c.d_state = 4;
    c
}

fn widen(v: &[num_complex::Complex32]) -> Vec<Complex64> {
    v.iter().map(|z| Complex64::new(f64::from(z.re), f64::from(z.im))).collect()
}

#[test]
fn overfit_pipeline_recovers_noiseless_los_channel() {
    let (ds, system, scales) = small_system(SceneConfig::los_only(), false, 2);
    let mut s1 = Model::init(tiny(position_net_config(&system)), 1).unwrap();
    let cfg1 = TrainConfig {
        batch: 2,
        lr: 1e-2,
        steps: 1500,
        report_every: 50,
        target_loss: Some(1e-4),
        ..TrainConfig::default()
    };
    let r1 = train_stage1(&mut s1, &ds.records, &system, &scales, &cfg1).unwrap();
    assert!(r1.final_loss < 1e-4, "stage 1 stalled at {}", r1.final_loss);

    let mut s2 = Model::init(tiny(channel_net_config(&system, true)), 2).unwrap();
    let cfg2 = TrainConfig { batch: 2, lr: 1e-2, steps: 600, report_every: 50, ..TrainConfig::default() };
    train_stage2(&mut s2, &s1, &ds.records, &system, &scales, &cfg2).unwrap();

    let pipeline = TwoStage::new(system, scales, s1, Some(s2)).unwrap();
    let mut estimates = Vec::new();
    for rec in &ds.records {
        let (pos, h) = pipeline.infer(&rec.y).unwrap();
        estimates.push([pos.x, pos.y]);
        let e = nmse_single(h.data(), &widen(&rec.h)).unwrap();
        assert!(e < 1e-2, "NMSE {e}");
        assert!(h.data().iter().all(|z| z.re.is_finite() && z.im.is_finite()));
    }
    let truth: Vec<[f64; 2]> = ds.records.iter().map(|r| r.position()).collect();
    assert!(mpe(&estimates, &truth).unwrap() < 0.02);
}

#[test]
fn full_run_is_reproducible() {
    let (ds, system, scales) = small_system(SceneConfig::default(), true, 6);
    let run = || {
        let mut s1 = Model::init(tiny(position_net_config(&system)), 3).unwrap();
        let cfg = TrainConfig { batch: 3, lr: 1e-2, steps: 8, report_every: 1, seed: 4, ..TrainConfig::default() };
        let a = train_stage1(&mut s1, &ds.records, &system, &scales, &cfg).unwrap();
        let mut s2 = Model::init(tiny(channel_net_config(&system, true)), 5).unwrap();
        let b = train_stage2(&mut s2, &s1, &ds.records, &system, &scales, &cfg).unwrap();
        let p = TwoStage::new(system.clone(), scales, s1, Some(s2)).unwrap();
        (a, b, p.infer(&ds.records[0].y).unwrap())
    };
    let (a1, b1, (p1, h1)) = run();
    let (a2, b2, (p2, h2)) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!((p1.x.to_bits(), p1.y.to_bits()), (p2.x.to_bits(), p2.y.to_bits()));
    assert_eq!(h1, h2);
}

#[test]
fn oracle_prior_is_no_worse_on_average() {
    // A zero stage-2 head makes both estimates pure LoS priors; the true
    // position can only tie or beat an untrained positioning network.
    let (ds, system, scales) = small_system(SceneConfig::default(), true, 64);
    let s1 = Model::init(tiny(position_net_config(&system)), 7).unwrap();
    let s2 = Model::init(tiny(channel_net_config(&system, false)), 8).unwrap();
    let p = TwoStage::new(system, scales, s1, Some(s2)).unwrap();
    let (mut predicted, mut oracle) = (0.0, 0.0);
    for rec in &ds.records {
        let truth = widen(&rec.h);
        predicted += nmse_single(p.infer(&rec.y).unwrap().1.data(), &truth).unwrap();
        oracle += nmse_single(p.reconstruct(rec.ue, &rec.y).unwrap().1.data(), &truth).unwrap();
    }
    assert!(oracle <= predicted + 1e-6, "{oracle} vs {predicted}");
}
