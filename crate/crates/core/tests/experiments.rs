//! Experiment-scale checks on the default synthetic benchmark. Slow: each
//! test pretrains several encoders.

use gnn_watermark::attacks::{
    build_zoo_against, independent_encoders, member_seed, overwrite, train_downstream, train_independents, AttackSchedule, DownstreamConfig, Scenario,
};
use gnn_watermark::autodiff::Tape;
use gnn_watermark::encoder::{encode_many, GraphBatch};
use gnn_watermark::experiment::ExperimentConfig;
use gnn_watermark::graphs::{feature_moments, Graph};
use gnn_watermark::pretrain::{edge_pred_pairs, pretrain, pretrain_with_curve, Objective, PretrainConfig};
use gnn_watermark::rng::{derive_seed, rng_from, stream};
use gnn_watermark::verify::{ip_roc, ip_score, Provenance};
use gnn_watermark::watermark::{build_key, inject, InjectionConfig};
use rand::Rng as _;

fn config() -> ExperimentConfig {
    ExperimentConfig::default()
}

#[test]
fn watermark_loss_drops_and_overwrite_keeps_ownership() {
    let cfg = config();
    let data = cfg.dataset().unwrap();
    let inj = inject(&data, &cfg.injection_config()).unwrap();
    let drop = 1.0 - inj.final_watermark_loss / inj.initial_watermark_loss;
    println!("watermark loss {:.3} -> {:.3}", inj.initial_watermark_loss, inj.final_watermark_loss);
    assert!(inj.final_watermark_loss < 0.05 * inj.initial_watermark_loss, "loss only fell by {:.1}%", 100.0 * drop);

    let spec = cfg.zoo_spec(Scenario::Fix, AttackSchedule::Overwrite);
    let independents = independent_encoders(&data, &cfg.pretrain_config(), spec.n_independent, cfg.seed, 1).unwrap();
    let trained = train_independents(&independents, &spec, &data, 1).unwrap();
    let zoo = build_zoo_against(&inj.encoder, &inj.key, &trained, &spec, &data, 1).unwrap();
    println!("owner roc after overwrite {:.3}", zoo.summary.ip_roc);
    assert!(zoo.summary.ip_roc >= 0.85);

    // the adversary's own watermark takes as well
    let moments = feature_moments(&data).unwrap();
    for i in 0..3u64 {
        let seed = 1000 + i;
        let adv = InjectionConfig {
            pretrain: PretrainConfig {
                seed,
                ..cfg.pretrain_config()
            },
            ..cfg.adversary.clone()
        };
        let key_seed = derive_seed(seed, stream::KEY);
        let adv_key = build_key(&adv, &moments, Some(&data), key_seed, &mut rng_from(key_seed)).unwrap();
        let encoder = overwrite(&inj.encoder, adv_key.clone(), &data, &adv).unwrap();
        let down = DownstreamConfig {
            seed,
            ..cfg.downstream.clone()
        };
        let model = train_downstream(&encoder, &data, &down, "adversary", Provenance::Unknown).unwrap().model;
        let score = ip_score(&model, &adv_key).unwrap().ip_score;
        println!("adversary {i}: own-key score {score:.2}");
        assert!(score >= 0.9);
    }
}

#[test]
fn null_zoo_is_calibrated() {
    // "piracy" members built on unrelated plain encoders carry no watermark
    let cfg = config();
    let data = cfg.dataset().unwrap();
    let inj = inject(&data, &cfg.injection_config()).unwrap();
    let spec = cfg.zoo_spec(Scenario::Fix, AttackSchedule::None);
    let n = spec.n_independent;
    let encoders = independent_encoders(&data, &cfg.pretrain_config(), 2 * n, cfg.seed + 1, 1).unwrap();
    let (fake, real) = encoders.split_at(n);
    let score = |encs: &[_]| -> Vec<f64> {
        train_independents(encs, &spec, &data, 1)
            .unwrap()
            .models
            .iter()
            .map(|(m, _)| ip_score(m, &inj.key).unwrap().ip_score)
            .collect()
    };
    let roc = ip_roc(&score(fake), &score(real)).unwrap();
    println!("null roc {roc:.3}");
    assert!((roc - 0.5).abs() <= 0.2);
}

#[test]
fn contrastive_pretraining_supports_a_linear_probe() {
    let cfg = config();
    let data = cfg.dataset().unwrap();
    let pre = PretrainConfig {
        epochs: 100,
        ..PretrainConfig::default()
    };
    let (encoder, curve) = pretrain_with_curve(&data, &pre).unwrap();
    let (first, last) = (curve[0].pretrain_loss, curve.last().unwrap().pretrain_loss);
    assert!(last <= 0.8 * first, "loss {first} -> {last}");
    let probe = DownstreamConfig {
        head_depth: 1,
        ..DownstreamConfig::default()
    };
    let acc = train_downstream(&encoder, &data, &probe, "probe", Provenance::Unknown)
        .unwrap()
        .accuracy
        .unwrap();
    println!("linear probe accuracy {acc:.3}");
    assert!(acc >= 0.85);
}

#[test]
fn edge_prediction_generalizes_to_held_out_graphs() {
    let cfg = config();
    let data = cfg.dataset().unwrap();
    let cut = data.len() * 3 / 4;
    let train = data.subset(&(0..cut).collect::<Vec<_>>());
    let pre = PretrainConfig {
        objective: Objective::EdgePred,
        epochs: 100,
        ..PretrainConfig::default()
    };
    let (encoder, curve) = pretrain_with_curve(&train, &pre).unwrap();
    assert!(curve.last().unwrap().pretrain_loss <= 0.8 * curve[0].pretrain_loss);
    assert_eq!(encoder, pretrain(&train, &pre).unwrap());

    let mut rng = rng_from(9);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for g in &data.graphs()[cut..] {
        let mut tape = Tape::new();
        let vars = encoder.bind(&mut tape, false);
        let h = vars.node_states(&mut tape, &GraphBatch::new([g as &Graph]).unwrap()).unwrap();
        let h = tape.value(h).clone();
        let (pairs, labels) = edge_pred_pairs(g, 1.0, &mut rng);
        for ((u, v), y) in pairs.into_iter().zip(labels) {
            let s: f64 = h.row(u).iter().zip(h.row(v)).map(|(a, b)| a * b).sum();
            if y == 1.0 {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    let auc = ip_roc(&pos, &neg).unwrap();
    println!("held-out edge auc {auc:.3}");
    assert!(auc >= 0.8);
}

fn pair_distances(encoder: &gnn_watermark::encoder::EncoderParams, key: &gnn_watermark::watermark::WatermarkKey) -> Vec<f64> {
    key.pairs
        .iter()
        .map(|(a, b)| {
            let e = encode_many(&[a.clone(), b.clone()], encoder).unwrap();
            e.row(0).iter().zip(e.row(1)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .collect()
}

#[test]
fn key_pairs_collapse_and_stay_clear_of_real_graphs() {
    let base = config();
    let (mut wm_sum, mut ind_sum) = (0.0, 0.0);
    let (mut clear, mut total) = (0usize, 0usize);
    for seed in 0..5u64 {
        let cfg = ExperimentConfig { seed, ..base.clone() };
        let data = cfg.dataset().unwrap();
        let icfg = cfg.injection_config();
        let inj = inject(&data, &icfg).unwrap();
        let ind = pretrain(
            &data,
            &PretrainConfig {
                seed: member_seed(seed, Provenance::Independent, 0),
                ..cfg.pretrain_config()
            },
        )
        .unwrap();
        let mean = |d: Vec<f64>| d.iter().sum::<f64>() / d.len() as f64;
        let (wm, other) = (mean(pair_distances(&inj.encoder, &inj.key)), mean(pair_distances(&ind, &inj.key)));
        println!("seed {seed}: key pair distance {wm:.4} watermarked, {other:.4} independent");
        wm_sum += wm;
        ind_sum += other;

        let mut rng = rng_from(derive_seed(seed, 77));
        let real: Vec<Graph> = (0..icfg.neg_samples)
            .map(|_| data.graphs()[rng.random_range(0..data.len())].clone())
            .collect();
        let keys: Vec<Graph> = inj.key.graphs().into_iter().cloned().collect();
        let ek = encode_many(&keys, &inj.encoder).unwrap();
        let er = encode_many(&real, &inj.encoder).unwrap();
        for i in 0..keys.len() {
            for j in 0..real.len() {
                let d2: f64 = ek.row(i).iter().zip(er.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                clear += (d2 >= icfg.margin) as usize;
                total += 1;
            }
        }
    }
    let frac = clear as f64 / total as f64;
    println!("mean key pair distance {:.4} vs {:.4}; {:.1}% of key/real pairs clear the margin", wm_sum / 5.0, ind_sum / 5.0, 100.0 * frac);
    assert!(10.0 * wm_sum <= ind_sum);
    assert!(frac >= 0.9);
}
