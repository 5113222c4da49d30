//! Temporary tuning harness (deleted before release).
use agelstm::attention::box_to_region;
use agelstm::backbone::{Arch, BackboneConfig};
use agelstm::checkpoint::model_from_checkpoint;
use agelstm::data::{preprocess, synth_dataset, PreprocessConfig, PreprocessMode, SynthConfig};
use agelstm::estimation::{protocol_split, HeadConfig, Protocol};
use agelstm::model::{Branch, PredictedValue};
use agelstm::trainer::{train_global, train_local, Stage, TrainConfig};
use std::time::Instant;

fn efficacy_cfg(seed: u64, stage: Stage, epochs: usize, lr: f64, batch: usize, tau: f64) -> TrainConfig {
    TrainConfig {
        stage,
        epochs,
        base_lr: lr,
        lr_drop_epochs: vec![],
        lr_drop_factor: 10.0,
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: batch,
        seed,
        tau,
        fused_loss: false,
        augment_stage_b: false,
        head: HeadConfig::groups(4).unwrap(),
        backbone: BackboneConfig {
            arch: Arch::ResNets,
            group_depths: [1, 1, 1, 1],
            group_channels: [4, 8, 12, 16],
            input_channels: 3,
            input_size: 56,
            ror_shortcuts_enabled: false,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: 1,
            group_strides: [1, 2, 2, 2],
        },
        preprocess: PreprocessConfig { resize: 64, crop: 56, jitter: false, hflip: true },
    }
}

#[test]
#[ignore]
fn tune_dilution() {
    for (ps, hi, lo) in [(8usize, 0.9f32, 0.1f32), (16, 0.7, 0.3), (8, 0.7, 0.3), (12, 0.8, 0.2)] {
        let data = synth_dataset(&SynthConfig {
            patch_side: Some(ps),
            stripe_levels: (hi, lo),
            ..SynthConfig::default()
        })
        .unwrap();
        let splits = protocol_split(&data, Protocol::FixedFolds, 0).unwrap();
        let (train_idx, test_idx) = (&splits[0].train, &splits[0].test);
        let train_manifest = agelstm::data::DatasetManifest {
            meta: data.meta.clone(),
            samples: train_idx.iter().map(|&i| data.samples[i].clone()).collect(),
            root: data.root.clone(),
        };
        let t = Instant::now();
        let cfg_a = efficacy_cfg(0, Stage::Global, 8, 0.05, 32, 25.0);
        let out_a = train_global(&cfg_a, &train_manifest, None).unwrap();
        let (model_a, _) = model_from_checkpoint(&out_a.checkpoint).unwrap();
        let mut state = model_a.fresh_state();
        let mut correct = 0usize;
        for &i in test_idx {
            let img = preprocess(&data.load_pixels(i).unwrap(), &cfg_a.preprocess, PreprocessMode::Eval, 0).unwrap();
            let p = model_a.predict(&img, &mut state, Branch::GlobalOnly).unwrap();
            if let PredictedValue::Group(g) = p.value {
                if g == data.samples[i].group.unwrap() {
                    correct += 1;
                }
            }
        }
        println!(
            "ps={ps} levels=({hi},{lo}): train_acc={:.4} global_test={:.4} ({:?})",
            out_a.log.last().unwrap().accuracy,
            correct as f64 / test_idx.len() as f64,
            t.elapsed()
        );
    }
}

#[test]
#[ignore]
fn tune_efficacy() {
    let t0 = Instant::now();
    let data = synth_dataset(&SynthConfig {
        patch_side: Some(16),
        stripe_levels: (0.7, 0.3),
        ..SynthConfig::default()
    })
    .unwrap();
    let splits = protocol_split(&data, Protocol::FixedFolds, 0).unwrap();
    let test_idx = &splits[0].test;
    let train_idx = &splits[0].train;
    println!("train {} test {}", train_idx.len(), test_idx.len());
    let train_manifest = agelstm::data::DatasetManifest {
        meta: data.meta.clone(),
        samples: train_idx.iter().map(|&i| data.samples[i].clone()).collect(),
        root: data.root.clone(),
    };

    for seed in [0u64, 1, 2] {
        let t_seed = Instant::now();
        let cfg_a = efficacy_cfg(seed, Stage::Global, 8, 0.05, 32, 25.0);
        let out_a = train_global(&cfg_a, &train_manifest, None).unwrap();
        println!(
            "seed {seed} stage A done ({:?}): last {:?}",
            t_seed.elapsed(),
            out_a.log.last().map(|s| (s.loss, s.accuracy))
        );

        // evaluate global-only on the test fold
        let (model_a, _) = model_from_checkpoint(&out_a.checkpoint).unwrap();
        let mut state = model_a.fresh_state();
        let mut correct = 0usize;
        for &i in test_idx {
            let img = preprocess(&data.load_pixels(i).unwrap(), &cfg_a.preprocess, PreprocessMode::Eval, 0).unwrap();
            let p = model_a.predict(&img, &mut state, Branch::GlobalOnly).unwrap();
            if let PredictedValue::Group(g) = p.value {
                if g == data.samples[i].group.unwrap() {
                    correct += 1;
                }
            }
        }
        let acc_global = correct as f64 / test_idx.len() as f64;

        for (epochs_b, lr_b, batch_b, tau) in [(100usize, 0.02f64, 32usize, 25.0f64)] {
            let t_b = Instant::now();
            let cfg_b = efficacy_cfg(seed, Stage::Local, epochs_b, lr_b, batch_b, tau);
            let out_b = train_local(&cfg_b, &train_manifest, &out_a.checkpoint).unwrap();
            let (model_b, _) = model_from_checkpoint(&out_b.checkpoint).unwrap();
            let mut state = model_b.fresh_state();
            let mut correct_f = 0usize;
            let mut correct_l = 0usize;
            let mut mean_box = [0.0f64; 4];
            for &i in test_idx {
                let img = preprocess(&data.load_pixels(i).unwrap(), &cfg_b.preprocess, PreprocessMode::Eval, 0).unwrap();
                let p = model_b.predict(&img, &mut state, Branch::Fused).unwrap();
                if let PredictedValue::Group(g) = p.value {
                    if g == data.samples[i].group.unwrap() {
                        correct_f += 1;
                    }
                }
                let ld = p.local_dist.as_ref().unwrap();
                if ld.argmax() == data.samples[i].group.unwrap() {
                    correct_l += 1;
                }
                for k in 0..4 {
                    mean_box[k] += p.attention_box.unwrap().l[k];
                }
            }
            let acc_fused = correct_f as f64 / test_idx.len() as f64;
            let acc_local = correct_l as f64 / test_idx.len() as f64;
            for k in 0..4 {
                mean_box[k] /= test_idx.len() as f64;
            }
            let region = box_to_region(
                &agelstm::attention::AttentionBox::new(mean_box[0], mean_box[1], mean_box[2], mean_box[3]),
                7,
                7,
            );
            println!(
                "seed {seed} B(e{epochs_b},lr{lr_b},b{batch_b},tau{tau}) ({:?}): stageB last {:?} | global {acc_global:.4} local {acc_local:.4} fused {acc_fused:.4} gap {:+.4} | box {mean_box:?} -> {region:?}",
                t_b.elapsed(),
                out_b.log.last().map(|s| (s.loss, s.accuracy)),
                acc_fused - acc_global,
            );
        }
        println!("seed {seed} total {:?}", t_seed.elapsed());
    }
    println!("TOTAL {:?}", t0.elapsed());
}

#[test]
#[ignore]
fn probe_grad_magnitudes() {
    use agelstm::model::{AgeModel, ModelConfig};
    use agelstm::tape::{BnMode, Tape};
    use agelstm::backbone::BnUpdates;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            arch: Arch::ResNets,
            group_depths: [1, 1, 1, 1],
            group_channels: [4, 8, 12, 16],
            input_channels: 3,
            input_size: 56,
            ror_shortcuts_enabled: false,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: 1,
            group_strides: [1, 2, 2, 2],
        },
        head: HeadConfig::groups(4).unwrap(),
        tau: 25.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = AgeModel::new(&cfg, &mut rng).unwrap();
    let s = 56;
    let data: Vec<f32> = (0..3*s*s).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    let input = agelstm::tensor::Tensor::new(vec![3, s, s], data).unwrap();
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let img = tape.leaf(&input);
    let mut upd = BnUpdates::default();
    let fwd = model.forward_global(&mut tape, &binding, img, BnMode::Train, &mut upd).unwrap();
    let (_, gl) = tape.softmax_cross_entropy(fwd.logits, &[0]).unwrap();
    let state = model.fresh_state();
    let attn = model.forward_attention(&mut tape, &binding, fwd.fmap, &state).unwrap();
    let (_, ll) = tape.softmax_cross_entropy(attn.logits, &[0]).unwrap();
    let loss = tape.add(gl, ll).unwrap();
    tape.backward(loss).unwrap();
    let mut names = Vec::new();
    model.visit_params(&mut |n, _| names.push(n));
    let mut ids = Vec::new();
    binding.visit_ids(&mut |id| ids.push(id));
    for (n, id) in names.iter().zip(ids.iter()) {
        let g = tape.grad(*id);
        let mx = g.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let below = g.iter().filter(|v| v.abs() < 1e-8).count();
        println!("{n}: numel={} max|g|={mx:.3e} below1e-8={below}", g.len());
    }
}
