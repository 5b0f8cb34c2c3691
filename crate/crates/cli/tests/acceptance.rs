//! Acceptance gate for the whole laboratory. Each test is one criterion and
//! prints one pass/fail line through the harness. Criteria cover gradient
//! correctness, the no-new-weights fusion contract, masking and gate
//! behavior, retrieval exactness, source-mix statistics, the distribution
//! metric, directional desk-scale training experiments, the crop-scale
//! trade-off, scene color-order behavior, sampler contracts, the index-size
//! sweep, and CLI reproducibility.

use std::path::Path;
use std::process::Command;

use rand::Rng;

use xfuse_core::baselines::MechanismKind;
use xfuse_core::conditioning::{
    sample_source, AreaFilters, Modality, RetrievalIndex, SceneSpec, Source, SourceMix,
};
use xfuse_core::diffusion::{
    ddim_sample, make_schedule, Denoiser, GuidanceConfig, NoiseSchedule, SampleConditioning,
    ScheduleKind,
};
use xfuse_core::error::Result;
use xfuse_core::metrics::{
    copy_generator, frechet_distance, mean_image_alignment, mean_text_alignment,
    prepare_eval_cases, run_benchmark, spearman, CondMode, FeatureStats,
};
use xfuse_core::numerics::{finite_diff_check, rng, GradCheckConfig, Tensor};
use xfuse_core::toydata::{embed_image, embed_text, generate_corpus_sized, COLOR_RGB};
use xfuse_core::trainer::{
    heldout_eps_mse, sample_images, Scenario, TrainConfig, TrainRun, TrainedModel,
};
use xfuse_core::unet::{randomize_params, TextEmbedding, UNet, UNetConfig};
use xfuse_core::xfuse::{fuse_concat, fusion_gate, xfuse_forward_probed, FuseProbe};

// ---------------------------------------------------------------------------
// Shared experiment recipe: the smallest architecture whose fused attention
// reliably learns to read the conditioned stream (16 base channels give the
// attention heads enough key dimensions for content matching; attention at
// both levels gives the copy path full spatial resolution; the long smooth
// schedule keeps every timestep informative).
// ---------------------------------------------------------------------------

fn experiment_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk_default();
    cfg.unet = UNetConfig::tiny();
    cfg.unet.base_channels = 16;
    cfg.unet.attention_levels = vec![0, 1];
    cfg.batch_size = 8;
    cfg.warmup_steps = 100;
    cfg.peak_lr = 4e-3;
    cfg.schedule = ScheduleKind::ScaledLinear;
    cfg.timesteps = 1000;
    cfg
}

fn rand_tensor(seed: u64, label: &str, shape: &[usize]) -> Tensor<f64> {
    let mut r = rng::stream(seed, label);
    Tensor::from_vec(rng::normal_vec(&mut r, shape.iter().product()), shape).unwrap()
}

fn rand_var(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::var(rng::normal_vec(r, shape.iter().product()), shape).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness: every differentiable operation, plus the full toy
//    denoiser with and without a conditioned stream, matches central finite
//    differences at 64-bit over 20 seeds.
// ---------------------------------------------------------------------------

#[test]
fn c01_gradients_match_finite_differences_across_seeds() {
    let op_cfg = GradCheckConfig::default();
    for seed in 0..20u64 {
        let mut r = rng::stream(seed, "acceptance-ops");

        // Elementwise, scalar, and reduction ops in one graph.
        let a = rand_var(&mut r, &[2, 3, 4]);
        let b = rand_var(&mut r, &[2, 3, 4]);
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let report = finite_diff_check(
            &params,
            || {
                let s = a.add(&b)?.mul(&a)?.sub(&b.scale(0.5)?)?.add_scalar(0.25)?;
                let g = s.gelu()?;
                let sm = g.reshape(&[2, 12])?.softmax_last()?;
                sm.mse(&b.reshape(&[2, 12])?)?.add(&g.mean_all()?)?.add(&s.sum_all()?)
            },
            &op_cfg,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed} elementwise: worst {} rel {:.2e}", report.worst_param, report.max_rel_err);

        // Matrix products (plain, transposed, batched) and bias adders.
        let m = rand_var(&mut r, &[3, 4]);
        let n = rand_var(&mut r, &[4, 5]);
        let nt = rand_var(&mut r, &[5, 4]);
        let bm = rand_var(&mut r, &[2, 3, 4]);
        let bn = rand_var(&mut r, &[2, 5, 4]);
        let cbias = rand_var(&mut r, &[3]);
        let tbias = rand_var(&mut r, &[4]);
        let samp = rand_var(&mut r, &[2, 3]);
        let params = vec![
            ("m".to_string(), m.clone()),
            ("n".to_string(), n.clone()),
            ("nt".to_string(), nt.clone()),
            ("bm".to_string(), bm.clone()),
            ("bn".to_string(), bn.clone()),
            ("cbias".to_string(), cbias.clone()),
            ("tbias".to_string(), tbias.clone()),
            ("samp".to_string(), samp.clone()),
        ];
        let report = finite_diff_check(
            &params,
            || {
                let p1 = m.matmul(&n)?.sum_all()?;
                let p2 = m.matmul_t(&nt, true)?.sum_all()?;
                let p3 = bm.batch_matmul_t(&bn, true)?.sum_all()?;
                let img = bm.reshape(&[2, 3, 2, 2])?;
                let p4 = img
                    .add_channel_bias(&cbias)?
                    .add_sample_channel(&samp)?
                    .reshape(&[2, 3, 4])?
                    .add_token_bias(&tbias)?
                    .sum_all()?;
                p1.add(&p2)?.add(&p3)?.add(&p4)
            },
            &op_cfg,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed} matmul/bias: worst {} rel {:.2e}", report.worst_param, report.max_rel_err);

        // Convolution, normalization, shape ops, masked attention softmax.
        let x = rand_var(&mut r, &[2, 4, 6, 6]);
        let k = rand_var(&mut r, &[3, 4, 3, 3]);
        let kb = rand_var(&mut r, &[3]);
        let gamma = rand_var(&mut r, &[4]);
        let beta = rand_var(&mut r, &[4]);
        let params = vec![
            ("x".to_string(), x.clone()),
            ("k".to_string(), k.clone()),
            ("kb".to_string(), kb.clone()),
            ("gamma".to_string(), gamma.clone()),
            ("beta".to_string(), beta.clone()),
        ];
        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 2).collect();
        let report = finite_diff_check(
            &params,
            || {
                let gn = x.group_norm(&gamma, &beta, 2, 1e-5)?;
                let c = gn.conv2d(&k, &kb, 1, 1)?;
                let up = c.upsample_nearest_2x()?;
                let sl = up.slice_axis(3, 1, 6)?;
                let pm = sl.permute(&[0, 2, 3, 1])?;
                let cat = Tensor::concat(&[&pm, &pm], 1)?;
                let att = cat.reshape(&[2, 72, 12])?.softmax_last_masked(Some(&mask))?;
                att.mean_all()
            },
            &op_cfg,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed} conv/norm: worst {} rel {:.2e}", report.worst_param, report.max_rel_err);

        // Full denoiser, without and with the conditioned stream.
        let cfg = UNetConfig::tiny();
        let model = UNet::<f64>::new(&cfg, seed).unwrap();
        randomize_params(&model, seed.wrapping_add(1000), 0.2);
        let params = model.named_params();
        let x = rand_tensor(seed, "acc-unet-x", &[1, 3, 8, 8]);
        let text = TextEmbedding::new(rand_tensor(seed, "acc-unet-text", &[1, 2, cfg.text_embed_dim])).unwrap();
        let target = rand_tensor(seed, "acc-unet-target", &[1, 3, 8, 8]);
        let check = GradCheckConfig { max_indices_per_param: Some(1), seed, ..Default::default() };
        let report = finite_diff_check(
            &params,
            || model.forward(&x, &[7], Some(&text), None)?.mse(&target),
            &check,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed} plain denoiser: worst {} rel {:.2e}", report.worst_param, report.max_rel_err);

        let cond = rand_tensor(seed, "acc-unet-cond", &[1, 3, 8, 8]);
        let report = finite_diff_check(
            &params,
            || model.forward(&x, &[7], Some(&text), Some(&cond))?.mse(&target),
            &check,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed} fused denoiser: worst {} rel {:.2e}", report.worst_param, report.max_rel_err);
    }
}

// ---------------------------------------------------------------------------
// 2. No new weights; absent conditioning is bit-identical to the plain
//    backbone.
// ---------------------------------------------------------------------------

#[test]
fn c02_fusion_adds_no_weights_and_preserves_the_plain_forward() {
    let cfg = UNetConfig::tiny();
    let vanilla = UNet::<f64>::new(&cfg, 11).unwrap();
    let fused_model = TrainedModel::<f64>::new(MechanismKind::XFuse, &cfg, 11).unwrap();

    let vanilla_names: Vec<String> = vanilla.named_params().into_iter().map(|(n, _)| n).collect();
    let fused_names: Vec<String> = fused_model.named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(vanilla_names, fused_names, "fusion must not add or rename parameters");

    let model = UNet::<f64>::new(&cfg, 12).unwrap();
    randomize_params(&model, 13, 0.3);
    let x = rand_tensor(14, "acc-c2-x", &[2, 3, 8, 8]);
    let text = TextEmbedding::new(rand_tensor(14, "acc-c2-text", &[2, 3, cfg.text_embed_dim])).unwrap();
    let plain = model.forward_vanilla(&x, &[3, 90], Some(&text)).unwrap();
    let routed = model.forward(&x, &[3, 90], Some(&text), None).unwrap();
    assert_eq!(plain.to_vec(), routed.to_vec(), "absent conditioning must route to the plain pass bit-exactly");

    // The dual-stream engine itself, run without a conditioned stream, must
    // also agree bit-for-bit with the plain pass.
    let (engine, _) =
        xfuse_forward_probed(&model, &x, &[3, 90], Some(&text), None, &FuseProbe::off()).unwrap();
    assert_eq!(plain.to_vec(), engine.to_vec(), "dual-stream engine with no conditioned stream must match bit-exactly");
}

// ---------------------------------------------------------------------------
// 3. Masking the conditioned tokens inside every fused attention block
//    reproduces the unconditioned attention on the noised stream to 1e-10.
// ---------------------------------------------------------------------------

#[test]
fn c03_masked_fusion_reproduces_plain_attention_per_block() {
    let cfg = UNetConfig::tiny();
    let model = UNet::<f64>::new(&cfg, 21).unwrap();
    randomize_params(&model, 22, 0.3);
    let x = rand_tensor(23, "acc-c3-x", &[2, 3, 8, 8]);
    let text = TextEmbedding::new(rand_tensor(23, "acc-c3-text", &[2, 3, cfg.text_embed_dim])).unwrap();
    let cond = rand_tensor(23, "acc-c3-cond", &[2, 3, 8, 8]);

    let masked_probe = FuseProbe { mask_cond_keys: true, record: true };
    let (masked_out, masked_rec) =
        xfuse_forward_probed(&model, &x, &[15, 64], Some(&text), Some(&cond), &masked_probe).unwrap();
    let plain_probe = FuseProbe { mask_cond_keys: false, record: true };
    let (plain_out, plain_rec) =
        xfuse_forward_probed(&model, &x, &[15, 64], Some(&text), None, &plain_probe).unwrap();

    assert!(masked_rec.fused.iter().any(|&f| f), "test setup: at least one block must fuse");
    assert_eq!(masked_rec.attn_noised.len(), plain_rec.attn_noised.len());
    for (i, (m, p)) in masked_rec.attn_noised.iter().zip(&plain_rec.attn_noised).enumerate() {
        let (mv, pv) = (m.to_vec(), p.to_vec());
        let worst = mv.iter().zip(&pv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-10, "attention block {i}: masked fusion deviates by {worst:.3e}");
    }
    let worst = masked_out
        .to_vec()
        .iter()
        .zip(&plain_out.to_vec())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-10, "final output: masked fusion deviates by {worst:.3e}");
}

// ---------------------------------------------------------------------------
// 4. Concat/split round-trip exactness and the token-count gate at the
//    threshold boundary, exhaustively over {1, thr-1, thr, thr+1}.
// ---------------------------------------------------------------------------

#[test]
fn c04_token_concat_round_trips_and_the_gate_flips_at_the_threshold() {
    for threshold in [2usize, 16, 256, 1024] {
        for count in [1usize, threshold - 1, threshold, threshold + 1] {
            let expected = count <= threshold;
            assert_eq!(
                fusion_gate(count, threshold),
                expected,
                "gate({count}, {threshold})"
            );
        }
    }

    let mut r = rng::stream(31, "acc-c4");
    for (n, m) in [(1usize, 1usize), (255, 1), (256, 256), (257, 31), (1, 1024)] {
        let noised = rand_var(&mut r, &[2, n, 6]);
        let cond = rand_var(&mut r, &[2, m, 6]);
        let fused = fuse_concat(&noised, Some(&cond)).unwrap();
        assert_eq!(fused.combined().shape(), &[2, n + m, 6]);
        assert_eq!(fused.noised_len(), n);
        assert_eq!(fused.cond_len(), m);
        let (back_n, back_c) = fused.split(fused.combined()).unwrap();
        assert_eq!(back_n.to_vec(), noised.to_vec(), "noised half must round-trip bit-exactly");
        assert_eq!(back_c.unwrap().to_vec(), cond.to_vec(), "conditioned half must round-trip bit-exactly");

        let mask = fused.cond_key_mask();
        assert_eq!(mask.iter().filter(|&&v| v).count(), n);
        assert!(mask[..n].iter().all(|&v| v) && mask[n..].iter().all(|&v| !v));
    }

    // Absent conditioned stream: pass-through, split returns no second half.
    let noised = rand_var(&mut r, &[1, 5, 4]);
    let fused = fuse_concat(&noised, None).unwrap();
    assert_eq!(fused.combined().to_vec(), noised.to_vec());
    let (back, none) = fused.split(fused.combined()).unwrap();
    assert_eq!(back.to_vec(), noised.to_vec());
    assert!(none.is_none());
}

// ---------------------------------------------------------------------------
// 5. Retrieval exactness: 500 queries against a 2k-entry index match an
//    independent brute-force scan's full ranking.
// ---------------------------------------------------------------------------

#[test]
fn c05_retrieval_matches_brute_force_on_full_rankings() {
    let canvas = 8;
    let corpus = generate_corpus_sized(41, 2000, canvas);
    let probes = generate_corpus_sized(42, 250, canvas);

    for modality in [Modality::Text, Modality::Image] {
        let index = RetrievalIndex::build(&corpus, modality).unwrap();
        assert_eq!(index.len(), 2000);
        for probe in &probes {
            let q = match modality {
                Modality::Text => embed_text(&probe.caption).unwrap(),
                Modality::Image => embed_image(&probe.image),
            };
            let got = index.query(&q, index.len()).unwrap();

            // Brute force: plain cosine against every entry, sorted by score
            // descending with ties broken by id ascending.
            let mut want: Vec<(u64, f64)> = index
                .entries
                .iter()
                .map(|e| {
                    let dot: f64 = e.embedding.iter().zip(&q).map(|(a, b)| a * b).sum();
                    let na: f64 = e.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    (e.id, dot / (na * nb))
                })
                .collect();
            want.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
            });
            let got_ids: Vec<u64> = got.iter().map(|(id, _)| *id).collect();
            let want_ids: Vec<u64> = want.iter().map(|(id, _)| *id).collect();
            assert_eq!(got_ids, want_ids, "{} ranking diverged", modality.name());
        }
    }
}

// ---------------------------------------------------------------------------
// 6. Source-mix statistics: 1e5 draws land within ±0.01 per category.
// ---------------------------------------------------------------------------

#[test]
fn c06_source_mix_draws_match_their_probabilities() {
    let mix = SourceMix { ground_truth: 0.4, text_retrieval: 0.4, image_retrieval: 0.2 };
    mix.validate().unwrap();
    let n = 100_000usize;
    let mut r = rng::stream(51, "acc-c6");
    let (mut gt, mut tr, mut ir) = (0usize, 0usize, 0usize);
    for _ in 0..n {
        match sample_source(&mix, &mut r) {
            Source::GroundTruth => gt += 1,
            Source::TextRetrieved => tr += 1,
            Source::ImageRetrieved => ir += 1,
            other => panic!("mix over three sources drew {other:?}"),
        }
    }
    let f = |c: usize| c as f64 / n as f64;
    assert!((f(gt) - 0.4).abs() <= 0.01, "ground-truth fraction {}", f(gt));
    assert!((f(tr) - 0.4).abs() <= 0.01, "text-retrieval fraction {}", f(tr));
    assert!((f(ir) - 0.2).abs() <= 0.01, "image-retrieval fraction {}", f(ir));
}

// ---------------------------------------------------------------------------
// 7. Distribution metric: exact self-distance, the (3,4) hand case, and
//    agreement with an independent eigendecomposition formula on 50 pairs.
// ---------------------------------------------------------------------------

/// Cyclic Jacobi eigenvalues of a symmetric matrix (test-local; shares no
/// code with the library implementation).
fn sym_eigenvalues(mat: &[f64], d: usize) -> Vec<f64> {
    let mut a = mat.to_vec();
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p * d + q].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * a[p * d + q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i * d + i]).collect()
}

/// Independent formula: with Sb = L L^T (Cholesky),
/// tr((Sa Sb)^1/2) = sum of sqrt(eigenvalues(L^T Sa L)).
fn oracle_frechet(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let d = a.dim();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = b.cov[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                l[i * d + i] = sum.max(0.0).sqrt();
            } else if l[j * d + j] > 0.0 {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    let mut inner = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for p in 0..d {
                for q in 0..d {
                    acc += l[p * d + i] * a.cov[p * d + q] * l[q * d + j];
                }
            }
            inner[i * d + j] = acc;
        }
    }
    let tr_sqrt: f64 = sym_eigenvalues(&inner, d).iter().map(|&v| v.max(0.0).sqrt()).sum();
    let dmu2: f64 = a.mean.iter().zip(&b.mean).map(|(&x, &y)| (x - y) * (x - y)).sum();
    let tra: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let trb: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    dmu2 + tra + trb - 2.0 * tr_sqrt
}

fn random_psd(d: usize, r: &mut impl Rng, ridge: f64) -> Vec<f64> {
    let g: Vec<f64> = (0..d * d).map(|_| rng::standard_normal(r)).collect();
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = if i == j { ridge } else { 0.0 };
            for k in 0..d {
                acc += g[i * d + k] * g[j * d + k];
            }
            c[i * d + j] = acc;
        }
    }
    c
}

#[test]
fn c07_frechet_metric_hand_cases_and_independent_oracle() {
    let mut r = rng::stream(61, "acc-c7");

    // Self-distance is zero.
    for d in [2usize, 5, 8] {
        let stats = FeatureStats {
            mean: (0..d).map(|_| rng::standard_normal(&mut r)).collect(),
            cov: random_psd(d, &mut r, 0.1),
            count: 64,
        };
        let self_d = frechet_distance(&stats, &stats).unwrap();
        assert!(self_d.abs() <= 1e-10, "self distance {self_d:.3e} at dim {d}");
    }

    // Hand case: identity covariances, means offset by (3,4): distance 25.
    let a = FeatureStats { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, 1.0], count: 64 };
    let b = FeatureStats { mean: vec![3.0, 4.0], cov: vec![1.0, 0.0, 0.0, 1.0], count: 64 };
    let d = frechet_distance(&a, &b).unwrap();
    assert!((d - 25.0).abs() <= 1e-8, "expected 25, got {d}");

    // Agreement with the independent Cholesky-pairing eigen formula.
    for i in 0..50 {
        let dim = 2 + (i % 7);
        let a = FeatureStats {
            mean: (0..dim).map(|_| rng::standard_normal(&mut r)).collect(),
            cov: random_psd(dim, &mut r, 0.1),
            count: 128,
        };
        let b = FeatureStats {
            mean: (0..dim).map(|_| rng::standard_normal(&mut r)).collect(),
            cov: random_psd(dim, &mut r, 0.1),
            count: 128,
        };
        let lib = frechet_distance(&a, &b).unwrap();
        let oracle = oracle_frechet(&a, &b);
        let scale = lib.abs().max(oracle.abs()).max(1.0);
        assert!(
            (lib - oracle).abs() / scale <= 1e-8,
            "pair {i} dim {dim}: library {lib} vs oracle {oracle}"
        );
    }
}

// ---------------------------------------------------------------------------
// 8. Desk-scale conditioning benefit: trained with ground-truth conditioning
//    and no captions, the fused model beats the identically trained
//    unconditioned model by at least 20% held-out eps-MSE; and its sampled
//    images score a better distribution distance than the copy-the-retrieved-
//    neighbor baseline.
// ---------------------------------------------------------------------------

#[test]
fn c08_ground_truth_conditioning_beats_the_unconditioned_baseline() {
    let canvas = UNetConfig::tiny().image_size;
    let corpus = generate_corpus_sized(301, 320, canvas);
    let (train, eval) = corpus.split_at(256);

    let mut cond_cfg = experiment_config();
    cond_cfg.total_steps = 5000;
    cond_cfg.text_dropout_prob = 1.0;
    cond_cfg.scenario = Scenario::Retrieve;
    cond_cfg.source_mix =
        SourceMix { ground_truth: 1.0, text_retrieval: 0.0, image_retrieval: 0.0 };
    let mut uncond_cfg = cond_cfg.clone();
    uncond_cfg.scenario = Scenario::Vanilla;

    let mut cond_run = TrainRun::<f64>::new(cond_cfg.clone(), train.to_vec(), None).unwrap();
    cond_run.run(|_| {}).unwrap();
    let mut uncond_run = TrainRun::<f64>::new(uncond_cfg.clone(), train.to_vec(), None).unwrap();
    uncond_run.run(|_| {}).unwrap();

    let cond_mse =
        heldout_eps_mse(&cond_run.model, eval, &CondMode::GroundTruth, &cond_cfg, 4, 99).unwrap();
    let uncond_mse =
        heldout_eps_mse(&uncond_run.model, eval, &CondMode::None, &uncond_cfg, 4, 99).unwrap();
    let gap = 100.0 * (uncond_mse - cond_mse) / uncond_mse;
    println!("held-out eps-MSE: conditioned {cond_mse:.4}, unconditioned {uncond_mse:.4}, gap {gap:+.1}%");
    assert!(
        cond_mse <= 0.8 * uncond_mse,
        "conditioned {cond_mse:.4} must be at least 20% below unconditioned {uncond_mse:.4} (gap {gap:+.1}%)"
    );

    // Distribution half: the trained fused model, sampling with its
    // conditioning, must beat verbatim copies of retrieved neighbors.
    let train_ids: Vec<usize> = train.iter().map(|e| e.id).collect();
    let schedule = make_schedule(cond_cfg.schedule, cond_cfg.timesteps).unwrap();
    let guidance = GuidanceConfig { scale: 1.0, ..GuidanceConfig::default() };
    let gt_cases = prepare_eval_cases(eval, &CondMode::GroundTruth, 5).unwrap();
    let mut generate = |i: usize, case: &xfuse_core::metrics::EvalCase| {
        let caps = vec![case.caption.clone()];
        let conds: Option<Vec<_>> = case.cond.clone().map(|c| vec![c]);
        Ok(sample_images(
            &cond_run.model,
            &schedule,
            &caps,
            conds.as_deref(),
            &guidance,
            32,
            0.0,
            1000 + i as u64,
        )?
        .remove(0))
    };
    let fused_row =
        run_benchmark("fused-ground-truth", "xfuse", &train_ids, &gt_cases, &mut generate).unwrap();

    let index = RetrievalIndex::build(train, Modality::Text).unwrap();
    let ret_cases =
        prepare_eval_cases(eval, &CondMode::Retrieved { index: &index, train }, 5).unwrap();
    let mut copier = copy_generator();
    let null_row =
        run_benchmark("copy-retrieved", "null_copy", &train_ids, &ret_cases, &mut copier).unwrap();

    println!(
        "distribution distance: fused {:.4} vs copy baseline {:.4}",
        fused_row.frechet, null_row.frechet
    );
    assert!(
        fused_row.frechet < null_row.frechet,
        "trained fused model ({:.4}) must beat the copy baseline ({:.4})",
        fused_row.frechet,
        null_row.frechet
    );
}

// ---------------------------------------------------------------------------
// 9. Crop-scale trade-off: subject alignment rises and text alignment falls
//    monotonically as the placed crop scale grows, over >= 200 examples.
// ---------------------------------------------------------------------------

#[test]
fn c09_crop_scale_trades_subject_fidelity_against_the_caption() {
    let canvas = UNetConfig::tiny().image_size;
    let corpus = generate_corpus_sized(302, 560, canvas);
    let (train, eval) = corpus.split_at(256);

    let mut cfg = experiment_config();
    cfg.total_steps = 2500;
    cfg.text_dropout_prob = 0.5;
    cfg.scenario = Scenario::Crop;
    let mut run = TrainRun::<f64>::new(cfg.clone(), train.to_vec(), None).unwrap();
    run.run(|_| {}).unwrap();

    let schedule = make_schedule(cfg.schedule, cfg.timesteps).unwrap();
    let guidance = GuidanceConfig { scale: 3.0, ..GuidanceConfig::default() };
    let scales = [0.1, 0.3, 0.6, 1.0];
    let mut subject = Vec::new();
    let mut text = Vec::new();
    for &scale in &scales {
        let mode = CondMode::Crop { scale, filters: AreaFilters::toy_default(canvas) };
        let cases = prepare_eval_cases(eval, &mode, 7).unwrap();
        assert!(cases.len() >= 200, "need at least 200 eval cases, got {}", cases.len());
        // One batched sampling pass per scale.
        let captions: Vec<String> = cases.iter().map(|c| c.caption.clone()).collect();
        let conds: Vec<_> = cases.iter().map(|c| c.cond.clone().unwrap()).collect();
        let images = sample_images(
            &run.model,
            &schedule,
            &captions,
            Some(&conds),
            &guidance,
            16,
            0.0,
            500,
        )
        .unwrap();
        let refs: Vec<_> = cases.iter().map(|c| c.subject_ref.clone().unwrap()).collect();
        let sa = mean_image_alignment(&images, &refs).unwrap();
        let ta = mean_text_alignment(&images, &captions).unwrap();
        println!("scale {scale}: subject alignment {sa:.4}, text alignment {ta:.4} over {} cases", cases.len());
        subject.push(sa);
        text.push(ta);
    }
    let scales_v: Vec<f64> = scales.to_vec();
    let rho_subject = spearman(&scales_v, &subject).unwrap();
    let rho_text = spearman(&scales_v, &text).unwrap();
    println!("rank correlation with scale: subject {rho_subject:+.2}, text {rho_text:+.2}");
    assert!(
        (rho_subject - 1.0).abs() < 1e-12,
        "subject alignment must rise monotonically with scale: {subject:?}"
    );
    assert!(
        (rho_text + 1.0).abs() < 1e-12,
        "text alignment must fall monotonically with scale: {text:?}"
    );
}

// ---------------------------------------------------------------------------
// 10. Scene color order: permuting the object order permutes rendered colors
//     and the caption suffix identically, over 1000 random layouts.
// ---------------------------------------------------------------------------

#[test]
fn c10_scene_color_assignment_follows_object_order() {
    use xfuse_core::conditioning::{render_scene, scene_from_example, SCENE_PALETTE};
    let corpus = generate_corpus_sized(71, 1400, 8);
    let mut r = rng::stream(72, "acc-c10");
    let mut checked = 0usize;
    for ex in &corpus {
        if ex.spec.objects.len() < 2 {
            continue;
        }
        let spec = scene_from_example(ex);
        let k = spec.objects.len();

        // Random permutation.
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            let j = r.gen_range(0..=i);
            perm.swap(i, j);
        }
        let permuted = SceneSpec {
            canvas: spec.canvas,
            objects: perm.iter().map(|&p| spec.objects[p].clone()).collect(),
        };

        let (img_a, suffix_a) = render_scene(&spec).unwrap();
        let (img_b, suffix_b) = render_scene(&permuted).unwrap();

        // Suffix order permutes with the objects.
        let parts_a: Vec<&str> = suffix_a.split(", ").collect();
        let parts_b: Vec<&str> = suffix_b.split(", ").collect();
        let expected: Vec<&str> = perm.iter().map(|&p| parts_a[p]).collect();
        assert_eq!(parts_b, expected, "suffix must permute with the objects");

        // Pixels covered by exactly one object carry the palette color of
        // that object's position in each ordering.
        let s = spec.canvas;
        for y in 0..s {
            for x in 0..s {
                let covering: Vec<usize> = (0..k)
                    .filter(|&i| spec.objects[i].mask[y * s + x])
                    .collect();
                if covering.len() != 1 {
                    continue;
                }
                let obj = covering[0];
                let new_pos = perm.iter().position(|&p| p == obj).unwrap();
                assert_eq!(
                    img_a.get01(x, y),
                    COLOR_RGB[SCENE_PALETTE[obj]],
                    "original render color at ({x},{y})"
                );
                assert_eq!(
                    img_b.get01(x, y),
                    COLOR_RGB[SCENE_PALETTE[new_pos]],
                    "permuted render color at ({x},{y})"
                );
            }
        }
        checked += 1;
        if checked == 1000 {
            break;
        }
    }
    assert!(checked >= 1000, "only {checked} multi-object layouts available");
}

// ---------------------------------------------------------------------------
// 11. Sampler contracts: deterministic at eta = 0; recovers the target from
//     an analytic denoiser; completes at 16/32/64 updates.
// ---------------------------------------------------------------------------

/// Denoiser that knows the clean image: returns the exact noise component
/// implied by `x_t = sqrt(ab) x0 + sqrt(1-ab) eps`.
struct AnalyticDenoiser {
    x0: Tensor<f64>,
    schedule: NoiseSchedule,
    shape: [usize; 3],
}

impl Denoiser<f64> for AnalyticDenoiser {
    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }
    fn predict_eps(
        &self,
        x_t: &Tensor<f64>,
        t: usize,
        _text: Option<&Tensor<f64>>,
        _conditioned: Option<&Tensor<f64>>,
    ) -> Result<Tensor<f64>> {
        let ab = self.schedule.alpha_bar(t)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.sub(&self.x0.scale(sa)?)?.scale(1.0 / sn)
    }
}

#[test]
fn c11_sampler_is_deterministic_exact_on_an_analytic_denoiser_and_completes() {
    for (kind, timesteps) in [(ScheduleKind::ScaledLinear, 1000usize), (ScheduleKind::Linear, 100)] {
        let schedule = make_schedule(kind, timesteps).unwrap();
        let x0 = rand_tensor(81, "acc-c11-x0", &[2, 3, 8, 8])
            .to_vec()
            .iter()
            .map(|v| v.tanh())
            .collect::<Vec<f64>>();
        let x0 = Tensor::from_vec(x0, &[2, 3, 8, 8]).unwrap();
        let model = AnalyticDenoiser {
            x0: x0.clone(),
            schedule: make_schedule(kind, timesteps).unwrap(),
            shape: [3, 8, 8],
        };
        let guidance = GuidanceConfig { scale: 1.0, ..GuidanceConfig::default() };
        for steps in [16usize, 32, 64] {
            let out = ddim_sample(
                &model,
                &schedule,
                &SampleConditioning::none(),
                &guidance,
                2,
                steps,
                0.0,
                1234,
            )
            .unwrap();
            let worst = out
                .to_vec()
                .iter()
                .zip(&x0.to_vec())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(
                worst <= 1e-3,
                "{steps}-step recovery off by {worst:.3e} under {kind:?}"
            );

            // Bit-exact repetition at eta = 0.
            let again = ddim_sample(
                &model,
                &schedule,
                &SampleConditioning::none(),
                &guidance,
                2,
                steps,
                0.0,
                1234,
            )
            .unwrap();
            assert_eq!(out.to_vec(), again.to_vec(), "repeat run must be bit-identical");
        }
    }

    // A real (untrained) model also completes at every step count.
    let cfg = UNetConfig::tiny();
    let model = UNet::<f64>::new(&cfg, 82).unwrap();
    randomize_params(&model, 83, 0.05);
    let schedule = make_schedule(ScheduleKind::Linear, 100).unwrap();
    let guidance = GuidanceConfig::default();
    let text = rand_tensor(84, "acc-c11-text", &[1, 2, cfg.text_embed_dim]);
    let cond = SampleConditioning { text: Some(text), image: None };
    for steps in [16usize, 32, 64] {
        let out = ddim_sample(&model, &schedule, &cond, &guidance, 1, steps, 0.0, 9).unwrap();
        assert!(out.to_vec().iter().all(|v| v.is_finite()), "{steps}-step run produced non-finite values");
    }
}

// ---------------------------------------------------------------------------
// 12. Index-size sweep: the benchmark's distribution distance is
//     non-increasing in index size across {2k, 10k, 35k}, averaged over 3
//     corpus seeds (copy-the-neighbor route isolates retrieval quality).
// ---------------------------------------------------------------------------

#[test]
fn c12_bigger_retrieval_indices_do_not_worsen_the_benchmark() {
    let sizes = [2_000usize, 10_000, 35_000];
    let eval_n = 256usize;
    let canvas = 8usize;
    let mut means = vec![0.0; sizes.len()];
    for seed in [0u64, 1, 2] {
        let all = generate_corpus_sized(seed, sizes[sizes.len() - 1] + eval_n, canvas);
        let (pool, eval) = all.split_at(sizes[sizes.len() - 1]);
        for (si, &size) in sizes.iter().enumerate() {
            let train = &pool[..size];
            let index = RetrievalIndex::build(train, Modality::Image).unwrap();
            let mode = CondMode::Retrieved { index: &index, train };
            let cases = prepare_eval_cases(eval, &mode, 3).unwrap();
            let train_ids: Vec<usize> = train.iter().map(|e| e.id).collect();
            let mut copier = copy_generator();
            let row = run_benchmark(
                &format!("n={size} seed={seed}"),
                "null_copy",
                &train_ids,
                &cases,
                &mut copier,
            )
            .unwrap();
            println!("seed {seed} index size {size}: distance {:.4}", row.frechet);
            means[si] += row.frechet / 3.0;
        }
    }
    println!("mean distances across sizes {sizes:?}: {means:?}");
    for w in means.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-12,
            "distance must not increase with index size: {means:?}"
        );
    }
}

// ---------------------------------------------------------------------------
// 13. CLI reproducibility: every command, run twice with the same seeds,
//     produces byte-identical primary outputs.
// ---------------------------------------------------------------------------

fn xfuse_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xfuse"))
}

fn run_ok(args: &[&str]) {
    let out = xfuse_bin().args(args).output().expect("spawn CLI");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_trees_identical(a: &Path, b: &Path) {
    let mut entries_a: Vec<_> = walk(a);
    let mut entries_b: Vec<_> = walk(b);
    entries_a.sort();
    entries_b.sort();
    let rel = |base: &Path, paths: &[std::path::PathBuf]| -> Vec<std::path::PathBuf> {
        paths.iter().map(|p| p.strip_prefix(base).unwrap().to_path_buf()).collect()
    };
    assert_eq!(rel(a, &entries_a), rel(b, &entries_b), "file sets differ");
    for (fa, fb) in entries_a.iter().zip(&entries_b) {
        let ba = std::fs::read(fa).unwrap();
        let bb = std::fs::read(fb).unwrap();
        assert_eq!(ba, bb, "bytes differ: {} vs {}", fa.display(), fb.display());
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    if dir.is_file() {
        return vec![dir.to_path_buf()];
    }
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn c13_cli_runs_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let cfg_path = root.join("train.toml");
    std::fs::write(
        &cfg_path,
        r#"
[corpus]
seed = 7
count = 40
holdout = 8

[train]
batch_size = 4
total_steps = 20
warmup_steps = 4
peak_lr = 0.004
scenario = "vanilla"
seed = 1

[train.unet]
image_size = 8
base_channels = 4
channel_multipliers = [1, 2]
attention_levels = [1]
heads = 2
text_embed_dim = 8
norm_groups = 2

[sweep]
seeds = [0, 1]
index_sizes = [16, 32]
eval_count = 8
"#,
    )
    .unwrap();

    for pass in ["a", "b"] {
        let d = root.join(pass);
        std::fs::create_dir_all(&d).unwrap();
        let p = |s: &str| d.join(s).to_string_lossy().into_owned();
        run_ok(&["dataset-gen", "--seed", "7", "--count", "24", "--canvas", "8", "--out", &p("corpus")]);
        run_ok(&["index-build", "--corpus", &p("corpus"), "--modality", "text", "--out", &p("index.bin")]);
        run_ok(&["train", "--config", cfg_path.to_str().unwrap(), "--out", &p("run")]);
        run_ok(&[
            "sample", "--checkpoint", &p("run/checkpoint.ckpt"), "--caption", "a red circle",
            "--count", "2", "--steps", "8", "--seed", "3", "--out", &p("samples"),
        ]);
        run_ok(&[
            "eval", "--mechanism", "null", "--corpus", &p("corpus"), "--benchmark", "retrieve",
            "--holdout", "8", "--seed", "0", "--out", &p("evalnull"),
        ]);
        run_ok(&[
            "eval", "--checkpoint", &p("run/checkpoint.ckpt"), "--corpus", &p("corpus"),
            "--benchmark", "ground-truth", "--holdout", "8", "--steps", "6", "--seed", "0",
            "--out", &p("evalgt"),
        ]);
        run_ok(&[
            "sweep", "--kind", "index-size", "--config", cfg_path.to_str().unwrap(),
            "--out", &p("sweep"),
        ]);
    }
    assert_trees_identical(&root.join("a"), &root.join("b"));
}
