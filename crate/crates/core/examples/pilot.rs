//! Temporary tuning pilot, phase 3: with the working recipe (base 16,
//! full-resolution fusion, long smooth schedule, captions fully dropped),
//! check (a) the Fréchet comparison between the ground-truth-conditioned
//! model and the copy-the-neighbor baseline, and (b) the crop-scale
//! alignment trade-off on a crop-trained model.

use xfuse_core::conditioning::{AreaFilters, Modality, RetrievalIndex, SourceMix};
use xfuse_core::diffusion::{make_schedule, GuidanceConfig, ScheduleKind};
use xfuse_core::metrics::{
    copy_generator, mean_image_alignment, mean_text_alignment, prepare_eval_cases, run_benchmark,
    spearman, CondMode,
};
use xfuse_core::toydata::generate_corpus_sized;
use xfuse_core::trainer::{heldout_eps_mse, sample_images, Scenario, TrainConfig, TrainRun};
use xfuse_core::unet::UNetConfig;

fn recipe() -> TrainConfig {
    let mut cfg = TrainConfig::desk_default();
    cfg.unet = UNetConfig::tiny();
    cfg.unet.attention_levels = vec![0, 1];
    cfg.unet.base_channels = 16;
    cfg.batch_size = 8;
    cfg.total_steps = 1500;
    cfg.warmup_steps = 100;
    cfg.peak_lr = 4e-3;
    cfg.schedule = ScheduleKind::ScaledLinear;
    cfg.timesteps = 1000;
    cfg
}

fn main() {
    let canvas = UNetConfig::tiny().image_size;
    let corpus = generate_corpus_sized(301, 304, canvas);
    let (train, eval) = corpus.split_at(256);
    let train_ids: Vec<usize> = train.iter().map(|e| e.id).collect();

    // --- Ground-truth-conditioned model, captions fully dropped. ---
    let mut gt_cfg = recipe();
    gt_cfg.text_dropout_prob = 1.0;
    gt_cfg.scenario = Scenario::Retrieve;
    gt_cfg.source_mix =
        SourceMix { ground_truth: 1.0, text_retrieval: 0.0, image_retrieval: 0.0 };
    let mut gt_run = TrainRun::<f64>::new(gt_cfg.clone(), train.to_vec(), None).unwrap();
    gt_run.run(|_| {}).unwrap();
    let gt_mse =
        heldout_eps_mse(&gt_run.model, eval, &CondMode::GroundTruth, &gt_cfg, 4, 99).unwrap();
    println!("gt-conditioned heldout eps-mse: {gt_mse:.4}");

    let schedule = make_schedule(gt_cfg.schedule, gt_cfg.timesteps).unwrap();
    let guidance = GuidanceConfig { scale: 1.0, ..GuidanceConfig::default() };
    let gt_cases = prepare_eval_cases(eval, &CondMode::GroundTruth, 5).unwrap();
    let mut gen = |_i: usize, case: &xfuse_core::metrics::EvalCase| {
        let caps = vec![case.caption.clone()];
        let conds: Option<Vec<_>> = case.cond.clone().map(|c| vec![c]);
        Ok(sample_images(
            &gt_run.model, &schedule, &caps, conds.as_deref(), &guidance, 32, 0.0,
            1000 + _i as u64,
        )
        .unwrap()
        .remove(0))
    };
    let row_x = run_benchmark("xfuse-gt", "xfuse", &train_ids, &gt_cases, &mut gen).unwrap();
    println!(
        "xfuse-gt: frechet {:.4} text-align {:.4} subj-align {:?}",
        row_x.frechet, row_x.text_alignment, row_x.subject_alignment
    );

    let index = RetrievalIndex::build(train, Modality::Text).unwrap();
    let ret_cases =
        prepare_eval_cases(eval, &CondMode::Retrieved { index: &index, train }, 5).unwrap();
    let mut copier = copy_generator();
    let row_n =
        run_benchmark("null-retrieved", "null_copy", &train_ids, &ret_cases, &mut copier)
            .unwrap();
    println!(
        "null-copy: frechet {:.4} text-align {:.4} subj-align {:?}",
        row_n.frechet, row_n.text_alignment, row_n.subject_alignment
    );

    // --- Crop-trained model, captions half dropped. ---
    let mut crop_cfg = recipe();
    crop_cfg.text_dropout_prob = 0.5;
    crop_cfg.scenario = Scenario::Crop;
    let mut crop_run = TrainRun::<f64>::new(crop_cfg.clone(), train.to_vec(), None).unwrap();
    crop_run.run(|_| {}).unwrap();

    let scales = [0.1, 0.3, 0.6, 1.0];
    let mut subj = Vec::new();
    let mut text = Vec::new();
    let g2 = GuidanceConfig { scale: 3.0, ..GuidanceConfig::default() };
    for &s in &scales {
        let mode =
            CondMode::Crop { scale: s, filters: AreaFilters::toy_default(canvas) };
        let cases = prepare_eval_cases(eval, &mode, 5).unwrap();
        let mut gens = Vec::new();
        let mut caps = Vec::new();
        let mut refs = Vec::new();
        for (i, case) in cases.iter().enumerate() {
            let c = vec![case.caption.clone()];
            let cd: Option<Vec<_>> = case.cond.clone().map(|x| vec![x]);
            gens.push(
                sample_images(
                    &crop_run.model, &schedule, &c, cd.as_deref(), &g2, 16, 0.0,
                    2000 + i as u64,
                )
                .unwrap()
                .remove(0),
            );
            caps.push(case.caption.clone());
            refs.push(case.subject_ref.clone().unwrap());
        }
        let sa = mean_image_alignment(&gens, &refs).unwrap();
        let ta = mean_text_alignment(&gens, &caps).unwrap();
        println!("crop scale {s}: subject-align {sa:.4} text-align {ta:.4} ({} cases)", cases.len());
        subj.push(sa);
        text.push(ta);
    }
    let scales_v: Vec<f64> = scales.to_vec();
    println!(
        "spearman subject-vs-scale {:+.2}, text-vs-scale {:+.2}",
        spearman(&scales_v, &subj).unwrap(),
        spearman(&scales_v, &text).unwrap()
    );
}
