//! Scratch harness for pinning hyperparameters; not part of the library.
//! Usage: cargo run -p dash-core --example tune -- <stage> [args]

use dash_core::calibration::compute_scale_table;
use dash_core::experiments::{dash_vs_random, quality_ladder, static_rung, ExperimentInputs};
use dash_core::model::ModelConfig;
use dash_core::policy::{ScorerConfig, ScorerParams, StateSet};
use dash_core::profiler::{io_similarity_profile, static_skip_sweep};
use dash_core::rewards::{train_scorer, RewardConfig, TrainScorerConfig};
use dash_core::runtime::{budget_sweep, evaluate_policy, BudgetSweepInputs};
use dash_core::task::{TaskKind, TaskSpec};
use dash_core::train::train_base_model;
use std::time::Instant;

fn base_config(d_model: usize, d_ff: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 6,
        d_model,
        n_heads,
        d_ff,
        vocab_size: dash_core::task::VOCAB_SIZE,
        max_seq_len: dash_core::task::LOOKUP_SEQ_LEN,
        seed: 17,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let stage = args.first().map(String::as_str).unwrap_or("base");
    match stage {
        "base" => stage_base(&args[1..]),
        "scales" => stage_scales(),
        "scorer" => stage_scorer(&args[1..]),
        "sweep" => stage_sweep(),
        "ladder" => stage_ladder(),
        "random" => stage_random(),
        "scan" => stage_scan(),
        other => eprintln!("unknown stage {other}"),
    }
}

fn stage_base(rest: &[String]) {
    let d_model: usize = rest.first().and_then(|s| s.parse().ok()).unwrap_or(32);
    let d_ff: usize = rest.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let heads: usize = rest.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let mut cfg = base_config(d_model, d_ff, heads);
    let mut task = TaskSpec::lookup_default();
    if let Some(steps) = rest.get(3).and_then(|s| s.parse().ok()) {
        task.max_steps = steps;
    }
    if let Some(lr) = rest.get(4).and_then(|s| s.parse().ok()) {
        task.learning_rate = lr;
    }
    if let Some(seed) = rest.get(5).and_then(|s| s.parse().ok()) {
        cfg.seed = seed;
        task.train_seed = seed.wrapping_mul(7919).wrapping_add(11);
    }
    let t = Instant::now();
    let outcome = train_base_model(&cfg, &task);
    let secs = t.elapsed().as_secs_f64();
    let log = match &outcome {
        Ok((_, log)) => log.as_slice(),
        Err(_) => &[],
    };
    for row in log.iter().rev().take(8).rev() {
        println!(
            "  step {} loss {:.4} val {:.4}",
            row.step, row.train_loss, row.val_metric
        );
    }
    match outcome {
        Ok((model, log)) => {
            let last = log.last().unwrap();
            println!(
                "seed={} d_model={d_model}: clicked step={} acc={:.4} in {secs:.1}s",
                cfg.seed, last.step, last.val_metric
            );
            let val = task.validation_set();
            let acc = dash_core::train::validation_metric(&model, &task, &val).unwrap();
            println!("final val acc {acc:.4}");
        }
        Err(e) => println!("seed={} train failed after {secs:.1}s: {e}", cfg.seed),
    }
}

fn trained() -> (ModelConfig, dash_core::ToyModel, TaskSpec) {
    let cfg = base_config(32, 64, 4);
    let task = TaskSpec::lookup_default();
    let t = Instant::now();
    let (model, log) = train_base_model(&cfg, &task).expect("base training");
    println!(
        "[base ready: step {} acc {:.4}, {:.1}s]",
        log.last().unwrap().step,
        log.last().unwrap().val_metric,
        t.elapsed().as_secs_f64()
    );
    (cfg, model, task)
}

fn stage_scales() {
    let (_, model, task) = trained();
    let calib = task.episode_batch(32, 333);
    let table = compute_scale_table(&model, &calib).unwrap();
    println!("scales: {:?}", table.scales);
    let seqs: Vec<Vec<usize>> = calib.iter().map(|e| e.tokens.clone()).collect();
    let prof = io_similarity_profile(&model, &seqs).unwrap();
    println!("io similarity means: {:?}", prof.mean);
    let eval = task.episode_batch(128, 777);
    let sweep = static_skip_sweep(&model, &eval, TaskKind::KeyValueLookup, 4).unwrap();
    for p in sweep {
        println!("k={} acc={:.4} skipped={:?}", p.k, p.accuracy, p.skipped_layers);
    }
}

fn scorer_cfg() -> ScorerConfig {
    ScorerConfig {
        d_l: 8,
        d_1: 24,
        d_2: 24,
        ..ScorerConfig::default()
    }
}

fn stage_scorer(rest: &[String]) {
    let beta: f64 = rest.first().and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let steps: usize = rest.get(1).and_then(|s| s.parse().ok()).unwrap_or(240);
    let (_, model, task) = trained();
    let scales = compute_scale_table(&model, &task.episode_batch(32, 333)).unwrap();
    let reward_cfg = RewardConfig {
        beta,
        ..RewardConfig::default()
    };
    let train_cfg = TrainScorerConfig {
        steps,
        ..TrainScorerConfig::default()
    };
    let init = ScorerParams::init(&model.config, &scorer_cfg());
    let t = Instant::now();
    let out = train_scorer(&model, &task, init, &scales, &reward_cfg, &train_cfg).unwrap();
    println!("trained {} steps in {:.1}s", steps, t.elapsed().as_secs_f64());
    for row in &out.log {
        println!(
            "step {:>4} ce {:>8.4} rl {:>9.4} ratio {:.3} acc {:.3} tau {:.3}",
            row.step, row.loss_ce, row.loss_rl, row.mean_cost_ratio, row.accuracy, row.tau
        );
    }
    let eval = task.episode_batch(128, 777);
    let pe = evaluate_policy(&out.model, &out.scorer, &scales, &eval, task.kind).unwrap();
    println!("greedy eval: ratio {:.4} quality {:.4}", pe.mean_cost_ratio, pe.quality);
}

fn stage_sweep() {
    let (_, model, task) = trained();
    let scales = compute_scale_table(&model, &task.episode_batch(32, 333)).unwrap();
    let sc = scorer_cfg();
    let inputs = BudgetSweepInputs {
        model: &model,
        task: &task,
        scales: &scales,
        scorer_cfg: &sc,
        reward_cfg: RewardConfig::default(),
        train_cfg: TrainScorerConfig::default(),
        eval_episodes: 96,
        eval_seed: 777,
    };
    let t = Instant::now();
    let rows = budget_sweep(&inputs, &[1.33, 1.67, 2.0]).unwrap();
    for r in &rows {
        println!(
            "target {:.2} beta {:.4} ratio {:.4} (goal {:.4}) quality {:.4} attained {}",
            r.target,
            r.beta,
            r.achieved_ratio,
            1.0 / r.target,
            r.quality,
            r.attained
        );
    }
    println!("sweep in {:.1}s", t.elapsed().as_secs_f64());
}

fn experiment_inputs<'a>(
    model: &'a dash_core::ToyModel,
    task: &'a TaskSpec,
    scales: &'a dash_core::ScaleTable,
) -> ExperimentInputs<'a> {
    ExperimentInputs {
        model,
        task,
        calibrated: scales,
        scorer_cfg: scorer_cfg(),
        reward_cfg: RewardConfig::default(),
        train_cfg: TrainScorerConfig::default(),
        eval_episodes: 96,
        eval_seed: 777,
    }
}

fn stage_ladder() {
    let (_, model, task) = trained();
    let scales = compute_scale_table(&model, &task.episode_batch(32, 333)).unwrap();
    let inputs = experiment_inputs(&model, &task, &scales);
    let t = Instant::now();
    let report = quality_ladder(&inputs, 1.67, &[1, 2, 3, 4, 5]).unwrap();
    for p in &report.points {
        println!(
            "{:<12} beta {:.4} mean_q {:.4} ratio {:.4} qs {:?}",
            p.name, p.beta, p.mean_quality, p.mean_cost_ratio, p.qualities
        );
    }
    println!("ladder in {:.1}s", t.elapsed().as_secs_f64());
}

fn stage_random() {
    let (_, model, task) = trained();
    let scales = compute_scale_table(&model, &task.episode_batch(32, 333)).unwrap();
    let inputs = experiment_inputs(&model, &task, &scales);
    for target in [1.33, 1.67, 2.0] {
        let t = Instant::now();
        let cmp = dash_vs_random(&inputs, target, &[1, 2, 3, 4, 5], 64, 4242).unwrap();
        println!(
            "target {target}: dash {:.4}±{:.4} (ratio {:.3}) random {:.4}±{:.4} margin {:.4} se {:.4} [{:.0}s]",
            cmp.dash_mean,
            cmp.dash_sd,
            cmp.dash_mean_ratio,
            cmp.random.mean_quality,
            cmp.random.std_quality,
            cmp.margin,
            cmp.se,
            t.elapsed().as_secs_f64()
        );
    }
    // Static rung sanity at the middle target.
    let eval = task.episode_batch(96, 777);
    let st = static_rung(&model, &eval, TaskKind::KeyValueLookup, 1.67).unwrap();
    println!("static k={} ratio {:.3} q {:.4}", st.k, st.cost_ratio, st.quality);
    let _ = StateSet::all();
}

fn stage_scan() {
    // Hunt for a base-model shape whose trained weights route the lookup
    // through the middle layers, so the static sweep collapses toward chance
    // once every decidable layer is skipped.
    let task = TaskSpec::lookup_default();
    let chance = task.chance_level();
    for (d_model, d_ff, heads) in [(16usize, 32usize, 1usize), (24, 48, 1), (32, 64, 1), (32, 64, 2)] {
        for seed in [1u64, 3, 5, 7, 9, 17, 23] {
            let mut cfg = base_config(d_model, d_ff, heads);
            cfg.seed = seed;
            let t = Instant::now();
            let trained = match train_base_model(&cfg, &task) {
                Ok((model, log)) => (model, log.last().unwrap().val_metric),
                Err(e) => {
                    println!("d{d_model} h{heads} s{seed}: train failed ({e})");
                    continue;
                }
            };
            let (model, full_acc) = trained;
            let eval = task.episode_batch(256, 777);
            let sweep =
                static_skip_sweep(&model, &eval, TaskKind::KeyValueLookup, cfg.n_layers - 2)
                    .unwrap();
            let accs: Vec<f64> = sweep.iter().map(|p| p.accuracy).collect();
            let last = *accs.last().unwrap();
            let collapse = last <= chance + 0.10;
            let mono = accs.windows(2).all(|w| w[1] <= w[0] + 0.03);
            println!(
                "d{d_model} h{heads} s{seed}: full {:.3} sweep {:?} last {:.3} collapse {} mono {} [{:.0}s]",
                full_acc,
                accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                last,
                collapse,
                mono,
                t.elapsed().as_secs_f64()
            );
        }
    }
}
