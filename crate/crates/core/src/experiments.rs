//! Method comparisons: the quality/state-set ladder, the DASH-vs-random
//! separation test, and the bench table the CLI emits. Everything here is
//! deterministic given its seeds.
//!
//! Quality is task accuracy throughout (the comparisons run on the
//! classification task, where every method reports on the same scale).

use crate::calibration::ScaleTable;
use crate::error::{DashError, Result};
use crate::model::{full_path, full_path_cost, LayerState, ToyModel};
use crate::oracle::{evaluate_path, random_skip_baseline, RandomSkipBaseline};
use crate::policy::{ScorerConfig, ScorerParams, StateSet};
use crate::profiler::static_skip_sweep;
use crate::rewards::{train_scorer, RewardConfig, TrainScorerConfig};
use crate::runtime::{budget_sweep, evaluate_policy, BudgetRow, BudgetSweepInputs, PolicyEval};
use crate::task::{TaskKind, TaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

// ── Shared inputs ──────────────────────────────────────────────────────

/// Everything the comparison drivers need. `scorer_cfg.allowed` and
/// `reward_cfg.beta` act as templates — rungs and budget probes overwrite
/// them; the training seeds are re-derived per evaluation seed.
pub struct ExperimentInputs<'a> {
    pub model: &'a ToyModel,
    pub task: &'a TaskSpec,
    pub calibrated: &'a ScaleTable,
    pub scorer_cfg: ScorerConfig,
    pub reward_cfg: RewardConfig,
    pub train_cfg: TrainScorerConfig,
    pub eval_episodes: usize,
    pub eval_seed: u64,
}

impl ExperimentInputs<'_> {
    fn eval_set(&self) -> Vec<crate::task::Episode> {
        self.task.episode_batch(self.eval_episodes, self.eval_seed)
    }
}

/// Decorrelated seed triple (scorer init, episode draw, action sampling)
/// for one evaluation seed.
fn derive_cfgs(
    scorer_cfg: &ScorerConfig,
    train_cfg: &TrainScorerConfig,
    allowed: StateSet,
    beta_cfg: RewardConfig,
    seed: u64,
) -> (ScorerConfig, TrainScorerConfig, RewardConfig) {
    let mut sc = scorer_cfg.clone();
    sc.allowed = allowed;
    sc.seed = sc.seed.wrapping_add(seed.wrapping_mul(15_485_863));
    let mut tc = train_cfg.clone();
    tc.episode_seed = tc.episode_seed.wrapping_add(seed.wrapping_mul(7919));
    tc.sample_seed = tc.sample_seed.wrapping_add(seed.wrapping_mul(104_729));
    (sc, tc, beta_cfg)
}

/// Train one policy (scorer seeds derived from `seed`) at a fixed beta and
/// evaluate it greedily on the shared evaluation set.
pub fn train_policy_at(
    inputs: &ExperimentInputs<'_>,
    scales: &ScaleTable,
    allowed: StateSet,
    beta: f64,
    seed: u64,
) -> Result<(ScorerParams, PolicyEval)> {
    let mut reward_cfg = inputs.reward_cfg.clone();
    reward_cfg.beta = beta;
    let (sc, tc, rc) = derive_cfgs(&inputs.scorer_cfg, &inputs.train_cfg, allowed, reward_cfg, seed);
    let init = ScorerParams::init(&inputs.model.config, &sc);
    let outcome = train_scorer(inputs.model, inputs.task, init, scales, &rc, &tc)?;
    let eval = evaluate_policy(
        &outcome.model,
        &outcome.scorer,
        scales,
        &inputs.eval_set(),
        inputs.task.kind,
    )?;
    Ok((outcome.scorer, eval))
}

/// Budget-controller run for a single target speedup on the given scale
/// table and state set (base seeds, not per-evaluation seeds).
pub fn calibrate_beta(
    inputs: &ExperimentInputs<'_>,
    scales: &ScaleTable,
    allowed: StateSet,
    target: f64,
) -> Result<BudgetRow> {
    let mut sc = inputs.scorer_cfg.clone();
    sc.allowed = allowed;
    let sweep = BudgetSweepInputs {
        model: inputs.model,
        task: inputs.task,
        scales,
        scorer_cfg: &sc,
        reward_cfg: inputs.reward_cfg.clone(),
        train_cfg: inputs.train_cfg.clone(),
        eval_episodes: inputs.eval_episodes,
        eval_seed: inputs.eval_seed,
    };
    let mut rows = budget_sweep(&sweep, &[target])?;
    Ok(rows.pop().expect("one row per target"))
}

// ── Static rung ────────────────────────────────────────────────────────

/// The naive static baseline evaluated at a compute budget: skip the k
/// most input-output-similar layers (no compensation), with k the smallest
/// count whose cost fits the budget (capped at the decidable layers).
#[derive(Debug, Clone, Serialize)]
pub struct StaticRung {
    pub k: usize,
    /// Realized cost fraction (L-k)/L.
    pub cost_ratio: f64,
    pub quality: f64,
    pub skipped_layers: Vec<usize>,
}

pub fn static_rung(
    model: &ToyModel,
    eval_set: &[crate::task::Episode],
    kind: TaskKind,
    target_speedup: f64,
) -> Result<StaticRung> {
    if target_speedup < 1.0 {
        return Err(DashError::InvalidArgument(format!(
            "target speedup {target_speedup} below 1"
        )));
    }
    let l = model.config.n_layers;
    let budget = 1.0 / target_speedup;
    // Smallest k with (L-k)/L <= budget; the sweep caps k at L-2.
    let mut k = (l as f64 * (1.0 - budget)).ceil() as usize;
    if k > l - 2 {
        k = l - 2;
    }
    let curve = static_skip_sweep(model, eval_set, kind, k)?;
    let point = curve.last().expect("sweep always returns k+1 points");
    Ok(StaticRung {
        k,
        cost_ratio: (l - k) as f64 / l as f64,
        quality: point.accuracy,
        skipped_layers: point.skipped_layers.clone(),
    })
}

// ── Quality ladder ─────────────────────────────────────────────────────

/// The rungs of the capability ladder, weakest first: (name, admissible
/// states, skip compensation on).
pub fn ladder_rungs() -> Vec<(&'static str, StateSet, bool)> {
    let skip_full = StateSet::from_states(&[LayerState::Skip, LayerState::Full])
        .expect("full is present");
    let with_int8 =
        StateSet::from_states(&[LayerState::Skip, LayerState::Int8, LayerState::Full])
            .expect("full is present");
    vec![
        ("dyn-no-comp", skip_full, false),
        ("dyn-scale", skip_full, true),
        ("dyn-int8", with_int8, true),
        ("dyn-int48", StateSet::all(), true),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderPoint {
    pub name: String,
    pub beta: f64,
    pub qualities: Vec<f64>,
    pub mean_quality: f64,
    pub mean_cost_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderReport {
    pub target: f64,
    /// Static rung first, then the dynamic rungs in capability order.
    pub points: Vec<LadderPoint>,
}

/// Evaluate all rungs at one matched compute budget over several seeds.
pub fn quality_ladder(
    inputs: &ExperimentInputs<'_>,
    target: f64,
    seeds: &[u64],
) -> Result<LadderReport> {
    if seeds.is_empty() {
        return Err(DashError::InvalidArgument("need at least one seed".into()));
    }
    let eval = inputs.eval_set();
    let identity = ScaleTable::identity(inputs.model.config.n_layers);

    let st = static_rung(inputs.model, &eval, inputs.task.kind, target)?;
    let mut points = vec![LadderPoint {
        name: "static-topk".into(),
        beta: 0.0,
        qualities: vec![st.quality; seeds.len()],
        mean_quality: st.quality,
        mean_cost_ratio: st.cost_ratio,
    }];

    for (name, allowed, compensated) in ladder_rungs() {
        let scales = if compensated {
            inputs.calibrated
        } else {
            &identity
        };
        let row = calibrate_beta(inputs, scales, allowed, target)?;
        let mut qualities = Vec::with_capacity(seeds.len());
        let mut ratio_sum = 0.0;
        for &s in seeds {
            let (_, eval_s) = train_policy_at(inputs, scales, allowed, row.beta, s)?;
            qualities.push(eval_s.quality);
            ratio_sum += eval_s.mean_cost_ratio;
        }
        let mean_quality = qualities.iter().sum::<f64>() / qualities.len() as f64;
        points.push(LadderPoint {
            name: name.into(),
            beta: row.beta,
            qualities,
            mean_quality,
            mean_cost_ratio: ratio_sum / seeds.len() as f64,
        });
    }
    Ok(LadderReport { target, points })
}

// ── DASH vs random skipping ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct MethodComparison {
    pub target: f64,
    pub dash_qualities: Vec<f64>,
    pub dash_mean: f64,
    /// Sample standard deviation over seeds.
    pub dash_sd: f64,
    pub dash_mean_ratio: f64,
    /// Cost units handed to the random baseline (matched to what DASH
    /// actually spent, so the comparison is at equal realized budget).
    pub matched_cost: u64,
    pub random: RandomSkipBaseline,
    /// dash_mean - random mean.
    pub margin: f64,
    /// Combined standard error of the margin.
    pub se: f64,
}

/// Train DASH (full state set, compensated) at one target over several
/// seeds and compare its mean quality against random skipping at the same
/// realized cost.
pub fn dash_vs_random(
    inputs: &ExperimentInputs<'_>,
    target: f64,
    seeds: &[u64],
    trials: usize,
    baseline_seed: u64,
) -> Result<MethodComparison> {
    if seeds.len() < 2 {
        return Err(DashError::InvalidArgument(
            "variance over seeds needs at least two seeds".into(),
        ));
    }
    let row = calibrate_beta(inputs, inputs.calibrated, StateSet::all(), target)?;
    let mut qualities = Vec::with_capacity(seeds.len());
    let mut ratio_sum = 0.0;
    for &s in seeds {
        let (_, ev) = train_policy_at(inputs, inputs.calibrated, StateSet::all(), row.beta, s)?;
        qualities.push(ev.quality);
        ratio_sum += ev.mean_cost_ratio;
    }
    let n = seeds.len() as f64;
    let dash_mean = qualities.iter().sum::<f64>() / n;
    let dash_var = qualities
        .iter()
        .map(|q| (q - dash_mean) * (q - dash_mean))
        .sum::<f64>()
        / (n - 1.0);
    let dash_mean_ratio = ratio_sum / n;

    let full_cost = full_path_cost(inputs.model.config.n_layers) as f64;
    let matched_cost = (dash_mean_ratio * full_cost).round().max(8.0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(baseline_seed);
    let random = random_skip_baseline(
        inputs.model,
        inputs.calibrated,
        &inputs.eval_set(),
        inputs.task.kind,
        matched_cost,
        trials,
        &mut rng,
    )?;

    let margin = dash_mean - random.mean_quality;
    let se = (dash_var / n + random.std_quality * random.std_quality / trials as f64).sqrt();
    Ok(MethodComparison {
        target,
        dash_qualities: qualities,
        dash_mean,
        dash_sd: dash_var.sqrt(),
        dash_mean_ratio,
        matched_cost,
        random,
        margin,
        se,
    })
}

// ── Bench table ────────────────────────────────────────────────────────

/// One row of the standard comparison table. Ratios are speedups
/// (full-path cost over realized cost), so 1.0 is the full model.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub quality: f64,
    pub seed: u64,
}

pub fn bench_rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("method,target_ratio,achieved_ratio,quality,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.target_ratio, r.achieved_ratio, r.quality, r.seed
        ));
    }
    out
}

/// The full/static/random/DASH comparison at each target speedup.
pub fn bench_table(
    inputs: &ExperimentInputs<'_>,
    targets: &[f64],
    seeds: &[u64],
    trials: usize,
    baseline_seed: u64,
) -> Result<Vec<BenchRow>> {
    let eval = inputs.eval_set();
    let full = evaluate_path(
        inputs.model,
        &full_path(inputs.model.config.n_layers),
        inputs.calibrated,
        &eval,
        inputs.task.kind,
    )?;
    let mut rows = vec![BenchRow {
        method: "full".into(),
        target_ratio: 1.0,
        achieved_ratio: 1.0,
        quality: full.quality,
        seed: 0,
    }];
    let full_cost = full_path_cost(inputs.model.config.n_layers) as f64;
    for &target in targets {
        let st = static_rung(inputs.model, &eval, inputs.task.kind, target)?;
        rows.push(BenchRow {
            method: "static".into(),
            target_ratio: target,
            achieved_ratio: 1.0 / st.cost_ratio,
            quality: st.quality,
            seed: 0,
        });
        let cmp = dash_vs_random(inputs, target, seeds, trials, baseline_seed)?;
        rows.push(BenchRow {
            method: "random".into(),
            target_ratio: target,
            achieved_ratio: full_cost / cmp.matched_cost as f64,
            quality: cmp.random.mean_quality,
            seed: baseline_seed,
        });
        for (&s, &q) in seeds.iter().zip(&cmp.dash_qualities) {
            rows.push(BenchRow {
                method: "dash".into(),
                target_ratio: target,
                achieved_ratio: 1.0 / cmp.dash_mean_ratio,
                quality: q,
                seed: s,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy(l: usize) -> ToyModel {
        let c = ModelConfig {
            n_layers: l,
            d_model: 12,
            n_heads: 2,
            d_ff: 16,
            vocab_size: crate::task::VOCAB_SIZE,
            max_seq_len: crate::task::LOOKUP_SEQ_LEN,
            seed: 5,
        };
        ToyModel::from_params(c.clone(), crate::train::init_params(&c, 5)).unwrap()
    }

    #[test]
    fn static_rung_picks_smallest_fitting_k() {
        let m = toy(6);
        let task = TaskSpec::lookup_default();
        let eval = task.episode_batch(8, 3);
        // 1/1.67 = 0.599: k=2 leaves 4/6 = 0.667 (too dear), k=3 fits.
        let r = static_rung(&m, &eval, TaskKind::KeyValueLookup, 1.67).unwrap();
        assert_eq!(r.k, 3);
        assert!((r.cost_ratio - 0.5).abs() < 1e-12);
        assert_eq!(r.skipped_layers.len(), 3);
        // 1/1.2 = 0.8333...: k=1 leaves exactly 5/6.
        let r = static_rung(&m, &eval, TaskKind::KeyValueLookup, 1.2).unwrap();
        assert_eq!(r.k, 1);
        // Unattainable budget: capped at the L-2 decidable layers.
        let r = static_rung(&m, &eval, TaskKind::KeyValueLookup, 4.0).unwrap();
        assert_eq!(r.k, 4);
        assert!(static_rung(&m, &eval, TaskKind::KeyValueLookup, 0.5).is_err());
    }

    #[test]
    fn ladder_rungs_grow_monotonically() {
        let rungs = ladder_rungs();
        assert_eq!(rungs.len(), 4);
        let sizes: Vec<usize> = rungs.iter().map(|(_, s, _)| s.states().len()).collect();
        assert_eq!(sizes, vec![2, 2, 3, 4]);
        assert!(!rungs[0].2 && rungs[1].2, "compensation turns on at rung 2");
        for (_, s, _) in &rungs {
            assert!(s.contains(LayerState::Full));
        }
    }

    #[test]
    fn derived_cfgs_vary_by_seed_and_are_stable() {
        let sc = ScorerConfig::default();
        let tc = TrainScorerConfig::default();
        let rc = RewardConfig::default();
        let (a1, a2, _) = derive_cfgs(&sc, &tc, StateSet::all(), rc.clone(), 1);
        let (b1, b2, _) = derive_cfgs(&sc, &tc, StateSet::all(), rc.clone(), 2);
        let (c1, c2, _) = derive_cfgs(&sc, &tc, StateSet::all(), rc, 1);
        assert_ne!(a1.seed, b1.seed);
        assert_ne!(a2.episode_seed, b2.episode_seed);
        assert_ne!(a2.sample_seed, b2.sample_seed);
        assert_eq!(a1.seed, c1.seed);
        assert_eq!(a2.sample_seed, c2.sample_seed);
        // episode and sample streams must not collide with each other
        assert_ne!(a2.episode_seed, a2.sample_seed);
    }

    #[test]
    fn bench_csv_schema() {
        let rows = vec![BenchRow {
            method: "full".into(),
            target_ratio: 1.0,
            achieved_ratio: 1.0,
            quality: 0.97,
            seed: 0,
        }];
        let csv = bench_rows_to_csv(&rows);
        assert!(csv.starts_with("method,target_ratio,achieved_ratio,quality,seed\n"));
        assert!(csv.contains("full,1,1,0.97,0"));
    }

    #[test]
    fn train_policy_at_is_deterministic_per_seed() {
        let m = toy(5);
        let task = TaskSpec::lookup_default();
        let scales = ScaleTable::identity(5);
        let inputs = ExperimentInputs {
            model: &m,
            task: &task,
            calibrated: &scales,
            scorer_cfg: ScorerConfig {
                d_l: 4,
                d_1: 8,
                d_2: 8,
                ..ScorerConfig::default()
            },
            reward_cfg: RewardConfig::default(),
            train_cfg: TrainScorerConfig {
                steps: 6,
                batch_size: 2,
                log_every: 100,
                ..TrainScorerConfig::default()
            },
            eval_episodes: 8,
            eval_seed: 900,
        };
        let (s1, e1) = train_policy_at(&inputs, &scales, StateSet::all(), 0.2, 3).unwrap();
        let (s2, e2) = train_policy_at(&inputs, &scales, StateSet::all(), 0.2, 3).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(e1.quality.to_bits(), e2.quality.to_bits());
        assert_eq!(e1.mean_cost_ratio.to_bits(), e2.mean_cost_ratio.to_bits());
        let (s3, _) = train_policy_at(&inputs, &scales, StateSet::all(), 0.2, 4).unwrap();
        assert_ne!(s1, s3, "different seed must move the scorer");
    }
}
