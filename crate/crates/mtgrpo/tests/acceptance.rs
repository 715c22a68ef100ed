//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Criteria 1-4 are exact-oracle checks (closed forms, finite differences,
//! bit-exactness), 5-6 are sampler statistics against a synthetic acceptance
//! oracle, 7-9 reproduce qualitative training dynamics from checked-in
//! configs, and 10 pins determinism of the metrics stream. Tolerances are
//! frozen as constants next to each criterion.

use mtgrpo::config::TrainConfig;
use mtgrpo::env::{make_task_suite, PromptInstance, TaskSpec};
use mtgrpo::grpo::{
    accumulate_surrogate_grad, group_advantages, surrogate_at, ClipConfig,
};
use mtgrpo::policy::{refresh_current_logps, sample_rollouts, softmax, GradBuffer, PolicyParams};
use mtgrpo::reweight::softmax_weight_gradient;
use mtgrpo::robust::{omega_closed_form, omega_minflow_oracle, simplex_grid};
use mtgrpo::rngs::{self, tags};
use mtgrpo::sampler::{rp_sample, FilterPolicy, FilterStats, OracleSource, SamplerConfig};
use mtgrpo::train::{run_training, RunOutcome};

use std::path::PathBuf;

fn report(criterion: &str, ok: bool, detail: &str) {
    println!("[{}] {criterion}: {detail}", if ok { "pass" } else { "FAIL" });
    assert!(ok, "{criterion}: {detail}");
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn load_config(name: &str) -> TrainConfig {
    TrainConfig::from_file(&config_path(name)).expect("checked-in config must parse")
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn seed_runs(cfg: &TrainConfig) -> Vec<RunOutcome> {
    SEEDS
        .iter()
        .map(|&s| run_training(cfg, s).expect("training run failed"))
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// Cheap deterministic uniforms for finite-difference instance generation.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

// --- Criterion 1: regularizer closed form equals the min-flow oracle. ---

const OMEGA_TOL: f64 = 1e-12;

#[test]
fn criterion_01_omega_closed_form_equals_minflow_oracle() {
    let mut max_diff = 0.0f64;
    let mut points = 0usize;
    // n = 20 grid subdivisions <=> step 0.05 on the simplex.
    for k in 2..=4 {
        for z in simplex_grid(k, 20) {
            let closed = omega_closed_form(&z).unwrap();
            let flow = omega_minflow_oracle(&z).unwrap();
            max_diff = max_diff.max((closed - flow).abs());
            points += 1;
        }
    }
    report(
        "criterion 1, regularizer equivalence",
        max_diff < OMEGA_TOL,
        &format!("{points} grid points K=2..4, max |closed - minflow| = {max_diff:.2e}"),
    );
}

// --- Criterion 2: softmax weight gradient vs central finite differences. ---

const WEIGHT_GRAD_TOL: f64 = 1e-6;
const WEIGHT_GRAD_INSTANCES: usize = 120;

#[test]
fn criterion_02_weight_gradient_matches_finite_differences() {
    let mut lcg = Lcg(0x9e3779b97f4a7c15);
    let mut worst_rel = 0.0f64;
    let mut instances = 0usize;
    // Cycle through the three signal families the reweighters use:
    // reward-only (strict), improvement + lambda * reward (IWU), and the
    // IWU signal with a ridge term on the logits (regularized).
    for i in 0..WEIGHT_GRAD_INSTANCES {
        let k = 2 + (lcg.next() * 5.0) as usize;
        let xi: Vec<f64> = (0..k).map(|_| 4.0 * lcg.next() - 2.0).collect();
        let rewards: Vec<f64> = (0..k).map(|_| lcg.next()).collect();
        let improvements: Vec<f64> = (0..k).map(|_| 0.2 * lcg.next() - 0.1).collect();
        let lambda = 0.5 * lcg.next();
        let eta = if i % 3 == 2 { 0.1 } else { 0.0 };
        let s: Vec<f64> = match i % 3 {
            0 => rewards.clone(),
            _ => improvements
                .iter()
                .zip(&rewards)
                .map(|(i, r)| i + lambda * r)
                .collect(),
        };
        let grad: Vec<f64> = softmax_weight_gradient(&softmax(&xi), &s)
            .iter()
            .zip(&xi)
            .map(|(g, x)| g + eta * x)
            .collect();
        let obj = |xi: &[f64]| -> f64 {
            let lin: f64 = softmax(xi).iter().zip(&s).map(|(z, s)| z * s).sum();
            lin + 0.5 * eta * xi.iter().map(|x| x * x).sum::<f64>()
        };
        let h = 1e-6;
        for j in 0..k {
            let mut plus = xi.clone();
            let mut minus = xi.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd = (obj(&plus) - obj(&minus)) / (2.0 * h);
            worst_rel = worst_rel.max((grad[j] - fd).abs() / fd.abs().max(1.0));
        }
        instances += 1;
    }
    report(
        "criterion 2, weight gradient",
        instances >= 100 && worst_rel < WEIGHT_GRAD_TOL,
        &format!("{instances} instances, max rel err = {worst_rel:.2e}"),
    );
}

// --- Criterion 3: clipped surrogate gradient vs finite differences. ---

const SURROGATE_TOL: f64 = 1e-5;

#[test]
fn criterion_03_surrogate_gradient_matches_finite_differences() {
    let suite = make_task_suite(&[TaskSpec {
        task_id: 0,
        num_prompts: 4,
        answer_len: 2,
        vocab_size: 3,
        valid_format_fraction: 0.6,
        difficulty_seed: 77,
    }])
    .unwrap();
    let mut worst = 0.0f64;
    let mut instances = 0usize;
    for seed in 0..30u64 {
        for kl in [0.0, 0.01] {
            let mut rng = rngs::stream_for(seed, tags::ROLLOUT, 0, 0, 0);
            let params = PolicyParams::init(&suite, 0.5, &mut rng);
            let prompt = PromptInstance {
                task_id: 0,
                prompt_id: (seed % 4) as usize,
            };
            let mut group = sample_rollouts(&params, &params, &suite, prompt, 4, &mut rng).unwrap();
            // Force one fully correct and one wrong rollout so the group is
            // never zero-gradient and both clip branches get exercised.
            let correct = suite.correct_answer(prompt).unwrap();
            group.rewards[0] = 1.0;
            group.answers[0] = correct.clone();
            let wrong = if correct == vec![0, 0] { vec![1, 1] } else { vec![0, 0] };
            group.rewards[1] = suite.evaluate_reward(prompt, &wrong).unwrap();
            group.answers[1] = wrong;
            refresh_current_logps(&mut group, &params);
            group.logp_old = group.logp_cur.clone();
            group.logp_ref = group.logp_cur.clone();
            let cfg = ClipConfig { kl_coeff: kl, ..ClipConfig::default() };
            let adv = group_advantages(&group.rewards, &cfg).unwrap();
            assert!(!adv.is_zero_gradient);
            let mut grad = GradBuffer::zeros_like(&params);
            accumulate_surrogate_grad(&params, &group, &adv, &cfg, 1.0, &mut grad).unwrap();
            let flat = grad.flat();
            let h = 1e-6;
            for (i, &gi) in flat.iter().enumerate() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.apply_flat(|j, w| if j == i { *w += h });
                minus.apply_flat(|j, w| if j == i { *w -= h });
                let fp = surrogate_at(&plus, &group, &adv, &cfg).unwrap();
                let fm = surrogate_at(&minus, &group, &adv, &cfg).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((gi - fd).abs() / fd.abs().max(1.0));
            }
            instances += 1;
        }
    }
    report(
        "criterion 3, surrogate gradient",
        instances >= 50 && worst < SURROGATE_TOL,
        &format!("{instances} instances, kl in {{0, 0.01}}, max rel err = {worst:.2e}"),
    );
}

// --- Criterion 4: constant-reward groups contribute exactly nothing. ---

#[test]
fn criterion_04_zero_gradient_groups_are_bit_exact_noops() {
    let suite = make_task_suite(&[TaskSpec {
        task_id: 0,
        num_prompts: 4,
        answer_len: 2,
        vocab_size: 3,
        valid_format_fraction: 1.0,
        difficulty_seed: 5,
    }])
    .unwrap();
    let cfg = ClipConfig::default();
    let mut ok = true;
    let mut checked = 0usize;
    for seed in 0..20u64 {
        let mut rng = rngs::stream_for(seed, tags::ROLLOUT, 1, 0, 0);
        let params = PolicyParams::init(&suite, 0.7, &mut rng);
        let prompt = PromptInstance { task_id: 0, prompt_id: (seed % 4) as usize };
        let mut group = sample_rollouts(&params, &params, &suite, prompt, 4, &mut rng).unwrap();
        // Make the rewards constant while keeping realistic rollouts.
        let r0 = group.rewards[0];
        for r in &mut group.rewards {
            *r = r0;
        }
        let adv = group_advantages(&group.rewards, &cfg).unwrap();
        ok &= adv.is_zero_gradient;
        ok &= adv.values.iter().all(|&a| a.to_bits() == 0.0f64.to_bits());

        // Pre-fill the buffer with a real gradient, then check the constant
        // group leaves every accumulated value bit-identical.
        let mut mixed = sample_rollouts(&params, &params, &suite, prompt, 4, &mut rng).unwrap();
        mixed.rewards = vec![1.0, 0.0, 0.0, 0.0];
        let mixed_adv = group_advantages(&mixed.rewards, &cfg).unwrap();
        let mut grad = GradBuffer::zeros_like(&params);
        accumulate_surrogate_grad(&params, &mixed, &mixed_adv, &cfg, 1.0, &mut grad).unwrap();
        let before: Vec<u64> = grad.flat().iter().map(|x| x.to_bits()).collect();
        accumulate_surrogate_grad(&params, &group, &adv, &cfg, 1.0, &mut grad).unwrap();
        let after: Vec<u64> = grad.flat().iter().map(|x| x.to_bits()).collect();
        ok &= before == after;
        checked += 1;
    }
    report(
        "criterion 4, zero-gradient exactness",
        ok && checked == 20,
        &format!("{checked} constant-reward groups: zero advantages and bit-identical gradient buffers"),
    );
}

// --- Criteria 5 and 6: sampler statistics on the acceptance oracle. ---

const RP_PROPORTION_TOL: f64 = 0.03;
const NAIVE_DRIFT_MIN: f64 = 0.08;

fn oracle_cfg() -> SamplerConfig {
    SamplerConfig {
        batch_size: 64,
        group_size: 2,
        oversample_factor: 3,
        max_resamples: 10,
        max_inflation: 5.0,
        ema_decay: 0.9,
        filter: FilterPolicy::Strict,
        aas_enabled: true,
        enforce_ratios: true,
    }
}

fn mean_proportion_task0(cfg: &SamplerConfig, accept: [f64; 2], seed: u64, batches: u64) -> f64 {
    let mut stats = FilterStats::new(2, cfg.ema_decay);
    let mut frac = 0.0;
    for step in 0..batches {
        let source = OracleSource { accept_probs: accept.to_vec(), master_seed: seed, step };
        let b = rp_sample(&source, &[0.5, 0.5], cfg, &mut stats, seed, step).unwrap();
        let total: usize = b.per_task_counts.iter().sum();
        frac += b.per_task_counts[0] as f64 / total as f64;
    }
    frac / batches as f64
}

#[test]
fn criterion_05_ratio_preservation_vs_naive_sampling() {
    // K = 2, acceptance (1.0, 0.5), z = (0.5, 0.5), B = 64, 200 batches.
    let rp = mean_proportion_task0(&oracle_cfg(), [1.0, 0.5], 10, 200);
    let naive_cfg = SamplerConfig {
        oversample_factor: 1,
        max_resamples: 0,
        aas_enabled: false,
        enforce_ratios: false,
        ..oracle_cfg()
    };
    let naive = mean_proportion_task0(&naive_cfg, [1.0, 0.5], 11, 200);
    report(
        "criterion 5, ratio preservation",
        (rp - 0.5).abs() < RP_PROPORTION_TOL && naive - 0.5 > NAIVE_DRIFT_MIN,
        &format!(
            "rp mean proportion {rp:.4} (target 0.5 +/- {RP_PROPORTION_TOL}), naive {naive:.4} (drift > {NAIVE_DRIFT_MIN})"
        ),
    );
}

#[test]
fn criterion_06_acceptance_aware_inflation_reduces_resampling() {
    // Same sampler constants; acceptance lowered to (1.0, 0.25) so that
    // resampling rounds actually occur — at (1.0, 0.5) the 3x oversampling
    // buffer alone covers the deficit and both arms measure zero rounds.
    let mean_rounds = |cfg: &SamplerConfig, seed: u64| -> f64 {
        let mut stats = FilterStats::new(2, cfg.ema_decay);
        let batches = 100u64;
        let mut rounds = 0usize;
        for step in 0..batches {
            let source = OracleSource {
                accept_probs: vec![1.0, 0.25],
                master_seed: seed,
                step,
            };
            let b = rp_sample(&source, &[0.5, 0.5], cfg, &mut stats, seed, step).unwrap();
            rounds += b.resample_rounds_used;
        }
        rounds as f64 / batches as f64
    };
    let with_aas = mean_rounds(&oracle_cfg(), 20);
    let without = mean_rounds(&SamplerConfig { aas_enabled: false, ..oracle_cfg() }, 20);
    report(
        "criterion 6, acceptance-aware efficiency",
        with_aas < without,
        &format!("mean resample rounds over 100 batches: {with_aas:.3} with inflation vs {without:.3} without"),
    );
}

// --- Criterion 7: reward-only collapse vs improvement-aware stability. ---

const COLLAPSE_MAX_Z: f64 = 0.95;
const IWU_MAX_Z: f64 = 0.8;

fn peak_weight(outcome: &RunOutcome) -> f64 {
    outcome
        .log
        .iter()
        .flat_map(|r| r.z.iter().copied())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_07_strict_collapses_and_iwu_does_not() {
    let strict_cfg = load_config("collapse_strict.toml");
    let iwu_cfg = load_config("collapse_iwu.toml");
    assert_eq!(strict_cfg.total_steps, 200);
    let strict_peak = mean(seed_runs(&strict_cfg).iter().map(peak_weight), SEEDS.len());
    let iwu_peak = mean(seed_runs(&iwu_cfg).iter().map(peak_weight), SEEDS.len());
    report(
        "criterion 7, collapse reproduction",
        strict_peak > COLLAPSE_MAX_Z && iwu_peak < IWU_MAX_Z,
        &format!(
            "seed-mean peak weight over 200 steps: strict {strict_peak:.4} (> {COLLAPSE_MAX_Z}), iwu lambda=0.2 {iwu_peak:.4} (< {IWU_MAX_Z})"
        ),
    );
}

// --- Criterion 8: worst-task improvement at a fixed step budget. ---

const WORST_GAIN_MIN: f64 = 0.05;
const AVG_GAP_MAX: f64 = 0.03;

#[test]
fn criterion_08_iwu_beats_uniform_on_worst_task() {
    let iwu = seed_runs(&load_config("desk3_iwu.toml"));
    let grpo = seed_runs(&load_config("desk3_grpo.toml"));
    let dapo = seed_runs(&load_config("desk3_dapo.toml"));
    let sec = seed_runs(&load_config("desk3_sec.toml"));
    let n = SEEDS.len();
    let iwu_worst = mean(iwu.iter().map(RunOutcome::final_worst), n);
    let grpo_worst = mean(grpo.iter().map(RunOutcome::final_worst), n);
    let iwu_avg = mean(iwu.iter().map(RunOutcome::final_average), n);
    let best_baseline_avg = [&grpo, &dapo, &sec]
        .iter()
        .map(|runs| mean(runs.iter().map(RunOutcome::final_average), n))
        .fold(0.0, f64::max);
    report(
        "criterion 8, worst-task improvement",
        iwu_worst >= grpo_worst + WORST_GAIN_MIN && iwu_avg >= best_baseline_avg - AVG_GAP_MAX,
        &format!(
            "seed-mean worst: iwu {iwu_worst:.4} vs grpo-uniform {grpo_worst:.4} (gain >= {WORST_GAIN_MIN}); seed-mean avg: iwu {iwu_avg:.4} vs best baseline {best_baseline_avg:.4} (gap <= {AVG_GAP_MAX})"
        ),
    );
}

// --- Criterion 9: lambda trade-off direction on the 6-task ladder. ---

const LAMBDA_INVERSION_TOL: f64 = 0.01;

#[test]
fn criterion_09_lambda_trades_average_for_worst() {
    let mut worsts = Vec::new();
    let mut avgs = Vec::new();
    for name in ["lambda6_01.toml", "lambda6_03.toml", "lambda6_09.toml"] {
        let runs = seed_runs(&load_config(name));
        worsts.push(mean(runs.iter().map(RunOutcome::final_worst), SEEDS.len()));
        avgs.push(mean(runs.iter().map(RunOutcome::final_average), SEEDS.len()));
    }
    let worst_monotone = worsts.windows(2).all(|w| w[1] >= w[0]);
    // Average accuracy must be non-increasing, allowing one inversion within
    // noise tolerance.
    let inversions: Vec<f64> = avgs
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| w[1] - w[0])
        .collect();
    let avg_ok = inversions.is_empty()
        || (inversions.len() == 1 && inversions[0] < LAMBDA_INVERSION_TOL);
    report(
        "criterion 9, lambda trade-off",
        worst_monotone && avg_ok,
        &format!(
            "lambda in {{0.1, 0.3, 0.9}}: seed-mean worst {worsts:.4?} non-decreasing, seed-mean avg {avgs:.4?} non-increasing"
        ),
    );
}

// --- Criterion 10: identical config and seed give identical streams. ---

#[test]
fn criterion_10_metrics_stream_is_deterministic() {
    let cfg = load_config("lambda6_03.toml");
    let serialize = |outcome: &RunOutcome| -> Vec<String> {
        outcome
            .log
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect()
    };
    let a = serialize(&run_training(&cfg, 9).unwrap());
    let b = serialize(&run_training(&cfg, 9).unwrap());
    report(
        "criterion 10, determinism",
        a == b && !a.is_empty(),
        &format!("{} metrics records, streams byte-identical", a.len()),
    );
}
