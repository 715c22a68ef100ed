//! Command-line entry point: train, verify, ablate, report.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mtgrpo::config::TrainConfig;
use mtgrpo::metrics::{relative_change, steps_to_threshold, MetricsRecord, RunLog};
use mtgrpo::policy::{softmax, PolicyParams};
use mtgrpo::reweight::softmax_weight_gradient;
use mtgrpo::robust::{omega_closed_form, omega_minflow_oracle, simplex_grid};
use mtgrpo::train::{run_training, RunOutcome};

#[derive(Parser)]
#[command(name = "mtgrpo", about = "Multi-task GRPO optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training job and write its metrics stream.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Master seed; defaults to the config's master_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle sweeps and gradient checks; exits nonzero on any failure.
    Verify,
    /// Run a config as-is and with one component disabled, and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        toggle: Toggle,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate metrics across run directories.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    /// Ratio-preserving sampling: fall back to naive one-shot batches.
    Rps,
    /// Acceptance-aware inflation.
    Aas,
    /// Task reweighting: freeze weights at uniform.
    Iwu,
}

/// Per-run manifest written next to the metrics stream.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    method: String,
    seed: u64,
    final_accuracy: Vec<f64>,
    final_z: Vec<f64>,
    final_rho: Vec<f64>,
    aborted: Option<String>,
    config: TrainConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Verify => return cmd_verify(),
        Command::Ablate {
            config,
            toggle,
            seed,
        } => cmd_ablate(&config, toggle, seed),
        Command::Report { runs } => cmd_report(&runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type AnyError = Box<dyn std::error::Error>;

fn write_run(out_dir: &Path, cfg: &TrainConfig, seed: u64, outcome: &RunOutcome) -> Result<(), AnyError> {
    fs::create_dir_all(out_dir)?;
    let mut stream = fs::File::create(out_dir.join("metrics.jsonl"))?;
    for record in &outcome.log {
        serde_json::to_writer(&mut stream, record)?;
        stream.write_all(b"\n")?;
    }
    let manifest = RunManifest {
        method: cfg.method.label().to_string(),
        seed,
        final_accuracy: outcome.final_accuracy.clone(),
        final_z: outcome.final_z.clone(),
        final_rho: outcome.final_rho.clone(),
        aborted: outcome.aborted.clone(),
        config: cfg.clone(),
    };
    fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    // Final summary plus tidy per-step curves for external plotting.
    let mut summary = String::from("task,final_accuracy,final_z,final_rho\n");
    for k in 0..outcome.final_accuracy.len() {
        summary.push_str(&format!(
            "{k},{},{},{}\n",
            outcome.final_accuracy[k], outcome.final_z[k], outcome.final_rho[k]
        ));
    }
    summary.push_str(&format!(
        "all,{},{},\n",
        outcome.final_worst(),
        outcome.final_average()
    ));
    fs::write(out_dir.join("summary.csv"), summary)?;

    let mut curves = String::from("step,task,accuracy,z,rho,batch_reward,improvement\n");
    for r in &outcome.log {
        for k in 0..r.z.len() {
            curves.push_str(&format!(
                "{},{k},{},{},{},{},{}\n",
                r.step, r.per_task_accuracy[k], r.z[k], r.rho[k], r.batch_rewards[k], r.improvements[k]
            ));
        }
    }
    fs::write(out_dir.join("curves.csv"), curves)?;
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), AnyError> {
    let cfg = TrainConfig::from_file(config)?;
    let seed = seed.unwrap_or(cfg.master_seed);
    let outcome = run_training(&cfg, seed)?;
    write_run(out, &cfg, seed, &outcome)?;
    println!(
        "{} seed {seed}: {} steps, worst {:.4}, average {:.4}",
        cfg.method.label(),
        outcome.log.len(),
        outcome.final_worst(),
        outcome.final_average()
    );
    if let Some(reason) = &outcome.aborted {
        println!("aborted early: {reason}");
    }
    Ok(())
}

fn check(name: &str, ok: bool, detail: &str) -> bool {
    println!("[{}] {name}: {detail}", if ok { "pass" } else { "FAIL" });
    ok
}

fn cmd_verify() -> ExitCode {
    let mut all_ok = true;

    // Regularizer: closed form against the min-flow oracle on dense grids.
    let mut max_diff = 0.0f64;
    let mut points = 0usize;
    for k in 2..=4 {
        for z in simplex_grid(k, 20) {
            let a = omega_closed_form(&z).unwrap();
            let b = omega_minflow_oracle(&z).unwrap();
            max_diff = max_diff.max((a - b).abs());
            points += 1;
        }
    }
    all_ok &= check(
        "omega closed form vs min-flow oracle",
        max_diff < 1e-12,
        &format!("{points} grid points, max |diff| = {max_diff:.2e}"),
    );

    // Weight gradient against central finite differences.
    let mut state = 12345u64;
    let mut next = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut worst_rel = 0.0f64;
    for _ in 0..200 {
        let k = 2 + (next() * 5.0) as usize;
        let xi: Vec<f64> = (0..k).map(|_| 4.0 * next() - 2.0).collect();
        let s: Vec<f64> = (0..k).map(|_| 2.0 * next() - 1.0).collect();
        let g = softmax_weight_gradient(&softmax(&xi), &s);
        let h = 1e-6;
        for i in 0..k {
            let mut plus = xi.clone();
            let mut minus = xi.clone();
            plus[i] += h;
            minus[i] -= h;
            let obj = |xi: &[f64]| -> f64 {
                softmax(xi).iter().zip(&s).map(|(z, s)| z * s).sum()
            };
            let fd = (obj(&plus) - obj(&minus)) / (2.0 * h);
            worst_rel = worst_rel.max((g[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    all_ok &= check(
        "softmax weight gradient vs finite differences",
        worst_rel < 1e-6,
        &format!("200 instances, max rel err = {worst_rel:.2e}"),
    );

    // Policy surrogate gradient against finite differences.
    match surrogate_fd_check() {
        Ok(worst) => {
            all_ok &= check(
                "clipped surrogate gradient vs finite differences",
                worst < 1e-5,
                &format!("60 instances, max rel err = {worst:.2e}"),
            );
        }
        Err(e) => {
            all_ok = check("clipped surrogate gradient vs finite differences", false, &e);
        }
    }

    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn surrogate_fd_check() -> Result<f64, String> {
    use mtgrpo::env::{make_task_suite, PromptInstance, TaskSpec};
    use mtgrpo::grpo::{
        accumulate_surrogate_grad, group_advantages, surrogate_at, ClipConfig,
    };
    use mtgrpo::policy::{refresh_current_logps, sample_rollouts, GradBuffer};
    use mtgrpo::rngs::{self, tags};

    let suite = make_task_suite(&[TaskSpec {
        task_id: 0,
        num_prompts: 4,
        answer_len: 2,
        vocab_size: 3,
        valid_format_fraction: 0.6,
        difficulty_seed: 77,
    }])
    .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for seed in 0..30u64 {
        for kl in [0.0, 0.01] {
            let mut rng = rngs::stream_for(seed, tags::ROLLOUT, 0, 0, 0);
            let params = PolicyParams::init(&suite, 0.5, &mut rng);
            let prompt = PromptInstance {
                task_id: 0,
                prompt_id: (seed % 4) as usize,
            };
            let mut group = sample_rollouts(&params, &params, &suite, prompt, 4, &mut rng)
                .map_err(|e| e.to_string())?;
            let correct = suite.correct_answer(prompt).map_err(|e| e.to_string())?;
            group.rewards[0] = 1.0;
            group.answers[0] = correct.clone();
            let wrong = if correct == vec![0, 0] {
                vec![1, 1]
            } else {
                vec![0, 0]
            };
            group.rewards[1] = suite
                .evaluate_reward(prompt, &wrong)
                .map_err(|e| e.to_string())?;
            group.answers[1] = wrong;
            refresh_current_logps(&mut group, &params);
            group.logp_old = group.logp_cur.clone();
            group.logp_ref = group.logp_cur.clone();
            let cfg = ClipConfig {
                kl_coeff: kl,
                ..ClipConfig::default()
            };
            let adv = group_advantages(&group.rewards, &cfg).map_err(|e| e.to_string())?;
            if adv.is_zero_gradient {
                continue;
            }
            let mut grad = GradBuffer::zeros_like(&params);
            accumulate_surrogate_grad(&params, &group, &adv, &cfg, 1.0, &mut grad)
                .map_err(|e| e.to_string())?;
            let flat = grad.flat();
            let h = 1e-6;
            for (i, &gi) in flat.iter().enumerate() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.apply_flat(|j, w| {
                    if j == i {
                        *w += h
                    }
                });
                minus.apply_flat(|j, w| {
                    if j == i {
                        *w -= h
                    }
                });
                let fp = surrogate_at(&plus, &group, &adv, &cfg).map_err(|e| e.to_string())?;
                let fm = surrogate_at(&minus, &group, &adv, &cfg).map_err(|e| e.to_string())?;
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((gi - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    Ok(worst)
}

fn summarize(outcome: &RunOutcome) -> (f64, f64, f64, f64) {
    let n = outcome.log.len().max(1) as f64;
    let rounds = outcome.log.iter().map(|r| r.resample_rounds as f64).sum::<f64>() / n;
    // Mean L1 distance between realized proportions and the step's weights.
    let l1 = outcome
        .log
        .iter()
        .map(|r| {
            r.realized_proportions
                .iter()
                .zip(&r.z)
                .map(|(p, z)| (p - z).abs())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    (outcome.final_worst(), outcome.final_average(), rounds, l1)
}

fn cmd_ablate(config: &Path, toggle: Toggle, seed: Option<u64>) -> Result<(), AnyError> {
    let cfg = TrainConfig::from_file(config)?;
    let seed = seed.unwrap_or(cfg.master_seed);
    let mut variant = cfg.clone();
    let name = match toggle {
        Toggle::Rps => {
            variant.sampler.enforce_ratios = false;
            variant.sampler.aas_enabled = false;
            variant.sampler.oversample_factor = 1;
            variant.sampler.max_resamples = 0;
            "ratio-preserving sampling"
        }
        Toggle::Aas => {
            variant.sampler.aas_enabled = false;
            "acceptance-aware inflation"
        }
        Toggle::Iwu => {
            variant.reweight.mode = mtgrpo::reweight::ReweightMode::FixedUniform;
            "task reweighting"
        }
    };
    let base = run_training(&cfg, seed)?;
    let ablated = run_training(&variant, seed)?;
    let (bw, ba, br, bl) = summarize(&base);
    let (aw, aa, ar, al) = summarize(&ablated);
    println!("ablation: {name} off (method {}, seed {seed})", cfg.method.label());
    println!("run,worst_acc,avg_acc,mean_resample_rounds,mean_l1_proportion_gap");
    println!("with,{bw:.4},{ba:.4},{br:.3},{bl:.4}");
    println!("without,{aw:.4},{aa:.4},{ar:.3},{al:.4}");
    Ok(())
}

fn load_run(dir: &Path) -> Result<(RunManifest, RunLog), AnyError> {
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)?;
    let mut log = Vec::new();
    for line in fs::read_to_string(dir.join("metrics.jsonl"))?.lines() {
        if !line.trim().is_empty() {
            let record: MetricsRecord = serde_json::from_str(line)?;
            log.push(record);
        }
    }
    Ok((manifest, log))
}

const THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

fn cmd_report(runs: &Path) -> Result<(), AnyError> {
    let mut by_method: BTreeMap<String, Vec<(RunManifest, RunLog)>> = BTreeMap::new();
    for entry in fs::read_dir(runs)? {
        let dir = entry?.path();
        if dir.is_dir() && dir.join("run.json").exists() {
            let (manifest, log) = load_run(&dir)?;
            by_method.entry(manifest.method.clone()).or_default().push((manifest, log));
        }
    }
    if by_method.is_empty() {
        return Err(format!("no run directories under {}", runs.display()).into());
    }

    let mean_acc = |runs: &[(RunManifest, RunLog)]| -> Vec<f64> {
        let k = runs[0].0.final_accuracy.len();
        let mut acc = vec![0.0; k];
        for (m, _) in runs {
            for (a, x) in acc.iter_mut().zip(&m.final_accuracy) {
                *a += x;
            }
        }
        acc.iter().map(|a| a / runs.len() as f64).collect()
    };
    // The dynamic-sampling uniform baseline is the reference for relative change.
    let baseline = by_method.get("dapo-uniform").map(|r| mean_acc(r));

    let mut table = String::from(
        "method,runs,worst_acc,avg_acc,delta_m_pct,steps_to_0.3,steps_to_0.5,steps_to_0.7,steps_to_0.9\n",
    );
    for (method, entries) in &by_method {
        let acc = mean_acc(entries);
        let worst = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        let avg = acc.iter().sum::<f64>() / acc.len() as f64;
        let delta = match &baseline {
            Some(base) if base.len() == acc.len() => match relative_change(&acc, base) {
                Ok(rc) => {
                    let mut s = format!("{:.2}", rc.percent);
                    if !rc.excluded_tasks.is_empty() {
                        s.push_str(&format!(" (excluded {:?})", rc.excluded_tasks));
                    }
                    s
                }
                Err(_) => "n/a".to_string(),
            },
            _ => "n/a".to_string(),
        };
        let steps: Vec<String> = THRESHOLDS
            .iter()
            .map(|&t| {
                // Seed-mean over runs that reached the threshold; mark not-reached.
                let reached: Vec<u64> = entries
                    .iter()
                    .filter_map(|(_, log)| steps_to_threshold(log, t))
                    .collect();
                if reached.len() == entries.len() {
                    format!(
                        "{:.1}",
                        reached.iter().sum::<u64>() as f64 / reached.len() as f64
                    )
                } else {
                    "not-reached".to_string()
                }
            })
            .collect();
        table.push_str(&format!(
            "{method},{},{worst:.4},{avg:.4},{delta},{}\n",
            entries.len(),
            steps.join(",")
        ));
    }
    print!("{table}");
    fs::write(runs.join("report.csv"), table)?;
    Ok(())
}
