//! Hyperparameter sweep harness: trains each variant on the target task
//! and reports the deterministic nominal-parameter hover accuracy.

use cfb_core::random::RandomizationSpec;
use cfb_core::rng::derive_rng;
use cfb_core::sim::SimConfig;
use cfb_core::ModelParams;
use cfb_learn::policy::{ForwardMode, Policy};
use cfb_learn::ppo::{train, PpoConfig};
use cfb_learn::tasks::{Episode, TaskConfig, TaskKind};
use std::time::Instant;

fn eval_policy(policy: &Policy, task: &TaskConfig, sim: &SimConfig, seed: u64) -> (f64, bool) {
    let mut ep = Episode::new(
        TaskConfig {
            init_half_cube: 0.0,
            init_tilt_deg: 0.0,
            ..task.clone()
        },
        SimConfig {
            seed: 9000 + seed,
            ..sim.clone()
        },
        ModelParams::cfb_guards(),
        RandomizationSpec::train().with_magnitude(0.0),
        derive_rng(9000 + seed, "eval", 0),
    )
    .unwrap();
    let mut rng = derive_rng(17, "eval-act", seed);
    let mut dists = Vec::new();
    let mut failed = false;
    while !ep.is_terminal() {
        let obs = ep.observation();
        let a = policy.act(&obs, ForwardMode::Deterministic, &mut rng).unwrap();
        let r = ep.step(a.u).unwrap();
        if ep.time() >= 5.0 {
            dists.push((ep.state().p - ep.task.target).norm());
        }
        failed |= r.outcome.failure.is_some();
    }
    (
        dists.iter().sum::<f64>() / dists.len().max(1) as f64,
        failed,
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2_000_000);
    let magnitude: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let which: String = args.get(3).cloned().unwrap_or_else(|| "all".into());

    let base = PpoConfig {
        total_steps: steps,
        lr_anneal: false,
        log_std_init: -0.5,
        action_bias_init: 0.0,
        ..PpoConfig::desk()
    };

    let variants: Vec<(&str, PpoConfig, TaskConfig)> = vec![
        ("A-baseline", base.clone(), TaskConfig::target_task()),
        (
            "B-seg16",
            PpoConfig {
                segment_len: 16,
                minibatch: 512,
                ..base.clone()
            },
            TaskConfig::target_task(),
        ),
        (
            "C-gamma97",
            PpoConfig {
                gamma: 0.97,
                ..base.clone()
            },
            TaskConfig::target_task(),
        ),
        (
            "D-bias",
            PpoConfig {
                action_bias_init: 0.2,
                ..base.clone()
            },
            TaskConfig::target_task(),
        ),
        (
            "E-lowstd",
            PpoConfig {
                log_std_init: -1.0,
                ..base.clone()
            },
            TaskConfig::target_task(),
        ),
        (
            "F-bias-lowstd-anneal",
            PpoConfig {
                action_bias_init: 0.2,
                log_std_init: -1.0,
                lr_anneal: true,
                ..base.clone()
            },
            TaskConfig::target_task(),
        ),
        (
            "G-anneal",
            PpoConfig {
                lr_anneal: true,
                ..base.clone()
            },
            TaskConfig::target_task(),
        ),
        (
            "H-epochs8",
            PpoConfig {
                epochs: 8,
                ..base.clone()
            },
            TaskConfig::target_task(),
        ),
    ];

    let sim = SimConfig::default();
    let nominal = ModelParams::cfb_guards();
    let dr = RandomizationSpec::train().with_magnitude(magnitude);

    for (name, cfg, task) in &variants {
        if which != "all" && !name.starts_with(&which) {
            continue;
        }
        let t0 = Instant::now();
        let result = train(task, &nominal, &dr, &sim, cfg, None);
        match result {
            Ok((policy, log)) => {
                let last = log.rows.last().unwrap();
                let mut dists = Vec::new();
                let mut any_fail = false;
                for s in 0..3 {
                    let (d, f) = eval_policy(&policy, task, &sim, s);
                    dists.push(d);
                    any_fail |= f;
                }
                println!(
                    "{name:24} steps {:8}  final_return {:8.1}  fail_rate {:.2}  eval_dist {:.3}/{:.3}/{:.3}  failed={any_fail}  [{:.0?}]",
                    last.env_steps,
                    last.mean_return,
                    last.failure_rate,
                    dists[0],
                    dists[1],
                    dists[2],
                    t0.elapsed()
                );
            }
            Err(e) => println!("{name:24} ERROR {e}"),
        }
    }
    let _ = TaskKind::Target;
}
