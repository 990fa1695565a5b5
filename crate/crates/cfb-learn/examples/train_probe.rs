//! Quick training probe: desk-scale PPO on the target task, then a
//! deterministic nominal-parameter evaluation of hover accuracy.

use cfb_core::random::RandomizationSpec;
use cfb_core::rng::derive_rng;
use cfb_core::sim::SimConfig;
use cfb_core::ModelParams;
use cfb_learn::policy::ForwardMode;
use cfb_learn::ppo::{train, PpoConfig};
use cfb_learn::tasks::{Episode, TaskConfig, TaskKind};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let total_steps: u64 = args
        .get(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1_000_000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let magnitude: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let task = TaskConfig::target_task();
    let sim = SimConfig::default();
    let nominal = ModelParams::cfb_guards();
    let dr = RandomizationSpec::train().with_magnitude(magnitude);
    let cfg = PpoConfig {
        total_steps,
        seed,
        ..PpoConfig::desk()
    };

    let t0 = Instant::now();
    let mut last_print = Instant::now();
    let (policy, log) = train(
        &task,
        &nominal,
        &dr,
        &sim,
        &cfg,
        Some(&mut |p, row| {
            if last_print.elapsed().as_secs_f64() > 5.0 || row.iteration < 3 {
                println!(
                    "iter {:4}  steps {:8}  return {:9.1}  ep_len {:7.1}  fail {:.3}  clip {:.3}  vloss {:9.3}  gnorm {:8.3}  sigma {:.3} [{:.1?}]",
                    row.iteration,
                    row.env_steps,
                    row.mean_return,
                    row.mean_ep_len,
                    row.failure_rate,
                    row.stats.loss.clip_fraction,
                    row.stats.loss.value,
                    row.stats.grad_norm,
                    p.log_std[0].exp(),
                    t0.elapsed()
                );
                last_print = Instant::now();
            }
        }),
    )
    .unwrap();
    let train_time = t0.elapsed();
    println!(
        "trained {} steps in {:.1?} ({:.0} steps/s)",
        log.rows.last().map(|r| r.env_steps).unwrap_or(0),
        train_time,
        log.rows.last().map(|r| r.env_steps).unwrap_or(0) as f64 / train_time.as_secs_f64()
    );

    // Nominal-parameter, noise-on, deterministic evaluation: 10 s hover.
    for eval_seed in 0..3u64 {
        let mut ep = Episode::new(
            TaskConfig {
                init_half_cube: 0.0,
                init_tilt_deg: 0.0,
                ..TaskConfig::for_kind(TaskKind::Target)
            },
            SimConfig {
                seed: 1000 + eval_seed,
                ..sim.clone()
            },
            nominal.clone(),
            RandomizationSpec::train().with_magnitude(0.0),
            derive_rng(1000 + eval_seed, "eval", 0),
        )
        .unwrap();
        let mut rng = derive_rng(0, "eval-act", eval_seed);
        let mut dists = Vec::new();
        let mut failure = None;
        while !ep.is_terminal() {
            let obs = ep.observation();
            let a = policy.act(&obs, ForwardMode::Deterministic, &mut rng).unwrap();
            let r = ep.step(a.u).unwrap();
            if eval_seed == 0 && (ep.time() * 125.0) as usize % 50 == 0 {
                let s = ep.state();
                println!(
                    "  t {:5.2}  z {:6.2}  |v| {:5.2}  |w| {:6.2}  u ({:.2} {:.2} {:.2} {:.2})",
                    ep.time(), s.p.z, s.v.norm(), s.w.norm(),
                    a.u[0], a.u[1], a.u[2], a.u[3]
                );
            }
            if ep.time() >= 5.0 {
                dists.push((ep.state().p - ep.task.target).norm());
            }
            if r.outcome.failure.is_some() {
                failure = r.outcome.failure;
            }
        }
        let mean_dist = dists.iter().sum::<f64>() / dists.len().max(1) as f64;
        println!(
            "eval seed {eval_seed}: died at t={:.2} cause {:?}, mean distance final 5 s = {:.4} m",
            ep.time(),
            failure.map(|f| f.name()),
            mean_dist
        );
    }
}
