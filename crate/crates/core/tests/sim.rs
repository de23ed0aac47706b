use disc::lang::Task;
use disc::par::{map_indexed, Exec};
use disc::sim::{env_reset, env_step, expert_action, run_episode, EnvConfig, Layout};
use proptest::prelude::*;

fn correlated() -> EnvConfig {
    EnvConfig { layout: Layout::Correlated, ..EnvConfig::default() }
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Critical value at significance 0.001.
fn ks_critical(n: usize, m: usize) -> f64 {
    1.949 * ((n + m) as f64 / (n * m) as f64).sqrt()
}

#[test]
fn expert_solves_every_reset() {
    for env in [EnvConfig::default(), correlated()] {
        for task in env.tasks() {
            let ok = map_indexed(Exec::Parallel, 1000, |s| {
                let state = env_reset(&env, task, s as u64).unwrap();
                let out = run_episode(&env, task, state, |st, _| expert_action(&env, st, task), |_, _| {});
                out.success && out.first_placement == Some((task.object, task.container))
            });
            assert!(ok.iter().all(|&b| b), "{:?} {task:?}: {} failures", env.layout, ok.iter().filter(|b| !**b).count());
        }
    }
}

fn object_x(env: &EnvConfig, task: Task, seeds: std::ops::Range<u64>) -> Vec<f64> {
    seeds.map(|s| env_reset(env, task, s).unwrap().objects[task.object][0]).collect()
}

#[test]
fn decorrelated_layout_carries_no_task_signal() {
    let env = EnvConfig::default();
    let (a, b) = (Task::new(0, 0), Task::new(0, 2));
    let xa = object_x(&env, a, 0..2000);
    let xb = object_x(&env, b, 5000..7000);
    let d = ks(xa, xb);
    assert!(d < ks_critical(2000, 2000), "D = {d}");

    let env = correlated();
    let d = ks(object_x(&env, a, 0..2000), object_x(&env, b, 5000..7000));
    assert!(d > ks_critical(2000, 2000), "D = {d}");
}

#[test]
fn correlated_layout_spread_matches_sigma() {
    let env = correlated();
    for task in env.tasks() {
        let anchor = env.anchor(task);
        let n = 3000;
        let mut ss = [0.0; 2];
        for s in 0..n {
            let p = env_reset(&env, task, s).unwrap().objects[task.object];
            ss[0] += (p[0] - anchor[0]).powi(2);
            ss[1] += (p[1] - anchor[1]).powi(2);
        }
        for v in ss {
            let var = v / n as f64;
            let ratio = var / env.sigma_layout.powi(2);
            assert!((0.85..1.15).contains(&ratio), "{task:?}: variance ratio {ratio}");
        }
    }
}

proptest! {
    #[test]
    fn resets_keep_entities_apart(seed in any::<u64>(), k in 0usize..3, j in 0usize..3, corr in any::<bool>()) {
        let env = if corr { correlated() } else { EnvConfig::default() };
        let s = env_reset(&env, Task::new(k, j), seed).unwrap();
        let pts: Vec<[f64; 2]> = std::iter::once(s.agent).chain(s.objects.clone()).chain(s.containers.clone()).chain(s.distractors.clone()).collect();
        for (i, p) in pts.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
            for q in &pts[i + 1..] {
                prop_assert!(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= 2.0 * env.delta_place);
            }
        }
    }

    #[test]
    fn arbitrary_actions_keep_the_scene_valid(
        seed in any::<u64>(),
        actions in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..60),
    ) {
        let env = EnvConfig::default();
        let mut s = env_reset(&env, Task::new(1, 1), seed).unwrap();
        for a in actions {
            let next = env_step(&env, &s, &a);
            let moved = ((next.agent[0] - s.agent[0]).abs(), (next.agent[1] - s.agent[1]).abs());
            prop_assert!(moved.0 <= env.a_max + 1e-12 && moved.1 <= env.a_max + 1e-12);
            prop_assert_eq!(next.step, s.step + 1);
            let obs = next.observe();
            prop_assert_eq!(obs.len(), env.obs_dim());
            prop_assert!(obs.iter().all(|v| (-1.0..=1.0).contains(v)));
            if let Some(c) = next.carrying {
                prop_assert_eq!(next.objects[c], next.agent);
            }
            prop_assert!(s.first_placement.is_none() || next.first_placement == s.first_placement);
            s = next;
        }
    }
}
