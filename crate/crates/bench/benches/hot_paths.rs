use std::sync::Arc;

use asap_bench::{desk_policy, instances};
use asap_core::baselines::{brute_force_oracle, greedy_heuristic};
use asap_core::env::EnvState;
use asap_core::policy::DecodeMode;
use asap_core::rng::Rng;
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

fn env_episode(c: &mut Criterion) {
    let insts = instances(20, 64, 11);
    c.bench_function("env/episode_64x20_first_feasible", |b| {
        b.iter_batched(
            || EnvState::reset_batch(insts.clone(), 20, 10.0).unwrap(),
            |mut st| {
                st.apply_pomo_starts().unwrap();
                while !st.all_done() {
                    let actions: Vec<usize> = st
                        .feasible_actions()
                        .chunks(st.num_nodes())
                        .map(|f| f.iter().position(|&ok| ok).unwrap_or(0))
                        .collect();
                    st.step_mut(&actions).unwrap();
                }
                black_box(st)
            },
            BatchSize::SmallInput,
        )
    });
}

fn policy(c: &mut Criterion) {
    let net = desk_policy();
    let insts = instances(10, 16, 21);
    let refs: Vec<&_> = insts.iter().map(|i| i.as_ref()).collect();
    c.bench_function("policy/encode_16x10", |b| b.iter(|| black_box(net.encode(&refs).unwrap())));
    c.bench_function("policy/greedy_rollout_16x10", |b| {
        let mut rng = Rng::seed_from_u64(0);
        b.iter(|| {
            black_box(
                net.rollout_episode(insts.clone(), 10.0, DecodeMode::Greedy, &mut rng, None, false)
                    .unwrap(),
            )
        })
    });
}

fn solvers(c: &mut Criterion) {
    let inst = Arc::clone(&instances(7, 1, 31)[0]);
    c.bench_function("solvers/greedy_n7", |b| b.iter(|| black_box(greedy_heuristic(&inst, 10.0).unwrap())));
    let mut g = c.benchmark_group("solvers/oracle");
    g.sample_size(10);
    g.bench_function("n7", |b| b.iter(|| black_box(brute_force_oracle(&inst, 10.0).unwrap())));
    g.finish();
}

criterion_group!(benches, env_episode, policy, solvers);
criterion_main!(benches);
