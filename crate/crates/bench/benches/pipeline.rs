use criterion::{criterion_group, criterion_main, Criterion};
use kpirl::costs::{CostFamily, CostLayout};
use kpirl::irl::irl_loss_and_gradient;
use kpirl::planner::{optimize_actions, Objective, PlanConfig};
use kpirl_bench::{ground_truth, mlp, reaching_target, HORIZON};
use std::hint::black_box;

fn planning(c: &mut Criterion) {
    let target = reaching_target();
    let config = PlanConfig {
        alpha: 1e-4,
        iters: 50,
        backtracking: false,
    };
    let mut group = c.benchmark_group("plan_50_iters");
    group.sample_size(10);
    for (name, model) in [("ground_truth", ground_truth()), ("mlp", mlp())] {
        group.bench_function(name, |b| {
            b.iter(|| {
                optimize_actions(
                    &model,
                    &target.start,
                    target.goal_xy(),
                    Objective::Default,
                    &config,
                    HORIZON,
                    None,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bilevel_gradient(c: &mut Criterion) {
    let target = reaching_target();
    let model = ground_truth();
    let mut group = c.benchmark_group("irl_gradient_one_demo");
    group.sample_size(10);
    for family in CostFamily::ALL {
        let layout = CostLayout::new(family, target.k(), HORIZON, 5).unwrap();
        let psi = vec![1.0; layout.len()];
        group.bench_function(family.tag(), |b| {
            b.iter(|| irl_loss_and_gradient(&model, &layout, black_box(&psi), &target, 1e-4, 50, true).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, planning, bilevel_gradient);
criterion_main!(benches);
