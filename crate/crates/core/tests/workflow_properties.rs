use proptest::prelude::*;

use flashdp::bench::run_cell;
use flashdp::bench::MicroBatch;
use flashdp::dpcore::keyed_gaussian;
use flashdp::memmodel::MemSim;
use flashdp::oracle::{dp_backward_reference, per_sample_norms_sq_naive};
use flashdp::tensor::Tensor;
use flashdp::tiling::feasible_chain_plans;
use flashdp::workflows::{backward_flashdp, backward_flashdp_with, run_workflow_with_plan, BlockOrder, FlashOptions};
use flashdp::{BlockPlan, DPConfig, LayerDims, MemSpec, Reduction, WorkflowKind};

const W: u64 = 8;

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

/// Dims, inputs, and a plan with arbitrary tile extents.
fn instance() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, BlockPlan, MemSpec)> {
    (1usize..=4, 1usize..=4, 1usize..=8, 1usize..=8)
        .prop_flat_map(|(b, t, p, d)| {
            (
                Just((b, t, p, d)),
                prop::collection::vec(-1.0f64..=1.0, b * t * p),
                prop::collection::vec(-1.0f64..=1.0, b * t * d),
                (1..=b, 1..=t, 1..=d, 1..=p),
            )
        })
        .prop_map(|((b, t, p, d), xs, ys, (tb, tt, td, tp))| {
            let dims = LayerDims::new(b, t, p, d).unwrap();
            let plan = BlockPlan::from_tiles(dims, tb, tt, td, tp).unwrap();
            let spec = MemSpec::with_elements(plan.footprint(), W).unwrap();
            (tensor(vec![b, t, p], xs), tensor(vec![b, t, d], ys), plan, spec)
        })
}

fn dp_config() -> impl Strategy<Value = DPConfig> {
    (prop::sample::select(vec![0.1, 1.0, 10.0, 1e9]), prop::sample::select(vec![0.0, 1.0]), any::<bool>(), any::<u64>())
        .prop_map(|(c, s, mean, seed)| {
            let r = if mean { Reduction::Mean } else { Reduction::Sum };
            DPConfig::new(c, s, r, seed).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn block_order_does_not_change_the_result((x, dy, plan, spec) in instance(), cfg in dp_config(), shuffle in any::<u64>()) {
        let base = backward_flashdp(&x, &dy, &cfg, &plan, spec).unwrap();
        for order in [BlockOrder::Reversed, BlockOrder::Shuffled(shuffle)] {
            let opts = FlashOptions { block_order: order, ..FlashOptions::default() };
            let r = backward_flashdp_with(&x, &dy, &cfg, &plan, spec, opts).unwrap();
            prop_assert!(r.grad_w.max_abs_diff(&base.grad_w).unwrap() <= 1e-12);
            prop_assert_eq!(r.report, base.report);
        }
    }

    #[test]
    fn per_sample_norms_match_the_oracle((x, dy, plan, spec) in instance(), cfg in dp_config()) {
        let want = per_sample_norms_sq_naive(&x, &dy).unwrap();
        for kind in [WorkflowKind::ExplicitDp, WorkflowKind::ImplicitDp, WorkflowKind::FlashDp] {
            let got = run_workflow_with_plan(kind, &x, &dy, &cfg, &plan, spec).unwrap().per_sample_norms_sq;
            prop_assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-12, "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn flashdp_traffic_ledger((x, dy, plan, spec) in instance(), cfg in dp_config()) {
        let r = backward_flashdp(&x, &dy, &cfg, &plan, spec).unwrap();
        let (b, t, p, d) = (x.shape()[0] as u64, x.shape()[1] as u64, x.shape()[2] as u64, dy.shape()[2] as u64);
        let blocks = (plan.n_d * plan.n_p) as u64;
        let n_b = plan.n_b as u64;
        let input = b * t * (p * plan.n_d as u64 + d * plan.n_p as u64) * W;
        // every block stores and reloads its samples' norm² once
        let norm_traffic = blocks * b * W;
        let (extra_loads, grad_stores, barriers) = if n_b == 1 {
            (0, d * p * W, 1)
        } else {
            // partial sums per chunk, then the closing reload and store
            (d * p * W, (n_b + 1) * d * p * W, n_b + 1)
        };
        prop_assert_eq!(r.input_bytes_loaded, input);
        prop_assert_eq!(r.report.bytes_loaded, input + norm_traffic + extra_loads);
        prop_assert_eq!(r.report.bytes_stored, norm_traffic + grad_stores);
        prop_assert_eq!(r.report.kernel_launches, n_b);
        prop_assert_eq!(r.report.barriers, barriers);
        prop_assert_eq!(r.report.per_sample_grad_bytes_stored, 0);
        prop_assert_eq!(r.report.redundant_flops, 0);
        prop_assert!(r.report.peak_scratch_bytes <= spec.scratchpad_capacity_bytes);
    }

    #[test]
    fn implicit_loads_inputs_twice_as_often_as_flashdp((x, dy, plan, spec) in instance(), cfg in dp_config()) {
        let flash = backward_flashdp(&x, &dy, &cfg, &plan, spec).unwrap();
        let implicit = run_workflow_with_plan(WorkflowKind::ImplicitDp, &x, &dy, &cfg, &plan, spec).unwrap();
        prop_assert_eq!(implicit.input_bytes_loaded, 2 * flash.input_bytes_loaded);
    }

    #[test]
    fn atomic_accumulation_ignores_participant_order(
        values in prop::collection::vec(-1e3f64..1e3, 1..=5).prop_shuffle(),
    ) {
        // integer-valued so every summation order is exact
        let values: Vec<f64> = values.iter().map(|v| v.round()).collect();
        let mut sim = MemSim::<f64>::new(MemSpec::with_elements(4, W).unwrap()).unwrap();
        let dst = sim.alloc_main_zeroed(1).unwrap();
        let k = sim.begin_kernel().unwrap();
        for v in &values {
            sim.atomic_accumulate(dst, &[*v]).unwrap();
        }
        sim.barrier().unwrap();
        prop_assert_eq!(sim.read_main(dst).unwrap()[0], values.iter().sum::<f64>());
        sim.end_kernel(k).unwrap();
        prop_assert_eq!(sim.report().bytes_stored, values.len() as u64 * W);
    }
}

fn seeded_inputs(b: usize, t: usize, p: usize, d: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let dims = LayerDims::new(b, t, p, d).unwrap();
    flashdp::bench::cell_inputs(seed, 0, dims).unwrap()
}

#[test]
fn every_plan_gives_the_same_gradient() {
    let (x, dy) = seeded_inputs(2, 4, 8, 8, 3);
    let dims = LayerDims::new(2, 4, 8, 8).unwrap();
    let cfg = DPConfig::new(1.0, 1.0, Reduction::Sum, 9).unwrap();
    let want = dp_backward_reference(&x, &dy, &cfg).unwrap();
    for m in [128, 256, 1024] {
        let spec = MemSpec::with_elements(m, W).unwrap();
        let plans = feasible_chain_plans(dims, spec).unwrap();
        assert!(!plans.is_empty());
        for plan in plans {
            let got = backward_flashdp(&x, &dy, &cfg, &plan, spec).unwrap();
            assert!(got.grad_w.max_abs_diff(&want).unwrap() <= 1e-12, "M={m} plan {plan:?}");
        }
    }
}

#[test]
fn noise_is_linear_in_sigma_times_c() {
    let (x, dy) = seeded_inputs(3, 2, 4, 5, 5);
    let spec = MemSpec::with_elements(16, W).unwrap();
    let plan = flashdp::plan_blocks(LayerDims::new(3, 2, 4, 5).unwrap(), spec).unwrap();
    let quiet = DPConfig::new(10.0, 0.0, Reduction::Sum, 77).unwrap().with_layer(2).with_step(4);
    let noisy = DPConfig { sigma: 1.0, ..quiet };
    let a = backward_flashdp(&x, &dy, &quiet, &plan, spec).unwrap().grad_w;
    let b = backward_flashdp(&x, &dy, &noisy, &plan, spec).unwrap().grad_w;
    for (i, (q, n)) in a.data().iter().zip(b.data()).enumerate() {
        let want = 10.0 * keyed_gaussian(77, 2, 4, i as u64);
        assert!((n - q - want).abs() <= 1e-12, "element {i}");
    }
}

#[test]
fn micro_batches_match_the_full_batch() {
    let (x, dy) = seeded_inputs(8, 3, 6, 4, 12);
    let spec = MemSpec::with_elements(64, W).unwrap();
    let mb = Some(MicroBatch { size: 2, accumulation_steps: 4 });
    for sigma in [0.0, 1.0] {
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let cfg = DPConfig::new(0.5, sigma, reduction, 3).unwrap();
            let whole = dp_backward_reference(&x, &dy, &cfg).unwrap();
            for kind in [WorkflowKind::ExplicitDp, WorkflowKind::ImplicitDp, WorkflowKind::FlashDp] {
                let acc = run_cell(kind, &x, &dy, &cfg, spec, mb).unwrap();
                let diff = acc.grad_w.max_abs_diff(&whole).unwrap();
                assert!(diff <= 1e-12, "{kind} sigma={sigma} {reduction:?}: {diff:e}");
                assert_eq!(acc.per_sample_norms_sq.len(), 8);
            }
        }
    }
}

#[test]
fn single_precision_tracks_the_double_reference() {
    let (x, dy) = seeded_inputs(4, 4, 8, 8, 21);
    let x32: Tensor<f32> = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v as f32).collect()).unwrap();
    let dy32: Tensor<f32> = Tensor::new(dy.shape().to_vec(), dy.data().iter().map(|&v| v as f32).collect()).unwrap();
    let spec = MemSpec::with_elements(64, 4).unwrap();
    let plan = flashdp::plan_blocks(LayerDims::new(4, 4, 8, 8).unwrap(), spec).unwrap();
    let cfg = DPConfig::new(1.0, 0.5, Reduction::Mean, 8).unwrap();
    let want = dp_backward_reference(&x, &dy, &cfg).unwrap();
    let got = backward_flashdp(&x32, &dy32, &cfg, &plan, spec).unwrap();
    for (a, b) in got.grad_w.data().iter().zip(want.data()) {
        assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
    }
    // traffic is counted at the declared width
    let per_pass = 4 * 4 * (8 * plan.n_d + 8 * plan.n_p) as u64;
    assert_eq!(got.input_bytes_loaded, per_pass * 4);
}
