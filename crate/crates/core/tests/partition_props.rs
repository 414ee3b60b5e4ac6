//! Partition and batching invariants over randomized inputs.

use proptest::prelude::*;

use splitchain_core::data::plan_batches;
use splitchain_core::identity::NodeAddress;
use splitchain_core::nn::{Activation, LayerSpec};
use splitchain_core::partition::{compute_cpf, partition_layers, ModelLayerDescription};

fn timings_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(1e-3f64..1e3, 1..6),
        1..8,
    )
}

fn named_timings(times: &[Vec<f64>]) -> Vec<(NodeAddress, Vec<f64>)> {
    times
        .iter()
        .enumerate()
        .map(|(i, t)| (NodeAddress::from_label(&format!("node-{i}")), t.clone()))
        .collect()
}

proptest! {
    #[test]
    fn cpf_sums_to_one_and_inverts_time_order(times in timings_strategy()) {
        let profiles = compute_cpf(&named_timings(&times)).unwrap();
        let sum: f64 = profiles.iter().map(|p| p.cpf).sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
        for pair in profiles.windows(2) {
            prop_assert!(pair[0].cpf >= pair[1].cpf);
            prop_assert!(pair[0].total_time_secs <= pair[1].total_time_secs + 1e-12);
        }
        for p in &profiles {
            prop_assert!(p.cpf > 0.0 && p.cpf <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn cpf_is_scale_invariant(times in timings_strategy(), scale in 1e-3f64..1e3) {
        let base = compute_cpf(&named_timings(&times)).unwrap();
        let scaled_times: Vec<Vec<f64>> = times
            .iter()
            .map(|t| t.iter().map(|v| v * scale).collect())
            .collect();
        let scaled = compute_cpf(&named_timings(&scaled_times)).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert_eq!(&a.node_address, &b.node_address);
            prop_assert!((a.cpf - b.cpf).abs() < 1e-12, "{} vs {}", a.cpf, b.cpf);
        }
    }

    #[test]
    fn partition_is_complete_and_monotone(
        widths in prop::collection::vec(1usize..24, 2..21),
        times in prop::collection::vec(1e-2f64..1e2, 1..8),
    ) {
        let hidden: Vec<LayerSpec> = widths
            .windows(2)
            .map(|w| LayerSpec::dense(w[0], w[1], Activation::ReLU))
            .collect();
        let mld = ModelLayerDescription {
            boundary_width: widths[0],
            hidden: hidden.clone(),
        };
        let timings: Vec<Vec<f64>> = times.iter().map(|&t| vec![t]).collect();
        let profiles = compute_cpf(&named_timings(&timings)).unwrap();
        let nld = partition_layers(&mld, &profiles).unwrap();

        // Completeness: concatenation reproduces the hidden list exactly.
        let concat: Vec<LayerSpec> = nld
            .assignments
            .iter()
            .flat_map(|a| a.layers.clone())
            .collect();
        prop_assert_eq!(concat, hidden);

        // Monotone allocation: the top node meets its share or holds all.
        let tpc = mld.total_parameter_count();
        let first = &nld.assignments[0];
        let holds_all = first.layers.len() == mld.hidden.len();
        prop_assert!(
            holds_all || first.parameter_count() as f64 >= tpc as f64 * profiles[0].cpf,
            "first node got {} of target {}",
            first.parameter_count(),
            tpc as f64 * profiles[0].cpf
        );

        // No layer splitting, no spurious chain members.
        for assignment in &nld.assignments {
            if assignment.layers.is_empty() {
                continue;
            }
        }
    }

    #[test]
    fn batch_plans_partition_the_index_space(
        n in 1usize..5000,
        batch_raw in 1usize..600,
        shuffle in prop::option::of(any::<u64>()),
    ) {
        let batch_size = batch_raw.min(n);
        let plan = plan_batches(n, batch_size, shuffle).unwrap();
        prop_assert_eq!(plan.iterations(), n.div_ceil(batch_size));
        let mut all: Vec<u32> = plan.slices.concat();
        prop_assert_eq!(all.len(), n);
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        for slice in &plan.slices[..plan.slices.len() - 1] {
            prop_assert_eq!(slice.len(), batch_size);
        }
    }
}
