//! Compute benchmarking and layer distribution.
//!
//! Intermediate nodes are benchmarked with hash-puzzle challenges; the server
//! turns the measured solve times into computational-power fractions
//! (`CPF_j = (1/T_j) / sum_i 1/T_i`) and hands each node the smallest prefix
//! of the remaining hidden layers whose weight count reaches its
//! proportional share of the total.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::identity::NodeAddress;
use crate::nn::LayerSpec;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("timing must be positive, got {0}")]
    NonPositiveTiming(f64),
    #[error("at least one node is required")]
    NoNodes,
    #[error("model has no assignable hidden layers")]
    EmptyHiddenLayers,
    #[error("compute profiles must be sorted by descending cpf")]
    UnsortedProfiles,
    #[error("difficulty must be at most {max} bits, got {got}")]
    DifficultyTooHigh { max: u8, got: u8 },
}

pub const MAX_DIFFICULTY_BITS: u8 = 32;
pub const PROBLEM_STRING_LEN: usize = 32;

/// A hash puzzle: find a nonce so that `SHA256(problem_string || decimal
/// nonce)` starts with at least `difficulty_bits` zero bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PowProblem {
    pub problem_string: String,
    pub difficulty_bits: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowSolution {
    pub nonce: u64,
    /// Solve time observed by whoever timed the run, in seconds. The
    /// bootstrap server always measures its own dispatch-to-receipt time and
    /// uses that for power estimation rather than trusting this field.
    pub elapsed_secs: f64,
}

/// A node's benchmark outcome: total solve time and its share of the chain's
/// aggregate compute power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    pub node_address: NodeAddress,
    pub total_time_secs: f64,
    pub cpf: f64,
}

/// The assignable portion of the model: the ordered hidden layers between
/// the data-source slice and the terminal slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLayerDescription {
    /// Width of the activation entering the intermediate segment.
    pub boundary_width: usize,
    pub hidden: Vec<LayerSpec>,
}

impl ModelLayerDescription {
    pub fn total_parameter_count(&self) -> u64 {
        self.hidden.iter().map(LayerSpec::parameter_count).sum()
    }
}

/// One chain position's assignment. Nodes left with an empty layer list are
/// excluded from the computation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAssignment {
    pub node_address: NodeAddress,
    pub layers: Vec<LayerSpec>,
}

impl NodeAssignment {
    pub fn parameter_count(&self) -> u64 {
        self.layers.iter().map(LayerSpec::parameter_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLayerDescription {
    pub assignments: Vec<NodeAssignment>,
}

impl NodeLayerDescription {
    /// Chain positions that actually hold layers, in assignment order.
    pub fn chain_members(&self) -> impl Iterator<Item = &NodeAssignment> {
        self.assignments.iter().filter(|a| !a.layers.is_empty())
    }
}

/// Deterministically generates `m` pairwise-distinct challenge strings.
pub fn generate_challenges(m: usize, difficulty_bits: u8, rng_seed: u64) -> Result<Vec<PowProblem>, PartitionError> {
    if difficulty_bits > MAX_DIFFICULTY_BITS {
        return Err(PartitionError::DifficultyTooHigh {
            max: MAX_DIFFICULTY_BITS,
            got: difficulty_bits,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    const CHARSET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    let dist = Uniform::new(0, CHARSET.len());
    let mut problems = Vec::with_capacity(m);
    while problems.len() < m {
        let s: String = (0..PROBLEM_STRING_LEN)
            .map(|_| CHARSET[dist.sample(&mut rng)] as char)
            .collect();
        if problems.iter().any(|p: &PowProblem| p.problem_string == s) {
            continue;
        }
        problems.push(PowProblem {
            problem_string: s,
            difficulty_bits,
        });
    }
    Ok(problems)
}

fn pow_digest(problem: &PowProblem, nonce: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(problem.problem_string.as_bytes());
    hasher.update(nonce.to_string().as_bytes());
    hasher.finalize().into()
}

pub fn leading_zero_bits(digest: &[u8]) -> u32 {
    let mut bits = 0;
    for &byte in digest {
        if byte == 0 {
            bits += 8;
        } else {
            bits += byte.leading_zeros();
            break;
        }
    }
    bits
}

/// Scans nonces 0, 1, 2, ... and returns the smallest one satisfying the
/// difficulty predicate, timing the search locally.
pub fn solve_pow(problem: &PowProblem) -> PowSolution {
    let start = std::time::Instant::now();
    let mut nonce = 0u64;
    loop {
        if leading_zero_bits(&pow_digest(problem, nonce)) >= u32::from(problem.difficulty_bits) {
            return PowSolution {
                nonce,
                elapsed_secs: start.elapsed().as_secs_f64(),
            };
        }
        nonce += 1;
    }
}

pub fn verify_pow(problem: &PowProblem, solution: &PowSolution) -> bool {
    leading_zero_bits(&pow_digest(problem, solution.nonce)) >= u32::from(problem.difficulty_bits)
}

/// Turns per-problem solve times into compute profiles:
/// `T_j = sum_i T_j^i`, `CP_j = 1/T_j`, `CPF_j = CP_j / sum CP`. The result
/// is sorted by descending CPF; equal values keep registration order.
pub fn compute_cpf(timings: &[(NodeAddress, Vec<f64>)]) -> Result<Vec<ComputeProfile>, PartitionError> {
    if timings.is_empty() {
        return Err(PartitionError::NoNodes);
    }
    let mut totals = Vec::with_capacity(timings.len());
    for (address, times) in timings {
        let mut total = 0.0;
        for &t in times {
            if t <= 0.0 || !t.is_finite() {
                return Err(PartitionError::NonPositiveTiming(t));
            }
            total += t;
        }
        if total <= 0.0 {
            return Err(PartitionError::NonPositiveTiming(total));
        }
        totals.push((address.clone(), total));
    }
    let power_sum: f64 = totals.iter().map(|(_, t)| 1.0 / t).sum();
    let mut profiles: Vec<ComputeProfile> = totals
        .into_iter()
        .map(|(node_address, total)| ComputeProfile {
            node_address,
            total_time_secs: total,
            cpf: (1.0 / total) / power_sum,
        })
        .collect();
    // Stable sort: registration order breaks CPF ties.
    profiles.sort_by(|a, b| b.cpf.partial_cmp(&a.cpf).unwrap());
    Ok(profiles)
}

/// Distributes the hidden layers over the profiled nodes, served in
/// descending-CPF order. Node `k` takes the smallest prefix of the remaining
/// layers whose cumulative weight count reaches `TPC * CPF_k` (never fewer
/// than one layer); the last profile served takes everything left. Single
/// layers are never split, and once layers run out the remaining nodes get
/// empty assignments.
pub fn partition_layers(
    mld: &ModelLayerDescription,
    profiles: &[ComputeProfile],
) -> Result<NodeLayerDescription, PartitionError> {
    if profiles.is_empty() {
        return Err(PartitionError::NoNodes);
    }
    if mld.hidden.is_empty() {
        return Err(PartitionError::EmptyHiddenLayers);
    }
    if profiles.windows(2).any(|w| w[0].cpf < w[1].cpf) {
        return Err(PartitionError::UnsortedProfiles);
    }
    let tpc = mld.total_parameter_count();
    let mut assignments = Vec::with_capacity(profiles.len());
    let mut next = 0usize;
    for (k, profile) in profiles.iter().enumerate() {
        if next >= mld.hidden.len() {
            assignments.push(NodeAssignment {
                node_address: profile.node_address.clone(),
                layers: Vec::new(),
            });
            continue;
        }
        let layers = if k == profiles.len() - 1 {
            let rest = mld.hidden[next..].to_vec();
            next = mld.hidden.len();
            rest
        } else {
            let target = tpc as f64 * profile.cpf;
            let mut taken = 0usize;
            let mut count = 0u64;
            while next + taken < mld.hidden.len() {
                count += mld.hidden[next + taken].parameter_count();
                taken += 1;
                if count as f64 >= target {
                    break;
                }
            }
            let slice = mld.hidden[next..next + taken].to_vec();
            next += taken;
            slice
        };
        assignments.push(NodeAssignment {
            node_address: profile.node_address.clone(),
            layers,
        });
    }
    Ok(NodeLayerDescription { assignments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn addr(tag: &str) -> NodeAddress {
        NodeAddress::from_label(tag)
    }

    fn hidden_from_widths(widths: &[usize]) -> Vec<LayerSpec> {
        widths
            .windows(2)
            .map(|w| LayerSpec::dense(w[0], w[1], Activation::ReLU))
            .collect()
    }

    #[test]
    fn challenges_distinct_and_deterministic() {
        let a = generate_challenges(3, 8, 11).unwrap();
        let b = generate_challenges(3, 8, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_ne!(a[0].problem_string, a[1].problem_string);
        assert_ne!(a[1].problem_string, a[2].problem_string);
        assert!(a.iter().all(|p| p.problem_string.len() == PROBLEM_STRING_LEN));
        assert!(generate_challenges(1, 33, 0).is_err());
    }

    #[test]
    fn zero_difficulty_solves_at_nonce_zero() {
        let p = PowProblem {
            problem_string: "anything".into(),
            difficulty_bits: 0,
        };
        let s = solve_pow(&p);
        assert_eq!(s.nonce, 0);
        assert!(verify_pow(&p, &s));
    }

    #[test]
    fn pow_golden_minimal_nonces() {
        // Frozen from an independent brute-force scan of
        // SHA256(problem || decimal nonce).
        let p = PowProblem {
            problem_string: "abc".into(),
            difficulty_bits: 8,
        };
        let s = solve_pow(&p);
        assert_eq!(s.nonce, 252);
        assert!(verify_pow(&p, &s));
        // The minimal solution really is minimal and the next nonce fails.
        for nonce in 0..252 {
            assert!(!verify_pow(&p, &PowSolution { nonce, elapsed_secs: 0.0 }));
        }
        assert!(!verify_pow(&p, &PowSolution { nonce: 253, elapsed_secs: 0.0 }));

        let p2 = PowProblem {
            problem_string: "splitchain".into(),
            difficulty_bits: 12,
        };
        assert_eq!(solve_pow(&p2).nonce, 4611);
    }

    #[test]
    fn solve_then_verify_holds_for_random_problems() {
        for (i, p) in generate_challenges(100, 12, 5)
            .unwrap()
            .into_iter()
            .enumerate()
        {
            let s = solve_pow(&p);
            assert!(verify_pow(&p, &s), "problem {i}");
        }
    }

    #[test]
    fn cpf_single_node_is_one() {
        let profiles = compute_cpf(&[(addr("a"), vec![1.0, 2.0])]).unwrap();
        assert_eq!(profiles.len(), 1);
        assert!((profiles[0].cpf - 1.0).abs() < 1e-12);
        assert!((profiles[0].total_time_secs - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cpf_symmetric_and_hand_case() {
        let equal = compute_cpf(&[(addr("a"), vec![1.0]), (addr("b"), vec![1.0])]).unwrap();
        assert!((equal[0].cpf - 0.5).abs() < 1e-12);
        assert!((equal[1].cpf - 0.5).abs() < 1e-12);

        // T = (1s, 2s) -> CP = (1, 0.5) -> CPF = (2/3, 1/3).
        let uneven = compute_cpf(&[(addr("slow"), vec![2.0]), (addr("fast"), vec![1.0])]).unwrap();
        assert_eq!(uneven[0].node_address, addr("fast"));
        assert!((uneven[0].cpf - 2.0 / 3.0).abs() < 1e-12);
        assert!((uneven[1].cpf - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cpf_rejects_bad_timings() {
        assert!(compute_cpf(&[]).is_err());
        assert!(compute_cpf(&[(addr("a"), vec![0.0])]).is_err());
        assert!(compute_cpf(&[(addr("a"), vec![-1.0])]).is_err());
    }

    #[test]
    fn cpf_ties_keep_registration_order() {
        let profiles = compute_cpf(&[
            (addr("first"), vec![1.0]),
            (addr("second"), vec![1.0]),
            (addr("third"), vec![1.0]),
        ])
        .unwrap();
        assert_eq!(profiles[0].node_address, addr("first"));
        assert_eq!(profiles[1].node_address, addr("second"));
        assert_eq!(profiles[2].node_address, addr("third"));
    }

    fn profile(tag: &str, cpf: f64) -> ComputeProfile {
        ComputeProfile {
            node_address: addr(tag),
            total_time_secs: 1.0 / cpf,
            cpf,
        }
    }

    #[test]
    fn single_node_takes_all_layers() {
        let mld = ModelLayerDescription {
            boundary_width: 4,
            hidden: hidden_from_widths(&[4, 10, 10, 5]),
        };
        let nld = partition_layers(&mld, &[profile("only", 1.0)]).unwrap();
        assert_eq!(nld.assignments.len(), 1);
        assert_eq!(nld.assignments[0].layers, mld.hidden);
    }

    #[test]
    fn greedy_prefix_hand_case() {
        // Layers of 40, 100, 50 weights; TPC = 190; CPF (0.6, 0.4):
        // target_1 = 114, so node 1 takes layers {1,2} (140 >= 114) and the
        // 2nd node takes the remainder {3}.
        let mld = ModelLayerDescription {
            boundary_width: 4,
            hidden: hidden_from_widths(&[4, 10, 10, 5]),
        };
        let nld = partition_layers(&mld, &[profile("a", 0.6), profile("b", 0.4)]).unwrap();
        assert_eq!(nld.assignments[0].layers, mld.hidden[0..2]);
        assert_eq!(nld.assignments[1].layers, mld.hidden[2..]);
        assert_eq!(nld.assignments[0].parameter_count(), 140);
        assert_eq!(nld.assignments[1].parameter_count(), 50);
    }

    #[test]
    fn surplus_nodes_get_empty_assignments() {
        let third = 1.0 / 3.0;
        let mld = ModelLayerDescription {
            boundary_width: 6,
            hidden: hidden_from_widths(&[6, 6, 6]),
        };
        let nld = partition_layers(
            &mld,
            &[profile("a", third), profile("b", third), profile("c", third)],
        )
        .unwrap();
        assert_eq!(nld.assignments[0].layers.len(), 1);
        assert_eq!(nld.assignments[1].layers.len(), 1);
        assert!(nld.assignments[2].layers.is_empty());
        assert_eq!(nld.chain_members().count(), 2);
        let concat: Vec<_> = nld
            .assignments
            .iter()
            .flat_map(|a| a.layers.clone())
            .collect();
        assert_eq!(concat, mld.hidden);
    }

    #[test]
    fn partition_rejects_invalid_input() {
        let mld = ModelLayerDescription {
            boundary_width: 4,
            hidden: Vec::new(),
        };
        assert!(matches!(
            partition_layers(&mld, &[profile("a", 1.0)]),
            Err(PartitionError::EmptyHiddenLayers)
        ));
        let mld = ModelLayerDescription {
            boundary_width: 4,
            hidden: hidden_from_widths(&[4, 4]),
        };
        assert!(matches!(
            partition_layers(&mld, &[profile("a", 0.3), profile("b", 0.7)]),
            Err(PartitionError::UnsortedProfiles)
        ));
        assert!(matches!(partition_layers(&mld, &[]), Err(PartitionError::NoNodes)));
    }
}
