use std::collections::VecDeque;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sac::negatives::{random_walk, sample_easy};
use sac::sampler::{flatten, mask_multi_hop, sample_subgraph};
use sac::{BipartiteGraph, NodeId, SamplerConfig, WalkConfig};

fn bfs(g: &BipartiteGraph, src: NodeId) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.num_nodes()];
    dist[src as usize] = 0;
    let mut q = VecDeque::from([src]);
    while let Some(v) = q.pop_front() {
        for &w in g.neighbors_unchecked(v) {
            if dist[w as usize] == usize::MAX {
                dist[w as usize] = dist[v as usize] + 1;
                q.push_back(w);
            }
        }
    }
    dist
}

fn random_graph(seed: u64, users: u64, items: u64, edges: usize) -> BipartiteGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<(u64, u64)> = (0..edges)
        .map(|_| (rng.gen_range(0..users), rng.gen_range(0..items)))
        .collect();
    BipartiteGraph::from_edges(&raw).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn same_seed_same_subgraph_and_sound_masking(
        gseed in any::<u64>(),
        seed in any::<u64>(),
        fanouts in prop::collection::vec(1usize..6, 1..4),
    ) {
        let g = random_graph(gseed, 15, 15, 40);
        let cfg = SamplerConfig::new(&fanouts);
        let target = (seed % g.num_nodes() as u64) as NodeId;
        let run = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let raw = sample_subgraph(&g, target, &cfg, &mut rng)?;
            let ms = mask_multi_hop(&raw, &mut rng);
            Ok::<_, sac::sampler::SampleError>((raw, ms))
        };
        let (a, b) = (run(seed), run(seed));
        prop_assert_eq!(&a, &b);
        let Ok((raw, ms)) = a else { return Ok(()) };
        let dist = bfs(&g, target);
        for (h, level) in raw.hops.iter().enumerate() {
            prop_assert_eq!(level.len(), raw.parents[h].len());
            for &v in level {
                prop_assert!(dist[v as usize] <= h + 1);
            }
        }
        prop_assert!(ms.realized_hops() <= fanouts.len());
        for p in &ms.masked_positives {
            prop_assert!(ms.kept_tokens.iter().all(|t| t.node != p.node));
            prop_assert!(ms.contains(p.node));
        }
        let seq = flatten(&ms);
        prop_assert_eq!(seq.nodes[0], target);
        prop_assert!(seq.hops.windows(2).all(|w| w[0] <= w[1]));
    }
}

/// 8-cycle u0 i0 u1 i1 u2 i2 u3 i3: with p = q = 1 both neighbors are
/// equally likely from every state.
#[test]
fn unbiased_walk_on_a_cycle_is_uniform() {
    let raw: Vec<(u64, u64)> = (0..4).flat_map(|k| [(k, k), ((k + 1) % 4, k)]).collect();
    let g = BipartiteGraph::from_edges(&raw).unwrap();
    let cfg = WalkConfig {
        p: 1.0,
        q: 1.0,
        length: 20,
        ..WalkConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut back, mut total) = (0u64, 0u64);
    while total < 100_000 {
        let walk = random_walk(&g, 0, &cfg, &mut rng).unwrap();
        for w in walk.windows(3) {
            back += u64::from(w[0] == w[2]);
            total += 1;
        }
    }
    let frac = back as f64 / total as f64;
    assert!((frac - 0.5).abs() < 0.02, "return fraction {frac}");
}

#[test]
fn low_q_walks_travel_farther() {
    let g = random_graph(3, 300, 300, 700);
    let mean_end_distance = |q: f64| {
        let cfg = WalkConfig {
            p: 1.0,
            q,
            length: 10,
            ..WalkConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut sum, mut n) = (0usize, 0usize);
        for start in 0..g.num_nodes() as NodeId {
            if g.degree(start) == 0 {
                continue;
            }
            let dist = bfs(&g, start);
            for _ in 0..10 {
                let walk = random_walk(&g, start, &cfg, &mut rng).unwrap();
                sum += dist[*walk.last().unwrap() as usize];
                n += 1;
            }
        }
        sum as f64 / n as f64
    };
    let (outward, inward) = (mean_end_distance(0.25), mean_end_distance(4.0));
    assert!(outward > inward, "q=0.25: {outward}, q=4: {inward}");
}

#[test]
fn easy_negatives_are_uniform_over_allowed_nodes() {
    let g = random_graph(9, 12, 12, 40);
    let n = g.num_nodes();
    let forbidden: Vec<NodeId> = vec![0, 3, n as NodeId - 1];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut counts = vec![0u64; n];
    let draws = 1_000_000usize;
    for _ in 0..draws / 1000 {
        for v in sample_easy(&g, 1000, forbidden.as_slice(), &mut rng).unwrap() {
            counts[v as usize] += 1;
        }
    }
    let allowed = (n - forbidden.len()) as f64;
    let p = 1.0 / allowed;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (v, &c) in counts.iter().enumerate() {
        if forbidden.contains(&(v as NodeId)) {
            assert_eq!(c, 0);
        } else {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma,
                "node {v}: {c} vs {mean:.0} ± {sigma:.0}"
            );
        }
    }
}
