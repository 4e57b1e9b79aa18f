use nalgebra::DMatrix;
use proptest::prelude::*;

use cdsrank::affinity::{
    build_affinity, knn_subgraph, principal_submatrix, spectral_radius, AffinityMatrix,
    FeatureVector, Metric,
};
use cdsrank::dataset::{build_batch, build_target_matrix, GalleryIndex};
use cdsrank::ds::brute_force_qp_maximizers;
use cdsrank::eval::{average_precision, cmc, QueryJudgment};
use cdsrank::io::{load_features_bin, load_features_csv, write_features_bin, write_features_csv};
use cdsrank::rerank::{fuse, rank_excluding_probe, VerificationScores};
use cdsrank::solver::{
    build_modified_matrix, replicator_step, run_replicator, solve_cds, CdsConfig, SimplexVector,
};

fn graph(n: usize) -> impl Strategy<Value = AffinityMatrix> {
    prop::collection::vec(prop_oneof![1 => Just(0.0), 3 => 0.0..1.0f64], n * (n - 1) / 2).prop_map(
        move |upper| {
            let mut w = DMatrix::zeros(n, n);
            let mut it = upper.into_iter();
            for i in 0..n {
                for j in i + 1..n {
                    let v = it.next().unwrap();
                    w[(i, j)] = v;
                    w[(j, i)] = v;
                }
            }
            AffinityMatrix::new(w).unwrap()
        },
    )
}

fn sized_graph(lo: usize, hi: usize) -> impl Strategy<Value = AffinityMatrix> {
    (lo..=hi).prop_flat_map(graph)
}

fn simplex(n: usize) -> impl Strategy<Value = SimplexVector> {
    prop::collection::vec(1e-3..1.0f64, n).prop_map(|v| SimplexVector::normalized(v).unwrap())
}

fn features(n: usize, d: usize) -> impl Strategy<Value = Vec<FeatureVector>> {
    prop::collection::vec(
        (0u8..4, prop::option::of(0u32..3), prop::collection::vec(-1.0..1.0f64, d)),
        n,
    )
    .prop_map(|rows| {
        rows.into_iter()
            .map(|(id, cam, mut v)| {
                v[0] += 2.0; // keep every vector away from zero norm
                FeatureVector::new(format!("p{id}"), cam, v)
            })
            .collect()
    })
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affinity_is_symmetric_nonnegative_zero_diagonal(
        items in (2usize..8, 1usize..6).prop_flat_map(|(n, d)| features(n, d)),
        cosine in any::<bool>(),
    ) {
        let metric = if cosine { Metric::Cosine } else { Metric::Dot };
        let a = build_affinity(&items, metric).unwrap();
        for i in 0..a.n() {
            prop_assert_eq!(a.get(i, i), 0.0);
            for j in 0..a.n() {
                prop_assert_eq!(a.get(i, j), a.get(j, i));
                prop_assert!(a.get(i, j) >= 0.0);
                if cosine {
                    prop_assert!(a.get(i, j) <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn spectral_radius_within_perron_bounds(a in sized_graph(1, 9)) {
        let m = a.matrix();
        let rho = spectral_radius(m, 1e-10, 100_000).unwrap();
        let max_row = m.row_iter().map(|r| r.sum()).fold(0.0, f64::max);
        let min_row = m.row_iter().map(|r| r.sum()).fold(f64::INFINITY, f64::min);
        prop_assert!(rho <= max_row + 1e-9);
        prop_assert!(rho >= min_row - 1e-9);
        let exact = m.clone().symmetric_eigen().eigenvalues.max();
        prop_assert!((rho - exact).abs() <= 1e-6 * exact.max(1.0), "{} vs {}", rho, exact);
    }

    #[test]
    fn principal_submatrix_composes(a in sized_graph(4, 8), x in 0usize..8, y in 0usize..8) {
        let n = a.n();
        let (x, y) = (x % n, y % n);
        let once = principal_submatrix(a.matrix(), &[x, y]).unwrap();
        let first = principal_submatrix(a.matrix(), &[x.max(y)]).unwrap();
        let twice = if x == y { first } else { principal_submatrix(&first, &[x.min(y)]).unwrap() };
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn knn_contains_node_and_is_induced(a in sized_graph(3, 9), node in 0usize..9, k in 1usize..8) {
        let n = a.n();
        let node = node % n;
        let k = 1 + k % (n - 1);
        let hood = knn_subgraph(&a, node, k).unwrap();
        prop_assert_eq!(hood.members.len(), k + 1);
        prop_assert!(hood.local_index(node).is_some());
        for (li, &gi) in hood.members.iter().enumerate() {
            for (lj, &gj) in hood.members.iter().enumerate() {
                prop_assert_eq!(hood.affinity.get(li, lj), a.get(gi, gj));
            }
        }
        // No outsider is strictly closer than the weakest member.
        let weakest = hood.members.iter().filter(|&&m| m != node)
            .map(|&m| a.get(node, m)).fold(f64::INFINITY, f64::min);
        for j in (0..n).filter(|j| !hood.members.contains(j)) {
            prop_assert!(a.get(node, j) <= weakest);
        }
    }

    #[test]
    fn replicator_step_keeps_simplex_and_raises_objective(
        (a, x) in (2usize..10).prop_flat_map(|n| (graph(n), simplex(n))),
        p in 0usize..10,
    ) {
        let p = p % a.n();
        let b = build_modified_matrix(&a, &[p], &CdsConfig::default()).unwrap();
        let y = replicator_step(&b, &x).unwrap();
        prop_assert!((y.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(y.as_slice().iter().all(|&v| v >= 0.0));
        prop_assert!(b.quadratic(y.as_slice()) >= b.quadratic(x.as_slice()) - 1e-12);
    }

    #[test]
    fn constant_shift_leaves_fixed_points_alone(a in sized_graph(3, 7), p in 0usize..7) {
        let p = p % a.n();
        let cfg = CdsConfig { tol: 1e-12, max_iter: 200_000, ..CdsConfig::default() };
        let r = solve_cds(&a, &[p], &cfg).unwrap();
        prop_assume!(r.converged);
        // Adding c·J to an already shifted payoff scales the update's
        // numerator and denominator alike at a fixed point.
        let b = build_modified_matrix(&a, &[p], &cfg).unwrap();
        let shifted = cdsrank::solver::ModifiedMatrix::from_payoff(b.matrix().add_scalar(1.5)).unwrap();
        let again = run_replicator(&shifted, &r.membership, 1e-12, 10, 0.0).unwrap();
        prop_assert!(linf(again.membership.as_slice(), r.membership.as_slice()) <= 1e-8);
    }

    #[test]
    fn solver_matches_exhaustive_maximizers(a in sized_graph(3, 7), p in 0usize..7) {
        let p = p % a.n();
        let cfg = CdsConfig { tol: 1e-12, max_iter: 1_000_000, ..CdsConfig::default() };
        let r = solve_cds(&a, &[p], &cfg).unwrap();
        prop_assume!(r.converged);
        prop_assert!(r.support.contains(&p));
        let oracle = brute_force_qp_maximizers(&a, &[p], r.alpha).unwrap();
        let best = oracle.maximizers.iter()
            .map(|m| linf(m.as_slice(), r.membership.as_slice()))
            .fold(f64::INFINITY, f64::min);
        prop_assert!(best <= 1e-4, "closest maximizer at {}", best);
    }

    #[test]
    fn fused_similarity_is_monotone_in_membership(
        y in prop::collection::vec(0.0..1.0f64, 9),
        s in prop::collection::vec(0.0..1.0f64, 9),
        beta in 0.05..0.95f64,
        bump in 0.0..0.5f64,
        at in 0usize..9,
    ) {
        let ym = DMatrix::from_vec(3, 3, y);
        let sm = DMatrix::from_vec(3, 3, s);
        let scores = VerificationScores::new(sm.clone(), sm.map(|v| 1.0 - v)).unwrap();
        let base = fuse(&ym, &scores, beta, 0.3).unwrap();
        let mut raised = ym.clone();
        raised[at] += bump;
        let up = fuse(&raised, &scores, beta, 0.3).unwrap();
        prop_assert!(up.similarity[at] >= base.similarity[at]);
        prop_assert!(up.dissimilarity[at] <= base.dissimilarity[at]);
    }

    #[test]
    fn ranking_is_a_permutation_of_the_gallery(
        scores in prop::collection::vec(prop_oneof![Just(0.5), 0.0..1.0f64], 2..20),
        probe in 0usize..20,
    ) {
        let probe = probe % scores.len();
        let r = rank_excluding_probe(&scores, probe).unwrap();
        let mut seen = r.order.clone();
        seen.sort_unstable();
        let expect: Vec<usize> = (0..scores.len()).filter(|&i| i != probe).collect();
        prop_assert_eq!(seen, expect);
        for w in r.order.windows(2) {
            let (a, b) = (scores[w[0]], scores[w[1]]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
    }

    #[test]
    fn metrics_are_bounded_and_permutation_invariant(
        rel in prop::collection::vec(any::<bool>(), 1..15),
        valid_bits in any::<u16>(),
        perm_seed in any::<u64>(),
    ) {
        let m = rel.len();
        let valid: Vec<bool> = (0..m).map(|i| valid_bits & (1 << i) != 0 || i == 0).collect();
        let j = QueryJudgment { probe: 0, ranked_gallery: (0..m).collect(), relevant: rel.clone(), valid: valid.clone() };
        let Ok(ap) = average_precision(&j) else { return Ok(()); };
        prop_assert!((0.0..=1.0).contains(&ap));
        let curve = cmc(std::slice::from_ref(&j), m).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(curve.iter().all(|c| (0.0..=1.0).contains(c)));

        // Relabel gallery indices; the ranking, relevance and masks move together.
        let mut perm: Vec<usize> = (0..m).collect();
        let mut s = perm_seed;
        for i in (1..m).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut prel = vec![false; m];
        let mut pvalid = vec![false; m];
        for g in 0..m {
            prel[perm[g]] = rel[g];
            pvalid[perm[g]] = valid[g];
        }
        let pj = QueryJudgment { probe: 0, ranked_gallery: (0..m).map(|g| perm[g]).collect(), relevant: prel, valid: pvalid };
        prop_assert_eq!(average_precision(&pj).unwrap(), ap);
        prop_assert_eq!(cmc(&[pj], m).unwrap(), curve);
    }

    #[test]
    fn csv_round_trip_is_exact(items in (1usize..6, 1usize..5).prop_flat_map(|(n, d)| features(n, d))) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let index = GalleryIndex::new(items).unwrap();
        write_features_csv(&path, &index).unwrap();
        prop_assert_eq!(load_features_csv(&path).unwrap().items, index.items);
    }

    #[test]
    fn binary_round_trip_is_bit_exact_for_f32_values(
        items in (1usize..6, 1usize..5).prop_flat_map(|(n, d)| features(n, d)),
    ) {
        let items: Vec<FeatureVector> = items.into_iter().map(|mut f| {
            f.values = f.values.iter().map(|&v| v as f32 as f64).collect();
            f
        }).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let index = GalleryIndex::new(items).unwrap();
        write_features_bin(&path, &index).unwrap();
        let back = load_features_bin(&path).unwrap();
        for (a, b) in back.items.iter().zip(&index.items) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.camera, b.camera);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.values), bits(&b.values));
        }
    }

    #[test]
    fn batches_are_identity_balanced(
        per_id in prop::collection::vec(1usize..6, 2..8),
        k in 1usize..4,
        omega in 1usize..4,
        seed in any::<u64>(),
    ) {
        let items: Vec<FeatureVector> = per_id.iter().enumerate()
            .flat_map(|(id, &c)| (0..c).map(move |j| FeatureVector::new(format!("{id}"), Some(j as u32), vec![1.0, j as f64])))
            .collect();
        let index = GalleryIndex::new(items).unwrap();
        let eligible = per_id.iter().filter(|&&c| c >= omega).count();
        match build_batch(&index, k, omega, seed) {
            Ok(batch) => {
                prop_assert!(eligible >= k);
                prop_assert_eq!(batch.len(), k * omega);
                for chunk in batch.members.chunks(omega) {
                    prop_assert!(chunk.iter().all(|f| f.id == chunk[0].id));
                }
                let t = build_target_matrix(&batch);
                for i in 0..batch.len() {
                    prop_assert_eq!(t.get(i, i), 1);
                    for j in 0..batch.len() {
                        prop_assert_eq!(t.get(i, j), t.get(j, i));
                        prop_assert_eq!(t.get(i, j) == 1, batch.members[i].id == batch.members[j].id);
                    }
                }
                prop_assert_eq!(&batch, &build_batch(&index, k, omega, seed).unwrap());
            }
            Err(_) => prop_assert!(eligible < k),
        }
    }
}
