mod common;

use std::collections::HashMap;

use cmpc_core::clustering::{build_prototypes, kmeans, KMeansParams};
use cmpc_core::losses::cid_loss;
use cmpc_core::memory::MemoryBank;
use cmpc_core::nn::{cosine, dot, Matrix};
use cmpc_core::protocols::{
    build_trials, matching_accuracy, retrieval_map, verification_auc, EmbeddingTable, Protocol, Stratum, Trial,
};
use cmpc_core::rng::substream;
use cmpc_core::synth::{generate, InstanceRecord, WorldConfig};
use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn small_world(seed: u64) -> Vec<InstanceRecord> {
    generate(&WorldConfig {
        num_identities: 16,
        videos_per_identity: 3,
        latent_dim: 4,
        voice_dim: 6,
        face_dim: 6,
        seed,
        ..WorldConfig::default()
    })
    .unwrap()
}

/// Product of Givens rotations with random angles: orthogonal by construction.
fn rotate(m: &Matrix, seed: u64) -> Matrix {
    let mut rng = substream(seed, "rotation", 0);
    let mut out = m.clone();
    let d = m.cols();
    for _ in 0..3 * d {
        let (i, j) = (rng.random_range(0..d), rng.random_range(0..d));
        if i == j {
            continue;
        }
        let (s, c) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let (a, b) = (row[i], row[j]);
            row[i] = c * a - s * b;
            row[j] = s * a + c * b;
        }
    }
    out
}

#[test]
fn memory_bank_ignores_batch_partitioning() {
    let mut rng = substream(0, "bank-perm", 0);
    let n = 20;
    let epochs: Vec<(Matrix, Matrix)> = (0..3).map(|_| (random_unit(n, 5, &mut rng), random_unit(n, 5, &mut rng))).collect();
    let run = |perm_seed: u64| {
        let mut bank = MemoryBank::new(n, 5, 0.5).unwrap();
        let mut prng = substream(perm_seed, "order", 0);
        for (v, f) in &epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut prng);
            for chunk in order.chunks(prng.random_range(1..8)) {
                bank.update(chunk, &v.gather_rows(chunk), &f.gather_rows(chunk)).unwrap();
            }
        }
        bank.snapshot().unwrap()
    };
    let reference = run(0);
    for seed in 1..5 {
        assert_eq!(run(seed), reference);
    }
}

#[test]
fn two_well_separated_groups_cluster_identically_in_both_modalities() {
    let mut rng = substream(3, "two-groups", 0);
    let jitter = |base: [f64; 3], rng: &mut cmpc_core::rng::Rng| {
        let v: Vec<f64> = base.iter().map(|b| b + rng.random_range(-0.05..0.05)).collect();
        cmpc_core::nn::matrix::normalized(&v)
    };
    let mut voice = Vec::new();
    let mut face = Vec::new();
    for i in 0..30 {
        let g = i % 2 == 0;
        voice.push(jitter(if g { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] }, &mut rng));
        face.push(jitter(if g { [0.0, 0.0, 1.0] } else { [0.0, -1.0, 0.0] }, &mut rng));
    }
    let (pv, pf) = build_prototypes(
        &Matrix::from_rows(&voice).unwrap(),
        &Matrix::from_rows(&face).unwrap(),
        &[2],
        5,
        &KMeansParams::default(),
    )
    .unwrap();
    let (a, b) = (&pv.clusterings()[0].assignments, &pf.clusterings()[0].assignments);
    let mut map = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        assert_eq!(*map.entry(x).or_insert(y), y);
    }
    assert_eq!(map.len(), 2);
}

#[test]
fn random_embeddings_match_at_chance() {
    let recs = generate(&WorldConfig {
        num_identities: 40,
        ..WorldConfig::default()
    })
    .unwrap();
    let mut rng = substream(11, "null", 0);
    let n = recs.len();
    let table = EmbeddingTable::new(
        (0..n).collect(),
        random_unit(n, 16, &mut rng),
        random_unit(n, 16, &mut rng),
    )
    .unwrap();
    let list = build_trials(&recs, Protocol::Matching, Stratum::U, 5000, 2).unwrap();
    let s = matching_accuracy(&table, &list.trials).unwrap();
    let overall = (s.v2f.unwrap() + s.f2v.unwrap()) / 2.0;
    assert!((overall - 0.5).abs() < 0.02, "{overall}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_are_rotation_invariant(seed in 0u64..10_000) {
        let recs = small_world(seed % 7);
        let mut rng = substream(seed, "emb", 0);
        let n = recs.len();
        let (v, f) = (random_unit(n, 5, &mut rng), random_unit(n, 5, &mut rng));
        let ids: Vec<usize> = (0..n).collect();
        let a = EmbeddingTable::new(ids.clone(), v.clone(), f.clone()).unwrap();
        let b = EmbeddingTable::new(ids, rotate(&v, seed), rotate(&f, seed)).unwrap();
        let m = build_trials(&recs, Protocol::Matching, Stratum::U, 200, seed).unwrap();
        let ver = build_trials(&recs, Protocol::Verification, Stratum::U, 200, seed).unwrap();
        let ret = build_trials(&recs, Protocol::Retrieval, Stratum::U, 10, seed).unwrap();
        prop_assert_eq!(matching_accuracy(&a, &m.trials).unwrap(), matching_accuracy(&b, &m.trials).unwrap());
        let (x, y) = (verification_auc(&a, &ver.trials).unwrap(), verification_auc(&b, &ver.trials).unwrap());
        prop_assert!((x - y).abs() < 1e-9);
        let (x, y) = (retrieval_map(&a, &ret.trials).unwrap(), retrieval_map(&b, &ret.trials).unwrap());
        prop_assert!((x.v2f.unwrap() - y.v2f.unwrap()).abs() < 1e-9);
        prop_assert!((x.f2v.unwrap() - y.f2v.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn swapping_candidates_complements_accuracy(seed in 0u64..10_000) {
        let recs = small_world(seed % 5);
        let mut rng = substream(seed, "emb", 1);
        let n = recs.len();
        let table = EmbeddingTable::new((0..n).collect(), random_unit(n, 4, &mut rng), random_unit(n, 4, &mut rng)).unwrap();
        let list = build_trials(&recs, Protocol::Matching, Stratum::U, 100, seed).unwrap();
        let reversed: Vec<Trial> = list.trials.iter().map(|t| match *t {
            Trial::Matching { probe, positive, imposter, probe_modality } =>
                Trial::Matching { probe, positive: imposter, imposter: positive, probe_modality },
            _ => unreachable!(),
        }).collect();
        let a = matching_accuracy(&table, &list.trials).unwrap();
        let b = matching_accuracy(&table, &reversed).unwrap();
        prop_assert!((a.v2f.unwrap() + b.v2f.unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((a.f2v.unwrap() + b.f2v.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stratified_trials_hold_their_constraint(seed in 0u64..10_000, s in 0usize..6) {
        let stratum = Stratum::ALL[s];
        let recs = generate(&WorldConfig { num_identities: 60, videos_per_identity: 2, latent_dim: 4, voice_dim: 4, face_dim: 4, seed: seed % 3, ..WorldConfig::default() }).unwrap();
        let truth: HashMap<usize, _> = recs.iter().map(|r| (r.instance_id, r.truth.clone())).collect();
        let list = build_trials(&recs, Protocol::Matching, stratum, 50, seed).unwrap();
        for t in &list.trials {
            let Trial::Matching { probe, positive, imposter, .. } = *t else { unreachable!() };
            let (p, q, i) = (&truth[&probe], &truth[&positive], &truth[&imposter]);
            prop_assert_eq!(p.identity_id, q.identity_id);
            prop_assert_ne!(p.identity_id, i.identity_id);
            let (pa, ia) = (p.attributes, i.attributes);
            match stratum {
                Stratum::U => {}
                Stratum::G => prop_assert_eq!(pa.gender, ia.gender),
                Stratum::N => prop_assert_eq!(pa.nationality, ia.nationality),
                Stratum::A => prop_assert_eq!(pa.age, ia.age),
                Stratum::GN => prop_assert_eq!((pa.gender, pa.nationality), (ia.gender, ia.nationality)),
                Stratum::GNA => prop_assert_eq!(pa, ia),
            }
        }
    }

    #[test]
    fn repeated_update_moves_memory_closer(seed in 0u64..10_000) {
        let mut rng = substream(seed, "mem", 0);
        let (a, b) = (random_unit(1, 6, &mut rng), random_unit(1, 6, &mut rng));
        let mut bank = MemoryBank::new(1, 6, 0.5).unwrap();
        bank.update(&[0], &a, &a).unwrap();
        let mut last = cosine(bank.voice_row(0), b.row(0));
        for _ in 0..5 {
            bank.update(&[0], &b, &b).unwrap();
            let now = cosine(bank.voice_row(0), b.row(0));
            prop_assert!(now > last || (now - 1.0).abs() < 1e-12);
            prop_assert!((dot(bank.voice_row(0), bank.voice_row(0)) - 1.0).abs() < 1e-12);
            last = now;
        }
    }

    #[test]
    fn kmeans_inertia_nonincreasing_and_centroids_unit(seed in 0u64..10_000, n in 4usize..40, k in 1usize..5) {
        let mut rng = substream(seed, "km", 0);
        let points = random_unit(n, 3, &mut rng);
        let res = kmeans(&points, k.min(n), seed, &KMeansParams { max_iters: 100, restarts: 2 }).unwrap();
        prop_assert!(res.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for c in res.centroids.row_iter() {
            prop_assert!((dot(c, c) - 1.0).abs() < 1e-9);
        }
        if res.converged {
            for (i, &a) in res.assignments.iter().enumerate() {
                let mine = dot(points.row(i), res.centroids.row(a));
                for c in res.centroids.row_iter() {
                    prop_assert!(dot(points.row(i), c) <= mine + 1e-12);
                }
            }
        }
    }

    #[test]
    fn cid_loss_is_nonnegative_and_symmetric_under_swap(seed in 0u64..10_000, n in 2usize..10) {
        let mut rng = substream(seed, "cid", 0);
        let (v, f) = (random_unit(n, 4, &mut rng), random_unit(n, 4, &mut rng));
        let a = cid_loss(&v, &f, 0.2).unwrap();
        let b = cid_loss(&f, &v, 0.2).unwrap();
        prop_assert!(a.breakdown.cid_vf >= 0.0 && a.breakdown.cid_fv >= 0.0);
        prop_assert!((a.breakdown.cid_vf - b.breakdown.cid_fv).abs() < 1e-12);
        prop_assert!((a.breakdown.objective - b.breakdown.objective).abs() < 1e-12);
    }
}
