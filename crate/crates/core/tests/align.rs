use coverhunter::align::*;
use coverhunter::nn::Rng;
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn paper_pairs() -> Vec<MatchingPair> {
    [(1, 1), (1, 2), (1, 3), (2, 4), (2, 5), (3, 4), (4, 2), (4, 6), (5, 4), (5, 5)]
        .iter()
        .map(|&(a, b)| MatchingPair::new(a, b, 0.95))
        .collect()
}

fn unit(rng: &mut Rng, d: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn chunks(track: &str, work: &str, vectors: &[Vec<f32>], hop: f64) -> Vec<ChunkEmbedding> {
    vectors
        .iter()
        .enumerate()
        .map(|(i, v)| ChunkEmbedding {
            track_id: track.into(),
            work_id: work.into(),
            chunk_index: i as u32 + 1,
            start_s: i as f64 * hop,
            vector: v.clone(),
        })
        .collect()
}

#[test]
fn worked_example() {
    let pairs = paper_pairs();
    assert_eq!(pairs[6].delta, -2);
    assert_eq!(mode_offset(&pairs).unwrap(), 2);
    let sel = select_aligned(&pairs, 2, "a", "b", 7.5);
    let idx: Vec<(u32, u32)> = sel.iter().map(|p| p.chunk_indices(7.5)).collect();
    assert_eq!(idx, vec![(1, 3), (2, 4), (4, 6)]);
    assert!(sel.iter().all(|p| p.delta == 2 && p.n_support_pairs == 3));
    assert_eq!((sel[0].start_a_s, sel[0].start_b_s), (0.0, 15.0));
}

#[test]
fn mode_cases() {
    assert_eq!(mode_offset(&[MatchingPair::new(3, 5, 1.0)]).unwrap(), 2);
    assert!(matches!(mode_offset(&[]), Err(AlignError::NoPairs)));
    let tie = [MatchingPair::new(2, 1, 1.0), MatchingPair::new(1, 2, 1.0)];
    // equal counts and equal |delta|: the smaller delta wins
    assert_eq!(mode_offset(&tie).unwrap(), -1);
    let tie = [MatchingPair::new(1, 4, 1.0), MatchingPair::new(1, 2, 1.0), MatchingPair::new(5, 2, 1.0)];
    assert_eq!(mode_offset(&tie).unwrap(), 1);
}

#[test]
fn select_cases() {
    assert!(select_aligned(&[], 0, "a", "b", 7.5).is_empty());
    let same: Vec<MatchingPair> = (1..5).map(|i| MatchingPair::new(i, i + 1, 1.0)).collect();
    assert_eq!(select_aligned(&same, 1, "a", "b", 7.5).len(), 4);
}

#[test]
fn matching_pairs_cases() {
    let mut rng = Rng::seed_from_u64(1);
    let v: Vec<Vec<f32>> = (0..5).map(|_| unit(&mut rng, 16)).collect();
    let a = chunks("a", "w", &v, 7.5);
    let pairs = find_matching_pairs(&a, &a, 0.9).unwrap();
    for i in 1..=5 {
        assert!(pairs.iter().any(|p| p.p1 == i && p.p2 == i && p.delta == 0 && (p.similarity - 1.0).abs() < 1e-6));
    }

    let mut e = vec![vec![0.0f32; 6]; 6];
    for (i, row) in e.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let a = chunks("a", "w", &e[..3], 7.5);
    let b = chunks("b", "w", &e[3..], 7.5);
    assert!(find_matching_pairs(&a, &b, 0.9).unwrap().is_empty());
    assert!(matches!(find_matching_pairs(&[], &b, 0.9), Err(AlignError::EmptyInput)));
}

/// Track `b` is track `a` delayed by `shift` chunks of fresh material.
fn shifted_pair(rng: &mut Rng, n: usize, shift: usize, noise: f32) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let base: Vec<Vec<f32>> = (0..n).map(|_| unit(rng, 32)).collect();
    let mut b: Vec<Vec<f32>> = (0..shift).map(|_| unit(rng, 32)).collect();
    for v in &base {
        let jitter = unit(rng, 32);
        b.push(v.iter().zip(&jitter).map(|(x, j)| x + noise * j).collect());
    }
    (base, b)
}

#[test]
fn table_recovers_planted_offsets() {
    let mut rng = Rng::seed_from_u64(2);
    let mut all = Vec::new();
    let mut planted = Vec::new();
    for w in 0..4 {
        for (k, shift) in [0usize, 1, 2, 4].iter().enumerate() {
            let (a, b) = shifted_pair(&mut rng, 8, *shift, 0.1);
            let (ta, tb) = (format!("w{w}_{k}a"), format!("w{w}_{k}b"));
            all.extend(chunks(&ta, &format!("w{w}_{k}"), &a, 7.5));
            all.extend(chunks(&tb, &format!("w{w}_{k}"), &b, 7.5));
            planted.push((ta, tb, *shift as i64));
        }
    }
    let table = build_alignment_table(&all, 0.9, 7.5);
    assert_eq!(table.offsets.len(), planted.len());
    for (ta, tb, shift) in planted {
        let o = table.offsets.iter().find(|o| o.track_a == ta && o.track_b == tb).unwrap();
        assert_eq!(o.delta, shift);
    }
    for r in &table.rows {
        assert_eq!(r.track_a.split('_').next(), r.track_b.split('_').next());
        assert!(r.track_a[..r.track_a.len() - 1] == r.track_b[..r.track_b.len() - 1]);
    }
    let back = AlignmentTable::parse(&table.to_text()).unwrap();
    assert_eq!(back.rows, table.rows);
    assert_eq!(back.offsets, table.offsets);
}

#[test]
fn table_three_versions_and_skips() {
    let mut rng = Rng::seed_from_u64(3);
    let base: Vec<Vec<f32>> = (0..4).map(|_| unit(&mut rng, 8)).collect();
    let mut all = Vec::new();
    for t in ["x", "y", "z"] {
        all.extend(chunks(t, "w", &base, 7.5));
    }
    let other: Vec<Vec<f32>> = (0..4).map(|_| unit(&mut rng, 8)).collect();
    all.extend(chunks("q", "v", &base, 7.5));
    all.extend(chunks("r", "v", &other, 7.5));
    let table = build_alignment_table(&all, 0.9, 7.5);
    assert_eq!(table.offsets.len(), 3);
    assert!(table.offsets.iter().all(|o| o.delta == 0));
    assert_eq!(table.skipped, vec![("q".to_string(), "r".to_string())]);
    assert!(table.rows.iter().all(|r| r.track_a != "q" && r.track_b != "q"));
    assert!(build_alignment_table(&all, 1.01, 7.5).rows.is_empty());
}

#[test]
fn extension_examples() {
    let p = AlignedPair {
        track_a: "a".into(),
        track_b: "b".into(),
        start_a_s: 0.0,
        start_b_s: 7.5,
        delta: 1,
        n_support_pairs: 1,
    };
    let [ca, cb] = extend_with_length(&p, 30.0, 60.0, 60.0);
    assert_eq!((ca.start_s, ca.length_s), (0.0, 30.0));
    assert_eq!((cb.start_s, cb.start_s + cb.length_s), (7.5, 37.5));
    let [ca, cb] = extend_with_length(&p, 30.0, 60.0, 20.0);
    assert_eq!((ca.length_s, cb.length_s), (12.5, 12.5));

    let draw = |seed| extend_aligned_chunk(&p, 15.0, 45.0, 100.0, 100.0, &mut Rng::seed_from_u64(seed));
    assert_eq!(draw(4), draw(4));
    for seed in 0..20 {
        let [a, _] = draw(seed);
        assert!((15.0..=45.0).contains(&a.length_s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn matching_agrees_with_double_loop(seed in any::<u64>(), na in 1usize..8, nb in 1usize..8, th in -0.5f64..0.9) {
        let mut rng = Rng::seed_from_u64(seed);
        let a = chunks("a", "w", &(0..na).map(|_| unit(&mut rng, 3)).collect::<Vec<_>>(), 7.5);
        let b = chunks("b", "w", &(0..nb).map(|_| unit(&mut rng, 3)).collect::<Vec<_>>(), 7.5);
        let got = find_matching_pairs(&a, &b, th).unwrap();
        let mut want = Vec::new();
        for x in &a {
            for y in &b {
                let dot: f64 = x.vector.iter().zip(&y.vector).map(|(p, q)| *p as f64 * *q as f64).sum();
                let nx: f64 = x.vector.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
                let ny: f64 = y.vector.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
                if dot / (nx * ny) > th {
                    want.push((x.chunk_index, y.chunk_index));
                }
            }
        }
        let got_idx: Vec<(u32, u32)> = got.iter().map(|p| (p.p1, p.p2)).collect();
        prop_assert_eq!(got_idx, want);
        let delta = mode_offset(&got).ok();
        if let Some(d) = delta {
            let sel = select_aligned(&got, d, "a", "b", 7.5);
            for s in &sel {
                let (i, j) = s.chunk_indices(7.5);
                prop_assert!(got.iter().any(|p| p.p1 == i && p.p2 == j));
            }
        }
    }

    #[test]
    fn swapping_tracks_negates_offset(seed in any::<u64>(), shift in 0usize..4) {
        let mut rng = Rng::seed_from_u64(seed);
        let (a, b) = shifted_pair(&mut rng, 6, shift, 0.05);
        let (a, b) = (chunks("a", "w", &a, 7.5), chunks("b", "w", &b, 7.5));
        let ab = find_matching_pairs(&a, &b, 0.9).unwrap();
        let ba = find_matching_pairs(&b, &a, 0.9).unwrap();
        prop_assert_eq!(mode_offset(&ab).unwrap(), -mode_offset(&ba).unwrap());
        let mut mirrored: Vec<(u32, u32)> = ba.iter().map(|p| (p.p2, p.p1)).collect();
        mirrored.sort_unstable();
        let mut direct: Vec<(u32, u32)> = ab.iter().map(|p| (p.p1, p.p2)).collect();
        direct.sort_unstable();
        prop_assert_eq!(direct, mirrored);
    }
}
