use certkv::*;
use proptest::prelude::*;

fn cache_from(keys: &[f32], d: usize) -> TieredCache {
    let mut cache = TieredCache::new(4, d, d).unwrap();
    for (t, k) in keys.chunks(d).enumerate() {
        let v: Vec<f32> = (0..d).map(|c| ((t + c) % 5) as f32 - 2.0).collect();
        cache.append_token(k, &v).unwrap();
    }
    cache
}

fn keys_and_query() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (1usize..=8, 8usize..=64).prop_flat_map(|(d, n)| {
        (
            prop::collection::vec(-4.0f32..4.0, n * d),
            prop::collection::vec(-3.0f32..3.0, d),
        )
    })
}

proptest! {
    #[test]
    fn key_codes_sit_within_half_a_step(
        d in 1usize..=16,
        spread in 1e-3f32..100.0,
        raw in prop::collection::vec(-1.0f32..1.0, 256),
    ) {
        let keys: Vec<f32> = raw[..16 * d].iter().map(|x| x * spread).collect();
        let q = quantize_key_block(&keys, d, 0).unwrap();
        for t in 0..16 {
            for c in 0..d {
                let r = reconstruction_residual(
                    f64::from(keys[t * d + c]),
                    f64::from(q.code(t, c)),
                    q.scales()[c],
                    q.offsets()[c],
                );
                prop_assert!(residual_within(r, q.scales()[c] / 2.0));
            }
        }
    }

    #[test]
    fn raising_coverage_never_shrinks_selection((keys, query) in keys_and_query(), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let d = query.len();
        let cache = cache_from(&keys, d);
        let scores = phase1_score(&query, &cache).unwrap();
        let a = adaptive_topk(&scores, lo, 1, usize::MAX);
        let b = adaptive_topk(&scores, hi, 1, usize::MAX);
        prop_assert!(a.k_star <= b.k_star);
        prop_assert!(b.est_tail_mass <= a.est_tail_mass + 1e-12);
        prop_assert!(a.promoted.iter().all(|x| b.promoted.contains(x)));
    }

    #[test]
    fn selection_respects_clamps((keys, query) in keys_and_query(), tau in 0.0f64..1.0, k_min in 0usize..6, extra in 0usize..6) {
        let d = query.len();
        let cache = cache_from(&keys, d);
        let scores = phase1_score(&query, &cache).unwrap();
        let n = scores.full_blocks();
        let sel = adaptive_topk(&scores, tau, k_min, k_min + extra);
        prop_assert!(sel.k_star <= (k_min + extra).min(n));
        prop_assert!(sel.k_star >= k_min.min(n));
        prop_assert_eq!(sel.promoted.len(), sel.k_star);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&sel.est_tail_mass));
    }

    #[test]
    fn rung1_doubles_and_sheds_tail_mass((keys, query) in keys_and_query(), tau in 0.0f64..1.0) {
        let d = query.len();
        let cache = cache_from(&keys, d);
        let scores = phase1_score(&query, &cache).unwrap();
        let sel = adaptive_topk(&scores, tau, 1, usize::MAX);
        let up = rung1_expand(&sel);
        prop_assert_eq!(up.k_star, (2 * sel.k_star).min(scores.full_blocks()));
        prop_assert!(up.est_tail_mass <= sel.est_tail_mass + 1e-12);
    }

    #[test]
    fn e_key_grows_with_delta_and_tail(v in 0.0f64..10.0, d1 in 0.0f64..2.0, d2 in 0.0f64..2.0, a1 in 0.0f64..1.0, a2 in 0.0f64..1.0) {
        let (dl, dh) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (al, ah) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        for mode in [ExponentMode::Tight, ExponentMode::Implementation] {
            prop_assert!(e_key_bound(v, dl, al, mode) <= e_key_bound(v, dh, ah, mode));
        }
        prop_assert!(e_key_bound(v, dh, ah, ExponentMode::Tight) <= e_key_bound(v, dh, ah, ExponentMode::Implementation));
        prop_assert_eq!(e_key_bound(v, 0.0, ah, ExponentMode::Implementation), 0.0);
    }

    #[test]
    fn tv_bound_is_a_probability(delta in 0.0f64..50.0) {
        let t = tv_bound(delta).unwrap();
        prop_assert!((0.0..=1.0).contains(&t));
    }
}
