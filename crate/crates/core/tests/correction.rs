mod common;

use common::{correction_oracle as oracle, profile, random_case};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raymar::correction::{correct_profile, distance_transform_1d, ProfileBundle};

#[test]
fn thousand_random_bundles_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case_no in 0..1000 {
        let c = random_case(&mut rng);
        let bundle = ProfileBundle::new(
            profile(c.noisy.clone(), c.step),
            profile(c.clean.clone(), c.step),
            profile(c.metal.clone(), c.step),
            c.params.rho,
        )
        .unwrap();
        let (want, want_dt) = oracle(&c);
        assert_eq!(bundle.dt, want_dt, "case {case_no}: distance transform");
        let got = correct_profile(&bundle, &c.params).samples;
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1e-300), "case {case_no} sample {i}: {g} vs {w}");
            let (lo, hi) = if bundle.is_metal[i] {
                (c.clean[i].min(c.params.rho), c.clean[i].max(c.params.rho))
            } else {
                (c.clean[i].min(c.noisy[i]), c.clean[i].max(c.noisy[i]))
            };
            assert!(*g >= lo - 1e-15 && *g <= hi + 1e-15, "case {case_no} sample {i} leaves its blend interval");
        }
    }
}

#[test]
fn distance_transform_against_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let n = rng.random_range(0..200);
        let flags: Vec<bool> = (0..n).map(|_| rng.random_bool(0.05)).collect();
        let step = 0.5;
        let got = distance_transform_1d(&flags, step);
        for i in 0..n {
            let want = (0..n)
                .filter(|&j| flags[j])
                .map(|j| i.abs_diff(j) as f64 * step)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(got[i], want);
        }
    }
}
