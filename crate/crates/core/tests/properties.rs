mod common;

use bsplda::data::{accumulate_rows, merge};
use bsplda::{fit_stats, FitConfig, PriorConfig, SpeakerStats, SplitMix64, SuffStats, Variant};
use common::{random_params, simulate};
use nalgebra::DMatrix;
use proptest::prelude::*;

const ARD: [Variant; 4] = [
    Variant::WishartInformative,
    Variant::WishartNonInformative,
    Variant::GammaDiagonal,
    Variant::GammaIsotropic,
];

fn integer_data(seed: u64, n: usize, d: usize, m: usize) -> (DMatrix<f64>, Vec<usize>) {
    let mut rng = SplitMix64::new(seed);
    let x = DMatrix::from_fn(n, d, |_, _| (rng.next_u64() % 21) as f64 - 10.0);
    let labels = (0..n).map(|_| rng.next_u64() as usize % m).collect();
    (x, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Integer-valued data keeps every partial sum exact, so any chunking
    // must reproduce the one-pass statistics bit for bit.
    #[test]
    fn chunked_accumulation_is_exact(seed in any::<u64>(), n in 1usize..60, d in 1usize..5, m in 1usize..6, cut in 0usize..60) {
        let (x, labels) = integer_data(seed, n, d, m);
        let whole = accumulate_rows(&x, &labels, m).unwrap();
        let cut = cut.min(n);
        let a = accumulate_rows(&x.rows(0, cut).into_owned(), &labels[..cut], m).unwrap();
        let b = accumulate_rows(&x.rows(cut, n - cut).into_owned(), &labels[cut..], m).unwrap();
        prop_assert_eq!(merge(&[a, b]).unwrap(), whole);
    }

    #[test]
    fn bound_never_decreases(seed in 0u64..1000, variant in 0usize..4) {
        let (d, ny) = (3, 2);
        let mut rng = SplitMix64::new(seed);
        let params = random_params(&mut rng, d, ny);
        let stats = simulate(&params, vec![3; 10], seed);
        let mut config = FitConfig::new(ny);
        config.max_iterations = 40;
        config.seed = seed;
        let fit = fit_stats(&stats, &PriorConfig::broad(ARD[variant], d).unwrap(), &config).unwrap();
        let mut prev = fit.report.initial.total;
        for e in &fit.report.trace {
            prop_assert!(e.total >= prev - 1e-9 * prev.abs(), "{} -> {}", prev, e.total);
            prev = e.total;
        }
    }

    #[test]
    fn speaker_order_does_not_matter(seed in 0u64..1000, variant in 0usize..4) {
        let (d, ny) = (3, 1);
        let mut rng = SplitMix64::new(seed);
        let params = random_params(&mut rng, d, ny);
        let stats = simulate(&params, vec![2, 3, 4, 2, 5, 3], seed);
        let mut reversed: Vec<SpeakerStats> = stats.speakers.clone();
        reversed.reverse();
        let reversed = SuffStats::from_speakers(reversed, d);
        let mut config = FitConfig::new(ny);
        config.max_iterations = 15;
        let prior = PriorConfig::broad(ARD[variant], d).unwrap();
        let a = fit_stats(&stats, &prior, &config).unwrap();
        let b = fit_stats(&reversed, &prior, &config).unwrap();
        let (x, y) = (a.report.final_elbo().total, b.report.final_elbo().total);
        prop_assert!((x - y).abs() <= 1e-8 * x.abs(), "{} vs {}", x, y);
    }
}
