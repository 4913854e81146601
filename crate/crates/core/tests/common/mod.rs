#![allow(dead_code)]

use bsplda::{
    accumulate, sample, GenSpec, ModelParams, PriorConfig, RowPrior, SplitMix64, SuffStats, VPrior, Variant, WPrior,
};
use nalgebra::{DMatrix, DVector};

pub fn random_spd(rng: &mut SplitMix64, n: usize, ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.next_normal());
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * ridge
}

pub fn random_params(rng: &mut SplitMix64, d: usize, ny: usize) -> ModelParams {
    ModelParams::new(
        rng.normal_vector(d),
        DMatrix::from_fn(d, ny, |_, _| rng.next_normal()),
        random_spd(rng, d, 1.0),
    )
    .unwrap()
}

pub fn simulate(params: &ModelParams, counts: Vec<usize>, seed: u64) -> SuffStats {
    let s = sample(&GenSpec {
        params: params.clone(),
        counts,
        seed,
    })
    .unwrap();
    accumulate(&s.dataset, &s.partition).unwrap()
}

/// Broad priors for the ARD variants; random proper priors for the row-prior
/// variants.
pub fn prior_for(variant: Variant, d: usize, ny: usize, rng: &mut SplitMix64) -> PriorConfig {
    if variant.has_ard() {
        return PriorConfig::broad(variant, d).unwrap();
    }
    let rows = (0..d)
        .map(|_| RowPrior {
            mean: rng.normal_vector(ny + 1),
            precision: random_spd(rng, ny + 1, 0.5),
        })
        .collect();
    let w_prior = match variant {
        Variant::GaussVWishart => WPrior::Wishart {
            psi0: random_spd(rng, d, 1.0) / (d as f64 + 2.0),
            nu: d as f64 + 2.0,
        },
        Variant::GaussVGammaDiagonal => WPrior::GammaDiagonal {
            a: 2.0,
            b: DVector::from_fn(d, |_, _| 1.0 + rng.next_open01()),
        },
        _ => WPrior::GammaIsotropic { a: 2.0, b: 1.5 },
    };
    PriorConfig {
        variant,
        v_prior: VPrior::Rows(rows),
        w_prior,
    }
}
