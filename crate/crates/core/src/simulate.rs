//! Sample paths of tv-ARCH processes with deterministic seeding.
//!
//! Random streams come from ChaCha8 (`rand_chacha`) seeded with a 64-bit
//! integer, which yields identical streams on every platform. Replication
//! `r` of an experiment with master seed `s` uses [`derive_seed`]`(s, r)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_model, NoiseSpec, ReturnSeries, TvArchModel};

/// Default number of stationary pre-sample steps.
pub const DEFAULT_BURN_IN: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Sample size `T`.
    pub t_len: usize,
    pub seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

impl SimulationConfig {
    pub fn new(t_len: usize, seed: u64) -> Self {
        Self {
            t_len,
            seed,
            burn_in: DEFAULT_BURN_IN,
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `index` derived from a master seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ splitmix64(index)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sampler for unit-variance noise.
pub struct NoiseSampler {
    spec: NoiseSpec,
    student: Option<(StudentT<f64>, f64)>,
}

impl NoiseSampler {
    pub fn new(spec: NoiseSpec) -> Result<Self> {
        spec.validate()?;
        let student = match spec {
            NoiseSpec::Gaussian => None,
            NoiseSpec::StudentT { nu } => {
                let nu = nu as f64;
                let dist = StudentT::new(nu)
                    .map_err(|e| Error::InvalidInput(format!("Student t: {e}")))?;
                Some((dist, ((nu - 2.0) / nu).sqrt()))
            }
        };
        Ok(Self { spec, student })
    }

    pub fn spec(&self) -> NoiseSpec {
        self.spec
    }

    #[inline]
    pub fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.student {
            None => StandardNormal.sample(rng),
            Some((dist, scale)) => dist.sample(rng) * scale,
        }
    }
}

/// `n` i.i.d. unit-variance draws; identical for identical seeds.
pub fn draw_noise(spec: NoiseSpec, n: usize, seed: u64) -> Result<Vec<f64>> {
    let sampler = NoiseSampler::new(spec)?;
    let mut rng = rng_from_seed(seed);
    Ok((0..n).map(|_| sampler.draw(&mut rng)).collect())
}

/// Simulates `X_1..X_T`.
///
/// The pre-sample (`burn_in + p` steps, started from zeros) follows the
/// stationary ARCH recursion with coefficients frozen at `u = 0`; the sample
/// itself uses `a_j(t/T)`.
pub fn simulate_path(model: &TvArchModel, config: &SimulationConfig) -> Result<ReturnSeries> {
    validate_model(model)?;
    if config.t_len == 0 {
        return Err(Error::InvalidInput("sample size must be positive".into()));
    }
    let p = model.order();
    if config.burn_in < 50 && model.contraction() > 0.9 {
        log::warn!(
            "burn-in of {} steps is short for contraction constant {:.3}",
            config.burn_in,
            model.contraction()
        );
    }
    let sampler = NoiseSampler::new(model.noise)?;
    let mut rng = rng_from_seed(config.seed);
    let pre = config.burn_in + p;
    let total = pre + config.t_len;
    let mut sq = vec![0.0; total + p];
    let mut out = Vec::with_capacity(config.t_len);
    let frozen = model.coefficients_at(0.0);
    let floor = model.min_intercept();
    let t_len = config.t_len as f64;
    let mut coeffs = frozen.clone();
    for step in 0..total {
        let k = step + p;
        if step >= pre {
            let t = (step - pre + 1) as f64;
            for (c, f) in coeffs.iter_mut().zip(&model.coefficients) {
                *c = f.eval(t / t_len);
            }
        }
        let mut sigma_sq = coeffs[0];
        for j in 1..=p {
            sigma_sq += coeffs[j] * sq[k - j];
        }
        debug_assert!(sigma_sq >= floor * (1.0 - 1e-12));
        let x = sampler.draw(&mut rng) * sigma_sq.sqrt();
        sq[k] = x * x;
        if step >= pre {
            out.push(x);
        }
    }
    ReturnSeries::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoefficientFunction;

    fn variance(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn gaussian_noise_unit_variance() {
        let v = draw_noise(NoiseSpec::Gaussian, 1_000_000, 7).unwrap();
        let s2 = variance(&v);
        assert!((0.995..=1.005).contains(&s2), "{s2}");
    }

    #[test]
    fn student_noise_unit_variance() {
        let v = draw_noise(NoiseSpec::StudentT { nu: 9 }, 1_000_000, 8).unwrap();
        let s2 = variance(&v);
        assert!((0.99..=1.01).contains(&s2), "{s2}");
    }

    #[test]
    fn empty_and_deterministic() {
        assert!(draw_noise(NoiseSpec::Gaussian, 0, 1).unwrap().is_empty());
        assert_eq!(
            draw_noise(NoiseSpec::Gaussian, 50, 3).unwrap(),
            draw_noise(NoiseSpec::Gaussian, 50, 3).unwrap()
        );
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
    }

    #[test]
    fn constant_variance_model() {
        let model =
            TvArchModel::new(vec![CoefficientFunction::constant(2.5)], NoiseSpec::Gaussian).unwrap();
        let x = simulate_path(&model, &SimulationConfig::new(100_000, 5)).unwrap();
        let s2 = variance(x.values());
        assert!((s2 / 2.5 - 1.0).abs() < 0.03, "{s2}");
    }

    #[test]
    fn same_seed_same_path() {
        let model = TvArchModel::new(
            vec![CoefficientFunction::sine(2.0, 0.8), CoefficientFunction::constant(0.3)],
            NoiseSpec::StudentT { nu: 9 },
        )
        .unwrap();
        let cfg = SimulationConfig::new(500, 42);
        assert_eq!(
            simulate_path(&model, &cfg).unwrap(),
            simulate_path(&model, &cfg).unwrap()
        );
    }

    #[test]
    fn local_variance_follows_intercept() {
        let model = TvArchModel::new(
            vec![CoefficientFunction::sine(2.0, 0.8), CoefficientFunction::constant(0.3)],
            NoiseSpec::Gaussian,
        )
        .unwrap();
        let (mut high, mut low) = (0.0, 0.0);
        for r in 0..20 {
            let x = simulate_path(&model, &SimulationConfig::new(2000, derive_seed(9, r))).unwrap();
            high += x.squares()[400..600].iter().sum::<f64>();
            low += x.squares()[1400..1600].iter().sum::<f64>();
        }
        assert!(high > low);
    }

    #[test]
    fn windowed_mean_matches_frozen_stationary_mean() {
        // 200 replications, window T b with b = 0.1 around u = 0.25 and 0.75.
        let model = TvArchModel::new(
            vec![CoefficientFunction::sine(2.0, 0.8), CoefficientFunction::constant(0.3)],
            NoiseSpec::Gaussian,
        )
        .unwrap();
        let t_len = 2000;
        let half = (t_len as f64 * 0.1 / 2.0) as usize;
        for &u in &[0.25, 0.75] {
            let centre = (u * t_len as f64) as usize;
            let means: Vec<f64> = (0..200)
                .map(|r| {
                    let x = simulate_path(&model, &SimulationConfig::new(t_len, derive_seed(77, r)))
                        .unwrap();
                    let w = &x.squares()[centre - half..centre + half];
                    w.iter().sum::<f64>() / w.len() as f64
                })
                .collect();
            let grand = means.iter().sum::<f64>() / 200.0;
            let se = (variance(&means) / 200.0).sqrt();
            // average of the frozen mean over the window
            let target = (centre - half..centre + half)
                .map(|t| model.stationary_mean_sq((t + 1) as f64 / t_len as f64))
                .sum::<f64>()
                / (2 * half) as f64;
            assert!((grand - target).abs() < 3.0 * se, "u={u}: {grand} vs {target} (se {se})");
        }
    }
}
