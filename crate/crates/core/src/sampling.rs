//! Stochastic realizations of discrete atomic positions.
//!
//! Positions are drawn from the quantum-phase-dependent joint distribution:
//! one draw per occupancy unit per site for a Mott insulator, or independent
//! draws from the total density for an ideal BEC / classical uncorrelated
//! atoms. Realization `k` is generated from its own counter-based RNG stream
//! keyed by `(seed, k)`, so results are bit-identical regardless of execution
//! order or worker count.

use crate::model::LatticeConfig;
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("lattice has no atoms")]
    Empty,
    #[error("sampler `{0}` is not supported")]
    Unsupported(String),
}

/// Which joint position distribution to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Exactly `n_i` atoms per site, each drawn from that site's Wannier
    /// density. Zero site-number variance.
    MottInsulator,
    /// `N` independent draws from the total density; site occupations
    /// fluctuate multinomially. Also the ideal-BEC and classical labels.
    Independent,
}

impl SamplerKind {
    /// Map a config label to a sampler. "bec" and "classical" share the
    /// independent sampler; Fermi-Dirac sampling is out of scope.
    pub fn from_label(label: &str) -> Result<Self, SamplingError> {
        match label {
            "mi" | "mott" | "mott_insulator" => Ok(SamplerKind::MottInsulator),
            "independent" | "bec" | "superfluid" | "classical" => Ok(SamplerKind::Independent),
            other => Err(SamplingError::Unsupported(other.to_string())),
        }
    }
}

/// One sampled set of `N` atomic positions with per-atom coupling mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    /// Positions in wavelengths.
    pub positions: Vec<f64>,
    /// `false` for atoms sampled from a masked site.
    pub coupled: Vec<bool>,
    /// Generating site index per atom.
    pub site: Vec<usize>,
    /// `(seed, realization index)` that produced this realization.
    pub seed_tag: (u64, u64),
}

impl Realization {
    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    /// Pin atoms to explicit positions (all coupled); for deterministic
    /// single-configuration runs and tests.
    pub fn pinned(positions: Vec<f64>) -> Self {
        let n = positions.len();
        Realization {
            positions,
            coupled: vec![true; n],
            site: (0..n).collect(),
            seed_tag: (0, 0),
        }
    }
}

/// Counter-based stream for realization `index` under `seed`.
fn stream_rng(seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform in the open interval (0, 1), 53-bit resolution.
fn next_unit_open(rng: &mut ChaCha12Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

/// Standard normal via the inverse CDF (Wichura's PPND16, AS 241).
///
/// Accurate to ~1e-16 relative over (0, 1); keeps the counter-based
/// determinism contract trivially simple (one uniform in, one normal out).
pub fn standard_normal_icdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
            + 6.7265770927008700853e4)
            * r
            + 4.5921953931549871457e4)
            * r
            + 1.3731693765509461125e4)
            * r
            + 1.9715909503065514427e3)
            * r
            + 1.3314166789178437745e2)
            * r
            + 3.3871328727963666080e0)
            * q;
        let den = ((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
            + 3.9307895800092710610e4)
            * r
            + 2.1213794301586595867e4)
            * r
            + 5.3941960214247511077e3)
            * r
            + 6.8718700749205790830e2)
            * r
            + 4.2313330701600911252e1)
            * r
            + 1.0;
        return num / den;
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
            + 2.41780725177450611770e-1)
            * r
            + 1.27045825245236838258e0)
            * r
            + 3.64784832476320460504e0)
            * r
            + 5.76949722146069140550e0)
            * r
            + 4.63033784615654529590e0)
            * r
            + 1.42343711074968357734e0;
        let den = ((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
            + 1.51986665636164571966e-2)
            * r
            + 1.48103976427480074590e-1)
            * r
            + 6.89767334985100004550e-1)
            * r
            + 1.67638483018380384940e0)
            * r
            + 2.05319162663775882187e0)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 1.24266094738807843860e-3)
            * r
            + 2.65321895265761230930e-2)
            * r
            + 2.96560571828504891230e-1)
            * r
            + 1.78482653991729133580e0)
            * r
            + 5.46378491116411436990e0)
            * r
            + 6.65790464350110377720e0;
        let den = ((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
            + 1.84631831751005468180e-5)
            * r
            + 7.86869131145613259100e-4)
            * r
            + 1.48753612908506148525e-2)
            * r
            + 1.36929880922735805310e-1)
            * r
            + 5.99832206555887937690e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn draw_normal(rng: &mut ChaCha12Rng) -> f64 {
    standard_normal_icdf(next_unit_open(rng))
}

/// One Mott-insulator realization: exactly `n_i` atoms per site.
pub fn sample_mi(lattice: &LatticeConfig, seed: u64, index: u64) -> Realization {
    let n = lattice.n_atoms();
    assert!(n > 0, "lattice has no atoms");
    let sigma = lattice.wannier_width / 2f64.sqrt();
    let mut rng = stream_rng(seed, index);
    let mut positions = Vec::with_capacity(n);
    let mut site = Vec::with_capacity(n);
    for (i, (&center, &occ)) in lattice
        .site_centers
        .iter()
        .zip(&lattice.occupancy)
        .enumerate()
    {
        for _ in 0..occ {
            positions.push(center + sigma * draw_normal(&mut rng));
            site.push(i);
        }
    }
    let mut r = Realization {
        positions,
        coupled: vec![true; n],
        site,
        seed_tag: (seed, index),
    };
    apply_site_mask(&mut r, lattice);
    r
}

/// One independent-sampler realization: `n` i.i.d. draws from the total
/// density (site chosen by occupancy weight, then the site's Wannier
/// density). With a single site this consumes the RNG identically to
/// [`sample_mi`], so the two samplers coincide bit-for-bit there.
pub fn sample_independent(lattice: &LatticeConfig, n: usize, seed: u64, index: u64) -> Realization {
    assert!(n > 0, "requested an empty realization");
    let sigma = lattice.wannier_width / 2f64.sqrt();
    let total: f64 = lattice.occupancy.iter().map(|&o| o as f64).sum();
    assert!(total > 0.0, "lattice has no atoms");
    let mut rng = stream_rng(seed, index);
    let mut positions = Vec::with_capacity(n);
    let mut site = Vec::with_capacity(n);
    let single_site = lattice.n_sites() == 1;
    for _ in 0..n {
        let i = if single_site {
            0
        } else {
            let u = next_unit_open(&mut rng) * total;
            let mut acc = 0.0;
            let mut chosen = lattice.n_sites() - 1;
            for (i, &occ) in lattice.occupancy.iter().enumerate() {
                acc += occ as f64;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        positions.push(lattice.site_centers[i] + sigma * draw_normal(&mut rng));
        site.push(i);
    }
    let mut r = Realization {
        positions,
        coupled: vec![true; n],
        site,
        seed_tag: (seed, index),
    };
    apply_site_mask(&mut r, lattice);
    r
}

/// Set per-atom coupling flags from the generating site's mask.
pub fn apply_site_mask(realization: &mut Realization, lattice: &LatticeConfig) {
    for (flag, &site) in realization.coupled.iter_mut().zip(&realization.site) {
        *flag = lattice.coupled_mask[site];
    }
}

/// Draw realization `index` with the configured sampler.
pub fn sample(kind: SamplerKind, lattice: &LatticeConfig, seed: u64, index: u64) -> Realization {
    match kind {
        SamplerKind::MottInsulator => sample_mi(lattice, seed, index),
        SamplerKind::Independent => sample_independent(lattice, lattice.n_atoms(), seed, index),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::wannier_density;

    fn lattice(n: usize, width: f64) -> LatticeConfig {
        LatticeConfig::antinode_chain(n, width)
    }

    /// Crude complementary normal CDF, plenty for 1e-6-level checks.
    fn phi(x: f64) -> f64 {
        // Abramowitz & Stegun 7.1.26 on erf
        let t = 1.0 / (1.0 + 0.3275911 * x.abs() / 2f64.sqrt());
        let poly = t
            * (0.254829592
                + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        let erf = 1.0 - poly * (-x * x / 2.0).exp();
        if x >= 0.0 {
            0.5 * (1.0 + erf)
        } else {
            0.5 * (1.0 - erf)
        }
    }

    #[test]
    fn icdf_known_quantiles() {
        assert!((standard_normal_icdf(0.5) - 0.0).abs() < 1e-15);
        assert!((standard_normal_icdf(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((standard_normal_icdf(0.025) + 1.959963984540054).abs() < 1e-12);
        assert!((standard_normal_icdf(0.841344746068543) - 1.0).abs() < 1e-12);
        // far tails stay finite and monotone
        assert!(standard_normal_icdf(1e-300) < -30.0);
        assert!(standard_normal_icdf(1.0 - 1e-16) > 8.0);
    }

    #[test]
    fn icdf_inverts_cdf() {
        // phi here is only ~1e-7-accurate, so the round-trip tolerance is loose;
        // exact quantiles are pinned in icdf_known_quantiles
        for &x in &[-3.0, -1.3, -0.2, 0.0, 0.7, 2.4] {
            let p = phi(x);
            assert!(
                (standard_normal_icdf(p) - x).abs() < 5e-4,
                "round-trip at {x}"
            );
        }
    }

    #[test]
    fn mi_counts_are_exact() {
        let lat = lattice(8, 0.08);
        for k in 0..50 {
            let r = sample_mi(&lat, 42, k);
            assert_eq!(r.n_atoms(), 8);
            let mut per_site = [0usize; 8];
            for &s in &r.site {
                per_site[s] += 1;
            }
            assert!(per_site.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn mi_degenerate_width_pins_to_centers() {
        let lat = LatticeConfig::new(vec![-0.25, 0.25], 1e-12, vec![1, 1], vec![true, true])
            .unwrap();
        let r = sample_mi(&lat, 7, 3);
        assert!((r.positions[0] + 0.25).abs() < 1e-10);
        assert!((r.positions[1] - 0.25).abs() < 1e-10);
    }

    #[test]
    fn mi_empirical_site_means() {
        let lat = lattice(4, 0.08);
        let n_draws = 100_000u64;
        let mut sums = [0.0f64; 4];
        for k in 0..n_draws {
            let r = sample_mi(&lat, 9, k);
            for (j, &x) in r.positions.iter().enumerate() {
                sums[j] += x;
            }
        }
        let sigma = 0.08 / 2f64.sqrt();
        let bound = 4.0 * sigma / (n_draws as f64).sqrt();
        for (j, &c) in lat.site_centers.iter().enumerate() {
            let mean = sums[j] / n_draws as f64;
            assert!(
                (mean - c).abs() < bound,
                "site {j}: mean {mean} vs center {c} (bound {bound})"
            );
        }
    }

    #[test]
    fn independent_binomial_occupation() {
        // 12 atoms over 12 equal sites: count on a fixed 6-site half is
        // Binomial(12, 1/2); check mean and variance within 5% at 1e6 draws,
        // and that the count actually spans a wide range.
        let lat = lattice(12, 0.02);
        let n_draws = 1_000_000u64;
        let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
        let (mut min_seen, mut max_seen) = (usize::MAX, 0usize);
        for k in 0..n_draws {
            let r = sample_independent(&lat, 12, 11, k);
            let c = r.site.iter().filter(|&&s| s < 6).count();
            min_seen = min_seen.min(c);
            max_seen = max_seen.max(c);
            sum += c as f64;
            sumsq += (c * c) as f64;
        }
        let mean = sum / n_draws as f64;
        let var = sumsq / n_draws as f64 - mean * mean;
        assert!((mean - 6.0).abs() < 0.05 * 6.0);
        assert!((var - 3.0).abs() < 0.05 * 3.0, "var {var}");
        assert!(min_seen <= 1 && max_seen >= 11, "span {min_seen}..{max_seen}");
    }

    #[test]
    fn independent_density_chi_squared() {
        // Empirical histogram over 1e6 draws vs rho_1/N, chi^2 test at 1%
        // significance. Two overlapping sites with unequal occupancy.
        let lat =
            LatticeConfig::new(vec![-0.1, 0.1], 0.08, vec![2, 1], vec![true, true]).unwrap();
        let n_draws = 250_000u64; // 3 atoms per draw
        let lo = -0.5;
        let hi = 0.5;
        let n_bins = 40;
        let mut counts = vec![0u64; n_bins];
        let mut total = 0u64;
        for k in 0..n_draws {
            let r = sample_independent(&lat, 3, 5, k);
            for &x in &r.positions {
                if x >= lo && x < hi {
                    let b = ((x - lo) / (hi - lo) * n_bins as f64) as usize;
                    counts[b.min(n_bins - 1)] += 1;
                }
                total += 1;
            }
        }
        // expected per bin from the density (fine quadrature inside the bin)
        let mut chi2 = 0.0;
        let mut dof = 0usize;
        for (b, &c) in counts.iter().enumerate() {
            let x0 = lo + (hi - lo) * b as f64 / n_bins as f64;
            let x1 = lo + (hi - lo) * (b + 1) as f64 / n_bins as f64;
            let mut p = 0.0;
            let m = 64;
            for i in 0..m {
                let x = x0 + (x1 - x0) * (i as f64 + 0.5) / m as f64;
                p += lat.density(x) / 3.0 * (x1 - x0) / m as f64;
            }
            let expect = p * total as f64;
            if expect > 20.0 {
                chi2 += (c as f64 - expect).powi(2) / expect;
                dof += 1;
            }
        }
        // Wilson-Hilferty 99% quantile
        let k = dof as f64;
        let z = 2.3263478740408408;
        let crit = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
        assert!(chi2 < crit, "chi2 {chi2} >= {crit} (dof {dof})");
    }

    #[test]
    fn single_site_independent_equals_mi() {
        let lat = LatticeConfig::new(vec![0.25], 0.05, vec![6], vec![true]).unwrap();
        for k in 0..20 {
            let a = sample_mi(&lat, 3, k);
            let b = sample_independent(&lat, 6, 3, k);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mask_semantics() {
        let mut lat = lattice(12, 0.02);
        for i in 6..12 {
            lat.coupled_mask[i] = false;
        }
        // MI: exactly 6 coupled atoms every realization
        for k in 0..30 {
            let r = sample_mi(&lat, 1, k);
            assert_eq!(r.coupled.iter().filter(|&&c| c).count(), 6);
        }
        // independent: coupled count fluctuates
        let mut seen = std::collections::HashSet::new();
        for k in 0..200 {
            let r = sample_independent(&lat, 12, 1, k);
            seen.insert(r.coupled.iter().filter(|&&c| c).count());
        }
        assert!(seen.len() > 3, "only {seen:?}");
        // all masked -> every flag false; no mask -> identity
        let mut all_masked = lattice(4, 0.08);
        all_masked.coupled_mask = vec![false; 4];
        let r = sample_mi(&all_masked, 2, 0);
        assert!(r.coupled.iter().all(|&c| !c));
        let open = lattice(4, 0.08);
        let mut r2 = sample_mi(&open, 2, 0);
        let before = r2.clone();
        apply_site_mask(&mut r2, &open);
        assert_eq!(r2, before);
    }

    #[test]
    fn determinism_across_order_and_runs() {
        let lat = lattice(8, 0.08);
        let forward: Vec<_> = (0..64).map(|k| sample_mi(&lat, 77, k)).collect();
        let mut backward: Vec<_> = (0..64).rev().map(|k| sample_mi(&lat, 77, k)).collect();
        backward.reverse();
        assert_eq!(forward, backward);
        // distinct indices give distinct draws
        assert_ne!(forward[0].positions, forward[1].positions);
    }

    #[test]
    fn positions_stay_near_sites() {
        let lat = lattice(8, 0.08);
        let bound = 6.0 * 0.08 / 2f64.sqrt();
        for k in 0..100_000 {
            let r = sample_mi(&lat, 13, k);
            for (&x, &s) in r.positions.iter().zip(&r.site) {
                assert!((x - lat.site_centers[s]).abs() < bound);
            }
        }
    }

    #[test]
    fn density_matches_wannier_sum() {
        let lat = lattice(2, 0.08);
        let x = 0.11;
        let direct: f64 = lat
            .site_centers
            .iter()
            .map(|&c| wannier_density(c, 0.08, x))
            .sum();
        assert!((lat.density(x) - direct).abs() < 1e-15);
    }

    #[test]
    fn fermi_label_rejected() {
        assert!(SamplerKind::from_label("fermi").is_err());
        assert_eq!(
            SamplerKind::from_label("bec").unwrap(),
            SamplerKind::Independent
        );
    }
}
