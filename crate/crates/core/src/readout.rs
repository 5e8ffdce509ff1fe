//! Amplitude-domain readout analysis.
//!
//! The measurement chain stores pulse heights two ways: as an amplitude
//! histogram (oscilloscope view) and as a counts-vs-comparison-level
//! staircase (counter view). This module turns either into photon-number
//! information: fit Gaussian peaks to the histogram, cut the voltage axis
//! into blocks between adjacent peaks, assign photon numbers by block, and
//! difference the staircase at the block boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnr::normal_cdf;

/// Equal-width histogram of pulse amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeHistogram {
    /// Strictly increasing bin edges in volts; one more edge than bins.
    pub bin_edges_v: Vec<f64>,
    pub counts: Vec<u64>,
    pub total_events: u64,
}

impl AmplitudeHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_edges_v[1] - self.bin_edges_v[0]
    }

    pub fn centers(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, _)| 0.5 * (self.bin_edges_v[i] + self.bin_edges_v[i + 1]))
            .collect()
    }

    /// CSV with header `edge_v,count`: one row per bin keyed by its left
    /// edge, plus a final row for the right edge with a zero count.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("edge_v,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{c}\n", self.bin_edges_v[i]));
        }
        out.push_str(&format!("{},0\n", self.bin_edges_v[self.counts.len()]));
        out
    }
}

/// One fitted Gaussian peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean_v: f64,
    pub sigma_v: f64,
    pub weight: f64,
}

/// Mixture of Gaussian peaks ordered by ascending mean; component `j`
/// corresponds to photon number `j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let m = Self { components };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        let mut weight_sum = 0.0;
        for pair in self.components.windows(2) {
            if pair[1].mean_v <= pair[0].mean_v {
                return Err(Error::Domain(
                    "component means must be strictly increasing".into(),
                ));
            }
        }
        for c in &self.components {
            if !(c.sigma_v > 0.0) || c.weight < 0.0 {
                return Err(Error::Domain(
                    "components need positive sigma and non-negative weight".into(),
                ));
            }
            weight_sum += c.weight;
        }
        if (weight_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "component weights must sum to 1 within 1e-9, got {weight_sum}"
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }
}

/// Voltage-axis partition: block n = [V_n, V_{n+1}) maps to photon number n,
/// anything below the first boundary maps to zero photons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageBlocks {
    pub boundaries_v: Vec<f64>,
}

impl VoltageBlocks {
    pub fn new(boundaries_v: Vec<f64>) -> Result<Self> {
        if boundaries_v.is_empty() {
            return Err(Error::Domain("at least one boundary is required".into()));
        }
        if boundaries_v.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("boundaries must be strictly increasing".into()));
        }
        Ok(Self { boundaries_v })
    }

    /// Number of photon classes above zero.
    pub fn n_classes(&self) -> usize {
        self.boundaries_v.len()
    }
}

/// Detector counts as a function of comparator level. A count at a level
/// registers every event whose amplitude lies strictly above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStaircase {
    pub levels_v: Vec<f64>,
    pub counts: Vec<f64>,
}

impl ThresholdStaircase {
    pub fn new(levels_v: Vec<f64>, counts: Vec<f64>) -> Result<Self> {
        if levels_v.len() != counts.len() || levels_v.is_empty() {
            return Err(Error::Dimension(
                "levels and counts must be equal-length and non-empty".into(),
            ));
        }
        if levels_v.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("levels must be strictly increasing".into()));
        }
        Ok(Self { levels_v, counts })
    }

    /// CSV with header `level_v,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level_v,count\n");
        for (l, c) in self.levels_v.iter().zip(&self.counts) {
            out.push_str(&format!("{l},{c}\n"));
        }
        out
    }
}

/// Build an equal-width histogram spanning `[min, max]` with a half-bin
/// margin on both sides, so the extreme values sit at bin centers.
pub fn build_histogram(amplitudes: &[f64], n_bins: usize) -> Result<AmplitudeHistogram> {
    if amplitudes.is_empty() {
        return Err(Error::Domain("cannot histogram an empty amplitude list".into()));
    }
    if n_bins < 2 {
        return Err(Error::Domain(format!("n_bins must be at least 2, got {n_bins}")));
    }
    if amplitudes.iter().any(|a| !a.is_finite()) {
        return Err(Error::Domain("amplitudes must be finite".into()));
    }
    let min = amplitudes.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = amplitudes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if max > min {
        (max - min) / (n_bins - 1) as f64
    } else {
        // all values identical: unit width keeps every event in one bin
        1.0
    };
    let lo = min - 0.5 * width;
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0u64; n_bins];
    for a in amplitudes {
        let idx = ((a - lo) / width).floor() as usize;
        counts[idx.min(n_bins - 1)] += 1;
    }
    Ok(AmplitudeHistogram {
        bin_edges_v: edges,
        counts,
        total_events: amplitudes.len() as u64,
    })
}

fn log_normal_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Fit a k-component Gaussian mixture to binned data by expectation
/// maximization on the bin centers weighted by counts.
///
/// Initialization: means at `init_spacing * (1..=k)`, sigmas at
/// `init_spacing / 5`, equal weights. Converged when the log-likelihood
/// improves by less than 1e-9 per event, capped at 500 iterations.
pub fn fit_gaussian_mixture(
    hist: &AmplitudeHistogram,
    k: usize,
    init_spacing: f64,
) -> Result<GaussianMixture> {
    if k < 1 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    if !(init_spacing > 0.0) {
        return Err(Error::Domain(format!(
            "init_spacing must be positive, got {init_spacing}"
        )));
    }
    let centers = hist.centers();
    let data: Vec<(f64, f64)> = centers
        .iter()
        .zip(&hist.counts)
        .filter(|(_, c)| **c > 0)
        .map(|(x, c)| (*x, *c as f64))
        .collect();
    if data.len() < k {
        return Err(Error::Degenerate(format!(
            "only {} occupied bins for {k} components; use fewer components",
            data.len()
        )));
    }
    let total: f64 = data.iter().map(|(_, c)| c).sum();
    let sigma_floor = hist.bin_width() / 10.0;

    let mut means: Vec<f64> = (1..=k).map(|j| init_spacing * j as f64).collect();
    let mut sigmas = vec![init_spacing / 5.0; k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut prev_ll = f64::NEG_INFINITY;
    for _iter in 0..500 {
        // E step in log space
        let mut resp = vec![0.0; data.len() * k];
        let mut ll = 0.0;
        for (b, (x, c)) in data.iter().enumerate() {
            let mut logs = vec![f64::NEG_INFINITY; k];
            for j in 0..k {
                if weights[j] > 0.0 {
                    logs[j] = weights[j].ln() + log_normal_pdf(*x, means[j], sigmas[j]);
                }
            }
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::Degenerate(
                    "all components lost every data point; use fewer components".into(),
                ));
            }
            let mut norm = 0.0;
            for j in 0..k {
                let p = (logs[j] - m).exp();
                resp[b * k + j] = p;
                norm += p;
            }
            for j in 0..k {
                resp[b * k + j] /= norm;
            }
            ll += c * (m + norm.ln());
        }

        // likelihood must not decrease between EM iterations
        assert!(
            ll >= prev_ll - 1e-9 * total.max(1.0),
            "EM log-likelihood decreased: {prev_ll} -> {ll}"
        );
        let improved = ll - prev_ll;
        prev_ll = ll;

        // M step
        for j in 0..k {
            let mut nk = 0.0;
            let mut mean = 0.0;
            for (b, (x, c)) in data.iter().enumerate() {
                let r = resp[b * k + j] * c;
                nk += r;
                mean += r * x;
            }
            if nk <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "component {j} starved of data; use fewer components"
                )));
            }
            mean /= nk;
            let mut var = 0.0;
            for (b, (x, c)) in data.iter().enumerate() {
                var += resp[b * k + j] * c * (x - mean) * (x - mean);
            }
            var /= nk;
            let sigma = var.sqrt();
            if sigma < sigma_floor {
                return Err(Error::Degenerate(format!(
                    "component {j} collapsed to sigma = {sigma} below a tenth of the \
                     bin width; use fewer components"
                )));
            }
            means[j] = mean;
            sigmas[j] = sigma;
            weights[j] = nk / total;
        }

        if improved.abs() < 1e-9 * total {
            break;
        }
    }

    let mut comps: Vec<GaussianComponent> = (0..k)
        .map(|j| GaussianComponent {
            mean_v: means[j],
            sigma_v: sigmas[j],
            weight: weights[j],
        })
        .collect();
    comps.sort_by(|a, b| a.mean_v.total_cmp(&b.mean_v));
    let wsum: f64 = comps.iter().map(|c| c.weight).sum();
    for c in &mut comps {
        c.weight /= wsum;
    }
    GaussianMixture::new(comps)
}

/// Cut the voltage axis into photon-number blocks: the first boundary is the
/// explicit noise-floor cut, the rest are midpoints of adjacent fitted means.
pub fn voltage_blocks(mixture: &GaussianMixture, zero_boundary: f64) -> Result<VoltageBlocks> {
    mixture.validate()?;
    if zero_boundary >= mixture.components[0].mean_v {
        return Err(Error::Domain(format!(
            "zero boundary {zero_boundary} must stay below the first component mean {}",
            mixture.components[0].mean_v
        )));
    }
    let mut boundaries = vec![zero_boundary];
    for pair in mixture.components.windows(2) {
        boundaries.push(0.5 * (pair[0].mean_v + pair[1].mean_v));
    }
    VoltageBlocks::new(boundaries)
}

/// Probability that an event drawn from component n lands inside block n.
/// Entry `j` of the result refers to photon number `j + 1`.
pub fn assignment_probability(
    mixture: &GaussianMixture,
    blocks: &VoltageBlocks,
) -> Result<Vec<f64>> {
    mixture.validate()?;
    if blocks.n_classes() != mixture.k() {
        return Err(Error::Dimension(format!(
            "{} blocks for {} components; need exactly one block per component",
            blocks.n_classes(),
            mixture.k()
        )));
    }
    let k = mixture.k();
    let mut probs = Vec::with_capacity(k);
    for (j, c) in mixture.components.iter().enumerate() {
        let lo = blocks.boundaries_v[j];
        let mass_hi = if j + 1 < k {
            normal_cdf((blocks.boundaries_v[j + 1] - c.mean_v) / c.sigma_v)
        } else {
            1.0
        };
        let mass_lo = normal_cdf((lo - c.mean_v) / c.sigma_v);
        probs.push((mass_hi - mass_lo).clamp(0.0, 1.0));
    }
    Ok(probs)
}

/// Assign a photon number to each amplitude: the number of boundaries at or
/// below it. An amplitude exactly on a boundary joins the higher class.
pub fn assign_photon_numbers(amplitudes: &[f64], blocks: &VoltageBlocks) -> Vec<u32> {
    amplitudes
        .iter()
        .map(|a| blocks.boundaries_v.partition_point(|b| b <= a) as u32)
        .collect()
}

/// Synthesize the counter view: counts of events strictly above each level.
pub fn synthesize_staircase(amplitudes: &[f64], levels_v: &[f64]) -> Result<ThresholdStaircase> {
    let counts = levels_v
        .iter()
        .map(|l| amplitudes.iter().filter(|a| **a > *l).count() as f64)
        .collect();
    ThresholdStaircase::new(levels_v.to_vec(), counts)
}

/// Extract per-photon-number event counts from a staircase by differencing
/// the (linearly interpolated) counts at the block boundaries. Entry `j`
/// refers to photon number `j + 1`; the last class is open-ended.
pub fn staircase_to_distribution(
    staircase: &ThresholdStaircase,
    blocks: &VoltageBlocks,
) -> Result<Vec<f64>> {
    let max_count = staircase.counts.iter().cloned().fold(0.0, f64::max);
    let tolerance = 0.01 * max_count;
    for pair in staircase.counts.windows(2) {
        if pair[1] > pair[0] + tolerance {
            return Err(Error::Domain(format!(
                "staircase rises by {} between adjacent levels, beyond the noise \
                 tolerance {tolerance}",
                pair[1] - pair[0]
            )));
        }
    }
    let first = *staircase.levels_v.first().unwrap();
    let last = *staircase.levels_v.last().unwrap();
    if blocks.boundaries_v[0] < first || *blocks.boundaries_v.last().unwrap() > last {
        return Err(Error::Domain(format!(
            "staircase levels [{first}, {last}] do not cover the block boundaries"
        )));
    }

    let interp = |v: f64| -> f64 {
        let idx = staircase.levels_v.partition_point(|l| *l <= v);
        if idx == 0 {
            return staircase.counts[0];
        }
        if idx == staircase.levels_v.len() {
            return *staircase.counts.last().unwrap();
        }
        let (l0, l1) = (staircase.levels_v[idx - 1], staircase.levels_v[idx]);
        let (c0, c1) = (staircase.counts[idx - 1], staircase.counts[idx]);
        c0 + (c1 - c0) * (v - l0) / (l1 - l0)
    };

    // interior classes are differences at adjacent boundaries; the final
    // class keeps everything above the last boundary
    let k = blocks.n_classes();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let hi = if j + 1 < k {
            interp(blocks.boundaries_v[j + 1])
        } else {
            0.0
        };
        out.push(interp(blocks.boundaries_v[j]) - hi);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn mixture_16mv(k: usize, sigma: f64) -> GaussianMixture {
        let comps = (1..=k)
            .map(|j| GaussianComponent {
                mean_v: 16.0e-3 * j as f64,
                sigma_v: sigma,
                weight: 1.0 / k as f64,
            })
            .collect();
        GaussianMixture::new(comps).unwrap()
    }

    #[test]
    fn histogram_of_identical_values() {
        let h = build_histogram(&[1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(h.total_events, 3);
        assert_eq!(h.counts.iter().filter(|c| **c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<u64>(), 3);
    }

    #[test]
    fn histogram_conserves_counts_and_recovers_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(16.0e-3, 3.0e-3).unwrap();
        let amps: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
        let h = build_histogram(&amps, 100).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 100_000);
        let total: f64 = h.counts.iter().sum::<u64>() as f64;
        let mean: f64 = h
            .centers()
            .iter()
            .zip(&h.counts)
            .map(|(x, c)| x * *c as f64)
            .sum::<f64>()
            / total;
        close(mean, 16.0e-3, 0.1e-3);
    }

    #[test]
    fn histogram_rejects_empty_input() {
        assert!(build_histogram(&[], 10).is_err());
    }

    #[test]
    fn em_recovers_known_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut amps = Vec::new();
        for j in 1..=6 {
            let normal = Normal::new(16.0e-3 * j as f64, 3.0e-3).unwrap();
            for _ in 0..100_000 / 6 {
                amps.push(normal.sample(&mut rng));
            }
        }
        let h = build_histogram(&amps, 200).unwrap();
        let fit = fit_gaussian_mixture(&h, 6, 16.0e-3).unwrap();
        for (j, c) in fit.components.iter().enumerate() {
            close(c.mean_v, 16.0e-3 * (j + 1) as f64, 0.3e-3);
            close(c.weight, 1.0 / 6.0, 0.02);
        }
    }

    #[test]
    fn em_single_component_matches_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(20.0e-3, 2.5e-3).unwrap();
        let amps: Vec<f64> = (0..50_000).map(|_| normal.sample(&mut rng)).collect();
        let n = amps.len() as f64;
        let mean = amps.iter().sum::<f64>() / n;
        let sd = (amps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        let h = build_histogram(&amps, 200).unwrap();
        let fit = fit_gaussian_mixture(&h, 1, 20.0e-3).unwrap();
        close(fit.components[0].mean_v, mean, mean * 0.01);
        close(fit.components[0].sigma_v, sd, sd * 0.01);
    }

    #[test]
    fn em_degenerate_component_is_reported() {
        // two far-apart spikes cannot feed three components
        let mut amps = vec![10.0e-3; 400];
        amps.extend(vec![20.0e-3; 400]);
        let h = build_histogram(&amps, 50).unwrap();
        let err = fit_gaussian_mixture(&h, 3, 10.0e-3);
        assert!(err.is_err(), "{err:?}");
    }

    #[test]
    fn blocks_are_midpoints() {
        let m = GaussianMixture::new(
            [16.0e-3, 32.0e-3, 48.0e-3]
                .iter()
                .map(|mv| GaussianComponent {
                    mean_v: *mv,
                    sigma_v: 3.0e-3,
                    weight: 1.0 / 3.0,
                })
                .collect(),
        )
        .unwrap();
        let b = voltage_blocks(&m, 8.0e-3).unwrap();
        assert_eq!(b.boundaries_v.len(), 3);
        close(b.boundaries_v[0], 8.0e-3, 1e-12);
        close(b.boundaries_v[1], 24.0e-3, 1e-12);
        close(b.boundaries_v[2], 40.0e-3, 1e-12);
        assert!(voltage_blocks(&m, 17.0e-3).is_err());
    }

    #[test]
    fn blocks_single_component() {
        let m = mixture_16mv(1, 3.0e-3);
        let b = voltage_blocks(&m, 8.0e-3).unwrap();
        assert_eq!(b.boundaries_v, vec![8.0e-3]);
    }

    #[test]
    fn midpoint_equals_equal_posterior_crossing_for_equal_sigmas() {
        let m = mixture_16mv(2, 3.0e-3);
        // with equal sigmas and weights the posteriors cross where the
        // distances to the two means are equal, which is the midpoint
        let mid = 0.5 * (m.components[0].mean_v + m.components[1].mean_v);
        let d0 = (mid - m.components[0].mean_v).abs();
        let d1 = (mid - m.components[1].mean_v).abs();
        close(d0, d1, 1e-15);
        let b = voltage_blocks(&m, 8.0e-3).unwrap();
        close(b.boundaries_v[1], mid, 1e-15);
    }

    #[test]
    fn assignment_probability_interior_value() {
        let m = mixture_16mv(8, 3.0e-3);
        let b = voltage_blocks(&m, 8.0e-3).unwrap();
        let p = assignment_probability(&m, &b).unwrap();
        // mass within +-8 mV of the mean at sigma = 3 mV
        let expected = normal_cdf(8.0 / 3.0) - normal_cdf(-8.0 / 3.0);
        for v in &p[..7] {
            close(*v, expected, 1e-6);
            close(*v, 0.9923, 5e-4);
        }
        assert!(p[7] > expected); // last block is open above
    }

    #[test]
    fn assignment_probability_sigma_to_zero() {
        let m = mixture_16mv(4, 1e-9);
        let b = voltage_blocks(&m, 8.0e-3).unwrap();
        for v in assignment_probability(&m, &b).unwrap() {
            close(v, 1.0, 1e-12);
        }
    }

    #[test]
    fn assignment_probability_growing_sigma_decreases() {
        let comps = (1..=6)
            .map(|j| GaussianComponent {
                mean_v: 16.0e-3 * j as f64,
                sigma_v: 3.0e-3 * (j as f64).sqrt(),
                weight: 1.0 / 6.0,
            })
            .collect();
        let m = GaussianMixture::new(comps).unwrap();
        let b = voltage_blocks(&m, 8.0e-3).unwrap();
        let p = assignment_probability(&m, &b).unwrap();
        // frozen from the Gaussian CDF oracle: mass within +-8 mV at
        // sigma_n = 3 sqrt(n) mV (last entry open above)
        let oracle = [
            0.992339239, 0.940653561, 0.876342290, 0.817577561, 0.766962018, 0.861848541,
        ];
        for (v, o) in p.iter().zip(oracle) {
            close(*v, o, 1e-6);
        }
        for w in p[..5].windows(2) {
            assert!(w[1] < w[0], "interior entries must strictly decrease: {p:?}");
        }
    }

    #[test]
    fn assign_examples() {
        let m = mixture_16mv(3, 3.0e-3);
        let b = voltage_blocks(&m, 8.0e-3).unwrap();
        assert_eq!(assign_photon_numbers(&[0.0], &b), vec![0]);
        // amplitude exactly on a boundary joins the higher class
        assert_eq!(assign_photon_numbers(&[24.0e-3], &b), vec![2]);
        assert_eq!(
            assign_photon_numbers(&[5.0e-3, 16.0e-3, 31.0e-3, 60.0e-3], &b),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn assign_is_monotone_in_amplitude() {
        let m = mixture_16mv(6, 3.0e-3);
        let b = voltage_blocks(&m, 8.0e-3).unwrap();
        let amps: Vec<f64> = (0..2000).map(|i| i as f64 * 0.1e-3).collect();
        let classes = assign_photon_numbers(&amps, &b);
        for w in classes.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn staircase_plateau_differences() {
        let staircase = ThresholdStaircase::new(
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
            vec![1000.0, 1000.0, 600.0, 600.0, 100.0, 100.0, 0.0, 0.0],
        )
        .unwrap();
        let blocks = VoltageBlocks::new(vec![0.5, 2.5, 4.5]).unwrap();
        let counts = staircase_to_distribution(&staircase, &blocks).unwrap();
        close(counts[0], 400.0, 1e-9);
        close(counts[1], 500.0, 1e-9);
        close(counts[2], 100.0, 1e-9);
    }

    #[test]
    fn staircase_all_zero() {
        let staircase =
            ThresholdStaircase::new(vec![0.0, 1.0, 2.0], vec![0.0, 0.0, 0.0]).unwrap();
        let blocks = VoltageBlocks::new(vec![0.5, 1.5]).unwrap();
        let counts = staircase_to_distribution(&staircase, &blocks).unwrap();
        assert!(counts.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn staircase_rejects_rising_counts() {
        let staircase =
            ThresholdStaircase::new(vec![0.0, 1.0, 2.0], vec![100.0, 40.0, 90.0]).unwrap();
        let blocks = VoltageBlocks::new(vec![0.5, 1.5]).unwrap();
        assert!(staircase_to_distribution(&staircase, &blocks).is_err());
    }

    #[test]
    fn staircase_requires_boundary_coverage() {
        let staircase =
            ThresholdStaircase::new(vec![1.0, 2.0], vec![10.0, 0.0]).unwrap();
        let blocks = VoltageBlocks::new(vec![0.5, 1.5]).unwrap();
        assert!(staircase_to_distribution(&staircase, &blocks).is_err());
    }

    #[test]
    fn staircase_agrees_with_direct_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // synthetic mu=1-ish mixture of 0..4 photon pulses at 16 mV spacing
        let weights = [0.37, 0.37, 0.18, 0.06, 0.02];
        let mut amps = Vec::new();
        for _ in 0..100_000 {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut n = 0usize;
            for (j, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    n = j;
                    break;
                }
            }
            let mean = 16.0e-3 * n as f64;
            let noise = Normal::new(0.0, 3.0e-3).unwrap().sample(&mut rng);
            amps.push(mean + noise);
        }
        let m = mixture_16mv(4, 3.0e-3);
        let blocks = voltage_blocks(&m, 8.0e-3).unwrap();
        let levels: Vec<f64> = (0..80).map(|i| i as f64 * 1.0e-3).collect();
        let staircase = synthesize_staircase(&amps, &levels).unwrap();
        let from_staircase = staircase_to_distribution(&staircase, &blocks).unwrap();
        let direct = assign_photon_numbers(&amps, &blocks);
        let mut tallies = vec![0.0; 5];
        for c in direct {
            tallies[c as usize] += 1.0;
        }
        let total: f64 = from_staircase.iter().sum();
        for (j, sc) in from_staircase.iter().enumerate() {
            let rel = (sc - tallies[j + 1]).abs() / total;
            assert!(rel < 0.01, "class {}: {sc} vs {}", j + 1, tallies[j + 1]);
        }
        // conservation: classes together equal the count above the floor
        let floor_count: f64 = amps.iter().filter(|a| **a > 8.0e-3).count() as f64;
        assert!((total - floor_count).abs() / floor_count < 0.01);
    }
}
