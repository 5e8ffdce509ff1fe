//! Photon and click statistics for an N-pixel multiplexed detector.
//!
//! The statistical model: each optical pulse carries a Poisson-distributed
//! photon number; every photon lands on one pixel according to the beam
//! profile and survives with probability `efficiency`; dark counts fire one
//! random pixel per gate; each fired pixel can induce one nearest-neighbor
//! crosstalk click. The number of *distinct* fired pixels is the registered
//! click count.
//!
//! For uniform illumination the click distribution has a closed form built
//! from binomial thinning and the occupancy distribution of d photons over
//! N pixels; it is evaluated here with a collision recursion that involves
//! only non-negative terms, so it is stable to machine precision (the
//! equivalent inclusion-exclusion sum cancels catastrophically for large
//! photon numbers). Non-uniform (Gaussian spot) click statistics are
//! Monte-Carlo only: exact non-uniform occupancy is exponential in N.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::seed;

/// Maximum supported pixel count.
pub const MAX_PIXELS: usize = 1024;

/// Transverse intensity profile of the illuminating beam across the pixel
/// stripes. The profile is one-dimensional: pixels are parallel slices of
/// the sensing area and the orthogonal direction integrates out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BeamProfile {
    /// Every pixel is equally likely to receive a photon.
    Uniform,
    /// Centered Gaussian spot; `sigma_fraction` is the ratio of the spot
    /// standard deviation to the array half-width.
    GaussianSpot { sigma_fraction: f64 },
}

/// Statistical identity of the detector array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorArrayConfig {
    /// Number of pixels N in the series array.
    pub n_pixels: usize,
    /// Per-photon detection probability η.
    pub efficiency: f64,
    pub beam_profile: BeamProfile,
    /// Probability per pulse gate of a dark count firing one random pixel.
    pub dark_count_prob: f64,
    /// Probability per fired pixel of inducing one neighbor click.
    pub crosstalk_prob: f64,
}

impl DetectorArrayConfig {
    pub fn new(
        n_pixels: usize,
        efficiency: f64,
        beam_profile: BeamProfile,
        dark_count_prob: f64,
        crosstalk_prob: f64,
    ) -> Result<Self> {
        let cfg = Self {
            n_pixels,
            efficiency,
            beam_profile,
            dark_count_prob,
            crosstalk_prob,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Uniformly illuminated array with no dark counts or crosstalk.
    pub fn uniform(n_pixels: usize, efficiency: f64) -> Result<Self> {
        Self::new(n_pixels, efficiency, BeamProfile::Uniform, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pixels < 1 || self.n_pixels > MAX_PIXELS {
            return Err(Error::Domain(format!(
                "n_pixels must be in 1..={MAX_PIXELS}, got {}",
                self.n_pixels
            )));
        }
        for (name, p) in [
            ("efficiency", self.efficiency),
            ("dark_count_prob", self.dark_count_prob),
            ("crosstalk_prob", self.crosstalk_prob),
        ] {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::Domain(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if let BeamProfile::GaussianSpot { sigma_fraction } = self.beam_profile {
            if !(sigma_fraction > 0.0) || !sigma_fraction.is_finite() {
                return Err(Error::Domain(format!(
                    "sigma_fraction must be positive, got {sigma_fraction}"
                )));
            }
        }
        Ok(())
    }
}

/// A distribution over photon (or click) numbers `0..probs.len()`.
///
/// A complete distribution sums to one; a truncated one records the mass
/// above the truncation point in `tail_mass` and is never renormalized,
/// since renormalizing probe columns would bias tomography.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonDistribution {
    probs: Vec<f64>,
    tail_mass: f64,
}

impl PhotonDistribution {
    /// A complete distribution; entries must be non-negative and sum to one
    /// within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::check_entries(&probs)?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "probabilities must sum to 1 within 1e-9, got {sum}"
            )));
        }
        Ok(Self {
            probs,
            tail_mass: 0.0,
        })
    }

    /// A truncated distribution with explicit tail mass above the last entry.
    pub fn truncated(probs: Vec<f64>, tail_mass: f64) -> Result<Self> {
        Self::check_entries(&probs)?;
        if !(0.0..=1.0).contains(&tail_mass) {
            return Err(Error::Domain(format!(
                "tail_mass must lie in [0, 1], got {tail_mass}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if sum + tail_mass > 1.0 + 1e-9 {
            return Err(Error::Domain(format!(
                "probabilities plus tail mass exceed 1: {}",
                sum + tail_mass
            )));
        }
        Ok(Self { probs, tail_mass })
    }

    fn check_entries(probs: &[f64]) -> Result<()> {
        if probs.is_empty() {
            return Err(Error::Domain("distribution must not be empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Domain(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of exactly `n`; zero beyond the stored range.
    pub fn prob(&self, n: usize) -> f64 {
        self.probs.get(n).copied().unwrap_or(0.0)
    }

    pub fn len(&self)  -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn is_truncated(&self) -> bool {
        self.tail_mass > 0.0
    }

    /// Mean of the stored range (ignores tail mass).
    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }
}

/// Matrix of truncated Poisson probe distributions: rows are photon numbers
/// `0..=m_max`, columns are probes, one per mean photon number in `mus`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMatrix {
    /// `entries[m][k]` = probability of m photons in probe k.
    entries: Vec<Vec<f64>>,
    mus: Vec<f64>,
    /// Per-probe Poisson mass above `m_max`, recorded rather than folded in.
    tail_mass: Vec<f64>,
}

impl ProbabilityMatrix {
    /// Build from explicit columns (row-major entries). Column sums may be
    /// below one; the deficit per column is recorded as tail mass.
    pub fn from_entries(entries: Vec<Vec<f64>>, mus: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Dimension("entries must have at least one row".into()));
        }
        let k = mus.len();
        if entries.iter().any(|row| row.len() != k) {
            return Err(Error::Dimension(format!(
                "every row must have {k} probe columns"
            )));
        }
        let mut tail_mass = vec![0.0; k];
        for (col, tail) in tail_mass.iter_mut().enumerate() {
            let mut sum = 0.0;
            for row in &entries {
                let v = row[col];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Domain(
                        "matrix entries must be finite and non-negative".into(),
                    ));
                }
                sum += v;
            }
            if sum > 1.0 + 1e-9 {
                return Err(Error::Domain(format!(
                    "column {col} sums to {sum}, above 1"
                )));
            }
            *tail = (1.0 - sum).max(0.0);
        }
        Ok(Self {
            entries,
            mus,
            tail_mass,
        })
    }

    pub fn m_max(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn n_probes(&self) -> usize {
        self.mus.len()
    }

    pub fn entry(&self, m: usize, k: usize) -> f64 {
        self.entries[m][k]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn mus(&self) -> &[f64] {
        &self.mus
    }

    pub fn tail_mass(&self, k: usize) -> f64 {
        self.tail_mass[k]
    }

    /// Probe column `k` as a truncated distribution.
    pub fn column(&self, k: usize) -> Result<PhotonDistribution> {
        if k >= self.n_probes() {
            return Err(Error::Dimension(format!(
                "probe index {k} out of range 0..{}",
                self.n_probes()
            )));
        }
        let col: Vec<f64> = self.entries.iter().map(|row| row[k]).collect();
        PhotonDistribution::truncated(col, self.tail_mass[k])
    }

    /// CSV with header `m,<mu_0>,<mu_1>,...` and one row per photon number.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m");
        for mu in &self.mus {
            out.push_str(&format!(",{mu}"));
        }
        out.push('\n');
        for (m, row) in self.entries.iter().enumerate() {
            out.push_str(&m.to_string());
            for v in row {
                out.push_str(&format!(",{v:.9}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty probability matrix CSV".into()))?;
        let mut fields = header.split(',');
        if fields.next().map(str::trim) != Some("m") {
            return Err(Error::Parse("expected header starting with 'm'".into()));
        }
        let mus: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad mu '{f}': {e}")))
            })
            .collect::<Result<_>>()?;
        let mut entries = Vec::new();
        for line in lines {
            let mut fields = line.split(',');
            let _m = fields.next();
            let row: Vec<f64> = fields
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("bad entry '{f}': {e}")))
                })
                .collect::<Result<_>>()?;
            entries.push(row);
        }
        Self::from_entries(entries, mus)
    }
}

/// One simulated pulse gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub pulse_index: u64,
    /// Photons actually generated for this pulse; available in simulation,
    /// unknown for measured data.
    pub true_photon_number: Option<u32>,
    /// Number of distinct fired pixels.
    pub clicked_pixels: u32,
}

/// Monte-Carlo click data for one probe setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickDataset {
    pub records: Vec<ClickRecord>,
    /// Mean photons per pulse of the probe.
    pub mu: f64,
    pub n_pulses: u64,
}

impl ClickDataset {
    /// Tally of click counts `0..=n_max`; clicks above `n_max` are dropped.
    pub fn click_histogram(&self, n_max: usize) -> Vec<u64> {
        let mut counts = vec![0u64; n_max + 1];
        for rec in &self.records {
            let n = rec.clicked_pixels as usize;
            if n <= n_max {
                counts[n] += 1;
            }
        }
        counts
    }

    /// Empirical click distribution over `0..=n_max` (complete: the dropped
    /// mass above `n_max` is kept as tail).
    pub fn click_frequencies(&self, n_max: usize) -> Result<PhotonDistribution> {
        let counts = self.click_histogram(n_max);
        let total = self.n_pulses as f64;
        let probs: Vec<f64> = counts.iter().map(|c| *c as f64 / total).collect();
        let sum: f64 = probs.iter().sum();
        PhotonDistribution::truncated(probs, (1.0 - sum).max(0.0))
    }
}

/// Truncated Poisson probe matrix for the given mean photon numbers.
///
/// Columns are the Poisson pmf `e^{-mu} mu^m / m!` for `m = 0..=m_max`; the
/// residual mass above `m_max` is recorded per column, not renormalized.
pub fn poisson_input_matrix(mus: &[f64], m_max: usize) -> Result<ProbabilityMatrix> {
    if m_max == 0 {
        return Err(Error::Domain("m_max must be at least 1".into()));
    }
    if mus.is_empty() {
        return Err(Error::Domain("at least one probe mu is required".into()));
    }
    for mu in mus {
        if !mu.is_finite() || *mu < 0.0 {
            return Err(Error::Domain(format!("mu must be finite and >= 0, got {mu}")));
        }
    }
    let mut entries = vec![vec![0.0; mus.len()]; m_max + 1];
    for (k, &mu) in mus.iter().enumerate() {
        for (m, p) in poisson_pmf(mu, m_max).into_iter().enumerate() {
            entries[m][k] = p;
        }
    }
    ProbabilityMatrix::from_entries(entries, mus.to_vec())
}

/// Poisson pmf values for `m = 0..=m_max`, computed by the stable upward
/// recursion `p_m = p_{m-1} mu / m`.
pub fn poisson_pmf(mu: f64, m_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m_max + 1);
    let mut p = (-mu).exp();
    out.push(p);
    for m in 1..=m_max {
        p *= mu / m as f64;
        out.push(p);
    }
    out
}

/// Per-pixel photon landing probabilities under the configured beam profile.
///
/// The array spans `[-1, 1]` in units of its half-width and is split into N
/// equal stripes. A Gaussian spot is centered on the array with standard
/// deviation `sigma_fraction`; stripe masses are renormalized to the array
/// extent, so the result always sums to one.
pub fn pixel_hit_probabilities(config: &DetectorArrayConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let n = config.n_pixels;
    match config.beam_profile {
        BeamProfile::Uniform => Ok(vec![1.0 / n as f64; n]),
        BeamProfile::GaussianSpot { sigma_fraction } => {
            let sigma = sigma_fraction;
            let mut masses = Vec::with_capacity(n);
            for i in 0..n {
                let a = -1.0 + 2.0 * i as f64 / n as f64;
                let b = a + 2.0 / n as f64;
                masses.push(normal_cdf(b / sigma) - normal_cdf(a / sigma));
            }
            let total: f64 = masses.iter().sum();
            if total <= 0.0 {
                return Err(Error::Degenerate(
                    "beam profile mass on the array underflowed to zero".into(),
                ));
            }
            for m in &mut masses {
                *m /= total;
            }
            Ok(masses)
        }
    }
}

/// Standard normal CDF.
pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Occupancy distribution: probability that `d` balls dropped uniformly on
/// `n_pixels` boxes occupy exactly `k` distinct boxes, for `k = 0..=d`.
///
/// The recursion adds one ball at a time and has only non-negative terms.
fn occupancy_distribution(d: usize, n_pixels: usize) -> Vec<f64> {
    let n = n_pixels as f64;
    let mut q = vec![0.0; d + 1];
    q[0] = 1.0;
    for placed in 0..d {
        let mut next = vec![0.0; d + 1];
        for k in 0..=placed {
            if q[k] == 0.0 {
                continue;
            }
            // ball lands on an already-occupied pixel...
            next[k] += q[k] * (k as f64 / n);
            // ...or on a fresh one
            next[k + 1] += q[k] * ((n - k as f64) / n);
        }
        q = next;
    }
    q
}

/// Exact click distribution for `m` photons on a uniformly illuminated
/// N-pixel array with per-photon efficiency `eta`.
///
/// Each photon is detected independently with probability `eta`; detected
/// photons land uniformly on pixels, and the click count is the number of
/// distinct occupied pixels. Returns the distribution over `0..=min(m, N)`.
pub fn click_distribution_uniform(
    m: usize,
    n_pixels: usize,
    eta: f64,
) -> Result<PhotonDistribution> {
    if n_pixels < 1 || n_pixels > MAX_PIXELS {
        return Err(Error::Domain(format!(
            "n_pixels must be in 1..={MAX_PIXELS}, got {n_pixels}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) || !eta.is_finite() {
        return Err(Error::Domain(format!("eta must lie in [0, 1], got {eta}")));
    }
    let n_top = m.min(n_pixels);
    let mut out = vec![0.0; n_top + 1];
    // binomial weights over the detected photon count d, by upward recursion
    let mut w = (1.0 - eta).powi(m as i32); // d = 0
    if eta == 1.0 {
        w = if m == 0 { 1.0 } else { 0.0 };
    }
    for d in 0..=m {
        if d > 0 {
            if eta == 1.0 {
                w = if d == m { 1.0 } else { 0.0 };
            } else {
                w *= (m - d + 1) as f64 / d as f64 * eta / (1.0 - eta);
            }
        }
        if w == 0.0 {
            continue;
        }
        let occ = occupancy_distribution(d, n_pixels);
        for (k, q) in occ.iter().enumerate() {
            if k <= n_top {
                out[k] += w * q;
            }
        }
    }
    PhotonDistribution::new(out)
}

/// Click distribution marginalized over a Poisson photon number with mean
/// `mu`, for a uniformly illuminated array. Photon numbers are summed until
/// the remaining Poisson mass drops below 1e-12; the remainder is recorded
/// as tail mass of the returned distribution.
pub fn poisson_click_distribution(
    mu: f64,
    n_pixels: usize,
    eta: f64,
) -> Result<PhotonDistribution> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::Domain(format!("mu must be finite and >= 0, got {mu}")));
    }
    let mut out = vec![0.0; n_pixels + 1];
    let mut p = (-mu).exp();
    let mut covered = p;
    let mut m = 0usize;
    loop {
        let clicks = click_distribution_uniform(m, n_pixels, eta)?;
        for (k, q) in clicks.probs().iter().enumerate() {
            out[k] += p * q;
        }
        if 1.0 - covered < 1e-12 || m > 100 + (10.0 * mu) as usize {
            break;
        }
        m += 1;
        p *= mu / m as f64;
        covered += p;
    }
    let sum: f64 = out.iter().sum();
    PhotonDistribution::truncated(out, (1.0 - sum).max(0.0))
}

/// Diagonal fidelity of an ideal N-pixel multiplexed detector:
/// the probability that `n` incident photons produce exactly `n` clicks,
/// `(eta / N)^n * N! / (N - n)!`, evaluated as a running product.
pub fn ideal_fidelity(n: usize, n_pixels: usize, eta: f64) -> Result<f64> {
    if n > n_pixels {
        return Err(Error::Domain(format!(
            "photon number {n} exceeds pixel count {n_pixels}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) || !eta.is_finite() {
        return Err(Error::Domain(format!("eta must lie in [0, 1], got {eta}")));
    }
    let big_n = n_pixels as f64;
    let mut acc = 1.0;
    for i in 0..n {
        acc *= eta * (big_n - i as f64) / big_n;
    }
    Ok(acc)
}

/// System detection efficiency `(PCR - DCR) / PR` from pulse, dark, and
/// photon rates in counts per second.
pub fn sde(pcr: f64, dcr: f64, pr: f64) -> Result<f64> {
    if !(pr > 0.0) {
        return Err(Error::Domain(format!("photon rate must be positive, got {pr}")));
    }
    if dcr < 0.0 || pcr < dcr {
        return Err(Error::Domain(format!(
            "require pcr >= dcr >= 0, got pcr={pcr}, dcr={dcr} (miscalibration?)"
        )));
    }
    Ok((pcr - dcr) / pr)
}

/// Simulate `n_pulses` pulse gates at mean photon number `mu`.
///
/// Per pulse: draw `m ~ Poisson(mu)`; for each photon draw a pixel from the
/// beam profile and keep it with probability `eta`; with probability
/// `dark_count_prob` fire one uniformly random pixel; then every fired pixel
/// independently fires one uniformly random neighbor with probability
/// `crosstalk_prob` (a single generation, no cascades). The click count is
/// the number of distinct fired pixels.
///
/// Each pulse consumes an independent RNG stream derived from `seed` and the
/// pulse index, so the result is identical however pulses are batched.
pub fn sample_click_dataset(
    config: &DetectorArrayConfig,
    mu: f64,
    n_pulses: u64,
    seed: u64,
) -> Result<ClickDataset> {
    config.validate()?;
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::Domain(format!("mu must be finite and >= 0, got {mu}")));
    }
    if n_pulses < 1 {
        return Err(Error::Domain("n_pulses must be at least 1".into()));
    }
    let hit = pixel_hit_probabilities(config)?;
    let mut cumulative = Vec::with_capacity(hit.len());
    let mut acc = 0.0;
    for p in &hit {
        acc += p;
        cumulative.push(acc);
    }
    let poisson = if mu > 0.0 {
        Some(rand_distr::Poisson::new(mu).map_err(|e| Error::Domain(e.to_string()))?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(n_pulses as usize);
    for pulse in 0..n_pulses {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "pnr.pulse", pulse));
        let m = match &poisson {
            Some(d) => d.sample(&mut rng) as u64,
            None => 0,
        };
        let clicked = simulate_pulse_clicks(config, &cumulative, m, &mut rng);
        records.push(ClickRecord {
            pulse_index: pulse,
            true_photon_number: Some(m.min(u32::MAX as u64) as u32),
            clicked_pixels: clicked,
        });
    }
    Ok(ClickDataset {
        records,
        mu,
        n_pulses,
    })
}

fn simulate_pulse_clicks(
    config: &DetectorArrayConfig,
    cumulative_hit: &[f64],
    m: u64,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let n = config.n_pixels;
    let mut fired = vec![false; n];

    // photons: pixel draw first, then detection thinning
    for _ in 0..m {
        let u: f64 = rng.gen();
        let pixel = cumulative_hit.partition_point(|c| *c < u).min(n - 1);
        let detected = config.efficiency > 0.0
            && (config.efficiency >= 1.0 || rng.gen::<f64>() < config.efficiency);
        if detected {
            fired[pixel] = true;
        }
    }

    // at most one dark event per gate
    if config.dark_count_prob > 0.0 && rng.gen::<f64>() < config.dark_count_prob {
        let pixel = rng.gen_range(0..n);
        fired[pixel] = true;
    }

    // single-generation nearest-neighbor crosstalk, scanned in pixel order
    if config.crosstalk_prob > 0.0 && n > 1 {
        let primary: Vec<usize> = (0..n).filter(|i| fired[*i]).collect();
        for pixel in primary {
            if rng.gen::<f64>() < config.crosstalk_prob {
                let neighbor = if pixel == 0 {
                    1
                } else if pixel == n - 1 {
                    n - 2
                } else if rng.gen::<bool>() {
                    pixel + 1
                } else {
                    pixel - 1
                };
                fired[neighbor] = true;
            }
        }
    }

    fired.iter().filter(|f| **f).count() as u32
}
