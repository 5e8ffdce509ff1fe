//! Transient simulation of the shunted nanowire pixel array.
//!
//! Circuit topology: N pixels in series, current-biased, AC-coupled into a
//! load resistor that represents the amplifier input. Each pixel is a
//! nanowire branch (kinetic inductance L in series with a time-dependent
//! hotspot resistance R_i(t)) in parallel with its shunt resistor R_s.
//! A photon absorbed by pixel i switches R_i to `hotspot_resistance` for
//! `hotspot_duration`, provided the instantaneous branch current exceeds a
//! retrapping fraction of the switching current; current then diverts
//! through the shunt and the summed chain voltage drives the load.
//!
//! With branch currents I_i as the state, the network reduces to
//!
//! ```text
//!   L dI_i/dt = R_s * I_chain - (R_s + R_i) * I_i
//!   I_load    = R_s * (N * I_bias - sum_i I_i) / (R_L + N * R_s)
//!   I_chain   = I_bias - I_load
//!   v_out     = gain * R_L * I_load   (+ white noise per sample)
//! ```
//!
//! which is piecewise linear: R_i only changes when a hotspot switches, and
//! switching is resolved to the sample grid. Between switchings the state is
//! propagated *exactly* by the matrix exponential. Because every pixel is
//! either cold (R_i = 0) or hot (R_i = R_hotspot), the N-pixel system
//! collapses to a 2x2 system for the class sums plus independent scalar
//! decays for each pixel's deviation from its class mean; stiff L/R ratios
//! cost nothing. Halving the sample interval therefore changes results only
//! through event-time rounding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pnr::MAX_PIXELS;
use crate::seed;

/// Electrical model of the array and readout chain.
///
/// Defaults are calibrated so a single-pixel pulse lands near the designed
/// 16 mV output step at 58 dB gain and recovers within about 25 ns; see
/// [`calibrate_hotspot_duration`] for the calibration utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams {
    pub n_pixels: usize,
    pub bias_current_a: f64,
    pub switching_current_a: f64,
    pub shunt_resistance_ohm: f64,
    /// Kinetic inductance of one pixel's nanowire.
    pub kinetic_inductance_h: f64,
    pub hotspot_resistance_ohm: f64,
    pub hotspot_duration_s: f64,
    pub load_resistance_ohm: f64,
    pub amplifier_gain_db: f64,
    /// White output-referred noise, RMS volts per sample.
    pub amplifier_noise_rms_v: f64,
    pub sample_interval_s: f64,
    pub trace_duration_s: f64,
    /// A hotspot only forms while the branch current exceeds this fraction
    /// of the switching current.
    pub retrapping_fraction: f64,
}

impl Default for CircuitParams {
    fn default() -> Self {
        Self {
            n_pixels: 32,
            bias_current_a: 16.0e-6,
            switching_current_a: 18.0e-6,
            shunt_resistance_ohm: 40.0,
            kinetic_inductance_h: 420.0e-9,
            hotspot_resistance_ohm: 3_000.0,
            hotspot_duration_s: 260.0e-12,
            load_resistance_ohm: 50.0,
            amplifier_gain_db: 58.0,
            amplifier_noise_rms_v: 3.0e-3,
            sample_interval_s: 10.0e-12,
            trace_duration_s: 100.0e-9,
            retrapping_fraction: 0.5,
        }
    }
}

impl CircuitParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_pixels < 1 || self.n_pixels > MAX_PIXELS {
            return Err(Error::Domain(format!(
                "n_pixels must be in 1..={MAX_PIXELS}, got {}",
                self.n_pixels
            )));
        }
        for (name, v) in [
            ("bias_current_a", self.bias_current_a),
            ("switching_current_a", self.switching_current_a),
            ("shunt_resistance_ohm", self.shunt_resistance_ohm),
            ("kinetic_inductance_h", self.kinetic_inductance_h),
            ("hotspot_resistance_ohm", self.hotspot_resistance_ohm),
            ("hotspot_duration_s", self.hotspot_duration_s),
            ("load_resistance_ohm", self.load_resistance_ohm),
            ("sample_interval_s", self.sample_interval_s),
            ("trace_duration_s", self.trace_duration_s),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if self.bias_current_a >= self.switching_current_a {
            return Err(Error::Domain(format!(
                "bias current {} must stay below the switching current {} or the \
                 device latches before any photon arrives",
                self.bias_current_a, self.switching_current_a
            )));
        }
        if self.hotspot_resistance_ohm <= self.shunt_resistance_ohm {
            return Err(Error::Domain(format!(
                "hotspot resistance {} must exceed the shunt resistance {} for \
                 current diversion",
                self.hotspot_resistance_ohm, self.shunt_resistance_ohm
            )));
        }
        if !(self.retrapping_fraction > 0.0 && self.retrapping_fraction < 1.0) {
            return Err(Error::Domain(format!(
                "retrapping_fraction must lie in (0, 1), got {}",
                self.retrapping_fraction
            )));
        }
        if self.amplifier_noise_rms_v < 0.0 || !self.amplifier_noise_rms_v.is_finite() {
            return Err(Error::Domain(format!(
                "amplifier_noise_rms_v must be >= 0, got {}",
                self.amplifier_noise_rms_v
            )));
        }
        if !self.amplifier_gain_db.is_finite() {
            return Err(Error::Domain("amplifier_gain_db must be finite".into()));
        }
        if self.trace_duration_s < 10.0 * self.sample_interval_s {
            return Err(Error::Domain(format!(
                "trace_duration_s must be at least 10 sample intervals, got {} vs {}",
                self.trace_duration_s, self.sample_interval_s
            )));
        }
        let tau_fast = self.kinetic_inductance_h
            / (self.shunt_resistance_ohm + self.hotspot_resistance_ohm);
        if self.sample_interval_s > tau_fast {
            return Err(Error::Unstable(format!(
                "sample_interval_s = {} exceeds the fastest circuit time constant \
                 L / (R_shunt + R_hotspot) = {tau_fast}; reduce the step below that bound",
                self.sample_interval_s
            )));
        }
        if self.hotspot_duration_s < self.sample_interval_s {
            return Err(Error::Unstable(format!(
                "hotspot_duration_s = {} is shorter than one sample interval {}; the \
                 switching event cannot be resolved on the grid",
                self.hotspot_duration_s, self.sample_interval_s
            )));
        }
        Ok(())
    }

    /// Linear amplifier gain from the dB figure.
    pub fn linear_gain(&self) -> f64 {
        10f64.powf(self.amplifier_gain_db / 20.0)
    }

    /// Number of samples in one trace.
    pub fn n_samples(&self) -> usize {
        (self.trace_duration_s / self.sample_interval_s).round() as usize
    }
}

/// Simulated output waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseTrace {
    /// Output voltage at t = k * sample_interval, k = 0..n_samples.
    pub samples: Vec<f64>,
    pub sample_interval_s: f64,
    /// Events that actually formed a hotspot, at grid-resolved times.
    pub fired_events: Vec<(usize, f64)>,
}

impl PulseTrace {
    /// Peak amplitude after ideal rectification (absolute value).
    pub fn peak_amplitude(&self) -> f64 {
        self.samples.iter().fold(0.0, |acc, v: &f64| acc.max(v.abs()))
    }

    /// CSV with header `time_s,voltage_v`, one row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,voltage_v\n");
        for (k, v) in self.samples.iter().enumerate() {
            out.push_str(&format!("{},{v}\n", k as f64 * self.sample_interval_s));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Per-sample internal currents, for diagnostics and bookkeeping checks.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientStates {
    /// `nanowire_currents_a[k][i]` = branch current of pixel i at sample k.
    pub nanowire_currents_a: Vec<Vec<f64>>,
    pub load_current_a: Vec<f64>,
    pub chain_current_a: Vec<f64>,
}

/// Timing jitter estimate at one photon number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterResult {
    pub photon_number: usize,
    pub fwhm_s: f64,
    pub n_trials: usize,
    pub threshold_fraction: f64,
}

/// 2x2 exponential propagator for the class sums (cold, hot) over one step,
/// plus the scalar deviation decays for each class.
struct ClassPropagator {
    e: [[f64; 2]; 2],
    w: [f64; 2],
    dec_cold: f64,
    dec_hot: f64,
}

fn class_propagator(params: &CircuitParams, n_hot: usize) -> ClassPropagator {
    let n = params.n_pixels as f64;
    let l = params.kinetic_inductance_h;
    let rs = params.shunt_resistance_ohm;
    let rh = params.hotspot_resistance_ohm;
    let d = params.load_resistance_ohm + n * rs;
    let h = params.sample_interval_s;

    let a_cold = rs / l;
    let a_hot = (rs + rh) / l;
    let gamma = rs * rs / (l * d);
    let drive = rs * params.load_resistance_ohm * params.bias_current_a / (l * d);
    let n_hot_f = n_hot as f64;
    let n_cold_f = n - n_hot_f;

    let m = [
        [-a_cold + n_cold_f * gamma, n_cold_f * gamma],
        [n_hot_f * gamma, -a_hot + n_hot_f * gamma],
    ];
    let b = [n_cold_f * drive, n_hot_f * drive];

    // exp(hM) for 2x2 via the traceless split M = mu*I + B with B^2 = s^2*I
    let mu = 0.5 * (m[0][0] + m[1][1]);
    let bd = 0.5 * (m[0][0] - m[1][1]);
    let s2 = bd * bd + m[0][1] * m[1][0];
    let s = s2.max(0.0).sqrt();
    let (cosh_hs, sinhc_hs) = if s * h < 1e-8 {
        let x = s * h;
        (1.0 + x * x / 2.0, h * (1.0 + x * x / 6.0))
    } else {
        ((s * h).cosh(), (s * h).sinh() / s)
    };
    let emu = (mu * h).exp();
    let e = [
        [emu * (cosh_hs + sinhc_hs * bd), emu * sinhc_hs * m[0][1]],
        [emu * sinhc_hs * m[1][0], emu * (cosh_hs - sinhc_hs * bd)],
    ];

    // affine part via the fixed point x* = -M^{-1} b, so that the update
    // x -> E x + w preserves the steady state exactly: w = x* - E x*.
    // M is invertible (both eigenvalues negative).
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let x_star = [
        -(m[1][1] * b[0] - m[0][1] * b[1]) / det,
        -(-m[1][0] * b[0] + m[0][0] * b[1]) / det,
    ];
    let w = [
        x_star[0] - (e[0][0] * x_star[0] + e[0][1] * x_star[1]),
        x_star[1] - (e[1][0] * x_star[0] + e[1][1] * x_star[1]),
    ];

    ClassPropagator {
        e,
        w,
        dec_cold: (-a_cold * h).exp(),
        dec_hot: (-a_hot * h).exp(),
    }
}

/// Simulate the output waveform for a list of photon events.
///
/// `events` are `(pixel, arrival_time_s)` pairs; arrival times are rounded
/// to the sample grid. Deterministic for a fixed seed; a zero
/// `amplifier_noise_rms_v` consumes no randomness at all.
pub fn simulate_pulse(
    params: &CircuitParams,
    events: &[(usize, f64)],
    seed_value: u64,
) -> Result<PulseTrace> {
    simulate(params, events, seed_value, false).map(|(t, _)| t)
}

/// As [`simulate_pulse`], additionally recording per-sample branch currents.
pub fn simulate_pulse_with_states(
    params: &CircuitParams,
    events: &[(usize, f64)],
    seed_value: u64,
) -> Result<(PulseTrace, TransientStates)> {
    let (trace, states) = simulate(params, events, seed_value, true)?;
    Ok((trace, states.expect("states were requested")))
}

fn simulate(
    params: &CircuitParams,
    events: &[(usize, f64)],
    seed_value: u64,
    record_states: bool,
) -> Result<(PulseTrace, Option<TransientStates>)> {
    params.validate()?;
    let n = params.n_pixels;
    let h = params.sample_interval_s;
    let len = params.n_samples();
    let dur_steps = (params.hotspot_duration_s / h).round().max(1.0) as usize;

    let mut event_at: Vec<Vec<usize>> = vec![Vec::new(); len];
    for (pixel, t) in events {
        if *pixel >= n {
            return Err(Error::Domain(format!(
                "event pixel {pixel} out of range 0..{n}"
            )));
        }
        let idx = (t / h).round() as i64;
        if *t < 0.0 || idx < 0 || idx as usize >= len {
            return Err(Error::Domain(format!(
                "event time {t} falls outside the trace duration {}",
                params.trace_duration_s
            )));
        }
        event_at[idx as usize].push(*pixel);
    }

    let retrap = params.retrapping_fraction * params.switching_current_a;
    let gain = params.linear_gain();
    let rl = params.load_resistance_ohm;

    let mut currents = vec![params.bias_current_a; n];
    let mut hot_end = vec![0usize; n]; // pixel i is hot during samples [fire, hot_end)
    let mut fired_events = Vec::new();
    let mut samples = vec![0.0; len];
    let mut states = if record_states {
        Some(TransientStates {
            nanowire_currents_a: Vec::with_capacity(len),
            load_current_a: Vec::with_capacity(len),
            chain_current_a: Vec::with_capacity(len),
        })
    } else {
        None
    };

    let mut propagators: Vec<Option<ClassPropagator>> = (0..=n).map(|_| None).collect();

    for step in 0..len {
        let sum: f64 = currents.iter().sum();
        let d = rl + n as f64 * params.shunt_resistance_ohm;
        let i_load =
            params.shunt_resistance_ohm * (n as f64 * params.bias_current_a - sum) / d;
        samples[step] = gain * rl * i_load;
        if let Some(st) = states.as_mut() {
            st.nanowire_currents_a.push(currents.clone());
            st.load_current_a.push(i_load);
            st.chain_current_a.push(params.bias_current_a - i_load);
        }

        for &pixel in &event_at[step] {
            if currents[pixel] > retrap && hot_end[pixel] <= step {
                hot_end[pixel] = step + dur_steps;
                fired_events.push((pixel, step as f64 * h));
            }
        }

        let mut n_hot = 0usize;
        let mut sum_hot = 0.0;
        let mut sum_all = 0.0;
        for i in 0..n {
            sum_all += currents[i];
            if hot_end[i] > step {
                n_hot += 1;
                sum_hot += currents[i];
            }
        }
        let sum_cold = sum_all - sum_hot;

        let prop = propagators[n_hot].get_or_insert_with(|| class_propagator(params, n_hot));
        let new_cold = prop.e[0][0] * sum_cold + prop.e[0][1] * sum_hot + prop.w[0];
        let new_hot = prop.e[1][0] * sum_cold + prop.e[1][1] * sum_hot + prop.w[1];
        let n_cold = n - n_hot;
        let mean_cold_old = if n_cold > 0 { sum_cold / n_cold as f64 } else { 0.0 };
        let mean_hot_old = if n_hot > 0 { sum_hot / n_hot as f64 } else { 0.0 };
        let mean_cold_new = if n_cold > 0 { new_cold / n_cold as f64 } else { 0.0 };
        let mean_hot_new = if n_hot > 0 { new_hot / n_hot as f64 } else { 0.0 };
        for i in 0..n {
            if hot_end[i] > step {
                currents[i] = mean_hot_new + (currents[i] - mean_hot_old) * prop.dec_hot;
            } else {
                currents[i] = mean_cold_new + (currents[i] - mean_cold_old) * prop.dec_cold;
            }
        }
    }

    if params.amplifier_noise_rms_v > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "circuit.noise", 0));
        let normal = Normal::new(0.0, params.amplifier_noise_rms_v)
            .map_err(|e| Error::Domain(e.to_string()))?;
        for v in &mut samples {
            *v += normal.sample(&mut rng);
        }
    }

    Ok((
        PulseTrace {
            samples,
            sample_interval_s: h,
            fired_events,
        },
        states,
    ))
}

/// Grid-aligned arrival time used by the sweep helpers: one tenth of the
/// trace, rounded to the sample grid.
pub fn default_arrival_time(params: &CircuitParams) -> f64 {
    let idx = (params.trace_duration_s / 10.0 / params.sample_interval_s).round();
    idx.max(1.0) * params.sample_interval_s
}

/// Noiseless peak amplitudes for k = 1..=k_max simultaneously fired distinct
/// pixels. Strictly increasing in k for a healthy parameter set.
pub fn amplitude_map(params: &CircuitParams, k_max: usize) -> Result<Vec<f64>> {
    params.validate()?;
    if k_max < 1 || k_max > params.n_pixels {
        return Err(Error::Domain(format!(
            "k_max must be in 1..={}, got {k_max}",
            params.n_pixels
        )));
    }
    let mut quiet = params.clone();
    quiet.amplifier_noise_rms_v = 0.0;
    let arrival = default_arrival_time(&quiet);
    let mut amplitudes = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let events: Vec<(usize, f64)> = (0..k).map(|i| (i, arrival)).collect();
        let amp = simulate_pulse(&quiet, &events, 0)?.peak_amplitude();
        if let Some(prev) = amplitudes.last() {
            if amp <= *prev {
                return Err(Error::Degenerate(format!(
                    "peak amplitude is not strictly increasing at k = {k}: {amp} <= {prev}"
                )));
            }
        }
        amplitudes.push(amp);
    }
    Ok(amplitudes)
}

/// Estimate timing jitter as the FWHM of threshold-crossing times over
/// `n_trials` noisy repetitions of the same pulse.
///
/// The threshold is `threshold_fraction` times the noiseless single-photon
/// amplitude. The crossing search starts at the (known) arrival sample, as
/// in a measurement synchronized to the excitation laser, and the crossing
/// time is linearly interpolated between the bracketing samples.
pub fn jitter_fwhm(
    params: &CircuitParams,
    photon_number: usize,
    n_trials: usize,
    threshold_fraction: f64,
    seed_value: u64,
) -> Result<JitterResult> {
    params.validate()?;
    if n_trials < 100 {
        return Err(Error::Domain(format!(
            "n_trials must be at least 100, got {n_trials}"
        )));
    }
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::Domain(format!(
            "threshold_fraction must lie in (0, 1), got {threshold_fraction}"
        )));
    }
    if photon_number < 1 || photon_number > params.n_pixels {
        return Err(Error::Domain(format!(
            "photon_number must be in 1..={}, got {photon_number}",
            params.n_pixels
        )));
    }

    let mut quiet = params.clone();
    quiet.amplifier_noise_rms_v = 0.0;
    let arrival = default_arrival_time(&quiet);
    let single = simulate_pulse(&quiet, &[(0, arrival)], 0)?.peak_amplitude();
    let threshold = threshold_fraction * single;

    let events: Vec<(usize, f64)> = (0..photon_number).map(|i| (i, arrival)).collect();
    let base = simulate_pulse(&quiet, &events, 0)?;
    let h = params.sample_interval_s;
    let start = (arrival / h).round() as usize;

    let sigma = params.amplifier_noise_rms_v;
    let normal = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?)
    } else {
        None
    };

    let mut crossings = Vec::with_capacity(n_trials);
    let mut misses = 0usize;
    for trial in 0..n_trials {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "circuit.jitter", trial as u64));
        let draw = |rng: &mut ChaCha8Rng| normal.as_ref().map_or(0.0, |d| d.sample(rng));
        let mut prev = base.samples[start] + draw(&mut rng);
        let mut found = None;
        for (j, base_v) in base.samples.iter().enumerate().skip(start + 1) {
            let v = base_v + draw(&mut rng);
            if v > threshold {
                let frac = ((threshold - prev) / (v - prev)).clamp(0.0, 1.0);
                found = Some(((j - 1) as f64 + frac) * h);
                break;
            }
            prev = v;
        }
        match found {
            Some(t) => crossings.push(t),
            None => misses += 1,
        }
    }
    if (misses as f64) > 0.01 * n_trials as f64 {
        return Err(Error::Degenerate(format!(
            "threshold {threshold:.4e} V was not crossed in {misses} of {n_trials} trials; \
             it is too high for photon number {photon_number}"
        )));
    }

    let count = crossings.len() as f64;
    let mean = crossings.iter().sum::<f64>() / count;
    let var = crossings.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (count - 1.0).max(1.0);
    let fwhm = 2.0 * (2.0 * (2.0f64).ln()).sqrt() * var.sqrt();
    Ok(JitterResult {
        photon_number,
        fwhm_s: fwhm,
        n_trials,
        threshold_fraction,
    })
}

/// Time from the single-pixel pulse peak until the fired pixel's branch
/// current recovers to `fraction` of its bias value, from a noiseless run.
pub fn recovery_time(params: &CircuitParams, fraction: f64) -> Result<f64> {
    params.validate()?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!(
            "fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut quiet = params.clone();
    quiet.amplifier_noise_rms_v = 0.0;
    let arrival = default_arrival_time(&quiet);
    let (trace, states) = simulate_pulse_with_states(&quiet, &[(0, arrival)], 0)?;
    let peak_idx = trace
        .samples
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let target = fraction * params.bias_current_a;
    for (k, currents) in states.nanowire_currents_a.iter().enumerate().skip(peak_idx) {
        if currents[0] >= target {
            return Ok((k - peak_idx) as f64 * params.sample_interval_s);
        }
    }
    Err(Error::Degenerate(format!(
        "branch current did not recover to {fraction} of bias within the trace \
         duration {}; extend trace_duration_s",
        params.trace_duration_s
    )))
}

/// Calibrate `hotspot_duration_s` so the single-pixel peak amplitude hits
/// `target_v`, by integer bisection over grid-aligned durations.
///
/// The peak amplitude grows monotonically with hotspot duration toward the
/// full-diversion asymptote; if `target_v` lies above that asymptote the
/// calibration fails and reports the reachable bound.
pub fn calibrate_hotspot_duration(params: &CircuitParams, target_v: f64) -> Result<f64> {
    params.validate()?;
    if !(target_v > 0.0) {
        return Err(Error::Domain(format!(
            "target amplitude must be positive, got {target_v}"
        )));
    }
    let h = params.sample_interval_s;
    let tau_fast = params.kinetic_inductance_h
        / (params.shunt_resistance_ohm + params.hotspot_resistance_ohm);
    let cap = ((50.0 * tau_fast / h).ceil() as usize).max(2);

    let amp_for = |steps: usize| -> Result<f64> {
        let mut p = params.clone();
        p.amplifier_noise_rms_v = 0.0;
        p.hotspot_duration_s = steps as f64 * h;
        let arrival = default_arrival_time(&p);
        Ok(simulate_pulse(&p, &[(0, arrival)], 0)?.peak_amplitude())
    };

    let reachable = amp_for(cap)?;
    if reachable < target_v {
        return Err(Error::Domain(format!(
            "target amplitude {target_v} V is unreachable; the full-diversion \
             amplitude is about {reachable} V, raise bias, gain, or hotspot resistance"
        )));
    }
    let (mut lo, mut hi) = (1usize, cap);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if amp_for(mid)? < target_v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // pick the closer of the two bracketing grid durations
    let (a_lo, a_hi) = (amp_for(lo)?, amp_for(hi)?);
    let steps = if (a_hi - target_v).abs() <= (target_v - a_lo).abs() {
        hi
    } else {
        lo
    };
    Ok(steps as f64 * h)
}

/// Manifest entry for one exported trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRunRecord {
    pub file: String,
    pub seed: u64,
    pub events: Vec<(usize, f64)>,
    pub fired_events: Vec<(usize, f64)>,
    pub n_samples: usize,
}

/// Manifest written next to a batch of trace CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceBatchManifest {
    pub params: CircuitParams,
    pub runs: Vec<TraceRunRecord>,
}

/// Export one CSV per trace plus a JSON manifest listing seeds, params, and
/// fired events. Returns the manifest path.
pub fn export_trace_batch(
    dir: &Path,
    params: &CircuitParams,
    runs: &[(u64, Vec<(usize, f64)>, PulseTrace)],
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(runs.len());
    for (idx, (seed_value, events, trace)) in runs.iter().enumerate() {
        let file = format!("trace_{idx:03}.csv");
        trace.write_csv(&dir.join(&file))?;
        records.push(TraceRunRecord {
            file,
            seed: *seed_value,
            events: events.clone(),
            fired_events: trace.fired_events.clone(),
            n_samples: trace.samples.len(),
        });
    }
    let manifest = TraceBatchManifest {
        params: params.clone(),
        runs: records,
    };
    let path = dir.join("manifest.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_params() -> CircuitParams {
        CircuitParams {
            amplifier_noise_rms_v: 0.0,
            ..CircuitParams::default()
        }
    }

    #[test]
    fn no_stimulus_means_zero_output() {
        let trace = simulate_pulse(&quiet_params(), &[], 5).unwrap();
        assert_eq!(trace.samples.len(), quiet_params().n_samples());
        // zero up to state-summation roundoff, twelve orders below a pulse
        assert!(trace.samples.iter().all(|v| v.abs() < 1e-15));
        assert!(trace.fired_events.is_empty());
    }

    #[test]
    fn single_pixel_amplitude_near_design_value() {
        let amp = amplitude_map(&CircuitParams::default(), 1).unwrap()[0];
        assert!(
            (amp - 16.0e-3).abs() < 1.6e-3,
            "single-pixel amplitude {amp} V is not within 10% of 16 mV"
        );
    }

    #[test]
    fn amplitude_map_is_nearly_linear() {
        let amps = amplitude_map(&CircuitParams::default(), 8).unwrap();
        let ks: Vec<f64> = (1..=8).map(|k| k as f64).collect();
        let slope = ks.iter().zip(&amps).map(|(k, a)| k * a).sum::<f64>()
            / ks.iter().map(|k| k * k).sum::<f64>();
        for (k, a) in ks.iter().zip(&amps) {
            let rel = (a - slope * k).abs() / (slope * k);
            assert!(rel < 0.02, "k={k}: deviation {rel}");
        }
    }

    #[test]
    fn peak_invariant_under_pixel_permutation() {
        let p = quiet_params();
        let arrival = default_arrival_time(&p);
        let a = simulate_pulse(&p, &[(0, arrival), (1, arrival), (2, arrival)], 0).unwrap();
        let b = simulate_pulse(&p, &[(9, arrival), (30, arrival), (17, arrival)], 0).unwrap();
        assert!((a.peak_amplitude() - b.peak_amplitude()).abs() < 1e-15);
    }

    #[test]
    fn noiseless_output_identical_across_seeds() {
        let p = quiet_params();
        let arrival = default_arrival_time(&p);
        let a = simulate_pulse(&p, &[(0, arrival)], 1).unwrap();
        let b = simulate_pulse(&p, &[(0, arrival)], 2).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn noisy_output_reproducible_for_fixed_seed() {
        let p = CircuitParams::default();
        let arrival = default_arrival_time(&p);
        let a = simulate_pulse(&p, &[(0, arrival)], 1).unwrap();
        let b = simulate_pulse(&p, &[(0, arrival)], 1).unwrap();
        let c = simulate_pulse(&p, &[(0, arrival)], 2).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn halving_the_step_leaves_the_peak_unchanged() {
        let p = quiet_params();
        let amp = amplitude_map(&p, 1).unwrap()[0];
        let mut fine = p.clone();
        fine.sample_interval_s /= 2.0;
        let amp_fine = amplitude_map(&fine, 1).unwrap()[0];
        let rel = (amp - amp_fine).abs() / amp;
        assert!(rel < 0.005, "relative change {rel}");
    }

    #[test]
    fn matches_runge_kutta_oracle_on_small_array() {
        // independent integrator: dense RK4 with a step 100x finer
        let mut p = quiet_params();
        p.n_pixels = 4;
        p.trace_duration_s = 10.0e-9;
        let arrival = 2.0e-9;
        let (trace, states) = simulate_pulse_with_states(&p, &[(1, arrival)], 0).unwrap();

        let n = 4usize;
        let h_fine = p.sample_interval_s / 100.0;
        let l = p.kinetic_inductance_h;
        let rs = p.shunt_resistance_ohm;
        let d = p.load_resistance_ohm + n as f64 * rs;
        let hot_start = (arrival / p.sample_interval_s).round() as usize;
        let hot_steps = (p.hotspot_duration_s / p.sample_interval_s).round() as usize;
        let mut iw = vec![p.bias_current_a; n];
        let mut max_err: f64 = 0.0;
        for step in 0..trace.samples.len() {
            let err = (iw[1] - states.nanowire_currents_a[step][1]).abs();
            max_err = max_err.max(err);
            let hot = step >= hot_start && step < hot_start + hot_steps;
            let deriv = |x: &Vec<f64>| -> Vec<f64> {
                let sum: f64 = x.iter().sum();
                let i_load = rs * (n as f64 * p.bias_current_a - sum) / d;
                let i_chain = p.bias_current_a - i_load;
                (0..n)
                    .map(|i| {
                        let r = if hot && i == 1 { p.hotspot_resistance_ohm } else { 0.0 };
                        (rs * i_chain - (rs + r) * x[i]) / l
                    })
                    .collect()
            };
            for _ in 0..100 {
                let k1 = deriv(&iw);
                let x2: Vec<f64> =
                    iw.iter().zip(&k1).map(|(x, k)| x + 0.5 * h_fine * k).collect();
                let k2 = deriv(&x2);
                let x3: Vec<f64> =
                    iw.iter().zip(&k2).map(|(x, k)| x + 0.5 * h_fine * k).collect();
                let k3 = deriv(&x3);
                let x4: Vec<f64> = iw.iter().zip(&k3).map(|(x, k)| x + h_fine * k).collect();
                let k4 = deriv(&x4);
                for i in 0..n {
                    iw[i] += h_fine / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        assert!(
            max_err < 1e-9 * p.bias_current_a,
            "exponential propagator deviates from RK4 oracle by {max_err}"
        );
    }

    #[test]
    fn branch_current_bookkeeping_closes() {
        let mut p = quiet_params();
        p.n_pixels = 8;
        p.trace_duration_s = 20.0e-9;
        let arrival = 2.0e-9;
        let (trace, states) =
            simulate_pulse_with_states(&p, &[(0, arrival), (3, arrival)], 0).unwrap();
        let n = p.n_pixels as f64;
        let d = p.load_resistance_ohm + n * p.shunt_resistance_ohm;
        for k in 0..trace.samples.len() {
            let sum: f64 = states.nanowire_currents_a[k].iter().sum();
            // route 1: load current from the recorded state sum
            let i_load = p.shunt_resistance_ohm * (n * p.bias_current_a - sum) / d;
            // route 2: chain voltage summed per pixel over the shunts
            let i_chain = states.chain_current_a[k];
            let v_chain: f64 = states.nanowire_currents_a[k]
                .iter()
                .map(|iw| p.shunt_resistance_ohm * (i_chain - iw))
                .sum();
            let residual = (v_chain - p.load_resistance_ohm * i_load).abs();
            let scale = (p.load_resistance_ohm * p.bias_current_a).abs();
            assert!(residual <= 1e-9 * scale, "sample {k}: residual {residual}");
            // per pixel: branch current plus shunt current equals chain current
            for iw in &states.nanowire_currents_a[k] {
                let i_shunt = i_chain - iw;
                assert!((iw + i_shunt - i_chain).abs() <= 1e-9 * p.bias_current_a);
            }
            assert!((states.load_current_a[k] - i_load).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn recovery_matches_single_exponential_oracle() {
        let mut p = quiet_params();
        p.n_pixels = 1;
        p.trace_duration_s = 200.0e-9;
        let rec = recovery_time(&p, 0.9).unwrap();
        // one-pixel circuit: effective recovery rate (Rs/L) * RL / (RL + Rs)
        let tau = p.kinetic_inductance_h / p.shunt_resistance_ohm
            * (p.load_resistance_ohm + p.shunt_resistance_ohm)
            / p.load_resistance_ohm;
        let arrival = default_arrival_time(&p);
        let (_, states) = simulate_pulse_with_states(&p, &[(0, arrival)], 0).unwrap();
        let peak_idx = ((arrival + p.hotspot_duration_s) / p.sample_interval_s).round() as usize;
        let i0 = states.nanowire_currents_a[peak_idx][0];
        let predicted = tau * ((p.bias_current_a - i0) / (0.1 * p.bias_current_a)).ln();
        let rel = (rec - predicted).abs() / predicted;
        assert!(rel < 0.05, "recovery {rec} vs oracle {predicted}");
    }

    #[test]
    fn recovery_limits_and_monotonicity() {
        let p = quiet_params();
        let tiny = recovery_time(&p, 1e-6).unwrap();
        assert!(tiny <= p.sample_interval_s, "fraction->0 gives {tiny}");
        let rec = recovery_time(&p, 0.9).unwrap();
        let expected = p.kinetic_inductance_h / p.shunt_resistance_ohm * 10f64.ln();
        assert!(rec > 0.5 * expected && rec < 2.0 * expected);
        let mut bigger = p.clone();
        bigger.kinetic_inductance_h *= 2.0;
        assert!(recovery_time(&bigger, 0.9).unwrap() > rec);
    }

    #[test]
    fn retrapping_guard_blocks_depleted_pixel() {
        let p = quiet_params();
        let arrival = default_arrival_time(&p);
        // second photon lands on the same pixel right after the hotspot,
        // while the branch current is still far below the retrapping level
        let again = arrival + p.hotspot_duration_s + 2.0 * p.sample_interval_s;
        let trace = simulate_pulse(&p, &[(0, arrival), (0, again)], 0).unwrap();
        assert_eq!(trace.fired_events.len(), 1);
    }

    #[test]
    fn jitter_zero_noise_is_zero() {
        let p = quiet_params();
        let j = jitter_fwhm(&p, 1, 200, 0.5, 1).unwrap();
        assert!(j.fwhm_s <= p.sample_interval_s);
    }

    #[test]
    fn jitter_decreases_with_photon_number() {
        let p = CircuitParams::default();
        let j1 = jitter_fwhm(&p, 1, 1_000, 0.5, 1).unwrap();
        let j2 = jitter_fwhm(&p, 2, 1_000, 0.5, 1).unwrap();
        let j32 = jitter_fwhm(&p, 32, 1_000, 0.5, 1).unwrap();
        assert!(j1.fwhm_s > j2.fwhm_s && j2.fwhm_s > j32.fwhm_s);
    }

    #[test]
    fn jitter_scales_linearly_with_small_noise() {
        let mut p = CircuitParams::default();
        p.amplifier_noise_rms_v = 0.1e-3;
        let base = jitter_fwhm(&p, 1, 4_000, 0.5, 3).unwrap().fwhm_s;
        p.amplifier_noise_rms_v = 0.2e-3;
        let doubled = jitter_fwhm(&p, 1, 4_000, 0.5, 3).unwrap().fwhm_s;
        let ratio = doubled / base;
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        let mut p = CircuitParams::default();
        p.bias_current_a = 20.0e-6;
        assert!(p.validate().is_err());

        let mut p = CircuitParams::default();
        p.hotspot_resistance_ohm = 30.0;
        assert!(p.validate().is_err());

        let mut p = CircuitParams::default();
        p.sample_interval_s = 1.0e-9;
        assert!(matches!(p.validate(), Err(Error::Unstable(_))));
    }

    #[test]
    fn calibration_recovers_default_duration() {
        let p = quiet_params();
        let target = amplitude_map(&p, 1).unwrap()[0];
        let dur = calibrate_hotspot_duration(&p, target).unwrap();
        assert!((dur - p.hotspot_duration_s).abs() <= p.sample_interval_s);
        assert!(matches!(
            calibrate_hotspot_duration(&p, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn trace_csv_has_expected_shape() {
        let mut p = quiet_params();
        p.trace_duration_s = 1.0e-9;
        p.hotspot_duration_s = 100.0e-12;
        let trace = simulate_pulse(&p, &[], 0).unwrap();
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("time_s,voltage_v"));
        assert_eq!(lines.count(), trace.samples.len());
    }
}
