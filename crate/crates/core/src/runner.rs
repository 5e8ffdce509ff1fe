//! Batch experiment runner.
//!
//! Binds the pipeline end to end: parse a run configuration, execute the
//! requested stages in dependency order (simulate -> readout -> tomography,
//! with crosstalk and the fidelity report alongside), persist every stage
//! output under the run directory, and emit plot-ready CSV tables.
//!
//! # Config format
//!
//! Flat `key = value` lines with dotted section prefixes; `#` starts a
//! comment. Unknown keys are rejected. All keys are optional and default to
//! the values of [`RunConfig::default`]:
//!
//! ```text
//! detector.n_pixels      = 32
//! detector.efficiency    = 0.975
//! detector.beam_profile  = uniform          # or gaussian:<sigma_fraction>
//! detector.dark_count_prob = 0.0002
//! detector.crosstalk_prob  = 0
//! circuit.bias_current_a     = 0.000016
//! circuit.switching_current_a = 0.000018
//! circuit.shunt_resistance_ohm = 40
//! circuit.kinetic_inductance_h = 0.00000042
//! circuit.hotspot_resistance_ohm = 3000
//! circuit.hotspot_duration_s = 0.00000000026
//! circuit.load_resistance_ohm = 50
//! circuit.amplifier_gain_db = 58
//! circuit.amplifier_noise_rms_v = 0.003
//! circuit.sample_interval_s = 0.00000000001
//! circuit.trace_duration_s = 0.0000001
//! circuit.retrapping_fraction = 0.5
//! probe.mus = 0.1:0.1:5                     # range, or a comma list
//! run.pulses_per_probe = 100000
//! run.seed = 1
//! run.output_dir = out
//! run.stages = simulate,readout,tomography,crosstalk,fidelity-report
//! ```
//!
//! Every random draw anywhere in a run is derived from `run.seed` through
//! [`crate::seed::derive`] with a stage label and an index, so a run is a
//! pure function of its config: rerunning with the same config produces
//! byte-identical data files.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::circuit::{
    self, amplitude_map, jitter_fwhm, CircuitParams, JitterResult,
};
use crate::error::{Error, Result};
use crate::pnr::{
    ideal_fidelity, poisson_input_matrix, sample_click_dataset, BeamProfile, ClickDataset,
    DetectorArrayConfig,
};
use crate::readout::{
    assignment_probability, build_histogram, fit_gaussian_mixture, staircase_to_distribution,
    synthesize_staircase, voltage_blocks, AmplitudeHistogram, GaussianMixture,
    ThresholdStaircase, VoltageBlocks,
};
use crate::seed;
use crate::tomography::{
    crosstalk_probability, estimate_crosstalk_stats, hellinger, reconstruct_input_state,
    reconstruct_povm, ClickCountMatrix, CrosstalkStats, FidelityMatrix,
};

/// Photon-number truncation of the probe matrix.
pub const M_MAX: usize = 12;

/// Pulse repetition frequency of the modeled probe source.
pub const PULSE_FREQUENCY_HZ: f64 = 100_000.0;

/// Mean photon number used by the crosstalk stage.
pub const CROSSTALK_MU: f64 = 0.01;

const JITTER_TRIALS: usize = 1_000;
const JITTER_THRESHOLD_FRACTION: f64 = 0.5;
const STAIRCASE_PITCH_V: f64 = 1.0e-3;
const HISTOGRAM_BINS: usize = 100;
const POVM_TOL: f64 = 1e-12;
const POVM_MAX_ITERS: usize = 20_000;

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Simulate,
    Readout,
    Tomography,
    Crosstalk,
    FidelityReport,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Simulate,
        Stage::Readout,
        Stage::Tomography,
        Stage::Crosstalk,
        Stage::FidelityReport,
    ];

    /// Stages whose outputs this stage consumes.
    fn dependencies(&self) -> &'static [Stage] {
        match self {
            Stage::Readout | Stage::Tomography => &[Stage::Simulate],
            _ => &[],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Simulate => "simulate",
            Stage::Readout => "readout",
            Stage::Tomography => "tomography",
            Stage::Crosstalk => "crosstalk",
            Stage::FidelityReport => "fidelity-report",
        };
        f.write_str(name)
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "simulate" => Ok(Stage::Simulate),
            "readout" => Ok(Stage::Readout),
            "tomography" => Ok(Stage::Tomography),
            "crosstalk" => Ok(Stage::Crosstalk),
            "fidelity-report" => Ok(Stage::FidelityReport),
            other => Err(Error::Parse(format!("unknown stage '{other}'"))),
        }
    }
}

/// Full description of one batch run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub detector: DetectorArrayConfig,
    pub circuit: CircuitParams,
    pub probe_mus: Vec<f64>,
    pub pulses_per_probe: u64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stages: BTreeSet<Stage>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            detector: DetectorArrayConfig {
                n_pixels: 32,
                efficiency: 0.975,
                beam_profile: BeamProfile::Uniform,
                dark_count_prob: 2.0e-4,
                crosstalk_prob: 0.0,
            },
            circuit: CircuitParams::default(),
            probe_mus: (1..=50).map(|i| i as f64 * 0.1).collect(),
            pulses_per_probe: 100_000,
            seed: 1,
            output_dir: PathBuf::from("out"),
            stages: Stage::ALL.into_iter().collect(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.circuit.validate()?;
        if self.circuit.n_pixels != self.detector.n_pixels {
            return Err(Error::Domain(format!(
                "circuit models {} pixels but the detector has {}",
                self.circuit.n_pixels, self.detector.n_pixels
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::Domain("at least one stage must be requested".into()));
        }
        if self.pulses_per_probe < 1 {
            return Err(Error::Domain("pulses_per_probe must be at least 1".into()));
        }
        if self.probe_mus.is_empty() {
            return Err(Error::Domain("at least one probe mu is required".into()));
        }
        if self.probe_mus.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::Domain("probe mus must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Requested stages closed under dependencies, in execution order.
    pub fn resolved_stages(&self) -> Vec<Stage> {
        let mut set = self.stages.clone();
        loop {
            let mut grew = false;
            for stage in set.clone() {
                for dep in stage.dependencies() {
                    grew |= set.insert(*dep);
                }
            }
            if !grew {
                break;
            }
        }
        Stage::ALL.into_iter().filter(|s| set.contains(s)).collect()
    }
}

fn format_f64(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v}")
}

/// Serialize a config to the flat key-value format.
pub fn serialize_config(config: &RunConfig) -> String {
    let mut out = String::new();
    let beam = match config.detector.beam_profile {
        BeamProfile::Uniform => "uniform".to_string(),
        BeamProfile::GaussianSpot { sigma_fraction } => {
            format!("gaussian:{}", format_f64(sigma_fraction))
        }
    };
    out.push_str(&format!("detector.n_pixels = {}\n", config.detector.n_pixels));
    out.push_str(&format!(
        "detector.efficiency = {}\n",
        format_f64(config.detector.efficiency)
    ));
    out.push_str(&format!("detector.beam_profile = {beam}\n"));
    out.push_str(&format!(
        "detector.dark_count_prob = {}\n",
        format_f64(config.detector.dark_count_prob)
    ));
    out.push_str(&format!(
        "detector.crosstalk_prob = {}\n",
        format_f64(config.detector.crosstalk_prob)
    ));
    let c = &config.circuit;
    for (key, v) in [
        ("bias_current_a", c.bias_current_a),
        ("switching_current_a", c.switching_current_a),
        ("shunt_resistance_ohm", c.shunt_resistance_ohm),
        ("kinetic_inductance_h", c.kinetic_inductance_h),
        ("hotspot_resistance_ohm", c.hotspot_resistance_ohm),
        ("hotspot_duration_s", c.hotspot_duration_s),
        ("load_resistance_ohm", c.load_resistance_ohm),
        ("amplifier_gain_db", c.amplifier_gain_db),
        ("amplifier_noise_rms_v", c.amplifier_noise_rms_v),
        ("sample_interval_s", c.sample_interval_s),
        ("trace_duration_s", c.trace_duration_s),
        ("retrapping_fraction", c.retrapping_fraction),
    ] {
        out.push_str(&format!("circuit.{key} = {}\n", format_f64(v)));
    }
    let mus: Vec<String> = config.probe_mus.iter().map(|m| format_f64(*m)).collect();
    out.push_str(&format!("probe.mus = {}\n", mus.join(",")));
    out.push_str(&format!("run.pulses_per_probe = {}\n", config.pulses_per_probe));
    out.push_str(&format!("run.seed = {}\n", config.seed));
    out.push_str(&format!(
        "run.output_dir = {}\n",
        config.output_dir.display()
    ));
    let stages: Vec<String> = config.stages.iter().map(|s| s.to_string()).collect();
    out.push_str(&format!("run.stages = {}\n", stages.join(",")));
    out
}

fn parse_mus(value: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = value.split(':').collect();
    if parts.len() == 3 {
        let start: f64 = parse_num(parts[0])?;
        let step: f64 = parse_num(parts[1])?;
        let stop: f64 = parse_num(parts[2])?;
        if !(step > 0.0) || stop < start {
            return Err(Error::Parse(format!("bad mu range '{value}'")));
        }
        let n = ((stop - start) / step + 0.5).floor() as usize;
        return Ok((0..=n).map(|i| start + i as f64 * step).collect());
    }
    value.split(',').map(parse_num).collect()
}

fn parse_num<T: FromStr>(s: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.trim()
        .parse::<T>()
        .map_err(|e| Error::Parse(format!("bad value '{}': {e}", s.trim())))
}

/// Parse the flat key-value config format. Missing keys keep their default
/// values; unknown keys are errors.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let mut circuit_pixels_set = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "detector.n_pixels" => config.detector.n_pixels = parse_num(value)?,
            "detector.efficiency" => config.detector.efficiency = parse_num(value)?,
            "detector.beam_profile" => {
                config.detector.beam_profile = if value == "uniform" {
                    BeamProfile::Uniform
                } else if let Some(sf) = value.strip_prefix("gaussian:") {
                    BeamProfile::GaussianSpot {
                        sigma_fraction: parse_num(sf)?,
                    }
                } else {
                    return Err(Error::Parse(format!(
                        "beam_profile must be 'uniform' or 'gaussian:<sigma_fraction>', \
                         got '{value}'"
                    )));
                }
            }
            "detector.dark_count_prob" => config.detector.dark_count_prob = parse_num(value)?,
            "detector.crosstalk_prob" => config.detector.crosstalk_prob = parse_num(value)?,
            "circuit.n_pixels" => {
                config.circuit.n_pixels = parse_num(value)?;
                circuit_pixels_set = true;
            }
            "circuit.bias_current_a" => config.circuit.bias_current_a = parse_num(value)?,
            "circuit.switching_current_a" => {
                config.circuit.switching_current_a = parse_num(value)?
            }
            "circuit.shunt_resistance_ohm" => {
                config.circuit.shunt_resistance_ohm = parse_num(value)?
            }
            "circuit.kinetic_inductance_h" => {
                config.circuit.kinetic_inductance_h = parse_num(value)?
            }
            "circuit.hotspot_resistance_ohm" => {
                config.circuit.hotspot_resistance_ohm = parse_num(value)?
            }
            "circuit.hotspot_duration_s" => config.circuit.hotspot_duration_s = parse_num(value)?,
            "circuit.load_resistance_ohm" => {
                config.circuit.load_resistance_ohm = parse_num(value)?
            }
            "circuit.amplifier_gain_db" => config.circuit.amplifier_gain_db = parse_num(value)?,
            "circuit.amplifier_noise_rms_v" => {
                config.circuit.amplifier_noise_rms_v = parse_num(value)?
            }
            "circuit.sample_interval_s" => config.circuit.sample_interval_s = parse_num(value)?,
            "circuit.trace_duration_s" => config.circuit.trace_duration_s = parse_num(value)?,
            "circuit.retrapping_fraction" => {
                config.circuit.retrapping_fraction = parse_num(value)?
            }
            "probe.mus" => config.probe_mus = parse_mus(value)?,
            "run.pulses_per_probe" => config.pulses_per_probe = parse_num(value)?,
            "run.seed" => config.seed = parse_num(value)?,
            "run.output_dir" => config.output_dir = PathBuf::from(value),
            "run.stages" => {
                config.stages = value
                    .split(',')
                    .map(Stage::from_str)
                    .collect::<Result<_>>()?;
            }
            other => {
                return Err(Error::Parse(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }
    if !circuit_pixels_set {
        config.circuit.n_pixels = config.detector.n_pixels;
    }
    Ok(config)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Outcome of one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed { message: String },
    Skipped,
}

/// Crosstalk stage summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkReport {
    pub stats: CrosstalkStats,
    pub p_xtalk: f64,
}

/// Tomography solver summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Key metrics collected across stages; everything a plot needs lives here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub amplitude_map_v: Option<Vec<f64>>,
    pub jitter_table: Option<Vec<JitterResult>>,
    pub histogram: Option<AmplitudeHistogram>,
    pub mixture: Option<GaussianMixture>,
    pub blocks: Option<VoltageBlocks>,
    pub assignment_probabilities: Option<Vec<f64>>,
    pub staircase: Option<ThresholdStaircase>,
    pub staircase_counts: Option<Vec<f64>>,
    pub fidelity_matrix: Option<FidelityMatrix>,
    pub diagonal_fidelities: Option<Vec<f64>>,
    pub solver: Option<SolverSummary>,
    pub hellinger_by_mu: Option<Vec<(f64, f64)>>,
    pub crosstalk: Option<CrosstalkReport>,
    pub ideal_fidelity_table: Option<Vec<(usize, f64)>>,
}

/// Report of a full run: config echo, per-stage status, key metrics, and a
/// digest manifest of every data file written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: String,
    pub stages: BTreeMap<String, StageStatus>,
    pub metrics: RunMetrics,
    /// Relative path -> SHA-256 hex digest.
    pub manifest: BTreeMap<String, String>,
}

impl RunReport {
    pub fn is_success(&self) -> bool {
        !self
            .stages
            .values()
            .any(|s| matches!(s, StageStatus::Failed { .. }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Recompute every manifest digest against the files on disk.
    pub fn verify_manifest(&self, base: &Path) -> Result<()> {
        for (rel, digest) in &self.manifest {
            let bytes = std::fs::read(base.join(rel))?;
            let actual = sha256_hex(&bytes);
            if actual != *digest {
                return Err(Error::Parse(format!(
                    "digest mismatch for {rel}: manifest {digest}, file {actual}"
                )));
            }
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes stage outputs under the run directory and records their digests.
struct OutputLog {
    base: PathBuf,
    manifest: BTreeMap<String, String>,
}

impl OutputLog {
    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.base.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        self.manifest
            .insert(rel.to_string(), sha256_hex(contents.as_bytes()));
        Ok(())
    }

    fn record_existing(&mut self, rel: &str) -> Result<()> {
        let bytes = std::fs::read(self.base.join(rel))?;
        self.manifest.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }
}

/// In-memory intermediates passed between stages.
#[derive(Default)]
struct PipelineState {
    datasets: Vec<ClickDataset>,
    output_matrix: Option<ClickCountMatrix>,
    readout_amplitudes: Option<Vec<f64>>,
}

/// Execute the configured stages. Hard setup problems (invalid config,
/// unwritable output directory) are errors; a stage failure is recorded in
/// the report, later stages are skipped, and the partial report is returned.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;

    let mut log = OutputLog {
        base: config.output_dir.clone(),
        manifest: BTreeMap::new(),
    };
    let mut report = RunReport {
        config: serialize_config(config),
        stages: BTreeMap::new(),
        metrics: RunMetrics::default(),
        manifest: BTreeMap::new(),
    };
    let mut state = PipelineState::default();

    let stages = config.resolved_stages();
    let mut failed = false;
    for stage in stages {
        if failed {
            report.stages.insert(stage.to_string(), StageStatus::Skipped);
            continue;
        }
        let outcome = match stage {
            Stage::Simulate => stage_simulate(config, &mut state, &mut report, &mut log),
            Stage::Readout => stage_readout(config, &mut state, &mut report, &mut log),
            Stage::Tomography => stage_tomography(config, &mut state, &mut report, &mut log),
            Stage::Crosstalk => stage_crosstalk(config, &mut report, &mut log),
            Stage::FidelityReport => stage_fidelity_report(config, &mut report, &mut log),
        };
        let status = match outcome {
            Ok(()) => StageStatus::Completed,
            Err(e) => {
                failed = true;
                StageStatus::Failed {
                    message: e.to_string(),
                }
            }
        };
        report.stages.insert(stage.to_string(), status);
    }

    report.manifest = log.manifest;
    report.save(&config.output_dir.join("report.json"))?;
    Ok(report)
}

fn stage_simulate(
    config: &RunConfig,
    state: &mut PipelineState,
    report: &mut RunReport,
    log: &mut OutputLog,
) -> Result<()> {
    // click statistics, one dataset per probe
    let mut datasets = Vec::with_capacity(config.probe_mus.len());
    for (k, mu) in config.probe_mus.iter().enumerate() {
        let probe_seed = seed::derive(config.seed, "stage.simulate.probe", k as u64);
        datasets.push(sample_click_dataset(
            &config.detector,
            *mu,
            config.pulses_per_probe,
            probe_seed,
        )?);
    }
    let n_click_max = M_MAX.min(config.detector.n_pixels);
    let output = ClickCountMatrix::from_datasets(&datasets, n_click_max)?;
    log.write("sim/click_counts.csv", &output.to_csv())?;
    state.output_matrix = Some(output);
    state.datasets = datasets;

    // electrical outputs: amplitude map, representative traces, jitter
    let amps = amplitude_map(&config.circuit, config.circuit.n_pixels)?;
    let mut amp_csv = String::from("k,amplitude_v\n");
    for (i, a) in amps.iter().enumerate() {
        amp_csv.push_str(&format!("{},{a}\n", i + 1));
    }
    log.write("sim/amplitude_map.csv", &amp_csv)?;

    let n = config.circuit.n_pixels;
    let mut trace_ks: Vec<usize> = vec![1, n.div_ceil(2), n];
    trace_ks.dedup();
    let arrival = circuit::default_arrival_time(&config.circuit);
    let mut runs = Vec::new();
    for (i, k) in trace_ks.iter().enumerate() {
        let events: Vec<(usize, f64)> = (0..*k).map(|p| (p, arrival)).collect();
        let trace_seed = seed::derive(config.seed, "stage.simulate.trace", i as u64);
        let trace = circuit::simulate_pulse(&config.circuit, &events, trace_seed)?;
        runs.push((trace_seed, events, trace));
    }
    circuit::export_trace_batch(&log.base.join("sim/traces"), &config.circuit, &runs)?;
    for i in 0..trace_ks.len() {
        log.record_existing(&format!("sim/traces/trace_{i:03}.csv"))?;
    }
    log.record_existing("sim/traces/manifest.json")?;

    let mut jitter_photons: Vec<usize> = [1, 2, 8.min(n), n]
        .into_iter()
        .filter(|k| *k >= 1 && *k <= n)
        .collect();
    jitter_photons.sort_unstable();
    jitter_photons.dedup();
    let mut jitter_table = Vec::new();
    if config.circuit.amplifier_noise_rms_v > 0.0 {
        for k in &jitter_photons {
            let jitter_seed = seed::derive(config.seed, "stage.simulate.jitter", *k as u64);
            jitter_table.push(jitter_fwhm(
                &config.circuit,
                *k,
                JITTER_TRIALS,
                JITTER_THRESHOLD_FRACTION,
                jitter_seed,
            )?);
        }
    }
    let mut jitter_csv = String::from("photon_number,fwhm_s\n");
    for j in &jitter_table {
        jitter_csv.push_str(&format!("{},{}\n", j.photon_number, j.fwhm_s));
    }
    log.write("sim/jitter.csv", &jitter_csv)?;

    report.metrics.amplitude_map_v = Some(amps);
    report.metrics.jitter_table = Some(jitter_table);
    Ok(())
}

/// Per-pulse output amplitudes for one dataset under the synchronized-readout
/// model: every clicked pulse is sampled at its known peak time, so the
/// amplitude is the noiseless peak for that click number plus one Gaussian
/// noise draw. Zero-click pulses produce no trigger and are omitted.
fn pulse_amplitudes(
    dataset: &ClickDataset,
    amps: &[f64],
    noise_rms: f64,
    seed_value: u64,
) -> Vec<f64> {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed_value);
    let normal = rand_distr::Normal::new(0.0, noise_rms.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = Vec::new();
    for rec in &dataset.records {
        let n = rec.clicked_pixels as usize;
        if n == 0 {
            continue;
        }
        let mean = amps[(n - 1).min(amps.len() - 1)];
        let noise = if noise_rms > 0.0 {
            normal.sample(&mut rng)
        } else {
            0.0
        };
        out.push(mean + noise);
    }
    out
}

fn stage_readout(
    config: &RunConfig,
    state: &mut PipelineState,
    report: &mut RunReport,
    log: &mut OutputLog,
) -> Result<()> {
    let amps_map = report
        .metrics
        .amplitude_map_v
        .as_ref()
        .ok_or_else(|| Error::MissingStage("simulate".into()))?
        .clone();
    // analyze the probe closest to mu = 5, where several peaks coexist
    let (probe_idx, _) = config
        .probe_mus
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 5.0).abs().total_cmp(&(b.1 - 5.0).abs()))
        .expect("validated non-empty");
    let dataset = &state.datasets[probe_idx];

    let amp_seed = seed::derive(config.seed, "stage.readout.amplitudes", probe_idx as u64);
    let amplitudes = pulse_amplitudes(
        dataset,
        &amps_map,
        config.circuit.amplifier_noise_rms_v,
        amp_seed,
    );
    if amplitudes.is_empty() {
        return Err(Error::Degenerate(
            "no clicked pulses to analyze; raise mu or the pulse count".into(),
        ));
    }

    let hist = build_histogram(&amplitudes, HISTOGRAM_BINS)?;
    log.write("readout/histogram.csv", &hist.to_csv())?;

    let max_click = dataset
        .records
        .iter()
        .map(|r| r.clicked_pixels)
        .max()
        .unwrap_or(0) as usize;
    let k_fit = 8.min(config.detector.n_pixels).min(max_click).max(1);
    let spacing = amps_map[0];
    // fit inside the window covering the first k_fit peaks so the top
    // component is not dragged right by rarer many-click pulses
    let window_hi = (k_fit as f64 + 0.5) * spacing;
    let windowed: Vec<f64> = amplitudes
        .iter()
        .copied()
        .filter(|a| *a <= window_hi)
        .collect();
    let fit_hist = build_histogram(&windowed, HISTOGRAM_BINS)?;
    let mixture = fit_gaussian_mixture(&fit_hist, k_fit, spacing)?;
    log.write(
        "readout/mixture.json",
        &serde_json::to_string_pretty(&mixture).map_err(|e| Error::Parse(e.to_string()))?,
    )?;

    let blocks = voltage_blocks(&mixture, mixture.components[0].mean_v / 2.0)?;
    log.write(
        "readout/blocks.json",
        &serde_json::to_string_pretty(&blocks).map_err(|e| Error::Parse(e.to_string()))?,
    )?;

    let assign_prob = assignment_probability(&mixture, &blocks)?;
    let mut ap_csv = String::from("photon_number,probability\n");
    for (j, p) in assign_prob.iter().enumerate() {
        ap_csv.push_str(&format!("{},{p}\n", j + 1));
    }
    log.write("readout/assignment_probability.csv", &ap_csv)?;

    let max_amp = amplitudes.iter().cloned().fold(0.0, f64::max);
    let n_levels = (max_amp / STAIRCASE_PITCH_V).ceil() as usize + 2;
    let levels: Vec<f64> = (0..n_levels).map(|i| i as f64 * STAIRCASE_PITCH_V).collect();
    let staircase = synthesize_staircase(&amplitudes, &levels)?;
    log.write("readout/staircase.csv", &staircase.to_csv())?;

    let staircase_counts = staircase_to_distribution(&staircase, &blocks)?;
    let mut sc_csv = String::from("photon_number,count\n");
    for (j, c) in staircase_counts.iter().enumerate() {
        sc_csv.push_str(&format!("{},{c}\n", j + 1));
    }
    log.write("readout/staircase_counts.csv", &sc_csv)?;

    state.readout_amplitudes = Some(amplitudes);
    report.metrics.histogram = Some(hist);
    report.metrics.mixture = Some(mixture);
    report.metrics.blocks = Some(blocks);
    report.metrics.assignment_probabilities = Some(assign_prob);
    report.metrics.staircase = Some(staircase);
    report.metrics.staircase_counts = Some(staircase_counts);
    Ok(())
}

fn stage_tomography(
    config: &RunConfig,
    state: &mut PipelineState,
    report: &mut RunReport,
    log: &mut OutputLog,
) -> Result<()> {
    let output = state
        .output_matrix
        .as_ref()
        .ok_or_else(|| Error::MissingStage("simulate".into()))?;
    let input = poisson_input_matrix(&config.probe_mus, M_MAX)?;
    log.write("tomo/input_matrix.csv", &input.to_csv())?;

    let n_click_max = M_MAX.min(config.detector.n_pixels);
    let solution = reconstruct_povm(&input, output, n_click_max, POVM_TOL, POVM_MAX_ITERS)?;
    log.write("tomo/fidelity_matrix.csv", &solution.matrix.to_csv())?;

    let mut pairs = Vec::with_capacity(config.probe_mus.len());
    for (k, mu) in config.probe_mus.iter().enumerate() {
        let observed = output.frequency_column(k)?;
        let reconstructed = reconstruct_input_state(&solution.matrix, &observed)?;
        let expected = input.column(k)?;
        pairs.push((*mu, hellinger(&reconstructed.distribution, &expected)?));
    }
    let mut h_csv = String::from("mu,hellinger\n");
    for (mu, h) in &pairs {
        h_csv.push_str(&format!("{mu},{h}\n"));
    }
    log.write("tomo/hellinger.csv", &h_csv)?;

    report.metrics.diagonal_fidelities = Some(solution.matrix.diagonal());
    report.metrics.solver = Some(SolverSummary {
        residual: solution.residual,
        iterations: solution.iterations,
        converged: solution.converged,
    });
    report.metrics.fidelity_matrix = Some(solution.matrix);
    report.metrics.hellinger_by_mu = Some(pairs);
    Ok(())
}

fn stage_crosstalk(
    config: &RunConfig,
    report: &mut RunReport,
    log: &mut OutputLog,
) -> Result<()> {
    let ds_seed = seed::derive(config.seed, "stage.crosstalk", 0);
    let dataset = sample_click_dataset(
        &config.detector,
        CROSSTALK_MU,
        config.pulses_per_probe,
        ds_seed,
    )?;
    let stats = estimate_crosstalk_stats(&dataset, PULSE_FREQUENCY_HZ)?;
    let p_xtalk = crosstalk_probability(&stats)?;
    let summary = CrosstalkReport { stats, p_xtalk };
    log.write(
        "crosstalk/stats.json",
        &serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    report.metrics.crosstalk = Some(summary);
    Ok(())
}

fn stage_fidelity_report(
    config: &RunConfig,
    report: &mut RunReport,
    log: &mut OutputLog,
) -> Result<()> {
    let n_top = 8.min(config.detector.n_pixels);
    let table: Vec<(usize, f64)> = (0..=n_top)
        .map(|n| {
            ideal_fidelity(n, config.detector.n_pixels, config.detector.efficiency)
                .map(|f| (n, f))
        })
        .collect::<Result<_>>()?;
    let diag = report.metrics.diagonal_fidelities.clone();
    let mut csv = String::from("n,ideal,reconstructed\n");
    for (n, f) in &table {
        let rec = diag
            .as_ref()
            .and_then(|d| d.get(*n))
            .map(|v| format_f64(*v))
            .unwrap_or_default();
        csv.push_str(&format!("{n},{},{rec}\n", format_f64(*f)));
    }
    log.write("fidelity_report.csv", &csv)?;
    report.metrics.ideal_fidelity_table = Some(table);
    Ok(())
}

/// Figure classes with plot-ready CSV emitters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    AmplitudeMap,
    Histogram,
    AssignmentProb,
    Staircase,
    FidelityHeatmap,
    HellingerVsMu,
    JitterVsN,
}

impl FromStr for Figure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "amplitude_map" => Ok(Figure::AmplitudeMap),
            "histogram" => Ok(Figure::Histogram),
            "assignment_prob" => Ok(Figure::AssignmentProb),
            "staircase" => Ok(Figure::Staircase),
            "fidelity_heatmap" => Ok(Figure::FidelityHeatmap),
            "hellinger_vs_mu" => Ok(Figure::HellingerVsMu),
            "jitter_vs_n" => Ok(Figure::JitterVsN),
            other => Err(Error::Parse(format!("unknown figure '{other}'"))),
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Figure::AmplitudeMap => "amplitude_map",
            Figure::Histogram => "histogram",
            Figure::AssignmentProb => "assignment_prob",
            Figure::Staircase => "staircase",
            Figure::FidelityHeatmap => "fidelity_heatmap",
            Figure::HellingerVsMu => "hellinger_vs_mu",
            Figure::JitterVsN => "jitter_vs_n",
        };
        f.write_str(name)
    }
}

impl Figure {
    /// The stage whose output backs this figure.
    pub fn backing_stage(&self) -> Stage {
        match self {
            Figure::AmplitudeMap | Figure::JitterVsN => Stage::Simulate,
            Figure::Histogram | Figure::AssignmentProb | Figure::Staircase => Stage::Readout,
            Figure::FidelityHeatmap | Figure::HellingerVsMu => Stage::Tomography,
        }
    }
}

/// Write the CSV data table for one figure from a run report into
/// `out_dir/plots/`, returning the path. Fails with the name of the stage
/// to run when the backing output is missing from the report.
pub fn emit_plot_data(report: &RunReport, figure: Figure, out_dir: &Path) -> Result<PathBuf> {
    let missing = || {
        Error::MissingStage(format!(
            "figure '{figure}' needs stage '{}'; add it to run.stages and rerun",
            figure.backing_stage()
        ))
    };
    let m = &report.metrics;
    let contents = match figure {
        Figure::AmplitudeMap => {
            let amps = m.amplitude_map_v.as_ref().ok_or_else(missing)?;
            let mut csv = String::from("k,amplitude_v\n");
            for (i, a) in amps.iter().enumerate() {
                csv.push_str(&format!("{},{a}\n", i + 1));
            }
            csv
        }
        Figure::Histogram => m.histogram.as_ref().ok_or_else(missing)?.to_csv(),
        Figure::AssignmentProb => {
            let probs = m.assignment_probabilities.as_ref().ok_or_else(missing)?;
            let mut csv = String::from("photon_number,probability\n");
            for (j, p) in probs.iter().enumerate() {
                csv.push_str(&format!("{},{p}\n", j + 1));
            }
            csv
        }
        Figure::Staircase => m.staircase.as_ref().ok_or_else(missing)?.to_csv(),
        Figure::FidelityHeatmap => m.fidelity_matrix.as_ref().ok_or_else(missing)?.to_csv(),
        Figure::HellingerVsMu => {
            let pairs = m.hellinger_by_mu.as_ref().ok_or_else(missing)?;
            let mut csv = String::from("mu,hellinger\n");
            for (mu, h) in pairs {
                csv.push_str(&format!("{mu},{h}\n"));
            }
            csv
        }
        Figure::JitterVsN => {
            let table = m.jitter_table.as_ref().ok_or_else(missing)?;
            if table.is_empty() {
                return Err(missing());
            }
            let mut csv = String::from("photon_number,fwhm_s\n");
            for j in table {
                csv.push_str(&format!("{},{}\n", j.photon_number, j.fwhm_s));
            }
            csv
        }
    };
    let dir = out_dir.join("plots");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{figure}.csv"));
    std::fs::write(&path, contents)?;
    Ok(path)
}

/// The published six-photon fidelity matrix bundled as a fixture, in the
/// [`FidelityMatrix::to_csv`] CSV format.
pub const REFERENCE_FIDELITY_CSV: &str = include_str!("../fixtures/table1_fidelity.csv");

/// Parse the bundled reference fidelity matrix.
pub fn reference_fidelity_matrix() -> Result<FidelityMatrix> {
    FidelityMatrix::from_csv(REFERENCE_FIDELITY_CSV)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let mut config = RunConfig::default();
        config.detector.beam_profile = BeamProfile::GaussianSpot { sigma_fraction: 0.37 };
        config.probe_mus = vec![0.15, 1.0, 2.75];
        config.pulses_per_probe = 12_345;
        config.seed = 99;
        config.output_dir = PathBuf::from("runs/a");
        config.stages = [Stage::Simulate, Stage::Crosstalk].into_iter().collect();
        let text = serialize_config(&config);
        let back = parse_config(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn config_parses_mu_ranges_and_comments() {
        let text = "probe.mus = 0.5:0.5:2 # coarse grid\nrun.seed = 7\n";
        let config = parse_config(text).unwrap();
        assert_eq!(config.probe_mus, vec![0.5, 1.0, 1.5, 2.0]);
        assert_eq!(config.seed, 7);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(parse_config("detector.pixels = 32\n").is_err());
        assert!(parse_config("nonsense\n").is_err());
    }

    #[test]
    fn stage_parsing_round_trips() {
        for stage in Stage::ALL {
            assert_eq!(Stage::from_str(&stage.to_string()).unwrap(), stage);
        }
        assert!(Stage::from_str("warp").is_err());
    }

    #[test]
    fn dependencies_pull_in_simulate() {
        let mut config = RunConfig::default();
        config.stages = [Stage::Readout].into_iter().collect();
        assert_eq!(
            config.resolved_stages(),
            vec![Stage::Simulate, Stage::Readout]
        );
    }

    #[test]
    fn reference_matrix_loads_and_matches_published_diagonal() {
        let m = reference_fidelity_matrix().unwrap();
        assert_eq!(m.m_max(), 6);
        let diag = m.diagonal();
        let expected = [1.0, 0.975, 0.874, 0.734, 0.405, 0.271, 0.215];
        for (a, b) in diag.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn figure_names_round_trip() {
        for name in [
            "amplitude_map",
            "histogram",
            "assignment_prob",
            "staircase",
            "fidelity_heatmap",
            "hellinger_vs_mu",
            "jitter_vs_n",
        ] {
            assert_eq!(Figure::from_str(name).unwrap().to_string(), name);
        }
    }
}
