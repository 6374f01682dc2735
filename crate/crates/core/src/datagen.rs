//! Parametric synthetic multipath CSI generator plus additive channel noise.
//!
//! Each sample is a sum of `num_paths` complex exponentials over the
//! (time, subcarrier, antenna) grid:
//!
//! ```text
//! H[t,k,a] = sum_p  alpha_p * exp(j*2*pi*(nu_p*t*dt - tau_p*k*df)) * exp(j*pi*a*sin(theta_p))
//! ```
//!
//! with per-sample draws of complex path gains (Gaussian, scaled by a per-path
//! decay profile), Doppler `nu_p = doppler_spread * cos(psi_p)` with uniform
//! `psi_p`, exponential delays with mean `delay_spread`, and uniform angles in
//! `[-angle_spread, angle_spread]`. Samples are normalized to unit mean power
//! before any noise is applied.
//!
//! This is a tapped-multipath stand-in for a full ray-tracing generator: cheap,
//! deterministic, and with second-order statistics that genuinely differ per
//! scenario preset, which is all the batch scheduler and diversity analyses
//! need to exercise. Full 3GPP geometry is a non-goal.
//!
//! All draws for sample `i` derive from `(spec.seed, i)`, so generation order
//! (serial or parallel) cannot change the output.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::rng::{derive_stream, domain, CounterRng};
use crate::tensor::{ComplexTensor, CsiSample, ScaleSpec, TensorError};

/// Name of the random source; recorded in manifests.
pub const RNG_NAME: &str = "splitmix64-ctr-v1";

const PRESETS_JSON: &str = include_str!("../data/presets.json");

#[derive(Debug)]
pub enum DatagenError {
    InvalidSpec(String),
    UnknownPreset(String),
    Tensor(TensorError),
}

impl fmt::Display for DatagenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidSpec(s) => write!(f, "invalid dataset spec: {s}"),
            Self::UnknownPreset(s) => write!(f, "unknown scenario preset: {s}"),
            Self::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DatagenError {}

impl From<TensorError> for DatagenError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

/// Propagation scenario parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPreset {
    pub scenario_id: u32,
    pub name: String,
    pub num_paths: usize,
    pub delay_spread_s: f64,
    pub doppler_spread_hz: f64,
    pub angle_spread_rad: f64,
    pub power_decay_db_per_path: f64,
}

impl ScenarioPreset {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.num_paths == 0 {
            return Err(DatagenError::InvalidSpec(format!(
                "preset {}: num_paths must be >= 1",
                self.name
            )));
        }
        if self.delay_spread_s <= 0.0 || self.doppler_spread_hz <= 0.0 || self.angle_spread_rad <= 0.0
        {
            return Err(DatagenError::InvalidSpec(format!(
                "preset {}: spreads must be positive",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
struct PresetFile {
    #[allow(dead_code)]
    version: u32,
    #[allow(dead_code)]
    rng: String,
    presets: Vec<ScenarioPreset>,
}

/// The built-in scenario presets (indoor, umi, uma, rma), loaded from the
/// versioned `data/presets.json` shipped with the crate.
pub fn builtin_presets() -> &'static [ScenarioPreset] {
    static PRESETS: OnceLock<Vec<ScenarioPreset>> = OnceLock::new();
    PRESETS.get_or_init(|| {
        let file: PresetFile =
            serde_json::from_str(PRESETS_JSON).expect("embedded presets.json must parse");
        for p in &file.presets {
            p.validate().expect("embedded preset must be valid");
        }
        file.presets
    })
}

/// Looks up a built-in preset by name (case-insensitive).
pub fn preset_by_name(name: &str) -> Result<ScenarioPreset, DatagenError> {
    builtin_presets()
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .cloned()
        .ok_or_else(|| DatagenError::UnknownPreset(name.to_string()))
}

/// Everything needed to deterministically generate one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dataset_id: u32,
    pub scenario: ScenarioPreset,
    pub scale: ScaleSpec,
    pub carrier_spacing_hz: f64,
    pub time_step_s: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        self.scenario.validate()?;
        if self.n_samples == 0 {
            return Err(DatagenError::InvalidSpec("n_samples must be >= 1".into()));
        }
        if self.carrier_spacing_hz <= 0.0 || self.time_step_s <= 0.0 {
            return Err(DatagenError::InvalidSpec(
                "carrier spacing and time step must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One propagation path of the tapped multipath model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub gain_re: f64,
    pub gain_im: f64,
    pub doppler_hz: f64,
    pub delay_s: f64,
    pub angle_rad: f64,
}

/// Draws the per-sample path parameters from a preset.
///
/// Draw order per path is fixed (gain pair, doppler, delay, angle) so the
/// stream layout is part of the reproducibility contract.
pub fn draw_paths(preset: &ScenarioPreset, rng: &mut CounterRng) -> Vec<PathParams> {
    let mut paths = Vec::with_capacity(preset.num_paths);
    for p in 0..preset.num_paths {
        let decay = 10f64.powf(-preset.power_decay_db_per_path * p as f64 / 20.0);
        let gain_re = rng.next_gaussian() / std::f64::consts::SQRT_2 * decay;
        let gain_im = rng.next_gaussian() / std::f64::consts::SQRT_2 * decay;
        let psi = 2.0 * std::f64::consts::PI * rng.next_f64();
        let doppler_hz = preset.doppler_spread_hz * psi.cos();
        let delay_s = -preset.delay_spread_s * (1.0 - rng.next_f64()).ln();
        let angle_rad = preset.angle_spread_rad * (2.0 * rng.next_f64() - 1.0);
        paths.push(PathParams {
            gain_re,
            gain_im,
            doppler_hz,
            delay_s,
            angle_rad,
        });
    }
    paths
}

/// Evaluates the multipath sum on the sample grid (unnormalized).
///
/// The per-path phase factorizes across axes, so each path costs
/// `T + K + A` trig evaluations instead of `T*K*A`.
pub fn synthesize(
    scale: &ScaleSpec,
    paths: &[PathParams],
    time_step_s: f64,
    carrier_spacing_hz: f64,
) -> ComplexTensor {
    let (t_n, k_n, a_n) = (scale.time_blocks, scale.subcarriers, scale.antenna_ports);
    let mut out = ComplexTensor::zeros(*scale);
    let two_pi = 2.0 * std::f64::consts::PI;

    let phasor_axis = |rate: f64, n: usize| -> (Vec<f64>, Vec<f64>) {
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        for i in 0..n {
            let phi = rate * i as f64;
            re.push(phi.cos());
            im.push(phi.sin());
        }
        (re, im)
    };

    for path in paths {
        let (tr, ti) = phasor_axis(two_pi * path.doppler_hz * time_step_s, t_n);
        let (kr, ki) = phasor_axis(-two_pi * path.delay_s * carrier_spacing_hz, k_n);
        let (ar, ai) = phasor_axis(std::f64::consts::PI * path.angle_rad.sin(), a_n);
        for t in 0..t_n {
            // gain * e_t
            let gt_re = path.gain_re * tr[t] - path.gain_im * ti[t];
            let gt_im = path.gain_re * ti[t] + path.gain_im * tr[t];
            for k in 0..k_n {
                let gtk_re = gt_re * kr[k] - gt_im * ki[k];
                let gtk_im = gt_re * ki[k] + gt_im * kr[k];
                let base = (t * k_n + k) * a_n;
                for a in 0..a_n {
                    out.re[base + a] += gtk_re * ar[a] - gtk_im * ai[a];
                    out.im[base + a] += gtk_re * ai[a] + gtk_im * ar[a];
                }
            }
        }
    }
    out
}

/// Scales the tensor in place to unit mean power per complex element.
pub fn normalize_power(t: &mut ComplexTensor) {
    let mp = t.mean_power();
    if mp > 0.0 {
        let s = 1.0 / mp.sqrt();
        for v in t.re.iter_mut().chain(t.im.iter_mut()) {
            *v *= s;
        }
    }
}

/// Generates sample `index` of a dataset; pure in `(spec, index)`.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> CsiSample {
    let mut rng = CounterRng::new(spec.seed, derive_stream(&[domain::DATAGEN, index as u64]));
    let paths = draw_paths(&spec.scenario, &mut rng);
    let mut data = synthesize(&spec.scale, &paths, spec.time_step_s, spec.carrier_spacing_hz);
    normalize_power(&mut data);
    CsiSample {
        data,
        scenario_id: spec.scenario.scenario_id,
        dataset_id: spec.dataset_id,
        sample_id: index as u32,
    }
}

/// Generates the full dataset for a spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<CsiSample>, DatagenError> {
    spec.validate()?;
    Ok((0..spec.n_samples).map(|i| generate_sample(spec, i)).collect())
}

/// Adds i.i.d. circular complex Gaussian noise at the given SNR.
///
/// Noise power is `signal_power / 10^(snr_db/10)` with the signal power
/// measured per sample, and the noise stream derives from
/// `(seed, dataset_id, sample_id)` so it is independent of call order.
pub fn add_noise(sample: &CsiSample, snr_db: f64, seed: u64) -> CsiSample {
    let sp = sample.data.mean_power();
    let np = sp / 10f64.powf(snr_db / 10.0);
    let sigma = (np / 2.0).sqrt();
    let mut rng = CounterRng::new(
        seed,
        derive_stream(&[domain::NOISE, sample.dataset_id as u64, sample.sample_id as u64]),
    );
    let mut out = sample.clone();
    for i in 0..out.data.re.len() {
        out.data.re[i] += sigma * rng.next_gaussian();
        out.data.im[i] += sigma * rng.next_gaussian();
    }
    out
}

/// FNV-1a 64-bit content hash, reported as fixed-width hex in manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sidecar manifest written next to each binary dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub rng: String,
    pub spec: DatasetSpec,
    pub snr_db: f64,
    pub noise_seed: u64,
    pub content_hash: String,
}

impl DatasetManifest {
    pub fn new(spec: &DatasetSpec, snr_db: f64, noise_seed: u64, file_bytes: &[u8]) -> Self {
        DatasetManifest {
            version: 1,
            rng: RNG_NAME.to_string(),
            spec: spec.clone(),
            snr_db,
            noise_seed,
            content_hash: format!("{:016x}", fnv1a64(file_bytes)),
        }
    }
}
