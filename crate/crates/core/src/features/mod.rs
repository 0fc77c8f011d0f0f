//! The five sequence features of an observation vector: instantaneous phase,
//! per-bin Doppler spectrum entropy, STFT magnitude spectrum, amplitude and
//! Doppler phase.

mod patch;

pub use patch::{
    patch, token_origins, unpatch, write_feature_csv, FeatureKind, FeatureNorm, FeatureTokenBatch, SampleFeatures, TokenOrigin,
};

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::{Complex, ObservationVector};
use crate::error::{validate, Error, Result};

pub const SMS_FLOOR: f64 = 1e-12;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_fft(len: usize) -> std::sync::Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

/// `arg z` mapped into `(-pi, pi]`, with `arg 0 = 0`.
pub fn principal_arg(z: Complex) -> f64 {
    let a = z.im.atan2(z.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

pub fn instantaneous_phase(x: &[Complex]) -> Vec<f64> {
    x.iter().map(|&z| principal_arg(z)).collect()
}

pub fn amplitude(x: &[Complex]) -> Vec<f64> {
    x.iter().map(|z| z.norm()).collect()
}

/// Unnormalized DFT reordered from the most negative to the most positive
/// frequency: output index `i` holds bin `i - floor(N/2)`.
fn centered_dft(x: &[Complex]) -> Vec<Complex> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf = x.to_vec();
    forward_fft(n).process(&mut buf);
    buf.rotate_right(n / 2);
    buf
}

/// `F(f_d) = |sum_n x(n) e^{-j 2 pi f_d n T_s}| / sqrt(N)` at the `N` DFT bins,
/// ordered from the most negative to the most positive frequency.
pub fn doppler_amplitude_spectrum(x: &[Complex]) -> Vec<f64> {
    let s = 1.0 / (x.len() as f64).sqrt();
    centered_dft(x).into_iter().map(|z| z.norm() * s).collect()
}

/// Phase of the same centered DFT bins as [`doppler_amplitude_spectrum`].
pub fn doppler_phase(x: &[Complex]) -> Vec<f64> {
    centered_dft(x).into_iter().map(principal_arg).collect()
}

/// Per-bin entropy `-F~ ln F~` of the normalized spectrum `F~ = F / sum F`.
pub fn doppler_spectrum_entropy(f: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = f.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Validation(format!(
            "spectrum values must be finite and >= 0, found {v}"
        )));
    }
    let total: f64 = f.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("spectrum has zero total energy".into()));
    }
    Ok(f.iter()
        .map(|&v| {
            let p = v / total;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .collect())
}

/// Complex STFT matrix stored row-major as `[frequency bin, frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StftMatrix {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex>,
}

impl StftMatrix {
    pub fn at(&self, k: usize, m: usize) -> Complex {
        self.data[k * self.frames + m]
    }
}

/// `S(k, m) = sum_n x(n) w(n - m hop) e^{-j 2 pi k n / omega}` over the
/// `floor((N - W)/hop) + 1` frames that fit inside the signal.
pub fn stft(x: &[Complex], window: &[f64], hop: usize, omega: usize) -> Result<StftMatrix> {
    let (n, w) = (x.len(), window.len());
    validate(w >= 1 && w <= n, || format!("window length {w} must be in 1..={n}"))?;
    validate(hop >= 1, || "hop must be >= 1".into())?;
    validate(omega >= w, || format!("transform length {omega} is shorter than the window {w}"))?;
    let frames = (n - w) / hop + 1;
    let fft = forward_fft(omega);
    let mut data = vec![Complex::new(0.0, 0.0); omega * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); omega];
    for m in 0..frames {
        let start = m * hop;
        buf.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
        for (j, (&xv, &wv)) in x[start..start + w].iter().zip(window).enumerate() {
            buf[j] = xv * wv;
        }
        fft.process(&mut buf);
        for (k, &y) in buf.iter().enumerate() {
            let shift = -2.0 * PI * ((k * start) % omega) as f64 / omega as f64;
            data[k * frames + m] = y * Complex::from_polar(1.0, shift);
        }
    }
    Ok(StftMatrix {
        bins: omega,
        frames,
        data,
    })
}

/// `SMS(k) = 10 log10(max(sum_m |S(k, m)|, 1e-12))`.
pub fn sms(s: &StftMatrix) -> Vec<f64> {
    (0..s.bins)
        .map(|k| {
            let total: f64 = s.data[k * s.frames..(k + 1) * s.frames].iter().map(|z| z.norm()).sum();
            10.0 * total.max(SMS_FLOOR).log10()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    Hann,
    Rectangular,
}

impl WindowKind {
    /// Symmetric window of length `w`.
    pub fn coefficients(self, w: usize) -> Vec<f64> {
        if w == 1 {
            return vec![1.0];
        }
        let d = (w - 1) as f64;
        (0..w)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / d;
                match self {
                    WindowKind::Hamming => 0.54 - 0.46 * t.cos(),
                    WindowKind::Hann => 0.5 - 0.5 * t.cos(),
                    WindowKind::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub window: WindowKind,
    pub window_len: usize,
    pub hop: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window: WindowKind::Hamming,
            window_len: 64,
            hop: 16,
        }
    }
}

/// The five feature channels of one observation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ip: Vec<f64>,
    pub dse: Vec<f64>,
    pub sms: Vec<f64>,
    pub amp: Vec<f64>,
    pub dp: Vec<f64>,
}

impl FeatureSet {
    /// Channels in concatenation order IP, DSE, SMS, Amp, DP.
    pub fn channels(&self) -> [&[f64]; 5] {
        [&self.ip, &self.dse, &self.sms, &self.amp, &self.dp]
    }

    pub fn channels_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.ip, &mut self.dse, &mut self.sms, &mut self.amp, &mut self.dp]
    }

    pub fn from_channels(c: [Vec<f64>; 5]) -> FeatureSet {
        let [ip, dse, sms, amp, dp] = c;
        FeatureSet { ip, dse, sms, amp, dp }
    }

    pub fn concat(&self) -> Vec<f64> {
        self.channels().concat()
    }
}

/// Computes all five features with the STFT transform length equal to the
/// window length `N`. An all-zero spectrum yields an all-zero DSE channel.
pub fn extract_all(v: &ObservationVector, cfg: &FeatureConfig) -> Result<FeatureSet> {
    let x = &v.values;
    validate(!x.is_empty(), || format!("sample {} is empty", v.sample_id))?;
    if let Some(z) = x.iter().find(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(Error::NonFinite(format!("sample {} contains {z}", v.sample_id)));
    }
    let spectrum = doppler_amplitude_spectrum(x);
    let dse = match doppler_spectrum_entropy(&spectrum) {
        Ok(d) => d,
        Err(Error::Degenerate(msg)) => {
            log::warn!("sample {}: {msg}; using zero DSE", v.sample_id);
            vec![0.0; x.len()]
        }
        Err(e) => return Err(e),
    };
    let window = cfg.window.coefficients(cfg.window_len);
    let s = stft(x, &window, cfg.hop, x.len())?;
    Ok(FeatureSet {
        ip: instantaneous_phase(x),
        dse,
        sms: sms(&s),
        amp: amplitude(x),
        dp: doppler_phase(x),
    })
}

pub fn extract_batch(vectors: &[ObservationVector], cfg: &FeatureConfig) -> Result<Vec<SampleFeatures>> {
    vectors
        .iter()
        .map(|v| {
            Ok(SampleFeatures {
                sample_id: v.sample_id,
                label: v.label,
                features: extract_all(v, cfg)?,
            })
        })
        .collect()
}
