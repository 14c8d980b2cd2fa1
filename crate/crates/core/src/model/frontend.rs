//! Trainable acoustic frontend: log-mel filterbank features at a 10 ms hop
//! followed by a strided convolution stack that lands on a 20 ms hop.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamBinder, Tape, Tensor, Var};
use crate::signal::{frame_count, mel, Waveform};

use super::blocks::{Conv1d, GroupNorm, ParamMuts, ParamRefs};
use super::ModelError;

/// Analysis window length in samples at 16 kHz (25 ms).
const WIN: usize = 400;
/// Hop in samples (10 ms).
const HOP: usize = 160;
const FFT_SIZE: usize = 512;
const FMIN: f64 = 20.0;
const LOG_FLOOR: f64 = 1e-10;

/// Log-mel filterbank features `[t10, n_mels]`, frames centered at
/// `i * 10 ms` so the frame count obeys the shared length law.
pub fn log_mel(wav: &Waveform, n_mels: usize) -> Result<Tensor, ModelError> {
    if wav.len() < WIN {
        return Err(ModelError::AudioTooShort { samples: wav.len(), window: WIN });
    }
    let sr = wav.sample_rate() as f64;
    let n_frames = frame_count(wav.len(), wav.sample_rate(), 10);
    let window: Vec<f64> = (0..WIN)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / WIN as f64).cos())
        .collect();
    let filters = mel_filterbank(n_mels, sr);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let samples = wav.samples();
    let mut data = Vec::with_capacity(n_frames * n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for frame in 0..n_frames {
        let center = (frame * HOP) as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let pos = center - (WIN / 2) as isize + i as isize;
            let s = if i < WIN && pos >= 0 && (pos as usize) < samples.len() {
                samples[pos as usize] * window[i]
            } else {
                0.0
            };
            *slot = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..FFT_SIZE / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / FFT_SIZE as f64)
            .collect();
        for filter in &filters {
            let mut acc = 0.0;
            for &(bin, w) in filter {
                acc += power[bin] * w;
            }
            data.push((acc + LOG_FLOOR).ln());
        }
    }
    // Per-utterance, per-bin mean/variance normalization.
    for bin in 0..n_mels {
        let mut mean = 0.0;
        for f in 0..n_frames {
            mean += data[f * n_mels + bin];
        }
        mean /= n_frames as f64;
        let mut var = 0.0;
        for f in 0..n_frames {
            let d = data[f * n_mels + bin] - mean;
            var += d * d;
        }
        var /= n_frames as f64;
        let inv_std = 1.0 / (var + 1e-5).sqrt();
        for f in 0..n_frames {
            let v = &mut data[f * n_mels + bin];
            *v = (*v - mean) * inv_std;
        }
    }
    Ok(Tensor::new(vec![n_frames, n_mels], data))
}

/// Sparse triangular filters on the mel scale, `(bin, weight)` pairs.
fn mel_filterbank(n_mels: usize, sample_rate: f64) -> Vec<Vec<(usize, f64)>> {
    let fmax = sample_rate / 2.0;
    let mel_lo = mel(FMIN);
    let mel_hi = mel(fmax);
    let mel_points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64)
        .collect();
    let hz_points: Vec<f64> = mel_points
        .iter()
        .map(|&m| 700.0 * (10f64.powf(m / 2595.0) - 1.0))
        .collect();
    let bin_of = |hz: f64| hz * FFT_SIZE as f64 / sample_rate;
    let mut filters = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (lo, mid, hi) = (bin_of(hz_points[m]), bin_of(hz_points[m + 1]), bin_of(hz_points[m + 2]));
        let mut taps = Vec::new();
        let start = lo.ceil() as usize;
        let end = (hi.floor() as usize).min(FFT_SIZE / 2);
        for bin in start..=end {
            let b = bin as f64;
            let w = if b <= mid {
                (b - lo) / (mid - lo).max(1e-12)
            } else {
                (hi - b) / (hi - mid).max(1e-12)
            };
            if w > 0.0 {
                taps.push((bin, w));
            }
        }
        filters.push(taps);
    }
    filters
}

/// Convolution stack reducing the 10 ms feature hop to 20 ms: one strided
/// unit and one stride-1 unit, each conv -> group norm -> mish.
#[derive(Debug, Clone)]
pub struct Frontend {
    conv0: Conv1d,
    norm0: GroupNorm,
    conv1: Conv1d,
    norm1: GroupNorm,
}

impl Frontend {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, n_mels: usize, d_acoustic: usize) -> Self {
        let groups = if d_acoustic.is_multiple_of(4) { 4 } else { 1 };
        Self {
            conv0: Conv1d::new(format!("{name}.conv0"), rng, n_mels, d_acoustic, 3, 2, 1),
            norm0: GroupNorm::new(format!("{name}.norm0"), d_acoustic, groups),
            conv1: Conv1d::new(format!("{name}.conv1"), rng, d_acoustic, d_acoustic, 3, 1, 1),
            norm1: GroupNorm::new(format!("{name}.norm1"), d_acoustic, groups),
        }
    }

    /// `[t10, n_mels]` -> `[ceil(t10/2), d_acoustic]`.
    pub fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, feats: Var) -> Var {
        let x = self.conv0.forward(tape, ps, feats);
        let x = self.norm0.forward(tape, ps, x);
        let x = tape.mish(x);
        let x = self.conv1.forward(tape, ps, x);
        let x = self.norm1.forward(tape, ps, x);
        tape.mish(x)
    }

    pub fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        self.conv0.params(out);
        self.norm0.params(out);
        self.conv1.params(out);
        self.norm1.params(out);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        self.conv0.params_mut(out);
        self.norm0.params_mut(out);
        self.conv1.params_mut(out);
        self.norm1.params_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn second_of(freq: f64) -> Waveform {
        let samples: Vec<f64> = (0..16000)
            .map(|i| 0.4 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect();
        Waveform::new(samples, 16000).unwrap()
    }

    #[test]
    fn one_second_yields_101_then_51_frames() {
        let feats = log_mel(&second_of(220.0), 40).unwrap();
        assert_eq!(feats.shape(), &[101, 40]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fe = Frontend::new("frontend", &mut rng, 40, 16);
        let mut tape = Tape::new();
        let mut ps = ParamBinder::new();
        let x = tape.leaf(&feats);
        let y = fe.forward(&mut tape, &mut ps, x);
        assert_eq!(tape.shape(y), &[51, 16]);
    }

    #[test]
    fn zero_signal_features_are_finite() {
        let wav = Waveform::new(vec![0.0; 8000], 16000).unwrap();
        let feats = log_mel(&wav, 40).unwrap();
        assert!(feats.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_short_audio_is_rejected() {
        let wav = Waveform::new(vec![0.1; 399], 16000).unwrap();
        let err = log_mel(&wav, 40).unwrap_err();
        assert_eq!(err.code(), "audio_too_short");
    }

    #[test]
    fn output_dim_is_d_acoustic_for_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fe = Frontend::new("frontend", &mut rng, 24, 10);
        for n in [6400, 9600, 12800] {
            let wav = Waveform::new(vec![0.01; n], 16000).unwrap();
            let feats = log_mel(&wav, 24).unwrap();
            let mut tape = Tape::new();
            let mut ps = ParamBinder::new();
            let x = tape.leaf(&feats);
            let y = fe.forward(&mut tape, &mut ps, x);
            let t10 = frame_count(n, 16000, 10);
            assert_eq!(tape.shape(y), &[t10.div_ceil(2), 10]);
        }
    }

    #[test]
    fn tone_energy_lands_in_low_mel_bins() {
        let feats = log_mel(&second_of(200.0), 40).unwrap();
        // Energy at frame 50: low bins should dominate the top ones.
        let row = &feats.data()[50 * 40..51 * 40];
        let low: f64 = row[..8].iter().sum();
        let high: f64 = row[32..].iter().sum();
        assert!(low > high, "low {low} vs high {high}");
    }
}
