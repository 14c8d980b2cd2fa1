//! Waveform handling, F0 estimation and the pitch post-processing chain:
//! mel-scaling, corpus min-max statistics and discretization into the raw /
//! mel / coarse index spaces consumed by the pitch embedding.

mod f0;
pub mod wav;

pub use f0::estimate_f0;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default F0 search floor in Hz. Brackets the 100-600 Hz band where speech
/// F0 concentrates, with margin on both sides.
pub const DEFAULT_F0_FLOOR: f64 = 40.0;
/// Default F0 search ceiling in Hz.
pub const DEFAULT_F0_CEIL: f64 = 800.0;

/// Index space of the raw-Hz pitch quantizer (index 0 reserved for unvoiced).
pub const RAW_PITCH_VOCAB: usize = 1600;
/// Index space of the coarse pitch quantizer (index 0 reserved for unvoiced).
pub const COARSE_PITCH_VOCAB: usize = 256;
/// Bin count of the corpus F0 histogram.
pub const STATS_HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("audio too short: {samples} samples is less than two periods at {f0_floor} Hz")]
    AudioTooShort { samples: usize, f0_floor: f64 },
    #[error("unsupported hop size: {0} ms (expected 10, 20 or 40)")]
    UnsupportedHop(u32),
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("degenerate corpus statistics: min == max == {0} Hz with voiced frames present")]
    DegenerateStats(f64),
    #[error("empty voiced corpus: no voiced frame in any track")]
    EmptyVoicedCorpus,
    #[error("invalid F0 range: floor {floor} Hz, ceil {ceil} Hz, sample rate {sample_rate} Hz")]
    InvalidF0Range { floor: f64, ceil: f64, sample_rate: u32 },
    #[error("wav: {0}")]
    Wav(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl SignalError {
    /// Stable machine-parsable code for CLI error reporting.
    pub fn code(&self) -> &'static str {
        match self {
            SignalError::AudioTooShort { .. } => "audio_too_short",
            SignalError::UnsupportedHop(_) => "unsupported_hop",
            SignalError::EmptyWaveform => "empty_waveform",
            SignalError::NonFiniteSample(_) => "non_finite_sample",
            SignalError::ZeroSampleRate => "zero_sample_rate",
            SignalError::DegenerateStats(_) => "degenerate_corpus_stats",
            SignalError::EmptyVoicedCorpus => "empty_voiced_corpus",
            SignalError::InvalidF0Range { .. } => "invalid_f0_range",
            SignalError::Wav(_) => "wav_format",
            SignalError::Io(_) => "io",
        }
    }
}

/// Mono sample buffer with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Builds a waveform, validating that it is non-empty, finite and has a
    /// positive sample rate.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        if sample_rate == 0 {
            return Err(SignalError::ZeroSampleRate);
        }
        if samples.is_empty() {
            return Err(SignalError::EmptyWaveform);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(SignalError::NonFiniteSample(i));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Number of analysis frames for `n_samples` at `hop_ms`:
/// `floor(duration_ms / hop_ms) + 1`.
pub fn frame_count(n_samples: usize, sample_rate: u32, hop_ms: u32) -> usize {
    (n_samples as u64 * 1000 / (sample_rate as u64 * hop_ms as u64)) as usize + 1
}

/// Per-frame F0 track. Unvoiced frames carry `f0 = 0.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack {
    pub f0_hz: Vec<f64>,
    pub hop_ms: u32,
    pub voiced: Vec<bool>,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn voiced_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0_hz
            .iter()
            .zip(&self.voiced)
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
    }
}

/// One JSON-lines record of a dumped pitch track.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PitchRecord {
    pub utt_id: String,
    pub hop_ms: u32,
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl PitchRecord {
    pub fn new(utt_id: impl Into<String>, track: &PitchTrack) -> Self {
        Self {
            utt_id: utt_id.into(),
            hop_ms: track.hop_ms,
            f0_hz: track.f0_hz.clone(),
            voiced: track.voiced.clone(),
        }
    }
}

/// HTK-style mel scale: `2595 * log10(1 + f / 700)`.
pub fn mel(f_hz: f64) -> f64 {
    2595.0 * (1.0 + f_hz / 700.0).log10()
}

/// Mel-scale every voiced frame of a track; unvoiced frames stay 0.
pub fn mel_scale(track: &PitchTrack) -> Vec<f64> {
    track
        .f0_hz
        .iter()
        .zip(&track.voiced)
        .map(|(&f, &v)| if v { mel(f) } else { 0.0 })
        .collect()
}

/// Pitch discretization variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantVariant {
    /// Rounded Hz, clamped to `[1, 1599]`; vocabulary 1600.
    Raw,
    /// Rounded mel value plus one; vocabulary `2 + round(mel(f0_ceil))`.
    Mel,
    /// Corpus min-max normalized mel value in 254 bins; vocabulary 256.
    Coarse,
}

/// Frame-wise pitch indices over a fixed vocabulary. Index 0 is reserved for
/// unvoiced frames in every variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedPitch {
    pub indices: Vec<usize>,
    pub vocab_size: usize,
    pub variant: QuantVariant,
}

/// Corpus-level statistics of voiced F0 values: min/max plus a fixed-range
/// histogram. The histogram range is pinned to `[f0_floor, f0_ceil]` so that
/// merging partial statistics is order-independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPitchStats {
    pub min_hz: f64,
    pub max_hz: f64,
    pub f0_floor: f64,
    pub f0_ceil: f64,
    pub histogram: Vec<u64>,
    pub voiced_frames: u64,
}

impl CorpusPitchStats {
    fn empty(f0_floor: f64, f0_ceil: f64) -> Self {
        Self {
            min_hz: f64::INFINITY,
            max_hz: f64::NEG_INFINITY,
            f0_floor,
            f0_ceil,
            histogram: vec![0; STATS_HISTOGRAM_BINS],
            voiced_frames: 0,
        }
    }

    fn accumulate(&mut self, track: &PitchTrack) {
        for f in track.voiced_values() {
            self.min_hz = self.min_hz.min(f);
            self.max_hz = self.max_hz.max(f);
            let span = self.f0_ceil - self.f0_floor;
            let norm = ((f - self.f0_floor) / span).clamp(0.0, 1.0);
            let bin = ((norm * STATS_HISTOGRAM_BINS as f64) as usize)
                .min(STATS_HISTOGRAM_BINS - 1);
            self.histogram[bin] += 1;
            self.voiced_frames += 1;
        }
    }

    /// Merge two partial statistics. Commutative and associative, so a
    /// parallel reduction yields the same result as a sequential pass.
    pub fn merge(mut self, other: &CorpusPitchStats) -> Self {
        debug_assert_eq!(self.f0_floor, other.f0_floor);
        debug_assert_eq!(self.f0_ceil, other.f0_ceil);
        self.min_hz = self.min_hz.min(other.min_hz);
        self.max_hz = self.max_hz.max(other.max_hz);
        for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
            *a += b;
        }
        self.voiced_frames += other.voiced_frames;
        self
    }

    /// Center frequency (Hz) of the most populated histogram bin.
    pub fn mode_hz(&self) -> f64 {
        let (bin, _) = self
            .histogram
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .expect("histogram is never empty");
        let width = (self.f0_ceil - self.f0_floor) / STATS_HISTOGRAM_BINS as f64;
        self.f0_floor + (bin as f64 + 0.5) * width
    }
}

/// Min/max and histogram of voiced F0 over a track set.
///
/// `f0_floor`/`f0_ceil` pin the histogram range (and are recorded in the
/// result: quantizers derive their mel vocabulary from the ceiling).
pub fn corpus_pitch_stats(
    tracks: &[PitchTrack],
    f0_floor: f64,
    f0_ceil: f64,
) -> Result<CorpusPitchStats, SignalError> {
    let partials = crate::util::par_map(tracks, |t| {
        let mut s = CorpusPitchStats::empty(f0_floor, f0_ceil);
        s.accumulate(t);
        s
    });
    let stats = partials
        .into_iter()
        .fold(CorpusPitchStats::empty(f0_floor, f0_ceil), |acc, s| acc.merge(&s));
    if stats.voiced_frames == 0 {
        return Err(SignalError::EmptyVoicedCorpus);
    }
    Ok(stats)
}

/// Discretize per-frame pitch values into the index space of `variant`.
///
/// Inputs follow the chain the variants are defined over: `Raw` consumes Hz
/// values straight from a [`PitchTrack`]; `Mel` and `Coarse` consume the
/// output of [`mel_scale`]. Frames with value exactly 0.0 are unvoiced and
/// map to the reserved index 0.
pub fn quantize(
    values: &[f64],
    variant: QuantVariant,
    stats: &CorpusPitchStats,
) -> Result<QuantizedPitch, SignalError> {
    let vocab_size = match variant {
        QuantVariant::Raw => RAW_PITCH_VOCAB,
        QuantVariant::Mel => 2 + mel(stats.f0_ceil).round() as usize,
        QuantVariant::Coarse => COARSE_PITCH_VOCAB,
    };
    let any_voiced = values.iter().any(|&v| v != 0.0);
    let (mel_min, mel_max) = (mel(stats.min_hz), mel(stats.max_hz));
    if variant == QuantVariant::Coarse && any_voiced && mel_min == mel_max {
        return Err(SignalError::DegenerateStats(stats.min_hz));
    }
    let indices = values
        .iter()
        .map(|&v| {
            if v == 0.0 {
                return 0;
            }
            match variant {
                QuantVariant::Raw => (v.round() as i64).clamp(1, RAW_PITCH_VOCAB as i64 - 1) as usize,
                QuantVariant::Mel => {
                    (1 + v.round() as i64).clamp(1, vocab_size as i64 - 1) as usize
                }
                QuantVariant::Coarse => {
                    let norm = ((v - mel_min) / (mel_max - mel_min)).clamp(0.0, 1.0);
                    (1 + (norm * 254.0).floor() as i64).clamp(1, 255) as usize
                }
            }
        })
        .collect();
    Ok(QuantizedPitch { indices, vocab_size, variant })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn track(f0: &[f64], hop_ms: u32) -> PitchTrack {
        PitchTrack {
            f0_hz: f0.to_vec(),
            hop_ms,
            voiced: f0.iter().map(|&f| f != 0.0).collect(),
        }
    }

    fn stats_for(min: f64, max: f64) -> CorpusPitchStats {
        let t = track(&[min, max], 10);
        corpus_pitch_stats(&[t], DEFAULT_F0_FLOOR, DEFAULT_F0_CEIL).unwrap()
    }

    #[test]
    fn mel_fixed_points() {
        assert_eq!(mel(0.0), 0.0);
        let m700 = mel(700.0);
        assert!((m700 - 2595.0 * 2.0_f64.log10()).abs() < 1e-9);
        assert!((m700 - 781.17).abs() < 0.01);
    }

    #[test]
    fn mel_scale_keeps_unvoiced_at_zero() {
        let t = track(&[220.0, 0.0, 330.0], 10);
        let m = mel_scale(&t);
        assert_eq!(m[1], 0.0);
        assert!(m[0] > 0.0 && m[2] > m[0]);
    }

    #[test]
    fn quantize_raw_rounds_hz() {
        let stats = stats_for(100.0, 600.0);
        let q = quantize(&[220.4, 0.0, 2000.0, 0.2], QuantVariant::Raw, &stats).unwrap();
        assert_eq!(q.indices, vec![220, 0, 1599, 1]);
        assert_eq!(q.vocab_size, 1600);
    }

    #[test]
    fn quantize_coarse_hits_upper_clamp_at_corpus_max() {
        let stats = stats_for(100.0, 600.0);
        let values = mel_scale(&track(&[600.0, 100.0, 0.0], 10));
        let q = quantize(&values, QuantVariant::Coarse, &stats).unwrap();
        assert_eq!(q.indices, vec![255, 1, 0]);
        assert_eq!(q.vocab_size, 256);
    }

    #[test]
    fn quantize_mel_vocab_derived_from_ceiling() {
        let stats = stats_for(100.0, 600.0);
        let expected_vocab = 2 + mel(DEFAULT_F0_CEIL).round() as usize;
        let values = mel_scale(&track(&[700.0, 0.0], 10));
        let q = quantize(&values, QuantVariant::Mel, &stats).unwrap();
        assert_eq!(q.vocab_size, expected_vocab);
        assert_eq!(q.indices[0], 1 + mel(700.0).round() as usize);
        assert_eq!(q.indices[1], 0);
    }

    #[test]
    fn quantize_degenerate_stats_errors_with_voiced_input() {
        let stats = stats_for(440.0, 440.0);
        let values = mel_scale(&track(&[440.0], 10));
        let err = quantize(&values, QuantVariant::Coarse, &stats).unwrap_err();
        assert_eq!(err.code(), "degenerate_corpus_stats");
        // All-unvoiced input is fine even with degenerate stats.
        assert!(quantize(&[0.0, 0.0], QuantVariant::Coarse, &stats).is_ok());
    }

    #[test]
    fn corpus_stats_min_max_over_tracks() {
        let t1 = track(&[100.0, 200.0], 10);
        let t2 = track(&[150.0, 600.0], 10);
        let stats = corpus_pitch_stats(&[t1, t2], DEFAULT_F0_FLOOR, DEFAULT_F0_CEIL).unwrap();
        assert_eq!(stats.min_hz, 100.0);
        assert_eq!(stats.max_hz, 600.0);
        assert_eq!(stats.voiced_frames, 4);
    }

    #[test]
    fn corpus_stats_require_a_voiced_frame() {
        let t = track(&[0.0, 0.0], 10);
        let err = corpus_pitch_stats(&[t], DEFAULT_F0_FLOOR, DEFAULT_F0_CEIL).unwrap_err();
        assert_eq!(err.code(), "empty_voiced_corpus");
    }

    #[test]
    fn corpus_stats_merge_is_order_independent() {
        let t1 = track(&[120.0, 240.0, 0.0], 10);
        let t2 = track(&[180.0, 500.0], 10);
        let t3 = track(&[90.0], 10);
        let a = corpus_pitch_stats(&[t1.clone(), t2.clone(), t3.clone()], 40.0, 800.0).unwrap();
        let b = corpus_pitch_stats(&[t3, t1, t2], 40.0, 800.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn waveform_rejects_bad_input() {
        assert!(matches!(
            Waveform::new(vec![], 16000),
            Err(SignalError::EmptyWaveform)
        ));
        assert!(matches!(
            Waveform::new(vec![0.0, f64::NAN], 16000),
            Err(SignalError::NonFiniteSample(1))
        ));
        assert!(matches!(
            Waveform::new(vec![0.0], 0),
            Err(SignalError::ZeroSampleRate)
        ));
    }

    #[test]
    fn frame_count_length_law() {
        // 1 s at 16 kHz.
        assert_eq!(frame_count(16000, 16000, 10), 101);
        assert_eq!(frame_count(16000, 16000, 20), 51);
        assert_eq!(frame_count(16000, 16000, 40), 26);
    }

    proptest! {
        #[test]
        fn quantize_indices_stay_in_range(
            values in proptest::collection::vec(0.0f64..5000.0, 0..64),
            variant in prop_oneof![
                Just(QuantVariant::Raw),
                Just(QuantVariant::Mel),
                Just(QuantVariant::Coarse)
            ],
        ) {
            let stats = stats_for(100.0, 600.0);
            let input: Vec<f64> = match variant {
                QuantVariant::Raw => values.clone(),
                _ => values.iter().map(|&v| if v == 0.0 { 0.0 } else { mel(v) }).collect(),
            };
            let q = quantize(&input, variant, &stats).unwrap();
            prop_assert!(q.indices.iter().all(|&i| i < q.vocab_size));
        }

        #[test]
        fn quantize_is_monotone_on_voiced_frames(
            a in 40.0f64..800.0,
            b in 40.0f64..800.0,
            variant in prop_oneof![
                Just(QuantVariant::Raw),
                Just(QuantVariant::Mel),
                Just(QuantVariant::Coarse)
            ],
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let stats = stats_for(100.0, 600.0);
            let input: Vec<f64> = match variant {
                QuantVariant::Raw => vec![lo, hi],
                _ => vec![mel(lo), mel(hi)],
            };
            let q = quantize(&input, variant, &stats).unwrap();
            prop_assert!(q.indices[0] <= q.indices[1]);
        }

        #[test]
        fn mel_is_monotone(a in 0.0f64..8000.0, b in 0.0f64..8000.0) {
            prop_assume!(a < b);
            prop_assert!(mel(a) < mel(b));
        }
    }
}
