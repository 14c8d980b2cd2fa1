//! Synthetic tonal-language corpus generator.
//!
//! Utterances are sequences of toy syllables: initials render as short
//! band-passed noise bursts (segmental identity = band center), tonal finals
//! as harmonic-rich periodic signals whose F0 follows the tone contour and
//! whose spectral envelope identifies the final. Tones share segmental
//! content and differ only in their F0 trajectory, and a per-utterance
//! speaker factor shifts the whole contour band, so tone identity lives in
//! the contour shape rather than absolute pitch.
//!
//! On the evaluation split each phoneme is independently substituted with
//! probability `p_err` (tone substitution and segment substitution equally
//! likely for finals); the audio renders what was "actually said" and the
//! substituted form is recorded as the annotated truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::Inventory;
use crate::signal::{wav, SignalError, Waveform};
use crate::util::par_map;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("manifest {path}: audio file {audio} does not exist")]
    MissingAudio { path: String, audio: String },
    #[error("manifest line {0}: {1}")]
    BadManifestLine(usize, String),
    #[error("signal: {0}")]
    Signal(#[from] SignalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl SynthError {
    pub fn code(&self) -> &'static str {
        match self {
            SynthError::InvalidSpec(_) => "invalid_synth_spec",
            SynthError::MissingAudio { .. } => "missing_audio",
            SynthError::BadManifestLine(..) => "bad_manifest_line",
            SynthError::Signal(e) => e.code(),
            SynthError::Io(_) => "io",
        }
    }
}

const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContourShape {
    Flat,
    Rise,
    Dip,
    Fall,
    Short,
}

/// F0 trajectory of one tone before the per-utterance speaker factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneContour {
    pub start_hz: f64,
    pub end_hz: f64,
    pub shape: ContourShape,
}

impl ToneContour {
    /// Instantaneous F0 at relative position `tau` in `[0, 1]`.
    fn f0_at(&self, tau: f64) -> f64 {
        match self.shape {
            ContourShape::Flat | ContourShape::Rise | ContourShape::Fall | ContourShape::Short => {
                self.start_hz + (self.end_hz - self.start_hz) * tau
            }
            ContourShape::Dip => {
                let low = 0.82 * self.start_hz.min(self.end_hz);
                if tau < 0.5 {
                    self.start_hz + (low - self.start_hz) * (tau / 0.5)
                } else {
                    low + (self.end_hz - low) * ((tau - 0.5) / 0.5)
                }
            }
        }
    }

    /// Duration multiplier of the final carrying this tone.
    fn duration_factor(&self) -> f64 {
        if self.shape == ContourShape::Short {
            0.55
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_initials: usize,
    pub n_finals: usize,
    pub tones: usize,
    /// Inclusive range of syllables per utterance.
    pub utt_len_range: (usize, usize),
    /// Per-phoneme substitution probability on the evaluation split.
    pub p_err: f64,
    /// One contour per tone, index `tone - 1`.
    pub contours: Vec<ToneContour>,
    /// Per-utterance multiplicative F0 range (speaker variation).
    pub speaker_scale_range: (f64, f64),
    /// Probability of a zero-initial syllable.
    pub zero_initial_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_initials: 4,
            n_finals: 6,
            tones: 5,
            utt_len_range: (2, 5),
            p_err: 0.15,
            contours: vec![
                ToneContour { start_hz: 265.0, end_hz: 265.0, shape: ContourShape::Flat },
                ToneContour { start_hz: 240.0, end_hz: 295.0, shape: ContourShape::Rise },
                ToneContour { start_hz: 255.0, end_hz: 262.0, shape: ContourShape::Dip },
                ToneContour { start_hz: 298.0, end_hz: 238.0, shape: ContourShape::Fall },
                ToneContour { start_hz: 258.0, end_hz: 243.0, shape: ContourShape::Short },
            ],
            speaker_scale_range: (0.78, 1.28),
            zero_initial_prob: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_initials == 0 || self.n_finals == 0 {
            return Err(SynthError::InvalidSpec("need at least one initial and one final".into()));
        }
        if self.tones != self.contours.len() {
            return Err(SynthError::InvalidSpec(format!(
                "{} tones but {} contours",
                self.tones,
                self.contours.len()
            )));
        }
        for (i, a) in self.contours.iter().enumerate() {
            for b in &self.contours[i + 1..] {
                if a == b {
                    return Err(SynthError::InvalidSpec(
                        "contours must be distinct per tone".into(),
                    ));
                }
            }
        }
        if !(0.0..1.0).contains(&self.p_err) {
            return Err(SynthError::InvalidSpec(format!("p_err {} not in [0, 1)", self.p_err)));
        }
        if self.utt_len_range.0 == 0 || self.utt_len_range.0 > self.utt_len_range.1 {
            return Err(SynthError::InvalidSpec("bad utterance length range".into()));
        }
        Ok(())
    }

    pub fn inventory(&self) -> Inventory {
        Inventory::toy(self.n_initials, self.n_finals)
    }

    /// Lowest and highest F0 the generator can emit, including the speaker
    /// factor and the dip undershoot.
    pub fn f0_band(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.contours {
            let low = match c.shape {
                ContourShape::Dip => 0.82 * c.start_hz.min(c.end_hz),
                _ => c.start_hz.min(c.end_hz),
            };
            lo = lo.min(low);
            hi = hi.max(c.start_hz.max(c.end_hz));
        }
        (lo * self.speaker_scale_range.0, hi * self.speaker_scale_range.1)
    }
}

/// One syllable to render: optional initial index, final index, tone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Syllable {
    initial: Option<usize>,
    final_idx: usize,
    tone: u8,
}

impl Syllable {
    fn render_string(self, inv: &Inventory) -> String {
        // The toy inventory lists each final base five times (tones 1-5).
        let base = &inv.tonal_finals()[self.final_idx * 5].0;
        match self.initial {
            Some(i) => format!("{}{}{}", inv.initials()[i], base, self.tone),
            None => format!("{}{}", base, self.tone),
        }
    }
}

/// Fully determined utterance plan; rendering is a pure function of this.
#[derive(Debug, Clone)]
struct UttPlan {
    utt_id: String,
    canonical: Vec<Syllable>,
    annotated: Vec<Syllable>,
    speaker_scale: f64,
    final_durations: Vec<f64>,
    gaps: Vec<f64>,
    noise_seed: u64,
}

/// One manifest record; `audio` is relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub audio: String,
    pub canonical: Vec<String>,
    pub annotated: Vec<String>,
}

/// Corpus split sizes for generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenConfig {
    pub spec: SynthSpec,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self { spec: SynthSpec::default(), n_train: 400, n_dev: 50, n_eval: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct DatagenOutput {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub eval: PathBuf,
}

/// Renders a corpus into `out_dir`: WAV files plus `train.jsonl`,
/// `dev.jsonl` and `eval.jsonl`. Substitutions apply to the eval split only.
pub fn datagen(cfg: &DatagenConfig, out_dir: &Path) -> Result<DatagenOutput, SynthError> {
    cfg.spec.validate()?;
    let inv = cfg.spec.inventory();
    fs::create_dir_all(out_dir.join("wav"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.spec.seed);

    let mut out = DatagenOutput {
        train: out_dir.join("train.jsonl"),
        dev: out_dir.join("dev.jsonl"),
        eval: out_dir.join("eval.jsonl"),
    };
    for (split, count, with_errors) in [
        ("train", cfg.n_train, false),
        ("dev", cfg.n_dev, false),
        ("eval", cfg.n_eval, true),
    ] {
        let plans: Vec<UttPlan> = (0..count)
            .map(|i| plan_utterance(&cfg.spec, &mut rng, split, i, with_errors))
            .collect();
        // Rendering is pure per plan; parallel map preserves order.
        let rendered: Vec<(String, Waveform)> = par_map(&plans, |plan| {
            (format!("wav/{}.wav", plan.utt_id), render_utterance(&cfg.spec, plan))
        });
        let mut lines = String::new();
        for (plan, (rel_path, wave)) in plans.iter().zip(&rendered) {
            wav::write_wav(&out_dir.join(rel_path), wave)?;
            let record = ManifestRecord {
                utt_id: plan.utt_id.clone(),
                audio: rel_path.clone(),
                canonical: plan.canonical.iter().map(|s| s.render_string(&inv)).collect(),
                annotated: plan.annotated.iter().map(|s| s.render_string(&inv)).collect(),
            };
            lines.push_str(&serde_json::to_string(&record).expect("manifest record"));
            lines.push('\n');
        }
        let path = out_dir.join(format!("{split}.jsonl"));
        fs::write(&path, lines)?;
        match split {
            "train" => out.train = path,
            "dev" => out.dev = path,
            _ => out.eval = path,
        }
    }
    Ok(out)
}

fn plan_utterance(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    split: &str,
    index: usize,
    with_errors: bool,
) -> UttPlan {
    let len = rng.random_range(spec.utt_len_range.0..=spec.utt_len_range.1);
    let canonical: Vec<Syllable> = (0..len)
        .map(|_| {
            let zero_initial = rng.random_range(0.0..1.0) < spec.zero_initial_prob;
            Syllable {
                initial: if zero_initial {
                    None
                } else {
                    Some(rng.random_range(0..spec.n_initials))
                },
                final_idx: rng.random_range(0..spec.n_finals),
                tone: rng.random_range(1..=spec.tones) as u8,
            }
        })
        .collect();
    let annotated: Vec<Syllable> = canonical
        .iter()
        .map(|syl| {
            let mut out = *syl;
            if with_errors {
                if let Some(ini) = out.initial {
                    if spec.n_initials > 1 && rng.random_range(0.0..1.0) < spec.p_err {
                        let mut alt = rng.random_range(0..spec.n_initials - 1);
                        if alt >= ini {
                            alt += 1;
                        }
                        out.initial = Some(alt);
                    }
                }
                if rng.random_range(0.0..1.0) < spec.p_err {
                    let tone_sub = spec.tones > 1
                        && (spec.n_finals == 1 || rng.random_range(0.0..1.0) < 0.5);
                    if tone_sub {
                        let mut alt = rng.random_range(1..spec.tones) as u8;
                        if alt >= out.tone {
                            alt += 1;
                        }
                        out.tone = alt;
                    } else if spec.n_finals > 1 {
                        let mut alt = rng.random_range(0..spec.n_finals - 1);
                        if alt >= out.final_idx {
                            alt += 1;
                        }
                        out.final_idx = alt;
                    }
                }
            }
            out
        })
        .collect();
    UttPlan {
        utt_id: format!("{split}_{index:04}"),
        canonical,
        annotated,
        speaker_scale: rng.random_range(spec.speaker_scale_range.0..spec.speaker_scale_range.1),
        final_durations: (0..len).map(|_| rng.random_range(0.18..0.26)).collect(),
        gaps: (0..len + 1).map(|_| rng.random_range(0.025..0.045)).collect(),
        noise_seed: rng.random::<u64>(),
    }
}

/// Band centers identifying each initial, Hz.
fn initial_band(idx: usize) -> f64 {
    800.0 + 900.0 * idx as f64
}

/// Two formant-like resonances identifying each final, Hz.
fn final_formants(idx: usize) -> (f64, f64) {
    const TABLE: [(f64, f64); 10] = [
        (800.0, 1250.0),
        (300.0, 2300.0),
        (350.0, 700.0),
        (500.0, 1100.0),
        (450.0, 850.0),
        (700.0, 1900.0),
        (650.0, 1500.0),
        (400.0, 1000.0),
        (550.0, 2100.0),
        (750.0, 1350.0),
    ];
    TABLE[idx % TABLE.len()]
}

fn render_utterance(spec: &SynthSpec, plan: &UttPlan) -> Waveform {
    let fs = SAMPLE_RATE as f64;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(plan.noise_seed);
    let mut samples: Vec<f64> = Vec::new();
    let silence = |samples: &mut Vec<f64>, secs: f64| {
        samples.extend(std::iter::repeat_n(0.0, (secs * fs) as usize));
    };
    silence(&mut samples, plan.gaps[0]);
    for (k, syl) in plan.annotated.iter().enumerate() {
        if let Some(ini) = syl.initial {
            render_initial(&mut samples, ini, &mut noise_rng);
        }
        let contour = spec.contours[(syl.tone - 1) as usize];
        let dur = plan.final_durations[k] * contour.duration_factor();
        render_final(&mut samples, syl.final_idx, contour, plan.speaker_scale, dur);
        silence(&mut samples, plan.gaps[k + 1]);
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-9);
    let gain = 0.75 / peak;
    for s in &mut samples {
        *s *= gain;
    }
    Waveform::new(samples, SAMPLE_RATE).expect("rendered waveform")
}

/// Short filtered-noise burst: white noise through a two-pole resonator at
/// the initial's band center, with a fast attack/decay envelope.
fn render_initial(samples: &mut Vec<f64>, idx: usize, rng: &mut ChaCha8Rng) {
    let fs = SAMPLE_RATE as f64;
    let dur = 0.06 + 0.008 * (idx % 4) as f64;
    let n = (dur * fs) as usize;
    let center = initial_band(idx);
    let r = 0.97;
    let (mut y1, mut y2) = (0.0, 0.0);
    let cos_w = (2.0 * std::f64::consts::PI * center / fs).cos();
    for i in 0..n {
        let x: f64 = rng.random_range(-1.0..1.0);
        let y = x + 2.0 * r * cos_w * y1 - r * r * y2;
        y2 = y1;
        y1 = y;
        let tau = i as f64 / n as f64;
        let env = (std::f64::consts::PI * tau).sin().sqrt();
        samples.push(y * 0.02 * env);
    }
}

/// Harmonic-rich periodic signal whose F0 follows the tone contour; the
/// final's identity is carried by a fixed two-resonance spectral envelope.
fn render_final(
    samples: &mut Vec<f64>,
    final_idx: usize,
    contour: ToneContour,
    speaker_scale: f64,
    dur_secs: f64,
) {
    let fs = SAMPLE_RATE as f64;
    let n = (dur_secs * fs) as usize;
    let (f1, f2) = final_formants(final_idx);
    let bw = 170.0;
    let mut phase = 0.0f64;
    for i in 0..n {
        let tau = i as f64 / n as f64;
        let f0 = contour.f0_at(tau) * speaker_scale;
        phase += 2.0 * std::f64::consts::PI * f0 / fs;
        let mut acc = 0.0;
        let mut h = 1.0;
        while h * f0 < 4000.0 {
            let fh = h * f0;
            let res = (-((fh - f1) / bw).powi(2)).exp() + (-((fh - f2) / bw).powi(2)).exp();
            let amp = (0.25 + res) / h;
            acc += amp * (h * phase).sin();
            h += 1.0;
        }
        let edge = 0.015;
        let t = i as f64 / fs;
        let t_end = (n - 1 - i) as f64 / fs;
        let env = (t / edge).min(1.0) * (t_end / edge).min(1.0);
        samples.push(acc * 0.22 * env);
    }
}

/// Writes a manifest as JSON-lines.
pub fn save_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), SynthError> {
    let mut lines = String::new();
    for r in records {
        lines.push_str(&serde_json::to_string(r).expect("manifest record"));
        lines.push('\n');
    }
    fs::write(path, lines)?;
    Ok(())
}

/// Loads a JSON-lines manifest, checking that every referenced audio file
/// exists relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>, SynthError> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| SynthError::BadManifestLine(i + 1, e.to_string()))?;
        if !base.join(&record.audio).exists() {
            return Err(SynthError::MissingAudio {
                path: path.display().to_string(),
                audio: record.audio,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Resolves a record's audio path against its manifest location.
pub fn audio_path(manifest: &Path, record: &ManifestRecord) -> PathBuf {
    manifest.parent().unwrap_or_else(|| Path::new(".")).join(&record.audio)
}
