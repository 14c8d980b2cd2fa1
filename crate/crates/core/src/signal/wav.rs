//! RIFF WAV reading and writing, restricted to the one layout the pipeline
//! uses: PCM16, mono, 16 kHz. Everything else is rejected with a clear error.

use std::fs;
use std::path::Path;

use super::{SignalError, Waveform};

/// Required sample rate for all pipeline audio.
pub const SAMPLE_RATE: u32 = 16_000;

fn wav_err(msg: impl Into<String>) -> SignalError {
    SignalError::Wav(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, SignalError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| wav_err(format!("truncated file at byte {at}")))
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16, SignalError> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| wav_err(format!("truncated file at byte {at}")))
}

/// Reads a PCM16 mono 16 kHz RIFF WAV file. Samples are scaled to
/// `[-1, 1)` by `1/32768`.
pub fn read_wav(path: &Path) -> Result<Waveform, SignalError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_err(format!("{}: not a RIFF/WAVE file", path.display())));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4)? as usize;
        let body = bytes
            .get(pos + 8..pos + 8 + size)
            .ok_or_else(|| wav_err(format!("chunk {:?} overruns file", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(wav_err("fmt chunk too small"));
                }
                fmt = Some((
                    read_u16(body, 0)?,
                    read_u16(body, 2)?,
                    read_u32(body, 4)?,
                    read_u16(body, 14)?,
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos += 8 + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| wav_err("missing fmt chunk"))?;
    if format != 1 {
        return Err(wav_err(format!("unsupported format tag {format} (want PCM)")));
    }
    if bits != 16 {
        return Err(wav_err(format!("unsupported bit depth {bits} (want 16)")));
    }
    if channels != 1 {
        return Err(wav_err(format!("unsupported channel count {channels} (want mono)")));
    }
    if rate != SAMPLE_RATE {
        return Err(wav_err(format!("unsupported sample rate {rate} (want {SAMPLE_RATE})")));
    }
    let data = data.ok_or_else(|| wav_err("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(wav_err("data chunk length is odd"));
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, rate)
}

/// Writes a PCM16 mono WAV file. Samples are quantized by
/// `round(s * 32768)` clamped to the i16 range; together with the reader's
/// `q / 32768` scaling a write-read-write cycle is byte-identical.
pub fn write_wav(path: &Path, wav: &Waveform) -> Result<(), SignalError> {
    let n = wav.samples().len();
    let data_len = (n * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + n * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&wav.sample_rate().to_le_bytes());
    bytes.extend_from_slice(&(wav.sample_rate() * 2).to_le_bytes()); // byte rate
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &s in wav.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("tonemdd-wav-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let samples: Vec<f64> = (0..320)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin())
            .collect();
        let wav = Waveform::new(samples, SAMPLE_RATE).unwrap();
        let p1 = temp_path("rt1.wav");
        let p2 = temp_path("rt2.wav");
        write_wav(&p1, &wav).unwrap();
        let back = read_wav(&p1).unwrap();
        write_wav(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_wrong_layouts() {
        let p = temp_path("stereo.wav");
        // Hand-build a stereo header.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 4).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&64000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&p, &bytes).unwrap();
        let err = read_wav(&p).unwrap_err();
        assert!(err.to_string().contains("mono"), "got: {err}");

        let p = temp_path("garbage.wav");
        std::fs::write(&p, b"not a wav").unwrap();
        assert!(read_wav(&p).is_err());
    }

    #[test]
    fn rejects_wrong_sample_rate() {
        let p = temp_path("rate8k.wav");
        let wav = Waveform::new(vec![0.1; 100], 8000).unwrap();
        write_wav(&p, &wav).unwrap();
        let err = read_wav(&p).unwrap_err();
        assert!(err.to_string().contains("sample rate"), "got: {err}");
    }
}
