use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::WavFormat {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Read a 16-bit PCM WAV file. Other encodings are rejected.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::WavFormat {
            path: path.to_path_buf(),
            reason: format!(
                "expected 16-bit PCM, found {:?} with {} bits",
                spec.sample_format, spec.bits_per_sample
            ),
        });
    }
    let nch = spec.channels as usize;
    if nch == 0 {
        return Err(Error::WavFormat {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }
    let mut channels = vec![Vec::with_capacity(reader.len() as usize / nch); nch];
    for (i, s) in reader.into_samples::<i16>().enumerate() {
        let s = s.map_err(|e| wav_err(path, e))?;
        channels[i % nch].push(s as f64 / 32768.0);
    }
    Waveform::new(channels, spec.sample_rate)
}

/// Write 16-bit PCM; samples are clipped to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: wave.num_channels() as u16,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for n in 0..wave.len() {
        for c in 0..wave.num_channels() {
            let v = (wave.channel(c)[n] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(|e| wav_err(path, e))?;
        }
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}
