use std::path::Path;

use hound::{SampleFormat as HoundFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

fn map_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::FormatError(msg) => Error::WavMalformed(format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => {
            Error::WavUnsupported(format!("{}: codec not supported", path.display()))
        }
        hound::Error::InvalidSampleFormat => Error::WavUnsupported(format!(
            "{}: sample format is not PCM-16 or float-32",
            path.display()
        )),
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::WavTruncated(path.to_path_buf())
        }
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavMalformed(format!("{}: {other}", path.display())),
    }
}

/// Reads a mono or stereo WAV file, one [`Waveform`] per channel.
///
/// PCM-16 samples are scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<Waveform>> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| map_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::WavUnsupported(format!(
            "{}: {channels} channels (only mono and stereo are supported)",
            path.display()
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (HoundFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (HoundFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(Error::WavUnsupported(format!(
                "{}: {bits}-bit {fmt:?} samples",
                path.display()
            )))
        }
    }
    .map_err(|e| match e {
        // Header parsed fine, so a failed read here means the data chunk is short.
        hound::Error::IoError(_) => Error::WavTruncated(path.to_path_buf()),
        other => map_err(path, other),
    })?;
    if interleaved.len() % channels != 0 {
        return Err(Error::WavTruncated(path.to_path_buf()));
    }
    (0..channels)
        .map(|c| {
            let samples: Vec<f64> = interleaved.iter().skip(c).step_by(channels).copied().collect();
            Waveform::new(samples, spec.sample_rate)
        })
        .collect()
}

/// Writes one or two equal-length channels.
pub fn write_wav(path: impl AsRef<Path>, channels: &[&Waveform], format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    let first = channels
        .first()
        .ok_or_else(|| Error::InvalidArgument("write_wav needs at least one channel".into()))?;
    if channels.len() > 2 {
        return Err(Error::InvalidArgument("write_wav supports at most two channels".into()));
    }
    if channels
        .iter()
        .any(|c| c.len() != first.len() || c.sample_rate() != first.sample_rate())
    {
        return Err(Error::InvalidArgument(
            "channels must share length and sample rate".into(),
        ));
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate: first.sample_rate(),
        bits_per_sample: match format {
            SampleFormat::Pcm16 => 16,
            SampleFormat::Float32 => 32,
        },
        sample_format: match format {
            SampleFormat::Pcm16 => HoundFormat::Int,
            SampleFormat::Float32 => HoundFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_err(path, e))?;
    for i in 0..first.len() {
        for c in channels {
            let v = c.samples()[i];
            match format {
                SampleFormat::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)
                }
                SampleFormat::Float32 => writer.write_sample(v as f32),
            }
            .map_err(|e| map_err(path, e))?;
        }
    }
    writer.finalize().map_err(|e| map_err(path, e))
}
