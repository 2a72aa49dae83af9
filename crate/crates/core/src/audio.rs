//! Waveform containers and linear-PCM wave file I/O.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Multi-channel audio as read from disk, one `Vec` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub channels: Vec<Vec<f32>>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            channels: vec![samples],
            sample_rate,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn duration(&self) -> f64 {
        self.num_frames() as f64 / f64::from(self.sample_rate)
    }

    /// Channel mean.
    pub fn downmix(&self) -> Vec<f32> {
        let n = self.num_frames();
        let c = self.channels.len();
        if c == 1 {
            return self.channels[0].clone();
        }
        let mut out = vec![0.0f32; n];
        for ch in &self.channels {
            for (o, s) in out.iter_mut().zip(ch) {
                *o += *s;
            }
        }
        let inv = 1.0 / c as f32;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

/// A mono clip with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
    /// Seconds into the source recording.
    pub offset: f64,
}

impl Clip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            source_id: String::new(),
            offset: 0.0,
        }
    }

    pub fn with_source(mut self, source_id: impl Into<String>, offset: f64) -> Self {
        self.source_id = source_id.into();
        self.offset = offset;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.is_finite())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| f64::from(s)).collect()
    }
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let audio_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut reader = WavReader::open(path).map_err(audio_err)?;
    let spec = reader.spec();
    let nch = usize::from(spec.channels);
    if nch == 0 || nch > 2 {
        return Err(Error::Audio {
            path: path.to_path_buf(),
            message: format!("unsupported channel count {nch}"),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(audio_err)?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(audio_err)?
        }
        (fmt, bits) => {
            return Err(Error::Audio {
                path: path.to_path_buf(),
                message: format!("unsupported sample format {fmt:?}/{bits} bit"),
            })
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / nch); nch];
    for frame in interleaved.chunks_exact(nch) {
        for (c, s) in frame.iter().enumerate() {
            channels[c].push(*s);
        }
    }
    Ok(AudioBuffer {
        channels,
        sample_rate: spec.sample_rate,
    })
}

/// Reads a file and downmixes to a mono clip.
pub fn read_clip(path: &Path) -> Result<Clip> {
    let buf = read_wav(path)?;
    Ok(Clip::new(buf.downmix(), buf.sample_rate))
}

/// Writes 32-bit float PCM, which round-trips `f32` samples exactly.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spec = WavSpec {
        channels: audio.channels.len() as u16,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let map = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut w = WavWriter::create(path, spec).map_err(map)?;
    for i in 0..audio.num_frames() {
        for ch in &audio.channels {
            w.write_sample(ch[i]).map_err(map)?;
        }
    }
    w.finalize().map_err(map)
}

pub fn write_clip(path: &Path, clip: &Clip) -> Result<()> {
    write_wav(path, &AudioBuffer::mono(clip.samples.clone(), clip.sample_rate))
}

/// 16-bit PCM output, used where an external tool insists on integer PCM.
pub fn write_wav_i16(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let spec = WavSpec {
        channels: audio.channels.len() as u16,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let map = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut w = WavWriter::create(path, spec).map_err(map)?;
    for i in 0..audio.num_frames() {
        for ch in &audio.channels {
            let v = (ch[i].clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).map_err(map)?;
        }
    }
    w.finalize().map_err(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_wav_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let buf = AudioBuffer {
            channels: vec![vec![0.1, -0.25, 0.999], vec![0.0, 0.5, -1.0]],
            sample_rate: 24_000,
        };
        write_wav(&p, &buf).unwrap();
        assert_eq!(read_wav(&p).unwrap(), buf);
    }

    #[test]
    fn int16_wav_reads_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        write_wav_i16(&p, &AudioBuffer::mono(vec![0.5, -0.5], 8000)).unwrap();
        let back = read_wav(&p).unwrap();
        assert!((back.channels[0][0] - 0.5).abs() < 1e-4);
        assert!((back.channels[0][1] + 0.5).abs() < 1e-4);
    }

    #[test]
    fn downmix_is_channel_mean() {
        let buf = AudioBuffer {
            channels: vec![vec![1.0, 0.0], vec![0.0, -1.0]],
            sample_rate: 8000,
        };
        assert_eq!(buf.downmix(), vec![0.5, -0.5]);
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.wav"));
    }
}
