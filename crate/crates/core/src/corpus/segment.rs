use crate::audio::{AudioBuffer, Clip};
use crate::error::{Error, Result};

/// Samples per clip at `sample_rate`, rounded to the nearest sample.
pub fn clip_len(clip_seconds: f64, sample_rate: u32) -> usize {
    (clip_seconds * f64::from(sample_rate)).round() as usize
}

/// Cuts a recording into consecutive, non-overlapping mono clips of
/// `clip_seconds`. The source is downmixed by channel mean first and the
/// trailing remainder is dropped. A source shorter than one clip yields an
/// empty list.
pub fn segment(source: &AudioBuffer, source_id: &str, clip_seconds: f64) -> Result<Vec<Clip>> {
    if !(clip_seconds > 0.0) || !clip_seconds.is_finite() {
        return Err(Error::Precondition(format!(
            "clip_seconds must be positive, got {clip_seconds}"
        )));
    }
    let len = clip_len(clip_seconds, source.sample_rate);
    if len == 0 {
        return Err(Error::Precondition(format!(
            "clip of {clip_seconds} s is shorter than one sample at {} Hz",
            source.sample_rate
        )));
    }
    let mono = source.downmix();
    let rate = f64::from(source.sample_rate);
    Ok(mono
        .chunks_exact(len)
        .enumerate()
        .map(|(i, chunk)| {
            Clip::new(chunk.to_vec(), source.sample_rate)
                .with_source(source_id, (i * len) as f64 / rate)
        })
        .collect())
}
