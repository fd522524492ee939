//! RIFF/WAVE reader and writer, 16-bit signed PCM only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AudioBuffer, AudioError};
use crate::scalar::Scalar;

const PCM_SCALE: f64 = 32768.0;

/// Read a 16-bit PCM WAV file; multichannel input is mixed to mono by
/// averaging and integer samples are scaled by `1/32768`.
pub fn read_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<AudioBuffer<T>, AudioError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut riff = [0u8; 12];
    r.read_exact(&mut riff).map_err(|_| AudioError::Malformed("truncated RIFF header".into()))?;
    if &riff[0..4] != b"RIFF" || &riff[8..12] != b"WAVE" {
        return Err(AudioError::Malformed("missing RIFF/WAVE tags".into()));
    }

    let mut channels = 0u16;
    let mut sample_rate = 0u32;
    let mut data: Option<Vec<u8>> = None;
    loop {
        let mut head = [0u8; 8];
        match r.read_exact(&mut head) {
            Ok(()) => {}
            Err(_) => break,
        }
        let id = &head[0..4];
        let size = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let mut body = vec![0u8; size];
        r.read_exact(&mut body).map_err(|_| AudioError::Malformed("truncated chunk body".into()))?;
        if size % 2 == 1 {
            let mut pad = [0u8; 1];
            let _ = r.read_exact(&mut pad);
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Malformed("fmt chunk too short".into()));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 {
                    return Err(AudioError::Unsupported(format!("non-PCM encoding {}", format)));
                }
                if bits != 16 {
                    return Err(AudioError::Unsupported(format!("{}-bit samples (16-bit only)", bits)));
                }
                if channels == 0 {
                    return Err(AudioError::Malformed("zero channels".into()));
                }
            }
            b"data" => data = Some(body),
            _ => {}
        }
    }
    let data = data.ok_or_else(|| AudioError::Malformed("missing data chunk".into()))?;
    if sample_rate == 0 {
        return Err(AudioError::Malformed("missing fmt chunk".into()));
    }
    let ch = channels as usize;
    let frames = data.len() / (2 * ch);
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0f64;
        for c in 0..ch {
            let off = (f * ch + c) * 2;
            let v = i16::from_le_bytes(data[off..off + 2].try_into().unwrap());
            acc += v as f64;
        }
        samples.push(T::of(acc / ch as f64 / PCM_SCALE));
    }
    Ok(AudioBuffer::new(samples, sample_rate))
}

/// Write mono 16-bit PCM. Samples are quantized as
/// `clamp(round(x * 32768), -32768, 32767)`.
pub fn write_wav<T: Scalar>(buf: &AudioBuffer<T>, path: impl AsRef<Path>) -> Result<(), AudioError> {
    if buf.sample_rate == 0 {
        return Err(AudioError::Invalid("sample rate must be positive".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (buf.samples.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&buf.sample_rate.to_le_bytes())?;
    w.write_all(&(buf.sample_rate * 2).to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &s in &buf.samples {
        w.write_all(&quantize(s).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn quantize<T: Scalar>(s: T) -> i16 {
    let v = (s.to_f64c() * PCM_SCALE).round();
    v.clamp(-32768.0, 32767.0) as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_pins_spec_values() {
        assert_eq!(quantize(0.5f64), 16384);
        assert_eq!(quantize(0.0f64), 0);
        assert_eq!(quantize(-1.0f64), -32768);
    }
}
