//! Pixel-space video container and on-disk formats.
//!
//! Pixels are f64 in [-1, 1], stored frame-major `[L][C][H][W]`. Two
//! interchange formats are supported:
//!
//! * `TALCVID1`: magic `TALCVID1`, then u32 little-endian L, C, H, W, then
//!   f32 little-endian pixel data in frame-major order.
//! * A portable directory of binary PPM files (`frame_0000.ppm`, ...) with an
//!   `index.txt` listing dimensions and frame filenames.
//!
//! A horizontal frame-grid PPM "contact sheet" is also provided for
//! eyeballing generated clips.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TalcError};

pub const TVID_MAGIC: &[u8; 8] = b"TALCVID1";

#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl VideoTensor {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        VideoTensor {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
        }
    }

    pub fn from_data(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != frames * channels * height * width {
            return Err(TalcError::Shape(format!(
                "video data length {} != {}x{}x{}x{}",
                data.len(),
                frames,
                channels,
                height,
                width
            )));
        }
        Ok(VideoTensor {
            frames,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn frame_stride(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    pub fn index(&self, frame: usize, channel: usize, y: usize, x: usize) -> usize {
        ((frame * self.channels + channel) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, frame: usize, channel: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(frame, channel, y, x)]
    }

    #[inline]
    pub fn set(&mut self, frame: usize, channel: usize, y: usize, x: usize, v: f64) {
        let i = self.index(frame, channel, y, x);
        self.data[i] = v;
    }

    /// Copy of frames `[start, end)`.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<VideoTensor> {
        if start >= end || end > self.frames {
            return Err(TalcError::Index(format!(
                "frame slice [{start}, {end}) out of range for {} frames",
                self.frames
            )));
        }
        let fs = self.frame_stride();
        VideoTensor::from_data(
            end - start,
            self.channels,
            self.height,
            self.width,
            self.data[start * fs..end * fs].to_vec(),
        )
    }

    /// Single frame as a 1-frame video.
    pub fn frame(&self, i: usize) -> Result<VideoTensor> {
        self.slice_frames(i, i + 1)
    }

    /// Concatenate along time. All parts must share C, H, W.
    pub fn concat_time(parts: &[VideoTensor]) -> Result<VideoTensor> {
        let first = parts
            .first()
            .ok_or_else(|| TalcError::Usage("concat_time: no inputs".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut frames = 0;
        let mut data = Vec::new();
        for p in parts {
            if (p.channels, p.height, p.width) != (c, h, w) {
                return Err(TalcError::Shape(
                    "concat_time: mismatched frame dimensions".into(),
                ));
            }
            frames += p.frames;
            data.extend_from_slice(&p.data);
        }
        VideoTensor::from_data(frames, c, h, w, data)
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    /// Mean absolute difference between frames `t-1` and `t`.
    pub fn mean_abs_frame_diff(&self, t: usize) -> f64 {
        let fs = self.frame_stride();
        let a = &self.data[(t - 1) * fs..t * fs];
        let b = &self.data[t * fs..(t + 1) * fs];
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / fs as f64
    }

    // ── TALCVID1 ────────────────────────────────────────────────────────

    pub fn to_tvid_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 16 + self.data.len() * 4);
        out.extend_from_slice(TVID_MAGIC);
        for dim in [self.frames, self.channels, self.height, self.width] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_tvid_bytes(bytes: &[u8]) -> Result<VideoTensor> {
        if bytes.len() < 24 || &bytes[..8] != TVID_MAGIC {
            return Err(TalcError::Format("not a TALCVID1 stream".into()));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let off = 8 + i * 4;
            *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        }
        let [l, c, h, w] = dims;
        let n = l * c * h * w;
        let body = &bytes[24..];
        if body.len() != n * 4 {
            return Err(TalcError::Format(format!(
                "TALCVID1 payload is {} bytes, expected {}",
                body.len(),
                n * 4
            )));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let v = f32::from_le_bytes(body[i * 4..i * 4 + 4].try_into().unwrap());
            data.push(v as f64);
        }
        VideoTensor::from_data(l, c, h, w, data)
    }

    pub fn write_tvid(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_tvid_bytes())?;
        Ok(())
    }

    pub fn read_tvid(path: &Path) -> Result<VideoTensor> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        VideoTensor::from_tvid_bytes(&bytes)
    }

    // ── PPM ─────────────────────────────────────────────────────────────

    /// Frame as interleaved 8-bit RGB rows.
    pub fn frame_rgb8(&self, frame: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = if c < self.channels {
                        self.get(frame, c, y, x)
                    } else {
                        self.get(frame, self.channels - 1, y, x)
                    };
                    out.push(unit_to_u8(v));
                }
            }
        }
        out
    }

    fn frame_ppm(&self, frame: usize) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.frame_rgb8(frame));
        out
    }

    /// Write one PPM per frame plus an `index.txt`.
    pub fn write_ppm_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = format!(
            "frames {}\nchannels {}\nheight {}\nwidth {}\n",
            self.frames, self.channels, self.height, self.width
        );
        for i in 0..self.frames {
            let name = format!("frame_{i:04}.ppm");
            fs::write(dir.join(&name), self.frame_ppm(i))?;
            index.push_str(&name);
            index.push('\n');
        }
        fs::write(dir.join("index.txt"), index)?;
        Ok(())
    }

    /// Read a frame directory written by [`VideoTensor::write_ppm_dir`].
    pub fn read_ppm_dir(dir: &Path) -> Result<VideoTensor> {
        let index = fs::read_to_string(dir.join("index.txt"))?;
        let mut frames = Vec::new();
        let mut dims = (0usize, 0usize);
        for line in index.lines() {
            if let Some(rest) = line.strip_prefix("height ") {
                dims.0 = rest.trim().parse().map_err(|_| bad_index())?;
            } else if let Some(rest) = line.strip_prefix("width ") {
                dims.1 = rest.trim().parse().map_err(|_| bad_index())?;
            } else if line.ends_with(".ppm") {
                frames.push(line.to_string());
            }
        }
        if frames.is_empty() {
            return Err(bad_index());
        }
        let (h, w) = dims;
        let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
        for name in &frames {
            let bytes = fs::read(dir.join(name))?;
            let rgb = parse_ppm(&bytes, w, h)?;
            // PPM is pixel-interleaved; the video tensor is channel-planar.
            for c in 0..3 {
                for p in 0..h * w {
                    data.push(u8_to_unit(rgb[p * 3 + c]));
                }
            }
        }
        VideoTensor::from_data(frames.len(), 3, h, w, data)
    }

    /// Horizontal frame grid for quick visual inspection.
    pub fn write_contact_sheet(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let sheet_w = w * self.frames;
        let mut rgb = vec![0u8; h * sheet_w * 3];
        for f in 0..self.frames {
            let frame = self.frame_rgb8(f);
            for y in 0..h {
                for x in 0..w {
                    let src = (y * w + x) * 3;
                    let dst = (y * sheet_w + f * w + x) * 3;
                    rgb[dst..dst + 3].copy_from_slice(&frame[src..src + 3]);
                }
            }
        }
        let mut out = format!("P6\n{sheet_w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&rgb);
        fs::write(path, out)?;
        Ok(())
    }

    /// Load either a `.tvid` file or a PPM frame directory.
    pub fn load(path: &Path) -> Result<VideoTensor> {
        if path.is_dir() {
            VideoTensor::read_ppm_dir(path)
        } else {
            VideoTensor::read_tvid(path)
        }
    }
}

fn bad_index() -> TalcError {
    TalcError::Format("malformed ppm index.txt".into())
}

pub fn unit_to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round()) as u8
}

pub fn u8_to_unit(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

fn parse_ppm(bytes: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    // Header: "P6\n<w> <h>\n255\n" as written by this crate.
    let header_end = bytes
        .windows(4)
        .position(|win| win == b"255\n")
        .ok_or_else(|| TalcError::Format("ppm: missing maxval".into()))?
        + 4;
    let body = &bytes[header_end..];
    if body.len() != w * h * 3 {
        return Err(TalcError::Format(format!(
            "ppm body is {} bytes, expected {}",
            body.len(),
            w * h * 3
        )));
    }
    Ok(body.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_video() -> VideoTensor {
        let mut rng = Rng::new(3);
        let mut v = VideoTensor::zeros(3, 3, 4, 5);
        for x in &mut v.data {
            // Quantized values survive the f32 round trip exactly.
            *x = (rng.uniform_f64(-1.0, 1.0) * 16.0).round() / 16.0;
        }
        v
    }

    #[test]
    fn tvid_round_trip() {
        let v = sample_video();
        let bytes = v.to_tvid_bytes();
        assert_eq!(&bytes[..8], TVID_MAGIC);
        let back = VideoTensor::from_tvid_bytes(&bytes).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn tvid_rejects_bad_magic() {
        let mut bytes = sample_video().to_tvid_bytes();
        bytes[0] = b'X';
        assert!(VideoTensor::from_tvid_bytes(&bytes).is_err());
    }

    #[test]
    fn ppm_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = sample_video();
        // Snap to the 8-bit grid so the PPM round trip is exact.
        for x in &mut v.data {
            *x = u8_to_unit(unit_to_u8(*x));
        }
        v.write_ppm_dir(dir.path()).unwrap();
        let back = VideoTensor::read_ppm_dir(dir.path()).unwrap();
        assert_eq!(v.frames, back.frames);
        for (a, b) in v.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice() {
        let v = sample_video();
        let a = v.slice_frames(0, 1).unwrap();
        let b = v.slice_frames(1, 3).unwrap();
        let joined = VideoTensor::concat_time(&[a, b]).unwrap();
        assert_eq!(joined, v);
    }

    #[test]
    fn contact_sheet_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_video();
        let path = dir.path().join("sheet.ppm");
        v.write_contact_sheet(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes[..20]).to_string();
        assert!(text.starts_with("P6\n15 4\n255\n"), "{text}");
    }
}
