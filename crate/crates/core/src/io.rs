//! UFM1 frame-map files and line-oriented result records.
//!
//! UFM1 layout, all little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `b"UFM1"`               |
//! | 4      | 2    | version (`1`)                 |
//! | 6      | 4    | width                         |
//! | 10     | 4    | height                        |
//! | 14     | 2    | channels                      |
//! | 16     | 1    | dtype (`0` = f32)             |
//! | 17     | …    | row-major, channel-interleaved payload |
//!
//! Merged files carry 12 (`F^c`, `f_z^g`), 13 (+ mask), 15 (+ weights) or 16
//! (+ weights + mask) channels in that order. `F^c` is stored as the columns
//! `n, t, b`. Split files carry a single quantity: 9 (frames), 3 (layout or
//! weights) or 1 (mask).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::{ConditionFlag, FrameMap, SolveError, SolveResult};
use crate::{Mat3, Vec3};

pub const MAGIC: [u8; 4] = *b"UFM1";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 17;

/// Unit vectors off by more than this are rejected on load.
pub const UNIT_REJECT_TOL: f64 = 1e-3;
/// Unit vectors off by more than this (but within the reject tolerance) are
/// renormalized on load. Below it the stored values are kept bit-for-bit.
pub const UNIT_RENORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic {0:?}, expected \"UFM1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported channel count {0}")]
    BadChannelCount(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("non-unit vector at pixel {pixel} (norm {norm})")]
    NonUnitVectors { pixel: usize, norm: f64 },
    #[error("mask value {value} at pixel {pixel} is neither 0 nor 1")]
    BadMask { pixel: usize, value: f32 },
    #[error("split files disagree in size")]
    SizeMismatch,
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Header plus raw channel data.
#[derive(Debug, Clone, PartialEq)]
pub struct RawChannels {
    pub width: u32,
    pub height: u32,
    pub channels: u16,
    pub data: Vec<f32>,
}

impl RawChannels {
    pub fn pixel(&self, i: usize) -> &[f32] {
        let c = self.channels as usize;
        &self.data[i * c..(i + 1) * c]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.push(DTYPE_F32);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(IoError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(IoError::TruncatedPayload { expected: HEADER_LEN, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(IoError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(IoError::UnsupportedVersion(version));
        }
        let width = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
        let channels = u16::from_le_bytes(bytes[14..16].try_into().unwrap());
        let dtype = bytes[16];
        if dtype != DTYPE_F32 {
            return Err(IoError::UnsupportedDtype(dtype));
        }
        if !matches!(channels, 1 | 3 | 9 | 12 | 13 | 15 | 16) {
            return Err(IoError::BadChannelCount(channels));
        }
        let expected = width as usize * height as usize * channels as usize * 4;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < expected {
            return Err(IoError::TruncatedPayload { expected, found: payload.len() });
        }
        if payload.len() > expected {
            return Err(IoError::TrailingBytes(payload.len() - expected));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(RawChannels { width, height, channels, data })
    }
}

/// Which quantities a merged file carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub weights: bool,
    pub mask: bool,
}

impl Layout {
    pub const FULL: Layout = Layout { weights: true, mask: true };

    pub fn channels(&self) -> u16 {
        12 + if self.weights { 3 } else { 0 } + if self.mask { 1 } else { 0 }
    }

    fn from_channels(c: u16) -> Option<Self> {
        match c {
            12 => Some(Layout { weights: false, mask: false }),
            13 => Some(Layout { weights: false, mask: true }),
            15 => Some(Layout { weights: true, mask: false }),
            16 => Some(Layout { weights: true, mask: true }),
            _ => None,
        }
    }
}

fn unit_checked(v: Vec3, pixel: usize) -> Result<Vec3, IoError> {
    let norm = v.norm();
    let dev = (norm - 1.0).abs();
    if !(dev <= UNIT_REJECT_TOL) {
        return Err(IoError::NonUnitVectors { pixel, norm });
    }
    if dev > UNIT_RENORM_TOL {
        return Ok(v / norm);
    }
    Ok(v)
}

fn frame_from(px: &[f32], pixel: usize) -> Result<Mat3, IoError> {
    let col = |k: usize| Vec3::new(px[3 * k] as f64, px[3 * k + 1] as f64, px[3 * k + 2] as f64);
    Ok(Mat3::from_columns(&[
        unit_checked(col(0), pixel)?,
        unit_checked(col(1), pixel)?,
        unit_checked(col(2), pixel)?,
    ]))
}

fn vec_from(px: &[f32]) -> Vec3 {
    Vec3::new(px[0] as f64, px[1] as f64, px[2] as f64)
}

fn mask_from(v: f32, pixel: usize) -> Result<bool, IoError> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(IoError::BadMask { pixel, value: v })
    }
}

/// Decodes a merged UFM1 file.
pub fn decode_frame_map(bytes: &[u8]) -> Result<FrameMap, IoError> {
    let raw = RawChannels::from_bytes(bytes)?;
    let layout = Layout::from_channels(raw.channels).ok_or(IoError::BadChannelCount(raw.channels))?;
    let n = raw.width as usize * raw.height as usize;
    let mut frames = Vec::with_capacity(n);
    let mut lay = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..n {
        let px = raw.pixel(i);
        frames.push(frame_from(&px[0..9], i)?);
        lay.push(unit_checked(vec_from(&px[9..12]), i)?);
        let mut at = 12;
        if layout.weights {
            weights.push(vec_from(&px[12..15]));
            at = 15;
        } else {
            weights.push(Vec3::repeat(1.0));
        }
        mask.push(if layout.mask { mask_from(px[at], i)? } else { true });
    }
    Ok(FrameMap::new(raw.width as usize, raw.height as usize, frames, lay, weights, mask)?)
}

/// Encodes with the canonical 16-channel layout.
pub fn write_frame_map(map: &FrameMap) -> Vec<u8> {
    encode_frame_map(map, Layout::FULL)
}

pub fn encode_frame_map(map: &FrameMap, layout: Layout) -> Vec<u8> {
    let channels = layout.channels();
    let mut data = Vec::with_capacity(map.len() * channels as usize);
    for i in 0..map.len() {
        data.extend(map.frames()[i].iter().map(|v| *v as f32));
        data.extend(map.layout()[i].iter().map(|v| *v as f32));
        if layout.weights {
            data.extend(map.weights()[i].iter().map(|v| *v as f32));
        }
        if layout.mask {
            data.push(if map.mask()[i] { 1.0 } else { 0.0 });
        }
    }
    RawChannels { width: map.width() as u32, height: map.height() as u32, channels, data }.to_bytes()
}

pub fn read_frame_map(path: &Path) -> Result<FrameMap, IoError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_frame_map(&bytes)
}

pub fn read_frame_map_from<R: Read>(mut reader: R) -> Result<FrameMap, IoError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode_frame_map(&bytes)
}

pub fn save_frame_map(path: &Path, map: &FrameMap) -> Result<(), IoError> {
    std::fs::write(path, write_frame_map(map))?;
    Ok(())
}

/// Split per-quantity files, one [`RawChannels`] each.
pub fn split_frame_map(map: &FrameMap) -> [RawChannels; 4] {
    let (w, h) = (map.width() as u32, map.height() as u32);
    let frames = map.frames().iter().flat_map(|f| f.iter().map(|v| *v as f32).collect::<Vec<_>>()).collect();
    let layout = map.layout().iter().flat_map(|v| v.iter().map(|x| *x as f32).collect::<Vec<_>>()).collect();
    let weights = map.weights().iter().flat_map(|v| v.iter().map(|x| *x as f32).collect::<Vec<_>>()).collect();
    let mask = map.mask().iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    [
        RawChannels { width: w, height: h, channels: 9, data: frames },
        RawChannels { width: w, height: h, channels: 3, data: layout },
        RawChannels { width: w, height: h, channels: 3, data: weights },
        RawChannels { width: w, height: h, channels: 1, data: mask },
    ]
}

/// Assembles a map from split files. Missing weights default to 1, a missing
/// mask marks every pixel valid.
pub fn join_frame_map(
    frames: &RawChannels,
    layout: &RawChannels,
    weights: Option<&RawChannels>,
    mask: Option<&RawChannels>,
) -> Result<FrameMap, IoError> {
    let same = |r: &RawChannels| r.width == frames.width && r.height == frames.height;
    if !same(layout) || !weights.is_none_or(same) || !mask.is_none_or(same) {
        return Err(IoError::SizeMismatch);
    }
    for (r, c) in [(Some(frames), 9), (Some(layout), 3), (weights, 3), (mask, 1)] {
        if let Some(r) = r {
            if r.channels != c {
                return Err(IoError::BadChannelCount(r.channels));
            }
        }
    }
    let n = frames.width as usize * frames.height as usize;
    let mut f = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    for i in 0..n {
        f.push(frame_from(frames.pixel(i), i)?);
        l.push(unit_checked(vec_from(layout.pixel(i)), i)?);
        w.push(weights.map_or(Vec3::repeat(1.0), |r| vec_from(r.pixel(i))));
        m.push(match mask {
            Some(r) => mask_from(r.pixel(i)[0], i)?,
            None => true,
        });
    }
    Ok(FrameMap::new(frames.width as usize, frames.height as usize, f, l, w, m)?)
}

/// One solved image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub id: String,
    pub u: [f64; 3],
    pub pitch: f64,
    pub roll: f64,
    pub lambda: f64,
    pub residual: f64,
    pub kkt_residual: f64,
    pub condition_flag: ConditionFlag,
    pub timing_ms: f64,
}

impl ResultRecord {
    pub fn from_result(id: impl Into<String>, r: &SolveResult, timing_ms: f64) -> Self {
        let a = crate::geometry::up_to_angles_lossy(&r.u);
        ResultRecord {
            id: id.into(),
            u: [r.u.x, r.u.y, r.u.z],
            pitch: a.pitch,
            roll: a.roll,
            lambda: r.lambda,
            residual: r.residual,
            kkt_residual: r.kkt_residual,
            condition_flag: r.condition_flag,
            timing_ms,
        }
    }

    pub fn up(&self) -> Vec3 {
        Vec3::from(self.u)
    }
}

/// Ground truth for one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub id: String,
    pub u: [f64; 3],
    pub pitch: f64,
    pub roll: f64,
    pub yaw: f64,
}

impl GroundTruthRecord {
    pub fn up(&self) -> Vec3 {
        Vec3::from(self.u)
    }
}

/// One JSON object per line. Floats are written in shortest round-trip form.
pub fn write_record<W: Write, T: Serialize>(mut w: W, record: &T) -> Result<(), IoError> {
    let line = serde_json::to_string(record).map_err(|e| IoError::ParseError { line: 0, message: e.to_string() })?;
    writeln!(w, "{line}")?;
    Ok(())
}

pub fn write_result<W: Write>(w: W, record: &ResultRecord) -> Result<(), IoError> {
    write_record(w, record)
}

/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_records<R: BufRead, T: DeserializeOwned>(reader: R) -> Result<Vec<T>, IoError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| IoError::ParseError { line: idx + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_results<R: BufRead>(reader: R) -> Result<Vec<ResultRecord>, IoError> {
    read_records(reader)
}

pub fn read_records_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    read_records(BufReader::new(File::open(path)?))
}

/// Appends records to `path`, creating it if needed.
pub fn append_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IoError> {
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    for r in records {
        write_record(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}
