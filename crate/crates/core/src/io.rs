//! File formats.
//!
//! # Motion files (`.hdmo`)
//!
//! Little-endian, 20-byte header followed by the payload:
//!
//! | offset | field   | type                                   |
//! |--------|---------|----------------------------------------|
//! | 0      | magic   | `b"HDMO"`                              |
//! | 4      | version | u16 (= 1)                              |
//! | 6      | layout  | u16 (0 params, 1 local, 2 global)      |
//! | 8      | N       | u32 frames                             |
//! | 12     | D       | u32 columns (154, 393 or 372)          |
//! | 16     | fps     | f32                                    |
//! | 20     | payload | N × D f32, row-major                   |
//!
//! The params layout stores per frame `[left | right]`, each hand as
//! `β(10) | root quat(4) | translation(3) | 15 local quats(60)`.
//!
//! # Calibration / keypoints / joints
//!
//! Calibration is a JSON array of `{id, K: [9], R: [9], t: [3]}` (row-major,
//! `R`/`t` map world to camera). Keypoints are JSONL, one
//! `{frame, camera_id, points: [[u, v, conf]; 42]}` record per frame and
//! camera, left hand first. Triangulated joints are JSONL records of
//! [`JointsRecord`].

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::CameraCalib;
use crate::geometry::Vec3;
use crate::representation::{
    global_layout, local_layout, GlobalRepMatrix, HandPair, LocalRepMatrix, MotionSequence, DEFAULT_FPS,
};
use crate::skeleton::{HandParams, PARAMS_WIDTH};

pub const MOTION_MAGIC: &[u8; 4] = b"HDMO";
pub const MOTION_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Params,
    Local,
    Global,
}

impl Layout {
    pub fn code(self) -> u16 {
        match self {
            Layout::Params => 0,
            Layout::Local => 1,
            Layout::Global => 2,
        }
    }

    pub fn from_code(c: u16) -> Result<Layout> {
        match c {
            0 => Ok(Layout::Params),
            1 => Ok(Layout::Local),
            2 => Ok(Layout::Global),
            _ => Err(Error::Format(format!("unknown layout code {c}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Layout::Params => 2 * PARAMS_WIDTH,
            Layout::Local => local_layout::WIDTH,
            Layout::Global => global_layout::WIDTH,
        }
    }
}

/// In-memory motion file. The payload is kept as f32 so that a read/write
/// cycle is bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFile {
    pub layout: Layout,
    pub frames: usize,
    pub width: usize,
    pub fps: f32,
    pub payload: Vec<f32>,
}

impl MotionFile {
    pub fn new(layout: Layout, frames: usize, fps: f32, payload: Vec<f32>) -> Result<MotionFile> {
        let f = MotionFile {
            layout,
            frames,
            width: layout.width(),
            fps,
            payload,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width != self.layout.width() {
            return Err(Error::DimensionMismatch {
                what: "motion file width for layout",
                expected: self.layout.width(),
                got: self.width,
            });
        }
        if self.payload.len() != self.frames * self.width {
            return Err(Error::DimensionMismatch {
                what: "motion file payload length",
                expected: self.frames * self.width,
                got: self.payload.len(),
            });
        }
        Ok(())
    }

    pub fn from_matrix(layout: Layout, m: &DMatrix<f64>, fps: f64) -> Result<MotionFile> {
        let payload = (0..m.nrows())
            .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)] as f32)
            .collect();
        MotionFile::new(layout, m.nrows(), fps as f32, payload)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.frames, self.width, self.payload.iter().map(|v| *v as f64))
    }

    pub fn from_sequence(seq: &MotionSequence) -> Result<MotionFile> {
        let mut payload = Vec::with_capacity(seq.len() * 2 * PARAMS_WIDTH);
        for f in &seq.frames {
            for p in [&f.left, &f.right] {
                payload.extend(p.to_flat()?.into_iter().map(|v| v as f32));
            }
        }
        MotionFile::new(Layout::Params, seq.len(), seq.fps as f32, payload)
    }

    pub fn to_sequence(&self) -> Result<MotionSequence> {
        self.expect_layout(Layout::Params)?;
        let frames = self
            .payload
            .chunks_exact(self.width)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|v| *v as f64).collect();
                Ok(HandPair::new(
                    HandParams::from_flat(&row[..PARAMS_WIDTH])?,
                    HandParams::from_flat(&row[PARAMS_WIDTH..])?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        MotionSequence::new(frames, self.fps_or_default())
    }

    pub fn to_local(&self) -> Result<LocalRepMatrix> {
        self.expect_layout(Layout::Local)?;
        LocalRepMatrix::new(self.to_matrix(), self.fps_or_default())
    }

    pub fn to_global(&self) -> Result<GlobalRepMatrix> {
        self.expect_layout(Layout::Global)?;
        GlobalRepMatrix::new(self.to_matrix(), self.fps_or_default())
    }

    fn fps_or_default(&self) -> f64 {
        if self.fps > 0.0 {
            self.fps as f64
        } else {
            DEFAULT_FPS
        }
    }

    fn expect_layout(&self, layout: Layout) -> Result<()> {
        if self.layout != layout {
            return Err(Error::Format(format!(
                "expected a {layout:?} motion file, found {:?}",
                self.layout
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.payload.len());
        out.extend_from_slice(MOTION_MAGIC);
        out.extend_from_slice(&MOTION_VERSION.to_le_bytes());
        out.extend_from_slice(&self.layout.code().to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MotionFile> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array4()?;
        if &magic != MOTION_MAGIC {
            return Err(Error::BadMagic {
                expected: *MOTION_MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != MOTION_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: MOTION_VERSION,
            });
        }
        let layout = Layout::from_code(r.u16()?)?;
        let frames = r.u32()? as usize;
        let width = r.u32()? as usize;
        let fps = r.f32()?;
        if width != layout.width() {
            return Err(Error::DimensionMismatch {
                what: "motion file width for layout",
                expected: layout.width(),
                got: width,
            });
        }
        let expected = HEADER_LEN + 4 * frames * width;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let payload = (0..frames * width).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        MotionFile::new(layout, frames, fps, payload)
    }
}

pub fn read_motion(path: &Path) -> Result<MotionFile> {
    MotionFile::from_bytes(&std::fs::read(path)?)
}

pub fn write_motion(path: &Path, file: &MotionFile) -> Result<()> {
    write_atomic(path, &file.to_bytes()?)
}

/// Write via a temporary file in the target directory and rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Little-endian cursor that reports truncation instead of panicking.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn array4(&mut self) -> Result<[u8; 4]> {
        let mut a = [0u8; 4];
        let s = self.take(4.min(self.bytes.len().saturating_sub(self.pos)))?;
        a[..s.len()].copy_from_slice(s);
        Ok(a)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: String,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl CameraRecord {
    pub fn to_calib(&self) -> Result<CameraCalib> {
        CameraCalib::new(
            self.id.clone(),
            Matrix3::from_row_slice(&self.k),
            Matrix3::from_row_slice(&self.r),
            Vec3::from_row_slice(&self.t),
        )
    }

    pub fn from_calib(c: &CameraCalib) -> CameraRecord {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[3 * r + c] = m[(r, c)];
                }
            }
            out
        };
        CameraRecord {
            id: c.id.clone(),
            k: row_major(&c.intrinsics),
            r: row_major(&c.rotation),
            t: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

pub fn read_calibration(path: &Path) -> Result<Vec<CameraCalib>> {
    let recs: Vec<CameraRecord> = serde_json::from_slice(&std::fs::read(path)?)?;
    recs.iter().map(CameraRecord::to_calib).collect()
}

/// Number of keypoints per record: 21 per hand, left first.
pub const KEYPOINTS_PER_RECORD: usize = 42;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub frame: usize,
    pub camera_id: String,
    pub points: Vec<[f64; 3]>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("line {}: {e}", i + 1))))
        .collect()
}

fn to_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_keypoints(path: &Path) -> Result<Vec<KeypointRecord>> {
    let recs: Vec<KeypointRecord> = read_jsonl(path)?;
    if let Some(r) = recs.iter().find(|r| r.points.len() != KEYPOINTS_PER_RECORD) {
        return Err(Error::DimensionMismatch {
            what: "keypoints per record",
            expected: KEYPOINTS_PER_RECORD,
            got: r.points.len(),
        });
    }
    Ok(recs)
}

pub fn write_keypoints(path: &Path, records: &[KeypointRecord]) -> Result<()> {
    write_atomic(path, &to_jsonl(records)?)
}

/// One frame of triangulated joints. Joints without enough confident views
/// are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointsRecord {
    pub frame: usize,
    pub left: Vec<Option<[f64; 3]>>,
    pub right: Vec<Option<[f64; 3]>>,
    /// RMS reprojection error per joint (pixels), left block first.
    pub residual_px: Vec<Option<f64>>,
}

pub fn read_joints(path: &Path) -> Result<Vec<JointsRecord>> {
    read_jsonl(path)
}

pub fn write_joints(path: &Path, records: &[JointsRecord]) -> Result<()> {
    write_atomic(path, &to_jsonl(records)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(layout: Layout, frames: usize) -> MotionFile {
        let width = layout.width();
        let payload = (0..frames * width).map(|i| (i as f32 * 0.37).sin()).collect();
        MotionFile::new(layout, frames, 30.0, payload).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = sample(Layout::Global, 2).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"HDMO");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 372);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 30.0);
        assert_eq!(bytes.len(), 20 + 2 * 372 * 4);
    }

    #[test]
    fn layout_widths() {
        assert_eq!(Layout::Params.width(), 154);
        assert_eq!(Layout::Local.width(), 393);
        assert_eq!(Layout::Global.width(), 372);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample(Layout::Local, 3).to_bytes().unwrap();
        let err = MotionFile::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
        let err = MotionFile::from_bytes(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn wrong_magic_names_the_bytes() {
        let mut bytes = sample(Layout::Params, 1).to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"RIFF");
        let err = MotionFile::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found, .. } if &found == b"RIFF"));
        assert!(err.to_string().contains("82, 73, 70, 70"));
    }

    #[test]
    fn future_version_is_rejected() {
        let mut bytes = sample(Layout::Params, 1).to_bytes().unwrap();
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(
            MotionFile::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn inconsistent_width_is_rejected() {
        let mut bytes = sample(Layout::Params, 1).to_bytes().unwrap();
        bytes[12..16].copy_from_slice(&393u32.to_le_bytes());
        assert!(matches!(MotionFile::from_bytes(&bytes), Err(Error::DimensionMismatch { .. })));
        assert!(MotionFile::new(Layout::Local, 2, 30.0, vec![0.0; 10]).is_err());
    }

    #[test]
    fn atomic_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hdmo");
        let f = sample(Layout::Local, 4);
        write_motion(&path, &f).unwrap();
        assert_eq!(read_motion(&path).unwrap(), f);
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn calibration_json_shape() {
        let json = r#"[{"id":"c0","K":[800,0,320,0,800,240,0,0,1],"R":[1,0,0,0,1,0,0,0,1],"t":[0,0,1]}]"#;
        let recs: Vec<CameraRecord> = serde_json::from_str(json).unwrap();
        let cal = recs[0].to_calib().unwrap();
        assert_eq!(cal.intrinsics[(0, 2)], 320.0);
        assert_eq!(CameraRecord::from_calib(&cal), recs[0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn round_trip_is_bit_exact(frames in 0usize..4, seed in any::<u32>(), layout in prop_oneof![
            Just(Layout::Params), Just(Layout::Local), Just(Layout::Global)]) {
            let width = layout.width();
            let payload: Vec<f32> = (0..frames * width)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let f = MotionFile::new(layout, frames, 24.0, payload).unwrap();
            let back = MotionFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            f.payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.layout, layout);
        }
    }
}
