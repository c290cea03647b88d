//! On-disk formats: the template database (`G6DB`) and raw descriptor
//! grids (`G6DR`). Little-endian throughout.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};

use super::database::{TemplateDatabase, TemplateEntry};
use super::grid::PatchGridSpec;
use super::pca::PcaBasis;
use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, RigidTransform};

pub const DB_MAGIC: [u8; 4] = *b"G6DB";
pub const RAW_MAGIC: [u8; 4] = *b"G6DR";
pub const FORMAT_VERSION: u16 = 1;

/// Bytes before the per-view blocks, excluding the trailing checksum.
fn db_prefix_len(id_len: usize, dim: usize, pca_dim: usize) -> usize {
    4 + 2 + 1 + id_len + 3 * 4 + 8 + 4 * 8 + 3 * 4 + 4 * dim + 4 * dim * pca_dim
}

/// Exact encoded size of `db`.
pub fn db_encoded_len(db: &TemplateDatabase) -> usize {
    let dp = db.pca.output_dim();
    db_prefix_len(db.object_id.len(), db.pca.input_dim(), dp)
        + db.entries.iter().map(|e| 4 + 12 * 8 + 4 * e.len() * (dp + 3)).sum::<usize>()
        + 4
}

pub fn encode_db(db: &TemplateDatabase) -> Result<Vec<u8>> {
    db.validate()?;
    let id = db.object_id.as_bytes();
    if id.len() > u8::MAX as usize {
        return Err(Error::InvalidInput(format!("object id longer than 255 bytes: {:?}", db.object_id)));
    }
    let (dim, dp) = (db.pca.input_dim(), db.pca.output_dim());
    let mut buf = Vec::with_capacity(db_encoded_len(db));
    buf.extend_from_slice(&DB_MAGIC);
    buf.write_u16::<LE>(FORMAT_VERSION)?;
    buf.write_u8(id.len() as u8)?;
    buf.extend_from_slice(id);
    buf.write_u32::<LE>(dim as u32)?;
    buf.write_u32::<LE>(dp as u32)?;
    buf.write_u32::<LE>(db.entries.len() as u32)?;
    buf.write_f64::<LE>(db.diameter)?;
    let k = &db.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy] {
        buf.write_f64::<LE>(v)?;
    }
    buf.write_u32::<LE>(k.width)?;
    buf.write_u32::<LE>(k.height)?;
    buf.write_u32::<LE>(db.grid.patch_size)?;
    for v in db.pca.mean.iter() {
        buf.write_f32::<LE>(*v)?;
    }
    // nalgebra storage is column-major already
    for v in db.pca.basis.as_slice() {
        buf.write_f32::<LE>(*v)?;
    }
    for e in &db.entries {
        buf.write_u32::<LE>(e.len() as u32)?;
        for v in e.pose.to_row_major() {
            buf.write_f64::<LE>(v)?;
        }
        for r in 0..e.len() {
            for c in 0..dp {
                buf.write_f32::<LE>(e.descriptors[(r, c)])?;
            }
        }
        for c in &e.centers {
            for v in c {
                buf.write_f32::<LE>(*v)?;
            }
        }
    }
    let crc = crc32fast::hash(&buf[6..]);
    buf.write_u32::<LE>(crc)?;
    Ok(buf)
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |_| Error::Truncated(format!("unexpected end of data reading {what}"))
}

fn check_magic(bytes: &[u8], expected: [u8; 4]) -> Result<()> {
    if bytes.len() < 6 {
        return Err(Error::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(())
}

pub fn decode_db(bytes: &[u8]) -> Result<TemplateDatabase> {
    check_magic(bytes, DB_MAGIC)?;
    if bytes.len() < 10 {
        return Err(Error::Truncated("missing checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(&body[6..]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Cursor::new(&body[6..]);
    let id_len = r.read_u8().map_err(truncated("object id"))? as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id).map_err(truncated("object id"))?;
    let object_id = String::from_utf8(id).map_err(|_| Error::Truncated("object id is not valid UTF-8".into()))?;
    let dim = r.read_u32::<LE>().map_err(truncated("D"))? as usize;
    let dp = r.read_u32::<LE>().map_err(truncated("D_PCA"))? as usize;
    let n_views = r.read_u32::<LE>().map_err(truncated("N_V"))? as usize;
    let diameter = r.read_f64::<LE>().map_err(truncated("diameter"))?;
    let mut kv = [0.0; 4];
    for v in &mut kv {
        *v = r.read_f64::<LE>().map_err(truncated("intrinsics"))?;
    }
    let width = r.read_u32::<LE>().map_err(truncated("width"))?;
    let height = r.read_u32::<LE>().map_err(truncated("height"))?;
    let patch = r.read_u32::<LE>().map_err(truncated("patch"))?;
    let intrinsics = CameraIntrinsics { fx: kv[0], fy: kv[1], cx: kv[2], cy: kv[3], width, height };
    if width != height {
        return Err(Error::Truncated(format!("render size {width}x{height} is not square")));
    }
    let grid = PatchGridSpec::new(width, patch)?;

    let remaining = body.len() - 6 - r.position() as usize;
    if dp > dim || dim.saturating_mul(dp).saturating_mul(4) > remaining {
        return Err(Error::Truncated(format!("PCA block {dim}x{dp} does not fit in the file")));
    }
    let mut mean = DVector::<f32>::zeros(dim);
    for v in mean.iter_mut() {
        *v = r.read_f32::<LE>().map_err(truncated("PCA mean"))?;
    }
    let mut basis = DMatrix::<f32>::zeros(dim, dp);
    for v in basis.as_mut_slice() {
        *v = r.read_f32::<LE>().map_err(truncated("PCA basis"))?;
    }

    let mut entries = Vec::with_capacity(n_views.min(1 << 16));
    for i in 0..n_views {
        let n = r.read_u32::<LE>().map_err(truncated("view size"))? as usize;
        let remaining = body.len() - 6 - r.position() as usize;
        if n.saturating_mul(dp + 3).saturating_mul(4) > remaining {
            return Err(Error::Truncated(format!("view {i} claims {n} patches")));
        }
        let mut pose = [0.0; 12];
        for v in &mut pose {
            *v = r.read_f64::<LE>().map_err(truncated("pose"))?;
        }
        let mut descriptors = DMatrix::<f32>::zeros(n, dp);
        for row in 0..n {
            for col in 0..dp {
                descriptors[(row, col)] = r.read_f32::<LE>().map_err(truncated("descriptors"))?;
            }
        }
        let mut centers = Vec::with_capacity(n);
        for _ in 0..n {
            let mut c = [0f32; 3];
            for v in &mut c {
                *v = r.read_f32::<LE>().map_err(truncated("centers"))?;
            }
            centers.push(c);
        }
        entries.push(TemplateEntry { descriptors, centers, pose: RigidTransform::from_row_major(&pose) });
    }
    if r.position() as usize != body.len() - 6 {
        return Err(Error::Truncated("trailing bytes after the last view".into()));
    }
    let db = TemplateDatabase { object_id, entries, pca: PcaBasis { mean, basis }, diameter, intrinsics, grid };
    db.validate()?;
    Ok(db)
}

pub fn save_db(db: &TemplateDatabase, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_db(db)?)?;
    Ok(())
}

pub fn load_db(path: impl AsRef<Path>) -> Result<TemplateDatabase> {
    decode_db(&fs::read(path)?)
}

/// Full descriptor grid of one image, row-major `grid_h × grid_w × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDescriptorGrid {
    pub grid_w: u16,
    pub grid_h: u16,
    pub dim: u32,
    pub patch: u16,
    pub layer: u16,
    pub data: Vec<f32>,
}

pub const RAW_HEADER_LEN: usize = 4 + 2 + 2 + 2 + 4 + 2 + 2;

impl RawDescriptorGrid {
    pub fn new(grid_w: u16, grid_h: u16, dim: u32, patch: u16, layer: u16, data: Vec<f32>) -> Result<Self> {
        let expected = grid_w as usize * grid_h as usize * dim as usize;
        if data.len() != expected {
            return Err(Error::InvalidInput(format!("grid payload has {} values, expected {expected}", data.len())));
        }
        Ok(Self { grid_w, grid_h, dim, patch, layer, data })
    }

    pub fn cell(&self, row: u32, col: u32) -> &[f32] {
        let d = self.dim as usize;
        let i = (row as usize * self.grid_w as usize + col as usize) * d;
        &self.data[i..i + d]
    }

    pub fn cell_mut(&mut self, row: u32, col: u32) -> &mut [f32] {
        let d = self.dim as usize;
        let i = (row as usize * self.grid_w as usize + col as usize) * d;
        &mut self.data[i..i + d]
    }

    /// Size written by [`encode`](Self::encode), checksum included.
    pub fn encoded_len(&self) -> usize {
        RAW_HEADER_LEN + 4 * self.data.len() + 4
    }

    /// Header and payload followed by a CRC32 of everything after the
    /// version field.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = self.encode_bare()?;
        let crc = crc32fast::hash(&buf[6..]);
        buf.write_u32::<LE>(crc)?;
        Ok(buf)
    }

    /// Header and payload only, as produced by external extractors.
    pub fn encode_bare(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&RAW_MAGIC);
        buf.write_u16::<LE>(FORMAT_VERSION)?;
        buf.write_u16::<LE>(self.grid_w)?;
        buf.write_u16::<LE>(self.grid_h)?;
        buf.write_u32::<LE>(self.dim)?;
        buf.write_u16::<LE>(self.patch)?;
        buf.write_u16::<LE>(self.layer)?;
        for v in &self.data {
            buf.write_f32::<LE>(*v)?;
        }
        Ok(buf)
    }

    /// Accepts both the bare layout and the checksummed one; the two differ
    /// in length by exactly four bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        check_magic(bytes, RAW_MAGIC)?;
        if bytes.len() < RAW_HEADER_LEN {
            return Err(Error::Truncated("raw descriptor header is incomplete".into()));
        }
        let mut r = Cursor::new(&bytes[6..]);
        let grid_w = r.read_u16::<LE>()?;
        let grid_h = r.read_u16::<LE>()?;
        let dim = r.read_u32::<LE>()?;
        let patch = r.read_u16::<LE>()?;
        let layer = r.read_u16::<LE>()?;
        let count = grid_w as usize * grid_h as usize * dim as usize;
        let payload = 4 * count;
        let body = &bytes[RAW_HEADER_LEN..];
        let body = if body.len() == payload + 4 {
            let (data, tail) = body.split_at(payload);
            let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
            let computed = crc32fast::hash(&bytes[6..bytes.len() - 4]);
            if stored != computed {
                return Err(Error::Checksum { stored, computed });
            }
            data
        } else if body.len() == payload {
            body
        } else {
            return Err(Error::Truncated(format!(
                "raw grid {grid_w}x{grid_h}x{dim} needs {payload} payload bytes, found {}",
                body.len()
            )));
        };
        if count == 0 || patch == 0 {
            return Err(Error::Truncated("raw grid header has a zero dimension".into()));
        }
        let data: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Truncated("raw grid contains non-finite values".into()));
        }
        Ok(Self { grid_w, grid_h, dim, patch, layer, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_db() -> TemplateDatabase {
        let dim = 6;
        let dp = 3;
        let entry = |n: usize, s: f32| TemplateEntry {
            descriptors: DMatrix::from_fn(n, dp, |r, c| {
                let v = [1.0, 0.0, 0.0];
                v[(r + c) % 3] * s.signum()
            }),
            centers: (0..n).map(|i| [i as f32 * 0.01, -0.02, 0.3]).collect(),
            pose: RigidTransform::from_axis_angle(crate::geom::Vec3::new(0.0, 1.0, 1.0), s as f64),
        };
        TemplateDatabase {
            object_id: "obj_000005".into(),
            entries: vec![entry(4, 0.3), entry(7, -1.2)],
            pca: PcaBasis {
                mean: DVector::from_fn(dim, |i, _| i as f32 * 0.5),
                basis: DMatrix::from_fn(dim, dp, |r, c| if r == c { 1.0 } else { 0.0 }),
            },
            diameter: 0.1234,
            intrinsics: CameraIntrinsics { fx: 572.4, fy: 573.6, cx: 210.0, cy: 210.0, width: 420, height: 420 },
            grid: PatchGridSpec::default(),
        }
    }

    #[test]
    fn db_round_trip_and_size() {
        let db = small_db();
        let bytes = encode_db(&db).unwrap();
        assert_eq!(bytes.len(), db_encoded_len(&db));
        // header + PCA, then per view the 12 f64 pose and 4 bytes per value
        let expected = 6 + 1 + 10 + 12 + 8 + 32 + 12 + 4 * 6 + 4 * 18 + 2 * (4 + 96) + 4 * 11 * (3 + 3) + 4;
        assert_eq!(bytes.len(), expected);
        assert_eq!(decode_db(&bytes).unwrap(), db);
    }

    #[test]
    fn db_corruption_is_detected() {
        let bytes = encode_db(&small_db()).unwrap();
        let mut bad = bytes.clone();
        bad[1] ^= 0x20;
        assert!(matches!(decode_db(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_db(&bad), Err(Error::UnsupportedVersion(9))));
        for i in 6..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(decode_db(&bad).is_err(), "flip at byte {i} went unnoticed");
        }
        assert!(decode_db(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_db(&bytes[..3]).is_err());
    }

    #[test]
    fn raw_round_trip() {
        let data: Vec<f32> = (0..2 * 3 * 5).map(|i| i as f32 * 0.25 - 1.0).collect();
        let g = RawDescriptorGrid::new(3, 2, 5, 14, 9, data).unwrap();
        let bytes = g.encode().unwrap();
        assert_eq!(bytes.len(), 18 + 2 * 3 * 5 * 4 + 4);
        assert_eq!(bytes.len(), g.encoded_len());
        assert_eq!(RawDescriptorGrid::decode(&bytes).unwrap(), g);
        let bare = g.encode_bare().unwrap();
        assert_eq!(bare[..], bytes[..bytes.len() - 4]);
        assert_eq!(RawDescriptorGrid::decode(&bare).unwrap(), g);
        assert_eq!(g.cell(1, 2), &[0.25 * 25.0 - 1.0, 5.5, 5.75, 6.0, 6.25]);
    }

    #[test]
    fn raw_corruption_is_detected() {
        let g = RawDescriptorGrid::new(3, 2, 5, 14, 9, (0..30).map(|i| i as f32 * 0.1).collect()).unwrap();
        let bytes = g.encode().unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(RawDescriptorGrid::decode(&bad).is_err(), "flip at byte {i} went unnoticed");
        }
        // without a checksum only structural fields are protected
        let bare = g.encode_bare().unwrap();
        for i in 0..14 {
            let mut bad = bare.clone();
            bad[i] ^= 0x01;
            assert!(RawDescriptorGrid::decode(&bad).is_err(), "flip at byte {i} went unnoticed");
        }
        assert!(RawDescriptorGrid::decode(&bytes[..bytes.len() - 2]).is_err());
        assert!(RawDescriptorGrid::decode(&bytes[..10]).is_err());
    }
}
