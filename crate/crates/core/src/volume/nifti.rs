//! NIfTI-1 single-file (`.nii` / `.nii.gz`) reading and writing.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{diagonal_affine, Affine, LabelVolume, Volume, VolumeError};

const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Endian {
    Little,
    Big,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl HeaderReader<'_> {
    fn raw<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[off..off + N]);
        if self.endian == Endian::Big {
            b.reverse();
        }
        b
    }

    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.raw(off))
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.raw(off))
    }
}

struct Header {
    endian: Endian,
    dims: [usize; 3],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    qoffset: [f32; 3],
    srow: [[f32; 4]; 3],
}

impl Header {
    fn parse(bytes: &[u8]) -> Result<Header, VolumeError> {
        if bytes.len() < HEADER_SIZE {
            return Err(VolumeError::MalformedHeader(format!("file too short for a header ({} bytes)", bytes.len())));
        }
        let endian = match i32::from_le_bytes(bytes[0..4].try_into().unwrap()) {
            348 => Endian::Little,
            v if v.swap_bytes() == 348 => Endian::Big,
            v => return Err(VolumeError::MalformedHeader(format!("sizeof_hdr is {v}, expected 348"))),
        };
        if &bytes[344..348] != b"n+1\0" {
            return Err(VolumeError::MalformedHeader(format!(
                "magic {:?} is not \"n+1\"",
                String::from_utf8_lossy(&bytes[344..347])
            )));
        }
        let r = HeaderReader { bytes, endian };

        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = r.i16(40 + 2 * i);
        }
        let ndim = dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(VolumeError::MalformedHeader(format!("dim[0] = {ndim}")));
        }
        let ndim = ndim as usize;
        // trailing singleton dimensions do not count
        let effective = (1..=ndim).rev().find(|&i| dim[i] > 1).unwrap_or(0).max(ndim.min(3));
        if effective != 3 || dim[1..=3].iter().any(|&d| d < 1) {
            return Err(VolumeError::DimensionCount(effective));
        }
        let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

        let datatype = r.i16(70);
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(76 + 4 * i);
        }
        let vox_offset = r.f32(108);
        if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
            return Err(VolumeError::MalformedHeader(format!("vox_offset {vox_offset}")));
        }
        let mut srow = [[0f32; 4]; 3];
        for (row, s) in srow.iter_mut().enumerate() {
            for (c, v) in s.iter_mut().enumerate() {
                *v = r.f32(280 + 16 * row + 4 * c);
            }
        }
        Ok(Header {
            endian,
            dims,
            datatype,
            pixdim,
            vox_offset: vox_offset as usize,
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            qform_code: r.i16(252),
            sform_code: r.i16(254),
            quatern: [r.f32(256), r.f32(260), r.f32(264)],
            qoffset: [r.f32(268), r.f32(272), r.f32(276)],
            srow,
        })
    }

    fn spacing(&self) -> [f64; 3] {
        let mut s = [1.0; 3];
        for (i, v) in s.iter_mut().enumerate() {
            let p = self.pixdim[i + 1].abs() as f64;
            if p.is_finite() && p > 0.0 {
                *v = p;
            }
        }
        s
    }

    fn affine(&self) -> Affine {
        if self.sform_code > 0 {
            let mut a = [[0.0; 4]; 4];
            for (r, row) in self.srow.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    a[r][c] = v as f64;
                }
            }
            a[3][3] = 1.0;
            a
        } else if self.qform_code > 0 {
            self.qform_affine()
        } else {
            diagonal_affine(self.spacing())
        }
    }

    fn qform_affine(&self) -> Affine {
        let [b, c, d] = self.quatern.map(|v| v as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let rot = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let [dx, dy, dz] = self.spacing();
        let scale = [dx, dy, qfac * dz];
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for col in 0..3 {
                m[r][col] = rot[r][col] * scale[col];
            }
            m[r][3] = self.qoffset[r] as f64;
        }
        m[3][3] = 1.0;
        m
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Loads a NIfTI-1 volume from disk, gzip-compressed or not.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let mut raw = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut raw)?;
    read_volume(&raw)
}

/// Parses an in-memory NIfTI-1 file. Voxels are converted to f32 after
/// applying `scl_slope`/`scl_inter`.
pub fn read_volume(bytes: &[u8]) -> Result<Volume, VolumeError> {
    let decompressed;
    let bytes = if is_gzip(bytes) {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out)?;
        decompressed = out;
        &decompressed[..]
    } else {
        bytes
    };
    let hdr = Header::parse(bytes)?;
    let width = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(VolumeError::UnsupportedDatatype(other)),
    };
    let count = hdr.dims.iter().product::<usize>();
    let end = hdr.vox_offset + count * width;
    if bytes.len() < end {
        return Err(VolumeError::MalformedHeader(format!(
            "data section truncated: need {end} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = &bytes[hdr.vox_offset..end];
    let big = hdr.endian == Endian::Big;
    macro_rules! decode {
        ($t:ty, $n:expr) => {
            data.chunks_exact($n)
                .map(|c| {
                    let arr: [u8; $n] = c.try_into().unwrap();
                    let v = if big { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) };
                    v as f64
                })
                .collect::<Vec<f64>>()
        };
    }
    let raw: Vec<f64> = match hdr.datatype {
        DT_UINT8 => data.iter().map(|&b| b as f64).collect(),
        DT_INT16 => decode!(i16, 2),
        DT_UINT16 => decode!(u16, 2),
        DT_FLOAT32 => decode!(f32, 4),
        _ => decode!(f64, 8),
    };
    let slope = hdr.scl_slope as f64;
    let inter = hdr.scl_inter as f64;
    let voxels = if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        raw.into_iter().map(|v| (v * slope + inter) as f32).collect()
    } else {
        raw.into_iter().map(|v| v as f32).collect()
    };
    Volume::new(hdr.dims, hdr.affine(), voxels)
}

struct HeaderWriter {
    buf: Vec<u8>,
}

impl HeaderWriter {
    fn new() -> Self {
        HeaderWriter { buf: vec![0u8; DATA_OFFSET] }
    }

    fn put(&mut self, off: usize, bytes: &[u8]) {
        self.buf[off..off + bytes.len()].copy_from_slice(bytes);
    }

    fn i16(&mut self, off: usize, v: i16) {
        self.put(off, &v.to_le_bytes());
    }

    fn f32(&mut self, off: usize, v: f32) {
        self.put(off, &v.to_le_bytes());
    }
}

fn build_header(dims: [usize; 3], spacing: [f64; 3], affine: &Affine, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut w = HeaderWriter::new();
    w.put(0, &(HEADER_SIZE as i32).to_le_bytes());
    w.buf[38] = b'r';
    w.i16(40, 3);
    for (i, &d) in dims.iter().enumerate() {
        w.i16(42 + 2 * i, d as i16);
    }
    for i in 4..8 {
        w.i16(40 + 2 * i, 1);
    }
    w.i16(70, datatype);
    w.i16(72, bitpix);
    w.f32(76, 1.0);
    for (i, &s) in spacing.iter().enumerate() {
        w.f32(80 + 4 * i, s as f32);
    }
    w.f32(108, DATA_OFFSET as f32);
    w.f32(112, 1.0);
    w.f32(116, 0.0);
    // xyzt_units: mm
    w.buf[123] = 2;
    w.i16(252, 0);
    w.i16(254, 1);
    for (r, row) in affine.iter().take(3).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            w.f32(280 + 16 * r + 4 * c, v as f32);
        }
    }
    w.put(344, b"n+1\0");
    w.buf
}

fn write_file(path: &Path, header: &[u8], data: &[u8]) -> Result<(), VolumeError> {
    let gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let file = BufWriter::new(File::create(path)?);
    if gz {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(header)?;
        enc.write_all(data)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(header)?;
        file.write_all(data)?;
        file.flush()?;
    }
    Ok(())
}

/// Writes a float32 NIfTI-1 file carrying the volume's affine in the sform.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let header = build_header(v.dims(), v.spacing(), v.affine(), DT_FLOAT32, 32);
    let data: Vec<u8> = v.voxels().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_file(path.as_ref(), &header, &data)
}

/// Serializes labels as an uncompressed uint16 NIfTI-1 image.
pub fn write_label_volume(lv: &LabelVolume, parent: &Volume) -> Result<Vec<u8>, VolumeError> {
    if lv.dims() != parent.dims() {
        return Err(VolumeError::DimsMismatch { label: lv.dims(), parent: parent.dims() });
    }
    let mut out = build_header(parent.dims(), parent.spacing(), parent.affine(), DT_UINT16, 16);
    out.reserve(lv.labels().len() * 2);
    out.extend(lv.labels().iter().flat_map(|l| l.to_le_bytes()));
    Ok(out)
}

/// Writes labels as uint16 NIfTI-1 with the parent's affine.
pub fn save_label_volume(lv: &LabelVolume, parent: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let bytes = write_label_volume(lv, parent)?;
    let (header, data) = bytes.split_at(DATA_OFFSET);
    write_file(path.as_ref(), header, data)
}
