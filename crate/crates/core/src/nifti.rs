//! NIfTI-1 single-file (`n+1`) reader and writer, plain or gzip-wrapped, and
//! the `<case>/<case>_{flair,t1,t1ce,t2,seg}.nii.gz` case layout.
//!
//! Voxel data in a file runs with the first axis fastest. [`NiftiVolume`]
//! keeps that file order; [`to_row_major`] / [`from_row_major`] convert to
//! and from the row-major `[H, W, D]` grids used everywhere else.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::preprocess::{LabelMask, Modality, Volume};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

#[derive(Debug, thiserror::Error)]
pub enum NiftiError {
    #[error("truncated header: {0} bytes, need 348")]
    HeaderTooShort(usize),
    #[error("sizeof_hdr is {0}, expected 348 in either byte order")]
    SizeofHdr(i32),
    #[error("bad magic {0:?}: only single-file NIfTI-1 (\"n+1\") is supported")]
    Magic(String),
    #[error("unsupported datatype code {0}")]
    Datatype(i16),
    #[error("invalid dim field: {0}")]
    Dim(String),
    #[error("vox_offset {0} is below 352")]
    VoxOffset(f64),
    #[error("truncated payload: need {expected} bytes of voxel data, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("gzip stream: {0}")]
    Gzip(std::io::Error),
}

impl NiftiError {
    /// Header field (or layer) the error refers to.
    pub fn field(&self) -> &'static str {
        match self {
            NiftiError::HeaderTooShort(_) | NiftiError::SizeofHdr(_) => "sizeof_hdr",
            NiftiError::Magic(_) => "magic",
            NiftiError::Datatype(_) => "datatype",
            NiftiError::Dim(_) => "dim",
            NiftiError::VoxOffset(_) => "vox_offset",
            NiftiError::Truncated { .. } => "truncated",
            NiftiError::Gzip(_) => "gzip",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDType {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    I64,
    U64,
    F32,
    F64,
}

impl NiftiDType {
    pub const ALL: [NiftiDType; 10] = [
        NiftiDType::U8,
        NiftiDType::I8,
        NiftiDType::I16,
        NiftiDType::U16,
        NiftiDType::I32,
        NiftiDType::U32,
        NiftiDType::I64,
        NiftiDType::U64,
        NiftiDType::F32,
        NiftiDType::F64,
    ];

    pub fn code(self) -> i16 {
        match self {
            NiftiDType::U8 => 2,
            NiftiDType::I16 => 4,
            NiftiDType::I32 => 8,
            NiftiDType::F32 => 16,
            NiftiDType::F64 => 64,
            NiftiDType::I8 => 256,
            NiftiDType::U16 => 512,
            NiftiDType::U32 => 768,
            NiftiDType::I64 => 1024,
            NiftiDType::U64 => 1280,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.code() == code)
    }

    pub fn size(self) -> usize {
        match self {
            NiftiDType::U8 | NiftiDType::I8 => 1,
            NiftiDType::I16 | NiftiDType::U16 => 2,
            NiftiDType::I32 | NiftiDType::U32 | NiftiDType::F32 => 4,
            NiftiDType::I64 | NiftiDType::U64 | NiftiDType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], big: bool) -> f64 {
        macro_rules! rd {
            ($t:ty, $n:expr) => {{
                let arr: [u8; $n] = b[..$n].try_into().expect("sized");
                (if big { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
            }};
        }
        match self {
            NiftiDType::U8 => b[0] as f64,
            NiftiDType::I8 => b[0] as i8 as f64,
            NiftiDType::I16 => rd!(i16, 2),
            NiftiDType::U16 => rd!(u16, 2),
            NiftiDType::I32 => rd!(i32, 4),
            NiftiDType::U32 => rd!(u32, 4),
            NiftiDType::I64 => rd!(i64, 8),
            NiftiDType::U64 => rd!(u64, 8),
            NiftiDType::F32 => rd!(f32, 4),
            NiftiDType::F64 => rd!(f64, 8),
        }
    }

    /// Little-endian encoding; integers are rounded and saturate.
    fn encode(self, v: f64, out: &mut Vec<u8>) {
        let r = v.round();
        match self {
            NiftiDType::U8 => out.push(r as u8),
            NiftiDType::I8 => out.push(r as i8 as u8),
            NiftiDType::I16 => out.extend_from_slice(&(r as i16).to_le_bytes()),
            NiftiDType::U16 => out.extend_from_slice(&(r as u16).to_le_bytes()),
            NiftiDType::I32 => out.extend_from_slice(&(r as i32).to_le_bytes()),
            NiftiDType::U32 => out.extend_from_slice(&(r as u32).to_le_bytes()),
            NiftiDType::I64 => out.extend_from_slice(&(r as i64).to_le_bytes()),
            NiftiDType::U64 => out.extend_from_slice(&(r as u64).to_le_bytes()),
            NiftiDType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            NiftiDType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

/// A decoded NIfTI-1 image.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    /// Extents `dim[1..=dim[0]]`, at most four (three spatial plus channels).
    pub dims: Vec<usize>,
    pub dtype: NiftiDType,
    /// `pixdim[1..=3]` in mm.
    pub spacing: [f64; 3],
    pub scl_slope: f64,
    pub scl_inter: f64,
    /// Voxel values after `scl_slope`/`scl_inter`, in file order.
    pub data: Vec<f64>,
    /// Raw little-endian header this volume was read from, reused on write.
    pub header: Option<Box<[u8; HEADER_SIZE]>>,
}

impl NiftiVolume {
    pub fn new(dims: Vec<usize>, dtype: NiftiDType, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 || dims.contains(&0) {
            return Err(NiftiError::Dim(format!("{dims:?}")).into());
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::dim(format!("nifti dims {dims:?} need {} values, got {}", dims.iter().product::<usize>(), data.len())));
        }
        Ok(NiftiVolume {
            dims,
            dtype,
            spacing,
            scl_slope: 1.0,
            scl_inter: 0.0,
            data,
            header: None,
        })
    }

    /// Spatial extents, padding missing trailing axes with 1.
    pub fn spatial_dims(&self) -> [usize; 3] {
        std::array::from_fn(|i| self.dims.get(i).copied().unwrap_or(1))
    }

    pub fn channels(&self) -> usize {
        self.dims.get(3).copied().unwrap_or(1)
    }
}

struct Fields<'a> {
    h: &'a [u8],
    big: bool,
}

impl Fields<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.h[at], self.h[at + 1]];
        if self.big { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.h[at..at + 4].try_into().expect("4 bytes");
        if self.big { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
    }
}

/// Decodes a complete (decompressed) NIfTI-1 byte stream.
pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiVolume, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::HeaderTooShort(bytes.len()));
    }
    let raw = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let big = match raw {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")) == 348 => true,
        other => return Err(NiftiError::SizeofHdr(other)),
    };
    let magic = &bytes[344..348];
    if magic != MAGIC_SINGLE {
        let shown = if magic == MAGIC_PAIR {
            "ni1 (detached header)".to_string()
        } else {
            String::from_utf8_lossy(magic).into_owned()
        };
        return Err(NiftiError::Magic(shown));
    }
    let f = Fields { h: bytes, big };
    let ndim = f.i16(40);
    if !(1..=4).contains(&ndim) {
        return Err(NiftiError::Dim(format!("dim[0] = {ndim}, supported 1..=4")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 1..=ndim as usize {
        let e = f.i16(40 + 2 * i);
        if e < 1 {
            return Err(NiftiError::Dim(format!("dim[{i}] = {e}")));
        }
        dims.push(e as usize);
    }
    let code = f.i16(70);
    let dtype = NiftiDType::from_code(code).ok_or(NiftiError::Datatype(code))?;
    let spacing = std::array::from_fn(|i| {
        let p = f.f32(76 + 4 * (i + 1)).abs() as f64;
        if p > 0.0 { p } else { 1.0 }
    });
    let vox_offset = f.f32(108) as f64;
    if vox_offset < DATA_OFFSET as f64 || vox_offset.fract() != 0.0 {
        return Err(NiftiError::VoxOffset(vox_offset));
    }
    let (slope, inter) = (f.f32(112) as f64, f.f32(116) as f64);
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() { (1.0, 0.0) } else { (slope, inter) };
    let count: usize = dims.iter().product();
    let start = vox_offset as usize;
    let expected = count * dtype.size();
    let available = bytes.len().saturating_sub(start);
    if available < expected {
        return Err(NiftiError::Truncated {
            expected,
            actual: available,
        });
    }
    let payload = &bytes[start..start + expected];
    let scaled = slope != 1.0 || inter != 0.0;
    let data = payload
        .chunks_exact(dtype.size())
        .map(|b| {
            let v = dtype.decode(b, big);
            if scaled { v * slope + inter } else { v }
        })
        .collect();
    let header = (!big).then(|| Box::new(<[u8; HEADER_SIZE]>::try_from(&bytes[..HEADER_SIZE]).expect("348 bytes")));
    Ok(NiftiVolume {
        dims,
        dtype,
        spacing,
        scl_slope: slope,
        scl_inter: inter,
        data,
        header,
    })
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Reads a `.nii` or gzip-compressed `.nii.gz` file (detected by content).
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if is_gzip(&bytes) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut out).map_err(NiftiError::Gzip)?;
        out
    } else {
        bytes
    };
    Ok(parse_nifti(&bytes)?)
}

/// Encodes a volume as a little-endian single-file NIfTI-1 byte stream.
pub fn encode_nifti(vol: &NiftiVolume) -> Result<Vec<u8>> {
    if vol.dims.is_empty() || vol.dims.len() > 4 || vol.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(NiftiError::Dim(format!("{:?}", vol.dims)).into());
    }
    if vol.data.len() != vol.dims.iter().product::<usize>() {
        return Err(Error::dim("nifti data length does not match dims"));
    }
    let mut h = match &vol.header {
        Some(h) => **h,
        None => fresh_header(vol.spacing),
    };
    let put_i16 = |h: &mut [u8; HEADER_SIZE], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8; HEADER_SIZE], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    put_i16(&mut h, 40, vol.dims.len() as i16);
    for i in 1..8 {
        put_i16(&mut h, 40 + 2 * i, vol.dims.get(i - 1).copied().unwrap_or(1) as i16);
    }
    put_i16(&mut h, 70, vol.dtype.code());
    put_i16(&mut h, 72, (vol.dtype.size() * 8) as i16);
    for (i, &s) in vol.spacing.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * (i + 1), s as f32);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, vol.scl_slope as f32);
    put_f32(&mut h, 116, vol.scl_inter as f32);
    h[344..348].copy_from_slice(MAGIC_SINGLE);

    let mut out = Vec::with_capacity(DATA_OFFSET + vol.data.len() * vol.dtype.size());
    out.extend_from_slice(&h);
    out.extend_from_slice(&[0; 4]);
    let scaled = vol.scl_slope != 1.0 || vol.scl_inter != 0.0;
    for &v in &vol.data {
        let raw = if scaled { (v - vol.scl_inter) / vol.scl_slope } else { v };
        vol.dtype.encode(raw, &mut out);
    }
    Ok(out)
}

fn fresh_header(spacing: [f64; 3]) -> [u8; HEADER_SIZE] {
    let mut h = [0u8; HEADER_SIZE];
    // qfac
    h[76..80].copy_from_slice(&1f32.to_le_bytes());
    h[38] = b'r';
    // xyzt_units: mm
    h[123] = 2;
    // sform_code = scanner, with a diagonal affine
    h[254..256].copy_from_slice(&1i16.to_le_bytes());
    for (row, s) in spacing.iter().enumerate() {
        let at = 280 + 16 * row + 4 * row;
        h[at..at + 4].copy_from_slice(&(*s as f32).to_le_bytes());
    }
    h
}

/// Writes a volume; a `.gz` extension selects gzip compression.
pub fn write_nifti(vol: &NiftiVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(vol)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let payload = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, payload).map_err(|e| Error::io(path, e))
}

/// File order (first axis fastest) to row-major `[H, W, D]`.
pub fn to_row_major<V: Copy>(data: &[V], dims: [usize; 3]) -> Vec<V> {
    let [h, w, d] = dims;
    let mut out = Vec::with_capacity(data.len());
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                out.push(data[i + h * (j + w * k)]);
            }
        }
    }
    out
}

/// Row-major `[H, W, D]` to file order.
pub fn from_row_major<V: Copy>(data: &[V], dims: [usize; 3]) -> Vec<V> {
    let [h, w, d] = dims;
    let mut out = Vec::with_capacity(data.len());
    for k in 0..d {
        for j in 0..w {
            for i in 0..h {
                out.push(data[(i * w + j) * d + k]);
            }
        }
    }
    out
}

fn spatial_grid(vol: &NiftiVolume, what: &str) -> Result<[usize; 3]> {
    if vol.channels() != 1 {
        return Err(Error::dim(format!("{what}: expected a 3-D image, got dims {:?}", vol.dims)));
    }
    Ok(vol.spatial_dims())
}

pub fn label_mask_from_nifti(vol: &NiftiVolume) -> Result<LabelMask> {
    let dims = spatial_grid(vol, "segmentation")?;
    LabelMask::from_values(dims, &to_row_major(&vol.data, dims))
}

/// Label mask as a `u8` NIfTI, reusing `template`'s header (affine, spacing) when given.
pub fn label_mask_to_nifti(mask: &LabelMask, spacing: [f64; 3], template: Option<&NiftiVolume>) -> NiftiVolume {
    let dims = mask.dims();
    let values: Vec<f64> = mask.labels().iter().map(|&l| f64::from(l)).collect();
    NiftiVolume {
        dims: dims.to_vec(),
        dtype: NiftiDType::U8,
        spacing,
        scl_slope: 1.0,
        scl_inter: 0.0,
        data: from_row_major(&values, dims),
        header: template.and_then(|t| t.header.clone()),
    }
}

/// Splits a 4-D image with four channels `[FLAIR, T1, T1c, T2]` into a volume.
pub fn volume_from_nifti4d(case_id: &str, vol: &NiftiVolume) -> Result<Volume> {
    if vol.dims.len() != 4 || vol.dims[3] != 4 {
        return Err(Error::dim(format!("{case_id}: expected [H, W, D, 4] image, got {:?}", vol.dims)));
    }
    let dims = vol.spatial_dims();
    let n: usize = dims.iter().product();
    let channels = std::array::from_fn(|c| to_row_major(&vol.data[c * n..(c + 1) * n], dims));
    Volume::new(case_id, dims, vol.spacing, channels)
}

fn case_file(dir: &Path, case_id: &str, suffix: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{case_id}_{suffix}.{ext}")))
        .find(|p| p.is_file())
}

/// A case read from disk; `template` is the FLAIR header for writing predictions.
pub struct Case {
    pub volume: Volume,
    pub truth: Option<LabelMask>,
    pub template: NiftiVolume,
}

/// Reads `<dir>/<id>_{flair,t1,t1ce,t2}.nii[.gz]` and the optional `_seg`.
pub fn read_case_dir(dir: impl AsRef<Path>) -> Result<Case> {
    let dir = dir.as_ref();
    let case_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Validation(format!("{}: not a case directory", dir.display())))?
        .to_string();
    let mut template: Option<NiftiVolume> = None;
    let mut channels: [Vec<f64>; 4] = Default::default();
    for m in Modality::ALL {
        let path = case_file(dir, &case_id, m.file_suffix()).ok_or_else(|| {
            Error::Validation(format!("{}: missing {case_id}_{}.nii.gz", dir.display(), m.file_suffix()))
        })?;
        let vol = read_nifti(&path)?;
        let dims = spatial_grid(&vol, &path.display().to_string())?;
        if let Some(t) = &template {
            if t.spatial_dims() != dims || t.spacing != vol.spacing {
                return Err(Error::dim(format!(
                    "{}: modality grid {dims:?}/{:?} differs from {:?}/{:?}",
                    path.display(),
                    vol.spacing,
                    t.spatial_dims(),
                    t.spacing
                )));
            }
        }
        channels[m.channel()] = to_row_major(&vol.data, dims);
        template.get_or_insert(vol);
    }
    let template = template.expect("four modalities read");
    let dims = template.spatial_dims();
    let volume = Volume::new(case_id.clone(), dims, template.spacing, channels)?;
    let truth = match case_file(dir, &case_id, "seg") {
        Some(p) => {
            let seg = read_nifti(&p)?;
            let mask = label_mask_from_nifti(&seg)?;
            if mask.dims() != dims {
                return Err(Error::dim(format!("{}: segmentation grid differs from images", p.display())));
            }
            Some(mask)
        }
        None => None,
    };
    Ok(Case {
        volume,
        truth,
        template,
    })
}

/// True when `dir` holds `<name>_flair.nii[.gz]` for its own name.
pub fn is_case_dir(dir: &Path) -> bool {
    dir.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|id| case_file(dir, id, Modality::Flair.file_suffix()).is_some())
}

/// Case directories under `root` (or `root` itself if it is one), sorted by name.
pub fn find_case_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if is_case_dir(root) {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() && is_case_dir(&path) {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(format!("{}: no case directories found", root.display())));
    }
    Ok(dirs)
}

/// Label maps in `dir`, keyed by case id. Accepts `<id>.nii[.gz]`,
/// `<id>_seg.nii[.gz]` and `<id>/<id>_seg.nii[.gz]`.
pub fn read_label_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, LabelMask, NiftiVolume)>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
            continue;
        };
        if path.is_dir() {
            if let Some(seg) = case_file(&path, &name, "seg") {
                found.push((name, seg));
            }
            continue;
        }
        let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"));
        if let Some(stem) = stem {
            let id = stem.strip_suffix("_seg").unwrap_or(stem);
            found.push((id.to_string(), path));
        }
    }
    found.sort();
    if let Some(w) = found.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Validation(format!("{}: case {} appears twice", dir.display(), w[0].0)));
    }
    found
        .into_iter()
        .map(|(id, path)| {
            let vol = read_nifti(&path)?;
            let mask = label_mask_from_nifti(&vol)
                .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
            Ok((id, mask, vol))
        })
        .collect()
}

/// Writes a case in the directory convention (float32 images, uint8 labels).
pub fn write_case_dir(root: impl AsRef<Path>, vol: &Volume, truth: Option<&LabelMask>) -> Result<PathBuf> {
    let dir = root.as_ref().join(&vol.case_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for m in Modality::ALL {
        let img = NiftiVolume::new(
            vol.dims.to_vec(),
            NiftiDType::F32,
            vol.spacing,
            from_row_major(&vol.channels[m.channel()], vol.dims),
        )?;
        write_nifti(&img, dir.join(format!("{}_{}.nii.gz", vol.case_id, m.file_suffix())))?;
    }
    if let Some(mask) = truth {
        let seg = label_mask_to_nifti(mask, vol.spacing, None);
        write_nifti(&seg, dir.join(format!("{}_seg.nii.gz", vol.case_id)))?;
    }
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_volume_file_size() {
        for dt in NiftiDType::ALL {
            let v = NiftiVolume::new(vec![2, 2, 2], dt, [1.0; 3], vec![0.0; 8]).unwrap();
            assert_eq!(encode_nifti(&v).unwrap().len(), 352 + 8 * dt.size());
        }
    }

    #[test]
    fn order_conversion_inverts() {
        let dims = [2, 3, 4];
        let data: Vec<u32> = (0..24).collect();
        let rm = to_row_major(&data, dims);
        // file index of (i=1, j=0, k=0) is 1; row-major index is 12
        assert_eq!(rm[12], 1);
        assert_eq!(from_row_major(&rm, dims), data);
    }

    #[test]
    fn errors_name_their_field() {
        let v = NiftiVolume::new(vec![2, 2, 2], NiftiDType::I16, [1.0; 3], vec![1.0; 8]).unwrap();
        let good = encode_nifti(&v).unwrap();
        assert!(parse_nifti(&good).is_ok());

        let mut bad = good.clone();
        bad[344..348].copy_from_slice(b"ni1\0");
        assert_eq!(parse_nifti(&bad).unwrap_err().field(), "magic");

        let mut bad = good.clone();
        bad[70..72].copy_from_slice(&3i16.to_le_bytes());
        assert_eq!(parse_nifti(&bad).unwrap_err().field(), "datatype");

        let err = parse_nifti(&good[..good.len() - 1]).unwrap_err();
        assert_eq!(err.field(), "truncated");
        assert!(err.to_string().contains("truncated"));

        assert_eq!(parse_nifti(&good[..100]).unwrap_err().field(), "sizeof_hdr");
    }

    #[test]
    fn big_endian_header_is_read() {
        let v = NiftiVolume::new(vec![2, 1, 1], NiftiDType::I16, [1.5, 1.0, 1.0], vec![3.0, -7.0]).unwrap();
        let le = encode_nifti(&v).unwrap();
        let mut be = le.clone();
        let swap = |b: &mut [u8], at: usize, n: usize| b[at..at + n].reverse();
        swap(&mut be, 0, 4);
        for i in 0..8 {
            swap(&mut be, 40 + 2 * i, 2);
        }
        swap(&mut be, 70, 2);
        swap(&mut be, 72, 2);
        for i in 0..8 {
            swap(&mut be, 76 + 4 * i, 4);
        }
        for at in [108, 112, 116] {
            swap(&mut be, at, 4);
        }
        swap(&mut be, 352, 2);
        swap(&mut be, 354, 2);
        let back = parse_nifti(&be).unwrap();
        assert_eq!(back.data, vec![3.0, -7.0]);
        assert_eq!(back.spacing, [1.5, 1.0, 1.0]);
    }

    #[test]
    fn scaling_applies() {
        let mut v = NiftiVolume::new(vec![2, 1, 1], NiftiDType::I16, [1.0; 3], vec![5.0, 9.0]).unwrap();
        v.scl_slope = 2.0;
        v.scl_inter = 1.0;
        let bytes = encode_nifti(&v).unwrap();
        // raw values are (v - 1) / 2
        assert_eq!(i16::from_le_bytes([bytes[352], bytes[353]]), 2);
        assert_eq!(parse_nifti(&bytes).unwrap().data, vec![5.0, 9.0]);
    }
}
