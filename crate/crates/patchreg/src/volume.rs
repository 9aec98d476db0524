//! Volumes, label maps, and deformation fields in the `.rvol` on-disk format.
//!
//! An `.rvol` file is a raw little-endian payload. Its metadata lives in a
//! UTF-8 JSON sidecar at the same path with `.json` appended
//! (`vol.rvol` ↔ `vol.rvol.json`). Element `(c, i, j, k)` of a `w×h×d`
//! volume with `c` channels sits at element offset
//!
//! ```text
//! ((c·d + k)·h + j)·w + i        // i fastest, channel slowest
//! ```
//!
//! so a three-channel field is three contiguous scalar grids back to back.
//! The byte-level parsing core ([`parse_header`], [`decode_payload`],
//! [`encode_payload`]) is pure and operates on slices, so it can be driven
//! directly by a fuzzer; the path-taking wrappers only add filesystem I/O
//! and error context.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ───────────────────────────── header ─────────────────────────────

/// Element type of an `.rvol` payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U16,
}

impl Dtype {
    /// Bytes per element.
    pub fn bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U16 => 2,
        }
    }
}

/// Payload byte order. Only little-endian files exist; the field is kept in
/// the sidecar so a reader can reject anything else by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ByteOrder {
    Little,
}

fn default_byte_order() -> ByteOrder {
    ByteOrder::Little
}

/// Sidecar metadata describing an `.rvol` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    /// Grid extents `[w, h, d]`, each at least 2.
    pub dims: [usize; 3],
    /// Voxel spacing in millimetres, `[sx, sy, sz]`. Metadata only: every
    /// computation in this crate (including stored displacements) works in
    /// voxel units.
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    /// 1 for images and label maps, 3 for displacement fields.
    pub channels: usize,
    #[serde(default = "default_byte_order")]
    pub byte_order: ByteOrder,
    /// Optional label-id → name map (label volumes only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<BTreeMap<u16, String>>,
}

impl VolumeHeader {
    pub fn new(dims: [usize; 3], dtype: Dtype, channels: usize) -> Self {
        VolumeHeader {
            dims,
            spacing: [1.0; 3],
            dtype,
            channels,
            byte_order: ByteOrder::Little,
            label_names: None,
        }
    }

    /// Voxels per channel (`w·h·d`), or `None` on arithmetic overflow.
    fn checked_voxels(&self) -> Option<u64> {
        let [w, h, d] = self.dims;
        (w as u64).checked_mul(h as u64)?.checked_mul(d as u64)
    }

    /// Voxels per channel (`w·h·d`). Panics on overflow; call
    /// [`Self::validate`] first for untrusted headers.
    pub fn voxels(&self) -> usize {
        self.checked_voxels().expect("volume dims overflow") as usize
    }

    /// Total elements across channels.
    pub fn elements(&self) -> usize {
        self.voxels() * self.channels
    }

    /// Exact payload size in bytes.
    pub fn payload_bytes(&self) -> usize {
        self.elements() * self.dtype.bytes()
    }

    /// Element offset of `(c, i, j, k)`: `((c·d + k)·h + j)·w + i`.
    pub fn element_offset(&self, c: usize, i: usize, j: usize, k: usize) -> usize {
        let [w, h, d] = self.dims;
        debug_assert!(c < self.channels && i < w && j < h && k < d);
        ((c * d + k) * h + j) * w + i
    }

    /// Check the header invariants: dims ≥ 2, positive finite spacing,
    /// channels ∈ {1, 3}, and a payload size that fits in memory arithmetic.
    pub fn validate(&self) -> std::result::Result<(), FormatError> {
        if self.dims.iter().any(|&e| e < 2) {
            return Err(FormatError::Invalid(format!(
                "dims {:?} invalid: every extent must be at least 2",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(FormatError::Invalid(format!(
                "spacing {:?} invalid: entries must be positive and finite",
                self.spacing
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(FormatError::Invalid(format!(
                "channels {} invalid: must be 1 (image/labels) or 3 (field)",
                self.channels
            )));
        }
        let bytes = self
            .checked_voxels()
            .and_then(|v| v.checked_mul(self.channels as u64))
            .and_then(|e| e.checked_mul(self.dtype.bytes() as u64));
        match bytes {
            Some(b) if b <= i64::MAX as u64 => Ok(()),
            _ => Err(FormatError::Invalid(format!(
                "dims {:?} × {} channels overflow the payload size",
                self.dims, self.channels
            ))),
        }
    }
}

// ───────────────────────── parse / decode core ─────────────────────────

/// Why a byte-level header or payload was rejected. File-level wrappers
/// convert this into [`Error::Format`] with the offending path attached.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    /// The sidecar is not valid JSON for a [`VolumeHeader`] (this also
    /// covers unsupported dtypes, which fail enum deserialization by name).
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),

    /// Structurally valid JSON whose values violate a header invariant.
    #[error("header: {0}")]
    Invalid(String),

    /// Payload length disagrees with the header.
    #[error("payload is {found} bytes, header implies {expected}")]
    PayloadLength { expected: u64, found: u64 },

    /// A float payload contains NaN or an infinity.
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
}

/// Decoded payload elements, one vector per dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U16(Vec<u16>),
}

impl VolumeData {
    pub fn dtype(&self) -> Dtype {
        match self {
            VolumeData::F32(_) => Dtype::F32,
            VolumeData::U16(_) => Dtype::U16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VolumeData::F32(v) => v.len(),
            VolumeData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parse and validate a sidecar header from raw bytes.
pub fn parse_header(bytes: &[u8]) -> std::result::Result<VolumeHeader, FormatError> {
    let header: VolumeHeader = serde_json::from_slice(bytes)?;
    header.validate()?;
    Ok(header)
}

/// Decode a raw little-endian payload against a validated header. The byte
/// length must match the header exactly, and float payloads must be finite.
pub fn decode_payload(
    header: &VolumeHeader,
    bytes: &[u8],
) -> std::result::Result<VolumeData, FormatError> {
    header.validate()?;
    let expected = header.payload_bytes() as u64;
    if bytes.len() as u64 != expected {
        return Err(FormatError::PayloadLength { expected, found: bytes.len() as u64 });
    }
    match header.dtype {
        Dtype::F32 => {
            let mut out = Vec::with_capacity(bytes.len() / 4);
            for (index, ch) in bytes.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(ch.try_into().unwrap());
                if !v.is_finite() {
                    return Err(FormatError::NonFinite { index });
                }
                out.push(v);
            }
            Ok(VolumeData::F32(out))
        }
        Dtype::U16 => {
            let out = bytes
                .chunks_exact(2)
                .map(|ch| u16::from_le_bytes(ch.try_into().unwrap()))
                .collect();
            Ok(VolumeData::U16(out))
        }
    }
}

/// Encode a payload to raw little-endian bytes (inverse of [`decode_payload`]).
pub fn encode_payload(data: &VolumeData) -> Vec<u8> {
    match data {
        VolumeData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        VolumeData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

// ───────────────────────────── file I/O ─────────────────────────────

/// Sidecar path for a payload path: the same name with `.json` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Write `data` under `header` to `path` (payload) and `path.json` (header).
pub fn write_rvol(path: &Path, header: &VolumeHeader, data: &VolumeData) -> Result<()> {
    header.validate().map_err(|e| Error::format(path, e.to_string()))?;
    if header.dtype != data.dtype() || header.elements() != data.len() {
        return Err(Error::format(
            path,
            format!(
                "header ({:?}, {} elements) does not describe the payload ({:?}, {} elements)",
                header.dtype,
                header.elements(),
                data.dtype(),
                data.len()
            ),
        ));
    }
    let sidecar = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(header)
        .map_err(|e| Error::format(&sidecar, e.to_string()))?;
    text.push('\n');
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    std::fs::write(path, encode_payload(data)).map_err(|e| Error::io(path, e))
}

/// Read an `.rvol` payload and its sidecar header back from disk.
pub fn read_rvol(path: &Path) -> Result<(VolumeHeader, VolumeData)> {
    let sidecar = sidecar_path(path);
    let header_bytes = std::fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let header =
        parse_header(&header_bytes).map_err(|e| Error::format(&sidecar, e.to_string()))?;
    let payload = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let data =
        decode_payload(&header, &payload).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((header, data))
}

// ───────────────────────────── typed wrappers ─────────────────────────────

/// A single-channel real-valued grid (an image).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub header: VolumeHeader,
    /// `w·h·d` finite values, `i` fastest.
    pub data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Self {
        let header = VolumeHeader::new(dims, Dtype::F32, 1);
        assert_eq!(data.len(), header.elements(), "scalar volume data length");
        ScalarVolume { header, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_rvol(path, &self.header, &VolumeData::F32(self.data.clone()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, data) = read_rvol(path)?;
        match (header.channels, data) {
            (1, VolumeData::F32(data)) => Ok(ScalarVolume { header, data }),
            _ => Err(Error::format(path, "expected a single-channel f32 volume")),
        }
    }
}

/// A single-channel integer label grid. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub header: VolumeHeader,
    pub data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u16>) -> Self {
        let header = VolumeHeader::new(dims, Dtype::U16, 1);
        assert_eq!(data.len(), header.elements(), "label volume data length");
        LabelVolume { header, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_rvol(path, &self.header, &VolumeData::U16(self.data.clone()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, data) = read_rvol(path)?;
        match (header.channels, data) {
            (1, VolumeData::U16(data)) => Ok(LabelVolume { header, data }),
            _ => Err(Error::format(path, "expected a single-channel u16 label volume")),
        }
    }
}

/// A three-channel displacement field in voxel units. Channel 0 displaces
/// along `w`, channel 1 along `h`, channel 2 along `d`; each channel is a
/// full `w·h·d` grid, stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub header: VolumeHeader,
    /// `3·w·h·d` values, channel-major.
    pub data: Vec<f32>,
}

impl DeformationField {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Self {
        let header = VolumeHeader::new(dims, Dtype::F32, 3);
        assert_eq!(data.len(), header.elements(), "field data length");
        DeformationField { header, data }
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        let header = VolumeHeader::new(dims, Dtype::F32, 3);
        let data = vec![0.0; header.elements()];
        DeformationField { header, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_rvol(path, &self.header, &VolumeData::F32(self.data.clone()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, data) = read_rvol(path)?;
        match (header.channels, data) {
            (3, VolumeData::F32(data)) => Ok(DeformationField { header, data }),
            _ => Err(Error::format(path, "expected a three-channel f32 field")),
        }
    }
}

// ───────────────────────────── normalization ─────────────────────────────

/// Shift and scale `data` in place to zero mean and unit variance
/// (population variance). A nearly constant grid becomes all zeros instead
/// of amplifying noise: the divisor is `max(σ, 1e-6)`.
pub fn znormalize(data: &mut [f32]) {
    if data.is_empty() {
        return;
    }
    let n = data.len() as f64;
    let mut sum = 0.0f64;
    for &v in data.iter() {
        sum += v as f64;
    }
    let mean = sum / n;
    let mut ss = 0.0f64;
    for &v in data.iter() {
        let c = v as f64 - mean;
        ss += c * c;
    }
    let sigma = (ss / n).sqrt().max(1e-6);
    for v in data.iter_mut() {
        *v = ((*v as f64 - mean) / sigma) as f32;
    }
}
