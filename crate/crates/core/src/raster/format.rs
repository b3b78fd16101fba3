//! The `CDR1` raster container.
//!
//! Little-endian layout:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `CDR1` |
//! | 1 | dtype code: 0 = u8 labels/mask, 1 = f32 |
//! | 2 | channels (u16) |
//! | 4 | height (u32) |
//! | 4 | width (u32) |
//! | ... | payload, `[c][i][j]` order |

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use super::{ChangeMask, ClassSet, ImageRaster, SemanticMap};

pub const MAGIC: [u8; 4] = *b"CDR1";
const HEADER_LEN: usize = 15;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"CDR1\"")]
    BadMagic([u8; 4]),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated raster: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("zero extent in raster header")]
    EmptyExtent,
    #[error("label {label} at index {index} out of range for {classes} classes")]
    LabelOutOfRange {
        label: u8,
        index: usize,
        classes: usize,
    },
    #[error("non-finite float at index {0}")]
    NonFinite(usize),
    #[error("float {value} at index {index} outside [0,1]")]
    ValueOutOfRange { value: f32, index: usize },
    #[error("mask value {value} at index {index} is not binary")]
    NotBinary { value: u8, index: usize },
    #[error("expected a {expected} raster, found {found}")]
    WrongKind {
        expected: &'static str,
        found: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterDType {
    U8,
    F32,
}

impl RasterDType {
    fn code(self) -> u8 {
        match self {
            RasterDType::U8 => 0,
            RasterDType::F32 => 1,
        }
    }
}

/// Untyped file-level raster.
#[derive(Debug, Clone, PartialEq)]
pub enum Raster {
    U8 {
        channels: u16,
        height: u32,
        width: u32,
        data: Vec<u8>,
    },
    F32 {
        channels: u16,
        height: u32,
        width: u32,
        data: Vec<f32>,
    },
}

impl Raster {
    pub fn dtype(&self) -> RasterDType {
        match self {
            Raster::U8 { .. } => RasterDType::U8,
            Raster::F32 { .. } => RasterDType::F32,
        }
    }

    pub fn dims(&self) -> (u16, u32, u32) {
        match self {
            Raster::U8 {
                channels,
                height,
                width,
                ..
            }
            | Raster::F32 {
                channels,
                height,
                width,
                ..
            } => (*channels, *height, *width),
        }
    }

    fn describe(&self) -> String {
        let (c, h, w) = self.dims();
        format!("{:?} {c}x{h}x{w}", self.dtype())
    }
}

pub fn encode_raster(r: &Raster) -> Vec<u8> {
    let (c, h, w) = r.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + c as usize * h as usize * w as usize * 4);
    out.extend_from_slice(&MAGIC);
    out.push(r.dtype().code());
    out.extend_from_slice(&c.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    match r {
        Raster::U8 { data, .. } => out.extend_from_slice(data),
        Raster::F32 { data, .. } => {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let code = bytes[4];
    let channels = u16::from_le_bytes([bytes[5], bytes[6]]);
    let height = u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes"));
    let width = u32::from_le_bytes(bytes[11..15].try_into().expect("4 bytes"));
    let elem = match code {
        0 => 1,
        1 => 4,
        other => return Err(FormatError::UnknownDtype(other)),
    };
    if channels == 0 || height == 0 || width == 0 {
        return Err(FormatError::EmptyExtent);
    }
    let n = channels as usize * height as usize * width as usize;
    let expected = HEADER_LEN + n * elem;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[HEADER_LEN..];
    Ok(if code == 0 {
        Raster::U8 {
            channels,
            height,
            width,
            data: payload.to_vec(),
        }
    } else {
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(i));
        }
        Raster::F32 {
            channels,
            height,
            width,
            data,
        }
    })
}

pub fn write_raster(r: &Raster, path: &Path) -> Result<(), FormatError> {
    std::fs::write(path, encode_raster(r)).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_raster(path: &Path) -> Result<Raster, FormatError> {
    let bytes = std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_raster(&bytes)
}

impl From<&ImageRaster> for Raster {
    fn from(img: &ImageRaster) -> Self {
        Raster::F32 {
            channels: img.channels as u16,
            height: img.height as u32,
            width: img.width as u32,
            data: img.values.clone(),
        }
    }
}

impl From<&SemanticMap> for Raster {
    fn from(m: &SemanticMap) -> Self {
        Raster::U8 {
            channels: 1,
            height: m.height as u32,
            width: m.width as u32,
            data: m.labels.clone(),
        }
    }
}

impl From<&ChangeMask> for Raster {
    fn from(m: &ChangeMask) -> Self {
        Raster::U8 {
            channels: 1,
            height: m.height as u32,
            width: m.width as u32,
            data: m.values.clone(),
        }
    }
}

impl TryFrom<Raster> for ImageRaster {
    type Error = FormatError;

    fn try_from(r: Raster) -> Result<Self, FormatError> {
        match r {
            Raster::F32 {
                channels,
                height,
                width,
                data,
            } => {
                if let Some(index) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(FormatError::ValueOutOfRange {
                        value: data[index],
                        index,
                    });
                }
                Ok(ImageRaster {
                    height: height as usize,
                    width: width as usize,
                    channels: channels as usize,
                    values: data,
                })
            }
            other => Err(FormatError::WrongKind {
                expected: "f32 image",
                found: other.describe(),
            }),
        }
    }
}

fn single_u8(r: Raster, expected: &'static str) -> Result<(usize, usize, Vec<u8>), FormatError> {
    match r {
        Raster::U8 {
            channels: 1,
            height,
            width,
            data,
        } => Ok((height as usize, width as usize, data)),
        other => Err(FormatError::WrongKind {
            expected,
            found: other.describe(),
        }),
    }
}

impl SemanticMap {
    pub fn from_raster(r: Raster, classes: Arc<ClassSet>) -> Result<Self, FormatError> {
        let (height, width, labels) = single_u8(r, "single-channel u8 map")?;
        if let Some(index) = labels.iter().position(|&l| l as usize >= classes.len()) {
            return Err(FormatError::LabelOutOfRange {
                label: labels[index],
                index,
                classes: classes.len(),
            });
        }
        Ok(SemanticMap {
            height,
            width,
            labels,
            classes,
        })
    }
}

impl TryFrom<Raster> for ChangeMask {
    type Error = FormatError;

    fn try_from(r: Raster) -> Result<Self, FormatError> {
        let (height, width, values) = single_u8(r, "single-channel u8 mask")?;
        if let Some(index) = values.iter().position(|&v| v > 1) {
            return Err(FormatError::NotBinary {
                value: values[index],
                index,
            });
        }
        Ok(ChangeMask {
            height,
            width,
            values,
        })
    }
}

pub fn write_image(img: &ImageRaster, path: &Path) -> Result<(), FormatError> {
    write_raster(&img.into(), path)
}

pub fn write_map(m: &SemanticMap, path: &Path) -> Result<(), FormatError> {
    write_raster(&m.into(), path)
}

pub fn write_mask(m: &ChangeMask, path: &Path) -> Result<(), FormatError> {
    write_raster(&m.into(), path)
}

pub fn read_image(path: &Path) -> Result<ImageRaster, FormatError> {
    read_raster(path)?.try_into()
}

pub fn read_map(path: &Path, classes: Arc<ClassSet>) -> Result<SemanticMap, FormatError> {
    SemanticMap::from_raster(read_raster(path)?, classes)
}

pub fn read_mask(path: &Path) -> Result<ChangeMask, FormatError> {
    read_raster(path)?.try_into()
}
