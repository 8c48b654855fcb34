use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ImageFormat {
    Ppm,
    Png,
    Jpeg,
    Gif,
    Tiff,
    Bmp,
}

impl ImageFormat {
    /// Identify the format from the leading magic bytes.
    pub fn detect(bytes: &[u8]) -> Option<ImageFormat> {
        const PNG: &[u8] = &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];
        if bytes.starts_with(PNG) {
            Some(ImageFormat::Png)
        } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
            Some(ImageFormat::Jpeg)
        } else if bytes.starts_with(b"GIF87a") || bytes.starts_with(b"GIF89a") {
            Some(ImageFormat::Gif)
        } else if bytes.starts_with(b"II*\0") || bytes.starts_with(b"MM\0*") {
            Some(ImageFormat::Tiff)
        } else if bytes.starts_with(b"BM") && bytes.len() >= 14 {
            Some(ImageFormat::Bmp)
        } else if bytes.len() >= 3
            && bytes[0] == b'P'
            && matches!(bytes[1], b'3' | b'6')
            && bytes[2].is_ascii_whitespace()
        {
            Some(ImageFormat::Ppm)
        } else {
            None
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
            ImageFormat::Jpeg => "jpg",
            ImageFormat::Gif => "gif",
            ImageFormat::Tiff => "tiff",
            ImageFormat::Bmp => "bmp",
        }
    }
}

impl fmt::Display for ImageFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImageFormat::Ppm => "PPM",
            ImageFormat::Png => "PNG",
            ImageFormat::Jpeg => "JPEG",
            ImageFormat::Gif => "GIF",
            ImageFormat::Tiff => "TIFF",
            ImageFormat::Bmp => "BMP",
        })
    }
}

/// A validated image: its digest, format and size. The bytes are carried
/// along when the value was read from disk; values reloaded from the results
/// database carry only the metadata.
#[derive(Clone)]
pub struct ImageValue {
    pub sha256: String,
    pub format: ImageFormat,
    pub byte_len: u64,
    data: Option<Arc<[u8]>>,
}

impl ImageValue {
    pub fn from_bytes(bytes: Vec<u8>) -> Option<ImageValue> {
        let format = ImageFormat::detect(&bytes)?;
        Some(ImageValue {
            sha256: hex::encode(Sha256::digest(&bytes)),
            format,
            byte_len: bytes.len() as u64,
            data: Some(bytes.into()),
        })
    }

    pub fn metadata(sha256: String, format: ImageFormat, byte_len: u64) -> ImageValue {
        ImageValue {
            sha256,
            format,
            byte_len,
            data: None,
        }
    }

    pub fn data(&self) -> Option<&[u8]> {
        self.data.as_deref()
    }
}

impl PartialEq for ImageValue {
    fn eq(&self, other: &Self) -> bool {
        self.sha256 == other.sha256 && self.format == other.format && self.byte_len == other.byte_len
    }
}

impl fmt::Debug for ImageValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageValue")
            .field("sha256", &self.sha256)
            .field("format", &self.format)
            .field("byte_len", &self.byte_len)
            .finish()
    }
}
