//! JSON messages exchanged over the editing socket. Every message is one
//! object whose `type` field selects the variant; see the README for the
//! field-by-field schema.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use dragedit_core::generator::ImageTensor;
use dragedit_core::interaction::ZKey;
use dragedit_core::transformer::PixelPosition;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WireMessage {
    /// Starts a session from a seed or an explicit W+ latent (one row per code).
    CreateSession {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latent: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        use_average_direction: bool,
    },
    Drag {
        session: String,
        id: u64,
        s: PixelPosition,
        e: PixelPosition,
        #[serde(default)]
        z_key: ZKey,
    },
    AnchorAdd {
        session: String,
        p: PixelPosition,
    },
    AnchorRemove {
        session: String,
        p: PixelPosition,
    },
    Wheel {
        session: String,
        id: u64,
        p: PixelPosition,
        clicks: i64,
    },
    Commit {
        session: String,
    },
    Revert {
        session: String,
    },
    SetBeta {
        session: String,
        beta: f64,
    },
    Frame(Frame),
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        message: String,
    },
}

impl WireMessage {
    pub fn session(&self) -> Option<&str> {
        match self {
            Self::Drag { session, .. }
            | Self::AnchorAdd { session, .. }
            | Self::AnchorRemove { session, .. }
            | Self::Wheel { session, .. }
            | Self::Commit { session }
            | Self::Revert { session }
            | Self::SetBeta { session, .. } => Some(session),
            Self::Frame(f) => Some(&f.session),
            Self::Error { session, .. } => session.as_deref(),
            Self::CreateSession { .. } => None,
        }
    }

    /// Drags and wheel turns; a newer one replaces a queued older one.
    pub fn is_gesture(&self) -> bool {
        matches!(self, Self::Drag { .. } | Self::Wheel { .. })
    }

    pub fn error(session: Option<&str>, id: Option<u64>, message: impl Into<String>) -> Self {
        Self::Error {
            session: session.map(str::to_owned),
            id,
            message: message.into(),
        }
    }
}

/// Rendered image plus what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub session: String,
    /// Gesture id this frame answers, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub width: u32,
    pub height: u32,
    /// Base64 PNG.
    pub png: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Number of user inputs (anchors plus gesture).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

pub fn encode_png(image: &ImageTensor) -> anyhow::Result<String> {
    let n = image.resolution() as u32;
    let rgb = RgbImage::from_raw(n, n, image.to_rgb8()).ok_or_else(|| anyhow::anyhow!("image buffer size mismatch"))?;
    let mut buf = Cursor::new(Vec::new());
    rgb.write_to(&mut buf, ImageFormat::Png)?;
    Ok(STANDARD.encode(buf.into_inner()))
}

/// Decodes a frame payload back to 8-bit RGB.
pub fn decode_png(payload: &str) -> anyhow::Result<RgbImage> {
    let bytes = STANDARD.decode(payload)?;
    Ok(image::load_from_memory_with_format(&bytes, ImageFormat::Png)?.to_rgb8())
}
