//! JSON bodies of the sandbox protocol (`/v1`).

use serde::{Deserialize, Serialize};

use super::{ExecResult, SandboxInit};
use crate::protocol::MediaRef;
use crate::raster::{RasterError, RasterImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub png_base64: RasterImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPayload {
    #[serde(flatten)]
    pub media: MediaRef,
    pub max_frames_cap: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    pub images: Vec<ImagePayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<VideoPayload>,
}

impl From<&SandboxInit> for CreateRequest {
    fn from(init: &SandboxInit) -> Self {
        CreateRequest {
            images: init
                .images
                .iter()
                .map(|img| ImagePayload {
                    png_base64: img.clone(),
                })
                .collect(),
            video: init.video.as_ref().map(|v| VideoPayload {
                media: v.media.clone(),
                max_frames_cap: v.max_frames_cap,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecRequest {
    pub code: String,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecImage {
    pub png_base64: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResponse {
    pub stdout: String,
    #[serde(default)]
    pub images: Vec<ExecImage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub display_hook_invoked: bool,
    #[serde(default)]
    pub duration_ms: u64,
}

impl ExecResponse {
    /// Decodes every image and checks it against its declared size.
    pub fn into_result(self) -> Result<ExecResult, RasterError> {
        let images = self
            .images
            .into_iter()
            .map(|img| {
                let png = base64_decode(&img.png_base64)?;
                RasterImage::from_png_declared(png, img.width, img.height)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExecResult {
            stdout: self.stdout,
            images,
            error: self.error,
            display_hook_invoked: self.display_hook_invoked,
            duration_ms: self.duration_ms,
        })
    }
}

impl From<&ExecResult> for ExecResponse {
    fn from(r: &ExecResult) -> Self {
        ExecResponse {
            stdout: r.stdout.clone(),
            images: r
                .images
                .iter()
                .map(|img| ExecImage {
                    png_base64: img.to_base64(),
                    width: img.width(),
                    height: img.height(),
                })
                .collect(),
            error: r.error.clone(),
            display_hook_invoked: r.display_hook_invoked,
            duration_ms: r.duration_ms,
        }
    }
}

fn base64_decode(s: &str) -> Result<Vec<u8>, RasterError> {
    use base64::Engine as _;
    Ok(base64::engine::general_purpose::STANDARD.decode(s.trim())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::{SessionCaps, VideoPreload};

    #[test]
    fn create_body_shape() {
        let init = SandboxInit {
            images: vec![],
            video: Some(VideoPreload {
                media: MediaRef::Url("http://x/v.mp4".into()),
                max_frames_cap: 64,
            }),
            caps: SessionCaps::default(),
        };
        let body = serde_json::to_value(CreateRequest::from(&init)).unwrap();
        assert_eq!(
            body,
            serde_json::json!({"images": [], "video": {"url": "http://x/v.mp4", "max_frames_cap": 64}})
        );
        let empty = serde_json::to_value(CreateRequest::from(&SandboxInit::default())).unwrap();
        assert_eq!(empty, serde_json::json!({"images": []}));
    }

    #[test]
    fn exec_response_round_trip() {
        let r = ExecResult {
            stdout: "hi\n".into(),
            images: vec![RasterImage::solid(12, 7, [3, 4, 5])],
            error: None,
            display_hook_invoked: true,
            duration_ms: 9,
        };
        let wire = ExecResponse::from(&r);
        let json = serde_json::to_string(&wire).unwrap();
        assert!(!json.contains("\"error\""));
        let back: ExecResponse = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_result().unwrap(), r);
    }

    #[test]
    fn declared_size_mismatch_rejected() {
        let img = RasterImage::solid(12, 7, [0, 0, 0]);
        let wire = ExecResponse {
            stdout: String::new(),
            images: vec![ExecImage {
                png_base64: img.to_base64(),
                width: 7,
                height: 12,
            }],
            error: None,
            display_hook_invoked: true,
            duration_ms: 1,
        };
        assert!(matches!(wire.into_result(), Err(RasterError::DimensionMismatch { .. })));
    }
}
