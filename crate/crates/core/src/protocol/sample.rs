use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DecodeError;
use crate::raster::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    Numeric,
    FreeText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Video,
}

/// Where the sandbox finds a video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaRef {
    Path(String),
    Url(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoHint {
    #[serde(flatten)]
    pub media: MediaRef,
    pub frame_count: u32,
    pub fps: f64,
    pub duration_s: f64,
}

impl VideoHint {
    /// Text substituted for `{video_info}` in the video prompt.
    pub fn info_text(&self) -> String {
        format!(
            "Total frames: {}; FPS: {}; Duration: {:.2} seconds",
            self.frame_count, self.fps, self.duration_s
        )
    }
}

/// One query from the prompt pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSample {
    pub id: String,
    pub query: String,
    pub image_hints: Vec<RasterImage>,
    pub video: Option<VideoHint>,
    pub gold_answer: String,
    pub task_kind: TaskKind,
    pub modality: Modality,
}

impl PromptSample {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id is empty".into());
        }
        if self.gold_answer.trim().is_empty() {
            return Err("gold_answer is empty".into());
        }
        match self.modality {
            Modality::Image if self.image_hints.is_empty() => {
                Err("image modality requires at least one image hint".into())
            }
            Modality::Image if self.video.is_some() => {
                Err("image modality must not carry a video hint".into())
            }
            Modality::Video if self.video.is_none() => {
                Err("video modality requires a video hint".into())
            }
            Modality::Video if !self.image_hints.is_empty() => {
                Err("video modality must not carry image hints".into())
            }
            _ => {
                if let Some(v) = &self.video {
                    if v.frame_count == 0 || !(v.fps > 0.0) || !(v.duration_s >= 0.0) {
                        return Err("video hint needs frame_count > 0, fps > 0, duration_s >= 0".into());
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum HintRecord {
    Inline { png_base64: RasterImage },
    File { path: PathBuf },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    query: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    images: Vec<HintRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video: Option<VideoHint>,
    gold_answer: String,
    task_kind: TaskKind,
    modality: Modality,
}

fn resolve_hint(hint: HintRecord, base: &Path) -> Result<RasterImage, DecodeError> {
    match hint {
        HintRecord::Inline { png_base64 } => Ok(png_base64),
        HintRecord::File { path } => {
            let full = if path.is_absolute() { path } else { base.join(path) };
            Ok(RasterImage::from_png(fs::read(full)?)?)
        }
    }
}

/// Parses one JSONL prompt line. Relative hint paths resolve against `base`.
pub fn parse_prompt_line(line: &str, base: &Path) -> Result<PromptSample, DecodeError> {
    let r: SampleRecord = serde_json::from_str(line)?;
    let image_hints = r
        .images
        .into_iter()
        .map(|h| resolve_hint(h, base))
        .collect::<Result<Vec<_>, _>>()?;
    let sample = PromptSample {
        id: r.id,
        query: r.query,
        image_hints,
        video: r.video,
        gold_answer: r.gold_answer,
        task_kind: r.task_kind,
        modality: r.modality,
    };
    sample.validate().map_err(|reason| DecodeError::Sample {
        id: sample.id.clone(),
        reason,
    })?;
    Ok(sample)
}

/// Reads a prompt pool: one JSON object per line, blank lines skipped.
///
/// Image hints are either `{"png_base64": …}` or `{"path": …}`, the latter
/// relative to the file's directory.
pub fn load_prompts(path: &Path) -> Result<Vec<PromptSample>, DecodeError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_prompt_line(&line, &base)?);
    }
    Ok(out)
}

/// Writes samples with inline hints, one per line.
pub fn write_prompts(path: &Path, samples: &[PromptSample]) -> Result<(), DecodeError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        let record = SampleRecord {
            id: s.id.clone(),
            query: s.query.clone(),
            images: s
                .image_hints
                .iter()
                .map(|img| HintRecord::Inline {
                    png_base64: img.clone(),
                })
                .collect(),
            video: s.video.clone(),
            gold_answer: s.gold_answer.clone(),
            task_kind: s.task_kind,
            modality: s.modality,
        };
        serde_json::to_writer(&mut f, &record)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
