use crate::policy::{ContentPart, PolicyMessage, Role};
use crate::protocol::{estimate_text_tokens, ClueSource, ImageClue, Modality, PromptSample};
use crate::sandbox::{SandboxInit, SessionCaps, VideoPreload};

use super::{ScaffoldConfig, ScaffoldError};

pub const IMAGE_PROMPT_TEMPLATE: &str = include_str!("../../assets/system_prompt_image.txt");
pub const VIDEO_PROMPT_TEMPLATE: &str = include_str!("../../assets/system_prompt_video.txt");

/// Everything an episode starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialContext {
    pub messages: Vec<PolicyMessage>,
    pub sandbox_init: SandboxInit,
    /// Resized hints placed in context (image mode only).
    pub hint_clues: Vec<ImageClue>,
    pub text_tokens: u64,
    pub visual_tokens: u64,
}

impl InitialContext {
    pub fn context_tokens(&self) -> u64 {
        self.text_tokens + self.visual_tokens
    }
}

pub fn render_image_prompt(width: u32, height: u32, query: &str) -> String {
    IMAGE_PROMPT_TEMPLATE
        .replacen("{width}", &width.to_string(), 1)
        .replacen("{height}", &height.to_string(), 1)
        .replacen("{\"query\"}", query, 1)
}

pub fn render_video_prompt(video_info: &str, query: &str) -> String {
    VIDEO_PROMPT_TEMPLATE
        .replacen("{video_info}", video_info, 1)
        .replacen("{query}", query, 1)
}

/// Builds the system turn and the sandbox preloads for `sample`.
///
/// Image mode puts the resized hints in context and preloads the same
/// rasters as `image_clue_i`. Video mode keeps the context text-only and
/// preloads the video as `video_clue_0`.
pub fn assemble_initial_context(
    sample: &PromptSample,
    cfg: &ScaffoldConfig,
) -> Result<InitialContext, ScaffoldError> {
    let caps = SessionCaps {
        max_images_per_exec: cfg.max_images_per_exec,
        timeout_ceiling_ms: cfg.code_timeout_ms,
    };
    let rendering = cfg.rendering();
    match sample.modality {
        Modality::Image => {
            if sample.image_hints.is_empty() || sample.video.is_some() {
                return Err(ScaffoldError::UnsupportedModality(format!(
                    "sample {} is image mode but carries {} image hints and {} video",
                    sample.id,
                    sample.image_hints.len(),
                    if sample.video.is_some() { "a" } else { "no" }
                )));
            }
            let clues = sample
                .image_hints
                .iter()
                .map(|img| ImageClue::prepare(img, ClueSource::Hint, &rendering))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ScaffoldError::InvalidHint(e.to_string()))?;
            let prompt = render_image_prompt(clues[0].width(), clues[0].height(), &sample.query);
            let text_tokens = estimate_text_tokens(&prompt);
            let visual_tokens = clues.iter().map(ImageClue::tokens).sum();
            let mut parts = vec![ContentPart::Text(prompt)];
            parts.extend(clues.iter().cloned().map(ContentPart::Image));
            Ok(InitialContext {
                messages: vec![PolicyMessage {
                    role: Role::System,
                    parts,
                }],
                sandbox_init: SandboxInit {
                    images: clues.iter().map(|c| c.image().clone()).collect(),
                    video: None,
                    caps,
                },
                hint_clues: clues,
                text_tokens,
                visual_tokens,
            })
        }
        Modality::Video => {
            let video = match (&sample.video, sample.image_hints.is_empty()) {
                (Some(v), true) => v,
                _ => {
                    return Err(ScaffoldError::UnsupportedModality(format!(
                        "sample {} is video mode but carries {} image hints and {} video",
                        sample.id,
                        sample.image_hints.len(),
                        if sample.video.is_some() { "a" } else { "no" }
                    )))
                }
            };
            let prompt = render_video_prompt(&video.info_text(), &sample.query);
            let text_tokens = estimate_text_tokens(&prompt);
            Ok(InitialContext {
                messages: vec![PolicyMessage::text(Role::System, prompt)],
                sandbox_init: SandboxInit {
                    images: vec![],
                    video: Some(VideoPreload {
                        media: video.media.clone(),
                        max_frames_cap: cfg.video_max_frames,
                    }),
                    caps,
                },
                hint_clues: vec![],
                text_tokens,
                visual_tokens: 0,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{MediaRef, TaskKind, VideoHint};
    use crate::raster::RasterImage;

    fn image_sample(w: u32, h: u32) -> PromptSample {
        PromptSample {
            id: "i".into(),
            query: "Which letter is on the sign?".into(),
            image_hints: vec![RasterImage::solid(w, h, [5, 5, 5])],
            video: None,
            gold_answer: "A".into(),
            task_kind: TaskKind::MultipleChoice,
            modality: Modality::Image,
        }
    }

    fn video_sample() -> PromptSample {
        PromptSample {
            id: "v".into(),
            query: "How many tables?".into(),
            image_hints: vec![],
            video: Some(VideoHint {
                media: MediaRef::Path("/v.mp4".into()),
                frame_count: 900,
                fps: 30.0,
                duration_s: 30.0,
            }),
            gold_answer: "2".into(),
            task_kind: TaskKind::Numeric,
            modality: Modality::Video,
        }
    }

    #[test]
    fn templates_have_placeholders() {
        for p in ["{width}", "{height}", "{\"query\"}"] {
            assert!(IMAGE_PROMPT_TEMPLATE.contains(p), "{p}");
        }
        for p in ["{video_info}", "{query}"] {
            assert!(VIDEO_PROMPT_TEMPLATE.contains(p), "{p}");
        }
        assert!(IMAGE_PROMPT_TEMPLATE.contains("image_clue_i"));
        assert!(VIDEO_PROMPT_TEMPLATE.contains("video_clue_j"));
    }

    #[test]
    fn image_mode_context() {
        let ctx = assemble_initial_context(&image_sample(800, 600), &ScaffoldConfig::default()).unwrap();
        assert_eq!(ctx.messages.len(), 1);
        let text = ctx.messages[0].text_content();
        assert!(text.contains("Image Width: 800; Image Height: 600"));
        assert!(text.contains("Which letter is on the sign?"));
        assert!(!text.contains("{\"query\"}"));
        assert_eq!(ctx.messages[0].images().count(), 1);
        assert_eq!(ctx.sandbox_init.preload_names(), vec!["image_clue_0"]);
        assert_eq!(ctx.visual_tokens, ctx.hint_clues[0].tokens());
        assert_eq!(ctx.visual_tokens, 29 * 22 / 4 + 1);
    }

    #[test]
    fn oversized_hint_is_resized_everywhere() {
        let ctx = assemble_initial_context(&image_sample(4000, 3000), &ScaffoldConfig::default()).unwrap();
        let text = ctx.messages[0].text_content();
        assert!(text.contains("Image Width: 1624; Image Height: 1204"));
        assert_eq!(ctx.sandbox_init.images[0].width(), 1624);
    }

    #[test]
    fn video_mode_context() {
        let ctx = assemble_initial_context(&video_sample(), &ScaffoldConfig::default()).unwrap();
        assert_eq!(ctx.visual_tokens, 0);
        assert_eq!(ctx.messages[0].images().count(), 0);
        assert_eq!(ctx.sandbox_init.preload_names(), vec!["video_clue_0"]);
        assert!(ctx.messages[0].text_content().contains("Total frames: 900"));
    }

    #[test]
    fn mismatched_modality() {
        let mut s = image_sample(10, 10);
        s.image_hints.clear();
        assert!(matches!(
            assemble_initial_context(&s, &ScaffoldConfig::default()),
            Err(ScaffoldError::UnsupportedModality(_))
        ));
        let mut s = video_sample();
        s.modality = Modality::Image;
        assert!(assemble_initial_context(&s, &ScaffoldConfig::default()).is_err());
    }
}
