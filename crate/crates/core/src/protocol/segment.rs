use serde::{Deserialize, Serialize};

use super::parse::{ANSWER_CLOSE, ANSWER_OPEN, CODE_CLOSE, CODE_OPEN, INTERPRETER_CLOSE, INTERPRETER_OPEN};
use crate::raster::{RasterError, RasterImage};
use crate::sandbox::ExecResult;
use crate::vision::{cap_long_edge, estimate_visual_tokens, resize_to_bounds, PixelBounds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClueSource {
    /// Supplied with the prompt.
    Hint,
    /// Produced by the sandbox display hook.
    Rendered,
}

/// An image that occupies policy context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ImageClueRecord", into = "ImageClueRecord")]
pub struct ImageClue {
    image: RasterImage,
    source: ClueSource,
    tokens: u64,
}

#[derive(Serialize, Deserialize)]
struct ImageClueRecord {
    png_base64: RasterImage,
    width: u32,
    height: u32,
    source: ClueSource,
    tokens: u64,
}

impl TryFrom<ImageClueRecord> for ImageClue {
    type Error = String;

    fn try_from(r: ImageClueRecord) -> Result<Self, Self::Error> {
        if (r.png_base64.width(), r.png_base64.height()) != (r.width, r.height) {
            return Err(format!(
                "clue declares {}x{} but payload is {}x{}",
                r.width,
                r.height,
                r.png_base64.width(),
                r.png_base64.height()
            ));
        }
        if r.tokens == 0 {
            return Err("clue token count must be at least 1".into());
        }
        Ok(ImageClue {
            image: r.png_base64,
            source: r.source,
            tokens: r.tokens,
        })
    }
}

impl From<ImageClue> for ImageClueRecord {
    fn from(c: ImageClue) -> Self {
        ImageClueRecord {
            width: c.image.width(),
            height: c.image.height(),
            png_base64: c.image,
            source: c.source,
            tokens: c.tokens,
        }
    }
}

impl ImageClue {
    /// Resizes `image` the way the policy would see it and prices it in visual tokens.
    ///
    /// Rendered clues are first capped to `max_edge_px` on their long edge;
    /// every clue is then brought inside the pixel bounds.
    pub fn prepare(
        image: &RasterImage,
        source: ClueSource,
        rendering: &ClueRendering,
    ) -> Result<Self, RasterError> {
        let (mut w, mut h) = (image.width(), image.height());
        if source == ClueSource::Rendered {
            (w, h) = cap_long_edge(w, h, rendering.max_edge_px);
        }
        let (w, h) = resize_to_bounds(w, h, rendering.bounds);
        let image = image.resized(w, h)?;
        let tokens = estimate_visual_tokens(w, h, rendering.patch_px, rendering.merge);
        Ok(Self {
            image,
            source,
            tokens,
        })
    }

    pub fn image(&self) -> &RasterImage {
        &self.image
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn source(&self) -> ClueSource {
        self.source
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpreterOutput {
    pub stdout: String,
    pub images: Vec<ImageClue>,
    pub error: bool,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Reasoning { text: String },
    Code { code: String, ordinal: u32 },
    Interpreter(InterpreterOutput),
    Answer { raw: String, extracted: String },
}

impl Segment {
    /// The segment as it appears in the transcript.
    pub fn protocol_text(&self) -> String {
        match self {
            Segment::Reasoning { text } => text.clone(),
            Segment::Code { code, .. } => format!("{CODE_OPEN}{code}{CODE_CLOSE}"),
            Segment::Interpreter(out) => {
                format!("{INTERPRETER_OPEN}{}{INTERPRETER_CLOSE}", out.stdout)
            }
            Segment::Answer { raw, .. } => format!("{ANSWER_OPEN}{raw}{ANSWER_CLOSE}"),
        }
    }

    pub fn images(&self) -> &[ImageClue] {
        match self {
            Segment::Interpreter(out) => &out.images,
            _ => &[],
        }
    }
}

/// Parameters for turning sandbox results into context segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClueRendering {
    pub max_edge_px: u32,
    pub bounds: PixelBounds,
    pub patch_px: u32,
    pub merge: u32,
    pub stdout_cap_chars: usize,
}

impl Default for ClueRendering {
    fn default() -> Self {
        Self {
            max_edge_px: 1024,
            bounds: PixelBounds::default(),
            patch_px: 28,
            merge: 2,
            stdout_cap_chars: 4096,
        }
    }
}

pub const TRUNCATION_MARKER: &str = "\n...[output truncated]";

/// Converts a sandbox execution result into an interpreter segment.
///
/// Error text follows stdout. Output longer than the cap keeps its first
/// `stdout_cap_chars` characters followed by [`TRUNCATION_MARKER`].
pub fn render_interpreter_segment(
    result: &ExecResult,
    rendering: &ClueRendering,
) -> Result<Segment, RasterError> {
    let mut text = result.stdout.clone();
    if let Some(err) = &result.error {
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(err);
    }
    if let Some((cut, _)) = text.char_indices().nth(rendering.stdout_cap_chars) {
        text.truncate(cut);
        text.push_str(TRUNCATION_MARKER);
    }
    let images = result
        .images
        .iter()
        .map(|img| ImageClue::prepare(img, ClueSource::Rendered, rendering))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Segment::Interpreter(InterpreterOutput {
        stdout: text,
        images,
        error: result.error.is_some(),
        duration_ms: result.duration_ms,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(stdout: &str, images: Vec<RasterImage>, error: Option<&str>) -> ExecResult {
        ExecResult {
            stdout: stdout.into(),
            images,
            error: error.map(str::to_owned),
            display_hook_invoked: false,
            duration_ms: 5,
        }
    }

    #[test]
    fn plain_stdout() {
        let seg = render_interpreter_segment(&result("2\n", vec![], None), &ClueRendering::default())
            .unwrap();
        assert_eq!(
            seg,
            Segment::Interpreter(InterpreterOutput {
                stdout: "2\n".into(),
                images: vec![],
                error: false,
                duration_ms: 5
            })
        );
        assert_eq!(seg.protocol_text(), "<interpreter>2\n</interpreter>");
    }

    #[test]
    fn rendered_image_becomes_clue() {
        let img = RasterImage::solid(640, 480, [1, 2, 3]);
        let seg = render_interpreter_segment(&result("", vec![img], None), &ClueRendering::default())
            .unwrap();
        let clues = seg.images();
        assert_eq!(clues.len(), 1);
        assert_eq!(clues[0].source(), ClueSource::Rendered);
        assert_eq!((clues[0].width(), clues[0].height()), (640, 480));
        // ceil(640/28)=23, ceil(480/28)=18 -> 414 patches / 4 -> 104 (rounded up)
        assert_eq!(clues[0].tokens(), 104);
    }

    #[test]
    fn error_flag_and_text() {
        let seg = render_interpreter_segment(
            &result("partial", vec![], Some("Traceback (most recent call last):\nNameError")),
            &ClueRendering::default(),
        )
        .unwrap();
        match seg {
            Segment::Interpreter(out) => {
                assert!(out.error);
                assert_eq!(out.stdout, "partial\nTraceback (most recent call last):\nNameError");
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn long_output_truncated_on_char_boundary() {
        let long = "é".repeat(5000);
        let seg = render_interpreter_segment(&result(&long, vec![], None), &ClueRendering::default())
            .unwrap();
        match seg {
            Segment::Interpreter(out) => {
                assert!(out.stdout.ends_with(TRUNCATION_MARKER));
                assert_eq!(out.stdout.chars().count(), 4096 + TRUNCATION_MARKER.chars().count());
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn oversized_render_is_capped() {
        let img = RasterImage::solid(2048, 1024, [0, 0, 0]);
        let clue = ImageClue::prepare(&img, ClueSource::Rendered, &ClueRendering::default()).unwrap();
        assert!(clue.width() <= 1024 && clue.height() <= 1024);
        assert_eq!((clue.width(), clue.height()), (1024, 512));
    }
}
