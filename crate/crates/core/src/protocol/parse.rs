use super::segment::Segment;
use super::ProtocolError;

pub const CODE_OPEN: &str = "<code>";
pub const CODE_CLOSE: &str = "</code>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const INTERPRETER_OPEN: &str = "<interpreter>";
pub const INTERPRETER_CLOSE: &str = "</interpreter>";

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTurn {
    pub segments: Vec<Segment>,
    pub needs_execution: bool,
}

impl ParsedTurn {
    pub fn code(&self) -> Option<&str> {
        self.segments.iter().find_map(|s| match s {
            Segment::Code { code, .. } => Some(code.as_str()),
            _ => None,
        })
    }

    pub fn answer(&self) -> Option<&str> {
        self.segments.iter().find_map(|s| match s {
            Segment::Answer { extracted, .. } => Some(extracted.as_str()),
            _ => None,
        })
    }
}

/// Parses one completion, numbering its code block (if any) from 0.
pub fn parse_model_output(text: &str) -> Result<ParsedTurn, ProtocolError> {
    parse_turn(text, 0)
}

/// Parses one completion.
///
/// Tags match case-sensitively and do not nest. The earliest of `<code>` and
/// `<answer>` wins; its span must be closed. Text before it becomes a
/// reasoning segment and everything after its close tag is dropped.
pub fn parse_turn(text: &str, next_ordinal: u32) -> Result<ParsedTurn, ProtocolError> {
    let code_at = text.find(CODE_OPEN);
    let answer_at = text.find(ANSWER_OPEN);

    let (open_at, is_code) = match (code_at, answer_at) {
        (None, None) => {
            let segments = if text.is_empty() {
                Vec::new()
            } else {
                vec![Segment::Reasoning {
                    text: text.to_owned(),
                }]
            };
            return Ok(ParsedTurn {
                segments,
                needs_execution: false,
            });
        }
        (Some(c), None) => (c, true),
        (None, Some(a)) => (a, false),
        (Some(c), Some(a)) => (c.min(a), c < a),
    };

    let (open, close) = if is_code {
        (CODE_OPEN, CODE_CLOSE)
    } else {
        (ANSWER_OPEN, ANSWER_CLOSE)
    };
    let body_start = open_at + open.len();
    let body_len = text[body_start..]
        .find(close)
        .ok_or(ProtocolError::MalformedTags {
            tag: open,
            offset: open_at,
        })?;
    let body = &text[body_start..body_start + body_len];
    let rest = &text[body_start + body_len + close.len()..];

    let mut segments = Vec::with_capacity(2);
    if open_at > 0 {
        segments.push(Segment::Reasoning {
            text: text[..open_at].to_owned(),
        });
    }
    if is_code {
        segments.push(Segment::Code {
            code: body.to_owned(),
            ordinal: next_ordinal,
        });
        if rest.contains(CODE_OPEN) {
            tracing::warn!("completion carries more than one code block; extra blocks dropped");
        }
    } else {
        segments.push(Segment::Answer {
            raw: body.to_owned(),
            extracted: extract_boxed_answer(body),
        });
    }
    if !rest.trim().is_empty() {
        tracing::debug!(dropped = rest.len(), "discarding text after closed span");
    }

    Ok(ParsedTurn {
        segments,
        needs_execution: is_code,
    })
}

/// Inverse of [`parse_turn`] for policy-produced segments.
pub fn render_turn(segments: &[Segment]) -> String {
    segments.iter().map(Segment::protocol_text).collect()
}

/// Returns the innermost balanced `\boxed{…}` content, trimmed, or the whole
/// span trimmed when no balanced box exists.
pub fn extract_boxed_answer(text: &str) -> String {
    const BOXED: &str = "\\boxed{";
    let mut best: Option<&str> = None;
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find(BOXED) {
        let content_start = search_from + rel + BOXED.len();
        if let Some(len) = balanced_len(&text[content_start..]) {
            best = Some(&text[content_start..content_start + len]);
        }
        search_from = content_start;
    }
    best.unwrap_or(text).trim().to_owned()
}

/// Length of the content before the brace closing an already-open `{`.
fn balanced_len(s: &str) -> Option<usize> {
    let mut depth = 1usize;
    for (i, ch) in s.char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reasoning_then_code() {
        let t = parse_model_output("Let me zoom.\n<code>print(1+1)</code>").unwrap();
        assert_eq!(
            t.segments,
            vec![
                Segment::Reasoning {
                    text: "Let me zoom.\n".into()
                },
                Segment::Code {
                    code: "print(1+1)".into(),
                    ordinal: 0
                },
            ]
        );
        assert!(t.needs_execution);
    }

    #[test]
    fn boxed_answer() {
        let t = parse_model_output("<answer>\\boxed{42}</answer>").unwrap();
        assert_eq!(
            t.segments,
            vec![Segment::Answer {
                raw: "\\boxed{42}".into(),
                extracted: "42".into()
            }]
        );
        assert!(!t.needs_execution);
    }

    #[test]
    fn unterminated_code_is_malformed() {
        assert_eq!(
            parse_model_output("<code>x=1"),
            Err(ProtocolError::MalformedTags {
                tag: CODE_OPEN,
                offset: 0
            })
        );
    }

    #[test]
    fn unterminated_answer_is_malformed() {
        assert!(matches!(
            parse_model_output("so <answer>\\boxed{1}"),
            Err(ProtocolError::MalformedTags { tag: ANSWER_OPEN, .. })
        ));
    }

    #[test]
    fn earlier_span_wins() {
        let t = parse_model_output("<answer>B</answer><code>print(1)</code>").unwrap();
        assert!(!t.needs_execution);
        assert_eq!(t.answer(), Some("B"));
        assert_eq!(t.segments.len(), 1);

        let t = parse_model_output("a<code>x</code>b<answer>C</answer>").unwrap();
        assert!(t.needs_execution);
        assert_eq!(t.code(), Some("x"));
        assert_eq!(t.segments.len(), 2);
    }

    #[test]
    fn second_code_block_dropped() {
        let t = parse_turn("<code>a</code>\n<code>b</code>", 3).unwrap();
        assert_eq!(
            t.segments,
            vec![Segment::Code {
                code: "a".into(),
                ordinal: 3
            }]
        );
    }

    #[test]
    fn tags_are_case_sensitive() {
        let t = parse_model_output("<CODE>x</CODE>").unwrap();
        assert!(!t.needs_execution);
        assert_eq!(t.segments.len(), 1);
    }

    #[test]
    fn text_after_answer_is_discarded() {
        let t = parse_model_output("<answer>A</answer> trailing words").unwrap();
        assert_eq!(render_turn(&t.segments), "<answer>A</answer>");
    }

    #[test]
    fn plain_text_and_empty() {
        assert!(parse_model_output("").unwrap().segments.is_empty());
        let t = parse_model_output("thinking only").unwrap();
        assert_eq!(t.segments.len(), 1);
        assert!(!t.needs_execution);
    }

    #[test]
    fn boxed_extraction_rules() {
        assert_eq!(extract_boxed_answer("\\boxed{C}"), "C");
        assert_eq!(extract_boxed_answer("The answer is \\boxed{2.70}"), "2.70");
        assert_eq!(extract_boxed_answer("no box here"), "no box here");
        assert_eq!(extract_boxed_answer("  \\boxed{ \\frac{1}{2} } "), "\\frac{1}{2}");
        assert_eq!(extract_boxed_answer("\\boxed{\\boxed{x}}"), "x");
        assert_eq!(extract_boxed_answer("\\boxed{a} or \\boxed{b}"), "b");
        assert_eq!(extract_boxed_answer("\\boxed{\"C\"}"), "\"C\"");
        // unbalanced box falls back to the whole span
        assert_eq!(extract_boxed_answer(" \\boxed{open "), "\\boxed{open");
        assert_eq!(extract_boxed_answer("\\boxed{ok} \\boxed{bad"), "ok");
    }

    fn tagged_text() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            Just("<code>".to_string()),
            Just("</code>".to_string()),
            Just("<answer>".to_string()),
            Just("</answer>".to_string()),
            Just("\\boxed{".to_string()),
            Just("}".to_string()),
            Just("{".to_string()),
            "[a-z \n]{0,6}",
            any::<String>(),
        ];
        proptest::collection::vec(piece, 0..10).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn never_panics_on_arbitrary_input(s in any::<String>()) {
            let _ = parse_model_output(&s);
            let _ = extract_boxed_answer(&s);
        }

        #[test]
        fn never_panics_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let s = String::from_utf8_lossy(&bytes);
            let _ = parse_model_output(&s);
        }

        #[test]
        fn reparse_of_rendered_turn_is_stable(s in tagged_text()) {
            if let Ok(first) = parse_turn(&s, 2) {
                let again = parse_turn(&render_turn(&first.segments), 2).unwrap();
                prop_assert_eq!(first, again);
            }
        }
    }
}
