//! Parsing of policy outputs of the form
//! `<answer> TEXT </answer><bbox> [x1,y1,x2,y2];[...] </bbox>`.
//!
//! Parsing is total: malformed input only lowers the format class. Text
//! outside the two blocks is ignored.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Canvas};

/// How much of the expected output structure was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FormatClass {
    /// An answer block followed by a well-formed bbox block.
    Valid,
    /// Exactly one of the two blocks.
    Partial,
    /// Neither block.
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub answer_text: String,
    pub boxes: Vec<BBox>,
    pub format_class: FormatClass,
    /// Boxes dropped for being degenerate after clamping.
    pub warnings: Vec<String>,
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<answer>(.*?)</answer>").unwrap())
}

fn bbox_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<bbox>(.*?)</bbox>").unwrap())
}

fn coord_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\[\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]$").unwrap()
    })
}

/// First well-formed answer block at or after `from`: `(text, end_offset)`.
fn find_answer(raw: &str, from: usize) -> Option<(String, usize)> {
    answer_re()
        .captures_iter(&raw[from..])
        .find_map(|c| {
            let inner = c.get(1).unwrap().as_str();
            if inner.contains('<') || inner.contains('>') {
                return None;
            }
            Some((inner.trim().to_string(), from + c.get(0).unwrap().end()))
        })
}

/// Raw coordinate quadruples of the first well-formed bbox block at or after `from`.
fn find_bbox(raw: &str, from: usize) -> Option<Vec<[u32; 4]>> {
    bbox_re()
        .captures_iter(&raw[from..])
        .find_map(|c| parse_payload(c.get(1).unwrap().as_str()))
}

fn parse_payload(payload: &str) -> Option<Vec<[u32; 4]>> {
    let payload = payload.trim();
    if payload.replace(char::is_whitespace, "") == "[]" {
        return Some(Vec::new());
    }
    payload
        .split(';')
        .map(|part| {
            let caps = coord_re().captures(part.trim())?;
            let mut q = [0u32; 4];
            for (i, slot) in q.iter_mut().enumerate() {
                let digits = caps.get(i + 1).unwrap().as_str();
                *slot = digits.parse::<u64>().unwrap_or(u64::MAX).min(u32::MAX as u64) as u32;
            }
            Some(q)
        })
        .collect()
}

fn clamp_boxes(raw: Vec<[u32; 4]>, canvas: Canvas, warnings: &mut Vec<String>) -> Vec<BBox> {
    raw.into_iter()
        .filter_map(|[x1, y1, x2, y2]| {
            let b = BBox {
                sx: x1.min(canvas.width),
                sy: y1.min(canvas.height),
                ex: x2.min(canvas.width),
                ey: y2.min(canvas.height),
            };
            if b.is_degenerate() {
                warnings.push(format!("dropped degenerate box [{x1},{y1},{x2},{y2}]"));
                None
            } else {
                Some(b)
            }
        })
        .collect()
}

/// Parses a rollout string. Never fails.
pub fn parse_response(raw: &str, canvas: Canvas) -> ParsedResponse {
    let mut warnings = Vec::new();
    if let Some((answer_text, end)) = find_answer(raw, 0) {
        return match find_bbox(raw, end) {
            Some(q) => ParsedResponse {
                answer_text,
                boxes: clamp_boxes(q, canvas, &mut warnings),
                format_class: FormatClass::Valid,
                warnings,
            },
            None => ParsedResponse {
                answer_text,
                boxes: Vec::new(),
                format_class: FormatClass::Partial,
                warnings,
            },
        };
    }
    match find_bbox(raw, 0) {
        Some(q) => ParsedResponse {
            answer_text: String::new(),
            boxes: clamp_boxes(q, canvas, &mut warnings),
            format_class: FormatClass::Partial,
            warnings,
        },
        None => ParsedResponse {
            answer_text: String::new(),
            boxes: Vec::new(),
            format_class: FormatClass::Invalid,
            warnings,
        },
    }
}

pub fn classify_format(p: &ParsedResponse) -> FormatClass {
    p.format_class
}

/// Canonical string form; the inverse of [`parse_response`] for in-canvas boxes.
pub fn render_response(answer: &str, boxes: &[BBox]) -> String {
    let payload = if boxes.is_empty() {
        "[]".to_string()
    } else {
        boxes
            .iter()
            .map(|b| format!("[{},{},{},{}]", b.sx, b.sy, b.ex, b.ey))
            .collect::<Vec<_>>()
            .join(";")
    };
    format!("<answer>{answer}</answer><bbox>{payload}</bbox>")
}

#[cfg(test)]
mod tests {
    use super::*;

    const C: Canvas = Canvas {
        width: 64,
        height: 64,
    };

    #[test]
    fn grammar_exemplars() {
        let p = parse_response("<answer>mug</answer><bbox>[2,3,10,12]</bbox>", C);
        assert_eq!(p.answer_text, "mug");
        assert_eq!(p.boxes, vec![BBox::new(2, 3, 10, 12).unwrap()]);
        assert_eq!(p.format_class, FormatClass::Valid);

        let p = parse_response("<answer>none</answer>", C);
        assert_eq!((p.answer_text.as_str(), p.boxes.len()), ("none", 0));
        assert_eq!(classify_format(&p), FormatClass::Partial);

        let p = parse_response("mug [2,3,10,12]", C);
        assert_eq!(p.format_class, FormatClass::Invalid);
        assert!(p.answer_text.is_empty() && p.boxes.is_empty());
    }

    #[test]
    fn whitespace_and_multiple_boxes() {
        let p = parse_response(
            "  <answer> left_hand and mug </answer>\n<bbox> [ 1 , 2 , 3 , 4 ] ; [5,6,7,8] </bbox> ",
            C,
        );
        assert_eq!(p.format_class, FormatClass::Valid);
        assert_eq!(p.answer_text, "left_hand and mug");
        assert_eq!(p.boxes.len(), 2);
        let p = parse_response("<answer>none</answer><bbox>[ ]</bbox>", C);
        assert_eq!(p.format_class, FormatClass::Valid);
        assert!(p.boxes.is_empty());
    }

    #[test]
    fn bbox_only_is_partial() {
        let p = parse_response("<bbox>[0,0,4,4]</bbox>", C);
        assert_eq!(p.format_class, FormatClass::Partial);
        assert_eq!(p.boxes.len(), 1);
        assert!(p.answer_text.is_empty());
    }

    #[test]
    fn malformed_payloads_degrade() {
        for raw in [
            "<answer>mug</answer><bbox>[1,2,3]</bbox>",
            "<answer>mug</answer><bbox></bbox>",
            "<answer>mug</answer><bbox>[1,2,3,4];</bbox>",
            "<answer>mug</answer><bbox>[1,2,3,4]",
            "<bbox>[1,2,3,4]</bbox><answer>mug</answer>",
        ] {
            assert_eq!(parse_response(raw, C).format_class, FormatClass::Partial, "{raw}");
        }
        assert_eq!(
            parse_response("<answer>a<bbox>[1,2,3,4]</bbox></answer>", C).format_class,
            FormatClass::Partial
        );
        assert_eq!(parse_response("<answer>mug", C).format_class, FormatClass::Invalid);
    }

    #[test]
    fn clamping_and_degenerate_boxes() {
        let p = parse_response("<answer>x</answer><bbox>[60,60,99999999999999,70];[5,5,5,9]</bbox>", C);
        assert_eq!(p.format_class, FormatClass::Valid);
        assert_eq!(p.boxes, vec![BBox::new(60, 60, 64, 64).unwrap()]);
        assert_eq!(p.warnings.len(), 1);
        let p = parse_response("<answer>x</answer><bbox>[70,1,80,5]</bbox>", C);
        assert!(p.boxes.is_empty());
        assert_eq!(p.format_class, FormatClass::Valid);
    }

    #[test]
    fn render_canonical_forms() {
        let b = BBox::new(2, 3, 10, 12).unwrap();
        assert_eq!(
            render_response("mug", &[b]),
            "<answer>mug</answer><bbox>[2,3,10,12]</bbox>"
        );
        assert_eq!(render_response("none", &[]), "<answer>none</answer><bbox>[]</bbox>");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox> {
            (0u32..64, 0u32..64, 1u32..=64, 1u32..=64)
                .prop_filter_map("degenerate", |(a, b, c, d)| BBox::new(a, b, c, d).ok())
        }

        fn arb_answer() -> impl Strategy<Value = String> {
            "[a-z_]{1,8}( [a-z_]{1,8}){0,2}"
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn parse_inverts_render(answer in arb_answer(), boxes in proptest::collection::vec(arb_box(), 0..4)) {
                let p = parse_response(&render_response(&answer, &boxes), C);
                prop_assert_eq!(p.format_class, FormatClass::Valid);
                prop_assert_eq!(p.answer_text, answer);
                prop_assert_eq!(p.boxes, boxes);
            }
        }

        proptest! {
            #[test]
            fn parse_is_total(raw in ".{0,80}") {
                let p = parse_response(&raw, C);
                if p.format_class == FormatClass::Invalid {
                    prop_assert!(p.answer_text.is_empty() && p.boxes.is_empty());
                }
            }

            #[test]
            fn parse_is_total_on_tag_soup(parts in proptest::collection::vec(
                prop_oneof![
                    Just("<answer>"), Just("</answer>"), Just("<bbox>"), Just("</bbox>"),
                    Just("["), Just("]"), Just(","), Just(";"), Just("7"), Just("mug"), Just(" "),
                ], 0..30)) {
                let raw: String = parts.concat();
                let _ = parse_response(&raw, C);
            }

            #[test]
            fn removing_a_block_never_stays_valid(answer in arb_answer(), boxes in proptest::collection::vec(arb_box(), 0..3)) {
                let full = render_response(&answer, &boxes);
                let cut = full.find("<bbox>").unwrap();
                let without_bbox = &full[..cut];
                let without_answer = &full[cut..];
                prop_assert_ne!(parse_response(without_bbox, C).format_class, FormatClass::Valid);
                prop_assert_ne!(parse_response(without_answer, C).format_class, FormatClass::Valid);
            }
        }
    }
}
