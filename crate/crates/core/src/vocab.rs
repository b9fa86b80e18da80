//! Closed vocabulary shared by the caption generator and the text tokenizer.

use std::collections::HashMap;
use std::sync::OnceLock;

pub const PAD_ID: u32 = 0;
pub const OOV_ID: u32 = 1;

/// Named colors used by the synthetic scenes, with their RGB values.
pub const COLORS: &[(&str, [f32; 3])] = &[
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("magenta", [0.9, 0.15, 0.85]),
    ("orange", [1.0, 0.55, 0.05]),
    ("white", [0.97, 0.97, 0.97]),
];

/// Shape names as `(singular, plural)`.
pub const SHAPES: &[(&str, &str)] = &[
    ("square", "squares"),
    ("circle", "circles"),
    ("triangle", "triangles"),
    ("diamond", "diamonds"),
];

const FUNCTION_WORDS: &[&str] = &[
    "the",
    "a",
    "an",
    "moving",
    "among",
    "between",
    "near",
    "with",
    "and",
    "small",
    "large",
    "object",
    "target",
    "left",
    "right",
    "up",
    "down",
    "slowly",
    "quickly",
    "alone",
    "on",
    "dark",
    "background",
];

/// Word list in id order; ids 0 and 1 are reserved for PAD and OOV.
pub fn words() -> &'static [String] {
    static WORDS: OnceLock<Vec<String>> = OnceLock::new();
    WORDS.get_or_init(|| {
        let mut w: Vec<String> = vec!["<pad>".into(), "<unk>".into()];
        w.extend(COLORS.iter().map(|(c, _)| c.to_string()));
        for (s, p) in SHAPES {
            w.push(s.to_string());
            w.push(p.to_string());
        }
        w.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
        w
    })
}

pub fn size() -> usize {
    words().len()
}

pub fn id(word: &str) -> u32 {
    static INDEX: OnceLock<HashMap<String, u32>> = OnceLock::new();
    let index = INDEX.get_or_init(|| {
        words()
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, w)| (w.clone(), i as u32))
            .collect()
    });
    index.get(word).copied().unwrap_or(OOV_ID)
}

pub fn color_rgb(name: &str) -> Option<[f32; 3]> {
    COLORS.iter().find(|(c, _)| *c == name).map(|(_, rgb)| *rgb)
}
