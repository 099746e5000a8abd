//! The word list shared by the synthetic corpus and the toy reasoner.

use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WordClass {
    Filler,
    Color,
    Shape,
    Object,
    /// High-surprisal reasoning tokens that carry no visual grounding.
    Key,
    Question,
    Unused,
}

impl WordClass {
    /// Visual anchors: attribute words read off the image.
    pub fn is_anchor(self) -> bool {
        matches!(self, WordClass::Color | WordClass::Shape | WordClass::Object)
    }

    /// Attribute category name used in trace `attributes` maps.
    pub fn category(self) -> Option<&'static str> {
        match self {
            WordClass::Color => Some("color"),
            WordClass::Shape => Some("shape"),
            WordClass::Object => Some("object"),
            _ => None,
        }
    }
}

const FILLERS: &[&str] = &[
    "the", "is", "a", "of", "and", "look", "at", "image", "so", "there", "which", "then", "we", "see", "it",
    "that",
];
const COLORS: &[&str] = &["red", "blue", "green", "yellow", "black", "white"];
const SHAPES: &[&str] = &["circle", "square", "triangle", "star", "oval", "cross"];
const OBJECTS: &[&str] = &["apple", "car", "dog", "cup", "chair", "book", "tree", "ball"];
const KEYS: &[&str] = &["two", "three", "four", "five", "six", "seven", "eight", "nine"];
const QUESTION: &[&str] = &["question", "what", "where", "how", "many", "describe"];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    classes: Vec<WordClass>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// The standard word list padded with `unused*` entries up to `size`.
    pub fn standard(size: usize) -> Self {
        let groups: [(&[&str], WordClass); 6] = [
            (FILLERS, WordClass::Filler),
            (COLORS, WordClass::Color),
            (SHAPES, WordClass::Shape),
            (OBJECTS, WordClass::Object),
            (KEYS, WordClass::Key),
            (QUESTION, WordClass::Question),
        ];
        let mut words = Vec::new();
        let mut classes = Vec::new();
        for (list, class) in groups {
            for w in list {
                words.push(w.to_string());
                classes.push(class);
            }
        }
        assert!(size >= words.len(), "vocabulary needs at least {} entries", words.len());
        while words.len() < size {
            words.push(format!("unused{}", words.len()));
            classes.push(WordClass::Unused);
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Vocabulary { words, classes, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn class_of_id(&self, id: u32) -> WordClass {
        self.classes.get(id as usize).copied().unwrap_or(WordClass::Unused)
    }

    pub fn class_of(&self, word: &str) -> Option<WordClass> {
        self.id(word).map(|id| self.class_of_id(id))
    }

    pub fn ids_of(&self, class: WordClass) -> Vec<u32> {
        (0..self.words.len() as u32).filter(|&i| self.classes[i as usize] == class).collect()
    }

    /// Splits on whitespace; unknown words map to a stable hashed id.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or_else(|| (fnv1a64(w.as_bytes()) % self.words.len() as u64) as u32))
            .collect()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocab_fits_64() {
        let v = Vocabulary::standard(64);
        assert_eq!(v.len(), 64);
        assert_eq!(v.class_of("red"), Some(WordClass::Color));
        assert_eq!(v.class_of("five"), Some(WordClass::Key));
        assert_eq!(v.class_of_id(63), WordClass::Unused);
        assert_eq!(v.word(v.id("apple").unwrap()), "apple");
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
