//! Synthetic image-text manipulation dataset.
//!
//! Each [`Sample`] pairs a small grayscale image containing a procedural face
//! with a templated token sequence. Fakes are derived from an original pair by
//! face swap (FS), face attribute edit (FA), text swap (TS), text attribute
//! edit (TA), or one image edit followed by one text edit (mixed). Every fake
//! is linked to its original through `counterpart_id`, and back.

mod io;
mod synth;

pub use io::{read_dataset, write_dataset, DatasetIoError};
pub use synth::{
    crop_face, generate_dataset, manipulate_image, manipulate_text, render_original, CategoryCounts, GeneratorConfig,
    GeneratorError, Strength,
};

use serde::{Deserialize, Serialize};

/// The four manipulation types, in label-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum ManipKind {
    FS,
    FA,
    TS,
    TA,
}

impl ManipKind {
    pub const ALL: [ManipKind; 4] = [ManipKind::FS, ManipKind::FA, ManipKind::TS, ManipKind::TA];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_image(self) -> bool {
        matches!(self, ManipKind::FS | ManipKind::FA)
    }

    pub fn name(self) -> &'static str {
        match self {
            ManipKind::FS => "face swap",
            ManipKind::FA => "face attribute",
            ManipKind::TS => "text swap",
            ManipKind::TA => "text attribute",
        }
    }
}

/// Set of manipulation kinds stored as a 4-bit mask (FS = bit 0 .. TA = bit 3).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ManipSet(u8);

impl ManipSet {
    pub const EMPTY: ManipSet = ManipSet(0);

    pub fn from_bits(bits: u8) -> Self {
        Self(bits & 0b1111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn with(self, k: ManipKind) -> Self {
        Self(self.0 | 1 << k.index())
    }

    pub fn contains(self, k: ManipKind) -> bool {
        self.0 & (1 << k.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = ManipKind> {
        ManipKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }

    pub fn has_image(self) -> bool {
        self.contains(ManipKind::FS) || self.contains(ManipKind::FA)
    }

    pub fn has_text(self) -> bool {
        self.contains(ManipKind::TS) || self.contains(ManipKind::TA)
    }

    /// Multi-hot target in [`ManipKind::ALL`] order.
    pub fn to_multi_hot(self) -> [f64; 4] {
        let mut out = [0.0; 4];
        for k in self.iter() {
            out[k.index()] = 1.0;
        }
        out
    }
}

impl FromIterator<ManipKind> for ManipSet {
    fn from_iter<I: IntoIterator<Item = ManipKind>>(iter: I) -> Self {
        iter.into_iter().fold(ManipSet::EMPTY, ManipSet::with)
    }
}

impl Serialize for ManipSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let kinds: Vec<ManipKind> = self.iter().collect();
        kinds.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ManipSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let kinds = Vec::<ManipKind>::deserialize(d)?;
        Ok(kinds.into_iter().collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl FaceBox {
    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

/// Whether a sample belongs to the train/eval stream or only exists as the
/// original of a fake (needed for contrastive counterparts).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Primary,
    Source,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub role: Role,
    pub width: usize,
    pub height: usize,
    /// Row-major grayscale pixels in [0, 1].
    pub image: Vec<f64>,
    /// Token ids padded with [`Vocab::PAD`] to the dataset's maximum length.
    pub tokens: Vec<u32>,
    pub face_box: FaceBox,
    /// 1 = fake.
    pub label_binary: u8,
    pub label_multi: ManipSet,
    pub grounding_mask: Vec<u8>,
    pub counterpart_id: Option<String>,
}

impl Sample {
    pub fn is_fake(&self) -> bool {
        self.label_binary == 1
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t != Vocab::PAD).collect()
    }

    pub fn valid_len(&self) -> usize {
        self.tokens.iter().filter(|&&t| t != Vocab::PAD).count()
    }

    /// Checks the label-schema invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let fake = self.label_binary == 1;
        if self.label_binary > 1 {
            return Err("label_binary not in {0,1}".into());
        }
        if fake == self.label_multi.is_empty() {
            return Err("fake must coincide with a nonempty manipulation set".into());
        }
        if self.grounding_mask.len() != self.tokens.len() {
            return Err("grounding mask length differs from tokens".into());
        }
        if self.grounding_mask.iter().any(|&m| m > 1) {
            return Err("grounding mask not binary".into());
        }
        let grounded = self.grounding_mask.contains(&1);
        if grounded && !self.label_multi.has_text() {
            return Err("grounding mask set without a text manipulation".into());
        }
        if !fake && grounded {
            return Err("real sample with grounded tokens".into());
        }
        if self
            .grounding_mask
            .iter()
            .zip(&self.tokens)
            .any(|(&m, &t)| m == 1 && t == Vocab::PAD)
        {
            return Err("grounding mask marks padding".into());
        }
        if !self.face_box.fits(self.width, self.height) {
            return Err("face box outside image".into());
        }
        if self.image.len() != self.width * self.height {
            return Err("image size mismatch".into());
        }
        let img = self.label_multi.iter().filter(|k| k.is_image()).count();
        let txt = self.label_multi.len() - img;
        if img > 1 || txt > 1 {
            return Err("at most one image-type and one text-type label".into());
        }
        Ok(())
    }
}

/// Token id layout:
///
/// ```text
/// 0 PAD | 1 CLS | entities | sentiment pairs (pos_k, neg_k) | affiliations | pos contexts | neg contexts | generic fillers
/// ```
///
/// Each entity has one affiliation filler; each sentiment polarity has its own
/// context fillers. A genuine sentence always pairs an entity with its own
/// affiliation and a sentiment word with a context of the same polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Vocab {
    pub entities: usize,
    pub sentiment_pairs: usize,
    pub fillers: usize,
    pub contexts_per_polarity: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            entities: 16,
            sentiment_pairs: 8,
            fillers: 30,
            contexts_per_polarity: 4,
        }
    }
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const CLS: u32 = 1;

    pub fn size(&self) -> usize {
        2 + self.entities + 2 * self.sentiment_pairs + self.fillers
    }

    fn entity_base(&self) -> u32 {
        2
    }

    fn sentiment_base(&self) -> u32 {
        2 + self.entities as u32
    }

    fn filler_base(&self) -> u32 {
        self.sentiment_base() + 2 * self.sentiment_pairs as u32
    }

    pub fn entity(&self, i: usize) -> u32 {
        self.entity_base() + i as u32
    }

    pub fn entity_index(&self, t: u32) -> Option<usize> {
        let b = self.entity_base();
        (t >= b && t < b + self.entities as u32).then(|| (t - b) as usize)
    }

    /// `positive = true` gives `pos_k`.
    pub fn sentiment(&self, k: usize, positive: bool) -> u32 {
        self.sentiment_base() + 2 * k as u32 + u32::from(!positive)
    }

    /// `(pair index, is_positive)` of a sentiment token.
    pub fn sentiment_of(&self, t: u32) -> Option<(usize, bool)> {
        let b = self.sentiment_base();
        (t >= b && t < b + 2 * self.sentiment_pairs as u32).then(|| {
            let o = (t - b) as usize;
            (o / 2, o.is_multiple_of(2))
        })
    }

    /// Opposite-polarity partner of a sentiment token.
    pub fn flip_sentiment(&self, t: u32) -> Option<u32> {
        self.sentiment_of(t).map(|(k, pos)| self.sentiment(k, !pos))
    }

    pub fn affiliation(&self, entity: usize) -> u32 {
        self.filler_base() + entity as u32
    }

    pub fn context(&self, i: usize, positive: bool) -> u32 {
        let base = self.filler_base() + self.entities as u32;
        base + if positive { 0 } else { self.contexts_per_polarity as u32 } + i as u32
    }

    pub fn generic_count(&self) -> usize {
        self.fillers
            .saturating_sub(self.entities + 2 * self.contexts_per_polarity)
    }

    pub fn generic(&self, i: usize) -> u32 {
        self.filler_base() + (self.entities + 2 * self.contexts_per_polarity + i) as u32
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.fillers < self.entities + 2 * self.contexts_per_polarity {
            return Err(format!(
                "{} fillers cannot hold {} affiliations and {} contexts per polarity",
                self.fillers, self.entities, self.contexts_per_polarity
            ));
        }
        if self.sentiment_pairs > 0 && self.contexts_per_polarity == 0 {
            return Err("sentiment words need at least one context filler per polarity".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn primary(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.role == Role::Primary)
    }

    pub fn primary_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].role == Role::Primary)
            .collect()
    }

    pub fn index_by_id(&self) -> std::collections::HashMap<&str, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
