//! The fixed eight-emotion ontology (Mikels taxonomy) and its polarity split.
//!
//! Every other subsystem routes, filters, and reports through these labels, so
//! the index<->name mapping is fixed once here: the four positive emotions
//! occupy indices 0..4 and the four negative ones 4..8, which makes polarity a
//! single comparison.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of emotion categories in the taxonomy.
pub const EMOTION_COUNT: usize = 8;

/// One of the eight Mikels emotion categories.
///
/// Canonical index ordering is the positive block followed by the negative
/// block: amusement, awe, contentment, excitement, anger, disgust, fear,
/// sadness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Amusement,
    Awe,
    Contentment,
    Excitement,
    Anger,
    Disgust,
    Fear,
    Sadness,
}

/// Positive/negative split of the taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl EmotionLabel {
    /// All eight labels in canonical index order.
    pub const ALL: [EmotionLabel; EMOTION_COUNT] = [
        EmotionLabel::Amusement,
        EmotionLabel::Awe,
        EmotionLabel::Contentment,
        EmotionLabel::Excitement,
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Sadness,
    ];

    /// Canonical index in `[0, 8)`.
    pub fn id(self) -> usize {
        self as usize
    }

    /// Canonical lowercase name.
    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Amusement => "amusement",
            EmotionLabel::Awe => "awe",
            EmotionLabel::Contentment => "contentment",
            EmotionLabel::Excitement => "excitement",
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Sadness => "sadness",
        }
    }

    pub fn from_id(id: usize) -> Result<EmotionLabel> {
        EmotionLabel::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::Taxonomy(format!("emotion index {id} out of range 0..8")))
    }

    pub fn from_name(name: &str) -> Result<EmotionLabel> {
        let lower = name.trim().to_ascii_lowercase();
        EmotionLabel::ALL
            .iter()
            .copied()
            .find(|l| l.name() == lower)
            .ok_or_else(|| Error::Taxonomy(format!("unknown emotion label {name:?}")))
    }

    /// Which side of the positive/negative split this emotion belongs to.
    ///
    /// The first four canonical labels are positive, the last four negative.
    pub fn polarity(self) -> Polarity {
        if self.id() < EMOTION_COUNT / 2 {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    /// One-hot encoding of this label.
    pub fn one_hot(self) -> OneHotEmotion {
        OneHotEmotion::encode(self)
    }
}

impl std::fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EmotionLabel::from_name(s)
    }
}

impl Polarity {
    pub const ALL: [Polarity; 2] = [Polarity::Positive, Polarity::Negative];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }

    /// The four emotions belonging to this polarity, in canonical order.
    pub fn members(self) -> [EmotionLabel; 4] {
        match self {
            Polarity::Positive => [
                EmotionLabel::Amusement,
                EmotionLabel::Awe,
                EmotionLabel::Contentment,
                EmotionLabel::Excitement,
            ],
            Polarity::Negative => [
                EmotionLabel::Anger,
                EmotionLabel::Disgust,
                EmotionLabel::Fear,
                EmotionLabel::Sadness,
            ],
        }
    }
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Length-8 one-hot vector over the emotion categories.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotEmotion {
    vector: [f64; EMOTION_COUNT],
}

impl OneHotEmotion {
    /// Encode a label: a single 1 at the label's canonical index.
    pub fn encode(label: EmotionLabel) -> OneHotEmotion {
        let mut vector = [0.0; EMOTION_COUNT];
        vector[label.id()] = 1.0;
        OneHotEmotion { vector }
    }

    /// Recover the label from a one-hot vector.
    ///
    /// Rejects vectors that are not exactly one-hot (a single 1, zeros
    /// elsewhere).
    pub fn decode(&self) -> Result<EmotionLabel> {
        let mut hot = None;
        for (i, &v) in self.vector.iter().enumerate() {
            if v == 1.0 {
                if hot.is_some() {
                    return Err(Error::Taxonomy("multiple hot entries in one-hot vector".into()));
                }
                hot = Some(i);
            } else if v != 0.0 {
                return Err(Error::Taxonomy(format!("non-binary entry {v} in one-hot vector")));
            }
        }
        let idx = hot.ok_or_else(|| Error::Taxonomy("no hot entry in one-hot vector".into()))?;
        EmotionLabel::from_id(idx)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eight_unique_labels() {
        let mut names: Vec<&str> = EmotionLabel::ALL.iter().map(|l| l.name()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), EMOTION_COUNT);
        for (i, label) in EmotionLabel::ALL.iter().enumerate() {
            assert_eq!(label.id(), i);
            assert_eq!(EmotionLabel::from_id(i).unwrap(), *label);
        }
    }

    #[test]
    fn one_hot_amusement_first_position() {
        let v = EmotionLabel::Amusement.one_hot();
        assert_eq!(v.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_sadness_last_position() {
        let v = EmotionLabel::Sadness.one_hot();
        assert_eq!(v.as_slice(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn unknown_label_is_taxonomy_error() {
        let err = EmotionLabel::from_name("joy").unwrap_err();
        assert!(matches!(err, Error::Taxonomy(_)));
    }

    #[test]
    fn polarity_split_matches_mikels() {
        use EmotionLabel::*;
        for l in [Amusement, Awe, Contentment, Excitement] {
            assert_eq!(l.polarity(), Polarity::Positive, "{l}");
        }
        for l in [Anger, Disgust, Fear, Sadness] {
            assert_eq!(l.polarity(), Polarity::Negative, "{l}");
        }
    }

    #[test]
    fn polarities_partition_the_taxonomy() {
        let mut seen = Vec::new();
        for p in Polarity::ALL {
            for l in p.members() {
                assert_eq!(l.polarity(), p);
                seen.push(l);
            }
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), EMOTION_COUNT);
    }

    #[test]
    fn serde_uses_lowercase_strings() {
        let s = serde_json::to_string(&EmotionLabel::Fear).unwrap();
        assert_eq!(s, "\"fear\"");
        let back: EmotionLabel = serde_json::from_str("\"awe\"").unwrap();
        assert_eq!(back, EmotionLabel::Awe);
    }

    #[test]
    fn decode_rejects_malformed_vectors() {
        let zero = OneHotEmotion { vector: [0.0; 8] };
        assert!(zero.decode().is_err());
        let mut two = [0.0; 8];
        two[1] = 1.0;
        two[3] = 1.0;
        assert!(OneHotEmotion { vector: two }.decode().is_err());
        let mut frac = [0.0; 8];
        frac[2] = 0.5;
        assert!(OneHotEmotion { vector: frac }.decode().is_err());
    }

    proptest! {
        #[test]
        fn one_hot_round_trip(id in 0usize..8) {
            let label = EmotionLabel::from_id(id).unwrap();
            let encoded = label.one_hot();
            prop_assert_eq!(encoded.decode().unwrap(), label);
            let sum: f64 = encoded.as_slice().iter().sum();
            prop_assert_eq!(sum, 1.0);
        }
    }
}
