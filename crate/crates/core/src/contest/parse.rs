use serde::{Deserialize, Serialize};

use crate::windowing::Label;

/// Trailing characters of a reply searched for the decision.
pub const DECISION_WINDOW: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Control,
    Treatment,
    Undetermined,
}

impl Decision {
    pub fn label(self) -> Option<Label> {
        match self {
            Decision::Control => Some(Label::Control),
            Decision::Treatment => Some(Label::Treatment),
            Decision::Undetermined => None,
        }
    }
}

/// Byte offset of the last whole-word, case-insensitive occurrence of `word`.
fn last_word(haystack: &str, word: &str) -> Option<usize> {
    let bytes = haystack.as_bytes();
    haystack.rmatch_indices(word).map(|(i, _)| i).find(|&i| {
        let before = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
        let end = i + word.len();
        let after = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        before && after
    })
}

/// Decision stated in the last [`DECISION_WINDOW`] characters of a reply.
/// When both labels appear there, the later one wins.
pub fn parse_final_decision(reply: &str) -> Decision {
    let n = reply.chars().count();
    let tail: String = reply.chars().skip(n.saturating_sub(DECISION_WINDOW)).collect();
    let tail = tail.to_lowercase();
    match (last_word(&tail, "control"), last_word(&tail, "treatment")) {
        (None, None) => Decision::Undetermined,
        (Some(_), None) => Decision::Control,
        (None, Some(_)) => Decision::Treatment,
        (Some(c), Some(t)) => {
            if c > t {
                Decision::Control
            } else {
                Decision::Treatment
            }
        }
    }
}
