//! The four-line impression/prompt exchange format.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VapError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantPrompt {
    pub impression: String,
    pub prompt: String,
}

/// Impression and prompt text for both participants; stored as prompts.json.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPair {
    pub a: ParticipantPrompt,
    pub b: ParticipantPrompt,
}

impl PromptPair {
    pub fn get(&self, participant: usize) -> &ParticipantPrompt {
        if participant == 0 {
            &self.a
        } else {
            &self.b
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (who, p) in [("A", &self.a), ("B", &self.b)] {
            if p.impression.trim().is_empty() || p.prompt.trim().is_empty() {
                return Err(VapError::Validation(format!(
                    "participant {who} has empty text"
                )));
            }
        }
        Ok(())
    }

    /// Canonical four-line form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, label) in LABELS.iter().enumerate() {
            out.push_str(&format!("{}: {}\n", label.canonical(), self.field(i)));
        }
        out
    }

    fn field(&self, i: usize) -> &str {
        match i {
            0 => &self.a.impression,
            1 => &self.b.impression,
            2 => &self.a.prompt,
            _ => &self.b.prompt,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Label {
    kind: &'static str,
    joiner: &'static str,
    who: &'static str,
}

impl Label {
    fn canonical(&self) -> String {
        format!("{} {} Person {}", self.kind, self.joiner, self.who)
    }

    /// Payload after the label if `line` starts with it. Either "Person" or
    /// "participant" is accepted, in any letter case, with optional
    /// markdown emphasis around the label.
    fn strip<'a>(&self, line: &'a str) -> Option<&'a str> {
        let line = line.trim_start_matches(['*', '#', '-', ' ']);
        let lower = line.to_ascii_lowercase();
        for noun in ["person", "participant"] {
            let head =
                format!("{} {} {noun} {}", self.kind, self.joiner, self.who).to_ascii_lowercase();
            if let Some(rest) = lower.strip_prefix(&head) {
                let rest_orig = &line[line.len() - rest.len()..];
                let rest_orig = rest_orig.trim_start_matches('*');
                if let Some(payload) = rest_orig.strip_prefix(':') {
                    return Some(payload.trim_start_matches('*').trim());
                }
            }
        }
        None
    }
}

const LABELS: [Label; 4] = [
    Label {
        kind: "Impression",
        joiner: "of",
        who: "A",
    },
    Label {
        kind: "Impression",
        joiner: "of",
        who: "B",
    },
    Label {
        kind: "Prompt",
        joiner: "for",
        who: "A",
    },
    Label {
        kind: "Prompt",
        joiner: "for",
        who: "B",
    },
];

/// Reads the four labeled lines in their fixed order. Blank lines and text
/// before the first label are ignored; other unlabeled lines continue the
/// preceding payload.
pub fn parse_llm_response(text: &str) -> Result<PromptPair> {
    let mut fields: [Option<String>; 4] = Default::default();
    let mut current: Option<usize> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let hit = LABELS
            .iter()
            .enumerate()
            .find_map(|(i, l)| l.strip(trimmed).map(|p| (i, p)));
        match hit {
            Some((i, payload)) => {
                let name = LABELS[i].canonical();
                if fields[i].is_some() {
                    return Err(VapError::Format(format!("duplicated label '{name}'")));
                }
                if let Some(missing) = (0..i).find(|&k| fields[k].is_none()) {
                    return Err(VapError::Format(format!(
                        "label '{name}' appears before '{}'",
                        LABELS[missing].canonical()
                    )));
                }
                fields[i] = Some(payload.to_string());
                current = Some(i);
            }
            None => {
                if let Some(i) = current {
                    let f = fields[i].as_mut().expect("current field set");
                    if !f.is_empty() {
                        f.push(' ');
                    }
                    f.push_str(trimmed);
                }
            }
        }
    }
    let mut out: Vec<String> = Vec::with_capacity(4);
    for (i, f) in fields.into_iter().enumerate() {
        let name = LABELS[i].canonical();
        match f {
            None => return Err(VapError::Format(format!("missing label '{name}'"))),
            Some(s) if s.is_empty() => {
                return Err(VapError::Format(format!("empty text after label '{name}'")))
            }
            Some(s) => out.push(s),
        }
    }
    let mut it = out.into_iter();
    let (ia, ib, pa, pb) = (
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    );
    Ok(PromptPair {
        a: ParticipantPrompt {
            impression: ia,
            prompt: pa,
        },
        b: ParticipantPrompt {
            impression: ib,
            prompt: pb,
        },
    })
}
