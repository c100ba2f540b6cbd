//! Deterministic prompts from turn statistics.

use serde::{Deserialize, Serialize};

use super::format::{ParticipantPrompt, PromptPair};
use super::record::{ParticipantStats, TurnStats};

pub const FAST_FTO_S: f64 = 0.3;
pub const SLOW_FTO_S: f64 = 0.8;
pub const TALKATIVE_RATIO: f64 = 0.45;
pub const EXPANSIVE_TURN_S: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speed {
    Fast,
    Medium,
    Slow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traits {
    pub speed: Speed,
    pub talkative: bool,
    pub expansive: bool,
}

pub fn traits(stats: &ParticipantStats) -> Traits {
    let speed = match stats.mean_fto_s {
        Some(f) if f < FAST_FTO_S => Speed::Fast,
        Some(f) if f > SLOW_FTO_S => Speed::Slow,
        _ => Speed::Medium,
    };
    Traits {
        speed,
        talkative: stats.speech_ratio >= TALKATIVE_RATIO,
        expansive: stats.mean_turn_s >= EXPANSIVE_TURN_S,
    }
}

fn impression(t: Traits) -> String {
    let speed = match t.speed {
        Speed::Fast => "Jumps in quickly once the partner stops, leaving almost no gap",
        Speed::Medium => "Comes in after a short, ordinary gap",
        Speed::Slow => "Lets a noticeable silence pass before starting to talk",
    };
    let amount = if t.talkative {
        "holds the floor for much of the conversation"
    } else {
        "leaves most of the talking to the partner"
    };
    let length = if t.expansive {
        "says a lot in each turn"
    } else {
        "keeps each turn brief"
    };
    format!("{speed}; {amount} and {length}.")
}

fn instruction(t: Traits) -> String {
    let speed = match t.speed {
        Speed::Fast => {
            "Answer right away as soon as your partner stops talking, keeping a brisk rhythm."
        }
        Speed::Medium => "Reply after a natural short gap, neither rushing nor hesitating.",
        Speed::Slow => "Wait a moment before you reply and keep an unhurried, even pace.",
    };
    let amount = if t.talkative {
        "Speak often and steer the conversation."
    } else {
        "Let your partner do most of the talking."
    };
    let length = if t.expansive {
        "Cover plenty of ground each time you speak."
    } else {
        "Keep each contribution short."
    };
    format!("{speed} {amount} {length}")
}

pub fn template_prompt(stats: &ParticipantStats) -> ParticipantPrompt {
    prompt_for_traits(traits(stats))
}

pub fn prompt_for_traits(t: Traits) -> ParticipantPrompt {
    ParticipantPrompt {
        impression: impression(t),
        prompt: instruction(t),
    }
}

pub fn template_prompts(stats: &TurnStats) -> PromptPair {
    PromptPair {
        a: template_prompt(&stats.participants[0]),
        b: template_prompt(&stats.participants[1]),
    }
}
