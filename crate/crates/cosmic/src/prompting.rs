//! Instruction templates and N-shot prompt plans.
//!
//! A plan is an ordered list of text/audio segments realized later into one
//! embedding sequence. Two orderings are supported: `PaperLiteral` places
//! the query audio first, then all shot audios, the instruction, and all
//! shot responses; `Interleaved` (the default) keeps each shot's audio,
//! instruction, and response adjacent, then appends the query. Both end
//! with the query-response slot, the only segment the training loss covers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ASR_INSTRUCTION: &str = "Transcribe the audio to text.";

/// Task-specific instruction rendering.
#[derive(Debug, Clone, PartialEq)]
pub enum InstructionTask {
    Asr,
    Sqa { question: String },
    S2tt { language: String },
    AsrBias { words: Vec<String> },
    AsrContext { context: String },
}

pub fn render_instruction(task: &InstructionTask) -> Result<String> {
    match task {
        InstructionTask::Asr => Ok(ASR_INSTRUCTION.to_string()),
        InstructionTask::Sqa { question } => {
            if question.trim().is_empty() {
                return Err(Error::Template("SQA instruction needs a question".into()));
            }
            Ok(question.clone())
        }
        InstructionTask::S2tt { language } => {
            if language.trim().is_empty() {
                return Err(Error::Template("S2TT instruction needs a target language".into()));
            }
            Ok(format!("Translate the audio into the {language}."))
        }
        InstructionTask::AsrBias { words } => {
            if words.is_empty() {
                return Err(Error::Template("biasing instruction needs a word list".into()));
            }
            Ok(format!(
                "Transcribe the audio to text. As context, the speaker in the audio mentions {}.",
                render_word_list(words)
            ))
        }
        InstructionTask::AsrContext { context } => {
            if context.trim().is_empty() {
                return Err(Error::Template("context instruction needs a context sentence".into()));
            }
            Ok(format!(
                "Transcribe the audio to text. As context, the speaker talks about {context}."
            ))
        }
    }
}

/// Comma-and-"and" list: 1 word plain, 2 joined by "and", 3+ with a serial
/// comma before the final "and".
fn render_word_list(words: &[String]) -> String {
    match words.len() {
        1 => words[0].clone(),
        2 => format!("{} and {}", words[0], words[1]),
        _ => {
            let head = words[..words.len() - 1].join(", ");
            format!("{}, and {}", head, words[words.len() - 1])
        }
    }
}

// ---- prompt plans ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    AudioRef,
    InstructionText,
    ShotResponseText,
    QueryResponseText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSegment {
    pub kind: SegmentKind,
    /// Utterance id for `AudioRef`, text otherwise. Empty for an open
    /// query-response slot at inference time.
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclExample {
    /// Utterance id of the shot audio.
    pub audio: String,
    pub response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderMode {
    PaperLiteral,
    Interleaved,
}

impl std::str::FromStr for OrderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper-literal" | "paperliteral" | "paper" => Ok(OrderMode::PaperLiteral),
            "interleaved" => Ok(OrderMode::Interleaved),
            other => Err(Error::config(format!("unknown order mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub segments: Vec<PromptSegment>,
    pub order_mode: OrderMode,
    /// Per-segment flag; true only on the query-response slot.
    pub loss_mask: Vec<bool>,
    pub shots: usize,
}

impl PromptPlan {
    pub fn query_response(&self) -> Option<&PromptSegment> {
        self.segments
            .iter()
            .find(|s| s.kind == SegmentKind::QueryResponseText)
    }

    /// Structural invariants: one distinct instruction payload, one query
    /// audio, shot audio/response counts equal N, mask only on the slot.
    pub fn validate(&self) -> Result<()> {
        let instructions: std::collections::HashSet<&str> = self
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::InstructionText)
            .map(|s| s.payload.as_str())
            .collect();
        if instructions.len() != 1 {
            return Err(Error::Contract(format!(
                "plan must carry exactly one distinct instruction, found {}",
                instructions.len()
            )));
        }
        let audio = self
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::AudioRef)
            .count();
        let responses = self
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::ShotResponseText)
            .count();
        if audio != self.shots + 1 || responses != self.shots {
            return Err(Error::Contract(format!(
                "plan with N={} has {audio} audio and {responses} shot-response segments",
                self.shots
            )));
        }
        if self.loss_mask.len() != self.segments.len() {
            return Err(Error::Contract("loss mask length mismatch".into()));
        }
        for (seg, &m) in self.segments.iter().zip(&self.loss_mask) {
            if m != (seg.kind == SegmentKind::QueryResponseText) {
                return Err(Error::Contract("loss mask must cover exactly the response slot".into()));
            }
        }
        Ok(())
    }

    /// Sorted multiset of segment contents with repeated identical
    /// instruction copies collapsed (interleaved order re-states the same
    /// instruction per shot; content-wise the two orders are equal).
    pub fn content_multiset(&self) -> Vec<(SegmentKind, String)> {
        let mut out = Vec::new();
        let mut seen_instruction = false;
        for s in &self.segments {
            if s.kind == SegmentKind::InstructionText {
                if seen_instruction {
                    continue;
                }
                seen_instruction = true;
            }
            out.push((s.kind, s.payload.clone()));
        }
        out.sort_by(|a, b| format!("{:?}{}", a.0, a.1).cmp(&format!("{:?}{}", b.0, b.1)));
        out
    }
}

/// Build the ordered segment list for a query with N in-context shots.
pub fn assemble_prompt(
    query_audio: &str,
    instruction: &str,
    shots: &[IclExample],
    order_mode: OrderMode,
    max_shots: usize,
) -> Result<PromptPlan> {
    if shots.len() > max_shots {
        return Err(Error::ContextOverflow {
            needed: shots.len(),
            limit: max_shots,
        });
    }
    for s in shots {
        if s.response.trim().is_empty() {
            return Err(Error::Contract(format!(
                "shot `{}` has an empty response",
                s.audio
            )));
        }
    }
    let audio_seg = |id: &str| PromptSegment {
        kind: SegmentKind::AudioRef,
        payload: id.to_string(),
    };
    let inst_seg = PromptSegment {
        kind: SegmentKind::InstructionText,
        payload: instruction.to_string(),
    };
    let mut segments = Vec::new();
    match order_mode {
        OrderMode::PaperLiteral => {
            segments.push(audio_seg(query_audio));
            for s in shots {
                segments.push(audio_seg(&s.audio));
            }
            segments.push(inst_seg.clone());
            for s in shots {
                segments.push(PromptSegment {
                    kind: SegmentKind::ShotResponseText,
                    payload: s.response.clone(),
                });
            }
        }
        OrderMode::Interleaved => {
            for s in shots {
                segments.push(audio_seg(&s.audio));
                segments.push(inst_seg.clone());
                segments.push(PromptSegment {
                    kind: SegmentKind::ShotResponseText,
                    payload: s.response.clone(),
                });
            }
            segments.push(audio_seg(query_audio));
            segments.push(inst_seg.clone());
        }
    }
    segments.push(PromptSegment {
        kind: SegmentKind::QueryResponseText,
        payload: String::new(),
    });
    let loss_mask = segments
        .iter()
        .map(|s| s.kind == SegmentKind::QueryResponseText)
        .collect();
    let plan = PromptPlan {
        segments,
        order_mode,
        loss_mask,
        shots: shots.len(),
    };
    plan.validate()?;
    Ok(plan)
}

/// Fill the query-response slot with the training target.
pub fn with_response(mut plan: PromptPlan, response: &str) -> PromptPlan {
    for s in plan.segments.iter_mut() {
        if s.kind == SegmentKind::QueryResponseText {
            s.payload = response.to_string();
        }
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shots(n: usize) -> Vec<IclExample> {
        (0..n)
            .map(|i| IclExample {
                audio: format!("shot-{i}"),
                response: format!("resp {i}"),
            })
            .collect()
    }

    fn kinds(plan: &PromptPlan) -> Vec<SegmentKind> {
        plan.segments.iter().map(|s| s.kind).collect()
    }

    #[test]
    fn zero_shot_both_modes_are_query_instruction_slot() {
        use SegmentKind::*;
        for mode in [OrderMode::PaperLiteral, OrderMode::Interleaved] {
            let plan = assemble_prompt("q", "Transcribe the audio to text.", &[], mode, 4).unwrap();
            assert_eq!(kinds(&plan), vec![AudioRef, InstructionText, QueryResponseText]);
            assert_eq!(plan.segments[0].payload, "q");
        }
    }

    #[test]
    fn one_shot_paper_literal_follows_formula_order() {
        use SegmentKind::*;
        let plan = assemble_prompt("q", "inst", &shots(1), OrderMode::PaperLiteral, 4).unwrap();
        assert_eq!(
            kinds(&plan),
            vec![AudioRef, AudioRef, InstructionText, ShotResponseText, QueryResponseText]
        );
        // query audio first, then the shot audio
        assert_eq!(plan.segments[0].payload, "q");
        assert_eq!(plan.segments[1].payload, "shot-0");
    }

    #[test]
    fn two_shot_interleaved_kind_sequence() {
        use SegmentKind::*;
        let plan = assemble_prompt("q", "inst", &shots(2), OrderMode::Interleaved, 4).unwrap();
        assert_eq!(
            kinds(&plan),
            vec![
                AudioRef,
                InstructionText,
                ShotResponseText,
                AudioRef,
                InstructionText,
                ShotResponseText,
                AudioRef,
                InstructionText,
                QueryResponseText
            ]
        );
    }

    #[test]
    fn modes_share_content_multiset() {
        for n in 0..=2 {
            let a = assemble_prompt("q", "inst", &shots(n), OrderMode::PaperLiteral, 4).unwrap();
            let b = assemble_prompt("q", "inst", &shots(n), OrderMode::Interleaved, 4).unwrap();
            assert_eq!(a.content_multiset(), b.content_multiset(), "N={n}");
        }
    }

    #[test]
    fn assemble_is_pure() {
        let a = assemble_prompt("q", "inst", &shots(2), OrderMode::Interleaved, 4).unwrap();
        let b = assemble_prompt("q", "inst", &shots(2), OrderMode::Interleaved, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_many_shots_is_context_error() {
        assert!(matches!(
            assemble_prompt("q", "inst", &shots(3), OrderMode::Interleaved, 2),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn empty_shot_response_rejected() {
        let bad = vec![IclExample {
            audio: "s".into(),
            response: "  ".into(),
        }];
        assert!(assemble_prompt("q", "inst", &bad, OrderMode::Interleaved, 4).is_err());
    }

    #[test]
    fn loss_mask_only_on_slot() {
        let plan = assemble_prompt("q", "inst", &shots(2), OrderMode::Interleaved, 4).unwrap();
        for (seg, &m) in plan.segments.iter().zip(&plan.loss_mask) {
            assert_eq!(m, seg.kind == SegmentKind::QueryResponseText);
        }
    }

    #[test]
    fn instruction_templates_match_fixtures() {
        assert_eq!(
            render_instruction(&InstructionTask::Asr).unwrap(),
            "Transcribe the audio to text."
        );
        assert_eq!(
            render_instruction(&InstructionTask::S2tt {
                language: "Xlang-1".into()
            })
            .unwrap(),
            "Translate the audio into the Xlang-1."
        );
        assert_eq!(
            render_instruction(&InstructionTask::AsrBias {
                words: vec!["adversity".into()]
            })
            .unwrap(),
            "Transcribe the audio to text. As context, the speaker in the audio mentions adversity."
        );
        assert_eq!(
            render_instruction(&InstructionTask::AsrBias {
                words: vec!["a".into(), "b".into()]
            })
            .unwrap(),
            "Transcribe the audio to text. As context, the speaker in the audio mentions a and b."
        );
        assert_eq!(
            render_instruction(&InstructionTask::AsrBias {
                words: vec!["a".into(), "b".into(), "c".into()]
            })
            .unwrap(),
            "Transcribe the audio to text. As context, the speaker in the audio mentions a, b, and c."
        );
        assert_eq!(
            render_instruction(&InstructionTask::Sqa {
                question: "What did the fox do?".into()
            })
            .unwrap(),
            "What did the fox do?"
        );
        let ctx = render_instruction(&InstructionTask::AsrContext {
            context: "the red fox".into(),
        })
        .unwrap();
        assert_eq!(
            ctx,
            "Transcribe the audio to text. As context, the speaker talks about the red fox."
        );
        assert!(render_instruction(&InstructionTask::AsrBias { words: vec![] }).is_err());
    }
}
