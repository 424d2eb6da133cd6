//! The MPE engine: a router that decides whether a retrieved edit applies to a
//! prompt, an editor that rewrites the outdated span, and the retrieve, route,
//! rewrite loop over the edit memory.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::chat::{ChatAnswer, ChatRouter};
use crate::dataset::FactEdit;
use crate::embedding::EditMemory;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ImageRef};
use crate::text::{find_folded, nfc};

/// Outcome of routing one prompt against one edit.
///
/// Spans are byte ranges into the NFC form of the routed prompt. The chat
/// backend answers with the rewritten prompt rather than a span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum RouterVerdict {
    NotActivating,
    Span { start: usize, end: usize },
    Rewritten { output: String },
}

impl RouterVerdict {
    pub fn is_activating(&self) -> bool {
        !matches!(self, RouterVerdict::NotActivating)
    }

    pub fn span(&self) -> Option<Range<usize>> {
        match self {
            RouterVerdict::Span { start, end } => Some(*start..*end),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditStep {
    pub edit_id: String,
    pub verdict: RouterVerdict,
    pub rewritten: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditTrace {
    pub original_prompt: String,
    pub steps: Vec<EditStep>,
    pub final_prompt: String,
}

impl EditTrace {
    /// Re-applies every activating step to the original prompt.
    pub fn replay(&self, editor: &PromptEditor, memory: &EditMemory) -> Result<String> {
        let mut current = self.original_prompt.clone();
        for step in self.steps.iter().filter(|s| s.verdict.is_activating()) {
            let edit = memory
                .get(&step.edit_id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown edit {}", step.edit_id)))?;
            current = editor.edit_prompt(&current, edit, &step.verdict)?;
        }
        Ok(current)
    }
}

pub enum EditorBackend {
    RuleBased,
    Chat(ChatRouter),
}

impl std::fmt::Debug for EditorBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EditorBackend::RuleBased => f.write_str("RuleBased"),
            EditorBackend::Chat(_) => f.write_str("Chat"),
        }
    }
}

#[derive(Debug)]
pub struct PromptEditor {
    backend: EditorBackend,
}

impl Default for PromptEditor {
    fn default() -> Self {
        PromptEditor::rule_based()
    }
}

/// Earliest match of the edit prompt or any paraphrase; longest wins at equal start.
fn rule_span(prompt: &str, edit: &FactEdit) -> Option<Range<usize>> {
    std::iter::once(&edit.edit_prompt)
        .chain(edit.paraphrases.iter())
        .filter_map(|form| find_folded(prompt, &nfc(form)))
        .min_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)))
}

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

impl PromptEditor {
    pub fn new(backend: EditorBackend) -> Self {
        PromptEditor { backend }
    }

    pub fn rule_based() -> Self {
        PromptEditor::new(EditorBackend::RuleBased)
    }

    pub fn backend(&self) -> &EditorBackend {
        &self.backend
    }

    pub fn route(&self, prompt: &str, edit: &FactEdit) -> Result<RouterVerdict> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidInput("prompt is empty".into()));
        }
        match &self.backend {
            EditorBackend::RuleBased => Ok(match rule_span(&nfc(prompt), edit) {
                Some(r) => RouterVerdict::Span {
                    start: r.start,
                    end: r.end,
                },
                None => RouterVerdict::NotActivating,
            }),
            EditorBackend::Chat(router) => Ok(match router.ask(prompt, edit)? {
                ChatAnswer::No => RouterVerdict::NotActivating,
                ChatAnswer::Yes { output } => RouterVerdict::Rewritten { output },
            }),
        }
    }

    pub fn edit_prompt(&self, prompt: &str, edit: &FactEdit, verdict: &RouterVerdict) -> Result<String> {
        match verdict {
            RouterVerdict::NotActivating => Err(Error::NotActivating),
            RouterVerdict::Rewritten { output } => Ok(output.clone()),
            RouterVerdict::Span { start, end } => {
                let prompt = nfc(prompt);
                let (start, end) = (*start, *end);
                if start > end || end > prompt.len() || !prompt.is_char_boundary(start) || !prompt.is_char_boundary(end)
                {
                    return Err(Error::InvalidInput(format!(
                        "span {start}..{end} does not fit prompt of {} bytes",
                        prompt.len()
                    )));
                }
                let opens_sentence = prompt[..start].trim().is_empty()
                    && prompt[start..end].chars().next().is_some_and(char::is_uppercase);
                let target = nfc(edit.target_prompt.trim());
                let replacement = if opens_sentence {
                    capitalize_first(&target)
                } else {
                    target
                };
                Ok(format!("{}{replacement}{}", &prompt[..start], &prompt[end..]))
            }
        }
    }

    /// Retrieve, route, rewrite until the working copy of the memory is empty
    /// or the router declines. The first non-activating verdict ends the run,
    /// so less similar edits are never consulted after it. The current prompt
    /// is re-embedded on every iteration.
    pub fn run(&self, memory: &EditMemory, prompt: &str) -> Result<(String, EditTrace)> {
        let mut remaining: Vec<usize> = (0..memory.len()).collect();
        let mut current = prompt.to_string();
        let mut steps = Vec::new();
        while !remaining.is_empty() {
            let query = memory.embed(&current)?;
            let idx = memory
                .best_among(&query, remaining.iter().copied())
                .ok_or(Error::EmptyMemory)?;
            remaining.retain(|&i| i != idx);
            let edit = &memory.edits()[idx];
            let verdict = self.route(&current, edit)?;
            if !verdict.is_activating() {
                steps.push(EditStep {
                    edit_id: edit.id.clone(),
                    verdict,
                    rewritten: None,
                });
                break;
            }
            let next = self.edit_prompt(&current, edit, &verdict)?;
            log::debug!("{} rewrote {current:?} -> {next:?}", edit.id);
            steps.push(EditStep {
                edit_id: edit.id.clone(),
                verdict,
                rewritten: Some(next.clone()),
            });
            current = next;
        }
        let trace = EditTrace {
            original_prompt: prompt.to_string(),
            steps,
            final_prompt: current.clone(),
        };
        Ok((current, trace))
    }
}

/// Generates from the MPE-rewritten prompt. The generator only ever sees a prompt.
pub fn edited_generate(
    gateway: &dyn Gateway,
    editor: &PromptEditor,
    memory: &EditMemory,
    prompt: &str,
    seed: u64,
) -> Result<ImageRef> {
    let (rewritten, _) = editor.run(memory, prompt)?;
    gateway.generate(&rewritten, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::ChatTransport;
    use crate::embedding::HashEmbedder;
    use crate::gateway::SurrogateGateway;
    use std::sync::{Arc, Mutex};

    fn memory(edits: &[FactEdit]) -> EditMemory {
        let mut m = EditMemory::new(Arc::new(HashEmbedder::default()));
        for e in edits {
            m.insert(e.clone()).unwrap();
        }
        m
    }

    fn rewrite(prompt: &str, edit: &FactEdit) -> String {
        let ed = PromptEditor::rule_based();
        let v = ed.route(prompt, edit).unwrap();
        ed.edit_prompt(prompt, edit, &v).unwrap()
    }

    #[test]
    fn demonstration_one_is_inactive() {
        let e = FactEdit::new("d1", "The chief trainer of Inter Miami", "David Beckham");
        let v = PromptEditor::rule_based()
            .route("The spokesman of United Nations giving a speech", &e)
            .unwrap();
        assert_eq!(v, RouterVerdict::NotActivating);
    }

    #[test]
    fn demonstration_two_rewrites() {
        let p = "The lead singer of Nightwish standing on the stage";
        let e = FactEdit::new("d2", "The lead singer of Nightwish", "Elvis Presley");
        let v = PromptEditor::rule_based().route(p, &e).unwrap();
        assert_eq!(&p[v.span().unwrap()], "The lead singer of Nightwish");
        assert_eq!(rewrite(p, &e), "Elvis Presley standing on the stage");
    }

    #[test]
    fn demonstration_three_is_inactive() {
        let e = FactEdit::new("d3", "The chief scientist at NASA", "Boris Johnson");
        let p = "Kylian Mbappe and Kanye West celebrating Christmas together";
        assert!(!PromptEditor::rule_based().route(p, &e).unwrap().is_activating());
    }

    #[test]
    fn whole_prompt_becomes_target() {
        let e = FactEdit::new("x", "The CEO of Apple", "Tim Cook");
        assert_eq!(rewrite("The CEO of Apple", &e), "Tim Cook");
        let v = PromptEditor::rule_based().route("The CEO of Apple", &e).unwrap();
        assert_eq!(v.span(), Some(0..16));
    }

    #[test]
    fn sequential_edits() {
        let a = FactEdit::new("a", "A", "X");
        let b = FactEdit::new("b", "B", "Y");
        assert_eq!(rewrite(&rewrite("A and B hiking", &a), &b), "X and Y hiking");
    }

    #[test]
    fn matching_ignores_case_and_spacing() {
        let e = FactEdit::new("x", "the president of   France", "someone");
        let p = "A photo of The  President of France at dinner";
        assert_eq!(rewrite(p, &e), "A photo of someone at dinner");
    }

    #[test]
    fn leading_capital_preserved() {
        let e = FactEdit::new("x", "the mayor of Paris", "anne Hidalgo");
        assert_eq!(rewrite("The mayor of Paris smiling", &e), "Anne Hidalgo smiling");
        assert_eq!(rewrite("with the mayor of Paris", &e), "with anne Hidalgo");
    }

    #[test]
    fn paraphrase_activates() {
        let e =
            FactEdit::new("x", "The CEO of Apple", "Tim Cook").with_paraphrases(vec!["Apple's chief executive".into()]);
        assert_eq!(rewrite("apple's chief executive on a bike", &e), "Tim Cook on a bike");
    }

    #[test]
    fn edit_with_inactive_verdict_errors() {
        let e = FactEdit::new("x", "a", "b");
        let err = PromptEditor::rule_based()
            .edit_prompt("c", &e, &RouterVerdict::NotActivating)
            .unwrap_err();
        assert!(matches!(err, Error::NotActivating));
    }

    #[test]
    fn empty_prompt_rejected() {
        let e = FactEdit::new("x", "a", "b");
        assert!(PromptEditor::rule_based().route("  ", &e).is_err());
    }

    #[test]
    fn empty_memory_leaves_prompt() {
        let (out, trace) = PromptEditor::rule_based().run(&memory(&[]), "anything").unwrap();
        assert_eq!(out, "anything");
        assert!(trace.steps.is_empty());
        assert_eq!(trace.final_prompt, "anything");
    }

    #[test]
    fn single_edit_applies_then_stops() {
        let e = FactEdit::new("x", "The CEO of Apple", "Tim Cook");
        let m = memory(&[e]);
        let (out, trace) = PromptEditor::rule_based().run(&m, "The CEO of Apple running").unwrap();
        assert_eq!(out, "Tim Cook running");
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn two_edits_both_applied() {
        let e1 = FactEdit::new("e1", "The CEO of Apple", "Tim Cook");
        let e2 = FactEdit::new("e2", "the drummer of Metallica", "Lars Ulrich");
        let m = memory(&[e1, e2]);
        let ed = PromptEditor::rule_based();
        let (out, trace) = ed
            .run(&m, "The CEO of Apple and the drummer of Metallica hiking")
            .unwrap();
        assert_eq!(out, "Tim Cook and Lars Ulrich hiking");
        assert_eq!(trace.steps.len(), 2);
        assert!(trace.steps.iter().all(|s| s.verdict.is_activating()));
        assert_eq!(trace.replay(&ed, &m).unwrap(), out);
    }

    #[test]
    fn first_refusal_returns_verbatim() {
        let e1 = FactEdit::new("e1", "The CEO of Apple", "Tim Cook");
        let e2 = FactEdit::new("e2", "the drummer of Metallica", "Lars Ulrich");
        let m = memory(&[e1, e2]);
        let p = "A quiet lake at dawn";
        let (out, trace) = PromptEditor::rule_based().run(&m, p).unwrap();
        assert_eq!(out, p);
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn edited_generate_matches_plain_generation() {
        let g = SurrogateGateway::default();
        let e = FactEdit::new("x", "The CEO of Apple", "Tim Cook");
        let m = memory(&[e]);
        let ed = PromptEditor::rule_based();
        assert_eq!(
            edited_generate(&g, &ed, &m, "The CEO of Apple", 4).unwrap(),
            g.generate("Tim Cook", 4).unwrap()
        );
        assert_eq!(
            edited_generate(&g, &ed, &memory(&[]), "The CEO of Apple", 4).unwrap(),
            g.generate("The CEO of Apple", 4).unwrap()
        );
        assert_eq!(
            edited_generate(&g, &ed, &m, "A quiet lake", 4).unwrap(),
            g.generate("A quiet lake", 4).unwrap()
        );
    }

    struct Scripted(Mutex<Vec<String>>);

    impl ChatTransport for Scripted {
        fn complete(&self, _prompt: &str) -> Result<String> {
            self.0
                .lock()
                .unwrap()
                .pop()
                .ok_or_else(|| Error::Backend("script exhausted".into()))
        }
    }

    fn chat(replies: &[&str]) -> PromptEditor {
        let script = replies.iter().rev().map(|s| s.to_string()).collect();
        PromptEditor::new(EditorBackend::Chat(ChatRouter::new(Box::new(Scripted(Mutex::new(
            script,
        ))))))
    }

    #[test]
    fn chat_backend_rewrites() {
        let e = FactEdit::new("d2", "The lead singer of Nightwish", "Elvis Presley");
        let m = memory(&[e]);
        let ed = chat(&["Yes.\nOutput: Elvis Presley standing on the stage"]);
        let (out, trace) = ed
            .run(&m, "The lead singer of Nightwish standing on the stage")
            .unwrap();
        assert_eq!(out, "Elvis Presley standing on the stage");
        assert!(matches!(trace.steps[0].verdict, RouterVerdict::Rewritten { .. }));
    }

    #[test]
    fn chat_failures_surface() {
        let e = FactEdit::new("d2", "The lead singer of Nightwish", "Elvis Presley");
        let m = memory(&[e]);
        assert!(matches!(
            chat(&["I am not sure"]).run(&m, "x y").unwrap_err(),
            Error::UnparseableResponse(_)
        ));
        assert!(matches!(chat(&[]).run(&m, "x y").unwrap_err(), Error::Backend(_)));
    }
}
