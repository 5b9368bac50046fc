//! Observation serialization.
//!
//! ```text
//! <bos> adm A1 sep A2 ... sep An scene <other entities> task <category> <args>
//!       <goal entities> hold <object|none> at <loc>
//! ```
//!
//! Goal-relevant entities are listed last so that the most recent tokens carry
//! what a fixed-window policy needs to act.

use super::lexicon::{Lexicon, Token, TokenSeq, BOS};
use super::task::{Goal, TaskCategory};
use super::world::{Action, Placement, WorldState};

/// Upper bound on serialized prompt length.
pub const PROMPT_WINDOW: usize = 128;

fn category_token(lex: &Lexicon, c: TaskCategory) -> Token {
    lex.word(c.name())
}

fn object_place(lex: &Lexicon, state: &WorldState, o: usize) -> Token {
    match state.objects[o] {
        Placement::At(l) => lex.location(l),
        Placement::In(r) => lex.receptacle(r),
        Placement::Carried => lex.word("hold"),
    }
}

pub fn render(state: &WorldState, goal: &Goal, admissible: &[Action]) -> TokenSeq {
    let lex = Lexicon::standard();
    let mut out = vec![BOS, lex.word("adm")];
    for (i, a) in admissible.iter().enumerate() {
        if i > 0 {
            out.push(lex.word("sep"));
        }
        out.extend(a.tokens(lex));
    }

    let targets = goal.objects();
    let target_rec = goal.receptacle();
    let category = goal.category();
    out.push(lex.word("scene"));
    for o in (0..state.objects.len()).filter(|o| !targets.contains(o)) {
        out.extend([lex.object(o), object_place(lex, state, o)]);
    }
    for r in (0..state.receptacles.len()).filter(|r| Some(*r) != target_rec) {
        out.extend([lex.receptacle(r), lex.location(state.receptacles[r])]);
    }
    if category != TaskCategory::Clean {
        out.extend([lex.word("sink"), lex.location(state.sink)]);
    }
    if category != TaskCategory::Examine {
        out.extend([lex.word("lamp"), lex.location(state.lamp)]);
    }

    out.extend([lex.word("task"), category_token(lex, category)]);
    out.extend(targets.iter().map(|&o| lex.object(o)));
    out.extend(target_rec.map(|r| lex.receptacle(r)));
    for &o in &targets {
        out.extend([lex.object(o), object_place(lex, state, o)]);
        if category == TaskCategory::Clean {
            out.push(lex.word(if state.cleaned[o] { "washed" } else { "dirty" }));
        }
    }
    match category {
        TaskCategory::Clean => out.extend([lex.word("sink"), lex.location(state.sink)]),
        TaskCategory::Examine => out.extend([lex.word("lamp"), lex.location(state.lamp)]),
        _ => {}
    }
    if let Some(r) = target_rec {
        out.extend([lex.receptacle(r), lex.location(state.receptacles[r])]);
    }
    out.extend([
        lex.word("hold"),
        state.carried().map_or(lex.word("none"), |o| lex.object(o)),
        lex.word("at"),
        lex.location(state.agent),
    ]);
    out
}

/// Recovers the admissible action list from a rendered prompt.
pub fn parse_admissible(prompt: &[Token]) -> Vec<TokenSeq> {
    let lex = Lexicon::standard();
    let (adm, sep, scene) = (lex.word("adm"), lex.word("sep"), lex.word("scene"));
    let Some(start) = prompt.iter().position(|&t| t == adm) else {
        return Vec::new();
    };
    let body = &prompt[start + 1..];
    let end = body.iter().position(|&t| t == scene).unwrap_or(body.len());
    body[..end]
        .split(|&t| t == sep)
        .filter(|s| !s.is_empty())
        .map(<[Token]>::to_vec)
        .collect()
}
