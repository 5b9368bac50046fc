use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{Lexicon, Token, TokenSeq, MAX_LOCATIONS, MAX_OBJECTS, MAX_RECEPTACLES};
use super::WorldError;
use crate::seed;

/// Size of a generated world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Layout {
    pub locations: usize,
    pub objects: usize,
    pub receptacles: usize,
    pub max_steps: u32,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            locations: 6,
            objects: 4,
            receptacles: 3,
            max_steps: 50,
        }
    }
}

impl Layout {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |field: &'static str, reason: String| Err(WorldError::Layout { field, reason });
        if !(3..=MAX_LOCATIONS).contains(&self.locations) {
            return bad("locations", format!("{} not in 3..={MAX_LOCATIONS}", self.locations));
        }
        if !(1..=MAX_OBJECTS).contains(&self.objects) {
            return bad("objects", format!("{} not in 1..={MAX_OBJECTS}", self.objects));
        }
        if !(1..=MAX_RECEPTACLES).contains(&self.receptacles) {
            return bad("receptacles", format!("{} not in 1..={MAX_RECEPTACLES}", self.receptacles));
        }
        if self.max_steps == 0 {
            return bad("max_steps", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Where an object currently is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placement {
    At(usize),
    In(usize),
    Carried,
}

/// Full simulator state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WorldState {
    pub locations: usize,
    pub objects: Vec<Placement>,
    /// Receptacle id to location.
    pub receptacles: Vec<usize>,
    pub sink: usize,
    pub lamp: usize,
    pub agent: usize,
    pub cleaned: Vec<bool>,
    pub examined: Vec<bool>,
    pub step_count: u32,
}

/// An environment command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Go(usize),
    Take(usize),
    Put(usize, usize),
    Clean(usize),
    Examine(usize),
    Look,
}

impl Action {
    pub fn tokens(&self, lex: &Lexicon) -> TokenSeq {
        match *self {
            Action::Go(l) => vec![lex.word("go"), lex.location(l)],
            Action::Take(o) => vec![lex.word("take"), lex.object(o)],
            Action::Put(o, r) => vec![lex.word("put"), lex.object(o), lex.receptacle(r)],
            Action::Clean(o) => vec![lex.word("clean"), lex.object(o)],
            Action::Examine(o) => vec![lex.word("examine"), lex.object(o)],
            Action::Look => vec![lex.word("look")],
        }
    }

    /// Parses action tokens; anything that is not exactly one command is `None`.
    pub fn parse(lex: &Lexicon, tokens: &[Token]) -> Option<Action> {
        let (&verb, args) = tokens.split_first()?;
        let verb = lex.text(verb)?;
        match (verb, args) {
            ("go", [l]) => lex.as_location(*l).map(Action::Go),
            ("take", [o]) => lex.as_object(*o).map(Action::Take),
            ("put", [o, r]) => Some(Action::Put(lex.as_object(*o)?, lex.as_receptacle(*r)?)),
            ("clean", [o]) => lex.as_object(*o).map(Action::Clean),
            ("examine", [o]) => lex.as_object(*o).map(Action::Examine),
            ("look", []) => Some(Action::Look),
            _ => None,
        }
    }
}

impl WorldState {
    /// The reference layout generator: every placement is drawn uniformly
    /// from a ChaCha stream keyed by `seed` alone.
    pub fn generate(layout: &Layout, seed: u64) -> WorldState {
        let mut rng = seed::rng(seed);
        let n = layout.locations;
        let receptacles = (0..layout.receptacles).map(|_| rng.random_range(0..n)).collect();
        let sink = rng.random_range(0..n);
        let lamp = rng.random_range(0..n);
        let objects = (0..layout.objects)
            .map(|_| Placement::At(rng.random_range(0..n)))
            .collect();
        let agent = rng.random_range(0..n);
        WorldState {
            locations: n,
            objects,
            receptacles,
            sink,
            lamp,
            agent,
            cleaned: vec![false; layout.objects],
            examined: vec![false; layout.objects],
            step_count: 0,
        }
    }

    pub fn carried(&self) -> Option<usize> {
        self.objects.iter().position(|p| *p == Placement::Carried)
    }

    /// Physical location of an object, `None` while carried.
    pub fn object_location(&self, obj: usize) -> Option<usize> {
        match self.objects[obj] {
            Placement::At(l) => Some(l),
            Placement::In(r) => Some(self.receptacles[r]),
            Placement::Carried => None,
        }
    }

    /// Admissible actions in canonical order: moves, takes, puts, clean,
    /// examine, then `look`.
    pub fn admissible(&self) -> Vec<Action> {
        let mut out: Vec<Action> = (0..self.locations)
            .filter(|&l| l != self.agent)
            .map(Action::Go)
            .collect();
        match self.carried() {
            None => {
                out.extend(
                    (0..self.objects.len())
                        .filter(|&o| self.object_location(o) == Some(self.agent))
                        .map(Action::Take),
                );
            }
            Some(o) => {
                out.extend(
                    (0..self.receptacles.len())
                        .filter(|&r| self.receptacles[r] == self.agent)
                        .map(|r| Action::Put(o, r)),
                );
                if self.sink == self.agent {
                    out.push(Action::Clean(o));
                }
                if self.lamp == self.agent {
                    out.push(Action::Examine(o));
                }
            }
        }
        out.push(Action::Look);
        out
    }

    pub fn is_admissible(&self, action: &Action) -> bool {
        self.admissible().contains(action)
    }

    /// Successor state for an admissible action; `None` otherwise. Does not
    /// advance `step_count`.
    pub fn apply(&self, action: &Action) -> Option<WorldState> {
        if !self.is_admissible(action) {
            return None;
        }
        let mut next = self.clone();
        match *action {
            Action::Go(l) => next.agent = l,
            Action::Take(o) => next.objects[o] = Placement::Carried,
            Action::Put(o, r) => next.objects[o] = Placement::In(r),
            Action::Clean(o) => next.cleaned[o] = true,
            Action::Examine(o) => next.examined[o] = true,
            Action::Look => {}
        }
        Some(next)
    }

    /// Canonical fingerprint of everything but the step counter.
    pub fn fingerprint(&self) -> String {
        let mut s = format!("a{}", self.agent);
        for (o, p) in self.objects.iter().enumerate() {
            let place = match p {
                Placement::At(l) => format!("@{l}"),
                Placement::In(r) => format!("#{r}"),
                Placement::Carried => "^".to_string(),
            };
            let _ = write!(
                s,
                "|o{o}{place}{}{}",
                if self.cleaned[o] { "c" } else { "" },
                if self.examined[o] { "x" } else { "" }
            );
        }
        for (r, l) in self.receptacles.iter().enumerate() {
            let _ = write!(s, "|r{r}@{l}");
        }
        let _ = write!(s, "|s{}|l{}", self.sink, self.lamp);
        s
    }

    /// Structural invariants.
    pub fn check(&self, layout: &Layout) -> bool {
        self.agent < self.locations
            && self.objects.iter().filter(|p| **p == Placement::Carried).count() <= 1
            && self.step_count <= layout.max_steps
            && self.receptacles.iter().all(|&l| l < self.locations)
            && self.objects.iter().all(|p| match p {
                Placement::At(l) => *l < self.locations,
                Placement::In(r) => *r < self.receptacles.len(),
                Placement::Carried => true,
            })
    }
}
