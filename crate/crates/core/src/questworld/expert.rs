//! Scripted BFS expert.

use std::collections::{HashMap, VecDeque};

use super::env::{Observation, QuestEnv};
use super::lexicon::{Lexicon, TokenSeq};
use super::task::{Goal, TaskSpec};
use super::world::{Action, WorldState};
use super::WorldError;

/// Whether an action can appear on a shortest plan for `goal`. Touching
/// distractors never shortens a plan, so they are pruned unless one is
/// already being carried and must be put down.
fn relevant(action: &Action, goal: &Goal) -> bool {
    let targets = goal.objects();
    match *action {
        Action::Go(_) => true,
        Action::Take(o) => targets.contains(&o),
        Action::Put(o, r) => !targets.contains(&o) || goal.receptacle() == Some(r),
        Action::Clean(o) => matches!(goal, Goal::Clean { object, .. } if *object == o),
        Action::Examine(o) => matches!(goal, Goal::Examine { object } if *object == o),
        Action::Look => false,
    }
}

/// Shortest action sequence reaching `goal` from `start`, ties broken by
/// canonical admissible order. `Some(vec![])` when already satisfied.
pub fn plan(start: &WorldState, goal: &Goal) -> Option<Vec<Action>> {
    let root = WorldState { step_count: 0, ..start.clone() };
    if goal.satisfied(&root) {
        return Some(Vec::new());
    }
    let mut nodes: Vec<(WorldState, usize, Option<Action>)> = vec![(root.clone(), usize::MAX, None)];
    let mut seen: HashMap<WorldState, usize> = HashMap::from([(root, 0)]);
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        let state = nodes[i].0.clone();
        for action in state.admissible().into_iter().filter(|a| relevant(a, goal)) {
            let next = state.apply(&action).expect("admissible action applies");
            if seen.contains_key(&next) {
                continue;
            }
            let idx = nodes.len();
            let done = goal.satisfied(&next);
            seen.insert(next.clone(), idx);
            nodes.push((next, i, Some(action)));
            if done {
                let mut path = Vec::new();
                let mut k = idx;
                while let Some(a) = nodes[k].2 {
                    path.push(a);
                    k = nodes[k].1;
                }
                path.reverse();
                return Some(path);
            }
            queue.push_back(idx);
        }
    }
    None
}

/// Templated reasoning for the first step of `plan`:
/// `need <entity> <entity location> next <action>`.
///
/// The entity is whatever the next non-move action interacts with, so the
/// thought both names the perceived state and commits to the action.
pub fn thought(state: &WorldState, plan: &[Action]) -> TokenSeq {
    let lex = Lexicon::standard();
    let Some(first) = plan.first() else {
        return vec![lex.word("look")];
    };
    let mut s = state.clone();
    let mut interact = None;
    for a in plan {
        if !matches!(a, Action::Go(_)) {
            interact = Some(*a);
            break;
        }
        s = s.apply(a).expect("plan actions are admissible");
    }
    let (entity, place) = match interact {
        Some(Action::Take(o)) => (lex.object(o), s.object_location(o).unwrap_or(s.agent)),
        Some(Action::Put(_, r)) => (lex.receptacle(r), s.receptacles[r]),
        Some(Action::Clean(_)) => (lex.word("sink"), s.sink),
        Some(Action::Examine(_)) => (lex.word("lamp"), s.lamp),
        _ => (lex.word("none"), s.agent),
    };
    let mut out = vec![lex.word("need"), entity, lex.location(place), lex.word("next")];
    out.extend(first.tokens(lex));
    out
}

/// One supervised step of an expert episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertStep {
    pub observation: Observation,
    pub thought: TokenSeq,
    pub action: TokenSeq,
}

impl ExpertStep {
    /// `thought ACT action EOS`.
    pub fn response(&self) -> TokenSeq {
        super::env::compose_response(&self.thought, &self.action)
    }
}

/// Plays the BFS plan from `reset(task, seed)` to completion.
pub fn expert_rollout(task: &TaskSpec, seed: u64) -> Result<Vec<ExpertStep>, WorldError> {
    let lex = Lexicon::standard();
    let mut env = QuestEnv::reset(task, seed);
    let plan = plan(env.state(), task.goal())
        .ok_or_else(|| WorldError::Unsatisfiable(task.template_id()))?;
    let mut steps = Vec::with_capacity(plan.len());
    for i in 0..plan.len() {
        let observation = env.observation();
        let thought = thought(env.state(), &plan[i..]);
        let action = plan[i].tokens(lex);
        env.step(&action)?;
        steps.push(ExpertStep { observation, thought, action });
    }
    debug_assert!(env.success());
    Ok(steps)
}
