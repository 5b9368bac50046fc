use super::lexicon::{Lexicon, Token, TokenSeq, ACT, EOS};
use super::prompt;
use super::task::TaskSpec;
use super::world::{Action, WorldState};
use super::WorldError;

/// What the agent sees each step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub prompt: TokenSeq,
    pub admissible: Vec<TokenSeq>,
}

impl Observation {
    pub fn is_admissible(&self, action: &[Token]) -> bool {
        self.admissible.iter().any(|a| a.as_slice() == action)
    }
}

/// Result of one [`QuestEnv::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub success: bool,
    pub done: bool,
    /// The action was not admissible and the world did not change.
    pub invalid: bool,
}

/// One episode of the text world.
#[derive(Debug, Clone)]
pub struct QuestEnv {
    task: TaskSpec,
    state: WorldState,
    success: bool,
    done: bool,
    invalid_steps: u32,
}

impl QuestEnv {
    /// Deterministic initial state for `(task, seed)`.
    pub fn reset(task: &TaskSpec, seed: u64) -> Self {
        Self::from_state(task, WorldState::generate(task.layout(), seed))
    }

    pub fn from_state(task: &TaskSpec, state: WorldState) -> Self {
        let success = task.goal().satisfied(&state);
        Self {
            task: *task,
            done: success || state.step_count >= task.layout().max_steps,
            state,
            success,
            invalid_steps: 0,
        }
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn success(&self) -> bool {
        self.success
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn invalid_steps(&self) -> u32 {
        self.invalid_steps
    }

    pub fn admissible_actions(&self) -> Vec<Action> {
        self.state.admissible()
    }

    pub fn observation(&self) -> Observation {
        let lex = Lexicon::standard();
        let actions = self.state.admissible();
        Observation {
            prompt: prompt::render(&self.state, self.task.goal(), &actions),
            admissible: actions.iter().map(|a| a.tokens(lex)).collect(),
        }
    }

    /// Executes action tokens. Inadmissible or unparseable actions leave the
    /// world unchanged but still consume a step.
    pub fn step(&mut self, action: &[Token]) -> Result<StepOutcome, WorldError> {
        if self.done {
            return Err(WorldError::EpisodeDone);
        }
        let lex = Lexicon::standard();
        let next = Action::parse(lex, action).and_then(|a| self.state.apply(&a));
        let invalid = next.is_none();
        if let Some(next) = next {
            self.state = next;
        } else {
            self.invalid_steps += 1;
        }
        self.state.step_count += 1;
        if !invalid && self.task.goal().satisfied(&self.state) {
            self.success = true;
        }
        self.done = self.success || self.state.step_count >= self.task.layout().max_steps;
        Ok(StepOutcome {
            observation: self.observation(),
            success: self.success,
            done: self.done,
            invalid,
        })
    }
}

/// `thought ACT action EOS`.
pub fn compose_response(thought: &[Token], action: &[Token]) -> TokenSeq {
    let mut out = Vec::with_capacity(thought.len() + action.len() + 2);
    out.extend_from_slice(thought);
    out.push(ACT);
    out.extend_from_slice(action);
    out.push(EOS);
    out
}

/// Splits a response at its first ACT marker into thought and action, with a
/// trailing EOS (and anything after it) dropped from the action.
pub fn split_response(response: &[Token]) -> Option<(&[Token], &[Token])> {
    let act = response.iter().position(|&t| t == ACT)?;
    let rest = &response[act + 1..];
    let end = rest.iter().position(|&t| t == EOS).unwrap_or(rest.len());
    Some((&response[..act], &rest[..end]))
}
