use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::expert;
use super::lexicon::{OBJECT_NAMES, RECEPTACLE_NAMES};
use super::world::{Layout, Placement, WorldState};
use super::WorldError;

/// Desk-scale task families.
///
/// `Clean` is a two-stage goal: the object has to be cleaned at the sink
/// before it is placed. `Examine` asks for the object to be examined under
/// the lamp while carried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskCategory {
    Pick,
    Pick2,
    Clean,
    Examine,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 4] = [
        TaskCategory::Pick,
        TaskCategory::Pick2,
        TaskCategory::Clean,
        TaskCategory::Examine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskCategory::Pick => "pick",
            TaskCategory::Pick2 => "pick2",
            TaskCategory::Clean => "clean",
            TaskCategory::Examine => "examine",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Goal predicate parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Goal {
    Pick { object: usize, receptacle: usize },
    Pick2 { first: usize, second: usize, receptacle: usize },
    Clean { object: usize, receptacle: usize },
    Examine { object: usize },
}

impl Goal {
    pub fn category(&self) -> TaskCategory {
        match self {
            Goal::Pick { .. } => TaskCategory::Pick,
            Goal::Pick2 { .. } => TaskCategory::Pick2,
            Goal::Clean { .. } => TaskCategory::Clean,
            Goal::Examine { .. } => TaskCategory::Examine,
        }
    }

    /// Objects the goal mentions, in mention order.
    pub fn objects(&self) -> Vec<usize> {
        match *self {
            Goal::Pick { object, .. } | Goal::Clean { object, .. } | Goal::Examine { object } => {
                vec![object]
            }
            Goal::Pick2 { first, second, .. } => vec![first, second],
        }
    }

    pub fn receptacle(&self) -> Option<usize> {
        match *self {
            Goal::Pick { receptacle, .. }
            | Goal::Pick2 { receptacle, .. }
            | Goal::Clean { receptacle, .. } => Some(receptacle),
            Goal::Examine { .. } => None,
        }
    }

    pub fn satisfied(&self, state: &WorldState) -> bool {
        match *self {
            Goal::Pick { object, receptacle } => state.objects[object] == Placement::In(receptacle),
            Goal::Pick2 { first, second, receptacle } => {
                state.objects[first] == Placement::In(receptacle)
                    && state.objects[second] == Placement::In(receptacle)
            }
            Goal::Clean { object, receptacle } => {
                state.cleaned[object] && state.objects[object] == Placement::In(receptacle)
            }
            Goal::Examine { object } => state.examined[object],
        }
    }
}

/// A validated, satisfiable task over a layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    goal: Goal,
    layout: Layout,
    weight: f64,
}

impl TaskSpec {
    /// Validates indices and checks satisfiability with the expert planner.
    pub fn new(layout: Layout, goal: Goal) -> Result<Self, WorldError> {
        layout.validate()?;
        let objects_ok = goal.objects().iter().all(|&o| o < layout.objects);
        let recept_ok = goal.receptacle().is_none_or(|r| r < layout.receptacles);
        let distinct = !matches!(goal, Goal::Pick2 { first, second, .. } if first == second);
        if !(objects_ok && recept_ok && distinct) {
            return Err(WorldError::Unsatisfiable(format!("{goal:?} over {layout:?}")));
        }
        let probe = WorldState::generate(&layout, 0);
        if expert::plan(&probe, &goal).is_none() {
            return Err(WorldError::Unsatisfiable(format!("{goal:?}: no plan")));
        }
        Ok(Self { goal, layout, weight: 1.0 })
    }

    pub fn pick(layout: Layout, object: usize, receptacle: usize) -> Result<Self, WorldError> {
        Self::new(layout, Goal::Pick { object, receptacle })
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn goal(&self) -> &Goal {
        &self.goal
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn category(&self) -> TaskCategory {
        self.goal.category()
    }

    /// Sampling weight of this task's category.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Template id, e.g. `pick:mug:cabinet`.
    pub fn template_id(&self) -> String {
        let mut parts = vec![self.category().name()];
        parts.extend(self.goal.objects().into_iter().map(|o| OBJECT_NAMES[o]));
        if let Some(r) = self.goal.receptacle() {
            parts.push(RECEPTACLE_NAMES[r]);
        }
        parts.join(":")
    }
}

/// Category sampling frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryWeights {
    pub pick: f64,
    pub pick2: f64,
    pub clean: f64,
    pub examine: f64,
}

impl Default for CategoryWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl CategoryWeights {
    pub fn uniform() -> Self {
        Self { pick: 0.25, pick2: 0.25, clean: 0.25, examine: 0.25 }
    }

    pub fn only(category: TaskCategory) -> Self {
        let mut w = [0.0; 4];
        w[category.index()] = 1.0;
        Self::from_array(w)
    }

    pub fn from_array(w: [f64; 4]) -> Self {
        Self { pick: w[0], pick2: w[1], clean: w[2], examine: w[3] }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.pick, self.pick2, self.clean, self.examine]
    }

    pub fn get(&self, category: TaskCategory) -> f64 {
        self.as_array()[category.index()]
    }

    /// Categories with positive weight, in canonical order.
    pub fn active(&self) -> Vec<TaskCategory> {
        TaskCategory::ALL.into_iter().filter(|c| self.get(*c) > 0.0).collect()
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let w = self.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(WorldError::Weights(format!("negative or non-finite weight in {w:?}")));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(WorldError::Weights(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Draws tasks with configured category frequencies and uniform goal
/// arguments.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    layout: Layout,
    weights: CategoryWeights,
}

impl TaskSampler {
    pub fn new(layout: Layout, weights: CategoryWeights) -> Result<Self, WorldError> {
        layout.validate()?;
        weights.validate()?;
        if weights.pick2 > 0.0 && layout.objects < 2 {
            return Err(WorldError::Unsatisfiable("pick2 needs at least two objects".into()));
        }
        Ok(Self { layout, weights })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn weights(&self) -> &CategoryWeights {
        &self.weights
    }

    pub fn sample_category<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskCategory {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let active = self.weights.active();
        for &c in &active {
            acc += self.weights.get(c);
            if u < acc {
                return c;
            }
        }
        *active.last().expect("validated weights have an active category")
    }

    pub fn sample_for<R: Rng + ?Sized>(&self, category: TaskCategory, rng: &mut R) -> TaskSpec {
        let l = &self.layout;
        let receptacle = rng.random_range(0..l.receptacles);
        let goal = match category {
            TaskCategory::Pick => Goal::Pick { object: rng.random_range(0..l.objects), receptacle },
            TaskCategory::Pick2 => {
                let pair = sample(rng, l.objects, 2);
                Goal::Pick2 { first: pair.index(0), second: pair.index(1), receptacle }
            }
            TaskCategory::Clean => Goal::Clean { object: rng.random_range(0..l.objects), receptacle },
            TaskCategory::Examine => Goal::Examine { object: rng.random_range(0..l.objects) },
        };
        TaskSpec::new(*l, goal)
            .expect("sampled goals are in range and always satisfiable")
            .with_weight(self.weights.get(category))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskSpec {
        let c = self.sample_category(rng);
        self.sample_for(c, rng)
    }
}
