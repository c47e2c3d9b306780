use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class-incremental task layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Two tasks: all classes but one, then the held-out class.
    HoldOne = 1,
    /// Two tasks: `floor(N/2)` classes, then the rest.
    Halves = 2,
    /// `floor(N/2)` classes, then one class per task.
    OneByOne = 3,
}

impl Scenario {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Scenario::HoldOne),
            2 => Ok(Scenario::Halves),
            3 => Ok(Scenario::OneByOne),
            _ => Err(Error::Config(format!(
                "scenario must be 1, 2 or 3, got {i}"
            ))),
        }
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    fn min_classes(self) -> usize {
        match self {
            Scenario::OneByOne => 4,
            _ => 2,
        }
    }
}

/// Ordered, pairwise-disjoint class groups, one per task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub tasks: Vec<Vec<u16>>,
}

impl TaskSplit {
    pub fn new(tasks: Vec<Vec<u16>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &tasks {
            if t.is_empty() {
                return Err(Error::contract("empty task class set"));
            }
            for &c in t {
                if !seen.insert(c) {
                    return Err(Error::contract(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(TaskSplit { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes in the order they are introduced.
    pub fn class_order(&self) -> Vec<u16> {
        self.tasks.iter().flatten().copied().collect()
    }
}

/// Builds the task split for `scenario` over `classes`.
///
/// Scenario 1 holds out `classes[variation_seed mod N]`, so sweeping the seed
/// over `0..N` visits every held-out class once. Scenarios 2 and 3 shuffle
/// class membership uniformly with the seed.
pub fn make_scenario(
    classes: &[u16],
    scenario: Scenario,
    variation_seed: u64,
) -> Result<TaskSplit> {
    let n = classes.len();
    if n < scenario.min_classes() {
        return Err(Error::Config(format!(
            "scenario {} needs at least {} classes, got {n}",
            scenario.index(),
            scenario.min_classes()
        )));
    }
    let tasks = match scenario {
        Scenario::HoldOne => {
            let held = (variation_seed % n as u64) as usize;
            let first: Vec<u16> = classes
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != held)
                .map(|(_, &c)| c)
                .collect();
            vec![first, vec![classes[held]]]
        }
        Scenario::Halves | Scenario::OneByOne => {
            let mut order = classes.to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(variation_seed);
            order.shuffle(&mut rng);
            let half = n / 2;
            let mut first = order[..half].to_vec();
            first.sort_unstable();
            if scenario == Scenario::Halves {
                let mut rest = order[half..].to_vec();
                rest.sort_unstable();
                vec![first, rest]
            } else {
                std::iter::once(first)
                    .chain(order[half..].iter().map(|&c| vec![c]))
                    .collect()
            }
        }
    };
    TaskSplit::new(tasks)
}
