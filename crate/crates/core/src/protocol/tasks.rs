use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskSplit};
use crate::error::{Error, Result};

/// One task with labels already mapped to head columns.
#[derive(Clone, Debug)]
pub struct TaskData {
    /// Original class ids, in column order.
    pub classes: Vec<u16>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Tasks in training order. Column `i` of the head is `class_order[i]`.
#[derive(Clone, Debug)]
pub struct TaskSequence {
    pub tasks: Vec<TaskData>,
    pub class_order: Vec<u16>,
}

/// Per-task column layout, useful in reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLayout {
    pub classes: Vec<u16>,
    pub columns: Vec<usize>,
    pub train_windows: usize,
    pub test_windows: usize,
}

impl TaskSequence {
    /// Splits `train`/`test` by `split` and relabels every class to its
    /// column; task `j` datasets carry the cumulative column count.
    pub fn build(train: &Dataset, test: &Dataset, split: &TaskSplit) -> Result<Self> {
        if split.is_empty() {
            return Err(Error::Empty("task split".into()));
        }
        let class_order = split.class_order();
        let slots = train.num_classes().max(test.num_classes());
        let mut map = vec![None; slots];
        for (col, &c) in class_order.iter().enumerate() {
            if c as usize >= slots {
                return Err(Error::Index {
                    what: "scenario class",
                    index: c as usize,
                    len: slots,
                });
            }
            map[c as usize] = Some(col as u16);
        }
        let mut tasks = Vec::with_capacity(split.len());
        let mut seen = 0;
        for classes in &split.tasks {
            seen += classes.len();
            let tr = train.filter_by_classes(classes)?.relabel(&map, seen)?;
            let te = test.filter_by_classes(classes)?.relabel(&map, seen)?;
            tasks.push(TaskData {
                classes: classes.clone(),
                train: tr,
                test: te,
            });
        }
        Ok(TaskSequence { tasks, class_order })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Training windows across all tasks.
    pub fn total_train(&self) -> usize {
        self.tasks.iter().map(|t| t.train.len()).sum()
    }

    /// Head columns once tasks `1..=k` are registered.
    pub fn columns_through(&self, k: usize) -> usize {
        self.tasks[..k].iter().map(|t| t.classes.len()).sum()
    }

    /// Pooled training set of tasks `1..=k`.
    pub fn pooled_train(&self, k: usize) -> Result<Dataset> {
        self.pool(k, |t| &t.train)
    }

    /// Pooled test set of tasks `1..=k` (the union test set).
    pub fn pooled_test(&self, k: usize) -> Result<Dataset> {
        self.pool(k, |t| &t.test)
    }

    fn pool(&self, k: usize, pick: impl Fn(&TaskData) -> &Dataset) -> Result<Dataset> {
        if k == 0 || k > self.len() {
            return Err(Error::Index {
                what: "task",
                index: k,
                len: self.len(),
            });
        }
        let cols = self.columns_through(k);
        let parts: Vec<Dataset> = self.tasks[..k]
            .iter()
            .map(|t| pick(t).clone().with_num_classes(cols))
            .collect::<Result<_>>()?;
        let refs: Vec<&Dataset> = parts.iter().collect();
        Dataset::concat(&refs)
    }

    pub fn layout(&self) -> Vec<TaskLayout> {
        let mut at = 0;
        self.tasks
            .iter()
            .map(|t| {
                let columns = (at..at + t.classes.len()).collect();
                at += t.classes.len();
                TaskLayout {
                    classes: t.classes.clone(),
                    columns,
                    train_windows: t.train.len(),
                    test_windows: t.test.len(),
                }
            })
            .collect()
    }
}
