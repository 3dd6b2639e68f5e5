use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How distilled images are grouped into synthesis batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    /// One image of every class per batch.
    Original,
    /// Several images of a few classes per batch.
    #[default]
    Reorder,
}

/// Most images of one class placed in a single reorder batch.
pub const MAX_PER_CLASS: usize = 10;

/// Partition of a class-major distilled set into synthesis batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub mode: PlanMode,
    pub classes_per_batch: usize,
    pub per_class: usize,
    /// Image indices of each batch, class-major within a batch.
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    /// Plans batches over `classes × ipc` images stored class-major
    /// (image `y·ipc + j` is the `j`-th image of class `y`).
    ///
    /// Reorder batches hold `min(ipc, 10)` images of each of roughly
    /// `target_batch / per_class` classes.
    pub fn new(mode: PlanMode, classes: usize, ipc: usize, target_batch: usize) -> Result<BatchPlan> {
        if classes == 0 || ipc == 0 || target_batch == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch plan over {classes} classes x {ipc} ipc with target batch {target_batch}"
            )));
        }
        let (per_class, classes_per_batch) = match mode {
            PlanMode::Original => (1, classes.min(target_batch)),
            PlanMode::Reorder => {
                let per_class = ipc.min(MAX_PER_CLASS);
                if per_class < 2 {
                    return Err(Error::InvalidArgument(
                        "reorder batches need at least 2 images per class; use the original plan for ipc 1".into(),
                    ));
                }
                let cpb = ((target_batch as f64 / per_class as f64).round() as usize).clamp(1, classes);
                (per_class, cpb)
            }
        };
        let mut batches = Vec::new();
        for slice in (0..ipc).step_by(per_class) {
            for group in (0..classes).step_by(classes_per_batch) {
                let mut b = Vec::new();
                for y in group..(group + classes_per_batch).min(classes) {
                    b.extend((slice..(slice + per_class).min(ipc)).map(|j| y * ipc + j));
                }
                batches.push(b);
            }
        }
        Ok(BatchPlan {
            mode,
            classes_per_batch,
            per_class,
            batches,
        })
    }
}
