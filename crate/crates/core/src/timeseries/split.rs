use std::ops::Deref;

use serde::{Deserialize, Serialize};

use super::{AlignedPanel, Result, TimeSeriesError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_days: usize,
    pub val_days: usize,
    pub test_days: usize,
}

impl SplitSpec {
    pub const fn new(train_days: usize, val_days: usize, test_days: usize) -> Self {
        Self { train_days, val_days, test_days }
    }

    pub fn total_days(&self) -> usize {
        self.train_days + self.val_days + self.test_days
    }
}

impl Default for SplitSpec {
    /// Five training, two validation and two test days.
    fn default() -> Self {
        Self::new(5, 2, 2)
    }
}

macro_rules! split_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(AlignedPanel);

        impl $name {
            pub fn panel(&self) -> &AlignedPanel {
                &self.0
            }

            pub fn into_panel(self) -> AlignedPanel {
                self.0
            }
        }

        impl Deref for $name {
            type Target = AlignedPanel;

            fn deref(&self) -> &AlignedPanel {
                &self.0
            }
        }
    };
}

split_newtype!(
    /// The only split statistics may be fitted on.
    TrainSplit
);
split_newtype!(ValSplit);
split_newtype!(TestSplit);

impl TrainSplit {
    /// Marks an arbitrary panel as training data (tests, ad-hoc graphs).
    pub fn assume(panel: AlignedPanel) -> Self {
        Self(panel)
    }
}

impl ValSplit {
    pub fn assume(panel: AlignedPanel) -> Self {
        Self(panel)
    }
}

impl TestSplit {
    pub fn assume(panel: AlignedPanel) -> Self {
        Self(panel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: TrainSplit,
    pub val: ValSplit,
    pub test: TestSplit,
    /// Trailing samples past the last test day, not assigned to any split.
    pub unused_steps: usize,
}

/// Chronological, contiguous train/val/test partition at whole-day
/// boundaries counted from the panel origin.
pub fn split_by_days(panel: &AlignedPanel, spec: SplitSpec) -> Result<Splits> {
    if spec.train_days == 0 || spec.val_days == 0 || spec.test_days == 0 {
        return Err(TimeSeriesError::InvalidSplit(spec));
    }
    let per_day = panel.samples_per_day();
    let have = panel.n_steps() / per_day;
    if have < spec.total_days() {
        return Err(TimeSeriesError::SpanTooShort { have, need: spec.total_days() });
    }
    let (tr, va, te) = (spec.train_days * per_day, spec.val_days * per_day, spec.test_days * per_day);
    Ok(Splits {
        train: TrainSplit(panel.slice_steps(0, tr)),
        val: ValSplit(panel.slice_steps(tr, va)),
        test: TestSplit(panel.slice_steps(tr + va, te)),
        unused_steps: panel.n_steps() - tr - va - te,
    })
}
