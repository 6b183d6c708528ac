/// Halve-on-plateau learning-rate rule. After `patience` consecutive epochs
/// without a strictly lower validation loss the rate halves; once
/// `max_halvings` halvings have happened, the next plateau halts training
/// instead.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    lr: f64,
    patience: usize,
    max_halvings: usize,
    best: Option<f64>,
    stale_epochs: usize,
    halvings: usize,
    halted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauStep {
    /// Rate for the next epoch.
    pub lr: f64,
    /// Whether this loss was a new best.
    pub improved: bool,
    pub halved: bool,
    pub halt: bool,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, max_halvings: usize) -> Self {
        Self {
            lr,
            patience,
            max_halvings,
            best: None,
            stale_epochs: 0,
            halvings: 0,
            halted: false,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn halvings(&self) -> usize {
        self.halvings
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    /// Feeds one epoch's validation loss. A NaN loss never counts as an
    /// improvement.
    pub fn observe(&mut self, loss: f64) -> PlateauStep {
        let improved = self.best.is_none_or(|b| loss < b);
        let mut halved = false;
        if improved {
            self.best = Some(loss);
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs >= self.patience {
                self.stale_epochs = 0;
                if self.halvings >= self.max_halvings {
                    self.halted = true;
                } else {
                    self.lr /= 2.0;
                    self.halvings += 1;
                    halved = true;
                }
            }
        }
        PlateauStep {
            lr: self.lr,
            improved,
            halved,
            halt: self.halted,
        }
    }
}

/// Replays a whole loss history through a fresh schedule.
pub fn lr_on_plateau(history: &[f64], lr: f64, patience: usize, max_halvings: usize) -> PlateauSchedule {
    let mut s = PlateauSchedule::new(lr, patience, max_halvings);
    for &l in history {
        s.observe(l);
    }
    s
}
