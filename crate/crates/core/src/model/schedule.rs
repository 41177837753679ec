use serde::{Deserialize, Serialize};

/// Reduce-on-plateau learning-rate schedule driven by validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub factor: f64,
    pub floor: f64,
    pub patience: usize,
    /// Minimum absolute decrease that counts as improvement.
    pub tolerance: f64,
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::new(1e-3, 1e-7, 5)
    }
}

impl LrSchedule {
    pub fn new(initial: f64, floor: f64, patience: usize) -> Self {
        Self {
            lr: initial,
            factor: 0.1,
            floor,
            patience: patience.max(1),
            tolerance: 1e-8,
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }

    /// Records one epoch's validation loss. Returns true when it improved
    /// on the best value seen so far.
    pub fn step(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best_val_loss - self.tolerance {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
            return true;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            self.lr = (self.lr * self.factor).max(self.floor);
            self.epochs_since_improvement = 0;
        }
        false
    }

    pub fn at_floor(&self) -> bool {
        self.lr <= self.floor
    }
}
