/// Whether larger or smaller validation metrics are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    pub fn improves(self, candidate: f64, best: f64) -> bool {
        match self {
            Direction::Maximize => candidate > best,
            Direction::Minimize => candidate < best,
        }
    }

    pub fn worst(self) -> f64 {
        match self {
            Direction::Maximize => f64::NEG_INFINITY,
            Direction::Minimize => f64::INFINITY,
        }
    }
}

/// Stops once `patience` consecutive epochs bring no strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub direction: Direction,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, direction: Direction) -> Self {
        EarlyStopping {
            patience,
            direction,
            best: direction.worst(),
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the metric of 1-based `epoch`; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.direction.improves(metric, self.best) {
            self.best = metric;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement, never going below `min_lr`.
#[derive(Debug, Clone)]
pub struct PlateauDecay {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    direction: Direction,
    best: f64,
    stale: usize,
}

impl PlateauDecay {
    pub fn new(patience: usize, factor: f64, min_lr: f64, direction: Direction) -> Self {
        PlateauDecay {
            patience,
            factor,
            min_lr,
            direction,
            best: direction.worst(),
            stale: 0,
        }
    }

    /// Learning rate to use after observing `metric`.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if self.direction.improves(metric, self.best) {
            self.best = metric;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.patience > 0 && self.stale >= self.patience {
            self.stale = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// Stop epoch and learning-rate trace produced by the two policies for a fixed
/// sequence of validation metrics.
pub fn replay(
    metrics: &[f64],
    direction: Direction,
    patience: usize,
    decay: &mut PlateauDecay,
    lr0: f64,
) -> (usize, usize, Vec<f64>) {
    let mut stop = EarlyStopping::new(patience, direction);
    let mut lr = lr0;
    let mut lrs = Vec::new();
    for (i, &m) in metrics.iter().enumerate() {
        let epoch = i + 1;
        stop.observe(epoch, m);
        lrs.push(lr);
        lr = decay.observe(m, lr);
        if stop.should_stop() {
            return (epoch, stop.best_epoch(), lrs);
        }
    }
    (metrics.len(), stop.best_epoch(), lrs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_then_flat_stops_twenty_later() {
        let mut m = vec![0.5, 0.6, 0.7];
        m.extend(std::iter::repeat(0.7).take(40));
        let mut decay = PlateauDecay::new(10, 0.5, 1e-6, Direction::Maximize);
        let (stop, best, _) = replay(&m, Direction::Maximize, 20, &mut decay, 0.01);
        assert_eq!((stop, best), (23, 3));
    }

    #[test]
    fn halving_schedule() {
        let mut d = PlateauDecay::new(10, 0.5, 1e-6, Direction::Minimize);
        let mut lr = 0.1;
        lr = d.observe(1.0, lr);
        for _ in 0..40 {
            lr = d.observe(1.0, lr);
        }
        assert_eq!(lr, 0.1 / 16.0);
        let mut d = PlateauDecay::new(1, 0.5, 1e-6, Direction::Minimize);
        let mut lr = 1e-5;
        for _ in 0..10 {
            lr = d.observe(1.0, lr);
        }
        assert_eq!(lr, 1e-6);
    }
}
