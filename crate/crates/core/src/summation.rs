//! Compensated (Kahan-Babuska / Neumaier) summation.

/// Running sum that carries the rounding error of each addition in a
/// separate compensation term.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl Extend<f64> for NeumaierSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for v in iter {
            self.add(v);
        }
    }
}

/// Compensated sum of an iterator.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = NeumaierSum::new();
    acc.extend(values);
    acc.total()
}

/// Euclidean norm with compensated accumulation of the squares, summed in
/// iteration order.
pub fn l2_norm(values: &[f64]) -> f64 {
    compensated_sum(values.iter().map(|v| v * v)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_small_terms_lost_by_naive_sum() {
        let values = [1.0, 1e100, 1.0, -1e100];
        let naive: f64 = values.iter().sum();
        assert_eq!(naive, 0.0);
        assert_eq!(compensated_sum(values), 2.0);
    }

    #[test]
    fn harmonic_tail() {
        let n = 1_000_000;
        let s = compensated_sum((1..=n).map(|k| 1.0 / (k as f64 * k as f64)));
        // pi^2/6 - 1/n + O(1/n^2)
        let expected =
            std::f64::consts::PI.powi(2) / 6.0 - 1.0 / n as f64 + 0.5 / (n as f64).powi(2);
        assert!((s - expected).abs() < 1e-15);
    }
}
