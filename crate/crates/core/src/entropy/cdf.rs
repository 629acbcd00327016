use crate::error::{Error, Result};

/// Total of every quantized frequency table.
pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
/// Symbols are confined to this range whatever the model says.
pub const SYMBOL_CAP: i32 = 255;
/// Mass allowed outside the scanned range before overflow bins are added.
pub const TAIL_MASS: f64 = 1e-6;

/// A discrete distribution over the integers, given through its tails.
///
/// `below(s)` is the mass strictly below `s - 1/2` and `above(s)` the mass
/// strictly above `s + 1/2`, so `pmf(s) = 1 - below(s) - above(s)`.
/// Implementations evaluate whichever form is accurate.
pub trait DiscreteModel {
    fn mode(&self) -> i32;
    fn below(&self, s: i32) -> f64;
    fn above(&self, s: i32) -> f64;
    fn pmf(&self, s: i32) -> f64;
}

/// Quantized cumulative frequencies for the symbols `min..=max`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    min: i32,
    /// `len + 1` entries, `cum[0] = 0`, `cum[len] = TOTAL`.
    cum: Vec<u32>,
}

impl CdfTable {
    /// Builds a table from raw counts that must be positive and sum to
    /// [`TOTAL`].
    pub fn from_counts(min: i32, counts: &[u32]) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::invalid("frequency table needs positive counts"));
        }
        let mut cum = Vec::with_capacity(counts.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &c in counts {
            acc += c as u64;
            if acc > TOTAL as u64 {
                return Err(Error::invalid("frequency table exceeds total"));
            }
            cum.push(acc as u32);
        }
        if acc != TOTAL as u64 {
            return Err(Error::invalid(format!("frequency table sums to {acc}, not {TOTAL}")));
        }
        Ok(Self { min, cum })
    }

    pub fn min(&self) -> i32 {
        self.min
    }

    pub fn max(&self) -> i32 {
        self.min + self.len() as i32 - 1
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, s: i32) -> u32 {
        let i = (s - self.min) as usize;
        self.cum[i + 1] - self.cum[i]
    }

    pub fn counts(&self) -> Vec<u32> {
        self.cum.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `(start, frequency)` of the symbol at table position `i`.
    pub(crate) fn interval(&self, i: usize) -> (u32, u32) {
        (self.cum[i], self.cum[i + 1] - self.cum[i])
    }

    /// Table position whose interval contains `target < TOTAL`.
    pub(crate) fn find(&self, target: u32) -> usize {
        // First cum entry greater than target, minus one.
        self.cum.partition_point(|&c| c <= target) - 1
    }

    pub fn clamp(&self, s: i32) -> i32 {
        s.clamp(self.min, self.max())
    }

    /// Ideal code length of `s` under the quantized table, in bits.
    pub fn cost_bits(&self, s: i32) -> f64 {
        -(self.count(self.clamp(s)) as f64 / TOTAL as f64).log2()
    }
}

/// Discretizes a model into a [`CdfTable`].
///
/// The range grows outward from the mode, always toward the heavier tail,
/// until less than [`TAIL_MASS`] lies outside it (or it reaches
/// `[-SYMBOL_CAP, SYMBOL_CAP]`). Any remaining tail mass gets one overflow
/// symbol on its side, the bin out-of-range values are clamped into. The
/// masses are then quantized to counts of at least 1 summing to [`TOTAL`].
pub fn build_cdf(model: &impl DiscreteModel) -> Result<CdfTable> {
    let mode = model.mode().clamp(-SYMBOL_CAP, SYMBOL_CAP);
    let (mut lo, mut hi) = (mode, mode);
    loop {
        let (left, right) = (model.below(lo), model.above(hi));
        if !(left.is_finite() && right.is_finite()) {
            return Err(Error::invalid("model tails are not finite"));
        }
        if left + right < TAIL_MASS {
            break;
        }
        let can_left = lo > -SYMBOL_CAP;
        let can_right = hi < SYMBOL_CAP;
        match (can_left, can_right) {
            (false, false) => break,
            (true, false) => lo -= 1,
            (false, true) => hi += 1,
            (true, true) if left >= right => lo -= 1,
            (true, true) => hi += 1,
        }
    }

    let mut masses: Vec<f64> = (lo..=hi).map(|s| model.pmf(s)).collect();
    let (left, right) = (model.below(lo), model.above(hi));
    let mut min = lo;
    if left > 0.0 && lo > -SYMBOL_CAP {
        masses.insert(0, left);
        min -= 1;
    } else if let Some(first) = masses.first_mut() {
        *first += left;
    }
    if right > 0.0 && hi < SYMBOL_CAP {
        masses.push(right);
    } else if let Some(last) = masses.last_mut() {
        *last += right;
    }

    if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(Error::invalid("model produced an invalid probability"));
    }
    let floor = 1.0 / TOTAL as f64;
    let sum: f64 = masses.iter().sum();
    if masses.iter().all(|&m| m < floor) || !(sum > 0.0) {
        return Err(Error::invalid(
            "degenerate distribution: every symbol is below the probability floor",
        ));
    }
    CdfTable::from_counts(min, &quantize_masses(&masses, sum))
}

fn quantize_masses(masses: &[f64], sum: f64) -> Vec<u32> {
    let mut counts: Vec<u32> = masses
        .iter()
        .map(|m| ((m / sum * TOTAL as f64).round() as u32).max(1))
        .collect();
    let mut total: i64 = counts.iter().map(|&c| c as i64).sum();
    // Settle the rounding difference on the largest bins, keeping every
    // count positive.
    while total != TOTAL as i64 {
        let largest = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if total < TOTAL as i64 {
            counts[largest] += (TOTAL as i64 - total) as u32;
            total = TOTAL as i64;
        } else {
            let excess = (total - TOTAL as i64) as u32;
            let take = excess.min(counts[largest] - 1);
            counts[largest] -= take;
            total -= take as i64;
        }
    }
    counts
}

/// Discretized `N(mu, sigma^2) * U(-1/2, 1/2)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianModel {
    pub mu: f64,
    pub sigma: f64,
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

impl DiscreteModel for GaussianModel {
    fn mode(&self) -> i32 {
        self.mu.round().clamp(-(SYMBOL_CAP as f64), SYMBOL_CAP as f64) as i32
    }

    fn below(&self, s: i32) -> f64 {
        normal_cdf((s as f64 - 0.5 - self.mu) / self.sigma)
    }

    fn above(&self, s: i32) -> f64 {
        normal_cdf((self.mu - s as f64 - 0.5) / self.sigma)
    }

    fn pmf(&self, s: i32) -> f64 {
        let v = (s as f64 - self.mu).abs();
        normal_cdf((0.5 - v) / self.sigma) - normal_cdf((-0.5 - v) / self.sigma)
    }
}

/// A factorized channel given by logits of its cumulative at the
/// half-integers `lo - 1/2, lo + 1/2, ..., hi + 1/2`.
#[derive(Debug, Clone)]
pub struct LogitGridModel {
    lo: i32,
    logits: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LogitGridModel {
    pub fn new(lo: i32, logits: Vec<f64>) -> Self {
        Self { lo, logits }
    }

    fn last_symbol(&self) -> i32 {
        self.lo + self.logits.len() as i32 - 2
    }

    /// Logit of the cumulative at `s - 1/2`.
    fn at(&self, s: i32) -> f64 {
        if s < self.lo {
            return f64::NEG_INFINITY;
        }
        if s > self.last_symbol() + 1 {
            return f64::INFINITY;
        }
        self.logits[(s - self.lo) as usize]
    }
}

impl DiscreteModel for LogitGridModel {
    fn mode(&self) -> i32 {
        let mut best = (f64::NEG_INFINITY, self.lo);
        for s in self.lo..=self.last_symbol() {
            let p = self.pmf(s);
            if p > best.0 {
                best = (p, s);
            }
        }
        best.1
    }

    fn below(&self, s: i32) -> f64 {
        sigmoid(self.at(s))
    }

    fn above(&self, s: i32) -> f64 {
        sigmoid(-self.at(s + 1))
    }

    fn pmf(&self, s: i32) -> f64 {
        let (l, u) = (self.at(s), self.at(s + 1));
        if l + u > 0.0 {
            sigmoid(-l) - sigmoid(-u)
        } else {
            sigmoid(u) - sigmoid(l)
        }
    }
}
