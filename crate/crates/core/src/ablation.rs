//! Multi-class label maps and per-class mask ablation.
//!
//! During training each foreground class of a mask is independently removed
//! (its pixels relabelled as background) with probability 1/2, which makes
//! every one of the `2^(C-1)` removal patterns equally likely.

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major label map with labels in `0..num_classes`; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        let m = Mask {
            width,
            height,
            num_classes,
            labels,
        };
        m.validate()?;
        Ok(m)
    }

    /// All-background mask.
    pub fn empty(width: usize, height: usize, num_classes: usize) -> Self {
        Mask {
            width,
            height,
            num_classes,
            labels: vec![0; width * height],
        }
    }

    #[cfg(test)]
    pub(crate) fn from_raw_unchecked(
        width: usize,
        height: usize,
        num_classes: usize,
        labels: Vec<u8>,
    ) -> Self {
        Mask {
            width,
            height,
            num_classes,
            labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 256 {
            return Err(Error::Contract(format!(
                "class count {} outside 1..=256",
                self.num_classes
            )));
        }
        if self.labels.len() != self.width * self.height {
            return Err(Error::Contract(format!(
                "mask {}x{} has {} labels",
                self.width,
                self.height,
                self.labels.len()
            )));
        }
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| l as usize >= self.num_classes)
        {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Whether any pixel carries a non-background label.
    pub fn has_foreground(&self) -> bool {
        self.labels.iter().any(|&l| l != 0)
    }

    /// Sorted set of labels present in the mask.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }
}

/// Set of removed foreground classes for a mask with `num_classes` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationPattern {
    num_classes: usize,
    /// Bit `c` set when class `c` is removed; bit 0 is never set.
    removed: u64,
}

/// Widest class count a pattern can describe.
pub const MAX_PATTERN_CLASSES: usize = 64;

impl AblationPattern {
    pub fn new(num_classes: usize, removed: &[usize]) -> Result<Self> {
        check_class_count(num_classes)?;
        let mut bits = 0u64;
        for &c in removed {
            if c == 0 || c >= num_classes {
                return Err(Error::Config(format!(
                    "class {c} cannot be removed from a mask with {num_classes} classes \
                     (valid: 1..={})",
                    num_classes.saturating_sub(1)
                )));
            }
            bits |= 1 << c;
        }
        Ok(AblationPattern {
            num_classes,
            removed: bits,
        })
    }

    /// Pattern number `index` in binary-counting order: bit `i` of `index`
    /// removes class `i + 1`.
    pub fn from_index(num_classes: usize, index: u64) -> Result<Self> {
        check_class_count(num_classes)?;
        let count = 1u128 << (num_classes - 1);
        if index as u128 >= count {
            return Err(Error::Contract(format!(
                "pattern index {index} out of range for {num_classes} classes"
            )));
        }
        Ok(AblationPattern {
            num_classes,
            removed: index << 1,
        })
    }

    /// One independent fair coin per foreground class, drawn in class order.
    pub fn draw<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> Result<Self> {
        check_class_count(num_classes)?;
        let mut removed = 0u64;
        for c in 1..num_classes {
            if rng.random_bool(0.5) {
                removed |= 1 << c;
            }
        }
        Ok(AblationPattern {
            num_classes,
            removed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Position in binary-counting order (inverse of [`Self::from_index`]).
    pub fn index(&self) -> u64 {
        self.removed >> 1
    }

    pub fn removes(&self, class: usize) -> bool {
        class < 64 && self.removed & (1 << class) != 0
    }

    pub fn removed_classes(&self) -> Vec<usize> {
        (1..self.num_classes).filter(|&c| self.removes(c)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.removed == 0
    }
}

fn check_class_count(num_classes: usize) -> Result<()> {
    if num_classes == 0 || num_classes > MAX_PATTERN_CLASSES {
        return Err(Error::Config(format!(
            "class count {num_classes} outside 1..={MAX_PATTERN_CLASSES}"
        )));
    }
    Ok(())
}

/// Relabels every pixel of a removed class as background.
pub fn apply_pattern(mask: &Mask, pattern: &AblationPattern) -> Result<Mask> {
    if pattern.num_classes != mask.num_classes {
        return Err(Error::Contract(format!(
            "pattern for {} classes applied to mask with {} classes",
            pattern.num_classes, mask.num_classes
        )));
    }
    let labels = mask
        .labels
        .iter()
        .map(|&l| if pattern.removes(l as usize) { 0 } else { l })
        .collect();
    Ok(Mask {
        labels,
        ..mask.clone()
    })
}

/// Draws a pattern with [`AblationPattern::draw`] and applies it.
pub fn ablate_random<R: Rng + ?Sized>(mask: &Mask, rng: &mut R) -> Result<(Mask, AblationPattern)> {
    let pattern = AblationPattern::draw(mask.num_classes, rng)?;
    Ok((apply_pattern(mask, &pattern)?, pattern))
}

/// All `2^(C-1)` patterns in binary-counting order.
pub fn enumerate_patterns(num_classes: usize) -> Result<Vec<AblationPattern>> {
    check_class_count(num_classes)?;
    if num_classes > 25 {
        return Err(Error::Config(format!(
            "refusing to enumerate 2^{} patterns",
            num_classes - 1
        )));
    }
    (0..1u64 << (num_classes - 1))
        .map(|i| AblationPattern::from_index(num_classes, i))
        .collect()
}

/// Pearson chi-square statistic of `counts` against a uniform expectation;
/// compare with the chi-square quantile for `counts.len() - 1` degrees of
/// freedom.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return 0.0;
    }
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}
