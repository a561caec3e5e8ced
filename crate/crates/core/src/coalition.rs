//! Coalitions of features as bitmasks.
//!
//! Feature `j` (1-based in user-facing labels) lives at bit `j - 1`. The
//! canonical ordering of coalitions is ascending mask value, so enumeration
//! starts at the empty set and ends at the grand coalition.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on the number of features for exact enumeration.
pub const MAX_FEATURES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coalition(u32);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn from_mask(mask: u32) -> Self {
        Coalition(mask)
    }

    /// Builds a coalition from 0-based feature indices.
    pub fn from_features<I: IntoIterator<Item = usize>>(features: I) -> Self {
        Coalition(features.into_iter().fold(0, |m, j| m | (1 << j)))
    }

    pub fn full(m: usize) -> Self {
        Coalition(full_mask(m))
    }

    pub fn mask(self) -> u32 {
        self.0
    }

    pub fn size(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_full(self, m: usize) -> bool {
        self.0 == full_mask(m)
    }

    /// True for every coalition other than the empty and the grand coalition.
    pub fn is_nontrivial(self, m: usize) -> bool {
        !self.is_empty() && !self.is_full(m)
    }

    pub fn contains(self, feature: usize) -> bool {
        self.0 >> feature & 1 == 1
    }

    pub fn with(self, feature: usize) -> Self {
        Coalition(self.0 | (1 << feature))
    }

    pub fn without(self, feature: usize) -> Self {
        Coalition(self.0 & !(1 << feature))
    }

    /// Complement with respect to `{1..m}`.
    pub fn complement(self, m: usize) -> Result<Self> {
        check_m(m)?;
        let full = full_mask(m);
        if self.0 & !full != 0 {
            return Err(Error::InvalidInput(format!(
                "coalition mask {:#b} has bits above feature {m}",
                self.0
            )));
        }
        Ok(Coalition(full ^ self.0))
    }

    /// 0-based indices of member features, ascending.
    pub fn members(self) -> impl Iterator<Item = usize> {
        let mask = self.0;
        (0..32).filter(move |&j| mask >> j & 1 == 1)
    }

    /// 0-based indices of features in `{0..m}` not in the coalition.
    pub fn non_members(self, m: usize) -> impl Iterator<Item = usize> {
        let mask = self.0;
        (0..m).filter(move |&j| mask >> j & 1 == 0)
    }

    /// Returns the coalition with features `a` and `b` exchanged.
    pub fn swap(self, a: usize, b: usize) -> Self {
        let (ia, ib) = (self.contains(a), self.contains(b));
        let mut out = self.without(a).without(b);
        if ia {
            out = out.with(b);
        }
        if ib {
            out = out.with(a);
        }
        out
    }
}

impl fmt::Display for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, j) in self.members().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", j + 1)?;
        }
        write!(f, "}}")
    }
}

pub fn full_mask(m: usize) -> u32 {
    if m >= 32 {
        u32::MAX
    } else {
        (1u32 << m) - 1
    }
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 || m > MAX_FEATURES {
        return Err(Error::InvalidInput(format!(
            "number of features must be in 1..={MAX_FEATURES}, got {m}"
        )));
    }
    Ok(())
}

/// All `2^m` coalitions in ascending mask order.
pub fn enumerate_coalitions(m: usize) -> Result<Vec<Coalition>> {
    check_m(m)?;
    Ok((0..=full_mask(m)).map(Coalition).collect())
}

/// The `2^m - 2` coalitions estimators are asked about.
pub fn nontrivial_coalitions(m: usize) -> Result<Vec<Coalition>> {
    check_m(m)?;
    Ok((1..full_mask(m)).map(Coalition).collect())
}

/// Coalitions of exactly `size` members, ascending mask order.
pub fn coalitions_of_size(m: usize, size: usize) -> Result<Vec<Coalition>> {
    check_m(m)?;
    Ok((0..=full_mask(m))
        .map(Coalition)
        .filter(|c| c.size() == size)
        .collect())
}

/// Binomial coefficient, exact for the sizes used here.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}
