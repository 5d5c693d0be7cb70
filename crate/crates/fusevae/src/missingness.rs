//! Observation indicators and mixture weights over observed subsets.
//!
//! An indicator records which of the M modalities are present for one
//! subject. The posterior is a mixture with one component per non-empty
//! subset of the observed modalities; the policies here decide how much
//! weight each component gets.

use crate::error::{Error, Result};
use rand::Rng;
use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

/// Which modalities are observed, packed as a bitmask. Bit `j` set means
/// modality `j` is present.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Indicator {
    mask: u64,
    m: u8,
}

impl Indicator {
    pub const MAX_MODALITIES: usize = 64;

    pub fn new(bits: &[bool]) -> Result<Self> {
        if bits.is_empty() || bits.len() > Self::MAX_MODALITIES {
            return Err(Error::contract(format!(
                "indicator length must be 1..={}, got {}",
                Self::MAX_MODALITIES,
                bits.len()
            )));
        }
        let mut mask = 0u64;
        for (j, &b) in bits.iter().enumerate() {
            if b {
                mask |= 1 << j;
            }
        }
        Ok(Indicator { mask, m: bits.len() as u8 })
    }

    pub fn from_mask(mask: u64, m: usize) -> Result<Self> {
        if m == 0 || m > Self::MAX_MODALITIES {
            return Err(Error::contract(format!("indicator length {m} out of range")));
        }
        if m < 64 && mask >> m != 0 {
            return Err(Error::contract(format!(
                "mask {mask:#b} has bits beyond {m} modalities"
            )));
        }
        Ok(Indicator { mask, m: m as u8 })
    }

    /// Everything observed.
    pub fn full(m: usize) -> Result<Self> {
        let mask = if m == 64 { u64::MAX } else { (1u64 << m) - 1 };
        Self::from_mask(mask, m)
    }

    /// Only modality `j` observed.
    pub fn single(j: usize, m: usize) -> Result<Self> {
        if j >= m {
            return Err(Error::contract(format!("modality {j} out of range for {m}")));
        }
        Self::from_mask(1u64 << j, m)
    }

    pub fn len(&self) -> usize {
        self.m as usize
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    /// Number of observed modalities.
    pub fn count(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_observed(&self, j: usize) -> bool {
        j < self.len() && self.mask >> j & 1 == 1
    }

    pub fn iter_observed(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&j| self.is_observed(j))
    }

    pub fn is_subset_of(&self, other: &Indicator) -> bool {
        self.m == other.m && self.mask & !other.mask == 0
    }

    /// All non-empty subsets of the observed set, in binary counting order
    /// over the observed positions. For `1100` that is `1000`, `0100`,
    /// `1100`; the count is always `2^observed - 1`.
    pub fn enumerate_subsets(&self) -> Vec<Indicator> {
        let positions: Vec<usize> = self.iter_observed().collect();
        let k = positions.len();
        (1u64..1u64 << k)
            .map(|s| {
                let mut mask = 0u64;
                for (i, &pos) in positions.iter().enumerate() {
                    if s >> i & 1 == 1 {
                        mask |= 1 << pos;
                    }
                }
                Indicator { mask, m: self.m }
            })
            .collect()
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for j in 0..self.len() {
            f.write_str(if self.is_observed(j) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Indicator({self})")
    }
}

impl FromStr for Indicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::parse(format!(
                    "indicator digits must be 0 or 1, got {other:?}"
                ))),
            })
            .collect::<Result<_>>()?;
        Indicator::new(&bits)
    }
}

impl Serialize for Indicator {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = ser.serialize_seq(Some(self.len()))?;
        for j in 0..self.len() {
            seq.serialize_element(&(self.is_observed(j) as u8))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Indicator {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct BitsVisitor;
        impl<'de> Visitor<'de> for BitsVisitor {
            type Value = Indicator;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a sequence of 0/1 flags")
            }

            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<Indicator, A::Error> {
                let mut bits = Vec::new();
                while let Some(v) = seq.next_element::<u8>()? {
                    match v {
                        0 => bits.push(false),
                        1 => bits.push(true),
                        other => {
                            return Err(serde::de::Error::custom(format!(
                                "indicator entries must be 0 or 1, got {other}"
                            )))
                        }
                    }
                }
                Indicator::new(&bits).map_err(serde::de::Error::custom)
            }
        }
        de.deserialize_seq(BitsVisitor)
    }
}

/// A weighted set of posterior components for one indicator.
pub type ComponentWeights = Vec<(Indicator, f64)>;

/// How mixture weight is spread over the observed subsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixturePolicy {
    /// Uniform over every non-empty observed subset.
    Uniform,
    /// Three equal branches: the full observed set, the reference modality
    /// alone, and a uniform spread over non-empty subsets of the remaining
    /// observed modalities. Branches that are impossible under the indicator
    /// are dropped and the rest renormalized; coinciding components merge.
    Reference { reference_index: usize },
    /// Fixed weights supplied by the caller, validated against the indicator.
    Explicit { weights: ComponentWeights },
}

impl MixturePolicy {
    /// Components and weights for indicator `r`. Weights are positive and
    /// sum to one; components are distinct non-empty subsets of `r`.
    pub fn weights_for(&self, r: &Indicator) -> Result<ComponentWeights> {
        if r.is_empty() {
            return Err(Error::contract(
                "mixture weights need at least one observed modality",
            ));
        }
        let mut weights = match self {
            MixturePolicy::Uniform => {
                let subsets = r.enumerate_subsets();
                let w = 1.0 / subsets.len() as f64;
                subsets.into_iter().map(|s| (s, w)).collect::<Vec<_>>()
            }
            MixturePolicy::Reference { reference_index } => {
                if *reference_index >= r.len() {
                    return Err(Error::contract(format!(
                        "reference modality {reference_index} out of range for {}",
                        r.len()
                    )));
                }
                let has_ref = r.is_observed(*reference_index);
                let rest = Indicator {
                    mask: r.mask & !(1u64 << reference_index),
                    m: r.m,
                };
                let n_branches = 1 + has_ref as usize + !rest.is_empty() as usize;
                let branch_mass = 1.0 / n_branches as f64;
                let mut components: ComponentWeights = vec![(*r, branch_mass)];
                if has_ref {
                    components.push((Indicator::single(*reference_index, r.len())?, branch_mass));
                }
                if !rest.is_empty() {
                    let subsets = rest.enumerate_subsets();
                    let w = branch_mass / subsets.len() as f64;
                    components.extend(subsets.into_iter().map(|s| (s, w)));
                }
                merge_duplicates(components)
            }
            MixturePolicy::Explicit { weights } => {
                let violations = validate_weights(weights, r);
                if let Some(v) = violations.first() {
                    return Err(Error::contract(format!("explicit mixture weights: {v}")));
                }
                weights.clone()
            }
        };
        // Guard against drift from the accumulation above.
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        for (_, w) in &mut weights {
            *w /= total;
        }
        Ok(weights)
    }

    /// Draws one component index proportional to its weight.
    pub fn sample_component(&self, r: &Indicator, rng: &mut impl Rng) -> Result<Indicator> {
        let weights = self.weights_for(r)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (s, w) in &weights {
            acc += w;
            if u < acc {
                return Ok(*s);
            }
        }
        Ok(weights.last().expect("weights_for is never empty").0)
    }
}

fn merge_duplicates(mut weights: ComponentWeights) -> ComponentWeights {
    weights.sort_by_key(|(s, _)| *s);
    let mut out: ComponentWeights = Vec::with_capacity(weights.len());
    for (s, w) in weights {
        match out.last_mut() {
            Some((prev, pw)) if *prev == s => *pw += w,
            _ => out.push((s, w)),
        }
    }
    out
}

/// A specific defect in a set of explicit mixture weights.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightViolation {
    EmptyComponent { index: usize },
    NotASubset { index: usize },
    NonPositiveWeight { index: usize, weight: f64 },
    DuplicateComponent { index: usize },
    WeightsDoNotSumToOne { total: f64 },
}

impl fmt::Display for WeightViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightViolation::EmptyComponent { index } => {
                write!(f, "component {index} observes nothing")
            }
            WeightViolation::NotASubset { index } => {
                write!(f, "component {index} is not a subset of the indicator")
            }
            WeightViolation::NonPositiveWeight { index, weight } => {
                write!(f, "component {index} has non-positive weight {weight}")
            }
            WeightViolation::DuplicateComponent { index } => {
                write!(f, "component {index} repeats an earlier component")
            }
            WeightViolation::WeightsDoNotSumToOne { total } => {
                write!(f, "weights sum to {total}, expected 1")
            }
        }
    }
}

/// Checks explicit weights against an indicator; empty means valid.
pub fn validate_weights(weights: &ComponentWeights, r: &Indicator) -> Vec<WeightViolation> {
    let mut violations = Vec::new();
    if weights.is_empty() {
        violations.push(WeightViolation::WeightsDoNotSumToOne { total: 0.0 });
        return violations;
    }
    let mut seen = Vec::new();
    let mut total = 0.0;
    for (i, (s, w)) in weights.iter().enumerate() {
        if s.is_empty() {
            violations.push(WeightViolation::EmptyComponent { index: i });
        }
        if !s.is_subset_of(r) {
            violations.push(WeightViolation::NotASubset { index: i });
        }
        if !(*w > 0.0) {
            violations.push(WeightViolation::NonPositiveWeight { index: i, weight: *w });
        }
        if seen.contains(s) {
            violations.push(WeightViolation::DuplicateComponent { index: i });
        }
        seen.push(*s);
        total += w;
    }
    if (total - 1.0).abs() > 1e-9 {
        violations.push(WeightViolation::WeightsDoNotSumToOne { total });
    }
    violations
}
