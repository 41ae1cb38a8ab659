//! Node mobility, battery and trust bookkeeping, and weighted leader election.
//!
//! A candidate's weight is `W = w0*M + w1*B' + w2*T'` and the candidate with
//! the smallest `W` leads. With the default [`Orientation::Inverted`],
//! `B' = 1 - B` and `T' = 1 - T`, so low mobility, a full battery and high
//! trust all pull the weight down. [`Orientation::Raw`] feeds `B` and `T`
//! unchanged.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::ids::{GroupId, NodeId, Tick};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error("position trace is empty")]
    EmptyTrace,
    #[error("non-finite coordinate at sample {0}")]
    NonFinite(usize),
    #[error("weights must be non-negative and satisfy w0 + w1 + w2 = 1 (sum is {0})")]
    BadWeights(f64),
    #[error("attribute {0} is not finite")]
    BadAttribute(&'static str),
    #[error("no candidates for election")]
    NoCandidates,
}

/// Positions in meters, one sample per tick starting at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionTrace {
    samples: Vec<(f64, f64)>,
}

impl PositionTrace {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self, GroupError> {
        if samples.is_empty() {
            return Err(GroupError::EmptyTrace);
        }
        if let Some(i) = samples.iter().position(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(GroupError::NonFinite(i));
        }
        Ok(Self { samples })
    }

    pub fn stationary(x: f64, y: f64) -> Self {
        Self::new(vec![(x, y)]).expect("finite point")
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Position at `tick`; the last sample holds once the trace runs out.
    pub fn position_at(&self, tick: Tick) -> (f64, f64) {
        let i = (tick as usize).min(self.samples.len() - 1);
        self.samples[i]
    }

    /// The prefix observed up to and including `tick`.
    pub fn until(&self, tick: Tick) -> PositionTrace {
        let end = (tick as usize + 1).min(self.samples.len());
        PositionTrace {
            samples: self.samples[..end].to_vec(),
        }
    }
}

/// Mean displacement per tick over the trace. A single sample gives 0.
pub fn mobility(trace: &PositionTrace) -> f64 {
    let s = trace.samples();
    if s.len() < 2 {
        return 0.0;
    }
    let total: f64 = s
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .sum();
    total / (s.len() - 1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeAttributes {
    pub node: NodeId,
    pub mobility: f64,
    pub battery: f64,
    pub trust: f64,
}

impl NodeAttributes {
    /// Battery and trust are clamped to `[0, 1]`, mobility to `>= 0`.
    pub fn new(node: NodeId, mobility: f64, battery: f64, trust: f64) -> Result<Self, GroupError> {
        for (name, v) in [("mobility", mobility), ("battery", battery), ("trust", trust)] {
            if !v.is_finite() {
                return Err(GroupError::BadAttribute(name));
            }
        }
        Ok(Self {
            node,
            mobility: mobility.max(0.0),
            battery: battery.clamp(0.0, 1.0),
            trust: trust.clamp(0.0, 1.0),
        })
    }

    /// Attributes with mobility measured from `trace` and scaled by `m_max`
    /// (clamped to 1) so it is commensurate with battery and trust.
    pub fn observe(
        node: NodeId,
        trace: &PositionTrace,
        battery: f64,
        trust: f64,
        m_max: f64,
    ) -> Result<Self, GroupError> {
        let m = mobility(trace);
        let scaled = if m_max > 0.0 { (m / m_max).min(1.0) } else { m };
        Self::new(node, scaled, battery, trust)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Orientation {
    #[default]
    Inverted,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightConfig {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub orientation: Orientation,
}

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

impl WeightConfig {
    pub fn new(w0: f64, w1: f64, w2: f64) -> Result<Self, GroupError> {
        let sum = w0 + w1 + w2;
        if [w0, w1, w2].iter().any(|w| !w.is_finite() || *w < 0.0) || (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(GroupError::BadWeights(sum));
        }
        Ok(Self {
            w0,
            w1,
            w2,
            orientation: Orientation::Inverted,
        })
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    /// Skips the sum check; used to compare scaled weight vectors.
    pub fn unnormalized(w0: f64, w1: f64, w2: f64) -> Self {
        Self {
            w0,
            w1,
            w2,
            orientation: Orientation::Inverted,
        }
    }
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self::new(0.4, 0.3, 0.3).unwrap()
    }
}

pub fn weight(attrs: &NodeAttributes, cfg: &WeightConfig) -> f64 {
    let (b, t) = match cfg.orientation {
        Orientation::Inverted => (1.0 - attrs.battery, 1.0 - attrs.trust),
        Orientation::Raw => (attrs.battery, attrs.trust),
    };
    cfg.w0 * attrs.mobility + cfg.w1 * b + cfg.w2 * t
}

/// Smallest weight wins; equal weights go to the smallest identifier.
pub fn elect_leader(candidates: &[NodeAttributes], cfg: &WeightConfig) -> Result<NodeId, GroupError> {
    candidates
        .iter()
        .map(|a| (weight(a, cfg), a.node))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, n)| n)
        .ok_or(GroupError::NoCandidates)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observation {
    Forwarded,
    Dropped,
    Malformed,
    HeartbeatMissed,
}

/// Additive trust deltas, applied then clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrustRule {
    pub forwarded: f64,
    pub dropped: f64,
    pub malformed: f64,
    pub heartbeat_missed: f64,
}

impl Default for TrustRule {
    fn default() -> Self {
        Self {
            forwarded: 0.01,
            dropped: -0.05,
            malformed: -0.20,
            heartbeat_missed: -0.10,
        }
    }
}

pub fn update_trust(current: f64, observation: Observation, rule: &TrustRule) -> f64 {
    let delta = match observation {
        Observation::Forwarded => rule.forwarded,
        Observation::Dropped => rule.dropped,
        Observation::Malformed => rule.malformed,
        Observation::HeartbeatMissed => rule.heartbeat_missed,
    };
    (current + delta).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupState {
    pub group_id: GroupId,
    pub leader: NodeId,
    pub members: BTreeSet<NodeId>,
    pub capacity: usize,
}

impl GroupState {
    pub fn new(group_id: GroupId, leader: NodeId, capacity: usize) -> Self {
        Self {
            group_id,
            leader,
            members: BTreeSet::from([leader]),
            capacity,
        }
    }
}

/// True while the group has a free slot. The leader occupies one.
pub fn admit_capacity_check(state: &GroupState) -> bool {
    state.members.len() < state.capacity
}
