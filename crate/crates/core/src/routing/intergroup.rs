//! Composition of routes discovered leg by leg through group leaders.

use crate::ids::NodeId;

/// A route crossing from the source's group to the destination's group:
/// `source .. leader_a` inside the first group, a leader-ring hop
/// `leader_a -> leader_b`, then `leader_b .. dest` inside the second group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComposedRoute {
    pub first_leg: Vec<NodeId>,
    pub second_leg: Vec<NodeId>,
}

impl ComposedRoute {
    pub fn full(&self) -> Vec<NodeId> {
        let mut out = self.first_leg.clone();
        out.extend_from_slice(&self.second_leg);
        out
    }

    pub fn source(&self) -> Option<NodeId> {
        self.first_leg.first().copied()
    }

    pub fn dest(&self) -> Option<NodeId> {
        self.second_leg.last().copied()
    }
}

/// Joins the two legs. `None` unless the first leg ends at a leader, the
/// second starts at a (different) leader, and the result has no repeated node.
pub fn compose_routes(first_leg: &[NodeId], second_leg: &[NodeId]) -> Option<ComposedRoute> {
    let (a, b) = (first_leg.last()?, second_leg.first()?);
    if a == b {
        return None;
    }
    let composed = ComposedRoute {
        first_leg: first_leg.to_vec(),
        second_leg: second_leg.to_vec(),
    };
    let full = composed.full();
    let mut sorted = full.clone();
    sorted.sort();
    sorted.dedup();
    (sorted.len() == full.len()).then_some(composed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().map(|&i| NodeId(i)).collect()
    }

    #[test]
    fn composes_disjoint_legs() {
        let c = compose_routes(&ids(&[1, 2, 3]), &ids(&[7, 8])).unwrap();
        assert_eq!(c.full(), ids(&[1, 2, 3, 7, 8]));
        assert_eq!(c.source(), Some(NodeId(1)));
        assert_eq!(c.dest(), Some(NodeId(8)));
    }

    #[test]
    fn rejects_loops_and_empty_legs() {
        assert!(compose_routes(&ids(&[1, 2]), &ids(&[3, 1])).is_none());
        assert!(compose_routes(&[], &ids(&[3])).is_none());
        assert!(compose_routes(&ids(&[1, 3]), &ids(&[3, 4])).is_none());
    }

    #[test]
    fn leader_as_source_or_destination() {
        let c = compose_routes(&ids(&[5]), &ids(&[9])).unwrap();
        assert_eq!(c.full(), ids(&[5, 9]));
    }
}
