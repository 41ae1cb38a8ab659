//! Message-driven leader-ring key agreement.
//!
//! Leaders are ordered by identifier. The first starts an upflow, each
//! forwards to its successor, and the last broadcasts the values every
//! earlier leader needs to finish. See [`crate::crypto::dh`] for the algebra.

use num_bigint::BigUint;

use super::{Addr, Ctx, KeyId, KeyRecord, Note, Step};
use crate::crypto::dh::{final_step, finish, ring_key, upflow_step, DhGroup, Upflow};
use crate::crypto::SymmetricKey;
use crate::ids::NodeId;
use crate::wire::Message;

#[derive(Clone, Debug)]
pub struct RingState {
    pub round: u64,
    pub order: Vec<NodeId>,
    secret: BigUint,
    pub key: Option<SymmetricKey>,
}

impl RingState {
    pub fn key_id(&self) -> KeyId {
        KeyId::Ring { round: self.round }
    }

    fn position(&self, me: NodeId) -> Option<usize> {
        self.order.iter().position(|n| *n == me)
    }

    fn complete(&mut self, me: NodeId, shared: &BigUint, step: &mut Step) {
        let key = ring_key(shared);
        step.note(Note::Secret {
            owner: me,
            record: KeyRecord::sym(self.key_id(), &key),
        });
        self.key = Some(key);
    }
}

/// Begins round `round` over `order` (sorted, containing `me`). Only the
/// first leader emits anything.
pub fn ring_start(ctx: &mut Ctx<'_>, dh: &DhGroup, me: NodeId, round: u64, order: Vec<NodeId>) -> (RingState, Step) {
    let mut step = Step::default();
    let mut state = RingState {
        round,
        order,
        secret: dh.random_secret(ctx.rng),
        key: None,
    };
    if state.position(me) == Some(0) {
        advance(dh, me, &mut state, &Upflow::start(dh), &mut step);
    }
    (state, step)
}

fn advance(dh: &DhGroup, me: NodeId, state: &mut RingState, incoming: &Upflow, step: &mut Step) {
    let Some(i) = state.position(me) else {
        return;
    };
    if i + 1 == state.order.len() {
        let Ok((shared, values)) = final_step(dh, &state.secret, incoming) else {
            return;
        };
        state.complete(me, &shared, step);
        if !values.is_empty() {
            step.send(
                Addr::Leaders,
                Message::RingGdhFinal {
                    round: state.round,
                    order: state.order.clone(),
                    values,
                },
            );
        }
    } else if let Ok(next) = upflow_step(dh, &state.secret, incoming) {
        step.send(
            Addr::Node(state.order[i + 1]),
            Message::RingGdh {
                round: state.round,
                order: state.order.clone(),
                partials: next.partials,
                cardinal: next.cardinal,
            },
        );
    }
}

/// Handles RING_GDH and RING_GDH_FINAL. A message for a newer round than the
/// current state starts participation in that round.
pub fn ring_handle(ctx: &mut Ctx<'_>, dh: &DhGroup, me: NodeId, state: &mut Option<RingState>, msg: &Message) -> Step {
    let mut step = Step::default();
    match msg {
        Message::RingGdh {
            round,
            order,
            partials,
            cardinal,
        } => {
            let Some(i) = order.iter().position(|n| *n == me) else {
                return step;
            };
            if partials.len() != i || state.as_ref().is_some_and(|s| s.round > *round) {
                return step;
            }
            if state.as_ref().is_none_or(|s| s.round < *round) {
                *state = Some(RingState {
                    round: *round,
                    order: order.clone(),
                    secret: dh.random_secret(ctx.rng),
                    key: None,
                });
            }
            let s = state.as_mut().unwrap();
            if s.order != *order || s.key.is_some() {
                return step;
            }
            let incoming = Upflow {
                partials: partials.clone(),
                cardinal: cardinal.clone(),
            };
            advance(dh, me, s, &incoming, &mut step);
        }
        Message::RingGdhFinal { round, order, values } => {
            let Some(s) = state.as_mut().filter(|s| s.round == *round && s.order == *order) else {
                return step;
            };
            let Some(i) = s.position(me) else {
                return step;
            };
            if s.key.is_some() || i + 1 >= order.len() {
                return step;
            }
            if let Ok(shared) = finish(dh, &s.secret, values, i) {
                s.complete(me, &shared, &mut step);
            }
        }
        _ => {}
    }
    step
}
