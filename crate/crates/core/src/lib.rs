//! Group-based mobile ad hoc network security toolkit.
//!
//! The crate is organised bottom-up:
//!
//! * [`crypto`] – provider-abstracted primitives (hash, signatures, public-key
//!   and authenticated symmetric encryption), the canonical field encoding,
//!   the quadratic-residue challenge-response arithmetic and the finite-field
//!   Diffie-Hellman step used by the leader ring.
//! * [`group`] – mobility, weight and leader election bookkeeping.
//! * [`keymgmt`] – the key hierarchy and every key-lifecycle protocol as
//!   message-driven step functions.
//! * [`routing`] – signed, hash-chained on-demand route discovery.
//! * [`wire`] – the tagged message set exchanged between nodes.
//! * [`sim`] – a deterministic discrete-event simulator with adversaries, an
//!   event log and a post-run security auditor.
//! * [`batch`] – data-parallel runners for scenario sweeps and Monte Carlo
//!   trials (rayon behind the `parallel` feature).

pub mod batch;
pub mod crypto;
pub mod group;
pub mod ids;
pub mod keymgmt;
pub mod routing;
pub mod sim;
pub mod wire;

pub use ids::{GroupId, NodeId, Tick};
