//! Federated context-broker engine plus a deterministic discrete-event
//! simulation harness.
//!
//! The crate is organised around the lifecycle of a context query:
//!
//! - [`contextml`] holds the domain types (entities, scopes, context
//!   elements) and the canonical ContextML text codec used as the wire and
//!   trace format.
//! - [`matching`] implements the subscription constraint language and the
//!   predicate evaluator that decides whether a notification matches a
//!   subscription.
//! - [`broker`] is the broker state machine: registration tables,
//!   subscription routing across an acyclic federation, TTL cache, bulk
//!   queue and disconnection handling. The same engine instantiates both the
//!   mobile (MCxB) and the network (NCxB) broker.
//! - [`netsim`] models transports (IPC / socket / HTTP, local and remote),
//!   link availability windows and the per-call energy cost model calibrated
//!   from measured data.
//! - [`harness`] builds scenario worlds and drives them through a
//!   deterministic event loop, producing [`harness::Metrics`].

pub mod broker;
pub mod contextml;
pub mod harness;
pub mod matching;
pub mod netsim;
pub mod trace;
