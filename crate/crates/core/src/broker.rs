//! The broker state machine.
//!
//! One `BrokerState` instantiates either broker of the federation (device or
//! cloud). All mutations happen through operations invoked by one logical
//! event loop; operations are atomic with respect to one another and return
//! the outbound network calls they produce. Message sends to a peer whose
//! link is down are queued and drained in FIFO order on reconnect.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::contextml::{
    is_fresh, ClientAdvertisement, ContextElement, MessageBody, MessageHeader, ProtocolMessage,
    ScopeRegistry,
};
use crate::matching::{matches, CallbackMode, Priority, Subscription};
use crate::trace::{EventKind, TraceLog, TraceRow};

pub type BrokerId = String;
pub type ClientId = String;

/// Minimum remaining validity for an element to be served from cache at
/// subscribe time. Keeps cache answers deliverable: an entry lapsing within
/// the delivery latency would reach the subscriber already invalid.
pub const CACHE_SERVE_MARGIN_MS: u64 = 1_000;

#[derive(Debug, Error, PartialEq)]
pub enum BrokerError {
    #[error("client {0} is already registered")]
    DuplicateClientId(String),
    #[error("subscription {0} is already expired")]
    ExpiredSubscription(String),
    #[error("element {0} is already expired")]
    StaleElement(String),
    #[error("scope {0} has no provider and no cached value")]
    UnresolvableDependency(String),
    #[error("scope {0} is not registered")]
    UnknownScope(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("broker topology contains a cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<BrokerId>),
    #[error("broker topology is disconnected: components {0:?}")]
    Disconnected(Vec<Vec<BrokerId>>),
    #[error("broker topology invalid: {0}")]
    Invalid(String),
}

/// Checks that the undirected broker graph is a tree: acyclic and connected.
pub fn validate_topology(
    broker_ids: &[BrokerId],
    edges: &[(BrokerId, BrokerId)],
) -> Result<(), TopologyError> {
    if broker_ids.is_empty() {
        return Err(TopologyError::Invalid("at least one broker required".into()));
    }
    let ids: BTreeSet<&BrokerId> = broker_ids.iter().collect();
    if ids.len() != broker_ids.len() {
        return Err(TopologyError::Invalid("duplicate broker id".into()));
    }
    let mut adjacency: BTreeMap<&BrokerId, Vec<&BrokerId>> = BTreeMap::new();
    for (a, b) in edges {
        if !ids.contains(a) || !ids.contains(b) {
            return Err(TopologyError::Invalid(format!(
                "edge ({a}, {b}) references unknown broker"
            )));
        }
        if a == b {
            return Err(TopologyError::CycleDetected(vec![a.clone(), b.clone()]));
        }
        adjacency.entry(a).or_default().push(b);
        adjacency.entry(b).or_default().push(a);
    }
    // DFS with parent tracking: a visited non-parent neighbour closes a cycle.
    let mut visited: BTreeMap<&BrokerId, Option<&BrokerId>> = BTreeMap::new();
    let start = &broker_ids[0];
    let mut stack = vec![(start, None::<&BrokerId>)];
    while let Some((node, parent)) = stack.pop() {
        if visited.contains_key(node) {
            continue;
        }
        visited.insert(node, parent);
        if let Some(neighbours) = adjacency.get(node) {
            for n in neighbours {
                if Some(*n) == parent {
                    continue;
                }
                if visited.contains_key(n) {
                    // Reconstruct the cycle path node..start-of-overlap..n.
                    let mut path = vec![(*n).clone(), node.clone()];
                    let mut cur = parent;
                    while let Some(p) = cur {
                        path.push(p.clone());
                        if p == *n {
                            break;
                        }
                        cur = visited.get(p).copied().flatten();
                    }
                    return Err(TopologyError::CycleDetected(path));
                }
                stack.push((n, Some(node)));
            }
        }
    }
    if visited.len() != broker_ids.len() {
        let mut components: Vec<Vec<BrokerId>> = Vec::new();
        let reached: Vec<BrokerId> = broker_ids
            .iter()
            .filter(|b| visited.contains_key(b))
            .cloned()
            .collect();
        let missing: Vec<BrokerId> = broker_ids
            .iter()
            .filter(|b| !visited.contains_key(b))
            .cloned()
            .collect();
        components.push(reached);
        components.push(missing);
        return Err(TopologyError::Disconnected(components));
    }
    Ok(())
}

/// Destination (and origin) of a subscription entry: a local client or a
/// direct neighbour broker.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Destination {
    LocalClient(ClientId),
    NeighborBroker(BrokerId),
}

impl Destination {
    pub fn id(&self) -> &str {
        match self {
            Destination::LocalClient(id) | Destination::NeighborBroker(id) => id,
        }
    }
}

/// Address of an outbound network call.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Address {
    Client(ClientId),
    Broker(BrokerId),
}

impl Address {
    pub fn id(&self) -> &str {
        match self {
            Address::Client(id) | Address::Broker(id) => id,
        }
    }
}

/// One network call: usually a single message, more than one only for bulk
/// flushes, which batch several subscriptions into one call.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub messages: Vec<ProtocolMessage>,
}

impl Envelope {
    pub fn single(msg: ProtocolMessage) -> Envelope {
        Envelope {
            messages: vec![msg],
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        self.messages.iter().map(|m| m.payload_bytes()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: Address,
    pub envelope: Envelope,
}

/// Effects of one broker operation.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct BrokerOutput {
    pub outbound: Vec<Outbound>,
}

impl BrokerOutput {
    pub fn single(to: Address, envelope: Envelope) -> BrokerOutput {
        BrokerOutput {
            outbound: vec![Outbound { to, envelope }],
        }
    }

    pub fn extend(&mut self, other: BrokerOutput) {
        self.outbound.extend(other.outbound);
    }

    fn push(&mut self, to: Address, envelope: Envelope) {
        self.outbound.push(Outbound { to, envelope });
    }

    fn merge(&mut self, other: BrokerOutput) {
        self.outbound.extend(other.outbound);
    }
}

#[derive(Debug, Clone)]
struct RegEntry {
    adv: ClientAdvertisement,
    /// Broker this entry was learned from: ourselves for local clients,
    /// otherwise the neighbour that advertised it, which is exactly the next
    /// hop on the unique tree path toward the owning broker.
    owner: BrokerId,
}

/// An entry (σ, D) in the subscription table.
#[derive(Debug, Clone)]
pub struct SubscriptionEntry {
    pub subscription: Subscription,
    pub destination: Destination,
}

#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub element: ContextElement,
    pub inserted_at: u64,
}

/// Queue of deferred low-priority subscriptions.
#[derive(Debug, Clone)]
pub struct BulkQueue {
    pending: Vec<Subscription>,
    deadline: Option<u64>,
    pub bulk_limit: usize,
}

impl BulkQueue {
    fn new(bulk_limit: usize) -> BulkQueue {
        BulkQueue {
            pending: Vec::new(),
            deadline: None,
            bulk_limit,
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn deadline(&self) -> Option<u64> {
        self.deadline
    }
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// Interval of the periodic registration table exchange.
    pub reg_exchange_interval_ms: u64,
    pub bulk_mode: bool,
    pub cache_enabled: bool,
    pub bulk_limit: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            reg_exchange_interval_ms: 30_000,
            bulk_mode: false,
            cache_enabled: true,
            bulk_limit: 5,
        }
    }
}

/// Counters the harness folds into run metrics.
#[derive(Debug, Default, Clone)]
pub struct BrokerCounters {
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub dropped_expired: u64,
    pub bulk_flushes: u64,
    pub bulk_size_flushes: u64,
    pub bulk_deadline_flushes: u64,
    pub bulk_enqueued: u64,
    pub bulk_batch_calls: u64,
}

/// Flush cause, for the call-count accounting of bulk mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushCause {
    SizeLimit,
    Deadline,
}

/// Broker state: local clients, registration table, subscription table,
/// cache, bulk queue and per-peer outbound queues.
#[derive(Debug)]
pub struct BrokerState {
    broker_id: BrokerId,
    neighbors: BTreeSet<BrokerId>,
    local_clients: BTreeMap<ClientId, ClientAdvertisement>,
    reg_table: BTreeMap<ClientId, RegEntry>,
    sub_table: Vec<SubscriptionEntry>,
    held: BTreeSet<String>,
    cache: BTreeMap<(String, String), CacheEntry>,
    bulk_queue: BulkQueue,
    pending_outbound: BTreeMap<Address, VecDeque<Envelope>>,
    link_down: BTreeSet<Address>,
    pub config: BrokerConfig,
    pub counters: BrokerCounters,
    next_msg: u64,
}

impl BrokerState {
    pub fn new(broker_id: impl Into<String>, neighbors: Vec<BrokerId>, config: BrokerConfig) -> Self {
        let bulk_limit = config.bulk_limit;
        BrokerState {
            broker_id: broker_id.into(),
            neighbors: neighbors.into_iter().collect(),
            local_clients: BTreeMap::new(),
            reg_table: BTreeMap::new(),
            sub_table: Vec::new(),
            held: BTreeSet::new(),
            cache: BTreeMap::new(),
            bulk_queue: BulkQueue::new(bulk_limit),
            pending_outbound: BTreeMap::new(),
            link_down: BTreeSet::new(),
            config,
            counters: BrokerCounters::default(),
            next_msg: 0,
        }
    }

    pub fn broker_id(&self) -> &str {
        &self.broker_id
    }

    pub fn neighbors(&self) -> &BTreeSet<BrokerId> {
        &self.neighbors
    }

    pub fn local_clients(&self) -> &BTreeMap<ClientId, ClientAdvertisement> {
        &self.local_clients
    }

    pub fn sub_table(&self) -> &[SubscriptionEntry] {
        &self.sub_table
    }

    pub fn held_subscriptions(&self) -> &BTreeSet<String> {
        &self.held
    }

    pub fn bulk_queue(&self) -> &BulkQueue {
        &self.bulk_queue
    }

    pub fn bulk_deadline(&self) -> Option<u64> {
        self.bulk_queue.deadline
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn knows_client(&self, client_id: &str) -> bool {
        self.reg_table.contains_key(client_id)
    }

    pub fn has_pending_outbound(&self) -> bool {
        self.pending_outbound.values().any(|q| !q.is_empty())
    }

    /// Queues an envelope for a peer without emitting; used by the harness
    /// when a link refuses a send that raced a connectivity edge.
    pub fn queue_outbound(
        &mut self,
        to: Address,
        envelope: Envelope,
        now: u64,
        trace: &mut TraceLog,
    ) {
        self.link_down.insert(to.clone());
        for msg in &envelope.messages {
            trace.push(
                self.row(now, EventKind::Queued)
                    .message_id(&msg.header.message_id)
                    .to_id(to.id()),
            );
        }
        self.pending_outbound.entry(to).or_default().push_back(envelope);
    }

    /// Header factory for messages the harness builds on the broker's behalf
    /// (lookup replies).
    pub fn make_header(&mut self, now: u64) -> MessageHeader {
        self.next_header(now)
    }

    fn next_header(&mut self, now: u64) -> MessageHeader {
        self.next_msg += 1;
        MessageHeader {
            message_id: format!("{}-m{:06}", self.broker_id, self.next_msg),
            sender_id: self.broker_id.clone(),
            sent_at: now,
        }
    }

    fn row(&self, now: u64, kind: EventKind) -> TraceRow {
        TraceRow::new(now, &self.broker_id, kind)
    }

    /// Emits immediately when the link to `to` is up, otherwise queues.
    fn enqueue_or_emit(
        &mut self,
        to: Address,
        envelope: Envelope,
        out: &mut BrokerOutput,
        now: u64,
        trace: &mut TraceLog,
    ) {
        if self.link_down.contains(&to) {
            for msg in &envelope.messages {
                trace.push(
                    self.row(now, EventKind::Queued)
                        .message_id(&msg.header.message_id)
                        .to_id(to.id()),
                );
            }
            self.pending_outbound.entry(to).or_default().push_back(envelope);
        } else {
            out.push(to, envelope);
        }
    }

    // -----------------------------------------------------------------
    // Registration
    // -----------------------------------------------------------------

    /// Registers a local client and pushes the new advertisement to every
    /// neighbour immediately (out-of-turn table update). Held subscriptions
    /// are re-evaluated since a capable provider may just have appeared.
    pub fn register_client(
        &mut self,
        adv: ClientAdvertisement,
        now: u64,
        trace: &mut TraceLog,
    ) -> Result<BrokerOutput, BrokerError> {
        if self.local_clients.contains_key(&adv.client_id)
            || self.reg_table.contains_key(&adv.client_id)
        {
            return Err(BrokerError::DuplicateClientId(adv.client_id));
        }
        trace.push(
            self.row(now, EventKind::Register)
                .from_id(&adv.client_id)
                .scope(&adv.served_scopes.join(",")),
        );
        self.local_clients.insert(adv.client_id.clone(), adv.clone());
        self.reg_table.insert(
            adv.client_id.clone(),
            RegEntry {
                adv: adv.clone(),
                owner: self.broker_id.clone(),
            },
        );
        let mut out = BrokerOutput::default();
        let neighbors: Vec<BrokerId> = self.neighbors.iter().cloned().collect();
        for neighbor in neighbors {
            let header = self.next_header(now);
            trace.push(
                self.row(now, EventKind::RegPush)
                    .message_id(&header.message_id)
                    .from_id(&adv.client_id)
                    .to_id(&neighbor),
            );
            let msg = ProtocolMessage::new(
                header,
                MessageBody::RegTableUpdate {
                    origin_broker_id: self.broker_id.clone(),
                    advertisements: vec![adv.clone()],
                },
            );
            self.enqueue_or_emit(
                Address::Broker(neighbor),
                Envelope::single(msg),
                &mut out,
                now,
                trace,
            );
        }
        let released = self.re_evaluate_held(now, trace);
        out.merge(released);
        Ok(out)
    }

    /// Periodic table exchange: the full registration table (split horizon:
    /// entries learned from the target are skipped) goes to each neighbour
    /// as one network call.
    pub fn periodic_reg_exchange(&mut self, now: u64, trace: &mut TraceLog) -> BrokerOutput {
        let mut out = BrokerOutput::default();
        let neighbors: Vec<BrokerId> = self.neighbors.iter().cloned().collect();
        for neighbor in neighbors {
            let advs: Vec<ClientAdvertisement> = self
                .reg_table
                .values()
                .filter(|e| e.owner != neighbor)
                .map(|e| e.adv.clone())
                .collect();
            if advs.is_empty() {
                continue;
            }
            let header = self.next_header(now);
            trace.push(
                self.row(now, EventKind::RegExchange)
                    .message_id(&header.message_id)
                    .to_id(&neighbor),
            );
            let msg = ProtocolMessage::new(
                header,
                MessageBody::RegTableUpdate {
                    origin_broker_id: self.broker_id.clone(),
                    advertisements: advs,
                },
            );
            self.enqueue_or_emit(
                Address::Broker(neighbor),
                Envelope::single(msg),
                &mut out,
                now,
                trace,
            );
        }
        out
    }

    /// Merges a registration table update from a neighbour. Newer
    /// `lastUpdated` wins, ties keep the existing entry. Accepted entries are
    /// recorded as learned-from-sender and relayed to the other neighbours so
    /// new client availability disseminates through the tree.
    pub fn handle_reg_update(
        &mut self,
        sender: &BrokerId,
        advertisements: Vec<ClientAdvertisement>,
        now: u64,
        trace: &mut TraceLog,
    ) -> BrokerOutput {
        let mut changed: Vec<ClientAdvertisement> = Vec::new();
        for adv in advertisements {
            if self.local_clients.contains_key(&adv.client_id) {
                continue;
            }
            let accept = match self.reg_table.get(&adv.client_id) {
                None => true,
                Some(existing) => adv.last_updated > existing.adv.last_updated,
            };
            if accept {
                self.reg_table.insert(
                    adv.client_id.clone(),
                    RegEntry {
                        adv: adv.clone(),
                        owner: sender.clone(),
                    },
                );
                changed.push(adv);
            }
        }
        trace.push(
            self.row(now, EventKind::RegMerge)
                .from_id(sender)
                .subscription(&changed.len().to_string()),
        );
        let mut out = BrokerOutput::default();
        if !changed.is_empty() {
            let others: Vec<BrokerId> = self
                .neighbors
                .iter()
                .filter(|n| *n != sender)
                .cloned()
                .collect();
            for neighbor in others {
                let header = self.next_header(now);
                trace.push(
                    self.row(now, EventKind::RegPush)
                        .message_id(&header.message_id)
                        .from_id(sender)
                        .to_id(&neighbor),
                );
                let msg = ProtocolMessage::new(
                    header,
                    MessageBody::RegTableUpdate {
                        origin_broker_id: self.broker_id.clone(),
                        advertisements: changed.clone(),
                    },
                );
                self.enqueue_or_emit(
                    Address::Broker(neighbor),
                    Envelope::single(msg),
                    &mut out,
                    now,
                    trace,
                );
            }
            let released = self.re_evaluate_held(now, trace);
            out.merge(released);
        }
        out
    }

    // -----------------------------------------------------------------
    // Subscription routing
    // -----------------------------------------------------------------

    /// Stores (σ, from) and routes σ: answered from cache when possible,
    /// otherwise forwarded to a capable local provider, otherwise routed one
    /// hop toward a broker that can satisfy it, otherwise held until a
    /// capable provider registers.
    pub fn subscribe(
        &mut self,
        sub: Subscription,
        from: Destination,
        now: u64,
        trace: &mut TraceLog,
    ) -> Result<BrokerOutput, BrokerError> {
        if sub.expired(now) {
            return Err(BrokerError::ExpiredSubscription(sub.id));
        }
        trace.push(
            self.row(now, EventKind::SubRecv)
                .from_id(from.id())
                .scope(&sub.scope)
                .subscription(&sub.id),
        );
        if let Destination::NeighborBroker(b) = &from {
            debug_assert!(
                self.neighbors.contains(b),
                "subscription origin {b} is not a direct neighbour of {}",
                self.broker_id
            );
        }
        self.sub_table.push(SubscriptionEntry {
            subscription: sub.clone(),
            destination: from.clone(),
        });
        trace.push(
            self.row(now, EventKind::SubStore)
                .from_id(from.id())
                .scope(&sub.scope)
                .subscription(&sub.id),
        );
        let mut out = BrokerOutput::default();
        if self.config.cache_enabled {
            if let Some(element) = self.cache_match(&sub, now) {
                self.counters.cache_hits += 1;
                trace.push(
                    self.row(now, EventKind::CacheHit)
                        .scope(&sub.scope)
                        .subscription(&sub.id)
                        .cache(true),
                );
                self.deliver_matched(&element, &[sub.id.clone()], &from, now, &mut out, trace);
                if sub.one_time {
                    self.remove_subscription(&sub.id);
                }
                return Ok(out);
            }
            self.counters.cache_misses += 1;
            trace.push(
                self.row(now, EventKind::CacheMiss)
                    .scope(&sub.scope)
                    .subscription(&sub.id)
                    .cache(false),
            );
        }
        self.route_subscription(&sub, &from, now, &mut out, trace);
        Ok(out)
    }

    /// First fresh cached element matching σ, in deterministic key order.
    /// Entries about to lapse are not served: the notification must still be
    /// valid when it reaches the subscriber, so a minimum remaining validity
    /// covering worst-case delivery latency is required.
    fn cache_match(&mut self, sub: &Subscription, now: u64) -> Option<ContextElement> {
        // Expired entries met along the way are evicted.
        let mut expired: Vec<(String, String)> = Vec::new();
        let mut found: Option<ContextElement> = None;
        for (key, entry) in &self.cache {
            if !is_fresh(&entry.element, now) {
                expired.push(key.clone());
                continue;
            }
            if entry.element.expiry - now < CACHE_SERVE_MARGIN_MS {
                continue;
            }
            if matches(sub, &entry.element, now) {
                found = Some(entry.element.clone());
                break;
            }
        }
        for key in expired {
            self.cache.remove(&key);
        }
        found
    }

    /// Sends a matched element back toward a subscription origin: local
    /// clients get a notify, neighbour brokers a forward.
    fn deliver_matched(
        &mut self,
        element: &ContextElement,
        sub_ids: &[String],
        to: &Destination,
        now: u64,
        out: &mut BrokerOutput,
        trace: &mut TraceLog,
    ) {
        match to {
            Destination::LocalClient(client) => {
                for id in sub_ids {
                    let header = self.next_header(now);
                    trace.push(
                        self.row(now, EventKind::NotifySend)
                            .message_id(&header.message_id)
                            .from_id(&element.instance_key())
                            .to_id(client)
                            .scope(&element.scope)
                            .subscription(id),
                    );
                    let msg = ProtocolMessage::new(
                        header,
                        MessageBody::Notify {
                            element: element.clone(),
                            subscription_id: id.clone(),
                        },
                    );
                    self.enqueue_or_emit(
                        Address::Client(client.clone()),
                        Envelope::single(msg),
                        out,
                        now,
                        trace,
                    );
                }
            }
            Destination::NeighborBroker(broker) => {
                let header = self.next_header(now);
                trace.push(
                    self.row(now, EventKind::FwdSend)
                        .message_id(&header.message_id)
                        .from_id(&element.instance_key())
                        .to_id(broker)
                        .scope(&element.scope)
                        .subscription(&sub_ids.join(",")),
                );
                let msg = ProtocolMessage::new(
                    header,
                    MessageBody::Forward {
                        element: element.clone(),
                        matched_subscription_ids: sub_ids.to_vec(),
                    },
                );
                self.enqueue_or_emit(
                    Address::Broker(broker.clone()),
                    Envelope::single(msg),
                    out,
                    now,
                    trace,
                );
            }
        }
    }

    /// Local provider able to serve `scope`, smallest client id first.
    fn local_provider(&self, scope: &str) -> Option<ClientId> {
        self.local_clients
            .values()
            .filter(|adv| adv.role.provides() && adv.served_scopes.iter().any(|s| s == scope))
            .map(|adv| adv.client_id.clone())
            .next()
    }

    /// Next hop toward a remote provider for `scope`: entries are ranked by
    /// (owner, client id), so routing is deterministic when several brokers
    /// can satisfy the subscription. Entries learned from `exclude` are
    /// skipped to avoid routing a subscription back where it came from.
    fn remote_next_hop(&self, scope: &str, exclude: Option<&BrokerId>) -> Option<BrokerId> {
        self.reg_table
            .values()
            .filter(|e| {
                e.owner != self.broker_id
                    && Some(&e.owner) != exclude
                    && e.adv.role.provides()
                    && e.adv.served_scopes.iter().any(|s| s == scope)
            })
            .map(|e| (e.owner.clone(), e.adv.client_id.clone()))
            .min()
            .map(|(owner, _)| owner)
    }

    fn route_subscription(
        &mut self,
        sub: &Subscription,
        from: &Destination,
        now: u64,
        out: &mut BrokerOutput,
        trace: &mut TraceLog,
    ) {
        if let Some(provider) = self.local_provider(&sub.scope) {
            let header = self.next_header(now);
            trace.push(
                self.row(now, EventKind::SubFwdProvider)
                    .message_id(&header.message_id)
                    .to_id(&provider)
                    .scope(&sub.scope)
                    .subscription(&sub.id),
            );
            let msg = ProtocolMessage::new(header, MessageBody::Subscribe(sub.clone()));
            self.enqueue_or_emit(
                Address::Client(provider),
                Envelope::single(msg),
                out,
                now,
                trace,
            );
            self.held.remove(&sub.id);
            return;
        }
        let exclude = match from {
            Destination::NeighborBroker(b) => Some(b),
            Destination::LocalClient(_) => None,
        };
        if let Some(next_hop) = self.remote_next_hop(&sub.scope, exclude) {
            self.held.remove(&sub.id);
            if self.config.bulk_mode && sub.priority == Priority::Low {
                let flush = self.bulk_enqueue(sub.clone(), now, trace);
                out.merge(flush);
                return;
            }
            let header = self.next_header(now);
            trace.push(
                self.row(now, EventKind::SubFwdBroker)
                    .message_id(&header.message_id)
                    .to_id(&next_hop)
                    .scope(&sub.scope)
                    .subscription(&sub.id),
            );
            let msg = ProtocolMessage::new(
                header,
                MessageBody::SubTableUpdate {
                    origin_broker_id: self.broker_id.clone(),
                    subscription: sub.clone(),
                },
            );
            self.enqueue_or_emit(
                Address::Broker(next_hop),
                Envelope::single(msg),
                out,
                now,
                trace,
            );
            return;
        }
        // No capable provider known yet; held until a registration or table
        // update reveals one.
        self.held.insert(sub.id.clone());
        trace.push(
            self.row(now, EventKind::SubHold)
                .scope(&sub.scope)
                .subscription(&sub.id),
        );
    }

    /// Re-runs routing for held subscriptions; called whenever registration
    /// knowledge changes.
    fn re_evaluate_held(&mut self, now: u64, trace: &mut TraceLog) -> BrokerOutput {
        let mut out = BrokerOutput::default();
        if self.held.is_empty() {
            return out;
        }
        let held_ids: Vec<String> = self.held.iter().cloned().collect();
        for id in held_ids {
            let entry = self
                .sub_table
                .iter()
                .find(|e| e.subscription.id == id)
                .map(|e| (e.subscription.clone(), e.destination.clone()));
            let Some((sub, from)) = entry else {
                self.held.remove(&id);
                continue;
            };
            if sub.expired(now) {
                continue;
            }
            self.route_subscription(&sub, &from, now, &mut out, trace);
        }
        out
    }

    fn remove_subscription(&mut self, sub_id: &str) {
        self.sub_table.retain(|e| e.subscription.id != sub_id);
        self.held.remove(sub_id);
        self.bulk_queue.pending.retain(|s| s.id != sub_id);
        if self.bulk_queue.pending.is_empty() {
            self.bulk_queue.deadline = None;
        }
    }

    // -----------------------------------------------------------------
    // Publications and forwards
    // -----------------------------------------------------------------

    /// Handles a provider publication: computes the deduplicated destination
    /// set over the subscription table, notifies local subscribers, emits at
    /// most one forward per neighbour, caches the element when permitted and
    /// removes matched one-time subscriptions.
    pub fn handle_publish(
        &mut self,
        element: ContextElement,
        from_provider: &ClientId,
        _matched_hint: &[String],
        now: u64,
        trace: &mut TraceLog,
    ) -> Result<BrokerOutput, BrokerError> {
        if !is_fresh(&element, now) {
            return Err(BrokerError::StaleElement(element.instance_key()));
        }
        trace.push(
            self.row(now, EventKind::PubRecv)
                .from_id(from_provider)
                .scope(&element.scope),
        );
        Ok(self.dispatch_element(element, None, now, trace))
    }

    /// Handles a forward from a neighbour: destinations are the entries whose
    /// subscription id was named by the sender plus any additional local
    /// matches; the element is never forwarded back to the sender.
    pub fn handle_forward(
        &mut self,
        element: ContextElement,
        sub_ids: &[String],
        from_neighbor: &BrokerId,
        now: u64,
        trace: &mut TraceLog,
    ) -> BrokerOutput {
        trace.push(
            self.row(now, EventKind::FwdRecv)
                .from_id(from_neighbor)
                .scope(&element.scope)
                .subscription(&sub_ids.join(",")),
        );
        if !is_fresh(&element, now) {
            self.counters.dropped_expired += 1;
            trace.push(
                self.row(now, EventKind::DropExpired)
                    .from_id(from_neighbor)
                    .scope(&element.scope),
            );
            return BrokerOutput::default();
        }
        self.dispatch_element(element, Some((from_neighbor.clone(), sub_ids)), now, trace)
    }

    /// Common matching and emission path for publish and forward.
    fn dispatch_element(
        &mut self,
        element: ContextElement,
        restrict: Option<(BrokerId, &[String])>,
        now: u64,
        trace: &mut TraceLog,
    ) -> BrokerOutput {
        let mut out = BrokerOutput::default();
        // Matched entries in table order.
        let mut local_matches: Vec<(ClientId, Subscription)> = Vec::new();
        let mut neighbor_matches: BTreeMap<BrokerId, Vec<String>> = BTreeMap::new();
        let mut direct_matches: Vec<Subscription> = Vec::new();
        let mut matched_ids: Vec<String> = Vec::new();
        let mut all_broker_routed = true;
        for entry in &self.sub_table {
            if !matches(&entry.subscription, &element, now) {
                continue;
            }
            match &entry.destination {
                Destination::LocalClient(client) => {
                    matched_ids.push(entry.subscription.id.clone());
                    if entry.subscription.callback == CallbackMode::Direct {
                        all_broker_routed = false;
                    }
                    local_matches.push((client.clone(), entry.subscription.clone()));
                }
                Destination::NeighborBroker(neighbor) => {
                    // Forwards are restricted to the subscription ids the
                    // sender named; a tree topology makes loops impossible
                    // but the guard is kept explicit.
                    if let Some((from, ids)) = &restrict {
                        assert_ne!(
                            neighbor, from,
                            "subscription entry routes back to the forward sender"
                        );
                        if !ids.contains(&entry.subscription.id) {
                            continue;
                        }
                    }
                    matched_ids.push(entry.subscription.id.clone());
                    let direct_endpoint_known = entry.subscription.callback
                        == CallbackMode::Direct
                        && self.reg_table.contains_key(&entry.subscription.subscriber_id);
                    if entry.subscription.callback == CallbackMode::Direct {
                        all_broker_routed = false;
                    }
                    if direct_endpoint_known {
                        direct_matches.push(entry.subscription.clone());
                    } else {
                        // Broker-routed, and also the fallback for a direct
                        // callback whose subscriber endpoint is unknown.
                        neighbor_matches
                            .entry(neighbor.clone())
                            .or_default()
                            .push(entry.subscription.id.clone());
                    }
                }
            }
        }
        // At most one forward per neighbour per publication.
        for (neighbor, ids) in &neighbor_matches {
            self.deliver_matched(
                &element,
                ids,
                &Destination::NeighborBroker(neighbor.clone()),
                now,
                &mut out,
                trace,
            );
        }
        // Direct-callback subscriptions from remote subscribers are notified
        // straight at the subscriber endpoint, bypassing broker routing.
        for sub in &direct_matches {
            self.deliver_matched(
                &element,
                &[sub.id.clone()],
                &Destination::LocalClient(sub.subscriber_id.clone()),
                now,
                &mut out,
                trace,
            );
        }
        for (client, sub) in &local_matches {
            self.deliver_matched(
                &element,
                &[sub.id.clone()],
                &Destination::LocalClient(client.clone()),
                now,
                &mut out,
                trace,
            );
        }
        if self.config.cache_enabled && all_broker_routed {
            let key = (element.entity.key(), element.scope.clone());
            trace.push(
                self.row(now, EventKind::CacheInsert)
                    .scope(&element.scope)
                    .from_id(&element.provider_id),
            );
            self.cache.insert(
                key,
                CacheEntry {
                    element: element.clone(),
                    inserted_at: now,
                },
            );
        }
        // One-time subscriptions are satisfied exactly once.
        for id in matched_ids {
            let one_time = self
                .sub_table
                .iter()
                .find(|e| e.subscription.id == id)
                .map(|e| e.subscription.one_time)
                .unwrap_or(false);
            if one_time {
                self.remove_subscription(&id);
            }
        }
        out
    }

    // -----------------------------------------------------------------
    // Cache
    // -----------------------------------------------------------------

    /// Fresh cached element for (entity, scope); expired entries are evicted
    /// on touch.
    pub fn cache_lookup(
        &mut self,
        entity_key: &str,
        scope: &str,
        now: u64,
    ) -> Option<ContextElement> {
        let key = (entity_key.to_string(), scope.to_string());
        match self.cache.get(&key) {
            None => None,
            Some(entry) if is_fresh(&entry.element, now) => Some(entry.element.clone()),
            Some(_) => {
                self.cache.remove(&key);
                None
            }
        }
    }

    /// Inserts an element directly (used by tests and the proxy path).
    pub fn cache_insert(&mut self, element: ContextElement, now: u64) {
        debug_assert!(element.expiry > now);
        let key = (element.entity.key(), element.scope.clone());
        self.cache.insert(
            key,
            CacheEntry {
                element,
                inserted_at: now,
            },
        );
    }

    // -----------------------------------------------------------------
    // Bulk mode
    // -----------------------------------------------------------------

    /// Adds one LOW-priority subscription to the bulk queue. The flush
    /// deadline is recomputed as now + (earliest pending expiry - now) / 2 on
    /// every addition; reaching the bulk limit flushes immediately.
    pub fn bulk_enqueue(
        &mut self,
        sub: Subscription,
        now: u64,
        trace: &mut TraceLog,
    ) -> BrokerOutput {
        debug_assert!(sub.priority == Priority::Low && self.config.bulk_mode);
        self.counters.bulk_enqueued += 1;
        self.bulk_queue.pending.push(sub.clone());
        let min_expiry = self
            .bulk_queue
            .pending
            .iter()
            .map(|s| s.expiry)
            .min()
            .expect("pending non-empty");
        self.bulk_queue.deadline = Some(now + min_expiry.saturating_sub(now) / 2);
        trace.push(
            self.row(now, EventKind::BulkEnqueue)
                .scope(&sub.scope)
                .subscription(&sub.id),
        );
        if self.bulk_queue.pending.len() >= self.bulk_queue.bulk_limit {
            return self.bulk_flush(now, FlushCause::SizeLimit, trace);
        }
        BrokerOutput::default()
    }

    /// Flushes the bulk queue: all surviving pending subscriptions leave in a
    /// single network call per next hop. Expired ones are dropped, ones
    /// already satisfied (no longer in the subscription table) are skipped.
    pub fn bulk_flush(
        &mut self,
        now: u64,
        cause: FlushCause,
        trace: &mut TraceLog,
    ) -> BrokerOutput {
        let mut out = BrokerOutput::default();
        if self.bulk_queue.pending.is_empty() {
            self.bulk_queue.deadline = None;
            return out;
        }
        let pending = std::mem::take(&mut self.bulk_queue.pending);
        self.bulk_queue.deadline = None;
        self.counters.bulk_flushes += 1;
        match cause {
            FlushCause::SizeLimit => self.counters.bulk_size_flushes += 1,
            FlushCause::Deadline => self.counters.bulk_deadline_flushes += 1,
        }
        let mut per_hop: BTreeMap<BrokerId, Vec<Subscription>> = BTreeMap::new();
        let mut sent_ids: Vec<String> = Vec::new();
        for sub in pending {
            if sub.expired(now) {
                self.counters.dropped_expired += 1;
                trace.push(
                    self.row(now, EventKind::DropExpired)
                        .scope(&sub.scope)
                        .subscription(&sub.id),
                );
                continue;
            }
            if !self.sub_table.iter().any(|e| e.subscription.id == sub.id) {
                // Satisfied while queued.
                continue;
            }
            match self.remote_next_hop(&sub.scope, None) {
                Some(hop) => {
                    sent_ids.push(sub.id.clone());
                    per_hop.entry(hop).or_default().push(sub);
                }
                None => {
                    self.held.insert(sub.id.clone());
                    trace.push(
                        self.row(now, EventKind::SubHold)
                            .scope(&sub.scope)
                            .subscription(&sub.id),
                    );
                }
            }
        }
        for (hop, subs) in per_hop {
            let header = self.next_header(now);
            trace.push(
                self.row(now, EventKind::BulkFlush)
                    .message_id(&header.message_id)
                    .to_id(&hop)
                    .scope(match cause {
                        FlushCause::SizeLimit => "size",
                        FlushCause::Deadline => "deadline",
                    })
                    .subscription(&subs.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(",")),
            );
            self.counters.bulk_batch_calls += 1;
            let mut messages = Vec::with_capacity(subs.len());
            for (i, sub) in subs.into_iter().enumerate() {
                let mut h = header.clone();
                if i > 0 {
                    h.message_id = format!("{}-{}", header.message_id, i);
                }
                messages.push(ProtocolMessage::new(
                    h,
                    MessageBody::SubTableUpdate {
                        origin_broker_id: self.broker_id.clone(),
                        subscription: sub,
                    },
                ));
            }
            self.enqueue_or_emit(Address::Broker(hop), Envelope { messages }, &mut out, now, trace);
        }
        out
    }

    // -----------------------------------------------------------------
    // Proxy queries and lookup
    // -----------------------------------------------------------------

    /// Resolves the dependency closure of σ's scope: each dependency is
    /// satisfied from cache when fresh, otherwise planned as a provider
    /// query; the target scope is always queried last.
    pub fn proxy_resolve(
        &mut self,
        sub: &Subscription,
        registry: &ScopeRegistry,
        now: u64,
    ) -> Result<ProxyPlan, BrokerError> {
        let order = registry
            .dependency_order(&sub.scope)
            .map_err(|_| BrokerError::UnknownScope(sub.scope.clone()))?;
        let mut plan = ProxyPlan::default();
        for scope in order {
            let is_target = scope == sub.scope;
            if !is_target {
                let cached = match &sub.entity {
                    Some(entity) => self.cache_lookup(&entity.key(), &scope, now),
                    None => {
                        // No entity constraint: any fresh element of the scope.
                        let found = self
                            .cache
                            .iter()
                            .find(|((_, s), entry)| *s == scope && is_fresh(&entry.element, now))
                            .map(|(_, entry)| entry.element.clone());
                        found
                    }
                };
                if let Some(element) = cached {
                    plan.cached.push((scope, element));
                    continue;
                }
            }
            let has_provider = self.local_provider(&scope).is_some()
                || self.remote_next_hop(&scope, None).is_some();
            if !has_provider {
                return Err(BrokerError::UnresolvableDependency(scope));
            }
            plan.queries.push(scope);
        }
        Ok(plan)
    }

    /// Endpoint of a provider serving `scope`: local providers win over
    /// remote ones, then smallest owner and client id.
    pub fn lookup(&self, scope: &str) -> Option<String> {
        self.reg_table
            .values()
            .filter(|e| e.adv.role.provides() && e.adv.served_scopes.iter().any(|s| s == scope))
            .min_by_key(|e| {
                (
                    e.owner != self.broker_id,
                    e.owner.clone(),
                    e.adv.client_id.clone(),
                )
            })
            .map(|e| e.adv.endpoint.clone())
    }

    // -----------------------------------------------------------------
    // Connectivity and housekeeping
    // -----------------------------------------------------------------

    /// Marks the link to `peer` up or down. Going down starts queueing
    /// outbound messages; coming up drains the queue in FIFO order, dropping
    /// messages whose subscription or element has expired.
    pub fn connectivity_changed(
        &mut self,
        peer: Address,
        is_up: bool,
        now: u64,
        trace: &mut TraceLog,
    ) -> BrokerOutput {
        let mut out = BrokerOutput::default();
        if !is_up {
            self.link_down.insert(peer);
            return out;
        }
        self.link_down.remove(&peer);
        let Some(queue) = self.pending_outbound.remove(&peer) else {
            return out;
        };
        let mut drained = 0usize;
        for envelope in queue {
            let mut live: Vec<ProtocolMessage> = Vec::new();
            for msg in envelope.messages {
                if message_expired(&msg, now) {
                    self.counters.dropped_expired += 1;
                    trace.push(
                        self.row(now, EventKind::DropExpired)
                            .message_id(&msg.header.message_id)
                            .to_id(peer.id()),
                    );
                } else {
                    live.push(msg);
                }
            }
            if !live.is_empty() {
                drained += live.len();
                out.push(peer.clone(), Envelope { messages: live });
            }
        }
        trace.push(
            self.row(now, EventKind::Drained)
                .to_id(peer.id())
                .subscription(&drained.to_string()),
        );
        out
    }

    /// Removes expired cache entries, subscription entries and queued items.
    /// Idempotent at fixed `now`.
    pub fn expire_housekeeping(&mut self, now: u64, trace: &mut TraceLog) {
        self.cache.retain(|_, entry| is_fresh(&entry.element, now));
        let expired_ids: Vec<String> = self
            .sub_table
            .iter()
            .filter(|e| e.subscription.expired(now))
            .map(|e| e.subscription.id.clone())
            .collect();
        for id in &expired_ids {
            self.held.remove(id);
        }
        self.sub_table.retain(|e| !e.subscription.expired(now));
        let before = self.bulk_queue.pending.len();
        self.bulk_queue.pending.retain(|s| !s.expired(now));
        let dropped_bulk = before - self.bulk_queue.pending.len();
        if self.bulk_queue.pending.is_empty() {
            self.bulk_queue.deadline = None;
        }
        let mut dropped_outbound = 0usize;
        for queue in self.pending_outbound.values_mut() {
            for envelope in queue.iter_mut() {
                let before = envelope.messages.len();
                envelope.messages.retain(|m| !message_expired(m, now));
                dropped_outbound += before - envelope.messages.len();
            }
            queue.retain(|e| !e.messages.is_empty());
        }
        let dropped = dropped_bulk + dropped_outbound;
        if dropped > 0 {
            self.counters.dropped_expired += dropped as u64;
            trace.push(
                self.row(now, EventKind::DropExpired)
                    .subscription(&dropped.to_string()),
            );
        }
    }
}

/// Expiry rule for queued messages: subscriptions by their expiry, element
/// carriers by the element expiry, table exchanges never.
fn message_expired(msg: &ProtocolMessage, now: u64) -> bool {
    match &msg.body {
        MessageBody::Subscribe(sub) | MessageBody::SubTableUpdate { subscription: sub, .. } => {
            sub.expired(now)
        }
        MessageBody::Publish { element, .. }
        | MessageBody::Notify { element, .. }
        | MessageBody::Forward { element, .. } => !is_fresh(element, now),
        MessageBody::RegTableUpdate { .. }
        | MessageBody::LookupRequest { .. }
        | MessageBody::LookupReply { .. } => false,
    }
}

/// Result of proxy-query dependency resolution.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ProxyPlan {
    /// Scopes to query, dependency order, target last.
    pub queries: Vec<String>,
    /// Dependencies satisfied from cache; their atoms feed the target query
    /// input parameters.
    pub cached: Vec<(String, ContextElement)>,
}
