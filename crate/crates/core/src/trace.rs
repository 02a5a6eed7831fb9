//! Simulation trace log.
//!
//! One line per state transition, tab-separated:
//! `simTimeMs  brokerId  kind  messageId  from  to  scope  subscriptionId  cacheHit`.
//! Empty fields are written as `-`. The format is a contract for trace-based
//! acceptance tests, so changes here are breaking.

use std::fmt::Write as _;

/// Kind of a traced state transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Client registration accepted at a broker.
    Register,
    /// Out-of-turn registration table push after a registration.
    RegPush,
    /// Periodic registration table exchange send.
    RegExchange,
    /// Registration table update merged from a neighbour.
    RegMerge,
    /// Subscription received (from a local client or a neighbour broker).
    SubRecv,
    /// Subscription entry stored in the subscription table.
    SubStore,
    /// Subscription forwarded to a capable local provider.
    SubFwdProvider,
    /// Subscription routed toward a neighbour broker (subTableUpdate).
    SubFwdBroker,
    /// Subscription held until a capable provider becomes known.
    SubHold,
    /// Cache answered a subscription at subscribe time.
    CacheHit,
    /// Cache could not answer a subscription at subscribe time.
    CacheMiss,
    /// Element inserted into the broker cache.
    CacheInsert,
    /// Publication received from a provider.
    PubRecv,
    /// Notification sent to a local client.
    NotifySend,
    /// Notification delivered to a client.
    NotifyDeliver,
    /// Forward sent to a neighbour broker.
    FwdSend,
    /// Forward received from a neighbour broker.
    FwdRecv,
    /// Low-priority subscription entered the bulk queue.
    BulkEnqueue,
    /// Bulk queue flushed into one network call.
    BulkFlush,
    /// Outbound message queued while a link is down.
    Queued,
    /// Queued messages drained after reconnect.
    Drained,
    /// Expired item dropped (queue drain, bulk flush or delivery check).
    DropExpired,
    /// Link availability edge.
    LinkUp,
    LinkDown,
    /// Message handed to a link (charged to the energy ledger).
    Send,
    /// Connectivity poll by a client in no-broker mode.
    Poll,
    /// Lookup request served.
    Lookup,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Register => "REGISTER",
            EventKind::RegPush => "REG_PUSH",
            EventKind::RegExchange => "REG_XCHG",
            EventKind::RegMerge => "REG_MERGE",
            EventKind::SubRecv => "SUB_RECV",
            EventKind::SubStore => "SUB_STORE",
            EventKind::SubFwdProvider => "SUB_FWD_PROVIDER",
            EventKind::SubFwdBroker => "SUB_FWD_BROKER",
            EventKind::SubHold => "SUB_HOLD",
            EventKind::CacheHit => "CACHE_HIT",
            EventKind::CacheMiss => "CACHE_MISS",
            EventKind::CacheInsert => "CACHE_INSERT",
            EventKind::PubRecv => "PUB_RECV",
            EventKind::NotifySend => "NOTIFY_SEND",
            EventKind::NotifyDeliver => "NOTIFY_DELIVER",
            EventKind::FwdSend => "FWD_SEND",
            EventKind::FwdRecv => "FWD_RECV",
            EventKind::BulkEnqueue => "BULK_ENQ",
            EventKind::BulkFlush => "BULK_FLUSH",
            EventKind::Queued => "QUEUED",
            EventKind::Drained => "DRAINED",
            EventKind::DropExpired => "DROP_EXPIRED",
            EventKind::LinkUp => "LINK_UP",
            EventKind::LinkDown => "LINK_DOWN",
            EventKind::Send => "SEND",
            EventKind::Poll => "POLL",
            EventKind::Lookup => "LOOKUP",
        }
    }
}

/// One trace line.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub sim_time_ms: u64,
    pub broker_id: String,
    pub kind: EventKind,
    pub message_id: String,
    pub from: String,
    pub to: String,
    pub scope: String,
    pub subscription_id: String,
    /// "1", "0" or "-" when not applicable.
    pub cache_hit: String,
}

impl TraceRow {
    pub fn new(sim_time_ms: u64, broker_id: &str, kind: EventKind) -> TraceRow {
        TraceRow {
            sim_time_ms,
            broker_id: broker_id.to_string(),
            kind,
            message_id: "-".into(),
            from: "-".into(),
            to: "-".into(),
            scope: "-".into(),
            subscription_id: "-".into(),
            cache_hit: "-".into(),
        }
    }

    pub fn message_id(mut self, id: &str) -> TraceRow {
        self.message_id = id.to_string();
        self
    }

    pub fn from_id(mut self, id: &str) -> TraceRow {
        self.from = id.to_string();
        self
    }

    pub fn to_id(mut self, id: &str) -> TraceRow {
        self.to = id.to_string();
        self
    }

    pub fn scope(mut self, scope: &str) -> TraceRow {
        self.scope = scope.to_string();
        self
    }

    pub fn subscription(mut self, id: &str) -> TraceRow {
        self.subscription_id = id.to_string();
        self
    }

    pub fn cache(mut self, hit: bool) -> TraceRow {
        self.cache_hit = if hit { "1".into() } else { "0".into() };
        self
    }

    pub fn render(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.sim_time_ms,
            self.broker_id,
            self.kind.as_str(),
            self.message_id,
            self.from,
            self.to,
            self.scope,
            self.subscription_id,
            self.cache_hit
        )
    }
}

/// Append-only trace collector.
#[derive(Debug, Default)]
pub struct TraceLog {
    rows: Vec<TraceRow>,
}

impl TraceLog {
    pub fn new() -> TraceLog {
        TraceLog::default()
    }

    pub fn push(&mut self, row: TraceRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.render());
        }
        out
    }
}
