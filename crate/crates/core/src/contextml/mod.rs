//! Domain types and canonical serialization for context data and the
//! protocol messages exchanged between consumers, providers and brokers.
//!
//! All types are immutable values after construction and all timestamps are
//! simulated-clock epoch milliseconds; nothing in this module reads the wall
//! clock.

mod codec;

pub use codec::{encode_message, parse_message, CodecError};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::matching::Subscription;

/// Maximum nesting depth of a [`ParamValue`] tree.
pub const MAX_PARAM_DEPTH: usize = 16;

/// Errors raised when constructing domain values from invalid parts.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomainError {
    #[error("entity part {part} is invalid: {reason}")]
    BadEntityPart { part: &'static str, reason: String },
    #[error("parameter error: {0}")]
    BadParam(String),
    #[error("context element invalid: {0}")]
    BadElement(String),
    #[error("scope definition invalid: {0}")]
    BadScope(String),
    #[error("scope registry invalid: {0}")]
    BadRegistry(String),
}

/// Subject of context data: a `(type, identifier)` pair such as
/// `username:alice` or `imei:4901542203237518`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityRef {
    entity_type: String,
    id: String,
}

impl EntityRef {
    /// Both parts must be non-empty and free of whitespace and the `:`
    /// separator, so the canonical key form `type:id` stays unambiguous.
    pub fn new(entity_type: impl Into<String>, id: impl Into<String>) -> Result<Self, DomainError> {
        let entity_type = entity_type.into();
        let id = id.into();
        check_entity_part("type", &entity_type)?;
        check_entity_part("id", &id)?;
        Ok(EntityRef { entity_type, id })
    }

    pub fn entity_type(&self) -> &str {
        &self.entity_type
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Canonical key form, unique per entity.
    pub fn key(&self) -> String {
        format!("{}:{}", self.entity_type, self.id)
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.entity_type, self.id)
    }
}

fn check_entity_part(part: &'static str, value: &str) -> Result<(), DomainError> {
    if value.is_empty() {
        return Err(DomainError::BadEntityPart {
            part,
            reason: "empty".into(),
        });
    }
    if value.chars().any(|c| c.is_whitespace() || c == ':') {
        return Err(DomainError::BadEntityPart {
            part,
            reason: format!("{value:?} contains whitespace or ':'"),
        });
    }
    Ok(())
}

/// Definition of a context scope: the atomic unit of exchange, caching and
/// routing. Scope instances inherit `default_validity_ms` when providers do
/// not override it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopeDef {
    pub name: String,
    /// Parameter names a provider needs to answer a query for this scope.
    pub input_params: Vec<String>,
    /// Entity types the scope applies to.
    pub entity_types: Vec<String>,
    /// Names of scopes this scope depends on (resolved by proxy queries).
    pub dependencies: Vec<String>,
    pub default_validity_ms: u64,
}

impl ScopeDef {
    pub fn new(name: impl Into<String>, default_validity_ms: u64) -> Result<Self, DomainError> {
        let name = name.into();
        if name.is_empty() {
            return Err(DomainError::BadScope("scope name is empty".into()));
        }
        if default_validity_ms == 0 {
            return Err(DomainError::BadScope(format!(
                "scope {name}: defaultValidityMs must be > 0"
            )));
        }
        Ok(ScopeDef {
            name,
            input_params: Vec::new(),
            entity_types: Vec::new(),
            dependencies: Vec::new(),
            default_validity_ms,
        })
    }

    pub fn with_entity_types(mut self, types: &[&str]) -> Self {
        self.entity_types = types.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_dependencies(mut self, deps: &[&str]) -> Self {
        self.dependencies = deps.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_input_params(mut self, params: &[&str]) -> Self {
        self.input_params = params.iter().map(|s| s.to_string()).collect();
        self
    }
}

/// Registry of scope definitions. Names are unique and the dependency graph
/// over all registered scopes is acyclic; both are checked at build time.
#[derive(Debug, Clone, Default)]
pub struct ScopeRegistry {
    scopes: BTreeMap<String, ScopeDef>,
}

impl ScopeRegistry {
    pub fn build(defs: Vec<ScopeDef>) -> Result<Self, DomainError> {
        let mut scopes = BTreeMap::new();
        for def in defs {
            if scopes.insert(def.name.clone(), def.clone()).is_some() {
                return Err(DomainError::BadRegistry(format!(
                    "duplicate scope name {}",
                    def.name
                )));
            }
        }
        let registry = ScopeRegistry { scopes };
        registry.check_acyclic()?;
        Ok(registry)
    }

    fn check_acyclic(&self) -> Result<(), DomainError> {
        // Iterative DFS with an explicit colour map; reports one cycle path.
        #[derive(Clone, Copy, PartialEq)]
        enum Colour {
            White,
            Grey,
            Black,
        }
        let mut colour: BTreeMap<&str, Colour> =
            self.scopes.keys().map(|k| (k.as_str(), Colour::White)).collect();
        for start in self.scopes.keys() {
            if colour[start.as_str()] != Colour::White {
                continue;
            }
            let mut stack: Vec<(&str, usize)> = vec![(start.as_str(), 0)];
            let mut path: Vec<&str> = vec![start.as_str()];
            colour.insert(start.as_str(), Colour::Grey);
            while let Some((node, child_idx)) = stack.pop() {
                let deps = self
                    .scopes
                    .get(node)
                    .map(|d| d.dependencies.as_slice())
                    .unwrap_or(&[]);
                if child_idx < deps.len() {
                    stack.push((node, child_idx + 1));
                    let dep = deps[child_idx].as_str();
                    match colour.get(dep).copied() {
                        None => {
                            return Err(DomainError::BadRegistry(format!(
                                "scope {node} depends on unregistered scope {dep}"
                            )))
                        }
                        Some(Colour::Grey) => {
                            let cycle_start =
                                path.iter().position(|n| *n == dep).unwrap_or(0);
                            let mut cycle: Vec<&str> = path[cycle_start..].to_vec();
                            cycle.push(dep);
                            return Err(DomainError::BadRegistry(format!(
                                "scope dependency cycle: {}",
                                cycle.join(" -> ")
                            )));
                        }
                        Some(Colour::Black) => {}
                        Some(Colour::White) => {
                            colour.insert(dep, Colour::Grey);
                            path.push(dep);
                            stack.push((dep, 0));
                        }
                    }
                } else {
                    colour.insert(node, Colour::Black);
                    path.pop();
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ScopeDef> {
        self.scopes.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.scopes.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.scopes.keys().map(|s| s.as_str())
    }

    /// Dependency closure of `scope` in topological (dependencies-first)
    /// order, ending with `scope` itself. Children are visited in
    /// lexicographic order so the result is deterministic.
    pub fn dependency_order(&self, scope: &str) -> Result<Vec<String>, DomainError> {
        if !self.contains(scope) {
            return Err(DomainError::BadRegistry(format!(
                "scope {scope} not registered"
            )));
        }
        let mut order = Vec::new();
        let mut seen = BTreeSet::new();
        fn visit(
            reg: &ScopeRegistry,
            name: &str,
            seen: &mut BTreeSet<String>,
            order: &mut Vec<String>,
        ) {
            if seen.contains(name) {
                return;
            }
            seen.insert(name.to_string());
            let mut deps = reg
                .get(name)
                .map(|d| d.dependencies.clone())
                .unwrap_or_default();
            deps.sort();
            for dep in deps {
                visit(reg, &dep, seen, order);
            }
            order.push(name.to_string());
        }
        visit(self, scope, &mut seen, &mut order);
        Ok(order)
    }

    /// Element-level validation that needs registry knowledge: the scope must
    /// be registered and the entity type must be listed for that scope.
    pub fn validate_element(&self, el: &ContextElement) -> Result<(), DomainError> {
        let def = self.get(&el.scope).ok_or_else(|| {
            DomainError::BadElement(format!("scope {} not registered", el.scope))
        })?;
        if !def.entity_types.is_empty()
            && !def.entity_types.iter().any(|t| t == el.entity.entity_type())
        {
            return Err(DomainError::BadElement(format!(
                "entity type {} not allowed for scope {}",
                el.entity.entity_type(),
                el.scope
            )));
        }
        Ok(())
    }
}

/// Context data payload node: a name-value pair (`par`), an attributed
/// structure (`parS`) or an attributed collection (`parA`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamValue {
    Atom { name: String, value: String },
    Struct { name: String, members: Vec<ParamValue> },
    Array { name: String, items: Vec<ParamValue> },
}

impl ParamValue {
    pub fn atom(name: impl Into<String>, value: impl Into<String>) -> ParamValue {
        ParamValue::Atom {
            name: name.into(),
            value: value.into(),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ParamValue::Atom { name, .. }
            | ParamValue::Struct { name, .. }
            | ParamValue::Array { name, .. } => name,
        }
    }

    fn depth(&self) -> usize {
        match self {
            ParamValue::Atom { .. } => 1,
            ParamValue::Struct { members, .. } => {
                1 + members.iter().map(|m| m.depth()).max().unwrap_or(0)
            }
            ParamValue::Array { items, .. } => {
                1 + items.iter().map(|m| m.depth()).max().unwrap_or(0)
            }
        }
    }

    fn validate(&self) -> Result<(), DomainError> {
        if self.depth() > MAX_PARAM_DEPTH {
            return Err(DomainError::BadParam(format!(
                "nesting depth exceeds {MAX_PARAM_DEPTH}"
            )));
        }
        self.validate_inner()
    }

    fn validate_inner(&self) -> Result<(), DomainError> {
        if self.name().is_empty() {
            return Err(DomainError::BadParam("parameter name is empty".into()));
        }
        match self {
            ParamValue::Atom { .. } => Ok(()),
            ParamValue::Struct { name, members } => {
                let mut seen = BTreeSet::new();
                for m in members {
                    if !seen.insert(m.name().to_string()) {
                        return Err(DomainError::BadParam(format!(
                            "duplicate member {} in struct {name}",
                            m.name()
                        )));
                    }
                    m.validate_inner()?;
                }
                Ok(())
            }
            ParamValue::Array { items, .. } => {
                for it in items {
                    it.validate_inner()?;
                }
                Ok(())
            }
        }
    }
}

/// Validates a whole data part (a list of top-level parameters).
pub fn validate_data_part(data: &[ParamValue]) -> Result<(), DomainError> {
    for p in data {
        p.validate()?;
    }
    Ok(())
}

/// One unit of context: the notification payload `v`. Tagged with the
/// detection timestamp and an expiry instant after which the information is
/// considered invalid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextElement {
    pub provider_id: String,
    pub entity: EntityRef,
    pub scope: String,
    pub data: Vec<ParamValue>,
    /// Simulated epoch milliseconds at which the context was produced.
    pub timestamp: u64,
    /// Simulated epoch milliseconds at which the context stops being valid.
    pub expiry: u64,
    /// Declared transport size in bytes. Declared rather than computed so
    /// configured response sizes drive transport accounting exactly.
    pub payload_bytes: u64,
}

impl ContextElement {
    pub fn new(
        provider_id: impl Into<String>,
        entity: EntityRef,
        scope: impl Into<String>,
        data: Vec<ParamValue>,
        timestamp: u64,
        expiry: u64,
        payload_bytes: u64,
    ) -> Result<Self, DomainError> {
        let provider_id = provider_id.into();
        let scope = scope.into();
        if scope.is_empty() {
            return Err(DomainError::BadElement("scope is empty".into()));
        }
        if expiry <= timestamp {
            return Err(DomainError::BadElement(format!(
                "expiry {expiry} must be greater than timestamp {timestamp}"
            )));
        }
        if payload_bytes == 0 {
            return Err(DomainError::BadElement("payloadBytes must be > 0".into()));
        }
        validate_data_part(&data)?;
        Ok(ContextElement {
            provider_id,
            entity,
            scope,
            data,
            timestamp,
            expiry,
            payload_bytes,
        })
    }

    /// Stable identity of the produced context instance, used for trace
    /// assertions and delivery-set bookkeeping.
    pub fn instance_key(&self) -> String {
        format!("{}@{}@{}", self.provider_id, self.scope, self.timestamp)
    }
}

/// Validity test over the half-open window `[timestamp, expiry)`.
pub fn is_fresh(el: &ContextElement, now: u64) -> bool {
    el.timestamp <= now && now < el.expiry
}

/// Role a client plays towards its broker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ClientRole {
    Consumer,
    Provider,
    Both,
}

impl ClientRole {
    pub fn provides(&self) -> bool {
        matches!(self, ClientRole::Provider | ClientRole::Both)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ClientRole::Consumer => "CONSUMER",
            ClientRole::Provider => "PROVIDER",
            ClientRole::Both => "BOTH",
        }
    }

    pub fn parse(s: &str) -> Option<ClientRole> {
        match s {
            "CONSUMER" => Some(ClientRole::Consumer),
            "PROVIDER" => Some(ClientRole::Provider),
            "BOTH" => Some(ClientRole::Both),
            _ => None,
        }
    }
}

/// Advertisement a client presents on registration: identity, communication
/// endpoint and, for providers, the scopes it serves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientAdvertisement {
    pub client_id: String,
    pub endpoint: String,
    pub role: ClientRole,
    pub served_scopes: Vec<String>,
    pub last_updated: u64,
}

impl ClientAdvertisement {
    pub fn new(
        client_id: impl Into<String>,
        endpoint: impl Into<String>,
        role: ClientRole,
        served_scopes: Vec<String>,
        last_updated: u64,
    ) -> Result<Self, DomainError> {
        let client_id = client_id.into();
        if client_id.is_empty() {
            return Err(DomainError::BadParam("clientId is empty".into()));
        }
        if role.provides() && served_scopes.is_empty() {
            return Err(DomainError::BadParam(format!(
                "provider {client_id} must serve at least one scope"
            )));
        }
        if !role.provides() && !served_scopes.is_empty() {
            return Err(DomainError::BadParam(format!(
                "consumer {client_id} must not list served scopes"
            )));
        }
        Ok(ClientAdvertisement {
            client_id,
            endpoint: endpoint.into(),
            role,
            served_scopes,
            last_updated,
        })
    }
}

/// Message header shared by every protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageHeader {
    /// Unique per simulation run.
    pub message_id: String,
    pub sender_id: String,
    /// Simulated send instant; monotone per sender.
    pub sent_at: u64,
}

/// Payload of a protocol message.
#[derive(Debug, Clone, PartialEq)]
pub enum MessageBody {
    /// Client subscription, also used when a broker forwards a subscription
    /// to a capable provider.
    Subscribe(Subscription),
    /// Provider notification, with the subscription ids the provider knows
    /// the element satisfies (a hint; brokers re-match authoritatively).
    Publish {
        element: ContextElement,
        matched_subscription_ids: Vec<String>,
    },
    /// Broker-to-client delivery of a matched element.
    Notify {
        element: ContextElement,
        subscription_id: String,
    },
    /// Broker-to-broker relay of a matched element.
    Forward {
        element: ContextElement,
        matched_subscription_ids: Vec<String>,
    },
    /// Subscription table exchange toward the broker that can satisfy it.
    SubTableUpdate {
        origin_broker_id: String,
        subscription: Subscription,
    },
    /// Registration table exchange between neighbouring brokers.
    RegTableUpdate {
        origin_broker_id: String,
        advertisements: Vec<ClientAdvertisement>,
    },
    /// Endpoint lookup for synchronous direct invocation.
    LookupRequest { scope: String },
    LookupReply { endpoint: Option<String> },
}

/// A protocol message: header plus body. The canonical ContextML encoding of
/// these documents is both the on-disk trace format and the logical wire
/// format inside the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMessage {
    pub header: MessageHeader,
    pub body: MessageBody,
}

impl ProtocolMessage {
    pub fn new(header: MessageHeader, body: MessageBody) -> Self {
        ProtocolMessage { header, body }
    }

    /// Declared payload size used for transport accounting.
    pub fn payload_bytes(&self) -> u64 {
        match &self.body {
            MessageBody::Subscribe(_) | MessageBody::SubTableUpdate { .. } => SUBSCRIPTION_BYTES,
            MessageBody::Publish { element, .. }
            | MessageBody::Notify { element, .. }
            | MessageBody::Forward { element, .. } => element.payload_bytes,
            MessageBody::RegTableUpdate { advertisements, .. } => {
                REG_ENTRY_BYTES * advertisements.len().max(1) as u64
            }
            MessageBody::LookupRequest { .. } | MessageBody::LookupReply { .. } => LOOKUP_BYTES,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.body {
            MessageBody::Subscribe(_) => "ctxSubscr",
            MessageBody::Publish { .. } => "ctxPublish",
            MessageBody::Notify { .. } => "ctxNotify",
            MessageBody::Forward { .. } => "ctxForward",
            MessageBody::SubTableUpdate { .. } => "subTableUpdate",
            MessageBody::RegTableUpdate { .. } => "regTableUpdate",
            MessageBody::LookupRequest { .. } => "lookupRequest",
            MessageBody::LookupReply { .. } => "lookupReply",
        }
    }
}

/// Declared wire size of a subscription document.
pub const SUBSCRIPTION_BYTES: u64 = 256;
/// Declared wire size per registration table entry.
pub const REG_ENTRY_BYTES: u64 = 96;
/// Declared wire size of lookup requests and replies.
pub const LOOKUP_BYTES: u64 = 64;
