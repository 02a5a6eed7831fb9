//! Declarative scenario description and validation.
//!
//! A scenario file is a TOML document whose keys mirror the configuration
//! fields one-to-one. The default configuration reproduces the reference
//! experiment roster: ten device consumers, five device providers, five
//! cloud consumers, five cloud providers, one broker on each side.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::validate_topology;
use crate::contextml::{ScopeDef, ScopeRegistry};
use crate::netsim::{default_latencies, validate_latencies, TransportClass};

#[derive(Debug, Error, PartialEq)]
#[error("config error at {path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

fn cfg_err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "BROKERED")]
    Brokered,
    #[serde(rename = "NO_BROKER")]
    NoBroker,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Brokered => "broker",
            Mode::NoBroker => "nobroker",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Host {
    #[serde(rename = "DEVICE")]
    Device,
    #[serde(rename = "CLOUD")]
    Cloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoleSpec {
    #[serde(rename = "CONSUMER")]
    Consumer,
    #[serde(rename = "PROVIDER")]
    Provider,
    #[serde(rename = "BOTH")]
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BrokerSpec {
    pub id: String,
    pub host: Host,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ClientSpec {
    pub id: String,
    pub host: Host,
    pub role: RoleSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub served_scopes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope_of_interest: Option<String>,
    /// Explicit broker attachment; defaults to the broker on the same host.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub broker: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScopeSpec {
    pub name: String,
    pub payload_bytes: u64,
    pub validity_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct WorkloadSpec {
    pub n_queries: usize,
    pub mean_inter_arrival_ms: f64,
    /// Entities cycled per consumer; cache hits require a repeat visit to
    /// the same entity inside the scope validity window.
    #[serde(default = "default_entity_pool")]
    pub entity_pool_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_entity_pool() -> usize {
    40
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ProviderDelaySpec {
    pub min_ms: u64,
    pub max_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mode: Mode,
    #[serde(default)]
    pub bulk_mode: bool,
    /// Transport class of device-internal links (device clients to the
    /// device broker).
    #[serde(default = "default_local_transport")]
    pub local_transport: String,
    #[serde(default = "default_availability")]
    pub availability_up_fraction: f64,
    #[serde(default = "default_period")]
    pub availability_period_ms: u64,
    #[serde(default = "default_duration_cap")]
    pub duration_cap_ms: u64,
    #[serde(default = "default_reg_interval")]
    pub reg_exchange_interval_ms: u64,
    #[serde(default = "default_true")]
    pub cache_enabled: bool,
    pub workload: WorkloadSpec,
    pub provider_delay: ProviderDelaySpec,
    pub brokers: Vec<BrokerSpec>,
    /// Undirected neighbour edges between brokers.
    pub edges: Vec<(String, String)>,
    pub scopes: Vec<ScopeSpec>,
    pub clients: Vec<ClientSpec>,
    /// Latency overrides per transport class, milliseconds.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub latencies: BTreeMap<String, u64>,
}

fn default_local_transport() -> String {
    "LOCAL_SOCKET".into()
}

fn default_availability() -> f64 {
    1.0
}

fn default_period() -> u64 {
    60_000
}

fn default_duration_cap() -> u64 {
    10_000_000
}

fn default_reg_interval() -> u64 {
    30_000
}

fn default_true() -> bool {
    true
}

/// Table-1 scope ladder: five device scopes and five network scopes with
/// response sizes 750..5000 bytes and validities 30..900 seconds.
pub fn table1_scopes() -> Vec<ScopeSpec> {
    let sizes = [750u64, 1_000, 1_500, 2_000, 5_000];
    let validities_s = [30u64, 60, 200, 350, 900];
    let mut scopes = Vec::new();
    for prefix in ["devScope", "networkScope"] {
        for i in 0..5 {
            scopes.push(ScopeSpec {
                name: format!("{prefix}_{}", i + 1),
                payload_bytes: sizes[i],
                validity_ms: validities_s[i] * 1_000,
            });
        }
    }
    scopes
}

impl ScenarioConfig {
    /// The default experiment world: ten device consumers (five interested
    /// in device scopes, five in network scopes), five device providers,
    /// five cloud consumers interested in device scopes, five cloud
    /// providers, one broker per side.
    pub fn table1() -> ScenarioConfig {
        let mut clients = Vec::new();
        for i in 1..=5usize {
            clients.push(ClientSpec {
                id: format!("MCxC_{i}"),
                host: Host::Device,
                role: RoleSpec::Consumer,
                served_scopes: vec![],
                scope_of_interest: Some(format!("devScope_{i}")),
                broker: None,
            });
        }
        for i in 1..=5usize {
            clients.push(ClientSpec {
                id: format!("MCxC_{}", i + 5),
                host: Host::Device,
                role: RoleSpec::Consumer,
                served_scopes: vec![],
                scope_of_interest: Some(format!("networkScope_{i}")),
                broker: None,
            });
        }
        for i in 1..=5usize {
            clients.push(ClientSpec {
                id: format!("MCxP_{i}"),
                host: Host::Device,
                role: RoleSpec::Provider,
                served_scopes: vec![format!("devScope_{i}")],
                scope_of_interest: None,
                broker: None,
            });
        }
        for i in 1..=5usize {
            clients.push(ClientSpec {
                id: format!("NCxC_{i}"),
                host: Host::Cloud,
                role: RoleSpec::Consumer,
                served_scopes: vec![],
                scope_of_interest: Some(format!("devScope_{i}")),
                broker: None,
            });
        }
        for i in 1..=5usize {
            clients.push(ClientSpec {
                id: format!("NCxP_{i}"),
                host: Host::Cloud,
                role: RoleSpec::Provider,
                served_scopes: vec![format!("networkScope_{i}")],
                scope_of_interest: None,
                broker: None,
            });
        }
        ScenarioConfig {
            mode: Mode::Brokered,
            bulk_mode: false,
            local_transport: default_local_transport(),
            availability_up_fraction: 1.0,
            availability_period_ms: default_period(),
            duration_cap_ms: default_duration_cap(),
            reg_exchange_interval_ms: default_reg_interval(),
            cache_enabled: true,
            workload: WorkloadSpec {
                n_queries: 1_000,
                mean_inter_arrival_ms: 50.0,
                entity_pool_size: default_entity_pool(),
                seed: None,
            },
            provider_delay: ProviderDelaySpec {
                min_ms: 10,
                max_ms: 2_000,
            },
            brokers: vec![
                BrokerSpec {
                    id: "MCxB".into(),
                    host: Host::Device,
                },
                BrokerSpec {
                    id: "NCxB".into(),
                    host: Host::Cloud,
                },
            ],
            edges: vec![("MCxB".into(), "NCxB".into())],
            scopes: table1_scopes(),
            clients,
            latencies: BTreeMap::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<ScenarioConfig, ConfigError> {
        toml::from_str(text).map_err(|e| cfg_err("scenario", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn local_transport_class(&self) -> Result<TransportClass, ConfigError> {
        let class = TransportClass::parse(&self.local_transport).ok_or_else(|| {
            cfg_err("localTransport", format!("unknown transport {:?}", self.local_transport))
        })?;
        if !class.is_local() {
            return Err(cfg_err(
                "localTransport",
                "device-internal links need a LOCAL_* transport class",
            ));
        }
        Ok(class)
    }

    /// Resolved latency table: defaults overridden by the scenario file.
    pub fn latency_table(&self) -> Result<BTreeMap<TransportClass, u64>, ConfigError> {
        let mut table = default_latencies();
        for (key, value) in &self.latencies {
            let class = TransportClass::parse(key)
                .ok_or_else(|| cfg_err("latencies", format!("unknown transport {key:?}")))?;
            table.insert(class, *value);
        }
        Ok(table)
    }

    pub fn scope_registry(&self) -> Result<ScopeRegistry, ConfigError> {
        let mut defs = Vec::new();
        for scope in &self.scopes {
            let def = ScopeDef::new(&scope.name, scope.validity_ms)
                .map_err(|e| cfg_err("scopes", e.to_string()))?
                .with_entity_types(&["username"]);
            defs.push(def);
        }
        ScopeRegistry::build(defs).map_err(|e| cfg_err("scopes", e.to_string()))
    }

    /// All structural validations, without simulating.
    pub fn validate(&self, allow_unconstrained_latency: bool) -> Result<(), ConfigError> {
        self.check_workload()?;
        self.check_mode_flags()?;
        self.check_latencies(allow_unconstrained_latency)?;
        self.check_topology()?;
        self.check_scopes()?;
        self.check_clients()?;
        Ok(())
    }

    pub fn check_workload(&self) -> Result<(), ConfigError> {
        if self.workload.n_queries == 0 {
            return Err(cfg_err("workload.nQueries", "must be >= 1"));
        }
        if self.workload.mean_inter_arrival_ms <= 0.0 {
            return Err(cfg_err("workload.meanInterArrivalMs", "must be > 0"));
        }
        if self.workload.entity_pool_size == 0 {
            return Err(cfg_err("workload.entityPoolSize", "must be >= 1"));
        }
        if self.provider_delay.max_ms <= self.provider_delay.min_ms {
            return Err(cfg_err("providerDelay", "maxMs must exceed minMs"));
        }
        if !(0.5..=1.0).contains(&self.availability_up_fraction) {
            return Err(cfg_err(
                "availabilityUpFraction",
                format!("{} outside [0.5, 1.0]", self.availability_up_fraction),
            ));
        }
        Ok(())
    }

    pub fn check_mode_flags(&self) -> Result<(), ConfigError> {
        if self.bulk_mode && self.mode == Mode::NoBroker {
            return Err(cfg_err("bulkMode", "bulk mode requires the device broker"));
        }
        Ok(())
    }

    pub fn check_latencies(&self, allow_unconstrained: bool) -> Result<(), ConfigError> {
        self.local_transport_class()?;
        let latencies = self.latency_table()?;
        validate_latencies(&latencies, allow_unconstrained)
            .map_err(|e| cfg_err("latencies", e.to_string()))
    }

    pub fn check_topology(&self) -> Result<(), ConfigError> {
        let broker_ids: Vec<String> = self.brokers.iter().map(|b| b.id.clone()).collect();
        validate_topology(&broker_ids, &self.edges).map_err(|e| cfg_err("brokers", e.to_string()))
    }

    pub fn check_scopes(&self) -> Result<(), ConfigError> {
        self.scope_registry().map(|_| ())
    }

    pub fn check_clients(&self) -> Result<(), ConfigError> {
        let registry = self.scope_registry()?;
        let mut ids = BTreeSet::new();
        let mut providers_per_scope: BTreeMap<&str, usize> = BTreeMap::new();
        for client in &self.clients {
            if !ids.insert(&client.id) {
                return Err(cfg_err("clients", format!("duplicate client id {}", client.id)));
            }
            if self.brokers.iter().any(|b| b.id == client.id) {
                return Err(cfg_err(
                    "clients",
                    format!("client id {} collides with a broker id", client.id),
                ));
            }
            let provides = matches!(client.role, RoleSpec::Provider | RoleSpec::Both);
            if provides && client.served_scopes.is_empty() {
                return Err(cfg_err(
                    "clients",
                    format!("provider {} serves no scopes", client.id),
                ));
            }
            if !provides && !client.served_scopes.is_empty() {
                return Err(cfg_err(
                    "clients",
                    format!("consumer {} must not list servedScopes", client.id),
                ));
            }
            for scope in &client.served_scopes {
                if !registry.contains(scope) {
                    return Err(cfg_err(
                        "clients",
                        format!("client {} serves unknown scope {scope}", client.id),
                    ));
                }
                *providers_per_scope.entry(scope.as_str()).or_insert(0) += 1;
            }
            if let Some(scope) = &client.scope_of_interest {
                if !registry.contains(scope) {
                    return Err(cfg_err(
                        "clients",
                        format!("client {} interested in unknown scope {scope}", client.id),
                    ));
                }
            }
            if let Some(broker) = &client.broker {
                if !self.brokers.iter().any(|b| &b.id == broker) {
                    return Err(cfg_err(
                        "clients",
                        format!("client {} attached to unknown broker {broker}", client.id),
                    ));
                }
            }
        }
        // Each queried scope is served by exactly one provider.
        for client in &self.clients {
            if let Some(scope) = &client.scope_of_interest {
                match providers_per_scope.get(scope.as_str()) {
                    Some(1) => {}
                    Some(n) => {
                        return Err(cfg_err(
                            "clients",
                            format!("scope {scope} served by {n} providers, expected exactly one"),
                        ))
                    }
                    None => {
                        return Err(cfg_err(
                            "clients",
                            format!(
                                "consumer {} interested in scope {scope} that no provider serves",
                                client.id
                            ),
                        ))
                    }
                }
            }
        }
        // Host attachment must be resolvable.
        for client in &self.clients {
            if client.broker.is_none() {
                let host = self.effective_host_for(client);
                let candidates: Vec<&BrokerSpec> = self
                    .effective_brokers()
                    .into_iter()
                    .filter(|b| b.host == host)
                    .collect();
                if candidates.len() != 1 {
                    return Err(cfg_err(
                        "clients",
                        format!(
                            "client {} needs exactly one broker on its host, found {}",
                            client.id,
                            candidates.len()
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Brokers present in the effective topology: no-broker mode removes the
    /// device-side brokers and attaches every client to the cloud broker.
    pub fn effective_brokers(&self) -> Vec<&BrokerSpec> {
        match self.mode {
            Mode::Brokered => self.brokers.iter().collect(),
            Mode::NoBroker => self.brokers.iter().filter(|b| b.host == Host::Cloud).collect(),
        }
    }

    fn effective_host_for(&self, client: &ClientSpec) -> Host {
        match self.mode {
            Mode::Brokered => client.host,
            Mode::NoBroker => Host::Cloud,
        }
    }

    /// Broker a client attaches to under the current mode.
    pub fn attachment(&self, client: &ClientSpec) -> Result<String, ConfigError> {
        if let Some(broker) = &client.broker {
            if self.mode == Mode::NoBroker {
                let spec = self
                    .brokers
                    .iter()
                    .find(|b| &b.id == broker)
                    .ok_or_else(|| cfg_err("clients", format!("unknown broker {broker}")))?;
                if spec.host == Host::Device {
                    // Device brokers are absent in no-broker mode.
                    return self.cloud_broker();
                }
            }
            return Ok(broker.clone());
        }
        let host = self.effective_host_for(client);
        self.effective_brokers()
            .into_iter()
            .find(|b| b.host == host)
            .map(|b| b.id.clone())
            .ok_or_else(|| {
                cfg_err(
                    "clients",
                    format!("no broker available on host {host:?} for {}", client.id),
                )
            })
    }

    fn cloud_broker(&self) -> Result<String, ConfigError> {
        self.brokers
            .iter()
            .find(|b| b.host == Host::Cloud)
            .map(|b| b.id.clone())
            .ok_or_else(|| cfg_err("brokers", "no cloud broker defined"))
    }

    pub fn scope_payload(&self, scope: &str) -> Option<u64> {
        self.scopes.iter().find(|s| s.name == scope).map(|s| s.payload_bytes)
    }

    pub fn scope_validity(&self, scope: &str) -> Option<u64> {
        self.scopes.iter().find(|s| s.name == scope).map(|s| s.validity_ms)
    }
}
