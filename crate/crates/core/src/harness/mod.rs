//! Deterministic discrete-event simulation harness.
//!
//! `run_scenario` builds the configured world (brokers, clients, links),
//! drives a Poisson one-time-subscription workload through it and produces
//! [`Metrics`] plus the full trace. Everything is derived from the scenario
//! and the seed: same inputs, byte-identical trace.

pub mod rng;
pub mod scenario;
pub mod workload;

pub use scenario::{
    BrokerSpec, ClientSpec, ConfigError, Host, Mode, ProviderDelaySpec, RoleSpec, ScenarioConfig,
    ScopeSpec, WorkloadSpec,
};

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use thiserror::Error;

use crate::broker::{
    Address, BrokerConfig, BrokerOutput, BrokerState, Destination, Envelope, FlushCause, Outbound,
};
use crate::contextml::{
    is_fresh, ClientAdvertisement, ClientRole, ContextElement, EntityRef, MessageBody,
    MessageHeader, ParamValue, ProtocolMessage,
};
use crate::matching::{CallbackMode, ConstraintExpr, Priority, Subscription};
use crate::netsim::{
    charge_call, AvailabilitySchedule, EnergyLedger, EnergyModel, Link, TransportClass,
};
use crate::trace::{EventKind, TraceLog, TraceRow};

use rng::{substream, Substream};

/// Poll interval of clients monitoring connectivity themselves in no-broker
/// mode.
pub const POLL_INTERVAL_MS: u64 = 1_000;
/// Housekeeping sweep interval.
pub const HOUSEKEEPING_INTERVAL_MS: u64 = 5_000;

/// Measured outputs of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mode: String,
    pub bulk: bool,
    pub local_transport: String,
    pub n_queries: usize,
    pub availability: f64,
    pub seed: u64,
    pub device_energy_mj: f64,
    pub cloud_energy_mj: f64,
    pub mean_device_energy_per_query_mj: f64,
    pub queries_issued: usize,
    pub queries_satisfied: usize,
    pub queries_expired_unsatisfied: usize,
    pub queries_pending_at_end: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub hit_rate: f64,
    pub msgs_ipc: u64,
    pub msgs_socket: u64,
    pub msgs_local_http: u64,
    pub msgs_remote_http: u64,
    pub bulk_flushes: u64,
    pub bulk_batch_calls: u64,
    pub bulk_enqueued: u64,
    pub bulk_deadline_flushes: u64,
    pub dropped_expired: u64,
    pub simulated_duration_ms: u64,
}

impl Metrics {
    pub fn csv_header() -> &'static str {
        "mode,bulk,localTransport,nQueries,availability,seed,deviceEnergy_mJ,meanPerQuery_mJ,hitRate,msgs_IPC,msgs_SOCKET,msgs_LHTTP,msgs_RHTTP,satisfied,droppedExpired,durationMs"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.2},{},{:.3},{:.4},{:.4},{},{},{},{},{},{},{}",
            self.mode,
            self.bulk,
            self.local_transport,
            self.n_queries,
            self.availability,
            self.seed,
            self.device_energy_mj,
            self.mean_device_energy_per_query_mj,
            self.hit_rate,
            self.msgs_ipc,
            self.msgs_socket,
            self.msgs_local_http,
            self.msgs_remote_http,
            self.queries_satisfied,
            self.dropped_expired,
            self.simulated_duration_ms
        )
    }
}

/// Relative spread (max - min) / mean, used for repetition stability checks.
pub fn relative_spread(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean == 0.0 {
        0.0
    } else {
        (max - min) / mean
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("runs have mismatched workloads: {0} vs {1} queries")]
    MismatchedWorkload(usize, usize),
}

/// Field-by-field comparison of two runs over the same workload size.
#[derive(Debug, Clone)]
pub struct RunDelta {
    /// (field, a, b, b - a)
    pub fields: Vec<(&'static str, f64, f64, f64)>,
    /// Mode string of the run with lower device energy.
    pub device_energy_winner: String,
}

pub fn compare_runs(a: &Metrics, b: &Metrics) -> Result<RunDelta, CompareError> {
    if a.queries_issued != b.queries_issued {
        return Err(CompareError::MismatchedWorkload(
            a.queries_issued,
            b.queries_issued,
        ));
    }
    let pairs: Vec<(&'static str, f64, f64)> = vec![
        ("deviceEnergy_mJ", a.device_energy_mj, b.device_energy_mj),
        ("cloudEnergy_mJ", a.cloud_energy_mj, b.cloud_energy_mj),
        (
            "meanPerQuery_mJ",
            a.mean_device_energy_per_query_mj,
            b.mean_device_energy_per_query_mj,
        ),
        ("hitRate", a.hit_rate, b.hit_rate),
        (
            "satisfied",
            a.queries_satisfied as f64,
            b.queries_satisfied as f64,
        ),
        (
            "droppedExpired",
            a.dropped_expired as f64,
            b.dropped_expired as f64,
        ),
        (
            "durationMs",
            a.simulated_duration_ms as f64,
            b.simulated_duration_ms as f64,
        ),
    ];
    let fields = pairs
        .into_iter()
        .map(|(name, x, y)| (name, x, y, y - x))
        .collect();
    let winner = if a.device_energy_mj <= b.device_energy_mj {
        a.mode.clone()
    } else {
        b.mode.clone()
    };
    Ok(RunDelta {
        fields,
        device_energy_winner: winner,
    })
}

/// Result of one simulation run.
#[derive(Debug)]
pub struct RunResult {
    pub metrics: Metrics,
    pub trace: TraceLog,
}

/// Builds the world for `config` and runs it to quiescence (or the duration
/// cap) under `seed`.
pub fn run_scenario(config: &ScenarioConfig, seed: u64) -> Result<RunResult, ConfigError> {
    run_scenario_with_overrides(config, seed, None, false)
}

/// Like [`run_scenario`], with an optional flat `key=value` energy/latency
/// override text applied on top of the calibrated model.
pub fn run_scenario_with_overrides(
    config: &ScenarioConfig,
    seed: u64,
    overrides: Option<&str>,
    allow_unconstrained_latency: bool,
) -> Result<RunResult, ConfigError> {
    config.validate(allow_unconstrained_latency)?;
    let mut model = EnergyModel::calibrate_from_table2();
    let mut latencies = config.latency_table()?;
    if let Some(text) = overrides {
        crate::netsim::apply_override_text(&mut model, &mut latencies, text).map_err(|e| {
            ConfigError {
                path: "energyOverrides".into(),
                message: e.to_string(),
            }
        })?;
        crate::netsim::validate_latencies(&latencies, allow_unconstrained_latency).map_err(
            |e| ConfigError {
                path: "energyOverrides".into(),
                message: e.to_string(),
            },
        )?;
    }
    let mut sim = Sim::build(config, seed, model, latencies)?;
    sim.run();
    Ok(sim.finish())
}

// ---------------------------------------------------------------------------
// Event machinery
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum Event {
    Register { client: String },
    QueryArrival { index: usize },
    Delivery { from: String, to: String, envelope: Envelope },
    ProviderRespond { provider: String, sub: Subscription },
    RegExchangeTick,
    Housekeeping,
    BulkTimer { broker: String, at: u64 },
    LinkEdge,
    PollTick { client: String },
}

impl Event {
    /// Periodic events self-perpetuate only while work remains and do not
    /// count toward quiescence.
    fn is_periodic(&self) -> bool {
        matches!(
            self,
            Event::RegExchangeTick | Event::Housekeeping | Event::LinkEdge | Event::PollTick { .. }
        )
    }
}

struct Scheduled {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Inverted so the max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug)]
struct ClientRt {
    role: ClientRole,
    attached_broker: String,
    interest: Option<String>,
    /// Envelopes waiting for connectivity (no-broker mode only).
    pending: VecDeque<Envelope>,
    /// True while a poll chain is scheduled for this client.
    polling: bool,
    next_msg: u64,
    /// The link to the broker follows the availability schedule.
    remote_scheduled: bool,
}

#[derive(Debug, Clone)]
struct QueryInfo {
    id: String,
    expiry: u64,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    seed: u64,
    now: u64,
    seq: u64,
    heap: BinaryHeap<Scheduled>,
    brokers: BTreeMap<String, BrokerState>,
    clients: BTreeMap<String, ClientRt>,
    links: BTreeMap<(String, String), Link>,
    device_components: BTreeSet<String>,
    model: EnergyModel,
    ledger: EnergyLedger,
    trace: TraceLog,
    availability: AvailabilitySchedule,
    queries: Vec<QueryInfo>,
    arrival_times: Vec<u64>,
    delays: Vec<u64>,
    consumer_order: Vec<String>,
    /// Per-provider publication sequence numbers.
    publish_seq: BTreeMap<String, u64>,
    /// Per-consumer shuffled walk through the entity pool: each pass visits
    /// every entity once in an order drawn from the scope-choice substream,
    /// so repeat gaps decorrelate across entities while a short workload
    /// never repeats an entity at all.
    entity_walks: BTreeMap<String, (Vec<u64>, usize)>,
    choice_rng: rand_chacha::ChaCha12Rng,
    satisfied: BTreeSet<String>,
    dropped_expired: u64,
    outstanding: i64,
    last_activity: u64,
    bulk_timers: BTreeSet<(String, u64)>,
    /// True when the duration cap cut the run short.
    capped: bool,
}

impl<'a> Sim<'a> {
    fn build(
        cfg: &'a ScenarioConfig,
        seed: u64,
        model: EnergyModel,
        latencies: BTreeMap<TransportClass, u64>,
    ) -> Result<Sim<'a>, ConfigError> {
        let local_class = cfg.local_transport_class()?;
        let availability =
            AvailabilitySchedule::new(cfg.availability_period_ms, cfg.availability_up_fraction, 0)
                .map_err(|e| ConfigError {
                    path: "availabilityUpFraction".into(),
                    message: e.to_string(),
                })?;

        let mut host_of: BTreeMap<String, Host> = BTreeMap::new();
        let effective: Vec<BrokerSpec> = cfg.effective_brokers().into_iter().cloned().collect();
        let effective_ids: BTreeSet<String> = effective.iter().map(|b| b.id.clone()).collect();
        for spec in &effective {
            host_of.insert(spec.id.clone(), spec.host);
        }
        for spec in &cfg.clients {
            host_of.insert(spec.id.clone(), spec.host);
        }

        let mut links: BTreeMap<(String, String), Link> = BTreeMap::new();
        let add_link = |links: &mut BTreeMap<(String, String), Link>,
                            a: &str,
                            b: &str,
                            class: TransportClass,
                            scheduled: bool| {
            links.insert(
                link_key(a, b),
                Link {
                    from: a.to_string(),
                    to: b.to_string(),
                    class,
                    latency_ms: latencies[&class],
                    schedule: if scheduled {
                        availability
                    } else {
                        AvailabilitySchedule::always_up()
                    },
                },
            );
        };

        // Broker-to-broker edges present in the effective topology.
        let mut neighbor_sets: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (a, b) in &cfg.edges {
            if !effective_ids.contains(a) || !effective_ids.contains(b) {
                continue;
            }
            neighbor_sets.entry(a.clone()).or_default().push(b.clone());
            neighbor_sets.entry(b.clone()).or_default().push(a.clone());
            let scheduled = spans_device(&host_of, a, b);
            add_link(&mut links, a, b, TransportClass::RemoteHttp, scheduled);
        }

        let mut brokers = BTreeMap::new();
        for spec in &effective {
            let broker_cfg = BrokerConfig {
                reg_exchange_interval_ms: cfg.reg_exchange_interval_ms,
                bulk_mode: cfg.bulk_mode && spec.host == Host::Device,
                cache_enabled: cfg.cache_enabled && cfg.mode == Mode::Brokered,
                bulk_limit: 5,
            };
            brokers.insert(
                spec.id.clone(),
                BrokerState::new(
                    spec.id.clone(),
                    neighbor_sets.get(&spec.id).cloned().unwrap_or_default(),
                    broker_cfg,
                ),
            );
        }

        let mut clients = BTreeMap::new();
        let mut consumer_order = Vec::new();
        for spec in &cfg.clients {
            let attached = cfg.attachment(spec)?;
            let broker_host = host_of.get(&attached).copied().ok_or_else(|| ConfigError {
                path: "clients".into(),
                message: format!("{}: attached broker {attached} not in topology", spec.id),
            })?;
            let class = if spec.host == Host::Device && broker_host == Host::Device {
                local_class
            } else {
                TransportClass::RemoteHttp
            };
            let scheduled = spans_device(&host_of, &spec.id, &attached);
            add_link(&mut links, &spec.id, &attached, class, scheduled);
            let role = match spec.role {
                RoleSpec::Consumer => ClientRole::Consumer,
                RoleSpec::Provider => ClientRole::Provider,
                RoleSpec::Both => ClientRole::Both,
            };
            if spec.scope_of_interest.is_some() {
                consumer_order.push(spec.id.clone());
            }
            clients.insert(
                spec.id.clone(),
                ClientRt {
                    role,
                    attached_broker: attached,
                    interest: spec.scope_of_interest.clone(),
                    pending: VecDeque::new(),
                    polling: false,
                    next_msg: 0,
                    remote_scheduled: scheduled,
                },
            );
        }

        let device_components: BTreeSet<String> = host_of
            .iter()
            .filter(|(_, h)| **h == Host::Device)
            .map(|(id, _)| id.clone())
            .collect();

        // Workload: arrivals and per-query provider delays, both drawn in
        // arrival order so runs over the same seed stay comparable across
        // modes.
        let n = cfg.workload.n_queries;
        let mut arrivals_rng = substream(seed, Substream::Arrivals);
        let arrival_times =
            workload::generate_arrivals(n, cfg.workload.mean_inter_arrival_ms, &mut arrivals_rng);
        let mut delay_rng = substream(seed, Substream::Delays);
        let delays: Vec<u64> = (0..n)
            .map(|_| {
                workload::sample_delay_in(
                    cfg.provider_delay.min_ms,
                    cfg.provider_delay.max_ms,
                    &mut delay_rng,
                )
            })
            .collect();

        Ok(Sim {
            cfg,
            seed,
            now: 0,
            seq: 0,
            heap: BinaryHeap::new(),
            brokers,
            clients,
            links,
            device_components,
            model,
            ledger: EnergyLedger::new(),
            trace: TraceLog::new(),
            availability,
            queries: Vec::with_capacity(n),
            arrival_times,
            delays,
            consumer_order,
            publish_seq: BTreeMap::new(),
            entity_walks: BTreeMap::new(),
            choice_rng: substream(seed, Substream::ScopeChoice),
            satisfied: BTreeSet::new(),
            dropped_expired: 0,
            outstanding: 0,
            last_activity: 0,
            bulk_timers: BTreeSet::new(),
            capped: false,
        })
    }

    fn schedule(&mut self, time: u64, event: Event) {
        if !event.is_periodic() {
            self.outstanding += 1;
        }
        self.seq += 1;
        self.heap.push(Scheduled {
            time,
            seq: self.seq,
            event,
        });
    }

    fn work_remains(&self) -> bool {
        self.outstanding > 0
            || self.brokers.values().any(|b| b.has_pending_outbound())
            || self.clients.values().any(|c| !c.pending.is_empty())
    }

    fn run(&mut self) {
        // Registrations in roster order, then the workload.
        let client_ids: Vec<String> = self.cfg.clients.iter().map(|c| c.id.clone()).collect();
        for id in client_ids {
            self.schedule(0, Event::Register { client: id });
        }
        for (index, t) in self.arrival_times.clone().into_iter().enumerate() {
            self.schedule(t, Event::QueryArrival { index });
        }
        if self.brokers.len() >= 2 {
            let interval = self.cfg.reg_exchange_interval_ms;
            self.schedule(interval, Event::RegExchangeTick);
        }
        self.schedule(HOUSEKEEPING_INTERVAL_MS, Event::Housekeeping);
        if self.availability.up_fraction < 1.0 {
            if let Some(edge) = self.availability.next_edge_after(0) {
                self.schedule(edge, Event::LinkEdge);
            }
        }

        while let Some(Scheduled { time, event, .. }) = self.heap.pop() {
            if time > self.cfg.duration_cap_ms {
                self.capped = true;
                break;
            }
            debug_assert!(time >= self.now, "event time regression");
            self.now = time;
            if !event.is_periodic() {
                self.outstanding -= 1;
            }
            self.dispatch(event);
        }
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::Register { client } => {
                self.last_activity = self.now;
                self.do_register(&client);
            }
            Event::QueryArrival { index } => {
                self.last_activity = self.now;
                self.do_query_arrival(index);
            }
            Event::Delivery { from, to, envelope } => {
                self.last_activity = self.now;
                self.do_delivery(&from, &to, envelope);
            }
            Event::ProviderRespond { provider, sub } => {
                self.last_activity = self.now;
                self.do_provider_respond(&provider, sub);
            }
            Event::RegExchangeTick => {
                if self.work_remains() {
                    let ids: Vec<String> = self.brokers.keys().cloned().collect();
                    for id in ids {
                        let out = self
                            .brokers
                            .get_mut(&id)
                            .expect("broker")
                            .periodic_reg_exchange(self.now, &mut self.trace);
                        self.process_broker_output(&id, out);
                    }
                    self.last_activity = self.now;
                    let next = self.now + self.cfg.reg_exchange_interval_ms;
                    self.schedule(next, Event::RegExchangeTick);
                }
            }
            Event::Housekeeping => {
                if self.work_remains() {
                    let ids: Vec<String> = self.brokers.keys().cloned().collect();
                    for id in ids {
                        self.brokers
                            .get_mut(&id)
                            .expect("broker")
                            .expire_housekeeping(self.now, &mut self.trace);
                    }
                    let next = self.now + HOUSEKEEPING_INTERVAL_MS;
                    self.schedule(next, Event::Housekeeping);
                }
            }
            Event::BulkTimer { broker, at } => {
                self.bulk_timers.remove(&(broker.clone(), at));
                let due = self
                    .brokers
                    .get(&broker)
                    .map(|b| b.bulk_deadline() == Some(at))
                    .unwrap_or(false);
                if due {
                    self.last_activity = self.now;
                    let out = self
                        .brokers
                        .get_mut(&broker)
                        .expect("broker")
                        .bulk_flush(self.now, FlushCause::Deadline, &mut self.trace);
                    self.process_broker_output(&broker, out);
                }
            }
            Event::LinkEdge => {
                self.do_link_edge();
            }
            Event::PollTick { client } => {
                self.do_poll(&client);
            }
        }
    }

    // -----------------------------------------------------------------
    // Event handlers
    // -----------------------------------------------------------------

    fn do_register(&mut self, client_id: &str) {
        let (broker_id, role) = {
            let client = &self.clients[client_id];
            (client.attached_broker.clone(), client.role)
        };
        let spec = self
            .cfg
            .clients
            .iter()
            .find(|c| c.id == client_id)
            .expect("client spec");
        let scheme = endpoint_scheme(&self.links, client_id, &broker_id);
        let adv = ClientAdvertisement::new(
            client_id,
            format!("{scheme}://{client_id}"),
            role,
            spec.served_scopes.clone(),
            self.now,
        )
        .expect("valid advertisement");
        let header = self.client_header(client_id);
        let msg = ProtocolMessage::new(
            header,
            MessageBody::RegTableUpdate {
                origin_broker_id: client_id.to_string(),
                advertisements: vec![adv],
            },
        );
        self.client_send(client_id, Envelope::single(msg));
    }

    fn do_query_arrival(&mut self, index: usize) {
        let consumer_id = self.consumer_order[index % self.consumer_order.len()].clone();
        let scope = self.clients[&consumer_id]
            .interest
            .clone()
            .expect("consumer has a scope of interest");
        let validity = self.cfg.scope_validity(&scope).expect("scope registered");
        let entity_idx = self.next_entity_index(&consumer_id);
        let entity = EntityRef::new("username", format!("{consumer_id}_e{entity_idx:03}"))
            .expect("entity id");
        let sub_id = format!("q{index:06}");
        let expiry = self.now + validity;
        let mut sub = Subscription::new(
            &sub_id,
            &consumer_id,
            &scope,
            Some(entity),
            ConstraintExpr::True,
            expiry,
            self.now,
        )
        .expect("valid subscription")
        .one_time()
        .with_callback(CallbackMode::BrokerRouted);
        if self.cfg.bulk_mode {
            sub = sub.with_priority(Priority::Low);
        }
        self.queries.push(QueryInfo { id: sub_id, expiry });
        let header = self.client_header(&consumer_id);
        let msg = ProtocolMessage::new(header, MessageBody::Subscribe(sub));
        self.client_send(&consumer_id, Envelope::single(msg));
    }

    /// Next entity for a consumer's query: a shuffled pass over the whole
    /// pool, reshuffled when exhausted.
    fn next_entity_index(&mut self, consumer_id: &str) -> u64 {
        use rand::seq::SliceRandom;
        let pool = self.cfg.workload.entity_pool_size as u64;
        let (order, pos) = self
            .entity_walks
            .entry(consumer_id.to_string())
            .or_insert_with(|| (Vec::new(), 0));
        if *pos >= order.len() {
            let mut fresh: Vec<u64> = (0..pool).collect();
            fresh.shuffle(&mut self.choice_rng);
            *order = fresh;
            *pos = 0;
        }
        let idx = order[*pos];
        *pos += 1;
        idx
    }

    fn do_provider_respond(&mut self, provider_id: &str, sub: Subscription) {
        if sub.expired(self.now) {
            self.dropped_expired += 1;
            self.trace.push(
                TraceRow::new(self.now, provider_id, EventKind::DropExpired)
                    .scope(&sub.scope)
                    .subscription(&sub.id),
            );
            return;
        }
        let payload = self.cfg.scope_payload(&sub.scope).unwrap_or(512);
        let validity = self.cfg.scope_validity(&sub.scope).unwrap_or(60_000);
        let entity = sub
            .entity
            .clone()
            .unwrap_or_else(|| EntityRef::new("username", "anyone").expect("entity"));
        let seq = {
            let c = self.publish_seq.entry(provider_id.to_string()).or_insert(0);
            *c += 1;
            *c
        };
        let element = ContextElement::new(
            provider_id,
            entity,
            &sub.scope,
            vec![
                ParamValue::atom("value", format!("{seq}")),
                ParamValue::atom("producedBy", provider_id),
            ],
            self.now,
            self.now + validity,
            payload,
        )
        .expect("valid element");
        let header = self.client_header(provider_id);
        let msg = ProtocolMessage::new(
            header,
            MessageBody::Publish {
                element,
                matched_subscription_ids: vec![sub.id.clone()],
            },
        );
        self.client_send(provider_id, Envelope::single(msg));
    }

    fn do_delivery(&mut self, from: &str, to: &str, envelope: Envelope) {
        if self.brokers.contains_key(to) {
            self.deliver_to_broker(from, to, envelope);
        } else {
            self.deliver_to_client(from, to, envelope);
        }
    }

    fn deliver_to_broker(&mut self, from: &str, broker_id: &str, envelope: Envelope) {
        let from_is_broker = self.brokers.contains_key(from);
        for msg in envelope.messages {
            let broker = self.brokers.get_mut(broker_id).expect("broker");
            let out = match msg.body {
                MessageBody::Subscribe(sub) => {
                    match broker.subscribe(
                        sub,
                        Destination::LocalClient(from.to_string()),
                        self.now,
                        &mut self.trace,
                    ) {
                        Ok(out) => out,
                        Err(_) => {
                            self.dropped_expired += 1;
                            self.trace.push(
                                TraceRow::new(self.now, broker_id, EventKind::DropExpired)
                                    .from_id(from),
                            );
                            continue;
                        }
                    }
                }
                MessageBody::SubTableUpdate {
                    origin_broker_id,
                    subscription,
                } => {
                    match broker.subscribe(
                        subscription,
                        Destination::NeighborBroker(origin_broker_id),
                        self.now,
                        &mut self.trace,
                    ) {
                        Ok(out) => out,
                        Err(_) => {
                            self.dropped_expired += 1;
                            self.trace.push(
                                TraceRow::new(self.now, broker_id, EventKind::DropExpired)
                                    .from_id(from),
                            );
                            continue;
                        }
                    }
                }
                MessageBody::Publish {
                    element,
                    matched_subscription_ids,
                } => {
                    match broker.handle_publish(
                        element,
                        &from.to_string(),
                        &matched_subscription_ids,
                        self.now,
                        &mut self.trace,
                    ) {
                        Ok(out) => out,
                        Err(_) => {
                            self.dropped_expired += 1;
                            self.trace.push(
                                TraceRow::new(self.now, broker_id, EventKind::DropExpired)
                                    .from_id(from),
                            );
                            continue;
                        }
                    }
                }
                MessageBody::Forward {
                    element,
                    matched_subscription_ids,
                } => broker.handle_forward(
                    element,
                    &matched_subscription_ids,
                    &from.to_string(),
                    self.now,
                    &mut self.trace,
                ),
                MessageBody::RegTableUpdate {
                    origin_broker_id,
                    advertisements,
                } => {
                    if from_is_broker {
                        broker.handle_reg_update(
                            &origin_broker_id,
                            advertisements,
                            self.now,
                            &mut self.trace,
                        )
                    } else {
                        let mut merged = BrokerOutput::default();
                        for adv in advertisements {
                            match broker.register_client(adv, self.now, &mut self.trace) {
                                Ok(out) => merged.extend(out),
                                Err(e) => panic!("registration failed: {e}"),
                            }
                        }
                        merged
                    }
                }
                MessageBody::LookupRequest { scope } => {
                    let endpoint = broker.lookup(&scope);
                    self.trace.push(
                        TraceRow::new(self.now, broker_id, EventKind::Lookup)
                            .from_id(from)
                            .scope(&scope),
                    );
                    let header = broker.make_header(self.now);
                    let reply = ProtocolMessage::new(header, MessageBody::LookupReply { endpoint });
                    BrokerOutput::single(Address::Client(from.to_string()), Envelope::single(reply))
                }
                MessageBody::Notify { .. } | MessageBody::LookupReply { .. } => continue,
            };
            self.process_broker_output(broker_id, out);
        }
    }

    fn deliver_to_client(&mut self, from: &str, client_id: &str, envelope: Envelope) {
        for msg in envelope.messages {
            match msg.body {
                MessageBody::Subscribe(sub) => {
                    // Forwarded subscription reaching a capable provider.
                    let delay = self.delay_for(&sub.id);
                    self.schedule(
                        self.now + delay,
                        Event::ProviderRespond {
                            provider: client_id.to_string(),
                            sub,
                        },
                    );
                }
                MessageBody::Notify {
                    element,
                    subscription_id,
                } => {
                    if is_fresh(&element, self.now) {
                        let newly = self.satisfied.insert(subscription_id.clone());
                        self.trace.push(
                            TraceRow::new(self.now, client_id, EventKind::NotifyDeliver)
                                .from_id(from)
                                .scope(&element.scope)
                                .subscription(&subscription_id),
                        );
                        debug_assert!(newly, "duplicate notify for {subscription_id}");
                    } else {
                        self.dropped_expired += 1;
                        self.trace.push(
                            TraceRow::new(self.now, client_id, EventKind::DropExpired)
                                .from_id(from)
                                .scope(&element.scope)
                                .subscription(&subscription_id),
                        );
                    }
                }
                _ => {}
            }
        }
    }

    fn do_link_edge(&mut self) {
        let up = self.availability.is_up(self.now);
        self.trace.push(TraceRow::new(
            self.now,
            "net",
            if up { EventKind::LinkUp } else { EventKind::LinkDown },
        ));
        // Notify brokers on scheduled links of the state change.
        let scheduled: Vec<(String, String)> = self
            .links
            .values()
            .filter(|l| l.schedule.up_fraction < 1.0)
            .map(|l| (l.from.clone(), l.to.clone()))
            .collect();
        for (a, b) in scheduled {
            for (me, peer) in [(&a, &b), (&b, &a)] {
                if self.brokers.contains_key(me.as_str()) {
                    let addr = if self.brokers.contains_key(peer.as_str()) {
                        Address::Broker(peer.clone())
                    } else {
                        Address::Client(peer.clone())
                    };
                    let out = self
                        .brokers
                        .get_mut(me.as_str())
                        .expect("broker")
                        .connectivity_changed(addr, up, self.now, &mut self.trace);
                    let me = me.clone();
                    self.process_broker_output(&me, out);
                }
            }
        }
        if !up {
            // Device clients on scheduled links watch connectivity themselves.
            let pollers: Vec<String> = self
                .clients
                .iter()
                .filter(|(_, c)| c.remote_scheduled && !c.polling)
                .map(|(id, _)| id.clone())
                .collect();
            for id in pollers {
                self.clients.get_mut(&id).expect("client").polling = true;
                self.schedule(self.now + POLL_INTERVAL_MS, Event::PollTick { client: id });
            }
        }
        if self.work_remains() {
            if let Some(next) = self.availability.next_edge_after(self.now) {
                self.schedule(next, Event::LinkEdge);
            }
        }
    }

    fn do_poll(&mut self, client_id: &str) {
        self.ledger.add(client_id, self.model.cpu_poll_mj);
        self.trace
            .push(TraceRow::new(self.now, client_id, EventKind::Poll));
        if self.availability.is_up(self.now) {
            let pending: Vec<Envelope> = {
                let client = self.clients.get_mut(client_id).expect("client");
                client.polling = false;
                client.pending.drain(..).collect()
            };
            if !pending.is_empty() {
                self.trace.push(
                    TraceRow::new(self.now, client_id, EventKind::Drained)
                        .subscription(&pending.len().to_string()),
                );
                self.last_activity = self.now;
            }
            for envelope in pending {
                self.client_send(client_id, envelope);
            }
        } else if self.work_remains() {
            self.schedule(
                self.now + POLL_INTERVAL_MS,
                Event::PollTick {
                    client: client_id.to_string(),
                },
            );
        } else {
            self.clients.get_mut(client_id).expect("client").polling = false;
        }
    }

    // -----------------------------------------------------------------
    // Transport
    // -----------------------------------------------------------------

    fn client_header(&mut self, client_id: &str) -> MessageHeader {
        let client = self.clients.get_mut(client_id).expect("client");
        client.next_msg += 1;
        MessageHeader {
            message_id: format!("{client_id}-m{:06}", client.next_msg),
            sender_id: client_id.to_string(),
            sent_at: self.now,
        }
    }

    /// Client-originated send: queues client-side while its scheduled link
    /// is down (the poll chain drains it later).
    fn client_send(&mut self, client_id: &str, envelope: Envelope) {
        let (broker_id, remote_scheduled) = {
            let c = &self.clients[client_id];
            (c.attached_broker.clone(), c.remote_scheduled)
        };
        if remote_scheduled && !self.availability.is_up(self.now) {
            for msg in &envelope.messages {
                self.trace.push(
                    TraceRow::new(self.now, client_id, EventKind::Queued)
                        .message_id(&msg.header.message_id)
                        .to_id(&broker_id),
                );
            }
            let client = self.clients.get_mut(client_id).expect("client");
            client.pending.push_back(envelope);
            if !client.polling {
                client.polling = true;
                self.schedule(
                    self.now + POLL_INTERVAL_MS,
                    Event::PollTick {
                        client: client_id.to_string(),
                    },
                );
            }
            return;
        }
        self.transmit(client_id, &broker_id, envelope);
    }

    fn process_broker_output(&mut self, broker_id: &str, out: BrokerOutput) {
        for Outbound { to, envelope } in out.outbound {
            let target = to.id().to_string();
            self.transmit(broker_id, &target, envelope);
        }
        self.maybe_schedule_bulk_timer(broker_id);
    }

    fn maybe_schedule_bulk_timer(&mut self, broker_id: &str) {
        let Some(deadline) = self.brokers.get(broker_id).and_then(|b| b.bulk_deadline()) else {
            return;
        };
        let key = (broker_id.to_string(), deadline);
        if self.bulk_timers.insert(key) {
            self.schedule(
                deadline,
                Event::BulkTimer {
                    broker: broker_id.to_string(),
                    at: deadline,
                },
            );
        }
    }

    /// Hands an envelope to the link: charges the energy ledger and schedules
    /// the delivery. A refused send (link down at this instant) is pushed
    /// back into the sender's queue.
    fn transmit(&mut self, from: &str, to: &str, envelope: Envelope) {
        let link = self
            .links
            .get(&link_key(from, to))
            .unwrap_or_else(|| panic!("no link between {from} and {to}"))
            .clone();
        if !link.schedule.is_up(self.now) {
            if self.brokers.contains_key(from) {
                let addr = if self.brokers.contains_key(to) {
                    Address::Broker(to.to_string())
                } else {
                    Address::Client(to.to_string())
                };
                self.brokers
                    .get_mut(from)
                    .expect("broker")
                    .queue_outbound(addr, envelope, self.now, &mut self.trace);
            } else {
                let client = self.clients.get_mut(from).expect("sender exists");
                client.pending.push_back(envelope);
            }
            return;
        }
        let bytes = envelope.payload_bytes();
        charge_call(&mut self.ledger, from, to, link.class, bytes, &self.model);
        let first_id = envelope
            .messages
            .first()
            .map(|m| m.header.message_id.clone())
            .unwrap_or_else(|| "-".into());
        self.trace.push(
            TraceRow::new(self.now, from, EventKind::Send)
                .message_id(&first_id)
                .to_id(to)
                .scope(link.class.as_str()),
        );
        self.schedule(
            self.now + link.latency_ms,
            Event::Delivery {
                from: from.to_string(),
                to: to.to_string(),
                envelope,
            },
        );
    }

    fn delay_for(&self, sub_id: &str) -> u64 {
        sub_id
            .strip_prefix('q')
            .and_then(|s| s.parse::<usize>().ok())
            .and_then(|i| self.delays.get(i).copied())
            .unwrap_or(1_000)
    }

    // -----------------------------------------------------------------
    // Metrics
    // -----------------------------------------------------------------

    fn finish(self) -> RunResult {
        let device_energy = self
            .ledger
            .total_mj_where(|c| self.device_components.contains(c));
        let total = self.ledger.total_mj();
        let mut cache_hits = 0;
        let mut cache_misses = 0;
        let mut dropped = self.dropped_expired;
        let mut bulk_flushes = 0;
        let mut bulk_batch_calls = 0;
        let mut bulk_enqueued = 0;
        let mut bulk_deadline_flushes = 0;
        for broker in self.brokers.values() {
            cache_hits += broker.counters.cache_hits;
            cache_misses += broker.counters.cache_misses;
            dropped += broker.counters.dropped_expired;
            bulk_flushes += broker.counters.bulk_flushes;
            bulk_batch_calls += broker.counters.bulk_batch_calls;
            bulk_enqueued += broker.counters.bulk_enqueued;
            bulk_deadline_flushes += broker.counters.bulk_deadline_flushes;
        }
        let satisfied = self.satisfied.len();
        let end = self.last_activity;
        let mut pending_at_end = 0;
        let mut expired_unsatisfied = 0;
        for q in &self.queries {
            if self.satisfied.contains(&q.id) {
                continue;
            }
            if q.expiry > end {
                pending_at_end += 1;
            } else {
                expired_unsatisfied += 1;
            }
        }
        // Arrivals never issued because the duration cap hit count as pending.
        if self.capped {
            pending_at_end += self.cfg.workload.n_queries.saturating_sub(self.queries.len());
        } else {
            debug_assert_eq!(self.queries.len(), self.cfg.workload.n_queries);
        }
        let issued = self.cfg.workload.n_queries;
        let hit_rate = if cache_hits + cache_misses > 0 {
            cache_hits as f64 / (cache_hits + cache_misses) as f64
        } else {
            0.0
        };
        let metrics = Metrics {
            mode: self.cfg.mode.as_str().to_string(),
            bulk: self.cfg.bulk_mode,
            local_transport: short_transport(&self.cfg.local_transport),
            n_queries: issued,
            availability: self.cfg.availability_up_fraction,
            seed: self.seed,
            device_energy_mj: device_energy,
            cloud_energy_mj: total - device_energy,
            mean_device_energy_per_query_mj: if satisfied > 0 {
                device_energy / satisfied as f64
            } else {
                0.0
            },
            queries_issued: issued,
            queries_satisfied: satisfied,
            queries_expired_unsatisfied: expired_unsatisfied,
            queries_pending_at_end: pending_at_end,
            cache_hits,
            cache_misses,
            hit_rate,
            msgs_ipc: self.ledger.call_count(TransportClass::LocalIpc),
            msgs_socket: self.ledger.call_count(TransportClass::LocalSocket),
            msgs_local_http: self.ledger.call_count(TransportClass::LocalHttp),
            msgs_remote_http: self.ledger.call_count(TransportClass::RemoteHttp),
            bulk_flushes,
            bulk_batch_calls,
            bulk_enqueued,
            bulk_deadline_flushes,
            dropped_expired: dropped,
            simulated_duration_ms: end,
        };
        RunResult {
            metrics,
            trace: self.trace,
        }
    }
}

fn link_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

fn spans_device(host_of: &BTreeMap<String, Host>, a: &str, b: &str) -> bool {
    let ha = host_of.get(a).copied();
    let hb = host_of.get(b).copied();
    matches!(
        (ha, hb),
        (Some(Host::Device), Some(Host::Cloud)) | (Some(Host::Cloud), Some(Host::Device))
    )
}

fn endpoint_scheme(
    links: &BTreeMap<(String, String), Link>,
    client: &str,
    broker: &str,
) -> &'static str {
    match links.get(&link_key(client, broker)).map(|l| l.class) {
        Some(TransportClass::LocalIpc) => "ipc",
        Some(TransportClass::LocalSocket) => "socket",
        _ => "http",
    }
}

fn short_transport(name: &str) -> String {
    match TransportClass::parse(name) {
        Some(TransportClass::LocalIpc) => "ipc".into(),
        Some(TransportClass::LocalSocket) => "socket".into(),
        Some(TransportClass::LocalHttp) => "http".into(),
        Some(TransportClass::RemoteHttp) => "remote".into(),
        None => name.to_string(),
    }
}
