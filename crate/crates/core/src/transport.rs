//! Message exchange for the single round, either simulated in-process or
//! over localhost TCP. Both transports drive the same session logic and
//! push every message through the binary codec, so they produce identical
//! models and identical byte counts.
//!
//! Sequence per client: `Hello →`, `← Config`, `Upload →`; once every
//! rostered client has uploaded the server finalizes and sends
//! `← GlobalModel`, after which each client fits its refinement stream
//! locally.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::client::{ClientError, LocalClient, LocalKnowledge, PersonalModel};
use crate::features::{derive_seed, make_head, ProjectionHead};
use crate::linalg::Matrix;
use crate::protocol::{
    decode, encode, error_code, read_message, write_message, Message, MessageKind, ProtocolConfig, ProtocolError,
    TransportStats, Upload,
};
use crate::server::{Aggregator, Correction, ServerError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
const POLL_INTERVAL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum RoundError {
    #[error("round incomplete: no upload from client(s) {absent:?}")]
    MissingUploads { absent: Vec<u32> },
    #[error("client {client}: {source}")]
    Client {
        client: u32,
        #[source]
        source: ClientError,
    },
    #[error("client {client} got error {code} from server: {text}")]
    Rejected { client: u32, code: u16, text: String },
    #[error("expected a {expected:?} message, got {got:?}")]
    Unexpected { expected: MessageKind, got: MessageKind },
    #[error("config not usable by client {client}: {reason}")]
    Config { client: u32, reason: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("transport i/o: {0}")]
    Io(String),
}

impl From<io::Error> for RoundError {
    fn from(e: io::Error) -> Self {
        RoundError::Io(e.to_string())
    }
}

/// Server parameters for one round.
#[derive(Debug, Clone)]
pub struct ServerNode {
    pub config: ProtocolConfig,
    /// Client ids that must upload before the server finalizes.
    pub roster: Vec<u32>,
    pub timeout: Duration,
    pub correction: Correction,
}

impl ServerNode {
    /// Roster `0..num_clients`, 30 s timeout, standard finalization.
    pub fn new(config: ProtocolConfig) -> Self {
        let roster = (0..config.num_clients).collect();
        Self {
            config,
            roster,
            timeout: DEFAULT_TIMEOUT,
            correction: Correction::Standard,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_correction(mut self, correction: Correction) -> Self {
        self.correction = correction;
        self
    }
}

/// Failure injection for tests and demos.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClientBehavior {
    #[default]
    Normal,
    /// Never contacts the server.
    Silent,
    /// Says hello, receives the config, then disconnects without uploading.
    NoUpload,
}

#[derive(Debug, Clone)]
pub struct ClientNode {
    pub client: LocalClient<f64>,
    pub behavior: ClientBehavior,
}

impl ClientNode {
    pub fn new(client: LocalClient<f64>) -> Self {
        Self {
            client,
            behavior: ClientBehavior::Normal,
        }
    }

    pub fn with_behavior(mut self, behavior: ClientBehavior) -> Self {
        self.behavior = behavior;
        self
    }

    pub fn id(&self) -> u32 {
        self.client.id
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub g_global: Matrix<f64>,
    pub models: BTreeMap<u32, PersonalModel<f64>>,
    pub stats: TransportStats,
    /// Client ids in the order their uploads were fused.
    pub arrival_order: Vec<u32>,
}

/// What the server side of a round yields.
#[derive(Debug, Clone)]
pub struct ServerReport {
    pub g_global: Matrix<f64>,
    pub stats: TransportStats,
    pub arrival_order: Vec<u32>,
}

pub trait Transport {
    fn execute(&self, server: &ServerNode, clients: &[ClientNode]) -> Result<RoundOutcome, RoundError>;
}

/// Runs one complete round and returns every client's personal model.
pub fn run_round<Tr: Transport + ?Sized>(
    server: &ServerNode,
    clients: &[ClientNode],
    transport: &Tr,
) -> Result<RoundOutcome, RoundError> {
    transport.execute(server, clients)
}

fn error_message(code: u16, text: impl Into<String>) -> Message {
    Message::Error {
        code,
        text: text.into(),
    }
}

struct ServerSession<'a> {
    node: &'a ServerNode,
    greeted: BTreeSet<u32>,
    agg: Aggregator<f64>,
    arrival: Vec<u32>,
}

impl<'a> ServerSession<'a> {
    fn new(node: &'a ServerNode) -> Self {
        Self {
            node,
            greeted: BTreeSet::new(),
            agg: Aggregator::new(node.config.gamma, node.roster.len()),
            arrival: Vec::new(),
        }
    }

    fn on_hello(&mut self, id: u32) -> Message {
        if !self.node.roster.contains(&id) {
            return error_message(error_code::UNKNOWN_CLIENT, format!("client {id} is not on the roster"));
        }
        if !self.greeted.insert(id) {
            return error_message(error_code::DUPLICATE_CLIENT, format!("client {id} already joined"));
        }
        Message::Config(self.node.config.clone())
    }

    /// Fuses an upload, or returns the error to send back.
    fn on_upload(&mut self, up: Upload) -> Result<(), Message> {
        let id = up.client_id();
        if !self.greeted.contains(&id) {
            return Err(error_message(
                error_code::UNEXPECTED_MESSAGE,
                format!("upload from client {id} before hello"),
            ));
        }
        let (d, c) = (self.node.config.primary_width(), self.node.config.num_classes as usize);
        if up.a().rows() != d || up.g_local().cols() != c {
            return Err(error_message(
                error_code::BAD_UPLOAD,
                format!(
                    "upload is {}x{} / {} classes; config expects {d}x{d} / {c}",
                    up.a().rows(),
                    up.a().cols(),
                    up.g_local().cols()
                ),
            ));
        }
        let (id, n, a, g) = up.into_parts();
        let knowledge = LocalKnowledge::from_parts(id, a, g, n as usize)
            .map_err(|e| error_message(error_code::BAD_UPLOAD, e.to_string()))?;
        self.agg.accept(&knowledge).map_err(|e| match e {
            ServerError::DuplicateClient(_) => error_message(error_code::DUPLICATE_CLIENT, e.to_string()),
            _ => error_message(error_code::BAD_UPLOAD, e.to_string()),
        })?;
        self.arrival.push(id);
        Ok(())
    }

    fn missing(&self) -> Vec<u32> {
        let fused = self.agg.fused_ids();
        self.node.roster.iter().copied().filter(|id| !fused.contains(id)).collect()
    }

    fn finish(&self) -> Result<Matrix<f64>, RoundError> {
        let absent = self.missing();
        if !absent.is_empty() {
            return Err(RoundError::MissingUploads { absent });
        }
        Ok(self.agg.finalize_with(self.node.correction)?)
    }
}

type Heads = (Arc<ProjectionHead<f64>>, Arc<ProjectionHead<f64>>);

/// Builds the two heads a client uses under `cfg`. With a per-client
/// refinement head the seed is derived from `seed_r` and the client id.
pub fn heads_for(cfg: &ProtocolConfig, client_id: u32, in_dim: usize) -> Result<Heads, ClientError> {
    let primary = make_head(cfg.seed_p, in_dim, cfg.d_p as usize, cfg.act_p)?.with_bias(cfg.append_bias);
    let seed_r = if cfg.per_client_refine_head {
        derive_seed(cfg.seed_r, u64::from(client_id))
    } else {
        cfg.seed_r
    };
    let refine = make_head(seed_r, in_dim, cfg.d_r as usize, cfg.act_r)?.with_bias(cfg.append_bias);
    Ok((Arc::new(primary), Arc::new(refine)))
}

struct ClientSession<'a> {
    node: &'a ClientNode,
    state: Option<(ProtocolConfig, Heads)>,
}

impl<'a> ClientSession<'a> {
    fn new(node: &'a ClientNode) -> Self {
        Self { node, state: None }
    }

    fn id(&self) -> u32 {
        self.node.id()
    }

    fn hello(&self) -> Message {
        Message::Hello { client_id: self.id() }
    }

    fn expect_config(&mut self, msg: Message) -> Result<Option<Message>, RoundError> {
        let cfg = match msg {
            Message::Config(cfg) => cfg,
            other => return Err(self.unexpected(MessageKind::Config, other)),
        };
        let train = &self.node.client.train;
        if cfg.num_classes as usize != train.num_classes() {
            return Err(RoundError::Config {
                client: self.id(),
                reason: format!("{} classes announced, local data has {}", cfg.num_classes, train.num_classes()),
            });
        }
        let heads = heads_for(&cfg, self.id(), train.dim()).map_err(|e| self.client_err(e))?;
        if self.node.behavior == ClientBehavior::NoUpload {
            return Ok(None);
        }
        let k = self
            .node
            .client
            .primary_upload(&heads.0, cfg.gamma)
            .map_err(|e| self.client_err(e))?;
        let up = Upload::new(self.id(), k.n_samples as u64, k.a.into_matrix(), k.g_local)?;
        self.state = Some((cfg, heads));
        Ok(Some(Message::Upload(up)))
    }

    fn expect_global(&self, msg: Message) -> Result<PersonalModel<f64>, RoundError> {
        let g = match msg {
            Message::GlobalModel { g } => g,
            other => return Err(self.unexpected(MessageKind::GlobalModel, other)),
        };
        let (cfg, (hp, hr)) = self.state.as_ref().expect("config precedes the global model");
        self.node
            .client
            .personalize(hp.clone(), hr.clone(), g, cfg.beta, cfg.lambda)
            .map_err(|e| self.client_err(e))
    }

    fn unexpected(&self, expected: MessageKind, got: Message) -> RoundError {
        match got {
            Message::Error { code, text } => RoundError::Rejected {
                client: self.id(),
                code,
                text,
            },
            other => RoundError::Unexpected {
                expected,
                got: other.kind(),
            },
        }
    }

    fn client_err(&self, source: ClientError) -> RoundError {
        RoundError::Client {
            client: self.id(),
            source,
        }
    }
}

/// Turn order of the simulated clients.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ArrivalOrder {
    /// The order of the client slice.
    #[default]
    AsGiven,
    /// A ChaCha8 shuffle of the client slice.
    Shuffled(u64),
    /// These client ids first, in this order, then everyone else as given.
    /// Replaying a socket run's `arrival_order` reproduces it bit for bit.
    Explicit(Vec<u32>),
}

/// Deterministic single-threaded transport with turn-taking clients.
#[derive(Debug, Clone, Default)]
pub struct SimulatedTransport {
    pub order: ArrivalOrder,
}

impl SimulatedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shuffled(seed: u64) -> Self {
        Self {
            order: ArrivalOrder::Shuffled(seed),
        }
    }

    pub fn replay(order: Vec<u32>) -> Self {
        Self {
            order: ArrivalOrder::Explicit(order),
        }
    }

    fn turns(&self, clients: &[ClientNode]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..clients.len()).collect();
        match &self.order {
            ArrivalOrder::AsGiven => {}
            ArrivalOrder::Shuffled(seed) => order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed)),
            ArrivalOrder::Explicit(ids) => {
                let rank = |i: &usize| {
                    ids.iter()
                        .position(|&id| id == clients[*i].id())
                        .unwrap_or(ids.len())
                };
                order.sort_by_key(rank);
            }
        }
        order
    }
}

/// Passes `msg` through the codec, as if it had crossed a wire.
fn over_wire(msg: &Message) -> Result<(Message, usize), ProtocolError> {
    let frame = encode(msg);
    decode(&frame)
}

impl Transport for SimulatedTransport {
    fn execute(&self, server: &ServerNode, clients: &[ClientNode]) -> Result<RoundOutcome, RoundError> {
        let order = self.turns(clients);
        let mut stats = TransportStats::default();
        let mut session = ServerSession::new(server);
        let mut uploaded: Vec<ClientSession> = Vec::new();

        let to_server = |stats: &mut TransportStats, msg: &Message| -> Result<Message, ProtocolError> {
            let (m, n) = over_wire(msg)?;
            stats.record_received(m.kind(), n);
            Ok(m)
        };
        let to_client = |stats: &mut TransportStats, msg: &Message| -> Result<Message, ProtocolError> {
            let (m, n) = over_wire(msg)?;
            stats.record_sent(m.kind(), n);
            Ok(m)
        };

        for &i in &order {
            let node = &clients[i];
            if node.behavior == ClientBehavior::Silent {
                continue;
            }
            let mut cs = ClientSession::new(node);
            let hello = to_server(&mut stats, &cs.hello())?;
            let Message::Hello { client_id } = hello else { unreachable!() };
            let reply = to_client(&mut stats, &session.on_hello(client_id))?;
            let Some(upload) = cs.expect_config(reply)? else {
                continue;
            };
            let Message::Upload(up) = to_server(&mut stats, &upload)? else { unreachable!() };
            match session.on_upload(up) {
                Ok(()) => uploaded.push(cs),
                Err(reject) => {
                    let reply = to_client(&mut stats, &reject)?;
                    return Err(cs.unexpected(MessageKind::GlobalModel, reply));
                }
            }
        }

        let g = match session.finish() {
            Ok(g) => g,
            Err(e) => {
                for _ in &uploaded {
                    to_client(&mut stats, &error_message(error_code::ROUND_FAILED, e.to_string()))?;
                }
                return Err(e);
            }
        };
        let global = Message::GlobalModel { g: g.clone() };
        let mut models = BTreeMap::new();
        for cs in &uploaded {
            let msg = to_client(&mut stats, &global)?;
            models.insert(cs.id(), cs.expect_global(msg)?);
        }
        Ok(RoundOutcome {
            g_global: g,
            models,
            stats,
            arrival_order: session.arrival.clone(),
        })
    }
}

/// Localhost TCP transport: one server thread plus one thread per client.
#[derive(Debug, Clone, Copy)]
pub struct SocketTransport {
    pub bind_addr: SocketAddr,
}

impl Default for SocketTransport {
    fn default() -> Self {
        Self {
            bind_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
        }
    }
}

impl SocketTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for SocketTransport {
    fn execute(&self, server: &ServerNode, clients: &[ClientNode]) -> Result<RoundOutcome, RoundError> {
        let listener = TcpListener::bind(self.bind_addr)?;
        let addr = listener.local_addr()?;
        let timeout = server.timeout;
        let (report, client_results) = thread::scope(|s| {
            let server_thread = s.spawn(|| serve(listener, server));
            let client_threads: Vec<_> = clients
                .iter()
                .filter(|c| c.behavior != ClientBehavior::Silent)
                .map(|c| (c.id(), s.spawn(move || join(addr, c, timeout))))
                .collect();
            let report = server_thread.join().expect("server thread panicked");
            let results: Vec<_> = client_threads
                .into_iter()
                .map(|(id, h)| (id, h.join().expect("client thread panicked")))
                .collect();
            (report, results)
        });
        let report = report?;
        let mut models = BTreeMap::new();
        for (id, result) in client_results {
            if let Some(model) = result? {
                models.insert(id, model);
            }
        }
        Ok(RoundOutcome {
            g_global: report.g_global,
            models,
            stats: report.stats,
            arrival_order: report.arrival_order,
        })
    }
}

enum Event {
    Frame { conn: usize, msg: Message, bytes: usize },
    Closed { conn: usize, error: Option<ProtocolError> },
}

/// Runs the server side of a round on `listener` until every rostered
/// client has uploaded or the node's timeout elapses. Uploads are fused in
/// arrival order on this thread; connection threads only read frames.
pub fn serve(listener: TcpListener, node: &ServerNode) -> Result<ServerReport, RoundError> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + node.timeout;
    let mut session = ServerSession::new(node);
    let mut stats = TransportStats::default();
    let mut writers: Vec<TcpStream> = Vec::new();
    let mut conn_client: BTreeMap<usize, u32> = BTreeMap::new();
    let (tx, rx) = mpsc::channel::<Event>();

    let result = thread::scope(|s| {
        let outcome = (|| -> Result<Matrix<f64>, RoundError> {
            while !session.missing().is_empty() && Instant::now() < deadline {
                match listener.accept() {
                    Ok((stream, _)) => {
                        stream.set_nonblocking(false)?;
                        stream.set_nodelay(true)?;
                        stream.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(POLL_INTERVAL)))?;
                        let conn = writers.len();
                        let mut reader = stream.try_clone()?;
                        writers.push(stream);
                        let tx = tx.clone();
                        s.spawn(move || loop {
                            match read_message(&mut reader) {
                                Ok((msg, bytes)) => {
                                    if tx.send(Event::Frame { conn, msg, bytes }).is_err() {
                                        break;
                                    }
                                }
                                Err(e) => {
                                    let error = match e {
                                        ProtocolError::Truncated { offset: 0, .. } => None,
                                        e => Some(e),
                                    };
                                    let _ = tx.send(Event::Closed { conn, error });
                                    break;
                                }
                            }
                        });
                        continue;
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {}
                    Err(e) => return Err(e.into()),
                }
                let event = match rx.recv_timeout(POLL_INTERVAL) {
                    Ok(ev) => ev,
                    Err(_) => continue,
                };
                match event {
                    Event::Frame { conn, msg, bytes } => {
                        stats.record_received(msg.kind(), bytes);
                        let reply = match msg {
                            Message::Hello { client_id } => {
                                let reply = session.on_hello(client_id);
                                if matches!(reply, Message::Config(_)) {
                                    conn_client.insert(conn, client_id);
                                }
                                Some(reply)
                            }
                            Message::Upload(up) if conn_client.get(&conn) == Some(&up.client_id()) => {
                                session.on_upload(up).err()
                            }
                            other => Some(error_message(
                                error_code::UNEXPECTED_MESSAGE,
                                format!("unexpected {:?} message", other.kind()),
                            )),
                        };
                        if let Some(reply) = reply {
                            send(&mut writers[conn], &reply, &mut stats);
                        }
                    }
                    Event::Closed { conn, error } => {
                        if let Some(e) = error {
                            send(&mut writers[conn], &error_message(error_code::BAD_UPLOAD, e.to_string()), &mut stats);
                        }
                    }
                }
            }
            session.finish()
        })();

        let fused = session.agg.fused_ids();
        let uploaded: Vec<usize> = conn_client
            .iter()
            .filter(|(_, id)| fused.contains(id))
            .map(|(&conn, _)| conn)
            .collect();
        let reply = match &outcome {
            Ok(g) => Message::GlobalModel { g: g.clone() },
            Err(e) => error_message(error_code::ROUND_FAILED, e.to_string()),
        };
        for conn in uploaded {
            send(&mut writers[conn], &reply, &mut stats);
        }
        for w in &writers {
            let _ = w.shutdown(Shutdown::Both);
        }
        outcome
    });

    Ok(ServerReport {
        g_global: result?,
        stats,
        arrival_order: session.arrival,
    })
}

fn send(stream: &mut TcpStream, msg: &Message, stats: &mut TransportStats) {
    // A vanished client surfaces as a missing upload, not as a write error.
    if let Ok(n) = write_message(stream, msg) {
        stats.record_sent(msg.kind(), n);
    }
}

fn connect(addr: SocketAddr, deadline: Instant) -> Result<TcpStream, RoundError> {
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match TcpStream::connect_timeout(&addr, left.max(POLL_INTERVAL)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e.into()),
            Err(_) => thread::sleep(POLL_INTERVAL),
        }
    }
}

/// Runs one client's side of a round against the server at `addr`.
/// Returns `None` for a client whose behavior stops it before uploading.
pub fn join(addr: SocketAddr, node: &ClientNode, timeout: Duration) -> Result<Option<PersonalModel<f64>>, RoundError> {
    let deadline = Instant::now() + timeout;
    let mut stream = connect(addr, deadline)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(timeout))?;
    let mut cs = ClientSession::new(node);
    write_message(&mut stream, &cs.hello())?;
    let (reply, _) = read_message(&mut stream)?;
    let Some(upload) = cs.expect_config(reply)? else {
        return Ok(None);
    };
    write_message(&mut stream, &upload)?;
    let (reply, _) = read_message(&mut stream)?;
    cs.expect_global(reply).map(Some)
}
