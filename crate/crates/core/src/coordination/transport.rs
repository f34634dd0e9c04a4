//! Message transports for the cooperation round.
//!
//! `Sim` runs the server and every pair on the calling thread and passes
//! encoded frames through in-memory queues. `Socket` runs a TCP server and
//! one client per pair over loopback. Both push every message through the
//! same binary codec, so they produce identical rounds.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::ops::Range;
use std::thread;
use std::time::{Duration, Instant};

use super::round::{
    apply_broadcast, prepare_upload, PairRoundResult, RoundContext, RoundServer, ServerRoundReport,
};
use super::wire::{decode_payload, encode_payload, RoundMessage, WireFormat};
use crate::agent::PairState;
use crate::error::{Error, Result};
use crate::PairId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SocketOptions {
    pub wire: WireFormat,
    /// Read timeout on every connection and the deadline for all pairs to
    /// connect.
    pub timeout: Duration,
}

impl Default for SocketOptions {
    fn default() -> Self {
        SocketOptions {
            wire: WireFormat::Binary,
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transport {
    Sim,
    Socket(SocketOptions),
}

impl Transport {
    pub fn name(&self) -> &'static str {
        match self {
            Transport::Sim => "sim",
            Transport::Socket(_) => "socket",
        }
    }

    pub(crate) fn execute_round(
        &self,
        pairs: &mut [PairState],
        round: u32,
        ctx: &RoundContext,
    ) -> Result<(ServerRoundReport, Vec<PairRoundResult>)> {
        match self {
            Transport::Sim => sim_round(pairs, round, ctx),
            Transport::Socket(opts) => socket_round(pairs, round, ctx, *opts),
        }
    }
}

fn sim_round(
    pairs: &mut [PairState],
    round: u32,
    ctx: &RoundContext,
) -> Result<(ServerRoundReport, Vec<PairRoundResult>)> {
    let num_classes = pairs.first().map_or(0, PairState::num_classes);
    let dim = pairs.first().map_or(0, PairState::dim);
    let mut server = RoundServer::new(round, pairs.iter().map(PairState::id), num_classes, dim);
    let mut server_inbox: VecDeque<Vec<u8>> = VecDeque::new();
    let mut client_inbox: BTreeMap<PairId, VecDeque<Vec<u8>>> = BTreeMap::new();

    for pair in pairs.iter() {
        server_inbox.push_back(encode_payload(&prepare_upload(pair, ctx.gamma, round)?)?);
    }
    while let Some(frame) = server_inbox.pop_front() {
        server.accept(decode_payload(&frame)?)?;
    }
    let broadcast = encode_payload(&server.broadcast())?;
    for pair in pairs.iter() {
        client_inbox
            .entry(pair.id())
            .or_default()
            .push_back(broadcast.clone());
    }

    let mut results = Vec::with_capacity(pairs.len());
    for pair in pairs.iter_mut() {
        let frame = client_inbox
            .get_mut(&pair.id())
            .and_then(VecDeque::pop_front)
            .ok_or(Error::PairDropout {
                round,
                pair: pair.id(),
            })?;
        let global = expect_broadcast(decode_payload(&frame)?, round)?;
        results.push(apply_broadcast(pair, &global, ctx.samples_per_class)?);
        server_inbox.push_back(encode_payload(&RoundMessage::RoundBarrier {
            round,
            pair: pair.id(),
        })?);
    }
    while let Some(frame) = server_inbox.pop_front() {
        server.accept(decode_payload(&frame)?)?;
    }
    debug_assert!(server.barrier_complete());
    Ok((server.report(), results))
}

fn expect_broadcast(msg: RoundMessage, round: u32) -> Result<super::GlobalSkb> {
    match msg {
        RoundMessage::GlobalBroadcast { round: r, global } if r == round => Ok(global),
        RoundMessage::GlobalBroadcast { round: r, .. } => Err(Error::StaleRound { round, got: r }),
        other => Err(Error::Protocol(format!(
            "expected GlobalBroadcast, got {}",
            other.kind()
        ))),
    }
}

fn socket_round(
    pairs: &mut [PairState],
    round: u32,
    ctx: &RoundContext,
    opts: SocketOptions,
) -> Result<(ServerRoundReport, Vec<PairRoundResult>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let num_classes = pairs.first().map_or(0, PairState::num_classes);
    let dim = pairs.first().map_or(0, PairState::dim);
    let server_cfg = ServerConfig {
        pairs: pairs.iter().map(PairState::id).collect(),
        num_classes,
        dim,
        rounds: round..round + 1,
        options: opts,
    };
    let client_cfg = ClientConfig {
        gamma: ctx.gamma,
        samples_per_class: ctx.samples_per_class,
        rounds: round..round + 1,
        options: opts,
    };

    thread::scope(|scope| {
        let server = scope.spawn(|| serve(&listener, &server_cfg));
        let clients: Vec<_> = pairs
            .iter_mut()
            .map(|pair| {
                let cfg = &client_cfg;
                scope.spawn(move || join(addr, pair, cfg))
            })
            .collect();
        let client_results: Vec<Result<Vec<PairRoundResult>>> = clients
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect();
        let mut reports = server.join().expect("server thread panicked")?;
        let mut results = Vec::with_capacity(client_results.len());
        for r in client_results {
            results.extend(r?);
        }
        Ok((reports.remove(0), results))
    })
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub pairs: Vec<PairId>,
    pub num_classes: usize,
    pub dim: usize,
    pub rounds: Range<u32>,
    pub options: SocketOptions,
}

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub gamma: f64,
    pub samples_per_class: usize,
    pub rounds: Range<u32>,
    pub options: SocketOptions,
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    pair: Option<PairId>,
}

fn transport_err(round: u32, err: Error) -> Error {
    match err {
        Error::Io(source) => Error::Transport { round, source },
        other => other,
    }
}

fn accept_all(
    listener: &TcpListener,
    count: usize,
    opts: SocketOptions,
) -> Result<Vec<Connection>> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + opts.timeout;
    let mut conns = Vec::with_capacity(count);
    while conns.len() < count {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("pair connection from {peer}");
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                stream.set_read_timeout(Some(opts.timeout))?;
                conns.push(Connection {
                    reader: BufReader::new(stream.try_clone()?),
                    writer: BufWriter::new(stream),
                    pair: None,
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Transport {
                        round: 0,
                        source: std::io::Error::new(
                            std::io::ErrorKind::TimedOut,
                            format!("only {} of {count} pairs connected", conns.len()),
                        ),
                    });
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
    listener.set_nonblocking(false)?;
    Ok(conns)
}

fn read_from(conn: &mut Connection, round: u32, wire: WireFormat) -> Result<RoundMessage> {
    match wire.read_message(&mut conn.reader) {
        Ok(Some(msg)) => Ok(msg),
        Ok(None) => Err(Error::PairDropout {
            round,
            pair: conn.pair.unwrap_or(PairId(0)),
        }),
        Err(e) => Err(transport_err(round, e)),
    }
}

/// Runs the server side of `cfg.rounds` over connections accepted from
/// `listener`. Any dropout or protocol error aborts the session.
pub fn serve(listener: &TcpListener, cfg: &ServerConfig) -> Result<Vec<ServerRoundReport>> {
    let wire = cfg.options.wire;
    let mut conns = accept_all(listener, cfg.pairs.len(), cfg.options)?;
    let mut reports = Vec::new();
    let result = (|| {
        for round in cfg.rounds.clone() {
            let mut server =
                RoundServer::new(round, cfg.pairs.iter().copied(), cfg.num_classes, cfg.dim);
            for conn in conns.iter_mut() {
                let msg = read_from(conn, round, wire)?;
                match (&msg, conn.pair) {
                    (RoundMessage::UploadBatch { pair, .. }, None) => conn.pair = Some(*pair),
                    (RoundMessage::UploadBatch { pair, .. }, Some(known)) if *pair != known => {
                        return Err(Error::Protocol(format!(
                            "connection for pair {known} uploaded as pair {pair}"
                        )));
                    }
                    (RoundMessage::UploadBatch { .. }, Some(_)) => {}
                    (other, _) => {
                        return Err(Error::Protocol(format!(
                            "expected UploadBatch, got {}",
                            other.kind()
                        )))
                    }
                }
                server.accept(msg)?;
            }
            let broadcast = server.broadcast();
            log::debug!(
                "round {round}: broadcasting {} global entries",
                server.global().len()
            );
            for conn in conns.iter_mut() {
                wire.write_message(&mut conn.writer, &broadcast)
                    .map_err(|e| transport_err(round, e))?;
            }
            for conn in conns.iter_mut() {
                let msg = read_from(conn, round, wire)?;
                match &msg {
                    RoundMessage::RoundBarrier { pair, .. } if Some(*pair) == conn.pair => {}
                    other => {
                        return Err(Error::Protocol(format!(
                            "expected RoundBarrier from pair {:?}, got {}",
                            conn.pair,
                            other.kind()
                        )))
                    }
                }
                server.accept(msg)?;
            }
            reports.push(server.report());
        }
        Ok(())
    })();
    if result.is_err() {
        for conn in &conns {
            let _ = conn.writer.get_ref().shutdown(std::net::Shutdown::Both);
        }
    }
    result.map(|()| reports)
}

/// Connects to `addr`, retrying until the configured timeout.
pub fn connect(addr: impl ToSocketAddrs, opts: SocketOptions) -> Result<TcpStream> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    let deadline = Instant::now() + opts.timeout;
    loop {
        let mut last = None;
        for a in &addrs {
            match TcpStream::connect(a) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    stream.set_read_timeout(Some(opts.timeout))?;
                    return Ok(stream);
                }
                Err(e) => last = Some(e),
            }
        }
        if Instant::now() >= deadline {
            let source = last.unwrap_or_else(|| {
                std::io::Error::new(
                    std::io::ErrorKind::AddrNotAvailable,
                    "no address to connect to",
                )
            });
            return Err(Error::Transport { round: 0, source });
        }
        thread::sleep(Duration::from_millis(20));
    }
}

/// Runs one pair's side of `cfg.rounds` against the server at `addr`.
pub fn join(
    addr: SocketAddr,
    state: &mut PairState,
    cfg: &ClientConfig,
) -> Result<Vec<PairRoundResult>> {
    let stream = connect(addr, cfg.options)?;
    join_stream(stream, state, cfg)
}

pub fn join_stream(
    stream: TcpStream,
    state: &mut PairState,
    cfg: &ClientConfig,
) -> Result<Vec<PairRoundResult>> {
    let wire = cfg.options.wire;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut results = Vec::new();
    for round in cfg.rounds.clone() {
        let upload = prepare_upload(state, cfg.gamma, round)?;
        wire.write_message(&mut writer, &upload)
            .map_err(|e| transport_err(round, e))?;
        let msg = match wire.read_message(&mut reader) {
            Ok(Some(msg)) => msg,
            Ok(None) => {
                return Err(Error::Transport {
                    round,
                    source: std::io::Error::new(
                        std::io::ErrorKind::UnexpectedEof,
                        "server closed the connection",
                    ),
                })
            }
            Err(e) => return Err(transport_err(round, e)),
        };
        let global = expect_broadcast(msg, round)?;
        results.push(apply_broadcast(state, &global, cfg.samples_per_class)?);
        wire.write_message(
            &mut writer,
            &RoundMessage::RoundBarrier {
                round,
                pair: state.id(),
            },
        )
        .map_err(|e| transport_err(round, e))?;
    }
    Ok(results)
}
