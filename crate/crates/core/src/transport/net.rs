use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::model::ParameterSet;
use crate::protocol::{ClientRequest, ClientUpdate, ServerState};

use super::codec::{decode_frame, encode_frame, Decoded, Message};
use super::TransportError;

const POLL: Duration = Duration::from_millis(20);

enum Command {
    Request(ClientRequest, Sender<Message>),
    Submit(ClientUpdate, Sender<Message>),
}

/// Acknowledgement returned to every submitter once its stage closes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageAck {
    pub stage_index: u64,
    pub adopted: bool,
}

fn error_reply(code: &str, text: impl ToString) -> Message {
    Message::ErrorReply { code: code.into(), text: text.to_string() }
}

fn write_message(stream: &mut impl Write, m: &Message) -> Result<(), TransportError> {
    stream.write_all(&encode_frame(m)?)?;
    stream.flush()?;
    Ok(())
}

/// Reads one framed message, buffering any excess for the next call.
fn read_message(stream: &mut impl Read, buf: &mut Vec<u8>) -> Result<Option<Message>, TransportError> {
    let mut chunk = [0u8; 16 * 1024];
    loop {
        match decode_frame(buf)? {
            Decoded::Complete(m, used) => {
                buf.drain(..used);
                return Ok(Some(m));
            }
            Decoded::NeedMore(_) => {
                let n = stream.read(&mut chunk)?;
                if n == 0 {
                    if buf.is_empty() {
                        return Ok(None);
                    }
                    return Err(TransportError::Truncated("connection closed mid-frame".into()));
                }
                buf.extend_from_slice(&chunk[..n]);
            }
        }
    }
}

/// Owns the server state; every mutation goes through here in arrival order.
fn owner_loop(
    mut state: ServerState,
    rx: Receiver<Command>,
    stop: Arc<AtomicBool>,
    max_stages: Option<u64>,
) -> ServerState {
    let mut waiting: Vec<Sender<Message>> = Vec::new();
    let mut completed = 0u64;
    while !stop.load(Ordering::SeqCst) {
        let cmd = match rx.recv_timeout(POLL) {
            Ok(c) => c,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        match cmd {
            Command::Request(req, reply) => {
                let seed = state.head_seed_for(&req.client_id);
                let msg = match state.handle_request(&req, seed) {
                    Ok(p) => Message::ModelResponse(p),
                    Err(e) => error_reply(e.code(), &e),
                };
                let _ = reply.send(msg);
            }
            Command::Submit(update, reply) => {
                if let Err(e) = state.submit_update(update) {
                    let _ = reply.send(error_reply(e.code(), &e));
                    continue;
                }
                waiting.push(reply);
                if !state.is_stage_full() {
                    continue;
                }
                let msg = match state.end_stage(None) {
                    Ok(r) => Message::StageAck { stage_index: r.stage_index, adopted: r.adopted },
                    Err(e) => error_reply(e.code(), &e),
                };
                for w in waiting.drain(..) {
                    let _ = w.send(msg.clone());
                }
                completed += 1;
                if max_stages.is_some_and(|m| completed >= m) {
                    stop.store(true, Ordering::SeqCst);
                }
            }
        }
    }
    state
}

fn connection_loop(mut stream: TcpStream, tx: Sender<Command>) {
    let mut buf = Vec::new();
    loop {
        let msg = match read_message(&mut stream, &mut buf) {
            Ok(Some(m)) => m,
            Ok(None) => return,
            Err(TransportError::Io(_)) => return,
            Err(e) => {
                let _ = write_message(&mut stream, &error_reply("protocol", &e));
                return;
            }
        };
        let (reply_tx, reply_rx) = mpsc::channel();
        let cmd = match msg {
            Message::ModelRequest { client_id, num_classes } => Command::Request(
                ClientRequest { client_id, num_classes: num_classes as usize },
                reply_tx,
            ),
            Message::UpdateSubmit(u) => Command::Submit(u, reply_tx),
            other => {
                let text = format!("clients may not send {other:?}");
                let _ = write_message(&mut stream, &error_reply("protocol", text));
                return;
            }
        };
        if tx.send(cmd).is_err() {
            let _ = write_message(&mut stream, &error_reply("server-closed", "server stopped"));
            return;
        }
        let reply = match reply_rx.recv() {
            Ok(r) => r,
            Err(_) => error_reply("server-closed", "server stopped before the stage closed"),
        };
        if write_message(&mut stream, &reply).is_err() {
            return;
        }
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Command>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let tx = tx.clone();
                thread::spawn(move || connection_loop(stream, tx));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(_) => thread::sleep(POLL),
        }
    }
}

/// A running server. Dropping the handle without calling [`ServerHandle::wait`]
/// or [`ServerHandle::shutdown`] leaves the threads running.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: JoinHandle<()>,
    owner: JoinHandle<ServerState>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the owner stops (after `max_stages`, if set).
    pub fn wait(self) -> ServerState {
        let state = self.owner.join().expect("server owner thread panicked");
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.acceptor.join();
        state
    }

    pub fn shutdown(self) -> ServerState {
        self.stop.store(true, Ordering::SeqCst);
        self.wait()
    }
}

/// Binds `addr` and serves `state`. Stages close without a gate. With
/// `max_stages`, the server stops after that many stages.
pub fn serve(
    state: ServerState,
    addr: impl ToSocketAddrs,
    max_stages: Option<u64>,
) -> Result<ServerHandle, TransportError> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let owner = {
        let stop = stop.clone();
        thread::spawn(move || owner_loop(state, rx, stop, max_stages))
    };
    let acceptor = {
        let stop = stop.clone();
        thread::spawn(move || accept_loop(listener, tx, stop))
    };
    Ok(ServerHandle { addr, stop, acceptor, owner })
}

/// Blocking client for one TCP connection.
pub struct RemoteClient {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl RemoteClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        Ok(Self { stream: TcpStream::connect(addr)?, buf: Vec::new() })
    }

    pub fn send(&mut self, m: &Message) -> Result<(), TransportError> {
        write_message(&mut self.stream, m)
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(bytes)?;
        Ok(())
    }

    /// Next message from the server; `None` once the server closed the
    /// connection.
    pub fn receive(&mut self) -> Result<Option<Message>, TransportError> {
        read_message(&mut self.stream, &mut self.buf)
    }

    fn call(&mut self, m: &Message) -> Result<Message, TransportError> {
        self.send(m)?;
        match self.receive()? {
            Some(Message::ErrorReply { code, text }) => Err(TransportError::Remote { code, text }),
            Some(reply) => Ok(reply),
            None => Err(TransportError::Protocol("server closed the connection".into())),
        }
    }

    pub fn request_model(&mut self, req: &ClientRequest) -> Result<ParameterSet, TransportError> {
        let num_classes = u32::try_from(req.num_classes)
            .map_err(|_| TransportError::Format("num_classes exceeds u32".into()))?;
        let m = Message::ModelRequest { client_id: req.client_id.clone(), num_classes };
        match self.call(&m)? {
            Message::ModelResponse(p) => Ok(p),
            other => Err(TransportError::Protocol(format!("expected a model, got {other:?}"))),
        }
    }

    /// Submits an update and blocks until its stage closes.
    pub fn submit_update(&mut self, update: &ClientUpdate) -> Result<StageAck, TransportError> {
        match self.call(&Message::UpdateSubmit(update.clone()))? {
            Message::StageAck { stage_index, adopted } => Ok(StageAck { stage_index, adopted }),
            other => Err(TransportError::Protocol(format!("expected a stage ack, got {other:?}"))),
        }
    }
}
