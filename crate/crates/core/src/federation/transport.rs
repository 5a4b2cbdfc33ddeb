//! Links between the parties' orchestrator and the two servers.
//!
//! Every message is encoded to its wire form even in-process, so the bytes a
//! server would see can be recorded and inspected.

use std::collections::{HashMap, VecDeque};
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;

use crate::error::{Error, Result};
use crate::psi::{ComputationServer, Destination, ServerBehavior, ServerHandler, ValidationServer};
use crate::wire::{self, Frame, Message, Role, PROTOCOL_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ServerRole {
    Computation,
    Validation,
}

impl ServerRole {
    fn destination(self) -> Destination {
        match self {
            ServerRole::Computation => Destination::Computation,
            ServerRole::Validation => Destination::Validation,
        }
    }
}

/// The orchestrator's duplex channels to the computation and validation servers.
pub trait ServerLink: Send {
    fn send(&mut self, to: ServerRole, frame: &Frame) -> Result<()>;

    /// Next frame from the given server, in order.
    fn recv(&mut self, from: ServerRole) -> Result<Frame>;

    /// Bytes of every frame delivered to either server, if recording.
    fn server_traffic(&self) -> Option<&[u8]> {
        None
    }

    fn bytes_to_servers(&self) -> u64;
}

/// Both servers run inside this process; frames pass through queues.
pub struct InProcessLink {
    computation: ComputationServer,
    validation: ValidationServer,
    from_computation: VecDeque<Frame>,
    from_validation: VecDeque<Frame>,
    tap: Option<Vec<u8>>,
    bytes_to_servers: u64,
}

impl InProcessLink {
    pub fn new(behavior: ServerBehavior, seed: u64) -> Self {
        Self {
            computation: ComputationServer::new(behavior, seed),
            validation: ValidationServer::new(),
            from_computation: VecDeque::new(),
            from_validation: VecDeque::new(),
            tap: None,
            bytes_to_servers: 0,
        }
    }

    /// Keeps a copy of every server-bound byte.
    pub fn recording(mut self) -> Self {
        self.tap = Some(Vec::new());
        self
    }

    fn deliver(&mut self, to: Destination, from: Destination, frame: &Frame) -> Result<()> {
        let mut queue = VecDeque::from([(to, from, wire::encode(frame))]);
        while let Some((to, from, bytes)) = queue.pop_front() {
            let frame = wire::decode(&bytes)?;
            let handler: &mut dyn ServerHandler = match to {
                Destination::Computation => &mut self.computation,
                Destination::Validation => &mut self.validation,
                Destination::Parties => {
                    match from {
                        Destination::Computation => self.from_computation.push_back(frame),
                        _ => self.from_validation.push_back(frame),
                    }
                    continue;
                }
            };
            self.bytes_to_servers += bytes.len() as u64;
            if let Some(tap) = &mut self.tap {
                tap.extend_from_slice(&bytes);
            }
            let outputs = handler.handle(frame.clone()).unwrap_or_else(|e| {
                vec![(Destination::Parties, Frame::new(frame.query_id, Message::Error { reason: e.to_string() }))]
            });
            for (dest, out) in outputs {
                queue.push_back((dest, to, wire::encode(&out)));
            }
        }
        Ok(())
    }
}

impl ServerLink for InProcessLink {
    fn send(&mut self, to: ServerRole, frame: &Frame) -> Result<()> {
        self.deliver(to.destination(), Destination::Parties, frame)
    }

    fn recv(&mut self, from: ServerRole) -> Result<Frame> {
        let queue = match from {
            ServerRole::Computation => &mut self.from_computation,
            ServerRole::Validation => &mut self.from_validation,
        };
        queue
            .pop_front()
            .ok_or_else(|| Error::Protocol(format!("no pending message from the {from:?} server")))
    }

    fn server_traffic(&self) -> Option<&[u8]> {
        self.tap.as_deref()
    }

    fn bytes_to_servers(&self) -> u64 {
        self.bytes_to_servers
    }
}

fn handshake(stream: &mut TcpStream, me: Role, expect: Role) -> Result<()> {
    wire::write_frame(stream, &Frame::new(0, Message::Hello { version: PROTOCOL_VERSION, role: me }))?;
    match wire::read_frame(stream)? {
        Some(Frame { message: Message::Hello { version: PROTOCOL_VERSION, role }, .. }) if role == expect => Ok(()),
        Some(Frame { message: Message::Hello { version, role }, .. }) => Err(Error::Protocol(format!(
            "handshake mismatch: peer is {role:?} speaking version {version:#04x}"
        ))),
        Some(other) => Err(Error::Protocol(format!("expected a handshake, got {other:?}"))),
        None => Err(Error::Protocol("peer closed during handshake".into())),
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Connection {
    fn open(addr: impl ToSocketAddrs, me: Role, peer: Role) -> Result<Self> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        handshake(&mut stream, me, peer)?;
        Ok(Self { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream) })
    }
}

/// Framed sockets to servers running elsewhere.
pub struct TcpLink {
    computation: Connection,
    validation: Connection,
    bytes_to_servers: u64,
}

impl TcpLink {
    pub fn connect(computation: impl ToSocketAddrs, validation: impl ToSocketAddrs) -> Result<Self> {
        Ok(Self {
            computation: Connection::open(computation, Role::Parties, Role::Computation)?,
            validation: Connection::open(validation, Role::Parties, Role::Validation)?,
            bytes_to_servers: 0,
        })
    }

    fn connection(&mut self, role: ServerRole) -> &mut Connection {
        match role {
            ServerRole::Computation => &mut self.computation,
            ServerRole::Validation => &mut self.validation,
        }
    }
}

impl ServerLink for TcpLink {
    fn send(&mut self, to: ServerRole, frame: &Frame) -> Result<()> {
        let bytes = wire::encode(frame);
        self.bytes_to_servers += bytes.len() as u64;
        let conn = self.connection(to);
        std::io::Write::write_all(&mut conn.writer, &bytes)?;
        std::io::Write::flush(&mut conn.writer)?;
        Ok(())
    }

    fn recv(&mut self, from: ServerRole) -> Result<Frame> {
        wire::read_frame(&mut self.connection(from).reader)?
            .ok_or_else(|| Error::Protocol(format!("the {from:?} server closed the connection")))
    }

    fn bytes_to_servers(&self) -> u64 {
        self.bytes_to_servers
    }
}

type Writers = Arc<Mutex<HashMap<Role, BufWriter<TcpStream>>>>;

/// Serves one server role on `listener` until the process exits.
///
/// The computation server must be given the validation server's address;
/// it connects there as a client and forwards intersections over that link.
pub fn serve(listener: TcpListener, role: ServerRole, behavior: ServerBehavior, seed: u64, validation: Option<SocketAddr>) -> Result<()> {
    let (me, handler): (Role, Box<dyn ServerHandler>) = match role {
        ServerRole::Computation => (Role::Computation, Box::new(ComputationServer::new(behavior, seed))),
        ServerRole::Validation => (Role::Validation, Box::new(ValidationServer::new())),
    };
    let handler = Arc::new(Mutex::new(handler));
    let writers: Writers = Arc::new(Mutex::new(HashMap::new()));

    if role == ServerRole::Computation {
        let addr = validation.ok_or_else(|| Error::Protocol("the computation server needs the validation address".into()))?;
        let upstream = Connection::open(addr, Role::Computation, Role::Validation)?;
        writers.lock().unwrap().insert(Role::Validation, upstream.writer);
    }

    for stream in listener.incoming() {
        let stream = stream?;
        let handler = Arc::clone(&handler);
        let writers = Arc::clone(&writers);
        thread::spawn(move || {
            // a failed peer only ends its own connection
            let _ = serve_connection(stream, me, handler, writers);
        });
    }
    Ok(())
}

fn serve_connection(
    mut stream: TcpStream,
    me: Role,
    handler: Arc<Mutex<Box<dyn ServerHandler>>>,
    writers: Writers,
) -> Result<()> {
    stream.set_nodelay(true)?;
    let peer = match wire::read_frame(&mut stream)? {
        Some(Frame { message: Message::Hello { version: PROTOCOL_VERSION, role }, .. }) => role,
        _ => return Err(Error::Protocol("expected a version 1 handshake".into())),
    };
    wire::write_frame(&mut stream, &Frame::new(0, Message::Hello { version: PROTOCOL_VERSION, role: me }))?;
    writers.lock().unwrap().insert(peer, BufWriter::new(stream.try_clone()?));

    let mut reader = BufReader::new(stream);
    while let Some(frame) = wire::read_frame(&mut reader)? {
        let query_id = frame.query_id;
        let outputs = handler.lock().unwrap().handle(frame).unwrap_or_else(|e| {
            vec![(Destination::Parties, Frame::new(query_id, Message::Error { reason: e.to_string() }))]
        });
        let mut writers = writers.lock().unwrap();
        for (dest, out) in outputs {
            let role = match dest {
                Destination::Parties => Role::Parties,
                Destination::Computation => Role::Computation,
                Destination::Validation => Role::Validation,
            };
            let writer = writers
                .get_mut(&role)
                .ok_or_else(|| Error::Protocol(format!("no connection to {role:?}")))?;
            wire::write_frame(writer, &out)?;
        }
    }
    Ok(())
}

/// Addresses of a server pair started on loopback by [`spawn_local_servers`].
#[derive(Clone, Copy, Debug)]
pub struct LocalServers {
    pub computation: SocketAddr,
    pub validation: SocketAddr,
}

/// Starts both servers on ephemeral loopback ports in background threads.
pub fn spawn_local_servers(behavior: ServerBehavior, seed: u64) -> Result<LocalServers> {
    let validation_listener = TcpListener::bind("127.0.0.1:0")?;
    let validation = validation_listener.local_addr()?;
    thread::spawn(move || serve(validation_listener, ServerRole::Validation, ServerBehavior::Honest, 0, None));

    let computation_listener = TcpListener::bind("127.0.0.1:0")?;
    let computation = computation_listener.local_addr()?;
    thread::spawn(move || serve(computation_listener, ServerRole::Computation, behavior, seed, Some(validation)));
    Ok(LocalServers { computation, validation })
}
