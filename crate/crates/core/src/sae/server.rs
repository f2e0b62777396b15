//! Server side of the prior protocol and a latent-echoing test service.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use log::{debug, warn};

use super::protocol::{
    read_frame, tensor_payload, write_frame, HelloInfo, Opcode, PayloadReader, PayloadWriter,
    GRAD_OK, GRAD_UNSUPPORTED,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Request handlers behind a protocol connection.
pub trait PriorService {
    fn hello(&mut self) -> HelloInfo;
    fn encode(&mut self, x: Tensor) -> Result<Tensor>;
    fn decode(&mut self, z: Tensor) -> Result<Tensor>;
    fn consistency(&mut self, z_t: Tensor, t: u32, c: Tensor) -> Result<Tensor>;
    /// `Ok(None)` answers UNSUPPORTED.
    fn grad_logcond(
        &mut self,
        _z_next: Tensor,
        _z_prev: Tensor,
        _t_prev: u32,
        _t_next: u32,
        _c: Tensor,
    ) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// Echoes latents back unchanged. ENCODE and DECODE are identities,
/// CONSISTENCY returns `z_t` for advertised timesteps, gradients are unsupported.
#[derive(Clone, Debug)]
pub struct EchoService {
    info: HelloInfo,
}

impl EchoService {
    pub fn new(info: HelloInfo) -> Self {
        Self { info }
    }
}

impl PriorService for EchoService {
    fn hello(&mut self) -> HelloInfo {
        self.info.clone()
    }

    fn encode(&mut self, x: Tensor) -> Result<Tensor> {
        Ok(x)
    }

    fn decode(&mut self, z: Tensor) -> Result<Tensor> {
        Ok(z)
    }

    fn consistency(&mut self, z_t: Tensor, t: u32, c: Tensor) -> Result<Tensor> {
        if !self.info.timesteps.contains(&t) {
            return Err(Error::invalid(format!("unsupported timestep {t}")));
        }
        if c.len() != self.info.cond_dim {
            return Err(Error::shape(format!(
                "conditioning vector has {} entries, expected {}",
                c.len(),
                self.info.cond_dim
            )));
        }
        Ok(z_t)
    }
}

fn dispatch<S: PriorService + ?Sized>(service: &mut S, opcode: u8, payload: &[u8]) -> Result<(u8, Vec<u8>)> {
    let op = Opcode::from_u8(opcode)
        .filter(|o| *o != Opcode::Error)
        .ok_or_else(|| Error::Protocol(format!("unsupported opcode 0x{opcode:02x}")))?;
    let mut r = PayloadReader::new(payload);
    let reply = match op {
        Opcode::Hello => {
            r.finish()?;
            service.hello().encode()?
        }
        Opcode::Encode => {
            let x = r.tensor()?;
            r.finish()?;
            tensor_payload(&service.encode(x)?)?
        }
        Opcode::Decode => {
            let z = r.tensor()?;
            r.finish()?;
            tensor_payload(&service.decode(z)?)?
        }
        Opcode::Consistency => {
            let z = r.tensor()?;
            let t = r.u32()?;
            let c = r.tensor()?;
            r.finish()?;
            tensor_payload(&service.consistency(z, t, c)?)?
        }
        Opcode::GradLogcond => {
            let z_next = r.tensor()?;
            let z_prev = r.tensor()?;
            let t_prev = r.u32()?;
            let t_next = r.u32()?;
            let c = r.tensor()?;
            r.finish()?;
            let mut w = PayloadWriter::new();
            match service.grad_logcond(z_next, z_prev, t_prev, t_next, c)? {
                Some(g) => {
                    w.u8(GRAD_OK).tensor(&g)?;
                }
                None => {
                    w.u8(GRAD_UNSUPPORTED);
                }
            }
            w.finish()
        }
        Opcode::Error => unreachable!(),
    };
    Ok((opcode, reply))
}

/// Serve requests in lockstep until the peer closes the stream.
///
/// Request-level failures are answered with an ERROR frame and the
/// connection stays open. A frame that cannot be parsed is answered with an
/// ERROR frame and ends the connection.
pub fn serve_connection<R, W, S>(reader: &mut R, writer: &mut W, service: &mut S) -> Result<()>
where
    R: Read + ?Sized,
    W: Write + ?Sized,
    S: PriorService + ?Sized,
{
    loop {
        let frame = match read_frame(reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e @ (Error::Protocol(_) | Error::Truncated(_))) => {
                warn!("closing connection after malformed frame: {e}");
                let _ = write_frame(writer, Opcode::Error as u8, e.to_string().as_bytes());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        debug!("request opcode 0x{:02x}, {} bytes", frame.opcode, frame.payload.len());
        match dispatch(service, frame.opcode, &frame.payload) {
            Ok((op, reply)) => write_frame(writer, op, &reply)?,
            Err(e) => write_frame(writer, Opcode::Error as u8, e.to_string().as_bytes())?,
        }
    }
}

/// Accept connections forever, one thread and one fresh service per connection.
pub fn serve_tcp<S, F>(listener: TcpListener, make_service: F) -> Result<()>
where
    S: PriorService + Send + 'static,
    F: Fn() -> S + Send + Sync + 'static,
{
    let make_service = Arc::new(make_service);
    for stream in listener.incoming() {
        let stream = stream?;
        let make = make_service.clone();
        std::thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            let mut reader = match stream.try_clone() {
                Ok(r) => r,
                Err(e) => {
                    warn!("cannot clone stream: {e}");
                    return;
                }
            };
            let mut writer = stream;
            let mut service = make();
            if let Err(e) = serve_connection(&mut reader, &mut writer, &mut service) {
                warn!("connection {peer:?} ended with error: {e}");
            }
        });
    }
    Ok(())
}

/// Start an echo server on an ephemeral local port in a background thread.
pub fn spawn_echo_server(info: HelloInfo) -> Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handle = std::thread::spawn(move || {
        if let Err(e) = serve_tcp(listener, move || EchoService::new(info.clone())) {
            warn!("echo server stopped: {e}");
        }
    });
    Ok((addr, handle))
}
