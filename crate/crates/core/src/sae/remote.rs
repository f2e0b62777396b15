//! Client for a prior served over the frame protocol.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use super::protocol::{
    consistency_payload, grad_logcond_payload, read_frame, single_tensor, tensor_payload,
    write_frame, HelloInfo, Opcode, PayloadReader, GRAD_OK, GRAD_UNSUPPORTED,
};
use super::schedule::NoiseSchedule;
use super::{Prior, PriorKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Connection {
    reader: Box<dyn Read + Send>,
    writer: Option<Box<dyn Write + Send>>,
    child: Option<Child>,
}

impl Connection {
    fn request(&mut self, opcode: Opcode, payload: &[u8]) -> Result<Vec<u8>> {
        let writer = self
            .writer
            .as_mut()
            .ok_or_else(|| Error::Protocol("connection closed".into()))?;
        write_frame(writer, opcode as u8, payload)?;
        let frame = read_frame(&mut self.reader)?
            .ok_or_else(|| Error::Protocol("server closed the connection".into()))?;
        if frame.opcode == Opcode::Error as u8 {
            return Err(Error::Remote(String::from_utf8_lossy(&frame.payload).into_owned()));
        }
        if frame.opcode != opcode as u8 {
            return Err(Error::Protocol(format!(
                "reply opcode 0x{:02x} to request 0x{:02x}",
                frame.opcode, opcode as u8
            )));
        }
        Ok(frame.payload)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        // closing stdin lets a subprocess server exit on EOF
        self.writer.take();
        if let Some(mut child) = self.child.take() {
            let _ = child.wait();
        }
    }
}

/// A prior living behind one protocol connection. Requests are serialized;
/// concurrent chains should each open their own connection.
pub struct RemotePrior {
    endpoint: String,
    conn: Mutex<Connection>,
    info: HelloInfo,
    schedule: NoiseSchedule,
}

impl std::fmt::Debug for RemotePrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemotePrior")
            .field("endpoint", &self.endpoint)
            .field("info", &self.info)
            .finish()
    }
}

impl RemotePrior {
    fn handshake(endpoint: String, mut conn: Connection) -> Result<Self> {
        let info = HelloInfo::decode(&conn.request(Opcode::Hello, &[])?)?;
        if info.latent_shape.is_empty() || info.latent_shape.contains(&0) {
            return Err(Error::Protocol(format!(
                "server advertised invalid latent shape {:?}",
                info.latent_shape
            )));
        }
        Ok(Self {
            endpoint,
            conn: Mutex::new(conn),
            info,
            schedule: NoiseSchedule::default(),
        })
    }

    /// Connect to `host:port`.
    pub fn connect(addr: &str) -> Result<Self> {
        Self::connect_with_timeout(addr, None)
    }

    pub fn connect_with_timeout(addr: &str, timeout: Option<Duration>) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(timeout)?;
        let reader = BufReader::new(stream.try_clone()?);
        let writer = BufWriter::new(stream);
        Self::handshake(
            format!("tcp://{addr}"),
            Connection {
                reader: Box::new(reader),
                writer: Some(Box::new(writer)),
                child: None,
            },
        )
    }

    /// Launch a server subprocess speaking the protocol on stdin/stdout.
    pub fn spawn(program: &str, args: &[&str]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(
            format!("stdio://{program}"),
            Connection {
                reader: Box::new(BufReader::new(stdout)),
                writer: Some(Box::new(BufWriter::new(stdin))),
                child: Some(child),
            },
        )
    }

    /// Use an already-open byte stream pair.
    pub fn from_streams(
        reader: Box<dyn Read + Send>,
        writer: Box<dyn Write + Send>,
        label: &str,
    ) -> Result<Self> {
        Self::handshake(
            label.to_string(),
            Connection {
                reader,
                writer: Some(writer),
                child: None,
            },
        )
    }

    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn info(&self) -> &HelloInfo {
        &self.info
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn request(&self, opcode: Opcode, payload: &[u8]) -> Result<Vec<u8>> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::Protocol("connection poisoned by an earlier panic".into()))?;
        conn.request(opcode, payload)
    }
}

impl Prior for RemotePrior {
    fn kind(&self) -> PriorKind {
        PriorKind::Remote
    }

    fn latent_shape(&self) -> Vec<usize> {
        self.info.latent_shape.clone()
    }

    fn image_shape(&self) -> Option<Vec<usize>> {
        None
    }

    fn cond_dim(&self) -> usize {
        self.info.cond_dim
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn timesteps(&self) -> Option<Vec<u32>> {
        Some(self.info.timesteps.clone())
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        single_tensor(&self.request(Opcode::Encode, &tensor_payload(x)?)?)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        single_tensor(&self.request(Opcode::Decode, &tensor_payload(z)?)?)
    }

    fn consistency(&self, z_t: &Tensor, t: u32, c: &Tensor) -> Result<Tensor> {
        let out = single_tensor(&self.request(Opcode::Consistency, &consistency_payload(z_t, t, c)?)?)?;
        if out.shape() != z_t.shape() {
            return Err(Error::Protocol(format!(
                "consistency returned shape {:?} for input {:?}",
                out.shape(),
                z_t.shape()
            )));
        }
        Ok(out)
    }

    fn grad_logcond(
        &self,
        z_next: &Tensor,
        z_prev: &Tensor,
        t_prev: u32,
        t_next: u32,
        c: &Tensor,
    ) -> Result<Option<Tensor>> {
        let reply = self.request(
            Opcode::GradLogcond,
            &grad_logcond_payload(z_next, z_prev, t_prev, t_next, c)?,
        )?;
        let mut r = PayloadReader::new(&reply);
        match r.u8()? {
            GRAD_UNSUPPORTED => {
                r.finish()?;
                Ok(None)
            }
            GRAD_OK => {
                let g = r.tensor()?;
                r.finish()?;
                if g.len() != c.len() {
                    return Err(Error::Protocol("gradient length differs from cond dim".into()));
                }
                Ok(Some(g))
            }
            s => Err(Error::Protocol(format!("unknown gradient status {s}"))),
        }
    }
}
