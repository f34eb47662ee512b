//! Blocking TCP links.

use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use super::{Endpoint, Role};
use crate::error::{Error, Result};

fn endpoint(stream: TcpStream, local: Role) -> Result<Endpoint> {
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    Ok(Endpoint::new(local, Box::new(reader), Box::new(stream)))
}

/// Connects to `addr`, retrying until `timeout` elapses.
pub fn connect(addr: &str, local: Role, timeout: Duration) -> Result<Endpoint> {
    let deadline = Instant::now() + timeout;
    loop {
        let last = match addr.to_socket_addrs() {
            Ok(addrs) => {
                let mut last = None;
                for a in addrs {
                    match TcpStream::connect_timeout(&a, Duration::from_secs(2)) {
                        Ok(stream) => return endpoint(stream, local),
                        Err(e) => last = Some(e),
                    }
                }
                last
            }
            Err(e) => Some(e),
        };
        if Instant::now() >= deadline {
            let reason = last.map(|e| e.to_string()).unwrap_or_else(|| "no address".into());
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::TimedOut,
                format!("could not connect to {addr}: {reason}"),
            )));
        }
        thread::sleep(Duration::from_millis(50));
    }
}

pub struct Listener {
    inner: TcpListener,
    local: Role,
}

impl Listener {
    pub fn bind(addr: &str, local: Role) -> Result<Self> {
        Ok(Self {
            inner: TcpListener::bind(addr)?,
            local,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.inner.local_addr()?)
    }

    pub fn accept(&self) -> Result<Endpoint> {
        let (stream, _) = self.inner.accept()?;
        endpoint(stream, self.local)
    }
}
