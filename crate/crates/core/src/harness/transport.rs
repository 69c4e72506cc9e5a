//! Blocking, per-direction FIFO links between the two parties.

use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::psu::wire::{matrix_frame, matrix_from_frame, Frame};
use crate::splitnn::CutLink;

pub trait Transport: Send {
    fn send(&mut self, frame: &Frame) -> Result<()>;
    fn recv(&mut self) -> Result<Frame>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        (**self).send(frame)
    }
    fn recv(&mut self) -> Result<Frame> {
        (**self).recv()
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        (**self).send(frame)
    }
    fn recv(&mut self) -> Result<Frame> {
        (**self).recv()
    }
}

/// In-process endpoint. Frames travel encoded, exactly as over TCP.
#[derive(Debug)]
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        ChannelTransport { tx: a_tx, rx: a_rx },
        ChannelTransport { tx: b_tx, rx: b_rx },
    )
}

impl Transport for ChannelTransport {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        self.tx
            .send(frame.encode())
            .map_err(|_| Error::Protocol("peer hung up".into()))
    }

    fn recv(&mut self) -> Result<Frame> {
        let bytes = self
            .rx
            .recv()
            .map_err(|_| Error::Protocol("peer hung up".into()))?;
        Frame::decode(&bytes)
    }
}

#[derive(Debug)]
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn from_stream(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self {
            reader,
            writer: BufWriter::new(stream),
        })
    }

    /// Accept exactly one peer.
    pub fn listen<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Self::accept(&listener)
    }

    pub fn accept(listener: &TcpListener) -> Result<Self> {
        let (stream, _) = listener.accept()?;
        Self::from_stream(stream)
    }

    /// Connect, retrying until `timeout` elapses so either side may start
    /// first.
    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<Self> {
        let start = Instant::now();
        loop {
            match TcpStream::connect(&addr) {
                Ok(s) => return Self::from_stream(s),
                Err(e) if start.elapsed() >= timeout => return Err(e.into()),
                Err(_) => std::thread::sleep(Duration::from_millis(50)),
            }
        }
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        frame.write_to(&mut self.writer)
    }

    fn recv(&mut self) -> Result<Frame> {
        Frame::read_from(&mut self.reader)
    }
}

/// Cut-layer exchange over a connected pair of endpoints held by one
/// process: each matrix is framed, sent by one side and decoded by the
/// other.
pub struct FramedLink<T: Transport> {
    pub passive: T,
    pub active: T,
}

impl<T: Transport> FramedLink<T> {
    fn relay(from: &mut T, to: &mut T, m: &Mat) -> Result<Mat> {
        from.send(&matrix_frame(m))?;
        matrix_from_frame(&to.recv()?)
    }
}

impl<T: Transport> CutLink for FramedLink<T> {
    fn embeddings(&mut self, m: &Mat) -> Result<Mat> {
        Self::relay(&mut self.passive, &mut self.active, m)
    }

    fn gradients(&mut self, m: &Mat) -> Result<Mat> {
        Self::relay(&mut self.active, &mut self.passive, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_fifo() {
        let (mut a, mut b) = channel_pair();
        for i in 0..5u8 {
            a.send(&Frame { tag: i, payload: vec![i; i as usize] }).unwrap();
        }
        for i in 0..5u8 {
            assert_eq!(b.recv().unwrap().tag, i);
        }
        drop(a);
        assert!(b.recv().is_err());
    }

    #[test]
    fn tcp_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let mut t = TcpTransport::accept(&listener).unwrap();
            let f = t.recv().unwrap();
            t.send(&f).unwrap();
        });
        let mut c = TcpTransport::connect(addr, Duration::from_secs(5)).unwrap();
        let f = Frame { tag: 3, payload: (0..=255).collect() };
        c.send(&f).unwrap();
        assert_eq!(c.recv().unwrap(), f);
        h.join().unwrap();
    }

    #[test]
    fn framed_link_is_bit_exact() {
        let (p, a) = channel_pair();
        let mut link = FramedLink { passive: p, active: a };
        let m = Mat::from_rows(&[[0.1, -3.5e-300], [f64::MAX, 7.0]]).unwrap();
        assert_eq!(link.embeddings(&m).unwrap(), m);
        assert_eq!(link.gradients(&m).unwrap(), m);
    }
}
