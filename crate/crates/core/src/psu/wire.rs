//! Framed messages: 4-byte big-endian payload length, 1-byte tag, payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Mat;

use super::group::{GroupElement, GroupParams};

/// Frames larger than this are rejected on read.
pub const MAX_PAYLOAD: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tag: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.push(self.tag);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decode exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let f = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Protocol(format!("{} trailing bytes after frame", r.len())));
        }
        Ok(f)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 5];
        r.read_exact(&mut head)?;
        let len = u32::from_be_bytes([head[0], head[1], head[2], head[3]]) as usize;
        if len > MAX_PAYLOAD {
            return Err(Error::Protocol(format!("frame payload of {len} bytes is too large")));
        }
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        Ok(Self { tag: head[4], payload })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }
}

/// Round labels of the hashed-set messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Round {
    R1a,
    R1b,
    R1c,
    R1d,
    R2a,
    R2b,
}

impl Round {
    pub const ALL: [Round; 6] = [Self::R1a, Self::R1b, Self::R1c, Self::R1d, Self::R2a, Self::R2b];

    fn tag(self) -> u8 {
        match self {
            Self::R1a => 1,
            Self::R1b => 2,
            Self::R1c => 3,
            Self::R1d => 4,
            Self::R2a => 5,
            Self::R2b => 6,
        }
    }
}

pub const TAG_HASH_REQUEST: u8 = 7;
pub const TAG_HASH_RESPONSE: u8 = 8;
pub const TAG_DONE: u8 = 9;
pub const TAG_MATRIX: u8 = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PsuMessage {
    HashedSet { round: Round, elements: Vec<GroupElement> },
    PrivateHashRequest(GroupElement),
    PrivateHashResponse(GroupElement),
    Done,
}

impl PsuMessage {
    pub fn name(&self) -> String {
        match self {
            Self::HashedSet { round, .. } => format!("{round:?}"),
            Self::PrivateHashRequest(_) => "PrivateHashRequest".into(),
            Self::PrivateHashResponse(_) => "PrivateHashResponse".into(),
            Self::Done => "Done".into(),
        }
    }

    /// Every group element carried by the message.
    pub fn elements(&self) -> &[GroupElement] {
        match self {
            Self::HashedSet { elements, .. } => elements,
            Self::PrivateHashRequest(x) | Self::PrivateHashResponse(x) => std::slice::from_ref(x),
            Self::Done => &[],
        }
    }

    pub fn to_frame(&self, params: &GroupParams) -> Result<Frame> {
        let (tag, elements) = match self {
            Self::HashedSet { round, elements } => (round.tag(), elements.as_slice()),
            Self::PrivateHashRequest(x) => (TAG_HASH_REQUEST, std::slice::from_ref(x)),
            Self::PrivateHashResponse(x) => (TAG_HASH_RESPONSE, std::slice::from_ref(x)),
            Self::Done => (TAG_DONE, &[][..]),
        };
        let count = u16::try_from(elements.len())
            .map_err(|_| Error::arg(format!("{} elements exceed one frame", elements.len())))?;
        let mut payload = Vec::with_capacity(2 + elements.len() * params.width());
        payload.extend_from_slice(&count.to_be_bytes());
        for x in elements {
            payload.extend_from_slice(&params.encode(x));
        }
        Ok(Frame { tag, payload })
    }

    pub fn from_frame(frame: &Frame, params: &GroupParams) -> Result<Self> {
        let p = &frame.payload;
        if p.len() < 2 {
            return Err(Error::Protocol("payload shorter than its element count".into()));
        }
        let count = u16::from_be_bytes([p[0], p[1]]) as usize;
        let w = params.width();
        if p.len() != 2 + count * w {
            return Err(Error::Protocol(format!(
                "payload of {} bytes does not hold {count} elements of {w} bytes",
                p.len()
            )));
        }
        let elements = p[2..]
            .chunks_exact(w)
            .map(|c| params.decode(c))
            .collect::<Result<Vec<_>>>()?;
        let single = |mut e: Vec<GroupElement>| {
            if e.len() == 1 {
                Ok(e.pop().unwrap())
            } else {
                Err(Error::Protocol("private-hash message must carry one element".into()))
            }
        };
        match frame.tag {
            TAG_HASH_REQUEST => Ok(Self::PrivateHashRequest(single(elements)?)),
            TAG_HASH_RESPONSE => Ok(Self::PrivateHashResponse(single(elements)?)),
            TAG_DONE if elements.is_empty() => Ok(Self::Done),
            t => match Round::ALL.iter().find(|r| r.tag() == t) {
                Some(&round) => Ok(Self::HashedSet { round, elements }),
                None => Err(Error::Protocol(format!("unexpected message tag {t}"))),
            },
        }
    }
}

/// Matrix frame: 4-byte big-endian row and column counts, then the
/// entries row-major as little-endian `f64`.
pub fn matrix_frame(m: &Mat) -> Frame {
    let mut payload = Vec::with_capacity(8 + 8 * m.as_slice().len());
    payload.extend_from_slice(&(m.rows() as u32).to_be_bytes());
    payload.extend_from_slice(&(m.cols() as u32).to_be_bytes());
    for x in m.as_slice() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    Frame { tag: TAG_MATRIX, payload }
}

pub fn matrix_from_frame(frame: &Frame) -> Result<Mat> {
    if frame.tag != TAG_MATRIX {
        return Err(Error::Protocol(format!("expected a matrix frame, got tag {}", frame.tag)));
    }
    let p = &frame.payload;
    if p.len() < 8 {
        return Err(Error::Protocol("matrix payload too short".into()));
    }
    let rows = u32::from_be_bytes([p[0], p[1], p[2], p[3]]) as usize;
    let cols = u32::from_be_bytes([p[4], p[5], p[6], p[7]]) as usize;
    if p.len() != 8 + 8 * rows * cols {
        return Err(Error::Protocol(format!("matrix payload size mismatch for {rows}x{cols}")));
    }
    let data = p[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Mat::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::super::group::hash_to_group;
    use super::*;

    #[test]
    fn frame_layout() {
        let f = Frame {
            tag: 9,
            payload: vec![0, 0],
        };
        assert_eq!(f.encode(), vec![0, 0, 0, 2, 9, 0, 0]);
        assert_eq!(Frame::decode(&f.encode()).unwrap(), f);
        assert!(Frame::decode(&[0, 0, 0, 3, 9, 0, 0]).is_err());
    }

    #[test]
    fn message_round_trip() {
        let g = GroupParams::toy();
        let xs: Vec<_> = (0..4u8).map(|i| hash_to_group(&[i + 1], &g).unwrap()).collect();
        let msgs = [
            PsuMessage::HashedSet {
                round: Round::R2a,
                elements: xs.clone(),
            },
            PsuMessage::PrivateHashRequest(xs[0].clone()),
            PsuMessage::PrivateHashResponse(xs[1].clone()),
            PsuMessage::Done,
        ];
        for m in msgs {
            let f = m.to_frame(&g).unwrap();
            assert_eq!(PsuMessage::from_frame(&Frame::decode(&f.encode()).unwrap(), &g).unwrap(), m);
        }
        let f = PsuMessage::HashedSet {
            round: Round::R1a,
            elements: xs,
        }
        .to_frame(&g)
        .unwrap();
        // 2-byte count then one byte per element at p = 23
        assert_eq!(&f.payload[..2], &[0, 4]);
        assert_eq!(f.payload.len(), 6);
    }

    #[test]
    fn non_residue_rejected() {
        let g = GroupParams::toy();
        // 5 is not a square mod 23
        let f = Frame {
            tag: TAG_HASH_REQUEST,
            payload: vec![0, 1, 5],
        };
        assert!(PsuMessage::from_frame(&f, &g).is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let m = Mat::from_rows(&[[1.5, -2.0, f64::MIN_POSITIVE], [0.0, 1e300, -0.0]]).unwrap();
        let f = matrix_frame(&m);
        assert_eq!(&f.payload[..8], &[0, 0, 0, 2, 0, 0, 0, 3]);
        assert_eq!(&f.payload[8..16], &1.5f64.to_le_bytes());
        let back = matrix_from_frame(&Frame::decode(&f.encode()).unwrap()).unwrap();
        assert_eq!(back.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}
