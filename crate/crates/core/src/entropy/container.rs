//! The `.dpcc` container: a fixed little-endian header followed by three
//! length-prefixed substreams in the order shape, hyper, detail.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DPCC";
pub const VERSION: u8 = 1;
/// Bytes before the first substream.
pub const HEADER_LEN: usize = 4 + 1 + 4 + 2 + 2 + 2 + 2 + 8 + 2 + 12 + 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub points: u32,
    pub tokens: u16,
    pub channels: u16,
    pub hyper_channels: u16,
    pub steps: u16,
    pub seed: u64,
    /// `-1` when the cloud is unconditioned.
    pub label: i16,
    pub center: [f32; 3],
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub shape_stream: Vec<u8>,
    pub hyper_stream: Vec<u8>,
    pub detail_stream: Vec<u8>,
}

impl Container {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 12 + self.shape_stream.len() + self.hyper_stream.len() + self.detail_stream.len()
    }
}

pub fn pack_container(c: &Container) -> Result<Vec<u8>> {
    let h = &c.header;
    let mut out = Vec::with_capacity(c.encoded_len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&h.points.to_le_bytes());
    out.extend_from_slice(&h.tokens.to_le_bytes());
    out.extend_from_slice(&h.channels.to_le_bytes());
    out.extend_from_slice(&h.hyper_channels.to_le_bytes());
    out.extend_from_slice(&h.steps.to_le_bytes());
    out.extend_from_slice(&h.seed.to_le_bytes());
    out.extend_from_slice(&h.label.to_le_bytes());
    for v in h.center {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&h.scale.to_le_bytes());
    for stream in [&c.shape_stream, &c.hyper_stream, &c.detail_stream] {
        let len = u32::try_from(stream.len())
            .map_err(|_| Error::Bitstream("substream longer than 4 GiB".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(stream);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Bitstream(format!(
                    "short read: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
}

pub fn unpack_container(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Bitstream("bad magic, not a DPCC container".into()));
    }
    let version = r.array::<1>()?[0];
    if version != VERSION {
        return Err(Error::Bitstream(format!("unsupported container version {version}")));
    }
    let header = Header {
        points: u32::from_le_bytes(r.array()?),
        tokens: u16::from_le_bytes(r.array()?),
        channels: u16::from_le_bytes(r.array()?),
        hyper_channels: u16::from_le_bytes(r.array()?),
        steps: u16::from_le_bytes(r.array()?),
        seed: u64::from_le_bytes(r.array()?),
        label: i16::from_le_bytes(r.array()?),
        center: [
            f32::from_le_bytes(r.array()?),
            f32::from_le_bytes(r.array()?),
            f32::from_le_bytes(r.array()?),
        ],
        scale: f32::from_le_bytes(r.array()?),
    };
    let mut streams = Vec::with_capacity(3);
    for _ in 0..3 {
        let len = u32::from_le_bytes(r.array()?) as usize;
        if len > bytes.len() - r.pos {
            return Err(Error::Bitstream(format!(
                "substream length {len} overflows the remaining {} bytes",
                bytes.len() - r.pos
            )));
        }
        streams.push(r.take(len)?.to_vec());
    }
    if r.pos != bytes.len() {
        return Err(Error::Bitstream(format!(
            "{} trailing bytes after the last substream",
            bytes.len() - r.pos
        )));
    }
    let detail_stream = streams.pop().unwrap();
    let hyper_stream = streams.pop().unwrap();
    let shape_stream = streams.pop().unwrap();
    Ok(Container {
        header,
        shape_stream,
        hyper_stream,
        detail_stream,
    })
}
