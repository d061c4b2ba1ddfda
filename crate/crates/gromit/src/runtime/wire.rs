//! Length-prefixed frame codec shared by the message broker and the
//! validator-to-validator protocol.
//!
//! Frame layout, all integers big-endian:
//!
//! ```text
//! topic_len: u16 | topic bytes | sender: u32 | sequence: u64 |
//! payload_len: u32 | payload bytes
//! ```
//!
//! The validator protocol reuses the topic field as a message kind
//! (`TX`, `BLOCK`, ...).

use std::io;

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::telemetry::NetCounters;

/// Refuse frames above this payload size; protects against corrupt length
/// prefixes, not a protocol feature.
const MAX_PAYLOAD: u32 = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub topic: String,
    pub sender: u32,
    pub sequence: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(topic: impl Into<String>, sender: u32, sequence: u64, payload: Vec<u8>) -> Self {
        Frame {
            topic: topic.into(),
            sender,
            sequence,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let topic = self.topic.as_bytes();
        debug_assert!(topic.len() <= u16::MAX as usize);
        let mut buf = Vec::with_capacity(2 + topic.len() + 4 + 8 + 4 + self.payload.len());
        buf.extend_from_slice(&(topic.len() as u16).to_be_bytes());
        buf.extend_from_slice(topic);
        buf.extend_from_slice(&self.sender.to_be_bytes());
        buf.extend_from_slice(&self.sequence.to_be_bytes());
        buf.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        buf.extend_from_slice(&self.payload);
        buf
    }

    /// Reads one frame; `Ok(None)` on a clean EOF at a frame boundary.
    pub async fn read_from<R: AsyncRead + Unpin>(reader: &mut R) -> io::Result<Option<Frame>> {
        let mut topic_len = [0u8; 2];
        match reader.read_exact(&mut topic_len).await {
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let topic_len = u16::from_be_bytes(topic_len) as usize;
        let mut topic = vec![0u8; topic_len];
        reader.read_exact(&mut topic).await?;
        let topic = String::from_utf8(topic)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "topic is not utf-8"))?;
        let mut sender = [0u8; 4];
        reader.read_exact(&mut sender).await?;
        let mut sequence = [0u8; 8];
        reader.read_exact(&mut sequence).await?;
        let mut payload_len = [0u8; 4];
        reader.read_exact(&mut payload_len).await?;
        let payload_len = u32::from_be_bytes(payload_len);
        if payload_len > MAX_PAYLOAD {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("frame payload of {payload_len} bytes exceeds limit"),
            ));
        }
        let mut payload = vec![0u8; payload_len as usize];
        reader.read_exact(&mut payload).await?;
        Ok(Some(Frame {
            topic,
            sender: u32::from_be_bytes(sender),
            sequence: u64::from_be_bytes(sequence),
            payload,
        }))
    }

    /// Writes the frame and counts the bytes as outbound traffic.
    pub async fn write_to<W: AsyncWrite + Unpin>(
        &self,
        writer: &mut W,
        counters: &NetCounters,
    ) -> io::Result<()> {
        let bytes = self.encode();
        writer.write_all(&bytes).await?;
        counters.add_out(bytes.len() as u64);
        Ok(())
    }

    pub fn wire_len(&self) -> u64 {
        (2 + self.topic.len() + 4 + 8 + 4 + self.payload.len()) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn roundtrip_through_buffer() {
        let frame = Frame::new("accounts", 3, 42, b"blob".to_vec());
        let counters = NetCounters::default();
        let mut buf = Vec::new();
        frame.write_to(&mut buf, &counters).await.unwrap();
        assert_eq!(counters.read().1, frame.wire_len());

        // Exact layout: 2-byte topic length, topic, sender, sequence, len, payload.
        assert_eq!(&buf[..2], &8u16.to_be_bytes());
        assert_eq!(&buf[2..10], b"accounts");
        assert_eq!(&buf[10..14], &3u32.to_be_bytes());
        assert_eq!(&buf[14..22], &42u64.to_be_bytes());
        assert_eq!(&buf[22..26], &4u32.to_be_bytes());

        let mut cursor = io::Cursor::new(buf);
        let decoded = Frame::read_from(&mut cursor).await.unwrap().unwrap();
        assert_eq!(decoded, frame);
        assert!(Frame::read_from(&mut cursor).await.unwrap().is_none());
    }

    #[tokio::test]
    async fn truncated_frame_is_an_error() {
        let frame = Frame::new("t", 1, 1, vec![1, 2, 3, 4]);
        let bytes = frame.encode();
        let mut cursor = io::Cursor::new(&bytes[..bytes.len() - 2]);
        assert!(Frame::read_from(&mut cursor).await.is_err());
    }
}
