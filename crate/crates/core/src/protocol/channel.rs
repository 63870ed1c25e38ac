use std::io::{self, Read, Write};

pub const TRANSCRIPT_MAGIC: &[u8; 4] = b"QTR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Party {
    Alice = 0,
    Bob = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    ParityReq = 1,
    ParityResp = 2,
    SampleReveal = 3,
    HashCheck = 4,
    PaSeed = 5,
}

impl MessageKind {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::ParityReq,
            2 => Self::ParityResp,
            3 => Self::SampleReveal,
            4 => Self::HashCheck,
            5 => Self::PaSeed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub from: Party,
    pub payload: Vec<u8>,
}

/// The public channel between the two agents. Everything said on it is
/// logged; `disclosed_bits` counts key information given away.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassicalChannel {
    transcript: Vec<Message>,
    disclosed_bits: u64,
}

impl ClassicalChannel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, kind: MessageKind, from: Party, payload: Vec<u8>, disclosed_bits: u64) {
        self.disclosed_bits += disclosed_bits;
        self.transcript.push(Message { kind, from, payload });
    }

    pub fn transcript(&self) -> &[Message] {
        &self.transcript
    }

    pub fn disclosed_bits(&self) -> u64 {
        self.disclosed_bits
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.transcript.iter().filter(|m| m.kind == kind).count()
    }

    /// Magic, then per message: body length (u32 LE), type byte, sender byte, payload.
    pub fn write_transcript<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(TRANSCRIPT_MAGIC)?;
        for m in &self.transcript {
            let len = u32::try_from(m.payload.len() + 2).map_err(|_| io::Error::other("message too long"))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(&[m.kind as u8, m.from as u8])?;
            out.write_all(&m.payload)?;
        }
        out.flush()
    }

    pub fn read_transcript<R: Read>(mut input: R) -> io::Result<Vec<Message>> {
        let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != TRANSCRIPT_MAGIC {
            return Err(bad("not a transcript file"));
        }
        let mut out = Vec::new();
        let mut len = [0u8; 4];
        loop {
            match input.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(out),
                Err(e) => return Err(e),
            }
            let len = u32::from_le_bytes(len) as usize;
            if len < 2 {
                return Err(bad("truncated message"));
            }
            let mut body = vec![0u8; len];
            input.read_exact(&mut body)?;
            let kind = MessageKind::from_byte(body[0]).ok_or_else(|| bad("unknown message type"))?;
            let from = match body[1] {
                0 => Party::Alice,
                1 => Party::Bob,
                _ => return Err(bad("unknown sender")),
            };
            out.push(Message {
                kind,
                from,
                payload: body[2..].to_vec(),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transcript_roundtrip() {
        let mut ch = ClassicalChannel::new();
        ch.send(MessageKind::ParityReq, Party::Bob, vec![0, 1, 0, 0, 0, 9, 0, 0, 0], 0);
        ch.send(MessageKind::ParityResp, Party::Alice, vec![1], 1);
        ch.send(MessageKind::HashCheck, Party::Alice, vec![7; 16], 64);
        assert_eq!(ch.disclosed_bits(), 65);
        assert_eq!(ch.count(MessageKind::ParityResp), 1);
        let mut buf = Vec::new();
        ch.write_transcript(&mut buf).unwrap();
        assert_eq!(&buf[..4], TRANSCRIPT_MAGIC);
        assert_eq!(ClassicalChannel::read_transcript(&buf[..]).unwrap(), ch.transcript());
    }

    #[test]
    fn rejects_corrupt_transcripts() {
        assert!(ClassicalChannel::read_transcript(&b"XXXX"[..]).is_err());
        let mut buf = TRANSCRIPT_MAGIC.to_vec();
        buf.extend_from_slice(&3u32.to_le_bytes());
        buf.extend_from_slice(&[9, 0, 0]);
        assert!(ClassicalChannel::read_transcript(&buf[..]).is_err());
    }
}
