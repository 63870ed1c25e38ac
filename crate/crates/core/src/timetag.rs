//! Detection records and their on-disk formats.
//!
//! Binary layout (little endian): a 16 byte header `b"QTT1"`, `u32` record
//! count, `u64` stream start epoch in picoseconds; then 10 byte records of
//! `u64` timestamp, `u8` channel (0 = T, 1 = R) and `u8` basis (0 = H/V,
//! 1 = P/M). A plain-text variant with `timestamp_ps,channel,basis` rows is
//! accepted on input.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"QTT1";
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 10;

/// Largest timestamp a packed [`TimeTag`] can hold (about 53 days).
pub const MAX_TIMESTAMP_PS: u64 = (1 << 62) - 1;

#[derive(Debug, Error)]
pub enum TagFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a time-tag file (bad magic)")]
    BadMagic,
    #[error("record count in header ({header}) does not match payload ({actual})")]
    CountMismatch { header: u64, actual: u64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("record {index}: {msg}")]
    BadRecord { index: usize, msg: String },
}

/// Output port of a polarizing beam splitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    /// Transmitted port: H or P, bit value 0.
    T = 0,
    /// Reflected port: V or M, bit value 1.
    R = 1,
}

impl Channel {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Channel::R
        } else {
            Channel::T
        }
    }

    pub fn bit(self) -> bool {
        self == Channel::R
    }
}

/// Analyzer setting chosen by the electro-optic modulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Basis {
    /// H/V
    Rectilinear = 0,
    /// P/M
    Diagonal = 1,
}

impl Basis {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Basis::Diagonal
        } else {
            Basis::Rectilinear
        }
    }
}

/// One detection event, packed into a single word: the timestamp occupies the
/// upper 62 bits, so ordering by the raw word orders by time first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(transparent)]
pub struct TimeTag(u64);

impl TimeTag {
    pub fn new(timestamp_ps: u64, channel: Channel, basis: Basis) -> Self {
        assert!(
            timestamp_ps <= MAX_TIMESTAMP_PS,
            "timestamp {timestamp_ps} ps out of range"
        );
        TimeTag(timestamp_ps << 2 | (channel as u64) << 1 | basis as u64)
    }

    #[inline]
    pub fn timestamp_ps(self) -> u64 {
        self.0 >> 2
    }

    #[inline]
    pub fn channel(self) -> Channel {
        if self.0 & 2 == 0 {
            Channel::T
        } else {
            Channel::R
        }
    }

    #[inline]
    pub fn basis(self) -> Basis {
        Basis::from_bit(self.0 & 1 == 1)
    }

    /// Measured bit: 0 for H/P, 1 for V/M.
    #[inline]
    pub fn bit(self) -> bool {
        self.channel().bit()
    }
}

/// Time-ordered detections of one party.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagStream {
    /// Start of the recording, picoseconds on the party's clock.
    pub epoch_ps: u64,
    pub tags: Vec<TimeTag>,
}

impl TagStream {
    pub fn new(epoch_ps: u64, tags: Vec<TimeTag>) -> Self {
        Self { epoch_ps, tags }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.tags.windows(2).all(|w| w[0].timestamp_ps() < w[1].timestamp_ps())
    }

    /// Index of the first tag at or after `t_ps`.
    pub fn lower_bound(&self, t_ps: u64) -> usize {
        self.tags.partition_point(|t| t.timestamp_ps() < t_ps)
    }

    /// Span between first and last tag, seconds.
    pub fn span_s(&self) -> f64 {
        match (self.tags.first(), self.tags.last()) {
            (Some(a), Some(b)) => (b.timestamp_ps() - a.timestamp_ps()) as f64 * 1e-12,
            _ => 0.0,
        }
    }

    pub fn write_binary<W: Write>(&self, out: W) -> io::Result<()> {
        let mut w = BufWriter::new(out);
        w.write_all(MAGIC)?;
        // the count field is 32 bits wide; longer streams store u32::MAX
        let count = u32::try_from(self.tags.len()).unwrap_or(u32::MAX);
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&self.epoch_ps.to_le_bytes())?;
        for tag in &self.tags {
            let mut rec = [0u8; RECORD_LEN];
            rec[..8].copy_from_slice(&tag.timestamp_ps().to_le_bytes());
            rec[8] = tag.channel() as u8;
            rec[9] = tag.basis() as u8;
            w.write_all(&rec)?;
        }
        w.flush()
    }

    pub fn read_binary<R: Read>(input: R) -> Result<Self, TagFileError> {
        let mut r = BufReader::new(input);
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        if &header[..4] != MAGIC {
            return Err(TagFileError::BadMagic);
        }
        let count = u32::from_le_bytes(header[4..8].try_into().unwrap());
        let epoch_ps = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let mut tags = Vec::with_capacity(count as usize);
        let mut rec = [0u8; RECORD_LEN];
        loop {
            match r.read_exact(&mut rec) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let index = tags.len();
            let ts = u64::from_le_bytes(rec[..8].try_into().unwrap());
            tags.push(decode_tag(ts, rec[8], rec[9]).map_err(|msg| TagFileError::BadRecord { index, msg })?);
        }
        if count != u32::MAX && count as usize != tags.len() {
            return Err(TagFileError::CountMismatch {
                header: count as u64,
                actual: tags.len() as u64,
            });
        }
        Ok(Self { epoch_ps, tags })
    }

    /// Reads `timestamp_ps,channel,basis` rows; a header line and `#`
    /// comments are skipped.
    pub fn read_text<R: Read>(input: R) -> Result<Self, TagFileError> {
        let mut tags = Vec::new();
        for (i, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("timestamp") {
                continue;
            }
            let err = |msg: &str| TagFileError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut fields = line.split(',').map(str::trim);
            let mut next = |name: &str| -> Result<u64, TagFileError> {
                fields
                    .next()
                    .ok_or_else(|| err(&format!("missing {name}")))?
                    .parse()
                    .map_err(|_| err(&format!("bad {name}")))
            };
            let ts = next("timestamp_ps")?;
            let channel = next("channel")?;
            let basis = next("basis")?;
            tags.push(decode_tag(ts, channel as u8, basis as u8).map_err(|m| err(&m))?);
        }
        let epoch_ps = tags.first().map_or(0, |t| t.timestamp_ps());
        Ok(Self { epoch_ps, tags })
    }

    pub fn write_file(&self, path: &Path) -> io::Result<()> {
        self.write_binary(File::create(path)?)
    }

    /// Loads either format, sniffing the magic bytes.
    pub fn read_file(path: &Path) -> Result<Self, TagFileError> {
        let mut f = File::open(path)?;
        let mut magic = [0u8; 4];
        let n = f.read(&mut magic)?;
        drop(f);
        let f = File::open(path)?;
        if n == 4 && &magic == MAGIC {
            Self::read_binary(f)
        } else {
            Self::read_text(f)
        }
    }
}

fn decode_tag(ts: u64, channel: u8, basis: u8) -> Result<TimeTag, String> {
    if ts > MAX_TIMESTAMP_PS {
        return Err(format!("timestamp {ts} out of range"));
    }
    let channel = match channel {
        0 => Channel::T,
        1 => Channel::R,
        c => return Err(format!("channel {c} is not 0 or 1")),
    };
    let basis = match basis {
        0 => Basis::Rectilinear,
        1 => Basis::Diagonal,
        b => return Err(format!("basis {b} is not 0 or 1")),
    };
    Ok(TimeTag::new(ts, channel, basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.qtt");
        let s = TagStream::new(
            7,
            vec![
                TimeTag::new(10, Channel::T, Basis::Rectilinear),
                TimeTag::new(99, Channel::R, Basis::Diagonal),
            ],
        );
        s.write_file(&path).unwrap();
        assert_eq!(TagStream::read_file(&path).unwrap(), s);
    }

    #[test]
    fn packing_keeps_fields() {
        let t = TimeTag::new(123_456_789, Channel::R, Basis::Diagonal);
        assert_eq!(t.timestamp_ps(), 123_456_789);
        assert_eq!(t.channel(), Channel::R);
        assert_eq!(t.basis(), Basis::Diagonal);
        assert!(t.bit());
        assert!(TimeTag::new(5, Channel::R, Basis::Diagonal) < TimeTag::new(6, Channel::T, Basis::Rectilinear));
    }

    #[test]
    fn header_layout() {
        let s = TagStream::new(7, vec![TimeTag::new(1, Channel::T, Basis::Diagonal)]);
        let mut buf = Vec::new();
        s.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + RECORD_LEN);
        assert_eq!(&buf[..4], b"QTT1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &7u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(&buf[24..], &[0, 1]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            TagStream::read_binary(&b"NOPE0000000000000000"[..]),
            Err(TagFileError::BadMagic)
        ));
        let mut buf = Vec::new();
        TagStream::new(0, vec![TimeTag::new(1, Channel::T, Basis::Diagonal)])
            .write_binary(&mut buf)
            .unwrap();
        buf[24] = 7;
        assert!(matches!(
            TagStream::read_binary(&buf[..]),
            Err(TagFileError::BadRecord { index: 0, .. })
        ));
        assert!(TagStream::read_text(&b"12,0\n"[..]).is_err());
    }

    #[test]
    fn text_input() {
        let text = "timestamp_ps,channel,basis\n# comment\n100,0,1\n250,1,0\n";
        let s = TagStream::read_text(text.as_bytes()).unwrap();
        assert_eq!(s.tags.len(), 2);
        assert_eq!(s.tags[1], TimeTag::new(250, Channel::R, Basis::Rectilinear));
        assert_eq!(s.epoch_ps, 100);
    }

    proptest! {
        #[test]
        fn binary_roundtrip(epoch in any::<u64>(), raw in proptest::collection::vec((0u64..MAX_TIMESTAMP_PS, any::<bool>(), any::<bool>()), 0..200)) {
            let tags = raw.into_iter().map(|(t, c, b)| TimeTag::new(t, Channel::from_bit(c), Basis::from_bit(b))).collect();
            let s = TagStream::new(epoch, tags);
            let mut buf = Vec::new();
            s.write_binary(&mut buf).unwrap();
            prop_assert_eq!(TagStream::read_binary(&buf[..]).unwrap(), s);
        }
    }
}
