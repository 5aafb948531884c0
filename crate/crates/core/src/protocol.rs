//! Binary wire format for the one-shot round.
//!
//! Every frame is `u32 LE payload length | u8 tag | payload`; the length
//! excludes the 5-byte header. Integers and `f64`s are little-endian and
//! matrices are row-major.
//!
//! | tag | message     | payload |
//! |-----|-------------|---------|
//! | 1   | Hello       | client_id u32 |
//! | 2   | Config      | version u16, gamma f64, beta f64, lambda f64, d_p u32, d_r u32, seed_p u64, seed_r u64, act_p u8, act_r u8, num_classes u32, num_clients u32, flags u8 |
//! | 3   | Upload      | client_id u32, d u32, c u32, n_samples u64, A (d·d f64), G (d·c f64) |
//! | 4   | GlobalModel | rows u32, cols u32, G (rows·cols f64) |
//! | 5   | Error       | code u16, len u32, UTF-8 text |

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::ActivationKind;
use crate::linalg::{Matrix, SYMMETRY_TOL};

pub const PROTOCOL_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 5;
/// Upper bound on a single payload, guarding allocations on untrusted input.
pub const MAX_PAYLOAD_LEN: usize = 1 << 30;

/// Fixed part of an Upload payload: client_id, d, c, n_samples.
pub const UPLOAD_FIXED_LEN: usize = 4 + 4 + 4 + 8;
pub const CONFIG_PAYLOAD_LEN: usize = 2 + 3 * 8 + 2 * 4 + 2 * 8 + 2 + 2 * 4 + 1;

const FLAG_APPEND_BIAS: u8 = 1;
const FLAG_PER_CLIENT_REFINE: u8 = 1 << 1;

pub mod error_code {
    pub const UNKNOWN_CLIENT: u16 = 1;
    pub const DUPLICATE_CLIENT: u16 = 2;
    pub const BAD_UPLOAD: u16 = 3;
    pub const ROUND_FAILED: u16 = 4;
    pub const UNEXPECTED_MESSAGE: u16 = 5;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("truncated frame: needed {needed} more byte(s) at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("unknown message tag {tag} at offset {offset}")]
    UnknownTag { tag: u8, offset: usize },
    #[error("malformed payload at offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("payload of {0} bytes exceeds the frame limit")]
    TooLarge(usize),
    #[error("invalid message: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for ProtocolError {
    fn from(e: io::Error) -> Self {
        ProtocolError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Hello,
    Config,
    Upload,
    GlobalModel,
    Error,
}

impl MessageKind {
    pub fn tag(self) -> u8 {
        match self {
            MessageKind::Hello => 1,
            MessageKind::Config => 2,
            MessageKind::Upload => 3,
            MessageKind::GlobalModel => 4,
            MessageKind::Error => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => MessageKind::Hello,
            2 => MessageKind::Config,
            3 => MessageKind::Upload,
            4 => MessageKind::GlobalModel,
            5 => MessageKind::Error,
            _ => return None,
        })
    }
}

/// Run parameters every party must share for the round to be meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub version: u16,
    pub gamma: f64,
    pub beta: f64,
    pub lambda: f64,
    pub d_p: u32,
    pub d_r: u32,
    pub seed_p: u64,
    pub seed_r: u64,
    pub act_p: ActivationKind,
    pub act_r: ActivationKind,
    pub num_classes: u32,
    pub num_clients: u32,
    /// Constant-1 feature appended to both heads' outputs.
    pub append_bias: bool,
    /// Each client derives its own refinement projection from `seed_r`.
    pub per_client_refine_head: bool,
}

impl ProtocolConfig {
    /// Width of the primary features, which is also the side of `A_k`.
    pub fn primary_width(&self) -> usize {
        self.d_p as usize + usize::from(self.append_bias)
    }
}

/// A client's one and only upload. Construction rejects empty or
/// inconsistent matrices, so an invalid upload is never encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    client_id: u32,
    n_samples: u64,
    a: Matrix<f64>,
    g_local: Matrix<f64>,
}

impl Upload {
    pub fn new(client_id: u32, n_samples: u64, a: Matrix<f64>, g_local: Matrix<f64>) -> Result<Self, ProtocolError> {
        if a.is_empty() || g_local.is_empty() {
            return Err(ProtocolError::Invalid("upload matrices must be non-empty".into()));
        }
        if !a.is_square() || g_local.rows() != a.rows() {
            return Err(ProtocolError::Invalid(format!(
                "upload shapes A {:?}, G {:?} are inconsistent",
                a.shape(),
                g_local.shape()
            )));
        }
        Ok(Self {
            client_id,
            n_samples,
            a,
            g_local,
        })
    }

    pub fn client_id(&self) -> u32 {
        self.client_id
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    pub fn a(&self) -> &Matrix<f64> {
        &self.a
    }

    pub fn g_local(&self) -> &Matrix<f64> {
        &self.g_local
    }

    pub fn into_parts(self) -> (u32, u64, Matrix<f64>, Matrix<f64>) {
        (self.client_id, self.n_samples, self.a, self.g_local)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { client_id: u32 },
    Config(ProtocolConfig),
    Upload(Upload),
    GlobalModel { g: Matrix<f64> },
    Error { code: u16, text: String },
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Hello { .. } => MessageKind::Hello,
            Message::Config(_) => MessageKind::Config,
            Message::Upload(_) => MessageKind::Upload,
            Message::GlobalModel { .. } => MessageKind::GlobalModel,
            Message::Error { .. } => MessageKind::Error,
        }
    }
}

/// Payload size of an Upload for `d × d` auto-correlation and `d × c`
/// local stream.
pub fn upload_payload_len(d: usize, c: usize) -> usize {
    UPLOAD_FIXED_LEN + 8 * (d * d + d * c)
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix<f64>) {
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut p = Vec::new();
    match msg {
        Message::Hello { client_id } => p.extend_from_slice(&client_id.to_le_bytes()),
        Message::Config(c) => {
            p.extend_from_slice(&c.version.to_le_bytes());
            p.extend_from_slice(&c.gamma.to_le_bytes());
            p.extend_from_slice(&c.beta.to_le_bytes());
            p.extend_from_slice(&c.lambda.to_le_bytes());
            p.extend_from_slice(&c.d_p.to_le_bytes());
            p.extend_from_slice(&c.d_r.to_le_bytes());
            p.extend_from_slice(&c.seed_p.to_le_bytes());
            p.extend_from_slice(&c.seed_r.to_le_bytes());
            p.push(c.act_p.code());
            p.push(c.act_r.code());
            p.extend_from_slice(&c.num_classes.to_le_bytes());
            p.extend_from_slice(&c.num_clients.to_le_bytes());
            let mut flags = 0;
            if c.append_bias {
                flags |= FLAG_APPEND_BIAS;
            }
            if c.per_client_refine_head {
                flags |= FLAG_PER_CLIENT_REFINE;
            }
            p.push(flags);
        }
        Message::Upload(u) => {
            p.reserve(upload_payload_len(u.a.rows(), u.g_local.cols()));
            p.extend_from_slice(&u.client_id.to_le_bytes());
            p.extend_from_slice(&(u.a.rows() as u32).to_le_bytes());
            p.extend_from_slice(&(u.g_local.cols() as u32).to_le_bytes());
            p.extend_from_slice(&u.n_samples.to_le_bytes());
            put_matrix(&mut p, &u.a);
            put_matrix(&mut p, &u.g_local);
        }
        Message::GlobalModel { g } => {
            p.extend_from_slice(&(g.rows() as u32).to_le_bytes());
            p.extend_from_slice(&(g.cols() as u32).to_le_bytes());
            put_matrix(&mut p, g);
        }
        Message::Error { code, text } => {
            p.extend_from_slice(&code.to_le_bytes());
            p.extend_from_slice(&(text.len() as u32).to_le_bytes());
            p.extend_from_slice(text.as_bytes());
        }
    }
    let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + p.len());
    frame.extend_from_slice(&(p.len() as u32).to_le_bytes());
    frame.push(msg.kind().tag());
    frame.extend_from_slice(&p);
    frame
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(ProtocolError::Truncated {
                offset: self.base + self.buf.len(),
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ProtocolError> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn malformed(&self, reason: impl Into<String>) -> ProtocolError {
        ProtocolError::Malformed {
            offset: self.offset(),
            reason: reason.into(),
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix<f64>, ProtocolError> {
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| ProtocolError::Truncated {
                offset: self.base + self.buf.len(),
                needed: rows.saturating_mul(cols).saturating_mul(8).saturating_sub(self.buf.len() - self.pos),
            })?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = self.f64()?;
            if !v.is_finite() {
                return Err(self.malformed("non-finite matrix entry"));
            }
            data.push(v);
        }
        Ok(Matrix::from_vec(rows, cols, data).expect("length matches"))
    }

    fn activation(&mut self) -> Result<ActivationKind, ProtocolError> {
        let code = self.u8()?;
        ActivationKind::from_code(code).ok_or_else(|| ProtocolError::Malformed {
            offset: self.offset() - 1,
            reason: format!("unknown activation code {code}"),
        })
    }
}

/// Decodes one frame from the front of `bytes`, returning the message and
/// the number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Message, usize), ProtocolError> {
    let mut header = Reader {
        buf: bytes,
        pos: 0,
        base: 0,
    };
    let len = header.u32()? as usize;
    let tag = header.u8()?;
    if len > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::TooLarge(len));
    }
    let kind = MessageKind::from_tag(tag).ok_or(ProtocolError::UnknownTag { tag, offset: 4 })?;
    let payload = header.bytes(len)?;
    let msg = decode_payload(kind, payload, FRAME_HEADER_LEN)?;
    Ok((msg, FRAME_HEADER_LEN + len))
}

fn decode_payload(kind: MessageKind, payload: &[u8], base: usize) -> Result<Message, ProtocolError> {
    let mut r = Reader {
        buf: payload,
        pos: 0,
        base,
    };
    let msg = match kind {
        MessageKind::Hello => Message::Hello { client_id: r.u32()? },
        MessageKind::Config => {
            let version = r.u16()?;
            if version != PROTOCOL_VERSION {
                return Err(ProtocolError::Malformed {
                    offset: base,
                    reason: format!("unsupported protocol version {version}"),
                });
            }
            let gamma = r.f64()?;
            let beta = r.f64()?;
            let lambda = r.f64()?;
            let d_p = r.u32()?;
            let d_r = r.u32()?;
            let seed_p = r.u64()?;
            let seed_r = r.u64()?;
            let act_p = r.activation()?;
            let act_r = r.activation()?;
            let num_classes = r.u32()?;
            let num_clients = r.u32()?;
            let flags = r.u8()?;
            if flags & !(FLAG_APPEND_BIAS | FLAG_PER_CLIENT_REFINE) != 0 {
                return Err(r.malformed(format!("unknown config flags {flags:#04x}")));
            }
            Message::Config(ProtocolConfig {
                version,
                gamma,
                beta,
                lambda,
                d_p,
                d_r,
                seed_p,
                seed_r,
                act_p,
                act_r,
                num_classes,
                num_clients,
                append_bias: flags & FLAG_APPEND_BIAS != 0,
                per_client_refine_head: flags & FLAG_PER_CLIENT_REFINE != 0,
            })
        }
        MessageKind::Upload => {
            let client_id = r.u32()?;
            let d = r.u32()? as usize;
            let c = r.u32()? as usize;
            let n_samples = r.u64()?;
            if d == 0 || c == 0 {
                return Err(r.malformed("upload dimensions must be positive"));
            }
            let a_offset = r.offset();
            let a = r.matrix(d, d)?;
            let g = r.matrix(d, c)?;
            let tol = SYMMETRY_TOL * a.max_abs().max(1.0);
            let asym = a.max_asymmetry();
            if asym > tol {
                return Err(ProtocolError::Malformed {
                    offset: a_offset,
                    reason: format!("auto-correlation matrix asymmetric by {asym:e}"),
                });
            }
            Message::Upload(Upload::new(client_id, n_samples, a, g)?)
        }
        MessageKind::GlobalModel => {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            Message::GlobalModel { g: r.matrix(rows, cols)? }
        }
        MessageKind::Error => {
            let code = r.u16()?;
            let len = r.u32()? as usize;
            let at = r.offset();
            let text = std::str::from_utf8(r.bytes(len)?)
                .map_err(|_| ProtocolError::Malformed {
                    offset: at,
                    reason: "error text is not UTF-8".into(),
                })?
                .to_string();
            Message::Error { code, text }
        }
    };
    if r.pos != payload.len() {
        return Err(r.malformed(format!("{} trailing byte(s)", payload.len() - r.pos)));
    }
    Ok(msg)
}

/// Writes one frame, returning its size in bytes.
pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<usize, ProtocolError> {
    let frame = encode(msg);
    w.write_all(&frame)?;
    w.flush()?;
    Ok(frame.len())
}

/// Blocks until a whole frame is read, returning the message and its size.
pub fn read_message<R: Read>(r: &mut R) -> Result<(Message, usize), ProtocolError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    read_exact(r, &mut header, 0)?;
    let len = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    let tag = header[4];
    let kind = MessageKind::from_tag(tag).ok_or(ProtocolError::UnknownTag { tag, offset: 4 })?;
    if len > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::TooLarge(len));
    }
    let mut payload = vec![0u8; len];
    read_exact(r, &mut payload, FRAME_HEADER_LEN)?;
    Ok((decode_payload(kind, &payload, FRAME_HEADER_LEN)?, FRAME_HEADER_LEN + len))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], base: usize) -> Result<(), ProtocolError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(ProtocolError::Truncated {
                    offset: base + filled,
                    needed: buf.len() - filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindStats {
    pub count: u64,
    pub bytes: u64,
}

/// Server-side traffic counters for one round. Counters only grow.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub sent: BTreeMap<MessageKind, KindStats>,
    pub received: BTreeMap<MessageKind, KindStats>,
}

impl TransportStats {
    pub fn record_sent(&mut self, kind: MessageKind, bytes: usize) {
        self.bytes_sent += bytes as u64;
        let e = self.sent.entry(kind).or_default();
        e.count += 1;
        e.bytes += bytes as u64;
    }

    pub fn record_received(&mut self, kind: MessageKind, bytes: usize) {
        self.bytes_received += bytes as u64;
        let e = self.received.entry(kind).or_default();
        e.count += 1;
        e.bytes += bytes as u64;
    }

    pub fn sent_count(&self, kind: MessageKind) -> u64 {
        self.sent.get(&kind).map_or(0, |s| s.count)
    }

    pub fn received_count(&self, kind: MessageKind) -> u64 {
        self.received.get(&kind).map_or(0, |s| s.count)
    }

    pub fn received_bytes(&self, kind: MessageKind) -> u64 {
        self.received.get(&kind).map_or(0, |s| s.bytes)
    }

    pub fn sent_bytes(&self, kind: MessageKind) -> u64 {
        self.sent.get(&kind).map_or(0, |s| s.bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config() -> ProtocolConfig {
        ProtocolConfig {
            version: PROTOCOL_VERSION,
            gamma: 0.01,
            beta: 1.0,
            lambda: 0.3,
            d_p: 512,
            d_r: 256,
            seed_p: 11,
            seed_r: 22,
            act_p: ActivationKind::Relu,
            act_r: ActivationKind::Gelu,
            num_classes: 10,
            num_clients: 8,
            append_bias: false,
            per_client_refine_head: true,
        }
    }

    fn sym(d: usize) -> Matrix<f64> {
        Matrix::from_fn(d, d, |i, j| 1.0 / (1.0 + i as f64 + j as f64))
    }

    #[test]
    fn upload_size_is_computable() {
        let up = Upload::new(7, 3, sym(2), Matrix::from_rows(&[[1.0], [2.0]]).unwrap()).unwrap();
        let frame = encode(&Message::Upload(up));
        // client_id + A (4 f64) + G (2 f64), plus d, c and n_samples
        let payload = 4 + 8 * (4 + 2) + 4 + 4 + 8;
        assert_eq!(upload_payload_len(2, 1), payload);
        assert_eq!(frame.len(), FRAME_HEADER_LEN + payload);
        assert_eq!(&frame[..4], &(payload as u32).to_le_bytes());
        assert_eq!(frame[4], 3);
    }

    #[test]
    fn config_payload_size() {
        let frame = encode(&Message::Config(config()));
        assert_eq!(frame.len(), FRAME_HEADER_LEN + CONFIG_PAYLOAD_LEN);
    }

    #[test]
    fn empty_upload_rejected_at_construction() {
        assert!(Upload::new(1, 0, Matrix::zeros(0, 0), Matrix::zeros(0, 1)).is_err());
        assert!(Upload::new(1, 0, sym(2), Matrix::zeros(2, 0)).is_err());
        assert!(Upload::new(1, 0, sym(2), Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn flipped_tag_is_a_protocol_error() {
        let mut frame = encode(&Message::Hello { client_id: 3 });
        frame[4] = 0xee;
        assert_eq!(decode(&frame).unwrap_err(), ProtocolError::UnknownTag { tag: 0xee, offset: 4 });
        frame[4] = 0;
        assert!(matches!(decode(&frame), Err(ProtocolError::UnknownTag { .. })));
    }

    #[test]
    fn truncation_reports_offsets() {
        let frame = encode(&Message::GlobalModel { g: sym(3) });
        assert_eq!(decode(&frame[..3]).unwrap_err(), ProtocolError::Truncated { offset: 3, needed: 1 });
        let cut = frame.len() - 5;
        assert_eq!(
            decode(&frame[..cut]).unwrap_err(),
            ProtocolError::Truncated { offset: cut, needed: 5 }
        );
    }

    #[test]
    fn asymmetric_upload_fails_validation() {
        let up = Upload::new(1, 2, sym(3), Matrix::zeros(3, 2)).unwrap();
        let mut frame = encode(&Message::Upload(up));
        // A[0][1] sits right after the header, fixed fields and A[0][0]
        let at = FRAME_HEADER_LEN + UPLOAD_FIXED_LEN + 8;
        frame[at..at + 8].copy_from_slice(&5.0f64.to_le_bytes());
        match decode(&frame).unwrap_err() {
            ProtocolError::Malformed { offset, reason } => {
                assert_eq!(offset, FRAME_HEADER_LEN + UPLOAD_FIXED_LEN);
                assert!(reason.contains("asymmetric"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_and_bad_fields() {
        let mut frame = encode(&Message::Hello { client_id: 3 });
        frame.push(0);
        frame[0] += 1;
        assert!(matches!(decode(&frame), Err(ProtocolError::Malformed { .. })));

        let mut cfg = encode(&Message::Config(config()));
        cfg[FRAME_HEADER_LEN] = 9; // version
        assert!(matches!(decode(&cfg), Err(ProtocolError::Malformed { .. })));

        let mut cfg = encode(&Message::Config(config()));
        let act = FRAME_HEADER_LEN + 2 + 24 + 8 + 16;
        cfg[act] = 42;
        assert!(matches!(decode(&cfg), Err(ProtocolError::Malformed { offset, .. }) if offset == act));
    }

    #[test]
    fn stream_read_write() {
        let msgs = vec![
            Message::Hello { client_id: 1 },
            Message::Config(config()),
            Message::Error { code: 4, text: "späť".into() },
        ];
        let mut buf = Vec::new();
        let mut sizes = Vec::new();
        for m in &msgs {
            sizes.push(write_message(&mut buf, m).unwrap());
        }
        let mut cursor = buf.as_slice();
        for (m, size) in msgs.iter().zip(sizes) {
            assert_eq!(read_message(&mut cursor).unwrap(), (m.clone(), size));
        }
        assert!(matches!(read_message(&mut cursor), Err(ProtocolError::Truncated { .. })));
    }

    #[test]
    fn stats_accumulate() {
        let mut s = TransportStats::default();
        s.record_received(MessageKind::Upload, 100);
        s.record_received(MessageKind::Upload, 100);
        s.record_sent(MessageKind::GlobalModel, 50);
        assert_eq!(s.received_count(MessageKind::Upload), 2);
        assert_eq!(s.received_bytes(MessageKind::Upload), 200);
        assert_eq!(s.bytes_sent, 50);
        assert_eq!(s.sent_count(MessageKind::Hello), 0);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"upload\""));
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
        proptest::collection::vec(-1e6f64..1e6, rows * cols)
            .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let hello = any::<u32>().prop_map(|client_id| Message::Hello { client_id });
        let cfg = (any::<u64>(), any::<u64>(), 0u8..8, 0u8..8, 1u32..2048, any::<bool>(), any::<bool>()).prop_map(
            |(sp, sr, ap, ar, d, bias, per)| {
                Message::Config(ProtocolConfig {
                    seed_p: sp,
                    seed_r: sr,
                    act_p: ActivationKind::from_code(ap).unwrap(),
                    act_r: ActivationKind::from_code(ar).unwrap(),
                    d_p: d,
                    append_bias: bias,
                    per_client_refine_head: per,
                    ..config()
                })
            },
        );
        let upload = (1usize..6, 1usize..4, any::<u32>(), any::<u64>())
            .prop_flat_map(|(d, c, id, n)| (arb_matrix(d, d), arb_matrix(d, c), Just(id), Just(n)))
            .prop_map(|(a, g, id, n)| {
                let a = a.add(&a.transpose()).unwrap();
                Message::Upload(Upload::new(id, n, a, g).unwrap())
            });
        let global = (0usize..5, 0usize..5)
            .prop_flat_map(|(r, c)| arb_matrix(r, c))
            .prop_map(|g| Message::GlobalModel { g });
        let error = (any::<u16>(), ".{0,40}").prop_map(|(code, text)| Message::Error { code, text });
        prop_oneof![hello, cfg, upload, global, error]
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(msg in arb_message()) {
            let frame = encode(&msg);
            let (back, used) = decode(&frame).unwrap();
            prop_assert_eq!(used, frame.len());
            prop_assert_eq!(back, msg);
        }

        #[test]
        fn decode_never_panics_on_garbage(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode(&bytes);
        }
    }
}
