use std::path::Path;

use crate::model::{LayoutEntry, ParameterSet, TensorLayout};
use crate::protocol::ClientUpdate;

use super::TransportError;

pub const MAGIC: [u8; 4] = *b"FEDU";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
/// Frames announcing a larger payload are rejected before buffering.
pub const MAX_PAYLOAD: u64 = 1 << 30;

const T_MODEL_REQUEST: u8 = 1;
const T_MODEL_RESPONSE: u8 = 2;
const T_UPDATE_SUBMIT: u8 = 3;
const T_STAGE_ACK: u8 = 4;
const T_ERROR_REPLY: u8 = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    ModelRequest { client_id: String, num_classes: u32 },
    ModelResponse(ParameterSet),
    UpdateSubmit(ClientUpdate),
    StageAck { stage_index: u64, adopted: bool },
    ErrorReply { code: String, text: String },
}

impl Message {
    fn type_byte(&self) -> u8 {
        match self {
            Message::ModelRequest { .. } => T_MODEL_REQUEST,
            Message::ModelResponse(_) => T_MODEL_RESPONSE,
            Message::UpdateSubmit(_) => T_UPDATE_SUBMIT,
            Message::StageAck { .. } => T_STAGE_ACK,
            Message::ErrorReply { .. } => T_ERROR_REPLY,
        }
    }
}

/// Outcome of parsing a possibly incomplete byte buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// At least this many more bytes are required.
    NeedMore(usize),
    /// A message and the number of bytes it occupied.
    Complete(Message, usize),
}

fn format_err(msg: impl Into<String>) -> TransportError {
    TransportError::Format(msg.into())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), TransportError> {
    let len = u16::try_from(s.len()).map_err(|_| format_err("string longer than 65535 bytes"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Layout header followed by the values as little-endian binary64.
pub fn encode_params(p: &ParameterSet) -> Result<Vec<u8>, TransportError> {
    let entries = p.layout().entries();
    if entries.is_empty() {
        return Err(format_err("empty layout"));
    }
    let mut out = Vec::with_capacity(64 + 8 * p.len());
    let count = u32::try_from(entries.len()).map_err(|_| format_err("too many entries"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        put_str(&mut out, &e.name)?;
        let ndims = u8::try_from(e.dims.len()).map_err(|_| format_err("more than 255 dims"))?;
        out.push(ndims);
        for &d in &e.dims {
            let d = u32::try_from(d).map_err(|_| format_err("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    for v in p.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        if self.remaining() < n {
            return Err(TransportError::Truncated(format!(
                "need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], TransportError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, TransportError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TransportError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, TransportError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String, TransportError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| format_err("string is not UTF-8"))
    }

    fn params(&mut self) -> Result<ParameterSet, TransportError> {
        let count = self.u32()? as usize;
        if count == 0 {
            return Err(format_err("empty layout"));
        }
        // each entry needs at least 3 header bytes
        let mut entries = Vec::with_capacity(count.min(self.remaining() / 3));
        for _ in 0..count {
            let name = self.string()?;
            let ndims = self.u8()? as usize;
            let dims = (0..ndims).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            entries.push(LayoutEntry::new(name, dims));
        }
        let layout = TensorLayout::new(entries).map_err(|e| format_err(e.to_string()))?;
        let bytes = layout
            .total()
            .checked_mul(8)
            .ok_or_else(|| format_err("parameter count overflows"))?;
        let raw = self.take(bytes)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        ParameterSet::new(layout, values).map_err(|e| format_err(e.to_string()))
    }

    fn finish(&self) -> Result<(), TransportError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(TransportError::Truncated(format!("{n} unread bytes after payload"))),
        }
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParameterSet, TransportError> {
    let mut r = Reader::new(bytes);
    let p = r.params()?;
    r.finish()?;
    Ok(p)
}

fn encode_payload(m: &Message) -> Result<Vec<u8>, TransportError> {
    let mut out = Vec::new();
    match m {
        Message::ModelRequest { client_id, num_classes } => {
            put_str(&mut out, client_id)?;
            out.extend_from_slice(&num_classes.to_le_bytes());
        }
        Message::ModelResponse(p) => out = encode_params(p)?,
        Message::UpdateSubmit(u) => {
            put_str(&mut out, u.client_id())?;
            out.extend_from_slice(&u.num_examples().to_le_bytes());
            out.extend_from_slice(&encode_params(u.backbone())?);
        }
        Message::StageAck { stage_index, adopted } => {
            out.extend_from_slice(&stage_index.to_le_bytes());
            out.push(u8::from(*adopted));
        }
        Message::ErrorReply { code, text } => {
            put_str(&mut out, code)?;
            put_str(&mut out, text)?;
        }
    }
    Ok(out)
}

pub fn encode_frame(m: &Message) -> Result<Vec<u8>, TransportError> {
    let payload = encode_payload(m)?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(m.type_byte());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Message, TransportError> {
    let mut r = Reader::new(payload);
    let m = match msg_type {
        T_MODEL_REQUEST => Message::ModelRequest { client_id: r.string()?, num_classes: r.u32()? },
        T_MODEL_RESPONSE => Message::ModelResponse(r.params()?),
        T_UPDATE_SUBMIT => {
            let client_id = r.string()?;
            let num_examples = r.u64()?;
            let params = r.params()?;
            let u = ClientUpdate::new(client_id, params, num_examples)
                .map_err(|e| format_err(e.to_string()))?;
            Message::UpdateSubmit(u)
        }
        T_STAGE_ACK => {
            let stage_index = r.u64()?;
            let adopted = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(format_err(format!("adopted flag {b} is not 0 or 1"))),
            };
            Message::StageAck { stage_index, adopted }
        }
        T_ERROR_REPLY => Message::ErrorReply { code: r.string()?, text: r.string()? },
        other => return Err(TransportError::Unsupported(format!("message type {other}"))),
    };
    r.finish()?;
    Ok(m)
}

/// Parses one frame from the front of `bytes`.
///
/// A prefix of a valid frame yields [`Decoded::NeedMore`]; anything that can
/// no longer become a valid frame is an error.
pub fn decode_frame(bytes: &[u8]) -> Result<Decoded, TransportError> {
    let seen = bytes.len().min(MAGIC.len());
    if bytes[..seen] != MAGIC[..seen] {
        return Err(TransportError::Protocol("bad magic".into()));
    }
    if let Some(&v) = bytes.get(4) {
        if v != VERSION {
            return Err(TransportError::Unsupported(format!("version {v}")));
        }
    }
    if let Some(&t) = bytes.get(5) {
        if !(T_MODEL_REQUEST..=T_ERROR_REPLY).contains(&t) {
            return Err(TransportError::Unsupported(format!("message type {t}")));
        }
    }
    if bytes.len() < HEADER_LEN {
        return Ok(Decoded::NeedMore(HEADER_LEN - bytes.len()));
    }
    let len = u64::from_le_bytes(bytes[6..HEADER_LEN].try_into().expect("8 bytes"));
    if len > MAX_PAYLOAD {
        return Err(TransportError::Unsupported(format!("payload of {len} bytes")));
    }
    let end = HEADER_LEN + len as usize;
    if bytes.len() < end {
        return Ok(Decoded::NeedMore(end - bytes.len()));
    }
    let msg = decode_payload(bytes[5], &bytes[HEADER_LEN..end])?;
    Ok(Decoded::Complete(msg, end))
}

pub fn write_checkpoint(path: &Path, p: &ParameterSet) -> Result<(), TransportError> {
    let bytes = encode_frame(&Message::ModelResponse(p.clone()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterSet, TransportError> {
    let bytes = std::fs::read(path)?;
    match decode_frame(&bytes)? {
        Decoded::Complete(Message::ModelResponse(p), used) if used == bytes.len() => Ok(p),
        Decoded::Complete(_, used) if used != bytes.len() => {
            Err(format_err("trailing bytes after checkpoint frame"))
        }
        Decoded::Complete(..) => Err(format_err("checkpoint frame is not a model")),
        Decoded::NeedMore(n) => Err(TransportError::Truncated(format!("checkpoint is {n} bytes short"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attach_head, init_model, ModelArchitecture};

    fn w12() -> ParameterSet {
        let l = TensorLayout::new(vec![LayoutEntry::new("w", vec![2])]).unwrap();
        ParameterSet::new(l, vec![1.0, 2.0]).unwrap()
    }

    #[test]
    fn golden_params_bytes() {
        let expected: Vec<u8> = vec![
            0x01, 0x00, 0x00, 0x00, 0x01, 0x00, 0x77, 0x01, 0x02, 0x00, 0x00, 0x00, //
            0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF0, 0x3F, //
            0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x40,
        ];
        assert_eq!(encode_params(&w12()).unwrap(), expected);
        assert_eq!(decode_params(&expected).unwrap(), w12());
    }

    fn all_variants() -> Vec<Message> {
        let arch = ModelArchitecture::backbone(2, 4, 3, 5).unwrap();
        let b = init_model(&arch, 4);
        vec![
            Message::ModelRequest { client_id: "hospital-ü".into(), num_classes: 7 },
            Message::ModelResponse(attach_head(&b, 3, 1).unwrap()),
            Message::UpdateSubmit(ClientUpdate::new("c1", b, 1234).unwrap()),
            Message::StageAck { stage_index: 9, adopted: true },
            Message::StageAck { stage_index: 0, adopted: false },
            Message::ErrorReply { code: "stage-overflow".into(), text: "".into() },
        ]
    }

    #[test]
    fn every_variant_round_trips() {
        for m in all_variants() {
            let bytes = encode_frame(&m).unwrap();
            assert_eq!(decode_frame(&bytes).unwrap(), Decoded::Complete(m, bytes.len()));
        }
    }

    #[test]
    fn every_prefix_needs_more() {
        for m in all_variants() {
            let bytes = encode_frame(&m).unwrap();
            for cut in 0..bytes.len() {
                assert!(matches!(decode_frame(&bytes[..cut]), Ok(Decoded::NeedMore(_))), "cut {cut}");
            }
        }
    }

    #[test]
    fn header_errors() {
        assert!(matches!(decode_frame(b"XXXX\x01\x01"), Err(TransportError::Protocol(_))));
        assert!(matches!(decode_frame(b"FEDU\x02"), Err(TransportError::Unsupported(_))));
        assert!(matches!(decode_frame(b"FEDU\x01\x09"), Err(TransportError::Unsupported(_))));
        let mut huge = b"FEDU\x01\x02".to_vec();
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_frame(&huge), Err(TransportError::Unsupported(_))));
    }

    #[test]
    fn partial_payload_is_streaming_not_error() {
        let mut bytes = b"FEDU\x01\x02".to_vec();
        bytes.extend_from_slice(&100u64.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 50]);
        assert_eq!(decode_frame(&bytes).unwrap(), Decoded::NeedMore(50));
    }

    #[test]
    fn payload_length_mismatch_is_truncation() {
        let mut frame = encode_frame(&Message::StageAck { stage_index: 3, adopted: true }).unwrap();
        // declare one byte less than the payload actually needs
        frame[6] -= 1;
        frame.pop();
        assert!(matches!(decode_frame(&frame), Err(TransportError::Truncated(_))));
        let mut long = encode_frame(&Message::StageAck { stage_index: 3, adopted: true }).unwrap();
        long[6] += 1;
        long.push(0);
        assert!(matches!(decode_frame(&long), Err(TransportError::Truncated(_))));
    }

    #[test]
    fn non_finite_values_rejected() {
        let mut bytes = encode_params(&w12()).unwrap();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_params(&bytes), Err(TransportError::Format(_))));
    }

    #[test]
    fn bad_layouts_rejected_on_decode() {
        assert!(decode_params(&[0, 0, 0, 0]).is_err());
        // duplicate names
        let mut b = vec![2, 0, 0, 0];
        for _ in 0..2 {
            b.extend_from_slice(&[1, 0, b'w', 1, 1, 0, 0, 0]);
        }
        b.extend_from_slice(&[0u8; 16]);
        assert!(matches!(decode_params(&b), Err(TransportError::Format(_))));
    }

    #[test]
    fn headed_update_rejected() {
        let arch = ModelArchitecture::backbone(2, 4, 3, 5).unwrap();
        let headed = attach_head(&init_model(&arch, 0), 2, 0).unwrap();
        let mut payload = Vec::new();
        put_str(&mut payload, "c").unwrap();
        payload.extend_from_slice(&5u64.to_le_bytes());
        payload.extend_from_slice(&encode_params(&headed).unwrap());
        assert!(matches!(decode_payload(T_UPDATE_SUBMIT, &payload), Err(TransportError::Format(_))));
    }

    #[test]
    fn two_frames_back_to_back() {
        let a = Message::StageAck { stage_index: 1, adopted: true };
        let b = Message::ErrorReply { code: "x".into(), text: "y".into() };
        let mut bytes = encode_frame(&a).unwrap();
        let first = bytes.len();
        bytes.extend(encode_frame(&b).unwrap());
        assert_eq!(decode_frame(&bytes).unwrap(), Decoded::Complete(a, first));
        assert!(matches!(decode_frame(&bytes[first..]).unwrap(), Decoded::Complete(m, _) if m == b));
    }
}
