//! Binary wire protocol and the single-round coordinator service.
//!
//! Frame layout, fixed across implementations:
//!
//! | bytes | field       | encoding                          |
//! |-------|-------------|-----------------------------------|
//! | 0..4  | magic       | `"FDW1"`                          |
//! | 4     | msg_type    | 0x01 update, 0x02 weights, 0x03 ack, 0x7F error |
//! | 5..13 | payload_len | u64 little-endian                 |
//! | 13..  | payload     | `payload_len` bytes               |
//!
//! Update payload: `num_classes` u32 LE, `num_features` u32 LE, then per
//! class: `rank` u32 LE, the `U S` product as `rank * num_features` f64 LE
//! values column-major, and the `m` vector as `num_features` f64 LE values.
//!
//! Weights payload: `num_classes` u32 LE, `num_features` u32 LE,
//! activation kind u8 (0x01 logistic), `epsilon_clip` f64 LE, `lambda`
//! f64 LE, then the weight matrix as `num_features * num_classes` f64 LE
//! values column-major.
//!
//! The service runs exactly one round: the coordinator accepts updates
//! until the expected quorum is reached, folds each on arrival, then
//! solves and broadcasts one weights frame to every waiting client. An
//! ack frame confirms an update was decoded and queued; a later error
//! frame can still reject it (for example on a shape mismatch against
//! the aggregate).

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;

use ndarray::{Array1, Array2};

use crate::activation::{ActivationKind, ActivationSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    fit_client, solve_weights, AggregateState, ClientUpdate, DataBatch, ModelWeights,
    OutputFactor,
};

pub const MAGIC: [u8; 4] = *b"FDW1";
pub const FRAME_HEADER_LEN: usize = 13;

pub const MSG_UPDATE: u8 = 0x01;
pub const MSG_WEIGHTS: u8 = 0x02;
pub const MSG_ACK: u8 = 0x03;
pub const MSG_ERROR: u8 = 0x7F;

/// Upper bound on accepted payloads; anything larger is rejected before
/// any allocation happens.
pub const MAX_PAYLOAD_LEN: u64 = 1 << 30;

const ACT_KIND_LOGISTIC: u8 = 0x01;

// ---------------------------------------------------------------------
// Payload codecs
// ---------------------------------------------------------------------

/// Exact payload size of an encoded update.
pub fn update_payload_len(num_classes: usize, num_features: usize, ranks: &[usize]) -> usize {
    8 + ranks
        .iter()
        .map(|&r| 4 + 8 * num_features * (r + 1))
        .sum::<usize>()
        + (num_classes - ranks.len()) * 0
}

/// Exact on-the-wire size of an update frame, header included.
pub fn update_frame_len(num_classes: usize, num_features: usize, ranks: &[usize]) -> usize {
    FRAME_HEADER_LEN + update_payload_len(num_classes, num_features, ranks)
}

pub fn encode_update(update: &ClientUpdate) -> Vec<u8> {
    let ranks: Vec<usize> = update.per_output().iter().map(|f| f.us.ncols()).collect();
    let mut out =
        Vec::with_capacity(update_payload_len(update.num_outputs(), update.num_features(), &ranks));
    out.extend_from_slice(&(update.num_outputs() as u32).to_le_bytes());
    out.extend_from_slice(&(update.num_features() as u32).to_le_bytes());
    for factor in update.per_output() {
        out.extend_from_slice(&(factor.us.ncols() as u32).to_le_bytes());
        for col in factor.us.columns() {
            for &v in col.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &v in factor.m_vec.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, offset: 0 }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(len).ok_or_else(|| {
            Error::protocol(self.offset as u64, format!("{what}: length overflow"))
        })?;
        if end > self.buf.len() {
            return Err(Error::protocol(
                self.offset as u64,
                format!(
                    "{what}: need {len} bytes but only {} remain",
                    self.buf.len() - self.offset
                ),
            ));
        }
        let slice = &self.buf[self.offset..end];
        self.offset = end;
        Ok(slice)
    }

    fn take_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn take_f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn take_f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        // bounds-check the whole block before allocating for it
        let bytes = count.checked_mul(8).ok_or_else(|| {
            Error::protocol(self.offset as u64, format!("{what}: length overflow"))
        })?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.buf.len() {
            return Err(Error::protocol(
                self.offset as u64,
                format!("{} trailing bytes after payload", self.buf.len() - self.offset),
            ));
        }
        Ok(())
    }
}

pub fn decode_update(payload: &[u8]) -> Result<ClientUpdate> {
    let mut cur = Cursor::new(payload);
    let num_classes = cur.take_u32("num_classes")? as usize;
    let num_features = cur.take_u32("num_features")? as usize;
    if num_classes == 0 {
        return Err(Error::protocol(0, "update declares zero classes"));
    }
    if num_features == 0 {
        return Err(Error::protocol(4, "update declares zero features"));
    }
    let mut per_output = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let rank_offset = cur.offset as u64;
        let rank = cur.take_u32("rank")? as usize;
        if rank > num_features {
            return Err(Error::protocol(
                rank_offset,
                format!("rank {rank} exceeds num_features {num_features}"),
            ));
        }
        let us_values = cur.take_f64s(rank * num_features, "us matrix")?;
        let us = Array2::from_shape_vec((num_features, rank), us_values)
            .expect("shape checked")
            // stored column-major on the wire, shape_vec fills row-major
            .reversed_axes()
            .t()
            .to_owned();
        let m_values = cur.take_f64s(num_features, "m vector")?;
        per_output.push(OutputFactor {
            us,
            m_vec: Array1::from_vec(m_values),
        });
    }
    cur.finish()?;
    ClientUpdate::new(per_output, None)
}

pub fn encode_weights(weights: &ModelWeights) -> Vec<u8> {
    let w = weights.weights();
    let mut out = Vec::with_capacity(4 + 4 + 1 + 8 + 8 + 8 * w.len());
    out.extend_from_slice(&(w.ncols() as u32).to_le_bytes());
    out.extend_from_slice(&(w.nrows() as u32).to_le_bytes());
    out.push(match weights.activation().kind() {
        ActivationKind::Logistic => ACT_KIND_LOGISTIC,
    });
    out.extend_from_slice(&weights.activation().epsilon_clip().to_le_bytes());
    out.extend_from_slice(&weights.lambda_used().to_le_bytes());
    for col in w.columns() {
        for &v in col.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(payload: &[u8]) -> Result<ModelWeights> {
    let mut cur = Cursor::new(payload);
    let num_classes = cur.take_u32("num_classes")? as usize;
    let num_features = cur.take_u32("num_features")? as usize;
    let kind_offset = cur.offset as u64;
    let kind = match cur.take(1, "activation kind")?[0] {
        ACT_KIND_LOGISTIC => ActivationKind::Logistic,
        other => {
            return Err(Error::protocol(
                kind_offset,
                format!("unknown activation kind {other:#04x}"),
            ))
        }
    };
    let epsilon_clip = cur.take_f64("epsilon_clip")?;
    let lambda = cur.take_f64("lambda")?;
    let values = cur.take_f64s(num_features * num_classes, "weight matrix")?;
    cur.finish()?;
    let w = Array2::from_shape_vec((num_classes, num_features), values)
        .expect("shape checked")
        .reversed_axes();
    let act = ActivationSpec::new(kind, epsilon_clip)?;
    ModelWeights::new(w, act, lambda)
}

// ---------------------------------------------------------------------
// Framing
// ---------------------------------------------------------------------

/// A full frame ready to hit the wire.
pub fn frame_bytes(msg_type: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(msg_type);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

fn validate_header(header: &[u8; FRAME_HEADER_LEN]) -> Result<(u8, u64)> {
    if header[..4] != MAGIC {
        return Err(Error::protocol(0, "bad magic"));
    }
    let msg_type = header[4];
    if !matches!(msg_type, MSG_UPDATE | MSG_WEIGHTS | MSG_ACK | MSG_ERROR) {
        return Err(Error::protocol(
            4,
            format!("unknown message type {msg_type:#04x}"),
        ));
    }
    let payload_len = u64::from_le_bytes(header[5..13].try_into().unwrap());
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(Error::protocol(
            5,
            format!("payload length {payload_len} exceeds limit {MAX_PAYLOAD_LEN}"),
        ));
    }
    Ok((msg_type, payload_len))
}

/// Parses one frame out of a byte buffer. The declared payload length is
/// validated against the buffer before anything is copied.
pub fn parse_frame(buf: &[u8]) -> Result<(u8, &[u8])> {
    if buf.len() < FRAME_HEADER_LEN {
        return Err(Error::protocol(
            0,
            format!("buffer of {} bytes is shorter than a frame header", buf.len()),
        ));
    }
    let header: [u8; FRAME_HEADER_LEN] = buf[..FRAME_HEADER_LEN].try_into().unwrap();
    let (msg_type, payload_len) = validate_header(&header)?;
    let total = FRAME_HEADER_LEN as u64 + payload_len;
    if (buf.len() as u64) < total {
        return Err(Error::protocol(
            5,
            format!(
                "declared payload of {payload_len} bytes exceeds the {} available",
                buf.len() - FRAME_HEADER_LEN
            ),
        ));
    }
    Ok((msg_type, &buf[FRAME_HEADER_LEN..total as usize]))
}

/// Reads one frame off a stream. Magic and message type are checked
/// before the payload is read.
pub fn read_frame(stream: &mut impl Read) -> Result<(u8, Vec<u8>)> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    stream.read_exact(&mut header).map_err(Error::Transport)?;
    let (msg_type, payload_len) = validate_header(&header)?;
    let mut payload = vec![0u8; payload_len as usize];
    stream.read_exact(&mut payload).map_err(Error::Transport)?;
    Ok((msg_type, payload))
}

pub fn write_frame(stream: &mut impl Write, msg_type: u8, payload: &[u8]) -> Result<()> {
    stream
        .write_all(&frame_bytes(msg_type, payload))
        .map_err(Error::Transport)
}

// ---------------------------------------------------------------------
// Coordinator service
// ---------------------------------------------------------------------

type Reply = std::result::Result<Arc<Vec<u8>>, String>;

/// A bound, not-yet-running coordinator. Splitting bind from run lets
/// callers learn the ephemeral port before clients connect.
pub struct Coordinator {
    listener: TcpListener,
    expected_clients: usize,
    lambda: f64,
    act: ActivationSpec,
}

impl Coordinator {
    pub fn bind(
        addr: &str,
        expected_clients: usize,
        lambda: f64,
        act: ActivationSpec,
    ) -> Result<Self> {
        if expected_clients == 0 {
            return Err(Error::Argument("expected at least one client".into()));
        }
        if lambda < 0.0 {
            return Err(Error::Argument(format!(
                "lambda must be non-negative, got {lambda}"
            )));
        }
        let listener = TcpListener::bind(addr).map_err(Error::Transport)?;
        Ok(Self {
            listener,
            expected_clients,
            lambda,
            act,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.listener.local_addr().map_err(Error::Transport)
    }

    /// Accepts connections until the quorum of valid updates has been
    /// incorporated, then solves and broadcasts the weights to every
    /// client still waiting. Malformed or mismatched updates receive an
    /// error frame and do not count toward the quorum.
    pub fn run(self) -> Result<ModelWeights> {
        let local_addr = self.local_addr()?;
        let done = Arc::new(AtomicBool::new(false));
        let (update_tx, update_rx) = mpsc::channel::<(ClientUpdate, mpsc::Sender<Reply>)>();

        let acceptor = {
            let done = done.clone();
            let listener = self.listener;
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if done.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let tx = update_tx.clone();
                    thread::spawn(move || handle_connection(stream, tx));
                }
            })
        };

        let mut state = AggregateState::empty();
        let mut waiting: Vec<mpsc::Sender<Reply>> = Vec::new();
        while waiting.len() < self.expected_clients {
            let (update, reply_tx) = update_rx
                .recv()
                .map_err(|_| Error::Remote("all update senders disconnected".into()))?;
            match state.incorporate(&update) {
                Ok(()) => waiting.push(reply_tx),
                Err(e) => {
                    let _ = reply_tx.send(Err(e.to_string()));
                }
            }
        }
        done.store(true, Ordering::SeqCst);
        drop(update_rx); // late updates now fail fast with an error frame
        let _ = TcpStream::connect(local_addr); // wake the acceptor

        let weights = solve_weights(&state, self.lambda, &self.act)?;
        let broadcast = Arc::new(frame_bytes(MSG_WEIGHTS, &encode_weights(&weights)));
        for reply_tx in waiting {
            let _ = reply_tx.send(Ok(broadcast.clone()));
        }
        let _ = acceptor.join();
        Ok(weights)
    }
}

fn handle_connection(mut stream: TcpStream, update_tx: mpsc::Sender<(ClientUpdate, mpsc::Sender<Reply>)>) {
    let send_error = |stream: &mut TcpStream, message: &str| {
        let _ = write_frame(stream, MSG_ERROR, message.as_bytes());
    };

    let update = match read_frame(&mut stream) {
        Ok((MSG_UPDATE, payload)) => match decode_update(&payload) {
            Ok(update) => update,
            Err(e) => return send_error(&mut stream, &e.to_string()),
        },
        Ok((other, _)) => {
            return send_error(&mut stream, &format!("expected an update frame, got {other:#04x}"))
        }
        Err(e) => return send_error(&mut stream, &e.to_string()),
    };

    let (reply_tx, reply_rx) = mpsc::channel();
    if update_tx.send((update, reply_tx)).is_err() {
        return send_error(&mut stream, "round already complete");
    }
    let _ = write_frame(&mut stream, MSG_ACK, &[]);
    match reply_rx.recv() {
        Ok(Ok(frame)) => {
            let _ = stream.write_all(&frame);
        }
        Ok(Err(message)) => send_error(&mut stream, &message),
        Err(_) => send_error(&mut stream, "coordinator stopped before broadcasting"),
    }
}

/// Binds, runs one round, returns the solved weights.
pub fn serve_coordinator(
    addr: &str,
    expected_clients: usize,
    lambda: f64,
    act: ActivationSpec,
) -> Result<ModelWeights> {
    Coordinator::bind(addr, expected_clients, lambda, act)?.run()
}

/// Fits a local shard, ships the update, and blocks until the global
/// weights arrive. The shard is validated before any network activity.
pub fn run_client_agent(
    addr: &str,
    shard: &Dataset,
    act: &ActivationSpec,
) -> Result<ModelWeights> {
    if shard.num_samples() == 0 {
        return Err(Error::Argument("shard contains zero samples".into()));
    }
    let (low, high) = act.encoding_bounds();
    let targets = crate::data::encode_targets(shard.labels(), shard.num_classes(), low, high)?;
    let batch = DataBatch::new(shard.features().view(), targets)?;
    let update = fit_client(&batch, act)?;
    exchange_update(addr, &update)
}

/// Sends one already-computed update and waits for the weights broadcast.
pub fn exchange_update(addr: &str, update: &ClientUpdate) -> Result<ModelWeights> {
    let mut stream = TcpStream::connect(addr).map_err(Error::Transport)?;
    stream
        .write_all(&frame_bytes(MSG_UPDATE, &encode_update(update)))
        .map_err(Error::Transport)?;

    match read_frame(&mut stream)? {
        (MSG_ACK, _) => {}
        (MSG_ERROR, payload) => {
            return Err(Error::Remote(String::from_utf8_lossy(&payload).into_owned()))
        }
        (other, _) => {
            return Err(Error::protocol(
                4,
                format!("expected ack, got message type {other:#04x}"),
            ))
        }
    }
    match read_frame(&mut stream)? {
        (MSG_WEIGHTS, payload) => decode_weights(&payload),
        (MSG_ERROR, payload) => Err(Error::Remote(
            String::from_utf8_lossy(&payload).into_owned(),
        )),
        (other, _) => Err(Error::protocol(
            4,
            format!("expected weights, got message type {other:#04x}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn sample_update() -> ClientUpdate {
        ClientUpdate::new(
            vec![OutputFactor {
                us: arr2(&[[1.5], [-2.0]]),
                m_vec: arr1(&[0.25, 3.0]),
            }],
            Some(4),
        )
        .unwrap()
    }

    #[test]
    fn golden_update_bytes() {
        let payload = encode_update(&sample_update());
        #[rustfmt::skip]
        let expected: Vec<u8> = vec![
            0x01, 0x00, 0x00, 0x00,                         // num_classes = 1
            0x02, 0x00, 0x00, 0x00,                         // num_features = 2
            0x01, 0x00, 0x00, 0x00,                         // rank = 1
            0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF8, 0x3F, // us[0,0] = 1.5
            0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xC0, // us[1,0] = -2.0
            0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xD0, 0x3F, // m[0] = 0.25
            0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x08, 0x40, // m[1] = 3.0
        ];
        assert_eq!(payload, expected);
        assert_eq!(payload.len(), update_payload_len(1, 2, &[1]));
    }

    #[test]
    fn update_round_trip_is_bit_exact() {
        let update = sample_update();
        let decoded = decode_update(&encode_update(&update)).unwrap();
        assert_eq!(decoded.per_output(), update.per_output());
        assert_eq!(decoded.sample_count(), None);
    }

    #[test]
    fn empty_rank_payload_size() {
        let update = ClientUpdate::new(
            vec![
                OutputFactor {
                    us: Array2::zeros((3, 0)),
                    m_vec: arr1(&[1.0, 2.0, 3.0]),
                },
                OutputFactor {
                    us: Array2::zeros((3, 0)),
                    m_vec: arr1(&[4.0, 5.0, 6.0]),
                },
            ],
            None,
        )
        .unwrap();
        let payload = encode_update(&update);
        // 8 + c * (4 + 8 * num_features)
        assert_eq!(payload.len(), 8 + 2 * (4 + 8 * 3));
        let decoded = decode_update(&payload).unwrap();
        assert_eq!(decoded.per_output()[1].m_vec, arr1(&[4.0, 5.0, 6.0]));
    }

    #[test]
    fn truncated_payload_rejected_with_offset() {
        let payload = encode_update(&sample_update());
        let err = decode_update(&payload[..payload.len() - 3]).unwrap_err();
        match err {
            Error::Protocol { offset, .. } => assert!(offset > 0),
            other => panic!("expected protocol error, got {other}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut payload = encode_update(&sample_update());
        payload.push(0);
        assert!(matches!(
            decode_update(&payload),
            Err(Error::Protocol { .. })
        ));
    }

    #[test]
    fn rank_beyond_features_rejected() {
        let mut payload = encode_update(&sample_update());
        payload[8] = 0xFF; // rank = 255 > num_features = 2
        assert!(matches!(
            decode_update(&payload),
            Err(Error::Protocol { offset: 8, .. })
        ));
    }

    #[test]
    fn frame_magic_and_type_checked_before_payload" () {
        let good = frame_bytes(MSG_ACK, &[]);
        assert_eq!(parse_frame(&good).unwrap(), (MSG_ACK, &[][..]));

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            parse_frame(&bad_magic),
            Err(Error::Protocol { offset: 0, .. })
        ));

        let mut bad_type = good.clone();
        bad_type[4] = 0x42;
        assert!(matches!(
            parse_frame(&bad_type),
            Err(Error::Protocol { offset: 4, .. })
        ));
    }

    #[test]
    fn oversized_declared_payload_rejected() {
        let mut frame = frame_bytes(MSG_UPDATE, &[1, 2, 3]);
        // claim a payload far past the end of the buffer
        frame[5..13].copy_from_slice(&100u64.to_le_bytes());
        assert!(matches!(
            parse_frame(&frame),
            Err(Error::Protocol { offset: 5, .. })
        ));
        frame[5..13].copy_from_slice(&(MAX_PAYLOAD_LEN + 1).to_le_bytes());
        assert!(matches!(
            parse_frame(&frame),
            Err(Error::Protocol { offset: 5, .. })
        ));
    }

    #[test]
    fn golden_weights_round_trip() {
        let act = ActivationSpec::logistic();
        let weights = ModelWeights::new(arr2(&[[0.5, 1.0], [-1.0, 2.0]]), act, 1e-3).unwrap();
        let payload = encode_weights(&weights);
        assert_eq!(payload.len(), 4 + 4 + 1 + 8 + 8 + 8 * 4);
        let decoded = decode_weights(&payload).unwrap();
        assert_eq!(decoded.weights(), weights.weights());
        assert_eq!(decoded.lambda_used(), 1e-3);
        assert_eq!(decoded.activation(), weights.activation());
    }
}
