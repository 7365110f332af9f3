//! Binary weight persistence.
//!
//! Format (all integers and floats little-endian):
//!
//! ```text
//! magic "DINOQ1" | version 0x01 |
//!   per layer (conv1, conv2, conv3, dense1, dense_out):
//!     u32 dim count | u32 dims[] | f32 weights[] | f32 biases[]
//! ```
//!
//! Conv weight dims are `[filters, kernel, kernel, in_channels]`, dense dims
//! `[inputs, outputs]`; the bias length is the filter or output count. The
//! stride pattern (4, 2, 1) and the 80x80 input raster are fixed for every
//! persisted network, so a file fully determines its architecture. Round
//! trips are bitwise identities.

use super::{ConvSpec, NetConfig, NnError, QNetwork};
use std::path::Path;

pub(crate) const WEIGHTS_MAGIC: &[u8; 6] = b"DINOQ1";
pub(crate) const WEIGHTS_VERSION: u8 = 0x01;

/// Stride per conv stage of every persisted architecture.
const PERSISTED_STRIDES: [usize; 3] = [4, 2, 1];
const PERSISTED_INPUT: usize = crate::raster::FRAME_WIDTH;

/// Byte parser that tracks its offset so format errors can point at the
/// first bad byte.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn error(&self, msg: impl Into<String>) -> NnError {
        NnError::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Format {
                offset: self.buf.len(),
                msg: format!(
                    "unexpected end of data: need {} bytes at offset {}",
                    n, self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32_le(&mut self) -> Result<u32, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64_le(&mut self) -> Result<u64, NnError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64_le(&mut self) -> Result<f64, NnError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32_vec(&mut self, len: usize) -> Result<Vec<f32>, NnError> {
        let b = self.take(len * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Checks a magic preamble, reporting the error at its starting offset.
    pub(crate) fn expect_magic(&mut self, magic: &[u8]) -> Result<(), NnError> {
        let at = self.pos;
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(NnError::Format {
                offset: at,
                msg: format!("bad magic: expected {:?}", String::from_utf8_lossy(magic)),
            });
        }
        Ok(())
    }
}

pub(crate) fn push_u32_le(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_u64_le(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f64_le(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f32_slice(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the weights of an f32 network into the blob format.
pub(crate) fn weights_blob(net: &QNetwork<f32>) -> Result<Vec<u8>, NnError> {
    if net.config().convs.len() != PERSISTED_STRIDES.len() {
        return Err(NnError::InvalidConfig(
            "persistence covers the three-conv architecture family".into(),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.push(WEIGHTS_VERSION);
    let params = net.params();
    for pair in params.chunks_exact(2) {
        let (w, b) = (pair[0], pair[1]);
        push_u32_le(&mut out, w.shape().len() as u32);
        for &d in w.shape() {
            push_u32_le(&mut out, d as u32);
        }
        push_f32_slice(&mut out, w.data());
        push_f32_slice(&mut out, b.data());
    }
    Ok(out)
}

/// Parse one weight blob, reconstructing the architecture from the stored
/// dims. Leaves the reader positioned after the blob.
pub(crate) fn weights_from_reader(r: &mut ByteReader<'_>) -> Result<QNetwork<f32>, NnError> {
    r.expect_magic(WEIGHTS_MAGIC)?;
    let version = r.u8()?;
    if version != WEIGHTS_VERSION {
        return Err(NnError::Format {
            offset: r.offset() - 1,
            msg: format!("unsupported version {version}"),
        });
    }

    struct RawLayer {
        dims: Vec<usize>,
        w: Vec<f32>,
        b: Vec<f32>,
    }
    let mut layers = Vec::with_capacity(5);
    for li in 0..5 {
        let ndims = r.u32_le()? as usize;
        let expect_dims = if li < 3 { 4 } else { 2 };
        if ndims != expect_dims {
            return Err(NnError::Format {
                offset: r.offset() - 4,
                msg: format!("layer {li}: expected {expect_dims} dims, found {ndims}"),
            });
        }
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u32_le()? as usize);
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(r.error(format!("layer {li}: zero dimension in {dims:?}")));
        }
        let w_len: usize = dims.iter().product();
        let b_len = if li < 3 { dims[0] } else { dims[1] };
        let w = r.f32_vec(w_len)?;
        let b = r.f32_vec(b_len)?;
        layers.push(RawLayer { dims, w, b });
    }

    let convs: Vec<ConvSpec> = layers[..3]
        .iter()
        .zip(PERSISTED_STRIDES)
        .map(|(l, stride)| ConvSpec {
            filters: l.dims[0],
            kernel: l.dims[1],
            stride,
        })
        .collect();
    for (i, l) in layers[..3].iter().enumerate() {
        if l.dims[1] != l.dims[2] {
            return Err(r.error(format!("conv{}: non-square kernel {:?}", i + 1, l.dims)));
        }
    }
    let cfg = NetConfig {
        input_h: PERSISTED_INPUT,
        input_w: PERSISTED_INPUT,
        input_c: layers[0].dims[3],
        convs,
        hidden: layers[3].dims[1],
        outputs: layers[4].dims[1],
    };

    // Chain consistency: stored channel counts and the dense fan-in must
    // match the shape arithmetic of the reconstructed config.
    let flat = cfg
        .flatten_len()
        .map_err(|e| r.error(format!("inconsistent architecture: {e}")))?;
    if layers[1].dims[3] != cfg.convs[0].filters
        || layers[2].dims[3] != cfg.convs[1].filters
        || layers[3].dims[0] != flat
        || layers[4].dims[0] != cfg.hidden
    {
        return Err(r.error("layer dims do not chain into a consistent architecture"));
    }

    let mut net = QNetwork::<f32>::zeros(cfg)?;
    {
        let mut params = net.params_mut();
        for (li, layer) in layers.into_iter().enumerate() {
            params[2 * li].data_mut().copy_from_slice(&layer.w);
            params[2 * li + 1].data_mut().copy_from_slice(&layer.b);
        }
    }
    Ok(net)
}

/// Write the network's weights to `path` in the binary format above.
pub fn save_weights(net: &QNetwork<f32>, path: &Path) -> Result<(), NnError> {
    let blob = weights_blob(net)?;
    std::fs::write(path, blob)?;
    Ok(())
}

/// Load a network from a weight file; the exact inverse of [`save_weights`].
pub fn load_weights(path: &Path) -> Result<QNetwork<f32>, NnError> {
    let buf = std::fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    let net = weights_from_reader(&mut r)?;
    if !r.is_empty() {
        return Err(r.error("trailing data after weights"));
    }
    Ok(net)
}
