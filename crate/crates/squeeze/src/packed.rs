//! Mixed-precision packed layer storage and the S10P model format.
//!
//! ## S10P layout
//!
//! ```text
//! magic "S10P" (4 bytes) | version u16 LE | layer_count u32 LE
//! per layer:
//!   name        u16 LE length + UTF-8 bytes
//!   d_out       u32 LE
//!   d_in        u32 LE
//!   flags       u8    bit0: scaled_sign, bit1: per-layer params,
//!                     bit2: general supervision (0 = fias)
//!   ratio       f32 LE
//!   lambda      f32 LE
//!   mask        ceil(d_out·d_in / 8) bytes, row-major, MSB-first,
//!               1 = salient (k-bit code), 0 = binarized (sign bit)
//!   row_params  d_out × { s: f32 LE, z: u8, k: u8 }
//!   row_alpha   d_out × f32 LE
//!   codes4      nibble stream, low nibble of each byte first; one nibble
//!               per salient code for k ≤ 4, two (low, high) for k in 5..8
//!   signs       ceil(n_binarized / 8) bytes, MSB-first, −1→0 / +1→1
//! ```
//!
//! Trailing pad bits and pad nibbles are zero, so identical inputs always
//! serialize to identical bytes.

use std::fs;
use std::path::Path;

use crate::config::SupervisionMode;
use crate::error::{Error, Result};
use crate::quant::{dequantize_value, BinParams, BinarizeMode, QuantParams};
use crate::tensor::{write_atomic, Tensor};

pub const S10P_MAGIC: &[u8; 4] = b"S10P";
pub const S10P_VERSION: u16 = 1;

/// Per-weight storage bits, split into the quantities the budget analysis
/// tracks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BitBudget {
    /// Code payload only: (1·n_binarized + Σ_salient k) / n_total.
    pub payload_bits: f64,
    /// Payload + 1 mask bit + per-row parameter overhead amortized over all
    /// weights.
    pub total_bits: f64,
}

/// The run settings a packed layer was produced under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfigEcho {
    pub ratio: f32,
    pub lambda: f32,
    pub supervision: SupervisionMode,
}

/// One quantized layer: a salience bitmask choosing between the k-bit code
/// plane and the sign plane, plus per-row parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
    /// Row-major, true = salient.
    pub mask: Vec<bool>,
    /// k-bit codes for salient positions, row-major order.
    pub codes: Vec<u8>,
    /// Sign codes (±1) for binarized positions, row-major order.
    pub signs: Vec<i8>,
    pub row_params: Vec<QuantParams>,
    pub row_bin: Vec<BinParams>,
    pub per_layer_params: bool,
    pub echo: ConfigEcho,
}

/// Assemble and validate a packed layer from its planes.
#[allow(clippy::too_many_arguments)]
pub fn pack_mixed(
    name: impl Into<String>,
    d_out: usize,
    d_in: usize,
    mask: Vec<bool>,
    codes: Vec<u8>,
    signs: Vec<i8>,
    row_params: Vec<QuantParams>,
    row_bin: Vec<BinParams>,
    per_layer_params: bool,
    echo: ConfigEcho,
) -> Result<PackedLayer> {
    let n = d_out
        .checked_mul(d_in)
        .ok_or_else(|| Error::DimensionMismatch("layer size overflows".into()))?;
    if n == 0 {
        return Err(Error::DimensionMismatch(format!(
            "layer dimensions {d_out}x{d_in} must be positive"
        )));
    }
    if mask.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} entries for a {d_out}x{d_in} layer",
            mask.len()
        )));
    }
    let salient = mask.iter().filter(|&&m| m).count();
    if codes.len() != salient {
        return Err(Error::CountMismatch(format!(
            "mask selects {salient} salient weights, got {} codes",
            codes.len()
        )));
    }
    if signs.len() != n - salient {
        return Err(Error::CountMismatch(format!(
            "mask leaves {} binarized weights, got {} signs",
            n - salient,
            signs.len()
        )));
    }
    if row_params.len() != d_out || row_bin.len() != d_out {
        return Err(Error::CountMismatch(format!(
            "need {d_out} row parameter entries, got {} quant / {} bin",
            row_params.len(),
            row_bin.len()
        )));
    }
    for p in &row_params {
        crate::quant::check_bits(p.k)?;
    }
    if signs.iter().any(|&s| s != 1 && s != -1) {
        return Err(Error::CorruptMask("sign codes must be ±1".into()));
    }
    // sign scaling mode must be uniform across rows; it is a layer flag on disk
    let mode = row_bin[0].mode;
    if row_bin.iter().any(|b| b.mode != mode) {
        return Err(Error::CorruptMask(
            "mixed binarization modes within one layer".into(),
        ));
    }
    // codes must be representable under their row's bit width
    let mut iter = codes.iter();
    for r in 0..d_out {
        let max = row_params[r].max_code();
        for &m in &mask[r * d_in..(r + 1) * d_in] {
            if m {
                let &c = iter.next().expect("count checked above");
                if c > max {
                    return Err(Error::CodeOutOfRange {
                        code: c,
                        max,
                        k: row_params[r].k,
                    });
                }
            }
        }
    }
    Ok(PackedLayer {
        name: name.into(),
        d_out,
        d_in,
        mask,
        codes,
        signs,
        row_params,
        row_bin,
        per_layer_params,
        echo,
    })
}

/// Reconstruct the dense dequantized matrix: salient positions through their
/// row quantizer, binarized positions as ±α.
pub fn unpack_mixed(layer: &PackedLayer) -> Result<Vec<f32>> {
    let n = layer.d_out * layer.d_in;
    let salient = layer.mask.iter().filter(|&&m| m).count();
    if layer.mask.len() != n || layer.codes.len() != salient || layer.signs.len() != n - salient {
        return Err(Error::CorruptMask(format!(
            "layer {:?}: mask/code/sign counts disagree",
            layer.name
        )));
    }
    let mut out = vec![0.0f32; n];
    let mut code_it = layer.codes.iter();
    let mut sign_it = layer.signs.iter();
    for r in 0..layer.d_out {
        let qp = &layer.row_params[r];
        let bp = &layer.row_bin[r];
        for c in 0..layer.d_in {
            let idx = r * layer.d_in + c;
            out[idx] = if layer.mask[idx] {
                dequantize_value(*code_it.next().expect("counts checked"), qp)
            } else {
                bp.value(*sign_it.next().expect("counts checked"))
            };
        }
    }
    Ok(out)
}

impl PackedLayer {
    pub fn dense(&self) -> Result<Vec<f32>> {
        unpack_mixed(self)
    }

    pub fn dense_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.name.clone(), self.d_out, self.d_in, self.dense()?)
    }

    pub fn salient_count(&self) -> usize {
        self.codes.len()
    }

    /// Exact integer payload bits: 1 per sign plus k per salient code.
    pub fn payload_bit_count(&self) -> u64 {
        let mut payload: u64 = self.signs.len() as u64;
        for r in 0..self.d_out {
            let k = self.row_params[r].k as u64;
            payload += k
                * self.mask[r * self.d_in..(r + 1) * self.d_in]
                    .iter()
                    .filter(|&&m| m)
                    .count() as u64;
        }
        payload
    }

    /// Storage accounting for this layer.
    pub fn mean_bits(&self) -> BitBudget {
        let n = (self.d_out * self.d_in) as u64;
        let payload_bits = self.payload_bit_count() as f64 / n as f64;
        // per row: s (32) + z (8) + k (8) + alpha (32) = 80 bits
        let overhead_bits = (80 * self.d_out as u64) as f64 / n as f64;
        BitBudget {
            payload_bits,
            total_bits: payload_bits + 1.0 + overhead_bits,
        }
    }
}

// ── bit/nibble packing helpers ──────────────────────────────────────────────

fn pack_bits_msb(bits: impl ExactSizeIterator<Item = bool>) -> Vec<u8> {
    let n = bits.len();
    let mut out = vec![0u8; n.div_ceil(8)];
    for (i, b) in bits.enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

fn unpack_bits_msb(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::CorruptMask(format!(
            "expected {} mask bytes for {n} bits, got {}",
            n.div_ceil(8),
            bytes.len()
        )));
    }
    Ok((0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect())
}

struct NibbleWriter {
    out: Vec<u8>,
    have_low: bool,
}

impl NibbleWriter {
    fn new() -> Self {
        NibbleWriter {
            out: Vec::new(),
            have_low: false,
        }
    }

    fn push(&mut self, nibble: u8) {
        debug_assert!(nibble <= 0xF);
        if self.have_low {
            let last = self.out.last_mut().expect("low nibble pending");
            *last |= nibble << 4;
            self.have_low = false;
        } else {
            self.out.push(nibble);
            self.have_low = true;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.out
    }
}

struct NibbleReader<'a> {
    bytes: &'a [u8],
    pos: usize, // nibble index
}

impl<'a> NibbleReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        NibbleReader { bytes, pos: 0 }
    }

    fn next(&mut self) -> Result<u8> {
        let byte = self
            .bytes
            .get(self.pos / 2)
            .ok_or_else(|| Error::TruncatedFile("code nibble stream".into()))?;
        let nib = if self.pos.is_multiple_of(2) {
            byte & 0x0F
        } else {
            byte >> 4
        };
        self.pos += 1;
        Ok(nib)
    }
}

/// Nibbles a code occupies on disk under bit width `k`.
fn nibbles_per_code(k: u8) -> usize {
    if k <= 4 {
        1
    } else {
        2
    }
}

// ── serialization ───────────────────────────────────────────────────────────

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedFile(format!(
                "{what}: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn serialize_layer(layer: &PackedLayer, out: &mut Vec<u8>) {
    let name = layer.name.as_bytes();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&(layer.d_out as u32).to_le_bytes());
    out.extend_from_slice(&(layer.d_in as u32).to_le_bytes());
    let mut flags = 0u8;
    if layer.row_bin[0].mode == BinarizeMode::ScaledSign {
        flags |= 1;
    }
    if layer.per_layer_params {
        flags |= 1 << 1;
    }
    if layer.echo.supervision == SupervisionMode::General {
        flags |= 1 << 2;
    }
    out.push(flags);
    out.extend_from_slice(&layer.echo.ratio.to_le_bytes());
    out.extend_from_slice(&layer.echo.lambda.to_le_bytes());
    out.extend_from_slice(&pack_bits_msb(layer.mask.iter().copied()));
    for p in &layer.row_params {
        out.extend_from_slice(&p.s.to_le_bytes());
        out.push(p.z);
        out.push(p.k);
    }
    for b in &layer.row_bin {
        out.extend_from_slice(&b.alpha.to_le_bytes());
    }
    let mut nibbles = NibbleWriter::new();
    let mut code_it = layer.codes.iter();
    for r in 0..layer.d_out {
        let width = nibbles_per_code(layer.row_params[r].k);
        for &m in &layer.mask[r * layer.d_in..(r + 1) * layer.d_in] {
            if m {
                let &c = code_it.next().expect("validated at pack time");
                nibbles.push(c & 0x0F);
                if width == 2 {
                    nibbles.push(c >> 4);
                }
            }
        }
    }
    out.extend_from_slice(&nibbles.finish());
    out.extend_from_slice(&pack_bits_msb(layer.signs.iter().map(|&s| s > 0)));
}

fn deserialize_layer(r: &mut ByteReader<'_>) -> Result<PackedLayer> {
    let name_len = r.u16("layer name length")? as usize;
    let name = String::from_utf8(r.take(name_len, "layer name")?.to_vec())
        .map_err(|e| Error::BadHeader(format!("layer name UTF-8: {e}")))?;
    let d_out = r.u32("d_out")? as usize;
    let d_in = r.u32("d_in")? as usize;
    if d_out == 0 || d_in == 0 {
        return Err(Error::DimensionMismatch(format!(
            "layer {name:?} has zero dimension {d_out}x{d_in}"
        )));
    }
    let n = d_out * d_in;
    let flags = r.u8("flags")?;
    let mode = if flags & 1 != 0 {
        BinarizeMode::ScaledSign
    } else {
        BinarizeMode::BareSign
    };
    let per_layer_params = flags & (1 << 1) != 0;
    let supervision = if flags & (1 << 2) != 0 {
        SupervisionMode::General
    } else {
        SupervisionMode::Fias
    };
    let ratio = r.f32("ratio")?;
    let lambda = r.f32("lambda")?;
    let mask = unpack_bits_msb(r.take(n.div_ceil(8), "mask")?, n)?;
    let mut row_params = Vec::with_capacity(d_out);
    for _ in 0..d_out {
        let s = r.f32("row scale")?;
        let z = r.u8("row zero-point")?;
        let k = r.u8("row bits")?;
        crate::quant::check_bits(k)?;
        row_params.push(QuantParams { k, s, z });
    }
    let mut row_bin = Vec::with_capacity(d_out);
    for _ in 0..d_out {
        let alpha = r.f32("row alpha")?;
        row_bin.push(BinParams { alpha, mode });
    }
    // salient code count and nibble width per code follow from mask + row k
    let mut total_nibbles = 0usize;
    for row in 0..d_out {
        let width = nibbles_per_code(row_params[row].k);
        total_nibbles += width
            * mask[row * d_in..(row + 1) * d_in]
                .iter()
                .filter(|&&m| m)
                .count();
    }
    let code_bytes = r.take(total_nibbles.div_ceil(2), "codes")?;
    let mut nr = NibbleReader::new(code_bytes);
    let salient = mask.iter().filter(|&&m| m).count();
    let mut codes = Vec::with_capacity(salient);
    for row in 0..d_out {
        let width = nibbles_per_code(row_params[row].k);
        for &m in &mask[row * d_in..(row + 1) * d_in] {
            if m {
                let lo = nr.next()?;
                let c = if width == 2 { lo | (nr.next()? << 4) } else { lo };
                codes.push(c);
            }
        }
    }
    let n_bin = n - salient;
    let sign_bits = unpack_bits_msb(r.take(n_bin.div_ceil(8), "signs")?, n_bin)?;
    let signs: Vec<i8> = sign_bits.iter().map(|&b| if b { 1 } else { -1 }).collect();

    pack_mixed(
        name,
        d_out,
        d_in,
        mask,
        codes,
        signs,
        row_params,
        row_bin,
        per_layer_params,
        ConfigEcho {
            ratio,
            lambda,
            supervision,
        },
    )
}

/// A quantized model: packed layers in model order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PackedModel {
    pub layers: Vec<PackedLayer>,
}

impl PackedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(S10P_MAGIC);
        out.extend_from_slice(&S10P_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            serialize_layer(layer, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != S10P_MAGIC {
            return Err(Error::MagicMismatch {
                expected: String::from_utf8_lossy(S10P_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u16("version")?;
        if version != S10P_VERSION {
            return Err(Error::VersionUnsupported {
                found: version,
                supported: S10P_VERSION,
            });
        }
        let count = r.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            layers.push(deserialize_layer(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::BadHeader(format!(
                "{} trailing bytes after last layer",
                bytes.len() - r.pos
            )));
        }
        Ok(PackedModel { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}
