//! Flexible-bias FP8 quantization and its byte-stream form.
//!
//! A format has 1 sign bit, `e` exponent bits and `m` mantissa bits. Unlike
//! the fixed IEEE-style FP8 variants, the exponent bias is derived from a
//! per-tensor clipping value `alpha` so that the largest representable
//! magnitude lands exactly on `alpha`:
//!
//! ```text
//! bias = 2^e - log2(alpha) + log2(2 - 2^-m) - 1
//! ```
//!
//! Every code point is an ordinary finite number: there are no NaN or
//! infinity encodings, and inputs beyond `alpha` in magnitude saturate to
//! `±alpha`. The per-element step follows the usual exponent ladder,
//!
//! ```text
//! log2 s = floor(log2|x| + bias) - bias - m   if floor(log2|x| + bias) > 1
//!          1 - bias - m                       otherwise (subnormal range),
//! ```
//!
//! and rounding onto the grid is either deterministic (nearest, ties to the
//! even step multiple) or stochastic (up with probability equal to the
//! fractional position inside the step, which makes the rounding error zero
//! in expectation).
//!
//! The wire form of a quantized tensor is a little-endian blob:
//!
//! ```text
//! "FP8T" | version u8 = 1 | exp_bits u8 | man_bits u8 | ndim u8
//!        | dims u32 x ndim | alpha f32 | one code byte per element
//! ```
//!
//! with codes packed sign in bit 7, exponent field in bits 6..3, mantissa in
//! bits 2..0 (for the 8-bit E4M3 layout) and elements in row-major order.

use std::cmp::Ordering;

use rand::Rng;

/// Magic bytes opening every serialized tensor.
pub const BLOB_MAGIC: [u8; 4] = *b"FP8T";
/// Current blob layout version.
pub const BLOB_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("clip value must be positive and finite, got {value}")]
    BadClip { value: f64 },
    #[error("unsupported format: {exp_bits} exponent bits, {man_bits} mantissa bits")]
    BadFormat { exp_bits: u32, man_bits: u32 },
    #[error("format E{exp_bits}M{man_bits} does not fit the 8-bit wire code")]
    NotWireFormat { exp_bits: u32, man_bits: u32 },
    #[error("non-finite {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("value {value:e} is not on the quantization grid")]
    OffGrid { value: f64 },
    #[error("tensor has {values} values but shape {shape:?} implies {expected}")]
    ShapeMismatch {
        values: usize,
        shape: Vec<usize>,
        expected: usize,
    },
    #[error("byte stream too short: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad magic {found:?}, expected {BLOB_MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported blob version {found}")]
    BadVersion { found: u8 },
    #[error("payload of {found} bytes does not match {expected} elements")]
    PayloadLength { expected: usize, found: usize },
}

/// Bit layout of a quantized element: sign + exponent + mantissa widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fp8Format {
    exp_bits: u32,
    man_bits: u32,
}

impl Fp8Format {
    pub fn new(exp_bits: u32, man_bits: u32) -> Result<Self, CodecError> {
        if !(1..=8).contains(&exp_bits) || !(1..=8).contains(&man_bits) {
            return Err(CodecError::BadFormat { exp_bits, man_bits });
        }
        Ok(Self { exp_bits, man_bits })
    }

    /// The default 1-4-3 layout used on the wire.
    pub fn e4m3() -> Self {
        Self { exp_bits: 4, man_bits: 3 }
    }

    pub fn exp_bits(&self) -> u32 {
        self.exp_bits
    }

    pub fn man_bits(&self) -> u32 {
        self.man_bits
    }

    /// Total storage bits per element, including the sign.
    pub fn total_bits(&self) -> u32 {
        self.exp_bits + self.man_bits + 1
    }

    /// Whether elements pack into the one-byte wire code.
    pub fn is_wire(&self) -> bool {
        self.total_bits() == 8
    }

    /// Number of distinct magnitudes (exponent-field x mantissa-field pairs).
    fn magnitude_count(&self) -> usize {
        1usize << (self.exp_bits + self.man_bits)
    }

    /// `2 - 2^-m`: the mantissa value of the top code.
    fn top_mantissa(&self) -> f64 {
        2.0 - 0.5f64.powi(self.man_bits as i32)
    }
}

/// A validated per-tensor clipping value (`alpha > 0`, finite).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipParam {
    alpha: f64,
}

impl ClipParam {
    pub fn new(alpha: f64) -> Result<Self, CodecError> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(CodecError::BadClip { value: alpha });
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Round the clip through binary32, as it travels on the wire.
    pub fn to_wire_precision(&self) -> Result<Self, CodecError> {
        ClipParam::new(self.alpha as f32 as f64)
    }
}

/// Split a positive finite `x` into `(mant, exp)` with `x = mant * 2^exp`
/// and `mant` in `[1, 2)`.
fn split_pow2(x: f64) -> (f64, i32) {
    debug_assert!(x.is_finite() && x > 0.0);
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7FF) as i32;
    if biased == 0 {
        // Subnormal binary64 input: renormalize first.
        let (m, e) = split_pow2(x * 2f64.powi(64));
        (m, e - 64)
    } else {
        let mant = f64::from_bits((bits & !(0x7FFu64 << 52)) | (1023u64 << 52));
        (mant, biased - 1023)
    }
}

/// Exponent bias implied by a clipping value.
///
/// Evaluated as `(2^e - 1 - k) + (log2(2 - 2^-m) - log2(c))` for
/// `alpha = c * 2^k`, `c` in `[1, 2)`, so that when the clip sits exactly on
/// a grid-top magnitude the two logarithms cancel and the bias is exact
/// (alpha = 480 with E4M3 gives bias 7 with no rounding residue).
pub fn exponent_bias(fmt: Fp8Format, clip: ClipParam) -> f64 {
    let (mant, exp) = split_pow2(clip.alpha());
    let field_max = ((1u64 << fmt.exp_bits) - 1) as f64;
    field_max - exp as f64 + (fmt.top_mantissa().log2() - mant.log2())
}

/// Per-element quantization step for `x` under a clip.
///
/// Follows the exponent-ladder rule from the module docs; `x = 0` takes the
/// subnormal branch. The value is returned for analysis purposes — the
/// quantizers derive their own steps from the grid so that encode/decode
/// round-trips are exact.
pub fn compute_scale(x: f64, fmt: Fp8Format, clip: ClipParam) -> Result<f64, CodecError> {
    if !x.is_finite() {
        return Err(CodecError::NonFinite { what: "input", value: x });
    }
    let bias = exponent_bias(fmt, clip);
    let m = fmt.man_bits as f64;
    let t = (x.abs().log2() + bias).floor(); // -inf for x == 0
    let log2_s = if t > 1.0 { t - bias - m } else { 1.0 - bias - m };
    Ok(log2_s.exp2())
}

/// How often a quantizer was applied and how coarse it was.
///
/// `max_step` is the largest per-element step actually used, which is the
/// empirical stand-in for the uniform scale bound in the error analyses.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuantStats {
    pub elements: usize,
    pub saturated: usize,
    pub max_step: f64,
}

impl QuantStats {
    fn note(&mut self, step: f64, saturated: bool) {
        self.elements += 1;
        self.saturated += saturated as usize;
        if step > self.max_step {
            self.max_step = step;
        }
    }

    pub fn merge(&mut self, other: &QuantStats) {
        self.elements += other.elements;
        self.saturated += other.saturated;
        if other.max_step > self.max_step {
            self.max_step = other.max_step;
        }
    }
}

/// Rounding discipline for mapping values onto the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundingMode {
    /// Nearest grid point, ties to the even step multiple.
    Deterministic,
    /// Two-point stochastic rounding, unbiased in expectation.
    Stochastic,
}

/// The full magnitude grid of one `(format, clip)` pair.
///
/// Magnitudes are precomputed once, strictly increasing, with `mags[0] = 0`
/// and the last entry exactly `alpha`. All quantization and code mapping go
/// through this table, so a value produced by a quantizer always encodes
/// without error and decoding is the exact inverse.
#[derive(Clone, Debug)]
pub struct Fp8Grid {
    fmt: Fp8Format,
    clip: ClipParam,
    bias: f64,
    mags: Vec<f64>,
}

impl Fp8Grid {
    pub fn new(fmt: Fp8Format, clip: ClipParam) -> Self {
        let m = fmt.man_bits;
        let den = ((1u64 << (m + 1)) - 1) as f64; // 2^(m+1) - 1
        let field_max = (1i32 << fmt.exp_bits) - 1;
        let mut mags = Vec::with_capacity(fmt.magnitude_count());
        for idx in 0..fmt.magnitude_count() {
            let field = (idx >> m) as i32;
            let frac = (idx & ((1usize << m) - 1)) as u64;
            // Subnormal codes reuse the first binade's step with no implicit
            // leading bit; everything reduces to an integer times a power of
            // two, divided by den and scaled by alpha.
            let (mant_int, eff_field) = if field == 0 {
                (frac, 1)
            } else {
                (frac + (1 << m), field)
            };
            let v = (mant_int as f64 / den) * ((eff_field - field_max) as f64).exp2() * clip.alpha();
            mags.push(v);
        }
        debug_assert!(mags.windows(2).all(|w| w[0] < w[1]));
        debug_assert_eq!(*mags.last().unwrap(), clip.alpha());
        let bias = exponent_bias(fmt, clip);
        Self { fmt, clip, bias, mags }
    }

    pub fn format(&self) -> Fp8Format {
        self.fmt
    }

    pub fn clip(&self) -> ClipParam {
        self.clip
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// Largest representable magnitude; equals the clip by construction.
    pub fn max_magnitude(&self) -> f64 {
        *self.mags.last().unwrap()
    }

    /// Coarsest step on the grid (top binade).
    pub fn max_step(&self) -> f64 {
        let n = self.mags.len();
        self.mags[n - 1] - self.mags[n - 2]
    }

    /// The ascending table of non-negative representable magnitudes,
    /// starting at zero and ending at the clip.
    pub fn magnitudes(&self) -> &[f64] {
        &self.mags
    }

    /// Largest index with `mags[idx] <= a` (requires `a >= 0`).
    fn index_below(&self, a: f64) -> usize {
        self.mags.partition_point(|&g| g <= a) - 1
    }

    /// The grid point's position in units of its local step. Two bracketing
    /// points always occupy consecutive multiples of the lower point's step.
    fn step_multiple(&self, idx: usize) -> usize {
        let m = self.fmt.man_bits;
        if idx < (1usize << (m + 1)) {
            idx
        } else {
            (1usize << m) + (idx & ((1usize << m) - 1))
        }
    }

    fn pick_index(
        &self,
        x: f64,
        mut choose_up: impl FnMut(f64) -> bool,
        stats: &mut QuantStats,
    ) -> Result<(bool, usize), CodecError> {
        if !x.is_finite() {
            return Err(CodecError::NonFinite { what: "input", value: x });
        }
        let sign = x.is_sign_negative();
        let a = x.abs();
        let alpha = self.clip.alpha();
        if a >= alpha {
            stats.note(self.max_step(), a > alpha);
            return Ok((sign, self.mags.len() - 1));
        }
        let lo = self.index_below(a);
        let g_lo = self.mags[lo];
        let g_hi = self.mags[lo + 1]; // exists: a < alpha = last entry
        let step = g_hi - g_lo;
        stats.note(step, false);
        if g_lo == a {
            return Ok((sign, lo));
        }
        let up = choose_up((a - g_lo) / step);
        Ok((sign, if up { lo + 1 } else { lo }))
    }

    fn index_det(&self, x: f64, stats: &mut QuantStats) -> Result<(bool, usize), CodecError> {
        let half_up = |frac: f64| match frac.partial_cmp(&0.5).unwrap() {
            Ordering::Greater => true,
            Ordering::Less => false,
            // Exact tie: round to the even step multiple.
            Ordering::Equal => {
                let a = x.abs();
                let lo = self.index_below(a);
                self.step_multiple(lo) % 2 == 1
            }
        };
        self.pick_index(x, half_up, stats)
    }

    fn index_rand<R: Rng + ?Sized>(
        &self,
        x: f64,
        rng: &mut R,
        stats: &mut QuantStats,
    ) -> Result<(bool, usize), CodecError> {
        // `frac` is strictly inside (0, 1) here: on-grid values never reach
        // the draw, so they reproduce themselves with probability one.
        self.pick_index(x, |frac| rng.gen::<f64>() < frac, stats)
    }

    fn value_at(&self, sign: bool, idx: usize) -> f64 {
        let mag = self.mags[idx];
        if sign {
            -mag
        } else {
            mag
        }
    }

    /// Deterministic rounding: nearest grid point, ties to even, saturating.
    pub fn q_det(&self, x: f64) -> Result<f64, CodecError> {
        self.q_det_tracked(x, &mut QuantStats::default())
    }

    pub fn q_det_tracked(&self, x: f64, stats: &mut QuantStats) -> Result<f64, CodecError> {
        let (sign, idx) = self.index_det(x, stats)?;
        Ok(self.value_at(sign, idx))
    }

    /// Stochastic rounding: up with probability equal to the fractional
    /// position inside the step, otherwise down. Unbiased for in-range
    /// inputs; magnitudes beyond the clip saturate like `q_det`.
    pub fn q_rand<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> Result<f64, CodecError> {
        self.q_rand_tracked(x, rng, &mut QuantStats::default())
    }

    pub fn q_rand_tracked<R: Rng + ?Sized>(
        &self,
        x: f64,
        rng: &mut R,
        stats: &mut QuantStats,
    ) -> Result<f64, CodecError> {
        let (sign, idx) = self.index_rand(x, rng, stats)?;
        Ok(self.value_at(sign, idx))
    }

    /// Stochastic rounding driven by an externally supplied uniform draw
    /// `u` in `[0, 1)` instead of an RNG. Feeding the same `u` makes the
    /// rounding a deterministic function of `(x, u)`, which lets a caller
    /// hold the randomness fixed while varying `x` or the clip.
    pub fn q_rand_given(&self, x: f64, u: f64) -> Result<f64, CodecError> {
        debug_assert!((0.0..1.0).contains(&u), "uniform draw out of range: {u}");
        let (sign, idx) =
            self.pick_index(x, |frac| u < frac, &mut QuantStats::default())?;
        Ok(self.value_at(sign, idx))
    }

    /// The two grid points around `x` and the probability of rounding up,
    /// i.e. the exact two-point law of `q_rand`. For on-grid or saturated
    /// inputs both points coincide.
    pub fn two_point_law(&self, x: f64) -> Result<(f64, f64, f64), CodecError> {
        if !x.is_finite() {
            return Err(CodecError::NonFinite { what: "input", value: x });
        }
        let sign = x.is_sign_negative();
        let a = x.abs();
        if a >= self.clip.alpha() {
            let v = self.value_at(sign, self.mags.len() - 1);
            return Ok((v, v, 0.0));
        }
        let lo = self.index_below(a);
        if self.mags[lo] == a {
            let v = self.value_at(sign, lo);
            return Ok((v, v, 0.0));
        }
        let g_lo = self.mags[lo];
        let g_hi = self.mags[lo + 1];
        let p_up = (a - g_lo) / (g_hi - g_lo);
        // Signs flip the roles of the endpoints but not the probability of
        // moving away from zero.
        Ok((self.value_at(sign, lo), self.value_at(sign, lo + 1), p_up))
    }

    fn require_wire(&self) -> Result<(), CodecError> {
        if self.fmt.is_wire() {
            Ok(())
        } else {
            Err(CodecError::NotWireFormat {
                exp_bits: self.fmt.exp_bits,
                man_bits: self.fmt.man_bits,
            })
        }
    }

    /// Map a code byte to its value. Every one of the 256 codes is finite;
    /// code 0x00 is +0.0 and 0x80 is -0.0.
    pub fn decode_code(&self, code: u8) -> Result<f64, CodecError> {
        self.require_wire()?;
        Ok(self.value_at(code & 0x80 != 0, (code & 0x7F) as usize))
    }

    /// Map an exactly-representable value back to its code byte.
    pub fn encode_value(&self, v: f64) -> Result<u8, CodecError> {
        self.require_wire()?;
        if !v.is_finite() {
            return Err(CodecError::NonFinite { what: "value", value: v });
        }
        let a = v.abs();
        let idx = if a > self.max_magnitude() {
            return Err(CodecError::OffGrid { value: v });
        } else {
            self.index_below(a)
        };
        if self.mags[idx] != a {
            return Err(CodecError::OffGrid { value: v });
        }
        Ok(idx as u8 | if v.is_sign_negative() { 0x80 } else { 0 })
    }

    fn code_for(&self, sign: bool, idx: usize) -> u8 {
        idx as u8 | if sign { 0x80 } else { 0 }
    }
}

/// A tensor quantized onto one grid, holding raw code bytes.
///
/// The clip is kept at the binary32 precision it has on the wire, so a
/// serialize/deserialize round trip reproduces the struct exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    fmt: Fp8Format,
    clip: ClipParam,
    shape: Vec<usize>,
    codes: Vec<u8>,
}

/// Quantize a row-major tensor onto the grid of `(fmt, clip)`.
///
/// The clip is first rounded through binary32 — the precision it travels at —
/// so the receiver reconstructs the identical grid from the blob header.
pub fn encode<R: Rng + ?Sized>(
    values: &[f64],
    shape: &[usize],
    fmt: Fp8Format,
    clip: ClipParam,
    mode: RoundingMode,
    rng: &mut R,
    stats: &mut QuantStats,
) -> Result<QuantizedTensor, CodecError> {
    let expected: usize = shape.iter().product();
    if expected != values.len() {
        return Err(CodecError::ShapeMismatch {
            values: values.len(),
            shape: shape.to_vec(),
            expected,
        });
    }
    let clip = clip.to_wire_precision()?;
    let grid = Fp8Grid::new(fmt, clip);
    grid.require_wire()?;
    let mut codes = Vec::with_capacity(values.len());
    for &x in values {
        let (sign, idx) = match mode {
            RoundingMode::Deterministic => grid.index_det(x, stats)?,
            RoundingMode::Stochastic => grid.index_rand(x, rng, stats)?,
        };
        codes.push(grid.code_for(sign, idx));
    }
    Ok(QuantizedTensor { fmt, clip, shape: shape.to_vec(), codes })
}

impl QuantizedTensor {
    pub fn format(&self) -> Fp8Format {
        self.fmt
    }

    pub fn clip(&self) -> ClipParam {
        self.clip
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Reconstruct the row-major real values.
    pub fn decode(&self) -> Result<Vec<f64>, CodecError> {
        let grid = Fp8Grid::new(self.fmt, self.clip);
        self.codes.iter().map(|&c| grid.decode_code(c)).collect()
    }

    /// Serialized size in bytes without building the blob.
    pub fn byte_len(&self) -> usize {
        blob_header_len(self.shape.len()) + self.codes.len()
    }

    /// Serialize to the little-endian wire layout described in the module
    /// docs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&BLOB_MAGIC);
        out.push(BLOB_VERSION);
        out.push(self.fmt.exp_bits as u8);
        out.push(self.fmt.man_bits as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.clip.alpha() as f32).to_le_bytes());
        out.extend_from_slice(&self.codes);
        out
    }

    /// Parse a blob produced by [`to_bytes`](Self::to_bytes).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let need_fixed = 8;
        if bytes.len() < need_fixed {
            return Err(CodecError::Truncated { need: need_fixed, have: bytes.len() });
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[..4]);
        if magic != BLOB_MAGIC {
            return Err(CodecError::BadMagic { found: magic });
        }
        if bytes[4] != BLOB_VERSION {
            return Err(CodecError::BadVersion { found: bytes[4] });
        }
        let fmt = Fp8Format::new(bytes[5] as u32, bytes[6] as u32)?;
        if !fmt.is_wire() {
            return Err(CodecError::NotWireFormat {
                exp_bits: fmt.exp_bits,
                man_bits: fmt.man_bits,
            });
        }
        let ndim = bytes[7] as usize;
        let header = blob_header_len(ndim);
        if bytes.len() < header {
            return Err(CodecError::Truncated { need: header, have: bytes.len() });
        }
        let mut shape = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let at = 8 + 4 * i;
            let dim = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            shape.push(dim as usize);
        }
        let alpha_at = 8 + 4 * ndim;
        let alpha = f32::from_le_bytes(bytes[alpha_at..alpha_at + 4].try_into().unwrap());
        let clip = ClipParam::new(alpha as f64)?;
        let expected: usize = shape.iter().product();
        let payload = &bytes[header..];
        if payload.len() != expected {
            return Err(CodecError::PayloadLength { expected, found: payload.len() });
        }
        Ok(Self { fmt, clip, shape, codes: payload.to_vec() })
    }
}

/// Header size of a blob with `ndim` dimensions.
pub fn blob_header_len(ndim: usize) -> usize {
    4 + 1 + 1 + 1 + 1 + 4 * ndim + 4
}

/// Bytes a plain binary32 tensor of the same shape would occupy, for the
/// uncompressed side of the communication ledger.
pub fn fp32_payload_len(shape: &[usize]) -> usize {
    blob_header_len(shape.len()) + 4 * shape.iter().product::<usize>()
}

/// Residuals of a quantization, `decoded - original`.
#[derive(Clone, Debug)]
pub struct QuantError {
    pub residual: Vec<f64>,
    pub max_abs: f64,
}

/// Compare a quantized tensor against the values it came from.
pub fn quant_error(values: &[f64], qt: &QuantizedTensor) -> Result<QuantError, CodecError> {
    if values.len() != qt.len() {
        return Err(CodecError::ShapeMismatch {
            values: values.len(),
            shape: qt.shape().to_vec(),
            expected: qt.len(),
        });
    }
    let decoded = qt.decode()?;
    let residual: Vec<f64> = decoded.iter().zip(values).map(|(q, x)| q - x).collect();
    let max_abs = residual.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    Ok(QuantError { residual, max_abs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid480() -> Fp8Grid {
        Fp8Grid::new(Fp8Format::e4m3(), ClipParam::new(480.0).unwrap())
    }

    #[test]
    fn bias_is_exact_for_grid_top_clip() {
        // 480 = 1.875 * 2^8, and 1.875 is exactly the E4M3 top mantissa, so
        // the two logs cancel with no rounding residue.
        let b = exponent_bias(Fp8Format::e4m3(), ClipParam::new(480.0).unwrap());
        assert_eq!(b, 7.0);
    }

    #[test]
    fn scale_matches_hand_derived_values() {
        let fmt = Fp8Format::e4m3();
        let clip = ClipParam::new(480.0).unwrap();
        assert_eq!(compute_scale(1.0, fmt, clip).unwrap(), 0.125);
        assert_eq!(compute_scale(0.0, fmt, clip).unwrap(), (-9.0f64).exp2());
        assert_eq!(compute_scale(300.0, fmt, clip).unwrap(), 32.0);
        // Negative inputs see the same magnitude ladder.
        assert_eq!(compute_scale(-300.0, fmt, clip).unwrap(), 32.0);
    }

    #[test]
    fn scale_rejects_bad_inputs() {
        let fmt = Fp8Format::e4m3();
        assert!(ClipParam::new(0.0).is_err());
        assert!(ClipParam::new(-1.0).is_err());
        assert!(ClipParam::new(f64::NAN).is_err());
        let clip = ClipParam::new(480.0).unwrap();
        assert!(compute_scale(f64::NAN, fmt, clip).is_err());
        assert!(compute_scale(f64::INFINITY, fmt, clip).is_err());
    }

    #[test]
    fn det_rounding_hand_values() {
        let g = grid480();
        assert_eq!(g.q_det(1.07).unwrap(), 1.125);
        assert_eq!(g.q_det(1.0).unwrap(), 1.0);
        assert_eq!(g.q_det(-1.07).unwrap(), -1.125);
        // Saturation in both directions.
        assert_eq!(g.q_det(1000.0).unwrap(), 480.0);
        assert_eq!(g.q_det(-1000.0).unwrap(), -480.0);
        assert_eq!(g.q_det(480.0).unwrap(), 480.0);
        // 300/32 = 9.375 rounds down to 9 * 32 = 288.
        assert_eq!(g.q_det(300.0).unwrap(), 288.0);
        assert_eq!(g.q_det(0.0).unwrap(), 0.0);
    }

    #[test]
    fn det_rounding_ties_to_even() {
        let g = grid480();
        // Steps of 32 above 256: 304 sits exactly between 288 (odd multiple
        // of 32: 9) and 320 (even: 10).
        assert_eq!(g.q_det(304.0).unwrap(), 320.0);
        // 272 sits between 256 (multiple 8, even) and 288.
        assert_eq!(g.q_det(272.0).unwrap(), 256.0);
    }

    #[test]
    fn max_magnitude_equals_clip_exactly() {
        let g = grid480();
        assert_eq!(g.max_magnitude(), 480.0);
        assert_eq!(g.max_step(), 32.0);
    }

    #[test]
    fn grid_is_strictly_increasing_and_scale_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let alpha = (rand::Rng::gen_range(&mut rng, -4.0..10.0) as f64).exp2();
            let clip = ClipParam::new(alpha).unwrap();
            let g = Fp8Grid::new(Fp8Format::e4m3(), clip);
            assert!(g.mags.windows(2).all(|w| w[0] < w[1]));
            // Bracket steps agree with the closed-form scale.
            for _ in 0..50 {
                let x: f64 = rand::Rng::gen_range(&mut rng, 0.0..alpha * 0.999);
                let lo = g.index_below(x);
                if g.mags[lo] == x {
                    continue;
                }
                let step = g.mags[lo + 1] - g.mags[lo];
                let s = compute_scale(x, g.format(), clip).unwrap();
                assert!(
                    (step - s).abs() <= 1e-12 * s,
                    "bracket step {step} vs formula {s} at x={x} alpha={alpha}"
                );
            }
        }
    }

    #[test]
    fn rand_rounding_two_point_support() {
        let g = grid480();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let x: f64 = rand::Rng::gen_range(&mut rng, -480.0..480.0);
            let (lo, hi, _) = g.two_point_law(x).unwrap();
            let s = compute_scale(x, g.format(), g.clip()).unwrap();
            let q = g.q_rand(x, &mut rng).unwrap();
            assert!(q == lo || q == hi, "q_rand left its bracket: {q} vs [{lo}, {hi}]");
            assert!((q - x).abs() < s * (1.0 + 1e-12), "moved {} with step {s}", (q - x).abs());
        }
    }

    #[test]
    fn rand_rounding_with_given_uniform_is_deterministic() {
        let g = grid480();
        // x = 1.07: fractional position (1.07 - 1.0) / 0.125 = 0.56.
        assert_eq!(g.q_rand_given(1.07, 0.0).unwrap(), 1.125);
        assert_eq!(g.q_rand_given(1.07, 0.5599).unwrap(), 1.125);
        assert_eq!(g.q_rand_given(1.07, 0.5601).unwrap(), 1.0);
        assert_eq!(g.q_rand_given(1.07, 0.999).unwrap(), 1.0);
        // Grid points and saturated inputs ignore the draw.
        for u in [0.0, 0.3, 0.999] {
            assert_eq!(g.q_rand_given(1.0, u).unwrap(), 1.0);
            assert_eq!(g.q_rand_given(-700.0, u).unwrap(), -480.0);
        }
        // Agreement with the two-point law across random inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let x: f64 = rand::Rng::gen_range(&mut rng, -500.0..500.0);
            let u: f64 = rand::Rng::gen(&mut rng);
            let (lo, hi, p_up) = g.two_point_law(x).unwrap();
            let expect = if u < p_up { hi } else { lo };
            assert_eq!(g.q_rand_given(x, u).unwrap(), expect);
        }
    }

    #[test]
    fn rand_rounding_keeps_grid_points_fixed() {
        let g = grid480();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &x in &[0.0, 1.0, 1.125, -288.0, 480.0, -480.0] {
            for _ in 0..50 {
                assert_eq!(g.q_rand(x, &mut rng).unwrap(), x);
            }
        }
    }

    #[test]
    fn rand_rounding_is_unbiased_at_hand_point() {
        // x = 1.07 lies between 1.0 and 1.125 (step 1/8); the Monte-Carlo
        // mean over 1e5 draws must land within 4 * (s/2) / sqrt(1e5).
        let g = grid480();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut sum = 0.0;
        let mut ups = 0usize;
        for _ in 0..n {
            let q = g.q_rand(1.07, &mut rng).unwrap();
            sum += q;
            ups += (q == 1.125) as usize;
        }
        let mean = sum / n as f64;
        let tol = 4.0 * (0.125 / 2.0) / (n as f64).sqrt();
        assert!((mean - 1.07).abs() < tol, "mean {mean} tol {tol}");
        // P(up) = (1.07 - 1.0) / 0.125 = 0.56; allow 4 binomial sigmas.
        let p_hat = ups as f64 / n as f64;
        let sigma = (0.56f64 * 0.44 / n as f64).sqrt();
        assert!((p_hat - 0.56).abs() < 4.0 * sigma, "p_hat {p_hat}");
    }

    #[test]
    fn det_rounding_is_idempotent() {
        let g = grid480();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..2000 {
            let x: f64 = rand::Rng::gen_range(&mut rng, -600.0..600.0);
            let q = g.q_det(x).unwrap();
            assert_eq!(g.q_det(q).unwrap(), q);
        }
    }

    #[test]
    fn residual_norm_per_element_bound() {
        let g = grid480();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut stats = QuantStats::default();
        for _ in 0..200 {
            let x: f64 = rand::Rng::gen_range(&mut rng, -480.0..480.0);
            let q = g.q_det_tracked(x, &mut stats).unwrap();
            let s = compute_scale(x, g.format(), g.clip()).unwrap();
            assert!((q - x).abs() <= s / 2.0 * (1.0 + 1e-12));
        }
        assert_eq!(stats.elements, 200);
        assert!(stats.max_step <= g.max_step());
    }

    #[test]
    fn code_round_trip_all_256() {
        let g = grid480();
        for c in 0u8..=255 {
            let v = g.decode_code(c).unwrap();
            assert!(v.is_finite());
            assert_eq!(g.encode_value(v).unwrap(), c, "code {c:#x} value {v}");
        }
        // The canonical fixed points of the layout.
        assert_eq!(g.encode_value(0.0).unwrap(), 0x00);
        assert_eq!(g.encode_value(480.0).unwrap(), 0x7F);
        assert_eq!(g.encode_value(-480.0).unwrap(), 0xFF);
        assert_eq!(g.decode_code(0x7F).unwrap(), 480.0);
    }

    #[test]
    fn encode_rejects_off_grid_values() {
        let g = grid480();
        assert!(matches!(g.encode_value(1.07), Err(CodecError::OffGrid { .. })));
        assert!(matches!(g.encode_value(481.0), Err(CodecError::OffGrid { .. })));
        assert!(g.encode_value(f64::NAN).is_err());
    }

    #[test]
    fn non_wire_formats_quantize_but_do_not_code() {
        let fmt = Fp8Format::new(4, 4).unwrap();
        let clip = ClipParam::new(1.0).unwrap();
        let g = Fp8Grid::new(fmt, clip);
        assert!(g.q_det(0.7).is_ok());
        assert!(matches!(g.decode_code(0), Err(CodecError::NotWireFormat { .. })));
        assert!(matches!(g.encode_value(0.0), Err(CodecError::NotWireFormat { .. })));
    }

    #[test]
    fn blob_golden_bytes() {
        let clip = ClipParam::new(480.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut stats = QuantStats::default();
        let qt = encode(
            &[0.0, 480.0],
            &[2],
            Fp8Format::e4m3(),
            clip,
            RoundingMode::Deterministic,
            &mut rng,
            &mut stats,
        )
        .unwrap();
        let bytes = qt.to_bytes();
        let expect = [
            b'F', b'P', b'8', b'T', // magic
            1, 4, 3,  // version, exp bits, man bits
            1, // ndim
            2, 0, 0, 0, // dims[0] = 2, little endian
            0x00, 0x00, 0xF0, 0x43, // 480.0f32
            0x00, 0x7F, // codes
        ];
        assert_eq!(bytes, expect);
        assert_eq!(qt.byte_len(), bytes.len());
        assert_eq!(blob_header_len(1), 16);
    }

    #[test]
    fn blob_round_trip_preserves_everything() {
        let clip = ClipParam::new(0.37).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f64> = (0..24).map(|_| rand::Rng::gen_range(&mut rng, -0.5..0.5)).collect();
        let mut stats = QuantStats::default();
        let qt = encode(
            &values,
            &[4, 6],
            Fp8Format::e4m3(),
            clip,
            RoundingMode::Stochastic,
            &mut rng,
            &mut stats,
        )
        .unwrap();
        let back = QuantizedTensor::from_bytes(&qt.to_bytes()).unwrap();
        assert_eq!(back, qt);
        assert_eq!(back.decode().unwrap(), qt.decode().unwrap());
    }

    #[test]
    fn blob_parse_errors() {
        let qt = encode(
            &[1.0],
            &[1],
            Fp8Format::e4m3(),
            ClipParam::new(2.0).unwrap(),
            RoundingMode::Deterministic,
            &mut ChaCha8Rng::seed_from_u64(0),
            &mut QuantStats::default(),
        )
        .unwrap();
        let good = qt.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(QuantizedTensor::from_bytes(&bad), Err(CodecError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(QuantizedTensor::from_bytes(&bad), Err(CodecError::BadVersion { .. })));

        assert!(matches!(
            QuantizedTensor::from_bytes(&good[..5]),
            Err(CodecError::Truncated { .. })
        ));
        assert!(matches!(
            QuantizedTensor::from_bytes(&good[..good.len() - 1]),
            Err(CodecError::PayloadLength { .. })
        ));
    }

    #[test]
    fn quant_error_hand_value() {
        let qt = encode(
            &[1.07],
            &[1],
            Fp8Format::e4m3(),
            ClipParam::new(480.0).unwrap(),
            RoundingMode::Deterministic,
            &mut ChaCha8Rng::seed_from_u64(0),
            &mut QuantStats::default(),
        )
        .unwrap();
        let err = quant_error(&[1.07], &qt).unwrap();
        assert!((err.residual[0] - 0.055).abs() < 1e-12);
        assert!((err.max_abs - 0.055).abs() < 1e-12);
        // On-grid input: zero residual.
        let qt = encode(
            &[1.125],
            &[1],
            Fp8Format::e4m3(),
            ClipParam::new(480.0).unwrap(),
            RoundingMode::Deterministic,
            &mut ChaCha8Rng::seed_from_u64(0),
            &mut QuantStats::default(),
        )
        .unwrap();
        assert_eq!(quant_error(&[1.125], &qt).unwrap().max_abs, 0.0);
    }

    #[test]
    fn encode_respects_wire_clip_precision() {
        // A clip that is not binary32-exact must be rounded before gridding,
        // so that the decoder (which only sees the f32) agrees bit for bit.
        let clip = ClipParam::new(0.1 + 1e-12).unwrap();
        let values = [0.07, -0.03, 0.1];
        let qt = encode(
            &values,
            &[3],
            Fp8Format::e4m3(),
            clip,
            RoundingMode::Deterministic,
            &mut ChaCha8Rng::seed_from_u64(0),
            &mut QuantStats::default(),
        )
        .unwrap();
        let back = QuantizedTensor::from_bytes(&qt.to_bytes()).unwrap();
        assert_eq!(back.decode().unwrap(), qt.decode().unwrap());
        let g = Fp8Grid::new(qt.format(), qt.clip());
        for v in qt.decode().unwrap() {
            assert_eq!(g.encode_value(v).unwrap(), g.encode_value(v).unwrap());
        }
    }
}
