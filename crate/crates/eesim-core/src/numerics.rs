//! Adaptive 8-bit floating-point format, quantization, and the fixed-point
//! vector-MAC arithmetic of the processing unit.
//!
//! A code word is `[sign | exponent | mantissa]` (MSB first). The two codes
//! with zero exponent and zero mantissa are the signed zeros; every other
//! code is a normal `(1 + f/2^M) * 2^(e + bias)`. There are no subnormals,
//! so the zero-skip test on a vector is a plain all-zero-codes test.

use alloc::{format, vec, vec::Vec};

use crate::error::{CoreError, Result};

/// Total word size of the quantized format.
pub const TOTAL_BITS: u32 = 8;

/// `2^i` for integer `i`, exact over the f64 range.
#[inline]
pub(crate) fn exp2i(i: i32) -> f64 {
    libm::exp2(i as f64)
}

/// Round to nearest, ties to even, for nonnegative inputs.
#[inline]
fn round_half_even(x: f64) -> u32 {
    let floor = libm::floor(x);
    let diff = x - floor;
    let down = floor as u32;
    if diff > 0.5 || (diff == 0.5 && down % 2 == 1) {
        down + 1
    } else {
        down
    }
}

/// 8-bit adaptive floating-point format: 1 sign bit, `exponent_bits`
/// exponent bits, `7 - exponent_bits` mantissa bits, plus a per-tensor
/// exponent bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FloatFormat {
    pub exponent_bits: u8,
    pub exponent_bias: i32,
}

impl FloatFormat {
    /// Default exponent width. See [`FloatFormat::new`] for the valid range.
    pub const DEFAULT_EXPONENT_BITS: u8 = 4;

    pub fn new(exponent_bits: u8, exponent_bias: i32) -> Result<Self> {
        if !(1..=6).contains(&exponent_bits) {
            return Err(CoreError::InvalidFormat(format!(
                "exponent_bits must be in 1..=6, got {exponent_bits}"
            )));
        }
        Ok(Self {
            exponent_bits,
            exponent_bias,
        })
    }

    /// Format with the default 4-bit exponent and the given bias.
    pub fn with_bias(exponent_bias: i32) -> Self {
        Self {
            exponent_bits: Self::DEFAULT_EXPONENT_BITS,
            exponent_bias,
        }
    }

    #[inline]
    pub fn mantissa_bits(&self) -> u32 {
        TOTAL_BITS - 1 - self.exponent_bits as u32
    }

    #[inline]
    fn max_exponent_field(&self) -> u32 {
        (1u32 << self.exponent_bits) - 1
    }

    /// Largest representable magnitude: `(2 - 2^-M) * 2^(e_max + bias)`.
    pub fn max_value(&self) -> f64 {
        let m = self.mantissa_bits();
        (2.0 - exp2i(-(m as i32))) * exp2i(self.max_exponent_field() as i32 + self.exponent_bias)
    }

    /// Smallest positive representable magnitude: `(1 + 2^-M) * 2^bias`.
    /// The `(e=0, f=0)` slot is taken by zero.
    pub fn min_positive(&self) -> f64 {
        let m = self.mantissa_bits();
        (1.0 + exp2i(-(m as i32))) * exp2i(self.exponent_bias)
    }

    /// Code for +0.0.
    pub const ZERO_CODE: u8 = 0x00;

    /// Largest positive code (sign 0, all exponent and mantissa bits set).
    pub const MAX_CODE: u8 = 0x7f;

    /// True iff the code is one of the two signed zeros.
    #[inline]
    pub fn is_zero_code(code: u8) -> bool {
        code & 0x7f == 0
    }

    /// Exact decode of one code word.
    pub fn decode(&self, code: u8) -> f64 {
        let m = self.mantissa_bits();
        let e_field = (code as u32 >> m) & self.max_exponent_field();
        let f_field = code as u32 & ((1 << m) - 1);
        let negative = code & 0x80 != 0;
        if e_field == 0 && f_field == 0 {
            return if negative { -0.0 } else { 0.0 };
        }
        let sig = 1.0 + f_field as f64 * exp2i(-(m as i32));
        let mag = sig * exp2i(e_field as i32 + self.exponent_bias);
        if negative {
            -mag
        } else {
            mag
        }
    }

    /// Round-to-nearest-even encode of one finite value. Magnitudes above
    /// [`FloatFormat::max_value`] saturate; zeros keep their sign.
    pub fn encode(&self, value: f64) -> u8 {
        debug_assert!(value.is_finite());
        let sign_bit = if value.is_sign_negative() { 0x80u8 } else { 0 };
        if value == 0.0 {
            return sign_bit;
        }
        let m = self.mantissa_bits();
        let e_max = self.max_exponent_field() as i32;
        let a = libm::fabs(value);
        if a >= self.max_value() {
            return sign_bit | Self::MAX_CODE;
        }

        // Binade index relative to the bias; fix up fp error at boundaries
        // so that 2^(e+bias) <= a < 2^(e+1+bias) holds exactly.
        let mut e = (libm::floor(libm::log2(a)) as i32) - self.exponent_bias;
        while a < exp2i(e + self.exponent_bias) {
            e -= 1;
        }
        while a >= exp2i(e + 1 + self.exponent_bias) {
            e += 1;
        }

        if e < 0 {
            // Below the first binade: nearest of 0 and the smallest normal.
            let g1 = self.min_positive();
            let half = g1 * 0.5;
            if a <= half {
                // Tie resolves to the even (zero) mantissa.
                return sign_bit;
            }
            return sign_bit | 1;
        }

        // a / 2^(e+bias) is in [1, 2); the fraction below is exact.
        let frac = (a / exp2i(e + self.exponent_bias) - 1.0) * exp2i(m as i32);
        let mut f = round_half_even(frac);
        if f == 1 << m {
            f = 0;
            e += 1;
            if e > e_max {
                return sign_bit | Self::MAX_CODE;
            }
        }
        if e == 0 && f == 0 {
            // The zero slot is not a grid point; the nearest grid point for
            // any magnitude >= 2^bias is the smallest normal.
            f = 1;
        }
        sign_bit | ((e as u8) << m) | f as u8
    }

    /// Decode of all 256 codes, indexed by code word.
    pub fn decode_table(&self) -> [f64; 256] {
        let mut table = [0.0; 256];
        for (code, slot) in table.iter_mut().enumerate() {
            *slot = self.decode(code as u8);
        }
        table
    }
}

impl Default for FloatFormat {
    fn default() -> Self {
        Self {
            exponent_bits: Self::DEFAULT_EXPONENT_BITS,
            exponent_bias: 0,
        }
    }
}

/// Smallest bias such that `max(|values|)` fits in `fmt` without overflow.
///
/// All-zero input is defined to yield bias 0.
pub fn fit_exponent_bias(values: &[f64], fmt: &FloatFormat) -> Result<i32> {
    if values.is_empty() {
        return Err(CoreError::InvalidInput("empty input".into()));
    }
    let mut max_abs = 0.0f64;
    for &v in values {
        if !v.is_finite() {
            return Err(CoreError::InvalidInput("non-finite input value".into()));
        }
        let a = libm::fabs(v);
        if a > max_abs {
            max_abs = a;
        }
    }
    if max_abs == 0.0 {
        return Ok(0);
    }
    let m = fmt.mantissa_bits() as i32;
    let e_max = ((1u32 << fmt.exponent_bits) - 1) as i32;
    // max representable at bias b: (2 - 2^-M) * 2^(e_max + b)
    let max_at = |b: i32| (2.0 - exp2i(-m)) * exp2i(e_max + b);
    let mut bias = libm::ceil(libm::log2(max_abs)) as i32 - e_max;
    while max_at(bias) < max_abs {
        bias += 1;
    }
    while max_at(bias - 1) >= max_abs {
        bias -= 1;
    }
    Ok(bias)
}

/// Dense tensor of 8-bit adaptive-float codes.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantTensor {
    shape: Vec<usize>,
    codes: Vec<u8>,
    format: FloatFormat,
}

impl QuantTensor {
    pub fn from_codes(shape: Vec<usize>, codes: Vec<u8>, format: FloatFormat) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if codes.len() != expected {
            return Err(CoreError::LengthMismatch {
                expected,
                got: codes.len(),
            });
        }
        Ok(Self {
            shape,
            codes,
            format,
        })
    }

    /// Round-to-nearest-even quantization onto the representable grid.
    pub fn quantize(values: &[f64], shape: Vec<usize>, format: FloatFormat) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(CoreError::LengthMismatch {
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidInput("non-finite input value".into()));
        }
        let codes = values.iter().map(|&v| format.encode(v)).collect();
        Ok(Self {
            shape,
            codes,
            format,
        })
    }

    /// Quantize with the exponent bias fitted to the data.
    pub fn quantize_fit(values: &[f64], shape: Vec<usize>, exponent_bits: u8) -> Result<Self> {
        let mut fmt = FloatFormat::new(exponent_bits, 0)?;
        fmt.exponent_bias = fit_exponent_bias(values, &fmt)?;
        Self::quantize(values, shape, fmt)
    }

    pub fn zeros(shape: Vec<usize>, format: FloatFormat) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            codes: vec![FloatFormat::ZERO_CODE; len],
            format,
        }
    }

    /// Exact decode of every code.
    pub fn dequantize(&self) -> Vec<f64> {
        let table = self.format.decode_table();
        self.codes.iter().map(|&c| table[c as usize]).collect()
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    #[inline]
    pub fn format(&self) -> &FloatFormat {
        &self.format
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(CoreError::ShapeMismatch(format!(
                "expected rank-2 tensor, got rank {}",
                self.shape.len()
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Transpose of a rank-2 tensor (codes permuted, format kept).
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut codes = vec![0u8; r * c];
        for i in 0..r {
            for j in 0..c {
                codes[j * r + i] = self.codes[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            codes,
            format: self.format,
        })
    }

    /// Contiguous column block `[.., start..start+width]` of a rank-2 tensor.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + width > c {
            return Err(CoreError::ShapeMismatch(format!(
                "column block {start}..{} exceeds {c} columns",
                start + width
            )));
        }
        let mut codes = Vec::with_capacity(r * width);
        for i in 0..r {
            codes.extend_from_slice(&self.codes[i * c + start..i * c + start + width]);
        }
        Ok(Self {
            shape: vec![r, width],
            codes,
            format: self.format,
        })
    }

    /// Row `index` of a rank-2 tensor as a `[1, cols]` tensor.
    pub fn row(&self, index: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if index >= r {
            return Err(CoreError::ShapeMismatch(format!("row {index} out of {r}")));
        }
        Ok(Self {
            shape: vec![1, c],
            codes: self.codes[index * c..(index + 1) * c].to_vec(),
            format: self.format,
        })
    }

    /// Gather rows of a rank-2 tensor into a new `[indices.len(), cols]`
    /// tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut codes = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(CoreError::ShapeMismatch(format!("row {i} out of {r}")));
            }
            codes.extend_from_slice(&self.codes[i * c..(i + 1) * c]);
        }
        Ok(Self {
            shape: vec![indices.len(), c],
            codes,
            format: self.format,
        })
    }
}

/// 32-bit fixed-point accumulator with a configurable integer/fractional
/// split. Additions saturate instead of wrapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accumulator {
    raw: i32,
    integer_bits: u8,
    fractional_bits: u8,
}

impl Accumulator {
    pub const DEFAULT_INTEGER_BITS: u8 = 16;
    pub const DEFAULT_FRACTIONAL_BITS: u8 = 16;

    pub fn new(integer_bits: u8, fractional_bits: u8) -> Result<Self> {
        if integer_bits as u32 + fractional_bits as u32 != 32 {
            return Err(CoreError::InvalidFormat(format!(
                "integer_bits + fractional_bits must be 32, got {integer_bits}+{fractional_bits}"
            )));
        }
        Ok(Self {
            raw: 0,
            integer_bits,
            fractional_bits,
        })
    }

    pub fn zero() -> Self {
        Self {
            raw: 0,
            integer_bits: Self::DEFAULT_INTEGER_BITS,
            fractional_bits: Self::DEFAULT_FRACTIONAL_BITS,
        }
    }

    pub fn from_f64(value: f64, integer_bits: u8, fractional_bits: u8) -> Result<Self> {
        let mut acc = Self::new(integer_bits, fractional_bits)?;
        acc.saturating_add_raw(fixed_of(value, fractional_bits));
        Ok(acc)
    }

    #[inline]
    pub fn fractional_bits(&self) -> u8 {
        self.fractional_bits
    }

    #[inline]
    pub fn integer_bits(&self) -> u8 {
        self.integer_bits
    }

    #[inline]
    pub fn raw(&self) -> i32 {
        self.raw
    }

    pub fn value(&self) -> f64 {
        self.raw as f64 * exp2i(-(self.fractional_bits as i32))
    }

    #[inline]
    fn saturating_add_raw(&mut self, delta: i64) {
        let sum = self.raw as i64 + delta;
        self.raw = sum.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
    }
}

impl Default for Accumulator {
    fn default() -> Self {
        Self::zero()
    }
}

/// Value converted to fixed point (round half away from zero, the usual
/// datapath convention). The f64 -> i64 cast saturates on extremes.
#[inline]
fn fixed_of(value: f64, fractional_bits: u8) -> i64 {
    libm::round(value * exp2i(fractional_bits as i32)) as i64
}

/// Vector MAC: `acc + sum(a_i * b_i)` in saturating 32-bit fixed point.
///
/// The returned flag is true iff either operand vector is entirely zero
/// codes; a skipped VMAC contributes exactly zero, so skipping never changes
/// the numeric result.
pub fn vmac(
    a: &[u8],
    a_fmt: &FloatFormat,
    b: &[u8],
    b_fmt: &FloatFormat,
    mut acc: Accumulator,
) -> Result<(Accumulator, bool)> {
    if a.len() != b.len() {
        return Err(CoreError::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let skip = a.iter().all(|&c| FloatFormat::is_zero_code(c))
        || b.iter().all(|&c| FloatFormat::is_zero_code(c));
    if skip {
        return Ok((acc, true));
    }
    let scale = exp2i(acc.fractional_bits() as i32);
    for (&ca, &cb) in a.iter().zip(b) {
        // Product of two 8-bit-significand values is exact in f64; the only
        // rounding is the conversion into the accumulator grid.
        let term = libm::round(a_fmt.decode(ca) * b_fmt.decode(cb) * scale) as i64;
        acc.saturating_add_raw(term);
    }
    Ok((acc, false))
}

/// Operation counts reported by [`matmul_tiled`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatmulStats {
    /// `(rows/n) * (cols/n) * (inner/n) * n`, a pure function of the padded
    /// shape — sparsity never changes it.
    pub cycles: u64,
    /// Padded MAC volume `rows * cols * inner`.
    pub macs: u64,
    /// Total VMAC invocations (`macs / n`).
    pub vmac_invocations: u64,
    /// Invocations whose skip flag was true.
    pub vmacs_skipped: u64,
}

/// Tiled matrix multiply on the PU datapath: fixed-point accumulation per
/// output element, zero-operand VMACs skipped (energy only; the schedule and
/// the result are unaffected). Dimensions are padded up to multiples of
/// `tile_n` with zero codes.
pub fn matmul_tiled(
    a: &QuantTensor,
    b: &QuantTensor,
    tile_n: usize,
) -> Result<(QuantTensor, MatmulStats)> {
    matmul_tiled_with_acc(
        a,
        b,
        tile_n,
        Accumulator::DEFAULT_INTEGER_BITS,
        Accumulator::DEFAULT_FRACTIONAL_BITS,
    )
}

/// [`matmul_tiled`] with an explicit accumulator split.
pub fn matmul_tiled_with_acc(
    a: &QuantTensor,
    b: &QuantTensor,
    tile_n: usize,
    integer_bits: u8,
    fractional_bits: u8,
) -> Result<(QuantTensor, MatmulStats)> {
    if tile_n == 0 {
        return Err(CoreError::InvalidInput("tile_n must be >= 1".into()));
    }
    if integer_bits as u32 + fractional_bits as u32 != 32 {
        return Err(CoreError::InvalidFormat(
            "integer_bits + fractional_bits must be 32".into(),
        ));
    }
    let (rows, inner_a) = a.dims2()?;
    let (inner_b, cols) = b.dims2()?;
    if inner_a != inner_b {
        return Err(CoreError::ShapeMismatch(format!(
            "inner dimensions disagree: {inner_a} vs {inner_b}"
        )));
    }
    if a.format.exponent_bits != b.format.exponent_bits {
        return Err(CoreError::InvalidFormat(
            "operand exponent widths differ".into(),
        ));
    }
    let n = tile_n;
    let pad = |d: usize| d.div_ceil(n) * n;
    let (rp, kp, cp) = (pad(rows), pad(inner_a), pad(cols));

    // Padded operand planes: A rows scaled into the accumulator grid, B
    // transposed for contiguous inner products. Zero padding is the zero
    // code, so padded segments always raise the skip flag.
    let scale = exp2i(fractional_bits as i32);
    let ta: [f64; 256] = {
        let mut t = a.format.decode_table();
        for v in t.iter_mut() {
            *v *= scale;
        }
        t
    };
    let tb = b.format.decode_table();

    let mut a_plane = vec![0.0f64; rp * kp];
    for i in 0..rows {
        let src = &a.codes[i * inner_a..(i + 1) * inner_a];
        let dst = &mut a_plane[i * kp..i * kp + inner_a];
        for (d, &c) in dst.iter_mut().zip(src) {
            *d = ta[c as usize];
        }
    }
    let mut bt_plane = vec![0.0f64; cp * kp];
    for k in 0..inner_b {
        let src = &b.codes[k * cols..(k + 1) * cols];
        for (j, &c) in src.iter().enumerate() {
            bt_plane[j * kp + k] = tb[c as usize];
        }
    }

    let ktiles = kp / n;
    let zero_flags = |plane: &[f64], major: usize| -> Vec<bool> {
        let mut flags = vec![false; major * ktiles];
        for i in 0..major {
            let row = &plane[i * kp..(i + 1) * kp];
            for t in 0..ktiles {
                flags[i * ktiles + t] = row[t * n..(t + 1) * n].iter().all(|&v| v == 0.0);
            }
        }
        flags
    };
    let a_zero = zero_flags(&a_plane, rp);
    let b_zero = zero_flags(&bt_plane, cp);

    let mut out = vec![0.0f64; rows * cols];
    let mut skipped: u64 = 0;
    let inv_scale = exp2i(-(fractional_bits as i32));
    for i in 0..rp {
        let arow = &a_plane[i * kp..(i + 1) * kp];
        for j in 0..cp {
            let brow = &bt_plane[j * kp..(j + 1) * kp];
            let mut acc: i64 = 0;
            for t in 0..ktiles {
                if a_zero[i * ktiles + t] || b_zero[j * ktiles + t] {
                    skipped += 1;
                    continue;
                }
                for (&av, &bv) in arow[t * n..(t + 1) * n]
                    .iter()
                    .zip(&brow[t * n..(t + 1) * n])
                {
                    let term = libm::round(av * bv) as i64;
                    acc = (acc + term).clamp(i32::MIN as i64, i32::MAX as i64);
                }
            }
            if i < rows && j < cols {
                out[i * cols + j] = acc as f64 * inv_scale;
            }
        }
    }

    let stats = MatmulStats {
        cycles: (rp / n) as u64 * (cp / n) as u64 * ktiles as u64 * n as u64,
        macs: rp as u64 * cp as u64 * kp as u64,
        vmac_invocations: rp as u64 * cp as u64 * ktiles as u64,
        vmacs_skipped: skipped,
    };
    let result = QuantTensor::quantize_fit(&out, vec![rows, cols], a.format.exponent_bits)?;
    Ok((result, stats))
}
