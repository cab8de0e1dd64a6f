//! Four-state comparison of Verilog literal texts.
//!
//! Values are compared bit by bit after normalising both sides to an
//! LSB-aligned bit string. A DUT bit equal to `x` or `z` is always a
//! mismatch unless the expected bit is the don't-care marker `?`.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bit {
    Zero,
    One,
    X,
    Z,
    DontCare,
}

impl Bit {
    fn from_char(c: char) -> Option<Bit> {
        match c.to_ascii_lowercase() {
            '0' => Some(Bit::Zero),
            '1' => Some(Bit::One),
            'x' => Some(Bit::X),
            'z' => Some(Bit::Z),
            '?' => Some(Bit::DontCare),
            _ => None,
        }
    }
}

/// A parsed literal, least significant bit first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicValue {
    bits: Vec<Bit>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BadLiteral(pub String);

impl fmt::Display for BadLiteral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "not a Verilog literal: {:?}", self.0)
    }
}

impl LogicValue {
    /// Parses sized/based literals (`4'b01x0`, `'hF`, `8'd12`) and bare
    /// digit strings. A bare string made only of `01xz?` characters is read
    /// as binary (the `%b` display format), otherwise as decimal.
    pub fn parse(text: &str) -> Result<LogicValue, BadLiteral> {
        let cleaned: String = text.trim().chars().filter(|c| *c != '_').collect();
        if cleaned.is_empty() {
            return Err(BadLiteral(text.to_string()));
        }
        let (width, base, digits) = match cleaned.find('\'') {
            Some(pos) => {
                let width = if pos == 0 {
                    None
                } else {
                    Some(
                        cleaned[..pos]
                            .parse::<usize>()
                            .map_err(|_| BadLiteral(text.to_string()))?,
                    )
                };
                let mut rest = cleaned[pos + 1..].chars();
                let mut base = rest.next().ok_or_else(|| BadLiteral(text.to_string()))?;
                if base == 's' || base == 'S' {
                    base = rest.next().ok_or_else(|| BadLiteral(text.to_string()))?;
                }
                (width, base.to_ascii_lowercase(), rest.as_str().to_string())
            }
            None => {
                let binary_like = cleaned.chars().all(|c| Bit::from_char(c).is_some());
                (None, if binary_like { 'b' } else { 'd' }, cleaned.clone())
            }
        };
        if digits.is_empty() {
            return Err(BadLiteral(text.to_string()));
        }
        let mut bits = match base {
            'b' => Self::radix_bits(&digits, 1, text)?,
            'o' => Self::radix_bits(&digits, 3, text)?,
            'h' => Self::radix_bits(&digits, 4, text)?,
            'd' => Self::decimal_bits(&digits, text)?,
            _ => return Err(BadLiteral(text.to_string())),
        };
        if let Some(w) = width {
            if bits.len() > w {
                bits.truncate(w);
            } else {
                // x/z extend from the top bit, numbers zero-extend
                let fill = match bits.last() {
                    Some(b @ (Bit::X | Bit::Z | Bit::DontCare)) => *b,
                    _ => Bit::Zero,
                };
                bits.resize(w, fill);
            }
        }
        Ok(LogicValue { bits })
    }

    fn radix_bits(digits: &str, bits_per_digit: u32, text: &str) -> Result<Vec<Bit>, BadLiteral> {
        let mut bits = Vec::with_capacity(digits.len() * bits_per_digit as usize);
        for c in digits.chars().rev() {
            if let Some(special @ (Bit::X | Bit::Z | Bit::DontCare)) = Bit::from_char(c) {
                bits.extend(std::iter::repeat(special).take(bits_per_digit as usize));
                continue;
            }
            let v = c
                .to_digit(1 << bits_per_digit)
                .ok_or_else(|| BadLiteral(text.to_string()))?;
            for i in 0..bits_per_digit {
                bits.push(if (v >> i) & 1 == 1 { Bit::One } else { Bit::Zero });
            }
        }
        Ok(bits)
    }

    fn decimal_bits(digits: &str, text: &str) -> Result<Vec<Bit>, BadLiteral> {
        let lower = digits.to_ascii_lowercase();
        if lower == "x" || lower == "z" || lower == "?" {
            return Ok(vec![Bit::from_char(lower.chars().next().unwrap()).unwrap()]);
        }
        let n = num_bigint::BigUint::parse_bytes(digits.as_bytes(), 10)
            .ok_or_else(|| BadLiteral(text.to_string()))?;
        let mut bits: Vec<Bit> = (0..n.bits())
            .map(|i| if n.bit(i) { Bit::One } else { Bit::Zero })
            .collect();
        if bits.is_empty() {
            bits.push(Bit::Zero);
        }
        Ok(bits)
    }

    fn bit(&self, i: usize) -> Bit {
        self.bits.get(i).copied().unwrap_or(Bit::Zero)
    }
}

/// Applies the output comparison rule to one DUT/expected pair.
///
/// Unparseable literals fall back to exact text equality, except that a DUT
/// text of bare `x`/`z` never matches.
pub fn values_match(dut: &str, expected: &str) -> bool {
    match (LogicValue::parse(dut), LogicValue::parse(expected)) {
        (Ok(d), Ok(e)) => {
            let width = d.bits.len().max(e.bits.len());
            (0..width).all(|i| match (d.bit(i), e.bit(i)) {
                (_, Bit::DontCare) => true,
                (Bit::X | Bit::Z | Bit::DontCare, _) => false,
                (a, b) => a == b,
            })
        }
        _ => dut.trim() == expected.trim(),
    }
}
