//! 16-digit healthcare identifiers: ISO 7812 layout with a Luhn check digit.
//!
//! Layout, left to right:
//!
//! ```text
//!  8 | 0 0 1 5 6 | 7 8 9 8 7 6 1 2 3 | 4
//! MII                                   (first digit of the IIN)
//! \---- IIN ---/ \------ IAI ------/  check
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const HI_LEN: usize = 16;
pub const IIN_LEN: usize = 6;
pub const IAI_LEN: usize = 9;
pub const PREFIX_LEN: usize = IIN_LEN + IAI_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("expected {expected} digits, found {found} characters")]
    Length { expected: usize, found: usize },
    #[error("non-digit character at position {position}")]
    NonDigit { position: usize },
    #[error("Luhn checksum failed (sum mod 10 = {remainder})")]
    Checksum { remainder: u8 },
}

impl IdError {
    pub fn code(&self) -> &'static str {
        match self {
            IdError::Length { .. } => "LENGTH",
            IdError::NonDigit { .. } => "NON_DIGIT",
            IdError::Checksum { .. } => "CHECKSUM",
        }
    }
}

/// Failure codes carried in a [`ValidationReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Failure {
    Length,
    NonDigit,
    Checksum,
}

impl Failure {
    pub fn code(self) -> &'static str {
        match self {
            Failure::Length => "LENGTH",
            Failure::NonDigit => "NON_DIGIT",
            Failure::Checksum => "CHECKSUM",
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub well_formed: bool,
    pub luhn_valid: bool,
    pub failures: Vec<Failure>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.failures.is_empty()
    }
}

/// A parsed, Luhn-valid 16-digit identifier. Stored as ASCII digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HealthcareIdentifier([u8; HI_LEN]);

impl HealthcareIdentifier {
    pub fn as_str(&self) -> &str {
        // Only ever constructed from ASCII digits.
        std::str::from_utf8(&self.0).expect("ascii digits")
    }

    /// Major industry identifier.
    pub fn mii(&self) -> u8 {
        self.0[0] - b'0'
    }

    /// Issuer identifier number; its first digit is the MII.
    pub fn iin(&self) -> &str {
        &self.as_str()[..IIN_LEN]
    }

    /// Individual account identifier.
    pub fn iai(&self) -> &str {
        &self.as_str()[IIN_LEN..PREFIX_LEN]
    }

    pub fn check_digit(&self) -> u8 {
        self.0[HI_LEN - 1] - b'0'
    }
}

impl fmt::Display for HealthcareIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HealthcareIdentifier {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hi(s)
    }
}

/// Doubled-digit contribution, with the "subtract 9" reduction folded in.
const DOUBLED: [u32; 10] = [0, 2, 4, 6, 8, 1, 3, 5, 7, 9];

/// Luhn sum over ASCII digits. `check_included` says whether the rightmost
/// digit is the check digit (undoubled) or the digit just left of a missing one
/// (doubled).
fn luhn_sum(digits: &[u8], check_included: bool) -> u32 {
    digits
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &b)| {
            let d = u32::from(b - b'0');
            if (i % 2 == 1) == check_included {
                DOUBLED[d as usize]
            } else {
                d
            }
        })
        .sum()
}

fn check_digits(text: &str, expected: usize) -> Result<&[u8], IdError> {
    let found = text.chars().count();
    if found != expected {
        return Err(IdError::Length { expected, found });
    }
    let bytes = text.as_bytes();
    if let Some(position) = bytes.iter().position(|b| !b.is_ascii_digit()) {
        return Err(IdError::NonDigit { position });
    }
    Ok(bytes)
}

/// Parses a 16-digit identifier. Separators are not stripped.
pub fn parse_hi(text: &str) -> Result<HealthcareIdentifier, IdError> {
    let bytes = check_digits(text, HI_LEN)?;
    let remainder = (luhn_sum(bytes, true) % 10) as u8;
    if remainder != 0 {
        return Err(IdError::Checksum { remainder });
    }
    let mut digits = [0u8; HI_LEN];
    digits.copy_from_slice(bytes);
    Ok(HealthcareIdentifier(digits))
}

/// Check digit completing a 15-digit prefix.
pub fn luhn_check_digit(prefix: &str) -> Result<u8, IdError> {
    let bytes = check_digits(prefix, PREFIX_LEN)?;
    Ok(((10 - luhn_sum(bytes, false) % 10) % 10) as u8)
}

/// Never fails; every problem is reported as data.
pub fn validate_hi(text: &str) -> ValidationReport {
    let mut failures = Vec::new();
    if text.chars().count() != HI_LEN {
        failures.push(Failure::Length);
    }
    if !text.bytes().all(|b| b.is_ascii_digit()) {
        failures.push(Failure::NonDigit);
    }
    let well_formed = failures.is_empty();
    let luhn_valid = well_formed && luhn_sum(text.as_bytes(), true).is_multiple_of(10);
    if well_formed && !luhn_valid {
        failures.push(Failure::Checksum);
    }
    ValidationReport {
        well_formed,
        luhn_valid,
        failures,
    }
}

pub fn generate_hi(iin: &str, iai: &str) -> Result<HealthcareIdentifier, IdError> {
    check_digits(iin, IIN_LEN)?;
    check_digits(iai, IAI_LEN)?;
    let mut prefix = String::with_capacity(HI_LEN);
    prefix.push_str(iin);
    prefix.push_str(iai);
    let check = luhn_check_digit(&prefix)?;
    prefix.push(char::from(b'0' + check));
    parse_hi(&prefix)
}

/// Optional issuer allow-list. Empty means every IIN is accepted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IssuerAllowList {
    iins: BTreeSet<String>,
}

impl IssuerAllowList {
    pub fn new<I, S>(iins: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            iins: iins.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.iins.is_empty()
    }

    pub fn permits(&self, hi: &HealthcareIdentifier) -> bool {
        self.iins.is_empty() || self.iins.contains(hi.iin())
    }
}
