//! Float formatting shared by the text serializers.

use crate::error::{Error, Result};

/// Scientific notation with 17 significant digits; parses back to the same
/// binary64 value.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn parse_f64(field: &str, location: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::parse(location, format!("bad number {field:?}")))
}

pub(crate) fn parse_floats(line: &str, location: &str) -> Result<Vec<f64>> {
    line.split_whitespace().map(|f| parse_f64(f, location)).collect()
}
