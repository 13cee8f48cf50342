//! Small RFC-4180 CSV writer and float formatting shared by the runner
//! and the field dumps. Floats are printed with 17 significant digits so
//! that outputs round-trip exactly.

use std::io::Write;

use crate::error::Result;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn needs_quoting(s: &str) -> bool {
    s.contains(',') || s.contains('"') || s.contains('\n') || s.contains('\r')
}

/// Write one CSV record with CRLF termination, quoting per RFC 4180.
pub fn write_csv_row<S: AsRef<str>>(w: &mut impl Write, fields: &[S]) -> Result<()> {
    let mut first = true;
    for f in fields {
        if !first {
            w.write_all(b",")?;
        }
        first = false;
        let s = f.as_ref();
        if needs_quoting(s) {
            w.write_all(b"\"")?;
            w.write_all(s.replace('"', "\"\"").as_bytes())?;
            w.write_all(b"\"")?;
        } else {
            w.write_all(s.as_bytes())?;
        }
    }
    w.write_all(b"\r\n")?;
    Ok(())
}
