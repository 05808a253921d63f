//! Deterministic report emission: fixed significant-digit number formatting,
//! CSV assembly with embedded run metadata, and config hashing.

use std::fmt::Write as _;

/// Format with 12 significant digits, trailing zeros stripped, switching to
/// scientific notation outside [1e-4, 1e12). Mirrors C's `%.12g` closely
/// enough to give stable, byte-identical report files.
pub fn fmt_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    const SIG: i32 = 12;
    let exp = x.abs().log10().floor() as i32;
    if exp < -4 || exp >= SIG {
        let mut s = format!("{:.*e}", (SIG - 1) as usize, x);
        // Trim trailing zeros in the mantissa: "1.200000000000e15" -> "1.2e15".
        if let Some(epos) = s.find('e') {
            let (mant, tail) = s.split_at(epos);
            let mant = mant.trim_end_matches('0').trim_end_matches('.');
            s = format!("{mant}{tail}");
        }
        s
    } else {
        let decimals = (SIG - 1 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        s
    }
}

/// FNV-1a hash over canonical bytes; used to stamp configs into artifacts.
pub fn fnv1a_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Metadata embedded at the top of every emitted artifact.
#[derive(Debug, Clone, Copy)]
pub struct RunMeta {
    pub config_hash: u64,
    pub seed: u64,
}

impl RunMeta {
    pub fn comment_header(&self) -> String {
        format!(
            "# config_hash={:016x}\n# seed={}\n",
            self.config_hash, self.seed
        )
    }
}

/// Assemble a CSV with metadata comment lines, a header row, and `%.12g`
/// style numeric cells. Cells are emitted verbatim, so callers format
/// numbers through [`fmt_g`].
pub fn csv_document(meta: &RunMeta, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = meta.comment_header();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}
