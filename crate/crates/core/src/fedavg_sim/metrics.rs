//! Per-round records and their CSV form.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 7] = [
    "round",
    "loss",
    "gap",
    "grad_norm_sq",
    "clips",
    "power_watts",
    "epsilon",
];

/// One communication round.
///
/// `loss` and `gap` are evaluated at the model produced by the round;
/// `grad_norm_sq` at the model broadcast at its start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub loss: f64,
    pub gap: Option<f64>,
    pub grad_norm_sq: f64,
    pub clips: u64,
    pub power_watts: f64,
    #[serde(with = "crate::serde_inf")]
    pub epsilon: f64,
}

/// Formats like C's `%.12g`.
pub fn format_g12(x: f64) -> String {
    const P: i32 = 12;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mant, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..P).contains(&exp) {
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        trim_zeros(&format!("{:.*}", (P - 1 - exp) as usize, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_csv<W: Write>(rows: &[RoundMetrics], out: W) -> Result<()> {
    let io = |e: csv::Error| Error::Parse(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            format_g12(r.loss),
            r.gap.map(format_g12).unwrap_or_default(),
            format_g12(r.grad_norm_sq),
            r.clips.to_string(),
            format_g12(r.power_watts),
            format_g12(r.epsilon),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Parse(format!("csv: {e}")))?;
    Ok(())
}
