//! Report formatting. Numbers are rounded to 9 significant digits so that
//! reruns print identical text.

use ccver_core::bab::Certificate;
use ccver_core::mpcc::MpccSolution;
use serde_json::{json, Value};

pub fn round9(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

/// JSON number with 9 significant digits; non-finite values become strings.
pub fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(round9(v))
    } else {
        json!(v.to_string())
    }
}

pub fn vec(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|&x| num(x)).collect())
}

/// CSV cell with 9 significant digits.
pub fn cell(v: f64) -> String {
    round9(v).to_string()
}

pub fn certificate(c: &Certificate) -> Value {
    let mut out = serde_json::to_value(c).expect("certificate serializes");
    for key in ["lower", "upper", "gap"] {
        out[key] = num(out[key].as_f64().unwrap_or(f64::NAN));
    }
    if let Some(x) = &c.counterexample {
        out["counterexample"] = vec(x);
    }
    out["history"] = Value::Array(
        c.history
            .iter()
            .map(|h| json!({"round": h.round, "lower": num(h.lower), "upper": num(h.upper)}))
            .collect(),
    );
    out
}

pub fn solution(s: &MpccSolution) -> Value {
    json!({
        "objective": num(s.objective),
        "nlp_objective": num(s.nlp_objective),
        "x_star": vec(s.x_star.as_slice().unwrap_or_default()),
        "status": s.status,
        "kkt_residual": num(s.kkt_residual),
        "primal_infeasibility": num(s.primal_infeasibility),
        "ipm_iterations": s.ipm_iterations,
        "total_iterations": s.total_iterations,
        "polished": s.polished,
        "pattern": s.pattern,
        "partition": {
            "active": s.partition_active,
            "inactive": s.partition_inactive,
            "undecided": s.partition_undecided,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding() {
        assert_eq!(round9(-2.899999918123), -2.89999992);
        assert_eq!(round9(1.0 / 3.0), 0.333333333);
        assert_eq!(cell(0.1 + 0.2), "0.3");
        assert_eq!(num(f64::INFINITY), json!("inf"));
        assert_eq!(round9(0.0), 0.0);
    }
}
