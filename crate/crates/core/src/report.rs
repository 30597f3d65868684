//! Machine-readable check records shared by every suite.

use serde::{Deserialize, Serialize};

use crate::series::Orders;

/// Outcome of one residual check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check: String,
    pub anchor: String,
    pub orders: Option<Orders>,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRecord {
    /// Passes when the residual is finite and within tolerance.
    pub fn new(check: &str, anchor: &str, orders: Option<Orders>, residual: f64, tolerance: f64) -> Self {
        Self {
            check: check.to_string(),
            anchor: anchor.to_string(),
            orders,
            residual,
            tolerance,
            pass: residual.is_finite() && residual <= tolerance,
        }
    }

    /// A record for a boolean property; residual 0 on success, 1 on failure.
    pub fn flag(check: &str, anchor: &str, ok: bool) -> Self {
        Self::new(check, anchor, None, if ok { 0.0 } else { 1.0 }, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_flag_follows_tolerance() {
        assert!(CheckRecord::new("a", "x", None, 1e-12, 1e-10).pass);
        assert!(!CheckRecord::new("a", "x", None, 1e-8, 1e-10).pass);
        assert!(!CheckRecord::new("a", "x", None, f64::NAN, 1e-10).pass);
        assert!(CheckRecord::flag("a", "x", true).pass);
        assert!(!CheckRecord::flag("a", "x", false).pass);
    }

    #[test]
    fn json_keys_are_stable() {
        let r = CheckRecord::new("c", "a", Some(Orders::new(2, 2)), 0.0, 1.0);
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"check":"c","anchor":"a","orders":{"hbar":2,"lambda":2},"residual":0.0,"tolerance":1.0,"pass":true}"#);
    }
}
