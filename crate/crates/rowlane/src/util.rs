//! Small shared helpers.

/// Round to nearest integer with exact halves going up (toward +inf).
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}
