//! The 11-dimensional action vector and its 256-bin encoding.
//!
//! Every control command is a fixed-order vector
//! `[m, g_x, g_y, g_z, th_xy, th_yz, th_zx, c, b_x, b_y, b_th]`:
//! a 4-way mode, gripper translation, gripper orientation, closedness, and
//! base motion. Each slot is scaled to `[0, 1]` by its declared range and
//! quantized into 256 bins; the policy classifies bins and executed actions
//! are decoded back to bin centers.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of action dimensions.
pub const ACTION_DIMS: usize = 11;
/// Number of quantization bins per dimension.
pub const NUM_BINS: usize = 256;

/// The 4-way control mode occupying slot 0.
///
/// Embedded in the scalar slot as the values 0, 1, 2, 3 so that the uniform
/// binning path serves all 11 slots; decoding snaps to the nearest of the
/// four scale points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Terminate,
    ArmOnly,
    BaseOnly,
    ArmAndBase,
}

impl Mode {
    /// Scalar embedding of the mode into its action slot.
    pub fn as_value(self) -> f64 {
        match self {
            Mode::Terminate => 0.0,
            Mode::ArmOnly => 1.0,
            Mode::BaseOnly => 2.0,
            Mode::ArmAndBase => 3.0,
        }
    }

    /// Nearest categorical mode for a decoded slot value.
    pub fn from_value(v: f64) -> Mode {
        let idx = v.round().clamp(0.0, 3.0) as u8;
        match idx {
            0 => Mode::Terminate,
            1 => Mode::ArmOnly,
            2 => Mode::BaseOnly,
            _ => Mode::ArmAndBase,
        }
    }
}

/// A continuous control command.
///
/// `g_*` is the commanded gripper position, `theta_*` are orientation
/// setpoints, `closedness` is the gripper closing fraction and `b_*` are
/// base motion slots (identically neutral in all generated data: the base
/// stays stationary). The simulator moves toward commanded poses with a
/// bounded per-step displacement, so setpoints may sit far from the
/// current pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub mode: Mode,
    pub g_x: f64,
    pub g_y: f64,
    pub g_z: f64,
    pub theta_xy: f64,
    pub theta_yz: f64,
    pub theta_zx: f64,
    pub closedness: f64,
    pub b_x: f64,
    pub b_y: f64,
    pub b_theta: f64,
}

impl ActionVector {
    /// The terminate command: mode 0 and neutral values in every other slot.
    pub fn terminate() -> ActionVector {
        ActionVector {
            mode: Mode::Terminate,
            g_x: 0.0,
            g_y: 0.0,
            g_z: 0.0,
            theta_xy: 0.0,
            theta_yz: 0.0,
            theta_zx: 0.0,
            closedness: 0.0,
            b_x: 0.0,
            b_y: 0.0,
            b_theta: 0.0,
        }
    }

    /// An arm-only command with zero translation and the given setpoints.
    pub fn hold(theta_zx: f64, closedness: f64) -> ActionVector {
        ActionVector {
            mode: Mode::ArmOnly,
            theta_zx,
            closedness,
            ..ActionVector::terminate()
        }
    }

    /// The 11 scalar slots in fixed order.
    pub fn slots(&self) -> [f64; ACTION_DIMS] {
        [
            self.mode.as_value(),
            self.g_x,
            self.g_y,
            self.g_z,
            self.theta_xy,
            self.theta_yz,
            self.theta_zx,
            self.closedness,
            self.b_x,
            self.b_y,
            self.b_theta,
        ]
    }

    /// Rebuilds a vector from fixed-order slots; the mode slot snaps to the
    /// nearest categorical point.
    pub fn from_slots(s: &[f64; ACTION_DIMS]) -> ActionVector {
        ActionVector {
            mode: Mode::from_value(s[0]),
            g_x: s[1],
            g_y: s[2],
            g_z: s[3],
            theta_xy: s[4],
            theta_yz: s[5],
            theta_zx: s[6],
            closedness: s[7],
            b_x: s[8],
            b_y: s[9],
            b_theta: s[10],
        }
    }
}

/// Human-readable slot names, used in range errors and reports.
pub const SLOT_NAMES: [&str; ACTION_DIMS] = [
    "mode", "g_x", "g_y", "g_z", "theta_xy", "theta_yz", "theta_zx", "closedness", "b_x", "b_y",
    "b_theta",
];

/// Per-dimension `(lo, hi)` ranges, declared once in the environment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRanges {
    ranges: [(f64, f64); ACTION_DIMS],
}

impl ActionRanges {
    /// Builds ranges from `(lo, hi)` pairs, rejecting any with `lo >= hi`.
    pub fn new(ranges: [(f64, f64); ACTION_DIMS]) -> Result<ActionRanges> {
        for (i, (lo, hi)) in ranges.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "action range for {} must have lo < hi, got ({lo}, {hi})",
                    SLOT_NAMES[i]
                )));
            }
        }
        Ok(ActionRanges { ranges })
    }

    /// Default ranges: gripper positions span the workspace square and the
    /// unit height column, angles span a full turn, closedness is `[0, 1]`,
    /// base slots are `(-1, 1)` with neutral 0, mode embeds over `(0, 3)`.
    pub fn default_for(workspace: f64) -> ActionRanges {
        use std::f64::consts::PI;
        ActionRanges {
            ranges: [
                (0.0, 3.0),
                (0.0, workspace),
                (0.0, workspace),
                (0.0, 1.0),
                (-PI, PI),
                (-PI, PI),
                (-PI, PI),
                (0.0, 1.0),
                (-1.0, 1.0),
                (-1.0, 1.0),
                (-1.0, 1.0),
            ],
        }
    }

    pub fn get(&self, dim: usize) -> (f64, f64) {
        self.ranges[dim]
    }

    pub fn as_array(&self) -> &[(f64, f64); ACTION_DIMS] {
        &self.ranges
    }

    fn check(&self, dim: usize, value: f64) -> Result<()> {
        let (lo, hi) = self.ranges[dim];
        // A small epsilon absorbs round-trip noise at the exact bounds.
        let eps = (hi - lo) * 1e-12;
        if value < lo - eps || value > hi + eps {
            return Err(Error::OutOfRange {
                what: format!("action slot {}", SLOT_NAMES[dim]),
                value,
                lo,
                hi,
            });
        }
        Ok(())
    }
}

/// An action quantized to one bin index per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscretizedAction {
    pub bins: [u16; ACTION_DIMS],
}

impl DiscretizedAction {
    pub fn new(bins: [u16; ACTION_DIMS]) -> Result<DiscretizedAction> {
        for (i, &b) in bins.iter().enumerate() {
            if b as usize >= NUM_BINS {
                return Err(Error::OutOfRange {
                    what: format!("bin index for {}", SLOT_NAMES[i]),
                    value: b as f64,
                    lo: 0.0,
                    hi: (NUM_BINS - 1) as f64,
                });
            }
        }
        Ok(DiscretizedAction { bins })
    }
}

/// Scales each slot to `[0, 1]` via `(a_i - lo_i) / (hi_i - lo_i)`.
///
/// Fails with a range error naming the dimension if any slot is outside its
/// declared range.
pub fn scale(a: &ActionVector, r: &ActionRanges) -> Result<[f64; ACTION_DIMS]> {
    let slots = a.slots();
    let mut out = [0.0; ACTION_DIMS];
    for (i, &v) in slots.iter().enumerate() {
        r.check(i, v)?;
        let (lo, hi) = r.ranges[i];
        out[i] = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Quantizes scaled fractions into bins: `min(floor(s * 256), 255)`.
pub fn discretize(scaled: &[f64; ACTION_DIMS]) -> Result<DiscretizedAction> {
    let mut bins = [0u16; ACTION_DIMS];
    for (i, &s) in scaled.iter().enumerate() {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::OutOfRange {
                what: format!("scaled fraction for {}", SLOT_NAMES[i]),
                value: s,
                lo: 0.0,
                hi: 1.0,
            });
        }
        bins[i] = ((s * NUM_BINS as f64).floor() as usize).min(NUM_BINS - 1) as u16;
    }
    Ok(DiscretizedAction { bins })
}

/// Decodes bin indices back to continuous values at bin centers,
/// `lo + (bin + 0.5)/256 * (hi - lo)`; the mode slot snaps to the nearest
/// categorical point.
pub fn decode(d: &DiscretizedAction, r: &ActionRanges) -> Result<ActionVector> {
    let mut slots = [0.0; ACTION_DIMS];
    for (i, &b) in d.bins.iter().enumerate() {
        if b as usize >= NUM_BINS {
            return Err(Error::OutOfRange {
                what: format!("bin index for {}", SLOT_NAMES[i]),
                value: b as f64,
                lo: 0.0,
                hi: (NUM_BINS - 1) as f64,
            });
        }
        let (lo, hi) = r.ranges[i];
        slots[i] = lo + (b as f64 + 0.5) / NUM_BINS as f64 * (hi - lo);
    }
    Ok(ActionVector::from_slots(&slots))
}

/// Convenience composition `discretize(scale(a))`.
pub fn encode(a: &ActionVector, r: &ActionRanges) -> Result<DiscretizedAction> {
    discretize(&scale(a, r)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranges() -> ActionRanges {
        ActionRanges::default_for(1.0)
    }

    fn vector_with(slots: [f64; ACTION_DIMS]) -> ActionVector {
        ActionVector::from_slots(&slots)
    }

    #[test]
    fn scale_lower_bound_is_all_zeros() {
        let r = ranges();
        let lo = core::array::from_fn(|i| r.get(i).0);
        let s = scale(&vector_with(lo), &r).unwrap();
        // Mode snaps to Terminate (value 0) so slot 0 stays at the lower bound.
        for v in s {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn scale_upper_bound_is_all_ones() {
        let r = ranges();
        let hi = core::array::from_fn(|i| r.get(i).1);
        let s = scale(&vector_with(hi), &r).unwrap();
        for v in s {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn scale_midpoint_is_half_in_noncategorical_slots() {
        let r = ranges();
        let mid: [f64; ACTION_DIMS] = core::array::from_fn(|i| {
            let (lo, hi) = r.get(i);
            (lo + hi) / 2.0
        });
        let mut a = vector_with(mid);
        // Midpoint of the mode range (1.5) would snap; pin mode to a point
        // and check the remaining ten slots.
        a.mode = Mode::BaseOnly;
        let s = scale(&a, &r).unwrap();
        for v in s.iter().skip(1) {
            assert!((v - 0.5).abs() < 1e-12, "expected 0.5, got {v}");
        }
    }

    #[test]
    fn scale_rejects_out_of_range_and_names_dimension() {
        let r = ranges();
        let mut a = ActionVector::terminate();
        a.g_y = 1.2; // above the workspace bound
        let err = scale(&a, &r).unwrap_err();
        assert!(err.to_string().contains("g_y"), "got: {err}");
    }

    #[test]
    fn discretize_boundaries() {
        let zeros = [0.0; ACTION_DIMS];
        let ones = [1.0; ACTION_DIMS];
        assert!(discretize(&zeros).unwrap().bins.iter().all(|&b| b == 0));
        assert!(discretize(&ones).unwrap().bins.iter().all(|&b| b == 255));
    }

    #[test]
    fn discretize_rejects_out_of_unit_interval() {
        let mut s = [0.5; ACTION_DIMS];
        s[3] = 1.5;
        assert!(discretize(&s).is_err());
    }

    #[test]
    fn decode_bin_zero_unit_range_is_half_bin_width() {
        let r = ranges();
        // closedness has range (0, 1): bin 0 decodes to 1/512.
        let d = DiscretizedAction::new([0; ACTION_DIMS]).unwrap();
        let a = decode(&d, &r).unwrap();
        assert!((a.closedness - 1.0 / 512.0).abs() < 1e-15);
    }

    #[test]
    fn decode_rejects_large_index() {
        let r = ranges();
        let d = DiscretizedAction {
            bins: [300; ACTION_DIMS],
        };
        assert!(decode(&d, &r).is_err());
        assert!(DiscretizedAction::new([256; ACTION_DIMS]).is_err());
    }

    #[test]
    fn mode_bin_near_terminate_point_decodes_to_terminate() {
        let r = ranges();
        // Terminate embeds at 0 in range (0,3): fraction 0 -> bin 0.
        let mut bins = [128u16; ACTION_DIMS];
        bins[0] = 0;
        let a = decode(&DiscretizedAction { bins }, &r).unwrap();
        assert_eq!(a.mode, Mode::Terminate);
        // And each categorical point survives a full encode/decode cycle.
        for mode in [Mode::Terminate, Mode::ArmOnly, Mode::BaseOnly, Mode::ArmAndBase] {
            let mut v = ActionVector::terminate();
            v.mode = mode;
            let rt = decode(&encode(&v, &r).unwrap(), &r).unwrap();
            assert_eq!(rt.mode, mode);
        }
    }

    /// Brute-force sweep: 10,001 evenly spaced fractions must round-trip
    /// through discretize/decode within half a bin width.
    #[test]
    fn sweep_round_trip_error_within_half_bin() {
        let half_bin = 0.5 / NUM_BINS as f64;
        for k in 0..=10_000 {
            let s = k as f64 / 10_000.0;
            let scaled = [s; ACTION_DIMS];
            let d = discretize(&scaled).unwrap();
            for &b in &d.bins {
                let back = (b as f64 + 0.5) / NUM_BINS as f64;
                assert!(
                    (back - s).abs() <= half_bin + 1e-12,
                    "fraction {s} decoded to {back}"
                );
            }
        }
    }

    /// Enumerating all 256 bins per dimension: decoded centers re-encode to
    /// the same bin and the center sits within half a bin width of any value
    /// that maps to that bin.
    #[test]
    fn all_bins_round_trip_exactly() {
        let r = ranges();
        for dim in 0..ACTION_DIMS {
            let (lo, hi) = r.get(dim);
            let width = (hi - lo) / NUM_BINS as f64;
            for bin in 0..NUM_BINS as u16 {
                let mut bins = [0u16; ACTION_DIMS];
                bins[dim] = bin;
                let a = decode(&DiscretizedAction { bins }, &r).unwrap();
                let slots = a.slots();
                if dim == 0 {
                    // Mode snapped to a categorical point; re-encoding must
                    // recover a bin whose center is that same point.
                    let again = encode(&a, &r).unwrap();
                    let back = decode(&again, &r).unwrap();
                    assert_eq!(back.mode, a.mode);
                } else {
                    let center = lo + (bin as f64 + 0.5) * width;
                    assert!((slots[dim] - center).abs() < 1e-12);
                    let again = encode(&a, &r).unwrap();
                    assert_eq!(again.bins[dim], bin);
                }
            }
        }
    }

    proptest! {
        /// Round-trip: any in-range action decodes within half a bin width
        /// on non-categorical slots; mode is recovered exactly.
        #[test]
        fn round_trip_within_half_bin(
            mode_idx in 0u8..4,
            vals in prop::array::uniform10(0.0f64..1.0f64),
        ) {
            let r = ranges();
            let mut slots = [0.0; ACTION_DIMS];
            for i in 1..ACTION_DIMS {
                let (lo, hi) = r.get(i);
                slots[i] = lo + vals[i - 1] * (hi - lo);
            }
            slots[0] = mode_idx as f64;
            let a = ActionVector::from_slots(&slots);
            let rt = decode(&encode(&a, &r).unwrap(), &r).unwrap();
            prop_assert_eq!(rt.mode, a.mode);
            let rts = rt.slots();
            for i in 1..ACTION_DIMS {
                let (lo, hi) = r.get(i);
                let half_bin = (hi - lo) / (2.0 * NUM_BINS as f64);
                prop_assert!((rts[i] - slots[i]).abs() <= half_bin + 1e-12);
            }
        }

        /// Monotonicity: elementwise-ordered fractions produce
        /// elementwise-ordered bins.
        #[test]
        fn discretize_monotone(
            a in prop::array::uniform11(0.0f64..1.0f64),
            b in prop::array::uniform11(0.0f64..1.0f64),
        ) {
            let lo: [f64; ACTION_DIMS] = core::array::from_fn(|i| a[i].min(b[i]));
            let hi: [f64; ACTION_DIMS] = core::array::from_fn(|i| a[i].max(b[i]));
            let dl = discretize(&lo).unwrap();
            let dh = discretize(&hi).unwrap();
            for i in 0..ACTION_DIMS {
                prop_assert!(dl.bins[i] <= dh.bins[i]);
            }
        }
    }
}
