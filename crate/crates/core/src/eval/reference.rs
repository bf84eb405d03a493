//! Published reference numbers, printed next to reproduced rows.

/// `(mean, std)` per structure in RV, Myo, LV order, plus the average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub rv: (f64, f64),
    pub myo: (f64, f64),
    pub lv: (f64, f64),
    pub avg: f64,
}

pub const REFERENCE_MSCMRSEG: ReferenceRow =
    ReferenceRow { rv: (0.881, 0.05), myo: (0.859, 0.03), lv: (0.933, 0.03), avg: 0.891 };

pub const REFERENCE_ACDC: ReferenceRow =
    ReferenceRow { rv: (0.892, 0.05), myo: (0.904, 0.02), lv: (0.937, 0.04), avg: 0.911 };

/// Average Dice for: no augmentation, +TAS, +PL, +BD.
pub const REFERENCE_LOSS_TERMS: [f64; 4] = [0.819, 0.834, 0.878, 0.891];

/// Average Dice for TAS branch subsets: C, J, I, C+J, C+I, J+I, C+J+I.
pub const REFERENCE_TAS_BRANCHES: [f64; 7] = [0.861, 0.869, 0.865, 0.883, 0.881, 0.885, 0.891];

/// Average Dice for pseudo-label sources: y_i, y_j, y_k, (i,j), (i,k), (j,k),
/// (i,j,k) with loss weighting, then (j,k) averaged and randomly weighted.
pub const REFERENCE_PL_BRANCHES: [f64; 9] = [0.878, 0.880, 0.882, 0.884, 0.884, 0.891, 0.885, 0.883, 0.884];

/// λ grid of the sweep.
pub const REFERENCE_LAMBDA_VALUES: [f64; 5] = [1.0, 0.8, 0.5, 0.3, 0.1];

/// Average Dice along the λ grid, one row per λ (the other two at defaults).
pub const REFERENCE_LAMBDA_SWEEP: [[f64; 5]; 3] = [
    [0.891, 0.889, 0.879, 0.875, 0.865],
    [0.876, 0.878, 0.883, 0.891, 0.878],
    [0.867, 0.877, 0.879, 0.882, 0.891],
];
