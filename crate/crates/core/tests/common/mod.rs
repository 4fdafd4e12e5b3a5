//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use cdmsc::corpus::{manifest_from_counts, Manifest};

/// Trainval pool clip counts, `[species][domain]`, species in the default name order.
pub const TRAINVAL: [[usize; 5]; 9] = [
    [111, 0, 0, 20, 73297],
    [73, 0, 17, 0, 16575],
    [0, 0, 0, 12, 64838],
    [0, 0, 0, 0, 42298],
    [0, 0, 0, 0, 19005],
    [87, 0, 0, 0, 0],
    [59, 60, 0, 0, 26660],
    [200, 0, 200, 51, 0],
    [200, 200, 200, 0, 0],
];

/// Held-out test clip counts, `[species][domain]`.
pub const TEST: [[usize; 5]; 9] = [
    [12, 0, 192, 2, 7953],
    [6, 419, 2, 0, 1425],
    [672, 0, 0, 1, 6533],
    [818, 0, 0, 0, 3882],
    [1820, 0, 0, 0, 292],
    [0, 0, 0, 40, 0],
    [7, 6, 68, 0, 2894],
    [0, 99, 0, 0, 0],
    [0, 0, 0, 74, 0],
];

pub fn trainval_manifest() -> Manifest {
    manifest_from_counts(&TRAINVAL, 0).unwrap()
}

/// Test clips get indices after every trainval index so keys never collide.
pub fn test_manifest() -> Manifest {
    manifest_from_counts(&TEST, 1_000_000).unwrap()
}
