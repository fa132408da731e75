//! Reference calculators used by the test suite, documentation, and the
//! `calc` CLI examples.

/// Five-flag additive score with low/moderate/high interpretation bands.
pub const F1_SOURCE: &str = "\
# Five-flag additive severity score.
param flag_a: boolean;
param flag_b: boolean;
param flag_c: boolean;
param flag_d: boolean;
param flag_e: boolean;
output score = (flag_a ? 1 : 0) + (flag_b ? 1 : 0) + (flag_c ? 1 : 0)
             + (flag_d ? 1 : 0) + (flag_e ? 1 : 0) range [0, 5];
";

/// Logistic risk model: intercept -3, age coefficient 0.05, smoker coefficient 1.2.
pub const F2_SOURCE: &str = "\
# Logistic risk model with two predictors.
param age: number unit \"years\" in [0, 120];
param smoker: boolean;
let lin = -3 + 0.05 * age + (smoker ? 1.2 : 0);
output risk = 1 / (1 + exp(-lin)) range [0, 1];
";

/// Variant of F2 with a zero intercept, used to pin logistic(0) = 0.5.
pub const F2_ZERO_INTERCEPT_SOURCE: &str = "\
param age: number unit \"years\" in [0, 120];
param smoker: boolean;
let lin = 0 + 0.05 * age + (smoker ? 1.2 : 0);
output risk = 1 / (1 + exp(-lin)) range [0, 1];
";
