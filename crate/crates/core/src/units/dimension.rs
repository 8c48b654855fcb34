use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Number of base dimensions tracked by [`Dimension`].
pub const BASE_DIMENSIONS: usize = 7;

const BASE_SYMBOLS: [&str; BASE_DIMENSIONS] = ["L", "M", "T", "Θ", "I", "N", "J"];

/// Exponent vector over the seven base dimensions, in the order
/// length, mass, time, temperature, current, amount, luminous intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Dimension(pub [i32; BASE_DIMENSIONS]);

impl Dimension {
    pub const DIMENSIONLESS: Dimension = Dimension([0; BASE_DIMENSIONS]);
    pub const LENGTH: Dimension = Dimension([1, 0, 0, 0, 0, 0, 0]);
    pub const MASS: Dimension = Dimension([0, 1, 0, 0, 0, 0, 0]);
    pub const TIME: Dimension = Dimension([0, 0, 1, 0, 0, 0, 0]);
    pub const TEMPERATURE: Dimension = Dimension([0, 0, 0, 1, 0, 0, 0]);
    pub const CURRENT: Dimension = Dimension([0, 0, 0, 0, 1, 0, 0]);
    pub const AMOUNT: Dimension = Dimension([0, 0, 0, 0, 0, 1, 0]);
    pub const LUMINOUS_INTENSITY: Dimension = Dimension([0, 0, 0, 0, 0, 0, 1]);

    pub const fn new(exponents: [i32; BASE_DIMENSIONS]) -> Self {
        Dimension(exponents)
    }

    pub fn is_dimensionless(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn powi(self, n: i32) -> Self {
        self * n
    }

    pub fn exponents(&self) -> [i32; BASE_DIMENSIONS] {
        self.0
    }
}

impl Add for Dimension {
    type Output = Dimension;
    fn add(self, rhs: Dimension) -> Dimension {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0) {
            *o += r;
        }
        Dimension(out)
    }
}

impl Sub for Dimension {
    type Output = Dimension;
    fn sub(self, rhs: Dimension) -> Dimension {
        self + (-rhs)
    }
}

impl Neg for Dimension {
    type Output = Dimension;
    fn neg(self) -> Dimension {
        self * -1
    }
}

impl Mul<i32> for Dimension {
    type Output = Dimension;
    fn mul(self, n: i32) -> Dimension {
        Dimension(self.0.map(|e| e * n))
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_dimensionless() {
            return f.write_str("1");
        }
        let mut first = true;
        for (sym, &e) in BASE_SYMBOLS.iter().zip(self.0.iter()) {
            if e == 0 {
                continue;
            }
            if !first {
                f.write_str(" ")?;
            }
            first = false;
            if e == 1 {
                write!(f, "{sym}")?;
            } else {
                write!(f, "{sym}^{e}")?;
            }
        }
        Ok(())
    }
}
