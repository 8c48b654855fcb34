//! The curated unit table.
//!
//! Every scale is stored as `mantissa × 10^exp10` so that conversions between
//! prefixed forms of one unit (nm to Å, kK to K) multiply by an exact power of
//! ten instead of accumulating rounding in two separate scale factors.

use super::Dimension;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Scale {
    pub mantissa: f64,
    pub exp10: i32,
}

impl Scale {
    pub const ONE: Scale = Scale {
        mantissa: 1.0,
        exp10: 0,
    };

    pub fn mul(self, other: Scale) -> Scale {
        Scale {
            mantissa: self.mantissa * other.mantissa,
            exp10: self.exp10 + other.exp10,
        }
    }

    pub fn powi(self, n: i32) -> Scale {
        Scale {
            mantissa: self.mantissa.powi(n),
            exp10: self.exp10 * n,
        }
    }

    pub fn value(self) -> f64 {
        apply_pow10(self.mantissa, self.exp10)
    }

    /// Multiply `v` by `self / other`.
    pub fn ratio_apply(self, other: Scale, v: f64) -> f64 {
        let v = if self.mantissa == other.mantissa {
            v
        } else {
            v * (self.mantissa / other.mantissa)
        };
        apply_pow10(v, self.exp10 - other.exp10)
    }
}

/// `v × 10^k`, using exact powers of ten up to 1e22.
pub(crate) fn apply_pow10(mut v: f64, mut k: i32) -> f64 {
    const EXACT: i32 = 22;
    while k > EXACT {
        v *= 1e22;
        k -= EXACT;
    }
    while k < -EXACT {
        v /= 1e22;
        k += EXACT;
    }
    if k >= 0 {
        v * 10f64.powi(k)
    } else {
        v / 10f64.powi(-k)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct UnitDef {
    /// Canonical symbol, used when normalizing expressions.
    pub symbol: &'static str,
    pub aliases: &'static [&'static str],
    pub dimension: Dimension,
    pub scale: Scale,
    pub offset: f64,
    pub prefixable: bool,
}

const fn scale(mantissa: f64, exp10: i32) -> Scale {
    Scale { mantissa, exp10 }
}

const ENERGY: Dimension = Dimension::new([2, 1, -2, 0, 0, 0, 0]);
const POTENTIAL: Dimension = Dimension::new([2, 1, -3, 0, -1, 0, 0]);

pub(crate) const UNITS: &[UnitDef] = &[
    UnitDef {
        symbol: "m",
        aliases: &[],
        dimension: Dimension::LENGTH,
        scale: Scale::ONE,
        offset: 0.0,
        prefixable: true,
    },
    UnitDef {
        symbol: "angstrom",
        aliases: &["Å", "\u{212B}", "Angstrom"],
        dimension: Dimension::LENGTH,
        scale: scale(1.0, -10),
        offset: 0.0,
        prefixable: false,
    },
    UnitDef {
        symbol: "micron",
        aliases: &["microns"],
        dimension: Dimension::LENGTH,
        scale: scale(1.0, -6),
        offset: 0.0,
        prefixable: false,
    },
    UnitDef {
        symbol: "s",
        aliases: &[],
        dimension: Dimension::TIME,
        scale: Scale::ONE,
        offset: 0.0,
        prefixable: true,
    },
    UnitDef {
        symbol: "minute",
        aliases: &["min"],
        dimension: Dimension::TIME,
        scale: scale(6.0, 1),
        offset: 0.0,
        prefixable: false,
    },
    UnitDef {
        symbol: "hour",
        aliases: &["h"],
        dimension: Dimension::TIME,
        scale: scale(3.6, 3),
        offset: 0.0,
        prefixable: false,
    },
    UnitDef {
        symbol: "g",
        aliases: &[],
        dimension: Dimension::MASS,
        scale: scale(1.0, -3),
        offset: 0.0,
        prefixable: true,
    },
    UnitDef {
        symbol: "u",
        aliases: &["amu"],
        dimension: Dimension::MASS,
        scale: scale(1.660_539_066_60, -27),
        offset: 0.0,
        prefixable: false,
    },
    UnitDef {
        symbol: "K",
        aliases: &[],
        dimension: Dimension::TEMPERATURE,
        scale: Scale::ONE,
        offset: 0.0,
        prefixable: true,
    },
    UnitDef {
        symbol: "degC",
        aliases: &["°C", "celsius"],
        dimension: Dimension::TEMPERATURE,
        scale: Scale::ONE,
        offset: 273.15,
        prefixable: false,
    },
    UnitDef {
        symbol: "mol",
        aliases: &[],
        dimension: Dimension::AMOUNT,
        scale: Scale::ONE,
        offset: 0.0,
        prefixable: true,
    },
    UnitDef {
        symbol: "A",
        aliases: &[],
        dimension: Dimension::CURRENT,
        scale: Scale::ONE,
        offset: 0.0,
        prefixable: true,
    },
    UnitDef {
        symbol: "cd",
        aliases: &[],
        dimension: Dimension::LUMINOUS_INTENSITY,
        scale: Scale::ONE,
        offset: 0.0,
        prefixable: true,
    },
    UnitDef {
        symbol: "eV",
        aliases: &[],
        dimension: ENERGY,
        scale: scale(1.602_176_634, -19),
        offset: 0.0,
        prefixable: true,
    },
    UnitDef {
        symbol: "V",
        aliases: &[],
        dimension: POTENTIAL,
        scale: Scale::ONE,
        offset: 0.0,
        prefixable: true,
    },
];

/// SI prefixes from yocto to yotta. Two-letter `da` is matched before the
/// single-letter forms.
pub(crate) const PREFIXES: &[(&str, i32)] = &[
    ("da", 1),
    ("y", -24),
    ("z", -21),
    ("a", -18),
    ("f", -15),
    ("p", -12),
    ("n", -9),
    ("u", -6),
    ("µ", -6),
    ("μ", -6),
    ("m", -3),
    ("c", -2),
    ("d", -1),
    ("h", 2),
    ("k", 3),
    ("M", 6),
    ("G", 9),
    ("T", 12),
    ("P", 15),
    ("E", 18),
    ("Z", 21),
    ("Y", 24),
];

pub(crate) fn find_unit(symbol: &str) -> Option<&'static UnitDef> {
    UNITS
        .iter()
        .find(|u| u.symbol == symbol || u.aliases.contains(&symbol))
}

/// Resolve a bare symbol to `(prefix, unit)`. An exact unit match wins over a
/// prefixed reading, so `cd` is candela, `min` is minute and `u` is the atomic
/// mass unit.
pub(crate) fn resolve_symbol(symbol: &str) -> Option<(Option<(&'static str, i32)>, &'static UnitDef)> {
    if let Some(def) = find_unit(symbol) {
        return Some((None, def));
    }
    for &(prefix, exp) in PREFIXES {
        if let Some(rest) = symbol.strip_prefix(prefix) {
            if rest.is_empty() {
                continue;
            }
            if let Some(def) = find_unit(rest) {
                if def.prefixable && def.symbol == rest {
                    return Some((Some((prefix, exp)), def));
                }
            }
        }
    }
    None
}
