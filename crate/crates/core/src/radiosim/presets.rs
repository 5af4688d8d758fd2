use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Environment;
use crate::error::{Error, Result};

/// Named site layouts.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Open hall, line of sight: 188 RPs, two receivers.
    Hall,
    /// Dense-multipath corridor: 360 RPs, eight APs.
    Corridor,
    /// Furnished lounge, non line of sight: 425 RPs, eight APs.
    Lounge,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hall" => Ok(Preset::Hall),
            "corridor" => Ok(Preset::Corridor),
            "lounge" => Ok(Preset::Lounge),
            other => Err(Error::invalid(
                "preset",
                format!("unknown preset '{other}' (expected hall, corridor or lounge)"),
            )),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Hall => "hall",
            Preset::Corridor => "corridor",
            Preset::Lounge => "lounge",
        })
    }
}

const SPACING: f64 = 0.8;

struct Layout {
    rps: usize,
    cols: usize,
    aps: &'static [[f64; 2]],
    exponent: f64,
    shadowing_db: f64,
}

fn layout(preset: Preset) -> Layout {
    match preset {
        // 14 columns x 13 rows plus a partial row of 6; receivers on the
        // middle of the two side walls.
        Preset::Hall => Layout {
            rps: 188,
            cols: 14,
            aps: &[[-0.8, 5.2], [11.2, 5.2]],
            exponent: 2.0,
            shadowing_db: 2.0,
        },
        Preset::Corridor => Layout {
            rps: 360,
            cols: 60,
            aps: &[
                [3.0, -1.0],
                [9.0, 5.0],
                [15.0, -1.0],
                [21.0, 5.0],
                [27.0, -1.0],
                [33.0, 5.0],
                [39.0, -1.0],
                [45.0, 5.0],
            ],
            exponent: 2.8,
            shadowing_db: 4.0,
        },
        Preset::Lounge => Layout {
            rps: 425,
            cols: 25,
            aps: &[
                [-1.0, -1.0],
                [9.6, -1.0],
                [20.2, -1.0],
                [20.2, 6.4],
                [20.2, 13.8],
                [9.6, 13.8],
                [-1.0, 13.8],
                [-1.0, 6.4],
            ],
            exponent: 3.3,
            shadowing_db: 5.0,
        },
    }
}

/// Builds a named layout. `scale` in `(0, 1]` keeps `round(scale * R)`
/// reference points cropped from the layout origin outward in square
/// shells, so the 0.8 m spacing is preserved.
pub fn preset_environment(preset: Preset, scale: f64) -> Result<Environment> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(
            "preset",
            format!("scale {scale} outside (0, 1]"),
        ));
    }
    let l = layout(preset);
    let count = (l.rps as f64 * scale).round() as usize;
    if count < 4 {
        return Err(Error::invalid(
            "preset",
            format!("scale {scale} leaves {count} reference points; at least 4 are needed"),
        ));
    }
    let mut cells: Vec<(usize, usize)> = (0..l.rps).map(|i| (i % l.cols, i / l.cols)).collect();
    cells.sort_by_key(|&(c, r)| (c.max(r), r, c));
    let rp_coords = cells
        .into_iter()
        .take(count)
        .map(|(c, r)| [c as f64 * SPACING, r as f64 * SPACING])
        .collect();
    let env = Environment {
        name: preset.to_string(),
        rp_coords,
        ap_coords: l.aps.to_vec(),
        rp_spacing: SPACING,
        pl_exponent: l.exponent,
        pl_ref_db: 40.0,
        d0: 1.0,
        shadowing_sigma_db: l.shadowing_db,
        multipath_taps: 8,
        subcarriers: 30,
        antennas: 3,
        frames: 16,
        layout_seed: 0x5EED_0000 + preset as u64,
    };
    env.validate()?;
    Ok(env)
}
