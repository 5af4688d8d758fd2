use std::fmt;
use std::str::FromStr;

use ndcore::Scalar;
use serde::{Deserialize, Serialize};

use super::DaanModel;
use crate::error::{Error, Result};
use crate::radiosim::RadioImage;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    /// Coordinates of the most probable reference point.
    #[default]
    Argmax,
    /// Probability-weighted mean of all reference-point coordinates.
    Centroid,
}

impl FromStr for PredictMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(PredictMode::Argmax),
            "centroid" => Ok(PredictMode::Centroid),
            other => Err(Error::invalid(
                "predict mode",
                format!("'{other}' (expected argmax or centroid)"),
            )),
        }
    }
}

impl fmt::Display for PredictMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictMode::Argmax => "argmax",
            PredictMode::Centroid => "centroid",
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Location {
    pub position: [f64; 2],
    /// Most probable reference point.
    pub rp: usize,
    /// Probability of `rp`.
    pub confidence: f64,
}

/// Location estimate from one row of class probabilities.
pub fn locate<T: Scalar>(
    probs: &[T],
    rp_coords: &[[f64; 2]],
    mode: PredictMode,
) -> Result<Location> {
    if probs.len() != rp_coords.len() || probs.is_empty() {
        return Err(Error::shape(
            "class probabilities",
            format!("{} reference points", rp_coords.len()),
            probs.len(),
        ));
    }
    // First maximum wins ties.
    let (rp, confidence) = probs.iter().map(|p| p.as_f64()).enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, p)| if p > best.1 { (i, p) } else { best },
    );
    let position = match mode {
        PredictMode::Argmax => rp_coords[rp],
        PredictMode::Centroid => {
            let mut c = [0.0; 2];
            for (p, xy) in probs.iter().zip(rp_coords) {
                c[0] += p.as_f64() * xy[0];
                c[1] += p.as_f64() * xy[1];
            }
            c
        }
    };
    Ok(Location {
        position,
        rp,
        confidence,
    })
}

pub fn predict_location<T: Scalar>(
    model: &mut DaanModel<T>,
    image: &RadioImage,
    rp_coords: &[[f64; 2]],
    mode: PredictMode,
) -> Result<Location> {
    let probs = model.predict_proba(&[image])?;
    locate(probs.row(0), rp_coords, mode)
}

pub fn predict_locations<T: Scalar>(
    model: &mut DaanModel<T>,
    images: &[&RadioImage],
    rp_coords: &[[f64; 2]],
    mode: PredictMode,
) -> Result<Vec<Location>> {
    let probs = model.predict_proba(images)?;
    (0..images.len())
        .map(|i| locate(probs.row(i), rp_coords, mode))
        .collect()
}
