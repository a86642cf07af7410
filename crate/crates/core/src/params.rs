//! Articulatory control parameters and their time tracks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_PARAMS: usize = 6;

pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "frequency",
    "tenseness",
    "tongue_index",
    "tongue_diameter",
    "constriction_index",
    "constriction_diameter",
];

/// Physical `[min, max]` per parameter, in `PARAM_NAMES` order.
pub const PARAM_RANGES: [(f64, f64); N_PARAMS] = [
    (80.0, 400.0),
    (0.0, 1.0),
    (12.0, 29.0),
    (2.05, 3.5),
    (2.0, 43.0),
    (0.3, 3.5),
];

/// Position of a parameter by name.
pub fn param_index(name: &str) -> Option<usize> {
    PARAM_NAMES.iter().position(|&n| n == name)
}

/// The six synthesizer controls in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct PtParams {
    /// Glottal fundamental, Hz.
    pub frequency: f64,
    pub tenseness: f64,
    /// Tract section at the tongue body center.
    pub tongue_index: f64,
    /// Tongue control radius, cm. Smaller values raise the tongue.
    pub tongue_diameter: f64,
    pub constriction_index: f64,
    /// Narrowest diameter imposed at the constriction, cm.
    pub constriction_diameter: f64,
}

#[derive(Deserialize)]
struct RawParams {
    frequency: f64,
    tenseness: f64,
    tongue_index: f64,
    tongue_diameter: f64,
    constriction_index: f64,
    constriction_diameter: f64,
}

impl TryFrom<RawParams> for PtParams {
    type Error = Error;

    fn try_from(r: RawParams) -> Result<Self> {
        PtParams::new(
            r.frequency,
            r.tenseness,
            r.tongue_index,
            r.tongue_diameter,
            r.constriction_index,
            r.constriction_diameter,
        )
    }
}

impl PtParams {
    pub fn new(
        frequency: f64,
        tenseness: f64,
        tongue_index: f64,
        tongue_diameter: f64,
        constriction_index: f64,
        constriction_diameter: f64,
    ) -> Result<Self> {
        Self::from_array([
            frequency,
            tenseness,
            tongue_index,
            tongue_diameter,
            constriction_index,
            constriction_diameter,
        ])
    }

    /// Builds from physical values in `PARAM_NAMES` order, checking ranges.
    pub fn from_array(v: [f64; N_PARAMS]) -> Result<Self> {
        for (i, &x) in v.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite(PARAM_NAMES[i]));
            }
            let (lo, hi) = PARAM_RANGES[i];
            if x < lo || x > hi {
                return Err(Error::ParamOutOfRange {
                    name: PARAM_NAMES[i],
                    value: x,
                    min: lo,
                    max: hi,
                });
            }
        }
        Ok(Self::from_array_unchecked(v))
    }

    fn from_array_unchecked(v: [f64; N_PARAMS]) -> Self {
        PtParams {
            frequency: v[0],
            tenseness: v[1],
            tongue_index: v[2],
            tongue_diameter: v[3],
            constriction_index: v[4],
            constriction_diameter: v[5],
        }
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.frequency,
            self.tenseness,
            self.tongue_index,
            self.tongue_diameter,
            self.constriction_index,
            self.constriction_diameter,
        ]
    }

    /// Affine map of every field onto `[0, 1]`.
    pub fn normalized(&self) -> [f64; N_PARAMS] {
        let mut out = self.to_array();
        for (x, &(lo, hi)) in out.iter_mut().zip(PARAM_RANGES.iter()) {
            *x = (*x - lo) / (hi - lo);
        }
        out
    }

    /// Inverse of [`PtParams::normalized`]. Values must lie in `[0, 1]`.
    pub fn from_normalized(u: [f64; N_PARAMS]) -> Result<Self> {
        let mut v = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            if !u[i].is_finite() {
                return Err(Error::NonFinite(PARAM_NAMES[i]));
            }
            if !(0.0..=1.0).contains(&u[i]) {
                return Err(Error::ParamOutOfRange {
                    name: PARAM_NAMES[i],
                    value: u[i],
                    min: 0.0,
                    max: 1.0,
                });
            }
            let (lo, hi) = PARAM_RANGES[i];
            // Clamp guards the last ulp so the physical check cannot trip.
            v[i] = (lo + u[i] * (hi - lo)).clamp(lo, hi);
        }
        Ok(Self::from_array_unchecked(v))
    }

    /// A mid-range neutral vowel.
    pub fn neutral() -> Self {
        PtParams {
            frequency: 140.0,
            tenseness: 0.6,
            tongue_index: 20.0,
            tongue_diameter: 2.75,
            constriction_index: 36.0,
            constriction_diameter: 3.5,
        }
    }

    fn lerp(&self, other: &PtParams, frac: f64) -> PtParams {
        let a = self.to_array();
        let b = other.to_array();
        let mut v = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            v[i] = a[i] + (b[i] - a[i]) * frac;
        }
        PtParams::from_array_unchecked(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Hold,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakpoint {
    /// Seconds from the start of the clip.
    pub t: f64,
    pub params: PtParams,
}

/// Piecewise parameter trajectory. Times are strictly increasing and start at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TrackFile", try_from = "TrackFile")]
pub struct ParamTrack {
    interpolation: Interpolation,
    breakpoints: Vec<Breakpoint>,
}

#[derive(Serialize, Deserialize)]
struct TrackFile {
    interpolation: Interpolation,
    breakpoints: Vec<BreakpointRecord>,
}

#[derive(Serialize, Deserialize)]
struct BreakpointRecord {
    t: f64,
    #[serde(flatten)]
    params: PtParams,
}

impl From<ParamTrack> for TrackFile {
    fn from(track: ParamTrack) -> Self {
        TrackFile {
            interpolation: track.interpolation,
            breakpoints: track
                .breakpoints
                .into_iter()
                .map(|b| BreakpointRecord {
                    t: b.t,
                    params: b.params,
                })
                .collect(),
        }
    }
}

impl TryFrom<TrackFile> for ParamTrack {
    type Error = Error;

    fn try_from(file: TrackFile) -> Result<Self> {
        ParamTrack::new(
            file.interpolation,
            file.breakpoints
                .into_iter()
                .map(|b| Breakpoint {
                    t: b.t,
                    params: b.params,
                })
                .collect(),
        )
    }
}

impl ParamTrack {
    pub fn new(interpolation: Interpolation, breakpoints: Vec<Breakpoint>) -> Result<Self> {
        let first = breakpoints
            .first()
            .ok_or_else(|| Error::invalid("parameter track has no breakpoints"))?;
        if first.t != 0.0 {
            return Err(Error::invalid(format!(
                "parameter track must start at t = 0, got {}",
                first.t
            )));
        }
        for w in breakpoints.windows(2) {
            if !(w[1].t > w[0].t) || !w[1].t.is_finite() {
                return Err(Error::invalid(format!(
                    "breakpoint times must strictly increase ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        Ok(ParamTrack {
            interpolation,
            breakpoints,
        })
    }

    /// Single-breakpoint hold track.
    pub fn constant(params: PtParams) -> Self {
        ParamTrack {
            interpolation: Interpolation::Hold,
            breakpoints: vec![Breakpoint { t: 0.0, params }],
        }
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn breakpoints(&self) -> &[Breakpoint] {
        &self.breakpoints
    }

    pub fn len(&self) -> usize {
        self.breakpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.breakpoints.is_empty()
    }

    /// Parameter values at time `t` (clamped to the track's extent).
    pub fn at(&self, t: f64) -> PtParams {
        let bps = &self.breakpoints;
        // Index of the first breakpoint strictly after t.
        let next = bps.partition_point(|b| b.t <= t);
        if next == 0 {
            return bps[0].params;
        }
        let cur = &bps[next - 1];
        match (self.interpolation, bps.get(next)) {
            (Interpolation::Linear, Some(nb)) => {
                let frac = (t - cur.t) / (nb.t - cur.t);
                cur.params.lerp(&nb.params, frac)
            }
            _ => cur.params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("<track>", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_out_of_range() {
        let err = PtParams::new(500.0, 0.5, 20.0, 3.0, 30.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::ParamOutOfRange { name: "frequency", .. }));
        assert!(PtParams::new(f64::NAN, 0.5, 20.0, 3.0, 30.0, 1.0).is_err());
        assert!(PtParams::new(140.0, 0.5, 20.0, 3.0, 30.0, 0.2).is_err());
    }

    #[test]
    fn normalized_endpoints() {
        let lo = PtParams::from_array(PARAM_RANGES.map(|r| r.0)).unwrap();
        let hi = PtParams::from_array(PARAM_RANGES.map(|r| r.1)).unwrap();
        assert_eq!(lo.normalized(), [0.0; N_PARAMS]);
        assert_eq!(hi.normalized(), [1.0; N_PARAMS]);
    }

    proptest! {
        #[test]
        fn normalize_denormalize_round_trip(u in proptest::array::uniform6(0.0f64..=1.0)) {
            let p = PtParams::from_normalized(u).unwrap();
            let back = p.normalized();
            for i in 0..N_PARAMS {
                prop_assert!((back[i] - u[i]).abs() < 1e-9);
            }
        }
    }

    fn bp(t: f64, f: f64) -> Breakpoint {
        let mut p = PtParams::neutral();
        p.frequency = f;
        Breakpoint { t, params: p }
    }

    #[test]
    fn track_validation() {
        assert!(ParamTrack::new(Interpolation::Hold, vec![]).is_err());
        assert!(ParamTrack::new(Interpolation::Hold, vec![bp(0.1, 100.0)]).is_err());
        assert!(
            ParamTrack::new(Interpolation::Hold, vec![bp(0.0, 100.0), bp(0.0, 120.0)]).is_err()
        );
    }

    #[test]
    fn hold_and_linear_lookup() {
        let pts = vec![bp(0.0, 100.0), bp(0.5, 200.0)];
        let hold = ParamTrack::new(Interpolation::Hold, pts.clone()).unwrap();
        assert_eq!(hold.at(0.25).frequency, 100.0);
        assert_eq!(hold.at(0.5).frequency, 200.0);
        assert_eq!(hold.at(0.9).frequency, 200.0);
        let lin = ParamTrack::new(Interpolation::Linear, pts).unwrap();
        assert!((lin.at(0.25).frequency - 150.0).abs() < 1e-12);
        assert_eq!(lin.at(0.75).frequency, 200.0);
        assert_eq!(lin.at(-1.0).frequency, 100.0);
    }

    #[test]
    fn json_shape_and_validation() {
        let track = ParamTrack::new(Interpolation::Linear, vec![bp(0.0, 100.0), bp(1.0, 150.0)])
            .unwrap();
        let json = track.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["interpolation"], "linear");
        assert_eq!(v["breakpoints"][1]["t"], 1.0);
        assert_eq!(v["breakpoints"][1]["frequency"], 150.0);
        let back: ParamTrack = serde_json::from_str(&json).unwrap();
        assert_eq!(back, track);

        let bad = json.replace("150.0", "950.0");
        assert!(serde_json::from_str::<ParamTrack>(&bad).is_err());
    }
}
