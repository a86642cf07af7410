//! Kelly-Lochbaum reflection line for the oral tract.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::PtParams;

pub const N_SECTIONS: usize = 44;

/// Section boundaries of the articulatory regions, scaled to `n` sections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TractGeometry {
    pub n: usize,
    pub blade_start: usize,
    pub tip_start: usize,
    pub lip_start: usize,
}

impl TractGeometry {
    pub fn new(n: usize) -> Self {
        let scale = |i: usize| (i as f64 * n as f64 / 44.0).floor() as usize;
        TractGeometry {
            n,
            blade_start: scale(10),
            tip_start: scale(32),
            lip_start: scale(39),
        }
    }

    /// Neutral diameters (cm): narrow glottal end, then the open pharynx and mouth.
    pub fn rest_diameters(&self) -> Vec<f64> {
        let n = self.n as f64;
        (0..self.n)
            .map(|i| {
                let i = i as f64;
                if i < 7.0 * n / 44.0 - 0.5 {
                    0.6
                } else if i < 12.0 * n / 44.0 {
                    1.1
                } else {
                    1.5
                }
            })
            .collect()
    }
}

impl Default for TractGeometry {
    fn default() -> Self {
        TractGeometry::new(N_SECTIONS)
    }
}

/// Raw articulator placement. Unlike [`PtParams`] this admits full closure
/// (`constriction_diameter = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Articulation {
    pub tongue_index: f64,
    pub tongue_diameter: f64,
    pub constriction_index: f64,
    pub constriction_diameter: f64,
}

impl From<&PtParams> for Articulation {
    fn from(p: &PtParams) -> Self {
        Articulation {
            tongue_index: p.tongue_index,
            tongue_diameter: p.tongue_diameter,
            constriction_index: p.constriction_index,
            constriction_diameter: p.constriction_diameter,
        }
    }
}

/// Junction reflection coefficients `k_i = (A_i - A_{i+1}) / (A_i + A_{i+1})`.
/// Two closed sections give `k = 0`.
pub fn reflection_coefficients(areas: &[f64]) -> Result<Vec<f64>> {
    if areas.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 tract sections, got {}",
            areas.len()
        )));
    }
    if let Some(a) = areas.iter().find(|a| !(**a >= 0.0) || !a.is_finite()) {
        return Err(Error::invalid(format!("tract area must be finite and >= 0, got {a}")));
    }
    let mut k = vec![0.0; areas.len() - 1];
    fill_reflections(areas, &mut k);
    Ok(k)
}

fn fill_reflections(areas: &[f64], k: &mut [f64]) {
    for (j, kj) in k.iter_mut().enumerate() {
        let (a, b) = (areas[j], areas[j + 1]);
        let sum = a + b;
        *kj = if sum > 0.0 { (a - b) / sum } else { 0.0 };
    }
}

/// Current diameters for a placement over `rest`.
///
/// The tongue body is a cosine bump over the blade..lip region whose depth
/// grows as `tongue_diameter` shrinks. The constriction then narrows
/// (never widens) sections around `constriction_index` toward
/// `constriction_diameter` with a raised-cosine taper.
pub fn shape_tract(art: &Articulation, rest: &[f64]) -> Result<Vec<f64>> {
    let vals = [
        art.tongue_index,
        art.tongue_diameter,
        art.constriction_index,
        art.constriction_diameter,
    ];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("articulation"));
    }
    if art.constriction_diameter < 0.0 {
        return Err(Error::invalid("constriction diameter must be >= 0"));
    }
    let geo = TractGeometry::new(rest.len());
    let mut d = rest.to_vec();

    let span = (geo.tip_start - geo.blade_start) as f64;
    let fixed = 2.0 + (art.tongue_diameter - 2.0) / 1.5;
    let depth = 1.5 - fixed + 1.7;
    for (i, di) in d.iter_mut().enumerate().take(geo.lip_start).skip(geo.blade_start) {
        let t = 1.1 * PI * (art.tongue_index - i as f64) / span;
        let mut curve = depth * t.cos();
        if i == geo.lip_start - 1 {
            curve *= 0.8;
        }
        if i == geo.blade_start || i == geo.lip_start - 2 {
            curve *= 0.94;
        }
        *di = 1.5 - curve;
    }

    apply_constriction(&mut d, &geo, art.constriction_index, art.constriction_diameter);
    Ok(d)
}

fn apply_constriction(d: &mut [f64], geo: &TractGeometry, index: f64, diameter: f64) {
    let tip = geo.tip_start as f64;
    let n = geo.n as f64;
    let width = if index < 25.0 * n / 44.0 {
        10.0
    } else if index >= tip {
        5.0
    } else {
        10.0 - 5.0 * (index - 25.0 * n / 44.0) / (tip - 25.0 * n / 44.0)
    };
    let center = index.round() as i64;
    let reach = width.ceil() as i64 + 1;
    for i in (center - reach)..=(center + reach) {
        if i < 0 || i as usize >= d.len() {
            continue;
        }
        let relpos = (i as f64 - index).abs() - 0.5;
        let shrink = if relpos <= 0.0 {
            0.0
        } else if relpos > width {
            1.0
        } else {
            0.5 * (1.0 - (PI * relpos / width).cos())
        };
        let di = &mut d[i as usize];
        if diameter < *di {
            *di = diameter + (*di - diameter) * shrink;
        }
    }
}

/// Shape for a validated parameter set.
pub fn tract_shape(params: &PtParams, rest: &[f64]) -> Vec<f64> {
    shape_tract(&Articulation::from(params), rest).expect("validated parameters shape the tract")
}

pub const GLOTTAL_REFLECTION: f64 = 0.75;
pub const LIP_REFLECTION: f64 = -0.85;
pub const DAMPING: f64 = 0.999;

/// Simulation state: geometry plus travelling pressure waves.
#[derive(Debug, Clone)]
pub struct TractState {
    pub n_sections: usize,
    pub rest_diameters: Vec<f64>,
    pub current_diameters: Vec<f64>,
    pub areas: Vec<f64>,
    pub reflections: Vec<f64>,
    /// Glottal phase, radians.
    pub glottal_phase: f64,
    /// Right-going (toward the lips) wave per section.
    pub forward: Vec<f64>,
    /// Left-going (toward the glottis) wave per section.
    pub backward: Vec<f64>,
    junction_forward: Vec<f64>,
    junction_backward: Vec<f64>,
}

impl TractState {
    pub fn new(n_sections: usize) -> Result<Self> {
        if n_sections < 2 {
            return Err(Error::invalid("tract needs at least 2 sections"));
        }
        let rest = TractGeometry::new(n_sections).rest_diameters();
        let mut state = TractState {
            n_sections,
            rest_diameters: rest.clone(),
            current_diameters: rest,
            areas: vec![0.0; n_sections],
            reflections: vec![0.0; n_sections - 1],
            glottal_phase: 0.0,
            forward: vec![0.0; n_sections],
            backward: vec![0.0; n_sections],
            junction_forward: vec![0.0; n_sections + 1],
            junction_backward: vec![0.0; n_sections + 1],
        };
        state.refresh();
        Ok(state)
    }

    /// Installs new diameters and recomputes areas (`d^2`) and reflections.
    pub fn set_diameters(&mut self, diameters: &[f64]) {
        self.current_diameters.copy_from_slice(diameters);
        self.refresh();
    }

    fn refresh(&mut self) {
        for (a, d) in self.areas.iter_mut().zip(&self.current_diameters) {
            *a = d * d;
        }
        fill_reflections(&self.areas, &mut self.reflections);
    }

    /// Overrides the junction coefficients without touching the geometry.
    pub fn set_reflections(&mut self, k: &[f64]) {
        self.reflections.copy_from_slice(k);
    }

    /// One scattering step. Returns the pressure wave leaving the lips.
    #[inline]
    pub fn step(&mut self, excitation: f64) -> f64 {
        let n = self.n_sections;
        let (r, l) = (&mut self.forward, &mut self.backward);
        let (jr, jl) = (&mut self.junction_forward, &mut self.junction_backward);
        jr[0] = l[0] * GLOTTAL_REFLECTION + excitation;
        jl[n] = r[n - 1] * LIP_REFLECTION;
        for j in 0..n - 1 {
            let w = self.reflections[j] * (r[j] + l[j + 1]);
            jr[j + 1] = r[j] - w;
            jl[j + 1] = l[j + 1] + w;
        }
        for i in 0..n {
            r[i] = jr[i] * DAMPING;
            l[i] = jl[i + 1] * DAMPING;
        }
        r[n - 1]
    }

    pub fn reset_waves(&mut self) {
        self.forward.iter_mut().for_each(|v| *v = 0.0);
        self.backward.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_closed_forms() {
        assert_eq!(reflection_coefficients(&[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(reflection_coefficients(&[1.0, 0.0]).unwrap(), vec![1.0]);
        assert_eq!(reflection_coefficients(&[1.0, 3.0]).unwrap(), vec![-0.5]);
        assert_eq!(reflection_coefficients(&[0.0, 0.0]).unwrap(), vec![0.0]);
        assert_eq!(reflection_coefficients(&[0.0, 2.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn reflection_rejects_bad_input() {
        assert!(reflection_coefficients(&[1.0]).is_err());
        assert!(reflection_coefficients(&[1.0, -0.1]).is_err());
        assert!(reflection_coefficients(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn geometry_matches_reference_layout() {
        let g = TractGeometry::default();
        assert_eq!((g.blade_start, g.tip_start, g.lip_start), (10, 32, 39));
        let rest = g.rest_diameters();
        assert_eq!(rest.len(), 44);
        assert_eq!(rest[0], 0.6);
        assert_eq!(rest[7], 1.1);
        assert_eq!(rest[43], 1.5);
    }

    fn art(ci: f64, cd: f64) -> Articulation {
        Articulation {
            tongue_index: 20.0,
            tongue_diameter: 2.75,
            constriction_index: ci,
            constriction_diameter: cd,
        }
    }

    #[test]
    fn full_closure_is_honoured() {
        let rest = TractGeometry::default().rest_diameters();
        for &i in &[2.0, 17.0, 30.0, 41.0, 43.0] {
            let d = shape_tract(&art(i, 0.0), &rest).unwrap();
            assert_eq!(d[i as usize], 0.0, "closure at {i}");
            assert!(d.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn wide_constriction_is_a_no_op() {
        let rest = TractGeometry::default().rest_diameters();
        let tongue_only = shape_tract(&art(30.0, 100.0), &rest).unwrap();
        for &cd in &[3.5, 5.0] {
            let d = shape_tract(&art(30.0, cd), &rest).unwrap();
            // Every section near 30 is at most 3.5 wide after the tongue bump.
            assert_eq!(d, tongue_only);
        }
    }

    #[test]
    fn constriction_only_narrows() {
        let rest = TractGeometry::default().rest_diameters();
        let base = shape_tract(&art(30.0, 100.0), &rest).unwrap();
        let narrowed = shape_tract(&art(30.0, 0.4), &rest).unwrap();
        for (a, b) in narrowed.iter().zip(&base) {
            assert!(a <= b);
        }
    }

    #[test]
    fn neutral_shape_matches_fixture() {
        // Frozen from this implementation for PtParams::neutral().
        const FIXTURE: [f64; 44] = [
            0.6, 0.6, 0.6, 0.6,
            0.6, 0.6, 0.6, 1.1,
            1.1, 1.1, 1.5, 1.3904958744718385,
            1.283688103937537, 1.1822066501823172, 1.088550323395269, 1.0050252531694168,
            0.9336881039375369, 0.8762954330681425, 0.8342604385933926, 0.8086181615834036,
            0.8, 0.8086181615834036, 0.8342604385933926, 0.8762954330681425,
            0.9336881039375369, 1.0050252531694168, 1.088550323395269, 1.1822066501823172,
            1.283688103937537, 1.3904958744718385, 1.5000000000000002, 1.6095041255281615,
            1.7163118960624633, 1.817793349817683, 1.911449676604731, 1.9949747468305834,
            2.066311896062463, 2.0862822929159464, 2.032591649125286, 1.5,
            1.5, 1.5, 1.5, 1.5,
        ];
        let rest = TractGeometry::default().rest_diameters();
        let d = tract_shape(&PtParams::neutral(), &rest);
        for (i, (a, b)) in d.iter().zip(FIXTURE.iter()).enumerate() {
            assert!((a - b).abs() < 1e-12, "section {i}: {a} vs {b}");
        }
    }

    #[test]
    fn state_areas_are_squared_diameters() {
        let mut s = TractState::new(N_SECTIONS).unwrap();
        let rest = s.rest_diameters.clone();
        let d = tract_shape(&PtParams::neutral(), &rest);
        s.set_diameters(&d);
        for (a, d) in s.areas.iter().zip(&s.current_diameters) {
            assert_eq!(*a, d * d);
            assert!(*d >= 0.0);
        }
        assert!(s.reflections.iter().all(|k| (-1.0..=1.0).contains(k)));
    }

    /// With every junction transparent the line is a pure delay loop:
    /// y[s] = D^n x[s-n+1] + g * lip * D^(2n) y[s-2n].
    #[test]
    fn transparent_tract_equals_delay_loop() {
        let n = N_SECTIONS;
        let mut s = TractState::new(n).unwrap();
        s.set_reflections(&vec![0.0; n - 1]);
        let x: Vec<f64> = (0..5000)
            .map(|i| ((i as f64) * 0.37).sin() * (1.0 + (i % 7) as f64 * 0.1))
            .collect();
        let got: Vec<f64> = x.iter().map(|&v| s.step(v)).collect();

        let a = DAMPING.powi(n as i32);
        let b = GLOTTAL_REFLECTION * LIP_REFLECTION * DAMPING.powi(2 * n as i32);
        let mut want = vec![0.0; x.len()];
        for i in 0..x.len() {
            let direct = if i + 1 >= n { a * x[i + 1 - n] } else { 0.0 };
            let echo = if i >= 2 * n { b * want[i - 2 * n] } else { 0.0 };
            want[i] = direct + echo;
        }
        let max_dev = got
            .iter()
            .zip(&want)
            .map(|(g, w)| (g - w).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-9, "max deviation {max_dev}");
    }
}
