//! 10-20 electrode geometry on a spherical head model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Radius of the spherical head model in centimeters.
pub const HEAD_RADIUS_CM: f64 = 9.2;

/// The 19 canonical labels of the 10-20 system, in conventional order.
pub const STANDARD_1020: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz",
    "P4", "T6", "O1", "O2",
];

// (azimuth from the nose in degrees, positive toward the right ear;
//  polar angle from the vertex as a fraction of 180 degrees)
const POLAR_TABLE: [(&str, f64, f64); 19] = [
    ("Fp1", -18.0, 0.511),
    ("Fp2", 18.0, 0.511),
    ("F7", -54.0, 0.511),
    ("F3", -39.0, 0.333),
    ("Fz", 0.0, 0.256),
    ("F4", 39.0, 0.333),
    ("F8", 54.0, 0.511),
    ("T3", -90.0, 0.511),
    ("C3", -90.0, 0.256),
    ("Cz", 0.0, 0.0),
    ("C4", 90.0, 0.256),
    ("T4", 90.0, 0.511),
    ("T5", -126.0, 0.511),
    ("P3", -141.0, 0.333),
    ("Pz", 180.0, 0.256),
    ("P4", 141.0, 0.333),
    ("T6", 126.0, 0.511),
    ("O1", -162.0, 0.511),
    ("O2", 162.0, 0.511),
];

/// Electrode label → (x, y, z) in cm. x points to the right ear, y to the
/// nose, z to the vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MontageMap {
    entries: BTreeMap<String, [f64; 3]>,
}

impl MontageMap {
    /// Standard 19-channel montage on a sphere of [`HEAD_RADIUS_CM`].
    pub fn standard_1020() -> Self {
        let entries = POLAR_TABLE
            .iter()
            .map(|&(label, azimuth_deg, polar_frac)| {
                let az = azimuth_deg.to_radians();
                let polar = (polar_frac * 180.0_f64).to_radians();
                let xyz = [
                    HEAD_RADIUS_CM * polar.sin() * az.sin(),
                    HEAD_RADIUS_CM * polar.sin() * az.cos(),
                    HEAD_RADIUS_CM * polar.cos(),
                ];
                (label.to_string(), xyz)
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, label: &str) -> Option<[f64; 3]> {
        self.entries.get(label).copied()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.contains_key(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Euclidean distance between two electrodes in cm.
    pub fn distance(&self, a: &str, b: &str) -> Option<f64> {
        let (pa, pb) = (self.get(a)?, self.get(b)?);
        Some(euclidean(pa, pb))
    }
}

impl Default for MontageMap {
    fn default() -> Self {
        Self::standard_1020()
    }
}

pub(crate) fn euclidean(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn has_all_standard_labels_within_bounding_sphere() {
        let m = MontageMap::standard_1020();
        assert_eq!(m.len(), 19);
        for label in STANDARD_1020 {
            let p = m.get(label).unwrap();
            let r = euclidean(p, [0.0; 3]);
            assert!(r <= 12.0, "{label} at radius {r}");
            assert!((r - HEAD_RADIUS_CM).abs() < 1e-9);
        }
    }

    #[test]
    fn distances_form_a_metric() {
        let m = MontageMap::standard_1020();
        for a in STANDARD_1020 {
            assert_eq!(m.distance(a, a).unwrap(), 0.0);
            for b in STANDARD_1020 {
                let dab = m.distance(a, b).unwrap();
                assert_eq!(dab, m.distance(b, a).unwrap());
                for c in STANDARD_1020 {
                    let dac = m.distance(a, c).unwrap();
                    let dcb = m.distance(c, b).unwrap();
                    assert!(dab <= dac + dcb + 1e-12);
                }
            }
        }
    }

    #[test]
    fn hemispheres_and_midline() {
        let m = MontageMap::standard_1020();
        assert!(m.get("C3").unwrap()[0] < 0.0);
        assert!(m.get("C4").unwrap()[0] > 0.0);
        assert!(m.get("Fz").unwrap()[0].abs() < 1e-12);
        assert!(m.get("Fp1").unwrap()[1] > m.get("O1").unwrap()[1]);
        // far apart on the scalp
        assert!(m.distance("Fp1", "O2").unwrap() > 15.0);
    }
}
