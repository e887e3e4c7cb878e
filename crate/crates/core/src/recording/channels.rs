//! Channel-name normalization onto the 10-20 label set.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::Deserialize;

use super::montage::STANDARD_1020;

const ALIAS_TABLE_TOML: &str = include_str!("../../data/channel_aliases.toml");

/// Parsed alias table. The shipped table is loaded once; custom tables can be
/// parsed with [`AliasTable::from_toml`].
#[derive(Debug, Clone)]
pub struct AliasTable {
    pub version: u32,
    prefixes: Vec<String>,
    reference_suffixes: Vec<String>,
    aliases: HashMap<String, String>,
    canonical: HashMap<String, &'static str>,
}

#[derive(Deserialize)]
struct RawTable {
    version: u32,
    prefixes: Vec<String>,
    reference_suffixes: Vec<String>,
    aliases: HashMap<String, String>,
}

impl AliasTable {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        let raw: RawTable = toml::from_str(text)?;
        let canonical = STANDARD_1020
            .iter()
            .map(|&l| (l.to_ascii_uppercase(), l))
            .collect();
        Ok(Self {
            version: raw.version,
            prefixes: raw.prefixes.iter().map(|p| p.to_ascii_uppercase()).collect(),
            reference_suffixes: raw
                .reference_suffixes
                .iter()
                .map(|s| s.to_ascii_uppercase())
                .collect(),
            aliases: raw
                .aliases
                .into_iter()
                .map(|(k, v)| (k.to_ascii_uppercase(), v))
                .collect(),
            canonical,
        })
    }

    /// The table shipped with the crate.
    pub fn shipped() -> &'static AliasTable {
        static TABLE: OnceLock<AliasTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            AliasTable::from_toml(ALIAS_TABLE_TOML).expect("shipped alias table parses")
        })
    }

    fn lookup(&self, core: &str) -> Option<&'static str> {
        let key = core.to_ascii_uppercase();
        if let Some(&label) = self.canonical.get(&key) {
            return Some(label);
        }
        let target = self.aliases.get(&key)?;
        self.canonical.get(&target.to_ascii_uppercase()).copied()
    }

    /// Map a raw header name to its canonical label, or `None` for non-EEG or
    /// unmappable channels.
    pub fn canonicalize(&self, raw: &str) -> Option<&'static str> {
        let mut s = raw.trim().to_ascii_uppercase();

        // acquisition prefix: "EEG FP1", "EEG:FP1", "POL T3"
        for prefix in &self.prefixes {
            if let Some(rest) = s.strip_prefix(prefix.as_str()) {
                if let Some(first) = rest.chars().next() {
                    if matches!(first, ' ' | ':' | '_' | '-' | '.') {
                        s = rest[1..].trim().to_string();
                        break;
                    }
                }
            }
        }

        // reference annotation: "FP1-REF", "C3 A1", "O2-M1"
        let mut parts = s
            .split(|c: char| c == '-' || c == ' ' || c == '_' || c == '/')
            .filter(|p| !p.is_empty());
        let core = parts.next()?.trim_end_matches('.').to_string();
        for extra in parts {
            if !self.reference_suffixes.iter().any(|r| r == extra) {
                return None;
            }
        }
        self.lookup(&core)
    }
}

/// Canonicalize with the shipped alias table.
pub fn canonicalize_channel_name(raw: &str) -> Option<&'static str> {
    AliasTable::shipped().canonicalize(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_aliases() {
        assert_eq!(canonicalize_channel_name("T7"), Some("T3"));
        assert_eq!(canonicalize_channel_name("P7"), Some("T5"));
        assert_eq!(canonicalize_channel_name("T8"), Some("T4"));
        assert_eq!(canonicalize_channel_name("P8"), Some("T6"));
        assert_eq!(canonicalize_channel_name("Fz"), Some("Fz"));
    }

    #[test]
    fn header_table() {
        // (raw header string, expected) mapped by inspection of common EDF
        // header conventions.
        let table: [(&str, Option<&str>); 30] = [
            ("EEG FP1-REF", Some("Fp1")),
            ("EEG FP2-REF", Some("Fp2")),
            ("EEG F7-REF", Some("F7")),
            ("EEG T3-REF", Some("T3")),
            ("EEG T5-LE", Some("T5")),
            ("EEG CZ-REF", Some("Cz")),
            ("EEG O1-LE", Some("O1")),
            ("EEG A1-REF", None),
            ("EEG EKG1-REF", None),
            ("ECG", None),
            ("EOG left", None),
            ("EMG", None),
            ("Fp1", Some("Fp1")),
            ("fp2", Some("Fp2")),
            ("FZ", Some("Fz")),
            ("t7", Some("T3")),
            ("P7", Some("T5")),
            ("P8-REF", Some("T6")),
            ("T8", Some("T4")),
            ("POL C3", Some("C3")),
            ("POL E", None),
            ("C4-A1", Some("C4")),
            ("O2-M1", Some("O2")),
            ("Pz-AVG", Some("Pz")),
            ("F3:", None),
            ("EEG:F4", Some("F4")),
            ("FP1-F7", None),
            ("Photic", None),
            ("  Cz  ", Some("Cz")),
            ("EEG T4-A1A2", Some("T4")),
        ];
        for (raw, expected) in table {
            assert_eq!(canonicalize_channel_name(raw), expected, "{raw:?}");
        }
    }

    #[test]
    fn idempotent_on_every_mappable_label() {
        for raw in ["T7", "EEG FP1-REF", "p8", "Cz", "POL O2"] {
            let once = canonicalize_channel_name(raw).unwrap();
            assert_eq!(canonicalize_channel_name(once), Some(once));
        }
        for label in STANDARD_1020 {
            assert_eq!(canonicalize_channel_name(label), Some(label));
        }
    }

    #[test]
    fn shipped_table_is_versioned() {
        assert_eq!(AliasTable::shipped().version, 1);
    }
}
