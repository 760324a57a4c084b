//! Classification of candidate routing algorithms and the filter that narrows them.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// The catalog shipped with the crate.
pub const SHIPPED: &str = include_str!("../data/catalog.csv");

pub const HEADER: [&str; 8] = [
    "name",
    "scalability",
    "self_org",
    "trustlessness",
    "comm_compat",
    "multipath",
    "exclusion",
    "exclusion_note",
];

/// The final choice, in catalog order.
pub const SELECTION: [&str; 3] = ["E-TORA", "TERP", "M-DART"];

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("duplicate protocol name `{0}`")]
    Duplicate(String),
    #[error("row {row}: `{name}` is excluded but has no note")]
    MissingNote { row: usize, name: String },
    #[error("selected protocol `{0}` is not on the shortlist")]
    Inconsistent(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rating {
    Full,
    Partial,
    Fail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exclusion {
    None,
    ScalabilityResource,
    SelfOrganization,
    CommunicationCompat,
    LocationBased,
    Superseded,
}

macro_rules! text_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),+ }
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok($ty::$var),)+
                    _ => Err(format!("invalid {} `{s}`", stringify!($ty).to_lowercase())),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

text_enum!(Rating { Full => "full", Partial => "partial", Fail => "fail" });
text_enum!(Exclusion {
    None => "none",
    ScalabilityResource => "scalability",
    SelfOrganization => "self_org",
    CommunicationCompat => "comm_compat",
    LocationBased => "location",
    Superseded => "superseded",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratings {
    pub scalability_resource_efficiency: Rating,
    pub self_organization_flexibility: Rating,
    pub trustlessness: Rating,
    pub communication_compatibility: Rating,
    pub multipath: Rating,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub name: String,
    pub ratings: Ratings,
    pub exclusion: Exclusion,
    pub exclusion_note: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    pub entries: Vec<ProtocolEntry>,
}

fn field<T: FromStr<Err = String>>(rec: &csv::StringRecord, i: usize, row: usize) -> Result<T, CatalogError> {
    let raw = rec.get(i).ok_or_else(|| CatalogError::Parse {
        row,
        msg: format!("missing column `{}`", HEADER[i]),
    })?;
    raw.parse().map_err(|msg| CatalogError::Parse { row, msg })
}

impl Catalog {
    /// Parses catalog CSV text. Row numbers in errors count the header as row 1.
    pub fn parse(text: &str) -> Result<Catalog, CatalogError> {
        if text.trim().is_empty() {
            return Ok(Catalog::default());
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| CatalogError::Parse { row: 1, msg: e.to_string() })?;
        if header.iter().ne(HEADER.iter().copied()) {
            return Err(CatalogError::Parse {
                row: 1,
                msg: format!("expected header `{}`", HEADER.join(",")),
            });
        }
        let mut entries = Vec::new();
        let mut names = HashSet::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| CatalogError::Parse { row, msg: e.to_string() })?;
            if rec.len() != HEADER.len() {
                return Err(CatalogError::Parse {
                    row,
                    msg: format!("expected {} columns, found {}", HEADER.len(), rec.len()),
                });
            }
            let name = rec[0].to_string();
            if name.is_empty() {
                return Err(CatalogError::Parse { row, msg: "empty name".into() });
            }
            let entry = ProtocolEntry {
                ratings: Ratings {
                    scalability_resource_efficiency: field(&rec, 1, row)?,
                    self_organization_flexibility: field(&rec, 2, row)?,
                    trustlessness: field(&rec, 3, row)?,
                    communication_compatibility: field(&rec, 4, row)?,
                    multipath: field(&rec, 5, row)?,
                },
                exclusion: field(&rec, 6, row)?,
                exclusion_note: rec[7].to_string(),
                name,
            };
            if entry.exclusion != Exclusion::None && entry.exclusion_note.trim().is_empty() {
                return Err(CatalogError::MissingNote { row, name: entry.name });
            }
            if !names.insert(entry.name.clone()) {
                return Err(CatalogError::Duplicate(entry.name));
            }
            entries.push(entry);
        }
        Ok(Catalog { entries })
    }

    pub fn shipped() -> Catalog {
        Catalog::parse(SHIPPED).expect("shipped catalog is valid")
    }

    pub fn serialize(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for e in &self.entries {
            let r = &e.ratings;
            w.write_record([
                e.name.as_str(),
                r.scalability_resource_efficiency.as_str(),
                r.self_organization_flexibility.as_str(),
                r.trustlessness.as_str(),
                r.communication_compatibility.as_str(),
                r.multipath.as_str(),
                e.exclusion.as_str(),
                e.exclusion_note.as_str(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn get(&self, name: &str) -> Option<&ProtocolEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn load_catalog(path: &Path) -> Result<Catalog, CatalogError> {
    let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Catalog::parse(&text)
}

/// Names of entries not excluded, in catalog order.
pub fn shortlist(catalog: &Catalog) -> Vec<&str> {
    catalog
        .entries
        .iter()
        .filter(|e| e.exclusion == Exclusion::None)
        .map(|e| e.name.as_str())
        .collect()
}

/// The fixed selection, checked against the shortlist.
pub fn selected(catalog: &Catalog) -> Result<Vec<&'static str>, CatalogError> {
    let short: HashSet<&str> = shortlist(catalog).into_iter().collect();
    match SELECTION.iter().find(|s| !short.contains(*s)) {
        Some(missing) => Err(CatalogError::Inconsistent(missing.to_string())),
        None => Ok(SELECTION.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set<'a>(v: impl IntoIterator<Item = &'a str>) -> HashSet<&'a str> {
        v.into_iter().collect()
    }

    const HEAD: &str = "name,scalability,self_org,trustlessness,comm_compat,multipath,exclusion,exclusion_note\n";

    #[test]
    fn shipped_has_all_rows() {
        let c = Catalog::shipped();
        assert_eq!(c.entries.len(), 61);
        assert_eq!(c.entries[0].name, "WRP");
        assert_eq!(c.entries[60].name, "VCP");
    }

    #[test]
    fn shipped_shortlist_and_selection() {
        let c = Catalog::shipped();
        assert_eq!(shortlist(&c), ["E-TORA", "ZRP", "ROAM", "CBMPR", "TERP", "M-DART"]);
        assert_eq!(set(selected(&c).unwrap()), set(["E-TORA", "TERP", "M-DART"]));
        assert!(set(selected(&c).unwrap()).is_subset(&set(shortlist(&c))));
    }

    #[test]
    fn transcribed_ratings() {
        let c = Catalog::shipped();
        let tora = c.get("TORA").unwrap();
        assert_eq!(tora.exclusion, Exclusion::Superseded);
        let r = tora.ratings;
        assert_eq!(
            [r.scalability_resource_efficiency, r.self_organization_flexibility, r.trustlessness, r.communication_compatibility],
            [Rating::Partial, Rating::Partial, Rating::Full, Rating::Full]
        );
        let swe = c.get("SWE").unwrap().ratings;
        assert_eq!(swe.multipath, Rating::Fail);
        assert_eq!(c.get("MWE").unwrap().ratings.multipath, Rating::Full);
        assert_eq!(c.get("M-DART").unwrap().ratings.self_organization_flexibility, Rating::Full);
    }

    #[test]
    fn exclusion_groups() {
        let c = Catalog::shipped();
        let of = |x: Exclusion| c.entries.iter().filter(|e| e.exclusion == x).count();
        assert_eq!(of(Exclusion::LocationBased), 8);
        assert_eq!(of(Exclusion::Superseded), 1);
        for name in ["LEACH", "SEECH", "SPIN-RL", "IEMF/IEMA", "RPL"] {
            assert_eq!(c.get(name).unwrap().exclusion, Exclusion::CommunicationCompat, "{name}");
        }
        for name in ["VGA", "SPastry", "Sleep/Wake", "MMSPEED"] {
            assert_eq!(c.get(name).unwrap().exclusion, Exclusion::SelfOrganization, "{name}");
        }
        assert!(c.entries.iter().all(|e| e.exclusion == Exclusion::None || !e.exclusion_note.is_empty()));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        assert_eq!(Catalog::shipped().serialize(), SHIPPED);
    }

    #[test]
    fn empty_body_is_empty_catalog() {
        assert_eq!(Catalog::parse("").unwrap().entries.len(), 0);
        assert_eq!(Catalog::parse(HEAD).unwrap().entries.len(), 0);
    }

    #[test]
    fn missing_column_names_row() {
        let text = format!("{HEAD}A,full,full,full,none,\nB,full,full,full,full,none,\n");
        match Catalog::parse(&text) {
            Err(CatalogError::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_rating_and_duplicates() {
        let bad = format!("{HEAD}A,full,good,full,full,full,none,\n");
        assert!(matches!(Catalog::parse(&bad), Err(CatalogError::Parse { row: 2, .. })));
        let dup = format!("{HEAD}A,full,full,full,full,full,none,\nA,fail,fail,fail,fail,fail,none,\n");
        assert!(matches!(Catalog::parse(&dup), Err(CatalogError::Duplicate(n)) if n == "A"));
        let no_note = format!("{HEAD}A,full,full,full,full,full,location,\n");
        assert!(matches!(Catalog::parse(&no_note), Err(CatalogError::MissingNote { .. })));
    }

    #[test]
    fn trivial_shortlists() {
        let all_out = format!("{HEAD}A,full,full,full,full,full,location,x\nB,fail,fail,fail,fail,fail,scalability,y\n");
        assert!(shortlist(&Catalog::parse(&all_out).unwrap()).is_empty());
        let one = format!("{HEAD}A,full,full,full,full,full,none,\n");
        assert_eq!(shortlist(&Catalog::parse(&one).unwrap()), ["A"]);
    }

    #[test]
    fn excluding_a_selected_protocol_is_inconsistent() {
        let text = SHIPPED.replace("E-TORA,partial,partial,full,full,full,none,", "E-TORA,partial,partial,full,full,full,superseded,test");
        let c = Catalog::parse(&text).unwrap();
        assert!(matches!(selected(&c), Err(CatalogError::Inconsistent(n)) if n == "E-TORA"));
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("catalog.csv");
        std::fs::write(&p, SHIPPED).unwrap();
        assert_eq!(load_catalog(&p).unwrap(), Catalog::shipped());
        assert!(matches!(load_catalog(&dir.path().join("nope.csv")), Err(CatalogError::Io { .. })));
    }
}
