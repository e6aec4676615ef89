use super::{ElementKind, SpecialAppearance, TileTuple};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const CATALOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CatalogError {
    #[error("catalog is missing element kind `{0}`")]
    MissingKind(String),
    #[error("catalog kind `{0}` has no labels")]
    EmptyKind(String),
    #[error("unknown element kind `{0}`")]
    UnknownKind(String),
    #[error("duplicate label `{label}` in `{kind}`")]
    DuplicateLabel { kind: String, label: String },
    #[error("label `{label}` in `{kind}` is empty or has surrounding whitespace")]
    BadLabel { kind: String, label: String },
    #[error("unsupported catalog schema version {0}")]
    SchemaVersion(u32),
    #[error("catalog does not parse: {0}")]
    Parse(String),
    #[error("tuple limit must be at least 1")]
    ZeroLimit,
}

#[derive(Deserialize)]
struct CatalogDocument {
    schema_version: Option<u32>,
    tiles: BTreeMap<String, Vec<String>>,
}

#[derive(Serialize)]
struct CatalogDocumentOut<'a> {
    schema_version: u32,
    tiles: BTreeMap<&'a str, &'a [String]>,
}

/// Labels available per element kind.
///
/// Stored as TOML:
///
/// ```toml
/// schema_version = 1
/// [tiles]
/// protagonist = ["a cat", "a firefighter"]
/// location = ["a kitchen"]
/// # ... one array per element kind
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileCatalog {
    entries: BTreeMap<ElementKind, Vec<String>>,
}

const BUILTIN_CATALOG: &str = include_str!("../../catalog/tiles.toml");

impl TileCatalog {
    /// The catalog shipped with the crate.
    pub fn builtin() -> TileCatalog {
        TileCatalog::from_toml(BUILTIN_CATALOG).expect("builtin catalog is valid")
    }

    pub fn from_toml(source: &str) -> Result<TileCatalog, CatalogError> {
        let doc: CatalogDocument =
            toml::from_str(source).map_err(|e| CatalogError::Parse(e.to_string()))?;
        if let Some(v) = doc.schema_version {
            if v != CATALOG_SCHEMA_VERSION {
                return Err(CatalogError::SchemaVersion(v));
            }
        }
        TileCatalog::from_map(doc.tiles)
    }

    pub fn from_map(map: BTreeMap<String, Vec<String>>) -> Result<TileCatalog, CatalogError> {
        if let Some(unknown) = map.keys().find(|k| ElementKind::from_key(k).is_none()) {
            return Err(CatalogError::UnknownKind(unknown.clone()));
        }
        let mut entries = BTreeMap::new();
        for kind in ElementKind::ALL {
            let labels = map
                .get(kind.key())
                .ok_or_else(|| CatalogError::MissingKind(kind.key().to_string()))?;
            if labels.is_empty() {
                return Err(CatalogError::EmptyKind(kind.key().to_string()));
            }
            let mut seen = BTreeSet::new();
            for label in labels {
                if label.is_empty() || label.trim() != label {
                    return Err(CatalogError::BadLabel {
                        kind: kind.key().to_string(),
                        label: label.clone(),
                    });
                }
                if !seen.insert(label.as_str()) {
                    return Err(CatalogError::DuplicateLabel {
                        kind: kind.key().to_string(),
                        label: label.clone(),
                    });
                }
            }
            entries.insert(kind, labels.clone());
        }
        Ok(TileCatalog { entries })
    }

    pub fn load(path: &std::path::Path) -> Result<TileCatalog, CatalogError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CatalogError::Parse(format!("{}: {e}", path.display())))?;
        TileCatalog::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        let doc = CatalogDocumentOut {
            schema_version: CATALOG_SCHEMA_VERSION,
            tiles: self
                .entries
                .iter()
                .map(|(k, v)| (k.key(), v.as_slice()))
                .collect(),
        };
        toml::to_string(&doc).expect("catalog serializes")
    }

    pub fn labels(&self, kind: ElementKind) -> &[String] {
        self.entries.get(&kind).map_or(&[], |v| v.as_slice())
    }

    pub fn contains(&self, kind: ElementKind, label: &str) -> bool {
        self.labels(kind).iter().any(|l| l == label)
    }

    /// Size of the full cross product, saturating at `u128::MAX`.
    pub fn combinations(&self) -> u128 {
        ElementKind::ALL
            .iter()
            .fold(1u128, |acc, k| acc.saturating_mul(self.labels(*k).len() as u128))
    }

    /// Decodes a mixed-radix index (protagonist most significant) into a tuple.
    fn tuple_at(&self, mut index: u128) -> TileTuple {
        let mut picks = [0usize; 6];
        for (slot, kind) in ElementKind::ALL.iter().enumerate().rev() {
            let radix = self.labels(*kind).len() as u128;
            picks[slot] = (index % radix) as usize;
            index /= radix;
        }
        let label = |slot: usize| self.labels(ElementKind::ALL[slot])[picks[slot]].clone();
        TileTuple {
            protagonist: label(0),
            location: label(1),
            mood: label(2),
            important_object: label(3),
            activity: label(4),
            special_appearance: SpecialAppearance::Tile(label(5)),
        }
    }
}

/// Draws `min(limit, |cross product|)` distinct tuples uniformly without replacement.
///
/// Output is ordered by cross-product index, so it is fully determined by `seed`.
pub fn enumerate_tuples(
    catalog: &TileCatalog,
    limit: usize,
    seed: u64,
) -> Result<Vec<TileTuple>, CatalogError> {
    if limit == 0 {
        return Err(CatalogError::ZeroLimit);
    }
    for kind in ElementKind::ALL {
        if catalog.labels(kind).is_empty() {
            return Err(CatalogError::EmptyKind(kind.key().to_string()));
        }
    }
    let total = catalog.combinations();
    if total <= limit as u128 {
        return Ok((0..total).map(|i| catalog.tuple_at(i)).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<u128> = if let Ok(total) = usize::try_from(total) {
        rand::seq::index::sample(&mut rng, total, limit)
            .into_iter()
            .map(|i| i as u128)
            .collect()
    } else {
        // Cross product too large to index; rejection sampling is exact and cheap here.
        use rand::Rng;
        let mut picked = BTreeSet::new();
        while picked.len() < limit {
            picked.insert(rng.random_range(0..total));
        }
        picked.into_iter().collect()
    };
    indices.sort_unstable();
    Ok(indices.into_iter().map(|i| catalog.tuple_at(i)).collect())
}
