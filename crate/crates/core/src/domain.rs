//! Identifiers, the carousel/event data model, and the item catalog.
//!
//! Everything here is immutable after construction and shared freely across
//! threads. Identifiers are opaque strings compared byte-exact; internal
//! dense indices used by other modules never leak through these types.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("malformed JSON: {0}")]
    MalformedJson(#[from] serde_json::Error),
    #[error("missing required field {0:?}")]
    MissingField(&'static str),
    #[error("invalid field {field:?}: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("unknown event {0:?}")]
    UnknownEvent(String),
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("carousel {0:?} has no items")]
    EmptyCarousel(String),
    #[error("carousel {carousel:?} lists item {item:?} twice")]
    DuplicateItem { carousel: String, item: String },
    #[error("catalog maps item {item:?} to both {existing:?} and {conflicting:?}")]
    ConflictingCategory {
        item: String,
        existing: String,
        conflicting: String,
    },
    #[error("catalog line {line}: {source}")]
    CatalogLine {
        line: usize,
        source: Box<DomainError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Declares a validated opaque string identifier newtype.
macro_rules! string_id {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            /// Validates and wraps a raw identifier. Identifiers must be
            /// non-empty and contain no whitespace.
            pub fn new(raw: impl Into<String>) -> Result<Self, String> {
                let raw = raw.into();
                if raw.is_empty() {
                    return Err("identifier is empty".into());
                }
                if raw.chars().any(char::is_whitespace) {
                    return Err(format!("identifier {raw:?} contains whitespace"));
                }
                Ok(Self(raw))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl TryFrom<String> for $name {
            type Error = String;
            fn try_from(raw: String) -> Result<Self, String> {
                Self::new(raw)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(de)?;
                Self::new(raw).map_err(serde::de::Error::custom)
            }
        }
    };
}

string_id!(
    /// Opaque user identifier.
    UserId
);
string_id!(
    /// Opaque item identifier.
    ItemId
);
string_id!(
    /// Opaque carousel identifier.
    CarouselId
);
string_id!(
    /// Opaque category identifier.
    CategoryId
);

/// The three interaction events a client can report for a carousel.
///
/// Serialized lowercase on the wire; the enum is closed, anything else is a
/// parse error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventType {
    View,
    Click,
    Atc,
}

impl EventType {
    pub fn parse(raw: &str) -> Result<Self, DomainError> {
        match raw {
            "view" => Ok(Self::View),
            "click" => Ok(Self::Click),
            "atc" => Ok(Self::Atc),
            other => Err(DomainError::UnknownEvent(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::View => "view",
            Self::Click => "click",
            Self::Atc => "atc",
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One user-carousel interaction as streamed from clients.
///
/// `item` is absent for carousel-level view events (an impression of the
/// whole carousel); click and atc always carry the item acted on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InteractionEvent {
    pub ts: i64,
    pub user: UserId,
    pub carousel: CarouselId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item: Option<ItemId>,
    pub event: EventType,
}

impl InteractionEvent {
    /// Serializes to the one-object-per-line wire format.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serialization cannot fail")
    }
}

#[derive(Deserialize)]
struct RawEvent {
    ts: Option<i64>,
    user: Option<String>,
    carousel: Option<String>,
    item: Option<String>,
    event: Option<String>,
}

/// Decodes one JSONL event line. Unknown fields are ignored; missing or
/// invalid required fields fail with an error naming the field.
pub fn parse_event(line: &str) -> Result<InteractionEvent, DomainError> {
    let raw: RawEvent = serde_json::from_str(line)?;

    let ts = raw.ts.ok_or(DomainError::MissingField("ts"))?;
    if ts < 0 {
        return Err(DomainError::InvalidField {
            field: "ts",
            reason: format!("timestamp {ts} is negative"),
        });
    }
    let user = raw
        .user
        .ok_or(DomainError::MissingField("user"))
        .and_then(|u| {
            UserId::new(u).map_err(|reason| DomainError::InvalidField {
                field: "user",
                reason,
            })
        })?;
    let carousel = raw
        .carousel
        .ok_or(DomainError::MissingField("carousel"))
        .and_then(|c| {
            CarouselId::new(c).map_err(|reason| DomainError::InvalidField {
                field: "carousel",
                reason,
            })
        })?;
    let event = EventType::parse(&raw.event.ok_or(DomainError::MissingField("event"))?)?;
    let item = raw
        .item
        .map(|i| {
            ItemId::new(i).map_err(|reason| DomainError::InvalidField {
                field: "item",
                reason,
            })
        })
        .transpose()?;
    if item.is_none() && matches!(event, EventType::Click | EventType::Atc) {
        return Err(DomainError::MissingField("item"));
    }

    Ok(InteractionEvent {
        ts,
        user,
        carousel,
        item,
        event,
    })
}

/// An immutable ordered list of items under one carousel id.
///
/// Construction rejects empty lists and duplicate items; nothing downstream
/// can reorder the items (there is no mutable access).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Carousel {
    id: CarouselId,
    items: Vec<ItemId>,
}

impl Carousel {
    pub fn new(id: CarouselId, items: Vec<ItemId>) -> Result<Self, DomainError> {
        if items.is_empty() {
            return Err(DomainError::EmptyCarousel(id.as_str().to_string()));
        }
        let mut seen = std::collections::HashSet::with_capacity(items.len());
        for item in &items {
            if !seen.insert(item) {
                return Err(DomainError::DuplicateItem {
                    carousel: id.as_str().to_string(),
                    item: item.as_str().to_string(),
                });
            }
        }
        Ok(Self { id, items })
    }

    pub fn id(&self) -> &CarouselId {
        &self.id
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one item
    }
}

impl<'de> Deserialize<'de> for Carousel {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct RawCarousel {
            id: CarouselId,
            items: Vec<ItemId>,
        }
        let raw = RawCarousel::deserialize(de)?;
        Carousel::new(raw.id, raw.items).map_err(serde::de::Error::custom)
    }
}

/// Total many-to-one item → category mapping loaded from the catalog.
///
/// Lookups of unknown items are an error, never a default: every item a
/// candidate carousel or event references must be catalogued.
#[derive(Debug, Clone, Default)]
pub struct CategoryMap {
    map: HashMap<ItemId, CategoryId>,
}

impl CategoryMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a mapping. Re-registering the same pair is a no-op;
    /// conflicting categories for one item are an error.
    pub fn insert(&mut self, item: ItemId, category: CategoryId) -> Result<(), DomainError> {
        match self.map.get(&item) {
            Some(existing) if *existing != category => Err(DomainError::ConflictingCategory {
                item: item.as_str().to_string(),
                existing: existing.as_str().to_string(),
                conflicting: category.as_str().to_string(),
            }),
            Some(_) => Ok(()),
            None => {
                self.map.insert(item, category);
                Ok(())
            }
        }
    }

    /// The unique category of `item`, or an error carrying the item id.
    pub fn category_of(&self, item: &ItemId) -> Result<&CategoryId, DomainError> {
        self.map
            .get(item)
            .ok_or_else(|| DomainError::UnknownItem(item.as_str().to_string()))
    }

    pub fn contains(&self, item: &ItemId) -> bool {
        self.map.contains_key(item)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ItemId, &CategoryId)> {
        self.map.iter()
    }

    /// Loads `{"item": .., "category": ..}` JSONL. Duplicate item lines with
    /// conflicting categories are a load error.
    pub fn load_jsonl(path: &Path) -> Result<Self, DomainError> {
        let file = std::fs::File::open(path)?;
        let mut map = Self::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            map.add_jsonl_line(&line)
                .map_err(|source| DomainError::CatalogLine {
                    line: idx + 1,
                    source: Box::new(source),
                })?;
        }
        Ok(map)
    }

    fn add_jsonl_line(&mut self, line: &str) -> Result<(), DomainError> {
        #[derive(Deserialize)]
        struct RawEntry {
            item: Option<String>,
            category: Option<String>,
        }
        let raw: RawEntry = serde_json::from_str(line)?;
        let item = raw
            .item
            .ok_or(DomainError::MissingField("item"))
            .and_then(|i| {
                ItemId::new(i).map_err(|reason| DomainError::InvalidField {
                    field: "item",
                    reason,
                })
            })?;
        let category = raw
            .category
            .ok_or(DomainError::MissingField("category"))
            .and_then(|c| {
                CategoryId::new(c).map_err(|reason| DomainError::InvalidField {
                    field: "category",
                    reason,
                })
            })?;
        self.insert(item, category)
    }
}

impl FromIterator<(ItemId, CategoryId)> for CategoryMap {
    fn from_iter<T: IntoIterator<Item = (ItemId, CategoryId)>>(iter: T) -> Self {
        Self {
            map: iter.into_iter().collect(),
        }
    }
}
