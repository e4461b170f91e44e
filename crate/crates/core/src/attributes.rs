//! Standardized product attributes used for prefiltering and hard filters.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Topwear,
    Bottomwear,
    Footwear,
    Accessory,
    Outerwear,
    Dress,
    #[default]
    Unknown,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Topwear,
        Category::Bottomwear,
        Category::Footwear,
        Category::Accessory,
        Category::Outerwear,
        Category::Dress,
        Category::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Topwear => "topwear",
            Category::Bottomwear => "bottomwear",
            Category::Footwear => "footwear",
            Category::Accessory => "accessory",
            Category::Outerwear => "outerwear",
            Category::Dress => "dress",
            Category::Unknown => "unknown",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Men,
    Women,
    Unisex,
    Boys,
    Girls,
    #[default]
    Unknown,
}

impl Gender {
    pub const ALL: [Gender; 6] = [
        Gender::Men,
        Gender::Women,
        Gender::Unisex,
        Gender::Boys,
        Gender::Girls,
        Gender::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Men => "men",
            Gender::Women => "women",
            Gender::Unisex => "unisex",
            Gender::Boys => "boys",
            Gender::Girls => "girls",
            Gender::Unknown => "unknown",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }
}

macro_rules! str_enum {
    ($ty:ty) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| format!("unknown {}: {s:?}", stringify!($ty).to_lowercase()))
            }
        }
    };
}

str_enum!(Category);
str_enum!(Gender);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Price {
    /// Amount in the currency's minor unit (cents, paise, ...).
    pub minor: u64,
    pub currency: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeSet {
    pub category: Category,
    pub gender: Gender,
    pub brand: String,
    pub price: Option<Price>,
    pub sizes: BTreeSet<String>,
    pub geography: String,
}

/// Prefilter evaluated during index search. `None` fields match everything.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributePredicate {
    pub categories: Option<BTreeSet<Category>>,
    pub genders: Option<BTreeSet<Gender>>,
    pub geography: Option<String>,
}

impl AttributePredicate {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn is_trivial(&self) -> bool {
        self.categories.is_none() && self.genders.is_none() && self.geography.is_none()
    }

    pub fn with_categories(mut self, cats: impl IntoIterator<Item = Category>) -> Self {
        self.categories = Some(cats.into_iter().collect());
        self
    }

    pub fn with_genders(mut self, genders: impl IntoIterator<Item = Gender>) -> Self {
        self.genders = Some(genders.into_iter().collect());
        self
    }

    pub fn with_geography(mut self, geo: impl Into<String>) -> Self {
        self.geography = Some(geo.into());
        self
    }

    pub fn matches(&self, attrs: &AttributeSet) -> bool {
        if let Some(cats) = &self.categories {
            if !cats.contains(&attrs.category) {
                return false;
            }
        }
        if let Some(genders) = &self.genders {
            if !genders.contains(&attrs.gender) {
                return false;
            }
        }
        if let Some(geo) = &self.geography {
            if !attrs.geography.eq_ignore_ascii_case(geo) {
                return false;
            }
        }
        true
    }
}
