//! Attribute vocabulary for synthetic identities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribute slots of one synthetic identity, as indices into a [`Catalog`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub gender: usize,
    pub upper: usize,
    pub upper_color: usize,
    pub lower: usize,
    pub lower_color: usize,
    pub accessory: usize,
    pub accessory_color: usize,
    pub action: usize,
}

pub const ATTRIBUTE_SLOTS: usize = 8;

impl Attributes {
    pub fn to_array(self) -> [usize; ATTRIBUTE_SLOTS] {
        [
            self.gender,
            self.upper,
            self.upper_color,
            self.lower,
            self.lower_color,
            self.accessory,
            self.accessory_color,
            self.action,
        ]
    }

    pub fn from_array(a: [usize; ATTRIBUTE_SLOTS]) -> Self {
        Attributes {
            gender: a[0],
            upper: a[1],
            upper_color: a[2],
            lower: a[3],
            lower_color: a[4],
            accessory: a[5],
            accessory_color: a[6],
            action: a[7],
        }
    }

    /// Number of slots whose values differ.
    pub fn distance(&self, other: &Attributes) -> usize {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .filter(|(a, b)| **a != *b)
            .count()
    }
}

/// Word lists per attribute role. Colors are adjectives, actions are verbs,
/// everything else is a noun.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub genders: Vec<String>,
    pub uppers: Vec<String>,
    pub lowers: Vec<String>,
    pub accessories: Vec<String>,
    pub colors: Vec<String>,
    pub actions: Vec<String>,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

/// RGB per catalog color, in catalog order.
pub const DEFAULT_PALETTE: [[f32; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.2, 0.9],
    [0.1, 0.8, 0.2],
    [0.95, 0.9, 0.1],
    [0.05, 0.05, 0.05],
    [0.95, 0.95, 0.95],
    [0.6, 0.1, 0.8],
    [1.0, 0.55, 0.0],
];

impl Default for Catalog {
    fn default() -> Self {
        Catalog {
            genders: words(&["man", "woman"]),
            uppers: words(&["shirt", "jacket", "coat", "sweater"]),
            lowers: words(&["pants", "shorts", "skirt", "jeans"]),
            accessories: words(&["bag", "backpack", "hat", "umbrella"]),
            colors: words(&["red", "blue", "green", "yellow", "black", "white", "purple", "orange"]),
            actions: words(&["walking", "running", "standing", "sitting"]),
        }
    }
}

impl Catalog {
    pub fn validate(&self) -> Result<()> {
        let lists = [
            &self.genders,
            &self.uppers,
            &self.lowers,
            &self.accessories,
            &self.colors,
            &self.actions,
        ];
        if lists.iter().any(|l| l.is_empty()) {
            return Err(Error::Input("every catalog role needs at least one word".into()));
        }
        Ok(())
    }

    /// Slot cardinalities in [`Attributes::to_array`] order.
    pub fn slot_sizes(&self) -> [usize; ATTRIBUTE_SLOTS] {
        [
            self.genders.len(),
            self.uppers.len(),
            self.colors.len(),
            self.lowers.len(),
            self.colors.len(),
            self.accessories.len(),
            self.colors.len(),
            self.actions.len(),
        ]
    }

    /// Number of distinct attribute tuples.
    pub fn combinations(&self) -> u128 {
        self.slot_sizes().iter().map(|&s| s as u128).product()
    }

    pub fn adjective_words(&self) -> impl Iterator<Item = &str> {
        self.colors.iter().map(String::as_str)
    }

    pub fn verb_words(&self) -> impl Iterator<Item = &str> {
        self.actions.iter().map(String::as_str)
    }

    pub fn noun_words(&self) -> impl Iterator<Item = &str> {
        self.genders
            .iter()
            .chain(&self.uppers)
            .chain(&self.lowers)
            .chain(&self.accessories)
            .map(String::as_str)
    }
}
