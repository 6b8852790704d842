//! Attribute catalog and the partition of attributes into part-based groups.
//!
//! Attribute indices are 1-based throughout this module, matching the
//! published attribute table.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// The 40 face attributes, in index order.
pub const FACE_ATTRIBUTES: [&str; 40] = [
    "5 o'Clock shadow",
    "Arched eyebrows",
    "Attractive",
    "Bags under eyes",
    "Bald",
    "Bangs",
    "Big lips",
    "Big nose",
    "Black hair",
    "Blond hair",
    "Blurry",
    "Brown hair",
    "Bushy eyebrows",
    "Chubby",
    "Double chin",
    "Eye glasses",
    "Goatee",
    "Gray hair",
    "Heavy makeup",
    "High cheekbones",
    "Male",
    "Mouth slightly open",
    "Mustache",
    "Narrow eyes",
    "No beard",
    "Oval face",
    "Pale skin",
    "Pointy nose",
    "Receding hairline",
    "Rosy cheeks",
    "Sideburns",
    "Smiling",
    "Straight hair",
    "Wavy hair",
    "Wearing earrings",
    "Wearing hat",
    "Wearing lipstick",
    "Wearing necklace",
    "Wearing necktie",
    "Young",
];

/// Short names used in the group table, mapped onto catalog names.
pub const GROUP_TABLE_ALIASES: [(&str, &str); 10] = [
    ("Lipstick", "Wearing lipstick"),
    ("Beard", "No beard"),
    ("Makeup", "Heavy makeup"),
    ("Oval", "Oval face"),
    ("Pale", "Pale skin"),
    ("Hat", "Wearing hat"),
    ("Eye bags", "Bags under eyes"),
    ("Earrings", "Wearing earrings"),
    ("Necklace", "Wearing necklace"),
    ("Necktie", "Wearing necktie"),
];

/// The eight part-based face groups, with attributes named as in the group
/// table (short names resolved through [`GROUP_TABLE_ALIASES`]).
pub const FACE_GROUP_TABLE: [(&str, &[&str]); 8] = [
    (
        "Mouth",
        &[
            "Big lips",
            "Lipstick",
            "Mouth slightly open",
            "Smiling",
            "Goatee",
            "5 o'clock shadow",
            "Mustache",
            "Double chin",
            "Beard",
        ],
    ),
    ("Eyes", &["Arched eyebrows", "Bushy eyebrows", "Eye glasses", "Narrow eyes"]),
    ("Whole face", &["Attractive", "Blurry", "Makeup", "Oval", "Young", "Male", "Chubby", "Pale"]),
    ("Hairline", &["Bald", "Bangs", "Receding hairline", "Hat"]),
    ("Around head", &["Black hair", "Blond hair", "Brown hair", "Gray hair", "Straight hair", "Wavy hair"]),
    ("Middle face", &["High cheekbones", "Rosy cheeks", "Eye bags", "Sideburns", "Earrings"]),
    ("Nose", &["Big nose", "Pointy nose"]),
    ("Neck", &["Necklace", "Necktie"]),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeCatalog {
    names: Vec<String>,
}

impl AttributeCatalog {
    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if names[..i].iter().any(|m| m.eq_ignore_ascii_case(n)) {
                return Err(Error::Config(format!("duplicate attribute name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn face() -> Self {
        Self { names: FACE_ATTRIBUTES.iter().map(|s| s.to_string()).collect() }
    }

    /// `attr01`, `attr02`, ... for synthetic experiments.
    pub fn numbered(n: usize) -> Self {
        Self { names: (1..=n).map(|i| format!("attr{i:02}")).collect() }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Name of the 1-based attribute `index`.
    pub fn name(&self, index: usize) -> Result<&str> {
        index.checked_sub(1).and_then(|i| self.names.get(i)).map(String::as_str).ok_or(Error::UnknownAttribute(index))
    }

    /// 1-based index of `name`, ignoring ASCII case.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name)).map(|i| i + 1)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub name: String,
    /// 1-based attribute indices, in table order.
    pub attrs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Missing(usize),
    Duplicate { attr: usize, groups: Vec<String> },
    EmptyGroup(String),
    OutOfRange { group: String, attr: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Missing(a) => write!(f, "attribute {a} is not in any group"),
            Violation::Duplicate { attr, groups } => write!(f, "attribute {attr} appears in {groups:?}"),
            Violation::EmptyGroup(g) => write!(f, "group `{g}` is empty"),
            Violation::OutOfRange { group, attr } => write!(f, "group `{group}` lists unknown attribute {attr}"),
        }
    }
}

/// Attribute groups `G_1 .. G_K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    groups: Vec<Group>,
}

impl GroupAssignment {
    /// No validation; see [`validate`].
    pub fn from_groups(groups: Vec<Group>) -> Self {
        Self { groups }
    }

    /// The 8-group face partition over the 40-attribute catalog.
    pub fn face_default() -> Self {
        let catalog = AttributeCatalog::face();
        let groups = FACE_GROUP_TABLE
            .iter()
            .map(|(name, members)| Group {
                name: name.to_string(),
                attrs: members
                    .iter()
                    .map(|m| {
                        let full = GROUP_TABLE_ALIASES.iter().find(|(short, _)| short == m).map_or(*m, |(_, long)| *long);
                        catalog.index_of(full).expect("group table names resolve against the catalog")
                    })
                    .collect(),
            })
            .collect();
        Self { groups }
    }

    /// Parses `group_name,attr_index` rows (an optional header row is
    /// skipped) and validates the result against `catalog`.
    pub fn from_csv(text: &str, catalog: &AttributeCatalog) -> Result<Self> {
        let mut groups: Vec<Group> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, idx) = line.rsplit_once(',').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                detail: format!("expected `group_name,attr_index`, got `{line}`"),
            })?;
            let name = name.trim();
            let idx = match idx.trim().parse::<usize>() {
                Ok(i) => i,
                Err(_) if lineno == 0 => continue,
                Err(_) => return Err(Error::Parse { line: lineno + 1, detail: format!("bad attribute index `{idx}`") }),
            };
            match groups.iter_mut().find(|g| g.name == name) {
                Some(g) => g.attrs.push(idx),
                None => groups.push(Group { name: name.to_string(), attrs: vec![idx] }),
            }
        }
        let assignment = Self { groups };
        let violations = validate(&assignment, catalog);
        if violations.is_empty() {
            Ok(assignment)
        } else {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Err(Error::Config(list.join("; ")))
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group_name,attr_index\n");
        for g in &self.groups {
            for a in &g.attrs {
                out.push_str(&format!("{},{a}\n", g.name));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group(&self, id: GroupId) -> Result<&Group> {
        self.groups.get(id.0).ok_or_else(|| Error::UnknownGroup(format!("#{}", id.0)))
    }

    pub fn id_by_name(&self, name: &str) -> Result<GroupId> {
        self.groups
            .iter()
            .position(|g| g.name.eq_ignore_ascii_case(name))
            .map(GroupId)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    /// Total number of attribute slots across groups.
    pub fn attr_count(&self) -> usize {
        self.groups.iter().map(|g| g.attrs.len()).sum()
    }

    pub fn group_of(&self, attr: usize) -> Result<GroupId> {
        self.groups.iter().position(|g| g.attrs.contains(&attr)).map(GroupId).ok_or(Error::UnknownAttribute(attr))
    }

    pub fn attrs_of(&self, id: GroupId) -> Result<&[usize]> {
        Ok(&self.group(id)?.attrs)
    }

    /// For each 1-based attribute `a`, `(group, position within the group)`
    /// at slot `a - 1`.
    pub fn slots(&self, n_attrs: usize) -> Result<Vec<(GroupId, usize)>> {
        (1..=n_attrs)
            .map(|a| {
                let g = self.group_of(a)?;
                let pos = self.groups[g.0].attrs.iter().position(|&x| x == a).unwrap_or(0);
                Ok((g, pos))
            })
            .collect()
    }
}

/// All partition violations of `assignment` against `catalog`; empty means
/// the groups are disjoint, non-empty and cover every catalog index.
pub fn validate(assignment: &GroupAssignment, catalog: &AttributeCatalog) -> Vec<Violation> {
    let n = catalog.len();
    let mut owners: Vec<Vec<String>> = vec![Vec::new(); n + 1];
    let mut out = Vec::new();
    for g in &assignment.groups {
        if g.attrs.is_empty() {
            out.push(Violation::EmptyGroup(g.name.clone()));
        }
        for &a in &g.attrs {
            if a == 0 || a > n {
                out.push(Violation::OutOfRange { group: g.name.clone(), attr: a });
            } else {
                owners[a].push(g.name.clone());
            }
        }
    }
    for (a, o) in owners.into_iter().enumerate().skip(1) {
        match o.len() {
            0 => out.push(Violation::Missing(a)),
            1 => {}
            _ => out.push(Violation::Duplicate { attr: a, groups: o }),
        }
    }
    out
}
