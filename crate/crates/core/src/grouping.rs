//! Head / medium / tail partitions of the class set.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Medium, Group::Tail];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Head => "head",
            Group::Medium => "medium",
            Group::Tail => "tail",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A disjoint cover of `{0..num_classes-1}` by non-empty groups.
///
/// This is the shape every probability routine works with. The three-group
/// [`GroupPartition`] wraps one; the target/non-target split used for the DKD
/// reduction is a two-group instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroups {
    group_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl ClassGroups {
    pub fn new(num_classes: usize, members: Vec<Vec<usize>>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Partition("no classes".into()));
        }
        let mut group_of = vec![usize::MAX; num_classes];
        let mut members = members;
        for (g, list) in members.iter_mut().enumerate() {
            if list.is_empty() {
                return Err(Error::Partition(format!("group {g} is empty")));
            }
            list.sort_unstable();
            for &c in list.iter() {
                if c >= num_classes {
                    return Err(Error::Partition(format!(
                        "class {c} out of range for {num_classes} classes"
                    )));
                }
                if group_of[c] != usize::MAX {
                    return Err(Error::Partition(format!("class {c} assigned twice")));
                }
                group_of[c] = g;
            }
        }
        if let Some(c) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(Error::Partition(format!("class {c} not assigned")));
        }
        Ok(Self { group_of, members })
    }

    /// Every class in one group.
    pub fn single(num_classes: usize) -> Result<Self> {
        Self::new(num_classes, vec![(0..num_classes).collect()])
    }

    pub fn num_classes(&self) -> usize {
        self.group_of.len()
    }

    pub fn num_groups(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.members[group]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[usize]> + '_ {
        self.members.iter().map(Vec::as_slice)
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.group_of[class]
    }

    /// Per-group boolean class masks.
    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.members
            .iter()
            .map(|list| {
                let mut m = vec![false; self.num_classes()];
                for &c in list {
                    m[c] = true;
                }
                m
            })
            .collect()
    }
}

/// Rule for assigning classes to head / medium / tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum GroupPolicy {
    /// Equal-cardinality groups by descending training count.
    #[default]
    RankThirds,
    /// `count >= t_head` is head, `count <= t_tail` is tail, the rest medium.
    CountThresholds { t_head: usize, t_tail: usize },
}

impl GroupPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GroupPolicy::RankThirds => Ok(()),
            GroupPolicy::CountThresholds { t_head, t_tail } => {
                if t_head > t_tail && t_tail >= 1 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "thresholds need t_head > t_tail >= 1, got ({t_head}, {t_tail})"
                    )))
                }
            }
        }
    }
}

/// Three-group partition built from training class frequencies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    policy: GroupPolicy,
    groups: ClassGroups,
}

impl GroupPartition {
    pub fn policy(&self) -> GroupPolicy {
        self.policy
    }

    pub fn groups(&self) -> &ClassGroups {
        &self.groups
    }

    pub fn group(&self, g: Group) -> &[usize] {
        self.groups.members(g.index())
    }

    pub fn group_label(&self, class: usize) -> Group {
        Group::ALL[self.groups.group_of(class)]
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("partition serializes")
    }
}

impl Deref for GroupPartition {
    type Target = ClassGroups;

    fn deref(&self) -> &ClassGroups {
        &self.groups
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    policy: GroupPolicy,
    groups: GroupsRepr,
}

#[derive(Serialize, Deserialize)]
struct GroupsRepr {
    head: Vec<usize>,
    medium: Vec<usize>,
    tail: Vec<usize>,
}

impl Serialize for GroupPartition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PartitionRepr {
            policy: self.policy,
            groups: GroupsRepr {
                head: self.group(Group::Head).to_vec(),
                medium: self.group(Group::Medium).to_vec(),
                tail: self.group(Group::Tail).to_vec(),
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GroupPartition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PartitionRepr::deserialize(d)?;
        let GroupsRepr { head, medium, tail } = repr.groups;
        let n = head.len() + medium.len() + tail.len();
        let groups = ClassGroups::new(n, vec![head, medium, tail]).map_err(serde::de::Error::custom)?;
        Ok(GroupPartition {
            policy: repr.policy,
            groups,
        })
    }
}

/// Assigns every class to head, medium or tail from its training count.
pub fn build_partition(class_counts: &[usize], policy: GroupPolicy) -> Result<GroupPartition> {
    let c = class_counts.len();
    if c < 3 {
        return Err(Error::Partition(format!("need at least 3 classes, got {c}")));
    }
    if let Some(k) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::Partition(format!("class {k} has no samples")));
    }
    policy.validate()?;

    let mut members = vec![Vec::new(), Vec::new(), Vec::new()];
    match policy {
        GroupPolicy::RankThirds => {
            let mut order: Vec<usize> = (0..c).collect();
            // stable sort keeps lower class index first among ties
            order.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]));
            let n_head = c.div_ceil(3);
            let n_medium = (c - n_head).div_ceil(2);
            for (rank, &class) in order.iter().enumerate() {
                let g = if rank < n_head {
                    0
                } else if rank < n_head + n_medium {
                    1
                } else {
                    2
                };
                members[g].push(class);
            }
        }
        GroupPolicy::CountThresholds { t_head, t_tail } => {
            for (class, &n) in class_counts.iter().enumerate() {
                let g = if n >= t_head {
                    0
                } else if n <= t_tail {
                    2
                } else {
                    1
                };
                members[g].push(class);
            }
        }
    }
    for (g, list) in Group::ALL.iter().zip(&members) {
        if list.is_empty() {
            return Err(Error::Partition(format!("{g} group is empty under {policy:?}")));
        }
    }
    let groups = ClassGroups::new(c, members)?;
    Ok(GroupPartition { policy, groups })
}

/// Per-group boolean masks in head, medium, tail order.
pub fn group_masks(p: &GroupPartition) -> [Vec<bool>; 3] {
    let mut masks = p.masks().into_iter();
    [
        masks.next().expect("three groups"),
        masks.next().expect("three groups"),
        masks.next().expect("three groups"),
    ]
}
