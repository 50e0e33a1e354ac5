//! Contrastive batch layout: views, roles, groups and exclusion sets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViewRole {
    Anchor,
    Positive,
    HardNegative,
}

/// Provenance of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMeta {
    pub role: ViewRole,
    pub group: usize,
    /// Manifest position of the frame the view was rendered from. For a
    /// face-swapped positive this is the expression source.
    pub source: usize,
    pub source_key: String,
    /// Identity donor when FaceSwap fired.
    pub swap_partner: Option<usize>,
}

/// View indices of one anchor group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub anchor: usize,
    pub positive: usize,
    pub hard_negative: Option<usize>,
}

/// Roles, groups and exclusions without pixels. Everything the loss needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLayout {
    views: Vec<ViewMeta>,
    groups: Vec<Group>,
    exclusions: Vec<BTreeSet<usize>>,
}

impl BatchLayout {
    pub fn new(views: Vec<ViewMeta>) -> Result<Self> {
        let n_groups = views.iter().map(|v| v.group + 1).max().unwrap_or(0);
        let mut slots: Vec<[Vec<usize>; 3]> = vec![Default::default(); n_groups];
        for (i, v) in views.iter().enumerate() {
            let r = match v.role {
                ViewRole::Anchor => 0,
                ViewRole::Positive => 1,
                ViewRole::HardNegative => 2,
            };
            slots[v.group][r].push(i);
        }
        let mut groups = Vec::with_capacity(n_groups);
        for (g, [a, p, h]) in slots.into_iter().enumerate() {
            if a.len() != 1 || p.len() != 1 || h.len() > 1 {
                return Err(Error::Batch(format!(
                    "group {g} has {} anchors, {} positives, {} hard negatives",
                    a.len(),
                    p.len(),
                    h.len()
                )));
            }
            groups.push(Group {
                anchor: a[0],
                positive: p[0],
                hard_negative: h.first().copied(),
            });
        }
        let exclusions = groups
            .iter()
            .map(|g| BTreeSet::from([g.anchor, g.positive]))
            .collect();
        Ok(BatchLayout {
            views,
            groups,
            exclusions,
        })
    }

    /// Layout of `roles` per group laid out group-major:
    /// `[a0, p0, (h0), a1, p1, (h1), …]`. Sources are synthetic placeholders.
    pub fn synthetic(hard_negatives: &[bool]) -> Result<Self> {
        let mut views = Vec::new();
        for (g, &h) in hard_negatives.iter().enumerate() {
            let mut push = |role| {
                let i = views.len();
                views.push(ViewMeta {
                    role,
                    group: g,
                    source: i,
                    source_key: format!("v{i}"),
                    swap_partner: None,
                });
            };
            push(ViewRole::Anchor);
            push(ViewRole::Positive);
            if h {
                push(ViewRole::HardNegative);
            }
        }
        Self::new(views)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn views(&self) -> &[ViewMeta] {
        &self.views
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// Per-group view indices removed from that anchor's denominator.
    pub fn exclusions(&self, group: usize) -> &BTreeSet<usize> {
        &self.exclusions[group]
    }

    /// Adds extra exclusions for a group. Hard negatives cannot be excluded.
    pub fn exclude(&mut self, group: usize, view: usize) -> Result<()> {
        if view >= self.views.len() {
            return Err(Error::Batch(format!("view {view} out of range")));
        }
        if self.groups[group].hard_negative == Some(view) {
            return Err(Error::Batch(format!(
                "view {view} is the hard negative of group {group}"
            )));
        }
        self.exclusions[group].insert(view);
        Ok(())
    }

    pub fn source_keys(&self) -> Vec<&str> {
        self.views.iter().map(|v| v.source_key.as_str()).collect()
    }

    pub fn has_hard_negatives(&self) -> bool {
        self.groups.iter().any(|g| g.hard_negative.is_some())
    }
}

/// Batch of rendered views with its layout.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub layout: BatchLayout,
    pub images: Vec<Image>,
}

impl ContrastiveBatch {
    pub fn new(layout: BatchLayout, images: Vec<Image>) -> Result<Self> {
        if layout.len() != images.len() {
            return Err(Error::Batch(format!(
                "{} views but {} images",
                layout.len(),
                images.len()
            )));
        }
        Ok(ContrastiveBatch { layout, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_layout_groups() {
        let l = BatchLayout::synthetic(&[true, false, true]).unwrap();
        assert_eq!(l.len(), 8);
        assert_eq!(l.groups()[1], Group { anchor: 3, positive: 4, hard_negative: None });
        assert_eq!(l.groups()[2].hard_negative, Some(7));
        for (g, grp) in l.groups().iter().enumerate() {
            let ex = l.exclusions(g);
            assert!(ex.contains(&grp.anchor) && ex.contains(&grp.positive));
        }
    }

    #[test]
    fn malformed_groups_rejected() {
        let mut l = BatchLayout::synthetic(&[false, false]).unwrap();
        let mut views = l.views().to_vec();
        views[1].role = ViewRole::Anchor;
        assert!(BatchLayout::new(views).is_err());
        let h = BatchLayout::synthetic(&[true]).unwrap();
        let mut h2 = h.clone();
        assert!(h2.exclude(0, 2).is_err());
        l.exclude(0, 3).unwrap();
        assert!(l.exclusions(0).contains(&3));
    }
}
