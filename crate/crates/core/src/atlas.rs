//! Anatomical domains built from atlas labels, and masked-volume statistics.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Mask3D};

/// Default AAL3v1 grouping shipped with the crate.
pub const DEFAULT_AAL3_GROUPING: &str = include_str!("../data/aal3_grouping.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionName {
    FrontalLobe,
    ParietalLobe,
    TemporalLobe,
    OccipitalLobe,
    Cerebellum,
    LimbicRegions,
    SubcorticalStructures,
}

impl RegionName {
    pub const ALL: [RegionName; 7] = [
        RegionName::FrontalLobe,
        RegionName::ParietalLobe,
        RegionName::TemporalLobe,
        RegionName::OccipitalLobe,
        RegionName::Cerebellum,
        RegionName::LimbicRegions,
        RegionName::SubcorticalStructures,
    ];

    /// Identifier used in grouping files.
    pub fn ident(self) -> &'static str {
        match self {
            RegionName::FrontalLobe => "FrontalLobe",
            RegionName::ParietalLobe => "ParietalLobe",
            RegionName::TemporalLobe => "TemporalLobe",
            RegionName::OccipitalLobe => "OccipitalLobe",
            RegionName::Cerebellum => "Cerebellum",
            RegionName::LimbicRegions => "LimbicRegions",
            RegionName::SubcorticalStructures => "SubcorticalStructures",
        }
    }

    /// Short lowercase alias used in mask specs (`roi:limbic`).
    pub fn short(self) -> &'static str {
        match self {
            RegionName::FrontalLobe => "frontal",
            RegionName::ParietalLobe => "parietal",
            RegionName::TemporalLobe => "temporal",
            RegionName::OccipitalLobe => "occipital",
            RegionName::Cerebellum => "cerebellum",
            RegionName::LimbicRegions => "limbic",
            RegionName::SubcorticalStructures => "subcortical",
        }
    }

    /// Human-readable row label.
    pub fn display_name(self) -> &'static str {
        match self {
            RegionName::FrontalLobe => "Frontal lobe",
            RegionName::ParietalLobe => "Parietal lobe",
            RegionName::TemporalLobe => "Temporal lobe",
            RegionName::OccipitalLobe => "Occipital lobe",
            RegionName::Cerebellum => "Cerebellum",
            RegionName::LimbicRegions => "Limbic regions",
            RegionName::SubcorticalStructures => "Subcortical structures",
        }
    }
}

impl fmt::Display for RegionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.ident())
    }
}

impl FromStr for RegionName {
    type Err = Error;

    /// Case-insensitive; accepts the identifier, the short alias, or the
    /// display name with any `_`, `-` or space separators.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | '-' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        RegionName::ALL
            .into_iter()
            .find(|r| key == r.ident().to_lowercase() || key == r.short())
            .ok_or_else(|| Error::Grouping(format!("unknown group name `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGroup {
    pub name: RegionName,
    pub label_ids: BTreeSet<u16>,
}

impl RegionGroup {
    pub fn new(name: RegionName, label_ids: impl IntoIterator<Item = u16>) -> Result<Self> {
        let label_ids: BTreeSet<u16> = label_ids.into_iter().collect();
        if label_ids.is_empty() {
            return Err(Error::Grouping(format!("group {name} is empty")));
        }
        Ok(RegionGroup { name, label_ids })
    }

    fn lookup(&self) -> Vec<bool> {
        let mut table = vec![false; u16::MAX as usize + 1];
        for &l in &self.label_ids {
            table[l as usize] = true;
        }
        table
    }
}

/// Ordered, pairwise-disjoint set of region groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingTable {
    groups: Vec<RegionGroup>,
    source: String,
}

impl GroupingTable {
    pub fn new(groups: Vec<RegionGroup>, source: impl Into<String>) -> Result<Self> {
        let mut seen_names = BTreeSet::new();
        let mut seen_labels = std::collections::BTreeMap::new();
        for g in &groups {
            if g.label_ids.is_empty() {
                return Err(Error::Grouping(format!("group {} is empty", g.name)));
            }
            if !seen_names.insert(g.name) {
                return Err(Error::Grouping(format!("group {} listed twice", g.name)));
            }
            for &l in &g.label_ids {
                if l == 0 {
                    return Err(Error::Grouping(format!(
                        "group {} contains background label 0",
                        g.name
                    )));
                }
                if let Some(other) = seen_labels.insert(l, g.name) {
                    return Err(Error::Grouping(format!(
                        "label {l} assigned to both {other} and {}",
                        g.name
                    )));
                }
            }
        }
        Ok(GroupingTable {
            groups,
            source: source.into(),
        })
    }

    /// Parses `Name: id, id, lo-hi` records; `#` starts a comment.
    pub fn parse(text: &str, source: impl Into<String>) -> Result<Self> {
        let mut groups = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Grouping(format!("line {}: {m}: `{raw}`", lineno + 1));
            let (name, ids) = line
                .split_once(':')
                .ok_or_else(|| bad("expected `name: ids`"))?;
            let name: RegionName = name.trim().parse()?;
            let mut labels = Vec::new();
            for item in ids.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let parse = |s: &str| s.trim().parse::<u16>().map_err(|_| bad("bad label id"));
                match item.split_once('-') {
                    Some((lo, hi)) => {
                        let (lo, hi) = (parse(lo)?, parse(hi)?);
                        if lo > hi {
                            return Err(bad("empty label range"));
                        }
                        labels.extend(lo..=hi);
                    }
                    None => labels.push(parse(item)?),
                }
            }
            groups.push(RegionGroup::new(name, labels)?);
        }
        GroupingTable::new(groups, source)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.display().to_string())
    }

    pub fn default_aal3() -> Self {
        Self::parse(DEFAULT_AAL3_GROUPING, "built-in AAL3v1 grouping")
            .expect("shipped grouping table is valid")
    }

    pub fn groups(&self) -> &[RegionGroup] {
        &self.groups
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn group(&self, name: RegionName) -> Option<&RegionGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn resolve(&self, name: RegionName) -> Result<&RegionGroup> {
        self.group(name).ok_or_else(|| {
            Error::Grouping(format!("group {name} is not defined in {}", self.source))
        })
    }

    /// Serializes back to the record format.
    pub fn to_text(&self) -> String {
        let mut out = format!("# {}\n", self.source);
        for g in &self.groups {
            let ids: Vec<String> = g.label_ids.iter().map(u16::to_string).collect();
            out.push_str(&format!("{}: {}\n", g.name, ids.join(", ")));
        }
        out
    }
}

/// Voxels whose label belongs to `group`.
pub fn region_voxels(labels: &LabelVolume, group: &RegionGroup) -> Mask3D {
    let lut = group.lookup();
    let bits = labels.labels().iter().map(|&l| lut[l as usize]).collect();
    Mask3D::from_bits(labels.dims(), bits).expect("length matches grid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionRatio {
    pub voxel_count: usize,
    pub percent_of_brain: f64,
}

/// `|region ∩ brain|` and its share of the brain in percent.
pub fn mask_ratio(
    labels: &LabelVolume,
    group: &RegionGroup,
    brain: &Mask3D,
) -> Result<RegionRatio> {
    if !brain.dims().same_space(&labels.dims()) {
        return Err(Error::dims(labels.dims(), brain.dims()));
    }
    if brain.count() == 0 {
        return Err(Error::invalid("brain mask is empty"));
    }
    let lut = group.lookup();
    let voxel_count = labels
        .labels()
        .iter()
        .zip(brain.as_slice())
        .filter(|(l, b)| **b && lut[**l as usize])
        .count();
    Ok(RegionRatio {
        voxel_count,
        percent_of_brain: 100.0 * voxel_count as f64 / brain.count() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStatsRow {
    pub region: RegionName,
    pub voxel_count: usize,
    pub percent_of_brain: f64,
}

/// One row per group of `table`, in table order.
pub fn mask_stats(
    labels: &LabelVolume,
    table: &GroupingTable,
    brain: &Mask3D,
) -> Result<Vec<MaskStatsRow>> {
    table
        .groups()
        .iter()
        .map(|g| {
            let r = mask_ratio(labels, g, brain)?;
            Ok(MaskStatsRow {
                region: g.name,
                voxel_count: r.voxel_count,
                percent_of_brain: r.percent_of_brain,
            })
        })
        .collect()
}

/// CSV with columns `Mask,Number of voxels masked,Percentage of brain masked`.
pub fn mask_stats_csv(rows: &[MaskStatsRow]) -> String {
    let mut out = String::from("Mask,Number of voxels masked,Percentage of brain masked\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.2}\n",
            r.region.display_name(),
            r.voxel_count,
            r.percent_of_brain
        ));
    }
    out
}
