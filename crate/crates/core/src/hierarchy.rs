//! Tree-structured label systems and per-level label rasters.
//!
//! A [`Hierarchy`] is an ordered list of levels, coarse to fine, where every
//! class below the root level has exactly one parent at the level above.
//! Root-to-leaf index tuples ("paths") are enumerated once at load time in
//! lexicographic order and drive both path decoding and consistency checks.
//!
//! # Document format
//!
//! Hierarchies load from UTF-8 JSON:
//!
//! ```json
//! {
//!   "levels": [
//!     {"name": "L1", "classes": ["vegetation", "water"], "palette": [[0,255,0],[0,0,255]]},
//!     {"name": "L2", "classes": ["cropland", "river"]}
//!   ],
//!   "edges": [["cropland", "vegetation"], ["river", "water"]]
//! }
//! ```
//!
//! Class indices follow document order within each level. Each edge is
//! `[child, parent]`; the child must live one level below the parent. When a
//! class name repeats across levels, qualify it as `"Level/Class"` (for
//! example `"L2/others"`). `palette` is optional per level; missing palettes
//! fall back to generated colors.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Reserved sentinel for unlabeled pixels.
pub const DEFAULT_IGNORE: u32 = 255;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("parse error at byte {offset} (line {line}, column {column}): {msg}")]
    Parse { offset: usize, line: usize, column: usize, msg: String },
    #[error("document defines no levels")]
    NoLevels,
    #[error("level {level} defines no classes")]
    EmptyLevel { level: String },
    #[error("duplicate class {class:?} at level {level}")]
    DuplicateClass { level: String, class: String },
    #[error("class {class:?} at level {level} has no parent edge (orphan)")]
    Orphan { level: String, class: String },
    #[error("class {class:?} at level {level} has {count} parent assignments")]
    DuplicateParent { level: String, class: String, count: usize },
    #[error("edge [{child:?}, {parent:?}] matches no child/parent class pair")]
    DanglingEdge { child: String, parent: String },
    #[error("edge [{child:?}, {parent:?}] is ambiguous; qualify names as \"Level/Class\"")]
    AmbiguousEdge { child: String, parent: String },
    #[error("class {class:?} at level {level} has no children at the next level")]
    ChildlessClass { level: String, class: String },
    #[error("palette at level {level} has {got} entries for {want} classes")]
    PaletteMismatch { level: String, got: usize, want: usize },
    #[error("level index {level} out of range ({count} levels)")]
    BadLevel { level: usize, count: usize },
    #[error("pixel ({x},{y}) at level {level} holds {value}, outside 0..{classes} and not ignore")]
    InvalidLabel { level: String, x: usize, y: usize, value: u32, classes: usize },
    #[error("raster is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    SizeMismatch { got_h: usize, got_w: usize, want_h: usize, want_w: usize },
}

pub type Result<T> = std::result::Result<T, HierarchyError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LevelDoc {
    name: String,
    classes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    palette: Option<Vec<[u8; 3]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HierarchyDoc {
    levels: Vec<LevelDoc>,
    #[serde(default)]
    edges: Vec<[String; 2]>,
}

/// A validated tree-structured label system.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    levels: Vec<LevelDoc>,
    /// `parent[l][c]` for l >= 1: the parent class index at level l-1.
    parent: Vec<Vec<usize>>,
    /// All root-to-leaf tuples, lexicographic by (L1 index, L2 index, ...).
    paths: Vec<Vec<usize>>,
    /// Leaf class index -> index into `paths`.
    leaf_to_path: Vec<usize>,
}

/// Sample documents shipped with the crate.
pub mod samples {
    /// A three-level land-use system with 4/9/18 classes.
    pub const MM5B_JSON: &str = include_str!("../../../data/hierarchies/mm5b.json");
    /// The crop-extension system: an "others" chain plus
    /// vegetation -> cropland -> {rice, maize, soybean}.
    pub const CROP_JSON: &str = include_str!("../../../data/hierarchies/crop.json");
}

fn byte_offset(src: &str, line: usize, column: usize) -> usize {
    // serde_json reports 1-based line/column; convert to a byte offset.
    let mut offset = 0;
    for (i, l) in src.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    offset.saturating_sub(1)
}

impl Hierarchy {
    /// Parse and validate a hierarchy document.
    pub fn from_json(src: &str) -> Result<Hierarchy> {
        let doc: HierarchyDoc = serde_json::from_str(src).map_err(|e| HierarchyError::Parse {
            offset: byte_offset(src, e.line(), e.column()),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        Hierarchy::from_doc(doc)
    }

    fn from_doc(doc: HierarchyDoc) -> Result<Hierarchy> {
        if doc.levels.is_empty() {
            return Err(HierarchyError::NoLevels);
        }
        for level in &doc.levels {
            if level.classes.is_empty() {
                return Err(HierarchyError::EmptyLevel { level: level.name.clone() });
            }
            let mut seen = HashMap::new();
            for c in &level.classes {
                if seen.insert(c.as_str(), ()).is_some() {
                    return Err(HierarchyError::DuplicateClass {
                        level: level.name.clone(),
                        class: c.clone(),
                    });
                }
            }
            if let Some(p) = &level.palette {
                if p.len() != level.classes.len() {
                    return Err(HierarchyError::PaletteMismatch {
                        level: level.name.clone(),
                        got: p.len(),
                        want: level.classes.len(),
                    });
                }
            }
        }

        // Resolve each edge to the (level, class) pairs it could describe.
        // An edge may be written as plain class names or "Level/Class".
        let find = |name: &str, level: usize| -> Option<usize> {
            let lv = &doc.levels[level];
            match name.split_once('/') {
                Some((ln, cn)) if ln == lv.name => lv.classes.iter().position(|c| c == cn),
                Some(_) => None,
                None => lv.classes.iter().position(|c| c == name),
            }
        };

        let n_levels = doc.levels.len();
        let mut assignments: Vec<Vec<Vec<usize>>> = (0..n_levels)
            .map(|l| vec![Vec::new(); doc.levels[l].classes.len()])
            .collect();
        for edge in &doc.edges {
            let (child, parent) = (&edge[0], &edge[1]);
            let mut matches = Vec::new();
            for l in 1..n_levels {
                if let (Some(ci), Some(pi)) = (find(child, l), find(parent, l - 1)) {
                    matches.push((l, ci, pi));
                }
            }
            match matches.len() {
                0 => {
                    return Err(HierarchyError::DanglingEdge {
                        child: child.clone(),
                        parent: parent.clone(),
                    })
                }
                1 => {
                    let (l, ci, pi) = matches[0];
                    assignments[l][ci].push(pi);
                }
                _ => {
                    return Err(HierarchyError::AmbiguousEdge {
                        child: child.clone(),
                        parent: parent.clone(),
                    })
                }
            }
        }

        let mut parent: Vec<Vec<usize>> = vec![Vec::new(); n_levels];
        for l in 1..n_levels {
            let mut links = Vec::with_capacity(doc.levels[l].classes.len());
            for (ci, assigned) in assignments[l].iter().enumerate() {
                match assigned.len() {
                    0 => {
                        return Err(HierarchyError::Orphan {
                            level: doc.levels[l].name.clone(),
                            class: doc.levels[l].classes[ci].clone(),
                        })
                    }
                    1 => links.push(assigned[0]),
                    n => {
                        return Err(HierarchyError::DuplicateParent {
                            level: doc.levels[l].name.clone(),
                            class: doc.levels[l].classes[ci].clone(),
                            count: n,
                        })
                    }
                }
            }
            parent[l] = links;
        }

        // Every non-leaf class must appear on some root-to-leaf path.
        for l in 0..n_levels.saturating_sub(1) {
            for ci in 0..doc.levels[l].classes.len() {
                if !parent[l + 1].iter().any(|&p| p == ci) {
                    return Err(HierarchyError::ChildlessClass {
                        level: doc.levels[l].name.clone(),
                        class: doc.levels[l].classes[ci].clone(),
                    });
                }
            }
        }

        // Enumerate paths: leaves in index order, tuple assembled by walking
        // up, then sorted lexicographically.
        let n_leaves = doc.levels[n_levels - 1].classes.len();
        let mut paths = Vec::with_capacity(n_leaves);
        for leaf in 0..n_leaves {
            let mut tuple = vec![0usize; n_levels];
            tuple[n_levels - 1] = leaf;
            for l in (1..n_levels).rev() {
                tuple[l - 1] = parent[l][tuple[l]];
            }
            paths.push(tuple);
        }
        paths.sort();
        let mut leaf_to_path = vec![0usize; n_leaves];
        for (pi, p) in paths.iter().enumerate() {
            leaf_to_path[p[n_levels - 1]] = pi;
        }

        Ok(Hierarchy { levels: doc.levels, parent, paths, leaf_to_path })
    }

    /// Serialize back to the document format (canonical field order).
    pub fn to_json(&self) -> String {
        let mut edges = Vec::new();
        for l in 1..self.levels.len() {
            for (ci, &pi) in self.parent[l].iter().enumerate() {
                edges.push([
                    format!("{}/{}", self.levels[l].name, self.levels[l].classes[ci]),
                    format!("{}/{}", self.levels[l - 1].name, self.levels[l - 1].classes[pi]),
                ]);
            }
        }
        let doc = HierarchyDoc { levels: self.levels.clone(), edges };
        serde_json::to_string_pretty(&doc).expect("document serializes")
    }

    /// SHA-256 of the canonical serialization, as lowercase hex.
    pub fn canonical_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_name(&self, level: usize) -> &str {
        &self.levels[level].name
    }

    /// Index of the level with this name.
    pub fn level_index(&self, name: &str) -> Option<usize> {
        self.levels.iter().position(|l| l.name == name)
    }

    pub fn class_count(&self, level: usize) -> usize {
        self.levels[level].classes.len()
    }

    /// Class counts for every level, coarse to fine.
    pub fn class_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.classes.len()).collect()
    }

    pub fn class_name(&self, level: usize, class: usize) -> &str {
        &self.levels[level].classes[class]
    }

    pub fn class_index(&self, level: usize, name: &str) -> Option<usize> {
        self.levels[level].classes.iter().position(|c| c == name)
    }

    /// Parent class index at `level - 1`.
    pub fn parent_of(&self, level: usize, class: usize) -> Option<usize> {
        if level == 0 {
            None
        } else {
            Some(self.parent[level][class])
        }
    }

    /// Ancestor of `class` (at `level`) at the coarser `target_level`.
    pub fn ancestor(&self, level: usize, class: usize, target_level: usize) -> usize {
        assert!(target_level <= level, "ancestor must be at a coarser level");
        let mut c = class;
        for l in (target_level + 1..=level).rev() {
            c = self.parent[l][c];
        }
        c
    }

    /// All valid root-to-leaf tuples, lexicographic.
    pub fn paths(&self) -> &[Vec<usize>] {
        &self.paths
    }

    /// The path ending at this leaf class.
    pub fn path_of_leaf(&self, leaf: usize) -> &[usize] {
        &self.paths[self.leaf_to_path[leaf]]
    }

    /// Whether a full per-level tuple is a valid path.
    pub fn is_valid_path(&self, tuple: &[usize]) -> bool {
        if tuple.len() != self.num_levels() {
            return false;
        }
        let leaf = tuple[tuple.len() - 1];
        if leaf >= self.leaf_to_path.len() {
            return false;
        }
        self.paths[self.leaf_to_path[leaf]] == tuple
    }

    /// Per-class display colors for a level: the document palette when
    /// present, otherwise golden-angle generated colors.
    pub fn palette(&self, level: usize) -> Vec<[u8; 3]> {
        if let Some(p) = &self.levels[level].palette {
            return p.clone();
        }
        (0..self.class_count(level))
            .map(|c| {
                let hue = (c as f64 * 137.508) % 360.0;
                hsv_to_rgb(hue, 0.65, 0.95)
            })
            .collect()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// A single level's class-index raster.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub ignore: u32,
    data: Vec<u32>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, fill: u32) -> LabelRaster {
        LabelRaster { height, width, ignore: DEFAULT_IGNORE, data: vec![fill; height * width] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u32>) -> LabelRaster {
        assert_eq!(data.len(), height * width, "raster data length");
        LabelRaster { height, width, ignore: DEFAULT_IGNORE, data }
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_ignore(&self, y: usize, x: usize) -> bool {
        self.get(y, x) == self.ignore
    }

    /// Check that all non-ignore values are valid class indices for `level`.
    pub fn validate(&self, h: &Hierarchy, level: usize) -> Result<()> {
        let classes = self.expect_level(h, level)?;
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(y, x);
                if v != self.ignore && v as usize >= classes {
                    return Err(HierarchyError::InvalidLabel {
                        level: h.level_name(level).to_string(),
                        x,
                        y,
                        value: v,
                        classes,
                    });
                }
            }
        }
        Ok(())
    }

    fn expect_level(&self, h: &Hierarchy, level: usize) -> Result<usize> {
        if level >= h.num_levels() {
            return Err(HierarchyError::BadLevel { level, count: h.num_levels() });
        }
        Ok(h.class_count(level))
    }

    /// Values as f64 for HTF interchange.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn from_f64(height: usize, width: usize, data: &[f64]) -> LabelRaster {
        let data = data.iter().map(|&v| v as u32).collect();
        LabelRaster::from_data(height, width, data)
    }
}

/// Derive the coarse-level rasters implied by a fine raster.
///
/// Returns one raster per level in `0..fine_level`, coarse to fine. Ignore
/// pixels propagate; invalid fine indices are an error naming the pixel.
pub fn derive_coarse_labels(
    h: &Hierarchy,
    fine: &LabelRaster,
    fine_level: usize,
) -> Result<Vec<LabelRaster>> {
    fine.validate(h, fine_level)?;
    // Per-class ancestor lookup, computed once per level.
    let mut out = Vec::with_capacity(fine_level);
    for target in 0..fine_level {
        let lut: Vec<u32> = (0..h.class_count(fine_level))
            .map(|c| h.ancestor(fine_level, c, target) as u32)
            .collect();
        let mut raster = LabelRaster::new(fine.height, fine.width, fine.ignore);
        raster.ignore = fine.ignore;
        for (dst, &src) in raster.data.iter_mut().zip(fine.data.iter()) {
            *dst = if src == fine.ignore { fine.ignore } else { lut[src as usize] };
        }
        out.push(raster);
    }
    Ok(out)
}

/// Aggregate a fine-level prediction up the tree, returning rasters for all
/// levels (the last one is a copy of the input). This is the flat-model
/// evaluation path: predictions made at the finest level are scored at every
/// level through their ancestors.
pub fn aggregate_flat_prediction(
    h: &Hierarchy,
    fine_pred: &LabelRaster,
    fine_level: usize,
) -> Result<Vec<LabelRaster>> {
    let mut out = derive_coarse_labels(h, fine_pred, fine_level)?;
    out.push(fine_pred.clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm5b() -> Hierarchy {
        Hierarchy::from_json(samples::MM5B_JSON).unwrap()
    }

    fn crop() -> Hierarchy {
        Hierarchy::from_json(samples::CROP_JSON).unwrap()
    }

    #[test]
    fn mm5b_document_loads_with_18_paths() {
        let h = mm5b();
        assert_eq!(h.class_counts(), vec![4, 9, 18]);
        assert_eq!(h.paths().len(), 18);
        // Paths are lexicographic and one per leaf.
        for w in h.paths().windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn single_level_document_degenerates() {
        let src = r#"{"levels":[{"name":"flat","classes":["a","b","c","d","e"]}]}"#;
        let h = Hierarchy::from_json(src).unwrap();
        assert_eq!(h.paths().len(), 5);
        assert_eq!(h.num_levels(), 1);
        assert!(h.parent_of(0, 3).is_none());
    }

    #[test]
    fn crop_tree_has_4_leaf_paths() {
        let h = crop();
        assert_eq!(h.class_counts(), vec![2, 2, 4]);
        assert_eq!(h.paths().len(), 4);
        assert_eq!(h.paths()[0], vec![0, 0, 0]);
        let rice = h.class_index(2, "rice").unwrap();
        assert_eq!(h.path_of_leaf(rice), &[1, 1, rice]);
    }

    #[test]
    fn structural_errors_name_the_class() {
        // Orphan: "b" at L2 has no edge.
        let src = r#"{"levels":[{"name":"L1","classes":["r"]},{"name":"L2","classes":["a","b"]}],
                      "edges":[["a","r"]]}"#;
        match Hierarchy::from_json(src) {
            Err(HierarchyError::Orphan { class, level }) => {
                assert_eq!(class, "b");
                assert_eq!(level, "L2");
            }
            other => panic!("expected orphan error, got {other:?}"),
        }

        // Duplicate parent assignment.
        let src = r#"{"levels":[{"name":"L1","classes":["r","s"]},{"name":"L2","classes":["a","b"]}],
                      "edges":[["a","r"],["a","s"],["b","s"]]}"#;
        assert!(matches!(
            Hierarchy::from_json(src),
            Err(HierarchyError::DuplicateParent { count: 2, .. })
        ));

        // Empty level.
        let src = r#"{"levels":[{"name":"L1","classes":[]}]}"#;
        assert!(matches!(Hierarchy::from_json(src), Err(HierarchyError::EmptyLevel { .. })));

        // Childless intermediate class.
        let src = r#"{"levels":[{"name":"L1","classes":["r","dead"]},{"name":"L2","classes":["a"]}],
                      "edges":[["a","r"]]}"#;
        assert!(matches!(Hierarchy::from_json(src), Err(HierarchyError::ChildlessClass { .. })));
    }

    #[test]
    fn parse_errors_carry_a_byte_offset() {
        let src = "{\"levels\": [\n  {\"name\": }\n]}";
        match Hierarchy::from_json(src) {
            Err(HierarchyError::Parse { offset, line, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(&src[offset..offset + 1], "}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ambiguity_requires_qualified_names() {
        // "x" exists at both L2 and L3 and "w" at both L1 and L2, so the
        // edge ["x","w"] could bind two layers.
        let src = r#"{"levels":[
            {"name":"L1","classes":["w"]},
            {"name":"L2","classes":["w","x"]},
            {"name":"L3","classes":["x"]}],
            "edges":[["L2/w","L1/w"],["L2/x","L1/w"],["x","w"]]}"#;
        assert!(matches!(Hierarchy::from_json(src), Err(HierarchyError::AmbiguousEdge { .. })));
    }

    #[test]
    fn derive_walks_known_ancestry() {
        let h = mm5b();
        let dry = h.class_index(2, "dry cropland").unwrap();
        let mut fine = LabelRaster::new(2, 2, dry as u32);
        fine.set(1, 1, DEFAULT_IGNORE);
        let coarse = derive_coarse_labels(&h, &fine, 2).unwrap();
        let cropland = h.class_index(1, "cropland").unwrap() as u32;
        let vegetation = h.class_index(0, "vegetation").unwrap() as u32;
        assert_eq!(coarse[1].get(0, 0), cropland);
        assert_eq!(coarse[0].get(0, 0), vegetation);
        // Ignore propagates to every level.
        assert_eq!(coarse[0].get(1, 1), fine.ignore);
        assert_eq!(coarse[1].get(1, 1), fine.ignore);
    }

    #[test]
    fn derive_rejects_bad_fine_index() {
        let h = mm5b();
        let fine = LabelRaster::new(1, 2, 99);
        match derive_coarse_labels(&h, &fine, 2) {
            Err(HierarchyError::InvalidLabel { x, y, value, .. }) => {
                assert_eq!((x, y, value), (0, 0, 99));
            }
            other => panic!("expected invalid label, got {other:?}"),
        }
    }

    #[test]
    fn derive_matches_per_pixel_ancestor_walk() {
        // Brute-force oracle: walk parents pixel by pixel.
        let h = mm5b();
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let data: Vec<u32> = (0..32 * 32)
            .map(|_| {
                let v = (next() % 19) as u32;
                if v == 18 { DEFAULT_IGNORE } else { v }
            })
            .collect();
        let fine = LabelRaster::from_data(32, 32, data);
        let coarse = derive_coarse_labels(&h, &fine, 2).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let v = fine.get(y, x);
                if v == fine.ignore {
                    assert_eq!(coarse[0].get(y, x), fine.ignore);
                    assert_eq!(coarse[1].get(y, x), fine.ignore);
                } else {
                    let mut c = v as usize;
                    c = h.parent_of(2, c).unwrap();
                    assert_eq!(coarse[1].get(y, x), c as u32);
                    c = h.parent_of(1, c).unwrap();
                    assert_eq!(coarse[0].get(y, x), c as u32);
                }
            }
        }
    }

    #[test]
    fn aggregation_of_truth_is_truth() {
        let h = crop();
        let rice = h.class_index(2, "rice").unwrap() as u32;
        let fine = LabelRaster::new(4, 4, rice);
        let truth_coarse = derive_coarse_labels(&h, &fine, 2).unwrap();
        let agg = aggregate_flat_prediction(&h, &fine, 2).unwrap();
        assert_eq!(agg.len(), 3);
        assert_eq!(agg[0], truth_coarse[0]);
        assert_eq!(agg[1], truth_coarse[1]);
        assert_eq!(agg[2], fine);
        // Every aggregated tuple is a valid path.
        for y in 0..4 {
            for x in 0..4 {
                let tuple: Vec<usize> =
                    agg.iter().map(|r| r.get(y, x) as usize).collect();
                assert!(h.is_valid_path(&tuple));
            }
        }
    }

    #[test]
    fn paths_contain_exactly_the_leaf_ancestries() {
        let h = mm5b();
        for leaf in 0..h.class_count(2) {
            let tuple = vec![h.ancestor(2, leaf, 0), h.ancestor(2, leaf, 1), leaf];
            assert!(h.is_valid_path(&tuple));
            assert_eq!(h.path_of_leaf(leaf), tuple.as_slice());
        }
        // No other tuples are valid.
        assert!(!h.is_valid_path(&[0, 0, 17]));
        let water = h.class_index(0, "water").unwrap();
        let dry = h.class_index(2, "dry cropland").unwrap();
        let cropland = h.class_index(1, "cropland").unwrap();
        assert!(!h.is_valid_path(&[water, cropland, dry]));
    }

    #[test]
    fn document_round_trip_is_structurally_identical() {
        let h = mm5b();
        let h2 = Hierarchy::from_json(&h.to_json()).unwrap();
        assert_eq!(h.class_counts(), h2.class_counts());
        assert_eq!(h.paths(), h2.paths());
        assert_eq!(h.canonical_hash(), h2.canonical_hash());
        for l in 0..h.num_levels() {
            for c in 0..h.class_count(l) {
                assert_eq!(h.class_name(l, c), h2.class_name(l, c));
            }
        }
    }
}
