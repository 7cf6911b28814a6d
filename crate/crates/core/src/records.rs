//! On-disk dataset records.
//!
//! A dataset directory holds `dataset.json` (global metadata) and four JSON
//! Lines files: `scenes.jsonl`, `gt.jsonl`, `pseudo_labels.jsonl` and
//! `proposals.jsonl`. Rows are written in scene order, then index order, so
//! the files are byte-identical for identical datasets. Loading checks the
//! schema, cross-references and the assignment rule before handing back a
//! [`Dataset`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::assignment::{Assignment, ClassLabel, Proposal, PseudoLabel};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::noise_sim::{
    Dataset, GroundTruth, NoisyLabel, ProposalRecord, Provenance, Scene, SceneRecord,
};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "dataset.json";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const GT_FILE: &str = "gt.jsonl";
pub const PSEUDO_FILE: &str = "pseudo_labels.jsonl";
pub const PROPOSALS_FILE: &str = "proposals.jsonl";

/// Every file [`write_dataset`] produces.
pub const DATASET_FILES: [&str; 5] = [META_FILE, SCENES_FILE, GT_FILE, PSEUDO_FILE, PROPOSALS_FILE];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub num_classes: usize,
    pub delta_b: f64,
    pub num_scenes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRow {
    pub scene_id: usize,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRow {
    pub scene_id: usize,
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelRow {
    pub scene_id: usize,
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
    pub clean: bool,
    pub flipped: bool,
    pub jittered: bool,
    pub gt_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalRow {
    pub scene_id: usize,
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// `null` means background.
    pub true_category: Option<usize>,
    pub sampled: bool,
    pub max_iou: f64,
    pub matched_index: Option<usize>,
    pub assigned_category: Option<usize>,
    pub matched_score: Option<f64>,
    pub is_positive: bool,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `dataset` into `dir`, creating it if needed. Returns the written
/// paths in [`DATASET_FILES`] order.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = DATASET_FILES.iter().map(|f| dir.join(f)).collect();

    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        num_classes: dataset.num_classes,
        delta_b: dataset.delta_b,
        num_scenes: dataset.scenes.len(),
    };
    let mut w = create(&paths[0])?;
    serde_json::to_writer_pretty(&mut w, &meta)?;
    w.write_all(b"\n").map_err(|e| Error::io(&paths[0], e))?;
    w.flush().map_err(|e| Error::io(&paths[0], e))?;

    let scenes = &dataset.scenes;
    write_lines(
        &paths[1],
        scenes.iter().map(|s| SceneRow {
            scene_id: s.scene_id,
            width: s.scene.width,
            height: s.scene.height,
        }),
    )?;
    write_lines(
        &paths[2],
        scenes.iter().flat_map(|s| {
            s.scene
                .objects
                .iter()
                .enumerate()
                .map(move |(index, gt)| GtRow {
                    scene_id: s.scene_id,
                    index,
                    bbox: gt.bbox,
                    category: gt.category,
                })
        }),
    )?;
    write_lines(
        &paths[3],
        scenes.iter().flat_map(|s| {
            s.labels
                .iter()
                .enumerate()
                .map(move |(index, l)| PseudoLabelRow {
                    scene_id: s.scene_id,
                    index,
                    bbox: l.label.bbox,
                    category: l.label.category,
                    score: l.label.score,
                    clean: l.provenance.is_clean(),
                    flipped: l.provenance.flipped,
                    jittered: l.provenance.jittered,
                    gt_index: l.provenance.gt_index,
                })
        }),
    )?;
    write_lines(
        &paths[4],
        scenes.iter().flat_map(|s| {
            s.proposals
                .iter()
                .enumerate()
                .map(move |(index, p)| ProposalRow {
                    scene_id: s.scene_id,
                    index,
                    bbox: p.proposal.bbox,
                    true_category: p.true_label().into(),
                    sampled: p.sampled,
                    max_iou: p.assignment.max_iou,
                    matched_index: p.assignment.matched_index,
                    assigned_category: p.assignment.assigned_category.into(),
                    matched_score: p.assignment.matched_score,
                    is_positive: p.assignment.is_positive,
                })
        }),
    )?;
    Ok(paths)
}

struct Reader {
    path: PathBuf,
}

impl Reader {
    fn schema(&self, line: usize, message: impl std::fmt::Display) -> Error {
        Error::Schema {
            path: self.path.clone(),
            message: format!("line {line}: {message}"),
        }
    }

    fn rows<T: DeserializeOwned>(&self) -> Result<Vec<(usize, T)>> {
        let file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&self.path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row = serde_json::from_str(&line).map_err(|e| self.schema(i + 1, e))?;
            out.push((i + 1, row));
        }
        Ok(out)
    }

    /// Checks that `(scene_id, index)` rows arrive in order with contiguous
    /// indices, calling `push` with the scene each row belongs to.
    fn ordered<T>(
        &self,
        rows: Vec<(usize, T)>,
        num_scenes: usize,
        key: impl Fn(&T) -> (usize, usize),
        mut push: impl FnMut(usize, usize, T) -> std::result::Result<(), String>,
    ) -> Result<()> {
        let mut expected = (0usize, 0usize);
        for (line, row) in rows {
            let (scene, index) = key(&row);
            if scene >= num_scenes {
                return Err(self.schema(line, format!("unknown scene_id {scene}")));
            }
            if scene < expected.0
                || (scene == expected.0 && index != expected.1)
                || (scene > expected.0 && index != 0)
            {
                return Err(self.schema(line, format!("row ({scene}, {index}) out of order")));
            }
            expected = (scene, index + 1);
            push(line, scene, row).map_err(|m| self.schema(line, m))?;
        }
        Ok(())
    }
}

/// Loads and validates a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Schema {
            path: meta_path,
            message: format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            ),
        });
    }
    let k = meta.num_classes;
    let reader = |f: &str| Reader { path: dir.join(f) };

    let scene_reader = reader(SCENES_FILE);
    let mut scenes = Vec::with_capacity(meta.num_scenes);
    for (line, row) in scene_reader.rows::<SceneRow>()? {
        if row.scene_id != scenes.len() {
            return Err(scene_reader.schema(line, format!("expected scene_id {}", scenes.len())));
        }
        if !(row.width > 0.0 && row.height > 0.0) {
            return Err(scene_reader.schema(line, "scene extent must be positive"));
        }
        scenes.push(SceneRecord {
            scene_id: row.scene_id,
            scene: Scene {
                width: row.width,
                height: row.height,
                objects: Vec::new(),
            },
            labels: Vec::new(),
            proposals: Vec::new(),
        });
    }
    if scenes.len() != meta.num_scenes {
        return Err(scene_reader.schema(
            0,
            format!("{} scenes, metadata says {}", scenes.len(), meta.num_scenes),
        ));
    }
    let n = scenes.len();

    reader(GT_FILE).ordered(
        reader(GT_FILE).rows::<GtRow>()?,
        n,
        |r| (r.scene_id, r.index),
        |_, s, r| {
            if r.category >= k {
                return Err(format!("category {} >= num_classes {k}", r.category));
            }
            scenes[s].scene.objects.push(GroundTruth {
                bbox: r.bbox,
                category: r.category,
            });
            Ok(())
        },
    )?;

    reader(PSEUDO_FILE).ordered(
        reader(PSEUDO_FILE).rows::<PseudoLabelRow>()?,
        n,
        |r| (r.scene_id, r.index),
        |_, s, r| {
            let label = PseudoLabel::new(r.bbox, r.category, r.score).map_err(|e| e.to_string())?;
            label.validate(k).map_err(|e| e.to_string())?;
            if r.clean != (!r.flipped && !r.jittered) {
                return Err("`clean` must equal !(flipped || jittered)".into());
            }
            if r.gt_index
                .is_some_and(|g| g >= scenes[s].scene.objects.len())
            {
                return Err(format!("gt_index {:?} has no object", r.gt_index));
            }
            scenes[s].labels.push(NoisyLabel {
                label,
                provenance: Provenance {
                    gt_index: r.gt_index,
                    flipped: r.flipped,
                    jittered: r.jittered,
                },
            });
            Ok(())
        },
    )?;

    let delta_b = meta.delta_b;
    reader(PROPOSALS_FILE).ordered(
        reader(PROPOSALS_FILE).rows::<ProposalRow>()?,
        n,
        |r| (r.scene_id, r.index),
        |_, s, r| {
            let truth = ClassLabel::from(r.true_category);
            let assigned = ClassLabel::from(r.assigned_category);
            if !truth.is_valid(k) || !assigned.is_valid(k) {
                return Err(format!("category out of range for num_classes {k}"));
            }
            let assignment = Assignment {
                max_iou: r.max_iou,
                matched_index: r.matched_index,
                assigned_category: assigned,
                matched_score: r.matched_score,
                is_positive: r.is_positive,
            };
            if !assignment.is_consistent(delta_b) {
                return Err(format!(
                    "assignment fields disagree with delta_b = {delta_b}"
                ));
            }
            if let Some(m) = r.matched_index {
                let label = scenes[s]
                    .labels
                    .get(m)
                    .ok_or_else(|| format!("matched_index {m} has no pseudo label"))?
                    .label;
                if ClassLabel::Foreground(label.category) != assigned
                    || Some(label.score) != r.matched_score
                {
                    return Err(format!("assignment disagrees with pseudo label {m}"));
                }
            }
            scenes[s].proposals.push(ProposalRecord {
                proposal: Proposal {
                    bbox: r.bbox,
                    true_category: Some(truth),
                },
                assignment,
                sampled: r.sampled,
            });
            Ok(())
        },
    )?;

    Ok(Dataset {
        num_classes: k,
        delta_b,
        scenes,
    })
}
