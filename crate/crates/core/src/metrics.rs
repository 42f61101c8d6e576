//! Decomposition quality: modal/amodal IOU under Hungarian matching,
//! pairwise depth-ordering accuracy (DPA), and reconstruction MSE.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::scenegen::RenderedScene;

/// Alpha level above which a placed object claims a pixel.
pub const ALPHA_THRESHOLD: f64 = 0.3;
pub const DEFAULT_DPA_THRESHOLD: usize = 30;
pub const DPA_SWEEP: [usize; 10] = [0, 10, 20, 30, 40, 50, 60, 70, 80, 90];

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Maximum-weight assignment of rows to columns (Hungarian method with
/// potentials, O(n^3)). Rectangular inputs are padded with zero weights;
/// rows assigned to padding come back as `None`.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0.0
        }
    };
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

pub fn iou_matrix(gt: &[Mask], pred: &[Mask]) -> Result<Vec<Vec<f64>>> {
    gt.iter().map(|g| pred.iter().map(|p| iou(g, p)).collect()).collect()
}

/// Ground-truth index to predicted index, maximising total IOU.
pub fn hungarian_match(gt: &[Mask], pred: &[Mask]) -> Result<Vec<Option<usize>>> {
    Ok(max_weight_assignment(&iou_matrix(gt, pred)?))
}

/// Sum of matched weights, accumulated in row order.
pub fn assignment_total(weights: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| weights[i][j]))
        .sum()
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            left: vec![x.len()],
            right: vec![y.len()],
        });
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// A model's decomposition of one image, in the form the metrics consume.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub modal: Vec<Mask>,
    pub amodal: Vec<Mask>,
    /// Smaller is nearer.
    pub depths: Vec<f64>,
    /// `[3, N, N]`.
    pub reconstruction: Vec<f64>,
}

/// Masks from placed alphas (`[N*N]` each): amodal is `alpha > 0.3`; modal
/// gives each pixel to the nearest object whose alpha exceeds 0.3 (ties to
/// the lower index).
pub fn masks_from_alphas(alphas: &[Vec<f64>], depths: &[f64], size: usize) -> (Vec<Mask>, Vec<Mask>) {
    let amodal: Vec<Mask> = alphas
        .iter()
        .map(|a| Mask::from_fn(size, size, |r, c| a[r * size + c] > ALPHA_THRESHOLD))
        .collect();
    let labels = modal_labels(alphas, depths, size);
    let modal = (0..alphas.len())
        .map(|j| Mask::from_fn(size, size, |r, c| labels[r * size + c] == Some(j)))
        .collect();
    (modal, amodal)
}

/// Per-pixel label: the nearest object whose alpha exceeds 0.3, if any.
pub fn modal_labels(alphas: &[Vec<f64>], depths: &[f64], size: usize) -> Vec<Option<usize>> {
    (0..size * size)
        .map(|p| {
            let mut best: Option<usize> = None;
            for (j, a) in alphas.iter().enumerate() {
                if a[p] > ALPHA_THRESHOLD && best.is_none_or(|b| depths[j] < depths[b]) {
                    best = Some(j);
                }
            }
            best
        })
        .collect()
}

impl Prediction {
    /// The ground truth itself, with depth values ordered as the ranks.
    pub fn oracle(scene: &RenderedScene) -> Self {
        Prediction {
            modal: scene.modal.clone(),
            amodal: scene.amodal.clone(),
            depths: scene.spec.depth_values(),
            reconstruction: scene.image.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub gt_a: usize,
    pub gt_b: usize,
    /// Ground-truth amodal overlap in pixels.
    pub overlap: usize,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// Per ground-truth object: matched prediction index.
    pub assignment: Vec<Option<usize>>,
    pub modal_iou: Vec<f64>,
    pub amodal_iou: Vec<f64>,
    /// Every pair of matched ground-truth objects, regardless of overlap.
    pub pairs: Vec<PairVerdict>,
    pub mse: f64,
}

impl MatchReport {
    pub fn miou(&self) -> f64 {
        mean(&self.modal_iou)
    }

    pub fn aiou(&self) -> f64 {
        mean(&self.amodal_iou)
    }

    /// Fraction of correctly ordered pairs overlapping by at least
    /// `min_overlap` pixels; `None` when no pair qualifies.
    pub fn dpa(&self, min_overlap: usize) -> Option<f64> {
        let (correct, total) = self.dpa_counts(min_overlap);
        (total > 0).then(|| correct as f64 / total as f64)
    }

    pub fn dpa_counts(&self, min_overlap: usize) -> (usize, usize) {
        self.pairs
            .iter()
            .filter(|p| p.overlap >= min_overlap)
            .fold((0, 0), |(c, t), p| (c + p.correct as usize, t + 1))
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Matches on modal IOU and scores the match with both mask kinds, depth
/// order, and reconstruction error. Unmatched ground-truth objects score 0.
pub fn evaluate_scene(gt: &RenderedScene, pred: &Prediction) -> Result<MatchReport> {
    if pred.modal.len() != pred.amodal.len() || pred.modal.len() != pred.depths.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} modal masks, {} amodal masks and {} depths",
            pred.modal.len(),
            pred.amodal.len(),
            pred.depths.len()
        )));
    }
    // Matching runs over the predictions in a canonical order, so that ties
    // in modal IOU resolve the same way however the predictions are listed.
    let mut canon: Vec<usize> = (0..pred.modal.len()).collect();
    canon.sort_by(|&a, &b| {
        pred.modal[a]
            .bits()
            .cmp(pred.modal[b].bits())
            .then_with(|| pred.amodal[a].bits().cmp(pred.amodal[b].bits()))
            .then_with(|| pred.depths[a].total_cmp(&pred.depths[b]))
    });
    let modal = iou_matrix(&gt.modal, &pred.modal)?;
    let reordered: Vec<Vec<f64>> = modal.iter().map(|row| canon.iter().map(|&j| row[j]).collect()).collect();
    let assignment: Vec<Option<usize>> = max_weight_assignment(&reordered)
        .into_iter()
        .map(|m| m.map(|k| canon[k]))
        .collect();
    let mut modal_iou = Vec::with_capacity(assignment.len());
    let mut amodal_iou = Vec::with_capacity(assignment.len());
    for (i, m) in assignment.iter().enumerate() {
        match m {
            Some(j) => {
                modal_iou.push(modal[i][*j]);
                amodal_iou.push(iou(&gt.amodal[i], &pred.amodal[*j])?);
            }
            None => {
                modal_iou.push(0.0);
                amodal_iou.push(0.0);
            }
        }
    }
    let mut pairs = Vec::new();
    for a in 0..assignment.len() {
        for b in a + 1..assignment.len() {
            let (Some(pa), Some(pb)) = (assignment[a], assignment[b]) else {
                continue;
            };
            let overlap = gt.amodal[a].intersection_count(&gt.amodal[b])?;
            let gt_a_nearer = gt.depth_ranks[a] < gt.depth_ranks[b];
            let (da, db) = (pred.depths[pa], pred.depths[pb]);
            let correct = if gt_a_nearer { da < db } else { db < da };
            pairs.push(PairVerdict {
                gt_a: a,
                gt_b: b,
                overlap,
                correct,
            });
        }
    }
    Ok(MatchReport {
        assignment,
        modal_iou,
        amodal_iou,
        pairs,
        mse: mse(&gt.image, &pred.reconstruction)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene: usize,
    pub miou: f64,
    pub aiou: f64,
    pub dpa: Option<f64>,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: usize,
    pub dpa: Option<f64>,
    pub pairs: usize,
}

/// Dataset-level scores. IOUs average over all ground-truth objects, DPA over
/// all qualifying pairs, MSE over scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub objects: usize,
    pub miou: f64,
    pub aiou: f64,
    pub dpa_threshold: usize,
    pub dpa: Option<f64>,
    pub dpa_pairs: usize,
    pub mse: f64,
    pub dpa_sweep: Vec<SweepRow>,
    pub per_scene: Vec<SceneRow>,
}

pub fn aggregate(reports: &[(usize, MatchReport)], dpa_threshold: usize) -> EvalReport {
    let modal: Vec<f64> = reports.iter().flat_map(|(_, r)| r.modal_iou.iter().copied()).collect();
    let amodal: Vec<f64> = reports.iter().flat_map(|(_, r)| r.amodal_iou.iter().copied()).collect();
    let sweep_row = |threshold: usize| {
        let (c, t) = reports
            .iter()
            .map(|(_, r)| r.dpa_counts(threshold))
            .fold((0, 0), |(c, t), (c2, t2)| (c + c2, t + t2));
        SweepRow {
            threshold,
            dpa: (t > 0).then(|| c as f64 / t as f64),
            pairs: t,
        }
    };
    let main = sweep_row(dpa_threshold);
    EvalReport {
        scenes: reports.len(),
        objects: modal.len(),
        miou: mean(&modal),
        aiou: mean(&amodal),
        dpa_threshold,
        dpa: main.dpa,
        dpa_pairs: main.pairs,
        mse: mean(&reports.iter().map(|(_, r)| r.mse).collect::<Vec<_>>()),
        dpa_sweep: DPA_SWEEP.iter().map(|&t| sweep_row(t)).collect(),
        per_scene: reports
            .iter()
            .map(|(scene, r)| SceneRow {
                scene: *scene,
                miou: r.miou(),
                aiou: r.aiou(),
                dpa: r.dpa(dpa_threshold),
                mse: r.mse,
            })
            .collect(),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn per_scene_csv(&self) -> String {
        let mut s = String::from("scene,miou,aiou,dpa,mse\n");
        for r in &self.per_scene {
            let _ = writeln!(s, "{},{},{},{},{}", r.scene, r.miou, r.aiou, opt(r.dpa), r.mse);
        }
        s
    }

    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("threshold,dpa,pairs\n");
        for r in &self.dpa_sweep {
            let _ = writeln!(s, "{},{},{}", r.threshold, opt(r.dpa), r.pairs);
        }
        s
    }

    /// Writes `<stem>.json`, `<stem>_scenes.csv` and `<stem>_dpa_sweep.csv`
    /// next to `path` (the JSON path).
    pub fn write(&self, path: &Path) -> Result<()> {
        let stem = path.with_extension("");
        let stem = stem.to_string_lossy();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut json = serde_json::to_string_pretty(self).expect("report serialises");
        json.push('\n');
        let files = [
            (path.to_path_buf(), json),
            (format!("{stem}_scenes.csv").into(), self.per_scene_csv()),
            (format!("{stem}_dpa_sweep.csv").into(), self.sweep_csv()),
        ];
        for (p, text) in files {
            let p: std::path::PathBuf = p;
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
