//! Axis-aligned 3D IoU and VOC all-point average precision.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rgbd::Box3D;

/// Detection interchange record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub scene_id: String,
    pub class_id: usize,
    pub score: f64,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Detection {
    pub fn from_box(scene_id: &str, b: &Box3D) -> Self {
        Detection {
            scene_id: scene_id.to_string(),
            class_id: b.class_id,
            score: b.score,
            center: b.center,
            size: b.size,
            yaw: b.yaw,
        }
    }

    pub fn to_box(&self) -> Result<Box3D> {
        Ok(Box3D::new(self.center, self.size, self.yaw, self.class_id)?.with_score(self.score))
    }
}

/// IoU of the axis-aligned hulls; rotated boxes are replaced by their hulls.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    a.hull_iou(b)
}

/// Area under the precision/recall curve with precision made
/// non-increasing from the right, summed over every recall step.
pub fn voc_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (0..mrec.len() - 1)
        .filter(|&i| mrec[i + 1] != mrec[i])
        .map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1])
        .sum()
}

/// Outcome of greedy matching for one class at one threshold.
struct ClassMatch {
    ap: f64,
    tp: Vec<bool>,
    order: Vec<usize>,
}

/// Detections of one class: `(index into dets, box)`.
fn match_class(
    dets: &[(usize, &Detection, Box3D)],
    gts: &BTreeMap<String, Vec<Box3D>>,
    class: usize,
    thresh: f64,
    n_gt: usize,
) -> ClassMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (dets[a].1, dets[b].1);
        db.score
            .partial_cmp(&da.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| da.scene_id.cmp(&db.scene_id))
            .then_with(|| dets[a].0.cmp(&dets[b].0))
    });
    let mut used: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    let mut tp = Vec::with_capacity(order.len());
    for &i in &order {
        let (_, d, b) = &dets[i];
        let scene = gts.get(&d.scene_id).map(|v| v.as_slice()).unwrap_or(&[]);
        let flags = used.entry(d.scene_id.as_str()).or_insert_with(|| vec![false; scene.len()]);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in scene.iter().enumerate() {
            if g.class_id != class || flags[j] {
                continue;
            }
            let iou = iou3d(b, g);
            if best.map_or(true, |(_, bi)| iou > bi) {
                best = Some((j, iou));
            }
        }
        let hit = match best {
            Some((j, iou)) if iou >= thresh => {
                flags[j] = true;
                true
            }
            _ => false,
        };
        tp.push(hit);
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for &t in &tp {
        if t {
            ntp += 1;
        } else {
            nfp += 1;
        }
        precision.push(ntp as f64 / (ntp + nfp) as f64);
        recall.push(ntp as f64 / n_gt.max(1) as f64);
    }
    ClassMatch {
        ap: voc_ap(&recall, &precision),
        tp,
        order,
    }
}

/// Per-class AP at `thresh`; `None` for classes without ground truth.
pub fn average_precision(dets: &[Detection], gts: &BTreeMap<String, Vec<Box3D>>, class: usize, thresh: f64) -> Option<f64> {
    let n_gt = gts.values().flatten().filter(|g| g.class_id == class).count();
    if n_gt == 0 {
        return None;
    }
    let mine = class_dets(dets, class);
    Some(match_class(&mine, gts, class, thresh, n_gt).ap)
}

fn class_dets(dets: &[Detection], class: usize) -> Vec<(usize, &Detection, Box3D)> {
    dets.iter()
        .enumerate()
        .filter(|(_, d)| d.class_id == class)
        .map(|(i, d)| {
            let b = Box3D {
                center: d.center,
                size: d.size,
                yaw: d.yaw,
                class_id: d.class_id,
                score: d.score,
            };
            (i, d, b)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub gt: usize,
    pub detections: usize,
    /// `None` when the class has no ground truth.
    pub ap25: Option<f64>,
    pub ap50: Option<f64>,
    pub matched25: usize,
    pub matched50: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene_id: String,
    pub gt: usize,
    pub detections: usize,
    pub matched25: usize,
    pub matched50: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub gt: usize,
    pub detections: usize,
    pub matched25: usize,
    pub matched50: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub mean_ap25: f64,
    pub mean_ap50: f64,
    pub counts: Counts,
    pub scenes: Vec<SceneReport>,
}

/// Scores detections against ground truth for classes `0..num_classes`
/// (extended to any class id that appears in the inputs).
pub fn evaluate(dets: &[Detection], gts: &BTreeMap<String, Vec<Box3D>>, num_classes: usize) -> EvalReport {
    let max_class = dets
        .iter()
        .map(|d| d.class_id + 1)
        .chain(gts.values().flatten().map(|g| g.class_id + 1))
        .max()
        .unwrap_or(0)
        .max(num_classes);
    let mut scenes: BTreeMap<String, SceneReport> = BTreeMap::new();
    for (id, g) in gts {
        let s = scenes.entry(id.clone()).or_default();
        s.scene_id = id.clone();
        s.gt = g.len();
    }
    for d in dets {
        let s = scenes.entry(d.scene_id.clone()).or_default();
        s.scene_id = d.scene_id.clone();
        s.detections += 1;
    }
    let mut classes = Vec::with_capacity(max_class);
    for c in 0..max_class {
        let mine = class_dets(dets, c);
        let n_gt = gts.values().flatten().filter(|g| g.class_id == c).count();
        let mut rep = ClassReport {
            class_id: c,
            gt: n_gt,
            detections: mine.len(),
            ap25: None,
            ap50: None,
            matched25: 0,
            matched50: 0,
        };
        if n_gt > 0 {
            for (thresh, is25) in [(0.25, true), (0.5, false)] {
                let m = match_class(&mine, gts, c, thresh, n_gt);
                let matched = m.tp.iter().filter(|&&t| t).count();
                for (k, &i) in m.order.iter().enumerate() {
                    if m.tp[k] {
                        let s = scenes.get_mut(&mine[i].1.scene_id).expect("scene registered");
                        if is25 {
                            s.matched25 += 1;
                        } else {
                            s.matched50 += 1;
                        }
                    }
                }
                if is25 {
                    rep.ap25 = Some(m.ap);
                    rep.matched25 = matched;
                } else {
                    rep.ap50 = Some(m.ap);
                    rep.matched50 = matched;
                }
            }
        }
        classes.push(rep);
    }
    let present: Vec<&ClassReport> = classes.iter().filter(|c| c.gt > 0).collect();
    let mean = |f: fn(&ClassReport) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    let mean_ap25 = mean(|c| c.ap25.unwrap_or(0.0));
    let mean_ap50 = mean(|c| c.ap50.unwrap_or(0.0));
    let counts = Counts {
        gt: classes.iter().map(|c| c.gt).sum(),
        detections: dets.len(),
        matched25: classes.iter().map(|c| c.matched25).sum(),
        matched50: classes.iter().map(|c| c.matched50).sum(),
    };
    EvalReport {
        classes,
        mean_ap25,
        mean_ap50,
        counts,
        scenes: scenes.into_values().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(x: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.0], [1.0; 3], 0.0, 0).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou3d(&unit(0.0), &unit(0.0)), 1.0);
        assert_eq!(iou3d(&unit(0.0), &unit(3.0)), 0.0);
        assert!((iou3d(&unit(0.0), &unit(0.5)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fp_then_tp_gives_half() {
        let gts = BTreeMap::from([("s".to_string(), vec![unit(0.0)])]);
        let fp = Detection::from_box("s", &unit(5.0).with_score(0.9));
        let tp = Detection::from_box("s", &unit(0.0).with_score(0.8));
        assert_eq!(average_precision(&[fp, tp], &gts, 0, 0.5), Some(0.5));
    }

    #[test]
    fn perfect_and_absent() {
        let gts = BTreeMap::from([("a".to_string(), vec![unit(0.0), unit(3.0)])]);
        let dets = vec![
            Detection::from_box("a", &unit(0.0).with_score(0.9)),
            Detection::from_box("a", &unit(3.0).with_score(0.8)),
        ];
        let r = evaluate(&dets, &gts, 2);
        assert_eq!(r.classes[0].ap50, Some(1.0));
        assert_eq!(r.classes[1].ap50, None);
        assert_eq!(r.mean_ap50, 1.0);
        assert_eq!(r.counts.matched50, 2);
        assert_eq!(r.scenes[0].matched25, 2);
        let empty = evaluate(&[], &gts, 2);
        assert_eq!(empty.mean_ap25, 0.0);
    }
}
