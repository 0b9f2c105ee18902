use super::DetectionOutput;
use crate::error::{Error, Result};
use crate::geometry::{decode_distribution, overlap_metrics, BBox};
use crate::tensor::sigmoid_scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub score_thresh: f32,
    pub nms_iou: f32,
    /// Candidates kept before NMS.
    pub pre_nms: usize,
    pub max_dets: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_thresh: 0.05,
            nms_iou: 0.6,
            pre_nms: 1000,
            max_dets: 100,
        }
    }
}

struct Candidate {
    anchor: usize,
    det: Detection,
}

/// Greedy NMS per class. Candidates are ranked by score, ties broken by lower anchor index.
fn nms(mut cands: Vec<Candidate>, iou: f32) -> Vec<Candidate> {
    cands.sort_by(|a, b| b.det.score.total_cmp(&a.det.score).then(a.anchor.cmp(&b.anchor)));
    let mut keep: Vec<Candidate> = Vec::new();
    for c in cands {
        let suppressed = keep
            .iter()
            .any(|k| k.det.class == c.det.class && overlap_metrics(&k.det.bbox, &c.det.bbox).iou > iou);
        if !suppressed {
            keep.push(c);
        }
    }
    keep
}

/// Detections for a single image (`out.batch == 1`) of size `height x width`.
pub fn decode_detections(out: &DetectionOutput, height: usize, width: usize, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&cfg.score_thresh) || !(0.0..=1.0).contains(&cfg.nms_iou) {
        return Err(Error::invalid("score and NMS thresholds must lie in [0, 1]"));
    }
    if out.batch != 1 {
        return Err(Error::invalid(format!("decode expects one image, got a batch of {}", out.batch)));
    }
    let mut cands = Vec::new();
    let mut base = 0;
    for level in &out.levels {
        let n = level.height * level.width;
        let c = level.cls.shape()[1];
        let k = level.reg.shape()[1];
        let s = level.stride as f32;
        for a in 0..n {
            let scores = &level.cls.data()[a * c..(a + 1) * c];
            let mut bbox = None;
            for (cls, logit) in scores.iter().enumerate() {
                let score = sigmoid_scalar(*logit);
                if score <= cfg.score_thresh {
                    continue;
                }
                let b = match bbox {
                    Some(b) => b,
                    None => {
                        let (i, j) = (a / level.width, a % level.width);
                        let point = ((j as f32 + 0.5) * s, (i as f32 + 0.5) * s);
                        let b = decode_distribution(&level.reg.data()[a * k..(a + 1) * k], point, s)?
                            .clip(width as f32, height as f32);
                        bbox = Some(b);
                        b
                    }
                };
                cands.push(Candidate {
                    anchor: base + a,
                    det: Detection { bbox: b, class: cls, score },
                });
            }
        }
        base += n;
    }
    if cands.len() > cfg.pre_nms {
        cands.sort_by(|a, b| b.det.score.total_cmp(&a.det.score).then(a.anchor.cmp(&b.anchor)));
        cands.truncate(cfg.pre_nms);
    }
    let mut kept = nms(cands, cfg.nms_iou);
    kept.truncate(cfg.max_dets);
    Ok(kept.into_iter().map(|c| c.det).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::model::LevelOutput;
    use crate::tensor::Tensor;

    fn output(cls: Vec<f32>, classes: usize) -> DetectionOutput {
        let n = cls.len() / classes;
        DetectionOutput {
            batch: 1,
            levels: vec![LevelOutput {
                stride: 8,
                height: 1,
                width: n,
                cls: Tensor::new(vec![n, classes], cls).unwrap(),
                reg: Tensor::zeros(&[n, 8]),
                reg_map: Tensor::zeros(&[1, 8, 1, n]),
            }],
        }
    }

    #[test]
    fn single_anchor_above_threshold() {
        let d = decode_detections(&output(vec![-9.0, 3.0, -9.0], 1), 8, 24, &DecodeConfig::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class, 0);
        // two uniform bins put each side half a stride from the anchor at x = 12
        assert_eq!(d[0].bbox, BBox::new(8.0, 0.0, 16.0, 8.0).unwrap());
    }

    #[test]
    fn same_class_duplicates_suppressed() {
        let a = Candidate {
            anchor: 1,
            det: Detection { bbox: BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(), class: 0, score: 0.8 },
        };
        let b = Candidate {
            anchor: 0,
            det: Detection { bbox: BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(), class: 0, score: 0.9 },
        };
        let kept = nms(vec![a, b], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].det.score, 0.9);
    }

    #[test]
    fn different_classes_both_survive() {
        let mk = |class, score| Candidate {
            anchor: class,
            det: Detection { bbox: BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(), class, score },
        };
        assert_eq!(nms(vec![mk(0, 0.9), mk(1, 0.8)], 0.5).len(), 2);
    }

    #[test]
    fn equal_scores_keep_lower_anchor() {
        let mk = |anchor, x: f32| Candidate {
            anchor,
            det: Detection { bbox: BBox::new(x, 0.0, x + 4.0, 4.0).unwrap(), class: 0, score: 0.5 },
        };
        let kept = nms(vec![mk(3, 1.0), mk(2, 0.0)], 0.1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].anchor, 2);
    }

    #[test]
    fn rejects_bad_thresholds() {
        let cfg = DecodeConfig { nms_iou: 1.5, ..Default::default() };
        assert!(decode_detections(&output(vec![0.0], 1), 8, 8, &cfg).is_err());
    }
}
