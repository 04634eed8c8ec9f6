use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{predict, ModelConfig, ModelParams};
use crate::relation::SceneFeatures;
use crate::train::{thread_pool, LabeledScene};

/// Person indices ordered by descending score; equal scores keep index order.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Average precision of one ranking with `relevant` persons as positives.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, idx) in rank_order(scores).into_iter().enumerate() {
        if relevant[idx] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPerson {
    pub person_id: String,
    pub index: usize,
    pub point: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRanking {
    pub scene_id: String,
    pub ranking: Vec<RankedPerson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1_hit: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-scene average precision, in percent.
    pub map: f64,
    /// Share of scenes whose top-ranked person is important, in percent.
    pub top1_accuracy: f64,
    pub scenes_evaluated: usize,
    pub scenes_skipped: usize,
    pub scenes: Vec<SceneRanking>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn summary_table(&self) -> String {
        format!(
            "{:<10} {:>8}\n{:<10} {:>8.2}\n{:<10} {:>8.2}\n{:<10} {:>8}\n",
            "metric", "value", "mAP (%)", self.map, "top-1 (%)", self.top1_accuracy, "scenes", self.scenes_evaluated
        )
    }
}

/// Ranks one scene's persons by importance point.
pub fn rank_scene(
    scene: &SceneFeatures,
    person_ids: &[String],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<RankedPerson>> {
    let points: Vec<f64> = predict(scene, params, config)?.iter().map(|p| p.important).collect();
    Ok(rank_order(&points)
        .into_iter()
        .map(|i| RankedPerson {
            person_id: person_ids[i].clone(),
            index: i,
            point: points[i],
        })
        .collect())
}

/// Builds a report from per-scene `(id, person ids, scores, relevance)`.
/// Scene id, person ids, scores and relevance flags of one scored scene.
pub type ScoredScene = (String, Vec<String>, Vec<f64>, Vec<bool>);

pub fn summarize(scenes: Vec<ScoredScene>) -> EvalReport {
    let mut ap_sum = 0.0;
    let mut hits = 0usize;
    let mut evaluated = 0usize;
    let mut rankings = Vec::with_capacity(scenes.len());
    for (scene_id, ids, scores, relevant) in scenes {
        let order = rank_order(&scores);
        let ap = average_precision(&scores, &relevant);
        let hit = ap.map(|_| relevant[order[0]]);
        match ap {
            Some(ap) => {
                evaluated += 1;
                ap_sum += ap;
                hits += usize::from(hit == Some(true));
            }
            None => warn!("scene {} has no important person; excluded from mAP", scene_id),
        }
        rankings.push(SceneRanking {
            ranking: order
                .into_iter()
                .map(|i| RankedPerson {
                    person_id: ids[i].clone(),
                    index: i,
                    point: scores[i],
                })
                .collect(),
            scene_id,
            average_precision: ap,
            top1_hit: hit,
        });
    }
    let pct = |x: f64| {
        if evaluated == 0 {
            0.0
        } else {
            100.0 * x / evaluated as f64
        }
    };
    EvalReport {
        map: pct(ap_sum),
        top1_accuracy: pct(hits as f64),
        scenes_evaluated: evaluated,
        scenes_skipped: rankings.len() - evaluated,
        scenes: rankings,
    }
}

/// Per-scene average precision averaged over scenes, plus top-1 accuracy.
pub fn evaluate_map(
    scenes: &[LabeledScene],
    params: &ModelParams,
    config: &ModelConfig,
    threads: usize,
) -> Result<EvalReport> {
    params.check(config)?;
    let pool = thread_pool(threads)?;
    let scored = pool.install(|| {
        scenes
            .par_iter()
            .map(|s| {
                let points = predict(&s.features, params, config)?;
                Ok((
                    s.scene_id.clone(),
                    s.person_ids.clone(),
                    points.iter().map(|p| p.important).collect(),
                    s.labels.iter().map(|l| l.is_important()).collect(),
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(summarize(scored))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_broken_by_index() {
        assert_eq!(rank_order(&[0.5, 0.9, 0.5, 0.1]), vec![1, 0, 2, 3]);
    }

    #[test]
    fn ap_of_single_positive_ranked_second() {
        let ap = average_precision(&[0.9, 0.8, 0.1, 0.2], &[false, true, false, false]).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn ap_none_without_positives() {
        assert!(average_precision(&[0.1, 0.2], &[false, false]).is_none());
    }

    #[test]
    fn perfect_ranking_gives_full_map() {
        let scenes = (0..5)
            .map(|k| {
                let scores = vec![0.1, 0.9, 0.3];
                (
                    format!("s{}", k),
                    vec!["a".into(), "b".into(), "c".into()],
                    scores,
                    vec![false, true, false],
                )
            })
            .collect();
        let r = summarize(scenes);
        assert_eq!(r.map, 100.0);
        assert_eq!(r.top1_accuracy, 100.0);
    }

    #[test]
    fn one_scene_half_map() {
        let r = summarize(vec![(
            "s".into(),
            (0..4).map(|i| i.to_string()).collect(),
            vec![0.9, 0.8, 0.1, 0.2],
            vec![false, true, false, false],
        )]);
        assert_eq!(r.map, 50.0);
        assert_eq!(r.top1_accuracy, 0.0);
    }

    #[test]
    fn scenes_without_positives_excluded() {
        let r = summarize(vec![
            ("a".into(), vec!["x".into()], vec![0.3], vec![true]),
            ("b".into(), vec!["y".into()], vec![0.3], vec![false]),
        ]);
        assert_eq!(r.scenes_evaluated, 1);
        assert_eq!(r.scenes_skipped, 1);
        assert_eq!(r.map, 100.0);
    }
}
