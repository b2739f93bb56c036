//! Retrieval metrics and evaluation protocols.
//!
//! Rankings sort gallery items by descending similarity with ties broken by
//! ascending `sample_id`. Gallery items sharing both identity and camera with
//! the query are excluded before scoring. Queries left without a positive are
//! skipped and counted, never scored as zero.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::inference::{cosine, GaussianEmbedding};
use crate::reliability::{self, FusionRecord};
use crate::textio::fmt_f64;

/// Mean over positives of precision at each positive's rank. `None` when the
/// ranking holds no positive.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Fraction of scoreable rankings with a positive inside the top `k`.
pub fn cmc(rankings: &[Vec<bool>], k: usize) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::invalid("CMC depth k must be >= 1"));
    }
    let scored: Vec<&Vec<bool>> = rankings.iter().filter(|r| r.contains(&true)).collect();
    if scored.is_empty() {
        return Ok(None);
    }
    let hits = scored.iter().filter(|r| r.iter().take(k).any(|&x| x)).count();
    Ok(Some(hits as f64 / scored.len() as f64))
}

/// Gallery order for one query: indices into `sims`/`ids`.
pub fn rank_order(sims: &[f64], ids: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(ids[a].cmp(&ids[b])));
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    Single,
    Multi,
}

#[derive(Clone, Debug)]
pub struct RetrievalRun {
    pub queries: Vec<GaussianEmbedding>,
    pub gallery: Vec<GaussianEmbedding>,
    pub mode: QueryMode,
}

impl RetrievalRun {
    pub fn single(queries: Vec<GaussianEmbedding>, gallery: Vec<GaussianEmbedding>) -> Self {
        RetrievalRun {
            queries,
            gallery,
            mode: QueryMode::Single,
        }
    }

    pub fn multi(queries: Vec<GaussianEmbedding>, gallery: Vec<GaussianEmbedding>) -> Self {
        RetrievalRun {
            queries,
            gallery,
            mode: QueryMode::Multi,
        }
    }
}

/// Metrics are NaN when `scored == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub scored: usize,
    pub skipped: usize,
}

fn summarize(rankings: Vec<Vec<bool>>) -> Result<EvalReport> {
    let aps: Vec<f64> = rankings.iter().filter_map(|r| average_precision(r)).collect();
    let scored = aps.len();
    let skipped = rankings.len() - scored;
    let map = if scored == 0 {
        f64::NAN
    } else {
        aps.iter().sum::<f64>() / scored as f64
    };
    let at = |k| Ok::<_, Error>(cmc(&rankings, k)?.unwrap_or(f64::NAN));
    Ok(EvalReport {
        map,
        rank1: at(1)?,
        rank5: at(5)?,
        rank10: at(10)?,
        scored,
        skipped,
    })
}

/// Valid gallery indices for a query from `(identity, camera)`.
fn valid_gallery(gallery: &[GaussianEmbedding], identity: usize, camera: usize) -> Vec<usize> {
    (0..gallery.len())
        .filter(|&g| !(gallery[g].identity == identity && gallery[g].camera == camera))
        .collect()
}

fn relevance(gallery: &[GaussianEmbedding], valid: &[usize], sims: &[f64], identity: usize) -> Vec<bool> {
    let ids: Vec<usize> = valid.iter().map(|&g| gallery[g].sample_id).collect();
    rank_order(sims, &ids)
        .into_iter()
        .map(|k| gallery[valid[k]].identity == identity)
        .collect()
}

fn check_gallery(run: &RetrievalRun) -> Result<()> {
    if run.gallery.is_empty() {
        Err(Error::invalid("retrieval run has an empty gallery"))
    } else {
        Ok(())
    }
}

pub fn single_query_eval(run: &RetrievalRun) -> Result<EvalReport> {
    check_gallery(run)?;
    let mut rankings = Vec::with_capacity(run.queries.len());
    for q in &run.queries {
        let valid = valid_gallery(&run.gallery, q.identity, q.camera);
        let sims = valid
            .iter()
            .map(|&g| cosine(&q.mean, &run.gallery[g].mean))
            .collect::<Result<Vec<_>>>()?;
        rankings.push(relevance(&run.gallery, &valid, &sims, q.identity));
    }
    summarize(rankings)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub retained: usize,
    /// NaN when nothing is retained or nothing scoreable remains.
    pub map: f64,
    pub rank1: f64,
}

/// Gate the query population at each `alpha`, then score the survivors.
pub fn risk_sweep(run: &RetrievalRun, alphas: &[f64]) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::invalid("alpha grid is empty"));
    }
    if run.mode != QueryMode::Single {
        return Err(Error::invalid("risk sweep expects a single-query run"));
    }
    check_gallery(run)?;
    alphas
        .iter()
        .map(|&alpha| {
            let gate = reliability::gate(&run.queries, alpha)?;
            let kept: Vec<GaussianEmbedding> = run
                .queries
                .iter()
                .zip(&gate.decisions)
                .filter(|(_, d)| d.kept)
                .map(|(q, _)| q.clone())
                .collect();
            let retained = kept.len();
            let (map, rank1) = if kept.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let r = single_query_eval(&RetrievalRun::single(kept, run.gallery.clone()))?;
                (r.map, r.rank1)
            };
            Ok(SweepRow {
                alpha,
                retained,
                map,
                rank1,
            })
        })
        .collect()
}

/// Weighting applied inside each multi-query group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fusion {
    Uniform,
    Reliability { tau_min: f64, tau_max: f64 },
}

/// Treats each `(identity, camera)` query group as one query whose
/// similarity to a gallery item is the weighted sum of member similarities.
pub fn multi_query_eval(run: &RetrievalRun, fusion: Fusion) -> Result<(EvalReport, Vec<FusionRecord>)> {
    check_gallery(run)?;
    let mut groups: BTreeMap<(usize, usize), Vec<&GaussianEmbedding>> = BTreeMap::new();
    for q in &run.queries {
        groups.entry((q.identity, q.camera)).or_default().push(q);
    }
    let mut rankings = Vec::with_capacity(groups.len());
    let mut records = Vec::with_capacity(groups.len());
    for ((identity, camera), members) in groups {
        let n = members.len();
        let weights = match fusion {
            Fusion::Uniform => vec![1.0 / n as f64; n],
            Fusion::Reliability { tau_min, tau_max } => {
                let d: Vec<f64> = members.iter().map(|q| q.data_uncertainty).collect();
                let m: Vec<f64> = members.iter().map(|q| q.model_uncertainty).collect();
                reliability::multi_query_weights(&d, &m, tau_min, tau_max)?.w
            }
        };
        let valid = valid_gallery(&run.gallery, identity, camera);
        let sims = members
            .iter()
            .map(|q| {
                valid
                    .iter()
                    .map(|&g| cosine(&q.mean, &run.gallery[g].mean))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = if valid.is_empty() {
            Vec::new()
        } else {
            reliability::fuse_similarities(&weights, &sims)?
        };
        rankings.push(relevance(&run.gallery, &valid, &fused, identity));
        records.push(FusionRecord {
            identity,
            camera,
            weights,
        });
    }
    Ok((summarize(rankings)?, records))
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        fmt_f64(v)
    }
}

/// `metric,value` lines.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    for (name, v) in [
        ("mAP", report.map),
        ("rank1", report.rank1),
        ("rank5", report.rank5),
        ("rank10", report.rank10),
    ] {
        out.push_str(&format!("{name},{}\n", fmt_metric(v)));
    }
    out.push_str(&format!("scored,{}\nskipped,{}\n", report.scored, report.skipped));
    out
}

/// One JSON object per line.
pub fn format_report_jsonl(report: &EvalReport) -> String {
    let mut out = String::new();
    for (name, v) in [
        ("mAP", report.map),
        ("rank1", report.rank1),
        ("rank5", report.rank5),
        ("rank10", report.rank10),
    ] {
        let value = if v.is_nan() { "null".to_string() } else { fmt_f64(v) };
        out.push_str(&format!("{{\"metric\":\"{name}\",\"value\":{value}}}\n"));
    }
    out.push_str(&format!("{{\"metric\":\"scored\",\"value\":{}}}\n", report.scored));
    out.push_str(&format!("{{\"metric\":\"skipped\",\"value\":{}}}\n", report.skipped));
    out
}

/// `alpha,retained,mAP` table.
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,retained,mAP\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", fmt_f64(r.alpha), r.retained, fmt_metric(r.map)));
    }
    out
}

pub fn format_sweep_jsonl(rows: &[SweepRow]) -> String {
    rows.iter()
        .map(|r| {
            let map = if r.map.is_nan() { "null".to_string() } else { fmt_f64(r.map) };
            format!(
                "{{\"alpha\":{},\"retained\":{},\"mAP\":{map}}}\n",
                fmt_f64(r.alpha),
                r.retained
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: usize, identity: usize, camera: usize, mean: Vec<f64>) -> GaussianEmbedding {
        GaussianEmbedding {
            sample_id: id,
            identity,
            camera,
            mean,
            data_uncertainty: 1.0,
            model_uncertainty: 0.1,
        }
    }

    #[test]
    fn ap_worked_value() {
        let ap = average_precision(&[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.833333).abs() < 1e-6);
    }

    #[test]
    fn ap_edges() {
        assert_eq!(average_precision(&[true, true, false, false]), Some(1.0));
        assert_eq!(average_precision(&[false, false, false, true]), Some(0.25));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn cmc_counting() {
        let r = vec![vec![true, false, false], vec![false, false, true]];
        assert_eq!(cmc(&r, 1).unwrap(), Some(0.5));
        assert_eq!(cmc(&r, 3).unwrap(), Some(1.0));
        assert!(cmc(&r, 0).is_err());
        assert_eq!(cmc(&[vec![false]], 1).unwrap(), None);
    }

    #[test]
    fn ties_break_by_sample_id() {
        assert_eq!(rank_order(&[0.5, 0.9, 0.5], &[7, 3, 2]), vec![1, 2, 0]);
    }

    #[test]
    fn same_camera_excluded() {
        let q = emb(0, 1, 0, vec![1.0, 0.0]);
        let gallery = vec![
            emb(1, 1, 0, vec![1.0, 0.0]), // excluded
            emb(2, 2, 1, vec![0.9, 0.1]),
            emb(3, 1, 1, vec![0.5, 0.5]),
        ];
        let r = single_query_eval(&RetrievalRun::single(vec![q], gallery)).unwrap();
        assert_eq!(r.rank1, 0.0);
        assert!((r.map - 0.5).abs() < 1e-15);
        assert_eq!(r.scored, 1);
    }

    #[test]
    fn disjoint_identities_all_skipped() {
        let q = emb(0, 1, 0, vec![1.0, 0.0]);
        let g = vec![emb(1, 2, 1, vec![1.0, 0.0])];
        let r = single_query_eval(&RetrievalRun::single(vec![q], g)).unwrap();
        assert_eq!((r.scored, r.skipped), (0, 1));
        assert!(r.map.is_nan());
    }

    #[test]
    fn empty_gallery_rejected() {
        let q = emb(0, 1, 0, vec![1.0, 0.0]);
        assert!(single_query_eval(&RetrievalRun::single(vec![q], vec![])).is_err());
    }

    #[test]
    fn sweep_needs_alphas() {
        let q = emb(0, 1, 0, vec![1.0, 0.0]);
        let g = vec![emb(1, 1, 1, vec![1.0, 0.0])];
        assert!(risk_sweep(&RetrievalRun::single(vec![q], g), &[]).is_err());
    }

    #[test]
    fn singleton_groups_ignore_weighting() {
        let qs = vec![emb(0, 1, 0, vec![1.0, 0.2]), emb(1, 2, 0, vec![0.1, 1.0])];
        let g = vec![
            emb(2, 1, 1, vec![1.0, 0.0]),
            emb(3, 2, 1, vec![0.0, 1.0]),
            emb(4, 1, 2, vec![0.6, 0.6]),
        ];
        let run = RetrievalRun::multi(qs, g);
        let (a, _) = multi_query_eval(&run, Fusion::Uniform).unwrap();
        let (b, recs) = multi_query_eval(
            &run,
            Fusion::Reliability {
                tau_min: 0.5,
                tau_max: 1.0,
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(recs.iter().all(|r| r.weights == vec![1.0]));
    }

    #[test]
    fn results_file_layout() {
        let r = EvalReport {
            map: 0.5,
            rank1: 1.0,
            rank5: 1.0,
            rank10: 1.0,
            scored: 3,
            skipped: 0,
        };
        let text = format_report(&r);
        assert!(text.starts_with("metric,value\nmAP,5.0000000000000000e-1\n"));
        assert!(format_report_jsonl(&r).lines().count() == 6);
    }
}
