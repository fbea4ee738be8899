//! Verification metrics over labeled trial scores: DET points, EER,
//! normalized minimum and actual detection cost, and the evaluation report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::Score;
use crate::data::{Condition, Trial};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScores {
    pub targets: Vec<f64>,
    pub nontargets: Vec<f64>,
}

impl LabeledScores {
    pub fn new(targets: Vec<f64>, nontargets: Vec<f64>) -> Result<Self> {
        let s = Self { targets, nontargets };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.targets.is_empty() || self.nontargets.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "need target and nontarget scores, got {} and {}",
                self.targets.len(),
                self.nontargets.len()
            )));
        }
        if self.targets.iter().chain(&self.nontargets).any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcfParams {
    pub p_target: f64,
    #[serde(default = "one")]
    pub c_miss: f64,
    #[serde(default = "one")]
    pub c_fa: f64,
}

fn one() -> f64 {
    1.0
}

impl DcfParams {
    pub fn new(p_target: f64) -> Self {
        Self {
            p_target,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0 && self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid cost parameters {self:?}")));
        }
        Ok(())
    }

    /// Bayes decision threshold for log-likelihood-ratio scores.
    pub fn threshold(&self) -> f64 {
        (self.c_fa * (1.0 - self.p_target) / (self.c_miss * self.p_target)).ln()
    }

    pub fn normalized_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        let a = self.c_miss * self.p_target;
        let b = self.c_fa * (1.0 - self.p_target);
        (a * p_miss + b * p_fa) / a.min(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

/// Operating points at every distinct score, plus `+inf`. A trial is
/// accepted when its score is at or above the threshold, so the first point
/// accepts everything and the last rejects everything.
pub fn det_points(scores: &LabeledScores) -> Result<Vec<DetPoint>> {
    scores.check()?;
    let mut all: Vec<(f64, bool)> = scores
        .targets
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nontargets.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nt = scores.targets.len() as f64;
    let nn = scores.nontargets.len() as f64;
    let mut points = Vec::new();
    let (mut miss, mut fa_rejected) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        points.push(DetPoint {
            threshold,
            p_fa: (nn - fa_rejected as f64) / nn,
            p_miss: miss as f64 / nt,
        });
        while i < all.len() && all[i].0 == threshold {
            if all[i].1 {
                miss += 1;
            } else {
                fa_rejected += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_fa: 0.0,
        p_miss: 1.0,
    });
    Ok(points)
}

/// Equal error rate on a DET sweep, interpolating linearly between the two
/// points that bracket the crossing of `p_miss` and `p_fa`.
pub fn eer_from_points(points: &[DetPoint]) -> f64 {
    let k = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("the last point has p_miss = 1 and p_fa = 0");
    let hi = points[k];
    if k == 0 || hi.p_miss == hi.p_fa {
        return hi.p_miss;
    }
    let lo = points[k - 1];
    let d_lo = lo.p_fa - lo.p_miss;
    let d_hi = hi.p_fa - hi.p_miss;
    let w = d_lo / (d_lo - d_hi);
    lo.p_miss + w * (hi.p_miss - lo.p_miss)
}

pub fn eer(scores: &LabeledScores) -> Result<f64> {
    Ok(eer_from_points(&det_points(scores)?))
}

pub fn min_dcf_from_points(points: &[DetPoint], p: &DcfParams) -> f64 {
    points
        .iter()
        .map(|pt| p.normalized_cost(pt.p_miss, pt.p_fa))
        .fold(f64::INFINITY, f64::min)
}

pub fn min_dcf(scores: &LabeledScores, p: &DcfParams) -> Result<f64> {
    p.validate()?;
    Ok(min_dcf_from_points(&det_points(scores)?, p))
}

/// Normalized cost at the Bayes threshold; not clipped, so badly calibrated
/// scores can exceed 1.
pub fn act_dcf(scores: &LabeledScores, p: &DcfParams) -> Result<f64> {
    scores.check()?;
    p.validate()?;
    let theta = p.threshold();
    let p_miss = scores.targets.iter().filter(|&&s| s < theta).count() as f64 / scores.targets.len() as f64;
    let p_fa = scores.nontargets.iter().filter(|&&s| s >= theta).count() as f64 / scores.nontargets.len() as f64;
    Ok(p.normalized_cost(p_miss, p_fa))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Priors of the reported minimum costs.
    pub p_targets: Vec<f64>,
    /// Prior of the actual cost.
    pub act_p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    /// Ceiling applied to the clipped actual-cost column.
    pub act_dcf_ceiling: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            p_targets: vec![1e-2, 1e-3],
            act_p_target: 1e-2,
            c_miss: 1.0,
            c_fa: 1.0,
            act_dcf_ceiling: 1.0,
        }
    }
}

impl MetricsConfig {
    fn params(&self, p_target: f64) -> DcfParams {
        DcfParams {
            p_target,
            c_miss: self.c_miss,
            c_fa: self.c_fa,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub system: String,
    /// `all` or a condition name.
    pub condition: String,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub eer: f64,
    pub min_dcf: Vec<f64>,
    pub act_dcf: f64,
}

pub fn summarize(system: &str, condition: &str, scores: &LabeledScores, cfg: &MetricsConfig) -> Result<ReportRow> {
    let points = det_points(scores)?;
    let min_dcf = cfg
        .p_targets
        .iter()
        .map(|&p| {
            let p = cfg.params(p);
            p.validate()?;
            Ok(min_dcf_from_points(&points, &p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReportRow {
        system: system.to_string(),
        condition: condition.to_string(),
        n_target: scores.targets.len(),
        n_nontarget: scores.nontargets.len(),
        eer: eer_from_points(&points),
        min_dcf,
        act_dcf: act_dcf(scores, &cfg.params(cfg.act_p_target))?,
    })
}

/// Joins scores with the trial keys and returns labeled scores overall and
/// per condition of the test utterance.
pub fn split_by_condition(
    scores: &[Score],
    trials: &[Trial],
    utt2cond: &BTreeMap<String, Condition>,
) -> Result<(LabeledScores, BTreeMap<Condition, LabeledScores>)> {
    let lookup: HashMap<(&str, &str), f64> = scores
        .iter()
        .map(|s| ((s.enroll.as_str(), s.test.as_str()), s.score))
        .collect();
    let mut all = LabeledScores {
        targets: Vec::new(),
        nontargets: Vec::new(),
    };
    let mut per: BTreeMap<Condition, LabeledScores> = BTreeMap::new();
    for t in trials {
        let score = *lookup
            .get(&(t.enroll.as_str(), t.test.as_str()))
            .ok_or_else(|| Error::Missing(format!("score for trial {} {}", t.enroll, t.test)))?;
        let cond = *utt2cond
            .get(&t.test)
            .ok_or_else(|| Error::Missing(format!("condition of {}", t.test)))?;
        let bucket = per.entry(cond).or_insert_with(|| LabeledScores {
            targets: Vec::new(),
            nontargets: Vec::new(),
        });
        if t.target {
            all.targets.push(score);
            bucket.targets.push(score);
        } else {
            all.nontargets.push(score);
            bucket.nontargets.push(score);
        }
    }
    Ok((all, per))
}

/// Overall row followed by one row per condition that has both trial types.
pub fn evaluate_system(
    system: &str,
    scores: &[Score],
    trials: &[Trial],
    utt2cond: &BTreeMap<String, Condition>,
    cfg: &MetricsConfig,
) -> Result<Vec<ReportRow>> {
    let (all, per) = split_by_condition(scores, trials, utt2cond)?;
    let mut rows = vec![summarize(system, "all", &all, cfg)?];
    for (cond, s) in per {
        if !s.targets.is_empty() && !s.nontargets.is_empty() {
            rows.push(summarize(system, cond.name(), &s, cfg)?);
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub p_targets: Vec<f64>,
    pub act_dcf_ceiling: f64,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn new(cfg: &MetricsConfig) -> Self {
        Self {
            p_targets: cfg.p_targets.clone(),
            act_dcf_ceiling: cfg.act_dcf_ceiling,
            rows: Vec::new(),
        }
    }

    pub fn find(&self, system: &str, condition: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.system == system && r.condition == condition)
    }

    /// Systems as rows, conditions as column groups.
    pub fn to_text(&self) -> String {
        let mut conditions: Vec<&str> = Vec::new();
        let mut systems: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !conditions.contains(&r.condition.as_str()) {
                conditions.push(&r.condition);
            }
            if !systems.contains(&r.system.as_str()) {
                systems.push(&r.system);
            }
        }
        let mut metric_names = vec!["EER(%)".to_string()];
        metric_names.extend(self.p_targets.iter().map(|p| format!("DCF({})", prior_label(*p))));
        metric_names.push("actDCF".into());
        let width = 11;
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "");
        for c in &conditions {
            let _ = write!(out, "| {:<w$}", c, w = width * metric_names.len());
        }
        out.push('\n');
        let _ = write!(out, "{:<12}", "system");
        for _ in &conditions {
            out.push_str("| ");
            for m in &metric_names {
                let _ = write!(out, "{m:<width$}");
            }
        }
        out.push('\n');
        for s in &systems {
            let _ = write!(out, "{s:<12}");
            for c in &conditions {
                out.push_str("| ");
                match self.find(s, c) {
                    Some(r) => {
                        let _ = write!(out, "{:<width$.2}", 100.0 * r.eer);
                        for v in &r.min_dcf {
                            let _ = write!(out, "{v:<width$.4}");
                        }
                        let clipped = r.act_dcf.min(self.act_dcf_ceiling);
                        let _ = write!(out, "{clipped:<width$.4}");
                    }
                    None => {
                        for _ in &metric_names {
                            let _ = write!(out, "{:<width$}", "-");
                        }
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// One `key=value` line per row; `act_dcf` is unclipped.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = write!(
                out,
                "system={} condition={} n_target={} n_nontarget={} eer={:.6}",
                r.system, r.condition, r.n_target, r.n_nontarget, r.eer
            );
            for (p, v) in self.p_targets.iter().zip(&r.min_dcf) {
                let _ = write!(out, " dcf_{}={v:.6}", prior_label(*p));
            }
            let _ = writeln!(
                out,
                " act_dcf={:.6} act_dcf_clipped={:.6}",
                r.act_dcf,
                r.act_dcf.min(self.act_dcf_ceiling)
            );
        }
        out
    }
}

fn prior_label(p: f64) -> String {
    format!("{p:.0e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ls(t: &[f64], n: &[f64]) -> LabeledScores {
        LabeledScores::new(t.to_vec(), n.to_vec()).unwrap()
    }

    /// Operating points at one threshold below all scores, every midpoint
    /// between distinct scores, and one above all scores.
    fn oracle_points(s: &LabeledScores) -> Vec<(f64, f64)> {
        let mut v: Vec<f64> = s.targets.iter().chain(&s.nontargets).copied().collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        let mut thresholds = vec![v[0] - 1.0];
        thresholds.extend(v.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        thresholds.push(v[v.len() - 1] + 1.0);
        thresholds
            .iter()
            .map(|&th| {
                let miss = s.targets.iter().filter(|&&x| x < th).count() as f64 / s.targets.len() as f64;
                let fa = s.nontargets.iter().filter(|&&x| x > th).count() as f64 / s.nontargets.len() as f64;
                (fa, miss)
            })
            .collect()
    }

    fn oracle_eer(points: &[(f64, f64)]) -> f64 {
        for w in points.windows(2) {
            let ((fa0, m0), (fa1, m1)) = (w[0], w[1]);
            if m0 == fa0 {
                return m0;
            }
            if m1 >= fa1 {
                if m1 == fa1 {
                    return m1;
                }
                let w = (fa0 - m0) / ((fa0 - m0) - (fa1 - m1));
                return m0 + w * (m1 - m0);
            }
        }
        unreachable!()
    }

    fn random_set(rng: &mut ChaCha8Rng) -> LabeledScores {
        let n = rng.random_range(2..=200);
        let nt = rng.random_range(1..n);
        let ties = rng.random_bool(0.3);
        let mut draw = |shift: f64| {
            let x: f64 = rng.random::<f64>() * 4.0 + shift;
            if ties { (x * 2.0).round() / 2.0 } else { x }
        };
        let targets = (0..nt).map(|_| draw(1.0)).collect();
        let nontargets = (0..n - nt).map(|_| draw(0.0)).collect();
        LabeledScores::new(targets, nontargets).unwrap()
    }

    #[test]
    fn examples() {
        assert_eq!(eer(&ls(&[3.0, 4.0], &[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(eer(&ls(&[1.0, 3.0], &[2.0, 4.0])).unwrap(), 0.5);
        assert_eq!(eer(&ls(&[1.0, 2.0], &[3.0, 4.0])).unwrap(), 1.0);
        let p = DcfParams::new(0.01);
        assert_eq!(min_dcf(&ls(&[3.0], &[1.0]), &p).unwrap(), 0.0);
        assert_eq!(min_dcf(&ls(&[1.0, 1.0], &[1.0]), &p).unwrap(), 1.0);
        let pts = det_points(&ls(&[2.0], &[1.0])).unwrap();
        assert_eq!((pts[0].p_fa, pts[0].p_miss), (1.0, 0.0));
        assert_eq!((pts[1].p_fa, pts[1].p_miss), (0.0, 0.0));
        assert!(pts[0].threshold < 1.5 && 1.5 <= pts[1].threshold);
        assert_eq!(pts.last().map(|p| (p.p_fa, p.p_miss)), Some((0.0, 1.0)));
    }

    #[test]
    fn act_dcf_examples() {
        let p = DcfParams::new(0.01);
        assert!((p.threshold() - 99f64.ln()).abs() < 1e-15);
        assert_eq!(act_dcf(&ls(&[20.0], &[-20.0]), &p).unwrap(), 0.0);
        let v = act_dcf(&ls(&[5.0], &[4.9]), &p).unwrap();
        assert!((v - 99.0).abs() < 1e-9);
        // A shift keeps the minimum cost but moves the actual one.
        let base = ls(&[5.0, 6.0], &[0.0, 1.0]);
        let shifted = ls(&[1.0, 2.0], &[-4.0, -3.0]);
        assert_eq!(min_dcf(&base, &p).unwrap(), min_dcf(&shifted, &p).unwrap());
        assert_ne!(act_dcf(&base, &p).unwrap(), act_dcf(&shifted, &p).unwrap());
    }

    #[test]
    fn empty_or_non_finite_inputs_are_errors() {
        assert!(LabeledScores::new(vec![], vec![1.0]).is_err());
        assert!(LabeledScores::new(vec![1.0], vec![f64::NAN]).is_err());
        let s = LabeledScores {
            targets: vec![1.0],
            nontargets: vec![],
        };
        assert!(det_points(&s).is_err());
        assert!(min_dcf(&ls(&[1.0], &[0.0]), &DcfParams::new(1.0)).is_err());
    }

    #[test]
    fn agrees_with_exhaustive_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = random_set(&mut rng);
            let pts = det_points(&s).unwrap();
            let oracle = oracle_points(&s);
            let ours: Vec<(f64, f64)> = pts.iter().map(|p| (p.p_fa, p.p_miss)).collect();
            assert_eq!(ours, oracle);
            assert!((eer(&s).unwrap() - oracle_eer(&oracle)).abs() < 1e-12);
            for p_tar in [0.01, 0.001, 0.3] {
                let p = DcfParams::new(p_tar);
                let brute = oracle
                    .iter()
                    .map(|&(fa, miss)| p.normalized_cost(miss, fa))
                    .fold(f64::INFINITY, f64::min);
                let m = min_dcf(&s, &p).unwrap();
                assert!((m - brute).abs() < 1e-12);
                assert!(act_dcf(&s, &p).unwrap() >= m);
                assert!(m <= 1.0);
            }
            for w in pts.windows(2) {
                assert!(w[1].p_miss >= w[0].p_miss && w[1].p_fa <= w[0].p_fa);
            }
        }
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_maps_and_permutation(
            t in proptest::collection::vec(-5.0f64..5.0, 1..40),
            n in proptest::collection::vec(-5.0f64..5.0, 1..40),
            rot in 0usize..40,
        ) {
            let s = ls(&t, &n);
            let p = DcfParams::new(0.01);
            let mapped = ls(
                &t.iter().map(|x| x.exp()).collect::<Vec<_>>(),
                &n.iter().map(|x| x.exp()).collect::<Vec<_>>(),
            );
            prop_assert_eq!(eer(&s).unwrap(), eer(&mapped).unwrap());
            prop_assert_eq!(min_dcf(&s, &p).unwrap(), min_dcf(&mapped, &p).unwrap());
            let mut tp = t.clone();
            tp.rotate_left(rot % t.len());
            let mut np = n.clone();
            np.reverse();
            let perm = ls(&tp, &np);
            prop_assert_eq!(eer(&s).unwrap(), eer(&perm).unwrap());
            prop_assert_eq!(act_dcf(&s, &p).unwrap(), act_dcf(&perm, &p).unwrap());
            let e = eer(&s).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
        }
    }

    #[test]
    fn report_has_overall_and_condition_rows() {
        let trials = vec![
            Trial { enroll: "a".into(), test: "b".into(), target: true },
            Trial { enroll: "a".into(), test: "c".into(), target: false },
            Trial { enroll: "b".into(), test: "d".into(), target: true },
            Trial { enroll: "c".into(), test: "e".into(), target: false },
        ];
        let scores: Vec<Score> = [("a", "b", 2.0), ("a", "c", 1.0), ("b", "d", 0.5), ("c", "e", 1.5)]
            .iter()
            .map(|&(e, t, s)| Score { enroll: e.into(), test: t.into(), score: s })
            .collect();
        let cond: BTreeMap<String, Condition> = [
            ("b", Condition::Clean),
            ("c", Condition::Clean),
            ("d", Condition::Noise),
            ("e", Condition::Noise),
        ]
        .iter()
        .map(|&(u, c)| (u.to_string(), c))
        .collect();
        let cfg = MetricsConfig::default();
        let mut report = Report::new(&cfg);
        report.rows = evaluate_system("sys", &scores, &trials, &cond, &cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.find("sys", "clean").unwrap().eer, 0.0);
        let direct = eer(&ls(&[2.0, 0.5], &[1.0, 1.5])).unwrap();
        assert_eq!(report.find("sys", "all").unwrap().eer, direct);
        let text = report.to_text();
        assert!(text.contains("DCF(1e-2)") && text.contains("DCF(1e-3)") && text.contains("actDCF"));
        let kv = report.to_kv();
        assert_eq!(kv.lines().count(), 3);
        assert!(kv.contains("condition=noise"));
        assert!(evaluate_system("sys", &scores[..3], &trials, &cond, &cfg).is_err());
    }
}
