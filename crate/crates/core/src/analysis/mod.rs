//! Statistics on recorded human responses.

pub mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stimuli::Condition;
use stats::{one_sample_t, one_way_anova, pearson_correlation, percentile_sorted, two_sample_t, Anova, Pearson, TTest};

/// One logged button press, enriched by the server with the stimulus's classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub session_id: String,
    pub subject_id: String,
    pub group: String,
    pub trial_index: usize,
    pub stimulus_id: String,
    pub condition: Condition,
    /// `None` when no button was pressed within the response window.
    pub chosen: Option<String>,
    /// Milliseconds from image onset.
    pub rt_ms: Option<f64>,
    pub first_press: bool,
    #[serde(default)]
    pub true_class: Option<String>,
    #[serde(default)]
    pub target_class: Option<String>,
}

impl ResponseRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(rt) = self.rt_ms {
            if !(rt >= 0.0 && rt.is_finite()) {
                return Err(Error::Stats(format!("negative or non-finite RT {rt}")));
            }
        }
        Ok(())
    }

    fn chose_target(&self) -> Option<bool> {
        Some(self.chosen.as_deref()? == self.target_class.as_deref()?)
    }

    fn correct(&self) -> Option<bool> {
        Some(self.chosen.as_deref()? == self.true_class.as_deref()?)
    }
}

/// Reads every `*.jsonl` response log in `dir`, or a single file.
pub fn load_responses(path: &Path) -> Result<Vec<ResponseRecord>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for e in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = e.map_err(|e| Error::io(path, e))?.path();
            if p.extension().is_some_and(|x| x == "jsonl") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut out = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: ResponseRecord =
                serde_json::from_str(line).map_err(|e| Error::json(f.display().to_string(), e))?;
            r.validate()?;
            out.push(r);
        }
    }
    Ok(out)
}

/// The responses that count: first press per (session, subject, trial).
pub fn counted(responses: &[ResponseRecord]) -> Vec<&ResponseRecord> {
    let mut seen = std::collections::HashSet::new();
    responses
        .iter()
        .filter(|r| r.first_press && seen.insert((r.session_id.as_str(), r.subject_id.as_str(), r.trial_index)))
        .collect()
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn subject_means<'a>(pairs: impl Iterator<Item = (&'a str, bool)>) -> BTreeMap<&'a str, f64> {
    let mut acc: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (s, hit) in pairs {
        let e = acc.entry(s).or_default();
        e.0 += indicator(hit);
        e.1 += 1.0;
    }
    acc.into_iter().map(|(s, (h, n))| (s, h / n)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetChoice {
    pub n: usize,
    pub target_chosen: usize,
    pub rate: f64,
    /// Trials pooled across subjects.
    pub trial_test: Option<TTest>,
    /// One mean per subject.
    pub subject_test: Option<TTest>,
}

/// Fraction of false-condition trials where the adversarial target was chosen,
/// tested against 0.5. Timeouts are left out.
pub fn target_choice_rate(responses: &[&ResponseRecord]) -> Result<TargetChoice> {
    if let Some(r) = responses.iter().find(|r| r.condition != Condition::False) {
        return Err(Error::Stats(format!("response to `{}` is not a false trial", r.stimulus_id)));
    }
    let pairs: Vec<(&str, bool)> = responses
        .iter()
        .filter_map(|r| Some((r.subject_id.as_str(), r.chose_target()?)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Stats("no answered false-condition trials".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| indicator(p.1)).collect();
    let hits = pairs.iter().filter(|p| p.1).count();
    let subj: Vec<f64> = subject_means(pairs.iter().copied()).into_values().collect();
    Ok(TargetChoice {
        n: xs.len(),
        target_chosen: hits,
        rate: hits as f64 / xs.len() as f64,
        trial_test: one_sample_t(&xs, 0.5).ok(),
        subject_test: one_sample_t(&subj, 0.5).ok(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAccuracy {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub trial_test: Option<TTest>,
    pub subject_test: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SubjectCounts {
    pub subjects: usize,
    pub adv_below_image: usize,
    pub adv_below_flip: usize,
    pub adv_below_both: usize,
    /// Subjects left out for lacking trials in a compared condition.
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub per_condition: BTreeMap<Condition, ConditionAccuracy>,
    pub comparisons: Vec<Comparison>,
    pub subject_counts: SubjectCounts,
}

/// Accuracy in the image, adv and flip conditions with adv-vs-image and adv-vs-flip tests.
pub fn accuracy_by_condition(responses: &[&ResponseRecord]) -> Result<AccuracyReport> {
    let conds = [Condition::Image, Condition::Adv, Condition::Flip];
    let mut per_trial: BTreeMap<Condition, Vec<(&str, bool)>> = BTreeMap::new();
    for r in responses {
        if !conds.contains(&r.condition) {
            continue;
        }
        if let Some(c) = r.correct() {
            per_trial.entry(r.condition).or_default().push((r.subject_id.as_str(), c));
        }
    }
    if per_trial.is_empty() {
        return Err(Error::Stats("no answered image/adv/flip trials".into()));
    }
    let per_condition = per_trial
        .iter()
        .map(|(&c, v)| {
            let correct = v.iter().filter(|p| p.1).count();
            (
                c,
                ConditionAccuracy {
                    n: v.len(),
                    correct,
                    accuracy: correct as f64 / v.len() as f64,
                },
            )
        })
        .collect();
    let means: BTreeMap<Condition, BTreeMap<&str, f64>> = per_trial
        .iter()
        .map(|(&c, v)| (c, subject_means(v.iter().copied())))
        .collect();
    let empty = Vec::new();
    let empty_means = BTreeMap::new();
    let trials = |c: Condition| -> Vec<f64> {
        per_trial.get(&c).unwrap_or(&empty).iter().map(|p| indicator(p.1)).collect()
    };
    let subj = |c: Condition| means.get(&c).unwrap_or(&empty_means);
    let comparisons = [(Condition::Image, "adv_vs_image"), (Condition::Flip, "adv_vs_flip")]
        .into_iter()
        .map(|(other, name)| Comparison {
            name: name.to_owned(),
            trial_test: two_sample_t(&trials(Condition::Adv), &trials(other)).ok(),
            subject_test: two_sample_t(
                &subj(Condition::Adv).values().copied().collect::<Vec<_>>(),
                &subj(other).values().copied().collect::<Vec<_>>(),
            )
            .ok(),
        })
        .collect();

    let mut subjects: Vec<&str> = means.values().flat_map(|m| m.keys().copied()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let mut counts = SubjectCounts::default();
    for s in subjects {
        let get = |c: Condition| subj(c).get(s).copied();
        match (get(Condition::Adv), get(Condition::Image), get(Condition::Flip)) {
            (Some(a), Some(i), Some(f)) => {
                counts.subjects += 1;
                counts.adv_below_image += usize::from(a < i);
                counts.adv_below_flip += usize::from(a < f);
                counts.adv_below_both += usize::from(a < i && a < f);
            }
            _ => counts.excluded.push(s.to_owned()),
        }
    }
    Ok(AccuracyReport {
        per_condition,
        comparisons,
        subject_counts: counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtBin {
    pub lower_ms: f64,
    pub upper_ms: f64,
    pub n: usize,
    pub mean_rt_ms: f64,
    pub rate: f64,
    pub test: Option<TTest>,
}

/// Target-choice rate within RT terciles (linear-interpolated percentiles;
/// bins are `<= q1`, `(q1, q2]`, `> q2`).
pub fn rt_binned_target_rate(responses: &[&ResponseRecord]) -> Result<Vec<RtBin>> {
    let mut pts: Vec<(f64, bool)> = responses
        .iter()
        .filter(|r| r.condition == Condition::False)
        .filter_map(|r| Some((r.rt_ms?, r.chose_target()?)))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Stats(format!("RT binning needs 3 responses, got {}", pts.len())));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rts: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let q1 = percentile_sorted(&rts, 1.0 / 3.0);
    let q2 = percentile_sorted(&rts, 2.0 / 3.0);
    let bounds = [(f64::NEG_INFINITY, q1), (q1, q2), (q2, f64::INFINITY)];
    Ok(bounds
        .iter()
        .map(|&(lo, hi)| {
            let inside: Vec<&(f64, bool)> = pts.iter().filter(|p| p.0 > lo && p.0 <= hi).collect();
            let xs: Vec<f64> = inside.iter().map(|p| indicator(p.1)).collect();
            let n = xs.len();
            let mean_or_nan = |s: f64| if n == 0 { f64::NAN } else { s / n as f64 };
            RtBin {
                lower_ms: if lo.is_finite() { lo } else { rts[0] },
                upper_ms: if hi.is_finite() { hi } else { rts[rts.len() - 1] },
                n,
                mean_rt_ms: mean_or_nan(inside.iter().map(|p| p.0).sum()),
                rate: mean_or_nan(xs.iter().sum()),
                test: one_sample_t(&xs, 0.5).ok(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub responses: usize,
    pub counted: usize,
    pub target_choice: Option<TargetChoice>,
    pub accuracy: Option<AccuracyReport>,
    pub rt_bins: Option<Vec<RtBin>>,
    /// RTs compared across experiment groups.
    pub rt_anova_by_group: Option<Anova>,
    /// Bin mean RT against bin target-choice rate.
    pub rt_rate_correlation: Option<Pearson>,
    pub notes: Vec<String>,
}

/// Runs every analysis that the data supports; the rest are recorded in `notes`.
pub fn analyze(responses: &[ResponseRecord]) -> AnalysisReport {
    let counted = counted(responses);
    let mut notes = Vec::new();
    fn keep<T>(notes: &mut Vec<String>, name: &str, r: Result<T>) -> Option<T> {
        r.map_err(|e| notes.push(format!("{name}: {e}"))).ok()
    }
    let false_set: Vec<&ResponseRecord> = counted.iter().copied().filter(|r| r.condition == Condition::False).collect();
    let target_choice = keep(&mut notes, "target_choice", target_choice_rate(&false_set));
    let accuracy = keep(&mut notes, "accuracy", accuracy_by_condition(&counted));
    let rt_bins = keep(&mut notes, "rt_bins", rt_binned_target_rate(&false_set));
    let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &counted {
        if let Some(rt) = r.rt_ms {
            by_group.entry(r.group.as_str()).or_default().push(rt);
        }
    }
    let rt_anova_by_group = keep(&mut notes, "rt_anova_by_group", one_way_anova(&by_group.into_values().collect::<Vec<_>>()));
    let rt_rate_correlation = match &rt_bins {
        Some(bins) => {
            let (x, y): (Vec<f64>, Vec<f64>) = bins.iter().map(|b| (b.mean_rt_ms, b.rate)).unzip();
            keep(&mut notes, "rt_rate_correlation", pearson_correlation(&x, &y))
        }
        None => None,
    };
    AnalysisReport {
        responses: responses.len(),
        counted: counted.len(),
        target_choice,
        accuracy,
        rt_bins,
        rt_anova_by_group,
        rt_rate_correlation,
        notes,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AnalysisReport {
    /// `(file name, contents)` for the per-panel CSV tables.
    pub fn csv_tables(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if let Some(a) = &self.accuracy {
            let mut s = String::from("condition,n,correct,accuracy\n");
            for (c, v) in &a.per_condition {
                let _ = writeln!(s, "{c},{},{},{}", v.n, v.correct, v.accuracy);
            }
            out.push(("accuracy_by_condition.csv", s));
        }
        if let Some(t) = &self.target_choice {
            let mut s = String::from("n,target_chosen,rate,trial_t,trial_p,subject_t,subject_p\n");
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                t.n,
                t.target_chosen,
                t.rate,
                opt(t.trial_test.map(|x| x.t)),
                opt(t.trial_test.map(|x| x.p)),
                opt(t.subject_test.map(|x| x.t)),
                opt(t.subject_test.map(|x| x.p))
            );
            out.push(("target_choice.csv", s));
        }
        if let Some(bins) = &self.rt_bins {
            let mut s = String::from("bin,lower_ms,upper_ms,n,mean_rt_ms,rate,t,p\n");
            for (i, b) in bins.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{i},{},{},{},{},{},{},{}",
                    b.lower_ms,
                    b.upper_ms,
                    b.n,
                    b.mean_rt_ms,
                    b.rate,
                    opt(b.test.map(|x| x.t)),
                    opt(b.test.map(|x| x.p))
                );
            }
            out.push(("rt_bins.csv", s));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn resp(subject: &str, condition: Condition, chosen: &str, rt: f64) -> ResponseRecord {
        ResponseRecord {
            session_id: format!("s-{subject}"),
            subject_id: subject.into(),
            group: "pets".into(),
            trial_index: 0,
            stimulus_id: "x".into(),
            condition,
            chosen: Some(chosen.into()),
            rt_ms: Some(rt),
            first_press: true,
            true_class: (condition != Condition::False).then(|| "dog".into()),
            target_class: (condition != Condition::Image).then(|| "cat".into()),
        }
    }

    #[test]
    fn all_target_and_alternating() {
        let all: Vec<ResponseRecord> = (0..10).map(|i| resp("a", Condition::False, "cat", i as f64)).collect();
        let refs: Vec<&ResponseRecord> = all.iter().collect();
        assert_eq!(target_choice_rate(&refs).unwrap().rate, 1.0);
        let alt: Vec<ResponseRecord> = (0..10)
            .map(|i| resp("a", Condition::False, if i % 2 == 0 { "cat" } else { "dog" }, 1.0))
            .collect();
        let refs: Vec<&ResponseRecord> = alt.iter().collect();
        let t = target_choice_rate(&refs).unwrap();
        assert_eq!(t.rate, 0.5);
        assert_eq!(t.trial_test.unwrap().t, 0.0);
        assert_eq!(t.trial_test.unwrap().p, 1.0);
        assert!(target_choice_rate(&[]).is_err());
    }

    #[test]
    fn wrong_condition_rejected() {
        let r = resp("a", Condition::Adv, "cat", 1.0);
        assert!(target_choice_rate(&[&r]).is_err());
    }

    #[test]
    fn all_correct_gives_unit_accuracy() {
        let rs: Vec<ResponseRecord> = [Condition::Image, Condition::Adv, Condition::Flip]
            .iter()
            .flat_map(|&c| (0..4).map(move |i| resp(if i < 2 { "a" } else { "b" }, c, "dog", 300.0)))
            .collect();
        let refs: Vec<&ResponseRecord> = rs.iter().collect();
        let a = accuracy_by_condition(&refs).unwrap();
        assert!(a.per_condition.values().all(|v| v.accuracy == 1.0));
        for c in &a.comparisons {
            assert_eq!(c.trial_test.unwrap().p, 1.0);
        }
        assert_eq!(a.subject_counts.subjects, 2);
        assert_eq!(a.subject_counts.adv_below_image, 0);
    }

    #[test]
    fn subject_count_table() {
        let mut rs = Vec::new();
        // Subjects a and b do worse on adv; c does not.
        for (s, adv_correct) in [("a", false), ("b", false), ("c", true)] {
            rs.push(resp(s, Condition::Image, "dog", 1.0));
            rs.push(resp(s, Condition::Flip, "dog", 1.0));
            rs.push(resp(s, Condition::Adv, if adv_correct { "dog" } else { "cat" }, 1.0));
        }
        rs.push(resp("d", Condition::Image, "dog", 1.0));
        let refs: Vec<&ResponseRecord> = rs.iter().collect();
        let a = accuracy_by_condition(&refs).unwrap();
        assert_eq!(a.subject_counts.adv_below_image, 2);
        assert_eq!(a.subject_counts.adv_below_both, 2);
        assert_eq!(a.subject_counts.excluded, vec!["d".to_string()]);
    }

    #[test]
    fn fast_third_only() {
        let rs: Vec<ResponseRecord> = (1..=99)
            .map(|i| resp("a", Condition::False, if i <= 33 { "cat" } else { "dog" }, f64::from(i)))
            .collect();
        let refs: Vec<&ResponseRecord> = rs.iter().collect();
        let bins = rt_binned_target_rate(&refs).unwrap();
        assert_eq!(bins.iter().map(|b| b.n).collect::<Vec<_>>(), vec![33, 33, 33]);
        assert_eq!(bins[0].rate, 1.0);
        assert_eq!(bins[1].rate, 0.0);
        assert_eq!(bins[2].rate, 0.0);
        assert!(rt_binned_target_rate(&refs[..2]).is_err());
    }

    #[test]
    fn duplicates_not_counted() {
        let a = resp("a", Condition::False, "cat", 1.0);
        let mut b = a.clone();
        b.chosen = Some("dog".into());
        let mut c = a.clone();
        c.first_press = false;
        let all = vec![a.clone(), b, c];
        let kept = counted(&all);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0], &a);
    }

    #[test]
    fn timeouts_excluded() {
        let mut r = resp("a", Condition::False, "cat", 1.0);
        r.chosen = None;
        assert!(target_choice_rate(&[&r]).is_err());
        let mut bad = resp("a", Condition::False, "cat", 1.0);
        bad.rt_ms = Some(-1.0);
        assert!(bad.validate().is_err());
    }
}
