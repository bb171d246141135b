//! Summaries recomputed from trial records alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{auc, dsr, eer, mean_std, roc};

use super::records::{Condition, TrialRecord};

/// Attack column value for the ignorant setting.
pub const NO_ATTACK: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub substitutes: String,
    pub model: String,
    pub method: String,
    pub condition: Condition,
    pub attack: String,
    pub trials: usize,
    pub dsr: f64,
    pub mcd_mean: Option<f64>,
    pub mcd_std: Option<f64>,
    pub wa_mean: Option<f64>,
    pub wa_std: Option<f64>,
    /// Share of targeted trials identified as their target, percent.
    pub target_rate: Option<f64>,
    pub distinct_predicted: usize,
    /// Genuine-imposter EER of the group, percent.
    pub eer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdRow {
    pub substitutes: String,
    pub model: String,
    pub ratio: f64,
    pub auc: f64,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub td: Vec<TdRow>,
}

type GroupKey = (String, String, String, Condition, String);

fn key(r: &TrialRecord) -> GroupKey {
    (
        r.substitutes.clone(),
        r.model.clone(),
        r.method.clone(),
        r.condition,
        r.attack_kind.clone().unwrap_or_else(|| NO_ATTACK.into()),
    )
}

fn opt_stats(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        (None, None)
    } else {
        let m = mean_std(v);
        (Some(m.mean), Some(m.std))
    }
}

/// Genuine and imposter scores of a record set.
pub fn trial_scores<'a>(records: impl IntoIterator<Item = &'a TrialRecord>) -> (Vec<f64>, Vec<f64>) {
    let (mut g, mut i) = (vec![], vec![]);
    for r in records {
        g.push(r.scores.genuine);
        i.extend_from_slice(&r.scores.imposter);
    }
    (g, i)
}

pub fn summarize(records: &[TrialRecord]) -> Result<Summary> {
    let mut groups: BTreeMap<GroupKey, Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        r.check()?;
        groups.entry(key(r)).or_default().push(r);
    }
    let mut rows = Vec::new();
    for ((substitutes, model, method, condition, attack), rs) in &groups {
        let mcd: Vec<f64> = rs.iter().filter_map(|r| r.mcd_db).collect();
        let wa: Vec<f64> = rs.iter().filter_map(|r| r.wa_percent).collect();
        let targeted: Vec<bool> = rs
            .iter()
            .filter_map(|r| r.target_label.map(|t| t == r.predicted_label))
            .collect();
        let (g, i) = trial_scores(rs.iter().copied());
        let (mcd_mean, mcd_std) = opt_stats(&mcd);
        let (wa_mean, wa_std) = opt_stats(&wa);
        rows.push(SummaryRow {
            substitutes: substitutes.clone(),
            model: model.clone(),
            method: method.clone(),
            condition: *condition,
            attack: attack.clone(),
            trials: rs.len(),
            dsr: dsr(rs.iter().map(|r| r.success))?,
            mcd_mean,
            mcd_std,
            wa_mean,
            wa_std,
            target_rate: if targeted.is_empty() { None } else { Some(dsr(targeted.iter().copied())?) },
            distinct_predicted: rs.iter().map(|r| r.predicted_label).collect::<BTreeSet<_>>().len(),
            eer: if i.is_empty() { None } else { Some(100.0 * eer(&g, &i)?) },
        });
    }
    Ok(Summary { rows, td: td_rows(records)? })
}

/// TD AUC per swept ratio: de-identified ignorant-setting trials are the
/// positives, original trials of the same model the negatives.
pub fn td_rows(records: &[TrialRecord]) -> Result<Vec<TdRow>> {
    let mut neg: BTreeMap<&str, Vec<&TrialRecord>> = BTreeMap::new();
    let mut pos: BTreeMap<(&str, &str), Vec<&TrialRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.scores.td.is_empty() && r.attack_kind.is_none()) {
        match r.condition {
            Condition::Original => neg.entry(&r.model).or_default().push(r),
            Condition::Deidentified => pos.entry((&r.substitutes, &r.model)).or_default().push(r),
        }
    }
    let mut out = Vec::new();
    for ((subs, model), p) in pos {
        let Some(n) = neg.get(model) else { continue };
        let k = p[0].scores.td.len();
        let ratios: Vec<f64> = p[0].scores.td.iter().map(|t| t.ratio).collect();
        if p.iter()
            .chain(n.iter())
            .any(|r| r.scores.td.iter().map(|t| t.ratio).ne(ratios.iter().copied()))
        {
            return Err(Error::Data(format!("TD split ratios of {subs} → {model} differ between trials")));
        }
        let mut rows: Vec<TdRow> = (0..k)
            .map(|j| {
                let a: Vec<f64> = p.iter().map(|r| r.scores.td[j].score).collect();
                let b: Vec<f64> = n.iter().map(|r| r.scores.td[j].score).collect();
                Ok(TdRow {
                    substitutes: subs.to_string(),
                    model: model.to_string(),
                    ratio: ratios[j],
                    auc: auc(&a, &b)?,
                    best: false,
                })
            })
            .collect::<Result<_>>()?;
        let mut best = 0;
        for (j, r) in rows.iter().enumerate() {
            if r.auc > rows[best].auc {
                best = j;
            }
        }
        if let Some(r) = rows.get_mut(best) {
            r.best = true;
        }
        out.append(&mut rows);
    }
    Ok(out)
}

/// `substitutes × model` DSR of the ignorant setting.
pub fn transfer_matrix(summary: &Summary) -> (Vec<String>, Vec<String>, Vec<Vec<Option<f64>>>) {
    let rows: Vec<&SummaryRow> = summary
        .rows
        .iter()
        .filter(|r| r.condition == Condition::Deidentified && r.attack == NO_ATTACK)
        .collect();
    let subs: Vec<String> = rows.iter().map(|r| r.substitutes.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let models: Vec<String> = rows.iter().map(|r| r.model.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let cells = subs
        .iter()
        .map(|s| {
            models
                .iter()
                .map(|m| rows.iter().find(|r| &r.substitutes == s && &r.model == m).map(|r| r.dsr))
                .collect()
        })
        .collect();
    (subs, models, cells)
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// `summary.csv`, `td.csv`, `transfer.csv`, `scores_hist.csv` and the ROC
/// of every best TD split.
pub fn write_summary(dir: &Path, summary: &Summary, records: &[TrialRecord]) -> Result<()> {
    write_rows(&dir.join("summary.csv"), &summary.rows)?;
    write_rows(&dir.join("td.csv"), &summary.td)?;
    let (subs, models, cells) = transfer_matrix(summary);
    let path = dir.join("transfer.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header = vec!["substitutes".to_string()];
    header.extend(models.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for (s, row) in subs.iter().zip(&cells) {
        let mut rec = vec![s.clone()];
        rec.extend(row.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_rows(&dir.join("scores_hist.csv"), &score_histograms(records, 40))?;
    write_rows(&dir.join("td_roc.csv"), &td_roc(records, summary)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub model: String,
    pub condition: Condition,
    pub trial: String,
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Genuine/imposter score histograms over [-1, 1] per model and condition,
/// from the ignorant-setting records.
pub fn score_histograms(records: &[TrialRecord], bins: usize) -> Vec<HistogramRow> {
    let mut groups: BTreeMap<(String, Condition), Vec<&TrialRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.attack_kind.is_none()) {
        groups.entry((r.model.clone(), r.condition)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((model, condition), rs) in groups {
        let (g, i) = trial_scores(rs);
        for (trial, scores) in [("genuine", g), ("imposter", i)] {
            let mut counts = vec![0usize; bins];
            for s in scores {
                let b = (((s + 1.0) / 2.0 * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
                counts[b] += 1;
            }
            for (b, count) in counts.into_iter().enumerate() {
                out.push(HistogramRow {
                    model: model.clone(),
                    condition,
                    trial: trial.into(),
                    low: -1.0 + 2.0 * b as f64 / bins as f64,
                    high: -1.0 + 2.0 * (b + 1) as f64 / bins as f64,
                    count,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocRow {
    pub substitutes: String,
    pub model: String,
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

fn td_roc(records: &[TrialRecord], summary: &Summary) -> Result<Vec<RocRow>> {
    let mut out = Vec::new();
    for (idx, best) in summary.td.iter().enumerate().filter(|(_, r)| r.best) {
        // Column of the best ratio within its block.
        let j = summary.td[..=idx]
            .iter()
            .rev()
            .take_while(|r| r.substitutes == best.substitutes && r.model == best.model)
            .count()
            - 1;
        let sel = |c: Condition, subs: Option<&str>| -> Vec<f64> {
            records
                .iter()
                .filter(|r| r.attack_kind.is_none() && r.condition == c && r.model == best.model)
                .filter(|r| subs.is_none_or(|s| r.substitutes == s))
                .filter_map(|r| r.scores.td.get(j).map(|t| t.score))
                .collect()
        };
        let pos = sel(Condition::Deidentified, Some(&best.substitutes));
        let neg = sel(Condition::Original, None);
        for p in roc(&pos, &neg)? {
            out.push(RocRow {
                substitutes: best.substitutes.clone(),
                model: best.model.clone(),
                threshold: p.threshold,
                tpr: p.tpr,
                fpr: p.fpr,
            });
        }
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

fn fmt_pm(m: Option<f64>, s: Option<f64>) -> String {
    match (m, s) {
        (Some(m), Some(s)) => format!("{m:.2}±{s:.2}"),
        _ => "-".into(),
    }
}

fn table(head: &[&str], rows: &[Vec<String>]) -> String {
    let mut w: Vec<usize> = head.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| -> String {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let pad = w[i] - c.chars().count();
            let _ = write!(s, "{}{}  ", c, " ".repeat(pad));
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(head.iter().map(|h| h.to_string()).collect());
    out += &line(w.iter().map(|n| "-".repeat(*n)).collect());
    for r in rows {
        out += &line(r.clone());
    }
    out
}

/// Plain-text tables: methods (DSR, MCD, WA), per-model original vs
/// de-identified, attack settings per model, and TD best splits.
pub fn render_report(summary: &Summary) -> String {
    let ignorant: Vec<&SummaryRow> = summary
        .rows
        .iter()
        .filter(|r| r.condition == Condition::Deidentified && r.attack == NO_ATTACK)
        .collect();
    let mut out = String::new();
    out += "De-identification by method\n";
    out += &table(
        &["method", "substitutes", "model", "trials", "DSR %", "MCD dB", "WA %", "target %"],
        &ignorant
            .iter()
            .map(|r| {
                vec![
                    r.method.clone(),
                    r.substitutes.clone(),
                    r.model.clone(),
                    r.trials.to_string(),
                    format!("{:.2}", r.dsr),
                    fmt_pm(r.mcd_mean, r.mcd_std),
                    fmt_pm(r.wa_mean, r.wa_std),
                    fmt_opt(r.target_rate, 2),
                ]
            })
            .collect::<Vec<_>>(),
    );
    out += "\nOriginal vs de-identified\n";
    let originals: BTreeMap<&str, &SummaryRow> = summary
        .rows
        .iter()
        .filter(|r| r.condition == Condition::Original && r.attack == NO_ATTACK)
        .map(|r| (r.model.as_str(), r))
        .collect();
    out += &table(
        &["model", "substitutes", "original DSR %", "DSR %", "original WA %", "WA %", "original EER %", "EER %"],
        &ignorant
            .iter()
            .map(|r| {
                let o = originals.get(r.model.as_str());
                vec![
                    r.model.clone(),
                    r.substitutes.clone(),
                    fmt_opt(o.map(|o| o.dsr), 2),
                    format!("{:.2}", r.dsr),
                    fmt_opt(o.and_then(|o| o.wa_mean), 2),
                    fmt_opt(r.wa_mean, 2),
                    fmt_opt(o.and_then(|o| o.eer), 2),
                    fmt_opt(r.eer, 2),
                ]
            })
            .collect::<Vec<_>>(),
    );
    let attacked: Vec<&SummaryRow> = summary
        .rows
        .iter()
        .filter(|r| r.condition == Condition::Deidentified)
        .collect();
    if attacked.iter().any(|r| r.attack != NO_ATTACK) {
        out += "\nAdversary settings (DSR %)\n";
        out += &table(
            &["attack", "substitutes", "model", "trials", "DSR %"],
            &attacked
                .iter()
                .map(|r| {
                    vec![
                        r.attack.clone(),
                        r.substitutes.clone(),
                        r.model.clone(),
                        r.trials.to_string(),
                        format!("{:.2}", r.dsr),
                    ]
                })
                .collect::<Vec<_>>(),
        );
    }
    let best: Vec<&TdRow> = summary.td.iter().filter(|r| r.best).collect();
    if !best.is_empty() {
        out += "\nTemporal-dependency detection\n";
        out += &table(
            &["substitutes", "model", "best ratio", "AUC"],
            &best
                .iter()
                .map(|r| vec![r.substitutes.clone(), r.model.clone(), format!("{}", r.ratio), format!("{:.4}", r.auc)])
                .collect::<Vec<_>>(),
        );
    }
    out
}
