use std::collections::BTreeSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nowcast_core::data::{dataset_path, DatasetHandle, ProbCube, RainCube, Split};
use nowcast_core::ensemble::{best_per_region, load_prob_file, load_submission, majority_vote, save_submission, Submission};
use nowcast_core::metrics::{leaderboard, read_scores_csv, write_scores_csv, IouMode, LeaderboardRow, ScoreRecord};
use nowcast_core::postprocess::sweep_threshold;
use nowcast_core::Error;

use crate::data_cmd::split_files;
use crate::{default_out, BestRegionArgs, Common, ConfigError, EnsembleArgs, EvalArgs, ReportArgs, Session, SweepArgs};

/// Member directories of the named ensemble presets, relative to a runs
/// directory: the improved baseline and the Swin-UNETR with the
/// repeat_interleave and channel_conv adapters, each trained with AdamW and
/// with AdaBelief.
pub const VOTE_MEMBERS: [&str; 6] = [
    "improved_baseline-adamw",
    "improved_baseline-adabelief",
    "swin_repeat_interleave-adamw",
    "swin_repeat_interleave-adabelief",
    "swin_channel_conv-adamw",
    "swin_channel_conv-adabelief",
];

pub fn preset_members(name: &str) -> Result<&'static [&'static str]> {
    match name {
        "paper-vote" => Ok(&VOTE_MEMBERS),
        other => Err(ConfigError(format!("unknown ensemble preset '{}' (known: paper-vote)", other)).into()),
    }
}

/// Ground truth of one split as a submission named "truth".
pub fn truth_from_data(root: &Path, split: Split) -> Result<(Submission, Vec<PathBuf>)> {
    let mut sub = Submission::new("truth");
    let mut inputs = Vec::new();
    for (path, h) in split_files(root, split, None)? {
        for i in 0..h.len() {
            sub.insert(&h.region_id, h.year, i, h.read_target(i)?);
        }
        inputs.push(path);
    }
    Ok((sub, inputs))
}

fn write_scores(path: &Path, scores: &[ScoreRecord]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    write_scores_csv(File::create(path)?, scores)?;
    Ok(())
}

pub fn eval(mut s: Session, common: &Common, a: &EvalArgs) -> Result<()> {
    if let Some(v) = a.split {
        s.cfg.predict.split = v;
    }
    let sub = load_submission(&a.submission)?;
    let mut manifest = s.manifest("eval")?;
    manifest.inputs.push(a.submission.clone());
    let truth = match &a.truth {
        Some(t) => {
            manifest.inputs.push(t.clone());
            load_submission(t)?
        }
        None => {
            let root = a.data.clone().unwrap_or_else(|| s.cfg.data_root(None));
            let (t, files) = truth_from_data(&root, s.cfg.predict.split)?;
            manifest.inputs.extend(files);
            t
        }
    };
    let mode = if a.per_slot { IouMode::PerSlot } else { IouMode::Pooled };
    let scores = sub.score(&truth, mode)?;
    for r in &scores {
        println!("{} {} {:.6}", r.region_id, r.year, r.iou);
    }
    print_leaderboard(&leaderboard(&scores)?);
    let out = default_out(common, "eval");
    let path = out.join("scores.csv");
    write_scores(&path, &scores)?;
    manifest.outputs.push(path);
    manifest.finish(&out)?;
    Ok(())
}

/// Probability files written by `predict`, sorted.
fn prob_files(pred_dir: &Path) -> Result<Vec<PathBuf>> {
    let root = pred_dir.join("probs");
    let mut out = Vec::new();
    let years = std::fs::read_dir(&root)
        .map_err(|e| Error::domain(format!("no probabilities under {}: {}", root.display(), e)))?;
    for y in years {
        let y = y?.path();
        if !y.is_dir() {
            continue;
        }
        for f in std::fs::read_dir(&y)? {
            let f = f?.path();
            if f.to_string_lossy().ends_with(".prob.nc5") {
                out.push(f);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn sweep(mut s: Session, common: &Common, a: &SweepArgs) -> Result<()> {
    if let Some(v) = a.split {
        s.cfg.predict.split = v;
    }
    if let Some(g) = &a.grid {
        s.cfg.sweep.grid = g.clone();
    }
    let root = a.data.clone().unwrap_or_else(|| s.cfg.data_root(None));
    let mut manifest = s.manifest("sweep")?;
    let mut probs: Vec<ProbCube> = Vec::new();
    let mut gts: Vec<RainCube> = Vec::new();
    let files = prob_files(&a.predictions)?;
    if files.is_empty() {
        return Err(Error::domain(format!("no probability files in {}", a.predictions.display())).into());
    }
    for f in files {
        let cubes = load_prob_file(&f)?;
        let Some(first) = cubes.first() else { continue };
        let dp = dataset_path(&root, &first.meta.region_id, first.meta.year, s.cfg.predict.split);
        let h = DatasetHandle::open(&dp).with_context(|| format!("ground truth for {}", f.display()))?;
        if h.len() != cubes.len() {
            return Err(Error::domain(format!("{}: {} predictions for {} targets", f.display(), cubes.len(), h.len())).into());
        }
        for i in 0..h.len() {
            gts.push(h.read_target(i)?);
        }
        probs.extend(cubes);
        manifest.inputs.push(f);
        manifest.inputs.push(dp);
    }
    let res = sweep_threshold(&probs, &gts, &s.cfg.sweep.grid)?;
    for (tau, iou) in &res.curve {
        println!("tau {:.3} iou {:.6}", tau, iou);
    }
    println!("best tau {} iou {:.6}", res.best_tau, res.best_iou);
    let out = default_out(common, "sweep");
    std::fs::create_dir_all(&out)?;
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["tau", "iou"])?;
    for (tau, iou) in &res.curve {
        w.write_record([tau.to_string(), iou.to_string()])?;
    }
    w.flush()?;
    let best = out.join("best.json");
    std::fs::write(&best, serde_json::to_string_pretty(&res)?)?;
    manifest.outputs = vec![path, best];
    manifest.finish(&out)?;
    Ok(())
}

fn load_members(dirs: &[PathBuf]) -> Result<Vec<Submission>> {
    let subs = dirs
        .iter()
        .map(|d| load_submission(d).with_context(|| format!("loading {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let mut names = BTreeSet::new();
    for s in &subs {
        if !names.insert(s.name.as_str()) {
            return Err(ConfigError(format!("two members are both named '{}'", s.name)).into());
        }
    }
    Ok(subs)
}

pub fn ensemble(mut s: Session, common: &Common, a: &EnsembleArgs) -> Result<()> {
    if let Some(t) = a.tie_break {
        s.cfg.ensemble.tie_break = t;
    }
    let mut members = a.members.clone();
    if let Some(p) = &a.preset {
        let runs = a.runs.clone().unwrap_or_else(|| PathBuf::from("runs"));
        members.extend(preset_members(p)?.iter().map(|m| runs.join(m)));
    }
    if members.is_empty() {
        return Err(ConfigError("ensemble needs --members or --preset".into()).into());
    }
    let mut manifest = s.manifest("ensemble")?;
    let subs = load_members(&members)?;
    let mut voted = majority_vote(&subs, s.cfg.ensemble.tie_break)?;
    if let Some(n) = &a.name {
        voted.name = n.clone();
    }
    let out = default_out(common, "ensemble");
    save_submission(&out, &voted)?;
    println!("'{}' from {} members written to {}", voted.name, subs.len(), out.display());
    manifest.inputs = members;
    manifest.outputs.push(out.clone());
    manifest.finish(&out)?;
    Ok(())
}

fn read_all_scores(files: &[PathBuf]) -> Result<Vec<ScoreRecord>> {
    let mut all = Vec::new();
    for f in files {
        let file = File::open(f).map_err(|e| Error::domain(format!("cannot open {}: {}", f.display(), e)))?;
        all.extend(read_scores_csv(file).with_context(|| format!("reading {}", f.display()))?);
    }
    Ok(all)
}

pub fn best_region(s: Session, common: &Common, a: &BestRegionArgs) -> Result<()> {
    let mut manifest = s.manifest("best-region")?;
    let subs = load_members(&a.members)?;
    let scores = read_all_scores(&a.scores)?;
    let mut best = best_per_region(&subs, &scores)?;
    if let Some(n) = &a.name {
        best.name = n.clone();
    }
    let out = default_out(common, "best-region");
    save_submission(&out, &best)?;
    println!("'{}' written to {}", best.name, out.display());
    manifest.inputs = a.members.iter().chain(&a.scores).cloned().collect();
    manifest.outputs.push(out.clone());
    manifest.finish(&out)?;
    Ok(())
}

fn years_of(rows: &[LeaderboardRow]) -> Vec<i32> {
    rows.iter().flat_map(|r| r.year_means.keys().copied()).collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn print_leaderboard(rows: &[LeaderboardRow]) {
    let years = years_of(rows);
    let width = rows.iter().map(|r| r.submission_name.len()).max().unwrap_or(0).max("Submission name".len());
    let mut head = format!("{:<width$}  {:<20}", "Submission name", "Total mean");
    for y in &years {
        head.push_str(&format!("  {:<20}", format!("{} mean", y)));
    }
    println!("{}", head.trim_end());
    for r in rows {
        let mut line = format!("{:<width$}  {:<20}", r.submission_name, r.total_mean);
        for y in &years {
            let v = r.year_means.get(y).map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            line.push_str(&format!("  {:<20}", v));
        }
        println!("{}", line.trim_end());
    }
}

pub fn write_report_csv(path: &Path, rows: &[LeaderboardRow]) -> Result<()> {
    let years = years_of(rows);
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["submission_name".to_string(), "total_mean".to_string()];
    head.extend(years.iter().map(|y| format!("mean_{}", y)));
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![r.submission_name.clone(), r.total_mean.to_string()];
        rec.extend(years.iter().map(|y| r.year_means.get(y).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn report(s: Session, common: &Common, a: &ReportArgs) -> Result<()> {
    let mut manifest = s.manifest("report")?;
    let scores = read_all_scores(&a.scores)?;
    if scores.is_empty() {
        return Err(Error::domain("no scores to report").into());
    }
    let rows = leaderboard(&scores)?;
    print_leaderboard(&rows);
    let out = default_out(common, "report");
    std::fs::create_dir_all(&out)?;
    let path = out.join("report.csv");
    write_report_csv(&path, &rows)?;
    manifest.inputs = a.scores.clone();
    manifest.outputs.push(path);
    manifest.finish(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn vote_preset_resolves() {
        assert_eq!(preset_members("paper-vote").unwrap().len(), 6);
        assert!(preset_members("nope").is_err());
    }

    #[test]
    fn report_csv_has_one_column_per_year() {
        let rows = vec![LeaderboardRow {
            submission_name: "a".into(),
            total_mean: 0.25,
            year_means: BTreeMap::from([(2019, 0.2), (2020, 0.3)]),
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_report_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "submission_name,total_mean,mean_2019,mean_2020\na,0.25,0.2,0.3\n");
    }
}
