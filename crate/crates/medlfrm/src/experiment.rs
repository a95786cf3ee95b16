//! Config-driven experiment runner: cross-validation over C, multi-seed
//! averaging, and CSV export of traces, per-pair scores, and summaries.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::{auc, load_dataset, split_holdout, RelationalDataset, SplitMask, Triple};
use crate::error::{Error, Result};
use crate::model::{fit, predict, Mode, Setting, TraceRecord, TrainConfig};

/// Environment variable that, when set, prefixes the configured output dir.
pub const OUTPUT_ROOT_ENV: &str = "MEDLFRM_OUTPUT_ROOT";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub split_fraction: f64,
    pub seeds: Vec<u64>,
    pub model: TrainConfig,
    /// Candidate C values for inner cross-validation (MedLFRM only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv_grid: Option<Vec<f64>>,
    pub output_dir: PathBuf,
}

/// Default C grid when cross-validation is requested without one.
pub fn default_cv_grid() -> Vec<f64> {
    vec![0.1, 0.3, 1.0, 3.0, 10.0, 30.0]
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list must be nonempty".to_string()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config("split_fraction must lie in (0,1)".to_string()));
        }
        if let Some(grid) = &self.cv_grid {
            if grid.is_empty() {
                return Err(Error::Config("cv_grid must be nonempty when present".to_string()));
            }
            if grid.iter().any(|&c| !(c > 0.0)) {
                return Err(Error::Config("cv_grid entries must be positive".to_string()));
            }
        }
        self.model.validate()
    }

    /// Output directory with the env-var root override applied.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }
}

/// One fit plus held-out scoring (handles the single/global setting).
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub auc: f64,
    /// (relation, i, j, score, label) for every probed pair.
    pub scores: Vec<(usize, usize, usize, f64, i8)>,
    pub trace: Vec<TraceRecord>,
    pub train_secs: f64,
    pub test_secs: f64,
    pub converged: bool,
    pub svm_clean: bool,
}

/// Fits on `split.observed` and scores `probe`. In the single setting each
/// relation is fit independently and the overall AUC averages the
/// per-relation AUCs; traces are aggregated iteration-wise.
pub fn fit_and_score(
    ds: &RelationalDataset,
    split: &SplitMask,
    probe: &HashSet<Triple>,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    match config.setting {
        Setting::Global => fit_and_score_block(ds, split, probe, config),
        Setting::Single => {
            let mut per_rel = Vec::new();
            for rel in 0..ds.n_relations {
                let sub = ds.relation_subset(rel);
                let sub_split = SplitMask {
                    observed: filter_rel(&split.observed, rel),
                    heldout: filter_rel(&split.heldout, rel),
                    seed: split.seed,
                };
                let sub_probe = filter_rel(probe, rel);
                if sub_split.observed.is_empty() || sub_probe.is_empty() {
                    continue;
                }
                let mut out = match fit_and_score_block(&sub, &sub_split, &sub_probe, config) {
                    Ok(o) => o,
                    // Single-class validation relations have no defined AUC.
                    Err(Error::UndefinedMetric(_)) => continue,
                    Err(e) => return Err(e),
                };
                for s in &mut out.scores {
                    s.0 = rel;
                }
                per_rel.push(out);
            }
            if per_rel.is_empty() {
                return Err(Error::UndefinedMetric(
                    "no relation had a scoreable validation set".to_string(),
                ));
            }
            Ok(aggregate_single(per_rel))
        }
    }
}

fn filter_rel(set: &HashSet<Triple>, rel: usize) -> HashSet<Triple> {
    set.iter()
        .filter(|&&(r, _, _)| r == rel)
        .map(|&(_, i, j)| (0, i, j))
        .collect()
}

fn fit_and_score_block(
    ds: &RelationalDataset,
    split: &SplitMask,
    probe: &HashSet<Triple>,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    let t0 = Instant::now();
    let model = fit(ds, split, config, Some(probe))?;
    let train_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for l in &ds.links {
        if probe.contains(&(l.relation, l.i, l.j)) {
            pairs.push((l.relation, l.i, l.j));
            labels.push(l.y);
        }
    }
    let preds = predict(&model, ds, &pairs)?;
    let raw: Vec<f64> = preds.iter().map(|&(s, _)| s).collect();
    let auc_val = auc(&raw, &labels)?;
    let test_secs = t1.elapsed().as_secs_f64();

    let scores = pairs
        .iter()
        .zip(&preds)
        .zip(&labels)
        .map(|((&(r, i, j), &(s, _)), &y)| (r, i, j, s, y))
        .collect();
    Ok(FitOutcome {
        auc: auc_val,
        scores,
        trace: model.trace,
        train_secs,
        test_secs,
        converged: model.converged,
        svm_clean: model.svm_clean,
    })
}

fn aggregate_single(per_rel: Vec<FitOutcome>) -> FitOutcome {
    let n = per_rel.len() as f64;
    let auc = per_rel.iter().map(|o| o.auc).sum::<f64>() / n;
    let max_len = per_rel.iter().map(|o| o.trace.len()).max().unwrap_or(0);
    let mut trace = Vec::with_capacity(max_len);
    for it in 0..max_len {
        // Finished relations contribute their final record.
        let recs: Vec<&TraceRecord> = per_rel
            .iter()
            .filter_map(|o| o.trace.get(it).or_else(|| o.trace.last()))
            .collect();
        let m = recs.len() as f64;
        let aucs: Vec<f64> = recs.iter().filter_map(|r| r.test_auc).collect();
        trace.push(TraceRecord {
            iteration: it,
            objective: recs.iter().map(|r| r.objective).sum(),
            hinge_risk: recs.iter().map(|r| r.hinge_risk).sum(),
            test_auc: if aucs.is_empty() {
                None
            } else {
                Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
            },
            active_features: (recs.iter().map(|r| r.active_features).sum::<usize>() as f64 / m)
                .round() as usize,
        });
    }
    FitOutcome {
        auc,
        scores: per_rel.iter().flat_map(|o| o.scores.iter().copied()).collect(),
        trace,
        train_secs: per_rel.iter().map(|o| o.train_secs).sum(),
        test_secs: per_rel.iter().map(|o| o.test_secs).sum(),
        converged: per_rel.iter().all(|o| o.converged),
        svm_clean: per_rel.iter().all(|o| o.svm_clean),
    }
}

/// Inner cross-validation: holds out 20% of the training links as a
/// validation set, fits once per grid value, and returns the argmax
/// validation AUC (ties broken toward smaller C).
pub fn cross_validate_c(
    ds: &RelationalDataset,
    split: &SplitMask,
    grid: &[f64],
    config: &TrainConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("cv grid must be nonempty".to_string()));
    }
    // Deterministic inner 80/20 split of the observed links.
    let mut obs: Vec<Triple> = split.observed.iter().copied().collect();
    obs.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed ^ 0x9e37_79b9_7f4a_7c15);
    obs.shuffle(&mut rng);
    let n_val = ((obs.len() as f64) * 0.2).round().max(1.0) as usize;
    let val: HashSet<Triple> = obs[..n_val].iter().copied().collect();
    let inner_observed: HashSet<Triple> = obs[n_val..].iter().copied().collect();
    if inner_observed.is_empty() {
        return Err(Error::InvalidArgument(
            "too few observed links for inner validation".to_string(),
        ));
    }
    let inner_split = SplitMask {
        observed: inner_observed,
        heldout: val.clone(),
        seed: split.seed,
    };

    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut scores = Vec::with_capacity(sorted.len());
    let mut best = (sorted[0], f64::NEG_INFINITY);
    for &c in &sorted {
        let mut cfg = config.clone();
        cfg.c = c;
        let out = fit_and_score(ds, &inner_split, &val, &cfg)?;
        scores.push((c, out.auc));
        if out.auc > best.1 {
            best = (c, out.auc);
        }
    }
    Ok((best.0, scores))
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub auc: f64,
    pub chosen_c: Option<f64>,
    pub cv_secs: f64,
    pub train_secs: f64,
    pub test_secs: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub per_seed: Vec<SeedResult>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub output_dir: PathBuf,
}

/// Runs the full protocol: per seed, split, optional inner CV over C, final
/// fit, and held-out scoring; writes trace/score/summary CSVs and the
/// resolved config into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let ds = load_dataset(&config.dataset)?;
    let out_dir = config.resolved_output_dir();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let split = split_holdout(&ds, config.split_fraction, seed)?;

        let mut model_cfg = config.model.clone();
        model_cfg.seed = seed;
        let mut chosen_c = None;
        let mut cv_secs = 0.0;
        if model_cfg.mode == Mode::MedLfrm {
            if let Some(grid) = &config.cv_grid {
                let t = Instant::now();
                let (best, _) = cross_validate_c(&ds, &split, grid, &model_cfg)?;
                cv_secs = t.elapsed().as_secs_f64();
                model_cfg.c = best;
                chosen_c = Some(best);
            }
        }

        let out = fit_and_score(&ds, &split, &split.heldout, &model_cfg)?;
        write_trace_csv(&out_dir.join(format!("trace_seed{seed}.csv")), &out.trace)?;
        write_scores_csv(&out_dir.join(format!("scores_seed{seed}.csv")), &out.scores)?;
        per_seed.push(SeedResult {
            seed,
            auc: out.auc,
            chosen_c,
            cv_secs,
            train_secs: out.train_secs,
            test_secs: out.test_secs,
            converged: out.converged && out.svm_clean,
        });
    }

    let n = per_seed.len() as f64;
    let mean_auc = per_seed.iter().map(|r| r.auc).sum::<f64>() / n;
    let std_auc = (per_seed
        .iter()
        .map(|r| (r.auc - mean_auc) * (r.auc - mean_auc))
        .sum::<f64>()
        / n)
        .sqrt();

    write_summary_csv(&out_dir.join("summary.csv"), &per_seed, mean_auc, std_auc)?;
    let resolved = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("serializing resolved config: {e}")))?;
    let cfg_path = out_dir.join("resolved_config.json");
    std::fs::write(&cfg_path, resolved).map_err(|e| Error::io(&cfg_path, e))?;

    Ok(ExperimentReport {
        per_seed,
        mean_auc,
        std_auc,
        output_dir: out_dir,
    })
}

fn write_trace_csv(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut s = String::from("iteration,objective,hinge_risk,test_auc,active_features\n");
    for r in trace {
        let auc = r.test_auc.map_or(String::new(), |a| a.to_string());
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration, r.objective, r.hinge_risk, auc, r.active_features
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_scores_csv(path: &Path, scores: &[(usize, usize, usize, f64, i8)]) -> Result<()> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
    let mut s = String::from("rel,i,j,score,label\n");
    for &(r, i, j, score, y) in &sorted {
        s.push_str(&format!("{r},{i},{j},{score},{y}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_summary_csv(
    path: &Path,
    per_seed: &[SeedResult],
    mean_auc: f64,
    std_auc: f64,
) -> Result<()> {
    let mut s = String::from(
        "seed,auc,chosen_c,cv_secs,train_secs,test_secs,converged,mean_auc,std_auc\n",
    );
    for r in per_seed {
        let c = r.chosen_c.map_or(String::new(), |c| c.to_string());
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.seed, r.auc, c, r.cv_secs, r.train_secs, r.test_secs, r.converged, mean_auc, std_auc
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Recomputes the AUC from an emitted per-pair score dump.
pub fn eval_scores_csv(path: impl AsRef<Path>) -> Result<f64> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                msg: format!("expected 5 columns, got {}", cols.len()),
            });
        }
        let parse = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                msg: format!("invalid {what} `{s}`"),
            })
        };
        scores.push(parse(cols[3], "score")?);
        labels.push(if parse(cols[4], "label")? > 0.0 { 1i8 } else { -1i8 });
    }
    auc(&scores, &labels)
}
