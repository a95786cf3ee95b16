//! Relational dataset representation, file ingestion, hold-out splitting,
//! synthetic generation, and AUC evaluation.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A single observed directed link: entity `i` relates to entity `j` under
/// `relation` with label `y` in {+1, -1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Link {
    pub relation: usize,
    pub i: usize,
    pub j: usize,
    pub y: i8,
}

/// Key identifying a link entry.
pub type Triple = (usize, usize, usize);

/// Dense per-pair side features, one D-dim vector per (i, j).
#[derive(Debug, Clone, Default)]
pub struct PairFeatures {
    pub dim: usize,
    map: HashMap<(usize, usize), Vec<f64>>,
}

impl PairFeatures {
    pub fn new(dim: usize) -> Self {
        PairFeatures {
            dim,
            map: HashMap::new(),
        }
    }

    pub fn insert(&mut self, i: usize, j: usize, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Validation(format!(
                "feature vector for ({i},{j}) has length {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        self.map.insert((i, j), v);
        Ok(())
    }

    /// Feature vector for a pair; pairs without a stored vector are zeros.
    pub fn get(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.map.get(&(i, j)).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// N entities, R relations, a sparse +/-1 link list with observation
/// semantics (absent dyads are missing, not negative), and optional
/// per-pair side features.
#[derive(Debug, Clone)]
pub struct RelationalDataset {
    pub n_entities: usize,
    pub n_relations: usize,
    pub links: Vec<Link>,
    pub pair_features: Option<PairFeatures>,
    pub names: Option<Vec<String>>,
}

impl RelationalDataset {
    pub fn new(n_entities: usize, n_relations: usize) -> Self {
        RelationalDataset {
            n_entities,
            n_relations,
            links: Vec::new(),
            pair_features: None,
            names: None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.pair_features.as_ref().map_or(0, |f| f.dim)
    }

    pub fn add_link(&mut self, relation: usize, i: usize, j: usize, y: i8) -> Result<()> {
        if relation >= self.n_relations {
            return Err(Error::Validation(format!(
                "relation index {relation} out of range (R = {})",
                self.n_relations
            )));
        }
        if i >= self.n_entities || j >= self.n_entities {
            return Err(Error::Validation(format!(
                "entity index ({i},{j}) out of range (N = {})",
                self.n_entities
            )));
        }
        if y != 1 && y != -1 {
            return Err(Error::Validation(format!("link label must be +/-1, got {y}")));
        }
        self.links.push(Link { relation, i, j, y });
        Ok(())
    }

    /// Checks the no-duplicate-triple invariant over the whole link list.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.links.len());
        for l in &self.links {
            if !seen.insert((l.relation, l.i, l.j)) {
                return Err(Error::Validation(format!(
                    "duplicate link triple ({}, {}, {})",
                    l.relation, l.i, l.j
                )));
            }
        }
        Ok(())
    }

    /// The sub-dataset containing only one relation (relation index remapped
    /// to 0). Pair features and names are shared unchanged.
    pub fn relation_subset(&self, relation: usize) -> RelationalDataset {
        let links = self
            .links
            .iter()
            .filter(|l| l.relation == relation)
            .map(|l| Link {
                relation: 0,
                ..*l
            })
            .collect();
        RelationalDataset {
            n_entities: self.n_entities,
            n_relations: 1,
            links,
            pair_features: self.pair_features.clone(),
            names: self.names.clone(),
        }
    }
}

/// Disjoint observed/held-out partition of a dataset's link triples.
#[derive(Debug, Clone)]
pub struct SplitMask {
    pub observed: HashSet<Triple>,
    pub heldout: HashSet<Triple>,
    pub seed: u64,
}

impl SplitMask {
    /// A mask observing every link (no hold-out).
    pub fn full(ds: &RelationalDataset) -> Self {
        SplitMask {
            observed: ds.links.iter().map(|l| (l.relation, l.i, l.j)).collect(),
            heldout: HashSet::new(),
            seed: 0,
        }
    }
}

/// Loads the line-oriented text format:
/// header `N <n> R <r> D <d>`, then optional `F i j v1 ... vd` feature lines,
/// then `L rel i j y` link lines with y in {+1,-1}.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<RelationalDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

fn parse_dataset(text: &str, path: &Path) -> Result<RelationalDataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| perr(0, "empty file".to_string()))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 6 || toks[0] != "N" || toks[2] != "R" || toks[4] != "D" {
        return Err(perr(hline, format!("expected header `N <n> R <r> D <d>`, got `{header}`")));
    }
    let parse_count = |s: &str, what: &str, line: usize| {
        s.parse::<usize>()
            .map_err(|_| perr(line, format!("invalid {what} `{s}`")))
    };
    let n = parse_count(toks[1], "entity count", hline)?;
    let r = parse_count(toks[3], "relation count", hline)?;
    let d = parse_count(toks[5], "feature dimension", hline)?;

    let mut ds = RelationalDataset::new(n, r);
    if d > 0 {
        ds.pair_features = Some(PairFeatures::new(d));
    }

    for (ln, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "F" => {
                if toks.len() != 3 + d {
                    return Err(perr(
                        ln,
                        format!("feature line has {} values, expected {d}", toks.len().saturating_sub(3)),
                    ));
                }
                let i = parse_count(toks[1], "entity index", ln)?;
                let j = parse_count(toks[2], "entity index", ln)?;
                if i >= n || j >= n {
                    return Err(Error::Validation(format!(
                        "feature pair ({i},{j}) out of range (N = {n})"
                    )));
                }
                let mut v = Vec::with_capacity(d);
                for t in &toks[3..] {
                    v.push(
                        t.parse::<f64>()
                            .map_err(|_| perr(ln, format!("invalid feature value `{t}`")))?,
                    );
                }
                ds.pair_features
                    .as_mut()
                    .ok_or_else(|| perr(ln, "feature line but header declares D 0".to_string()))?
                    .insert(i, j, v)?;
            }
            "L" => {
                if toks.len() != 5 {
                    return Err(perr(ln, format!("link line has {} tokens, expected 5", toks.len())));
                }
                let rel = parse_count(toks[1], "relation index", ln)?;
                let i = parse_count(toks[2], "entity index", ln)?;
                let j = parse_count(toks[3], "entity index", ln)?;
                let y = match toks[4] {
                    "+1" | "1" => 1i8,
                    "-1" => -1i8,
                    other => return Err(perr(ln, format!("link label must be +1 or -1, got `{other}`"))),
                };
                ds.add_link(rel, i, j, y)?;
            }
            other => return Err(perr(ln, format!("unknown record type `{other}`"))),
        }
    }
    ds.validate()?;
    Ok(ds)
}

/// Serializes a dataset back to the text format.
pub fn format_dataset(ds: &RelationalDataset) -> String {
    let mut out = String::new();
    let d = ds.feature_dim();
    writeln_fmt(&mut out, format_args!("N {} R {} D {}", ds.n_entities, ds.n_relations, d));
    if let Some(pf) = &ds.pair_features {
        let mut keys: Vec<_> = pf.map.keys().copied().collect();
        keys.sort_unstable();
        for (i, j) in keys {
            let v = pf.get(i, j).unwrap();
            let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            writeln_fmt(&mut out, format_args!("F {i} {j} {}", vals.join(" ")));
        }
    }
    for l in &ds.links {
        let y = if l.y > 0 { "+1" } else { "-1" };
        writeln_fmt(&mut out, format_args!("L {} {} {} {y}", l.relation, l.i, l.j));
    }
    out
}

fn writeln_fmt(out: &mut String, args: std::fmt::Arguments) {
    let _ = out.write_fmt(args);
    out.push('\n');
}

pub fn save_dataset(ds: &RelationalDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_dataset(ds)).map_err(|e| Error::io(path, e))
}

/// Deterministically holds out `fraction` of the link triples.
pub fn split_holdout(ds: &RelationalDataset, fraction: f64, seed: u64) -> Result<SplitMask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "hold-out fraction must lie in (0,1), got {fraction}"
        )));
    }
    if ds.links.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".to_string()));
    }
    let mut idx: Vec<usize> = (0..ds.links.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_held = (fraction * ds.links.len() as f64).round() as usize;
    let mut observed = HashSet::new();
    let mut heldout = HashSet::new();
    for (pos, &li) in idx.iter().enumerate() {
        let l = &ds.links[li];
        if pos < n_held {
            heldout.insert((l.relation, l.i, l.j));
        } else {
            observed.insert((l.relation, l.i, l.j));
        }
    }
    Ok(SplitMask {
        observed,
        heldout,
        seed,
    })
}

/// Synthetic single-relation dataset with known ground truth.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: RelationalDataset,
    pub z_true: Array2<f64>,
    pub w_true: Array2<f64>,
    pub link_density: f64,
}

impl SynthData {
    /// Ground-truth discriminant z_i W z_j^T for a pair.
    pub fn oracle_score(&self, i: usize, j: usize) -> f64 {
        let zi = self.z_true.row(i);
        let zj = self.z_true.row(j);
        zi.dot(&self.w_true.dot(&zj))
    }
}

/// Draws binary features Z ~ Bernoulli(feature_density), a symmetric
/// zero-mean weight matrix of the given scale, and labels
/// y_ij = sign(z_i W z_j^T + noise) over all ordered pairs i != j.
/// Noise std is 10% of the discriminant std (1.0 when degenerate).
pub fn synth_generate(
    n: usize,
    k_true: usize,
    seed: u64,
    feature_density: f64,
    weight_scale: f64,
) -> Result<SynthData> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 2 entities, got {n}")));
    }
    if k_true < 1 {
        return Err(Error::InvalidArgument("need k_true >= 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Array2::<f64>::zeros((n, k_true));
    for v in z.iter_mut() {
        if rng.random::<f64>() < feature_density {
            *v = 1.0;
        }
    }
    let mut w = Array2::<f64>::zeros((k_true, k_true));
    for v in w.iter_mut() {
        *v = gaussian(&mut rng) * weight_scale;
    }
    let w = 0.5 * (&w + &w.t());

    let mut scores = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let s: f64 = z.row(i).dot(&w.dot(&z.row(j)));
                scores.push((i, j, s));
            }
        }
    }
    let mean = scores.iter().map(|&(_, _, s)| s).sum::<f64>() / scores.len() as f64;
    let var = scores
        .iter()
        .map(|&(_, _, s)| (s - mean) * (s - mean))
        .sum::<f64>()
        / scores.len() as f64;
    let mut noise_std = 0.1 * var.sqrt();
    if noise_std == 0.0 {
        noise_std = 1.0;
    }

    let mut ds = RelationalDataset::new(n, 1);
    let mut n_pos = 0usize;
    for &(i, j, s) in &scores {
        let y = if s + noise_std * gaussian(&mut rng) > 0.0 {
            n_pos += 1;
            1i8
        } else {
            -1i8
        };
        ds.add_link(0, i, j, y)?;
    }
    let link_density = n_pos as f64 / scores.len() as f64;
    Ok(SynthData {
        dataset: ds,
        z_true: z,
        w_true: w,
        link_density,
    })
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple to reason about.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Rank-statistic AUC: P(score+ > score-) + 0.5 P(tie).
pub fn auc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "scores/labels length mismatch: {} vs {}",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative label".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Sum of average ranks of the positives (Mann-Whitney U).
    let mut rank_sum_pos = 0.0;
    let mut idx = 0;
    while idx < order.len() {
        let mut end = idx;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[idx]] {
            end += 1;
        }
        // Ranks are 1-based; tied scores share the average rank.
        let avg_rank = (idx + 1 + end + 1) as f64 / 2.0;
        for &oi in &order[idx..=end] {
            if labels[oi] > 0 {
                rank_sum_pos += avg_rank;
            }
        }
        idx = end + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
