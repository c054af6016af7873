//! The contextual retrieval task.
//!
//! Each of `N` objects carries `S` search features `z`, `R` retrieval
//! features `z̃` and, per search, a one-hot preference over the `R`
//! retrieval features. For every object `i` and search `s` the task finds
//! the other object closest to `i` in `z_s`, reads that object's retrieval
//! feature selected by `i`'s preference, and mixes the `S` reads with fixed
//! weights `α`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One preference tuple in `{0..R-1}^S`.
pub type Combo = Vec<usize>;

/// Upper bound on `R^S` for enumeration; beyond this the combination list
/// itself would not fit comfortably in memory.
pub const MAX_COMBINATIONS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub searches: usize,
    pub retrievals: usize,
    pub objects: usize,
    /// Length `S`, fixed for the lifetime of an experiment.
    pub alpha: Vec<f64>,
    pub ood: Option<OodSplit>,
}

impl TaskSpec {
    /// Draws `α ~ U(-1, 1)` from `rng`.
    pub fn new(searches: usize, retrievals: usize, objects: usize, rng: &mut Rng) -> Result<TaskSpec> {
        let alpha = (0..searches).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Self::with_alpha(searches, retrievals, objects, alpha)
    }

    pub fn with_alpha(searches: usize, retrievals: usize, objects: usize, alpha: Vec<f64>) -> Result<TaskSpec> {
        let spec = TaskSpec {
            searches,
            retrievals,
            objects,
            alpha,
            ood: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.searches == 0 || self.retrievals == 0 {
            return Err(Error::contract("task needs at least one search and one retrieval"));
        }
        if self.objects < 2 {
            return Err(Error::contract(format!(
                "task needs N >= 2 objects, got {}",
                self.objects
            )));
        }
        if self.alpha.len() != self.searches {
            return Err(Error::contract(format!(
                "alpha has {} entries for {} searches",
                self.alpha.len(),
                self.searches
            )));
        }
        if let Some(split) = &self.ood {
            split.validate(self.searches, self.retrievals)?;
        }
        Ok(())
    }

    /// Per-object network input width: `S + R + S·R`.
    pub fn input_width(&self) -> usize {
        self.searches + self.retrievals + self.searches * self.retrievals
    }

    /// Combinations training batches draw from.
    pub fn train_pool(&self) -> Option<&[Combo]> {
        self.ood.as_ref().map(|s| s.train.as_slice())
    }

    pub fn test_pool(&self) -> Option<&[Combo]> {
        self.ood.as_ref().map(|s| s.test.as_slice())
    }
}

fn default_objects() -> usize {
    8
}

/// Declarative task description; [`TaskConfig::build`] turns it into a
/// [`TaskSpec`] by drawing `α` (unless fixed) and any random split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub searches: usize,
    pub retrievals: usize,
    #[serde(default = "default_objects")]
    pub objects: usize,
    #[serde(default)]
    pub ood: Option<OodConfig>,
    /// Fixed mixing weights; drawn from `U(-1, 1)` per seed when absent.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OodConfig {
    Explicit { train: Vec<Combo>, test: Vec<Combo> },
    HoldOutFraction(f64),
}

impl TaskConfig {
    pub fn build(&self, rng: &mut Rng) -> Result<TaskSpec> {
        let mut spec = match &self.alpha {
            Some(a) => TaskSpec::with_alpha(self.searches, self.retrievals, self.objects, a.clone())?,
            None => TaskSpec::new(self.searches, self.retrievals, self.objects, rng)?,
        };
        spec.ood = match &self.ood {
            None => None,
            Some(OodConfig::Explicit { train, test }) => Some(OodSplit::explicit(
                self.searches,
                self.retrievals,
                train.clone(),
                test.clone(),
            )?),
            Some(OodConfig::HoldOutFraction(f)) => {
                Some(OodSplit::from_fraction(self.searches, self.retrievals, *f, rng)?)
            }
        };
        Ok(spec)
    }

    /// Checks everything that does not depend on random draws.
    pub fn validate(&self) -> Result<()> {
        let alpha = self.alpha.clone().unwrap_or_else(|| vec![0.0; self.searches]);
        TaskSpec::with_alpha(self.searches, self.retrievals, self.objects, alpha)?;
        match &self.ood {
            Some(OodConfig::Explicit { train, test }) => {
                OodSplit::explicit(self.searches, self.retrievals, train.clone(), test.clone()).map(|_| ())
            }
            Some(OodConfig::HoldOutFraction(f)) => {
                if *f > 0.0 && *f < 1.0 {
                    enumerate_combinations(self.searches, self.retrievals).map(|_| ())
                } else {
                    Err(Error::contract(format!("hold-out fraction {f} outside (0, 1)")))
                }
            }
            None => Ok(()),
        }
    }
}

/// Disjoint train / held-out partition of preference combinations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSplit {
    pub train: Vec<Combo>,
    pub test: Vec<Combo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold_out_fraction: Option<f64>,
}

impl OodSplit {
    /// Accepts explicit lists verbatim after checking them.
    pub fn explicit(searches: usize, retrievals: usize, train: Vec<Combo>, test: Vec<Combo>) -> Result<OodSplit> {
        let split = OodSplit {
            train,
            test,
            hold_out_fraction: None,
        };
        split.validate(searches, retrievals)?;
        Ok(split)
    }

    /// Holds out `round(fraction · R^S)` combinations chosen by `rng`
    /// (at least one on each side). Both lists come back sorted.
    pub fn from_fraction(searches: usize, retrievals: usize, fraction: f64, rng: &mut Rng) -> Result<OodSplit> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::contract(format!("hold-out fraction {fraction} outside (0, 1)")));
        }
        let mut all = enumerate_combinations(searches, retrievals)?;
        if all.len() < 2 {
            return Err(Error::contract("a single combination cannot be split"));
        }
        let held = ((fraction * all.len() as f64).round() as usize).clamp(1, all.len() - 1);
        rng.shuffle(&mut all);
        let mut test = all.split_off(all.len() - held);
        all.sort();
        test.sort();
        Ok(OodSplit {
            train: all,
            test,
            hold_out_fraction: Some(fraction),
        })
    }

    pub fn validate(&self, searches: usize, retrievals: usize) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::contract("OoD split needs non-empty train and test sets"));
        }
        let mut seen = BTreeSet::new();
        for combo in self.train.iter().chain(&self.test) {
            if combo.len() != searches || combo.iter().any(|&r| r >= retrievals) {
                return Err(Error::contract(format!(
                    "combination {combo:?} is not in {{0..{}}}^{searches}",
                    retrievals.saturating_sub(1)
                )));
            }
            if !seen.insert(combo) {
                return Err(Error::contract(format!(
                    "combination {combo:?} appears twice (train and test must be disjoint)"
                )));
            }
        }
        Ok(())
    }
}

/// All of `{0..R-1}^S` in lexicographic order.
pub fn enumerate_combinations(searches: usize, retrievals: usize) -> Result<Vec<Combo>> {
    let total = u32::try_from(searches)
        .ok()
        .and_then(|s| retrievals.checked_pow(s))
        .filter(|&t| t <= MAX_COMBINATIONS)
        .ok_or_else(|| Error::contract(format!("{retrievals}^{searches} combinations is too many to enumerate")))?;
    let mut out = Vec::with_capacity(total);
    for mut k in 0..total {
        let mut combo = vec![0; searches];
        for slot in combo.iter_mut().rev() {
            *slot = k % retrievals;
            k /= retrievals;
        }
        out.push(combo);
    }
    Ok(out)
}

/// One set of objects with its targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    /// `N×S` search features.
    pub z: Vec<Vec<f64>>,
    /// `N×R` retrieval features.
    #[serde(rename = "ztilde")]
    pub z_tilde: Vec<Vec<f64>>,
    /// `N×S` preferred retrieval per search.
    pub prefs: Vec<Combo>,
    pub y: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl TaskInstance {
    pub fn objects(&self) -> usize {
        self.z.len()
    }

    /// Network input, `N × (S + R + S·R)`, row-major: `[z ; z̃ ; one-hot r_1 .. r_S]`.
    pub fn input(&self) -> Vec<f64> {
        let r = self.z_tilde.first().map_or(0, Vec::len);
        let mut out = Vec::new();
        for ((z, zt), prefs) in self.z.iter().zip(&self.z_tilde).zip(&self.prefs) {
            out.extend(z);
            out.extend(zt);
            for &p in prefs {
                out.extend((0..r).map(|k| if k == p { 1.0 } else { 0.0 }));
            }
        }
        out
    }
}

/// Draws features and preferences and computes the targets with a
/// sorted-neighbour search. Preferences come uniformly from `pool`
/// (default: every combination).
pub fn sample_instance(spec: &TaskSpec, rng: &mut Rng, pool: Option<&[Combo]>) -> Result<TaskInstance> {
    if let Some(p) = pool {
        if p.is_empty() {
            return Err(Error::contract("combination pool is empty"));
        }
    }
    let (n, s, r) = (spec.objects, spec.searches, spec.retrievals);
    let z: Vec<Vec<f64>> = (0..n).map(|_| (0..s).map(|_| rng.normal()).collect()).collect();
    let z_tilde: Vec<Vec<f64>> = (0..n).map(|_| (0..r).map(|_| rng.normal()).collect()).collect();
    let prefs: Vec<Combo> = (0..n)
        .map(|_| match pool {
            Some(p) => p[rng.below(p.len())].clone(),
            None => (0..s).map(|_| rng.below(r)).collect(),
        })
        .collect();

    let mut y = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for (k, &a) in spec.alpha.iter().enumerate() {
        order.sort_by(|&i, &j| z[i][k].total_cmp(&z[j][k]).then(i.cmp(&j)));
        for (pos, &i) in order.iter().enumerate() {
            let winner = sorted_neighbour(&order, pos, |j| z[j][k]);
            y[i] += a * z_tilde[winner][prefs[i][k]];
        }
    }
    Ok(TaskInstance {
        z,
        z_tilde,
        prefs,
        y,
        alpha: spec.alpha.clone(),
    })
}

/// Nearest other element to `order[pos]` in a list sorted by `value`.
/// Walks outwards on each side for as long as the distance stays equal to
/// the closest one found there, so that ties resolve to the lowest index.
fn sorted_neighbour(order: &[usize], pos: usize, value: impl Fn(usize) -> f64) -> usize {
    let v = value(order[pos]);
    let side = |range: &mut dyn Iterator<Item = usize>, dist: &dyn Fn(f64) -> f64| -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for q in range {
            let j = order[q];
            let d = dist(value(j));
            match best {
                None => best = Some((d, j)),
                Some((bd, bj)) if d == bd => best = Some((bd, bj.min(j))),
                Some(_) => break,
            }
        }
        best
    };
    let left = side(&mut (0..pos).rev(), &|u| v - u);
    let right = side(&mut (pos + 1..order.len()), &|u| u - v);
    match (left, right) {
        (Some((dl, jl)), Some((dr, jr))) => {
            if dl < dr {
                jl
            } else if dr < dl {
                jr
            } else {
                jl.min(jr)
            }
        }
        (Some((_, j)), None) | (None, Some((_, j))) => j,
        (None, None) => unreachable!("at least two objects"),
    }
}

/// A batch of instances in tensor form.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, N, S + R + S·R]`.
    pub inputs: Tensor,
    /// `[B, N]`.
    pub targets: Tensor,
    pub instances: Vec<TaskInstance>,
}

impl Batch {
    pub fn from_instances(instances: Vec<TaskInstance>) -> Result<Batch> {
        let first = instances.first().ok_or_else(|| Error::contract("empty batch"))?;
        let n = first.objects();
        let width = first.input().len() / n;
        let b = instances.len();
        let mut inputs = Vec::with_capacity(b * n * width);
        let mut targets = Vec::with_capacity(b * n);
        for inst in &instances {
            if inst.objects() != n {
                return Err(Error::contract("instances in a batch must share N"));
            }
            inputs.extend(inst.input());
            targets.extend(&inst.y);
        }
        Ok(Batch {
            inputs: Tensor::from_vec(&[b, n, width], inputs)?,
            targets: Tensor::from_vec(&[b, n], targets)?,
            instances,
        })
    }

    /// Every preference combination used by any object in the batch.
    pub fn combos(&self) -> impl Iterator<Item = &Combo> {
        self.instances.iter().flat_map(|i| i.prefs.iter())
    }
}

pub fn sample_batch(spec: &TaskSpec, rng: &mut Rng, size: usize, pool: Option<&[Combo]>) -> Result<Batch> {
    if size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let instances = (0..size)
        .map(|_| sample_instance(spec, rng, pool))
        .collect::<Result<Vec<_>>>()?;
    Batch::from_instances(instances)
}

/// Writes instances as JSON lines.
pub fn write_jsonl(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskInstance>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::oracle_targets;

    #[test]
    fn small_enumerations() {
        assert_eq!(
            enumerate_combinations(2, 2).unwrap(),
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]
        );
        assert_eq!(enumerate_combinations(1, 3).unwrap(), vec![vec![0], vec![1], vec![2]]);
        assert!(enumerate_combinations(64, 16).is_err());
        assert!(enumerate_combinations(usize::MAX, 2).is_err());
    }

    #[test]
    fn two_by_four_split() {
        let all = enumerate_combinations(2, 4).unwrap();
        assert_eq!(all.len(), 16);
        let test: Vec<Combo> = vec![vec![2, 1], vec![2, 3], vec![3, 1], vec![3, 3]];
        let train: Vec<Combo> = all.iter().filter(|c| !test.contains(c)).cloned().collect();
        assert_eq!(train.len(), 12);
        let split = OodSplit::explicit(2, 4, train.clone(), test.clone()).unwrap();
        let json = serde_json::to_string(&split).unwrap();
        let back: OodSplit = serde_json::from_str(&json).unwrap();
        assert_eq!(back, split);
        assert!(OodSplit::explicit(2, 4, train.clone(), vec![vec![0, 0]]).is_err());
        assert!(OodSplit::explicit(2, 4, train, vec![vec![4, 0]]).is_err());
    }

    #[test]
    fn fraction_split_is_sized_and_reproducible() {
        let a = OodSplit::from_fraction(2, 4, 0.25, &mut Rng::new(9)).unwrap();
        let b = OodSplit::from_fraction(2, 4, 0.25, &mut Rng::new(9)).unwrap();
        assert_eq!(a.test.len(), 4);
        assert_eq!(a.train.len(), 12);
        assert_eq!(a, b);
        assert!(OodSplit::from_fraction(2, 4, 1.0, &mut Rng::new(9)).is_err());
    }

    #[test]
    fn two_objects_pick_each_other() {
        let spec = TaskSpec::with_alpha(3, 2, 2, vec![1.0, 0.5, -0.25]).unwrap();
        let inst = sample_instance(&spec, &mut Rng::new(1), None).unwrap();
        for i in 0..2 {
            let other = 1 - i;
            let want: f64 = (0..3)
                .map(|s| spec.alpha[s] * inst.z_tilde[other][inst.prefs[i][s]])
                .sum();
            assert_eq!(inst.y[i], want);
        }
    }

    #[test]
    fn single_search_single_retrieval() {
        let spec = TaskSpec::with_alpha(1, 1, 6, vec![0.7]).unwrap();
        let inst = sample_instance(&spec, &mut Rng::new(2), None).unwrap();
        for i in 0..6 {
            let j = (0..6)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (inst.z[i][0] - inst.z[a][0]).abs();
                    let db = (inst.z[i][0] - inst.z[b][0]).abs();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(inst.y[i], 0.7 * inst.z_tilde[j][0]);
        }
    }

    #[test]
    fn sorted_neighbour_tie_rules() {
        let vals: [f64; 5] = [1.0, 1.0, 1.0, 0.0, 2.0];
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
        let winner = |i: usize| {
            let pos = order.iter().position(|&o| o == i).unwrap();
            sorted_neighbour(&order, pos, |j| vals[j])
        };
        assert_eq!(winner(0), 1);
        assert_eq!(winner(1), 0);
        assert_eq!(winner(2), 0);
        assert_eq!(winner(3), 0);
        assert_eq!(winner(4), 0);
    }

    #[test]
    fn generator_agrees_with_oracle_on_ties() {
        // Integer-valued features make ties common.
        let spec = TaskSpec::with_alpha(2, 3, 7, vec![0.3, -0.9]).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let mut inst = sample_instance(&spec, &mut rng, None).unwrap();
            for row in &mut inst.z {
                for v in row.iter_mut() {
                    *v = (*v * 1.5).round();
                }
            }
            let regenerated = regenerate(&spec, &inst);
            assert_eq!(
                regenerated,
                oracle_targets(&inst.z, &inst.z_tilde, &inst.prefs, &spec.alpha)
            );
        }
    }

    /// Reruns the generator's target computation on fixed features.
    fn regenerate(spec: &TaskSpec, inst: &TaskInstance) -> Vec<f64> {
        let n = inst.objects();
        let mut y = vec![0.0; n];
        let mut order: Vec<usize> = (0..n).collect();
        for (k, &a) in spec.alpha.iter().enumerate() {
            order.sort_by(|&i, &j| inst.z[i][k].total_cmp(&inst.z[j][k]).then(i.cmp(&j)));
            for (pos, &i) in order.iter().enumerate() {
                let w = sorted_neighbour(&order, pos, |j| inst.z[j][k]);
                y[i] += a * inst.z_tilde[w][inst.prefs[i][k]];
            }
        }
        y
    }

    #[test]
    fn pool_is_respected_and_empty_pool_rejected() {
        let spec = TaskSpec::with_alpha(2, 4, 8, vec![0.1, 0.2]).unwrap();
        let pool = vec![vec![2, 1], vec![3, 3]];
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let inst = sample_instance(&spec, &mut rng, Some(&pool)).unwrap();
            assert!(inst.prefs.iter().all(|p| pool.contains(p)));
        }
        assert!(sample_instance(&spec, &mut rng, Some(&[])).is_err());
    }

    #[test]
    fn input_layout() {
        let inst = TaskInstance {
            z: vec![vec![0.5, -0.5], vec![1.0, 2.0]],
            z_tilde: vec![vec![7.0, 8.0, 9.0], vec![1.0, 2.0, 3.0]],
            prefs: vec![vec![2, 0], vec![1, 1]],
            y: vec![0.0, 0.0],
            alpha: vec![1.0, 1.0],
        };
        assert_eq!(
            inst.input(),
            vec![
                0.5, -0.5, 7.0, 8.0, 9.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, //
                1.0, 2.0, 1.0, 2.0, 3.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0,
            ]
        );
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = TaskSpec::with_alpha(2, 4, 5, vec![0.3, -0.4]).unwrap();
        let mut rng = Rng::new(5);
        let insts: Vec<_> = (0..3)
            .map(|_| sample_instance(&spec, &mut rng, None).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frozen.jsonl");
        write_jsonl(&path, &insts).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"ztilde\""));
        assert_eq!(read_jsonl(&path).unwrap(), insts);
    }
}
