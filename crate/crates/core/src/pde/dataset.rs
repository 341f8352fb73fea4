//! Synthetic operator-learning datasets.
//!
//! Raw fields are stored in physical units; normalisation statistics live
//! next to them and are applied on demand. On disk a dataset is a directory
//! holding `manifest.json`, `inputs.tns`, `targets.tns` and `coords.tns`,
//! each stacked along a leading sample axis.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fields::{SmoothField1d, SmoothField2d, DEFAULT_MAX_MODE};
use super::solvers::{
    green_kernel_1d_poisson, interior_grid_1d, poisson_1d_solution, solve_darcy_2d, spectral_shift,
    DARCY_MAX_N,
};
use crate::autodiff::GridSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Length scale of every sampled input field.
pub const FIELD_LENGTH_SCALE: f64 = 0.1;
/// Periodic translation applied by the advection task, in domain units.
pub const ADVECTION_SHIFT: f64 = 0.1;
/// Darcy permeability above and below the zero level set of the sampled field.
pub const DARCY_HIGH: f64 = 12.0;
pub const DARCY_LOW: f64 = 3.0;
const MIN_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Poisson1d,
    Darcy2d,
    Advection1d,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Poisson1d, Task::Darcy2d, Task::Advection1d];

    pub fn name(self) -> &'static str {
        match self {
            Task::Poisson1d => "poisson1d",
            Task::Darcy2d => "darcy2d",
            Task::Advection1d => "advection1d",
        }
    }

    pub fn d_phys(self) -> usize {
        match self {
            Task::Darcy2d => 2,
            _ => 1,
        }
    }

    /// Number of points for resolution `n`.
    pub fn points(self, n: usize) -> usize {
        match self {
            Task::Darcy2d => n * n,
            _ => n,
        }
    }

    /// Row-major point coordinates, shape `[points, d_phys]`.
    pub fn coords(self, n: usize) -> Tensor {
        match self {
            Task::Poisson1d => Tensor::from_vec(&[n, 1], interior_grid_1d(n)).expect("shape"),
            Task::Advection1d => {
                Tensor::from_vec(&[n, 1], (0..n).map(|i| i as f64 / n as f64).collect()).expect("shape")
            }
            Task::Darcy2d => {
                let x = interior_grid_1d(n);
                let mut data = Vec::with_capacity(2 * n * n);
                for xi in &x {
                    for yj in &x {
                        data.push(*xi);
                        data.push(*yj);
                    }
                }
                Tensor::from_vec(&[n * n, 2], data).expect("shape")
            }
        }
    }

    /// The regular grid behind the points, for finite-difference metrics.
    pub fn grid(self, n: usize) -> Result<GridSpec> {
        match self {
            Task::Poisson1d => GridSpec::new(&[n], &[1.0 / (n + 1) as f64]),
            Task::Advection1d => GridSpec::new(&[n], &[1.0 / n as f64]),
            Task::Darcy2d => {
                let h = 1.0 / (n + 1) as f64;
                GridSpec::new(&[n, n], &[h, h])
            }
        }
    }

    fn check_resolution(self, n: usize) -> Result<()> {
        let ok = match self {
            Task::Poisson1d => n >= 2,
            Task::Advection1d => n >= 4,
            Task::Darcy2d => (2..=DARCY_MAX_N).contains(&n),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("resolution n = {n} is not supported by {self}")))
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown task `{s}`")))
    }
}

/// Mixes the bits of `x`; used to derive independent per-sample seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 + 1))
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

fn channel_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = t.last_dim();
    let rows = (t.numel() / c) as f64;
    let mut mean = vec![0.0; c];
    for chunk in t.data().chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(chunk) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; c];
    for chunk in t.data().chunks_exact(c) {
        for k in 0..c {
            var[k] += (chunk[k] - mean[k]).powi(2);
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / rows).sqrt();
            if s < MIN_STD {
                1.0
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}

fn affine(t: &Tensor, mean: &[f64], std: &[f64], forward: bool) -> Result<Tensor> {
    let c = t.last_dim();
    if c != mean.len() {
        return Err(Error::dim("normalization", t.shape(), &[mean.len()]));
    }
    let mut out = t.clone();
    for chunk in out.data_mut().chunks_exact_mut(c) {
        for k in 0..c {
            chunk[k] = if forward {
                (chunk[k] - mean[k]) / std[k]
            } else {
                chunk[k] * std[k] + mean[k]
            };
        }
    }
    Ok(out)
}

impl Normalization {
    pub fn fit(inputs: &Tensor, targets: &Tensor) -> Self {
        let (input_mean, input_std) = channel_stats(inputs);
        let (target_mean, target_std) = channel_stats(targets);
        Self { input_mean, input_std, target_mean, target_std }
    }

    pub fn normalize_inputs(&self, x: &Tensor) -> Result<Tensor> {
        affine(x, &self.input_mean, &self.input_std, true)
    }

    pub fn normalize_targets(&self, y: &Tensor) -> Result<Tensor> {
        affine(y, &self.target_mean, &self.target_std, true)
    }

    pub fn denormalize_targets(&self, y: &Tensor) -> Result<Tensor> {
        affine(y, &self.target_mean, &self.target_std, false)
    }

    /// Writes `normalization.json` into `dir`, next to a checkpoint.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(NORMALIZATION_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Reads `normalization.json` from `dir` if present.
    pub fn load(dir: impl AsRef<Path>) -> Result<Option<Self>> {
        let path = dir.as_ref().join(NORMALIZATION_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }
}

pub const NORMALIZATION_FILE: &str = "normalization.json";

/// One sample's input: point coordinates, features and the uniform
/// quadrature weight `|domain| / N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub coords: Tensor,
    pub features: Tensor,
    pub quad_weight: f64,
}

impl PointSet {
    pub fn new(coords: Tensor, features: Tensor) -> Result<Self> {
        if coords.rank() != 2 || features.rank() != 2 || coords.rows() != features.rows() {
            return Err(Error::dim("point_set", coords.shape(), features.shape()));
        }
        let n = coords.rows();
        if n == 0 {
            return Err(Error::Contract("a point set needs at least one point".into()));
        }
        if coords.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Domain("coordinates must lie in the unit domain".into()));
        }
        Ok(Self { coords, features, quad_weight: 1.0 / n as f64 })
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: Task,
    pub n: usize,
    pub count: usize,
    pub seed: u64,
    pub points: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub d_phys: usize,
    pub normalization: Normalization,
}

/// Input and target fields on shared coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorDataset {
    pub task: Task,
    pub n: usize,
    pub seed: u64,
    /// `[points, d_phys]`, shared by every sample.
    pub coords: Tensor,
    /// Raw inputs `[count, points, d_in]`.
    pub inputs: Tensor,
    /// Raw targets `[count, points, d_out]`.
    pub targets: Tensor,
    pub normalization: Normalization,
}

fn generate_sample(task: Task, n: usize, seed: u64, green: Option<&Tensor>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task {
        Task::Poisson1d => {
            let field = SmoothField1d::new(FIELD_LENGTH_SCALE, DEFAULT_MAX_MODE, &mut rng)?;
            let f: Vec<f64> = interior_grid_1d(n).iter().map(|&x| field.eval(x)).collect();
            let u = poisson_1d_solution(green.expect("green kernel"), &f)?;
            Ok((f, u))
        }
        Task::Advection1d => {
            // Strictly below Nyquist, so the spectral shift is exact.
            let max_mode = DEFAULT_MAX_MODE.min(n / 2 - 1);
            let field = SmoothField1d::new(FIELD_LENGTH_SCALE, max_mode, &mut rng)?;
            let u0: Vec<f64> = (0..n).map(|i| field.eval(i as f64 / n as f64)).collect();
            let u1 = spectral_shift(&u0, ADVECTION_SHIFT);
            Ok((u0, u1))
        }
        Task::Darcy2d => {
            let field = SmoothField2d::new(FIELD_LENGTH_SCALE, 16, &mut rng)?;
            let x = interior_grid_1d(n);
            let mut a = Vec::with_capacity(n * n);
            for xi in &x {
                for yj in &x {
                    a.push(if field.eval(*xi, *yj) > 0.0 { DARCY_HIGH } else { DARCY_LOW });
                }
            }
            let a = Tensor::from_vec(&[n, n], a)?;
            let u = solve_darcy_2d(&a, &Tensor::ones(&[n, n]))?;
            Ok((a.into_data(), u.into_data()))
        }
    }
}

/// Generates `count` samples of `task` at resolution `n`. Samples are
/// produced in parallel from per-sample seeds, so the result does not depend
/// on scheduling. Normalisation is fitted on the whole set.
pub fn make_dataset(task: Task, count: usize, n: usize, seed: u64) -> Result<OperatorDataset> {
    if count == 0 {
        return Err(Error::Contract("dataset count must be at least 1".into()));
    }
    task.check_resolution(n)?;
    let green = match task {
        Task::Poisson1d => Some(green_kernel_1d_poisson(n)?),
        _ => None,
    };
    let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..count)
        .into_par_iter()
        .map(|i| generate_sample(task, n, sample_seed(seed, i), green.as_ref()))
        .collect::<Result<_>>()?;
    let points = task.points(n);
    let mut inputs = Vec::with_capacity(count * points);
    let mut targets = Vec::with_capacity(count * points);
    for (x, y) in samples {
        inputs.extend(x);
        targets.extend(y);
    }
    let inputs = Tensor::from_vec(&[count, points, 1], inputs)?;
    let targets = Tensor::from_vec(&[count, points, 1], targets)?;
    let normalization = Normalization::fit(&inputs, &targets);
    Ok(OperatorDataset { task, n, seed, coords: task.coords(n), inputs, targets, normalization })
}

impl OperatorDataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> usize {
        self.coords.rows()
    }

    pub fn d_in(&self) -> usize {
        self.inputs.last_dim()
    }

    pub fn d_out(&self) -> usize {
        self.targets.last_dim()
    }

    pub fn d_phys(&self) -> usize {
        self.coords.last_dim()
    }

    pub fn grid(&self) -> Result<GridSpec> {
        self.task.grid(self.n)
    }

    /// Sample `i` as a point set and its raw target.
    pub fn sample(&self, i: usize) -> Result<(PointSet, Tensor)> {
        if i >= self.len() {
            return Err(Error::Contract(format!("sample {i} out of {}", self.len())));
        }
        let x = self.inputs.select_leading(&[i]).reshape(&[self.points(), self.d_in()])?;
        let y = self.targets.select_leading(&[i]).reshape(&[self.points(), self.d_out()])?;
        Ok((PointSet::new(self.coords.clone(), x)?, y))
    }

    /// The samples at `idx`, keeping this dataset's normalisation.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!("sample {bad} out of {}", self.len())));
        }
        Ok(Self {
            inputs: self.inputs.select_leading(idx),
            targets: self.targets.select_leading(idx),
            ..self.clone()
        })
    }

    pub fn refit_normalization(&mut self) {
        self.normalization = Normalization::fit(&self.inputs, &self.targets);
    }

    /// Shuffled train/test split. The training part gets statistics fitted
    /// on itself and the test part reuses them.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Contract(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        self.split_count(self.len() - n_test, seed)
    }

    /// As [`split`](Self::split) with an explicit training count.
    pub fn split_count(&self, n_train: usize, seed: u64) -> Result<(Self, Self)> {
        if n_train == 0 || n_train > self.len() {
            return Err(Error::Contract(format!("cannot take {n_train} training samples of {}", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut train = self.select(&idx[..n_train])?;
        train.refit_normalization();
        let mut test = self.select(&idx[n_train..])?;
        test.normalization = train.normalization.clone();
        Ok((train, test))
    }

    pub fn normalized_inputs(&self) -> Result<Tensor> {
        self.normalization.normalize_inputs(&self.inputs)
    }

    pub fn normalized_targets(&self) -> Result<Tensor> {
        self.normalization.normalize_targets(&self.targets)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            task: self.task,
            n: self.n,
            count: self.len(),
            seed: self.seed,
            points: self.points(),
            d_in: self.d_in(),
            d_out: self.d_out(),
            d_phys: self.d_phys(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.inputs.save(dir.join("inputs.tns"))?;
        self.targets.save(dir.join("targets.tns"))?;
        let (p, d) = (self.points(), self.d_phys());
        let mut stacked = Vec::with_capacity(self.len() * p * d);
        for _ in 0..self.len() {
            stacked.extend_from_slice(self.coords.data());
        }
        Tensor::from_vec(&[self.len(), p, d], stacked)?.save(dir.join("coords.tns"))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        let inputs = Tensor::load(dir.join("inputs.tns"))?;
        let targets = Tensor::load(dir.join("targets.tns"))?;
        let coords_all = Tensor::load(dir.join("coords.tns"))?;
        let expect = |name: &str, t: &Tensor, shape: [usize; 3]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Load {
                    name: name.into(),
                    reason: format!("shape {:?}, manifest implies {:?}", t.shape(), shape),
                });
            }
            Ok(())
        };
        expect("inputs.tns", &inputs, [m.count, m.points, m.d_in])?;
        expect("targets.tns", &targets, [m.count, m.points, m.d_out])?;
        expect("coords.tns", &coords_all, [m.count, m.points, m.d_phys])?;
        let per = m.points * m.d_phys;
        let first = &coords_all.data()[..per];
        if coords_all.data().chunks_exact(per).any(|c| c != first) {
            return Err(Error::Load {
                name: "coords.tns".into(),
                reason: "samples do not share coordinates".into(),
            });
        }
        let stats = &m.normalization;
        if stats.input_mean.len() != m.d_in
            || stats.input_std.len() != m.d_in
            || stats.target_mean.len() != m.d_out
            || stats.target_std.len() != m.d_out
            || stats.input_std.iter().chain(&stats.target_std).any(|&s| !(s > 0.0))
        {
            return Err(Error::Load {
                name: "manifest.json".into(),
                reason: "normalization statistics do not match the channels or are not positive".into(),
            });
        }
        Ok(Self {
            task: m.task,
            n: m.n,
            seed: m.seed,
            coords: Tensor::from_vec(&[m.points, m.d_phys], first.to_vec())?,
            inputs,
            targets,
            normalization: m.normalization,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_roundtrip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
        assert!("heat".parse::<Task>().is_err());
    }

    #[test]
    fn seeds_differ_per_sample() {
        let s: Vec<u64> = (0..100).map(|i| sample_seed(7, i)).collect();
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 100);
        assert_ne!(sample_seed(7, 0), sample_seed(8, 0));
    }

    #[test]
    fn poisson_targets_are_green_times_forcing() {
        let ds = make_dataset(Task::Poisson1d, 3, 32, 5).unwrap();
        let g = green_kernel_1d_poisson(32).unwrap();
        for s in 0..3 {
            let (ps, y) = ds.sample(s).unwrap();
            let u = poisson_1d_solution(&g, ps.features.data()).unwrap();
            for (a, b) in u.iter().zip(y.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert!((ps.quad_weight - 1.0 / 32.0).abs() < 1e-15);
        }
    }

    #[test]
    fn advection_target_is_analytic_shift() {
        let n = 32;
        let ds = make_dataset(Task::Advection1d, 2, n, 11).unwrap();
        for s in 0..2 {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(11, s));
            let field = SmoothField1d::new(FIELD_LENGTH_SCALE, n / 2 - 1, &mut rng).unwrap();
            let (_, y) = ds.sample(s).unwrap();
            for i in 0..n {
                let x = i as f64 / n as f64;
                assert!((y.data()[i] - field.eval(x - ADVECTION_SHIFT)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn darcy_inputs_are_two_valued() {
        let ds = make_dataset(Task::Darcy2d, 2, 8, 1).unwrap();
        assert_eq!(ds.inputs.shape(), [2, 64, 1]);
        assert_eq!(ds.coords.shape(), [64, 2]);
        assert!(ds.inputs.data().iter().all(|&a| a == DARCY_HIGH || a == DARCY_LOW));
        assert!(ds.targets.data().iter().all(|&u| u > 0.0));
        assert!(make_dataset(Task::Darcy2d, 1, 65, 1).is_err());
    }

    #[test]
    fn deterministic_and_count_checked() {
        let a = make_dataset(Task::Poisson1d, 4, 16, 3).unwrap();
        let b = make_dataset(Task::Poisson1d, 4, 16, 3).unwrap();
        assert_eq!(a, b);
        assert!(make_dataset(Task::Poisson1d, 0, 16, 3).is_err());
    }

    #[test]
    fn split_normalizes_training_part() {
        let ds = make_dataset(Task::Advection1d, 20, 16, 2).unwrap();
        let (train, test) = ds.split(0.25, 9).unwrap();
        assert_eq!((train.len(), test.len()), (15, 5));
        assert_eq!(train.normalization, test.normalization);
        let x = train.normalized_inputs().unwrap();
        let (mean, std) = channel_stats(&x);
        assert!(mean[0].abs() < 1e-10);
        assert!((std[0] - 1.0).abs() < 1e-10);
        let y = train.normalized_targets().unwrap();
        let back = train.normalization.denormalize_targets(&y).unwrap();
        assert!(back.max_abs_diff(&train.targets) < 1e-12);
    }

    #[test]
    fn constant_channel_falls_back_to_unit_std() {
        let x = Tensor::full(&[3, 4, 1], 2.0);
        let n = Normalization::fit(&x, &x);
        assert_eq!(n.input_std, vec![1.0]);
        assert_eq!(n.input_mean, vec![2.0]);
    }

    #[test]
    fn save_load_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_dataset(Task::Darcy2d, 3, 6, 4).unwrap();
        ds.save(dir.path()).unwrap();
        let back = OperatorDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);

        Tensor::zeros(&[2, 36, 1]).save(dir.path().join("targets.tns")).unwrap();
        match OperatorDataset::load(dir.path()) {
            Err(Error::Load { name, .. }) => assert_eq!(name, "targets.tns"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn point_set_checks_domain() {
        let c = Tensor::from_vec(&[2, 1], vec![0.0, 1.5]).unwrap();
        assert!(PointSet::new(c, Tensor::zeros(&[2, 1])).is_err());
    }
}
