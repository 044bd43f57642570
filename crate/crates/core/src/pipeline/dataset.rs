use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ballworld::{augment_offset, make_template, simulate, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::ndgrad::io;
use crate::{FEATURE_DIM, FEATURE_LAYOUT_VERSION};

pub const META_FILE: &str = "meta.json";
pub const TRAJ_FILE: &str = "trajectories.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub template: String,
    pub seed: u64,
    pub offset: [f64; 2],
    pub colors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub templates: Vec<String>,
    pub count: usize,
    /// Trajectory length `L`.
    pub steps: usize,
    /// Distinct object counts `O`, ascending.
    pub objects: Vec<usize>,
    pub features: usize,
    pub feature_layout: u32,
    pub augment: bool,
    pub augment_bound: f64,
    pub seed: u64,
    pub records: Vec<RecordMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<TrajectoryRecord>,
}

/// Uniform offset in `[-bound, bound]^2`.
pub fn draw_offset<R: Rng>(rng: &mut R, bound: f64) -> [f64; 2] {
    [rng.random_range(-bound..=bound), rng.random_range(-bound..=bound)]
}

/// Simulates `count` trajectories per template, optionally shifting each by
/// a fresh offset from `[-1, 1]^2`.
pub fn gen_dataset(templates: &[&str], count: usize, augment: bool, seed: u64, steps: usize) -> Result<Dataset> {
    let tpls = templates
        .iter()
        .map(|n| make_template(n).map(|t| t.with_frames(steps)))
        .collect::<Result<Vec<_>>>()?;
    if tpls.is_empty() {
        return Err(Error::Usage("no templates given".into()));
    }
    let bound = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(tpls.len() * count);
    for tpl in &tpls {
        for _ in 0..count {
            let s = rng.next_u64();
            let off = if augment { draw_offset(&mut rng, bound) } else { [0.0, 0.0] };
            jobs.push((tpl, s, off));
        }
    }
    let records: Vec<TrajectoryRecord> = jobs
        .par_iter()
        .map(|(tpl, s, off)| {
            let rec = simulate(tpl, *s)?;
            Ok(if augment { augment_offset(&rec, *off) } else { rec })
        })
        .collect::<Result<_>>()?;
    let mut objects: Vec<usize> = records.iter().map(|r| r.x.dims()[0]).collect();
    objects.sort_unstable();
    objects.dedup();
    let meta = DatasetMeta {
        templates: templates.iter().map(|s| s.to_string()).collect(),
        count: records.len(),
        steps,
        objects,
        features: FEATURE_DIM,
        feature_layout: FEATURE_LAYOUT_VERSION,
        augment,
        augment_bound: if augment { bound } else { 0.0 },
        seed,
        records: records
            .iter()
            .map(|r| RecordMeta {
                template: r.template.clone(),
                seed: r.seed,
                offset: r.offset,
                colors: r.colors.clone(),
            })
            .collect(),
    };
    Ok(Dataset { meta, records })
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        let path = dir.join(TRAJ_FILE);
        let names: Vec<String> = (0..self.records.len()).map(|i| format!("traj{i:06}")).collect();
        let tensors: Vec<(&str, &crate::Tensor<f32>)> =
            names.iter().map(String::as_str).zip(self.records.iter().map(|r| &r.x)).collect();
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        io::write_container(BufWriter::new(f), &tensors).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        if meta.feature_layout != FEATURE_LAYOUT_VERSION {
            return Err(Error::Format(format!(
                "dataset feature layout {} does not match {}",
                meta.feature_layout, FEATURE_LAYOUT_VERSION
            )));
        }
        let path = dir.join(TRAJ_FILE);
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let tensors = io::read_container(BufReader::new(f))?;
        if tensors.len() != meta.count || meta.records.len() != meta.count {
            return Err(Error::Format(format!(
                "dataset lists {} records but holds {} trajectories",
                meta.count,
                tensors.len()
            )));
        }
        let records = tensors
            .into_iter()
            .zip(&meta.records)
            .map(|((_, x), m)| {
                if x.rank() != 3 || x.dims()[1] != meta.steps || x.dims()[2] != meta.features {
                    return Err(Error::Format(format!("trajectory with dims {:?} in dataset", x.dims())));
                }
                if m.colors.len() != x.dims()[0] {
                    return Err(Error::Format("colour list does not match object count".into()));
                }
                Ok(TrajectoryRecord {
                    x,
                    template: m.template.clone(),
                    seed: m.seed,
                    offset: m.offset,
                    colors: m.colors.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { meta, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices grouped by `(O, L)`, in order of first appearance.
    pub fn buckets(&self) -> Vec<((usize, usize), Vec<usize>)> {
        let mut out: Vec<((usize, usize), Vec<usize>)> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            let key = (r.x.dims()[0], r.x.dims()[1]);
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(i),
                None => out.push((key, vec![i])),
            }
        }
        out
    }
}
