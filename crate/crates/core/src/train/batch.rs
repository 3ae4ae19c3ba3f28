//! Turning shot records into network inputs and distillation targets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{Manifest, ShotRecord};
use crate::error::Result;
use crate::media::frame::Planes;
use crate::media::{ClipStack, MediaStore};
use crate::model::{ModelConfig, NetInput, PassInput};
use crate::scalar::Scalar;
use crate::subject::{oracle_teacher, TeacherMapLoader};
use crate::tensor::Tensor;
use crate::train::config::TeacherConfig;

/// Sampled clips of one shot for both passes.
#[derive(Debug, Clone)]
pub struct ShotSample {
    pub cls: ClipStack,
    pub var: Option<ClipStack>,
}

/// Mixes a run seed with an epoch and a shot index into an independent stream seed.
pub fn shot_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws the classification clips and, when the model has a variance map, an
/// independent set of variance-map clips.
pub fn sample_shot(media: &MediaStore, record: &ShotRecord, config: &ModelConfig, train: bool, seed: u64) -> Result<ShotSample> {
    let cls = media.build_clip_stack(record, &config.cls_sampling(train), seed)?;
    let var = if config.variance_map {
        Some(media.build_clip_stack(record, &config.var_sampling(train), shot_seed(seed, 0, 1))?)
    } else {
        None
    };
    Ok(ShotSample { cls, var })
}

pub fn net_input<T: Scalar>(samples: &[ShotSample], config: &ModelConfig) -> Result<NetInput<T>> {
    let cls: Vec<&ClipStack> = samples.iter().map(|s| &s.cls).collect();
    let var: Option<Vec<&ClipStack>> = samples.iter().map(|s| s.var.as_ref()).collect();
    Ok(NetInput {
        cls: PassInput::from_stacks(&cls, config.uses_flow())?,
        var: match var {
            Some(v) if config.variance_map => Some(PassInput::from_stacks(&v, config.uses_flow())?),
            _ => None,
        },
    })
}

/// Distillation targets aligned with sampled clips.
pub struct TeacherMaps {
    loader: Option<TeacherMapLoader>,
    cache: BTreeMap<(String, u64), Planes>,
}

impl TeacherMaps {
    pub fn new(config: &TeacherConfig, manifest: &Manifest) -> Self {
        let loader = match config {
            TeacherConfig::Files { dir } => Some(TeacherMapLoader::new(resolve(dir, manifest.base_dir()))),
            TeacherConfig::Oracle => None,
        };
        Self { loader, cache: BTreeMap::new() }
    }

    pub fn clamped_count(&self) -> usize {
        self.loader.as_ref().map_or(0, TeacherMapLoader::clamped_count)
    }

    /// One map per clip anchor, cropped like the clip.
    pub fn for_stack(&mut self, stack: &ClipStack) -> Result<Vec<Planes>> {
        let mut out = Vec::with_capacity(stack.n_clips);
        for (i, &anchor) in stack.anchors.iter().enumerate() {
            match &self.loader {
                None => out.push(oracle_teacher(&stack.rgb[i][0]).mask().clone()),
                Some(loader) => {
                    let key = (stack.shot_id.clone(), anchor);
                    if !self.cache.contains_key(&key) {
                        let m = loader.load_one(&stack.shot_id, anchor)?;
                        self.cache.insert(key.clone(), m.mask().clone());
                    }
                    out.push(stack.align(&self.cache[&key])?);
                }
            }
        }
        Ok(out)
    }

    /// `[S * n, 1, H, W]` over the classification clips of `samples`.
    pub fn batch<T: Scalar>(&mut self, samples: &[ShotSample]) -> Result<Tensor<T>> {
        let mut maps = Vec::new();
        for s in samples {
            maps.extend(self.for_stack(&s.cls)?);
        }
        Planes::batch(maps.iter())
    }
}

fn resolve(dir: &Path, base: Option<&Path>) -> PathBuf {
    match base {
        Some(b) if dir.is_relative() => b.join(dir),
        _ => dir.to_path_buf(),
    }
}

