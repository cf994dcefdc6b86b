//! Sample pools: synthetic Gaussian clusters and the binary embedding file.
//!
//! File layout (little-endian): `"MCLPOOL1"`, `u32 num_items`, `u32 dim`,
//! `u32 num_classes`, then per item `u32 class_id` and `dim × f32`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::checkpoint::Reader;

pub const POOL_MAGIC: &[u8; 8] = b"MCLPOOL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolSource {
    SyntheticGaussian,
    EmbeddingFile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    MetaTrain,
    MetaTest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolItem {
    pub embedding: Vec<f32>,
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePool {
    pub items: Vec<PoolItem>,
    pub dim: usize,
    pub source: PoolSource,
    pub split: Split,
    class_index: OnceLock<BTreeMap<u32, Vec<usize>>>,
}

impl SamplePool {
    pub fn new(items: Vec<PoolItem>, dim: usize, source: PoolSource, split: Split) -> Self {
        Self {
            items,
            dim,
            source,
            split,
            class_index: OnceLock::new(),
        }
    }

    /// Item indices per class, in ascending class order. Built on first use;
    /// do not edit `items` afterwards.
    pub fn by_class(&self) -> &BTreeMap<u32, Vec<usize>> {
        self.class_index.get_or_init(|| {
            let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, it) in self.items.iter().enumerate() {
                m.entry(it.class_id).or_default().push(i);
            }
            m
        })
    }

    pub fn class_ids(&self) -> BTreeSet<u32> {
        self.items.iter().map(|it| it.class_id).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids().len()
    }

    /// Splits by class id: the `test_classes` highest ids go to a meta-test
    /// pool, the rest stay meta-train.
    pub fn split_classes(self, test_classes: usize) -> Result<(SamplePool, SamplePool)> {
        let ids: Vec<u32> = self.class_ids().into_iter().collect();
        if test_classes == 0 || test_classes >= ids.len() {
            return Err(Error::Data(format!(
                "cannot hold out {test_classes} of {} classes",
                ids.len()
            )));
        }
        let first_test = ids[ids.len() - test_classes];
        let (test, train): (Vec<_>, Vec<_>) = self.items.into_iter().partition(|it| it.class_id >= first_test);
        let (dim, source) = (self.dim, self.source);
        let mk = |items, split| SamplePool::new(items, dim, source, split);
        Ok((mk(train, Split::MetaTrain), mk(test, Split::MetaTest)))
    }
}

/// Rejects pool pairs whose class ids overlap.
pub fn check_disjoint(train: &SamplePool, test: &SamplePool) -> Result<()> {
    let a = train.class_ids();
    if let Some(c) = test.class_ids().iter().find(|c| a.contains(c)) {
        return Err(Error::Data(format!("class {c} appears in both meta-train and meta-test pools")));
    }
    Ok(())
}

/// Class means uniform on the unit sphere, items = mean + `N(0, std²)`.
/// Class ids run from `first_class`.
pub fn make_synthetic_pool<R: Rng + ?Sized>(
    num_classes: usize,
    items_per_class: usize,
    dim: usize,
    cluster_std: f64,
    first_class: u32,
    rng: &mut R,
) -> Result<SamplePool> {
    if !(cluster_std >= 0.0) {
        return Err(Error::Config(format!("cluster_std must be non-negative, got {cluster_std}")));
    }
    if dim == 0 {
        return Err(Error::Config("pool dim must be at least 1".into()));
    }
    let mut items = Vec::with_capacity(num_classes * items_per_class);
    for c in 0..num_classes {
        let mean = loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect::<Vec<_>>();
            }
        };
        for _ in 0..items_per_class {
            let embedding = mean
                .iter()
                .map(|&m| (m + cluster_std * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            items.push(PoolItem {
                embedding,
                class_id: first_class + c as u32,
            });
        }
    }
    Ok(SamplePool::new(items, dim, PoolSource::SyntheticGaussian, Split::MetaTrain))
}

pub fn pool_to_bytes(pool: &SamplePool) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + pool.items.len() * (4 + 4 * pool.dim));
    buf.extend_from_slice(POOL_MAGIC);
    buf.extend_from_slice(&(pool.items.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(pool.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(pool.num_classes() as u32).to_le_bytes());
    for it in &pool.items {
        buf.extend_from_slice(&it.class_id.to_le_bytes());
        for x in &it.embedding {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn write_embedding_pool(pool: &SamplePool, path: &Path) -> Result<()> {
    if let Some(bad) = pool.items.iter().find(|it| it.embedding.len() != pool.dim) {
        return Err(Error::Data(format!(
            "item of class {} has {} values, pool dim is {}",
            bad.class_id,
            bad.embedding.len(),
            pool.dim
        )));
    }
    fs::write(path, pool_to_bytes(pool))?;
    Ok(())
}

pub fn pool_from_bytes(bytes: &[u8], split: Split) -> Result<SamplePool> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != POOL_MAGIC {
        return Err(Error::format(0, "bad pool magic"));
    }
    let num_items = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let classes_at = r.pos;
    let num_classes = r.u32()? as usize;
    if dim == 0 {
        return Err(Error::format(12, "pool dim is zero"));
    }
    let mut items = Vec::with_capacity(num_items.min(bytes.len() / (4 + 4 * dim)));
    for _ in 0..num_items {
        let class_id = r.u32()?;
        let raw = r.take(4 * dim)?;
        let embedding = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        items.push(PoolItem { embedding, class_id });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let pool = SamplePool::new(items, dim, PoolSource::EmbeddingFile, split);
    if pool.num_classes() != num_classes {
        return Err(Error::format(
            classes_at as u64,
            format!("header declares {num_classes} classes, items use {}", pool.num_classes()),
        ));
    }
    Ok(pool)
}

pub fn load_embedding_pool(path: &Path, split: Split) -> Result<SamplePool> {
    pool_from_bytes(&fs::read(path)?, split)
}
