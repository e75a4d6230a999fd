//! Planted-structure corpora whose links are generated from node features.
//!
//! Every aspect owns a latent unit vector. A product's feature is the
//! normalized sum of its aspects' latents plus Gaussian noise, so feature
//! similarity predicts links. "Tail" aspects sit on a few dedicated
//! products each, which makes them natural unseen aspects.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{aspect_key, build_graph, AspectPair, BuiltGraph, FeatureStore, ProductRecord, SessionKind, SessionRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub categories: usize,
    pub products: usize,
    pub common_aspects: usize,
    pub common_per_product: usize,
    /// When set, each product draws its common-aspect count uniformly from
    /// `common_min..=common_per_product`.
    pub common_min: Option<usize>,
    /// Common aspect `i` belongs to category `i % categories`; products draw
    /// only from their category's pool and each tail aspect stays inside
    /// one category.
    pub category_pools: bool,
    pub tail_aspects: usize,
    /// Products per tail aspect; tail products are disjoint.
    pub tail_support: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub sessions: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            categories: 3,
            products: 30,
            common_aspects: 6,
            common_per_product: 2,
            common_min: None,
            category_pools: false,
            tail_aspects: 4,
            tail_support: 2,
            feature_dim: 16,
            noise: 0.1,
            sessions: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Planted {
    pub products: Vec<ProductRecord>,
    pub sessions: Vec<SessionRecord>,
    pub built: BuiltGraph,
    pub features: FeatureStore,
    pub tail_aspect_keys: Vec<String>,
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(v)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn planted(cfg: &PlantedConfig) -> Result<Planted> {
    if cfg.categories == 0 || cfg.feature_dim == 0 || cfg.common_aspects < cfg.common_per_product {
        return Err(Error::Config("planted corpus needs categories, a feature dimension and enough common aspects".into()));
    }
    if cfg.tail_aspects * cfg.tail_support > cfg.products {
        return Err(Error::Config("not enough products for the tail aspects".into()));
    }
    let category_of = |p: usize| p % cfg.categories;
    let pool: Vec<Vec<usize>> = (0..cfg.categories)
        .map(|c| (0..cfg.common_aspects).filter(|&i| !cfg.category_pools || i % cfg.categories == c).collect())
        .collect();
    if pool.iter().any(|q| q.len() < cfg.common_per_product) {
        return Err(Error::Config("a category pool is smaller than common_per_product".into()));
    }
    // Tail aspect t sits on `tail_support` products of one category.
    let mut tail_of = vec![None; cfg.products];
    let mut next = vec![0usize; cfg.categories];
    for t in 0..cfg.tail_aspects {
        for _ in 0..cfg.tail_support {
            let p = if cfg.category_pools {
                let c = t % cfg.categories;
                let p = c + next[c] * cfg.categories;
                next[c] += 1;
                p
            } else {
                t * cfg.tail_support + next[0]
            };
            if !cfg.category_pools {
                next[0] = (next[0] + 1) % cfg.tail_support;
            }
            match tail_of.get_mut(p) {
                Some(slot) => *slot = Some(t),
                None => return Err(Error::Config("not enough products in a category for its tail aspects".into())),
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<(String, String)> = (0..cfg.common_aspects)
        .map(|i| ("common".to_string(), format!("c{i}")))
        .chain((0..cfg.tail_aspects).map(|i| ("tail".to_string(), format!("t{i}"))))
        .collect();
    let latent: Vec<Vec<f64>> = names.iter().map(|_| unit(&mut rng, cfg.feature_dim)).collect();

    let mut products = Vec::with_capacity(cfg.products);
    let mut features = FeatureStore::new(cfg.feature_dim);
    for p in 0..cfg.products {
        let mut common = pool[category_of(p)].clone();
        common.shuffle(&mut rng);
        let k = match cfg.common_min {
            Some(lo) => rng.random_range(lo.min(cfg.common_per_product)..=cfg.common_per_product),
            None => cfg.common_per_product,
        };
        let mut mine: Vec<usize> = common[..k].to_vec();
        mine.sort_unstable();
        if let Some(t) = tail_of[p] {
            mine.push(cfg.common_aspects + t);
        }
        let key = format!("prod{p:03}");
        let mut f = vec![0.0; cfg.feature_dim];
        for &a in &mine {
            f.iter_mut().zip(&latent[a]).for_each(|(x, l)| *x += l);
        }
        for x in &mut f {
            *x += cfg.noise * rng.sample::<f64, _>(StandardNormal);
        }
        features.insert(key.clone(), normalize(f))?;
        products.push(ProductRecord {
            product_key: key,
            category_key: format!("cat{}", category_of(p)),
            title: format!("product {p}"),
            description: String::new(),
            aspects: mine.iter().map(|&a| AspectPair { attribute: names[a].0.clone(), value: names[a].1.clone() }).collect(),
        });
    }
    for (i, (a, v)) in names.iter().enumerate() {
        features.insert(aspect_key(a, v), latent[i].clone())?;
    }
    for c in 0..cfg.categories {
        let f = if cfg.category_pools {
            let mut f = vec![0.0; cfg.feature_dim];
            for &a in &pool[c] {
                f.iter_mut().zip(&latent[a]).for_each(|(x, l)| *x += l);
            }
            normalize(f)
        } else {
            unit(&mut rng, cfg.feature_dim)
        };
        features.insert(format!("cat{c}"), f)?;
    }

    let mut sessions = Vec::with_capacity(cfg.sessions);
    for s in 0..cfg.sessions {
        let cat = s % cfg.categories;
        let mut pool: Vec<&ProductRecord> = products.iter().filter(|p| p.category_key == format!("cat{cat}")).collect();
        pool.shuffle(&mut rng);
        let n = rng.random_range(2..=4).min(pool.len());
        sessions.push(SessionRecord {
            user_key: format!("user{s}"),
            kind: if s % 2 == 0 { SessionKind::View } else { SessionKind::Buy },
            product_keys: pool[..n].iter().map(|p| p.product_key.clone()).collect(),
        });
    }
    let built = build_graph(&products, &sessions)?;
    features.check_covers(&built.graph)?;
    let tail_aspect_keys = names[cfg.common_aspects..].iter().map(|(a, v)| aspect_key(a, v)).collect();
    Ok(Planted { products, sessions, built, features, tail_aspect_keys })
}
