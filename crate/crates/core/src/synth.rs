//! Seeded synthetic re-identification data.
//!
//! Identities are unit centroids; each identity owns several tracklets whose
//! centers scatter around the centroid, and each tracklet holds images
//! scattered around its center. Every image is observed by `n_models`
//! ensemble members, each adding independent noise. The first tracklet of
//! every identity is held out as the query tracklet.
//!
//! Spreads are expressed as the expected norm of the perturbation, so the
//! per-coordinate standard deviation is `sigma / sqrt(d)`.
//!
//! Random numbers come from PCG64 (XSL-RR 128/64) with state `seed` and the
//! reference default stream; normals use the cosine branch of Box-Muller on
//! two consecutive draws. The draw order is fixed: centroids, then per
//! identity and tracklet the center, then per image the base vector followed
//! by each member's noise.

use rand_core::Rng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::dex::EnsembleInput;
use crate::embedding::{normalize_in_place, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::meta::{CatalogMeta, MetaRecord, TrackletTable};
use crate::metrics::GroundTruth;

const PCG_DEFAULT_STREAM: u128 = 0x0a02_bdbf_7bb3_c0a7_ac28_fa16_a64a_bf96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_ids: usize,
    pub tracklets_per_id: usize,
    /// Inclusive `[min, max]` image count of gallery tracklets.
    pub images_per_tracklet: [usize; 2],
    pub d: usize,
    pub sigma_id: f64,
    pub sigma_track: f64,
    pub n_models: usize,
    pub scale_jitter: f64,
    pub queries_per_id: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_ids: 100,
            tracklets_per_id: 3,
            images_per_tracklet: [4, 8],
            d: 128,
            sigma_id: 1.15,
            sigma_track: 0.6,
            n_models: 3,
            scale_jitter: 0.9,
            queries_per_id: 2,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.n_ids == 0 || self.n_models == 0 || self.queries_per_id == 0 || self.d == 0 {
            return bad("n_ids, n_models, queries_per_id and d must be >= 1");
        }
        if self.tracklets_per_id < 2 {
            return bad("tracklets_per_id must be >= 2 (one query tracklet plus gallery)");
        }
        let [lo, hi] = self.images_per_tracklet;
        if lo == 0 || lo > hi {
            return bad("images_per_tracklet must be a range 1 <= min <= max");
        }
        for s in [self.sigma_id, self.sigma_track, self.scale_jitter] {
            if !(s.is_finite() && s >= 0.0) {
                return bad("spreads must be finite and >= 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub query: EnsembleInput,
    pub gallery: EnsembleInput,
    pub query_meta: CatalogMeta,
    pub gallery_meta: CatalogMeta,
    pub tracklets: TrackletTable,
    pub truth: GroundTruth,
}

struct Sampler {
    rng: Pcg64,
}

impl Sampler {
    fn new(seed: u64) -> Self {
        Self {
            rng: Pcg64::new(seed as u128, PCG_DEFAULT_STREAM),
        }
    }

    /// Uniform in [0, 1) with 53 random bits.
    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[lo, hi]`.
    fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.rng.next_u64() % (hi - lo + 1) as u64) as usize
    }

    fn perturbed(&mut self, center: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let scale = sigma / (center.len() as f64).sqrt();
        let mut v: Vec<f64> = center.iter().map(|c| c + scale * self.normal()).collect();
        if !normalize_in_place(&mut v) {
            return Err(Error::InvalidSpec("generated a zero vector".into()));
        }
        Ok(v)
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut s = Sampler::new(spec.seed);
    let zero = vec![0.0; spec.d];
    let centroids = (0..spec.n_ids)
        .map(|_| s.perturbed(&zero, 1.0))
        .collect::<Result<Vec<_>>>()?;
    build(spec, &centroids, s)
}

/// Like [`generate`] but with caller-supplied identity centroids.
pub fn generate_with_centroids(spec: &SynthSpec, centroids: &[Vec<f64>]) -> Result<SynthDataset> {
    spec.validate()?;
    if centroids.len() != spec.n_ids || centroids.iter().any(|c| c.len() != spec.d) {
        return Err(Error::InvalidSpec(format!(
            "expected {} centroids of dimension {}",
            spec.n_ids, spec.d
        )));
    }
    let mut unit = centroids.to_vec();
    for c in &mut unit {
        if !normalize_in_place(c) {
            return Err(Error::InvalidSpec("zero centroid".into()));
        }
    }
    build(spec, &unit, Sampler::new(spec.seed))
}

#[derive(Default)]
struct Split {
    members: Vec<Vec<f64>>,
    ids: Vec<String>,
    meta: Vec<MetaRecord>,
}

fn build(spec: &SynthSpec, centroids: &[Vec<f64>], mut s: Sampler) -> Result<SynthDataset> {
    let mut query = Split {
        members: vec![Vec::new(); spec.n_models],
        ..Split::default()
    };
    let mut gallery = Split {
        members: vec![Vec::new(); spec.n_models],
        ..Split::default()
    };
    let [lo, hi] = spec.images_per_tracklet;
    for (id, centroid) in centroids.iter().enumerate() {
        for t in 0..spec.tracklets_per_id {
            let center = s.perturbed(centroid, spec.sigma_id)?;
            let (split, count, prefix) = if t == 0 {
                (&mut query, spec.queries_per_id, 'q')
            } else {
                (&mut gallery, s.int_in(lo, hi), 'g')
            };
            for i in 0..count {
                let base = s.perturbed(&center, spec.sigma_track)?;
                for m in split.members.iter_mut() {
                    m.extend(s.perturbed(&base, spec.scale_jitter)?);
                }
                let image_id = format!("{prefix}{id:04}_{t}_{i}");
                split.ids.push(image_id.clone());
                split.meta.push(MetaRecord {
                    image_id,
                    tracklet_id: format!("t{id:04}_{t}"),
                    identity_id: Some(format!("id{id:04}")),
                    camera_id: Some(format!("c{t}")),
                });
            }
        }
    }
    let ensemble = |split: &Split| -> Result<EnsembleInput> {
        let members = split
            .members
            .iter()
            .map(|data| EmbeddingMatrix::new(data.clone(), spec.d, split.ids.clone()))
            .collect::<Result<Vec<_>>>()?;
        EnsembleInput::new(members)
    };
    let query_meta = CatalogMeta::new(query.meta.clone())?;
    let gallery_meta = CatalogMeta::new(gallery.meta.clone())?;
    Ok(SynthDataset {
        query: ensemble(&query)?,
        gallery: ensemble(&gallery)?,
        tracklets: gallery_meta.tracklet_table(),
        truth: GroundTruth::from_meta(&query_meta, &gallery_meta)?,
        query_meta,
        gallery_meta,
    })
}
