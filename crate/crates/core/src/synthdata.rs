//! Procedural desk-scale scenes: a perspective ground plane composited with
//! fronto-parallel rectangles and ellipses, inverse-depth shading, dense
//! ground-truth depth, LiDAR-like sparse masks, and a horizontally displaced
//! auxiliary view produced by forward warping.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub depth_min: f32,
    pub depth_max: f32,
    pub noise_amp: f32,
    pub keep_rate: f32,
    /// Baseline times focal length, in pixel-meters; disparity = bf / depth.
    pub bf: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 128,
            objects_min: 2,
            objects_max: 6,
            depth_min: 0.5,
            depth_max: 80.0,
            noise_amp: 0.02,
            keep_rate: 0.15,
            bf: 64.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "scene size {} must be a positive multiple of 32",
                self.size
            )));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return Err(Error::Config("depth range must satisfy 0 < min < max".into()));
        }
        if self.objects_max < self.objects_min {
            return Err(Error::Config("objects_max below objects_min".into()));
        }
        if !(0.0..=1.0).contains(&self.keep_rate) {
            return Err(Error::Config("keep_rate must lie in [0, 1]".into()));
        }
        if self.bf < 0.0 || !self.bf.is_finite() {
            return Err(Error::Config("bf must be non-negative".into()));
        }
        Ok(())
    }
}

/// One scene: RGB image in [0,1], dense depth in meters, validity mask,
/// optional auxiliary view.
#[derive(Debug, Clone)]
pub struct DepthSample {
    pub image: Tensor,
    pub depth: Tensor,
    pub mask: Tensor,
    pub aux_image: Option<Tensor>,
}

fn shade(depth: f32) -> f32 {
    0.1 + 0.9 * (1.0 / depth).min(1.0).sqrt()
}

/// Deterministic scene composition for (spec.seed, index): ground plane with
/// depth increasing toward the top of the image, then objects at random
/// depths with the nearer one winning overlaps.
pub fn gen_scene(spec: &SceneSpec, index: u64) -> Result<DepthSample> {
    spec.validate()?;
    let n = spec.size;
    let mut r = rng::stream(spec.seed, "scene", index);

    let near: f32 = r.gen_range(2.0..5.0);
    let far: f32 = r.gen_range(40.0..spec.depth_max);
    let plane_albedo: [f32; 3] = [r.gen_range(0.25..0.95), r.gen_range(0.25..0.95), r.gen_range(0.25..0.95)];

    let inv_near = 1.0 / near;
    let inv_far = 1.0 / far;
    let mut depth = vec![0.0f32; n * n];
    for y in 0..n {
        let frac = y as f32 / (n - 1) as f32;
        let inv = inv_far + (inv_near - inv_far) * frac;
        let d = (1.0 / inv).clamp(spec.depth_min, spec.depth_max);
        depth[y * n..(y + 1) * n].fill(d);
    }
    let mut albedo = vec![[0.0f32; 3]; n * n];
    for a in albedo.iter_mut() {
        *a = plane_albedo;
    }

    let count = r.gen_range(spec.objects_min..=spec.objects_max);
    for _ in 0..count {
        let is_rect: bool = r.gen_bool(0.5);
        let cy: f32 = r.gen_range(0.1..0.9) * n as f32;
        let cx: f32 = r.gen_range(0.1..0.9) * n as f32;
        let hy: f32 = r.gen_range(n as f32 / 16.0..n as f32 / 5.0);
        let hx: f32 = r.gen_range(n as f32 / 16.0..n as f32 / 5.0);
        let d: f32 = (r.gen_range((1.0f32).ln()..(60.0f32).ln())).exp();
        let d = d.clamp(spec.depth_min, spec.depth_max);
        let alb = [r.gen_range(0.15..1.0), r.gen_range(0.15..1.0), r.gen_range(0.15..1.0)];
        let y0 = (cy - hy).max(0.0) as usize;
        let y1 = ((cy + hy) as usize).min(n - 1);
        let x0 = (cx - hx).max(0.0) as usize;
        let x1 = ((cx + hx) as usize).min(n - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if !is_rect {
                    let dy = (y as f32 - cy) / hy;
                    let dx = (x as f32 - cx) / hx;
                    if dy * dy + dx * dx > 1.0 {
                        continue;
                    }
                }
                let p = y * n + x;
                // nearer object occludes
                if d < depth[p] {
                    depth[p] = d;
                    albedo[p] = alb;
                }
            }
        }
    }

    let mut image = vec![0.0f32; 3 * n * n];
    for p in 0..n * n {
        let s = shade(depth[p]);
        for c in 0..3 {
            let noise: f32 = r.gen_range(-1.0..1.0) * spec.noise_amp;
            image[c * n * n + p] = (albedo[p][c] * s + noise).clamp(0.0, 1.0);
        }
    }

    Ok(DepthSample {
        image: Tensor::from_raw(vec![3, n, n], image),
        depth: Tensor::from_raw(vec![1, n, n], depth),
        mask: Tensor::full(&[1, n, n], 1.0),
        aux_image: None,
    })
}

/// Independently keeps each mask pixel with probability `keep_rate`.
pub fn sparsify(sample: &DepthSample, keep_rate: f32, seed: u64) -> Result<DepthSample> {
    if !(0.0..=1.0).contains(&keep_rate) {
        return Err(Error::InvalidArg(format!("keep_rate {keep_rate} outside [0, 1]")));
    }
    let mut r = rng::stream(seed, "sparsify", 0);
    let mask = sample.mask.map(|m| {
        if m > 0.0 && r.gen::<f32>() < keep_rate {
            1.0
        } else {
            0.0
        }
    });
    Ok(DepthSample { mask, ..sample.clone() })
}

/// Forward-warps the image horizontally by per-pixel disparity bf / depth
/// (nearer pixels win collisions) and fills occlusion holes from the nearest
/// valid left neighbor. The warped view plays the role of a second camera.
pub fn gen_aux_view(sample: &DepthSample, bf: f32) -> Result<DepthSample> {
    let (_, h, w) = sample.image.chw()?;
    let (dc, dh, dw) = sample.depth.chw()?;
    if dc != 1 || dh != h || dw != w {
        return Err(Error::ShapeMismatch("depth/image size mismatch".into()));
    }
    let mut aux = vec![0.0f32; 3 * h * w];
    let mut filled = vec![false; h * w];
    let mut zbuf = vec![f32::INFINITY; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = sample.depth.data()[y * w + x];
            let disp = (bf / d).round() as isize;
            let xd = x as isize - disp;
            if xd < 0 || xd >= w as isize {
                continue;
            }
            let pd = y * w + xd as usize;
            if d < zbuf[pd] {
                zbuf[pd] = d;
                filled[pd] = true;
                for c in 0..3 {
                    aux[c * h * w + pd] = sample.image.data()[c * h * w + y * w + x];
                }
            }
        }
        // hole filling: nearest valid left neighbor, then first valid value
        // for a leading gap
        let mut last: Option<usize> = None;
        let mut first: Option<usize> = None;
        for x in 0..w {
            let p = y * w + x;
            if filled[p] {
                if first.is_none() {
                    first = Some(x);
                }
                last = Some(x);
            } else if let Some(lx) = last {
                for c in 0..3 {
                    aux[c * h * w + p] = aux[c * h * w + y * w + lx];
                }
            }
        }
        if let (Some(fx), None) = (first, last.filter(|&lx| lx >= w)) {
            for x in 0..fx {
                let p = y * w + x;
                if !filled[p] {
                    for c in 0..3 {
                        aux[c * h * w + p] = aux[c * h * w + y * w + fx];
                    }
                }
            }
        }
    }
    Ok(DepthSample {
        aux_image: Some(Tensor::from_raw(vec![3, h, w], aux)),
        ..sample.clone()
    })
}

/// Builds the full sample for (spec, index): scene, sparse mask, aux view.
pub fn gen_sample(spec: &SceneSpec, index: u64, with_aux: bool) -> Result<DepthSample> {
    let dense = gen_scene(spec, index)?;
    let dense = if with_aux {
        gen_aux_view(&dense, spec.bf)?
    } else {
        dense
    };
    sparsify(&dense, spec.keep_rate, spec.seed ^ index.wrapping_mul(0x517cc1b727220a95))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self { train: 2000, val: 200, test: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: u64,
    pub split: Split,
    pub image: String,
    pub depth: String,
    pub mask: String,
    pub aux: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: SceneSpec,
    pub counts: DatasetCounts,
    pub entries: Vec<ManifestEntry>,
}

/// Generates every sample (parallel over indices, bit-deterministic per
/// index) and writes tensors plus `manifest.json` under `dir`.
pub fn generate_dataset(
    spec: &SceneSpec,
    counts: &DatasetCounts,
    with_aux: bool,
    dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let total = counts.train + counts.val + counts.test;
    let entries: Vec<ManifestEntry> = (0..total as u64)
        .into_par_iter()
        .map(|index| -> Result<ManifestEntry> {
            let split = if (index as usize) < counts.train {
                Split::Train
            } else if (index as usize) < counts.train + counts.val {
                Split::Val
            } else {
                Split::Test
            };
            let sample = gen_sample(spec, index, with_aux)?;
            let stem = format!("{index:06}");
            let image = format!("{stem}_image.tnsr");
            let depth = format!("{stem}_depth.tnsr");
            let mask = format!("{stem}_mask.tnsr");
            save_tensor(&sample.image, dir.join(&image))?;
            save_tensor(&sample.depth, dir.join(&depth))?;
            save_tensor(&sample.mask, dir.join(&mask))?;
            let aux = match &sample.aux_image {
                Some(a) => {
                    let name = format!("{stem}_aux.tnsr");
                    save_tensor(a, dir.join(&name))?;
                    Some(name)
                }
                None => None,
            };
            Ok(ManifestEntry { index, split, image, depth, mask, aux })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { spec: spec.clone(), counts: *counts, entries };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// On-disk dataset handle: reads the manifest once, loads samples on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("manifest parse: {e}")))?;
        Ok(Self { dir, manifest })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load(&self, entry_idx: usize) -> Result<DepthSample> {
        let e = &self.manifest.entries[entry_idx];
        Ok(DepthSample {
            image: load_tensor(self.dir.join(&e.image))?,
            depth: load_tensor(self.dir.join(&e.depth))?,
            mask: load_tensor(self.dir.join(&e.mask))?,
            aux_image: match &e.aux {
                Some(a) => Some(load_tensor(self.dir.join(a))?),
                None => None,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec { size: 32, seed: 42, ..Default::default() }
    }

    #[test]
    fn plane_only_scene_monotone_depth_columns() {
        let spec = SceneSpec { objects_min: 0, objects_max: 0, ..small_spec() };
        let s = gen_scene(&spec, 0).unwrap();
        let n = spec.size;
        for x in 0..n {
            for y in 1..n {
                assert!(
                    s.depth.at3(0, y, x) <= s.depth.at3(0, y - 1, x),
                    "depth must increase toward the top"
                );
            }
        }
    }

    #[test]
    fn determinism_and_range_containment() {
        let spec = small_spec();
        let a = gen_sample(&spec, 7, true).unwrap();
        let b = gen_sample(&spec, 7, true).unwrap();
        assert!(a.image.bitwise_eq(&b.image));
        assert!(a.depth.bitwise_eq(&b.depth));
        assert!(a.mask.bitwise_eq(&b.mask));
        assert!(a.aux_image.unwrap().bitwise_eq(&b.aux_image.unwrap()));
        for &d in a.depth.data() {
            assert!((spec.depth_min..=spec.depth_max).contains(&d));
        }
        let c = gen_sample(&spec, 8, false).unwrap();
        assert!(!a.image.bitwise_eq(&c.image));
    }

    #[test]
    fn occlusion_keeps_nearer_object() {
        // many objects forces overlap at 32x32; the depth buffer must hold
        // the minimum depth painted at each pixel
        let spec = SceneSpec { objects_min: 8, objects_max: 8, ..small_spec() };
        let s = gen_scene(&spec, 3).unwrap();
        for &d in s.depth.data() {
            assert!(d >= spec.depth_min);
        }
        // strictly: recomposition with the same rng stream is covered by the
        // determinism test; here assert depths never exceed the plane's
        let plane_only = gen_scene(&SceneSpec { objects_min: 0, objects_max: 0, ..small_spec() }, 3);
        // objects only ever reduce depth relative to the plane when painted
        let p = plane_only.unwrap();
        for (a, b) in s.depth.data().iter().zip(p.depth.data().iter()) {
            assert!(a <= b || (a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sparsify_extremes_and_binomial_count() {
        let spec = small_spec();
        let dense = gen_scene(&spec, 0).unwrap();
        let none = sparsify(&dense, 0.0, 1).unwrap();
        assert!(none.mask.data().iter().all(|&m| m == 0.0));
        let all = sparsify(&dense, 1.0, 1).unwrap();
        assert!(all.mask.data().iter().all(|&m| m == 1.0));

        let spec = SceneSpec { size: 128, ..small_spec() };
        let dense = gen_scene(&spec, 0).unwrap();
        let s = sparsify(&dense, 0.1, 2).unwrap();
        let count: f64 = s.mask.data().iter().map(|&m| m as f64).sum();
        let mean = 16384.0 * 0.1;
        let sigma = (16384.0f64 * 0.1 * 0.9).sqrt();
        assert!((count - mean).abs() < 3.0 * sigma, "count {count} vs {mean} +- 3*{sigma:.1}");
        // depth untouched
        assert!(s.depth.bitwise_eq(&dense.depth));
    }

    #[test]
    fn aux_view_uniform_depth_shifts_by_disparity() {
        // bf = 64, depth 16 m -> every pixel moves 4 px left
        let n = 32;
        let image = Tensor::from_fn(&[3, n, n], |i| ((i * 37) % 101) as f32 / 101.0);
        let sample = DepthSample {
            image: image.clone(),
            depth: Tensor::full(&[1, n, n], 16.0),
            mask: Tensor::full(&[1, n, n], 1.0),
            aux_image: None,
        };
        let out = gen_aux_view(&sample, 64.0).unwrap();
        let aux = out.aux_image.unwrap();
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n - 4 {
                    assert_eq!(aux.at3(c, y, x), image.at3(c, y, x + 4));
                }
                // right edge holes copy the nearest valid left neighbor
                for x in n - 4..n {
                    assert_eq!(aux.at3(c, y, x), image.at3(c, y, n - 1));
                }
            }
        }
    }

    #[test]
    fn aux_view_zero_baseline_is_identity() {
        let spec = small_spec();
        let s = gen_scene(&spec, 4).unwrap();
        let out = gen_aux_view(&s, 0.0).unwrap();
        assert!(out.aux_image.unwrap().bitwise_eq(&s.image));
    }

    #[test]
    fn aux_view_two_depth_hand_warp() {
        // 16x16: left half at 64 m (1 px), right half at 8 m (8 px); the
        // near half lands on columns 0..8 and occludes the far content
        let n = 16;
        let mut img = vec![0.0f32; 3 * n * n];
        let mut dep = vec![0.0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                let v = (y * n + x) as f32 / (n * n) as f32;
                for c in 0..3 {
                    img[c * n * n + y * n + x] = v;
                }
                dep[y * n + x] = if x < 8 { 64.0 } else { 8.0 };
            }
        }
        let sample = DepthSample {
            image: Tensor::from_raw(vec![3, n, n], img),
            depth: Tensor::from_raw(vec![1, n, n], dep),
            mask: Tensor::full(&[1, n, n], 1.0),
            aux_image: None,
        };
        let out = gen_aux_view(&sample, 64.0).unwrap();
        let aux = out.aux_image.unwrap();
        for y in 0..n {
            // near content from x = 8..16 lands at 0..8
            for x in 0..8 {
                assert_eq!(aux.at3(0, y, x), sample.image.at3(0, y, x + 8), "near warp at ({y},{x})");
            }
            // columns 8..16: only far sources map below 8 (occluded) or off
            // row end, so these are left-fill copies of column 7
            for x in 8..n {
                assert_eq!(aux.at3(0, y, x), aux.at3(0, y, 7), "fill at ({y},{x})");
            }
        }
    }

    #[test]
    fn dataset_roundtrip_and_split_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let counts = DatasetCounts { train: 4, val: 2, test: 2 };
        let manifest = generate_dataset(&spec, &counts, true, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 8);
        let ds = Dataset::open(dir.path()).unwrap();
        let train = ds.indices(Split::Train);
        let val = ds.indices(Split::Val);
        let test = ds.indices(Split::Test);
        assert_eq!((train.len(), val.len(), test.len()), (4, 2, 2));
        for i in &val {
            assert!(!train.contains(i) && !test.contains(i));
        }
        let s = ds.load(train[0]).unwrap();
        let regen = gen_sample(&spec, 0, true).unwrap();
        assert!(s.image.bitwise_eq(&regen.image));
        assert!(s.aux_image.unwrap().bitwise_eq(&regen.aux_image.unwrap()));
    }
}
