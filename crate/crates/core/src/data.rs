//! Synthetic membrane-segmentation data, image-stack ingestion, and splits.
//!
//! The synthetic generator builds Voronoi-like cell tessellations: random
//! seed points, nearest-seed assignment, 1-2 px membrane bands where cells
//! meet (mask 0), textured cell interiors (mask 1). Images are the smoothed
//! per-cell intensities plus noise, fully determined by `(seed, index)`.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_rng, standard_normal};
use crate::tensor::{real, Real, Tensor};

/// Row-major 2-D float grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Grid {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.w + j] = v;
    }
}

/// One segmentation sample: grayscale image in [0,1] and a strictly binary
/// mask (1 = cell interior foreground, 0 = membrane/boundary).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Grid,
    pub mask: Grid,
}

impl Sample {
    pub fn mask_bools(&self) -> Vec<bool> {
        self.mask.data.iter().map(|&v| v >= 0.5).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub seed: u64,
}

/// Number of Voronoi cells the generator places for a given image size.
pub fn synthetic_cell_count(size: usize) -> usize {
    (size * size / 256).max(6)
}

fn blur3(grid: &Grid) -> Grid {
    // separable [1,2,1]/4 with edge replication
    let (h, w) = (grid.h, grid.w);
    let mut tmp = Grid::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let l = grid.at(i, j.saturating_sub(1));
            let r = grid.at(i, (j + 1).min(w - 1));
            tmp.set(i, j, 0.25 * l + 0.5 * grid.at(i, j) + 0.25 * r);
        }
    }
    let mut out = Grid::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let u = tmp.at(i.saturating_sub(1), j);
            let d = tmp.at((i + 1).min(h - 1), j);
            out.set(i, j, 0.25 * u + 0.5 * tmp.at(i, j) + 0.25 * d);
        }
    }
    out
}

/// Deterministic Voronoi-membrane samples; `size` must be a power of two,
/// at least 16, so every resampling level divides evenly.
pub fn generate_synthetic_em(seed: u64, count: usize, size: usize) -> Result<Vec<Sample>> {
    if size < 16 || !size.is_power_of_two() {
        return Err(Error::Config(format!(
            "synthetic size must be a power of two >= 16, got {size}"
        )));
    }
    let cells = synthetic_cell_count(size);
    let mut samples = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rng = derive_rng(seed, "synth", idx as u64);
        let mut points: Vec<(usize, usize)> = Vec::with_capacity(cells);
        while points.len() < cells {
            let p = (rng.random_range(0..size), rng.random_range(0..size));
            if !points.contains(&p) {
                points.push(p);
            }
        }
        let brightness: Vec<f32> = (0..cells)
            .map(|_| 0.55 + 0.35 * rng.random::<f32>())
            .collect();

        // nearest-seed assignment; ties resolve to the lowest point index
        let mut cell_of = vec![0usize; size * size];
        for i in 0..size {
            for j in 0..size {
                let mut best = usize::MAX;
                let mut best_d = u64::MAX;
                for (ci, &(pi, pj)) in points.iter().enumerate() {
                    let di = pi.abs_diff(i) as u64;
                    let dj = pj.abs_diff(j) as u64;
                    let d = di * di + dj * dj;
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                cell_of[i * size + j] = best;
            }
        }

        // membrane where any 4-neighbor belongs to a different cell
        let mut mask = Grid::zeros(size, size);
        for i in 0..size {
            for j in 0..size {
                let c = cell_of[i * size + j];
                let boundary = (i > 0 && cell_of[(i - 1) * size + j] != c)
                    || (i + 1 < size && cell_of[(i + 1) * size + j] != c)
                    || (j > 0 && cell_of[i * size + j - 1] != c)
                    || (j + 1 < size && cell_of[i * size + j + 1] != c);
                mask.set(i, j, if boundary { 0.0 } else { 1.0 });
            }
        }

        let mut image = Grid::zeros(size, size);
        for i in 0..size {
            for j in 0..size {
                let v = if mask.at(i, j) >= 0.5 {
                    brightness[cell_of[i * size + j]]
                } else {
                    0.12
                };
                image.set(i, j, v);
            }
        }
        let mut image = blur3(&image);
        for v in image.data.iter_mut() {
            let noisy = *v as f64 + 0.04 * standard_normal(&mut rng);
            *v = noisy.clamp(0.0, 1.0) as f32;
        }
        samples.push(Sample { image, mask });
    }
    Ok(samples)
}

/// Matches `pattern` against a file name; a single `*` wildcard is
/// supported (`*.png`, `img_*`).
fn matches_pattern(name: &str, pattern: &str) -> bool {
    match pattern.split_once('*') {
        Some((pre, suf)) => {
            name.len() >= pre.len() + suf.len() && name.starts_with(pre) && name.ends_with(suf)
        }
        None => name == pattern,
    }
}

fn grid_from_gray(img: &GrayImage) -> Grid {
    let (w, h) = img.dimensions();
    let mut g = Grid::zeros(h as usize, w as usize);
    for (x, y, p) in img.enumerate_pixels() {
        g.set(y as usize, x as usize, p.0[0] as f32 / 255.0);
    }
    g
}

/// Loads paired 8-bit grayscale images from `dir/images` and `dir/masks`
/// (same file names), in lexicographic order. Image values scale to [0,1];
/// masks binarize at 0.5.
pub fn load_image_stack(dir: &Path, pattern: &str) -> Result<Vec<Sample>> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    let mut names: Vec<String> = Vec::new();
    let entries = fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if matches_pattern(&name, pattern) {
            names.push(name);
        }
    }
    names.sort();
    let mut samples = Vec::with_capacity(names.len());
    for name in names {
        let img_path = images_dir.join(&name);
        let mask_path = masks_dir.join(&name);
        if !mask_path.exists() {
            return Err(Error::Config(format!(
                "image '{}' has no mask pair at '{}'",
                img_path.display(),
                mask_path.display()
            )));
        }
        let open_gray = |p: &PathBuf| -> Result<GrayImage> {
            Ok(image::open(p)
                .map_err(|e| Error::Image {
                    path: p.clone(),
                    msg: e.to_string(),
                })?
                .to_luma8())
        };
        let image = grid_from_gray(&open_gray(&img_path)?);
        let mut mask = grid_from_gray(&open_gray(&mask_path)?);
        if (image.h, image.w) != (mask.h, mask.w) {
            return Err(Error::Config(format!(
                "size mismatch: '{}' is {}x{} but its mask is {}x{}",
                img_path.display(),
                image.h,
                image.w,
                mask.h,
                mask.w
            )));
        }
        for v in mask.data.iter_mut() {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
        samples.push(Sample { image, mask });
    }
    Ok(samples)
}

fn gray_from_grid(g: &Grid) -> GrayImage {
    let mut img = GrayImage::new(g.w as u32, g.h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let v = (g.at(y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        p.0[0] = v;
    }
    img
}

/// Writes samples in the layout `load_image_stack` reads.
pub fn save_image_stack(dir: &Path, samples: &[Sample]) -> Result<()> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:04}.png");
        let ip = images_dir.join(&name);
        gray_from_grid(&s.image).save(&ip).map_err(|e| Error::Image {
            path: ip.clone(),
            msg: e.to_string(),
        })?;
        let mp = masks_dir.join(&name);
        gray_from_grid(&s.mask).save(&mp).map_err(|e| Error::Image {
            path: mp.clone(),
            msg: e.to_string(),
        })?;
    }
    Ok(())
}

/// Seeded shuffle, then split: `round(n * ratio)` samples train, rest val.
pub fn split_train_val(samples: Vec<Sample>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples to split, got {n}")));
    }
    let train_n = (n as f64 * ratio).round() as usize;
    if train_n == 0 || train_n >= n {
        return Err(Error::Config(format!(
            "ratio {ratio} yields an empty split side ({train_n}/{})",
            n - train_n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, "split", 0));
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(train_n);
    let mut val = Vec::with_capacity(n - train_n);
    for (k, &i) in order.iter().enumerate() {
        let s = slots[i].take().unwrap();
        if k < train_n {
            train.push(s);
        } else {
            val.push(s);
        }
    }
    Ok(DatasetSplit { train, val, seed })
}

/// Stacks samples into `[B,1,H,W]` image and mask tensors.
pub fn batch_to_tensors<F: Real>(samples: &[&Sample]) -> Result<(Tensor<F>, Tensor<F>)> {
    let first = samples.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w) = (first.image.h, first.image.w);
    let mut x = Vec::with_capacity(samples.len() * h * w);
    let mut y = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.image.h, s.image.w) != (h, w) {
            return Err(Error::Dimension {
                op: "batch_to_tensors",
                msg: format!(
                    "sample size {}x{} differs from batch size {h}x{w}",
                    s.image.h, s.image.w
                ),
            });
        }
        x.extend(s.image.data.iter().map(|&v| real::<F>(v as f64)));
        y.extend(s.mask.data.iter().map(|&v| real::<F>(v as f64)));
    }
    Ok((
        Tensor::from_vec(x, &[samples.len(), 1, h, w])?,
        Tensor::from_vec(y, &[samples.len(), 1, h, w])?,
    ))
}
