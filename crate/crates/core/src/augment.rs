//! Geometric augmentation with identical transforms on image and mask:
//! flips, quarter rotations, small free rotations, shear, and an elastic
//! deformation (coarse random displacement grid, smoothed by bilinear
//! upsampling). Images sample bilinearly, masks sample nearest-neighbor so
//! they stay strictly binary.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Grid, Sample};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentFlags {
    pub flip: bool,
    pub rot90: bool,
    /// Free rotation up to +/-15 degrees.
    pub rotate: bool,
    /// Shear up to +/-10 degrees.
    pub shear: bool,
    pub elastic: bool,
}

impl AugmentFlags {
    pub fn all() -> Self {
        AugmentFlags {
            flip: true,
            rot90: true,
            rotate: true,
            shear: true,
            elastic: true,
        }
    }

    pub fn none() -> Self {
        AugmentFlags::default()
    }

    pub fn any(&self) -> bool {
        self.flip || self.rot90 || self.rotate || self.shear || self.elastic
    }
}

pub fn flip_horizontal(s: &Sample) -> Sample {
    let map = |g: &Grid| {
        let mut out = Grid::zeros(g.h, g.w);
        for i in 0..g.h {
            for j in 0..g.w {
                out.set(i, j, g.at(i, g.w - 1 - j));
            }
        }
        out
    };
    Sample {
        image: map(&s.image),
        mask: map(&s.mask),
    }
}

pub fn flip_vertical(s: &Sample) -> Sample {
    let map = |g: &Grid| {
        let mut out = Grid::zeros(g.h, g.w);
        for i in 0..g.h {
            for j in 0..g.w {
                out.set(i, j, g.at(g.h - 1 - i, j));
            }
        }
        out
    };
    Sample {
        image: map(&s.image),
        mask: map(&s.mask),
    }
}

/// Exact counter-clockwise quarter rotations (square grids).
pub fn rot90(s: &Sample, quarters: usize) -> Sample {
    assert_eq!(s.image.h, s.image.w, "rot90 expects square samples");
    let map = |g: &Grid| {
        let n = g.h;
        let mut cur = g.clone();
        for _ in 0..quarters % 4 {
            let mut out = Grid::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    out.set(n - 1 - j, i, cur.at(i, j));
                }
            }
            cur = out;
        }
        cur
    };
    Sample {
        image: map(&s.image),
        mask: map(&s.mask),
    }
}

fn sample_bilinear(g: &Grid, y: f64, x: f64) -> f32 {
    let yc = y.clamp(0.0, (g.h - 1) as f64);
    let xc = x.clamp(0.0, (g.w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(g.h - 1);
    let x1 = (x0 + 1).min(g.w - 1);
    let fy = (yc - y0 as f64) as f32;
    let fx = (xc - x0 as f64) as f32;
    let top = g.at(y0, x0) * (1.0 - fx) + g.at(y0, x1) * fx;
    let bot = g.at(y1, x0) * (1.0 - fx) + g.at(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn sample_nearest(g: &Grid, y: f64, x: f64) -> f32 {
    let i = y.round().clamp(0.0, (g.h - 1) as f64) as usize;
    let j = x.round().clamp(0.0, (g.w - 1) as f64) as usize;
    g.at(i, j)
}

/// Warps both channels through the same source-coordinate map.
fn warp(s: &Sample, source_of: impl Fn(f64, f64) -> (f64, f64)) -> Sample {
    let (h, w) = (s.image.h, s.image.w);
    let mut image = Grid::zeros(h, w);
    let mut mask = Grid::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let (sy, sx) = source_of(i as f64, j as f64);
            image.set(i, j, sample_bilinear(&s.image, sy, sx));
            mask.set(i, j, sample_nearest(&s.mask, sy, sx));
        }
    }
    Sample { image, mask }
}

/// Rotation then shear about the image center (inverse-mapped).
fn affine(s: &Sample, angle_deg: f64, shear_deg: f64) -> Sample {
    let (h, w) = (s.image.h as f64, s.image.w as f64);
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    let th = angle_deg.to_radians();
    let sh = shear_deg.to_radians().tan();
    // forward: rotate, then x-shear; inverse applied output -> source
    let (cos_t, sin_t) = (th.cos(), th.sin());
    warp(s, move |oy, ox| {
        let dy = oy - cy;
        let dx = ox - cx;
        // undo shear: x' = x - sh * y
        let ux = dx - sh * dy;
        let uy = dy;
        // undo rotation
        let sx = cos_t * ux + sin_t * uy;
        let sy = -sin_t * ux + cos_t * uy;
        (sy + cy, sx + cx)
    })
}

/// Coarse random displacement field, bilinearly smoothed to full resolution.
fn elastic(s: &Sample, rng: &mut ChaCha8Rng, amplitude: f64) -> Sample {
    const GRID: usize = 4;
    let mut dy = [[0.0f64; GRID]; GRID];
    let mut dx = [[0.0f64; GRID]; GRID];
    for row in 0..GRID {
        for col in 0..GRID {
            dy[row][col] = (rng.random::<f64>() * 2.0 - 1.0) * amplitude;
            dx[row][col] = (rng.random::<f64>() * 2.0 - 1.0) * amplitude;
        }
    }
    let (h, w) = (s.image.h as f64, s.image.w as f64);
    let lookup = move |field: &[[f64; GRID]; GRID], y: f64, x: f64| {
        let gy = (y / (h - 1.0)) * (GRID - 1) as f64;
        let gx = (x / (w - 1.0)) * (GRID - 1) as f64;
        let y0 = gy.floor().min((GRID - 2) as f64) as usize;
        let x0 = gx.floor().min((GRID - 2) as f64) as usize;
        let fy = gy - y0 as f64;
        let fx = gx - x0 as f64;
        let top = field[y0][x0] * (1.0 - fx) + field[y0][x0 + 1] * fx;
        let bot = field[y0 + 1][x0] * (1.0 - fx) + field[y0 + 1][x0 + 1] * fx;
        top * (1.0 - fy) + bot * fy
    };
    warp(s, move |oy, ox| {
        (oy + lookup(&dy, oy, ox), ox + lookup(&dx, oy, ox))
    })
}

/// Applies each enabled transform with independent probability 1/2; the
/// draw order is fixed so a given RNG stream always produces the same
/// augmentation.
pub fn augment_sample(s: &Sample, rng: &mut ChaCha8Rng, flags: &AugmentFlags) -> Sample {
    let mut out = s.clone();
    if flags.flip && rng.random::<f64>() < 0.5 {
        out = if rng.random::<f64>() < 0.5 {
            flip_horizontal(&out)
        } else {
            flip_vertical(&out)
        };
    }
    if flags.rot90 && rng.random::<f64>() < 0.5 {
        let quarters = rng.random_range(1..=3);
        out = rot90(&out, quarters);
    }
    let mut angle = 0.0;
    let mut shear_deg = 0.0;
    if flags.rotate && rng.random::<f64>() < 0.5 {
        angle = (rng.random::<f64>() * 2.0 - 1.0) * 15.0;
    }
    if flags.shear && rng.random::<f64>() < 0.5 {
        shear_deg = (rng.random::<f64>() * 2.0 - 1.0) * 10.0;
    }
    if angle != 0.0 || shear_deg != 0.0 {
        out = affine(&out, angle, shear_deg);
    }
    if flags.elastic && rng.random::<f64>() < 0.5 {
        let amplitude = 2.0 + 2.0 * rng.random::<f64>();
        out = elastic(&out, rng, amplitude);
    }
    out
}
