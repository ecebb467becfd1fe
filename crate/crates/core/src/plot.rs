//! Minimal PNG rendering of training curves and update heatmaps from the
//! CSV files the trainer writes. No text is drawn; the color legend is
//! documented in the README.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::{parse_update_csv, UpdateRecord, UPDATE_CSV_HEADER};
use crate::train::{parse_history_csv, EpochRecord, HISTORY_CSV_HEADER};

const MARGIN: u32 = 40;

fn blank(w: u32, h: u32) -> RgbImage {
    RgbImage::from_pixel(w, h, Rgb([250, 250, 250]))
}

fn draw_axes(img: &mut RgbImage) {
    let (w, h) = img.dimensions();
    let axis = Rgb([60, 60, 60]);
    for x in MARGIN..w - MARGIN {
        img.put_pixel(x, h - MARGIN, axis);
    }
    for y in MARGIN..h - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
}

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        let (w, h) = img.dimensions();
        let xi = x.round() as i64;
        let yi = y.round() as i64;
        if xi >= 0 && yi >= 0 && (xi as u32) < w && (yi as u32) < h {
            img.put_pixel(xi as u32, yi as u32, color);
        }
    }
}

fn draw_series(
    img: &mut RgbImage,
    values: &[f64],
    y_max: f64,
    color: Rgb<u8>,
) {
    if values.len() < 2 || y_max <= 0.0 {
        return;
    }
    let (w, h) = img.dimensions();
    let plot_w = (w - 2 * MARGIN) as f64;
    let plot_h = (h - 2 * MARGIN) as f64;
    let pt = |i: usize| {
        let x = MARGIN as f64 + plot_w * i as f64 / (values.len() - 1) as f64;
        let clamped = values[i].clamp(0.0, y_max);
        let y = (h - MARGIN) as f64 - plot_h * (clamped / y_max);
        (x, y)
    };
    for i in 1..values.len() {
        draw_segment(img, pt(i - 1), pt(i), color);
    }
}

/// Loss curves (solid scale: 0..max loss) and accuracy curves (0..1):
/// train loss blue, val loss red, train accuracy teal, val accuracy orange.
pub fn render_history_curves(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut img = blank(720, 480);
    draw_axes(&mut img);
    let losses: Vec<f64> = history
        .iter()
        .flat_map(|r| [r.train_loss, r.val_loss])
        .collect();
    let loss_max = losses.iter().copied().fold(0.0f64, f64::max).max(1e-9);
    draw_series(
        &mut img,
        &history.iter().map(|r| r.train_loss).collect::<Vec<_>>(),
        loss_max,
        Rgb([40, 80, 200]),
    );
    draw_series(
        &mut img,
        &history.iter().map(|r| r.val_loss).collect::<Vec<_>>(),
        loss_max,
        Rgb([200, 50, 50]),
    );
    draw_series(
        &mut img,
        &history.iter().map(|r| r.train_acc).collect::<Vec<_>>(),
        1.0,
        Rgb([40, 160, 160]),
    );
    draw_series(
        &mut img,
        &history.iter().map(|r| r.val_acc).collect::<Vec<_>>(),
        1.0,
        Rgb([220, 140, 40]),
    );
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    })
}

fn heat_color(t: f64) -> Rgb<u8> {
    // dark blue -> teal -> yellow ramp
    let anchors: [(f64, [f64; 3]); 4] = [
        (0.0, [30.0, 20.0, 90.0]),
        (0.4, [30.0, 110.0, 140.0]),
        (0.75, [90.0, 190.0, 110.0]),
        (1.0, [250.0, 230.0, 60.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    for w in anchors.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return Rgb([
                (c0[0] + (c1[0] - c0[0]) * f) as u8,
                (c0[1] + (c1[1] - c0[1]) * f) as u8,
                (c0[2] + (c1[2] - c0[2]) * f) as u8,
            ]);
        }
    }
    Rgb([250, 230, 60])
}

/// Heatmap of per-layer updates: layers left-to-right in path order
/// (depth), epochs top-to-bottom, log-scaled color.
pub fn render_update_heatmap(records: &[UpdateRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no telemetry records to plot".into()));
    }
    let mut layers: Vec<(usize, String)> = records
        .iter()
        .map(|r| (r.depth_index, r.layer_name.clone()))
        .collect();
    layers.sort();
    layers.dedup();
    let mut epochs: Vec<usize> = records.iter().map(|r| r.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let layer_idx = |r: &UpdateRecord| {
        layers
            .iter()
            .position(|(d, n)| *d == r.depth_index && *n == r.layer_name)
            .unwrap()
    };
    let epoch_idx = |r: &UpdateRecord| epochs.iter().position(|&e| e == r.epoch).unwrap();

    let floor = 1e-12f64;
    let max = records
        .iter()
        .map(|r| r.mean_abs_update)
        .fold(floor, f64::max);
    let lo = floor.log10();
    let hi = max.log10();
    let span = (hi - lo).max(1e-9);

    let cell_w = (900 / layers.len().max(1)).clamp(2, 40) as u32;
    let cell_h = (600 / epochs.len().max(1)).clamp(2, 40) as u32;
    let mut img = blank(
        layers.len() as u32 * cell_w + 2 * MARGIN,
        epochs.len() as u32 * cell_h + 2 * MARGIN,
    );
    for r in records {
        let t = ((r.mean_abs_update.max(floor).log10()) - lo) / span;
        let color = heat_color(t);
        let x0 = MARGIN + layer_idx(r) as u32 * cell_w;
        let y0 = MARGIN + epoch_idx(r) as u32 * cell_h;
        for dy in 0..cell_h {
            for dx in 0..cell_w {
                img.put_pixel(x0 + dx, y0 + dy, color);
            }
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    })
}

/// Dispatches on the CSV header: history files render as curves, telemetry
/// files as a heatmap.
pub fn plot_csv(input: &Path, output: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    match text.lines().next() {
        Some(h) if h == HISTORY_CSV_HEADER => {
            render_history_curves(&parse_history_csv(&text)?, output)
        }
        Some(h) if h == UPDATE_CSV_HEADER => {
            render_update_heatmap(&parse_update_csv(&text)?, output)
        }
        other => Err(Error::CsvParse {
            line: 1,
            msg: format!("unrecognized CSV header {other:?}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_and_heatmap_render_to_png() {
        let dir = tempfile::tempdir().unwrap();
        let history: Vec<EpochRecord> = (0..10)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 0.7 / (e + 1) as f64,
                val_loss: 0.75 / (e + 1) as f64,
                train_acc: 1.0 - 0.5 / (e + 1) as f64,
                val_acc: 1.0 - 0.55 / (e + 1) as f64,
            })
            .collect();
        let hp = dir.path().join("curves.png");
        render_history_curves(&history, &hp).unwrap();
        assert!(hp.exists());

        let records: Vec<UpdateRecord> = (0..5)
            .flat_map(|e| {
                (0..8).map(move |d| UpdateRecord {
                    epoch: e,
                    layer_name: format!("layer{d}"),
                    depth_index: d,
                    mean_abs_update: 1e-4 / (1.0 + (d as f64 - 4.0).abs()),
                })
            })
            .collect();
        let tp = dir.path().join("heatmap.png");
        render_update_heatmap(&records, &tp).unwrap();
        assert!(tp.exists());
    }
}
