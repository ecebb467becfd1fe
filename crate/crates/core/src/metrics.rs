//! Per-layer parameter-update telemetry and segmentation quality metrics.
//!
//! "Mean parameter update" of a layer is the mean over the layer's scalars
//! of |theta_after - theta_before| for one optimizer step, averaged over the
//! steps of an epoch. A layer is a parameter group named by everything
//! before the final component of the parameter name (`down3.rep2.conv1`
//! owns `.weight` and `.bias`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Real};

/// One telemetry row: layer update magnitude for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub epoch: usize,
    pub layer_name: String,
    pub depth_index: usize,
    pub mean_abs_update: f64,
}

/// Parameter snapshot taken around an optimizer step.
pub type ParamSnapshot<F> = Vec<(String, Vec<F>)>;

pub fn snapshot_params<F: Real>(params: &[Parameter<F>]) -> ParamSnapshot<F> {
    params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.data_vec()))
        .collect()
}

fn layer_of(param_name: &str) -> &str {
    param_name.rsplit_once('.').map_or(param_name, |(l, _)| l)
}

struct LayerSlot {
    name: String,
    depth_index: usize,
    elems: usize,
}

/// Accumulates per-step layer update means and emits per-epoch records.
pub struct UpdateAccumulator {
    layers: Vec<LayerSlot>,
    param_names: Vec<String>,
    param_layer: Vec<usize>,
    step_sums: Vec<f64>,
    steps: usize,
    records: Vec<UpdateRecord>,
}

impl UpdateAccumulator {
    pub fn for_params<F: Real>(params: &[Parameter<F>]) -> Self {
        let mut layers: Vec<LayerSlot> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut param_names = Vec::with_capacity(params.len());
        let mut param_layer = Vec::with_capacity(params.len());
        for p in params {
            let layer = layer_of(&p.name).to_string();
            let li = *index.entry(layer.clone()).or_insert_with(|| {
                layers.push(LayerSlot {
                    name: layer,
                    depth_index: p.depth_index,
                    elems: 0,
                });
                layers.len() - 1
            });
            layers[li].elems += p.numel();
            param_names.push(p.name.clone());
            param_layer.push(li);
        }
        let n = layers.len();
        UpdateAccumulator {
            layers,
            param_names,
            param_layer,
            step_sums: vec![0.0; n],
            steps: 0,
            records: Vec::new(),
        }
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn records(&self) -> &[UpdateRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<UpdateRecord> {
        self.records
    }

    /// Closes the current epoch: emits one record per layer (step-averaged)
    /// and resets the step accumulators.
    pub fn close_epoch(&mut self, epoch: usize) {
        let steps = self.steps.max(1) as f64;
        for (li, layer) in self.layers.iter().enumerate() {
            self.records.push(UpdateRecord {
                epoch,
                layer_name: layer.name.clone(),
                depth_index: layer.depth_index,
                mean_abs_update: self.step_sums[li] / steps,
            });
        }
        self.step_sums.iter_mut().for_each(|s| *s = 0.0);
        self.steps = 0;
    }
}

/// Folds one optimizer step's |delta| into the accumulator. Snapshots must
/// be name-aligned with each other and with the accumulator's parameters.
pub fn record_layer_updates<F: Real>(
    before: &ParamSnapshot<F>,
    after: &ParamSnapshot<F>,
    acc: &mut UpdateAccumulator,
) -> Result<()> {
    if before.len() != after.len() || before.len() != acc.param_names.len() {
        return Err(Error::Telemetry(format!(
            "snapshot sizes {} / {} do not match accumulator ({} parameters)",
            before.len(),
            after.len(),
            acc.param_names.len()
        )));
    }
    let mut layer_abs = vec![0.0f64; acc.layers.len()];
    for (i, ((bn, bd), (an, ad))) in before.iter().zip(after.iter()).enumerate() {
        if bn != an || bn != &acc.param_names[i] {
            return Err(Error::Telemetry(format!(
                "snapshot name mismatch at index {i}: '{bn}' vs '{an}' (expected '{}')",
                acc.param_names[i]
            )));
        }
        if bd.len() != ad.len() {
            return Err(Error::Telemetry(format!(
                "snapshot '{bn}' length changed: {} vs {}",
                bd.len(),
                ad.len()
            )));
        }
        let li = acc.param_layer[i];
        for (b, a) in bd.iter().zip(ad.iter()) {
            layer_abs[li] += (a.to_f64().unwrap() - b.to_f64().unwrap()).abs();
        }
    }
    for (li, layer) in acc.layers.iter().enumerate() {
        acc.step_sums[li] += layer_abs[li] / layer.elems as f64;
    }
    acc.steps += 1;
    Ok(())
}

pub const UPDATE_CSV_HEADER: &str = "epoch,layer_name,depth_index,mean_abs_update";

/// Serializes records sorted by (epoch, depth_index, layer_name); floats use
/// the shortest round-trip decimal form.
pub fn update_csv_string(records: &[UpdateRecord]) -> String {
    let mut sorted: Vec<&UpdateRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (a.epoch, a.depth_index, &a.layer_name).cmp(&(b.epoch, b.depth_index, &b.layer_name))
    });
    let mut out = String::from(UPDATE_CSV_HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.layer_name, r.depth_index, r.mean_abs_update
        ));
    }
    out
}

pub fn export_update_csv(records: &[UpdateRecord], path: &Path) -> Result<()> {
    fs::write(path, update_csv_string(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_update_csv(text: &str) -> Result<Vec<UpdateRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == UPDATE_CSV_HEADER => {}
        other => {
            return Err(Error::CsvParse {
                line: 1,
                msg: format!("expected header '{UPDATE_CSV_HEADER}', got {other:?}"),
            })
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::CsvParse {
                line: i + 1,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse_err = |msg: String| Error::CsvParse { line: i + 1, msg };
        records.push(UpdateRecord {
            epoch: fields[0]
                .parse()
                .map_err(|e| parse_err(format!("epoch: {e}")))?,
            layer_name: fields[1].to_string(),
            depth_index: fields[2]
                .parse()
                .map_err(|e| parse_err(format!("depth_index: {e}")))?,
            mean_abs_update: fields[3]
                .parse()
                .map_err(|e| parse_err(format!("mean_abs_update: {e}")))?,
        });
    }
    Ok(records)
}

/// Fraction of positions where the two binary masks agree.
pub fn pixel_accuracy(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "pixel_accuracy",
            msg: format!("mask lengths {} vs {}", pred.len(), truth.len()),
        });
    }
    let hits = pred.iter().zip(truth.iter()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Smoothed soft Dice overlap `(2 sum(p y) + s) / (sum p + sum y + s)`.
pub fn soft_dice_coefficient(probs: &[f64], truth: &[f64], smooth: f64) -> Result<f64> {
    if probs.len() != truth.len() {
        return Err(Error::Dimension {
            op: "soft_dice_coefficient",
            msg: format!("lengths {} vs {}", probs.len(), truth.len()),
        });
    }
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut ysum = 0.0;
    for (&p, &y) in probs.iter().zip(truth.iter()) {
        inter += p * y;
        psum += p;
        ysum += y;
    }
    Ok((2.0 * inter + smooth) / (psum + ysum + smooth))
}

/// 4-connected component labels of the foreground (`true`) pixels;
/// background stays 0, components are numbered from 1 in scan order.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Vec<u32> {
    assert_eq!(mask.len(), h * w, "mask length must be h*w");
    let mut parent: Vec<u32> = (0..(h * w) as u32 + 1).collect();
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }
    let mut labels = vec![0u32; h * w];
    let mut next = 1u32;
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            if !mask[idx] {
                continue;
            }
            let west = (j > 0 && mask[idx - 1]).then(|| labels[idx - 1]);
            let north = (i > 0 && mask[idx - w]).then(|| labels[idx - w]);
            match (west, north) {
                (None, None) => {
                    labels[idx] = next;
                    next += 1;
                }
                (Some(a), None) | (None, Some(a)) => labels[idx] = a,
                (Some(a), Some(b)) => {
                    labels[idx] = a.min(b);
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        parent[ra.max(rb) as usize] = ra.min(rb);
                    }
                }
            }
        }
    }
    // compress to consecutive ids in scan order
    let mut remap: HashMap<u32, u32> = HashMap::new();
    let mut out_next = 1u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l);
        let id = *remap.entry(root).or_insert_with(|| {
            let id = out_next;
            out_next += 1;
            id
        });
        *l = id;
    }
    labels
}

fn binom2(n: u64) -> f64 {
    (n as f64) * ((n as f64) - 1.0) / 2.0
}

/// Rand index over pixel pairs whose ground-truth label is foreground
/// (nonzero): the fraction of such pairs on which prediction and truth agree
/// about same-segment vs different-segment. Background on the prediction
/// side (id 0) counts as an ordinary segment id for pair agreement.
pub fn rand_index_foreground(pred: &[u32], truth: &[u32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "rand_index_foreground",
            msg: format!("lengths {} vs {}", pred.len(), truth.len()),
        });
    }
    let mut cells: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    let mut m: u64 = 0;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        if t == 0 {
            continue;
        }
        *cells.entry((t, p)).or_insert(0) += 1;
        *rows.entry(t).or_insert(0) += 1;
        *cols.entry(p).or_insert(0) += 1;
        m += 1;
    }
    if m < 2 {
        return Err(Error::UndefinedMetric(format!(
            "rand_index_foreground needs at least 2 foreground pixels, found {m}"
        )));
    }
    let total = binom2(m);
    let row_pairs: f64 = rows.values().map(|&n| binom2(n)).sum();
    let col_pairs: f64 = cols.values().map(|&n| binom2(n)).sum();
    let cell_pairs: f64 = cells.values().map(|&n| binom2(n)).sum();
    Ok((total - row_pairs - col_pairs + 2.0 * cell_pairs) / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::tensor::{Parameter, Tensor};
    use proptest::prelude::*;
    use rand::Rng;

    fn params() -> Vec<Parameter<f64>> {
        vec![
            Parameter::new(Tensor::zeros(&[2]), "down1.conv.weight", 0),
            Parameter::new(Tensor::zeros(&[1]), "down1.conv.bias", 0),
            Parameter::new(Tensor::zeros(&[3]), "classifier.conv.weight", 1),
        ]
    }

    fn snap(vals: &[Vec<f64>]) -> ParamSnapshot<f64> {
        vec![
            ("down1.conv.weight".into(), vals[0].clone()),
            ("down1.conv.bias".into(), vals[1].clone()),
            ("classifier.conv.weight".into(), vals[2].clone()),
        ]
    }

    #[test]
    fn unchanged_parameters_record_zero() {
        let mut acc = UpdateAccumulator::for_params(&params());
        let s = snap(&[vec![1.0, 2.0], vec![0.5], vec![0.0, 0.0, 0.0]]);
        record_layer_updates(&s, &s, &mut acc).unwrap();
        acc.close_epoch(0);
        assert!(acc.records().iter().all(|r| r.mean_abs_update == 0.0));
    }

    #[test]
    fn single_layer_mean_abs_update_arithmetic() {
        let p = vec![Parameter::new(Tensor::<f64>::zeros(&[2]), "layer.weight", 0)];
        let mut acc = UpdateAccumulator::for_params(&p);
        let before = vec![("layer.weight".to_string(), vec![1.0, 2.0])];
        let after = vec![("layer.weight".to_string(), vec![1.1, 1.8])];
        record_layer_updates(&before, &after, &mut acc).unwrap();
        acc.close_epoch(3);
        let r = &acc.records()[0];
        assert_eq!(r.epoch, 3);
        assert_eq!(r.layer_name, "layer");
        assert!((r.mean_abs_update - 0.15).abs() < 1e-12);
    }

    #[test]
    fn name_mismatch_is_a_telemetry_error() {
        let mut acc = UpdateAccumulator::for_params(&params());
        let a = snap(&[vec![0.0; 2], vec![0.0], vec![0.0; 3]]);
        let mut b = a.clone();
        b[1].0 = "down1.conv.other".into();
        assert!(matches!(
            record_layer_updates(&a, &b, &mut acc),
            Err(Error::Telemetry(_))
        ));
    }

    #[test]
    fn telemetry_conserves_total_l1_delta() {
        let mut rng = derive_rng(3, "telemetry", 0);
        let ps = params();
        let mut acc = UpdateAccumulator::for_params(&ps);
        let before = snap(&[
            (0..2).map(|_| rng.random::<f64>()).collect(),
            vec![rng.random::<f64>()],
            (0..3).map(|_| rng.random::<f64>()).collect(),
        ]);
        let after = snap(&[
            (0..2).map(|_| rng.random::<f64>()).collect(),
            vec![rng.random::<f64>()],
            (0..3).map(|_| rng.random::<f64>()).collect(),
        ]);
        record_layer_updates(&before, &after, &mut acc).unwrap();
        acc.close_epoch(0);
        let total_l1: f64 = before
            .iter()
            .zip(after.iter())
            .flat_map(|((_, b), (_, a))| b.iter().zip(a.iter()).map(|(x, y)| (x - y).abs()))
            .sum();
        // layer "down1.conv" has 3 scalars, "classifier.conv" has 3
        let recon: f64 = acc
            .records()
            .iter()
            .map(|r| r.mean_abs_update * 3.0)
            .sum();
        assert!((total_l1 - recon).abs() < 1e-6, "{total_l1} vs {recon}");
    }

    #[test]
    fn csv_round_trip_and_ordering() {
        let records = vec![
            UpdateRecord {
                epoch: 1,
                layer_name: "b".into(),
                depth_index: 1,
                mean_abs_update: 0.25,
            },
            UpdateRecord {
                epoch: 0,
                layer_name: "a".into(),
                depth_index: 0,
                mean_abs_update: 0.1234567890123,
            },
            UpdateRecord {
                epoch: 0,
                layer_name: "b".into(),
                depth_index: 1,
                mean_abs_update: 3e-9,
            },
            UpdateRecord {
                epoch: 1,
                layer_name: "a".into(),
                depth_index: 0,
                mean_abs_update: 0.5,
            },
            UpdateRecord {
                epoch: 0,
                layer_name: "c".into(),
                depth_index: 2,
                mean_abs_update: 0.0,
            },
            UpdateRecord {
                epoch: 1,
                layer_name: "c".into(),
                depth_index: 2,
                mean_abs_update: 1.0,
            },
        ];
        let text = update_csv_string(&records);
        assert_eq!(text.lines().next().unwrap(), UPDATE_CSV_HEADER);
        assert_eq!(text.lines().count(), 7);
        let parsed = parse_update_csv(&text).unwrap();
        let epochs: Vec<usize> = parsed.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 0, 0, 1, 1, 1]);
        // round trip preserves every record exactly
        for r in &records {
            assert!(parsed.contains(r), "{r:?}");
        }
    }

    #[test]
    fn empty_records_give_header_only() {
        assert_eq!(update_csv_string(&[]), format!("{UPDATE_CSV_HEADER}\n"));
    }

    #[test]
    fn accuracy_trivial_cases() {
        let a = vec![true, false, true, true];
        let b: Vec<bool> = a.iter().map(|x| !x).collect();
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_matches_brute_count() {
        let mut rng = derive_rng(5, "acc", 0);
        for _ in 0..50 {
            let a: Vec<bool> = (0..16).map(|_| rng.random::<bool>()).collect();
            let b: Vec<bool> = (0..16).map(|_| rng.random::<bool>()).collect();
            let mut hits = 0;
            for i in 0..16 {
                if a[i] == b[i] {
                    hits += 1;
                }
            }
            assert_eq!(pixel_accuracy(&a, &b).unwrap(), hits as f64 / 16.0);
        }
    }

    #[test]
    fn soft_dice_trivial_cases() {
        let y = vec![1.0, 0.0, 1.0, 0.0];
        assert_eq!(soft_dice_coefficient(&y, &y, 0.0).unwrap(), 1.0);
        let half = soft_dice_coefficient(&[1.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((half - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn components_label_a_split_grid() {
        // two vertical bars separated by background
        let mask = vec![
            true, false, true, //
            true, false, true, //
            true, false, true,
        ];
        let labels = connected_components(&mask, 3, 3);
        assert_eq!(labels, vec![1, 0, 2, 1, 0, 2, 1, 0, 2]);
    }

    #[test]
    fn components_merge_u_shape() {
        // U shape: two arms joined at the bottom row -> one component
        let mask = vec![
            true, false, true, //
            true, false, true, //
            true, true, true,
        ];
        let labels = connected_components(&mask, 3, 3);
        let ids: std::collections::HashSet<u32> =
            labels.iter().copied().filter(|&l| l != 0).collect();
        assert_eq!(ids.len(), 1);
    }

    #[test]
    fn rand_index_trivial_and_split_example() {
        let truth = vec![0, 1, 1, 1];
        assert_eq!(rand_index_foreground(&truth, &truth).unwrap(), 1.0);
        // truth: one 3-pixel segment; pred splits it 2 + 1:
        // agreeing pairs C(2,2)=1 of C(3,2)=3
        let pred = vec![0, 5, 5, 9];
        let ri = rand_index_foreground(&pred, &truth).unwrap();
        assert!((ri - 1.0 / 3.0).abs() < 1e-15, "{ri}");
    }

    #[test]
    fn rand_index_needs_foreground() {
        let z = vec![0u32; 4];
        assert!(matches!(
            rand_index_foreground(&z, &z),
            Err(Error::UndefinedMetric(_))
        ));
    }

    /// O(n^2) brute force over all pixel pairs.
    fn rand_brute(pred: &[u32], truth: &[u32]) -> Option<f64> {
        let mut total = 0u64;
        let mut agree = 0u64;
        for i in 0..truth.len() {
            for j in i + 1..truth.len() {
                if truth[i] == 0 || truth[j] == 0 {
                    continue;
                }
                total += 1;
                if (truth[i] == truth[j]) == (pred[i] == pred[j]) {
                    agree += 1;
                }
            }
        }
        (total > 0).then(|| agree as f64 / total as f64)
    }

    #[test]
    fn rand_index_matches_brute_force() {
        let mut rng = derive_rng(7, "rand-brute", 0);
        for _ in 0..100 {
            let truth: Vec<u32> = (0..16).map(|_| rng.random_range(0..4)).collect();
            let pred: Vec<u32> = (0..16).map(|_| rng.random_range(0..4)).collect();
            match (rand_index_foreground(&pred, &truth), rand_brute(&pred, &truth)) {
                (Ok(fast), Some(slow)) => {
                    assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}")
                }
                (Err(_), None) => {}
                (fast, slow) => panic!("disagree on definedness: {fast:?} vs {slow:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn rand_index_invariant_under_relabeling(values in proptest::collection::vec(0u32..5, 16)) {
            let truth: Vec<u32> = values.clone();
            let pred: Vec<u32> = values.iter().map(|v| (v * 7) % 5).collect();
            // permute nonzero ids on both sides (background stays 0)
            let perm = |v: u32| if v == 0 { 0 } else { ((v as u64 * 3 + 1) % 97) as u32 + 10 };
            let t2: Vec<u32> = truth.iter().map(|&v| perm(v)).collect();
            let p2: Vec<u32> = pred.iter().map(|&v| perm(v)).collect();
            match (rand_index_foreground(&pred, &truth), rand_index_foreground(&p2, &t2)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "definedness changed: {other:?}"),
            }
        }
    }
}
