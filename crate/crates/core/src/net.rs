//! Full contracting/expanding residual FCN assembled from a declarative row
//! table, with long skip connections carried by summation from the
//! contracting path to the expanding path.
//!
//! Long-skip wiring: while contracting, the output of the last row at each
//! resolution is remembered; on the expanding side, the first row whose
//! input sits at a remembered resolution receives that feature, summed into
//! its input (through a learned 1x1 projection when the widths differ, as
//! summation needs equal widths). Rows at the bottom of the U ("across"
//! rows) neither provide nor receive long skips.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    BasicBlock, BlockOpts, BottleneckBlock, ConvLayer, ForwardCtx, Resample, SimpleBlock,
};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Parameter, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Conv3x3,
    Conv1x1,
    Simple,
    Basic,
    Bottleneck,
}

/// One row of the architecture table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchRow {
    pub name: String,
    pub block: BlockKind,
    /// Output resolution (H, W).
    pub resolution: (usize, usize),
    /// Output width (channels).
    pub width: usize,
    /// How many times the block is repeated; the first repetition performs
    /// the row's resampling and width change.
    pub repeat: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_resolution: (usize, usize),
    pub input_channels: usize,
    pub long_skips: bool,
    pub short_skips: bool,
    pub batch_norm: bool,
    pub dropout_rate: f64,
    pub rows: Vec<ArchRow>,
}

#[derive(Serialize, Deserialize)]
struct NetworkGlobals {
    input_resolution: (usize, usize),
    input_channels: usize,
    long_skips: bool,
    short_skips: bool,
    batch_norm: bool,
    dropout_rate: f64,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    network: NetworkGlobals,
    #[serde(rename = "row")]
    rows: Vec<ArchRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathPhase {
    Contracting,
    Across,
    Expanding,
}

impl NetworkConfig {
    /// Parses the `[network]` and `[[row]]` tables; other tables (such as
    /// `[train]`) are ignored so one file can configure a whole run.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: NetworkFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("network config: {e}")))?;
        let cfg = NetworkConfig {
            input_resolution: file.network.input_resolution,
            input_channels: file.network.input_channels,
            long_skips: file.network.long_skips,
            short_skips: file.network.short_skips,
            batch_norm: file.network.batch_norm,
            dropout_rate: file.network.dropout_rate,
            rows: file.rows,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        let file = NetworkFile {
            network: NetworkGlobals {
                input_resolution: self.input_resolution,
                input_channels: self.input_channels,
                long_skips: self.long_skips,
                short_skips: self.short_skips,
                batch_norm: self.batch_norm,
                dropout_rate: self.dropout_rate,
            },
            rows: self.rows.clone(),
        };
        toml::to_string(&file).expect("network config serializes")
    }

    /// Step direction between consecutive resolutions.
    fn step(prev: (usize, usize), next: (usize, usize)) -> Option<Resample> {
        if next == prev {
            Some(Resample::None)
        } else if prev.0 == 2 * next.0 && prev.1 == 2 * next.1 {
            Some(Resample::Down)
        } else if next.0 == 2 * prev.0 && next.1 == 2 * prev.1 {
            Some(Resample::Up)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("network has no rows".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        let mut names = HashMap::new();
        let mut prev = self.input_resolution;
        for (i, row) in self.rows.iter().enumerate() {
            if row.width == 0 || row.repeat == 0 {
                return Err(Error::Config(format!(
                    "row '{}': width and repeat must be positive",
                    row.name
                )));
            }
            if let Some(old) = names.insert(row.name.clone(), i) {
                return Err(Error::Config(format!(
                    "duplicate row name '{}' (rows {} and {})",
                    row.name, old, i
                )));
            }
            if Self::step(prev, row.resolution).is_none() {
                return Err(Error::Config(format!(
                    "row '{}': resolution {:?} is not equal to, half of, or double the previous {:?}",
                    row.name, row.resolution, prev
                )));
            }
            if row.block == BlockKind::Bottleneck && row.width % 4 != 0 {
                return Err(Error::Config(format!(
                    "row '{}': bottleneck width {} not divisible by 4",
                    row.name, row.width
                )));
            }
            prev = row.resolution;
        }
        let last = self.rows.last().unwrap();
        if last.block != BlockKind::Conv1x1 || last.width != 1 {
            return Err(Error::Config(format!(
                "classifier row '{}' must be a conv1x1 of width 1",
                last.name
            )));
        }
        if self.long_skips {
            self.plan_junctions()?;
        }
        Ok(())
    }

    /// Phase of each row along the contracting -> across -> expanding path.
    pub fn phases(&self) -> Vec<PathPhase> {
        let mut prev = self.input_resolution;
        let mut expanding_from = self.rows.len();
        for (i, row) in self.rows.iter().enumerate() {
            if row.resolution.0 > prev.0 {
                expanding_from = i;
                break;
            }
            prev = row.resolution;
        }
        let mut phases = vec![PathPhase::Expanding; self.rows.len()];
        for i in (0..expanding_from).rev() {
            let res = self.rows[i].resolution;
            let went_down = {
                let before = if i == 0 {
                    self.input_resolution
                } else {
                    self.rows[i - 1].resolution
                };
                res.0 < before.0
            };
            let later_smaller = self.rows[i + 1..expanding_from]
                .iter()
                .any(|r| r.resolution.0 < res.0);
            phases[i] = if went_down || later_smaller {
                PathPhase::Contracting
            } else {
                PathPhase::Across
            };
        }
        phases
    }

    /// Long-skip junction plan: for each row, the contracting row whose
    /// stored feature is summed into this row's input.
    fn plan_junctions(&self) -> Result<Vec<Option<usize>>> {
        let phases = self.phases();
        let mut stored: HashMap<(usize, usize), usize> = HashMap::new();
        let mut plan = vec![None; self.rows.len()];
        let mut cur_res = self.input_resolution;
        for (i, row) in self.rows.iter().enumerate() {
            if phases[i] == PathPhase::Expanding {
                if let Some(&src) = stored.get(&cur_res) {
                    plan[i] = Some(src);
                    stored.remove(&cur_res);
                } else if row.resolution.0 > cur_res.0 {
                    // Upsampling rows must have a matching contracting
                    // feature; equal-resolution rows take one opportunistically.
                    return Err(Error::Config(format!(
                        "row '{}' expands from {}x{} but no contracting row produced that resolution for its long skip",
                        row.name, cur_res.0, cur_res.1
                    )));
                }
            }
            cur_res = row.resolution;
            if phases[i] == PathPhase::Contracting {
                stored.insert(row.resolution, i);
            }
        }
        Ok(plan)
    }
}

#[allow(clippy::large_enum_variant)]
enum BlockModule<F: Real> {
    Conv { layer: ConvLayer<F>, up: bool },
    Simple(SimpleBlock<F>),
    Basic(BasicBlock<F>),
    Bottleneck(BottleneckBlock<F>),
}

impl<F: Real> BlockModule<F> {
    fn forward(&self, x: &Tensor<F>, ctx: &mut ForwardCtx) -> Result<Tensor<F>> {
        match self {
            BlockModule::Conv { layer, up } => {
                let y = layer.forward(x)?;
                if *up {
                    ops::repeat_upsample(&y, 2)
                } else {
                    Ok(y)
                }
            }
            BlockModule::Simple(b) => b.forward(x, ctx),
            BlockModule::Basic(b) => b.forward(x, ctx),
            BlockModule::Bottleneck(b) => b.forward(x, ctx),
        }
    }

    fn collect_params(&self, out: &mut Vec<Parameter<F>>) {
        match self {
            BlockModule::Conv { layer, .. } => {
                out.push(layer.weight.clone());
                out.push(layer.bias.clone());
            }
            BlockModule::Simple(b) => b.collect_params(out),
            BlockModule::Basic(b) => b.collect_params(out),
            BlockModule::Bottleneck(b) => b.collect_params(out),
        }
    }

    fn collect_buffers(&self, out: &mut Vec<(String, Tensor<F>)>) {
        match self {
            BlockModule::Conv { .. } => {}
            BlockModule::Simple(b) => b.collect_buffers(out),
            BlockModule::Basic(b) => b.collect_buffers(out),
            BlockModule::Bottleneck(b) => b.collect_buffers(out),
        }
    }
}

struct Junction<F: Real> {
    source_row: usize,
    proj: Option<ConvLayer<F>>,
}

struct RowModule<F: Real> {
    name: String,
    phase: PathPhase,
    junction: Option<Junction<F>>,
    blocks: Vec<BlockModule<F>>,
}

/// A built network: immutable topology, parameters shared with the
/// optimizer through handle clones.
pub struct Network<F: Real> {
    cfg: NetworkConfig,
    seed: u64,
    rows: Vec<RowModule<F>>,
    params: Vec<Parameter<F>>,
    buffers: Vec<(String, Tensor<F>)>,
}

/// Shape record of one row during a traced forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowTrace {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Builds the network with He fan-in initial weights; every parameter draws
/// from a stream keyed by `(seed, parameter name)`, so configurations that
/// share a parameter name initialize it identically.
pub fn build_network<F: Real>(cfg: &NetworkConfig, seed: u64) -> Result<Network<F>> {
    cfg.validate()?;
    let phases = cfg.phases();
    let junction_plan = if cfg.long_skips {
        cfg.plan_junctions()?
    } else {
        vec![None; cfg.rows.len()]
    };

    let mut rows: Vec<RowModule<F>> = Vec::with_capacity(cfg.rows.len());
    let mut cur_res = cfg.input_resolution;
    let mut cur_width = cfg.input_channels;
    for (idx, row) in cfg.rows.iter().enumerate() {
        let resample = NetworkConfig::step(cur_res, row.resolution).unwrap();
        let junction = junction_plan[idx].map(|source_row| {
            let src_width = cfg.rows[source_row].width;
            let proj = (src_width != cur_width).then(|| {
                ConvLayer::new(
                    seed,
                    &format!("{}.skip_proj", row.name),
                    idx,
                    src_width,
                    cur_width,
                    1,
                    1,
                )
            });
            Junction { source_row, proj }
        });

        let mut blocks = Vec::with_capacity(row.repeat);
        for rep in 1..=row.repeat {
            let (cin, res) = if rep == 1 {
                (cur_width, resample)
            } else {
                (row.width, Resample::None)
            };
            let prefix = match row.block {
                BlockKind::Conv3x3 | BlockKind::Conv1x1 if row.repeat == 1 => row.name.clone(),
                _ => format!("{}.rep{}", row.name, rep),
            };
            let block = match row.block {
                BlockKind::Conv3x3 | BlockKind::Conv1x1 => {
                    let k = if row.block == BlockKind::Conv3x3 { 3 } else { 1 };
                    let stride = if res == Resample::Down { 2 } else { 1 };
                    BlockModule::Conv {
                        layer: ConvLayer::new(
                            seed,
                            &format!("{prefix}.conv"),
                            idx,
                            cin,
                            row.width,
                            k,
                            stride,
                        ),
                        up: res == Resample::Up,
                    }
                }
                kind => {
                    let opts = BlockOpts {
                        in_channels: cin,
                        out_channels: row.width,
                        resample: res,
                        use_batch_norm: cfg.batch_norm,
                        dropout_rate: cfg.dropout_rate,
                        use_short_skip: cfg.short_skips,
                    };
                    match kind {
                        BlockKind::Simple => {
                            BlockModule::Simple(SimpleBlock::new(seed, &prefix, idx, opts)?)
                        }
                        BlockKind::Basic => {
                            BlockModule::Basic(BasicBlock::new(seed, &prefix, idx, opts)?)
                        }
                        BlockKind::Bottleneck => BlockModule::Bottleneck(BottleneckBlock::new(
                            seed, &prefix, idx, opts,
                        )?),
                        _ => unreachable!(),
                    }
                }
            };
            blocks.push(block);
        }
        rows.push(RowModule {
            name: row.name.clone(),
            phase: phases[idx],
            junction,
            blocks,
        });
        cur_res = row.resolution;
        cur_width = row.width;
    }

    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for row in &rows {
        if let Some(j) = &row.junction {
            if let Some(p) = &j.proj {
                params.push(p.weight.clone());
                params.push(p.bias.clone());
            }
        }
        for b in &row.blocks {
            b.collect_params(&mut params);
            b.collect_buffers(&mut buffers);
        }
    }
    let mut seen = HashMap::new();
    for p in &params {
        if seen.insert(p.name.clone(), ()).is_some() {
            return Err(Error::Internal(format!("duplicate parameter name {}", p.name)));
        }
    }

    Ok(Network {
        cfg: cfg.clone(),
        seed,
        rows,
        params,
        buffers,
    })
}

impl<F: Real> Network<F> {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameters(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor<F>)] {
        &self.buffers
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// Total trainable scalar count, batch-norm affine terms included.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn forward(&self, x: &Tensor<F>, ctx: &mut ForwardCtx) -> Result<Tensor<F>> {
        self.forward_inner(x, ctx, None)
    }

    /// Forward pass that also records each row's output shape.
    pub fn forward_trace(
        &self,
        x: &Tensor<F>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor<F>, Vec<RowTrace>)> {
        let mut trace = Vec::with_capacity(self.rows.len());
        let out = self.forward_inner(x, ctx, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn forward_inner(
        &self,
        x: &Tensor<F>,
        ctx: &mut ForwardCtx,
        mut trace: Option<&mut Vec<RowTrace>>,
    ) -> Result<Tensor<F>> {
        let shape = x.shape();
        let want = vec![
            shape.first().copied().unwrap_or(0),
            self.cfg.input_channels,
            self.cfg.input_resolution.0,
            self.cfg.input_resolution.1,
        ];
        if shape.len() != 4 || shape[1..] != want[1..] {
            return Err(Error::Dimension {
                op: "forward_pass",
                msg: format!("input shape {shape:?} does not match configured {want:?}"),
            });
        }

        let mut saved: Vec<Option<Tensor<F>>> = vec![None; self.rows.len()];
        let mut cur = x.clone();
        for (idx, row) in self.rows.iter().enumerate() {
            if let Some(j) = &row.junction {
                let skip = saved[j.source_row]
                    .clone()
                    .ok_or_else(|| Error::Internal(format!("missing skip source for {}", row.name)))?;
                let skip = match &j.proj {
                    Some(p) => p.forward(&skip)?,
                    None => skip,
                };
                cur = cur.add(&skip).map_err(|e| {
                    Error::Internal(format!("long-skip sum at {}: {e}", row.name))
                })?;
            }
            for block in &row.blocks {
                cur = block.forward(&cur, ctx)?;
            }
            if row.phase == PathPhase::Contracting {
                saved[idx] = Some(cur.clone());
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(RowTrace {
                    name: row.name.clone(),
                    shape: cur.shape(),
                });
            }
        }
        Ok(cur)
    }
}
