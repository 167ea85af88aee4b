//! Inverted-pyramid image-to-image model.
//!
//! The model processes an RGB-D input at a cascade of scales. Level 1
//! runs at full resolution and each deeper level at half the previous.
//! Deeper levels see coarser context; their features are upsampled with
//! transposed convolutions and concatenated into the next shallower
//! level. Every level carries its own output head so it can be trained
//! and evaluated standalone, which is what makes progressive
//! deepest-to-shallowest training possible. The level 1 head upsamples
//! once more, so the final output has twice the input resolution.
//!
//! Parameters are partitioned into per-level groups. Evaluating level
//! `l` touches exactly the groups `l..=levels`, so a deep stage can be
//! trained without ever reading shallower weights. The downsampling
//! path is a parameterless max-pool chain for the same reason.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Error, TensorError};
use crate::num::Element;
use crate::rng::DetRng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Channel growth stops at this multiple of `base_width`.
pub const WIDTH_CAP: usize = 8;

pub const MAX_LEVELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub levels: usize,
    pub base_width: usize,
    pub leaky_alpha: f64,
    /// Levels whose blocks end in instance normalization. Level 1 and
    /// the output heads never normalize.
    pub norm_levels: Vec<usize>,
    pub norm_eps: f64,
}

impl Default for PyNetConfig {
    fn default() -> Self {
        Self::with_levels(5, 8)
    }
}

impl PyNetConfig {
    pub fn with_levels(levels: usize, base_width: usize) -> Self {
        Self {
            in_channels: 4,
            out_channels: 3,
            levels,
            base_width,
            leaky_alpha: 0.2,
            norm_levels: (2..=levels.min(5)).collect(),
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |f: &'static str, detail: String| ConfigError::Invalid { field: f, detail };
        if self.levels < 1 || self.levels > MAX_LEVELS {
            return Err(field(
                "levels",
                format!("must be in 1..={MAX_LEVELS}, got {}", self.levels),
            ));
        }
        if self.in_channels == 0 {
            return Err(field("in_channels", "must be >= 1".into()));
        }
        if self.out_channels == 0 {
            return Err(field("out_channels", "must be >= 1".into()));
        }
        if self.base_width == 0 {
            return Err(field("base_width", "must be >= 1".into()));
        }
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return Err(field(
                "leaky_alpha",
                format!("must be in (0, 1), got {}", self.leaky_alpha),
            ));
        }
        if !(self.norm_eps > 0.0) || !self.norm_eps.is_finite() {
            return Err(field(
                "norm_eps",
                format!("must be positive and finite, got {}", self.norm_eps),
            ));
        }
        let mut seen = BTreeSet::new();
        for &l in &self.norm_levels {
            if l < 2 || l > self.levels {
                return Err(field(
                    "norm_levels",
                    format!("level {l} outside 2..={}", self.levels),
                ));
            }
            if !seen.insert(l) {
                return Err(field("norm_levels", format!("level {l} listed twice")));
            }
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        (self.base_width << (level - 1)).min(self.base_width * WIDTH_CAP)
    }

    pub fn branch_kernels(&self, level: usize) -> &'static [usize] {
        match level {
            1 => &[3],
            2 => &[3, 5],
            3 => &[3, 5, 7],
            _ => &[3, 5, 7, 9],
        }
    }

    pub fn block_reps(&self, level: usize) -> usize {
        if level >= 4 {
            2
        } else {
            1
        }
    }

    pub fn normalizes(&self, level: usize) -> bool {
        self.norm_levels.contains(&level)
    }

    /// Spatial extents must survive the max-pool chain down to the
    /// deepest level with at least a 2x2 plane remaining.
    pub fn check_input_extent(&self, h: usize, w: usize) -> Result<(), ConfigError> {
        let div = 1usize << (self.levels - 1);
        for (name, e) in [("height", h), ("width", w)] {
            if e % div != 0 || e / div < 2 {
                return Err(ConfigError::Invalid {
                    field: "input extent",
                    detail: format!(
                        "{name} {e} must be a multiple of {div} with at least 2 remaining at level {}",
                        self.levels
                    ),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    /// Level that owns this tensor; the final upscaler belongs to group 1.
    pub group: usize,
    pub tensor: Tensor<T>,
}

/// Output of one forward pass plus the parameters it placed on the tape,
/// in placement order.
pub struct Forward {
    pub output: TensorId,
    pub touched: Vec<(usize, TensorId)>,
}

pub struct PyNet<T: Element> {
    cfg: PyNetConfig,
    params: Vec<Param<T>>,
}

impl<T: Element> PyNet<T> {
    /// Builds the model with Glorot-uniform weights. All draws happen in
    /// f64 before conversion, so f32 and f64 models built from the same
    /// seed hold the same values.
    pub fn init(cfg: PyNetConfig, seed: u64) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = DetRng::new(seed);
        let mut params = Vec::new();

        let conv = |params: &mut Vec<Param<T>>,
                        rng: &mut DetRng,
                        name: String,
                        group: usize,
                        cin: usize,
                        cout: usize,
                        k: usize,
                        transposed: bool| {
            let limit = (6.0 / ((cin + cout) * k * k) as f64).sqrt();
            let n = cin * cout * k * k;
            let data: Vec<T> = (0..n)
                .map(|_| T::from_f64(rng.uniform(-limit, limit)))
                .collect();
            let shape = if transposed {
                vec![cin, cout, k, k]
            } else {
                vec![cout, cin, k, k]
            };
            params.push(Param {
                name: format!("{name}.w"),
                group,
                tensor: Tensor::new(shape, data).expect("weight shape"),
            });
            params.push(Param {
                name: format!("{name}.b"),
                group,
                tensor: Tensor::zeros(&[cout]),
            });
        };

        for level in (1..=cfg.levels).rev() {
            let wl = cfg.width(level);
            if level < cfg.levels {
                conv(
                    &mut params,
                    &mut rng,
                    format!("l{level}.up"),
                    level,
                    cfg.width(level + 1),
                    wl,
                    2,
                    true,
                );
            }
            let kernels = cfg.branch_kernels(level);
            for rep in 0..cfg.block_reps(level) {
                let cin = if rep > 0 {
                    wl
                } else if level == cfg.levels {
                    cfg.in_channels
                } else {
                    cfg.in_channels + wl
                };
                for &k in kernels {
                    conv(
                        &mut params,
                        &mut rng,
                        format!("l{level}.r{rep}.k{k}"),
                        level,
                        cin,
                        wl,
                        k,
                        false,
                    );
                }
                conv(
                    &mut params,
                    &mut rng,
                    format!("l{level}.r{rep}.fuse"),
                    level,
                    wl * kernels.len(),
                    wl,
                    3,
                    false,
                );
                if cfg.normalizes(level) {
                    params.push(Param {
                        name: format!("l{level}.r{rep}.norm.gamma"),
                        group: level,
                        tensor: Tensor::filled(&[wl], T::one()),
                    });
                    params.push(Param {
                        name: format!("l{level}.r{rep}.norm.beta"),
                        group: level,
                        tensor: Tensor::zeros(&[wl]),
                    });
                }
            }
            if level >= 2 {
                conv(
                    &mut params,
                    &mut rng,
                    format!("l{level}.head"),
                    level,
                    wl,
                    cfg.out_channels,
                    3,
                    false,
                );
            }
        }
        let w1 = cfg.width(1);
        conv(
            &mut params,
            &mut rng,
            "out.up1".into(),
            1,
            w1,
            cfg.base_width,
            2,
            true,
        );
        conv(
            &mut params,
            &mut rng,
            "out.up2".into(),
            1,
            cfg.base_width,
            cfg.out_channels,
            1,
            true,
        );

        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &PyNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param_tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.params[idx].tensor
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Indices of the parameters optimized when training at `level`:
    /// every group at that level or deeper.
    pub fn trainable_set(&self, level: usize) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group >= level)
            .map(|(i, _)| i)
            .collect()
    }

    /// Runs the model at `level` (1 = full pyramid). `disabled` levels
    /// have their features replaced by zeros; anything feeding only a
    /// disabled level is skipped entirely. Parameters in groups at
    /// `train_from` or deeper are placed as differentiable leaves.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: TensorId,
        level: usize,
        disabled: &[usize],
        train_from: Option<usize>,
    ) -> Result<Forward, Error> {
        let cfg = &self.cfg;
        if level < 1 || level > cfg.levels {
            return Err(ConfigError::Invalid {
                field: "level",
                detail: format!("must be in 1..={}, got {level}", cfg.levels),
            }
            .into());
        }
        let mut cut: Option<usize> = None;
        for &d in disabled {
            if d < 4 || d > cfg.levels {
                return Err(ConfigError::Invalid {
                    field: "disabled",
                    detail: format!("only levels 4..={} can be disabled, got {d}", cfg.levels),
                }
                .into());
            }
            if d <= level {
                return Err(ConfigError::Invalid {
                    field: "disabled",
                    detail: format!("cannot disable level {d} while evaluating level {level}"),
                }
                .into());
            }
            cut = Some(cut.map_or(d, |c: usize| c.min(d)));
        }
        let (_, c, h, w) = tape.value(input).as_nchw("forward")?;
        if c != cfg.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                dim: "input channels",
                expected: cfg.in_channels.to_string(),
                got: c.to_string(),
            }
            .into());
        }
        cfg.check_input_extent(h, w)?;

        let mut touched: Vec<(usize, TensorId)> = Vec::new();
        let mut place = |tape: &mut Tape<T>, touched: &mut Vec<(usize, TensorId)>, name: String| {
            let idx = self
                .param_index(&name)
                .unwrap_or_else(|| panic!("unknown parameter {name}"));
            let requires = train_from.is_some_and(|t| self.params[idx].group >= t);
            let id = tape.leaf(self.params[idx].tensor.clone(), requires);
            touched.push((idx, id));
            id
        };

        // deepest block that actually runs
        let start = cut.map_or(cfg.levels, |c| c - 1);

        // max-pool chain: pools[l - level] holds the input at level l
        let mut pools = Vec::with_capacity(start - level + 1);
        let mut p = input;
        for l in 1..=start {
            if l >= level {
                pools.push(p);
            }
            if l < start {
                p = tape.maxpool2(p)?;
            }
        }

        let mut deeper: Option<TensorId> = match cut {
            Some(cl) => {
                let shape = tape
                    .value(input)
                    .shape_like_nchw(cfg.width(cl), h >> (cl - 1), w >> (cl - 1));
                Some(tape.constant(Tensor::zeros(&shape)))
            }
            None => None,
        };

        for l in (level..=start).rev() {
            let pool = pools[l - level];
            let block_in = match deeper {
                None => pool,
                Some(u) => {
                    let wgt = place(tape, &mut touched, format!("l{l}.up.w"));
                    let bias = place(tape, &mut touched, format!("l{l}.up.b"));
                    let up = tape.conv2d_transpose(u, wgt, Some(bias), 2)?;
                    let up = tape.leaky_relu(up, cfg.leaky_alpha)?;
                    tape.concat_channels(pool, up)?
                }
            };
            let mut cur = block_in;
            for rep in 0..cfg.block_reps(l) {
                cur = self.block_rep(tape, &mut touched, &mut place, cur, l, rep)?;
            }
            deeper = Some(cur);
        }
        let features = deeper.expect("at least one level runs");

        let output = if level >= 2 {
            let wgt = place(tape, &mut touched, format!("l{level}.head.w"));
            let bias = place(tape, &mut touched, format!("l{level}.head.b"));
            let y = tape.conv2d(features, wgt, Some(bias), 1, 1)?;
            tape.tanh(y)?
        } else {
            let w1 = place(tape, &mut touched, "out.up1.w".into());
            let b1 = place(tape, &mut touched, "out.up1.b".into());
            let y = tape.conv2d_transpose(features, w1, Some(b1), 2)?;
            let y = tape.leaky_relu(y, cfg.leaky_alpha)?;
            let w2 = place(tape, &mut touched, "out.up2.w".into());
            let b2 = place(tape, &mut touched, "out.up2.b".into());
            let y = tape.conv2d_transpose(y, w2, Some(b2), 1)?;
            tape.tanh(y)?
        };
        Ok(Forward { output, touched })
    }

    #[allow(clippy::too_many_arguments)]
    fn block_rep(
        &self,
        tape: &mut Tape<T>,
        touched: &mut Vec<(usize, TensorId)>,
        place: &mut impl FnMut(&mut Tape<T>, &mut Vec<(usize, TensorId)>, String) -> TensorId,
        input: TensorId,
        level: usize,
        rep: usize,
    ) -> Result<TensorId, Error> {
        let cfg = &self.cfg;
        let mut branches = Vec::new();
        for &k in cfg.branch_kernels(level) {
            let wgt = place(tape, touched, format!("l{level}.r{rep}.k{k}.w"));
            let bias = place(tape, touched, format!("l{level}.r{rep}.k{k}.b"));
            let y = tape.conv2d(input, wgt, Some(bias), 1, (k - 1) / 2)?;
            branches.push(tape.leaky_relu(y, cfg.leaky_alpha)?);
        }
        let mut cat = branches[0];
        for &b in &branches[1..] {
            cat = tape.concat_channels(cat, b)?;
        }
        let fw = place(tape, touched, format!("l{level}.r{rep}.fuse.w"));
        let fb = place(tape, touched, format!("l{level}.r{rep}.fuse.b"));
        let fused = tape.conv2d(cat, fw, Some(fb), 1, 1)?;
        let mut out = tape.add(fused, branches[0])?;
        if cfg.normalizes(level) {
            let g = place(tape, touched, format!("l{level}.r{rep}.norm.gamma"));
            let b = place(tape, touched, format!("l{level}.r{rep}.norm.beta"));
            out = tape.instance_norm(out, g, b, cfg.norm_eps)?;
        }
        Ok(tape.leaky_relu(out, cfg.leaky_alpha)?)
    }
}
