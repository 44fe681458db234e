//! The toy one-stage detector: two conv/relu/pool stages shared by a
//! classification head and a localization head over two feature maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anchors::{self, AnchorConfig, AnchorSet};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: usize = 64;

const BASE1_CHANNELS: usize = 16;
const BASE2_CHANNELS: usize = 32;
const KERNEL: usize = 3;

/// Architecture-level settings: class count (including background) and the
/// anchor layout. Everything else about the network is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Total classes including background (class 0).
    pub classes: usize,
    pub anchors: AnchorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 5,
            anchors: AnchorConfig::default_two_map(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Invalid("need at least background + 1 class".into()));
        }
        self.anchors.validate()?;
        let per_cell: Vec<usize> = self.anchors.maps.iter().map(|m| m.anchors_per_cell()).collect();
        if per_cell.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Invalid(
                "all feature maps must share one anchors-per-cell count (heads are shared)".into(),
            ));
        }
        // The shared base-net produces 16x16 and 8x8 maps for 64x64 input.
        let grids: Vec<usize> = self.anchors.maps.iter().map(|m| m.grid).collect();
        if grids != [16, 8] {
            return Err(Error::Invalid(format!(
                "anchor grids must be [16, 8] to match the base-net, got {grids:?}"
            )));
        }
        Ok(())
    }
}

/// Tape ids of the registered parameter leaves for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ParamIds {
    pub conv1_w: ValueId,
    pub conv1_b: ValueId,
    pub conv2_w: ValueId,
    pub conv2_b: ValueId,
    pub cls_w: ValueId,
    pub cls_b: ValueId,
    pub loc_w: ValueId,
    pub loc_b: ValueId,
}

impl ParamIds {
    pub fn as_array(&self) -> [ValueId; 8] {
        [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.cls_w,
            self.cls_b,
            self.loc_w,
            self.loc_b,
        ]
    }
}

/// Raw head outputs of one forward pass: per-anchor class logits and box
/// offsets, in anchor order.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub logits: ValueId,
    pub offsets: ValueId,
    pub params: ParamIds,
}

pub const PARAM_NAMES: [&str; 8] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "cls_w", "cls_b", "loc_w", "loc_b",
];

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub config: ModelConfig,
    params: [Tensor; 8],
    anchor_set: AnchorSet,
    reindex_cls: [Arc<Vec<u32>>; 2],
    reindex_loc: [Arc<Vec<u32>>; 2],
}

/// Builds the gather indices mapping a head's `[A*D, H, W]` conv output to
/// `[H*W*A, D]` rows in anchor order.
fn head_index(grid: usize, per_cell: usize, depth: usize) -> Arc<Vec<u32>> {
    let hw = grid * grid;
    let mut index = Vec::with_capacity(hw * per_cell * depth);
    for cell in 0..hw {
        for a in 0..per_cell {
            for d in 0..depth {
                index.push(((a * depth + d) * hw + cell) as u32);
            }
        }
    }
    Arc::new(index)
}

impl DetectorModel {
    /// Random initialization: Kaiming fan-in scaling for conv kernels, zero
    /// biases, all driven by the given seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let per_cell = config.anchors.maps[0].anchors_per_cell();
        let c = config.classes;
        let mut rng = rng::stream_rng(seed, rng::STREAM_INIT, 0);

        let conv = |cout: usize, cin: usize, rng: &mut ChaCha8Rng| -> Tensor {
            let fan_in = (cin * KERNEL * KERNEL) as f32;
            let std = (2.0 / fan_in).sqrt();
            let normal = Normal::new(0.0f32, std).expect("valid std");
            let vals: Vec<f32> = (0..cout * cin * KERNEL * KERNEL)
                .map(|_| normal.sample(rng))
                .collect();
            Tensor::new(vec![cout, cin, KERNEL, KERNEL], vals).expect("init tensor")
        };

        let params = [
            conv(BASE1_CHANNELS, INPUT_CHANNELS, &mut rng),
            Tensor::zeros(&[BASE1_CHANNELS]),
            conv(BASE2_CHANNELS, BASE1_CHANNELS, &mut rng),
            Tensor::zeros(&[BASE2_CHANNELS]),
            conv(per_cell * c, BASE2_CHANNELS, &mut rng),
            Tensor::zeros(&[per_cell * c]),
            conv(per_cell * 4, BASE2_CHANNELS, &mut rng),
            Tensor::zeros(&[per_cell * 4]),
        ];
        Self::assemble(config.clone(), params)
    }

    fn assemble(config: ModelConfig, mut params: [Tensor; 8]) -> Result<Self> {
        let per_cell = config.anchors.maps[0].anchors_per_cell();
        let c = config.classes;
        let expected: [(&str, Vec<usize>); 8] = [
            ("conv1_w", vec![BASE1_CHANNELS, INPUT_CHANNELS, KERNEL, KERNEL]),
            ("conv1_b", vec![BASE1_CHANNELS]),
            ("conv2_w", vec![BASE2_CHANNELS, BASE1_CHANNELS, KERNEL, KERNEL]),
            ("conv2_b", vec![BASE2_CHANNELS]),
            ("cls_w", vec![per_cell * c, BASE2_CHANNELS, KERNEL, KERNEL]),
            ("cls_b", vec![per_cell * c]),
            ("loc_w", vec![per_cell * 4, BASE2_CHANNELS, KERNEL, KERNEL]),
            ("loc_b", vec![per_cell * 4]),
        ];
        for (t, (name, shape)) in params.iter().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        for p in &mut params {
            p.set_requires_grad(true);
        }
        let anchor_set = anchors::generate_anchors(&config.anchors)?;
        let g1 = config.anchors.maps[0].grid;
        let g2 = config.anchors.maps[1].grid;
        Ok(DetectorModel {
            reindex_cls: [head_index(g1, per_cell, c), head_index(g2, per_cell, c)],
            reindex_loc: [head_index(g1, per_cell, 4), head_index(g2, per_cell, 4)],
            anchor_set,
            config,
            params,
        })
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchor_set
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_set.len()
    }

    pub fn params(&self) -> &[Tensor; 8] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor; 8] {
        &mut self.params
    }

    /// Hash of the fixed architecture plus config, used to reject mismatched
    /// checkpoints. FNV-1a over a canonical description string.
    pub fn arch_hash(&self) -> String {
        let mut desc = String::new();
        let _ = write!(
            desc,
            "in={INPUT_CHANNELS}x{INPUT_SIZE};base={BASE1_CHANNELS},{BASE2_CHANNELS};k={KERNEL};classes={};anchors={}",
            self.config.classes,
            self.config.anchors.to_config_string()
        );
        let mut h: u64 = 0xcbf29ce484222325;
        for b in desc.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Runs the network on a registered image leaf.
    ///
    /// Both heads share one base-net activation; each head's single conv is
    /// applied to the 16x16 map and its pooled 8x8 copy. When
    /// `param_grads` is false the parameters are registered as frozen
    /// leaves, so backward reaches only the image.
    pub fn forward(&self, tape: &mut Tape, image: ValueId, param_grads: bool) -> Result<ForwardOut> {
        let expect = [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE];
        if tape.shape(image) != expect {
            return Err(Error::Shape(format!(
                "detector input: expected {expect:?}, got {:?}",
                tape.shape(image)
            )));
        }
        let ids: Vec<ValueId> = self
            .params
            .iter()
            .map(|p| tape.leaf_req(p, param_grads))
            .collect::<Result<_>>()?;
        let params = ParamIds {
            conv1_w: ids[0],
            conv1_b: ids[1],
            conv2_w: ids[2],
            conv2_b: ids[3],
            cls_w: ids[4],
            cls_b: ids[5],
            loc_w: ids[6],
            loc_b: ids[7],
        };

        // Pixels arrive in [0, 255]; center them to [-0.5, 0.5].
        let x = tape.affine(image, 1.0 / 255.0, -0.5)?;
        let c1 = tape.conv2d(x, params.conv1_w, params.conv1_b, 1, 1)?;
        let r1 = tape.relu(c1)?;
        let p1 = tape.maxpool2(r1)?;
        let c2 = tape.conv2d(p1, params.conv2_w, params.conv2_b, 1, 1)?;
        let r2 = tape.relu(c2)?;
        let f1 = tape.maxpool2(r2)?;
        let f2 = tape.maxpool2(f1)?;

        let per_cell = self.config.anchors.maps[0].anchors_per_cell();
        let c = self.config.classes;
        let g1 = self.config.anchors.maps[0].grid;
        let g2 = self.config.anchors.maps[1].grid;

        let cls1 = tape.conv2d(f1, params.cls_w, params.cls_b, 1, 1)?;
        let cls2 = tape.conv2d(f2, params.cls_w, params.cls_b, 1, 1)?;
        let rows1 = tape.reindex(cls1, self.reindex_cls[0].clone(), vec![g1 * g1 * per_cell, c])?;
        let rows2 = tape.reindex(cls2, self.reindex_cls[1].clone(), vec![g2 * g2 * per_cell, c])?;
        let logits = tape.concat0(rows1, rows2)?;

        let loc1 = tape.conv2d(f1, params.loc_w, params.loc_b, 1, 1)?;
        let loc2 = tape.conv2d(f2, params.loc_w, params.loc_b, 1, 1)?;
        let lrows1 = tape.reindex(loc1, self.reindex_loc[0].clone(), vec![g1 * g1 * per_cell, 4])?;
        let lrows2 = tape.reindex(loc2, self.reindex_loc[1].clone(), vec![g2 * g2 * per_cell, 4])?;
        let offsets = tape.concat0(lrows1, lrows2)?;

        Ok(ForwardOut {
            logits,
            offsets,
            params,
        })
    }

    /// Saves a checkpoint directory: `manifest.txt` plus one tensor snapshot
    /// per parameter under `params/`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let perr = |e| Error::io(dir.display().to_string(), e);
        fs::create_dir_all(dir.join("params")).map_err(perr)?;
        let mut manifest = String::new();
        manifest.push_str(&format!("anchors={}\n", self.config.anchors.to_config_string()));
        manifest.push_str(&format!("arch_hash={}\n", self.arch_hash()));
        manifest.push_str(&format!("classes={}\n", self.config.classes));
        fs::write(dir.join("manifest.txt"), manifest).map_err(perr)?;
        for (name, t) in PARAM_NAMES.iter().zip(&self.params) {
            t.write_snapshot(&dir.join("params").join(format!("{name}.rdt")))?;
        }
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.txt");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
        let mut classes = None;
        let mut anchors_str = None;
        let mut arch_hash = None;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}: line {}: expected key=value",
                    mpath.display(),
                    ln + 1
                )));
            };
            match k {
                "classes" => {
                    classes = Some(v.parse::<usize>().map_err(|_| {
                        Error::Config(format!("{}: bad classes '{v}'", mpath.display()))
                    })?)
                }
                "anchors" => anchors_str = Some(v.to_string()),
                "arch_hash" => arch_hash = Some(v.to_string()),
                other => {
                    return Err(Error::Config(format!(
                        "{}: unknown manifest key '{other}'",
                        mpath.display()
                    )))
                }
            }
        }
        let config = ModelConfig {
            classes: classes
                .ok_or_else(|| Error::Config(format!("{}: missing classes", mpath.display())))?,
            anchors: AnchorConfig::from_config_string(&anchors_str.ok_or_else(|| {
                Error::Config(format!("{}: missing anchors", mpath.display()))
            })?)?,
        };
        let params: Vec<Tensor> = PARAM_NAMES
            .iter()
            .map(|name| Tensor::read_snapshot(&dir.join("params").join(format!("{name}.rdt"))))
            .collect::<Result<_>>()?;
        let model = Self::assemble(config, params.try_into().expect("eight parameters"))?;
        if let Some(h) = arch_hash {
            if h != model.arch_hash() {
                return Err(Error::Config(format!(
                    "{}: architecture hash mismatch ({} vs {})",
                    mpath.display(),
                    h,
                    model.arch_hash()
                )));
            }
        }
        Ok(model)
    }
}
