//! Parameter container: every trainable tensor in the model, addressable by
//! a canonical name for serialization, optimization, and gradient checks.

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Scalar};
use crate::rng;
use crate::tensorbin::{Container, Tensor};
use crate::tokenizer::{PositionalTables, PATCH_DIM};
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// Weights of one transformer block. Linear layers follow the `y = x W + b`
/// convention, so `w1` is E x (mlp_ratio*E) and `w2` the transpose shape.
#[derive(Clone, Debug)]
pub struct BlockParams<T: Scalar> {
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub wq: Mat<T>,
    pub bq: Vec<T>,
    pub wk: Mat<T>,
    pub bk: Vec<T>,
    pub wv: Mat<T>,
    pub bv: Vec<T>,
    pub wo: Mat<T>,
    pub bo: Vec<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
    pub w1: Mat<T>,
    pub b1: Vec<T>,
    pub w2: Mat<T>,
    pub b2: Vec<T>,
}

/// All model weights. Doubles as the gradient holder: gradients are just a
/// second `ModelParams` with the same shapes.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar> {
    pub patch_proj: Mat<T>,
    pub patch_bias: Vec<T>,
    pub c_embed: Vec<T>,
    pub d_embed: Option<Vec<T>>,
    pub tables: PositionalTables<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_gamma: Vec<T>,
    pub final_beta: Vec<T>,
    pub head_w: Mat<T>,
    pub head_b: Vec<T>,
}

/// Read-only view of one tensor, with its canonical shape.
pub struct NamedTensor<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

/// Mutable counterpart of [`NamedTensor`], in the same canonical order.
pub struct NamedTensorMut<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a mut [T],
}

impl<T: Scalar> BlockParams<T> {
    /// All-zero block tensors; the gradient holder for one block.
    pub fn zeros(e: usize, hidden: usize) -> Self {
        BlockParams {
            ln1_gamma: vec![T::zero(); e],
            ln1_beta: vec![T::zero(); e],
            wq: Mat::zeros(e, e),
            bq: vec![T::zero(); e],
            wk: Mat::zeros(e, e),
            bk: vec![T::zero(); e],
            wv: Mat::zeros(e, e),
            bv: vec![T::zero(); e],
            wo: Mat::zeros(e, e),
            bo: vec![T::zero(); e],
            ln2_gamma: vec![T::zero(); e],
            ln2_beta: vec![T::zero(); e],
            w1: Mat::zeros(e, hidden),
            b1: vec![T::zero(); hidden],
            w2: Mat::zeros(hidden, e),
            b2: vec![T::zero(); e],
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero tensors shaped for `config`. The natural gradient holder.
    pub fn zeros(config: &ModelConfig) -> Self {
        let e = config.embed_dim;
        let hidden = config.mlp_ratio * e;
        ModelParams {
            patch_proj: Mat::zeros(PATCH_DIM, e),
            patch_bias: vec![T::zero(); e],
            c_embed: vec![T::zero(); e],
            d_embed: config.has_dist_token.then(|| vec![T::zero(); e]),
            tables: PositionalTables::zeros(config.geometry.f_p, config.geometry.t_p, e),
            blocks: (0..config.depth)
                .map(|_| BlockParams::zeros(e, hidden))
                .collect(),
            final_gamma: vec![T::zero(); e],
            final_beta: vec![T::zero(); e],
            head_w: Mat::zeros(e, config.n_classes),
            head_b: vec![T::zero(); config.n_classes],
        }
    }

    /// From-scratch initialization: weight matrices and special-token
    /// embeddings from a truncated normal (sigma 0.02, cut at two sigma),
    /// norm gains at one, biases and positional tables at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut r = rng::seeded(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid sigma");
        let mut trunc = move || loop {
            let v = normal.sample(&mut r);
            if v.abs() <= 0.04 {
                return T::from_f64(v);
            }
        };
        for nt in p.named_tensors_mut() {
            if nt.name.ends_with("gamma") {
                nt.data.fill(T::one());
            } else if nt.name.starts_with("pos_") {
                // Positional tables start flat and learn their layout.
            } else if nt.dims.len() == 2 || nt.name.ends_with("embed") {
                for v in nt.data.iter_mut() {
                    *v = trunc();
                }
            }
            // Biases, norm shifts, and positional tables stay zero.
        }
        p
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let e = self.patch_bias.len();
        let mut out = vec![
            NamedTensor {
                name: "patch_proj.weight".into(),
                dims: vec![PATCH_DIM, e],
                data: self.patch_proj.data(),
            },
            NamedTensor {
                name: "patch_proj.bias".into(),
                dims: vec![e],
                data: &self.patch_bias,
            },
            NamedTensor {
                name: "class_embed".into(),
                dims: vec![e],
                data: &self.c_embed,
            },
        ];
        if let Some(d) = &self.d_embed {
            out.push(NamedTensor {
                name: "dist_embed".into(),
                dims: vec![e],
                data: d,
            });
        }
        out.push(NamedTensor {
            name: "pos_freq".into(),
            dims: vec![self.tables.freq_table.rows(), e],
            data: self.tables.freq_table.data(),
        });
        out.push(NamedTensor {
            name: "pos_time".into(),
            dims: vec![self.tables.time_table.rows(), e],
            data: self.tables.time_table.data(),
        });
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("blocks.{i}.ln1.gamma"),
                dims: vec![e],
                data: &b.ln1_gamma,
            });
            out.push(NamedTensor {
                name: format!("blocks.{i}.ln1.beta"),
                dims: vec![e],
                data: &b.ln1_beta,
            });
            let attn: [(&str, &Mat<T>, &str, &Vec<T>); 4] = [
                ("attn.wq", &b.wq, "attn.bq", &b.bq),
                ("attn.wk", &b.wk, "attn.bk", &b.bk),
                ("attn.wv", &b.wv, "attn.bv", &b.bv),
                ("attn.wo", &b.wo, "attn.bo", &b.bo),
            ];
            for (wname, m, bname, bias) in attn {
                out.push(NamedTensor {
                    name: format!("blocks.{i}.{wname}"),
                    dims: vec![m.rows(), m.cols()],
                    data: m.data(),
                });
                out.push(NamedTensor {
                    name: format!("blocks.{i}.{bname}"),
                    dims: vec![bias.len()],
                    data: bias,
                });
            }
            out.push(NamedTensor {
                name: format!("blocks.{i}.ln2.gamma"),
                dims: vec![e],
                data: &b.ln2_gamma,
            });
            out.push(NamedTensor {
                name: format!("blocks.{i}.ln2.beta"),
                dims: vec![e],
                data: &b.ln2_beta,
            });
            out.push(NamedTensor {
                name: format!("blocks.{i}.mlp.w1"),
                dims: vec![b.w1.rows(), b.w1.cols()],
                data: b.w1.data(),
            });
            out.push(NamedTensor {
                name: format!("blocks.{i}.mlp.b1"),
                dims: vec![b.b1.len()],
                data: &b.b1,
            });
            out.push(NamedTensor {
                name: format!("blocks.{i}.mlp.w2"),
                dims: vec![b.w2.rows(), b.w2.cols()],
                data: b.w2.data(),
            });
            out.push(NamedTensor {
                name: format!("blocks.{i}.mlp.b2"),
                dims: vec![b.b2.len()],
                data: &b.b2,
            });
        }
        out.push(NamedTensor {
            name: "final_ln.gamma".into(),
            dims: vec![e],
            data: &self.final_gamma,
        });
        out.push(NamedTensor {
            name: "final_ln.beta".into(),
            dims: vec![e],
            data: &self.final_beta,
        });
        out.push(NamedTensor {
            name: "head.weight".into(),
            dims: vec![self.head_w.rows(), self.head_w.cols()],
            data: self.head_w.data(),
        });
        out.push(NamedTensor {
            name: "head.bias".into(),
            dims: vec![self.head_b.len()],
            data: &self.head_b,
        });
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, T>> {
        let e = self.patch_bias.len();
        let proj_dims = vec![self.patch_proj.rows(), self.patch_proj.cols()];
        let freq_dims = vec![self.tables.freq_table.rows(), e];
        let time_dims = vec![self.tables.time_table.rows(), e];
        let head_dims = vec![self.head_w.rows(), self.head_w.cols()];
        let mut out = vec![
            NamedTensorMut {
                name: "patch_proj.weight".into(),
                dims: proj_dims,
                data: self.patch_proj.data_mut(),
            },
            NamedTensorMut {
                name: "patch_proj.bias".into(),
                dims: vec![e],
                data: &mut self.patch_bias,
            },
            NamedTensorMut {
                name: "class_embed".into(),
                dims: vec![e],
                data: &mut self.c_embed,
            },
        ];
        if let Some(d) = &mut self.d_embed {
            out.push(NamedTensorMut {
                name: "dist_embed".into(),
                dims: vec![e],
                data: d,
            });
        }
        out.push(NamedTensorMut {
            name: "pos_freq".into(),
            dims: freq_dims,
            data: self.tables.freq_table.data_mut(),
        });
        out.push(NamedTensorMut {
            name: "pos_time".into(),
            dims: time_dims,
            data: self.tables.time_table.data_mut(),
        });
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let (wq_r, wq_c) = (b.wq.rows(), b.wq.cols());
            let (w1_r, w1_c) = (b.w1.rows(), b.w1.cols());
            let (w2_r, w2_c) = (b.w2.rows(), b.w2.cols());
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.ln1.gamma"),
                dims: vec![e],
                data: &mut b.ln1_gamma,
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.ln1.beta"),
                dims: vec![e],
                data: &mut b.ln1_beta,
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.attn.wq"),
                dims: vec![wq_r, wq_c],
                data: b.wq.data_mut(),
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.attn.bq"),
                dims: vec![e],
                data: &mut b.bq,
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.attn.wk"),
                dims: vec![wq_r, wq_c],
                data: b.wk.data_mut(),
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.attn.bk"),
                dims: vec![e],
                data: &mut b.bk,
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.attn.wv"),
                dims: vec![wq_r, wq_c],
                data: b.wv.data_mut(),
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.attn.bv"),
                dims: vec![e],
                data: &mut b.bv,
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.attn.wo"),
                dims: vec![wq_r, wq_c],
                data: b.wo.data_mut(),
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.attn.bo"),
                dims: vec![e],
                data: &mut b.bo,
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.ln2.gamma"),
                dims: vec![e],
                data: &mut b.ln2_gamma,
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.ln2.beta"),
                dims: vec![e],
                data: &mut b.ln2_beta,
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.mlp.w1"),
                dims: vec![w1_r, w1_c],
                data: b.w1.data_mut(),
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.mlp.b1"),
                dims: vec![w1_c],
                data: &mut b.b1,
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.mlp.w2"),
                dims: vec![w2_r, w2_c],
                data: b.w2.data_mut(),
            });
            out.push(NamedTensorMut {
                name: format!("blocks.{i}.mlp.b2"),
                dims: vec![e],
                data: &mut b.b2,
            });
        }
        out.push(NamedTensorMut {
            name: "final_ln.gamma".into(),
            dims: vec![e],
            data: &mut self.final_gamma,
        });
        out.push(NamedTensorMut {
            name: "final_ln.beta".into(),
            dims: vec![e],
            data: &mut self.final_beta,
        });
        out.push(NamedTensorMut {
            name: "head.weight".into(),
            dims: head_dims,
            data: self.head_w.data_mut(),
        });
        out.push(NamedTensorMut {
            name: "head.bias".into(),
            dims: vec![self.head_b.len()],
            data: &mut self.head_b,
        });
        out
    }

    /// Total number of scalar parameters actually held.
    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Write every tensor to a TENSORBIN container at `path`.
    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new();
        for nt in self.named_tensors() {
            c.insert(nt.name.clone(), Tensor::from_scalar_vec(nt.dims, nt.data)?);
        }
        c.save(path)
    }

    /// Load weights saved by [`save_weights`] into a fresh parameter set
    /// shaped by `config`, verifying every name and shape.
    pub fn load_weights(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let c = Container::load(path)?;
        let mut p = Self::zeros(config);
        for nt in p.named_tensors_mut() {
            let t = c.require(&nt.name)?;
            if t.dims != nt.dims {
                return Err(Error::shape(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    nt.name, t.dims, nt.dims
                )));
            }
            let v: Vec<T> = t.to_scalar_vec(&nt.name)?;
            nt.data.copy_from_slice(&v);
        }
        Ok(p)
    }
}
