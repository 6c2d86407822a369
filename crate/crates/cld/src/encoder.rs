//! MLP backbone with two one-layer projection branches (instance and group),
//! plain or normalized heads, and exact manual backpropagation.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CldError, Result};
use crate::numerics::{dot, norm, Matrix, DetRng, DEGENERATE_NORM};

const CHECKPOINT_MAGIC: [u8; 4] = *b"CLDM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One FC layer, output row-normalized.
    Linear,
    /// Both the FC weight rows and the latent feature are unit-normalized
    /// before the inner product, so each head component is a cosine.
    NormLinear,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    /// 0 means "infer from the dataset at train time".
    pub input_dim: usize,
    /// Hidden ReLU widths; empty means an identity backbone
    /// (requires latent_dim == input_dim).
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub head_dim_i: usize,
    pub head_dim_g: usize,
    pub head_kind: HeadKind,
    /// Row-normalize head outputs onto the unit sphere (the default).
    /// `false` feeds raw head outputs to the losses.
    pub renorm_head: bool,
    /// Use one head for both branches (ablation).
    pub shared_head: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: 0,
            hidden_dims: vec![64],
            latent_dim: 32,
            head_dim_i: 32,
            head_dim_g: 32,
            head_kind: HeadKind::Linear,
            renorm_head: true,
            shared_head: false,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(CldError::InvalidConfig {
                key: format!("arch.{key}"),
                msg: msg.to_string(),
            })
        };
        if self.input_dim == 0 {
            return bad("input_dim", "must be set (or inferred) before use");
        }
        if self.latent_dim == 0 || self.head_dim_i == 0 || self.head_dim_g == 0 {
            return bad("dims", "latent and head dims must be >= 1");
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden_dims", "hidden widths must be >= 1");
        }
        if self.hidden_dims.is_empty() && self.latent_dim != self.input_dim {
            return bad(
                "hidden_dims",
                "identity backbone requires latent_dim == input_dim",
            );
        }
        Ok(())
    }

    /// Backbone layer shapes as (out, in) pairs; hidden layers are ReLU,
    /// the final layer to the latent space is linear.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        if self.hidden_dims.is_empty() {
            return Vec::new();
        }
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.latent_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        let backbone: usize = self
            .layer_shapes()
            .iter()
            .map(|&(o, i)| o * i + o)
            .sum();
        let heads = self.head_dim_i * self.latent_dim
            + if self.shared_head {
                0
            } else {
                self.head_dim_g * self.latent_dim
            };
        backbone + heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out x in
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub arch: Architecture,
    pub layers: Vec<DenseLayer>,
    /// head_dim_i x latent_dim
    pub w_i: Matrix,
    /// head_dim_g x latent_dim; empty when the head is shared
    pub w_g: Matrix,
}

/// Gradients with the same shapes as [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<DenseLayer>,
    pub w_i: Matrix,
    pub w_g: Matrix,
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Matrix,
    /// Pre-activations z_l per backbone layer.
    pub pre_acts: Vec<Matrix>,
    /// Post-activations a_l per backbone layer; last entry is the latent.
    pub acts: Vec<Matrix>,
    /// Head outputs before the final row normalization.
    pub head_i_raw: Matrix,
    pub head_g_raw: Matrix,
    /// Final branch features fed to the losses.
    pub f_i: Matrix,
    pub f_g: Matrix,
}

impl ForwardCache {
    pub fn latent(&self) -> &Matrix {
        self.acts.last().unwrap_or(&self.input)
    }

    pub fn batch_len(&self) -> usize {
        self.input.rows()
    }
}

/// Glorot-uniform weights, zero biases, deterministic in the seed.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<EncoderParams> {
    arch.validate()?;
    let mut rng = DetRng::new(seed);
    let glorot = |out: usize, inp: usize, rng: &mut DetRng| {
        let bound = (6.0 / (inp + out) as f64).sqrt();
        Matrix::from_fn(out, inp, |_, _| rng.uniform(-bound, bound))
    };
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(o, i)| DenseLayer {
            w: glorot(o, i, &mut rng),
            b: vec![0.0; o],
        })
        .collect();
    let w_i = glorot(arch.head_dim_i, arch.latent_dim, &mut rng);
    let w_g = if arch.shared_head {
        Matrix::zeros(0, 0)
    } else {
        glorot(arch.head_dim_g, arch.latent_dim, &mut rng)
    };
    Ok(EncoderParams {
        arch: arch.clone(),
        layers,
        w_i,
        w_g,
    })
}

impl EncoderParams {
    pub fn zeros_like(&self) -> ParamGrads {
        ParamGrads {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    w: Matrix::zeros(l.w.rows(), l.w.cols()),
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
            w_i: Matrix::zeros(self.w_i.rows(), self.w_i.cols()),
            w_g: Matrix::zeros(self.w_g.rows(), self.w_g.cols()),
        }
    }

    /// Named parameter tensors; the bool marks bias vectors (exempt from
    /// weight decay).
    pub fn tensors_mut(&mut self) -> Vec<(String, bool, &mut [f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.w"), false, layer.w.data_mut()));
            out.push((format!("layer{i}.b"), true, layer.b.as_mut_slice()));
        }
        out.push(("w_i".to_string(), false, self.w_i.data_mut()));
        out.push(("w_g".to_string(), false, self.w_g.data_mut()));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.w.data());
            out.extend_from_slice(&layer.b);
        }
        out.extend_from_slice(self.w_i.data());
        out.extend_from_slice(self.w_g.data());
        out
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut pos = 0usize;
        let take = |dst: &mut [f64], pos: &mut usize| {
            dst.copy_from_slice(&flat[*pos..*pos + dst.len()]);
            *pos += dst.len();
        };
        for layer in &mut self.layers {
            take(layer.w.data_mut(), &mut pos);
            take(&mut layer.b, &mut pos);
        }
        take(self.w_i.data_mut(), &mut pos);
        take(self.w_g.data_mut(), &mut pos);
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }
}

impl ParamGrads {
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.add_assign(&b.w);
            for (x, &y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        }
        self.w_i.add_assign(&other.w_i);
        self.w_g.add_assign(&other.w_g);
    }

    pub fn tensors(&self) -> Vec<(String, bool, &[f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w"), false, layer.w.data()));
            out.push((format!("layer{i}.b"), true, layer.b.as_slice()));
        }
        out.push(("w_i".to_string(), false, self.w_i.data()));
        out.push(("w_g".to_string(), false, self.w_g.data()));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.w.data());
            out.extend_from_slice(&layer.b);
        }
        out.extend_from_slice(self.w_i.data());
        out.extend_from_slice(self.w_g.data());
        out
    }
}

/// Normalized projection of one latent row: component t is the cosine
/// between weight row t and the feature.
pub fn project_normalized(w: &Matrix, f: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != f.len() {
        return Err(CldError::DimMismatch {
            context: "project_normalized".to_string(),
            expected: w.cols(),
            got: f.len(),
        });
    }
    let nf = norm(f);
    if nf < DEGENERATE_NORM {
        return Err(CldError::DegenerateNorm {
            context: "project_normalized feature".to_string(),
            row: 0,
        });
    }
    let mut out = Vec::with_capacity(w.rows());
    for t in 0..w.rows() {
        let wrow = w.row(t);
        let nw = norm(wrow);
        if nw < DEGENERATE_NORM {
            return Err(CldError::DegenerateNorm {
                context: "project_normalized weight".to_string(),
                row: t,
            });
        }
        out.push(dot(wrow, f) / (nw * nf));
    }
    Ok(out)
}

fn row_normalized(m: &Matrix, context: &str) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n < DEGENERATE_NORM {
            return Err(CldError::DegenerateNorm {
                context: context.to_string(),
                row: i,
            });
        }
        for x in row.iter_mut() {
            *x /= n;
        }
    }
    Ok(out)
}

fn head_forward(
    params: &EncoderParams,
    latent: &Matrix,
    w: &Matrix,
    name: &str,
) -> Result<(Matrix, Matrix)> {
    let raw = match params.arch.head_kind {
        HeadKind::Linear => latent.dot_bt(w),
        HeadKind::NormLinear => {
            let u = row_normalized(w, &format!("{name} weight rows"))?;
            let v = row_normalized(latent, "latent rows")?;
            v.dot_bt(&u)
        }
    };
    let out = if params.arch.renorm_head {
        row_normalized(&raw, name)?
    } else {
        raw.clone()
    };
    Ok((raw, out))
}

/// Run the backbone and both heads on a batch (rows are samples).
pub fn forward(params: &EncoderParams, batch: &Matrix) -> Result<ForwardCache> {
    if batch.cols() != params.arch.input_dim {
        return Err(CldError::DimMismatch {
            context: "forward input".to_string(),
            expected: params.arch.input_dim,
            got: batch.cols(),
        });
    }
    let mut pre_acts = Vec::with_capacity(params.layers.len());
    let mut acts = Vec::with_capacity(params.layers.len());
    let mut a = batch.clone();
    let last = params.layers.len().saturating_sub(1);
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = a.dot_bt(&layer.w);
        for i in 0..z.rows() {
            for (x, &b) in z.row_mut(i).iter_mut().zip(&layer.b) {
                *x += b;
            }
        }
        pre_acts.push(z.clone());
        if l == last {
            a = z;
        } else {
            for x in z.data_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
            a = z;
        }
        acts.push(a.clone());
    }
    let latent = acts.last().unwrap_or(batch);

    let (head_i_raw, f_i) = head_forward(params, latent, &params.w_i, "f_I")?;
    let (head_g_raw, f_g) = if params.arch.shared_head {
        (head_i_raw.clone(), f_i.clone())
    } else {
        head_forward(params, latent, &params.w_g, "f_G")?
    };

    Ok(ForwardCache {
        input: batch.clone(),
        pre_acts,
        acts,
        head_i_raw,
        head_g_raw,
        f_i,
        f_g,
    })
}

/// Backprop a normalized-row gradient onto the raw rows:
/// d_raw = (d_out - <d_out, u> u) / ||raw|| with u the unit output row.
fn renorm_backward(d_out: &Matrix, raw: &Matrix) -> Matrix {
    let mut d_raw = Matrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let r = raw.row(i);
        let n = norm(r);
        let g = d_out.row(i);
        let u: Vec<f64> = r.iter().map(|x| x / n).collect();
        let proj = dot(g, &u);
        let dst = d_raw.row_mut(i);
        for (j, d) in dst.iter_mut().enumerate() {
            *d = (g[j] - proj * u[j]) / n;
        }
    }
    d_raw
}

struct HeadBackward {
    d_w: Matrix,
    d_latent: Matrix,
}

fn head_backward(
    params: &EncoderParams,
    latent: &Matrix,
    w: &Matrix,
    raw: &Matrix,
    grad_out: &Matrix,
) -> HeadBackward {
    let d_raw = if params.arch.renorm_head {
        renorm_backward(grad_out, raw)
    } else {
        grad_out.clone()
    };
    match params.arch.head_kind {
        HeadKind::Linear => HeadBackward {
            d_w: d_raw.dot_at(latent),
            d_latent: d_raw.dot(w),
        },
        HeadKind::NormLinear => {
            // raw = V U^T with V, U the row-normalized latent and weights
            let u = row_normalized(w, "backward weights").expect("checked in forward");
            let v = row_normalized(latent, "backward latent").expect("checked in forward");
            let d_v = d_raw.dot(&u);
            let d_u = d_raw.dot_at(&v);
            HeadBackward {
                d_w: renorm_backward(&d_u, w),
                d_latent: renorm_backward(&d_v, latent),
            }
        }
    }
}

/// Exact gradients of any scalar loss given its gradients at the two head
/// outputs. Shapes must match the cache's `f_i` / `f_g`.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_f_i: &Matrix,
    grad_f_g: &Matrix,
) -> Result<ParamGrads> {
    let check = |name: &str, got: &Matrix, want: &Matrix| -> Result<()> {
        if got.rows() != want.rows() || got.cols() != want.cols() {
            return Err(CldError::DimMismatch {
                context: format!("backward {name}"),
                expected: want.rows() * want.cols(),
                got: got.rows() * got.cols(),
            });
        }
        Ok(())
    };
    check("grad_f_i", grad_f_i, &cache.f_i)?;
    check("grad_f_g", grad_f_g, &cache.f_g)?;

    let latent = cache.latent();
    let mut grads = params.zeros_like();
    let mut d_latent;

    if params.arch.shared_head {
        // both branches share one head: sum their output gradients
        let mut combined = grad_f_i.clone();
        combined.add_assign(grad_f_g);
        let hb = head_backward(params, latent, &params.w_i, &cache.head_i_raw, &combined);
        grads.w_i = hb.d_w;
        d_latent = hb.d_latent;
    } else {
        let hb_i = head_backward(params, latent, &params.w_i, &cache.head_i_raw, grad_f_i);
        let hb_g = head_backward(params, latent, &params.w_g, &cache.head_g_raw, grad_f_g);
        grads.w_i = hb_i.d_w;
        grads.w_g = hb_g.d_w;
        d_latent = hb_i.d_latent;
        d_latent.add_assign(&hb_g.d_latent);
    }

    let last = params.layers.len().saturating_sub(1);
    for l in (0..params.layers.len()).rev() {
        let mut d_z = d_latent;
        if l != last {
            let z = &cache.pre_acts[l];
            for (d, &zv) in d_z.data_mut().iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let a_prev = if l == 0 { &cache.input } else { &cache.acts[l - 1] };
        grads.layers[l].w = d_z.dot_at(a_prev);
        grads.layers[l].b = d_z.col_sums();
        d_latent = d_z.dot(&params.layers[l].w);
    }
    Ok(grads)
}

/// Serialize architecture and parameters; exact little-endian f64 round trip.
pub fn save_checkpoint<P: AsRef<Path>>(params: &EncoderParams, path: P) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let a = &params.arch;
    w.write_all(&CHECKPOINT_MAGIC)?;
    let mut u32s = vec![
        a.input_dim as u32,
        a.hidden_dims.len() as u32,
    ];
    u32s.extend(a.hidden_dims.iter().map(|&h| h as u32));
    u32s.extend([a.latent_dim as u32, a.head_dim_i as u32, a.head_dim_g as u32]);
    for v in u32s {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[
        match a.head_kind {
            HeadKind::Linear => 0u8,
            HeadKind::NormLinear => 1u8,
        },
        a.renorm_head as u8,
        a.shared_head as u8,
    ])?;
    for v in params.flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<EncoderParams> {
    let display = path.as_ref().display().to_string();
    let fail = |msg: String| CldError::Format {
        path: display.clone(),
        msg,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad checkpoint magic".to_string()));
    }
    let mut pos = 4usize;
    let next_u32 = |pos: &mut usize| -> Result<usize> {
        if *pos + 4 > bytes.len() {
            return Err(CldError::Format {
                path: display.clone(),
                msg: "truncated header".to_string(),
            });
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as usize;
        *pos += 4;
        Ok(v)
    };
    let input_dim = next_u32(&mut pos)?;
    let n_hidden = next_u32(&mut pos)?;
    let mut hidden_dims = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_dims.push(next_u32(&mut pos)?);
    }
    let latent_dim = next_u32(&mut pos)?;
    let head_dim_i = next_u32(&mut pos)?;
    let head_dim_g = next_u32(&mut pos)?;
    if pos + 3 > bytes.len() {
        return Err(fail("truncated header".to_string()));
    }
    let head_kind = match bytes[pos] {
        0 => HeadKind::Linear,
        1 => HeadKind::NormLinear,
        other => return Err(fail(format!("unknown head kind {other}"))),
    };
    let renorm_head = bytes[pos + 1] != 0;
    let shared_head = bytes[pos + 2] != 0;
    pos += 3;

    let arch = Architecture {
        input_dim,
        hidden_dims,
        latent_dim,
        head_dim_i,
        head_dim_g,
        head_kind,
        renorm_head,
        shared_head,
    };
    arch.validate().map_err(|e| fail(e.to_string()))?;

    let expect = arch.param_count();
    if bytes.len() != pos + 8 * expect {
        return Err(fail(format!(
            "expected {expect} f64 parameters, found {} bytes after header",
            bytes.len() - pos
        )));
    }
    let mut flat = Vec::with_capacity(expect);
    for i in 0..expect {
        let off = pos + 8 * i;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(format!("non-finite parameter at index {i}")));
        }
        flat.push(v);
    }
    let mut params = init_params(&arch, 0)?;
    params.unflatten_into(&flat);
    Ok(params)
}
