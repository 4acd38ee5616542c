//! Patch-wise MLP autoencoder with hand-derived reverse-mode gradients.
//!
//! encoder: `z = W2 · tanh(W1 · x + b1) + b2`
//! decoder: `y = W4 · tanh(W3 · z + b3) + b4`

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::patch::PatchSpec;
use crate::rng::keyed_rng;
use crate::scalar::{pairwise_sum, Scalar};
use crate::volume::{Mask4D, Volume4D};

pub const N_TENSORS: usize = 8;
pub const TENSOR_NAMES: [&str; N_TENSORS] = [
    "enc_in.weight",
    "enc_in.bias",
    "enc_out.weight",
    "enc_out.bias",
    "dec_in.weight",
    "dec_in.bias",
    "dec_out.weight",
    "dec_out.bias",
];

const MODEL_MAGIC: &[u8; 4] = b"RMAE";
const MODEL_VERSION: u32 = 1;

/// Which voxels enter the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossScope {
    #[default]
    Masked,
    All,
}

/// Affine layer `y = W x + b`, `W` stored row-major as `n_out × n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense {
            n_in,
            n_out,
            weight: vec![T::zero(); n_in * n_out],
            bias: vec![T::zero(); n_out],
        }
    }

    /// Uniform(−a, a) weights with `a = √(6 / (fan_in + fan_out))`, zero bias.
    fn xavier(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        let weight = (0..n_in * n_out)
            .map(|_| T::from_f64_lossy(rng.random_range(-a..a)))
            .collect();
        Dense {
            n_in,
            n_out,
            weight,
            bias: vec![T::zero(); n_out],
        }
    }

    #[inline]
    fn apply(&self, x: &[T], y: &mut [T]) {
        for (o, (row, b)) in y
            .iter_mut()
            .zip(self.weight.chunks_exact(self.n_in).zip(&self.bias))
        {
            let mut acc = *b;
            for (w, v) in row.iter().zip(x) {
                acc += *w * *v;
            }
            *o = acc;
        }
    }

    /// Accumulates `dW += δ ⊗ x`, `db += δ` and writes `Wᵀ δ` into `dx`.
    #[inline]
    fn backprop(
        &self,
        x: &[T],
        delta: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        for ((g_row, gb_o), d) in gw.chunks_exact_mut(self.n_in).zip(gb.iter_mut()).zip(delta) {
            *gb_o += d;
            if *d == 0.0 {
                continue;
            }
            for (g, v) in g_row.iter_mut().zip(x) {
                *g += d * v.as_f64();
            }
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|v| *v = 0.0);
            for (row, d) in self.weight.chunks_exact(self.n_in).zip(delta) {
                if *d == 0.0 {
                    continue;
                }
                for (o, w) in dx.iter_mut().zip(row) {
                    *o += d * w.as_f64();
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeModel<T> {
    patch: [usize; 4],
    pub enc_in: Dense<T>,
    pub enc_out: Dense<T>,
    pub dec_in: Dense<T>,
    pub dec_out: Dense<T>,
}

/// Gradient of the loss w.r.t. every parameter tensor, in
/// [`TENSOR_NAMES`] order, always in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: [Vec<f64>; N_TENSORS],
}

impl Gradients {
    pub fn zeros_like<T: Scalar>(model: &MaeModel<T>) -> Self {
        let t = model.tensors();
        Gradients {
            tensors: std::array::from_fn(|i| vec![0.0; t[i].len()]),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Mean of `parts` summed in a fixed pairwise tree.
    pub fn mean(parts: Vec<Gradients>) -> Option<Gradients> {
        let n = parts.len();
        let mut sum = Self::tree_sum(parts)?;
        sum.scale(1.0 / n as f64);
        Some(sum)
    }

    fn tree_sum(mut parts: Vec<Gradients>) -> Option<Gradients> {
        while parts.len() > 1 {
            let mut next = Vec::with_capacity(parts.len().div_ceil(2));
            let mut it = parts.into_iter();
            while let Some(mut a) = it.next() {
                if let Some(b) = it.next() {
                    a.add_assign(&b);
                }
                next.push(a);
            }
            parts = next;
        }
        parts.pop()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Activations of one token, kept for the backward pass.
struct TokenCache<T> {
    x: Vec<T>,
    h1: Vec<T>,
    z: Vec<T>,
    h2: Vec<T>,
    y: Vec<T>,
}

impl<T: Scalar> TokenCache<T> {
    fn new<U>(m: &MaeModel<U>) -> Self {
        TokenCache {
            x: vec![T::zero(); m.enc_in.n_in],
            h1: vec![T::zero(); m.enc_in.n_out],
            z: vec![T::zero(); m.enc_out.n_out],
            h2: vec![T::zero(); m.dec_in.n_out],
            y: vec![T::zero(); m.dec_out.n_out],
        }
    }
}

fn tanh_in_place<T: Scalar>(v: &mut [T]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

impl<T: Scalar> MaeModel<T> {
    /// Xavier-uniform weights and zero biases, keyed by `seed`.
    pub fn new(patch: [usize; 4], d_hidden: usize, d_latent: usize, seed: u64) -> Result<Self> {
        let d_patch = Self::check_shape(patch, d_hidden, d_latent)?;
        let mut rng = keyed_rng(seed, &[0x1A17], 0);
        Ok(MaeModel {
            patch,
            enc_in: Dense::xavier(d_patch, d_hidden, &mut rng),
            enc_out: Dense::xavier(d_hidden, d_latent, &mut rng),
            dec_in: Dense::xavier(d_latent, d_hidden, &mut rng),
            dec_out: Dense::xavier(d_hidden, d_patch, &mut rng),
        })
    }

    pub fn zeros(patch: [usize; 4], d_hidden: usize, d_latent: usize) -> Result<Self> {
        let d_patch = Self::check_shape(patch, d_hidden, d_latent)?;
        Ok(MaeModel {
            patch,
            enc_in: Dense::zeros(d_patch, d_hidden),
            enc_out: Dense::zeros(d_hidden, d_latent),
            dec_in: Dense::zeros(d_latent, d_hidden),
            dec_out: Dense::zeros(d_hidden, d_patch),
        })
    }

    fn check_shape(patch: [usize; 4], d_hidden: usize, d_latent: usize) -> Result<usize> {
        if patch.contains(&0) || d_hidden == 0 || d_latent == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(patch.iter().product())
    }

    pub fn patch(&self) -> [usize; 4] {
        self.patch
    }

    pub fn d_patch(&self) -> usize {
        self.enc_in.n_in
    }

    pub fn d_hidden(&self) -> usize {
        self.enc_in.n_out
    }

    pub fn d_latent(&self) -> usize {
        self.enc_out.n_out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> [&Vec<T>; N_TENSORS] {
        [
            &self.enc_in.weight,
            &self.enc_in.bias,
            &self.enc_out.weight,
            &self.enc_out.bias,
            &self.dec_in.weight,
            &self.dec_in.bias,
            &self.dec_out.weight,
            &self.dec_out.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; N_TENSORS] {
        [
            &mut self.enc_in.weight,
            &mut self.enc_in.bias,
            &mut self.enc_out.weight,
            &mut self.enc_out.bias,
            &mut self.dec_in.weight,
            &mut self.dec_in.bias,
            &mut self.dec_out.weight,
            &mut self.dec_out.bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> MaeModel<U> {
        let conv = |d: &Dense<T>| Dense {
            n_in: d.n_in,
            n_out: d.n_out,
            weight: d
                .weight
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
            bias: d
                .bias
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        };
        MaeModel {
            patch: self.patch,
            enc_in: conv(&self.enc_in),
            enc_out: conv(&self.enc_out),
            dec_in: conv(&self.dec_in),
            dec_out: conv(&self.dec_out),
        }
    }

    pub fn check_spec(&self, spec: &PatchSpec) -> Result<()> {
        if spec.patch() != self.patch {
            return Err(Error::dims(self.patch, spec.patch()));
        }
        Ok(())
    }

    fn encode_token(&self, c: &mut TokenCache<T>) {
        self.enc_in.apply(&c.x, &mut c.h1);
        tanh_in_place(&mut c.h1);
        self.enc_out.apply(&c.h1, &mut c.z);
    }

    fn decode_token(&self, c: &mut TokenCache<T>) {
        self.dec_in.apply(&c.z, &mut c.h2);
        tanh_in_place(&mut c.h2);
        self.dec_out.apply(&c.h2, &mut c.y);
    }

    /// Reconstruction of `input`, token by token.
    pub fn forward(&self, input: &Volume4D<T>, spec: &PatchSpec) -> Result<Volume4D<T>> {
        self.check_spec(spec)?;
        let tokens = spec.patchify(input)?;
        let mut out = vec![T::zero(); tokens.len()];
        let mut c = TokenCache::new(self);
        for (x, y) in tokens
            .chunks_exact(self.d_patch())
            .zip(out.chunks_exact_mut(self.d_patch()))
        {
            c.x.copy_from_slice(x);
            self.encode_token(&mut c);
            self.decode_token(&mut c);
            y.copy_from_slice(&c.y);
        }
        spec.unpatchify(&out, input)
    }

    /// Encoder latents, one row of `d_latent` per token.
    pub fn encode(&self, input: &Volume4D<T>, spec: &PatchSpec) -> Result<Vec<Vec<T>>> {
        self.check_spec(spec)?;
        let tokens = spec.patchify(input)?;
        let mut c = TokenCache::new(self);
        Ok(tokens
            .chunks_exact(self.d_patch())
            .map(|x| {
                c.x.copy_from_slice(x);
                self.encode_token(&mut c);
                c.z.clone()
            })
            .collect())
    }

    /// Loss of `forward(input)` against `target` and its exact gradient.
    ///
    /// With [`LossScope::Masked`] the loss is the mean squared error over set
    /// voxels of `mask`; voxels outside the mask are never read from
    /// `target`.
    pub fn loss_and_gradients(
        &self,
        input: &Volume4D<T>,
        target: &Volume4D<T>,
        mask: &Mask4D,
        spec: &PatchSpec,
        scope: LossScope,
    ) -> Result<(f64, Gradients)> {
        self.check_spec(spec)?;
        if input.dims() != target.dims() || input.dims() != mask.dims() {
            return Err(Error::dims(input.dims(), (target.dims(), mask.dims())));
        }
        let n_loss = match scope {
            LossScope::Masked => mask.count(),
            LossScope::All => mask.len(),
        };
        if n_loss == 0 {
            return Err(Error::invalid("mask is empty"));
        }
        let inv = 1.0 / n_loss as f64;
        let in_data = input.data();
        let tgt = target.data();
        let bits = mask.as_slice();

        let mut g = Gradients::zeros_like(self);
        let mut c = TokenCache::new(self);
        let mut dy = vec![0.0f64; self.d_patch()];
        let mut dh2 = vec![0.0f64; self.d_hidden()];
        let mut dz = vec![0.0f64; self.d_latent()];
        let mut dh1 = vec![0.0f64; self.d_hidden()];
        let mut token_losses = Vec::with_capacity(spec.n_tokens());

        for token in 0..spec.n_tokens() {
            let in_loss = |i: usize| scope == LossScope::All || bits[i];
            if !spec.voxel_indices(token).any(in_loss) {
                continue;
            }
            for (x, i) in c.x.iter_mut().zip(spec.voxel_indices(token)) {
                *x = in_data[i];
            }
            self.encode_token(&mut c);
            self.decode_token(&mut c);

            let mut sq = 0.0;
            for ((d, y), i) in dy.iter_mut().zip(&c.y).zip(spec.voxel_indices(token)) {
                if in_loss(i) {
                    let r = y.as_f64() - tgt[i].as_f64();
                    sq += r * r;
                    *d = 2.0 * r * inv;
                } else {
                    *d = 0.0;
                }
            }
            token_losses.push(sq);

            let [_, _, _, _, _, _, gw4, gb4] = &mut g.tensors;
            self.dec_out.backprop(&c.h2, &dy, gw4, gb4, Some(&mut dh2));
            for (d, h) in dh2.iter_mut().zip(&c.h2) {
                let h = h.as_f64();
                *d *= 1.0 - h * h;
            }
            let [_, _, _, _, gw3, gb3, _, _] = &mut g.tensors;
            self.dec_in.backprop(&c.z, &dh2, gw3, gb3, Some(&mut dz));
            let [_, _, gw2, gb2, _, _, _, _] = &mut g.tensors;
            self.enc_out.backprop(&c.h1, &dz, gw2, gb2, Some(&mut dh1));
            for (d, h) in dh1.iter_mut().zip(&c.h1) {
                let h = h.as_f64();
                *d *= 1.0 - h * h;
            }
            let [gw1, gb1, _, _, _, _, _, _] = &mut g.tensors;
            self.enc_in.backprop(&c.x, &dh1, gw1, gb1, None);
        }
        let loss = pairwise_sum(token_losses.len(), |i| token_losses[i]) * inv;
        Ok((loss, g))
    }

    /// Writes the versioned little-endian model file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(40 + 4 * self.param_count());
        b.extend_from_slice(MODEL_MAGIC);
        b.write_u32::<LittleEndian>(MODEL_VERSION).unwrap();
        for p in self.patch {
            b.write_u32::<LittleEndian>(p as u32).unwrap();
        }
        b.write_u32::<LittleEndian>(self.d_hidden() as u32).unwrap();
        b.write_u32::<LittleEndian>(self.d_latent() as u32).unwrap();
        b.write_u64::<LittleEndian>(self.param_count() as u64)
            .unwrap();
        for t in self.tensors() {
            for v in t {
                b.write_f32::<LittleEndian>(v.as_f64() as f32).unwrap();
            }
        }
        b
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::invalid("not a model file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model version {version}"
            )));
        }
        let mut patch = [0usize; 4];
        for p in &mut patch {
            *p = r.read_u32::<LittleEndian>()? as usize;
        }
        let d_hidden = r.read_u32::<LittleEndian>()? as usize;
        let d_latent = r.read_u32::<LittleEndian>()? as usize;
        let count = r.read_u64::<LittleEndian>()? as usize;
        let mut model = Self::zeros(patch, d_hidden, d_latent)?;
        if count != model.param_count() {
            return Err(Error::invalid(format!(
                "parameter count {count} does not match dims ({})",
                model.param_count()
            )));
        }
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                *v = T::from_f64_lossy(r.read_f32::<LittleEndian>()? as f64);
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::invalid("trailing bytes after parameters"));
        }
        Ok(model)
    }
}

/// Mean of `(recon − target)²` over the set voxels of `mask`.
pub fn masked_mse<T: Scalar>(
    recon: &Volume4D<T>,
    target: &Volume4D<T>,
    mask: &Mask4D,
) -> Result<f64> {
    if recon.dims() != target.dims() || recon.dims() != mask.dims() {
        return Err(Error::dims(recon.dims(), (target.dims(), mask.dims())));
    }
    if mask.count() == 0 {
        return Err(Error::invalid("mask is empty"));
    }
    let idx: Vec<usize> = mask.indices().collect();
    let (r, t) = (recon.data(), target.data());
    let sum = pairwise_sum(idx.len(), |k| {
        let d = r[idx[k]].as_f64() - t[idx[k]].as_f64();
        d * d
    });
    Ok(sum / idx.len() as f64)
}

/// Mean squared error over every voxel.
pub fn full_mse<T: Scalar>(recon: &Volume4D<T>, target: &Volume4D<T>) -> Result<f64> {
    masked_mse(recon, target, &Mask4D::full(recon.dims()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridDims;
    use rand::Rng;

    fn random_volume<T: Scalar>(dims: GridDims, seed: u64, scale: f64) -> Volume4D<T> {
        let mut rng = keyed_rng(seed, &[], 0);
        let data = (0..dims.len())
            .map(|_| T::from_f64_lossy(scale * (rng.random::<f64>() * 2.0 - 1.0)))
            .collect();
        Volume4D::new(dims, data).unwrap()
    }

    #[test]
    fn zero_model_outputs_decoder_bias() {
        let d = GridDims::new(4, 4, 4, 2).unwrap();
        let spec = PatchSpec::new(d, [2, 2, 2, 1]).unwrap();
        let mut m = MaeModel::<f32>::zeros([2, 2, 2, 1], 3, 2).unwrap();
        for (i, b) in m.dec_out.bias.iter_mut().enumerate() {
            *b = i as f32 * 0.5;
        }
        let out = m.forward(&random_volume(d, 1, 3.0), &spec).unwrap();
        let tokens = spec.patchify(&out).unwrap();
        for row in tokens.chunks_exact(8) {
            assert_eq!(row, m.dec_out.bias.as_slice());
        }
    }

    #[test]
    fn near_identity_weights_reconstruct_input() {
        let d = GridDims::new(4, 4, 2, 2).unwrap();
        let spec = PatchSpec::new(d, [2, 2, 2, 1]).unwrap();
        let n = spec.d_patch();
        let s = 0.01f64;
        let mut m = MaeModel::<f64>::zeros([2, 2, 2, 1], n, n).unwrap();
        for i in 0..n {
            m.enc_in.weight[i * n + i] = s;
            m.enc_out.weight[i * n + i] = 1.0;
            m.dec_in.weight[i * n + i] = 1.0;
            m.dec_out.weight[i * n + i] = 1.0 / s;
        }
        // tanh(tanh(s·x)) ≈ s·x when |s·x| ≪ 1
        let input = random_volume::<f64>(d, 2, 1.0);
        let out = m.forward(&input, &spec).unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let d = GridDims::new(4, 4, 4, 2).unwrap();
        let spec = PatchSpec::new(d, [2, 2, 2, 2]).unwrap();
        let m = MaeModel::<f32>::new([2, 2, 2, 2], 8, 4, 3).unwrap();
        let v = random_volume(d, 4, 1.0);
        let a = m.forward(&v, &spec).unwrap();
        let b = m.forward(&v, &spec).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(m, MaeModel::new([2, 2, 2, 2], 8, 4, 3).unwrap());
        assert_ne!(m, MaeModel::new([2, 2, 2, 2], 8, 4, 4).unwrap());
    }

    #[test]
    fn masked_mse_examples() {
        let d = GridDims::new(3, 3, 3, 2).unwrap();
        let t = random_volume::<f64>(d, 7, 1.0);
        let mut m = Mask4D::empty(d);
        m.set_index(5, true);
        m.set_index(40, true);
        assert_eq!(masked_mse(&t, &t, &m).unwrap(), 0.0);
        let shifted = t
            .like(d, t.data().iter().map(|v| v + 1.0).collect())
            .unwrap();
        let l = masked_mse(&shifted, &t, &m).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!(masked_mse(&t, &t, &Mask4D::empty(d)).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_output_layer_gradient() {
        let d = GridDims::new(2, 2, 2, 2).unwrap();
        let spec = PatchSpec::new(d, [2, 2, 2, 1]).unwrap();
        let m = MaeModel::<f64>::new([2, 2, 2, 1], 4, 3, 9).unwrap();
        let input = random_volume::<f64>(d, 10, 1.0);
        let target = m.forward(&input, &spec).unwrap();
        let (loss, g) = m
            .loss_and_gradients(&input, &target, &Mask4D::full(d), &spec, LossScope::Masked)
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.tensors[6].iter().all(|v| *v == 0.0));
        assert!(g.tensors[7].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn doubling_residual_doubles_output_gradients() {
        let d = GridDims::new(2, 2, 2, 2).unwrap();
        let spec = PatchSpec::new(d, [2, 2, 2, 1]).unwrap();
        let m = MaeModel::<f64>::new([2, 2, 2, 1], 4, 3, 9).unwrap();
        let input = random_volume::<f64>(d, 10, 1.0);
        let recon = m.forward(&input, &spec).unwrap();
        let t1 = recon
            .like(d, recon.data().iter().map(|v| v - 0.25).collect())
            .unwrap();
        let t2 = recon
            .like(d, recon.data().iter().map(|v| v - 0.5).collect())
            .unwrap();
        let full = Mask4D::full(d);
        let (_, g1) = m
            .loss_and_gradients(&input, &t1, &full, &spec, LossScope::Masked)
            .unwrap();
        let (_, g2) = m
            .loss_and_gradients(&input, &t2, &full, &spec, LossScope::Masked)
            .unwrap();
        for k in [6, 7] {
            for (a, b) in g1.tensors[k].iter().zip(&g2.tensors[k]) {
                assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn unmasked_targets_do_not_matter() {
        let d = GridDims::new(4, 4, 2, 2).unwrap();
        let spec = PatchSpec::new(d, [2, 2, 2, 1]).unwrap();
        let m = MaeModel::<f32>::new([2, 2, 2, 1], 6, 3, 1).unwrap();
        let input = random_volume::<f32>(d, 2, 1.0);
        let target = random_volume::<f32>(d, 3, 1.0);
        let mut mask = Mask4D::empty(d);
        for i in (0..d.len()).step_by(7) {
            mask.set_index(i, true);
        }
        let mut other = target.clone();
        for (i, v) in other.data_mut().iter_mut().enumerate() {
            if !mask.get_index(i) {
                *v = 1e3;
            }
        }
        let a = m
            .loss_and_gradients(&input, &target, &mask, &spec, LossScope::Masked)
            .unwrap();
        let b = m
            .loss_and_gradients(&input, &other, &mask, &spec, LossScope::Masked)
            .unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn loss_matches_masked_mse_of_forward() {
        let d = GridDims::new(4, 4, 2, 2).unwrap();
        let spec = PatchSpec::new(d, [2, 2, 1, 2]).unwrap();
        let m = MaeModel::<f64>::new([2, 2, 1, 2], 5, 3, 5).unwrap();
        let input = random_volume::<f64>(d, 6, 1.0);
        let target = random_volume::<f64>(d, 8, 1.0);
        let mut mask = Mask4D::empty(d);
        for i in (0..d.len()).step_by(3) {
            mask.set_index(i, true);
        }
        let (loss, _) = m
            .loss_and_gradients(&input, &target, &mask, &spec, LossScope::Masked)
            .unwrap();
        let direct = masked_mse(&m.forward(&input, &spec).unwrap(), &target, &mask).unwrap();
        assert!((loss - direct).abs() < 1e-12);
        let (all, _) = m
            .loss_and_gradients(&input, &target, &mask, &spec, LossScope::All)
            .unwrap();
        let direct = full_mse(&m.forward(&input, &spec).unwrap(), &target).unwrap();
        assert!((all - direct).abs() < 1e-12);
    }

    #[test]
    fn model_file_roundtrip() {
        let m = MaeModel::<f32>::new([2, 2, 2, 2], 7, 3, 11).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"RMAE");
        assert_eq!(MaeModel::<f32>::from_bytes(&bytes).unwrap(), m);
        assert!(MaeModel::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(MaeModel::<f32>::from_bytes(&bad).is_err());
    }
}
