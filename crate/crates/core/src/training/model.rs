use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::Variant;
use crate::error::{FocalError, Result};
use crate::fragments::{EmbedMatrix, Instance, Modality};

/// Linear maps from each modality's raw feature space into the shared
/// `dim`-dimensional space: `row * W + b`.
///
/// Weights are row-major `d_raw x dim`. The same struct doubles as the
/// gradient buffer, since gradients share the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    dim: usize,
    d_raw_txt: usize,
    d_raw_img: usize,
    pub w_txt: Vec<f64>,
    pub w_img: Vec<f64>,
    pub b_txt: Option<Vec<f64>>,
    pub b_img: Option<Vec<f64>>,
}

impl ProjectionModel {
    pub fn zeros(d_raw_txt: usize, d_raw_img: usize, dim: usize, bias: bool) -> Result<Self> {
        if d_raw_txt == 0 || d_raw_img == 0 || dim == 0 {
            return Err(FocalError::Config(format!(
                "projection dimensions must be positive (text {d_raw_txt}, image {d_raw_img}, shared {dim})"
            )));
        }
        Ok(Self {
            dim,
            d_raw_txt,
            d_raw_img,
            w_txt: vec![0.0; d_raw_txt * dim],
            w_img: vec![0.0; d_raw_img * dim],
            b_txt: bias.then(|| vec![0.0; dim]),
            b_img: bias.then(|| vec![0.0; dim]),
        })
    }

    /// Seeded initialization, uniform in `[-1/sqrt(d_raw), 1/sqrt(d_raw)]` per
    /// modality (biases included). Values are rounded to f32 so a freshly
    /// initialized model survives a checkpoint round trip unchanged.
    pub fn init(
        d_raw_txt: usize,
        d_raw_img: usize,
        dim: usize,
        bias: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::zeros(d_raw_txt, d_raw_img, dim, bias)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |values: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in values {
                *v = rng.random_range(-bound..=bound) as f32 as f64;
            }
        };
        fill(&mut model.w_txt, d_raw_txt);
        fill(&mut model.w_img, d_raw_img);
        if let Some(b) = model.b_txt.as_mut() {
            fill(b, d_raw_txt);
        }
        if let Some(b) = model.b_img.as_mut() {
            fill(b, d_raw_img);
        }
        Ok(model)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            d_raw_txt: self.d_raw_txt,
            d_raw_img: self.d_raw_img,
            w_txt: vec![0.0; self.w_txt.len()],
            w_img: vec![0.0; self.w_img.len()],
            b_txt: self.b_txt.as_ref().map(|b| vec![0.0; b.len()]),
            b_img: self.b_img.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.d_raw_txt,
            Modality::Image => self.d_raw_img,
        }
    }

    pub fn has_bias(&self) -> bool {
        self.b_txt.is_some()
    }

    fn weights(&self, modality: Modality) -> (&[f64], Option<&[f64]>) {
        match modality {
            Modality::Text => (&self.w_txt, self.b_txt.as_deref()),
            Modality::Image => (&self.w_img, self.b_img.as_deref()),
        }
    }

    /// Parameter blocks in checkpoint order.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut blocks: Vec<(&'static str, &[f64])> =
            vec![("w_txt", &self.w_txt), ("w_img", &self.w_img)];
        if let Some(b) = &self.b_txt {
            blocks.push(("b_txt", b));
        }
        if let Some(b) = &self.b_img {
            blocks.push(("b_img", b));
        }
        blocks
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut blocks: Vec<(&'static str, &mut [f64])> =
            vec![("w_txt", &mut self.w_txt), ("w_img", &mut self.w_img)];
        if let Some(b) = &mut self.b_txt {
            blocks.push(("b_txt", b));
        }
        if let Some(b) = &mut self.b_img {
            blocks.push(("b_img", b));
        }
        blocks
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// Applies the modality's projection to every row of `raw`.
    pub fn project_raw(&self, modality: Modality, raw: &EmbedMatrix) -> Result<EmbedMatrix> {
        let d_raw = self.raw_dim(modality);
        if raw.dim() != d_raw {
            return Err(FocalError::DimensionMismatch(format!(
                "{modality} features have dimension {}, model expects {d_raw}",
                raw.dim()
            )));
        }
        let (w, b) = self.weights(modality);
        let d = self.dim;
        let mut out = Vec::with_capacity(raw.rows() * d);
        for x in raw.iter_rows() {
            let start = out.len();
            match b {
                Some(b) => out.extend_from_slice(b),
                None => out.extend(std::iter::repeat_n(0.0, d)),
            }
            let row = &mut out[start..];
            for (k, &xk) in x.iter().enumerate() {
                if xk != 0.0 {
                    for (o, wk) in row.iter_mut().zip(&w[k * d..(k + 1) * d]) {
                        *o += xk * wk;
                    }
                }
            }
        }
        EmbedMatrix::new(raw.rows(), d, out)
    }

    /// Adds the parameter gradient of a projection, given the gradient with
    /// respect to its output rows, into `self` (used as a gradient buffer).
    pub(crate) fn accumulate_projection_grad(
        &mut self,
        modality: Modality,
        raw: &EmbedMatrix,
        grad_out: &[f64],
    ) {
        let d = self.dim;
        let (w, b) = match modality {
            Modality::Text => (&mut self.w_txt, self.b_txt.as_mut()),
            Modality::Image => (&mut self.w_img, self.b_img.as_mut()),
        };
        for (x, g) in raw.iter_rows().zip(grad_out.chunks_exact(d)) {
            for (k, &xk) in x.iter().enumerate() {
                if xk != 0.0 {
                    for (wk, gk) in w[k * d..(k + 1) * d].iter_mut().zip(g) {
                        *wk += xk * gk;
                    }
                }
            }
        }
        if let Some(b) = b {
            for g in grad_out.chunks_exact(d) {
                for (bk, gk) in b.iter_mut().zip(g) {
                    *bk += gk;
                }
            }
        }
    }
}

/// Projects an instance into the shared space with its modality's map.
pub fn project(model: &ProjectionModel, instance: &Instance) -> Result<EmbedMatrix> {
    model
        .project_raw(instance.modality, &instance.raw)
        .map_err(|e| match e {
            FocalError::InvalidMatrix(reason) => FocalError::InvalidInstance {
                id: instance.id.clone(),
                reason: format!("projection produced an invalid matrix: {reason}"),
            },
            other => other,
        })
}

const MAGIC: &[u8; 8] = b"FOCALCKP";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 36;

/// A model plus the run metadata stored in its checkpoint header.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ProjectionModel,
    pub variant: Variant,
    pub seed: u64,
}

impl Checkpoint {
    /// Header (magic, version, dims, variant, bias flag, seed), then the
    /// parameter blocks as little-endian f32 in `blocks()` order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [m.dim, m.d_raw_txt, m.d_raw_img] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.variant.code());
        out.push(m.has_bias() as u8);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for (_, block) in m.blocks() {
            for &v in block {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!("{} bytes is shorter than the header", bytes.len()));
        }
        if &bytes[..8] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let (dim, d_txt, d_img) = (
            u32_at(12) as usize,
            u32_at(16) as usize,
            u32_at(20) as usize,
        );
        let variant = Variant::from_code(bytes[24])
            .ok_or_else(|| format!("unknown variant code {}", bytes[24]))?;
        let bias = match bytes[25] {
            0 => false,
            1 => true,
            b => return Err(format!("bad bias flag {b}")),
        };
        let seed = u64::from_le_bytes(bytes[28..36].try_into().unwrap());
        let mut model =
            ProjectionModel::zeros(d_txt, d_img, dim, bias).map_err(|e| e.to_string())?;
        let expected = HEADER_LEN + 4 * model.num_params();
        if bytes.len() != expected {
            return Err(format!(
                "expected {expected} bytes for a {d_txt}/{d_img}->{dim} model, found {}",
                bytes.len()
            ));
        }
        let mut values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        for (_, block) in model.blocks_mut() {
            for v in block.iter_mut() {
                *v = values.next().unwrap();
            }
        }
        if !model.is_finite() {
            return Err("checkpoint contains non-finite parameters".into());
        }
        Ok(Self {
            model,
            variant,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| FocalError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| FocalError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| FocalError::format(path, reason))
    }
}
