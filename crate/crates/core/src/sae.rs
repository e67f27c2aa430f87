//! Sparse-autoencoder encode/decode (JumpReLU and TopK) with reconstruction
//! and sparsity diagnostics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actstore::{read_tensor, write_tensor, ActivationDump, TokenSpan};
use crate::error::{Error, Result};
use crate::scalar::{dot, l2_norm, lift, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaeVariant {
    JumpRelu,
    TopK,
}

/// SAE weights. `w_enc` is `d_model x d_sae` and `w_dec` is `d_sae x d_model`,
/// both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<T> {
    variant: SaeVariant,
    d_model: usize,
    d_sae: usize,
    w_enc: Vec<T>,
    b_enc: Vec<T>,
    w_dec: Vec<T>,
    b_dec: Vec<T>,
    theta: Option<Vec<T>>,
    k: Option<usize>,
    subtract_decoder_bias_on_encode: bool,
}

/// Active features of one token, sorted by feature id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseActivations<T> {
    entries: Vec<(u32, T)>,
}

impl<T: Scalar> SparseActivations<T> {
    /// Builds from `(id, activation)` pairs; drops non-positive values.
    pub fn from_pairs(mut pairs: Vec<(u32, T)>) -> Self {
        pairs.retain(|&(_, a)| a > T::zero());
        pairs.sort_by_key(|&(f, _)| f);
        pairs.dedup_by_key(|&mut (f, _)| f);
        SparseActivations { entries: pairs }
    }

    pub fn entries(&self) -> &[(u32, T)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, feature: u32) -> T {
        self.entries
            .binary_search_by_key(&feature, |&(f, _)| f)
            .map(|i| self.entries[i].1)
            .unwrap_or_else(|_| T::zero())
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(f, _)| f)
    }

    pub fn to_dense(&self, d_sae: usize) -> Vec<T> {
        let mut out = vec![T::zero(); d_sae];
        for &(f, a) in &self.entries {
            out[f as usize] = a;
        }
        out
    }
}

impl<T: Scalar> SaeParams<T> {
    #[allow(clippy::too_many_arguments)]
    fn build(
        variant: SaeVariant,
        d_model: usize,
        d_sae: usize,
        w_enc: Vec<T>,
        b_enc: Vec<T>,
        w_dec: Vec<T>,
        b_dec: Vec<T>,
        theta: Option<Vec<T>>,
        k: Option<usize>,
        subtract_decoder_bias_on_encode: bool,
    ) -> Result<Self> {
        let p = SaeParams {
            variant,
            d_model,
            d_sae,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            theta,
            k,
            subtract_decoder_bias_on_encode,
        };
        p.validate()?;
        Ok(p)
    }

    /// JumpReLU SAE; decoder-bias subtraction on encode defaults to on.
    pub fn jump_relu(
        d_model: usize,
        d_sae: usize,
        w_enc: Vec<T>,
        b_enc: Vec<T>,
        w_dec: Vec<T>,
        b_dec: Vec<T>,
        theta: Vec<T>,
    ) -> Result<Self> {
        Self::build(
            SaeVariant::JumpRelu,
            d_model,
            d_sae,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            Some(theta),
            None,
            true,
        )
    }

    /// TopK SAE; decoder-bias subtraction on encode defaults to off.
    pub fn top_k(
        d_model: usize,
        d_sae: usize,
        w_enc: Vec<T>,
        b_enc: Vec<T>,
        w_dec: Vec<T>,
        b_dec: Vec<T>,
        k: usize,
    ) -> Result<Self> {
        Self::build(
            SaeVariant::TopK,
            d_model,
            d_sae,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            None,
            Some(k),
            false,
        )
    }

    pub fn with_decoder_bias_subtraction(mut self, on: bool) -> Self {
        self.subtract_decoder_bias_on_encode = on;
        self
    }

    fn validate(&self) -> Result<()> {
        let (d, f) = (self.d_model, self.d_sae);
        if d == 0 || f == 0 {
            return Err(Error::shape("d_model and d_sae must be positive"));
        }
        let checks = [
            ("w_enc", self.w_enc.len(), d * f),
            ("b_enc", self.b_enc.len(), f),
            ("w_dec", self.w_dec.len(), f * d),
            ("b_dec", self.b_dec.len(), d),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::shape(format!("{name}: {got} values, expected {want}")));
            }
        }
        let all = self
            .w_enc
            .iter()
            .chain(&self.b_enc)
            .chain(&self.w_dec)
            .chain(&self.b_dec);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SAE weights"));
        }
        match (self.variant, &self.theta, self.k) {
            (SaeVariant::JumpRelu, Some(theta), None) => {
                if theta.len() != f {
                    return Err(Error::shape(format!("theta: {} values, expected {f}", theta.len())));
                }
                // +inf thresholds are allowed (feature permanently off)
                if theta.iter().any(|t| t.is_nan() || *t < T::zero()) {
                    return Err(Error::invariant("JumpReLU thresholds must be nonnegative"));
                }
            }
            (SaeVariant::TopK, None, Some(k)) => {
                if k == 0 || k > f {
                    return Err(Error::invariant(format!("TopK k={k} not in 1..={f}")));
                }
            }
            _ => {
                return Err(Error::invariant(
                    "theta present iff JumpReLU; k present iff TopK",
                ))
            }
        }
        Ok(())
    }

    pub fn variant(&self) -> SaeVariant {
        self.variant
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_sae(&self) -> usize {
        self.d_sae
    }

    pub fn k(&self) -> Option<usize> {
        self.k
    }

    pub fn theta(&self) -> Option<&[T]> {
        self.theta.as_deref()
    }

    pub fn b_dec(&self) -> &[T] {
        &self.b_dec
    }

    pub fn subtracts_decoder_bias(&self) -> bool {
        self.subtract_decoder_bias_on_encode
    }

    /// Decoder row of feature `f` (its residual-space direction).
    pub fn decoder_row(&self, f: usize) -> &[T] {
        &self.w_dec[f * self.d_model..(f + 1) * self.d_model]
    }

    /// Encoder column of feature `f` (strided copy).
    pub fn encoder_column(&self, f: usize) -> Vec<T> {
        (0..self.d_model)
            .map(|d| self.w_enc[d * self.d_sae + f])
            .collect()
    }

    /// `x . W_enc` for an arbitrary residual-space vector (no bias).
    pub fn project_encoder(&self, x: &[T]) -> Vec<T> {
        let mut z = vec![T::zero(); self.d_sae];
        for (d, &xd) in x.iter().enumerate() {
            if xd == T::zero() {
                continue;
            }
            let row = &self.w_enc[d * self.d_sae..(d + 1) * self.d_sae];
            for (zf, &w) in z.iter_mut().zip(row) {
                *zf = *zf + xd * w;
            }
        }
        z
    }

    /// L2 norm of every encoder column.
    pub fn encoder_column_norms(&self) -> Vec<T> {
        let mut sq = vec![T::zero(); self.d_sae];
        for row in self.w_enc.chunks_exact(self.d_sae) {
            for (s, &w) in sq.iter_mut().zip(row) {
                *s = *s + w * w;
            }
        }
        sq.into_iter().map(T::sqrt).collect()
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.d_model {
            return Err(Error::shape(format!(
                "residual has {} entries, SAE expects {}",
                x.len(),
                self.d_model
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SAE input"));
        }
        Ok(())
    }

    /// Encoder pre-activations `z = x' W_enc + b_enc`.
    pub fn pre_activations(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut z = if self.subtract_decoder_bias_on_encode {
            let centered: Vec<T> = x.iter().zip(&self.b_dec).map(|(&a, &b)| a - b).collect();
            self.project_encoder(&centered)
        } else {
            self.project_encoder(x)
        };
        for (zf, &b) in z.iter_mut().zip(&self.b_enc) {
            *zf = *zf + b;
        }
        Ok(z)
    }

    pub fn encode(&self, x: &[T]) -> Result<SparseActivations<T>> {
        let z = self.pre_activations(x)?;
        let entries = match self.variant {
            SaeVariant::JumpRelu => {
                let theta = self.theta.as_ref().expect("validated");
                z.iter()
                    .zip(theta)
                    .enumerate()
                    .filter(|(_, (&zf, &t))| zf > t && zf > T::zero())
                    .map(|(f, (&zf, _))| (f as u32, zf))
                    .collect()
            }
            SaeVariant::TopK => {
                let k = self.k.expect("validated");
                let mut pos: Vec<(u32, T)> = z
                    .iter()
                    .enumerate()
                    .filter(|(_, &zf)| zf > T::zero())
                    .map(|(f, &zf)| (f as u32, zf))
                    .collect();
                pos.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
                pos.truncate(k);
                pos.sort_by_key(|&(f, _)| f);
                pos
            }
        };
        Ok(SparseActivations { entries })
    }

    pub fn decode(&self, a: &SparseActivations<T>) -> Result<Vec<T>> {
        let mut out = self.b_dec.clone();
        for &(f, af) in &a.entries {
            let f = f as usize;
            if f >= self.d_sae {
                return Err(Error::shape(format!("feature {f} >= d_sae {}", self.d_sae)));
            }
            for (o, &w) in out.iter_mut().zip(self.decoder_row(f)) {
                *o = *o + af * w;
            }
        }
        Ok(out)
    }

    /// `||x - decode(encode(x))|| / ||x||`.
    pub fn reconstruction_error(&self, x: &[T]) -> Result<T> {
        let norm = l2_norm(x);
        if norm == T::zero() {
            return Err(Error::Empty("zero-norm residual"));
        }
        let recon = self.decode(&self.encode(x)?)?;
        let diff: Vec<T> = x.iter().zip(&recon).map(|(&a, &b)| a - b).collect();
        Ok(l2_norm(&diff) / norm)
    }

    /// Number of active features.
    pub fn l0(&self, x: &[T]) -> Result<usize> {
        Ok(self.encode(x)?.len())
    }

    /// `W_dec[f] . v` for a residual-space readout vector `v`.
    pub fn decoder_projection(&self, f: usize, v: &[T]) -> T {
        dot(self.decoder_row(f), v)
    }
}

/// Mean and median of a per-token diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Summary {
            n: values.len(),
            mean: crate::stats::mean(values)?,
            median: crate::stats::median(values)?,
        })
    }
}

/// Corpus-level reconstruction error and L0 over the given token rows.
pub fn corpus_diagnostics<T: Scalar>(
    sae: &SaeParams<T>,
    rows: &[Vec<T>],
) -> Result<(Option<Summary>, Option<Summary>)> {
    let per: Vec<(f64, f64)> = rows
        .par_iter()
        .map(|x| -> Result<(f64, f64)> {
            Ok((
                sae.reconstruction_error(x)?.to_f64_lossy(),
                sae.l0(x)? as f64,
            ))
        })
        .collect::<Result<_>>()?;
    let (err, l0): (Vec<f64>, Vec<f64>) = per.into_iter().unzip();
    Ok((Summary::of(&err), Summary::of(&l0)))
}

/// Per-token SAE activations of a whole dump.
#[derive(Debug, Clone)]
pub struct EncodedDump<T> {
    pub tokens: Vec<SparseActivations<T>>,
    pub d_sae: usize,
}

impl<T: Scalar> EncodedDump<T> {
    pub fn activation(&self, t: usize, f: u32) -> T {
        self.tokens[t].get(f)
    }

    /// Peak activation of `f` over `span` and the earliest token attaining it
    /// (`None` when the feature never fires there).
    pub fn peak(&self, f: u32, span: &TokenSpan) -> (T, Option<usize>) {
        let mut best = T::zero();
        let mut at = None;
        for t in span.iter() {
            let a = self.tokens[t].get(f);
            if a > best {
                best = a;
                at = Some(t);
            }
        }
        (best, at)
    }

    /// Dense per-feature peak over `span`.
    pub fn peaks(&self, span: &TokenSpan) -> Vec<T> {
        let mut out = vec![T::zero(); self.d_sae];
        for t in span.iter() {
            for &(f, a) in self.tokens[t].entries() {
                let slot = &mut out[f as usize];
                if a > *slot {
                    *slot = a;
                }
            }
        }
        out
    }
}

/// Encodes every token of `dump` (parallel over tokens, ordered output).
pub fn encode_dump<T: Scalar>(dump: &ActivationDump, sae: &SaeParams<T>) -> Result<EncodedDump<T>> {
    if dump.dim != sae.d_model {
        return Err(Error::shape(format!(
            "dump {} has dim {}, SAE expects {}",
            dump.case_id, dump.dim, sae.d_model
        )));
    }
    let tokens = (0..dump.token_count)
        .into_par_iter()
        .map(|t| sae.encode(&lift::<T>(dump.row(t))))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedDump {
        tokens,
        d_sae: sae.d_sae,
    })
}

/// JSON descriptor stored next to the tensor files of an SAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeDescriptor {
    pub variant: SaeVariant,
    pub d_model: usize,
    pub d_sae: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtract_decoder_bias_on_encode: Option<bool>,
    /// Parameter name -> tensor file (relative to the descriptor).
    pub files: BTreeMap<String, PathBuf>,
}

pub const DESCRIPTOR_FILE: &str = "sae.json";

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter()
        .map(|x| x.to_f32().unwrap_or(f32::NAN))
        .collect()
}

impl<T: Scalar> SaeParams<T> {
    /// Writes `sae.json` plus one tensor file per parameter into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (d, f) = (self.d_model, self.d_sae);
        let mut tensors: Vec<(&str, Vec<usize>, &[T])> = vec![
            ("w_enc", vec![d, f], &self.w_enc),
            ("b_enc", vec![f], &self.b_enc),
            ("w_dec", vec![f, d], &self.w_dec),
            ("b_dec", vec![d], &self.b_dec),
        ];
        if let Some(theta) = &self.theta {
            tensors.push(("theta", vec![f], theta));
        }
        let mut files = BTreeMap::new();
        for (name, shape, data) in tensors {
            let rel = PathBuf::from(format!("{name}.fprb"));
            write_tensor(&dir.join(&rel), name, &shape, &to_f32(data))?;
            files.insert(name.to_owned(), rel);
        }
        let desc = SaeDescriptor {
            variant: self.variant,
            d_model: d,
            d_sae: f,
            k: self.k,
            subtract_decoder_bias_on_encode: Some(self.subtract_decoder_bias_on_encode),
            files,
        };
        let path = dir.join(DESCRIPTOR_FILE);
        let text = serde_json::to_string_pretty(&desc)
            .map_err(|e| Error::Internal(format!("descriptor encode: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(DESCRIPTOR_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let desc: SaeDescriptor = serde_json::from_str(&text)
            .map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))?;
        let load = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let rel = desc
                .files
                .get(name)
                .ok_or_else(|| Error::MalformedHeader(format!("descriptor lacks {name}")))?;
            let (header, data) = read_tensor(&dir.join(rel))?;
            if header.shape != shape {
                return Err(Error::shape(format!(
                    "{name}: file shape {:?}, descriptor implies {shape:?}",
                    header.shape
                )));
            }
            Ok(data.into_iter().map(T::from_stored).collect())
        };
        let (d, f) = (desc.d_model, desc.d_sae);
        let w_enc = load("w_enc", &[d, f])?;
        let b_enc = load("b_enc", &[f])?;
        let w_dec = load("w_dec", &[f, d])?;
        let b_dec = load("b_dec", &[d])?;
        let sae = match desc.variant {
            SaeVariant::JumpRelu => {
                Self::jump_relu(d, f, w_enc, b_enc, w_dec, b_dec, load("theta", &[f])?)?
            }
            SaeVariant::TopK => {
                let k = desc
                    .k
                    .ok_or_else(|| Error::MalformedHeader("TopK descriptor lacks k".into()))?;
                Self::top_k(d, f, w_enc, b_enc, w_dec, b_dec, k)?
            }
        };
        Ok(match desc.subtract_decoder_bias_on_encode {
            Some(flag) => sae.with_decoder_bias_subtraction(flag),
            None => sae,
        })
    }
}
