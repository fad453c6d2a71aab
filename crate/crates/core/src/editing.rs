//! Latent directions from labelled latents, affine edits, and pixel-level
//! measurement of the edited attribute.

use std::path::Path;

use metaux_tensor::io::{load_tnsr, save_tnsr};
use metaux_tensor::nn::ParamSet;
use metaux_tensor::Tensor;

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::renderer::{render, RenderConfig, SampleMode};
use crate::scene::{mean_hue, Pose};
use crate::triplane::OffsetTriPlane;

#[derive(Clone, Debug)]
pub struct Direction {
    pub n: Tensor,
    pub attribute: String,
    pub positive_mean: Tensor,
    pub negative_mean: Tensor,
    pub count: usize,
}

fn class_mean(latents: &[&Tensor]) -> Result<Tensor> {
    let mut acc = vec![0.0; latents[0].numel()];
    for l in latents {
        if l.numel() != acc.len() {
            return Err(Error::Invalid(format!("latent sizes differ: {} vs {}", l.numel(), acc.len())));
        }
        for (a, v) in acc.iter_mut().zip(l.data()) {
            *a += v;
        }
    }
    let n = latents.len() as f64;
    Ok(Tensor::vector(&acc.iter().map(|a| a / n).collect::<Vec<_>>()))
}

/// Unit difference between the mean latent of the positive and negative class.
pub fn fit_direction(latents: &[Tensor], labels: &[bool], attribute: &str) -> Result<Direction> {
    if latents.len() != labels.len() {
        return Err(Error::Invalid(format!("{} latents but {} labels", latents.len(), labels.len())));
    }
    let pos: Vec<&Tensor> = latents.iter().zip(labels).filter(|(_, &l)| l).map(|(t, _)| t).collect();
    let neg: Vec<&Tensor> = latents.iter().zip(labels).filter(|(_, &l)| !l).map(|(t, _)| t).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Invalid("both classes need at least one latent".into()));
    }
    let (mp, mn) = (class_mean(&pos)?, class_mean(&neg)?);
    let diff = mp.sub(&mn)?;
    let norm = diff.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Invalid("class means coincide".into()));
    }
    Ok(Direction {
        n: diff.scale(1.0 / norm)?,
        attribute: attribute.to_string(),
        positive_mean: mp,
        negative_mean: mn,
        count: latents.len(),
    })
}

/// `ω + α·n`.
pub fn apply_edit(latent: &Tensor, dir: &Direction, alpha: f64) -> Result<Tensor> {
    Ok(latent.add(&dir.n.scale(alpha)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attribute {
    /// Number of pixels with accumulated opacity above one half.
    Area,
    /// Circular mean hue over the silhouette, in [0, 1).
    Hue,
}

/// Renders each edit of `latent` and measures `attr`. Offsets and adapted
/// weights, when given, are kept fixed across the sweep. Hue is NaN when
/// the silhouette is empty.
#[allow(clippy::too_many_arguments)]
pub fn measure_edit(
    gen: &Generator,
    params: &ParamSet,
    offsets: Option<&OffsetTriPlane>,
    latent: &Tensor,
    dir: &Direction,
    alphas: &[f64],
    pose: &Pose,
    attr: Attribute,
    rcfg: &RenderConfig,
) -> Result<Vec<(f64, f64)>> {
    alphas
        .iter()
        .map(|&a| {
            let w = apply_edit(latent, dir, a)?;
            let out = render(gen, params, offsets, &w, pose, rcfg, SampleMode::Deterministic)?;
            let mask = out.silhouette();
            let v = match attr {
                Attribute::Area => mask.iter().filter(|&&m| m).count() as f64,
                Attribute::Hue => mean_hue(&out.image, &mask).unwrap_or(f64::NAN),
            };
            Ok((a, v))
        })
        .collect()
}

/// Saves `n` as TNSR plus a `.txt` sidecar with the fit metadata.
pub fn save_direction(dir: &Direction, path: &Path) -> Result<()> {
    save_tnsr(path, &dir.n)?;
    let fmt = |t: &Tensor| t.data().iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(",");
    let text = format!(
        "attribute\t{}\ncount\t{}\npositive_mean\t{}\nnegative_mean\t{}\n",
        dir.attribute,
        dir.count,
        fmt(&dir.positive_mean),
        fmt(&dir.negative_mean)
    );
    let side = path.with_extension("txt");
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_direction(path: &Path) -> Result<Direction> {
    let n = load_tnsr(path)?;
    let side = path.with_extension("txt");
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut fields = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: side.display().to_string(),
            line: i + 1,
            msg: "expected key<TAB>value".into(),
        })?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        fields.get(k).cloned().ok_or_else(|| Error::Parse {
            path: side.display().to_string(),
            line: 0,
            msg: format!("missing `{k}`"),
        })
    };
    let vec = |k: &str| -> Result<Tensor> {
        let v: std::result::Result<Vec<f64>, _> = get(k)?.split(',').map(str::parse).collect();
        v.map(|v| Tensor::vector(&v)).map_err(|e| Error::Parse {
            path: side.display().to_string(),
            line: 0,
            msg: format!("{k}: {e}"),
        })
    };
    Ok(Direction {
        n,
        attribute: get("attribute")?,
        count: get("count")?.parse().map_err(|e| Error::Invalid(format!("count: {e}")))?,
        positive_mean: vec("positive_mean")?,
        negative_mean: vec("negative_mean")?,
    })
}
