//! Auxiliary network: an image encoder feeding (a) hypernetwork heads that
//! predict rank-1 residuals for the generator's trunk convolutions and (b) a
//! pose-conditioned head predicting offset planes for coordinate deformation.

use metaux_tensor::nn::{Conv2d, FiLMBlock, Init, Linear, ParamSet};
use metaux_tensor::{Result, Tensor, TensorError};
use rand::Rng;

use crate::generator::Generator;
use crate::losses::to_nchw;
use crate::scene::Pose;
use crate::triplane::{OffsetTriPlane, TriPlane};

#[derive(Clone, Debug, PartialEq)]
pub struct AuxConfig {
    pub encoder_widths: Vec<usize>,
    pub film_blocks: usize,
    pub film_width: usize,
    pub pose_hidden: usize,
    pub s_max: f64,
    /// Indices into the generator's targeted conv list; `None` means all.
    pub layers: Option<Vec<usize>>,
    pub use_weight_residuals: bool,
    pub use_offset_planes: bool,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            encoder_widths: vec![16, 32, 64, 64],
            film_blocks: 2,
            film_width: 32,
            pose_hidden: 32,
            s_max: 0.1,
            layers: None,
            use_weight_residuals: true,
            use_offset_planes: true,
        }
    }
}

#[derive(Clone, Debug)]
struct ResidualHead {
    layer: String,
    shape: [usize; 4],
    u: Linear,
    v: Linear,
    gain: String,
}

/// Predicted residuals: per-layer additive weight changes and offset planes.
#[derive(Clone, Debug)]
pub struct ParamOffsets {
    pub deltas: Vec<(String, Tensor)>,
    pub planes: Option<OffsetTriPlane>,
}

impl ParamOffsets {
    pub fn none() -> Self {
        ParamOffsets {
            deltas: Vec::new(),
            planes: None,
        }
    }
}

/// Generator parameters with residuals applied, plus offset planes for the
/// deformed query path.
#[derive(Clone, Debug)]
pub struct AdaptedGenerator {
    pub params: ParamSet,
    pub offsets: Option<OffsetTriPlane>,
}

#[derive(Clone, Debug)]
pub struct AuxNet {
    pub cfg: AuxConfig,
    encoder: Vec<Conv2d>,
    heads: Vec<ResidualHead>,
    pose_mlp: [Linear; 2],
    film: Vec<FiLMBlock>,
    offset_out: Conv2d,
}

const LEAK: f64 = 0.2;

impl AuxNet {
    pub fn new(cfg: AuxConfig, gen: &Generator) -> Result<Self> {
        if cfg.encoder_widths.is_empty() {
            return Err(TensorError::Invalid {
                op: "aux",
                msg: "encoder needs at least one block".into(),
            });
        }
        let mut encoder = Vec::new();
        let mut ch = 3;
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            encoder.push(Conv2d::new(format!("aux.enc.{i}"), ch, w, 3, 2));
            ch = w;
        }
        let pooled = ch;
        let all = gen.conv_layer_shapes();
        let chosen: Vec<usize> = match &cfg.layers {
            Some(ix) => ix.clone(),
            None => (0..all.len()).collect(),
        };
        let mut heads = Vec::new();
        for (j, &i) in chosen.iter().enumerate() {
            let (layer, shape) = all.get(i).cloned().ok_or_else(|| TensorError::Invalid {
                op: "aux",
                msg: format!("layer index {i} out of range (generator has {})", all.len()),
            })?;
            heads.push(ResidualHead {
                layer,
                shape,
                u: Linear::new(format!("aux.head{j}.u"), pooled, shape[0]),
                v: Linear::new(format!("aux.head{j}.v"), pooled, shape[1] * shape[2] * shape[3]),
                gain: format!("aux.head{j}.gain"),
            });
        }
        let fine = cfg.encoder_widths[0];
        let pose_mlp = [
            Linear::new("aux.pose.0", 5, cfg.pose_hidden),
            Linear::new("aux.pose.1", cfg.pose_hidden, cfg.pose_hidden),
        ];
        let mut film = Vec::new();
        let mut ch = fine;
        for i in 0..cfg.film_blocks {
            film.push(FiLMBlock::new(&format!("aux.off.block{i}"), ch, cfg.film_width, 3, 1, cfg.pose_hidden));
            ch = cfg.film_width;
        }
        let offset_out = Conv2d::new("aux.off.out", ch, 9, 3, 1);
        Ok(AuxNet {
            cfg,
            encoder,
            heads,
            pose_mlp,
            film,
            offset_out,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for c in &self.encoder {
            c.init(&mut p, Init::Scaled(2f64.sqrt()), rng)?;
        }
        for h in &self.heads {
            h.u.init(&mut p, Init::Scaled(1.0), rng)?;
            h.v.init(&mut p, Init::Scaled(1.0), rng)?;
            p.insert(h.gain.clone(), Tensor::zeros(&[1]))?;
        }
        for l in &self.pose_mlp {
            l.init(&mut p, Init::Scaled(1.0), rng)?;
        }
        for b in &self.film {
            b.init(&mut p, Init::Scaled(2f64.sqrt()), rng)?;
        }
        self.offset_out.init(&mut p, Init::Zeros, rng)?;
        Ok(p)
    }

    pub fn targeted_layers(&self) -> Vec<&str> {
        self.heads.iter().map(|h| h.layer.as_str()).collect()
    }

    /// Names of the residual-head parameters (encoder excluded).
    pub fn weight_head_params(&self) -> Vec<String> {
        self.heads
            .iter()
            .flat_map(|h| {
                [
                    format!("{}.weight", h.u.name),
                    format!("{}.bias", h.u.name),
                    format!("{}.weight", h.v.name),
                    format!("{}.bias", h.v.name),
                    h.gain.clone(),
                ]
            })
            .collect()
    }

    /// Residuals predicted for image `[H, W, 3]` seen from `pose`.
    pub fn forward(&self, params: &ParamSet, image: &Tensor, pose: &Pose) -> Result<ParamOffsets> {
        let mut x = to_nchw(image)?.scale(2.0)?.add_scalar(-1.0)?;
        let mut fine = None;
        for c in &self.encoder {
            x = c.forward(params, &x)?.leaky_relu(LEAK)?;
            fine.get_or_insert_with(|| x.clone());
        }
        let mut deltas = Vec::new();
        if self.cfg.use_weight_residuals {
            let ch = x.shape()[1];
            let pooled = x.reshape(&[ch, x.numel() / ch])?.mean_axis(1, false)?.reshape(&[1, ch])?;
            for h in &self.heads {
                let u = h.u.forward(params, &pooled)?;
                let v = h.v.forward(params, &pooled)?;
                let fan_in = (h.shape[1] * h.shape[2] * h.shape[3]) as f64;
                let outer = u.matmul_t(&v, true, false)?.scale(1.0 / fan_in.sqrt())?;
                let delta = outer.mul(params.get(&h.gain)?)?.reshape(&h.shape)?;
                deltas.push((h.layer.clone(), delta));
            }
        }
        let planes = if self.cfg.use_offset_planes {
            let emb = Tensor::vector(&pose.embedding()).reshape(&[1, 5])?;
            let cond = self.pose_mlp[0].forward(params, &emb)?.leaky_relu(LEAK)?;
            let cond = self.pose_mlp[1].forward(params, &cond)?;
            let mut y = fine.expect("encoder has blocks");
            for b in &self.film {
                y = b.forward(params, &y, &cond)?.leaky_relu(LEAK)?;
            }
            let raw = self.offset_out.forward(params, &y)?;
            Some(OffsetTriPlane::new(TriPlane::from_stacked(&raw)?, self.cfg.s_max)?)
        } else {
            None
        };
        Ok(ParamOffsets { deltas, planes })
    }
}

/// Adds each residual to its generator weight; the input is not modified.
pub fn apply_offsets(params: &ParamSet, off: &ParamOffsets) -> Result<AdaptedGenerator> {
    let mut out = params.clone();
    for (name, delta) in &off.deltas {
        let base = params.get(name)?;
        if base.shape() != delta.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "apply_offsets",
                lhs: base.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        out.set(name, base.add(delta)?)?;
    }
    Ok(AdaptedGenerator {
        params: out,
        offsets: off.planes.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::renderer::{render, RenderConfig, SampleMode};
    use metaux_tensor::check::{numerical_grad, rel_error};
    use metaux_tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_gen() -> Generator {
        Generator::new(GeneratorConfig {
            const_channels: 8,
            block_widths: vec![8, 8],
            plane_channels: 4,
            decoder_hidden: 8,
            ..GeneratorConfig::default()
        })
    }

    fn setup(seed: u64) -> (Generator, ParamSet, AuxNet, ParamSet, Tensor, Pose) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = small_gen();
        let gp = gen.init(&mut rng).unwrap();
        let aux = AuxNet::new(AuxConfig::default(), &gen).unwrap();
        let ap = aux.init(&mut rng).unwrap();
        let img = Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng);
        (gen, gp, aux, ap, img, Pose::new(2.5, 0.3, 0.1, 8))
    }

    #[test]
    fn fresh_aux_predicts_exact_zeros() {
        let (_, _, aux, ap, img, pose) = setup(0);
        let off = aux.forward(&ap, &img, &pose).unwrap();
        assert_eq!(off.deltas.len(), 2);
        assert!(off.deltas.iter().all(|(_, d)| d.max_abs() == 0.0));
        let planes = off.planes.unwrap();
        assert!(planes.planes.planes.iter().all(|p| p.max_abs() == 0.0));
    }

    #[test]
    fn identity_at_init_renders_bitwise() {
        let (gen, gp, aux, ap, img, pose) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(&[32], 1.0, &mut rng);
        let cfg = RenderConfig { samples: 8, ..RenderConfig::default() };
        let base = render(&gen, &gp, None, &w, &pose, &cfg, SampleMode::Deterministic).unwrap();
        let adapted = apply_offsets(&gp, &aux.forward(&ap, &img, &pose).unwrap()).unwrap();
        let out = render(&gen, &adapted.params, adapted.offsets.as_ref(), &w, &pose, &cfg, SampleMode::Deterministic).unwrap();
        assert!(out.image.bit_eq(&base.image));
        assert!(adapted.params.bit_eq(&gp));
    }

    #[test]
    fn same_input_same_offsets() {
        let (_, _, aux, ap, img, pose) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ap = ap.map(|_, t| Ok(t.add(&Tensor::randn(t.shape(), 0.1, &mut rng))?)).unwrap();
        let a = aux.forward(&ap, &img, &pose).unwrap();
        let b = aux.forward(&ap, &img, &pose).unwrap();
        for ((_, x), (_, y)) in a.deltas.iter().zip(&b.deltas) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn residuals_are_rank_one() {
        let (_, _, aux, mut ap, img, pose) = setup(5);
        for name in aux.weight_head_params().iter().filter(|n| n.ends_with("gain")) {
            ap.set(name, Tensor::vector(&[0.7])).unwrap();
        }
        for (_, d) in aux.forward(&ap, &img, &pose).unwrap().deltas {
            let o = d.shape()[0];
            let m = d.reshape(&[o, d.numel() / o]).unwrap();
            // every row is a multiple of the first nonzero row
            let rows: Vec<&[f64]> = m.data().chunks(d.numel() / o).collect();
            let pivot = rows.iter().find(|r| r.iter().any(|v| v.abs() > 1e-12)).unwrap();
            let k = pivot.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
            for r in &rows {
                let c = r[k] / pivot[k];
                for (a, b) in r.iter().zip(pivot.iter()) {
                    assert!((a - c * b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn apply_offsets_is_additive_and_pure() {
        let (gen, gp, _, _, _, _) = setup(6);
        let layer = gen.conv_layers()[0].clone();
        let neg = gp.get(&layer).unwrap().neg().unwrap();
        let off = ParamOffsets {
            deltas: vec![(layer.clone(), neg)],
            planes: None,
        };
        let before = gp.clone();
        let a = apply_offsets(&gp, &off).unwrap();
        assert_eq!(a.params.get(&layer).unwrap().max_abs(), 0.0);
        assert!(gp.bit_eq(&before));
        assert!(apply_offsets(&gp, &off).unwrap().params.bit_eq(&a.params));
        let bad = ParamOffsets {
            deltas: vec![(layer, Tensor::zeros(&[2]))],
            planes: None,
        };
        assert!(apply_offsets(&gp, &bad).is_err());
        let missing = ParamOffsets {
            deltas: vec![("nope.weight".into(), Tensor::zeros(&[2]))],
            planes: None,
        };
        assert!(apply_offsets(&gp, &missing).is_err());
    }

    #[test]
    fn small_offsets_equal_rebuilt_generator() {
        let (gen, gp, _, _, _, pose) = setup(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let deltas: Vec<(String, Tensor)> = gen
            .conv_layer_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::randn(&s, 0.01, &mut rng)))
            .collect();
        let mut rebuilt = gp.clone();
        for (n, d) in &deltas {
            let w: Vec<f64> = gp.get(n).unwrap().data().iter().zip(d.data()).map(|(a, b)| a + b).collect();
            rebuilt.set(n, Tensor::new(w, d.shape()).unwrap()).unwrap();
        }
        let adapted = apply_offsets(&gp, &ParamOffsets { deltas, planes: None }).unwrap();
        let w = Tensor::randn(&[32], 1.0, &mut rng);
        let cfg = RenderConfig { samples: 8, ..RenderConfig::default() };
        let a = render(&gen, &adapted.params, None, &w, &pose, &cfg, SampleMode::Deterministic).unwrap();
        let b = render(&gen, &rebuilt, None, &w, &pose, &cfg, SampleMode::Deterministic).unwrap();
        assert!(a.image.bit_eq(&b.image));
    }

    #[test]
    fn offset_norm_gradient_matches_finite_differences() {
        let (_, _, aux, ap, img, pose) = setup(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ap = ap.map(|_, t| Ok(t.add(&Tensor::randn(t.shape(), 0.2, &mut rng))?)).unwrap();
        let loss = |p: &ParamSet| -> Result<Tensor> {
            let off = aux.forward(p, &img, &pose)?;
            let mut acc = Tensor::scalar(0.0);
            for (_, d) in &off.deltas {
                acc = acc.add(&d.square()?.sum()?)?;
            }
            for plane in &off.planes.expect("offset head").planes.planes {
                acc = acc.add(&plane.square()?.sum()?)?;
            }
            Ok(acc)
        };
        let tape = Tape::new();
        let tracked = ap.track(&tape);
        let grads = tracked.grads_of(&loss(&tracked).unwrap(), false).unwrap();
        for name in ["aux.enc.0.weight", "aux.head1.v.weight", "aux.head0.gain", "aux.pose.0.weight", "aux.off.block1.film.weight", "aux.off.out.weight"] {
            let numeric = numerical_grad(ap.get(name).unwrap(), 1e-5, |v| {
                let mut q = ap.clone();
                q.set(name, v.clone())?;
                Ok(loss(&q)?.item())
            })
            .unwrap();
            let err = rel_error(grads.get(name).unwrap(), &numeric);
            assert!(err < 1e-4, "{name}: {err:e}");
        }
    }

    #[test]
    fn ablated_heads_produce_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gen = small_gen();
        let img = Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng);
        let pose = Pose::new(2.5, 0.0, 0.1, 16);
        let cfg = AuxConfig {
            use_weight_residuals: false,
            use_offset_planes: false,
            ..AuxConfig::default()
        };
        let aux = AuxNet::new(cfg, &gen).unwrap();
        let ap = aux.init(&mut rng).unwrap();
        let off = aux.forward(&ap, &img, &pose).unwrap();
        assert!(off.deltas.is_empty() && off.planes.is_none());
        let masked = AuxNet::new(AuxConfig { layers: Some(vec![1]), ..AuxConfig::default() }, &gen).unwrap();
        assert_eq!(masked.targeted_layers(), vec![gen.conv_layers()[1].as_str()]);
        assert!(AuxNet::new(AuxConfig { layers: Some(vec![5]), ..AuxConfig::default() }, &gen).is_err());
    }
}
