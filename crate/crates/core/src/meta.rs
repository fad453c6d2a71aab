//! Few-step adaptation of the auxiliary network and its meta-training:
//! functional inner SGD, exact (through the inner steps) or first-order outer
//! gradients, and test-time adaptation on a single image.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use metaux_tensor::nn::{sgd_step, Adam, ParamSet};
use metaux_tensor::{Result, Tape, Tensor};

use crate::auxiliary::{apply_offsets, AdaptedGenerator, AuxNet};
use crate::error::{ensure_finite, Error, Result as CoreResult};
use crate::generator::Generator;
use crate::losses::{render_objective, LossStack, RenderTarget};
use crate::renderer::{RenderConfig, RenderOutput};
use crate::scene::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaMode {
    Exact,
    FirstOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub mode: MetaMode,
    pub batch: usize,
    pub iterations: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_steps: 5,
            inner_lr: 0.1,
            outer_lr: 1e-4,
            mode: MetaMode::Exact,
            batch: 4,
            iterations: 400,
        }
    }
}

/// A task: a scalar loss of the adapted parameters.
pub type TaskLoss<'a> = dyn Fn(&ParamSet) -> Result<Tensor> + 'a;

#[derive(Clone, Debug)]
pub struct Adapted {
    pub params: ParamSet,
    /// Loss before each inner step.
    pub trace: Vec<f64>,
}

/// `steps` plain gradient steps `θ ← θ − lr·∇L(θ)`. With `create_graph` the
/// steps are recorded on the tape of `params`, so the result stays
/// differentiable with respect to them; otherwise each step runs on a fresh
/// tape and the result is detached.
pub fn inner_adapt(params: &ParamSet, loss: &TaskLoss, steps: usize, lr: f64, create_graph: bool) -> CoreResult<Adapted> {
    let mut theta = if create_graph { params.clone() } else { params.detach() };
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        if create_graph {
            let l = loss(&theta)?;
            ensure_finite(l.item(), "inner", step)?;
            trace.push(l.item());
            let g = theta.grads_of(&l, true)?;
            theta = sgd_step(&theta, &g, lr)?;
        } else {
            let tape = Tape::new();
            let tracked = theta.track(&tape);
            let l = loss(&tracked)?;
            ensure_finite(l.item(), "inner", step)?;
            trace.push(l.item());
            let g = tracked.grads_of(&l, false)?;
            theta = sgd_step(&theta, &g, lr)?;
        }
    }
    Ok(Adapted { params: theta, trace })
}

/// Largest rate of the form `lr·2⁻ᵏ` (k < 40) whose single step does not
/// increase the loss.
pub fn backtrack_lr(params: &ParamSet, loss: &TaskLoss, lr: f64) -> CoreResult<f64> {
    let tape = Tape::new();
    let tracked = params.track(&tape);
    let l0 = loss(&tracked)?;
    ensure_finite(l0.item(), "backtrack", 0)?;
    let g = tracked.grads_of(&l0, false)?.detach();
    let mut rate = lr;
    for _ in 0..40 {
        let l = loss(&sgd_step(params, &g, rate)?)?.item();
        if l.is_finite() && l < l0.item() {
            return Ok(rate);
        }
        rate *= 0.5;
    }
    Ok(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaStats {
    /// Mean over tasks of the loss before each inner step and after the last.
    pub trace: Vec<f64>,
    /// Sum over tasks of the post-adaptation loss.
    pub outer: f64,
}

/// Gradient of `Σᵢ Lᵢ(adapt(θ, Lᵢ))` with respect to `θ`, summed over tasks
/// in order.
pub fn meta_gradient(params: &ParamSet, tasks: &[&TaskLoss], cfg: &MetaConfig) -> CoreResult<(ParamSet, MetaStats)> {
    if tasks.is_empty() {
        return Err(Error::Invalid("meta batch is empty".into()));
    }
    let k = cfg.inner_steps;
    let mut total: Option<ParamSet> = None;
    let mut trace = vec![0.0; k + 1];
    let mut outer = 0.0;
    for task in tasks {
        let (g, inner, l) = match cfg.mode {
            MetaMode::Exact => {
                let tape = Tape::new();
                let theta0 = params.track(&tape);
                let adapted = inner_adapt(&theta0, *task, k, cfg.inner_lr, true)?;
                let l = task(&adapted.params)?;
                (theta0.grads_of(&l, false)?, adapted.trace, l.item())
            }
            MetaMode::FirstOrder => {
                let adapted = inner_adapt(params, *task, k, cfg.inner_lr, false)?;
                let tape = Tape::new();
                let theta_k = adapted.params.track(&tape);
                let l = task(&theta_k)?;
                (theta_k.grads_of(&l, false)?, adapted.trace, l.item())
            }
        };
        ensure_finite(l, "outer", k)?;
        for (t, v) in trace.iter_mut().zip(inner.iter().chain([&l])) {
            *t += v / tasks.len() as f64;
        }
        outer += l;
        total = Some(match total {
            None => g.detach(),
            Some(acc) => acc.map(|name, a| a.add(g.get(name)?))?,
        });
    }
    Ok((total.expect("nonempty batch"), MetaStats { trace, outer }))
}

/// One outer update of `params` from the summed meta-gradient.
pub fn meta_step(params: &ParamSet, tasks: &[&TaskLoss], cfg: &MetaConfig, opt: &mut Adam) -> CoreResult<(ParamSet, MetaStats)> {
    let (g, stats) = meta_gradient(params, tasks, cfg)?;
    Ok((opt.step(params, &g)?, stats))
}

/// CSV log of meta-training: iteration, mean inner trace, outer loss.
pub struct MetaLog {
    out: BufWriter<File>,
}

impl MetaLog {
    pub fn create(path: &Path, inner_steps: usize) -> CoreResult<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(f);
        let cols: Vec<String> = (0..=inner_steps).map(|i| format!("inner_{i}")).collect();
        writeln!(out, "iteration,{},outer", cols.join(",")).map_err(|e| Error::io(path, e))?;
        Ok(MetaLog { out })
    }

    pub fn record(&mut self, iteration: usize, stats: &MetaStats) -> CoreResult<()> {
        let vals: Vec<String> = stats.trace.iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(self.out, "{iteration},{},{:.8e}", vals.join(","), stats.outer)
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(Path::new("meta log"), e))
    }
}

/// One image to reconstruct through the auxiliary-adapted generator.
#[derive(Clone, Copy)]
pub struct AdaptationTask<'a> {
    pub gen: &'a Generator,
    pub gen_params: &'a ParamSet,
    pub aux: &'a AuxNet,
    pub losses: &'a LossStack,
    pub image: &'a Tensor,
    pub pose: &'a Pose,
    pub latent: &'a Tensor,
    pub render: &'a RenderConfig,
    pub flip: bool,
}

impl AdaptationTask<'_> {
    pub fn adapted(&self, aux_params: &ParamSet) -> Result<AdaptedGenerator> {
        apply_offsets(self.gen_params, &self.aux.forward(aux_params, self.image, self.pose)?)
    }

    pub fn objective(&self, aux_params: &ParamSet) -> Result<(Tensor, RenderOutput)> {
        let a = self.adapted(aux_params)?;
        let target = RenderTarget {
            gen: self.gen,
            params: &a.params,
            offsets: a.offsets.as_ref(),
            latent: self.latent,
            cfg: self.render,
        };
        render_objective(self.losses, &target, self.image, self.pose, self.flip)
    }

    pub fn loss(&self, aux_params: &ParamSet) -> Result<Tensor> {
        Ok(self.objective(aux_params)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct TestTimeResult {
    pub output: RenderOutput,
    pub aux_params: ParamSet,
    pub adapted: AdaptedGenerator,
    /// Loss before each step, then after the last.
    pub trace: Vec<f64>,
}

/// Inner steps on one image only, then the final reconstruction.
pub fn test_time_adapt(task: &AdaptationTask, aux_params: &ParamSet, steps: usize, lr: f64) -> CoreResult<TestTimeResult> {
    let loss = |p: &ParamSet| task.loss(p);
    let adapted = inner_adapt(aux_params, &loss, steps, lr, false)?;
    let (l, output) = task.objective(&adapted.params)?;
    ensure_finite(l.item(), "adaptation", steps)?;
    let mut trace = adapted.trace;
    trace.push(l.item());
    Ok(TestTimeResult {
        output,
        adapted: task.adapted(&adapted.params)?,
        aux_params: adapted.params,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use metaux_tensor::nn::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spd(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let m = Tensor::randn(&[d, d], 1.0, rng);
        let mut a = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                a[i][j] = (0..d).map(|k| m.data()[k * d + i] * m.data()[k * d + j]).sum::<f64>() / d as f64;
            }
            a[i][i] += 0.5;
        }
        a
    }

    fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
    }

    fn one(name: &str, t: Tensor) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, t).unwrap();
        p
    }

    /// `½ (θ − c)ᵀ A (θ − c)` built from tensor ops.
    fn quadratic<'a>(a: &'a Tensor, c: &'a Tensor) -> impl Fn(&ParamSet) -> Result<Tensor> + 'a {
        move |p: &ParamSet| {
            let d = p.get("theta")?.sub(c)?;
            let n = d.numel();
            let ad = a.matmul(&d.reshape(&[n, 1])?)?.reshape(&[n])?;
            d.dot(&ad)?.scale(0.5)
        }
    }

    #[test]
    fn quadratic_family_matches_analytic_meta_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = 6;
        let alpha = 0.07;
        let a = spd(d, &mut rng);
        let at = Tensor::new(a.concat(), &[d, d]).unwrap();
        let theta = Tensor::randn(&[d], 1.0, &mut rng);
        let cs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[d], 1.0, &mut rng)).collect();
        let losses: Vec<_> = cs.iter().map(|c| quadratic(&at, c)).collect();
        let tasks: Vec<&TaskLoss> = losses.iter().map(|l| l as &TaskLoss).collect();
        let params = one("theta", theta.clone());

        let mut exact = vec![0.0; d];
        let mut first = vec![0.0; d];
        for c in &cs {
            let diff: Vec<f64> = theta.data().iter().zip(c.data()).map(|(t, c)| t - c).collect();
            let step = matvec(&a, &diff);
            let adapted: Vec<f64> = theta.data().iter().zip(&step).map(|(t, s)| t - alpha * s).collect();
            let r: Vec<f64> = adapted.iter().zip(c.data()).map(|(t, c)| t - c).collect();
            let ar = matvec(&a, &r);
            let aar = matvec(&a, &ar);
            for i in 0..d {
                first[i] += ar[i];
                exact[i] += ar[i] - alpha * aar[i];
            }
        }
        let mut cfg = MetaConfig { inner_steps: 1, inner_lr: alpha, ..MetaConfig::default() };
        let (g, _) = meta_gradient(&params, &tasks, &cfg).unwrap();
        for (x, y) in g.get("theta").unwrap().data().iter().zip(&exact) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
        cfg.mode = MetaMode::FirstOrder;
        let (gf, _) = meta_gradient(&params, &tasks, &cfg).unwrap();
        for i in 0..d {
            assert!((gf.get("theta").unwrap().data()[i] - first[i]).abs() < 1e-10);
            let gap = g.get("theta").unwrap().data()[i] - gf.get("theta").unwrap().data()[i];
            assert!((gap - (exact[i] - first[i])).abs() < 1e-10);
        }
    }

    fn toy_task(seed: u64) -> impl Fn(&ParamSet) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(&[4, 10], 0.5, &mut rng);
        let y = Tensor::randn(&[4], 1.0, &mut rng);
        move |p: &ParamSet| {
            let h = w.matmul(&p.get("theta")?.reshape(&[10, 1])?)?.reshape(&[4])?.tanh()?;
            h.sub(&y)?.square()?.sum()?.add(&p.get("theta")?.square()?.sum()?.scale(0.05)?)
        }
    }

    #[test]
    fn exact_meta_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = Tensor::randn(&[10], 1.0, &mut rng);
        let ls: Vec<_> = (0..3).map(|s| toy_task(10 + s)).collect();
        let tasks: Vec<&TaskLoss> = ls.iter().map(|l| l as &TaskLoss).collect();
        let cfg = MetaConfig { inner_steps: 3, inner_lr: 0.1, ..MetaConfig::default() };
        let (g, stats) = meta_gradient(&one("theta", theta.clone()), &tasks, &cfg).unwrap();
        let objective = |t: &Tensor| -> Result<f64> {
            let mut s = 0.0;
            for task in &tasks {
                let a = inner_adapt(&one("theta", t.clone()), *task, 3, 0.1, false).map_err(|e| metaux_tensor::TensorError::Invalid { op: "fd", msg: e.to_string() })?;
                s += task(&a.params)?.item();
            }
            Ok(s)
        };
        assert!((objective(&theta).unwrap() - stats.outer).abs() < 1e-12);
        let n = metaux_tensor::check::numerical_grad(&theta, 1e-5, objective).unwrap();
        let e = metaux_tensor::check::rel_error(g.get("theta").unwrap(), &n);
        assert!(e < 1e-3, "{e:e}");
    }

    #[test]
    fn modes_coincide_without_inner_progress() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = one("theta", Tensor::randn(&[10], 1.0, &mut rng));
        let ls: Vec<_> = (0..2).map(|s| toy_task(20 + s)).collect();
        let tasks: Vec<&TaskLoss> = ls.iter().map(|l| l as &TaskLoss).collect();
        for (k, lr) in [(0, 0.1), (3, 0.0)] {
            let mut cfg = MetaConfig { inner_steps: k, inner_lr: lr, ..MetaConfig::default() };
            let (ge, se) = meta_gradient(&theta, &tasks, &cfg).unwrap();
            cfg.mode = MetaMode::FirstOrder;
            let (gf, sf) = meta_gradient(&theta, &tasks, &cfg).unwrap();
            assert_eq!(ge.get("theta").unwrap().data(), gf.get("theta").unwrap().data());
            assert_eq!(se, sf);
        }
    }

    #[test]
    fn inner_adapt_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = one("theta", Tensor::randn(&[10], 1.0, &mut rng));
        let before = theta.clone();
        let task = toy_task(30);
        let a = inner_adapt(&theta, &task, 0, 0.1, false).unwrap();
        assert!(a.params.bit_eq(&theta) && a.trace.is_empty());
        let a = inner_adapt(&theta, &task, 4, 0.0, false).unwrap();
        assert_eq!(a.params.get("theta").unwrap().data(), theta.get("theta").unwrap().data());
        assert_eq!(a.trace.len(), 4);
        assert!(a.trace.iter().all(|&l| l == a.trace[0]));
        let moved = inner_adapt(&theta, &task, 4, 0.1, false).unwrap();
        assert!(!moved.params.bit_eq(&theta));
        assert!(theta.bit_eq(&before));
        let nan = |_: &ParamSet| -> Result<Tensor> { Ok(Tensor::scalar(f64::NAN)) };
        match inner_adapt(&theta, &nan, 2, 0.1, false) {
            Err(Error::Diverged { step: 0, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn backtracked_step_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = one("theta", Tensor::randn(&[10], 1.0, &mut rng));
        let task = toy_task(40);
        let lr = backtrack_lr(&theta, &task, 10.0).unwrap();
        assert!(lr > 0.0);
        let a = inner_adapt(&theta, &task, 1, lr, false).unwrap();
        assert!(task(&a.params).unwrap().item() < a.trace[0]);
    }

    #[test]
    fn meta_step_reduces_post_adaptation_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut theta = one("theta", Tensor::randn(&[10], 1.0, &mut rng));
        let ls: Vec<_> = (0..3).map(|s| toy_task(50 + s)).collect();
        let tasks: Vec<&TaskLoss> = ls.iter().map(|l| l as &TaskLoss).collect();
        let cfg = MetaConfig { inner_steps: 2, inner_lr: 0.05, ..MetaConfig::default() };
        let mut opt = Adam::new(AdamConfig::with_lr(0.05));
        let mut outer = Vec::new();
        for _ in 0..60 {
            let (next, stats) = meta_step(&theta, &tasks, &cfg, &mut opt).unwrap();
            theta = next;
            outer.push(stats.outer);
        }
        assert!(outer[59] < outer[0]);
        assert!(meta_gradient(&theta, &[], &cfg).is_err());
    }

    #[test]
    fn meta_log_has_one_column_per_trace_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.csv");
        let mut log = MetaLog::create(&path, 2).unwrap();
        log.record(0, &MetaStats { trace: vec![1.0, 0.5, 0.25], outer: 0.75 }).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,inner_0,inner_1,inner_2,outer");
        assert_eq!(lines[1].split(',').count(), 5);
    }
}
