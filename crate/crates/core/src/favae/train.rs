use super::losses::{gan_losses, vf_alignment_loss, BranchKind, LossBreakdown, LossWeights};
use super::{Branch, FaVaeModel, TrainConfig, DISC_TAG, GEN_TAG};
use crate::error::{bail, Error, Result};
use crate::features::{perceptual_proxy, FeatureProvider, RandomFeatureStack};
use crate::image::ImageTensor;
use crate::nn::{kl_diag_gaussian, reparameterize, AdamConfig, AdamState, Bound, Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::vec::Vec;

/// Hooks called by [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _losses: &[LossBreakdown]) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` steps and after the last step.
    fn on_checkpoint(&mut self, _step: usize, _model: &FaVaeModel) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Gradient filter for a step; used to check that the branches do not
/// share parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMask {
    Keep,
    /// Replace every gradient of this branch (generator and discriminator) by zero.
    Zero(BranchKind),
}

#[derive(Clone, Debug)]
struct BranchState {
    adam_g: AdamState<f32>,
    adam_d: AdamState<f32>,
    rng: Rng,
}

/// Step-by-step trainer. Every branch owns its optimizer state and noise
/// stream; branches only share the batch order.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: FaVaeModel,
    cfg: TrainConfig,
    inputs: Vec<Vec<Tensor<f32>>>,
    vf_targets: Option<Vec<Tensor<f32>>>,
    states: Vec<BranchState>,
    batch_rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    /// `features` supplies alignment targets (its last stage per image);
    /// `None` falls back to the model's frozen stack.
    pub fn new(model: FaVaeModel, dataset: &[ImageTensor], cfg: TrainConfig, features: Option<&dyn FeatureProvider>) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            bail!(Data, "training set is empty");
        }
        let per_image: Vec<Vec<Tensor<f32>>> = dataset.iter().map(|x| model.branch_inputs(x)).collect::<Result<_>>()?;
        let inputs = (0..model.branches.len()).map(|k| per_image.iter().map(|v| v[k].clone()).collect()).collect();
        let needs_vf = model.branches.iter().any(|b| b.config.lambda_vf > 0.0);
        let vf_targets = if needs_vf {
            let stack: &RandomFeatureStack = &model.features;
            let provider: &dyn FeatureProvider = features.unwrap_or(stack);
            Some(vf_targets(&model, dataset, provider)?)
        } else {
            None
        };
        let mut root = Rng::new(cfg.seed);
        let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
        let states = model
            .branches
            .iter()
            .enumerate()
            .map(|(k, b)| BranchState {
                adam_g: AdamState::new(&b.params, adam),
                adam_d: AdamState::new(&b.disc_params, adam),
                rng: root.fork(100 + k as u64),
            })
            .collect();
        let mut batch_rng = root.fork(1);
        let order = batch_rng.permutation(dataset.len());
        Ok(Self { model, cfg, inputs, vf_targets, states, batch_rng, order, cursor: 0, step: 0 })
    }

    pub fn model(&self) -> &FaVaeModel {
        &self.model
    }

    pub fn into_model(self) -> FaVaeModel {
        self.model
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.order.len();
        let mut idx = Vec::with_capacity(self.cfg.batch);
        while idx.len() < self.cfg.batch.min(n) {
            if self.cursor == n {
                self.order = self.batch_rng.permutation(n);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        idx
    }

    pub fn step(&mut self) -> Result<Vec<LossBreakdown>> {
        self.step_masked(GradMask::Keep)
    }

    /// One optimizer step on every branch.
    pub fn step_masked(&mut self, mask: GradMask) -> Result<Vec<LossBreakdown>> {
        let batch = self.next_batch();
        let step = self.step;
        let gan_on = self.cfg.gan_active(step);
        let targets = match &self.vf_targets {
            Some(t) => Some(Tensor::stack(&batch.iter().map(|&i| t[i].clone()).collect::<Vec<_>>())?),
            None => None,
        };
        let mut out = Vec::with_capacity(self.model.branches.len());
        for k in 0..self.model.branches.len() {
            let x = Tensor::stack(&batch.iter().map(|&i| self.inputs[k][i].clone()).collect::<Vec<_>>())?;
            let branch = &mut self.model.branches[k];
            let state = &mut self.states[k];
            let zero = mask == GradMask::Zero(branch.kind);
            let r = branch_step(branch, state, &self.model.features, &self.model.config.vf, x, targets.as_ref(), step, gan_on, zero)?;
            out.push(r);
        }
        self.step += 1;
        Ok(out)
    }
}

fn vf_targets(model: &FaVaeModel, dataset: &[ImageTensor], provider: &dyn FeatureProvider) -> Result<Vec<Tensor<f32>>> {
    let fc = model.config.vf.feature_channels;
    dataset
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let stages = provider.stages(x, i)?;
            let Some(last) = stages.last() else {
                bail!(Data, "feature provider returned no stages for image {}", i);
            };
            if last.rank() != 3 || last.shape()[0] != fc {
                bail!(Data, "alignment features must be ({}, h, w), got {:?} for image {}", fc, last.shape(), i);
            }
            let (h, w) = model.latent_grid(x.height(), x.width());
            let s = last.shape();
            Ok(last.clone().reshape(&[1, s[0], s[1], s[2]])?.resize_nearest(h, w).index0(0))
        })
        .collect()
}

struct Terms {
    total: NodeId,
    rec: NodeId,
    kl: NodeId,
    vf: Option<NodeId>,
    lpips: Option<NodeId>,
    gan: Option<(NodeId, NodeId)>,
}

#[allow(clippy::too_many_arguments)]
fn branch_step(
    branch: &mut Branch,
    state: &mut BranchState,
    stack: &RandomFeatureStack,
    vf_cfg: &super::VfConfig,
    x: Tensor<f32>,
    targets: Option<&Tensor<f32>>,
    step: usize,
    gan_on: bool,
    zero: bool,
) -> Result<LossBreakdown> {
    let c = &branch.config;
    let weights = LossWeights {
        beta: c.beta,
        vf: if branch.kind == BranchKind::High { 0.0 } else { c.lambda_vf },
        gan: if gan_on { c.lambda_gan } else { 0.0 },
        lpips: if branch.kind == BranchKind::High { 0.0 } else { c.lambda_lpips },
    };
    let mut g = Graph::new();
    let (gen_grads, disc_grads, terms_vals) = {
        let p = Bound::trainable(&branch.params, GEN_TAG);
        let pd = Bound::trainable(&branch.disc_params, DISC_TAG);
        let xi = g.input(x);
        let mut lat = branch.encode(&mut g, &p, xi)?;
        let z = reparameterize(&mut g, &mut lat, &mut state.rng)?;
        let y = branch.decode(&mut g, &p, z)?;
        let t = loss_terms(&mut g, branch, &p, &pd, stack, vf_cfg, &mut state.rng, &lat, z, xi, y, targets, &weights)?;
        let total = g.scalar(t.total);
        if !total.is_finite() {
            return Err(Error::NonFinite { step, what: alloc::format!("{} branch total loss", branch.kind.name()) });
        }
        let mut gg = g.backward(t.total).for_store(GEN_TAG, &branch.params);
        let mut dg = match t.gan {
            Some((_, d)) => Some(g.backward(d).for_store(DISC_TAG, &branch.disc_params)),
            None => None,
        };
        if zero {
            gg.iter_mut().for_each(|t| *t = Tensor::zeros(t.shape()));
            if let Some(d) = dg.as_mut() {
                d.iter_mut().for_each(|t| *t = Tensor::zeros(t.shape()));
            }
        }
        let val = |n: Option<NodeId>| n.map_or(0.0, |n| g.scalar(n) as f64);
        let vals = LossBreakdown {
            step,
            branch: branch.kind,
            total: total as f64,
            rec: g.scalar(t.rec) as f64,
            kl: g.scalar(t.kl) as f64,
            vf: val(t.vf),
            gan_g: val(t.gan.map(|p| p.0)),
            gan_d: val(t.gan.map(|p| p.1)),
            lpips_proxy: val(t.lpips),
            weights,
        };
        (gg, dg, vals)
    };
    drop(g);
    state.adam_g.step(&mut branch.params, &gen_grads)?;
    if let Some(dg) = disc_grads {
        state.adam_d.step(&mut branch.disc_params, &dg)?;
    }
    Ok(terms_vals)
}

#[allow(clippy::too_many_arguments)]
fn loss_terms(
    g: &mut Graph<f32>,
    branch: &Branch,
    p: &Bound<'_, f32>,
    pd: &Bound<'_, f32>,
    stack: &RandomFeatureStack,
    vf_cfg: &super::VfConfig,
    rng: &mut Rng,
    lat: &crate::nn::DiagGaussianLatent<f32>,
    z: NodeId,
    x: NodeId,
    y: NodeId,
    targets: Option<&Tensor<f32>>,
    w: &LossWeights,
) -> Result<Terms> {
    let (rec, ll_pair) = match branch.kind {
        BranchKind::Low => (g.mse(x, y)?, Some((x, y))),
        BranchKind::High => (g.l1(x, y)?, None),
        BranchKind::Coupled => {
            let cin = g.shape(x)[1];
            let c = cin / 4;
            let (xl, yl) = (g.slice_channels(x, 0, c)?, g.slice_channels(y, 0, c)?);
            let (xh, yh) = (g.slice_channels(x, c, cin - c)?, g.slice_channels(y, c, cin - c)?);
            let a = g.mse(xl, yl)?;
            let b = g.l1(xh, yh)?;
            (g.add(a, b)?, Some((xl, yl)))
        }
    };
    let kl = kl_diag_gaussian(g, lat)?;
    let mut total = g.add_scalar(rec, 0.0);
    let bk = g.scale(kl, w.beta);
    total = g.add(total, bk)?;
    let mut vf = None;
    if w.vf > 0.0 {
        let Some(t) = targets else {
            bail!(Config, "alignment weight is set but no feature targets were prepared");
        };
        let fi = g.input(t.clone());
        let Some(fp) = branch.project_features(g, p, fi)? else {
            bail!(Config, "{} branch has no feature projection", branch.kind.name());
        };
        let s = g.shape(z);
        let npos = s[2] * s[3];
        let positions = (npos > vf_cfg.max_positions).then(|| {
            let mut perm = rng.permutation(npos);
            perm.truncate(vf_cfg.max_positions);
            perm
        });
        let l = vf_alignment_loss(g, z, fp, vf_cfg.m1, vf_cfg.m2, vf_cfg.w_hyper, positions.as_deref())?;
        let s = g.scale(l, w.vf);
        total = g.add(total, s)?;
        vf = Some(l);
    }
    let mut lpips = None;
    if w.lpips > 0.0 {
        if let Some((a, b)) = ll_pair {
            let l = perceptual_proxy(g, stack, a, b)?;
            let s = g.scale(l, w.lpips);
            total = g.add(total, s)?;
            lpips = Some(l);
        }
    }
    let mut gan = None;
    if w.gan > 0.0 {
        let (gg, gd) = gan_losses(g, branch.discriminator(), pd, x, y)?;
        let s = g.scale(gg, w.gan);
        total = g.add(total, s)?;
        gan = Some((gg, gd));
    }
    Ok(Terms { total, rec, kl, vf, lpips, gan })
}

/// Train for `cfg.steps` steps; returns the model and the per-step log
/// (one entry per branch per step).
pub fn train(
    model: FaVaeModel,
    dataset: &[ImageTensor],
    cfg: TrainConfig,
    features: Option<&dyn FeatureProvider>,
    observer: &mut dyn TrainObserver,
) -> Result<(FaVaeModel, Vec<LossBreakdown>)> {
    let mut t = Trainer::new(model, dataset, cfg, features)?;
    let mut log = Vec::with_capacity(cfg.steps * t.model.branches.len());
    for s in 0..cfg.steps {
        let losses = t.step()?;
        observer.on_step(&losses)?;
        log.extend_from_slice(&losses);
        let last = s + 1 == cfg.steps;
        if cfg.checkpoint_every > 0 && ((s + 1) % cfg.checkpoint_every == 0 || last) {
            observer.on_checkpoint(s + 1, &t.model)?;
        }
    }
    Ok((t.into_model(), log))
}

#[cfg(test)]
mod tests {
    use super::super::{FaVaeConfig, FaVaeModel};
    use super::*;
    use crate::synth::texture_set;

    fn small() -> (FaVaeModel, Vec<ImageTensor>, TrainConfig) {
        let mut cfg = FaVaeConfig::tiny(3);
        cfg.low.base_width = 4;
        cfg.high.base_width = 4;
        let model = FaVaeModel::new(cfg, 7).unwrap();
        let data = texture_set(1, 6, 3, 16).unwrap();
        (model, data, TrainConfig { batch: 2, steps: 4, gan_warmup: 0.25, lr: 1e-3, seed: 3, checkpoint_every: 2 })
    }

    #[test]
    fn deterministic_and_additive() {
        let (m, d, c) = small();
        let (_, a) = train(m.clone(), &d, c, None, &mut NoObserver).unwrap();
        let (_, b) = train(m, &d, c, None, &mut NoObserver).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        for l in &a {
            assert!((l.total - l.recomputed_total()).abs() < 1e-6, "{l:?}");
        }
        // warm-up: step 0 has no adversarial terms, later steps do
        assert_eq!(a[0].weights.gan, 0.0);
        assert!(a[7].gan_d > 0.0);
        assert!(a.iter().filter(|l| l.branch == BranchKind::High).all(|l| l.vf == 0.0 && l.lpips_proxy == 0.0));
    }

    #[test]
    fn checkpoints_and_errors() {
        struct Count(Vec<usize>);
        impl TrainObserver for Count {
            fn on_checkpoint(&mut self, step: usize, _: &FaVaeModel) -> Result<()> {
                self.0.push(step);
                Ok(())
            }
        }
        let (m, d, c) = small();
        let mut obs = Count(Vec::new());
        train(m.clone(), &d, c, None, &mut obs).unwrap();
        assert_eq!(obs.0, alloc::vec![2, 4]);
        assert!(matches!(train(m.clone(), &[], c, None, &mut NoObserver), Err(Error::Data(_))));
        let mut broken = m;
        let id = broken.branches[0].params.find("dec.conv_out.bias").unwrap();
        broken.branches[0].params.get_mut(id).data_mut()[0] = f32::NAN;
        assert!(matches!(train(broken, &d, c, None, &mut NoObserver), Err(Error::NonFinite { step: 0, .. })));
    }

    #[test]
    fn branches_are_decoupled() {
        let (m, d, c) = small();
        let mut base = Trainer::new(m, &d, TrainConfig { gan_warmup: 0.0, ..c }, None).unwrap();
        base.step().unwrap();
        for kind in [BranchKind::High, BranchKind::Low] {
            let mut a = base.clone();
            let mut b = base.clone();
            a.step().unwrap();
            b.step_masked(GradMask::Zero(kind)).unwrap();
            for k in 0..2 {
                let same = a.model().branches[k].params.values() == b.model().branches[k].params.values()
                    && a.model().branches[k].disc_params.values() == b.model().branches[k].disc_params.values();
                let bits = |t: &Trainer| -> Vec<u32> { t.model().branches[k].params.values().iter().flat_map(|v| v.data().iter().map(|x| x.to_bits())).collect() };
                if a.model().branches[k].kind == kind {
                    assert!(!same);
                } else {
                    assert_eq!(bits(&a), bits(&b));
                    assert!(same);
                }
            }
        }
    }

    #[test]
    fn lambda_zero_is_plain_beta_vae() {
        let mut cfg = FaVaeConfig::tiny(1);
        cfg.low.lambda_vf = 0.0;
        cfg.low.lambda_gan = 0.0;
        cfg.low.lambda_lpips = 0.0;
        cfg.low.beta = 0.5;
        let model = FaVaeModel::new(cfg, 1).unwrap();
        let data = texture_set(2, 2, 1, 16).unwrap();
        let tc = TrainConfig { batch: 2, steps: 1, ..TrainConfig::default() };
        let mut t = Trainer::new(model.clone(), &data, tc, None).unwrap();
        let l = t.step().unwrap()[0];
        // independent recomputation with the same noise stream
        let x = Tensor::stack(&[model.branch_inputs(&data[t.order[0]]).unwrap()[0].clone(), model.branch_inputs(&data[t.order[1]]).unwrap()[0].clone()]).unwrap();
        let b = &model.branches[0];
        let mut g = Graph::new();
        let p = Bound::frozen(&b.params, 0);
        let xi = g.input(x.clone());
        let mut lat = b.encode(&mut g, &p, xi).unwrap();
        let mut rng = Rng::new(tc.seed).fork(100);
        let z = reparameterize(&mut g, &mut lat, &mut rng).unwrap();
        let y = b.decode(&mut g, &p, z).unwrap();
        let (xv, yv) = (x.data(), g.value(y).data());
        let rec = xv.iter().zip(yv).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / xv.len() as f64;
        let (mv, lv) = (g.value(lat.mean).data(), g.value(lat.logvar).data());
        let kl = 0.5 * mv.iter().zip(lv).map(|(&m, &lv)| (m as f64).powi(2) + (lv as f64).exp() - 1.0 - lv as f64).sum::<f64>() / 2.0;
        assert!((l.total - (rec + 0.5 * kl)).abs() < 1e-6, "{} vs {}", l.total, rec + 0.5 * kl);
        assert_eq!((l.vf, l.gan_g, l.lpips_proxy), (0.0, 0.0, 0.0));
    }
}
