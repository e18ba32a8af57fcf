//! Two-stage adversarial training.
//!
//! Stage 1 trains `g_x` (spanned RGB → HSI) and `g_h` (HSI → RGB) with
//! discriminators `d_x` (HSI domain) and `d_y` (RGB domain). Stage 2 trains
//! `g_z`, which maps the HSI estimate concatenated with a color stack of the
//! dark image to an enhanced RGB image, against the conditional
//! discriminator `d_z`.
//!
//! Every step updates the discriminators on detached fakes first and then the
//! generators on the full objective.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::colorspace::{build_color_stack, SpanScheme, HSI_BANDS, STACK_BANDS};
use crate::error::{Error, Result};
use crate::image::MultiBandImage;
use crate::losses::{
    discriminator_loss, generator_adversarial_loss, stage2_loss, total_stage1_loss, BandMatrixMap, ImageMap,
    Stage1Inputs, Stage1Models,
};
use crate::networks::{build, images_tensor, Checkpoint, NetworkSpec, NetworkState};
use crate::optim::Adam;
use crate::spectral::profile_of_planes;

use super::config::{Ablation, TrainConfig};
use super::data::{AugmentPlan, Sample};

pub const NETWORK_NAMES: [&str; 6] = ["g_x", "g_h", "d_x", "d_y", "g_z", "d_z"];

pub const HISTORY_HEADER: &str = "step,d_x,d_y,g_adv,cyc,idt,spec,total";

/// Bands of the stage-2 conditioning input for an ablation setting.
pub fn stage2_in_bands(ablation: Ablation) -> usize {
    HSI_BANDS + if ablation.color_stack_enabled() { STACK_BANDS } else { 3 }
}

/// The six networks of a cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub gx: NetworkState,
    pub gh: NetworkState,
    pub dx: NetworkState,
    pub dy: NetworkState,
    pub gz: NetworkState,
    pub dz: NetworkState,
}

impl Models {
    /// Fresh networks; seeds are drawn in [`NETWORK_NAMES`] order from the
    /// config seed.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut seed = || rng.random::<u64>();
        let (d, w) = (cfg.depth, cfg.base_width);
        let (dd, dw) = (cfg.disc_depth, cfg.disc_width);
        let zin = stage2_in_bands(cfg.ablation);
        Ok(Self {
            gx: build(NetworkSpec::unet(HSI_BANDS, HSI_BANDS, d, w, seed()))?,
            gh: build(NetworkSpec::unet(HSI_BANDS, 3, d, w, seed()))?,
            dx: build(NetworkSpec::patchgan(HSI_BANDS, dd, dw, seed()))?,
            dy: build(NetworkSpec::patchgan(3, dd, dw, seed()))?,
            gz: build(NetworkSpec::unet(zin, 3, d, w, seed()))?,
            dz: build(NetworkSpec::patchgan(zin + 3, dd, dw, seed()))?,
        })
    }

    fn named(&self) -> [(&'static str, &NetworkState); 6] {
        [
            ("g_x", &self.gx),
            ("g_h", &self.gh),
            ("d_x", &self.dx),
            ("d_y", &self.dy),
            ("g_z", &self.gz),
            ("d_z", &self.dz),
        ]
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            metadata: config_metadata(cfg),
            networks: self.named().iter().map(|(n, s)| (n.to_string(), (*s).clone())).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ckpt.network(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint has no network {name:?}")))
        };
        Ok(Self {
            gx: get("g_x")?,
            gh: get("g_h")?,
            dx: get("d_x")?,
            dy: get("d_y")?,
            gz: get("g_z")?,
            dz: get("d_z")?,
        })
    }

    /// Checks that these networks fit `cfg`'s band layout and image size.
    pub fn check_compatible(&self, cfg: &TrainConfig) -> Result<()> {
        let zin = stage2_in_bands(cfg.ablation);
        let want = [
            ("g_x", HSI_BANDS, HSI_BANDS),
            ("g_h", HSI_BANDS, 3),
            ("d_x", HSI_BANDS, 1),
            ("d_y", 3, 1),
            ("g_z", zin, 3),
            ("d_z", zin + 3, 1),
        ];
        for ((name, state), (_, i, o)) in self.named().iter().zip(want) {
            let s = state.spec();
            if s.in_bands != i || s.out_bands != o {
                return Err(Error::Config(format!(
                    "network {name} maps {}→{} bands, configuration needs {i}→{o}",
                    s.in_bands, s.out_bands
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, s)| s.all_finite())
    }
}

/// Config as checkpoint metadata, one entry per key.
pub fn config_metadata(cfg: &TrainConfig) -> Vec<(String, String)> {
    cfg.to_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Rebuilds the config stored by [`Models::to_checkpoint`].
pub fn config_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in &ckpt.metadata {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

/// Loss values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HistoryRow {
    pub step: usize,
    pub d_x: f64,
    pub d_y: f64,
    pub g_adv: f64,
    pub cyc: f64,
    pub idt: f64,
    pub spec: f64,
    pub total: f64,
}

/// `step,d_x,d_y,g_adv,cyc,idt,spec,total`. Stage-2 rows carry the `d_z`
/// loss in `d_x`, the adversarial term in `g_adv` and zeros in the stage-1
/// columns.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.d_x, r.d_y, r.g_adv, r.cyc, r.idt, r.spec, r.total
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub models: Models,
    pub history: Vec<HistoryRow>,
}

impl TrainOutput {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        self.models.to_checkpoint(cfg)
    }

    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

/// Trains freshly initialized networks.
pub fn train(cfg: &TrainConfig, samples: &[Sample]) -> Result<TrainOutput> {
    train_from(cfg, samples, Models::init(cfg)?)
}

/// Trains starting from `models`, e.g. a stage-1 checkpoint for `enhance`.
pub fn train_from(cfg: &TrainConfig, samples: &[Sample], models: Models) -> Result<TrainOutput> {
    cfg.validate()?;
    models.check_compatible(cfg)?;
    let (s1, s2) = cfg.stage_steps();
    check_samples(cfg, samples, s1 > 0)?;
    let mut trainer = Trainer::new(cfg, samples, models);
    for _ in 0..s1 {
        trainer.stage1_step()?;
    }
    for _ in 0..s2 {
        trainer.stage2_step()?;
    }
    Ok(TrainOutput {
        models: trainer.models,
        history: trainer.history,
    })
}

fn check_samples(cfg: &TrainConfig, samples: &[Sample], need_hsi: bool) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Ingestion("training set is empty".into()));
    }
    for s in samples {
        let (h, w) = (s.dark.height(), s.dark.width());
        let fits = if cfg.augment {
            h >= cfg.image_size && w >= cfg.image_size
        } else {
            h == cfg.image_size && w == cfg.image_size
        };
        if !fits {
            return Err(Error::Config(format!(
                "sample {} is {h}x{w}, image_size is {}{}",
                s.id,
                cfg.image_size,
                if cfg.augment { "" } else { " (enable augment to crop)" }
            )));
        }
        if need_hsi && s.hsi.is_none() {
            return Err(Error::Ingestion(format!("sample {} has no HSI for stage 1", s.id)));
        }
    }
    Ok(())
}

/// One batch member after augmentation.
struct View {
    dark: MultiBandImage,
    normal: MultiBandImage,
    hsi: Option<MultiBandImage>,
    stack: MultiBandImage,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    samples: &'a [Sample],
    stacks: Vec<MultiBandImage>,
    models: Models,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    history: Vec<HistoryRow>,
    opt: [Option<Adam>; 6],
}

/// The non-HSI part of the stage-2 input: the color stack, or plain RGB
/// when the stack is ablated.
pub fn stage2_stack(ablation: Ablation, dark: &MultiBandImage) -> Result<MultiBandImage> {
    if ablation.color_stack_enabled() {
        Ok(build_color_stack(dark)?.into_image())
    } else {
        Ok(dark.clone())
    }
}

fn span_tensor(t: &Tensor, scheme: SpanScheme) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(t.clone());
    let y = BandMatrixMap::span(scheme).apply(&mut g, x)?;
    Ok(g.value(y).clone())
}

fn mean_cumulative_profile(t: &Tensor) -> Result<Vec<f64>> {
    let [n, c, h, w] = *t.shape() else {
        return Err(Error::contract("expected a 4-D tensor"));
    };
    let data = t.as_slice().expect("standard layout");
    let per = c * h * w;
    let mut acc: Vec<f64> = Vec::new();
    for i in 0..n {
        let p = profile_of_planes(&data[i * per..(i + 1) * per], c, h, w, true)?;
        if acc.is_empty() {
            acc = vec![0.0; p.cumulative.len()];
        }
        for (a, v) in acc.iter_mut().zip(&p.cumulative) {
            *a += v / n as f64;
        }
    }
    Ok(acc)
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig, samples: &'a [Sample], models: Models) -> Self {
        let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
        let rng = ChaCha8Rng::seed_from_u64(seeds.random());
        Self {
            cfg,
            samples,
            stacks: Vec::new(),
            models,
            rng,
            order: Vec::new(),
            cursor: 0,
            step: 0,
            history: Vec::new(),
            opt: Default::default(),
        }
    }

    fn adam(&mut self, slot: usize) -> &mut Adam {
        let (cfg, models) = (self.cfg, &self.models);
        self.opt[slot].get_or_insert_with(|| {
            let state = models.named()[slot].1;
            Adam::new(state, cfg.learning_rate, cfg.beta1, cfg.beta2)
        })
    }

    /// Next batch from a reshuffled epoch order, augmented when enabled.
    fn next_batch(&mut self) -> Result<Vec<View>> {
        if self.stacks.is_empty() {
            self.stacks = self
                .samples
                .iter()
                .map(|s| stage2_stack(self.cfg.ablation, &s.dark))
                .collect::<Result<_>>()?;
        }
        let mut views = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            if self.cursor == self.order.len() {
                self.order = (0..self.samples.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let idx = self.order[self.cursor];
            self.cursor += 1;
            let s = &self.samples[idx];
            let stack = &self.stacks[idx];
            let view = if self.cfg.augment {
                let n = self.cfg.image_size;
                let plan = AugmentPlan::draw(s.dark.height(), s.dark.width(), n, n, &mut self.rng)?;
                View {
                    dark: plan.apply(&s.dark)?,
                    normal: plan.apply(&s.normal)?,
                    hsi: s.hsi.as_ref().map(|h| plan.apply(h)).transpose()?,
                    stack: plan.apply(stack)?,
                }
            } else {
                View {
                    dark: s.dark.clone(),
                    normal: s.normal.clone(),
                    hsi: s.hsi.clone(),
                    stack: stack.clone(),
                }
            };
            views.push(view);
        }
        Ok(views)
    }

    fn finish_step(&mut self, row: HistoryRow) -> Result<()> {
        let values = [row.d_x, row.d_y, row.g_adv, row.cyc, row.idt, row.spec, row.total];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: row.step,
                what: "non-finite loss".into(),
            });
        }
        if !self.models.all_finite() {
            return Err(Error::Divergence {
                step: row.step,
                what: "non-finite parameter".into(),
            });
        }
        if row.step % 50 == 0 {
            log::info!("step {} total {:.5}", row.step, row.total);
        }
        self.history.push(row);
        Ok(())
    }

    fn disc_update(&mut self, slot: usize, real: &Tensor, fake: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let state = self.models.named()[slot].1;
        let net = state.bind(&mut g);
        let r = g.leaf(real.clone());
        let f = g.leaf(fake.clone());
        let rs = net.forward(&mut g, r)?;
        let fs = net.forward(&mut g, f)?;
        let loss = discriminator_loss(&mut g, rs, fs);
        let grads = net.gradients(&g.backward(loss));
        let value = g.scalar(loss);
        self.adam(slot);
        let opt = self.opt[slot].as_mut().expect("initialized above");
        opt.step(models_mut(&mut self.models, slot), &grads);
        Ok(value)
    }

    fn stage1_step(&mut self) -> Result<()> {
        let views = self.next_batch()?;
        let dark = images_tensor(&views.iter().map(|v| &v.dark).collect::<Vec<_>>())?;
        let normal = images_tensor(&views.iter().map(|v| &v.normal).collect::<Vec<_>>())?;
        let hsi_imgs: Vec<&MultiBandImage> = views.iter().map(|v| v.hsi.as_ref().expect("checked")).collect();
        let hsi = images_tensor(&hsi_imgs)?;
        let scheme = self.cfg.span_scheme;
        let weights = self.cfg.effective_weights();

        let fake_hsi = self.models.gx.run(&span_tensor(&dark, scheme)?)?;
        let fake_rgb = self.models.gh.run(&hsi)?;
        let d_x = self.disc_update(2, &hsi, &fake_hsi)?;
        let d_y = self.disc_update(3, &normal, &fake_rgb)?;

        // Still computed when λ_spec is 0 so the history keeps the term.
        let reference = mean_cumulative_profile(&normal)?;
        let mut g = Graph::new();
        let (gx, gh) = (self.models.gx.bind(&mut g), self.models.gh.bind(&mut g));
        let (dx, dy) = (self.models.dx.bind(&mut g), self.models.dy.bind(&mut g));
        let inputs = Stage1Inputs {
            dark: g.leaf(dark),
            normal: g.leaf(normal),
            hsi: g.leaf(hsi),
            reference_profile: reference,
        };
        let terms = total_stage1_loss(
            &mut g,
            &inputs,
            &Stage1Models {
                gx: &gx,
                gh: &gh,
                dx: &dx,
                dy: &dy,
                scheme,
            },
            &weights,
        )?;
        let grads = g.backward(terms.total);
        let (grad_x, grad_h) = (gx.gradients(&grads), gh.gradients(&grads));
        let v = terms.values(&g);
        drop((gx, gh, dx, dy));
        self.adam(0);
        self.adam(1);
        let [o0, o1, ..] = &mut self.opt;
        o0.as_mut().expect("initialized").step(&mut self.models.gx, &grad_x);
        o1.as_mut().expect("initialized").step(&mut self.models.gh, &grad_h);

        self.step += 1;
        self.finish_step(HistoryRow {
            step: self.step,
            d_x,
            d_y,
            g_adv: v.g_adv,
            cyc: v.cyc,
            idt: v.idt,
            spec: v.spec,
            total: v.total,
        })
    }

    fn stage2_step(&mut self) -> Result<()> {
        let views = self.next_batch()?;
        let dark = images_tensor(&views.iter().map(|v| &v.dark).collect::<Vec<_>>())?;
        let normal = images_tensor(&views.iter().map(|v| &v.normal).collect::<Vec<_>>())?;
        let stack = images_tensor(&views.iter().map(|v| &v.stack).collect::<Vec<_>>())?;
        let scheme = self.cfg.span_scheme;
        let weights = self.cfg.effective_weights();
        let joint = self.cfg.joint_finetune;

        // Detached conditioning input and prediction for the discriminator.
        let x31 = span_tensor(&dark, scheme)?;
        let cond = {
            let mut g = Graph::new();
            let h = g.leaf(self.models.gx.run(&x31)?);
            let s = g.leaf(stack.clone());
            let c = g.concat(&[h, s])?;
            g.value(c).clone()
        };
        let pred = self.models.gz.run(&cond)?;
        let d_z = {
            let mut g = Graph::new();
            let c = g.leaf(cond.clone());
            let y = g.leaf(normal.clone());
            let p = g.leaf(pred);
            let real = g.concat(&[c, y])?;
            let fake = g.concat(&[c, p])?;
            let (real, fake) = (g.value(real).clone(), g.value(fake).clone());
            self.disc_update(5, &real, &fake)?
        };

        let mut g = Graph::new();
        let gz = self.models.gz.bind(&mut g);
        let dz = self.models.dz.bind(&mut g);
        let gx = joint.then(|| self.models.gx.bind(&mut g));
        let c = match &gx {
            Some(gx) => {
                let x = g.leaf(x31);
                let h = gx.forward(&mut g, x)?;
                let s = g.leaf(stack);
                g.concat(&[h, s])?
            }
            None => g.leaf(cond),
        };
        let target = g.leaf(normal);
        let p = gz.forward(&mut g, c)?;
        let joined = g.concat(&[c, p])?;
        let scores = dz.forward(&mut g, joined)?;
        let total = stage2_loss(&mut g, p, target, scores, &weights)?;
        let grads = g.backward(total);
        let grad_z = gz.gradients(&grads);
        let grad_x = gx.as_ref().map(|n| n.gradients(&grads));
        let adv = adversarial_value(&mut g, scores);
        let total_v = g.scalar(total);
        drop((gz, dz, gx));
        self.adam(4);
        self.opt[4].as_mut().expect("initialized").step(&mut self.models.gz, &grad_z);
        if let Some(grad_x) = grad_x {
            self.adam(0);
            self.opt[0].as_mut().expect("initialized").step(&mut self.models.gx, &grad_x);
        }

        self.step += 1;
        self.finish_step(HistoryRow {
            step: self.step,
            d_x: d_z,
            g_adv: adv,
            total: total_v,
            ..Default::default()
        })
    }
}

fn adversarial_value(g: &mut Graph, scores: Var) -> f64 {
    let v = generator_adversarial_loss(g, scores);
    g.scalar(v)
}

fn models_mut(m: &mut Models, slot: usize) -> &mut NetworkState {
    match slot {
        0 => &mut m.gx,
        1 => &mut m.gh,
        2 => &mut m.dx,
        3 => &mut m.dy,
        4 => &mut m.gz,
        _ => &mut m.dz,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::Stage;
    use crate::pipeline::data::synth_dataset;

    fn tiny(stage: Stage, steps: usize) -> TrainConfig {
        TrainConfig {
            stage,
            steps,
            image_size: 16,
            depth: 2,
            base_width: 2,
            disc_depth: 2,
            disc_width: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_return_initialization() {
        let cfg = tiny(Stage::Cascade, 0);
        let data = synth_dataset(2, 16, 1).unwrap();
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.models, Models::init(&cfg).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn cascade_records_every_step() {
        let cfg = TrainConfig {
            stage1_steps: Some(2),
            ..tiny(Stage::Cascade, 5)
        };
        let data = synth_dataset(2, 16, 1).unwrap();
        let out = train(&cfg, &data).unwrap();
        let steps: Vec<usize> = out.history.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 2, 3, 4, 5]);
        assert!(out.history[0].cyc > 0.0);
        assert_eq!(out.history[3].cyc, 0.0);
        assert_ne!(out.models.gz, Models::init(&cfg).unwrap().gz);
        // stage-1 generators stay frozen during stage 2
        let s1 = train(&TrainConfig { steps: 2, ..cfg.clone() }, &data).unwrap();
        assert_eq!(out.models.gx, s1.models.gx);
    }

    #[test]
    fn stage_one_needs_hsi() {
        let cfg = tiny(Stage::HsiCycle, 1);
        let mut data = synth_dataset(1, 16, 1).unwrap();
        data[0].hsi = None;
        assert!(matches!(train(&cfg, &data), Err(Error::Ingestion(_))));
    }

    #[test]
    fn checkpoint_round_trips_config() {
        let cfg = tiny(Stage::Enhance, 0);
        let ckpt = Models::init(&cfg).unwrap().to_checkpoint(&cfg);
        assert_eq!(config_from_checkpoint(&ckpt).unwrap(), cfg);
        assert_eq!(Models::from_checkpoint(&ckpt).unwrap(), Models::init(&cfg).unwrap());
    }

    #[test]
    fn spectral_toggle_changes_stage_one() {
        let data = synth_dataset(2, 16, 4).unwrap();
        let run = |ablation| {
            let cfg = TrainConfig {
                ablation,
                ..tiny(Stage::HsiCycle, 3)
            };
            train(&cfg, &data).unwrap()
        };
        let (m1, m2) = (run(Ablation::Model1), run(Ablation::Model2));
        assert_ne!(m1.models.gx, m2.models.gx);
        let rest = |r: &HistoryRow| r.total - (r.g_adv + 10.0 * r.cyc + 5.0 * r.idt);
        for r in &m1.history {
            assert!(r.spec > 0.0 && rest(r).abs() < 1e-9);
        }
        for r in &m2.history {
            assert!((rest(r) - r.spec).abs() < 1e-9);
        }
    }

    #[test]
    fn stage2_band_counts() {
        assert_eq!(stage2_in_bands(Ablation::Full), 43);
        assert_eq!(stage2_in_bands(Ablation::Model1), 34);
    }
}
