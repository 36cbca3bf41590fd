//! Adversarial training: one discriminator step then one generator step per
//! batch, with the flow/heatmap predictor trained jointly through both its
//! MSE anchor and the gradients flowing back from the generator's use of
//! its output.

use crate::audio::QuantRanges;
use crate::autodiff::{Module, Param, Tape, Tensor};
use crate::data::{
    build_dataset, list_clip_ids, load_checkpoint, make_training_batch, read_clip_dir,
    save_checkpoint, CheckpointData, ClipData, RunConfig, TrainingSample, VideoClip,
};
use crate::error::{Error, Result};
use crate::gendisc::{CondKind, MultiScaleDiscriminator, SynthesisModel};
use crate::losses::{
    adversarial_loss, cam_loss, feature_matching_loss, perceptual_loss, predictor_mse_loss,
    recon_lower_half, total_generator_loss, Adam, GanSide, GeneratorLossParts,
    RandomConvExtractor,
};
use crate::man::ModalityBundle;
use crate::nn::init_rng;
use ndarray::{ArrayD, IxDyn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub struct StepLosses {
    pub step: u64,
    pub d_total: f64,
    pub g_total: f64,
    pub parts: Vec<(&'static str, f64)>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: SynthesisModel,
    pub disc: MultiScaleDiscriminator,
    pub perceptual: RandomConvExtractor,
    pub ranges: QuantRanges,
    pub step: u64,
    opt_gen: Adam,
    opt_disc: Adam,
    gen_param_names: Vec<String>,
    disc_param_names: Vec<String>,
    batch_rng: ChaCha8Rng,
}

fn trainable_named<M: Module>(m: &M) -> Vec<(String, Param)> {
    m.parameters()
        .into_iter()
        .filter(|(_, p)| p.is_trainable())
        .collect()
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(cfg.seed);
        let model = SynthesisModel::new(&cfg.generator_config(), &mut rng)?;
        let disc = MultiScaleDiscriminator::new(cfg.disc_scales, cfg.disc_base_channels, &mut rng);
        let perceptual = RandomConvExtractor::new(3, &mut rng);

        let gen_named = trainable_named(&model);
        let disc_named = trainable_named(&disc);
        let opt_gen = Adam::new(
            gen_named.iter().map(|(_, p)| p.clone()).collect(),
            cfg.lr,
        )
        .with_betas(cfg.beta1, cfg.beta2);
        let opt_disc = Adam::new(
            disc_named.iter().map(|(_, p)| p.clone()).collect(),
            cfg.lr,
        )
        .with_betas(cfg.beta1, cfg.beta2);

        let ranges = QuantRanges {
            pitch_lo: cfg.pitch_lo,
            pitch_hi: cfg.pitch_hi,
            ..QuantRanges::default()
        };
        let batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xBA7C4);
        Ok(Trainer {
            cfg,
            model,
            disc,
            perceptual,
            ranges,
            step: 0,
            opt_gen,
            opt_disc,
            gen_param_names: gen_named.into_iter().map(|(n, _)| n).collect(),
            disc_param_names: disc_named.into_iter().map(|(n, _)| n).collect(),
            batch_rng,
        })
    }

    /// Build the training set: synthetic clips, or a dataset directory laid
    /// out as documented in [`crate::data`].
    pub fn dataset(&mut self) -> Result<Vec<ClipData>> {
        if self.cfg.synthetic {
            let mut ranges = self.ranges;
            let data = build_dataset(
                self.cfg.seed,
                self.cfg.n_clips,
                self.cfg.clip_secs,
                self.cfg.frame_size,
                &mut ranges,
            )?;
            self.ranges = ranges;
            Ok(data)
        } else {
            let root = Path::new(self.cfg.dataset_dir.as_deref().unwrap());
            let ids = list_clip_ids(root)?;
            if ids.is_empty() {
                return Err(Error::Config(format!(
                    "no clips under {}",
                    root.display()
                )));
            }
            let mut max_e = 0.0f64;
            let mut raw = Vec::new();
            for id in &ids {
                let (frames, audio, truth) = read_clip_dir(root, id)?;
                max_e = max_e.max(crate::audio::max_frame_energy(&audio, truth.fps)?);
                raw.push((frames, audio, truth));
            }
            if max_e > 0.0 {
                self.ranges.energy_hi = max_e;
            }
            let mut out = Vec::new();
            for (frames, audio, truth) in raw {
                let n = frames.len();
                let mut flow_to_next = Vec::with_capacity(n.saturating_sub(1));
                for t in 0..n.saturating_sub(1) {
                    let a = crate::metrics::frame_to_gray01(&frames[t]);
                    let b = crate::metrics::frame_to_gray01(&frames[t + 1]);
                    flow_to_next.push(crate::predictors::flow_oracle(&a, &b, 4, 4)?.flow);
                }
                let feats = crate::audio::build_feature_frames(&audio, truth.fps, &self.ranges)?;
                let scene = crate::data::SyntheticScene {
                    seed: 0,
                    frame_size: frames[0].shape()[1],
                    face_rx: 0.0,
                    face_ry: 0.0,
                    eye_dx: 0.0,
                    eye_y: 0.0,
                    eye_half_width: 0.0,
                    eye_half_height: 0.0,
                    mouth_y: 0.0,
                    mouth_half_width: 0.0,
                    mouth_max_open: 0.0,
                    drift_amp: 0.0,
                    drift_period: 1.0,
                    skin: [0.0; 3],
                    feature: [0.0; 3],
                    background: [0.0; 3],
                    blink_schedule: truth.blink_schedule.clone(),
                    mouth_aperture: vec![],
                };
                let clip = VideoClip {
                    frames,
                    landmarks: truth.landmarks.clone(),
                    ear: truth.ear.clone(),
                    flow_to_next,
                    fps: truth.fps,
                };
                out.push(ClipData {
                    clip,
                    scene,
                    audio,
                    feats,
                });
            }
            Ok(out)
        }
    }

    fn sample_batch(&mut self, data: &[ClipData]) -> Result<Vec<TrainingSample>> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let ci = self.batch_rng.random_range(0..data.len());
            let usable = data[ci].clip.len().min(data[ci].feats.len());
            let t = self.batch_rng.random_range(0..usable);
            batch.push(make_training_batch(&data[ci], t)?);
        }
        Ok(batch)
    }

    /// One discriminator update then one generator update on `batch`.
    pub fn train_step(&mut self, batch: &[TrainingSample]) -> Result<StepLosses> {
        let b = batch.len();
        let fsz = self.cfg.frame_size;
        let stack4 = |get: &dyn Fn(&TrainingSample) -> &ArrayD<f64>| -> ArrayD<f64> {
            let first = get(&batch[0]);
            let mut shape = vec![b];
            shape.extend_from_slice(first.shape());
            let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
            for (i, s) in batch.iter().enumerate() {
                let src = get(s);
                let mut view = out.index_axis_mut(ndarray::Axis(0), i);
                view.assign(src);
            }
            out
        };
        let stack_vec = |get: &dyn Fn(&TrainingSample) -> &Vec<f64>| -> ArrayD<f64> {
            let n = get(&batch[0]).len();
            let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, n]));
            for (i, s) in batch.iter().enumerate() {
                for (j, &v) in get(s).iter().enumerate() {
                    out[[i, j]] = v;
                }
            }
            out
        };

        let context = stack4(&|s| &s.context);
        let target = stack4(&|s| &s.target);
        let identity = stack4(&|s| &s.identity);
        let gt_cond = match self.cfg.flow_or_heatmap {
            CondKind::OpticalFlow => stack4(&|s| &s.gt_flow),
            CondKind::KeypointHeatmap => stack4(&|s| &s.gt_heatmaps),
        };
        let mel_small = stack_vec(&|s| &s.feats.mel_small);
        let mel_large = stack_vec(&|s| &s.feats.mel_large);
        let pitch = stack_vec(&|s| &s.feats.pitch_onehot);
        let energy = stack_vec(&|s| &s.feats.energy_onehot);

        let w = self.cfg.loss_weights();
        let use_disc = w.w_gan > 0.0 || w.w_cam > 0.0 || w.w_fm > 0.0;

        // ---- generator-side forward (kept for the generator update) ----
        let tape_g = Tape::training();
        let frames_t = tape_g.constant(context);
        let mel_large_t = tape_g.constant(mel_large);
        let cond = self.model.predict_cond(&frames_t, &mel_large_t)?;
        let bundle = ModalityBundle {
            image: Some(tape_g.constant(identity)),
            flow_or_heatmap: Some(cond.clone()),
            mel: Some(mel_large_t.clone()),
            pitch: Some(tape_g.constant(pitch)),
            energy: Some(tape_g.constant(energy)),
            flow_mask: None,
        };
        let fake = self
            .model
            .generator
            .forward(&tape_g.constant(mel_small), &bundle)?;

        // ---- discriminator step on detached fakes ----
        let mut d_total = 0.0;
        let mut real_feature_values: Vec<Vec<ArrayD<f64>>> = Vec::new();
        if use_disc {
            let tape_d = Tape::training();
            let real_out = self.disc.forward(&tape_d.constant(target.clone()));
            let fake_out = self.disc.forward(&tape_d.constant(fake.value()));
            for scale in &real_out.per_scale {
                real_feature_values.push(scale.features.iter().map(|f| f.value()).collect());
            }
            let d_adv = adversarial_loss(
                &real_out.patch_logits(),
                &fake_out.patch_logits(),
                GanSide::Discriminator,
                self.cfg.saturating_gan,
            );
            let d_cam = cam_loss(
                &real_out.cam_logits(),
                &fake_out.cam_logits(),
                GanSide::Discriminator,
                self.cfg.saturating_gan,
            );
            let d_loss = d_adv.scale(w.w_gan).add(&d_cam.scale(w.w_cam));
            d_total = d_loss.item();
            self.opt_disc.zero_grad();
            tape_d.backward(&d_loss);
            self.opt_disc.step();
        }

        // ---- generator step against the updated discriminator ----
        let target_t = tape_g.constant(target);
        let (gan, cam, fm) = if use_disc {
            let fake_out = self.disc.forward(&fake);
            let gan = adversarial_loss(
                &[],
                &fake_out.patch_logits(),
                GanSide::Generator,
                self.cfg.saturating_gan,
            );
            let cam = cam_loss(
                &[],
                &fake_out.cam_logits(),
                GanSide::Generator,
                self.cfg.saturating_gan,
            );
            let real_feats: Vec<Vec<Tensor>> = real_feature_values
                .iter()
                .map(|scale| scale.iter().map(|v| tape_g.constant(v.clone())).collect())
                .collect();
            let fm = feature_matching_loss(&real_feats, &fake_out.features())?;
            (Some(gan), Some(cam), Some(fm))
        } else {
            (None, None, None)
        };
        let recon = (w.w_recon > 0.0)
            .then(|| recon_lower_half(&target_t, &fake))
            .transpose()?;
        let perc = (w.w_perc > 0.0)
            .then(|| perceptual_loss(&target_t, &fake, Some(&self.perceptual), 1.0))
            .transpose()?;
        let pred = (w.w_pred > 0.0)
            .then(|| predictor_mse_loss(&cond, &tape_g.constant(gt_cond)))
            .transpose()?;
        let parts = GeneratorLossParts {
            gan,
            cam,
            recon,
            fm,
            perc,
            pred,
        };
        let (g_loss, part_values) = total_generator_loss(&parts, &w);
        let g_total = g_loss.item();
        self.opt_gen.zero_grad();
        tape_g.backward(&g_loss);
        self.opt_gen.step();

        let _ = fsz;
        self.step += 1;
        Ok(StepLosses {
            step: self.step,
            d_total,
            g_total,
            parts: part_values,
        })
    }

    /// Run `steps` updates, logging one CSV row per loss component and
    /// checkpointing periodically into `out_dir`.
    pub fn train(
        &mut self,
        data: &[ClipData],
        steps: usize,
        log: &mut dyn Write,
        out_dir: Option<&Path>,
    ) -> Result<Vec<StepLosses>> {
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = self.sample_batch(data)?;
            let losses = self.train_step(&batch)?;
            writeln!(log, "{},d_total,{}", losses.step, losses.d_total)?;
            writeln!(log, "{},g_total,{}", losses.step, losses.g_total)?;
            for (name, v) in &losses.parts {
                writeln!(log, "{},{name},{v}", losses.step)?;
            }
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0
                    && self.step % self.cfg.checkpoint_every as u64 == 0
                {
                    self.save(&dir.join("checkpoint.bin"))?;
                }
            }
            history.push(losses);
        }
        if let Some(dir) = out_dir {
            self.save(&dir.join("checkpoint.bin"))?;
        }
        Ok(history)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (name, p) in self.model.parameters() {
            tensors.insert(format!("model/{name}"), p.value());
        }
        for (name, p) in self.disc.parameters() {
            tensors.insert(format!("disc/{name}"), p.value());
        }
        for (name, p) in self.perceptual.parameters() {
            tensors.insert(format!("perc/{name}"), p.value());
        }
        let (tg, mg, vg) = self.opt_gen.state();
        for (name, m) in self.gen_param_names.iter().zip(mg) {
            tensors.insert(format!("opt_gen/m/{name}"), m.clone());
        }
        for (name, v) in self.gen_param_names.iter().zip(vg) {
            tensors.insert(format!("opt_gen/v/{name}"), v.clone());
        }
        let (td, md, vd) = self.opt_disc.state();
        for (name, m) in self.disc_param_names.iter().zip(md) {
            tensors.insert(format!("opt_disc/m/{name}"), m.clone());
        }
        for (name, v) in self.disc_param_names.iter().zip(vd) {
            tensors.insert(format!("opt_disc/v/{name}"), v.clone());
        }
        let mut opt_steps = BTreeMap::new();
        opt_steps.insert("gen".to_string(), tg);
        opt_steps.insert("disc".to_string(), td);
        save_checkpoint(
            path,
            &CheckpointData {
                step: self.step,
                config: self.cfg.clone(),
                ranges: self.ranges,
                opt_steps,
                tensors,
            },
        )
    }

    /// Rebuild a trainer from a checkpoint, restoring parameters, optimizer
    /// moments, quantization ranges, and the step counter.
    pub fn load(path: &Path) -> Result<Self> {
        let data = load_checkpoint(path)?;
        let mut trainer = Trainer::new(data.config.clone())?;
        trainer.ranges = data.ranges;
        trainer.step = data.step;

        let assign = |prefix: &str, named: Vec<(String, Param)>| -> Result<()> {
            for (name, p) in named {
                let key = format!("{prefix}/{name}");
                let t = data
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::CorruptFile(format!("missing tensor {key}")))?;
                p.set_value(t.clone());
            }
            Ok(())
        };
        assign("model", trainer.model.parameters())?;
        assign("disc", trainer.disc.parameters())?;
        assign("perc", trainer.perceptual.parameters())?;

        let collect = |prefix: &str, names: &[String]| -> Result<(Vec<ArrayD<f64>>, Vec<ArrayD<f64>>)> {
            let mut ms = Vec::with_capacity(names.len());
            let mut vs = Vec::with_capacity(names.len());
            for name in names {
                let mk = format!("{prefix}/m/{name}");
                let vk = format!("{prefix}/v/{name}");
                ms.push(
                    data.tensors
                        .get(&mk)
                        .ok_or_else(|| Error::CorruptFile(format!("missing tensor {mk}")))?
                        .clone(),
                );
                vs.push(
                    data.tensors
                        .get(&vk)
                        .ok_or_else(|| Error::CorruptFile(format!("missing tensor {vk}")))?
                        .clone(),
                );
            }
            Ok((ms, vs))
        };
        let (mg, vg) = collect("opt_gen", &trainer.gen_param_names)?;
        trainer
            .opt_gen
            .restore_state(data.opt_steps.get("gen").copied().unwrap_or(0), mg, vg);
        let (md, vd) = collect("opt_disc", &trainer.disc_param_names)?;
        trainer
            .opt_disc
            .restore_state(data.opt_steps.get("disc").copied().unwrap_or(0), md, vd);
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gendisc::run_inference;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            seed: 5,
            frame_size: 32,
            base_channels: 16,
            n_man_blocks: 2,
            channel_width: 4,
            disc_base_channels: 4,
            batch_size: 1,
            n_clips: 2,
            clip_secs: 1.0,
            steps: 3,
            checkpoint_every: 0,
            ..RunConfig::default()
        }
    }

    #[test]
    fn a_few_training_steps_run_and_log() {
        let mut trainer = Trainer::new(tiny_cfg()).unwrap();
        let data = trainer.dataset().unwrap();
        let mut log = Vec::new();
        let hist = trainer.train(&data, 3, &mut log, None).unwrap();
        assert_eq!(hist.len(), 3);
        assert_eq!(trainer.step, 3);
        let text = String::from_utf8(log).unwrap();
        assert!(text.contains("1,g_total,"));
        assert!(text.contains("3,recon,"));
        for l in &hist {
            assert!(l.g_total.is_finite());
            assert!(l.d_total.is_finite());
        }
    }

    #[test]
    fn seeded_runs_reproduce_losses_exactly() {
        let run = || {
            let mut trainer = Trainer::new(tiny_cfg()).unwrap();
            let data = trainer.dataset().unwrap();
            let mut log = Vec::new();
            trainer
                .train(&data, 2, &mut log, None)
                .unwrap()
                .iter()
                .map(|l| (l.d_total, l.g_total))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_and_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut trainer = Trainer::new(tiny_cfg()).unwrap();
        let data = trainer.dataset().unwrap();
        let mut log = Vec::new();
        trainer.train(&data, 2, &mut log, None).unwrap();
        trainer.save(&path).unwrap();

        let restored = Trainer::load(&path).unwrap();
        assert_eq!(restored.step, 2);

        // identical rollout through the restored model
        let identity = data[0].clip.frames[0].clone();
        let audio = crate::data::synthesize_audio(123, 1.0);
        let a = run_inference(&trainer.model, &identity, &audio, &trainer.ranges).unwrap();
        let b = run_inference(&restored.model, &identity, &audio, &restored.ranges).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn resume_continues_the_step_counter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut trainer = Trainer::new(tiny_cfg()).unwrap();
        let data = trainer.dataset().unwrap();
        let mut log = Vec::new();
        trainer.train(&data, 2, &mut log, None).unwrap();
        trainer.save(&path).unwrap();

        let mut resumed = Trainer::load(&path).unwrap();
        let data2 = resumed.dataset().unwrap();
        let hist = resumed.train(&data2, 1, &mut log, None).unwrap();
        assert_eq!(hist[0].step, 3);
    }

    #[test]
    fn recon_only_mode_skips_the_discriminator() {
        let cfg = RunConfig {
            w_gan: 0.0,
            w_cam: 0.0,
            w_fm: 0.0,
            w_perc: 0.0,
            ..tiny_cfg()
        };
        let mut trainer = Trainer::new(cfg).unwrap();
        let data = trainer.dataset().unwrap();
        let batch = trainer.sample_batch(&data).unwrap();
        let losses = trainer.train_step(&batch).unwrap();
        assert_eq!(losses.d_total, 0.0);
        assert!(losses.g_total > 0.0);
    }

    #[test]
    fn keypoint_conditioned_training_also_steps() {
        let cfg = RunConfig {
            flow_or_heatmap: CondKind::KeypointHeatmap,
            ..tiny_cfg()
        };
        let mut trainer = Trainer::new(cfg).unwrap();
        let data = trainer.dataset().unwrap();
        let batch = trainer.sample_batch(&data).unwrap();
        let losses = trainer.train_step(&batch).unwrap();
        assert!(losses.g_total.is_finite());
    }
}
