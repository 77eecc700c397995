//! AdamW training loop, loss logging and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{make_windows, ClipWindow, ModelConfig};
use crate::dataset::Video;
use crate::error::{Error, Result};
use crate::flow::{FlowField, FlowProvider};
use crate::graph::Graph;
use crate::losses::{total_loss_op, LossReport};
use crate::model::MvgdNet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    /// Clips per optimizer step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            epochs: 1,
            batch: 1,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip >= 0.0
            && self.batch > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// One supervised clip plus its two flows when the model needs them.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub clip: ClipWindow,
    pub flows: Option<[FlowField; 2]>,
}

/// Every stride-1 window of every annotated video. Stored flows are used
/// when present, otherwise `provider` is asked.
pub fn build_samples(
    videos: &[Video],
    provider: Option<&dyn FlowProvider>,
    need_flow: bool,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for v in videos {
        let masks = v
            .masks
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("video {} has no masks", v.id)))?;
        for w in make_windows(v.frames.len(), 3, 1)? {
            let idx = [w[0], w[1], w[2]];
            let clip = ClipWindow::new(
                idx.iter().map(|&i| v.frames[i].clone()).collect(),
                Some(idx.iter().map(|&i| masks[i].clone()).collect()),
                idx,
            )?;
            let flows = if !need_flow {
                None
            } else if let Some(f) = &v.flows {
                Some([f[idx[0]].clone(), f[idx[1]].clone()])
            } else {
                let p = provider.ok_or_else(|| {
                    Error::Provider(format!(
                        "video {} has no stored flow and no provider is set",
                        v.id
                    ))
                })?;
                let flows = [
                    crate::flow::compute_flow(
                        &crate::flow::FramePair::indexed(&clip.frames[0], &clip.frames[1], idx[1]),
                        p,
                    )?,
                    crate::flow::compute_flow(
                        &crate::flow::FramePair::indexed(&clip.frames[1], &clip.frames[2], idx[2]),
                        p,
                    )?,
                ];
                Some(flows)
            };
            out.push(TrainSample { clip, flows });
        }
    }
    Ok(out)
}

/// One log line per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: MvgdNet,
    pub optim: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Completed optimizer steps.
    pub step: u64,
}

fn decays(name: &str) -> bool {
    !(name.ends_with("/bias")
        || name.ends_with("_bias")
        || name.ends_with("/gamma")
        || name.ends_with("/beta"))
}

impl Trainer {
    pub fn new(net: MvgdNet, optim: OptimConfig) -> Result<Self> {
        optim.validate()?;
        let zeros: Vec<Tensor> = net
            .params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Ok(Self {
            net,
            optim,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    /// Sample indices of the step about to run; epochs are reshuffled with
    /// a seed derived from `(optim.seed, epoch)`.
    pub fn batch_indices(&self, n_samples: usize) -> (u64, Vec<usize>) {
        let per_epoch = n_samples.div_ceil(self.optim.batch) as u64;
        let epoch = self.step / per_epoch;
        let k = (self.step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n_samples).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.optim.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch);
        order.shuffle(&mut rng);
        let start = k * self.optim.batch;
        let end = (start + self.optim.batch).min(n_samples);
        (epoch, order[start..end].to_vec())
    }

    /// Loss and parameter gradients of one sample.
    pub fn loss_and_grads(
        &self,
        sample: &TrainSample,
    ) -> Result<(LossReport, Vec<Option<Tensor>>)> {
        let gts = sample
            .clip
            .gt_masks
            .as_ref()
            .ok_or_else(|| Error::Dataset("training clip has no masks".into()))?;
        let mut g = Graph::new(&self.net.params);
        let out = self
            .net
            .forward(&mut g, &sample.clip, sample.flows.as_ref())?;
        let lv = total_loss_op(
            &mut g,
            out.primary.probs,
            out.masks.map(|m| m.probs),
            [&gts[0], &gts[1], &gts[2]],
            self.net.cfg.alpha,
        )?;
        let report = lv.report(&g, self.net.cfg.alpha);
        if !report.total.is_finite() {
            let stage = g
                .first_non_finite()
                .map(|(_, s)| s.to_string())
                .unwrap_or_else(|| "loss".into());
            return Err(Error::Numeric {
                stage,
                detail: format!("loss is {}", report.total),
            });
        }
        let grads = g.backward(lv.total);
        let mut out: Vec<Option<Tensor>> = vec![None; self.net.params.len()];
        for (id, t) in grads.params() {
            out[id.index()] = Some(t.clone());
        }
        Ok((report, out))
    }

    /// One AdamW step on the mean gradient of `batch`.
    pub fn train_step(&mut self, batch: &[&TrainSample]) -> Result<(LossReport, f64)> {
        if batch.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let n = batch.len() as f64;
        let mut sum: Vec<Option<Tensor>> = vec![None; self.net.params.len()];
        let mut mean_report: Option<LossReport> = None;
        for s in batch {
            let (r, grads) = self.loss_and_grads(s)?;
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
            mean_report = Some(match mean_report {
                None => r,
                Some(mut m) => {
                    m.l_p += r.l_p;
                    m.l_m += r.l_m;
                    m.total += r.total;
                    for t in 0..3 {
                        m.per_frame[t] += r.per_frame[t];
                    }
                    m
                }
            });
        }
        let mut report = mean_report.expect("nonempty batch");
        report.l_p /= n;
        report.l_m /= n;
        report.total /= n;
        for t in 0..3 {
            report.per_frame[t] /= n;
        }
        let sq: f64 = sum.iter().flatten().map(|g| g.sq_norm()).sum::<f64>() / (n * n);
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric {
                stage: "backward".into(),
                detail: "non-finite gradient norm".into(),
            });
        }
        let clip = if self.optim.grad_clip > 0.0 && norm > self.optim.grad_clip {
            self.optim.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let o = &self.optim;
        let t = self.step as i32;
        let bc1 = 1.0 - o.beta1.powi(t);
        let bc2 = 1.0 - o.beta2.powi(t);
        let ids: Vec<_> = self.net.params.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(gsum) = &sum[i] else { continue };
            let decay = decays(self.net.params.name(id));
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = self.net.params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = gsum.data()[j] / n * clip;
                m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * gj;
                v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + o.eps);
                if decay {
                    p[j] -= o.lr * o.weight_decay * p[j];
                }
                p[j] -= o.lr * update;
            }
        }
        Ok((report, norm))
    }

    /// Runs `steps` optimizer steps, appending JSON lines to `log`.
    pub fn run(
        &mut self,
        samples: &[TrainSample],
        steps: u64,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<StepLog>> {
        if samples.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let (epoch, idx) = self.batch_indices(samples.len());
            let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
            let (loss, grad_norm) = self.train_step(&batch)?;
            let entry = StepLog {
                step: self.step,
                epoch,
                grad_norm,
                loss,
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&entry).expect("log entry serializes");
                writeln!(w, "{line}").map_err(|e| Error::io("loss log", e))?;
            }
            out.push(entry);
        }
        Ok(out)
    }

    /// Steps that make up `optim.epochs` passes over `n_samples`.
    pub fn total_steps(&self, n_samples: usize) -> u64 {
        (n_samples.div_ceil(self.optim.batch) * self.optim.epochs) as u64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self.net.params.entries();
        let header = CheckpointHeader {
            config: self.net.cfg.clone(),
            optim: self.optim.clone(),
            step: self.step,
            params: entries
                .iter()
                .map(|e| (e.name.clone(), e.value.shape().to_vec()))
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for group in [
            entries.iter().map(|e| &e.value).collect::<Vec<_>>(),
            self.m.iter().collect(),
            self.v.iter().collect(),
        ] {
            for t in group {
                for x in t.data() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        let net = MvgdNet::new(header.config, 0)?;
        let mut trainer = Trainer::new(net, header.optim)?;
        let entries = trainer.net.params.entries();
        if entries.len() != header.params.len()
            || entries
                .iter()
                .zip(&header.params)
                .any(|(e, (name, shape))| &e.name != name || e.value.shape() != shape.as_slice())
        {
            return Err(bad("parameter layout does not match the model"));
        }
        let mut data = bytes[16 + hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut fill = |t: &mut Tensor| -> Result<()> {
            for x in t.data_mut() {
                *x = data.next().ok_or_else(|| bad("truncated data"))?;
            }
            Ok(())
        };
        let ids: Vec<_> = trainer.net.params.ids().collect();
        for &id in &ids {
            fill(trainer.net.params.get_mut(id))?;
        }
        for t in trainer.m.iter_mut() {
            fill(t)?;
        }
        for t in trainer.v.iter_mut() {
            fill(t)?;
        }
        if data.next().is_some() {
            return Err(bad("trailing data"));
        }
        trainer.step = header.step;
        Ok(trainer)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"MVGDCKP1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    optim: OptimConfig,
    step: u64,
    params: Vec<(String, Vec<usize>)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::dataset::synthetic_videos;

    fn samples(n: usize) -> Vec<TrainSample> {
        build_samples(&synthetic_videos(n, 64, 3, 0.5, 40).unwrap(), None, true).unwrap()
    }

    #[test]
    fn one_step_logs_finite_positive_loss() {
        let net = MvgdNet::new(ModelConfig::tiny(), 1).unwrap();
        let mut t = Trainer::new(net, OptimConfig::default()).unwrap();
        let mut log = Vec::new();
        let out = t.run(&samples(1), 1, Some(&mut log)).unwrap();
        assert!(out[0].loss.total.is_finite() && out[0].loss.total > 0.0);
        let line: StepLog =
            serde_json::from_slice(log.split(|&b| b == b'\n').next().unwrap()).unwrap();
        assert_eq!(line, out[0]);
    }

    #[test]
    fn checkpoint_resume_reproduces_next_loss() {
        let data = samples(3);
        let cfg = ModelConfig::tiny().with_variant(Variant::B);
        let mut a = Trainer::new(MvgdNet::new(cfg, 2).unwrap(), OptimConfig::default()).unwrap();
        a.run(&data, 2, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        a.save(&path).unwrap();
        let next_a = a.run(&data, 1, None).unwrap();
        let mut b = Trainer::load(&path).unwrap();
        let next_b = b.run(&data, 1, None).unwrap();
        assert_eq!(next_a, next_b);
    }

    #[test]
    fn epochs_visit_every_sample() {
        let net = MvgdNet::new(ModelConfig::tiny().with_variant(Variant::A), 0).unwrap();
        let mut t = Trainer::new(
            net,
            OptimConfig {
                batch: 2,
                ..OptimConfig::default()
            },
        )
        .unwrap();
        let mut seen = vec![];
        for _ in 0..3 {
            seen.extend(t.batch_indices(5).1);
            t.step += 1;
        }
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(Trainer::load(&path), Err(Error::Checkpoint(_))));
    }
}
