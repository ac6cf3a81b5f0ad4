use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{BatchStats, Bindings, OptimState, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::spec::{Activation, ModelSpec};
use crate::nce::posterior::labels_for;
use crate::nce::{NoiseConfig, NoiseDraw, NoiseMode, SoftLabelBatch};
use crate::rng;

/// Weight of the newest batch in the batchnorm running averages.
pub const BN_MOMENTUM: f64 = 0.1;
/// Bumped whenever the parameter layout changes meaning.
pub const STATE_FORMAT: u64 = 1;

/// Which statistics batchnorm layers normalize with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPolicy {
    /// Statistics of the current batch.
    #[default]
    Batch,
    /// Running averages collected during source training.
    Running,
}

/// Parameters and batchnorm statistics captured by [`Model::snapshot`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    version: u64,
    params: ParamSet,
}

impl ModelState {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub supervised: f64,
    pub aux: f64,
}

/// Discriminator logits on `2·M` noisy views per noise-space example, with their soft labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxOutput {
    pub logits: Vec<f64>,
    pub labels: SoftLabelBatch,
    pub draw: NoiseDraw,
}

/// Handles of the joint objective recorded on a tape.
#[derive(Debug)]
pub struct JointGraph {
    pub total: Var,
    pub supervised: Var,
    pub aux: Var,
    stats: Vec<(String, BatchStats)>,
}

/// Fraction of views whose predicted side of 0.5 agrees with the label's.
pub fn aux_accuracy(logits: &[f64], labels: &SoftLabelBatch) -> f64 {
    let hits = logits
        .iter()
        .zip(labels.values())
        .filter(|(&u, &p)| (u > 0.0) == (p > 0.5))
        .count();
    hits as f64 / logits.len().max(1) as f64
}

fn enc(k: usize, what: &str) -> String {
    format!("enc{k}.{what}")
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn uniform(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| r.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data)
        .expect("positive extents")
        .with_requires_grad(true)
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::LeakyRelu => tape.leaky_relu(x),
        Activation::Identity => Ok(x),
    }
}

/// The Y-shaped network: encoder blocks feeding a classification head, with a
/// projector and discriminator attached after block `attach_layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
}

impl Model {
    /// Kaiming-uniform fan-in weights (bound `1/sqrt(fan_in)`), zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::rng(rng::derive(seed, &[rng::tag("init")]));
        let mut p = ParamSet::new();
        let add_bn = |p: &mut ParamSet, prefix: &str, c: usize| -> Result<()> {
            p.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0).with_requires_grad(true))?;
            p.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]).with_requires_grad(true))?;
            p.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]))?;
            p.insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0))
        };
        for (i, block) in spec.encoder.iter().enumerate() {
            let k = i + 1;
            p.insert(enc(k, "w"), uniform(&mut r, spec.block_input(k), block.width))?;
            p.insert(enc(k, "b"), Tensor::zeros(&[block.width]).with_requires_grad(true))?;
            if block.batch_norm {
                add_bn(&mut p, &enc(k, "bn"), block.width)?;
            }
        }
        let last = spec.encoder.last().expect("validated").width;
        p.insert("head.w", uniform(&mut r, last, spec.num_classes))?;
        p.insert("head.b", Tensor::zeros(&[spec.num_classes]).with_requires_grad(true))?;
        p.insert("proj.w", uniform(&mut r, spec.attach_width(), spec.projector_dim))?;
        if spec.projector_norm {
            p.insert("proj.bn.running_mean", Tensor::zeros(&[spec.projector_dim]))?;
            p.insert("proj.bn.running_var", Tensor::full(&[spec.projector_dim], 1.0))?;
        }
        let h = spec.discriminator.hidden;
        p.insert("disc.l1.w", uniform(&mut r, spec.noise_dim(), h))?;
        p.insert("disc.l1.b", Tensor::zeros(&[h]).with_requires_grad(true))?;
        if spec.discriminator.batch_norm {
            add_bn(&mut p, "disc.bn", h)?;
        }
        p.insert("disc.l2.w", uniform(&mut r, h, 1))?;
        p.insert("disc.l2.b", Tensor::zeros(&[1]).with_requires_grad(true))?;
        Ok(Model { spec, params: p })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        let layout = Model::new(spec, 0)?;
        if layout.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.params.len(),
                params.len()
            )));
        }
        let mut params = params;
        for (name, t) in layout.params.iter() {
            let got = params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            got.set_requires_grad(t.requires_grad());
        }
        Ok(Model { spec: layout.spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Layout fingerprint stored in every snapshot.
    pub fn version(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(STATE_FORMAT.to_le_bytes());
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn snapshot(&self) -> ModelState {
        ModelState {
            version: self.version(),
            params: self.params.without_grads(),
        }
    }

    pub fn restore(&mut self, state: &ModelState) -> Result<()> {
        let expected = self.version();
        if state.version != expected {
            return Err(Error::VersionMismatch {
                expected,
                found: state.version,
            });
        }
        self.params = state.params.clone();
        Ok(())
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// Whether test-time adaptation may update `name`: weights, biases and
    /// batchnorm affine parameters of blocks `1..=attach_layer`.
    pub fn is_adapted(&self, name: &str) -> bool {
        !is_running_stat(name)
            && (1..=self.spec.attach_layer).any(|k| name.starts_with(&format!("enc{k}.")))
    }

    /// Digest of every tensor adaptation must leave untouched.
    pub fn frozen_digest(&self) -> String {
        self.params.digest_where(|n| !self.is_adapted(n))
    }

    /// Number of examples in `x`, after checking it against the spec.
    fn batch_len(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        let ok = match s.len() {
            2 => s[1] == self.spec.input_channels && self.spec.positions == 1,
            4 => s[1] == self.spec.input_channels && s[2] * s[3] == self.spec.positions,
            _ => false,
        };
        if !ok {
            let mut expected = vec![s.first().copied().unwrap_or(0), self.spec.input_channels];
            if self.spec.positions > 1 {
                expected.push(self.spec.positions);
            }
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: s.to_vec(),
                rhs: expected,
            });
        }
        Ok(s[0])
    }

    /// Inputs as a `(N·P) × C` matrix, one row per example and spatial position.
    fn input_rows(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.batch_len(x)?;
        let (c, p) = (self.spec.input_channels, self.spec.positions);
        if x.shape().len() == 2 {
            return Ok(x.detached());
        }
        let src = x.data();
        let mut data = vec![0.0; n * p * c];
        for i in 0..n {
            for ch in 0..c {
                for pos in 0..p {
                    data[(i * p + pos) * c + ch] = src[(i * c + ch) * p + pos];
                }
            }
        }
        Tensor::matrix(n * p, c, data)
    }

    fn batchnorm(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        prefix: &str,
        x: Var,
        bn: BnPolicy,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let (gamma, beta) = if prefix == "proj.bn" {
            let c = tape.value(x).cols();
            (tape.constant(Tensor::full(&[c], 1.0)), tape.constant(Tensor::zeros(&[c])))
        } else {
            (b.get(&format!("{prefix}.gamma"))?, b.get(&format!("{prefix}.beta"))?)
        };
        match bn {
            BnPolicy::Batch => {
                let (v, s) = tape.batchnorm_train(x, gamma, beta)?;
                stats.push((prefix.to_string(), s));
                Ok(v)
            }
            BnPolicy::Running => {
                let rm = self.params.require(&format!("{prefix}.running_mean"))?.data();
                let rv = self.params.require(&format!("{prefix}.running_var"))?.data();
                tape.batchnorm_eval(x, gamma, beta, rm, rv)
            }
        }
    }

    /// Outputs of blocks `1..=upto`.
    fn encode(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: Var,
        upto: usize,
        bn: BnPolicy,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Vec<Var>> {
        let mut h = x;
        let mut outs = Vec::with_capacity(upto);
        for (i, block) in self.spec.encoder.iter().take(upto).enumerate() {
            let k = i + 1;
            let mut a = tape.affine(h, b.get(&enc(k, "w"))?, b.get(&enc(k, "b"))?)?;
            if block.batch_norm {
                a = self.batchnorm(tape, b, &enc(k, "bn"), a, bn, stats)?;
            }
            h = activate(tape, a, block.activation)?;
            outs.push(h);
        }
        Ok(outs)
    }

    fn head(&self, tape: &mut Tape, b: &Bindings, feats: Var) -> Result<Var> {
        let pooled = if self.spec.positions > 1 {
            tape.pool_rows(feats, self.spec.positions)?
        } else {
            feats
        };
        tape.affine(pooled, b.get("head.w")?, b.get("head.b")?)
    }

    /// Projected features in noise space: one row per noise-space example.
    fn project(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        feats: Var,
        bn: BnPolicy,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let mut z = tape.matmul(feats, b.get("proj.w")?)?;
        if self.spec.projector_norm {
            z = self.batchnorm(tape, b, "proj.bn", z, bn, stats)?;
        }
        match self.spec.discriminator.input {
            NoiseMode::PerLocation => Ok(z),
            NoiseMode::WholeVector => {
                let rows = tape.value(z).rows() / self.spec.positions;
                tape.reshape(z, vec![rows, self.spec.noise_dim()])
            }
        }
    }

    fn discriminate(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        z: Var,
        bn: BnPolicy,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let mut h = tape.affine(z, b.get("disc.l1.w")?, b.get("disc.l1.b")?)?;
        if self.spec.discriminator.batch_norm {
            h = self.batchnorm(tape, b, "disc.bn", h, bn, stats)?;
        }
        h = activate(tape, h, self.spec.discriminator.activation)?;
        tape.affine(h, b.get("disc.l2.w")?, b.get("disc.l2.b")?)
    }

    fn check_noise(&self, cfg: &NoiseConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.mode != self.spec.discriminator.input {
            return Err(Error::Config(format!(
                "noise mode {:?} does not match discriminator input {:?}",
                cfg.mode, self.spec.discriminator.input
            )));
        }
        if cfg.dim != self.spec.noise_dim() {
            return Err(Error::ShapeMismatch {
                op: "noise config",
                lhs: vec![cfg.dim],
                rhs: vec![self.spec.noise_dim()],
            });
        }
        Ok(())
    }

    /// Records the auxiliary branch on `feats` (block-`attach_layer` output).
    fn aux_branch(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        z: Var,
        cfg: &NoiseConfig,
        seed: u64,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<(Var, Var, SoftLabelBatch, NoiseDraw)> {
        let draw = NoiseDraw::sample(tape.value(z).rows(), cfg, seed)?;
        let gathered = tape.gather_rows(z, &draw.origin_index)?;
        let noise = tape.constant(draw.noise_tensor()?);
        let views = tape.add(gathered, noise)?;
        let logits = self.discriminate(tape, b, views, BnPolicy::Batch, stats)?;
        let labels = labels_for(&draw.eps_norm_sq, &draw.class, cfg)?;
        let targets = tape.constant(Tensor::vector(labels.values().to_vec())?);
        let loss = tape.bce_with_soft_targets(logits, targets)?;
        Ok((loss, logits, labels, draw))
    }

    /// Records `cross_entropy + lambda · aux_loss` on a tape with training-mode batchnorm.
    pub fn joint_graph(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: &Tensor,
        y: &[usize],
        cfg: &NoiseConfig,
        seed: u64,
    ) -> Result<JointGraph> {
        self.check_noise(cfg)?;
        let n = self.batch_len(x)?;
        if y.len() != n {
            return Err(Error::ShapeMismatch {
                op: "joint_loss labels",
                lhs: vec![n],
                rhs: vec![y.len()],
            });
        }
        let xv = tape.constant(self.input_rows(x)?);
        let mut stats = Vec::new();
        let feats = self.encode(tape, b, xv, self.spec.encoder.len(), BnPolicy::Batch, &mut stats)?;
        let logits = self.head(tape, b, *feats.last().expect("nonempty encoder"))?;
        let supervised = tape.cross_entropy(logits, y)?;
        let z = self.project(tape, b, feats[self.spec.attach_layer - 1], BnPolicy::Batch, &mut stats)?;
        let (aux, ..) = self.aux_branch(tape, b, z, cfg, seed, &mut stats)?;
        let weighted = tape.scale(aux, self.spec.lambda)?;
        let total = tape.add(supervised, weighted)?;
        Ok(JointGraph {
            total,
            supervised,
            aux,
            stats,
        })
    }

    pub fn joint_loss(&self, x: &Tensor, y: &[usize], cfg: &NoiseConfig, seed: u64) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let g = self.joint_graph(&mut tape, &b, x, y, cfg, seed)?;
        Ok(StepLosses {
            total: tape.value(g.total).item(),
            supervised: tape.value(g.supervised).item(),
            aux: tape.value(g.aux).item(),
        })
    }

    /// One optimizer step on the joint objective; updates batchnorm running statistics.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        y: &[usize],
        cfg: &NoiseConfig,
        seed: u64,
        opt: &mut OptimState,
    ) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let g = self.joint_graph(&mut tape, &b, x, y, cfg, seed)?;
        let losses = StepLosses {
            total: tape.value(g.total).item(),
            supervised: tape.value(g.supervised).item(),
            aux: tape.value(g.aux).item(),
        };
        let stats = g.stats;
        let grads = tape.backward(g.total)?;
        self.params.accumulate(&grads, &b)?;
        opt.step(&mut self.params)?;
        self.update_running(&stats)?;
        Ok(losses)
    }

    fn update_running(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, s) in stats {
            let n = s.count as f64;
            let correction = if s.count > 1 { n / (n - 1.0) } else { 1.0 };
            let rm = self
                .params
                .get_mut(&format!("{prefix}.running_mean"))
                .ok_or_else(|| Error::invalid(format!("no running mean for `{prefix}`")))?;
            rm.data_mut()
                .iter_mut()
                .zip(&s.mean)
                .for_each(|(r, m)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
            let rv = self
                .params
                .get_mut(&format!("{prefix}.running_var"))
                .ok_or_else(|| Error::invalid(format!("no running variance for `{prefix}`")))?;
            rv.data_mut()
                .iter_mut()
                .zip(&s.var)
                .for_each(|(r, v)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction);
        }
        Ok(())
    }

    /// Class logits, `N × num_classes`.
    pub fn forward_logits(&self, x: &Tensor, bn: BnPolicy) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let xv = tape.constant(self.input_rows(x)?);
        let feats = self.encode(&mut tape, &b, xv, self.spec.encoder.len(), bn, &mut Vec::new())?;
        let logits = self.head(&mut tape, &b, *feats.last().expect("nonempty encoder"))?;
        Ok(tape.value(logits).detached())
    }

    /// Class probabilities; rows sum to one.
    pub fn forward_classify(&self, x: &Tensor, bn: BnPolicy) -> Result<Tensor> {
        let mut tape = Tape::new();
        let logits = tape.constant(self.forward_logits(x, bn)?);
        let p = tape.softmax(logits)?;
        Ok(tape.value(p).detached())
    }

    /// Arg-max class per example.
    pub fn predict(&self, x: &Tensor, bn: BnPolicy) -> Result<Vec<usize>> {
        let logits = self.forward_logits(x, bn)?;
        Ok(logits
            .data()
            .chunks(self.spec.num_classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Prediction-time batchnorm: class probabilities using the statistics of `x` itself.
    pub fn ptbn_classify(&self, x: &Tensor) -> Result<Tensor> {
        if self.batch_len(x)? < 2 {
            return Err(Error::invalid("prediction-time batchnorm needs a batch of at least 2"));
        }
        self.forward_classify(x, BnPolicy::Batch)
    }

    pub fn ptbn_predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if self.batch_len(x)? < 2 {
            return Err(Error::invalid("prediction-time batchnorm needs a batch of at least 2"));
        }
        self.predict(x, BnPolicy::Batch)
    }

    /// Clean projected features of `x` in noise space. Projector
    /// standardization always uses running statistics.
    pub fn features(&self, x: &Tensor, bn: BnPolicy) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let xv = tape.constant(self.input_rows(x)?);
        let feats = self.encode(&mut tape, &b, xv, self.spec.attach_layer, bn, &mut Vec::new())?;
        let z = self.project(&mut tape, &b, *feats.last().expect("attach >= 1"), BnPolicy::Running, &mut Vec::new())?;
        Ok(tape.value(z).detached())
    }

    /// Noisy views of the projected features of `x` with discriminator logits
    /// and soft labels. The encoder uses `bn`; the discriminator its running statistics.
    pub fn forward_aux(&self, x: &Tensor, cfg: &NoiseConfig, seed: u64, bn: BnPolicy) -> Result<AuxOutput> {
        self.check_noise(cfg)?;
        let z = self.features(x, bn)?;
        self.aux_on_features(&z, cfg, seed)
    }

    /// [`Model::forward_aux`] starting from noise-space points.
    pub fn aux_on_features(&self, z: &Tensor, cfg: &NoiseConfig, seed: u64) -> Result<AuxOutput> {
        self.check_noise(cfg)?;
        let draw = NoiseDraw::sample(z.rows(), cfg, seed)?;
        let mut data = Vec::with_capacity(draw.noise.len());
        for (k, &i) in draw.origin_index.iter().enumerate() {
            let e = &draw.noise[k * cfg.dim..(k + 1) * cfg.dim];
            data.extend(z.row(i).iter().zip(e).map(|(a, b)| a + b));
        }
        let views = Tensor::matrix(draw.len(), cfg.dim, data)?;
        let logits = self.discriminator_logits(&views)?;
        let labels = labels_for(&draw.eps_norm_sq, &draw.class, cfg)?;
        Ok(AuxOutput { logits, labels, draw })
    }

    /// Discriminator logits of noise-space points (running batchnorm statistics).
    pub fn discriminator_logits(&self, z: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let zv = tape.constant(self.noise_rows(z)?);
        let u = self.discriminate(&mut tape, &b, zv, BnPolicy::Running, &mut Vec::new())?;
        Ok(tape.value(u).data().to_vec())
    }

    /// `log q(z)` per point and its gradient with respect to `z`.
    pub fn log_q_and_grad(&self, z: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let zv = tape.leaf(self.noise_rows(z)?.with_requires_grad(true));
        let u = self.discriminate(&mut tape, &b, zv, BnPolicy::Running, &mut Vec::new())?;
        let lq = tape.log_sigmoid(u)?;
        let total = tape.sum(lq)?;
        let values = tape.value(lq).data().to_vec();
        let grads = tape.backward(total)?;
        let g = grads.get(zv).expect("z is a tracked leaf").to_vec();
        Ok((values, Tensor::matrix(z.rows(), self.spec.noise_dim(), g)?))
    }

    fn noise_rows(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.cols() != self.spec.noise_dim() {
            return Err(Error::ShapeMismatch {
                op: "discriminator input",
                lhs: z.shape().to_vec(),
                rhs: vec![z.rows(), self.spec.noise_dim()],
            });
        }
        Ok(z.detached())
    }

    /// One step on the auxiliary loss over fixed noise-space points, updating
    /// only the discriminator.
    pub fn train_discriminator_step(
        &mut self,
        z: &Tensor,
        cfg: &NoiseConfig,
        seed: u64,
        opt: &mut OptimState,
    ) -> Result<f64> {
        self.check_noise(cfg)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let zv = tape.constant(self.noise_rows(z)?);
        let mut stats = Vec::new();
        let (loss, ..) = self.aux_branch(&mut tape, &b, zv, cfg, seed, &mut stats)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        self.masked_step(&grads, &b, |n| n.starts_with("disc."), opt)?;
        self.update_running(&stats)?;
        Ok(value)
    }

    /// Records the test-time loss `-mean log q(z)` over the clean projected features of `x`.
    pub fn test_graph(&self, tape: &mut Tape, b: &Bindings, x: &Tensor, bn: BnPolicy) -> Result<Var> {
        let xv = tape.constant(self.input_rows(x)?);
        let feats = self.encode(tape, b, xv, self.spec.attach_layer, bn, &mut Vec::new())?;
        let z = self.project(tape, b, *feats.last().expect("attach >= 1"), BnPolicy::Running, &mut Vec::new())?;
        let u = self.discriminate(tape, b, z, BnPolicy::Running, &mut Vec::new())?;
        let lq = tape.log_sigmoid(u)?;
        let m = tape.mean(lq)?;
        tape.scale(m, -1.0)
    }

    pub fn test_loss(&self, x: &Tensor, bn: BnPolicy) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let loss = self.test_graph(&mut tape, &b, x, bn)?;
        Ok(tape.value(loss).item())
    }

    /// One optimizer step on the test-time loss. Only parameters accepted by
    /// [`Model::is_adapted`] move; batchnorm running statistics are untouched.
    /// Returns the loss before the step.
    pub fn adapt_step(&mut self, x: &Tensor, bn: BnPolicy, opt: &mut OptimState) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let loss = self.test_graph(&mut tape, &b, x, bn)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let spec = self.spec.clone();
        let adapted = move |n: &str| {
            !is_running_stat(n) && (1..=spec.attach_layer).any(|k| n.starts_with(&format!("enc{k}.")))
        };
        self.masked_step(&grads, &b, adapted, opt)?;
        Ok(value)
    }

    fn masked_step(
        &mut self,
        grads: &crate::autodiff::Gradients,
        b: &Bindings,
        select: impl Fn(&str) -> bool,
        opt: &mut OptimState,
    ) -> Result<()> {
        self.params
            .set_trainable(|n| if is_running_stat(n) { None } else { Some(select(n)) });
        let result = self
            .params
            .accumulate(grads, b)
            .and_then(|_| opt.step(&mut self.params));
        self.params
            .set_trainable(|n| if is_running_stat(n) { None } else { Some(true) });
        self.params.zero_grad();
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::model::spec::BlockSpec;

    fn small(attach: usize) -> ModelSpec {
        let mut s = ModelSpec::mlp(2, &[6, 5, 4], 3, attach, 2);
        s.discriminator.hidden = 8;
        s
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        Tensor::matrix(n, 2, (0..2 * n).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn classify_rows_are_distributions() {
        let m = Model::new(small(1), 3).unwrap();
        let p = m.forward_classify(&batch(7, 1), BnPolicy::Running).unwrap();
        assert_eq!(p.shape(), &[7, 3]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let again = m.forward_classify(&batch(7, 1), BnPolicy::Running).unwrap();
        assert_eq!(p, again);
        assert!(m.forward_classify(&Tensor::zeros(&[3, 5]), BnPolicy::Running).is_err());
    }

    #[test]
    fn fresh_models_are_near_uniform() {
        let mut spread = Vec::new();
        for seed in 0..10 {
            let m = Model::new(small(1), seed).unwrap();
            let p = m.forward_classify(&batch(32, seed + 100), BnPolicy::Batch).unwrap();
            for row in p.data().chunks(3) {
                let hi = row.iter().cloned().fold(f64::MIN, f64::max);
                let lo = row.iter().cloned().fold(f64::MAX, f64::min);
                spread.push(hi - lo);
            }
        }
        let mean = crate::numeric::mean(&spread);
        assert!(mean < 0.2, "mean spread {mean}");
    }

    #[test]
    fn per_location_view_count() {
        let mut s = ModelSpec::mlp(3, &[4], 2, 1, 3);
        s.positions = 16;
        let m = Model::new(s, 0).unwrap();
        let x = Tensor::new(vec![2, 3, 4, 4], (0..96).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let cfg = NoiseConfig::new(0.1, 0.5, 3).unwrap();
        let out = m.forward_aux(&x, &cfg, 1, BnPolicy::Batch).unwrap();
        assert_eq!(out.logits.len(), 64);
        assert_eq!(out.labels.len(), 64);
        let hard = NoiseConfig::new(0.0, 0.5, 3).unwrap();
        let out = m.forward_aux(&x, &hard, 1, BnPolicy::Batch).unwrap();
        assert!(out.labels.values().iter().all(|&p| p == 0.0 || p == 1.0));
    }

    #[test]
    fn whole_vector_mode_flattens_positions() {
        let mut s = ModelSpec::mlp(3, &[4], 2, 1, 3);
        s.positions = 4;
        s.discriminator.input = NoiseMode::WholeVector;
        let m = Model::new(s, 0).unwrap();
        let x = Tensor::new(vec![5, 3, 2, 2], (0..60).map(|i| (i as f64).cos()).collect()).unwrap();
        let cfg = NoiseConfig::new(0.1, 0.5, 12).unwrap().with_mode(NoiseMode::WholeVector);
        let out = m.forward_aux(&x, &cfg, 1, BnPolicy::Batch).unwrap();
        assert_eq!(out.logits.len(), 10);
        let wrong = NoiseConfig::new(0.1, 0.5, 3).unwrap();
        assert!(m.forward_aux(&x, &wrong, 1, BnPolicy::Batch).is_err());
    }

    #[test]
    fn lambda_zero_is_plain_cross_entropy() {
        let mut s = small(2);
        s.lambda = 0.0;
        let m = Model::new(s, 4).unwrap();
        let x = batch(8, 2);
        let y = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let cfg = NoiseConfig::new(0.1, 0.4, 2).unwrap();
        let l = m.joint_loss(&x, &y, &cfg, 9).unwrap();
        assert_eq!(l.total, l.supervised);
        let m1 = Model::new(small(2), 4).unwrap();
        let l1 = m1.joint_loss(&x, &y, &cfg, 9).unwrap();
        assert!(l1.total > l1.supervised && l1.total > l1.aux);
        assert!(m1.joint_loss(&x, &[0, 1, 2, 0, 1, 2, 0, 3], &cfg, 9).is_err());
    }

    #[test]
    fn joint_and_test_gradients_match_finite_differences() {
        let mut s = ModelSpec::mlp(2, &[5, 4], 3, 1, 2);
        s.discriminator.hidden = 6;
        let m = Model::new(s, 11).unwrap();
        let x = batch(6, 5);
        let y = vec![0, 1, 2, 2, 1, 0];
        let cfg = NoiseConfig::new(0.2, 0.6, 2).unwrap();
        let names: Vec<String> = m.params().iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n.to_string()).collect();
        let tensors: Vec<Tensor> = names.iter().map(|n| m.params().get(n).unwrap().clone()).collect();
        let bind = |tape: &mut Tape, vars: &[Var]| {
            let mut pairs: Vec<(String, Var)> = names.iter().cloned().zip(vars.iter().copied()).collect();
            for (n, t) in m.params().iter().filter(|(_, t)| !t.requires_grad()) {
                pairs.push((n.to_string(), tape.constant(t.clone())));
            }
            Bindings::from_pairs(pairs)
        };
        let err = grad_check(&tensors, 1e-6, |tape, vars| {
            let b = bind(tape, vars);
            Ok(m.joint_graph(tape, &b, &x, &y, &cfg, 3)?.total)
        })
        .unwrap();
        assert!(err < 1e-5, "joint {err}");
        let err = grad_check(&tensors, 1e-6, |tape, vars| {
            let b = bind(tape, vars);
            m.test_graph(tape, &b, &x, BnPolicy::Batch)
        })
        .unwrap();
        assert!(err < 1e-5, "test {err}");
    }

    #[test]
    fn adapt_step_only_moves_prefix_blocks() {
        let mut m = Model::new(small(1), 2).unwrap();
        let frozen = m.frozen_digest();
        let before = m.digest();
        let mut opt = OptimState::adam(1e-2);
        for _ in 0..3 {
            m.adapt_step(&batch(16, 7), BnPolicy::Batch, &mut opt).unwrap();
        }
        assert_eq!(m.frozen_digest(), frozen);
        assert_ne!(m.digest(), before);
        assert!(m.params().iter().all(|(_, t)| t.grad().is_none()));
        assert!(m.params().iter().all(|(n, t)| t.requires_grad() != is_running_stat(n)));
    }

    #[test]
    fn zero_learning_rate_keeps_state() {
        let mut m = Model::new(small(2), 2).unwrap();
        let before = m.snapshot();
        let loss = m.adapt_step(&batch(16, 7), BnPolicy::Batch, &mut OptimState::adam(0.0)).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(m.snapshot(), before);
    }

    #[test]
    fn snapshot_round_trip_and_version_check() {
        let mut m = Model::new(small(1), 2).unwrap();
        let x = batch(9, 4);
        let out = m.forward_classify(&x, BnPolicy::Running).unwrap();
        let snap = m.snapshot();
        let cfg = NoiseConfig::new(0.1, 0.4, 2).unwrap();
        m.train_step(&x, &[0, 1, 2, 0, 1, 2, 0, 1, 2], &cfg, 1, &mut OptimState::sgd(0.1)).unwrap();
        assert_ne!(m.forward_classify(&x, BnPolicy::Running).unwrap(), out);
        m.restore(&snap).unwrap();
        assert_eq!(m.forward_classify(&x, BnPolicy::Running).unwrap(), out);
        let other = Model::new(small(2), 2).unwrap();
        assert!(matches!(m.restore(&other.snapshot()), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn training_updates_running_statistics() {
        let mut m = Model::new(small(1), 2).unwrap();
        let x = batch(10, 4);
        let cfg = NoiseConfig::new(0.1, 0.4, 2).unwrap();
        m.train_step(&x, &[0; 10], &cfg, 1, &mut OptimState::sgd(0.0)).unwrap();
        let rm = m.params().get("enc1.bn.running_mean").unwrap().data();
        assert!(rm.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ptbn_needs_two_examples_and_floors_constant_input() {
        let m = Model::new(small(1), 2).unwrap();
        assert!(m.ptbn_predict(&batch(1, 0)).is_err());
        let p = m.ptbn_classify(&Tensor::full(&[4, 2], 0.7)).unwrap();
        assert!(p.all_finite());
        // identical rows normalize to the BN shift, so all predictions agree
        assert!(p.data().chunks(3).all(|r| r == &p.data()[..3]));
    }

    #[test]
    fn test_loss_ignores_blocks_after_attach() {
        let mut s = small(1);
        s.encoder.push(BlockSpec::new(3));
        let m = Model::new(s, 0).unwrap();
        let mut tape = Tape::new();
        let b = m.params().bind(&mut tape);
        let loss = m.test_graph(&mut tape, &b, &batch(5, 1), BnPolicy::Batch).unwrap();
        let g = tape.backward(loss).unwrap();
        for k in 2..=4 {
            let v = b.get(&enc(k, "w")).unwrap();
            assert!(g.get(v).unwrap().iter().all(|&x| x == 0.0));
        }
        assert!(g.get(b.get("enc1.w").unwrap()).unwrap().iter().any(|&x| x != 0.0));
    }
}
