//! Joint optimization of the three losses: Adam, Polyak averaging,
//! checkpoints and the training regimes.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::{batch_iter, Batch, Prepared};
use crate::error::{Error, Result};
use crate::generator::FusionMode;
use crate::graph::{Graph, Var};
use crate::losses::{cross_entropy_loss, dmol_loss};
use crate::model::ColorizationModel;
use crate::params::{Grads, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// All three losses, every parameter.
    Joint,
    /// Colorization alone: the segmentation term and head are left out.
    ColorOnly,
    /// Segmentation alone from random initialization.
    SegOnlyScratch,
    /// Segmentation alone, trunk initialized from a color-only checkpoint.
    SegOnlyPretrained,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Joint, Regime::ColorOnly, Regime::SegOnlyScratch, Regime::SegOnlyPretrained];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Joint => "joint",
            Regime::ColorOnly => "color_only",
            Regime::SegOnlyScratch => "seg_only_scratch",
            Regime::SegOnlyPretrained => "seg_only_pretrained",
        }
    }

    /// Which of (embedding, segmentation, generator) losses are computed.
    pub fn parts(self) -> LossParts {
        match self {
            Regime::Joint => LossParts { emb: true, seg: true, gen: true },
            Regime::ColorOnly => LossParts { emb: true, seg: false, gen: true },
            Regime::SegOnlyScratch | Regime::SegOnlyPretrained => LossParts { emb: false, seg: true, gen: false },
        }
    }

    /// Whether parameters of `group` receive updates.
    pub fn trains_group(self, group: &str) -> bool {
        match self {
            Regime::Joint => true,
            Regime::ColorOnly => group != "seg",
            Regime::SegOnlyScratch | Regime::SegOnlyPretrained => group == "trunk" || group == "seg",
        }
    }

    /// The model a regime actually trains. A color-only model has no
    /// segmentation to fuse, so its generator is conditioned on the embedding alone.
    pub fn model_config(self, cfg: &ModelConfig) -> ModelConfig {
        let mut cfg = cfg.clone();
        if self == Regime::ColorOnly {
            cfg.fusion_mode = FusionMode::EmbeddingOnly;
        }
        cfg
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Regime::ALL.iter().map(|r| r.as_str()).collect();
            Error::InvalidArgument(format!("unknown regime `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossParts {
    pub emb: bool,
    pub seg: bool,
    pub gen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub polyak_decay: f64,
    /// Weights of the embedding, segmentation and generator losses.
    pub loss_weights: [f64; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub regime: Regime,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            adam_beta1: 0.95,
            adam_beta2: 0.9995,
            adam_eps: 1e-8,
            polyak_decay: 0.9995,
            loss_weights: [1.0, 100.0, 1.0],
            epochs: 20,
            batch_size: 4,
            seed: 0,
            regime: Regime::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", "must be finite and non-negative");
        }
        for (key, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(key, "must lie in [0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.polyak_decay) {
            return bad("polyak_decay", "must lie in [0, 1]");
        }
        for (key, w) in ["lambda_emb", "lambda_seg", "lambda_gen"].iter().zip(self.loss_weights) {
            if !(w.is_finite() && w >= 0.0) {
                return bad(key, "must be finite and non-negative");
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        Ok(())
    }
}

/// Loss values of one step or one pass over a split. Terms a regime does
/// not compute are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub emb: f64,
    pub seg: f64,
    pub gen: f64,
    pub sum: f64,
}

impl LossRecord {
    pub fn combine(emb: f64, seg: f64, gen: f64, weights: [f64; 3]) -> Self {
        Self {
            emb,
            seg,
            gen,
            sum: weights[0] * emb + weights[1] * seg + weights[2] * gen,
        }
    }

    /// Sample-weighted mean of per-batch records.
    pub fn mean(records: &[(LossRecord, usize)]) -> Self {
        let n: usize = records.iter().map(|r| r.1).sum();
        let avg = |f: fn(&LossRecord) -> f64| records.iter().map(|(r, k)| f(r) * *k as f64).sum::<f64>() / n.max(1) as f64;
        Self {
            emb: avg(|r| r.emb),
            seg: avg(|r| r.seg),
            gen: avg(|r| r.gen),
            sum: avg(|r| r.sum),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.emb, self.seg, self.gen, self.sum].iter().all(|v| v.is_finite())
    }
}

pub const CURVE_HEADER: &str = "epoch,split,L_emb,L_seg,L_gen,L_sum";

/// One row of a loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: String,
    pub loss: LossRecord,
}

impl CurveRow {
    /// Values print in shortest round-trip form so the file reproduces them exactly.
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!("{},{},{:?},{:?},{:?},{:?}", self.epoch, self.split, l.emb, l.seg, l.gen, l.sum)
    }
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Build the weighted loss of `batch` in `g`. Returns the total node and the
/// component values; the logged sum is recombined in `f64` from the components.
pub fn compute_losses<F: Real>(
    g: &mut Graph<'_, F>,
    model: &ColorizationModel,
    batch: &Batch,
    weights: [f64; 3],
    parts: LossParts,
) -> Result<(Var, LossRecord)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let gray = g.input(batch.gray_tensor()?);
    let dmol = model.config.dmol();
    let out = if parts.emb || parts.gen {
        model.condition(g, gray, parts.seg)?
    } else {
        model.segment(g, gray)?
    };
    let targets = if parts.emb || parts.gen { Some(batch.targets()?) } else { None };
    let mut terms = Vec::new();
    let (mut emb, mut seg, mut gen) = (0.0, 0.0, 0.0);
    if parts.emb {
        let aux = model.backbone.aux_color_head(g, out.embedding.expect("embedding"));
        let l = dmol_loss(g, aux, targets.as_ref().expect("targets"), &dmol)?;
        emb = g.scalar(l).f64();
        terms.push((l, F::c(weights[0])));
    }
    if parts.seg {
        let l = cross_entropy_loss(g, out.seg_logits.expect("segmentation"), &batch.labels)?;
        seg = g.scalar(l).f64();
        terms.push((l, F::c(weights[1])));
    }
    if parts.gen {
        let t = targets.as_ref().expect("targets");
        let teacher = g.input(t.normalized_tensor());
        let params = model.generator.forward(g, teacher, out.condition.expect("condition"))?;
        let l = dmol_loss(g, params, t, &dmol)?;
        gen = g.scalar(l).f64();
        terms.push((l, F::c(weights[2])));
    }
    let record = LossRecord::combine(emb, seg, gen, weights);
    if !record.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss L_emb={} L_seg={} L_gen={}",
            record.emb, record.seg, record.gen
        )));
    }
    Ok((g.weighted_sum(&terms), record))
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn polyak_update<F: Real>(shadow: &mut Tensor<F>, params: &Tensor<F>, decay: f64) -> Result<()> {
    if shadow.shape() != params.shape() {
        return Err(Error::Shape(format!("shadow {:?} vs params {:?}", shadow.shape(), params.shape())));
    }
    let (d, e) = (F::c(decay), F::c(1.0 - decay));
    for (s, &p) in shadow.data_mut().iter_mut().zip(params.data()) {
        *s = d * *s + e * p;
    }
    Ok(())
}

/// Model, parameters and optimizer state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<F: Real> {
    pub model: ColorizationModel,
    pub config: TrainConfig,
    pub params: ParamStore<F>,
    /// Polyak-averaged parameters; evaluation and sampling use these.
    pub shadow: ParamStore<F>,
    adam_m: ParamStore<F>,
    adam_v: ParamStore<F>,
    pub step: u64,
    pub epoch: usize,
}

fn zeros_like<F: Real>(store: &ParamStore<F>) -> ParamStore<F> {
    let mut z = ParamStore::new();
    for (_, name, t) in store.iter() {
        z.insert(name, Tensor::zeros(t.shape()));
    }
    z
}

impl<F: Real> Trainer<F> {
    pub fn new(model: ColorizationModel, params: ParamStore<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            shadow: params.clone(),
            adam_m: zeros_like(&params),
            adam_v: zeros_like(&params),
            params,
            config,
            step: 0,
            epoch: 0,
        })
    }

    /// Fresh model for `model_cfg` adjusted to the configured regime, seeded
    /// from the training seed.
    pub fn from_scratch(model_cfg: &ModelConfig, config: TrainConfig) -> Result<Self> {
        let cfg = config.regime.model_config(model_cfg);
        let (model, params) = ColorizationModel::new(&cfg, config.seed)?;
        Self::new(model, params, config)
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.params.ids().map(|id| self.config.regime.trains_group(self.params.group(id))).collect()
    }

    /// One Adam update on `batch`; returns the losses before the update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        let mask = self.trainable_mask();
        let (record, grads) = {
            let mut g = Graph::with_trainable(&self.params, |id| mask[id.index()]);
            let (total, record) = compute_losses(&mut g, &self.model, batch, self.config.loss_weights, self.config.regime.parts())?;
            (record, g.backward(total))
        };
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("gradient at step {}", self.step)));
        }
        self.apply_adam(&grads, &mask);
        Ok(record)
    }

    fn apply_adam(&mut self, grads: &Grads<F>, mask: &[bool]) {
        let c = &self.config;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (c.adam_beta1, c.adam_beta2);
        let lr_t = c.lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            if !mask[id.index()] {
                continue;
            }
            let Some(grad) = grads.get(id) else { continue };
            let m = self.adam_m.get_mut(id).data_mut();
            let v = self.adam_v.get_mut(id).data_mut();
            let p = self.params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = grad.data()[i].f64();
                let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
                m[i] = F::c(mi);
                v[i] = F::c(vi);
                p[i] = F::c(p[i].f64() - lr_t * mi / (vi.sqrt() + c.adam_eps));
            }
            polyak_update(self.shadow.get_mut(id), self.params.get(id), c.polyak_decay).expect("aligned stores");
        }
    }

    /// One pass over `data` in the epoch's shuffled order.
    pub fn train_epoch(&mut self, data: &[Prepared]) -> Result<LossRecord> {
        let bs = self.config.batch_size.min(data.len());
        let batches = batch_iter(data, bs, self.config.seed, self.epoch)?;
        let mut records = Vec::with_capacity(batches.len());
        for b in &batches {
            records.push((self.train_step(b)?, b.len()));
        }
        self.epoch += 1;
        Ok(LossRecord::mean(&records))
    }

    /// Losses of `data` under the shadow parameters, without updates.
    pub fn evaluate(&self, data: &[Prepared]) -> Result<LossRecord> {
        evaluate_losses(&self.model, &self.shadow, data, self.config.batch_size, self.config.loss_weights, self.config.regime.parts())
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            model: self.model.config.clone(),
            train: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.params.clone(),
            shadow: self.shadow.clone(),
            adam_m: self.adam_m.clone(),
            adam_v: self.adam_v.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<F>) -> Result<Self> {
        ck.train.validate()?;
        let (model, fresh) = ColorizationModel::new::<F>(&ck.model, 0)?;
        for store in [&ck.params, &ck.shadow, &ck.adam_m, &ck.adam_v] {
            fresh.check_compatible(store).map_err(|e| Error::Checkpoint(format!("does not match its model config: {e}")))?;
        }
        Ok(Self {
            model,
            config: ck.train,
            params: ck.params,
            shadow: ck.shadow,
            adam_m: ck.adam_m,
            adam_v: ck.adam_v,
            step: ck.step,
            epoch: ck.epoch,
        })
    }

    /// Copy the shared trunk of a previously trained model (its shadow
    /// parameters) into both the live and the averaged parameters.
    pub fn load_trunk(&mut self, from: &Checkpoint<F>) -> Result<usize> {
        let mut copied = 0;
        let ids: Vec<_> = self.params.ids().filter(|&id| self.params.group(id) == "trunk").collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let src = from
                .shadow
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("pretrained checkpoint lacks `{name}`")))?;
            if src.shape() != self.params.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}`: pretrained {:?} vs model {:?}",
                    src.shape(),
                    self.params.get(id).shape()
                )));
            }
            self.params.get_mut(id).data_mut().copy_from_slice(src.data());
            self.shadow.get_mut(id).data_mut().copy_from_slice(src.data());
            copied += 1;
        }
        Ok(copied)
    }
}

/// Sample-weighted mean losses of `data` in fixed order.
pub fn evaluate_losses<F: Real>(
    model: &ColorizationModel,
    params: &ParamStore<F>,
    data: &[Prepared],
    batch_size: usize,
    weights: [f64; 3],
    parts: LossParts,
) -> Result<LossRecord> {
    let mut records = Vec::new();
    for chunk in data.chunks(batch_size.max(1)) {
        let batch = Batch::from_items(&chunk.iter().collect::<Vec<_>>())?;
        let mut g = Graph::inference(params);
        let (_, r) = compute_losses(&mut g, model, &batch, weights, parts)?;
        records.push((r, batch.len()));
    }
    Ok(LossRecord::mean(&records))
}

/// Result of [`run_regime`].
#[derive(Clone, Debug)]
pub struct RegimeRun<F: Real> {
    pub trainer: Trainer<F>,
    pub curves: Vec<CurveRow>,
}

/// Train for `config.epochs` epochs, recording train and (when `val` is not
/// empty) validation losses after each epoch. `seg_only_pretrained` requires
/// `init`, whose trunk seeds the model. `on_epoch` sees each epoch's rows.
pub fn run_regime<F: Real>(
    model_cfg: &ModelConfig,
    config: &TrainConfig,
    train: &[Prepared],
    val: &[Prepared],
    init: Option<&Checkpoint<F>>,
    mut on_epoch: impl FnMut(&[CurveRow]),
) -> Result<RegimeRun<F>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut trainer = Trainer::from_scratch(model_cfg, config.clone())?;
    match (config.regime, init) {
        (Regime::SegOnlyPretrained, Some(ck)) => {
            trainer.load_trunk(ck)?;
        }
        (Regime::SegOnlyPretrained, None) => {
            return Err(Error::InvalidArgument(
                "regime seg_only_pretrained needs a color_only checkpoint to initialize the trunk".into(),
            ))
        }
        _ => {}
    }
    let mut curves = Vec::new();
    for _ in 0..config.epochs {
        let tr = trainer.train_epoch(train)?;
        let start = curves.len();
        curves.push(CurveRow {
            epoch: trainer.epoch,
            split: "train".into(),
            loss: tr,
        });
        if !val.is_empty() {
            curves.push(CurveRow {
                epoch: trainer.epoch,
                split: "val".into(),
                loss: trainer.evaluate(val)?,
            });
        }
        on_epoch(&curves[start..]);
    }
    Ok(RegimeRun { trainer, curves })
}

const MAGIC: &[u8; 8] = b"SEMCOLOR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or to sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F: Real> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub params: ParamStore<F>,
    pub shadow: ParamStore<F>,
    pub adam_m: ParamStore<F>,
    pub adam_v: ParamStore<F>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

const SECTIONS: [&str; 4] = ["params", "shadow", "adam_m", "adam_v"];

impl<F: Real> Checkpoint<F> {
    /// Layout: magic, `u32` version, `u64` header length, JSON header, then
    /// the four stores' tensors as little-endian values in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for s in [&self.shadow, &self.adam_m, &self.adam_v] {
            self.params.check_compatible(s)?;
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            dtype: F::DTYPE.into(),
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            step: self.step,
            tensors: self.params.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 4 * 4 * self.params.num_scalars() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for store in [&self.params, &self.shadow, &self.adam_m, &self.adam_v] {
            for (_, _, t) in store.iter() {
                out.extend_from_slice(&F::to_le_bytes_vec(t.data()));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("not a semcolor checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!("stored as {}, loading as {}", header.dtype, F::DTYPE)));
        }
        let width = std::mem::size_of::<F>();
        let mut pos = 20 + hlen;
        let mut stores = Vec::with_capacity(4);
        for section in SECTIONS {
            let mut store = ParamStore::new();
            for (name, shape) in &header.tensors {
                let n: usize = shape.iter().product();
                let raw = bytes
                    .get(pos..pos + n * width)
                    .ok_or_else(|| Error::Checkpoint(format!("truncated {section} tensor `{name}`")))?;
                store.insert(name.clone(), Tensor::from_vec(shape, F::from_le_bytes_slice(raw))?);
                pos += n * width;
            }
            stores.push(store);
        }
        if pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        let adam_v = stores.pop().expect("4 stores");
        let adam_m = stores.pop().expect("4 stores");
        let shadow = stores.pop().expect("4 stores");
        let params = stores.pop().expect("4 stores");
        Ok(Self {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            step: header.step,
            params,
            shadow,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Model and averaged parameters, for sampling and evaluation.
    pub fn inference_model(&self) -> Result<(ColorizationModel, ParamStore<F>)> {
        let (model, fresh) = ColorizationModel::new::<F>(&self.model, 0)?;
        fresh.check_compatible(&self.shadow)?;
        Ok((model, self.shadow.clone()))
    }
}
