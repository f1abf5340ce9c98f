//! The target quality regressor: a small tanh MLP whose hidden units carry a
//! multiplicative scale `gamma` (the slimming hook) and 0/1 masks, followed by
//! a fitted monotone logistic map onto the MOS scale.
//!
//! Parameter order, used by flattened views and gradients:
//! `input_scale, [weights, bias, gamma] per hidden layer, weights, bias`.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datapool::{LabeledSet, Sample};
use crate::error::{Error, Result};
use crate::pruning::Criterion;
use crate::rng;

mod scale_map;
pub use scale_map::{fit_scale_map, ScaleMap};

/// Training targets are compared to `READOUT_OFFSET + READOUT_SCALE * raw`,
/// so the loss is measured in MOS units while the network works in
/// standardized units.
pub const READOUT_OFFSET: f64 = 50.0;
pub const READOUT_SCALE: f64 = 25.0;

const GAMMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// One scale per output unit; empty on the output layer.
    pub gamma: Vec<f64>,
    pub weight_mask: Vec<u8>,
    pub unit_mask: Vec<u8>,
}

impl Layer {
    pub fn row(&self, unit: usize) -> &[f64] {
        &self.weights[unit * self.in_dim..(unit + 1) * self.in_dim]
    }

    fn is_hidden(&self) -> bool {
        !self.gamma.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub parent: Option<String>,
    pub criterion: Option<Criterion>,
    pub ratio: Option<f64>,
    pub round: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub id: String,
    pub widths: Vec<usize>,
    /// Per-feature scale applied before the first layer.
    pub input_scale: Vec<f64>,
    pub layers: Vec<Layer>,
    pub scale_map: ScaleMap,
    pub lineage: Lineage,
}

/// Adam + MSE settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// l1 penalty on hidden-unit gammas; zero except for slimming warm-up.
    pub l1_gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 60,
            l1_gamma: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        Ok(())
    }
}

/// Per-epoch training-set MSE; entry 0 is the loss before any update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epochs: Vec<f64>,
}

impl LossTrace {
    pub fn initial(&self) -> Option<f64> {
        self.epochs.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().copied()
    }
}

/// A training pair borrowed from a sample pool.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub target: f64,
}

/// Resolves every labeled id to its sample features.
pub fn resolve_examples<'a>(labels: &LabeledSet, samples: &'a [Sample]) -> Result<Vec<Example<'a>>> {
    let index: std::collections::HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    labels
        .entries
        .iter()
        .map(|(id, e)| {
            let s = index.get(id.as_str()).ok_or_else(|| Error::UnknownSample(id.clone()))?;
            if s.features.is_empty() {
                return Err(Error::invalid(format!("`{id}` has no features")));
            }
            Ok(Example {
                features: &s.features,
                target: e.mos,
            })
        })
        .collect()
}

/// Activations kept for backprop.
struct Trace {
    raw: Vec<f64>,
    input: Vec<f64>,
    /// Per layer: pre-scale sums `z`.
    pre: Vec<Vec<f64>>,
    /// Per hidden layer: `tanh(gamma * z)` before masking.
    act: Vec<Vec<f64>>,
    /// Layer outputs after masking (input of the next layer).
    out: Vec<Vec<f64>>,
}

impl Model {
    /// Xavier-style initialisation; all masks 1, all gammas 1.
    pub fn init(widths: &[usize], seed: u64) -> Result<Model> {
        if widths.len() < 2 {
            return Err(Error::invalid("need at least input and output widths"));
        }
        if widths.last() != Some(&1) {
            return Err(Error::invalid("widths must end in 1 (scalar output)"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid("zero-width layer"));
        }
        let mut rng = rng::stream(seed, "init");
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (i, o) = (widths[l], widths[l + 1]);
                let normal = Normal::new(0.0, (1.0 / i as f64).sqrt()).expect("finite sd");
                let hidden = l + 1 < n_layers;
                Layer {
                    in_dim: i,
                    out_dim: o,
                    weights: (0..i * o).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; o],
                    gamma: if hidden { vec![1.0; o] } else { Vec::new() },
                    weight_mask: vec![1; i * o],
                    unit_mask: vec![1; o],
                }
            })
            .collect();
        Ok(Model {
            id: "f".to_string(),
            widths: widths.to_vec(),
            input_scale: vec![1.0; widths[0]],
            layers,
            scale_map: ScaleMap::readout(),
            lineage: Lineage::default(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn param_count(&self) -> usize {
        self.input_scale.len()
            + self
                .layers
                .iter()
                .map(|l| l.weights.len() + l.bias.len() + l.gamma.len())
                .sum::<usize>()
    }

    pub fn hidden_layers(&self) -> impl Iterator<Item = (usize, &Layer)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_hidden())
    }

    /// Zeroes masked weights; idempotent.
    pub fn apply_masks(&mut self) {
        for layer in &mut self.layers {
            for (w, m) in layer.weights.iter_mut().zip(&layer.weight_mask) {
                if *m == 0 {
                    *w = 0.0;
                }
            }
        }
    }

    /// Masks hidden unit `unit` of layer `layer` together with its incoming
    /// row and its outgoing column.
    pub fn mask_unit(&mut self, layer: usize, unit: usize) {
        let l = &mut self.layers[layer];
        l.unit_mask[unit] = 0;
        let in_dim = l.in_dim;
        l.weight_mask[unit * in_dim..(unit + 1) * in_dim].fill(0);
        if let Some(next) = self.layers.get_mut(layer + 1) {
            for o in 0..next.out_dim {
                next.weight_mask[o * next.in_dim + unit] = 0;
            }
        }
        self.apply_masks();
    }

    /// l1 norm of all weights sitting under a zero mask.
    pub fn masked_weight_l1(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().zip(&l.weight_mask))
            .filter(|(_, m)| **m == 0)
            .map(|(w, _)| w.abs())
            .sum()
    }

    pub fn masked_weight_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.weight_mask)
            .filter(|m| **m == 0)
            .count()
    }

    fn check_input(&self, x: &[f64]) {
        assert_eq!(
            x.len(),
            self.input_dim(),
            "feature dimension mismatch for model `{}`",
            self.id
        );
    }

    fn trace(&self, x: &[f64]) -> Trace {
        self.check_input(x);
        let input: Vec<f64> = x.iter().zip(&self.input_scale).map(|(a, s)| a * s).collect();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len());
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = out.last().unwrap_or(&input);
            let mut z = layer.bias.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = layer.row(o);
                let mrow = &layer.weight_mask[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut s = 0.0;
                for ((w, m), v) in row.iter().zip(mrow).zip(a) {
                    if *m != 0 {
                        s += w * v;
                    }
                }
                *zo += s;
            }
            if layer.is_hidden() {
                let t: Vec<f64> = z.iter().zip(&layer.gamma).map(|(z, g)| (g * z).tanh()).collect();
                let h = t
                    .iter()
                    .zip(&layer.unit_mask)
                    .map(|(t, m)| if *m != 0 { *t } else { 0.0 })
                    .collect();
                act.push(t);
                out.push(h);
            } else {
                act.push(Vec::new());
                out.push(z.clone());
            }
            pre.push(z);
        }
        Trace {
            raw: x.to_vec(),
            input,
            pre,
            act,
            out,
        }
    }

    /// Raw network output.
    pub fn forward(&self, x: &[f64]) -> f64 {
        self.trace(x).out.last().expect("output layer")[0]
    }

    /// The value the training loss sees.
    pub fn readout(&self, x: &[f64]) -> f64 {
        READOUT_OFFSET + READOUT_SCALE * self.forward(x)
    }

    /// Prediction on the MOS scale, clamped to `[0, 100]`.
    pub fn predict_mos(&self, x: &[f64]) -> f64 {
        self.scale_map.apply(self.forward(x))
    }

    pub fn predict_many(&self, samples: &[Sample]) -> Vec<f64> {
        samples.iter().map(|s| self.predict_mos(&s.features)).collect()
    }

    pub fn forward_many(&self, samples: &[Sample]) -> Vec<f64> {
        samples.iter().map(|s| self.forward(&s.features)).collect()
    }

    /// Zeroed gradient buffers in parameter order.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        let mut g = vec![vec![0.0; self.input_scale.len()]];
        for l in &self.layers {
            g.push(vec![0.0; l.weights.len()]);
            g.push(vec![0.0; l.bias.len()]);
            if l.is_hidden() {
                g.push(vec![0.0; l.gamma.len()]);
            }
        }
        g
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut p: Vec<&[f64]> = vec![&self.input_scale];
        for l in &self.layers {
            p.push(&l.weights);
            p.push(&l.bias);
            if l.is_hidden() {
                p.push(&l.gamma);
            }
        }
        p
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p: Vec<&mut [f64]> = vec![&mut self.input_scale];
        for l in &mut self.layers {
            let hidden = l.is_hidden();
            p.push(&mut l.weights);
            p.push(&mut l.bias);
            if hidden {
                p.push(&mut l.gamma);
            }
        }
        p
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for s in self.param_slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Accumulates `d_out * d(raw output)/d(params)` into `grads`.
    fn backward(&self, tr: &Trace, d_out: f64, grads: &mut [Vec<f64>]) {
        let n_layers = self.layers.len();
        // grads index of each layer's weight buffer
        let mut slot = Vec::with_capacity(n_layers);
        let mut k = 1;
        for l in &self.layers {
            slot.push(k);
            k += if l.is_hidden() { 3 } else { 2 };
        }
        let mut delta_out = vec![d_out];
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let a_in: &[f64] = if li == 0 { &tr.input } else { &tr.out[li - 1] };
            let dz: Vec<f64> = if layer.is_hidden() {
                let mut dz = vec![0.0; layer.out_dim];
                for o in 0..layer.out_dim {
                    if layer.unit_mask[o] == 0 {
                        continue;
                    }
                    let t = tr.act[li][o];
                    let dt = delta_out[o] * (1.0 - t * t);
                    dz[o] = dt * layer.gamma[o];
                    grads[slot[li] + 2][o] += dt * tr.pre[li][o];
                }
                dz
            } else {
                delta_out.clone()
            };
            let mut delta_in = vec![0.0; layer.in_dim];
            for (o, d) in dz.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                grads[slot[li] + 1][o] += d;
                let base = o * layer.in_dim;
                for i in 0..layer.in_dim {
                    if layer.weight_mask[base + i] != 0 {
                        grads[slot[li]][base + i] += d * a_in[i];
                        delta_in[i] += d * layer.weights[base + i];
                    }
                }
            }
            delta_out = delta_in;
        }
        for (i, x) in tr.raw.iter().enumerate() {
            grads[0][i] += delta_out[i] * x;
        }
    }

    /// Gradient of the raw output at `x` with respect to all parameters,
    /// flattened in parameter order.
    pub fn param_gradient(&self, x: &[f64]) -> Vec<f64> {
        let tr = self.trace(x);
        let mut g = self.zero_grads();
        self.backward(&tr, 1.0, &mut g);
        g.concat()
    }

    /// Mean squared error (MOS units) of the readout over `data`.
    pub fn mse(&self, data: &[Example]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        data.iter()
            .map(|e| (self.readout(e.features) - e.target).powi(2))
            .sum::<f64>()
            / data.len() as f64
    }

    /// Mean batch loss and its gradient (without the l1 term).
    pub fn loss_gradient(&self, data: &[Example], batch: &[usize]) -> (f64, Vec<Vec<f64>>) {
        let mut g = self.zero_grads();
        let mut loss = 0.0;
        let n = batch.len() as f64;
        for &i in batch {
            let e = &data[i];
            let tr = self.trace(e.features);
            let pred = READOUT_OFFSET + READOUT_SCALE * tr.out.last().expect("output")[0];
            let err = pred - e.target;
            loss += err * err;
            self.backward(&tr, 2.0 * err * READOUT_SCALE / n, &mut g);
        }
        (loss / n, g)
    }

    /// Offsets of each hidden layer's gamma inside `zero_grads()` buffers.
    pub(crate) fn gamma_slots(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut k = 1;
        for (li, l) in self.layers.iter().enumerate() {
            if l.is_hidden() {
                out.push((li, k + 2));
                k += 3;
            } else {
                k += 2;
            }
        }
        out
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        Adam {
            m: model.zero_grads(),
            v: model.zero_grads(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, p) in model.param_slices_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
        for layer in &mut model.layers {
            for g in &mut layer.gamma {
                *g = g.max(GAMMA_FLOOR);
            }
        }
        model.apply_masks();
    }
}

/// Optimises `model` on `data`, drawing each epoch's mini-batches from
/// `plan(epoch, rng)` as index lists into `data`.
pub fn fit_with_plan<F>(model: &Model, data: &[Example], cfg: &TrainConfig, mut plan: F) -> Result<(Model, LossTrace)>
where
    F: FnMut(usize, &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>>,
{
    cfg.validate()?;
    let mut m = model.clone();
    let mut trace = LossTrace {
        epochs: vec![m.mse(data)],
    };
    if cfg.max_epochs == 0 || data.is_empty() {
        return Ok((m, trace));
    }
    let mut rng = rng::stream(cfg.seed, &format!("train/{}", model.id));
    let mut adam = Adam::new(&m);
    let slots = m.gamma_slots();
    for epoch in 0..cfg.max_epochs {
        let batches = plan(epoch, &mut rng);
        for (step, batch) in batches.iter().enumerate() {
            let (loss, mut g) = m.loss_gradient(data, batch);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    model: m.id.clone(),
                    epoch,
                    step,
                });
            }
            if cfg.l1_gamma > 0.0 {
                for &(li, k) in &slots {
                    for (gg, gamma) in g[k].iter_mut().zip(&m.layers[li].gamma) {
                        *gg += cfg.l1_gamma * gamma.signum();
                    }
                }
            }
            adam.step(&mut m, &g, cfg);
        }
        let epoch_loss = m.mse(data);
        if !epoch_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                model: m.id.clone(),
                epoch,
                step: batches.len(),
            });
        }
        trace.epochs.push(epoch_loss);
    }
    Ok((m, trace))
}

/// Shuffled mini-batch training over `data`.
pub fn train(model: &Model, data: &[Example], cfg: &TrainConfig) -> Result<(Model, LossTrace)> {
    let n = data.len();
    let bs = cfg.batch_size;
    fit_with_plan(model, data, cfg, |_, rng| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.chunks(bs).map(<[usize]>::to_vec).collect()
    })
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    id: String,
    widths: Vec<usize>,
    /// Weights and biases, layer by layer.
    params: Vec<f64>,
    /// Input scale followed by hidden-layer gammas.
    gamma: Vec<f64>,
    weight_mask: Vec<u8>,
    unit_mask: Vec<u8>,
    scale_map: ScaleMap,
    lineage: Lineage,
}

const MODEL_FILE_VERSION: u32 = 1;

impl Model {
    pub fn to_json(&self) -> Result<String> {
        let mut params = Vec::new();
        let mut gamma = self.input_scale.clone();
        let mut weight_mask = Vec::new();
        let mut unit_mask = Vec::new();
        for l in &self.layers {
            params.extend(&l.weights);
            params.extend(&l.bias);
            gamma.extend(&l.gamma);
            weight_mask.extend(&l.weight_mask);
            unit_mask.extend(&l.unit_mask);
        }
        let f = ModelFile {
            version: MODEL_FILE_VERSION,
            id: self.id.clone(),
            widths: self.widths.clone(),
            params,
            gamma,
            weight_mask,
            unit_mask,
            scale_map: self.scale_map.clone(),
            lineage: self.lineage.clone(),
        };
        Ok(serde_json::to_string(&f)?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.version != MODEL_FILE_VERSION {
            return Err(Error::invalid(format!("unsupported model version {}", f.version)));
        }
        let mut m = Model::init(&f.widths, 0)?;
        let bad = || Error::invalid("model file sizes do not match its widths");
        let (mut p, mut g, mut wm, mut um) = (0, 0, 0, 0);
        let take = |src: &[f64], at: &mut usize, n: usize| -> Result<Vec<f64>> {
            let s = src.get(*at..*at + n).ok_or_else(bad)?.to_vec();
            *at += n;
            Ok(s)
        };
        let take_u8 = |src: &[u8], at: &mut usize, n: usize| -> Result<Vec<u8>> {
            let s = src.get(*at..*at + n).ok_or_else(bad)?.to_vec();
            *at += n;
            Ok(s)
        };
        m.input_scale = take(&f.gamma, &mut g, m.input_scale.len())?;
        for l in &mut m.layers {
            l.weights = take(&f.params, &mut p, l.weights.len())?;
            l.bias = take(&f.params, &mut p, l.bias.len())?;
            l.gamma = take(&f.gamma, &mut g, l.gamma.len())?;
            l.weight_mask = take_u8(&f.weight_mask, &mut wm, l.weight_mask.len())?;
            l.unit_mask = take_u8(&f.unit_mask, &mut um, l.unit_mask.len())?;
        }
        if p != f.params.len() || g != f.gamma.len() || wm != f.weight_mask.len() || um != f.unit_mask.len() {
            return Err(bad());
        }
        m.id = f.id;
        m.scale_map = f.scale_map;
        m.lineage = f.lineage;
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        crate::io::write_atomic(path, s.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Model> {
        Model::from_json(&crate::io::read_text(path)?)
    }
}
