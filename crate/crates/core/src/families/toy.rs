//! Two-hidden-layer ReLU MLP trained with plain mini-batch SGD.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{generate_blobs, Dataset, FamilyError};
use crate::spectra::WeightTensor;
use crate::store::{append_record, write_container, write_manifest, RunRecord, StoredTensor};

pub const INPUT_DIM: usize = 16;
pub const N_CLASSES: usize = 2;
/// Offset mixed into the data seed for the held-out set.
const TEST_SEED_OFFSET: u64 = 0x7e57_da7a;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Distance between the two class means.
    pub separation: f64,
    /// Multiplier on the He-normal initialization standard deviation.
    pub init_gain: f64,
    pub data_seed: u64,
    pub init_seed: u64,
}

impl ToyTrainConfig {
    pub fn new(data_seed: u64, init_seed: u64) -> Self {
        Self {
            hidden: 32,
            lr: 0.01,
            weight_decay: 0.0,
            epochs: 30,
            batch_size: 64,
            n_train: 2048,
            n_test: 2048,
            separation: 2.0,
            init_gain: 0.1,
            data_seed,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<(), FamilyError> {
        let bad = |m: &str| Err(FamilyError::InvalidConfig(m.to_string()));
        if self.hidden < 2 {
            return bad("hidden width must be at least 2");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight decay must be finite and non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if self.n_train < 2 || !self.n_train.is_multiple_of(2) || self.n_test < 2 || !self.n_test.is_multiple_of(2) {
            return bad("sample counts must be even and at least 2");
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return bad("init gain must be positive");
        }
        Ok(())
    }

    /// Identifier encoding the hyperparameter tuple.
    pub fn model_id(&self) -> String {
        format!(
            "mlp-h{}-lr{}-wd{}-s{}",
            self.hidden, self.lr, self.weight_decay, self.init_seed
        )
    }

    fn hyperparams(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("lr".to_string(), self.lr.to_string()),
            ("weight_decay".to_string(), self.weight_decay.to_string()),
            ("hidden".to_string(), self.hidden.to_string()),
            ("batch_size".to_string(), self.batch_size.to_string()),
            ("init_seed".to_string(), self.init_seed.to_string()),
            ("data_seed".to_string(), self.data_seed.to_string()),
        ])
    }
}

/// Fully connected layer, `weight` is `out_dim x in_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            out.push(self.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
        }
    }
}

/// `16 -> h -> h -> 2` ReLU network with softmax cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: [Dense; 3],
}

impl Mlp {
    /// He-normal weights scaled by `gain`, zero biases.
    pub fn init(hidden: usize, gain: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [INPUT_DIM, hidden, hidden, N_CLASSES];
        let layers = [0, 1, 2].map(|i| {
            let mut d = Dense::zeros(dims[i], dims[i + 1]);
            let std = gain * (2.0 / dims[i] as f64).sqrt();
            for w in &mut d.weight {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = std * z;
            }
            d
        });
        Self { layers }
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.clone().map(|l| Dense::zeros(l.in_dim, l.out_dim)),
        }
    }

    /// Number of trainable parameters (weights then biases, layer by layer).
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn param_slot(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            if k < l.weight.len() {
                return &mut l.weight[k];
            }
            k -= l.weight.len();
            if k < l.bias.len() {
                return &mut l.bias[k];
            }
            k -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param(&self, k: usize) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .nth(k)
            .copied()
            .expect("parameter index out of range")
    }

    pub fn set_param(&mut self, k: usize, v: f64) {
        *self.param_slot(k) = v;
    }

    fn forward(&self, x: &[f64], acts: &mut [Vec<f64>; 4]) {
        acts[0].clear();
        acts[0].extend_from_slice(x);
        for i in 0..3 {
            let (lo, hi) = acts.split_at_mut(i + 1);
            self.layers[i].apply(&lo[i], &mut hi[0]);
            if i < 2 {
                for v in hi[0].iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut acts: [Vec<f64>; 4] = Default::default();
        self.forward(x, &mut acts);
        let logits = &acts[3];
        (0..logits.len()).fold(0, |best, j| if logits[j] > logits[best] { j } else { best })
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let correct = (0..data.len()).filter(|&i| self.predict(data.row(i)) == data.labels[i]).count();
        correct as f64 / data.len() as f64
    }

    fn decay_term(&self, weight_decay: f64) -> f64 {
        0.5 * weight_decay * self.layers.iter().flat_map(|l| &l.weight).map(|w| w * w).sum::<f64>()
    }

    /// Mean cross-entropy over `batch` plus `0.5 * wd * sum ||W||^2`.
    pub fn loss(&self, data: &Dataset, batch: &[usize], weight_decay: f64) -> f64 {
        let mut acts: [Vec<f64>; 4] = Default::default();
        let mut total = 0.0;
        for &i in batch {
            self.forward(data.row(i), &mut acts);
            total += cross_entropy(&acts[3], data.labels[i]).0;
        }
        total / batch.len() as f64 + self.decay_term(weight_decay)
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(&self, data: &Dataset, batch: &[usize], weight_decay: f64) -> (f64, Mlp) {
        let mut grad = self.zeros_like();
        let mut acts: [Vec<f64>; 4] = Default::default();
        let inv_b = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut delta = Vec::new();
        let mut prev = Vec::new();
        for &i in batch {
            self.forward(data.row(i), &mut acts);
            let (l, p) = cross_entropy(&acts[3], data.labels[i]);
            total += l;
            delta.clear();
            delta.extend(p.iter().enumerate().map(|(j, &pj)| {
                (pj - if j == data.labels[i] { 1.0 } else { 0.0 }) * inv_b
            }));
            for li in (0..3).rev() {
                let layer = &self.layers[li];
                let g = &mut grad.layers[li];
                let input = &acts[li];
                for (o, &d) in delta.iter().enumerate() {
                    g.bias[o] += d;
                    let row = &mut g.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (gw, &a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
                if li > 0 {
                    prev.clear();
                    prev.resize(layer.in_dim, 0.0);
                    for (w, &d) in layer.weight.chunks_exact(layer.in_dim).zip(delta.iter()) {
                        for (p, &wv) in prev.iter_mut().zip(w) {
                            *p += d * wv;
                        }
                    }
                    // ReLU derivative: active units have positive output.
                    for (p, &a) in prev.iter_mut().zip(input) {
                        if a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    std::mem::swap(&mut delta, &mut prev);
                }
            }
        }
        for (g, l) in grad.layers.iter_mut().zip(&self.layers) {
            for (gw, &w) in g.weight.iter_mut().zip(&l.weight) {
                *gw += weight_decay * w;
            }
        }
        (total * inv_b + self.decay_term(weight_decay), grad)
    }

    fn sgd_step(&mut self, grad: &Mlp, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (w, gw) in l.weight.iter_mut().zip(&g.weight) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    /// Weight matrices `W1, W2, W3`; biases are not exported.
    pub fn weight_tensors(&self) -> Vec<WeightTensor<f64>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                WeightTensor::new(format!("W{}", i + 1), vec![l.out_dim, l.in_dim], l.weight.clone())
                    .expect("finite weights")
            })
            .collect()
    }

    pub fn weights_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Cross-entropy of `logits` against `label` and the softmax probabilities.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

/// Trains one model, writing `epoch_NNN.gprb` and appending a manifest line
/// into `out_dir` after every epoch. Returned records carry weight paths
/// relative to `out_dir`.
pub fn train_toy(config: &ToyTrainConfig, out_dir: &Path) -> Result<Vec<RunRecord>, FamilyError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let train = generate_blobs(config.data_seed, config.n_train, INPUT_DIM, config.separation)?;
    let test = generate_blobs(
        config.data_seed.wrapping_add(TEST_SEED_OFFSET),
        config.n_test,
        INPUT_DIM,
        config.separation,
    )?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.data_seed);
    order_rng.set_stream(1);
    let mut model = Mlp::init(config.hidden, config.init_gain, config.init_seed);
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &[])?;

    let model_id = config.model_id();
    let hyperparams = config.hyperparams();
    let dataset = format!("blobs{}-sep{}", INPUT_DIM, config.separation);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs as usize);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) = model.loss_and_grad(&train, batch, config.weight_decay);
            if !loss.is_finite() {
                return Err(FamilyError::DivergenceDetected { epoch, records });
            }
            model.sgd_step(&grad, config.lr);
        }
        if !model.weights_finite() {
            return Err(FamilyError::DivergenceDetected { epoch, records });
        }
        let file = format!("epoch_{epoch:03}.gprb");
        let tensors: Vec<StoredTensor> = model.weight_tensors().into_iter().map(Into::into).collect();
        write_container(out_dir.join(&file), &tensors)?;
        let record = RunRecord {
            model_id: model_id.clone(),
            epoch,
            optimizer: "sgd".to_string(),
            dataset: dataset.clone(),
            hyperparams: hyperparams.clone(),
            train_accuracy: model.accuracy(&train),
            test_accuracy: model.accuracy(&test),
            weights_path: file,
        };
        append_record(&manifest, &record)?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{read_container, read_manifest};
    use rand::Rng;

    #[test]
    fn gradient_matches_finite_differences() {
        let data = generate_blobs(5, 64, INPUT_DIM, 2.0).unwrap();
        let mut model = Mlp::init(8, 1.0, 9);
        // nonzero biases keep every pre-activation away from the ReLU kink
        let mut bias_rng = ChaCha8Rng::seed_from_u64(2);
        for l in &mut model.layers {
            for b in &mut l.bias {
                *b = bias_rng.random_range(-0.5..0.5);
            }
        }
        let batch: Vec<usize> = (0..32).collect();
        let (_, grad) = model.loss_and_grad(&data, &batch, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for _ in 0..20 {
            let k = rng.random_range(0..model.num_params());
            let mut plus = model.clone();
            plus.set_param(k, model.param(k) + h);
            let mut minus = model.clone();
            minus.set_param(k, model.param(k) - h);
            let numeric = (plus.loss(&data, &batch, 1e-3) - minus.loss(&data, &batch, 1e-3)) / (2.0 * h);
            let analytic = grad.param(k);
            assert!((numeric - analytic).abs() <= 1e-7 * (1.0 + analytic.abs()), "{k}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ToyTrainConfig::new(1, 2);
        cfg.lr = 0.0;
        cfg.weight_decay = 1e-3;
        cfg.epochs = 2;
        cfg.n_train = 256;
        cfg.n_test = 256;
        let records = train_toy(&cfg, dir.path()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].test_accuracy, records[1].test_accuracy);
        assert_eq!(records[0].train_accuracy, records[1].train_accuracy);
        let init = Mlp::init(cfg.hidden, cfg.init_gain, cfg.init_seed);
        let saved = read_container(dir.path().join("epoch_002.gprb")).unwrap();
        for (s, w) in saved.iter().zip(init.weight_tensors()) {
            assert_eq!(s.to_f64(), w);
        }
        assert_eq!(read_manifest(dir.path().join(MANIFEST_NAME)).unwrap(), records);
    }

    #[test]
    fn easy_data_is_learned() {
        let dir = tempfile::tempdir().unwrap();
        // seeds pinned: at this input scale a few seed pairs lose every ReLU in the first step
        let mut cfg = ToyTrainConfig::new(0, 100);
        cfg.separation = 1000.0;
        cfg.lr = 0.1;
        cfg.epochs = 5;
        let records = train_toy(&cfg, dir.path()).unwrap();
        let accs: Vec<f64> = records.iter().map(|r| r.test_accuracy).collect();
        assert!(records.last().unwrap().test_accuracy >= 0.99, "{accs:?}");
    }

    #[test]
    fn divergence_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ToyTrainConfig::new(3, 4);
        cfg.lr = 1e200;
        cfg.init_gain = 1.0;
        cfg.epochs = 3;
        cfg.n_train = 128;
        cfg.n_test = 128;
        match train_toy(&cfg, dir.path()) {
            Err(FamilyError::DivergenceDetected { epoch, records }) => {
                assert_eq!(records.len() as u32, epoch - 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_config() {
        let mut cfg = ToyTrainConfig::new(0, 0);
        cfg.epochs = 0;
        assert!(matches!(cfg.validate(), Err(FamilyError::InvalidConfig(_))));
        let mut cfg = ToyTrainConfig::new(0, 0);
        cfg.lr = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_id_encodes_tuple() {
        let mut cfg = ToyTrainConfig::new(0, 2);
        cfg.hidden = 24;
        cfg.lr = 0.003;
        cfg.weight_decay = 0.0001;
        assert_eq!(cfg.model_id(), "mlp-h24-lr0.003-wd0.0001-s2");
    }
}
