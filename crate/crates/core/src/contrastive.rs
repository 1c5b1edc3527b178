//! Anatomy-aware contrastive training of the network: foreground sampling,
//! row normalization, InfoNCE and the optimization loop.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{AugmentationConfig, BezierTransform};
use crate::autodiff::{Backward, Graph, OptimizerState, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::masrnet::MasrNet;
use crate::volume::{BinaryMask, Volume};

/// Norm floor for row normalization.
pub const NORM_FLOOR: f64 = 1e-12;
/// Normalized intensity above which a voxel counts as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.01;
/// Window of the running loss mean.
pub const RUNNING_WINDOW: usize = 20;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ContrastiveConfig {
    /// Sampled voxels per step, `N^k`.
    pub samples: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub augmentation: AugmentationConfig,
    /// Adds the loss with anchors and positives swapped.
    pub symmetric: bool,
    pub epochs: usize,
    /// Stops after this many steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub foreground_threshold: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            samples: 8196,
            temperature: 0.07,
            learning_rate: 1e-4,
            augmentation: AugmentationConfig::default(),
            symmetric: false,
            epochs: 1,
            max_steps: None,
            foreground_threshold: FOREGROUND_THRESHOLD,
        }
    }
}

impl ContrastiveConfig {
    /// Desk-scale settings: 512 samples, otherwise the defaults.
    pub fn desk() -> Self {
        ContrastiveConfig { samples: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.augmentation.validate()?;
        if self.samples < 2 || !(self.temperature > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "contrastive config needs samples >= 2 and positive temperature and learning rate, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `k` distinct foreground voxels drawn uniformly without replacement.
pub fn sample_foreground_indices<R: Rng + ?Sized>(mask: &BinaryMask, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let fg = mask.indices();
    if fg.len() < k || k == 0 {
        return Err(Error::InsufficientForeground { available: fg.len(), requested: k });
    }
    Ok(rand::seq::index::sample(rng, fg.len(), k).into_iter().map(|i| fg[i]).collect())
}

struct NormalizeRows {
    cols: usize,
}

impl Backward for NormalizeRows {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, y) = (inputs[0].data(), output.data());
        let c = self.cols;
        let mut gx = vec![0.0; x.len()];
        for r in 0..x.len() / c {
            let row = r * c..(r + 1) * c;
            let norm = libm::sqrt(x[row.clone()].iter().map(|v| v * v).sum::<f64>());
            if norm < NORM_FLOOR {
                for i in row {
                    gx[i] = grad[i] / NORM_FLOOR;
                }
                continue;
            }
            let dot: f64 = y[row.clone()].iter().zip(&grad[row.clone()]).map(|(a, b)| a * b).sum();
            for i in row {
                gx[i] = (grad[i] - y[i] * dot) / norm;
            }
        }
        vec![Some(gx)]
    }
}

/// Similarity logits and their row (and, when symmetric, column) softmaxes.
struct Logits {
    n: usize,
    logits: Vec<f64>,
}

impl Logits {
    fn new(a: &[f64], p: &[f64], n: usize, c: usize, tau: f64) -> Self {
        let mut logits = vec![0.0; n * n];
        for i in 0..n {
            let ai = &a[i * c..(i + 1) * c];
            for j in 0..n {
                let pj = &p[j * c..(j + 1) * c];
                logits[i * n + j] = ai.iter().zip(pj).map(|(x, y)| x * y).sum::<f64>() / tau;
            }
        }
        Logits { n, logits }
    }

    fn at(&self, i: usize, j: usize, transposed: bool) -> f64 {
        if transposed {
            self.logits[j * self.n + i]
        } else {
            self.logits[i * self.n + j]
        }
    }

    /// Mean cross-entropy of the diagonal; fills `soft` with the softmax.
    fn loss(&self, transposed: bool, soft: &mut [f64]) -> f64 {
        let n = self.n;
        let mut total = 0.0;
        for i in 0..n {
            let m = (0..n).map(|j| self.at(i, j, transposed)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = libm::exp(self.at(i, j, transposed) - m);
                soft[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                soft[i * n + j] /= z;
            }
            total += m + libm::log(z) - self.at(i, i, transposed);
        }
        total / n as f64
    }
}

struct InfoNce {
    n: usize,
    c: usize,
    tau: f64,
    /// d loss / d logits, row-major `[anchor, positive]`.
    dlogits: Vec<f64>,
}

impl Backward for InfoNce {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, p) = (inputs[0].data(), inputs[1].data());
        let (n, c) = (self.n, self.c);
        let s = grad[0] / self.tau;
        let ga = needs[0].then(|| {
            let mut ga = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..n {
                    let w = s * self.dlogits[i * n + j];
                    for k in 0..c {
                        ga[i * c + k] += w * p[j * c + k];
                    }
                }
            }
            ga
        });
        let gp = needs[1].then(|| {
            let mut gp = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..n {
                    let w = s * self.dlogits[i * n + j];
                    for k in 0..c {
                        gp[j * c + k] += w * a[i * c + k];
                    }
                }
            }
            gp
        });
        vec![ga, gp]
    }
}

fn rows_shape(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch { op, detail: alloc::format!("expected [rows, cols], got {shape:?}") });
    }
    Ok((shape[0], shape[1]))
}

impl Graph {
    /// Divides each row of `[P,C]` by its Euclidean norm (floored).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = rows_shape("normalize_rows", self.shape(x))?;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| {
                let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(NORM_FLOOR);
                row.iter().map(move |v| v / norm)
            })
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.apply(Box::new(NormalizeRows { cols: c }), &[x], value)
    }

    /// InfoNCE over unit rows: anchor `i` against its positive `i` and the
    /// other rows of `positives` as negatives, averaged over anchors. With
    /// `symmetric`, the mean of both directions.
    pub fn info_nce(&mut self, anchors: Var, positives: Var, temperature: f64, symmetric: bool) -> Result<Var> {
        let (n, c) = rows_shape("info_nce", self.shape(anchors))?;
        if self.shape(positives) != [n, c] {
            return Err(Error::ShapeMismatch {
                op: "info_nce",
                detail: alloc::format!("anchors {:?}, positives {:?}", self.shape(anchors), self.shape(positives)),
            });
        }
        if n < 2 || !(temperature > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!("info_nce needs >= 2 rows and temperature > 0, got {n}, {temperature}")));
        }
        let logits = Logits::new(self.value(anchors).data(), self.value(positives).data(), n, c, temperature);
        let mut soft = vec![0.0; n * n];
        let mut loss = logits.loss(false, &mut soft);
        let mut dlogits: Vec<f64> = soft.iter().map(|v| v / n as f64).collect();
        if symmetric {
            let back = logits.loss(true, &mut soft);
            loss = 0.5 * (loss + back);
            for i in 0..n {
                for j in 0..n {
                    // soft is indexed [positive j][anchor i] in the transposed pass
                    dlogits[i * n + j] = 0.5 * (dlogits[i * n + j] + soft[j * n + i] / n as f64);
                }
            }
        }
        for i in 0..n {
            dlogits[i * n + i] -= 1.0 / n as f64;
        }
        self.apply(Box::new(InfoNce { n, c, tau: temperature, dlogits }), &[anchors, positives], Tensor::scalar(loss))
    }
}

/// InfoNCE of fixed vectors, outside any training graph.
pub fn info_nce_loss(anchors: &Tensor, positives: &Tensor, temperature: f64, symmetric: bool) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(anchors.clone());
    let p = g.constant(positives.clone());
    let l = g.info_nce(a, p, temperature, symmetric)?;
    Ok(g.value(l).data()[0])
}

/// Mean cosine of matched rows and of all mismatched row pairs of two unit
/// row sets `[P,C]`.
fn similarity_means(a: &[f64], p: &[f64], n: usize, c: usize) -> (f64, f64) {
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = a[i * c..(i + 1) * c].iter().zip(&p[j * c..(j + 1) * c]).map(|(x, y)| x * y).sum();
            if i == j {
                pos += s;
            } else {
                neg += s;
            }
        }
    }
    (pos / n as f64, neg / (n * (n - 1)) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub pos_sim_mean: f64,
    pub neg_sim_mean: f64,
}

/// Owns the network, optimizer and generator of one training run.
pub struct Trainer {
    pub net: MasrNet,
    pub config: ContrastiveConfig,
    opt: OptimizerState,
    rng: ChaCha8Rng,
    steps: usize,
}

impl Trainer {
    pub fn new(net: MasrNet, config: ContrastiveConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let opt = OptimizerState::new(config.learning_rate);
        Ok(Trainer { net, config, opt, rng: ChaCha8Rng::seed_from_u64(seed), steps: 0 })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One augmentation, forward pair, loss, backward and Adam update.
    /// `mask` defaults to the thresholded foreground of `image`.
    pub fn train_step(&mut self, image: &Volume, mask: Option<&BinaryMask>) -> Result<StepRecord> {
        let tf = BezierTransform::sample(&self.config.augmentation, &mut self.rng)?;
        let augmented = tf.apply(image)?;
        let derived;
        let mask = match mask {
            Some(m) => {
                m.dims.ensure_same(image.dims)?;
                m
            }
            None => {
                derived = BinaryMask::foreground(image, self.config.foreground_threshold);
                &derived
            }
        };
        let samples = sample_foreground_indices(mask, self.config.samples, &mut self.rng)?;

        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, true);
        let embed = |g: &mut Graph, v: &Volume| -> Result<Var> {
            let x = MasrNet::input(g, v)?;
            let h = self.net.features_on(g, &bound, x)?;
            let hc = self.net.embed_on(g, &bound, h)?;
            let d = self.net.head_at(g, &bound, hc, &samples)?;
            let rows = g.permute(d, &[1, 0])?;
            g.normalize_rows(rows)
        };
        let anchors = embed(&mut g, image)?;
        let positives = embed(&mut g, &augmented)?;
        let loss = g.info_nce(anchors, positives, self.config.temperature, self.config.symmetric)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("contrastive loss"));
        }
        let c = self.net.config().descriptor_channels;
        let (pos, neg) = similarity_means(g.value(anchors).data(), g.value(positives).data(), samples.len(), c);
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> = bound
            .vars()
            .iter()
            .zip(self.net.params().iter())
            .map(|(&v, (_, t))| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        drop(g);
        self.opt.step_store(self.net.params_mut(), &grads)?;
        self.steps += 1;
        Ok(StepRecord { step: self.steps, loss: value, pos_sim_mean: pos, neg_sim_mean: neg })
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: MasrNet,
    /// Parameters at the lowest running loss.
    pub best: ParamStore,
    pub best_running_loss: f64,
    pub trace: Vec<StepRecord>,
}

/// Mean of the last [`RUNNING_WINDOW`] losses ending at each step.
pub fn running_loss(trace: &[StepRecord]) -> Vec<f64> {
    (0..trace.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(RUNNING_WINDOW);
            trace[lo..=i].iter().map(|r| r.loss).sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Runs [`Trainer::train_step`] over the corpus, reshuffled every epoch.
/// `on_step` sees every record as it is produced.
pub fn train(
    net: MasrNet,
    corpus: &[Volume],
    config: &ContrastiveConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut trainer = Trainer::new(net, config.clone(), seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0cde);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut trace = Vec::new();
    let mut best = trainer.net.params().clone();
    let mut best_running = f64::INFINITY;
    let limit = config.max_steps.unwrap_or(usize::MAX);
    'outer: for _ in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for &i in &order {
            if trace.len() >= limit {
                break 'outer;
            }
            let before = trainer.net.params().clone();
            let rec = trainer.train_step(&corpus[i], None)?;
            on_step(&rec);
            trace.push(rec);
            let window = &trace[trace.len().saturating_sub(RUNNING_WINDOW)..];
            let running = window.iter().map(|r| r.loss).sum::<f64>() / window.len() as f64;
            // the loss was measured on the parameters before the update
            if trace.len() >= RUNNING_WINDOW.min(limit) && running < best_running {
                best_running = running;
                best = before;
            }
        }
    }
    Ok(TrainOutcome { last: trainer.net, best, best_running_loss: best_running, trace })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Discrimination {
    /// Mean cosine between the two views at the same voxel.
    pub positive: f64,
    /// Mean cosine between the two views at different sampled voxels.
    pub mismatched: f64,
}

impl Discrimination {
    pub fn gap(&self) -> f64 {
        self.positive - self.mismatched
    }
}

/// Matched versus mismatched cosine of the DSIR of each volume and a fresh
/// augmentation of it, over `samples` foreground voxels per volume.
pub fn discrimination(
    net: &MasrNet,
    volumes: &[Volume],
    augmentation: &AugmentationConfig,
    samples: usize,
    seed: u64,
) -> Result<Discrimination> {
    if volumes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg) = (0.0, 0.0);
    for v in volumes {
        let tf = BezierTransform::sample(augmentation, &mut rng)?;
        let mask = BinaryMask::foreground(v, FOREGROUND_THRESHOLD);
        let idx = sample_foreground_indices(&mask, samples, &mut rng)?;
        let mut g = Graph::new();
        let bound = net.bind(&mut g, false);
        let mut rows = Vec::new();
        for image in [v.clone(), tf.apply(v)?] {
            let x = MasrNet::input(&mut g, &image)?;
            let h = net.features_on(&mut g, &bound, x)?;
            let hc = net.embed_on(&mut g, &bound, h)?;
            let d = net.head_at(&mut g, &bound, hc, &idx)?;
            let r = g.permute(d, &[1, 0])?;
            rows.push(g.normalize_rows(r)?);
        }
        let c = net.config().descriptor_channels;
        let (p, q) = similarity_means(g.value(rows[0]).data(), g.value(rows[1]).data(), idx.len(), c);
        pos += p;
        neg += q;
    }
    let n = volumes.len() as f64;
    Ok(Discrimination { positive: pos / n, mismatched: neg / n })
}
