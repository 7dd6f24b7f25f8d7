//! Masked-loss optimization: batch assembly over the masked forward
//! process, AdamW with decoupled weight decay, and the training loop.
//!
//! The loss only reads target pixels: `L = || m*(eps - eps_hat) ||^2`,
//! optionally divided by the count of masked scalars so runs with
//! different target areas stay comparable.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{chw_from_canvas, Denoiser};
use crate::error::{Error, Result};
use crate::layout::{BinaryMask, Canvas};
use crate::nn::{Grads, ParamId, Real};
use crate::schedule::{masked_noise, sample_timestep, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Squared error divided by the number of masked scalars.
    MaskedMean,
    /// Plain squared norm over the masked region.
    Sum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub loss_normalization: LossNorm,
    pub eval_every: u64,
    /// Global-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 4,
            max_steps: 1000,
            seed: 0,
            loss_normalization: LossNorm::MaskedMean,
            eval_every: 250,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Masked squared error between two noise maps in `(C, H, W)` layout.
pub fn masked_loss<F: Real>(
    eps: &Array3<F>,
    eps_hat: &Array3<F>,
    mask: &BinaryMask,
    norm: LossNorm,
) -> Result<F> {
    if eps.dim() != eps_hat.dim() {
        return Err(Error::ShapeMismatch(format!(
            "eps {:?} vs eps_hat {:?}",
            eps.dim(),
            eps_hat.dim()
        )));
    }
    let (c, h, w) = eps.dim();
    if mask.dims() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs noise {:?}",
            mask.dims(),
            (h, w)
        )));
    }
    let covered = mask.coverage();
    if covered == 0 {
        return Err(Error::InvalidConfig(
            "empty mask: masked loss would divide by zero".into(),
        ));
    }
    let mut acc = F::zero();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask.at(y, x) == 1.0 {
                    let d = eps[[ci, y, x]] - eps_hat[[ci, y, x]];
                    acc = acc + d * d;
                }
            }
        }
    }
    Ok(match norm {
        LossNorm::Sum => acc,
        LossNorm::MaskedMean => acc / F::from_f64((covered * c) as f64),
    })
}

/// Gradient of [`masked_loss`] with respect to `eps_hat`.
pub fn masked_loss_grad<F: Real>(
    eps: &Array3<F>,
    eps_hat: &Array3<F>,
    mask: &BinaryMask,
    norm: LossNorm,
) -> Array3<F> {
    let (c, h, w) = eps.dim();
    let covered = mask.coverage();
    let scale = match norm {
        LossNorm::Sum => F::from_f64(2.0),
        LossNorm::MaskedMean => F::from_f64(2.0 / (covered * c) as f64),
    };
    let mut grad = Array3::zeros(eps.dim());
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask.at(y, x) == 1.0 {
                    grad[[ci, y, x]] = scale * (eps_hat[[ci, y, x]] - eps[[ci, y, x]]);
                }
            }
        }
    }
    grad
}

/// Anything that can yield `(clean canvas, target mask, condition ids)`
/// samples: task datasets and the procedural pretraining generator.
pub trait BatchSource: Sync {
    fn len(&self) -> usize;
    fn sample(&self, idx: usize) -> Result<(Canvas, BinaryMask, Vec<usize>)>;
}

/// One training example of the masked forward process.
pub struct TrainExample {
    pub x_t: Canvas,
    pub t: usize,
    pub eps: Canvas,
    pub mask: BinaryMask,
    pub cond_ids: Vec<usize>,
    pub x0: Canvas,
}

/// Draws `batch_size` examples: uniform sample index, uniform timestep,
/// Gaussian noise, masked mixing. Deterministic given the rng state.
pub fn make_batch<S: BatchSource + ?Sized>(
    source: &S,
    rng: &mut ChaCha8Rng,
    sched: &NoiseSchedule,
    batch_size: usize,
) -> Result<Vec<TrainExample>> {
    if source.len() == 0 {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let idx = rng.gen_range(0..source.len());
        let (x0, mask, cond_ids) = source.sample(idx)?;
        let t = sample_timestep(rng, sched.len());
        let mut eps = x0.clone();
        for v in eps.pixels.iter_mut() {
            *v = f32::standard_normal(rng);
        }
        let x_t = masked_noise(&x0, &mask, t, &eps, sched)?;
        batch.push(TrainExample {
            x_t,
            t,
            eps,
            mask,
            cond_ids,
            x0,
        });
    }
    Ok(batch)
}

struct Moment {
    m: ArrayD<f32>,
    v: ArrayD<f32>,
}

/// Decoupled-weight-decay Adam over the trainable tensors of a store.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    moments: Vec<Option<Moment>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(den: &Denoiser<f32>, tcfg: &TrainConfig) -> Self {
        let moments = (0..den.store().len())
            .map(|i| {
                let id = ParamId(i);
                let p = den.store().meta(id);
                (p.active && p.trainable).then(|| Moment {
                    m: ArrayD::zeros(p.value.raw_dim()),
                    v: ArrayD::zeros(p.value.raw_dim()),
                })
            })
            .collect();
        AdamW {
            lr: tcfg.learning_rate,
            beta1: tcfg.beta1,
            beta2: tcfg.beta2,
            eps: tcfg.eps,
            weight_decay: tcfg.weight_decay,
            moments,
            step: 0,
        }
    }

    /// One update. Moments exist exactly for trainable tensors; frozen
    /// tensors are untouched. NaN gradients abort with the tensor name.
    pub fn step(&mut self, den: &mut Denoiser<f32>, grads: &Grads<f32>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        // Per-element math in f64 so the recurrence matches its
        // hand-derived values; storage stays f32.
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);

        let ids: Vec<ParamId> = den
            .store()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let g = grads.get(id);
            if g.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite(format!(
                    "NaN gradient for tensor {}",
                    den.store().meta(id).name
                )));
            }
            let moment = self.moments[id.0]
                .as_mut()
                .expect("moment exists for every trainable tensor");
            let w = den.store_mut().get_mut(id);
            ndarray::Zip::from(w)
                .and(&mut moment.m)
                .and(&mut moment.v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    let g = g as f64;
                    let m_new = b1 * (*m as f64) + (1.0 - b1) * g;
                    let v_new = b2 * (*v as f64) + (1.0 - b2) * g * g;
                    *m = m_new as f32;
                    *v = v_new as f32;
                    let m_hat = m_new / bc1;
                    let v_hat = v_new / bc2;
                    let mut wf = *w as f64;
                    wf -= lr * wd * wf;
                    wf -= lr * m_hat / (v_hat.sqrt() + eps);
                    *w = wf as f32;
                });
        }
        Ok(())
    }
}

/// Optimization state: the model, its optimizer moments, the step counter,
/// the rng stream, and the recorded losses.
pub struct TrainState {
    pub denoiser: Denoiser<f32>,
    pub opt: AdamW,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(denoiser: Denoiser<f32>, tcfg: &TrainConfig) -> Self {
        let opt = AdamW::new(&denoiser, tcfg);
        TrainState {
            denoiser,
            opt,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(tcfg.seed),
            loss_history: Vec::new(),
        }
    }
}

/// One row of the loss curve; `eval` fills every `eval_every` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub eval: Option<f64>,
}

/// Hooks for persistence and progress; default implementations do nothing.
pub trait TrainObserver {
    fn on_step(&mut self, _step: u64, _loss: f64) {}
    fn on_eval(&mut self, _step: u64, _state: &TrainState, _eval_mse: f64) -> Result<()> {
        Ok(())
    }
}

pub struct NullObserver;
impl TrainObserver for NullObserver {}

/// Mean batch loss and the summed parameter gradients, computed per sample
/// in parallel and reduced in index order so results are deterministic.
pub fn batch_loss_and_grads(
    den: &Denoiser<f32>,
    batch: &[TrainExample],
    norm: LossNorm,
) -> Result<(f64, Grads<f32>)> {
    let per_sample: Vec<Result<(f64, Grads<f32>)>> = batch
        .par_iter()
        .map(|ex| {
            let x_t = chw_from_canvas(&ex.x_t);
            let eps = chw_from_canvas(&ex.eps);
            let (eps_hat, cache) = den.forward(&x_t, ex.t, &ex.cond_ids)?;
            let loss = masked_loss(&eps, &eps_hat, &ex.mask, norm)?;
            let d_out = masked_loss_grad(&eps, &eps_hat, &ex.mask, norm);
            let mut grads = Grads::zeros_like(den.store());
            den.backward(&cache, &d_out, &mut grads);
            Ok((loss as f64, grads))
        })
        .collect();

    let mut total = Grads::zeros_like(den.store());
    let mut loss_sum = 0.0;
    for item in per_sample {
        let (loss, grads) = item?;
        loss_sum += loss;
        total.accumulate(&grads);
    }
    let b = batch.len() as f64;
    total.scale(1.0 / b as f32);
    Ok((loss_sum / b, total))
}

/// Runs `max_steps` of batch -> predict -> masked loss -> backprop ->
/// AdamW. Fully reproducible given the config seed.
pub fn train<S: BatchSource + ?Sized>(
    denoiser: Denoiser<f32>,
    source: &S,
    sched: &NoiseSchedule,
    tcfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainState, Vec<LossRow>)> {
    let state = TrainState::new(denoiser, tcfg);
    resume(state, source, sched, tcfg, observer)
}

/// Continues a training run from its recorded step and rng position.
pub fn resume<S: BatchSource + ?Sized>(
    mut state: TrainState,
    source: &S,
    sched: &NoiseSchedule,
    tcfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainState, Vec<LossRow>)> {
    tcfg.validate()?;
    let mut rows = Vec::new();
    let eval_rng_seed = tcfg.seed ^ 0x9E37_79B9_7F4A_7C15;
    let eval_batch = make_batch(
        source,
        &mut ChaCha8Rng::seed_from_u64(eval_rng_seed),
        sched,
        tcfg.batch_size.max(4),
    )?;

    while state.step < tcfg.max_steps {
        let step = state.step + 1;
        let batch = make_batch(source, &mut state.rng, sched, tcfg.batch_size)?;
        let (loss, mut grads) = batch_loss_and_grads(&state.denoiser, &batch, tcfg.loss_normalization)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        if let Some(clip) = tcfg.grad_clip {
            let trainable: Vec<ParamId> = state
                .denoiser
                .store()
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(id, _)| id)
                .collect();
            let norm = grads.global_norm(trainable.into_iter());
            if norm > clip {
                grads.scale((clip / norm) as f32);
            }
        }
        state.opt.step(&mut state.denoiser, &grads)?;
        state.step = step;
        state.loss_history.push(loss);
        observer.on_step(step, loss);

        let eval = if step % tcfg.eval_every == 0 || step == tcfg.max_steps {
            let mse = epsilon_eval_mse(&state.denoiser, &eval_batch, tcfg.loss_normalization)?;
            observer.on_eval(step, &state, mse)?;
            Some(mse)
        } else {
            None
        };
        rows.push(LossRow { step, loss, eval });
    }
    Ok((state, rows))
}

/// Masked noise-prediction error on a fixed batch; the cheap proxy metric
/// recorded alongside the training loss.
pub fn epsilon_eval_mse(
    den: &Denoiser<f32>,
    eval_batch: &[TrainExample],
    norm: LossNorm,
) -> Result<f64> {
    let mut acc = 0.0;
    for ex in eval_batch {
        let x_t = chw_from_canvas(&ex.x_t);
        let eps = chw_from_canvas(&ex.eps);
        let (eps_hat, _) = den.forward(&x_t, ex.t, &ex.cond_ids)?;
        acc += masked_loss(&eps, &eps_hat, &ex.mask, norm)? as f64;
    }
    Ok(acc / eval_batch.len() as f64)
}

/// Mean of the first and last `window` losses; used for convergence floors.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> (f64, f64) {
    if losses.is_empty() {
        return (0.0, 0.0);
    }
    let w = window.min(losses.len()).max(1);
    let head: f64 = losses[..w].iter().sum::<f64>() / w as f64;
    let tail: f64 = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    (head, tail)
}

const STATE_MAGIC: &[u8; 4] = b"CTXS";

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    rng: ChaCha8Rng,
    tensors: Vec<(String, Vec<usize>)>,
}

impl TrainState {
    /// Persists optimizer moments, the step counter, and the rng stream.
    /// Model weights are saved separately through the checkpoint format.
    pub fn save_optimizer(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&ArrayD<f32>> = Vec::new();
        for (id, p) in self.denoiser.store().iter() {
            if let Some(moment) = &self.opt.moments[id.0] {
                tensors.push((p.name.clone(), p.value.shape().to_vec()));
                payload.push(&moment.m);
                payload.push(&moment.v);
            }
        }
        let header = StateHeader {
            step: self.step,
            rng: self.rng.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(STATE_MAGIC)?;
        file.write_all(&(json.len() as u64).to_le_bytes())?;
        file.write_all(&json)?;
        for arr in payload {
            for v in arr.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores optimizer moments, step, and rng into a state built around
    /// an already-loaded denoiser.
    pub fn load_optimizer(&mut self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(Error::Checkpoint("not a trainer state file".into()));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let mut json = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
        file.read_exact(&mut json)?;
        let header: StateHeader = serde_json::from_slice(&json)?;
        for (name, shape) in &header.tensors {
            let id = self
                .denoiser
                .store()
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("state tensor {name} has no slot")))?;
            let n: usize = shape.iter().product();
            let read_arr = |file: &mut std::fs::File| -> Result<ArrayD<f32>> {
                let mut buf = vec![0u8; n * 4];
                file.read_exact(&mut buf)?;
                let values: Vec<f32> = buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                ArrayD::from_shape_vec(shape.clone(), values)
                    .map_err(|e| Error::Checkpoint(format!("moment {name}: {e}")))
            };
            let m = read_arr(&mut file)?;
            let v = read_arr(&mut file)?;
            self.opt.moments[id.0] = Some(Moment { m, v });
        }
        self.step = header.step;
        self.opt.step = header.step;
        self.rng = header.rng;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_denoiser, DenoiserConfig, LoraConfig};
    use crate::layout::{compose, preset_layout, target_mask, Task};
    use crate::nn::fill_normal;
    use crate::schedule::linear_schedule;
    use ndarray::Array3;

    /// Fixed family of 2x2 canvases: context panels carry a gradient, the
    /// target is a solid color keyed by the sample index.
    struct ToySource {
        spec: crate::layout::LayoutSpec,
        n: usize,
    }

    impl ToySource {
        fn new(panel: usize, n: usize) -> Self {
            ToySource {
                spec: preset_layout(Task::Colorize, panel, panel),
                n,
            }
        }
    }

    impl BatchSource for ToySource {
        fn len(&self) -> usize {
            self.n
        }
        fn sample(&self, idx: usize) -> Result<(Canvas, BinaryMask, Vec<usize>)> {
            let p = self.spec.panel_h;
            // Two channels to match the tiny denoiser config.
            let shade = (idx as f32 / self.n as f32) * 2.0 - 1.0;
            let ctx = Array3::from_shape_fn((p, p, 2), |(y, x, _)| {
                (y as f32 + x as f32) / (2.0 * p as f32) - 0.5
            });
            let target = Array3::from_elem((p, p, 2), shade);
            let canvas = compose(&[ctx.clone(), ctx.clone(), ctx, target], &self.spec)?;
            Ok((canvas, target_mask(&self.spec), vec![1 + idx % 3]))
        }
    }

    fn toy_canvas(panel: usize) -> (Canvas, BinaryMask) {
        let spec = preset_layout(Task::Colorize, panel, panel);
        let canvas = Canvas {
            pixels: Array3::zeros((2 * panel, 2 * panel, 3)),
            layout: spec.clone(),
        };
        (canvas, target_mask(&spec))
    }

    #[test]
    fn masked_loss_basic_contract() {
        let (c, m) = toy_canvas(2);
        let eps = chw_from_canvas(&c);
        // Identity: zero loss.
        assert_eq!(
            masked_loss(&eps, &eps, &m, LossNorm::MaskedMean).unwrap(),
            0.0
        );
        // Constant residual of 1 on everything: masked mean is exactly 1.
        let eps_hat = eps.mapv(|v| v - 1.0);
        assert!(
            (masked_loss(&eps, &eps_hat, &m, LossNorm::MaskedMean).unwrap() - 1.0).abs() < 1e-6
        );
        // Sum mode counts masked scalars.
        let sum = masked_loss(&eps, &eps_hat, &m, LossNorm::Sum).unwrap();
        assert!((sum - (m.coverage() * 3) as f32).abs() < 1e-3);
        // Values outside the mask are ignored.
        let mut corrupted = eps_hat.clone();
        for y in 0..2 {
            for x in 0..4 {
                if m.at(y, x) == 0.0 {
                    corrupted[[0, y, x]] = 99.0;
                }
            }
        }
        assert_eq!(
            masked_loss(&eps, &eps_hat, &m, LossNorm::MaskedMean).unwrap(),
            masked_loss(&eps, &corrupted, &m, LossNorm::MaskedMean).unwrap()
        );
        // Empty mask is an error; shape mismatch is an error.
        let empty = BinaryMask::zeros(4, 4);
        assert!(masked_loss(&eps, &eps_hat, &empty, LossNorm::MaskedMean).is_err());
        let small = Array3::<f32>::zeros((3, 2, 2));
        assert!(masked_loss(&eps, &small, &m, LossNorm::MaskedMean).is_err());
    }

    #[test]
    fn unmasked_entries_have_zero_loss_gradient() {
        // Criterion-level property at f64: perturbing an unmasked output
        // entry changes the loss by less than 1e-10.
        let (c, m) = toy_canvas(2);
        let eps: Array3<f64> = chw_from_canvas(&c).mapv(|v| v as f64 + 0.3);
        let mut eps_hat = eps.clone();
        eps_hat.mapv_inplace(|v| v * 0.9 + 0.05);
        let base = masked_loss(&eps, &eps_hat, &m, LossNorm::MaskedMean).unwrap();
        let grad = masked_loss_grad(&eps, &eps_hat, &m, LossNorm::MaskedMean);
        for y in 0..4 {
            for x in 0..4 {
                if m.at(y, x) == 0.0 {
                    let mut bumped = eps_hat.clone();
                    bumped[[1, y, x]] += 1e-3;
                    let after = masked_loss(&eps, &bumped, &m, LossNorm::MaskedMean).unwrap();
                    assert!((after - base).abs() < 1e-10);
                    assert_eq!(grad[[1, y, x]], 0.0);
                }
            }
        }
    }

    #[test]
    fn make_batch_contract() {
        let source = ToySource::new(4, 5);
        let sched = linear_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = make_batch(&source, &mut rng, &sched, 4).unwrap();
        assert_eq!(batch.len(), 4);
        for ex in &batch {
            assert_eq!(ex.x_t.dims(), ex.x0.dims());
            assert!(ex.t >= 1 && ex.t <= 50);
            // Context pixels pass through bit-exactly.
            let (h, w, ch) = ex.x0.dims();
            for y in 0..h {
                for x in 0..w {
                    if ex.mask.at(y, x) == 0.0 {
                        for c in 0..ch {
                            assert_eq!(
                                ex.x_t.pixels[[y, x, c]].to_bits(),
                                ex.x0.pixels[[y, x, c]].to_bits()
                            );
                        }
                    }
                }
            }
        }
        // Same seed, same batch.
        let mut rng2 = ChaCha8Rng::seed_from_u64(12);
        let again = make_batch(&source, &mut rng2, &sched, 4).unwrap();
        for (a, b) in batch.iter().zip(again.iter()) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.x_t.pixels, b.x_t.pixels);
            assert_eq!(a.cond_ids, b.cond_ids);
        }
        // Empty dataset errors.
        let empty = ToySource::new(4, 0);
        assert!(make_batch(&empty, &mut rng, &sched, 2).is_err());
    }

    #[test]
    fn adamw_single_scalar_recurrence() {
        // Hand-executed first step: m_hat = g, v_hat = g^2, so the update
        // is -lr * g/(|g| + eps) = -0.001 for g = 1, wd = 0.
        let cfg = DenoiserConfig::tiny(6);
        let mut den = init_denoiser::<f32>(&cfg, 0).unwrap();
        let tcfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&den, &tcfg);
        let id = den.store().iter().next().unwrap().0;
        // Zero the entry so the measured delta is not quantized away by the
        // f32 magnitude of the original weight.
        den.store_mut().get_mut(id).as_slice_mut().unwrap()[0] = 0.0;
        let mut grads = Grads::zeros_like(den.store());
        grads.get_mut(id).as_slice_mut().unwrap()[0] = 1.0;
        opt.step(&mut den, &grads).unwrap();
        let delta = den.store().get(id).as_slice().unwrap()[0];
        assert!(
            (delta + 0.001).abs() < 1e-9,
            "delta = {delta}, expected -0.001"
        );
    }

    #[test]
    fn adamw_zero_gradient_is_fixed_point_without_decay() {
        let cfg = DenoiserConfig::tiny(6);
        let mut den = init_denoiser::<f32>(&cfg, 3).unwrap();
        let tcfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&den, &tcfg);
        let snapshot: Vec<Vec<f32>> = den
            .store()
            .iter()
            .map(|(_, p)| p.value.iter().cloned().collect())
            .collect();
        let grads = Grads::zeros_like(den.store());
        opt.step(&mut den, &grads).unwrap();
        let after: Vec<Vec<f32>> = den
            .store()
            .iter()
            .map(|(_, p)| p.value.iter().cloned().collect())
            .collect();
        assert_eq!(snapshot, after);
    }

    #[test]
    fn adamw_skips_frozen_and_rejects_nan() {
        let cfg = DenoiserConfig::tiny(6);
        let mut den = init_denoiser::<f32>(&cfg, 4).unwrap();
        den.attach_lora(&LoraConfig { rank: 2, alpha: 4.0, ..Default::default() }, 0)
            .unwrap();
        let tcfg = TrainConfig::default();
        let mut opt = AdamW::new(&den, &tcfg);

        let frozen_id = den
            .store()
            .iter()
            .find(|(_, p)| !p.trainable)
            .map(|(id, _)| id)
            .unwrap();
        let frozen_before: Vec<u32> = den
            .store()
            .get(frozen_id)
            .iter()
            .map(|v| v.to_bits())
            .collect();

        let mut grads = Grads::zeros_like(den.store());
        // Nonzero gradient on a frozen tensor must be ignored.
        grads.get_mut(frozen_id).as_slice_mut().unwrap()[0] = 5.0;
        opt.step(&mut den, &grads).unwrap();
        let frozen_after: Vec<u32> = den
            .store()
            .get(frozen_id)
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(frozen_before, frozen_after);

        // NaN gradient on a trainable tensor errors with its name.
        let trainable_id = den
            .store()
            .iter()
            .find(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .unwrap();
        let name = den.store().meta(trainable_id).name.clone();
        grads.get_mut(trainable_id).as_slice_mut().unwrap()[0] = f32::NAN;
        let err = opt.step(&mut den, &grads).unwrap_err();
        assert!(err.to_string().contains(&name), "{err}");
    }

    #[test]
    fn train_zero_steps_is_a_no_op() {
        let cfg = DenoiserConfig::tiny(6);
        let den = init_denoiser::<f32>(&cfg, 8).unwrap();
        let before: Vec<Vec<f32>> = den
            .store()
            .iter()
            .map(|(_, p)| p.value.iter().cloned().collect())
            .collect();
        let source = ToySource::new(4, 3);
        let sched = linear_schedule(10, 1e-4, 0.02).unwrap();
        let tcfg = TrainConfig {
            max_steps: 0,
            batch_size: 2,
            ..Default::default()
        };
        let (state, rows) = train(den, &source, &sched, &tcfg, &mut NullObserver).unwrap();
        assert!(rows.is_empty());
        let after: Vec<Vec<f32>> = state
            .denoiser
            .store()
            .iter()
            .map(|(_, p)| p.value.iter().cloned().collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = DenoiserConfig::tiny(6);
        // Three samples so condition id and target shade are in bijection.
        let source = ToySource::new(4, 3);
        let sched = linear_schedule(20, 1e-3, 0.05).unwrap();
        let tcfg = TrainConfig {
            learning_rate: 0.005,
            max_steps: 300,
            batch_size: 2,
            eval_every: 100,
            seed: 5,
            ..Default::default()
        };
        let run = |seed: u64| {
            let den = init_denoiser::<f32>(&cfg, seed).unwrap();
            train(den, &source, &sched, &tcfg, &mut NullObserver).unwrap()
        };
        let (_, rows_a) = run(1);
        let (_, rows_b) = run(1);
        assert_eq!(rows_a, rows_b);

        let evals: Vec<f64> = rows_a.iter().filter_map(|r| r.eval).collect();
        assert!(
            evals.last().unwrap() < &(0.9 * evals[0]),
            "eval mse did not improve: {evals:?}"
        );
        let (head, tail) = smoothed_endpoints(
            &rows_a.iter().map(|r| r.loss).collect::<Vec<_>>(),
            50,
        );
        assert!(
            tail < head,
            "loss did not decrease: head {head}, tail {tail}"
        );
    }

    #[test]
    fn lora_training_conserves_base_tensors() {
        let cfg = DenoiserConfig::tiny(6);
        let mut den = init_denoiser::<f32>(&cfg, 2).unwrap();
        // Stand-in for a pretrained base: every tensor nonzero, including
        // the output conv, so gradients reach the adapters.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let ids: Vec<ParamId> = den.store().iter().map(|(id, _)| id).collect();
        for id in ids {
            fill_normal(den.store_mut().get_mut(id), 0.2, &mut rng);
        }
        den.attach_lora(&LoraConfig { rank: 2, alpha: 4.0, ..Default::default() }, 7)
            .unwrap();
        let base_bits: Vec<(String, Vec<u32>)> = den
            .store()
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(_, p)| (p.name.clone(), p.value.iter().map(|v| v.to_bits()).collect()))
            .collect();
        let source = ToySource::new(4, 4);
        let sched = linear_schedule(10, 1e-3, 0.05).unwrap();
        let tcfg = TrainConfig {
            max_steps: 15,
            batch_size: 2,
            eval_every: 10,
            ..Default::default()
        };
        let (state, _) = train(den, &source, &sched, &tcfg, &mut NullObserver).unwrap();
        let after: Vec<(String, Vec<u32>)> = state
            .denoiser
            .store()
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(_, p)| (p.name.clone(), p.value.iter().map(|v| v.to_bits()).collect()))
            .collect();
        assert_eq!(base_bits, after, "frozen tensors drifted during adaptation");
        // Adapters actually moved.
        let moved = state
            .denoiser
            .store()
            .iter()
            .filter(|(_, p)| p.trainable && p.name.ends_with(".lora_b"))
            .any(|(_, p)| p.value.iter().any(|v| *v != 0.0));
        assert!(moved, "adapters never received an update");
    }

    #[test]
    fn full_pipeline_gradcheck_through_masked_loss() {
        // Analytic gradients of masked_loss(denoiser(x_t)) against central
        // finite differences, 20 sampled parameters, f64, rel err < 1e-3.
        let cfg = DenoiserConfig::tiny(6);
        let mut den: Denoiser<f64> = init_denoiser(&cfg, 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let ids: Vec<ParamId> = den.store().iter().map(|(id, _)| id).collect();
        for id in &ids {
            fill_normal(den.store_mut().get_mut(*id), 0.25, &mut rng);
        }
        let spec = preset_layout(Task::Colorize, 2, 2);
        let mask = target_mask(&spec);
        let x_t = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| {
            ((c * 23 + y * 7 + x * 3) as f64 * 0.19).sin()
        });
        let eps = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| {
            ((c * 5 + y * 11 + x * 13) as f64 * 0.29).cos()
        });
        let cond = [1usize, 2];
        let t = 3;

        let loss_of = |den: &Denoiser<f64>| {
            let (eps_hat, _) = den.forward(&x_t, t, &cond).unwrap();
            masked_loss(&eps, &eps_hat, &mask, LossNorm::MaskedMean).unwrap()
        };
        let (eps_hat, cache) = den.forward(&x_t, t, &cond).unwrap();
        let d_out = masked_loss_grad(&eps, &eps_hat, &mask, LossNorm::MaskedMean);
        let mut grads = Grads::zeros_like(den.store());
        den.backward(&cache, &d_out, &mut grads);

        let mut picked = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = 1e-5;
        while picked < 20 {
            let id = ids[rng.gen_range(0..ids.len())];
            let n = den.store().get(id).len();
            let flat = rng.gen_range(0..n);
            let orig = den.store().get(id).as_slice().unwrap()[flat];
            den.store_mut().get_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
            let lp = loss_of(&den);
            den.store_mut().get_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
            let lm = loss_of(&den);
            den.store_mut().get_mut(id).as_slice_mut().unwrap()[flat] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let got = grads.get(id).as_slice().unwrap()[flat];
            let denom = fd.abs().max(got.abs()).max(1e-8);
            assert!(
                ((got - fd) / denom).abs() < 1e-3,
                "{}[{flat}]: analytic {got} vs fd {fd}",
                den.store().meta(id).name
            );
            picked += 1;
        }
    }

    #[test]
    fn optimizer_state_round_trip_resumes_exactly() {
        let cfg = DenoiserConfig::tiny(6);
        let source = ToySource::new(4, 4);
        let sched = linear_schedule(10, 1e-3, 0.05).unwrap();
        let mk_cfg = |steps: u64| TrainConfig {
            max_steps: steps,
            batch_size: 2,
            eval_every: 50,
            seed: 9,
            ..Default::default()
        };

        // Straight-through run to 30 steps.
        let den = init_denoiser::<f32>(&cfg, 6).unwrap();
        let (straight, _) = train(den, &source, &sched, &mk_cfg(30), &mut NullObserver).unwrap();

        // Run to 10, persist, reload, continue to 30.
        let den = init_denoiser::<f32>(&cfg, 6).unwrap();
        let (state10, _) = train(den, &source, &sched, &mk_cfg(10), &mut NullObserver).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let model_path = dir.path().join("m.ckpt");
        let state_path = dir.path().join("s.state");
        state10.denoiser.save(&model_path, state10.step, None).unwrap();
        state10.save_optimizer(&state_path).unwrap();

        let (reloaded, _) = Denoiser::load(&model_path).unwrap();
        let mut resumed_state = TrainState::new(reloaded, &mk_cfg(30));
        resumed_state.load_optimizer(&state_path).unwrap();
        let (resumed, _) =
            resume(resumed_state, &source, &sched, &mk_cfg(30), &mut NullObserver).unwrap();

        for ((_, a), (_, b)) in straight
            .denoiser
            .store()
            .iter()
            .zip(resumed.denoiser.store().iter())
        {
            assert_eq!(a.value, b.value, "parameter {} diverged on resume", a.name);
        }
    }
}
