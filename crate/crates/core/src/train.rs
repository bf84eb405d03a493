//! Optimization loop: triplet views through one network, partial
//! cross-entropy on each branch, pseudo-label and boundary supervision on the
//! selected branches, Adam with per-epoch exponential learning-rate decay.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bap::{bap_forward_with_losses, BapParams};
use crate::config::{LossConfig, TrainConfig};
use crate::data::{Case, TrainSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate_cases, DiceTable, NetworkPredictor};
use crate::model::checkpoint::{self, atomic_write};
use crate::model::{stack_images, Adam, Checkpoint, Grads, NetworkSpec, UNet};
use crate::tas::{augment_triplet, partial_cross_entropy_grad, permute_patches_channels};
use crate::types::Image;

/// Batch-mean loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub l_tas: f64,
    pub l_pl: f64,
    pub l_bd: f64,
    pub total: f64,
}

/// `λ1 L_TAS + λ2 L_PL + λ3 L_BD`. Any non-finite term is an error naming it.
pub fn total_loss(l_tas: f64, l_pl: f64, l_bd: f64, cfg: &LossConfig) -> Result<f64> {
    for (term, value) in [("L_TAS", l_tas), ("L_PL", l_pl), ("L_BD", l_bd)] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, value });
        }
    }
    Ok(cfg.lambda1 * l_tas + cfg.lambda2 * l_pl + cfg.lambda3 * l_bd)
}

/// Independent stream of the run seed; stream 0 is left to weight init.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + 1);
    rng
}

fn cast64(v: ArrayView3<'_, f32>) -> Array3<f64> {
    v.mapv(f64::from)
}

/// Loss terms and parameter gradients for one batch. Each sample draws its
/// own augmentation from `rng`. Nothing is modified.
pub fn compute_gradients<R: Rng + ?Sized>(
    net: &UNet,
    batch: &[&TrainSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(StepMetrics, Grads)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidValue("empty batch".into()));
    }
    let mut sample_rngs: Vec<ChaCha8Rng> = (0..n).map(|_| ChaCha8Rng::seed_from_u64(rng.random())).collect();
    let mut views = Vec::with_capacity(n);
    for (s, r) in batch.iter().zip(sample_rngs.iter_mut()) {
        views.push(augment_triplet(&s.image, &s.scribble, &cfg.augment, r)?);
    }
    let inputs: Vec<Image> = views
        .iter()
        .map(|v| v.cutout.clone())
        .chain(views.iter().map(|v| v.jigsaw.clone()))
        .chain(views.iter().map(|v| v.intensity.clone()))
        .collect();
    let cache = net.forward_train(&stack_images(&inputs)?)?;
    let probs = cache.probs();
    let mut dprobs = Array4::<f32>::zeros(probs.dim());

    let loss = &cfg.loss;
    let params = BapParams::from_config(cfg);
    let selected: Vec<usize> = cfg.bap.pl_branches.iter().map(|b| b.index()).collect();
    let scale = 1.0 / n as f64;
    let mut sums = StepMetrics::default();
    for (b, (sample, view)) in batch.iter().zip(&views).enumerate() {
        let inverse = view.jigsaw_spec.inverse();
        let preds = [
            cast64(probs.slice(s![b, .., .., ..])),
            permute_patches_channels(probs.slice(s![n + b, .., .., ..]), &inverse)?.mapv(f64::from),
            cast64(probs.slice(s![2 * n + b, .., .., ..])),
        ];
        let mut ce = [0.0f64; 3];
        let mut grads: Vec<Array3<f64>> = Vec::with_capacity(3);
        for (t, p) in preds.iter().enumerate() {
            let (l, g) = partial_cross_entropy_grad(p.view(), &sample.scribble, loss.ce_reduction)?;
            ce[t] = l;
            grads.push(g * loss.lambda1);
        }
        if let Some(&value) = ce.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { term: "L_TAS", value });
        }
        let sel_views: Vec<ArrayView3<'_, f64>> = selected.iter().map(|&t| preds[t].view()).collect();
        let sel_losses: Vec<f64> = selected.iter().map(|&t| ce[t]).collect();
        let bap = bap_forward_with_losses(&sel_views, &sel_losses, &params, &mut sample_rngs[b])?;
        for (slot, &t) in selected.iter().enumerate() {
            if loss.lambda2 != 0.0 {
                grads[t].scaled_add(loss.lambda2, &bap.grad_pl[slot]);
            }
            if loss.lambda3 != 0.0 {
                grads[t].scaled_add(loss.lambda3, &bap.grad_bd[slot]);
            }
        }
        sums.l_tas += ce.iter().sum::<f64>();
        sums.l_pl += bap.l_pl;
        sums.l_bd += bap.l_bd;

        // The jigsaw branch gradient goes back through the forward permutation.
        grads[1] = permute_patches_channels(grads[1].view(), &view.jigsaw_spec)?;
        for (t, g) in grads.iter().enumerate() {
            dprobs
                .slice_mut(s![t * n + b, .., .., ..])
                .zip_mut_with(g, |d, &v| *d = (v * scale) as f32);
        }
    }
    let l_tas = sums.l_tas * scale;
    let l_pl = sums.l_pl * scale;
    let l_bd = sums.l_bd * scale;
    let total = total_loss(l_tas, l_pl, l_bd, loss)?;
    let grads = net.backward(&cache, &dprobs);
    Ok((StepMetrics { l_tas, l_pl, l_bd, total }, grads))
}

/// Network, optimizer and progress counters.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: UNet,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_score: Option<f64>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let net = UNet::new(NetworkSpec::from_config(cfg), cfg.optim.seed);
        let adam = Adam::new(net.params());
        Self { net, adam, epoch: 0, best_score: None }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let net = ck.network()?;
        let adam = ck.optimizer.clone().unwrap_or_else(|| Adam::new(net.params()));
        Ok(Self { net, adam, epoch: ck.epoch, best_score: ck.best_score })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig, with_optimizer: bool) -> Checkpoint {
        Checkpoint {
            spec: *self.net.spec(),
            params: self.net.params().clone(),
            optimizer: with_optimizer.then(|| self.adam.clone()),
            epoch: self.epoch,
            best_score: self.best_score,
            config: cfg.to_toml_string(),
            config_hash: cfg.hash(),
        }
    }
}

/// One Adam step. On error (including a non-finite loss) the state is untouched.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[&TrainSample],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepMetrics> {
    let (metrics, grads) = compute_gradients(&state.net, batch, cfg, rng)?;
    if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient(state.net.params().tensors[i].name.clone()));
    }
    state.adam.update(state.net.params_mut(), &grads, lr);
    Ok(metrics)
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    /// Continue from `out_dir/last.ckpt` when present.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub metrics: StepMetrics,
    pub val: Option<DiceTable>,
}

#[derive(Debug)]
pub struct FitReport {
    pub records: Vec<EpochRecord>,
    pub state: TrainState,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: PathBuf,
}

pub const EPOCH_LOG: &str = "epochs.csv";
pub const STEP_LOG: &str = "steps.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn epoch_header(num_classes: usize) -> String {
    let dice: Vec<String> = crate::eval::class_names(num_classes).iter().map(|c| format!("dice_{c}")).collect();
    format!("epoch,lr,l_tas,l_pl,l_bd,total,{},dice_mean\n", dice.join(","))
}

const STEP_HEADER: &str = "epoch,step,lr,l_tas,l_pl,l_bd,total\n";

fn epoch_row(r: &EpochRecord, num_classes: usize) -> String {
    let m = &r.metrics;
    let mut row = format!("{},{},{},{},{},{}", r.epoch, r.lr, m.l_tas, m.l_pl, m.l_bd, m.total);
    match &r.val {
        Some(t) => {
            for v in &t.mean {
                let _ = write!(row, ",{v}");
            }
            let _ = write!(row, ",{}", t.avg);
        }
        None => row.push_str(&",".repeat(num_classes)),
    }
    row.push('\n');
    row
}

/// Keeps the header and rows whose leading epoch is below `epoch`.
fn truncate_log(path: &Path, header: &str, epoch: usize) -> Result<String> {
    let mut out = header.to_owned();
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let e: Option<usize> = line.split(',').next().and_then(|v| v.parse().ok());
            if e.is_some_and(|e| e < epoch) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Trains on `train` for `cfg.optim.epochs` epochs, validating on `val`.
///
/// Writes into `opts.out_dir`: `config.toml` (effective config), `epochs.csv`,
/// `steps.csv`, `last.ckpt` after every epoch and `best.ckpt` whenever the
/// validation mean foreground Dice improves. With zero epochs only the
/// initial checkpoint is written.
pub fn fit(train: &[TrainSample], val: &[Case], cfg: &TrainConfig, opts: &FitOptions) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() && cfg.optim.epochs > 0 {
        return Err(Error::Dataset("no training slices".into()));
    }
    let out = &opts.out_dir;
    fs::create_dir_all(out)?;
    cfg.write(&out.join(CONFIG_SNAPSHOT))?;
    let k = cfg.model.num_classes;
    let last_path = out.join(LAST_CHECKPOINT);
    let best_path = out.join(BEST_CHECKPOINT);

    let mut state = if opts.resume && last_path.exists() {
        let ck = checkpoint::load(&last_path, Some(&NetworkSpec::from_config(cfg)))?;
        if ck.config_hash != cfg.hash() {
            log::warn!("resuming {} with a different configuration", last_path.display());
        }
        log::info!("resuming after epoch {}", ck.epoch);
        TrainState::from_checkpoint(&ck)?
    } else {
        TrainState::new(cfg)
    };
    let mut epoch_log = truncate_log(&out.join(EPOCH_LOG), &epoch_header(k), state.epoch)?;
    let mut step_log = truncate_log(&out.join(STEP_LOG), STEP_HEADER, state.epoch)?;
    atomic_write(&out.join(EPOCH_LOG), epoch_log.as_bytes())?;
    atomic_write(&out.join(STEP_LOG), step_log.as_bytes())?;
    if state.epoch == 0 {
        checkpoint::save(&last_path, &state.checkpoint(cfg, true))?;
    }

    let mut records = Vec::new();
    let batch_size = cfg.optim.batch_size;
    for epoch in state.epoch..cfg.optim.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut rng = stream_rng(cfg.optim.seed, epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = StepMetrics::default();
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train[i]).collect();
            let m = train_step(&mut state, &batch, cfg, lr, &mut rng)?;
            let _ = writeln!(step_log, "{epoch},{step},{lr},{},{},{},{}", m.l_tas, m.l_pl, m.l_bd, m.total);
            sum.l_tas += m.l_tas;
            sum.l_pl += m.l_pl;
            sum.l_bd += m.l_bd;
            steps += 1;
        }
        let s = steps.max(1) as f64;
        let (l_tas, l_pl, l_bd) = (sum.l_tas / s, sum.l_pl / s, sum.l_bd / s);
        let metrics = StepMetrics { l_tas, l_pl, l_bd, total: total_loss(l_tas, l_pl, l_bd, &cfg.loss)? };
        state.epoch = epoch + 1;

        let validate = !val.is_empty() && (state.epoch % cfg.optim.val_every == 0 || state.epoch == cfg.optim.epochs);
        let val_table = if validate {
            let predictor = NetworkPredictor { net: &state.net, image_size: cfg.model.image_size };
            Some(evaluate_cases(&predictor, val, k)?)
        } else {
            None
        };
        if let Some(t) = &val_table {
            if state.best_score.is_none_or(|b| t.avg > b) {
                state.best_score = Some(t.avg);
                checkpoint::save(&best_path, &state.checkpoint(cfg, false))?;
            }
        }
        let record = EpochRecord { epoch, lr, metrics, val: val_table };
        log::info!(
            "epoch {epoch} lr {lr:.3e} L_TAS {:.4} L_PL {:.4} L_BD {:.4} total {:.4}{}",
            metrics.l_tas,
            metrics.l_pl,
            metrics.l_bd,
            metrics.total,
            record.val.as_ref().map(|t| format!(" val Dice {:.4}", t.avg)).unwrap_or_default()
        );
        epoch_log.push_str(&epoch_row(&record, k));
        atomic_write(&out.join(EPOCH_LOG), epoch_log.as_bytes())?;
        atomic_write(&out.join(STEP_LOG), step_log.as_bytes())?;
        checkpoint::save(&last_path, &state.checkpoint(cfg, true))?;
        records.push(record);
    }
    if val.is_empty() && cfg.optim.epochs > 0 {
        checkpoint::save(&best_path, &state.checkpoint(cfg, false))?;
    }
    Ok(FitReport {
        records,
        best_checkpoint: best_path.exists().then_some(best_path),
        last_checkpoint: last_path,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert!((total_loss(1.0, 1.0, 1.0, &cfg).unwrap() - 1.4).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg).unwrap(), 0.0);
        let tas_only = LossConfig { lambda2: 0.0, lambda3: 0.0, ..cfg };
        assert_eq!(total_loss(0.7, 5.0, 9.0, &tas_only).unwrap(), 0.7);
        let err = total_loss(1.0, f64::NAN, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { term: "L_PL", .. }));
        assert!(err.to_string().contains("L_PL"));
        assert!(matches!(total_loss(f64::INFINITY, 0.0, 0.0, &cfg), Err(Error::NonFiniteLoss { term: "L_TAS", .. })));
    }

    #[test]
    fn streams_differ() {
        let a: u64 = stream_rng(1, 0).random();
        let b: u64 = stream_rng(1, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, stream_rng(1, 0).random::<u64>());
    }
}
