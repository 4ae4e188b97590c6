"""
Cross-entropy pretraining and self-critical fine-tuning
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, NumericalError
from models.captioner import PAD, CaptionModel, Vocabulary
from models.tensor import Parameter, RngState, Tensor, log_softmax, no_grad
from services.caption_metrics import CaptionScorer
from services.checkpoint_service import save_checkpoint
from services.dataset_service import CaptionDataset, DatasetService

logger = logging.getLogger(__name__)

SHUFFLE_STREAM = 2
ROUTING_STREAM = 3
SCST_STREAM = 4

CE_MILESTONES = ((10, 2e-5), (12, 4e-6))
SCST_BASE_LR = 5e-6
SCST_MILESTONES = ((35, 2.5e-6), (40, 5e-7), (45, 2.5e-7), (50, 5e-8))


def build_model(run_config, vocab_size: int) -> CaptionModel:
    return CaptionModel(run_config.encoder_config(), vocab_size, run_config.feature_channels,
                        decoder_layers=run_config.decoder_layers, max_len=run_config.max_len,
                        seed=run_config.seed)


# losses

def ce_loss(logits: Tensor, targets: np.ndarray, lengths: Optional[np.ndarray] = None) -> Tensor:
    """
    -sum_t log p(y_t | y_<t) over valid positions, divided by the batch size.

    Valid positions are the non-PAD targets, or the first ``lengths[b]``
    targets of each row when lengths are given.
    """
    targets = np.asarray(targets, dtype=np.int64)
    batch, steps = targets.shape
    if lengths is not None:
        valid = np.arange(steps)[None, :] < np.asarray(lengths)[:, None]
    else:
        valid = targets != PAD
    if not valid.any():
        raise ValueError('cross-entropy over a batch with no valid target positions')
    rows, cols = np.nonzero(valid)
    picked = log_softmax(logits, axis=-1)[rows, cols, targets[rows, cols]]
    return -picked.sum() * (1.0 / batch)


def token_accuracy(logits: Tensor, targets: np.ndarray) -> float:
    """Next-token accuracy over non-PAD targets given the gold prefix"""
    valid = targets != PAD
    if not valid.any():
        return 0.0
    predicted = np.argmax(logits.numpy(), axis=-1)
    return float((predicted[valid] == targets[valid]).mean())


def scst_advantages(rewards: np.ndarray, baseline: str = 'mean') -> np.ndarray:
    """
    r - b per sequence; rewards are [..., k] with the k sequences of one
    sample on the last axis.

    mean: b is the mean reward of the k sequences.
    leave_one_out: b excludes the sequence being scored.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    k = rewards.shape[-1]
    if k < 2:
        raise ConfigError(f'self-critical training needs k >= 2 sequences per sample, got {k}')
    total = rewards.sum(axis=-1, keepdims=True)
    if baseline == 'mean':
        return rewards - total / k
    if baseline == 'leave_one_out':
        return rewards - (total - rewards) / (k - 1)
    raise ConfigError(f'unknown baseline {baseline!r}')


def scst_surrogate(log_probs: Tensor, rewards: np.ndarray, baseline: str = 'mean') -> Tensor:
    """
    -(1/k) sum_i (r_i - b) log p(y_i), averaged over samples.

    Its gradient is the self-critical policy-gradient estimate.
    """
    advantages = scst_advantages(rewards, baseline)
    if log_probs.shape != advantages.shape:
        raise ValueError(f'log-probs {log_probs.shape} do not match rewards {advantages.shape}')
    k = advantages.shape[-1]
    rows = advantages.size // k
    weights = Tensor(advantages, dtype=log_probs.dtype)
    return -(log_probs * weights).sum() * (1.0 / (k * rows))


def scst_step(model: CaptionModel, features: np.ndarray, rows: Sequence[int], scorer: CaptionScorer,
              vocab: Vocabulary, k: int, source: str = 'beam', baseline: str = 'mean',
              rng: Optional[RngState] = None, routing_rng: Optional[RngState] = None) -> Tuple[Tensor, float]:
    """
    One self-critical loss on a batch.

    The k sequences per sample come from beam search (or sampling) on a
    detached copy of the encoder memory; they are then rescored with the graph
    attached so the surrogate loss carries the gradient.

    Args:
        rows: indices of the batch samples in the scorer's reference corpus

    Returns:
        (surrogate loss, mean reward)
    """
    if k < 2:
        raise ConfigError(f'self-critical training needs k >= 2, got {k}')
    memory, _ = model.encode(features, rng=routing_rng)
    with no_grad():
        result = model.generate(memory.detach(), mode=source, k=k, rng=rng)
    local_rows, hyps = result.flat()
    if len(hyps) != k * len(rows):
        raise ConfigError(f'decoding returned {len(hyps)} sequences for {len(rows)} samples with k={k}')
    captions = [vocab.decode(h.tokens) for h in hyps]
    corpus_rows = [rows[r] for r in local_rows]
    rewards = scorer.reward(captions, corpus_rows).reshape(len(rows), k)
    log_probs = model.sequence_log_prob(memory, local_rows, [h.tokens for h in hyps])
    loss = scst_surrogate(log_probs.reshape(len(rows), k), rewards, baseline)
    return loss, float(rewards.mean())


# optimisation

@dataclass
class OptimState:
    """Adam moments per parameter, in parameter order"""

    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Parameter], **hyper) -> 'OptimState':
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **hyper)


def check_finite(params: Sequence[Parameter], grads: Sequence[Optional[np.ndarray]]):
    for param, grad in zip(params, grads):
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NumericalError(f'non-finite gradient for parameter {param.name or "<unnamed>"}')


def clip_grad_norm(grads: Sequence[Optional[np.ndarray]], max_norm: float) -> Tuple[List[Optional[np.ndarray]], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``"""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None)))
    if total <= max_norm or total == 0.0:
        return list(grads), total
    scale = max_norm / total
    return [g * scale if g is not None else None for g in grads], total


def adam_update(params: Sequence[Parameter], grads: Sequence[Optional[np.ndarray]], state: OptimState, lr: float):
    """Bias-corrected Adam step; a missing gradient counts as zero"""
    if len(params) != len(state.m):
        raise ValueError(f'optimizer state holds {len(state.m)} parameters, got {len(params)}')
    check_finite(params, grads)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ValueError(f'gradient {grad.shape} does not match parameter {param.name} {param.shape}')
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)


class AdamOptimizer:
    """Adam over a fixed parameter list with global-norm gradient clipping"""

    def __init__(self, params: Sequence[Parameter], clip_norm: Optional[float] = 5.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.clip_norm = clip_norm
        self.state = OptimState.for_params(self.params, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, lr: float) -> float:
        """Returns the gradient norm before clipping"""
        grads = [p.grad for p in self.params]
        check_finite(self.params, grads)
        norm = 0.0
        if self.clip_norm:
            grads, norm = clip_grad_norm(grads, self.clip_norm)
        adam_update(self.params, grads, self.state, lr)
        return norm

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()


# schedule

@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant learning rate per epoch"""

    phase: str = 'ce'
    warmup: int = 4
    peak: float = 1e-4
    scale: float = 1.0

    def lr(self, epoch: int) -> float:
        return schedule_lr(self.phase, epoch, self.warmup, self.peak, self.scale)


def schedule_lr(phase: str, epoch: int, warmup: int = 4, peak: float = 1e-4, scale: float = 1.0) -> float:
    """
    CE: linear warmup peak*(e+1)/warmup, then peak, 2e-5 from epoch 10 and
    4e-6 from epoch 12. SCST: 5e-6 with drops at epochs 35, 40, 45 and 50.
    Every value is multiplied by ``scale``.
    """
    if epoch < 0:
        raise ValueError(f'epoch must be >= 0, got {epoch}')
    if phase == 'ce':
        lr = peak * (epoch + 1) / warmup if epoch < warmup else peak
        for start, value in CE_MILESTONES:
            if epoch >= start:
                lr = value
    elif phase == 'scst':
        lr = SCST_BASE_LR
        for start, value in SCST_MILESTONES:
            if epoch >= start:
                lr = value
    else:
        raise ConfigError(f'unknown training phase {phase!r}')
    return lr * scale


class TrainingService:
    """Runs the training phases of one run and writes its logs and checkpoints"""

    def __init__(self, run_config, run_dir: Union[str, Path], model: Optional[CaptionModel] = None):
        self.config = run_config
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.datasets = DatasetService(run_config.data_dir)
        self.vocab = self.datasets.load_vocabulary()
        self.train_set: CaptionDataset = self.datasets.load_split('train')
        if len(self.train_set) == 0:
            raise ConfigError('the training split is empty')
        self.model = model or build_model(run_config, len(self.vocab))
        self.optimizer = AdamOptimizer(self.model.parameters(), run_config.clip_norm,
                                       run_config.adam_beta1, run_config.adam_beta2, run_config.adam_eps)
        self.shuffle_rng = RngState(run_config.seed, SHUFFLE_STREAM)
        self.routing_rng = RngState(run_config.seed, ROUTING_STREAM)
        self.scst_rng = RngState(run_config.seed, SCST_STREAM)
        self.scorer: Optional[CaptionScorer] = None
        self.global_step = 0
        self._batches = iter(())
        self.log_path = self.run_dir / 'train.log'

    def _next_batch(self, batch_size: int) -> np.ndarray:
        while True:
            for indices in self._batches:
                if len(indices):
                    return indices
            self._batches = self.train_set.batches(batch_size, self.shuffle_rng)

    def _apply(self, loss: Tensor, lr: float):
        if not np.isfinite(loss.item()):
            raise NumericalError(f'non-finite loss at step {self.global_step}')
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step(lr)

    def ce_step(self, lr: float) -> Dict[str, float]:
        indices = self._next_batch(self.config.batch_size)
        features, batch = self.train_set.batch(indices, self.vocab)
        logits, _ = self.model.forward(features, batch.inputs, rng=self.routing_rng)
        loss = ce_loss(logits, batch.targets)
        self._apply(loss, lr)
        return {'loss': loss.item(), 'accuracy': token_accuracy(logits, batch.targets)}

    def scst_train_step(self, lr: float) -> Dict[str, float]:
        if self.scorer is None:
            self.scorer = CaptionScorer(self.train_set.references())
        indices = self._next_batch(self.config.scst_batch_size)
        loss, reward = scst_step(self.model, self.train_set.features[indices], list(indices), self.scorer,
                                 self.vocab, self.config.scst_k, source=self.config.scst_source,
                                 baseline=self.config.scst_baseline, rng=self.scst_rng,
                                 routing_rng=self.routing_rng)
        self._apply(loss, lr)
        return {'loss': loss.item(), 'reward': reward}

    def run_phase(self, phase: str, steps: int) -> Dict[str, object]:
        """
        Train ``steps`` steps of one phase.

        Returns:
            Dictionary with the last loss and the phase's step count
        """
        schedule = Schedule(phase, self.config.warmup_epochs, self.config.peak_lr, self.config.lr_scale)
        self.model.train()
        self._batches = iter(())
        last: Dict[str, float] = {}
        with open(self.log_path, 'a', encoding='utf-8') as log:
            for step in range(steps):
                lr = schedule.lr(step // self.config.epoch_steps)
                last = self.ce_step(lr) if phase == 'ce' else self.scst_train_step(lr)
                self.global_step += 1
                reward = f"{last['reward']:.6f}" if 'reward' in last else '-'
                log.write(f"{self.global_step} {last['loss']:.6f} {lr:.6e} {reward}\n")
                if self.global_step % self.config.log_every == 0:
                    logger.info(f"{phase} step {self.global_step}: loss {last['loss']:.4f} lr {lr:.2e}")
                if self.global_step % self.config.checkpoint_every == 0:
                    self.save(self.run_dir / f'checkpoint-{self.global_step:06d}.zip')
        return {'phase': phase, 'steps': steps, **last}

    def train(self, phase: str = 'both', steps: Optional[int] = None) -> Dict[str, object]:
        """
        Run CE, SCST or both; ``steps`` overrides the per-phase step counts.

        Returns:
            Dictionary with success flag, message, checkpoint path and phase results
        """
        if phase not in ('ce', 'scst', 'both'):
            raise ConfigError(f'phase must be ce, scst or both, got {phase!r}')
        phases = ['ce', 'scst'] if phase == 'both' else [phase]
        results = []
        for name in phases:
            count = steps if steps is not None else getattr(self.config, f'{name}_steps')
            logger.info(f"Starting {name} phase for {count} steps")
            results.append(self.run_phase(name, count))
        checkpoint = self.save(self.run_dir / 'model.zip')
        return {'success': True, 'message': f'Trained {self.global_step} steps', 'checkpoint': str(checkpoint),
                'phases': results}

    def save(self, path: Path) -> Path:
        save_checkpoint(path, self.model)
        self.config.write(path.parent / 'config.txt')
        return path
