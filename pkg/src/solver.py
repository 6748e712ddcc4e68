import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from omegaconf import OmegaConf

from src.data.datasets import loader
from src.diffusion import NoiseSchedule
from src.model_serializer import SERIALIZE_KEY_HISTORY, load_checkpoint, serialize
from src.objectives import objective_step, parse_objective
from src.optim import AdamW, clip_grad_norm, cosine_lr
from src.seeding import rng_stream
from src.utils import LogProgress, bold, write_csv

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ('step', 'lr', 'loss')
TIMING_COLUMNS = ('step', 'wall_clock')


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, loss, config):
        super().__init__(f'non-finite loss {loss} at step {step}\nconfig:\n{config}')
        self.step = step
        self.loss = loss


@dataclass
class TrainConfig:
    objective: str = 'mdc'
    omega_lower: float = 0.5
    omega_upper: float = 1.0
    clamp_omega: bool = False
    allow_small_omega: bool = False
    batch_size: int = 32
    steps: int = 5000
    lr: float = 3e-4
    warmup: int = 200
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    clip_grad_norm: float = 0.0
    seed: int = 0
    checkpoint_every: int = 500
    num_prints: int = 10

    def __post_init__(self):
        self.parsed = parse_objective(self.objective)
        if self.warmup > self.steps:
            raise ValueError(f'warmup ({self.warmup}) must not exceed steps ({self.steps})')
        if self.batch_size < 1:
            raise ValueError(f'batch size must be positive, got {self.batch_size}')
        self.schedule = NoiseSchedule(self.omega_lower, self.omega_upper)
        if self.parsed.uses_schedule:
            self.schedule = self.schedule.validate_for_training(clamp=self.clamp_omega,
                                                                  allow_small=self.allow_small_omega)

    @classmethod
    def from_args(cls, args):
        exp = args.experiment
        return cls(objective=exp.objective, omega_lower=exp.omega_lower, omega_upper=exp.omega_upper,
                   clamp_omega=args.clamp_omega, allow_small_omega=bool(exp.get('allow_small_omega', False)),
                   batch_size=args.batch_size, steps=args.steps, lr=args.lr,
                   warmup=args.warmup, weight_decay=args.weight_decay, beta1=args.beta1, beta2=args.beta2,
                   clip_grad_norm=args.clip_grad_norm, seed=args.seed, checkpoint_every=args.checkpoint_every,
                   num_prints=args.num_prints)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    step: int = 0
    history: list = field(default_factory=list)


class Solver(object):
    def __init__(self, train_set, model, vocab, config, out_dir, restart=False, config_dump=''):
        self.train_set = train_set
        self.model = model
        self.vocab = vocab
        self.config = config
        self.objective = config.parsed
        self.out_dir = Path(out_dir)
        self.checkpoint_file = self.out_dir / 'checkpoint.mdc'
        self.metrics_file = self.out_dir / 'metrics.csv'
        self.timing_file = self.out_dir / 'timing.csv'
        self.restart = restart
        self.config_dump = config_dump
        self.optimizer = AdamW(model.named_parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
                               weight_decay=config.weight_decay)
        self.state = TrainState()
        self.timings = []
        self._reset()

    def _reset(self):
        if self.restart or not self.checkpoint_file.exists():
            return
        logger.info(f'Loading checkpoint model: {self.checkpoint_file}')
        package = load_checkpoint(self.checkpoint_file)
        extra = package.extra
        if extra.get('vocab_hash') != self.vocab.hash():
            raise ValueError(f'checkpoint vocabulary {extra.get("vocab_hash")} does not match corpus '
                             f'vocabulary {self.vocab.hash()}')
        self.model.load_state_dict(package.model_state())
        self.optimizer.load_state_dict(package.optimizer_state(), extra['step'])
        self.state = TrainState(step=int(extra['step']), history=list(extra[SERIALIZE_KEY_HISTORY]))

    def lr_at(self, step):
        c = self.config
        return cosine_lr(step, c.steps, c.lr, c.warmup)

    def extra(self):
        return {
            'step': self.state.step,
            'objective': self.objective.label,
            'attention_mode': self.objective.attention_mode,
            'config': self.config.to_dict(),
            'vocab_hash': self.vocab.hash(),
            SERIALIZE_KEY_HISTORY: self.state.history,
        }

    def _checkpoint(self):
        for name, p in self.model.named_parameters():
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteLossError(self.state.step, f'non-finite parameter {name}', self.config_dump)
        serialize(self.checkpoint_file, self.model, self.optimizer, self.extra())
        write_csv(self.metrics_file, METRICS_COLUMNS, [[m[k] for k in METRICS_COLUMNS] for m in self.state.history])
        write_csv(self.timing_file, TIMING_COLUMNS, self.timings, append=self.timing_file.exists())
        self.timings = []

    def train_step(self, batch, step):
        """One optimizer update on `batch`; returns the batch loss."""
        c = self.config
        rng = rng_stream(c.seed, 'corruption', step)
        dropout_seed = (c.seed, step) if self.model.dropout > 0 else None
        result = objective_step(self.objective, self.model, batch['images'], batch['captions'], rng, c.schedule,
                                self.vocab, dropout_seed=dropout_seed)
        if not math.isfinite(result.loss):
            raise NonFiniteLossError(step, result.loss, self.config_dump)
        grads = result.grads
        if c.clip_grad_norm:
            grads, norm = clip_grad_norm(grads, c.clip_grad_norm)
            logger.debug('step %d gradient norm %.4f', step, norm)
        lr = self.lr_at(step)
        self.optimizer.step(grads, lr)
        return result.loss, lr

    def train(self):
        c = self.config
        if self.state.history:
            logger.info('Replaying metrics from previous run')
            logger.info(f'Resuming at step {self.state.step} with last loss {self.state.history[-1]["loss"]:.5f}')

        logger.info('-' * 70)
        n_params = sum(p.data.size for p in self.model.parameters())
        logger.info(f'Objective {self.objective.label} | trainable parameters: {n_params}')

        self.model.train()
        data = loader(self.train_set, c.batch_size, c.seed, c.steps, start_step=self.state.step)
        logprog = LogProgress(logger, data, updates=c.num_prints, name='Train')
        start = time.time()
        total = 0.0
        for i, batch in enumerate(logprog):
            step = self.state.step
            loss, lr = self.train_step(batch, step)
            self.state.history.append({'step': step, 'lr': lr, 'loss': loss})
            self.timings.append([step, time.time() - start])
            self.state.step = step + 1
            total += loss
            logprog.update(loss=format(total / (i + 1), '.5f'))
            if self.state.step % c.checkpoint_every == 0:
                self._checkpoint()
        self.model.eval()
        self._checkpoint()
        if self.state.history:
            logger.info(bold(f'Train Summary | step {self.state.step} | Time {time.time() - start:.2f}s | '
                             f'last loss {self.state.history[-1]["loss"]:.5f}'))
        return self.state.history


def config_dump(args):
    return OmegaConf.to_yaml(args) if OmegaConf.is_config(args) else str(args)
