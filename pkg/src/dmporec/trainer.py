"""SFT and DMPO training stages with cosine learning-rate decay."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datapipe import DatasetSplit, PreferenceSample, pair_prompt, render_pair
from .errors import ConfigError, NumericError
from .objectives import DmpoConfig, dmpo_loss, dpo_loss, sft_loss
from .seqmodel import PolicyPair, TransformerLM
from .tokenizer import TokenSequence, Vocabulary, encode

log = logging.getLogger(__name__)

STAGES = ("sft", "dmpo", "sft_then_dmpo", "dmpo_only")
PROMPT_MODES = ("per-pair", "shared")
LR_SWEEP_SET = (1e-3, 1e-4, 1e-5, 1e-6)


@dataclass
class TrainConfig:
    stage: str = "sft_then_dmpo"
    lr0: float = 1e-3
    lr_floor: float = 0.0
    sft_epochs: int = 10
    dmpo_epochs: int = 10
    sft_steps: int | None = None
    dmpo_steps: int | None = None
    batch_size: int = 8
    seed: int = 0
    beta: float = 0.1
    k: int = 1
    prompt_mode: str = "per-pair"
    preference_loss: str = "dmpo"
    optimizer: str = "adam"
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 1.0
    eval_every: int = 0
    early_stopping: bool = False
    patience: int = 3
    lr_sweep: tuple[float, ...] = LR_SWEEP_SET
    strict_lr: bool = False

    def __post_init__(self):
        self.lr_sweep = tuple(self.lr_sweep)
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be >= 0")
        if self.strict_lr and self.lr0 not in self.lr_sweep:
            raise ConfigError(f"lr0 {self.lr0} not in the sweep set {self.lr_sweep}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"prompt_mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.preference_loss not in ("dmpo", "dpo"):
            raise ConfigError("preference_loss must be dmpo or dpo")
        if self.preference_loss == "dpo" and self.k != 1:
            raise ConfigError("dpo needs k == 1")
        for name in ("sft_steps", "dmpo_steps"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        DmpoConfig(self.beta, self.k)


@dataclass
class TrainLogEntry:
    step: int
    stage: str
    loss: float
    chosen_reward: float
    rejected_reward: float
    margin: float
    lr: float
    wall_time: float
    grad_norm: float
    clipped: bool
    valid_auc: float | None = None


@dataclass
class StageResult:
    stage: str
    steps: int
    log: list[TrainLogEntry]
    initial: dict
    final: dict

    def log_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e)) + "\n" for e in self.log)


def cosine_lr(step: int, total_steps: int, lr0: float, lr_floor: float = 0.0) -> float:
    if step >= total_steps:
        return lr_floor
    return lr_floor + (lr0 - lr_floor) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


class Adam:
    def __init__(self, names, params, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {n: np.zeros_like(params[n]) for n in names}
        self.v = {n: np.zeros_like(params[n]) for n in names}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, g in grads.items():
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[n] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def step(self, params, grads, lr):
        for n, g in grads.items():
            params[n] -= lr * g


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
        return norm, True
    return norm, False


def _epoch_stream(n: int, rng: np.random.Generator):
    while True:
        yield from rng.permutation(n)


def _total_steps(n: int, cfg: TrainConfig, stage: str) -> int:
    fixed = cfg.sft_steps if stage in ("sft", "pretrain") else cfg.dmpo_steps
    if fixed is not None:
        return fixed
    epochs = cfg.sft_epochs if stage in ("sft", "pretrain") else cfg.dmpo_epochs
    return epochs * math.ceil(n / cfg.batch_size)


def encode_sft(samples: Sequence[PreferenceSample], vocab: Vocabulary,
               prompt_mode: str = "per-pair") -> list[TokenSequence]:
    """SFT targets.

    ``per-pair``: the first pair's prompt and ordering. ``shared``: the full
    prompt and the full chosen answer.
    """
    if prompt_mode == "shared":
        return [encode(s.prompt, vocab, completion=s.chosen) for s in samples]
    return [encode(pair_prompt(s, 0), vocab,
                   completion=render_pair(s.positive_item, s.negative_items[0]))
            for s in samples]


def encode_pref(samples: Sequence[PreferenceSample], vocab: Vocabulary,
                prompt_mode: str = "per-pair"):
    """(chosen, [rejected_1..k]) token sequences per sample.

    ``per-pair``: rejected ``i`` follows the prompt showing only pair ``i``,
    and the chosen sequence is pair 1's ordering after pair 1's prompt.
    ``shared``: every sequence follows the full prompt.
    """
    if prompt_mode == "shared":
        return [(encode(s.prompt, vocab, completion=s.chosen),
                 [encode(s.prompt, vocab, completion=r) for r in s.rejected]) for s in samples]
    out = []
    for s in samples:
        chosen = encode(pair_prompt(s, 0), vocab,
                        completion=render_pair(s.positive_item, s.negative_items[0]))
        rejected = [encode(pair_prompt(s, i), vocab, completion=r)
                    for i, r in enumerate(s.rejected)]
        out.append((chosen, rejected))
    return out


def _run_stage(pair: PolicyPair, samples, stage: str, cfg: TrainConfig,
               loss_fn: Callable, split_metrics: Callable,
               evaluate: Callable | None, seed_offset: int) -> StageResult:
    n = len(samples)
    if n == 0:
        raise ValueError("training split is empty")
    total = _total_steps(n, cfg, stage)
    pol = pair.policy
    opt = (Adam(pol.trainable, pol.params, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
           if cfg.optimizer == "adam" else SGD())
    order = _epoch_stream(n, np.random.default_rng([cfg.seed, seed_offset]))
    initial = split_metrics()
    entries: list[TrainLogEntry] = []
    t0 = time.perf_counter()
    best_auc, bad_evals, best_params = -1.0, 0, None
    for step in range(total):
        lr = cosine_lr(step, total, cfg.lr0, cfg.lr_floor)
        idx = [next(order) for _ in range(min(cfg.batch_size, n))]
        grads = None
        losses, aux_rows = [], []
        for i in idx:
            out = loss_fn(i)
            if not np.isfinite(out.loss):
                raise NumericError(f"non-finite {stage} loss at step {step}, "
                                   f"sample {getattr(samples[i], 'user_id', i)!r}")
            losses.append(out.loss)
            aux_rows.append(out.aux)
            if grads is None:
                grads = {k: v.copy() for k, v in out.grads.items()}
            else:
                for k, v in out.grads.items():
                    grads[k] += v
        for g in grads.values():
            g /= len(idx)
        norm, clipped = _clip(grads, cfg.clip_norm)
        if not math.isfinite(norm):
            raise NumericError(f"non-finite gradient at step {step} ({stage})")
        if clipped:
            log.debug("%s step %d: clipped gradient norm %.3g", stage, step, norm)
        opt.step(pol.params, grads, lr)

        def mean_aux(key):
            vals = [a[key] for a in aux_rows if key in a]
            return float(np.mean(vals)) if vals else 0.0

        entry = TrainLogEntry(step, stage, float(np.mean(losses)), mean_aux("chosen_reward"),
                              mean_aux("mean_rejected_reward"), mean_aux("margin"), lr,
                              time.perf_counter() - t0, norm, clipped)
        if evaluate is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            entry.valid_auc = evaluate(pol)
            if cfg.early_stopping:
                if entry.valid_auc > best_auc:
                    best_auc, bad_evals = entry.valid_auc, 0
                    best_params = {k: v.copy() for k, v in pol.params.items()}
                else:
                    bad_evals += 1
        entries.append(entry)
        if cfg.early_stopping and bad_evals >= cfg.patience:
            log.info("%s: early stop at step %d", stage, step)
            break
    if cfg.early_stopping and best_params is not None:
        for k, v in best_params.items():
            pol.params[k][...] = v
    return StageResult(stage, len(entries), entries, initial, split_metrics())


def train_sft(pair: PolicyPair, samples: Sequence[PreferenceSample], vocab: Vocabulary,
              cfg: TrainConfig, evaluate: Callable | None = None) -> StageResult:
    """Gradient descent on the chosen completions' negative log-likelihood."""
    seqs = encode_sft(samples, vocab, cfg.prompt_mode)

    def loss_fn(i):
        return sft_loss(pair, seqs[i])

    def split_metrics():
        return {"loss": float(np.mean([sft_loss(pair, s, with_grad=False).loss for s in seqs]))}

    return _run_stage(pair, samples, "sft", cfg, loss_fn, split_metrics, evaluate, 1)


def train_dmpo(pair: PolicyPair, samples: Sequence[PreferenceSample], vocab: Vocabulary,
               cfg: TrainConfig, evaluate: Callable | None = None,
               snapshot: bool = True) -> StageResult:
    """Preference stage; the reference is re-snapshotted from the policy first."""
    if snapshot:
        pair.resnapshot()
    for s in samples:
        if s.k != cfg.k:
            raise ConfigError(f"sample {s.user_id!r} has {s.k} negatives but k={cfg.k}")
    enc = encode_pref(samples, vocab, cfg.prompt_mode)
    ref = [[pair.reference.logprobs(c).sum_logp] + [pair.reference.logprobs(r).sum_logp for r in rs]
           for c, rs in enc]
    dcfg = DmpoConfig(cfg.beta, cfg.k)

    def loss_fn(i, with_grad=True):
        chosen, rejected = enc[i]
        if cfg.preference_loss == "dpo":
            return dpo_loss(pair, chosen, rejected[0], cfg.beta, ref[i], with_grad)
        return dmpo_loss(pair, chosen, rejected, dcfg, ref[i], with_grad)

    def split_metrics():
        outs = [loss_fn(i, with_grad=False) for i in range(len(enc))]
        return {"loss": float(np.mean([o.loss for o in outs])),
                "margin": float(np.mean([o.aux["margin"] for o in outs])),
                "chosen_reward": float(np.mean([o.aux["chosen_reward"] for o in outs])),
                "rejected_reward": float(np.mean([o.aux["mean_rejected_reward"] for o in outs]))}

    return _run_stage(pair, samples, "dmpo", cfg, loss_fn, split_metrics, evaluate, 2)


def pretrain_lm(model: TransformerLM, texts: Sequence[str], vocab: Vocabulary, steps: int,
                lr0: float = 1e-3, batch_size: int = 8, seed: int = 0) -> StageResult:
    """Plain next-token training on whole texts (no prompt), in place on ``model``."""
    seqs = [encode("", vocab, completion=t) for t in texts]
    pair = PolicyPair(model, model)
    cfg = TrainConfig(stage="sft", lr0=lr0, sft_steps=steps, batch_size=batch_size, seed=seed)

    def loss_fn(i):
        return sft_loss(pair, seqs[i])

    def split_metrics():
        sub = seqs[:256]
        return {"loss": float(np.mean([sft_loss(pair, s, with_grad=False).loss for s in sub]))}

    res = _run_stage(pair, seqs, "pretrain", cfg, loss_fn, split_metrics, None, 0)
    return res


def train(model: TransformerLM, split: DatasetSplit, vocab: Vocabulary, cfg: TrainConfig,
          evaluate: Callable | None = None) -> tuple[PolicyPair, list[StageResult]]:
    """Run ``cfg.stage`` starting from a copy of ``model``.

    ``sft_then_dmpo`` snapshots the reference after SFT; ``dmpo_only`` and
    ``dmpo`` snapshot it from the starting model.
    """
    pair = PolicyPair(model.copy())
    results = []
    if cfg.stage in ("sft", "sft_then_dmpo"):
        results.append(train_sft(pair, split.train, vocab, cfg, evaluate))
    if cfg.stage in ("dmpo", "dmpo_only", "sft_then_dmpo"):
        results.append(train_dmpo(pair, split.train, vocab, cfg, evaluate))
    return pair, results


@dataclass
class SweepResult:
    best_lr: float
    best_auc: float
    table: list[dict] = field(default_factory=list)


def lr_sweep(model: TransformerLM, split: DatasetSplit, vocab: Vocabulary, cfg: TrainConfig,
             sweep_set: Sequence[float] | None = None,
             score: Callable | None = None) -> SweepResult:
    """One run per learning rate; pick the best validation AUC, ties to the smaller lr."""
    from .evalkit import evaluate_split

    sweep = list(cfg.lr_sweep if sweep_set is None else sweep_set)
    if not sweep:
        raise ConfigError("empty learning-rate sweep")
    if score is None:
        def score(pair):
            return evaluate_split(pair.policy, split.valid, vocab).auc
    table = []
    for lr in sweep:
        run_cfg = TrainConfig(**{**asdict(cfg), "lr0": lr, "strict_lr": False})
        pair, _ = train(model, split, vocab, run_cfg)
        table.append({"lr": lr, "valid_auc": float(score(pair))})
    best = max(table, key=lambda r: (r["valid_auc"], -r["lr"]))
    return SweepResult(best["lr"], best["valid_auc"], table)
