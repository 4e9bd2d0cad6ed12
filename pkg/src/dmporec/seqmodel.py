"""Small causal transformer LM in numpy with hand-written backprop.

Pre-norm decoder blocks (attention + GELU feed-forward), learned positional
embeddings, untied output head. Weights use the ``x @ W`` convention, so a
projection matrix has shape ``(d_in, d_out)``.

Low-rank adapters follow the usual ``W + B A`` form with ``A`` of shape
``(rank, d_in)`` and ``B`` of shape ``(d_out, rank)``; in this module's
convention the effective matrix is ``W + (B @ A).T``. ``B`` starts at zero,
so a freshly adapted model computes exactly what the base model does.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, SequenceTooLong
from .tokenizer import TokenSequence

ADAPTER_TARGETS = ("q", "k", "v")
_GELU_C = np.sqrt(2.0 / np.pi)
_LN_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    max_seq_len: int = 512
    ff_dim: int | None = None
    adapter_rank: int | None = None
    adapter_targets: tuple[str, ...] = ADAPTER_TARGETS
    allowed_adapter_ranks: tuple[int, ...] | None = (8, 16, 32)
    freeze_base: bool = True
    init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        self.adapter_targets = tuple(self.adapter_targets)
        if self.allowed_adapter_ranks is not None:
            self.allowed_adapter_ranks = tuple(self.allowed_adapter_ranks)
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.ff_dim is None:
            self.ff_dim = 4 * self.embed_dim
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if self.adapter_rank is not None:
            _check_adapter(self, self.adapter_rank, self.adapter_targets)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapter_targets"] = list(self.adapter_targets)
        if self.allowed_adapter_ranks is not None:
            d["allowed_adapter_ranks"] = list(self.allowed_adapter_ranks)
        return d


def _check_adapter(cfg: ModelConfig, rank: int, targets) -> None:
    if rank < 1:
        raise ConfigError(f"adapter rank must be >= 1, got {rank}")
    if rank > cfg.embed_dim:
        raise ConfigError(f"adapter rank {rank} exceeds embed_dim {cfg.embed_dim}")
    if cfg.allowed_adapter_ranks is not None and rank not in cfg.allowed_adapter_ranks:
        raise ConfigError(f"adapter rank {rank} not in {cfg.allowed_adapter_ranks}")
    bad = set(targets) - set(ADAPTER_TARGETS)
    if bad or not targets:
        raise ConfigError(f"adapter targets must be a non-empty subset of q,k,v; got {targets}")


@dataclass
class LogProbResult:
    per_token_logp: np.ndarray
    sum_logp: float


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    D, F, V, s = cfg.embed_dim, cfg.ff_dim, cfg.vocab_size, cfg.init_std

    def normal(*shape, std=s):
        return rng.normal(0.0, std, size=shape).astype(dt)

    p = {"tok_emb": normal(V, D), "pos_emb": normal(cfg.max_seq_len, D)}
    for l in range(cfg.num_layers):
        pre = f"h{l}."
        p[pre + "ln1.g"] = np.ones(D, dt)
        p[pre + "ln1.b"] = np.zeros(D, dt)
        for name in ("wq", "wk", "wv"):
            p[pre + "attn." + name] = normal(D, D)
        # residual projections scaled down with depth
        p[pre + "attn.wo"] = normal(D, D, std=s / np.sqrt(2 * cfg.num_layers))
        p[pre + "attn.bo"] = np.zeros(D, dt)
        p[pre + "ln2.g"] = np.ones(D, dt)
        p[pre + "ln2.b"] = np.zeros(D, dt)
        p[pre + "mlp.w1"] = normal(D, F)
        p[pre + "mlp.b1"] = np.zeros(F, dt)
        p[pre + "mlp.w2"] = normal(F, D, std=s / np.sqrt(2 * cfg.num_layers))
        p[pre + "mlp.b2"] = np.zeros(D, dt)
    p["lnf.g"] = np.ones(D, dt)
    p["lnf.b"] = np.zeros(D, dt)
    p["head.w"] = normal(D, V)
    p["head.b"] = np.zeros(V, dt)
    return p


def _adapter_names(l: int, t: str) -> tuple[str, str]:
    return f"h{l}.attn.{t}.lora_a", f"h{l}.attn.{t}.lora_b"


class TransformerLM:
    """Parameters plus forward/backward for single token sequences."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0, trainable: Iterable[str] | None = None):
        self.cfg = cfg
        self.seed = seed
        self.params = init_params(cfg, seed) if params is None else params
        if trainable is None:
            trainable = self._default_trainable()
        self.trainable = [n for n in self.params if n in set(trainable)]

    def _default_trainable(self) -> list[str]:
        lora = [n for n in self.params if ".lora_" in n]
        if lora and self.cfg.freeze_base:
            return lora
        return list(self.params)

    # ------------------------------------------------------------ helpers

    def copy(self) -> "TransformerLM":
        params = {k: np.array(v, copy=True) for k, v in self.params.items()}
        return TransformerLM(copy.deepcopy(self.cfg), params, self.seed, list(self.trainable))

    def freeze(self) -> "TransformerLM":
        """Make every parameter array read-only; in-place writes then raise."""
        for v in self.params.values():
            v.flags.writeable = False
        self.trainable = []
        return self

    def num_params(self, trainable_only: bool = False) -> int:
        names = self.trainable if trainable_only else self.params
        return int(sum(self.params[n].size for n in names))

    def _proj(self, l: int, t: str) -> np.ndarray:
        w = self.params[f"h{l}.attn.w{t}"]
        a_name, b_name = _adapter_names(l, t)
        if a_name in self.params:
            w = w + (self.params[b_name] @ self.params[a_name]).T
        return w

    def _check(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or len(ids) == 0:
            raise ValueError("expected a non-empty 1-d id sequence")
        if len(ids) > self.cfg.max_seq_len:
            raise SequenceTooLong(f"sequence length {len(ids)} exceeds max_seq_len {self.cfg.max_seq_len}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ValueError(f"token id outside [0, {self.cfg.vocab_size})")
        return ids

    # ------------------------------------------------------------ forward

    def forward(self, ids, rows=None):
        """Log-softmax over the vocabulary at the given positions.

        Returns ``(logp, cache)`` where ``logp[j]`` is the distribution of the
        token following position ``rows[j]``. ``rows`` defaults to all.
        """
        p, cfg = self.params, self.cfg
        ids = self._check(ids)
        T, H, dh = len(ids), cfg.num_heads, cfg.head_dim
        rows = np.arange(T) if rows is None else np.asarray(rows, dtype=np.int64)
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        x = p["tok_emb"][ids] + p["pos_emb"][:T]
        layers = []
        for l in range(cfg.num_layers):
            pre = f"h{l}."
            h, ln1 = _ln_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            wq, wk, wv = self._proj(l, "q"), self._proj(l, "k"), self._proj(l, "v")
            q = (h @ wq).reshape(T, H, dh).transpose(1, 0, 2)
            k = (h @ wk).reshape(T, H, dh).transpose(1, 0, 2)
            v = (h @ wv).reshape(T, H, dh).transpose(1, 0, 2)
            s = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
            s = np.where(mask, -np.inf, s)
            s = s - s.max(axis=-1, keepdims=True)
            e = np.exp(s)
            att = e / e.sum(axis=-1, keepdims=True)
            o = (att @ v).transpose(1, 0, 2).reshape(T, -1)
            x = x + o @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
            h2, ln2 = _ln_fwd(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            u = h2 @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
            a, gelu = _gelu_fwd(u)
            x = x + a @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
            layers.append((h, ln1, q, k, v, att, o, h2, ln2, a, gelu))
        hf, lnf = _ln_fwd(x[rows], p["lnf.g"], p["lnf.b"])
        logits = hf @ p["head.w"] + p["head.b"]
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        cache = (ids, rows, layers, hf, lnf, logp)
        return logp, cache

    def logprobs(self, seq: TokenSequence) -> LogProbResult:
        rows, targets = _completion_rows(seq)
        logp, _ = self.forward(seq.ids, rows)
        per = logp[np.arange(len(rows)), targets]
        return LogProbResult(per, float(per.sum()))

    # ------------------------------------------------------------ backward

    def backward(self, cache, dlogp: np.ndarray, grads: dict[str, np.ndarray] | None = None):
        """Accumulate parameter gradients given ``d objective / d logp``.

        ``grads`` is updated in place (created when ``None``) and returned.
        Gradients are produced for every parameter; callers filter by
        ``self.trainable``.
        """
        p, cfg = self.params, self.cfg
        ids, rows, layers, hf, lnf, logp = cache
        T, H, dh = len(ids), cfg.num_heads, cfg.head_dim
        if grads is None:
            grads = {n: np.zeros_like(v) for n, v in p.items()}

        # d/dlogits of sum_j dlogp[j] . logp[j]
        dlogits = dlogp - np.exp(logp) * dlogp.sum(axis=-1, keepdims=True)
        grads["head.w"] += hf.T @ dlogits
        grads["head.b"] += dlogits.sum(axis=0)
        dhf = dlogits @ p["head.w"].T
        dxr, dg, db = _ln_bwd(dhf, lnf)
        grads["lnf.g"] += dg
        grads["lnf.b"] += db
        dx = np.zeros((T, cfg.embed_dim), dtype=dxr.dtype)
        np.add.at(dx, rows, dxr)

        for l in reversed(range(cfg.num_layers)):
            pre = f"h{l}."
            h, ln1, q, k, v, att, o, h2, ln2, a, gelu = layers[l]
            # feed-forward
            grads[pre + "mlp.w2"] += a.T @ dx
            grads[pre + "mlp.b2"] += dx.sum(axis=0)
            du = _gelu_bwd(dx @ p[pre + "mlp.w2"].T, gelu)
            grads[pre + "mlp.w1"] += h2.T @ du
            grads[pre + "mlp.b1"] += du.sum(axis=0)
            dx2, dg, db = _ln_bwd(du @ p[pre + "mlp.w1"].T, ln2)
            grads[pre + "ln2.g"] += dg
            grads[pre + "ln2.b"] += db
            dx = dx + dx2
            # attention
            grads[pre + "attn.wo"] += o.T @ dx
            grads[pre + "attn.bo"] += dx.sum(axis=0)
            do = (dx @ p[pre + "attn.wo"].T).reshape(T, H, dh).transpose(1, 0, 2)
            datt = do @ v.transpose(0, 2, 1)
            dv = att.transpose(0, 2, 1) @ do
            ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
            dq = ds @ k
            dk = ds.transpose(0, 2, 1) @ q
            dh_total = np.zeros_like(h)
            for t, dproj in (("q", dq), ("k", dk), ("v", dv)):
                dproj = dproj.transpose(1, 0, 2).reshape(T, -1)
                gw = h.T @ dproj
                grads[f"{pre}attn.w{t}"] += gw
                a_name, b_name = _adapter_names(l, t)
                if a_name in p:
                    # W_eff = W + (B A)^T  =>  dB = gw^T A^T, dA = B^T gw^T
                    grads[b_name] += gw.T @ p[a_name].T
                    grads[a_name] += p[b_name].T @ gw.T
                dh_total += dproj @ self._proj(l, t).T
            dx1, dg, db = _ln_bwd(dh_total, ln1)
            grads[pre + "ln1.g"] += dg
            grads[pre + "ln1.b"] += db
            dx = dx + dx1

        np.add.at(grads["tok_emb"], ids, dx)
        grads["pos_emb"][:T] += dx
        return grads

    def grad_logprob(self, seq: TokenSequence, coef: float = 1.0,
                     grads: dict[str, np.ndarray] | None = None):
        """``coef`` times the gradient of the completion log-probability.

        Returns ``(LogProbResult, grads)``; ``grads`` accumulates in place.
        """
        rows, targets = _completion_rows(seq)
        logp, cache = self.forward(seq.ids, rows)
        per = logp[np.arange(len(rows)), targets]
        dlogp = np.zeros_like(logp)
        dlogp[np.arange(len(rows)), targets] = coef
        grads = self.backward(cache, dlogp, grads)
        return LogProbResult(per, float(per.sum())), grads

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(v) for n, v in self.params.items()}


def _completion_rows(seq: TokenSequence):
    n = len(seq.ids)
    if seq.prompt_len < 1:
        raise ValueError("the first token has no predecessor; prompt_len must be >= 1")
    rows = np.arange(seq.prompt_len - 1, n - 1)
    targets = np.asarray(seq.ids[seq.prompt_len:], dtype=np.int64)
    return rows, targets


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    gh = dy * g
    dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu_fwd(u):
    inner = _GELU_C * (u + 0.044715 * u ** 3)
    t = np.tanh(inner)
    return 0.5 * u * (1.0 + t), (u, t)


def _gelu_bwd(da, cache):
    u, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * u ** 2)
    return da * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner)


# ---------------------------------------------------------------- functional API


def forward_logprobs(model: TransformerLM, seq: TokenSequence) -> LogProbResult:
    return model.logprobs(seq)


def grad_logprob(model: TransformerLM, seq: TokenSequence) -> dict[str, np.ndarray]:
    """Gradient of the completion log-probability w.r.t. trainable parameters."""
    _, grads = model.grad_logprob(seq)
    return {n: grads[n] for n in model.trainable}


def apply_adapters(model: TransformerLM, rank: int, targets=ADAPTER_TARGETS,
                   seed: int = 0, freeze_base: bool | None = None) -> TransformerLM:
    """Copy of ``model`` with low-rank adapters on the chosen attention projections."""
    targets = tuple(targets)
    cfg = copy.deepcopy(model.cfg)
    _check_adapter(cfg, rank, targets)
    cfg.adapter_rank = rank
    cfg.adapter_targets = targets
    if freeze_base is not None:
        cfg.freeze_base = freeze_base
    out = model.copy()
    out.cfg = cfg
    rng = np.random.default_rng(seed)
    D = cfg.embed_dim
    dt = np.dtype(cfg.dtype)
    for l in range(cfg.num_layers):
        for t in targets:
            a_name, b_name = _adapter_names(l, t)
            out.params[a_name] = rng.normal(0.0, 1.0 / np.sqrt(D), size=(rank, D)).astype(dt)
            out.params[b_name] = np.zeros((D, rank), dt)
    out.trainable = out._default_trainable()
    return out


def build_model(cfg: ModelConfig, seed: int = 0) -> TransformerLM:
    """Fresh model; adapters are attached when ``cfg.adapter_rank`` is set."""
    base_cfg = copy.deepcopy(cfg)
    rank = base_cfg.adapter_rank
    base_cfg.adapter_rank = None
    model = TransformerLM(base_cfg, seed=seed)
    if rank is not None:
        model = apply_adapters(model, rank, cfg.adapter_targets, seed=seed + 1,
                               freeze_base=cfg.freeze_base)
    return model


@dataclass
class PolicyPair:
    """Trainable policy plus a frozen reference snapshot of it."""

    policy: TransformerLM
    reference: TransformerLM = field(default=None)

    def __post_init__(self):
        if self.reference is None:
            self.reference = self.policy.copy().freeze()

    @classmethod
    def from_model(cls, model: TransformerLM) -> "PolicyPair":
        return cls(model)

    def resnapshot(self) -> None:
        """Take a fresh reference from the current policy."""
        self.reference = self.policy.copy().freeze()


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"DMPOCKPT"
_VERSION = 1


def save_checkpoint(model: TransformerLM, path, step: int = 0, extra: dict | None = None) -> None:
    """Header (JSON, length-prefixed) followed by a little-endian float64 blob."""
    manifest, offset = [], 0
    for name, arr in model.params.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "version": _VERSION,
        "config": model.cfg.to_dict(),
        "seed": model.seed,
        "step": int(step),
        "trainable": list(model.trainable),
        "manifest": manifest,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(hbytes)))
        fh.write(hbytes)
        for arr in model.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[TransformerLM, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != _VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen])
    blob = np.frombuffer(data, dtype="<f8", offset=start + hlen)
    cfg_d = dict(header["config"])
    cfg_d["adapter_targets"] = tuple(cfg_d["adapter_targets"])
    cfg = ModelConfig(**cfg_d)
    dt = np.dtype(cfg.dtype)
    params = {}
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = blob[entry["offset"]:entry["offset"] + n].reshape(entry["shape"])
        params[entry["name"]] = arr.astype(dt, copy=True)
    model = TransformerLM(cfg, params, header["seed"], header["trainable"])
    return model, header
