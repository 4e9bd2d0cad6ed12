"""Compositions of the pipeline pieces used by the CLI, tests and demos.

Everything here is a thin layer over datapipe, trainer and evalkit: the k
and few-shot ablations call :func:`train_and_evaluate` once per setting, so
no experiment has a training path of its own.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import datapipe as dp
from .bpr import MfParams, train_bpr
from .config import DataConfig, RunConfig
from .errors import ConfigError, DataError, InsufficientNegatives
from .evalkit import EvalReport, case_study_dump, evaluate_split
from .gradcheck import GradCheckResult, check_gradients
from .objectives import DmpoConfig, dmpo_loss, sft_loss
from .seqmodel import (ModelConfig, PolicyPair, TransformerLM, apply_adapters, build_model,
                       load_checkpoint)
from .synthetic import GenreWorld, catalog_corpus, generate_events
from .tokenizer import TokenSequence, Vocabulary, build_vocab
from .trainer import StageResult, TrainConfig, pretrain_lm, train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- data


def synthetic_world(dc: DataConfig) -> GenreWorld:
    s = dc.synthetic
    return GenreWorld(s.n_genres, s.shared_words, s.domain_words,
                      domains=tuple(dict.fromkeys([dc.domain, dc.target_domain])),
                      word_seed=s.word_seed)


def pretrain_corpus(cfg: RunConfig) -> list[str]:
    """Catalog text for base-model pretraining (synthetic worlds only)."""
    if cfg.data.source != "synthetic":
        raise ConfigError("model.pretrain_steps needs synthetic data; "
                          "use model.init_checkpoint for other sources")
    world = synthetic_world(cfg.data)
    return catalog_corpus(world, tuple(world.domain), cfg.model.pretrain_docs,
                          seed=cfg.model.seed)


def load_events(dc: DataConfig, target: bool = False) -> list[dp.InteractionEvent]:
    """Rating events of the source domain, or of the target domain when ``target``."""
    domain = dc.target_domain if target else dc.domain
    if dc.source == "synthetic":
        return generate_events(dc.synthetic, domain, synthetic_world(dc))
    path = dc.target_path if target else dc.path
    meta = dc.target_meta_path if target else dc.meta_path
    if path is None:
        raise ConfigError(f"data.{'target_path' if target else 'path'} is required for source {dc.source!r}")
    if dc.source == "movielens-1m":
        return dp.load_movielens_1m(path)
    if dc.source == "amazon":
        if meta is None:
            raise ConfigError("amazon source needs a metadata path")
        return dp.flatten_amazon(path, meta)
    return dp.read_rating_rows(path)


def build_samples(cfg: RunConfig, target: bool = False, k: int | None = None
                  ) -> list[dp.PreferenceSample]:
    dc = cfg.data
    k = cfg.train.k if k is None else k
    events = load_events(dc, target)
    hists = dp.filter_and_truncate(events, dc.min_pos, dc.min_neg, dc.max_history)
    kwargs = {"template": dc.template} if dc.template else {}
    domain = dc.target_domain if target else dc.domain
    return dp.build_pool(hists, k, dc.seed, domain=domain,
                         max_prompt_items=dc.max_prompt_items, **kwargs)


def vocab_from_samples(samples: Sequence[dp.PreferenceSample], cap: int,
                       extra: Sequence[str] = ()) -> Vocabulary:
    corpus = list(extra)
    for s in samples:
        corpus.append(s.prompt)
        corpus.append(s.chosen)
        corpus.extend(s.meta.get("pair_prompts", []))
    return build_vocab(corpus, cap)


@dataclass
class Prepared:
    split: dp.DatasetSplit
    vocab: Vocabulary
    pool_size: int


def prepare(cfg: RunConfig, cross_domain: bool = False) -> Prepared:
    """Samples, user-disjoint splits (valid/test as single-pair views) and vocabulary.

    The vocabulary covers the whole sample pool, so it does not change with
    the train size.
    """
    source = build_samples(cfg)
    pool = list(source)
    if cross_domain:
        target = build_samples(cfg, target=True)
        pool += target
        split = dp.cross_domain_splits(source, target, cfg.data.sizes, cfg.data.seed)
    else:
        split = dp.make_splits(source, cfg.data.sizes, cfg.data.seed)
    extra = pretrain_corpus(cfg) if cfg.model.pretrain_steps else ()
    vocab = vocab_from_samples(pool, cfg.data.vocab_cap, extra)
    return Prepared(dp.eval_view(split), vocab, len(pool))


def shrink_train(split: dp.DatasetSplit, n: int) -> dp.DatasetSplit:
    """First ``n`` train samples; valid and test untouched."""
    if n > len(split.train):
        raise DataError(f"train split has {len(split.train)} samples, asked for {n}")
    return dp.DatasetSplit(split.train[:n], split.valid, split.test)


# ---------------------------------------------------------------- runs


_PRETRAINED: dict[str, TransformerLM] = {}


def make_model(cfg: RunConfig, vocab: Vocabulary) -> TransformerLM:
    """Base model for a run: fresh, loaded from ``init_checkpoint``, or
    pretrained on catalog text (memoized per configuration and vocabulary)."""
    m = cfg.model
    if m.init_checkpoint:
        model, _ = load_checkpoint(m.init_checkpoint)
        if model.cfg.vocab_size != len(vocab):
            raise ConfigError(f"checkpoint vocabulary has {model.cfg.vocab_size} tokens, "
                              f"the data vocabulary {len(vocab)}")
        if m.adapter_rank is not None:
            model = apply_adapters(model, m.adapter_rank, m.adapter_targets, seed=m.seed + 1,
                                   freeze_base=m.freeze_base)
        return model
    if m.pretrain_steps:
        key = json.dumps([cfg.to_dict()["model"], cfg.to_dict()["data"]["synthetic"],
                          cfg.data.domain, cfg.data.target_domain, vocab.tokens], sort_keys=True)
        if key not in _PRETRAINED:
            base = _fresh_model(cfg, vocab, with_adapters=False)
            res = pretrain_lm(base, pretrain_corpus(cfg), vocab, m.pretrain_steps,
                              m.pretrain_lr, seed=m.seed)
            log.info("pretrained base: loss %.3f -> %.3f", res.initial["loss"], res.final["loss"])
            _PRETRAINED[key] = base
        model = _PRETRAINED[key].copy()
        if m.adapter_rank is not None:
            model = apply_adapters(model, m.adapter_rank, m.adapter_targets, seed=m.seed + 1,
                                   freeze_base=m.freeze_base)
        return model
    return _fresh_model(cfg, vocab, with_adapters=True)


def _fresh_model(cfg: RunConfig, vocab: Vocabulary, with_adapters: bool) -> TransformerLM:
    m = cfg.model
    mc = ModelConfig(vocab_size=len(vocab), embed_dim=m.embed_dim, num_layers=m.num_layers,
                     num_heads=m.num_heads, max_seq_len=m.max_seq_len, ff_dim=m.ff_dim,
                     adapter_rank=m.adapter_rank if with_adapters else None,
                     adapter_targets=m.adapter_targets,
                     freeze_base=m.freeze_base, init_std=m.init_std, dtype=m.dtype)
    return build_model(mc, seed=m.seed)


@dataclass
class RunOutcome:
    base: TransformerLM
    pair: PolicyPair
    stages: list[StageResult]
    reports: dict[str, EvalReport]
    seconds: float
    sft_policy: TransformerLM | None = None

    def summary(self) -> dict:
        return {name: {"auc": r.auc, "gap": r.gap, "mean_pos_score": r.mean_pos_score,
                       "mean_neg_score": r.mean_neg_score,
                       "pairwise_accuracy": r.pairwise_accuracy}
                for name, r in self.reports.items()}


def _eval(model, samples, vocab, cfg: RunConfig) -> EvalReport:
    if cfg.eval.max_samples is not None:
        samples = samples[:cfg.eval.max_samples]
    return evaluate_split(model, samples, vocab, cfg.eval.mode)


def train_and_evaluate(cfg: RunConfig, split: dp.DatasetSplit, vocab: Vocabulary,
                       model: TransformerLM | None = None, eval_untrained: bool = True,
                       eval_stages: bool = True) -> RunOutcome:
    """Train per ``cfg.train.stage`` and report test metrics.

    Reports are keyed ``untrained``, ``sft`` (after the SFT stage of a staged
    run) and ``final``.
    """
    t0 = time.perf_counter()
    base = make_model(cfg, vocab) if model is None else model
    reports = {}
    if eval_untrained:
        reports["untrained"] = _eval(base, split.test, vocab, cfg)
    tc = cfg.train
    sft_policy = None
    if tc.stage == "sft_then_dmpo" and eval_stages:
        # run the two stages separately so the post-SFT policy can be scored
        pair, sft_res = train(base, split, vocab, dataclasses.replace(tc, stage="sft"))
        sft_policy = pair.policy.copy()
        reports["sft"] = _eval(sft_policy, split.test, vocab, cfg)
        from .trainer import train_dmpo

        dmpo_res = train_dmpo(pair, split.train, vocab, tc)
        stages = sft_res + [dmpo_res]
    else:
        pair, stages = train(base, split, vocab, tc)
    reports["final"] = _eval(pair.policy, split.test, vocab, cfg)
    return RunOutcome(base, pair, stages, reports, time.perf_counter() - t0, sft_policy)


def _with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return cfg.replace(**{"data.seed": seed, "model.seed": seed, "train.seed": seed})


def ablate_k(cfg: RunConfig, k_values: Sequence[int] = (1, 2, 3, 4, 5),
             seeds: Sequence[int] | None = None) -> list[dict]:
    """One full train+evaluate per (k, seed); rows averaged over seeds.

    Negative draws are prefix-stable, so every k shares the same users,
    positives and single-pair test samples.
    """
    seeds = [cfg.data.seed] if seeds is None else list(seeds)
    rows = []
    for k in k_values:
        aucs, gaps, secs = [], [], 0.0
        try:
            for seed in seeds:
                run_cfg = _with_seed(cfg, seed).replace(**{"train.k": int(k)})
                prep = prepare(run_cfg)
                out = train_and_evaluate(run_cfg, prep.split, prep.vocab,
                                         eval_untrained=False, eval_stages=False)
                aucs.append(out.reports["final"].auc)
                gaps.append(out.reports["final"].gap)
                secs += out.seconds
        except (InsufficientNegatives, DataError) as exc:
            log.warning("k=%d skipped: %s", k, exc)
            rows.append({"k": int(k), "status": "skipped", "reason": str(exc)})
            continue
        rows.append({"k": int(k), "status": "ok", "auc": float(np.mean(aucs)),
                     "gap": float(np.mean(gaps)), "per_seed_auc": aucs,
                     "seeds": seeds, "seconds": secs})
    return rows


def ablate_fewshot(cfg: RunConfig, sizes: Sequence[int] = (20, 50, 100, 200),
                   stages: Sequence[str] = ("sft_then_dmpo", "dmpo_only"),
                   seeds: Sequence[int] | None = None) -> list[dict]:
    """AUC per (stage, train size). The largest size fixes the split; smaller
    train sets are its prefixes, so the test users never change."""
    seeds = [cfg.data.seed] if seeds is None else list(seeds)
    sizes = [int(n) for n in sizes]
    rows = []
    for stage in stages:
        per_size = {n: [] for n in sizes}
        for seed in seeds:
            run_cfg = _with_seed(cfg, seed).replace(**{
                "data.sizes": [max(sizes), *cfg.data.sizes[1:]], "train.stage": stage})
            prep = prepare(run_cfg)
            for n in sizes:
                out = train_and_evaluate(run_cfg, shrink_train(prep.split, n), prep.vocab,
                                         eval_untrained=False, eval_stages=False)
                per_size[n].append(out.reports["final"].auc)
        for n in sizes:
            rows.append({"stage": stage, "n_train": n, "auc": float(np.mean(per_size[n])),
                         "per_seed_auc": per_size[n], "seeds": seeds})
    return rows


def cross_domain(cfg: RunConfig) -> dict:
    """Train on the source domain; test on the target domain and, for
    reference, on held-out users of the source domain."""
    prep = prepare(cfg, cross_domain=True)
    out = train_and_evaluate(cfg, prep.split, prep.vocab, eval_stages=False)
    in_split = dp.eval_view(dp.make_splits(build_samples(cfg), cfg.data.sizes, cfg.data.seed))
    if [s.user_id for s in in_split.train] != [s.user_id for s in prep.split.train]:
        raise DataError("in-domain and cross-domain splits disagree on the train users")
    in_report = _eval(out.pair.policy, in_split.test, prep.vocab, cfg)
    return {"source": cfg.data.domain, "target": cfg.data.target_domain,
            "cross_domain": out.reports["final"], "in_domain": in_report,
            "untrained": out.reports["untrained"], "seconds": out.seconds}


def baseline_bpr(cfg: RunConfig, split: dp.DatasetSplit | None = None
                 ) -> tuple[MfParams, EvalReport]:
    if split is None:
        split = prepare(cfg).split
    return train_bpr(split, cfg.bpr)


def case_study(before: TransformerLM, after: TransformerLM, samples: Sequence[dp.PreferenceSample],
               vocab: Vocabulary, mode: str = "token-mean") -> dict:
    """Per-token dumps for ``samples`` plus the mean candidate token probability
    per label before and after."""
    dumps = [case_study_dump(before, after, s, vocab, mode) for s in samples]
    agg = {}
    for label in ("positive", "negative"):
        rows = [t for d in dumps for c in d if c["label"] == label for t in c["tokens"]]
        agg[label] = {
            "mean_token_prob_before": float(np.mean([r["prob_before"] for r in rows])),
            "mean_token_prob_after": float(np.mean([r["prob_after"] for r in rows])),
        }
    return {"dumps": dumps, "summary": agg}


# ---------------------------------------------------------------- gradient checks


@dataclass
class GradSuiteResult:
    n_cases: int
    worst_rel_err: float
    worst_case: str
    worst_param: str
    dtype: str
    cases: list[dict] = field(default_factory=list)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.worst_rel_err < tol

    def failing_params(self, tol: float = 1e-3) -> list[str]:
        return sorted({p for c in self.cases for p, e in c["per_param"].items() if e >= tol})


def _random_seq(rng, vocab_size: int, prompt_len: int, n_completion: int) -> TokenSequence:
    ids = rng.integers(0, vocab_size, size=prompt_len + n_completion)
    return TokenSequence(tuple(int(i) for i in ids), prompt_len)


def tiny_model(rng, adapters: bool, vocab_size: int = 17, dim: int = 8,
               layers: int = 1, heads: int = 2, dtype: str = "float64") -> TransformerLM:
    cfg = ModelConfig(vocab_size=vocab_size, embed_dim=dim, num_layers=layers, num_heads=heads,
                      max_seq_len=32, allowed_adapter_ranks=None, init_std=0.3, dtype=dtype)
    model = TransformerLM(cfg, seed=int(rng.integers(2**31)))
    if adapters:
        model = apply_adapters(model, 2, seed=int(rng.integers(2**31)), freeze_base=False)
        for name in model.params:
            if ".lora_b" in name:
                model.params[name][...] = rng.normal(0, 0.3, model.params[name].shape)
    return model


def gradient_suite(n_cases: int = 20, seed: int = 0, step: float = 1e-4,
                   max_entries: int | None = 12, corrupt: bool = False,
                   dtype: str = "float64") -> GradSuiteResult:
    """Finite-difference check of sft_loss and dmpo_loss gradients.

    Half of the cases carry q/k/v adapters with the base unfrozen, so both
    adapter and base parameters are covered. ``corrupt`` perturbs one
    analytic gradient entry (negative control).
    """
    rng = np.random.default_rng(seed)
    res = GradSuiteResult(0, 0.0, "", "", dtype)
    for case in range(n_cases):
        adapters = case % 2 == 1
        model = tiny_model(rng, adapters, dtype=dtype)
        ref = model.copy()
        for v in ref.params.values():
            v += rng.normal(0, 0.05, v.shape).astype(v.dtype)
        pair = PolicyPair(model, ref.freeze())
        V = model.cfg.vocab_size
        P = int(rng.integers(1, 6))
        k = int(rng.integers(1, 4))
        beta = float(rng.uniform(0.05, 2.0))
        chosen = _random_seq(rng, V, P, int(rng.integers(1, 5)))
        rejected = [_random_seq(rng, V, P, int(rng.integers(1, 5))) for _ in range(k)]
        dcfg = DmpoConfig(beta, k)
        for kind in ("sft", "dmpo"):
            if kind == "sft":
                out = sft_loss(pair, chosen)

                def f():
                    return sft_loss(pair, chosen, with_grad=False).loss
            else:
                out = dmpo_loss(pair, chosen, rejected, dcfg)

                def f():
                    return dmpo_loss(pair, chosen, rejected, dcfg, with_grad=False).loss
            analytic = {n: g.copy() for n, g in out.grads.items()}
            if corrupt and case == 0:
                name = sorted(analytic)[0]
                analytic[name].reshape(-1)[0] += 0.5 + abs(analytic[name].reshape(-1)[0])
            names = sorted(analytic)
            entries = max_entries
            if corrupt and case == 0:
                entries = None
            r: GradCheckResult = check_gradients(f, model.params, analytic, names, step,
                                                 entries, rng)
            label = f"case{case}:{kind}:{'adapter' if adapters else 'base'}:k={k}"
            res.cases.append({"case": label, "worst_rel_err": r.worst_rel_err,
                              "worst_param": r.worst_param, "per_param": r.per_param,
                              "n_checked": r.n_checked})
            res.n_cases += 1
            if r.worst_rel_err >= res.worst_rel_err:
                res.worst_rel_err, res.worst_case, res.worst_param = (
                    r.worst_rel_err, label, r.worst_param)
    return res
