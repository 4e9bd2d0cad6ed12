"""Command-line entry point.

Every command takes ``--config FILE`` (YAML or JSON, see ``dmporec.config``)
plus any number of ``--set key.path=value`` overrides, and writes a fresh run
directory (``--out``) holding the effective config, run metadata, logs and
outputs. An existing non-empty run directory is never overwritten.

The environment variable ``DMPOREC_SEED`` overrides every seed in the config.
Exit codes: 0 success, 1 other failure, 2 config error, 3 data error,
4 numeric failure (also used for a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from . import datapipe as dp
from . import experiments as ex
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, DmporecError, NumericError
from .evalkit import evaluate_split, format_case_study
from .seqmodel import load_checkpoint, save_checkpoint
from .tokenizer import Vocabulary
from .trainer import lr_sweep

log = logging.getLogger("dmporec")

SEED_ENV = "DMPOREC_SEED"


# ---------------------------------------------------------------- run directory


class RunDir:
    def __init__(self, path, command: str, cfg: RunConfig, argv: list[str]):
        self.path = Path(path)
        if self.path.exists() and any(self.path.iterdir()):
            raise ConfigError(f"run directory {self.path} already exists and is not empty")
        self.path.mkdir(parents=True, exist_ok=True)
        self.t0 = time.time()
        self.meta = {"command": command, "argv": argv, "version": __version__,
                     "seed_env": os.environ.get(SEED_ENV), "started": self.t0}
        self.write_json("config.json", cfg.to_dict())
        handler = logging.FileHandler(self.path / "run.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)
        self._handler = handler

    def file(self, name: str) -> Path:
        return self.path / name

    def write_json(self, name: str, obj) -> Path:
        p = self.file(name)
        p.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n", encoding="utf-8")
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.file(name)
        p.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
        return p

    def close(self, status: str) -> None:
        self.meta.update(finished=time.time(), status=status,
                         seconds=round(time.time() - self.t0, 3))
        self.write_json("meta.json", self.meta)
        logging.getLogger().removeHandler(self._handler)
        self._handler.close()


def _json_default(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if hasattr(obj, "item"):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned plain-text table; floats get four decimals."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "" if v is None else str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def _emit(run: RunDir, name: str, rows: list[dict], columns: list[str], extra=None) -> None:
    text = format_table(rows, columns)
    run.write_text(f"{name}.txt", text)
    run.write_json(f"{name}.json", rows if extra is None else {**extra, "rows": rows})
    print(text)


# ---------------------------------------------------------------- config plumbing


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        cfg = cfg.replace(**{"data.seed": seed, "model.seed": seed, "train.seed": seed,
                             "bpr.seed": seed, "data.synthetic.seed": seed})
    return cfg


def _load_prepared(data_dir) -> tuple[dp.DatasetSplit, Vocabulary]:
    data_dir = Path(data_dir)
    split = dp.read_split(data_dir)
    vocab = Vocabulary.load(data_dir / "vocab.json")
    return split, vocab


def _prepared(args, cfg: RunConfig, cross_domain: bool = False):
    if getattr(args, "data", None):
        return _load_prepared(args.data)
    prep = ex.prepare(cfg, cross_domain=cross_domain)
    return prep.split, prep.vocab


def _report_row(name: str, r) -> dict:
    return {"model": name, "auc": r.auc, "pairwise_acc": r.pairwise_accuracy,
            "pos_score": r.mean_pos_score, "neg_score": r.mean_neg_score, "gap": r.gap,
            "n": r.n_samples}


_REPORT_COLS = ["model", "auc", "pairwise_acc", "pos_score", "neg_score", "gap", "n"]


# ---------------------------------------------------------------- commands


def cmd_prepare_data(args, cfg, run):
    samples = ex.build_samples(cfg)
    split = dp.eval_view(dp.make_splits(samples, cfg.data.sizes, cfg.data.seed))
    extra = ex.pretrain_corpus(cfg) if cfg.model.pretrain_steps else ()
    vocab = ex.vocab_from_samples(samples, cfg.data.vocab_cap, extra)
    dp.write_jsonl(samples, run.file("samples.jsonl"))
    dp.write_split(split, run.path)
    vocab.save(run.file("vocab.json"))
    rows = [{"split": n, "samples": len(getattr(split, n))} for n in ("train", "valid", "test")]
    _emit(run, "summary", rows + [{"split": "pool", "samples": len(samples)}], ["split", "samples"],
          {"vocab_size": len(vocab)})


def cmd_build_vocab(args, cfg, run):
    if args.data:
        split = dp.read_split(args.data)
        samples = split.train + split.valid + split.test
    else:
        samples = ex.build_samples(cfg)
    vocab = ex.vocab_from_samples(samples, args.cap or cfg.data.vocab_cap)
    vocab.save(run.file("vocab.json"))
    _emit(run, "summary", [{"tokens": len(vocab), "cap": args.cap or cfg.data.vocab_cap}],
          ["tokens", "cap"])


def cmd_train(args, cfg, run):
    split, vocab = _prepared(args, cfg)
    vocab.save(run.file("vocab.json"))
    out = ex.train_and_evaluate(cfg, split, vocab)
    save_checkpoint(out.base, run.file("base.ckpt"), extra={"stage": "base"})
    if out.sft_policy is not None:
        save_checkpoint(out.sft_policy, run.file("sft.ckpt"),
                        step=out.stages[0].steps, extra={"stage": "sft"})
    save_checkpoint(out.pair.policy, run.file("final.ckpt"),
                    step=sum(s.steps for s in out.stages), extra={"stage": cfg.train.stage})
    with open(run.file("train_log.jsonl"), "w", encoding="utf-8") as fh:
        for s in out.stages:
            fh.write(s.log_jsonl())
    run.write_json("stages.json", [{"stage": s.stage, "steps": s.steps, "initial": s.initial,
                                    "final": s.final} for s in out.stages])
    for name, r in out.reports.items():
        run.write_json(f"report.{name}.json", r.to_dict(cfg.eval.with_records))
    _emit(run, "results", [_report_row(n, r) for n, r in out.reports.items()], _REPORT_COLS)


def cmd_evaluate(args, cfg, run):
    model, _ = load_checkpoint(args.checkpoint)
    split = dp.read_split(args.data)
    vocab = Vocabulary.load(args.vocab or Path(args.data) / "vocab.json")
    if model.cfg.vocab_size != len(vocab):
        raise ConfigError(f"checkpoint expects {model.cfg.vocab_size} tokens, vocabulary has {len(vocab)}")
    samples = getattr(split, args.split)
    if cfg.eval.max_samples is not None:
        samples = samples[:cfg.eval.max_samples]
    report = evaluate_split(model, samples, vocab, args.mode or cfg.eval.mode)
    run.write_json("report.json", report.to_dict(cfg.eval.with_records))
    _emit(run, "results", [_report_row(Path(args.checkpoint).name, report)], _REPORT_COLS)


def cmd_sweep(args, cfg, run):
    split, vocab = _prepared(args, cfg)
    sweep = args.lrs or list(cfg.train.lr_sweep)
    res = lr_sweep(ex.make_model(cfg, vocab), split, vocab, cfg.train, sweep)
    _emit(run, "sweep", res.table, ["lr", "valid_auc"],
          {"best_lr": res.best_lr, "best_auc": res.best_auc})
    print(f"best lr {res.best_lr:g} (valid AUC {res.best_auc:.4f})")


def cmd_ablate_k(args, cfg, run):
    rows = ex.ablate_k(cfg, args.k, args.seeds)
    _emit(run, "ablate_k", rows, ["k", "status", "auc", "gap"])


def cmd_ablate_fewshot(args, cfg, run):
    rows = ex.ablate_fewshot(cfg, args.sizes, args.stages, args.seeds)
    _emit(run, "ablate_fewshot", rows, ["stage", "n_train", "auc"])


def cmd_cross_domain(args, cfg, run):
    res = ex.cross_domain(cfg)
    rows = [_report_row(f"{cfg.data.domain}->{cfg.data.target_domain}", res["cross_domain"]),
            _report_row(f"{cfg.data.domain}->{cfg.data.domain}", res["in_domain"]),
            _report_row("untrained", res["untrained"])]
    _emit(run, "cross_domain", rows, _REPORT_COLS)


def cmd_gradcheck(args, cfg, run):
    res = ex.gradient_suite(args.cases, seed=cfg.model.seed, corrupt=args.corrupt,
                            dtype=args.dtype)
    rows = [{"case": c["case"], "worst_rel_err": c["worst_rel_err"],
             "worst_param": c["worst_param"], "entries": c["n_checked"]} for c in res.cases]
    ok = res.passed(args.tol)
    _emit(run, "gradcheck", rows, ["case", "worst_rel_err", "worst_param", "entries"],
          {"passed": ok, "worst_rel_err": res.worst_rel_err, "worst_case": res.worst_case,
           "tolerance": args.tol, "dtype": res.dtype,
           "failing_params": res.failing_params(args.tol)})
    print(f"precision {res.dtype}; worst relative error {res.worst_rel_err:.3e} "
          f"({res.worst_case}, {res.worst_param}) -> {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise NumericError("gradient check failed for: " + ", ".join(res.failing_params(args.tol)))


def cmd_case_study(args, cfg, run):
    before, _ = load_checkpoint(args.before)
    after, _ = load_checkpoint(args.after)
    split = dp.read_split(args.data)
    vocab = Vocabulary.load(args.vocab or Path(args.data) / "vocab.json")
    samples = getattr(split, args.split)[:args.n_samples]
    res = ex.case_study(before, after, samples, vocab, args.mode or cfg.eval.mode)
    run.write_json("case_study.json", res)
    text = "\n\n".join(f"[{s.user_id}]\n{format_case_study(d)}" for s, d in zip(samples, res["dumps"]))
    run.write_text("case_study.txt", text)
    rows = [{"label": k, "before": v["mean_token_prob_before"], "after": v["mean_token_prob_after"]}
            for k, v in res["summary"].items()]
    _emit(run, "summary", rows, ["label", "before", "after"])


def cmd_baseline_bpr(args, cfg, run):
    split, _ = _prepared(args, cfg)
    params, report = ex.baseline_bpr(cfg, split)
    run.write_json("report.json", report.to_dict(cfg.eval.with_records))
    run.write_json("loss_history.json", params.history)
    _emit(run, "results", [_report_row("bpr-mf", report)], _REPORT_COLS)


COMMANDS = {
    "prepare-data": (cmd_prepare_data, "generate or load ratings, build samples, splits and vocabulary"),
    "build-vocab": (cmd_build_vocab, "build a vocabulary from prepared samples"),
    "train": (cmd_train, "train (SFT and/or DMPO) and evaluate on the test split"),
    "evaluate": (cmd_evaluate, "score a checkpoint on a prepared split"),
    "sweep": (cmd_sweep, "learning-rate sweep, best by validation AUC"),
    "ablate-k": (cmd_ablate_k, "test AUC per number of negatives k"),
    "ablate-fewshot": (cmd_ablate_fewshot, "test AUC per train size and stage"),
    "cross-domain": (cmd_cross_domain, "train on one domain, test on another"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the loss gradients"),
    "case-study": (cmd_case_study, "per-token probabilities of candidates under two checkpoints"),
    "baseline-bpr": (cmd_baseline_bpr, "BPR matrix-factorization baseline on the same splits"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmporec", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value by dotted path (repeatable)")
        sp.add_argument("--out", help="run directory (default: runs/<command>-<timestamp>)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("build-vocab", "train", "sweep", "baseline-bpr"):
            sp.add_argument("--data", help="prepared data directory (from prepare-data)")
        if name == "build-vocab":
            sp.add_argument("--cap", type=int)
        if name in ("evaluate", "case-study"):
            sp.add_argument("--data", required=True, help="prepared data directory")
            sp.add_argument("--vocab", help="vocab.json (default: <data>/vocab.json)")
            sp.add_argument("--split", default="test", choices=("train", "valid", "test"))
            sp.add_argument("--mode", choices=("token-mean", "joint-over-n"))
        if name == "evaluate":
            sp.add_argument("--checkpoint", required=True)
        if name == "case-study":
            sp.add_argument("--before", required=True)
            sp.add_argument("--after", required=True)
            sp.add_argument("--n-samples", type=int, default=3)
        if name == "sweep":
            sp.add_argument("--lrs", type=float, nargs="+")
        if name == "ablate-k":
            sp.add_argument("--k", type=int, nargs="+", default=[1, 2, 3, 4, 5])
        if name == "ablate-fewshot":
            sp.add_argument("--sizes", type=int, nargs="+", default=[20, 50, 100, 200])
            sp.add_argument("--stages", nargs="+", default=["sft_then_dmpo", "dmpo_only"],
                            choices=("sft_then_dmpo", "dmpo_only"))
        if name in ("ablate-k", "ablate-fewshot"):
            sp.add_argument("--seeds", type=int, nargs="+")
        if name == "gradcheck":
            sp.add_argument("--cases", type=int, default=20)
            sp.add_argument("--tol", type=float, default=1e-3)
            sp.add_argument("--dtype", default="float64", choices=("float64", "float32"))
            sp.add_argument("--corrupt", action="store_true",
                            help="perturb one analytic gradient (negative control)")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    fn = COMMANDS[args.command][0]
    run = None
    try:
        cfg = _config(args)
        out = args.out or f"runs/{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
        run = RunDir(out, args.command, cfg, argv)
        fn(args, cfg, run)
    except DmporecError as exc:
        log.error("%s", exc)
        if run is not None:
            run.meta["error"] = str(exc)
            run.close("failed")
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        if run is not None:
            run.meta["error"] = str(exc)
            run.close("failed")
        return DataError.exit_code
    except Exception as exc:  # noqa: BLE001 - report, then map to the generic code
        log.exception("unexpected failure: %s", exc)
        if run is not None:
            run.meta["error"] = repr(exc)
            run.close("failed")
        return 1
    run.close("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
