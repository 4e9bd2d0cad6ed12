"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The lines are printed in the pytest terminal summary under
"acceptance criteria". End-to-end runs use ``configs/tiny.yaml``; the
few-shot criterion uses ``configs/fewshot.yaml``.
"""

import itertools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from dmporec import datapipe as dp
from dmporec import experiments as ex
from dmporec.config import load_config
from dmporec.evalkit import auc
from dmporec.objectives import DmpoConfig, dmpo_loss, dmpo_terms
from dmporec.seqmodel import PolicyPair
from dmporec.synthetic import SyntheticConfig, generate_events

from conftest import ACCEPTANCE_LINES

ROOT = Path(__file__).resolve().parents[1]
TINY = ROOT / "configs" / "tiny.yaml"
FEWSHOT = ROOT / "configs" / "fewshot.yaml"
ML1M_ENV = "DMPOREC_ML1M_DIR"


def record(cid: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def tiny_cfg(*overrides):
    return load_config(TINY, list(overrides))


@pytest.fixture(scope="module")
def tiny_prepared():
    cfg = tiny_cfg()
    return cfg, ex.prepare(cfg)


@pytest.fixture(scope="module")
def tiny_run(tiny_prepared):
    cfg, prep = tiny_prepared
    t0 = time.perf_counter()
    out = ex.train_and_evaluate(cfg, prep.split, prep.vocab)
    return cfg, prep, out, time.perf_counter() - t0


# ---------------------------------------------------------------- 1


def _independent_dpo(pair, chosen, rejected, beta):
    """Single-pair DPO written out from log-probs and their gradients."""
    pol, ref = pair.policy, pair.reference
    lw, gw = pol.grad_logprob(chosen)
    ll, gl = pol.grad_logprob(rejected)
    z = beta * ((lw.sum_logp - ref.logprobs(chosen).sum_logp)
                - (ll.sum_logp - ref.logprobs(rejected).sum_logp))
    loss = math.log1p(math.exp(-z)) if z > -30 else -z + math.log1p(math.exp(z))
    w = 1.0 / (1.0 + math.exp(z))
    grads = {n: -beta * w * (gw[n] - gl[n]) for n in pol.trainable}
    return loss, grads


def test_c1_dpo_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_loss = worst_grad = 0.0
    for i in range(1000):
        model = ex.tiny_model(rng, adapters=bool(i % 2))
        ref = model.copy()
        for v in ref.params.values():
            v += rng.normal(0, 0.05, v.shape)
        pair = PolicyPair(model, ref.freeze())
        P = int(rng.integers(1, 6))
        chosen = ex._random_seq(rng, 17, P, int(rng.integers(1, 5)))
        rejected = ex._random_seq(rng, 17, P, int(rng.integers(1, 5)))
        beta = float(rng.uniform(0.01, 3.0))
        out = dmpo_loss(pair, chosen, [rejected], DmpoConfig(beta, 1))
        loss, grads = _independent_dpo(pair, chosen, rejected, beta)
        worst_loss = max(worst_loss, abs(out.loss - loss))
        worst_grad = max(worst_grad, max(float(np.max(np.abs(out.grads[n] - grads[n])))
                                         for n in grads))
    secs = time.perf_counter() - t0
    ok = worst_loss < 1e-12 and worst_grad < 1e-10 and secs < 60
    record("1", ok, f"dmpo(k=1) vs DPO over 1000 instances: max |dloss| {worst_loss:.2e} "
                    f"(< 1e-12), max |dgrad| {worst_grad:.2e} (< 1e-10), {secs:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 2


def test_c2_gradient_fidelity():
    t0 = time.perf_counter()
    res = ex.gradient_suite(n_cases=20, seed=0, step=1e-4)
    secs = time.perf_counter() - t0
    params = {p for c in res.cases for p in c["per_param"]}
    covers = any(".lora_" in p for p in params) and any(".lora_" not in p for p in params)
    kinds = {c["case"].split(":")[1] for c in res.cases}
    ok = res.passed(1e-3) and covers and kinds == {"sft", "dmpo"} and secs < 120
    record("2", ok, f"finite differences (step 1e-4, float64) over 20 model/sample pairs, "
                    f"sft+dmpo, adapter+base params: worst rel err {res.worst_rel_err:.2e} "
                    f"(< 1e-3) at {res.worst_param}, {secs:.1f}s (< 120s)")
    assert ok


# ---------------------------------------------------------------- 3


def test_c3_policy_equals_reference():
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(1, 6):
        for beta in (0.01, 0.1, 0.3, 1.0, 10.0):
            pair = PolicyPair(ex.tiny_model(rng, adapters=k % 2 == 0))
            seqs = [ex._random_seq(rng, 17, 3, int(rng.integers(1, 5))) for _ in range(k + 1)]
            out = dmpo_loss(pair, seqs[0], seqs[1:], DmpoConfig(beta, k))
            worst = max(worst, abs(out.loss - math.log(2)))
    ok = worst < 1e-12
    record("3", ok, f"policy == reference, k=1..5, beta in {{0.01..10}}: "
                    f"max |loss - ln 2| {worst:.1e} (< 1e-12)")
    assert ok


# ---------------------------------------------------------------- 4

STATED_MARGIN_07 = 0.40302
STATED_MARGIN_03 = 0.554355


def _oracle(margin):
    return -math.log(1.0 / (1.0 + math.exp(-margin)))


def test_c4_scalar_oracles():
    one = dmpo_terms(-1.0, -1.2, [-2.0], [-1.5], beta=1.0)
    two = dmpo_terms(-1.0, -1.2, [-2.0, -1.2], [-1.5, -1.5], beta=1.0)
    ok_inputs = (abs(one.margin - 0.7) < 1e-12 and abs(two.margin - 0.3) < 1e-12
                 and np.allclose(two.rejected_rewards, [-0.5, 0.3]))
    err1 = abs(one.loss - _oracle(0.7))
    err2 = abs(two.loss - _oracle(0.3))
    err2_stated = abs(two.loss - STATED_MARGIN_03)
    ok = ok_inputs and err1 < 1e-5 and err2 < 1e-5 and err2_stated < 1e-5
    record("4", ok, f"margin 0.7 -> {one.loss:.6f} (oracle -ln sigmoid(0.7) = {_oracle(0.7):.6f}); "
                    f"margin 0.3 -> {two.loss:.6f} (stated {STATED_MARGIN_03}, |diff| "
                    f"{err2_stated:.1e} < 1e-5)")
    assert ok


@pytest.mark.xfail(strict=True, reason="the stated constant 0.40302 disagrees with "
                                       "-ln sigmoid(0.7) = 0.403186 by 1.7e-4")
def test_c4_stated_constant_margin_07():
    one = dmpo_terms(-1.0, -1.2, [-2.0], [-1.5], beta=1.0)
    diff = abs(one.loss - STATED_MARGIN_07)
    ok = diff < 1e-5
    record("4 (stated 0.40302)", ok,
           f"loss {one.loss:.6f} vs stated {STATED_MARGIN_07}: |diff| {diff:.2e} (tolerance 1e-5); "
           f"the stated value is inconsistent with its own formula, which gives "
           f"{_oracle(0.7):.6f}")
    assert ok


# ---------------------------------------------------------------- 5


def _brute_auc(pos, neg):
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def test_c5_auc_brute_force():
    rng = np.random.default_rng(5)
    worst, ties = 0.0, 0
    for i in range(500):
        n_pos, n_neg = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        if i % 10 == 0:
            pos = np.full(n_pos, 0.25)
            neg = np.full(n_neg, 0.25)
            ties += 1
            assert auc(pos, neg) == 0.5
        elif i % 3 == 0:
            pos = rng.integers(0, 5, n_pos) / 4
            neg = rng.integers(0, 5, n_neg) / 4
        else:
            pos, neg = rng.normal(0.3, 1, n_pos), rng.normal(0, 1, n_neg)
        worst = max(worst, abs(auc(pos, neg) - _brute_auc(pos, neg)))
    ok = worst < 1e-12
    record("5", ok, f"AUC vs O(n^2) brute force on 500 lists ({ties} all-tie lists -> 0.5): "
                    f"max diff {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 6, 8


@pytest.mark.slow
def test_c6_end_to_end(tiny_run):
    cfg, prep, out, secs = tiny_run
    r = out.reports
    u, s, f = r["untrained"].auc, r["sft"].auc, r["final"].auc
    ok = abs(u - 0.5) <= 0.05 and s >= 0.65 and f >= s and f >= 0.85 and secs < 600
    record("6", ok, f"synthetic 100-shot, tiny model, k={cfg.train.k}: untrained AUC {u:.3f} "
                    f"(0.5 +/- 0.05), SFT {s:.3f} (>= 0.65), SFT+DMPO {f:.3f} (>= SFT, >= 0.85), "
                    f"{secs:.0f}s (< 600s)")
    assert ok


@pytest.mark.slow
def test_c8_gap_and_negative_suppression(tiny_run):
    cfg, prep, out, _ = tiny_run
    sft, final = out.reports["sft"], out.reports["final"]
    study = ex.case_study(out.sft_policy, out.pair.policy, prep.split.test[:50], prep.vocab)
    neg_tok = study["summary"]["negative"]
    ok = final.gap > sft.gap and final.mean_neg_score < sft.mean_neg_score
    record("8", ok, f"gap after SFT {sft.gap:.4f} -> after DMPO {final.gap:.4f} (must grow); "
                    f"mean negative score {sft.mean_neg_score:.4f} -> {final.mean_neg_score:.4f} "
                    f"(must drop); negative-candidate token prob "
                    f"{neg_tok['mean_token_prob_before']:.4f} -> {neg_tok['mean_token_prob_after']:.4f}")
    assert ok


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_c7_ablate_k():
    cfg = tiny_cfg()
    t0 = time.perf_counter()
    rows = ex.ablate_k(cfg, (1, 2, 3, 4, 5))
    by_k = {r["k"]: r for r in rows}
    table = ", ".join(f"k={r['k']}: {r['auc']:.3f}" if r["status"] == "ok"
                      else f"k={r['k']}: skipped" for r in rows)
    ok = (all(r["status"] == "ok" for r in rows)
          and by_k[3]["auc"] >= by_k[1]["auc"] - 0.02)
    record("7", ok, f"test AUC per k ({table}); AUC(k=3) >= AUC(k=1) - 0.02; "
                    f"{time.perf_counter() - t0:.0f}s")
    assert ok


# ---------------------------------------------------------------- 9


def _write_ml1m(root: Path, n_users: int = 1400) -> None:
    """Synthetic ratings in the native ML-1M ``::`` layout."""
    evs = generate_events(SyntheticConfig(n_users=n_users, seed=9))
    ids = {t: i for i, t in enumerate(sorted({e.item_title for e in evs}), start=1)}
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "movies.dat", "w", encoding="latin-1") as fh:
        for t, i in ids.items():
            fh.write(f"{i}::{t} (1999)::Drama\n")
    with open(root / "ratings.dat", "w", encoding="latin-1") as fh:
        for e in evs:
            fh.write(f"{int(e.user_id[1:]) + 1}::{ids[e.item_title]}::{int(e.rating)}::{e.timestamp}\n")


def _ml1m_check(root: Path, out: Path):
    t0 = time.perf_counter()
    cfg = load_config(None, ["data.source=movielens-1m", f"data.path={root}"])
    digests = []
    for run in ("a", "b"):
        events = ex.load_events(cfg.data)
        hists = dp.filter_and_truncate(events, 5, 5, 40)
        samples = dp.build_pool(hists, 1, cfg.data.seed)
        split = dp.make_splits(samples, (100, 100, 1000), cfg.data.seed)
        dp.write_split(split, out / run)
        digests.append({n: (out / run / f"split.{n}.jsonl").read_bytes()
                        for n in ("train", "valid", "test")})
    secs = time.perf_counter() - t0
    hist_ok = all(h.pos_count >= 5 and h.neg_count >= 5 and len(h.items) <= 40 for h in hists)
    users = [split.users(n) for n in ("train", "valid", "test")]
    disjoint = not (users[0] & users[1] or users[0] & users[2] or users[1] & users[2])
    sizes_ok = split.sizes == (100, 100, 1000)
    same = digests[0] == digests[1]
    ok = hist_ok and disjoint and sizes_ok and same and secs < 120
    detail = (f"{len(hists)} users kept, all >= 5 pos / >= 5 neg / <= 40 items: {hist_ok}; "
              f"splits {split.sizes} user-disjoint: {disjoint}; byte-identical reruns: {same}; "
              f"{secs:.1f}s (< 120s)")
    return ok, detail


def test_c9_movielens_format_fixture(tmp_path):
    _write_ml1m(tmp_path / "ml")
    ok, detail = _ml1m_check(tmp_path / "ml", tmp_path / "out")
    record("9 (ML-1M-format fixture)", ok, detail)
    assert ok


@pytest.mark.skipif(not os.environ.get(ML1M_ENV),
                    reason=f"real MovieLens-1M files not available; set {ML1M_ENV}")
def test_c9_movielens_real(tmp_path):
    ok, detail = _ml1m_check(Path(os.environ[ML1M_ENV]), tmp_path)
    record("9 (real MovieLens-1M)", ok, detail)
    assert ok


def test_c9_real_files_status():
    if not os.environ.get(ML1M_ENV):
        ACCEPTANCE_LINES.append(f"[SKIP] criterion 9 (real MovieLens-1M): raw files not present; "
                                f"set {ML1M_ENV}=<dir with ratings.dat and movies.dat>")


# ---------------------------------------------------------------- 10


@pytest.mark.slow
def test_c10_few_shot():
    # few-shot transfer needs a prior: the base model is pretrained on
    # unlabeled catalog text before the 20- or 200-user fine-tuning; a
    # from-scratch model is reported alongside
    # 20 users is a small draw, so AUCs are averaged over three seeds
    seeds = (0, 1, 2)
    cfg = load_config(FEWSHOT)
    rows = ex.ablate_fewshot(cfg, sizes=(20, 200), stages=("sft_then_dmpo",), seeds=seeds)
    a20, a200 = rows[0]["auc"], rows[1]["auc"]
    scratch = ex.ablate_fewshot(tiny_cfg(), sizes=(20, 200), stages=("sft_then_dmpo",),
                                seeds=seeds)
    s20, s200 = scratch[0]["auc"], scratch[1]["auc"]
    per_seed = ", ".join(f"{x:.3f}/{y:.3f}" for x, y in
                         zip(rows[0]["per_seed_auc"], rows[1]["per_seed_auc"]))
    ok = a20 >= 0.80 * a200
    record("10", ok, f"pretrained base, mean of seeds {seeds}: 20-shot AUC {a20:.3f} vs "
                     f"200-shot {a200:.3f}, ratio {a20 / a200:.3f} (>= 0.80), per seed {per_seed}; "
                     f"from scratch for reference: {s20:.3f} vs {s200:.3f}, ratio {s20 / s200:.3f}")
    assert ok


# ---------------------------------------------------------------- 11


@pytest.mark.slow
def test_c11_cross_domain():
    cfg = tiny_cfg()
    res = ex.cross_domain(cfg)
    c, i = res["cross_domain"].auc, res["in_domain"].auc
    ok = c > 0.55 and c < i
    record("11", ok, f"{res['source']} -> {res['target']} AUC {c:.3f} (> 0.55), "
                     f"in-domain {i:.3f} (cross < in)")
    assert ok


# ---------------------------------------------------------------- 12


@pytest.mark.slow
def test_c12_bpr_baseline(tiny_prepared):
    cfg, prep = tiny_prepared
    _, few = ex.baseline_bpr(cfg, prep.split)
    big_cfg = cfg.replace(**{"data.sizes": [5000, 100, 1000], "data.synthetic.n_users": 6600})
    t0 = time.perf_counter()
    _, big = ex.baseline_bpr(big_cfg)
    ok = abs(few.auc - 0.5) <= 0.07 and big.auc > 0.7
    record("12", ok, f"BPR-MF on the 100-shot split AUC {few.auc:.3f} (0.5 +/- 0.07); "
                     f"on a 5000-user synthetic split {big.auc:.3f} (> 0.7), "
                     f"{time.perf_counter() - t0:.0f}s")
    assert ok
