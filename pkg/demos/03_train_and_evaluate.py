"""
SFT then DMPO on synthetic users
================================

The acceptance preset: 100 training users, a one-layer model, SFT followed
by the preference stage with three negatives. Takes a few minutes on one
core.
"""

from pathlib import Path

from dmporec import experiments as ex
from dmporec.config import load_config
from dmporec.evalkit import format_case_study

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "tiny.yaml")
prep = ex.prepare(cfg)
print("split sizes", prep.split.sizes, "vocabulary", len(prep.vocab))

out = ex.train_and_evaluate(cfg, prep.split, prep.vocab)
for name, r in out.reports.items():
    print(f"{name:<10} AUC {r.auc:.3f}  pos {r.mean_pos_score:.4f}  "
          f"neg {r.mean_neg_score:.4f}  gap {r.gap:.4f}")

for stage in out.stages:
    print(stage.stage, "initial", stage.initial, "final", stage.final)

# per-token probabilities of one test sample's candidates, before and after DMPO
study = ex.case_study(out.sft_policy, out.pair.policy, prep.split.test[:20], prep.vocab)
print("\n" + format_case_study(study["dumps"][0]))
print("\nmean candidate token probability (after SFT -> after DMPO):")
for label, v in study["summary"].items():
    print(f"  {label:<8} {v['mean_token_prob_before']:.4f} -> {v['mean_token_prob_after']:.4f}")
print(f"{out.seconds:.0f}s")
