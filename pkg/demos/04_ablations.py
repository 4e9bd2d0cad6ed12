"""
Number of negatives, few-shot size and domain transfer
======================================================

Every setting is a full train + evaluate run of the acceptance preset, so
this script takes roughly half an hour on one core.
"""

from pathlib import Path

from dmporec import experiments as ex
from dmporec.config import load_config

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "tiny.yaml")

print("test AUC per number of negatives")
for row in ex.ablate_k(cfg, (1, 2, 3, 4, 5)):
    print(f"  k={row['k']}  {row.get('auc', float('nan')):.3f}  {row['status']}")

print("\ntest AUC per train size")
for row in ex.ablate_fewshot(cfg, (20, 50, 100, 200)):
    print(f"  {row['stage']:<14} n={row['n_train']:<4} {row['auc']:.3f}")

res = ex.cross_domain(cfg)
print(f"\n{res['source']} -> {res['target']}: {res['cross_domain'].auc:.3f}"
      f"  (in-domain {res['in_domain'].auc:.3f}, untrained {res['untrained'].auc:.3f})")
