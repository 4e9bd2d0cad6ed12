"""
From ratings to preference samples
==================================

Builds a synthetic rating log, turns each user into one preference sample
and shows what the model is trained and tested on.
"""

from dmporec import datapipe as dp
from dmporec.synthetic import SyntheticConfig, generate_events

# a few hundred users; every user likes one latent genre
events = generate_events(SyntheticConfig(n_users=300, seed=0))
print(len(events), "rating rows, e.g.", events[0])

# keep users with >= 5 liked and >= 5 disliked items, most recent 40 events
histories = dp.filter_and_truncate(events, min_pos=5, min_neg=5, max_history=40)
print(len(histories), "users kept")

# k = 3 negatives per sample, drawn from the user's own low-rated items
samples = dp.build_pool(histories, k=3, seed=0, max_prompt_items=5)
s = samples[0]
print("\nprompt:\n ", s.prompt)
print("chosen:  ", s.chosen)
print("rejected:", s.rejected)

# training reads each pair under its own prompt ...
print("\nprompt for pair 2:\n ", dp.pair_prompt(s, 1))

# ... and evaluation uses single-pair samples, identical to building with k = 1
view = dp.single_pair_view(s)
print("\nsingle-pair view equals the k=1 sample:",
      view.to_dict() == dp.build_pool(histories[:1], 1, 0, max_prompt_items=5)[0].to_dict())

split = dp.make_splits(samples, sizes=(100, 100, 90), seed=0)
print("split sizes:", split.sizes)
