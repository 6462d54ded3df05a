"""
Balanced versus random batches
==============================

A 90/10 training pool.  Random batches mirror the pool; balanced batches
take the same number of rows from each environment and recycle the small one.
"""

from collections import Counter

from oodbatch.sampler import BALANCED, RANDOM_MERGED, SamplerConfig, plan_balanced, plan_random

sizes = [900, 100]

# random: share of each environment over one epoch
rows = [tuple(r) for p in plan_random(sizes, SamplerConfig(RANDOM_MERGED, 32, seed=0), 0) for r in p]
print("random  :", Counter(int(e) for e, _ in rows))

# balanced: 16 + 16 per batch, epoch length set by the small environment
plans = plan_balanced(sizes, SamplerConfig(BALANCED, 32, seed=0), 0)
print("balanced:", len(plans), "batches;", Counter(int(e) for p in plans for e, _ in p))
print("first batch:", Counter(int(e) for e, _ in plans[0]))
