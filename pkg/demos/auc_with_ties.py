"""
ROC-AUC with ties
=================

The rank formula against a direct count of ordered positive/negative pairs.
"""

import numpy as np

from oodbatch.metrics import roc_auc

scores = np.array([0.9, 0.7, 0.7, 0.4, 0.4, 0.4, 0.1])
labels = np.array([1, 1, 0, 1, 0, 0, 0])

pos, neg = scores[labels == 1], scores[labels == 0]
pairs = [(p > n) + 0.5 * (p == n) for p in pos for n in neg]
print("pairwise  :", sum(pairs) / len(pairs))
print("rank-based:", roc_auc(scores, labels))

# only the ordering matters
print("monotone transform:", roc_auc(np.log(scores), labels))
print("one class only    :", roc_auc(scores[:2], labels[:2]))
