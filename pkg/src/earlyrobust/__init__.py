"""Early robust-ticket search for small transformer text classifiers.

Modules, bottom up: ``tensor`` (reverse-mode autodiff), ``minibert`` (gated
encoder), ``adversary`` (embedding-space PGD / FreeLB), ``ticket`` (gate
penalty, masks, early stop, pruning), ``trainer`` (search, fine-tune, timing),
``attack`` (greedy synonym attack), ``corpus`` (synthetic data) and ``cli``.
"""

__version__ = "0.1.0"
