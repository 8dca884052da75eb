"""Compare the searched ticket with an equal-sparsity random ticket.

    python demos/ablation_compare.py [seed ...]

Runs the pipeline twice per seed (a few minutes each on one core) and prints
Clean%, Aua% and #Query side by side.
"""

import sys
import tempfile

from earlyrobust.config import RunConfig
from earlyrobust.trainer import load_corpus, run_pipeline

seeds = [int(s) for s in sys.argv[1:]] or [0]
rows = []
with tempfile.TemporaryDirectory() as tmp:
    for seed in seeds:
        base = RunConfig().with_overrides({"run.seed": seed, "training.repeat": 1})
        corpus = load_corpus(base)
        for name, cfg in (("searched", base), ("random", base.with_overrides({"modes.random_ticket": True}))):
            rep = run_pipeline(cfg, corpus, f"{tmp}/{name}{seed}")
            rows.append((seed, name, rep.clean_pct, rep.aua_pct, rep.avg_queries, rep.search_steps))
            print(f"seed {seed} {name:8s} Clean% {rep.clean_pct:6.2f}  Aua% {rep.aua_pct:6.2f}  "
                  f"#Query {rep.avg_queries:6.2f}  (search stopped at step {rep.search_steps})", flush=True)

for name in ("searched", "random"):
    sel = [r for r in rows if r[1] == name]
    mean = [sum(r[i] for r in sel) / len(sel) for i in (2, 3, 4)]
    print(f"mean {name:8s} Clean% {mean[0]:6.2f}  Aua% {mean[1]:6.2f}  #Query {mean[2]:6.2f}")
