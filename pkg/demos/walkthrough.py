"""Walk through one robust-ticket run on a small synthetic task.

    python demos/walkthrough.py [output_dir]

Takes about fifteen seconds on one core.  Each stage is called directly so the
intermediate objects can be inspected; `earlyrobust pipeline` does the same
thing in one call.
"""

import sys
from pathlib import Path

import numpy as np

from earlyrobust.attack import clean_accuracy, evaluate_robustness
from earlyrobust.config import RunConfig
from earlyrobust.minibert import init_params, param_count
from earlyrobust.ticket import extract_ticket
from earlyrobust.trainer import finetune_stage, load_corpus, model_config, rng_streams, search_stage

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/walkthrough")
cfg = RunConfig().with_overrides({
    "corpus.n_train": 600, "corpus.n_test": 200, "training.finetune_epochs": 4, "attack.eval_sample_size": 100,
})

corpus = load_corpus(cfg)
print(f"corpus: {len(corpus.train)} train / {len(corpus.test)} test, vocab {len(corpus.vocab)}, "
      f"{len(corpus.synonyms)} words with synonyms")

rngs = rng_streams(cfg.seed)
theta0 = init_params(model_config(cfg, corpus), rngs["init"])
searched = theta0.copy()

# 1. adversarial search with gate penalty, stopped by the mask-distance detector
res = search_stage(corpus.train, searched, cfg.training, cfg.adversary, cfg.regularizer,
                   cfg.effective_prune(), rngs, cfg.detector.gamma, cfg.detector.window)
print(f"\nsearch stopped after {res.steps} steps (converged={res.converged}); "
      f"clean acc at that point {clean_accuracy(res.params, corpus.test):.3f}")
for line in res.trace:
    print("  ", line)

# 2. ticket = theta0 restricted to the surviving heads and neurons
ticket = extract_ticket(theta0, res.ticket_mask)
heads, neurons = res.ticket_mask.pruned_counts()
print(f"\npruned {heads} heads and {neurons} neurons: "
      f"{param_count(theta0, True)} -> {param_count(ticket, True)} non-embedding weights")
for l, (h, n) in enumerate(zip(res.ticket_mask.head, res.ticket_mask.neuron)):
    print(f"  layer {l}: heads kept {np.flatnonzero(h).tolist()}, neurons kept {int(n.sum())}/{n.size}")

# 3. ordinary fine-tuning of the ticket
ft = finetune_stage(ticket, corpus.train, cfg.training, rngs["finetune"], eval_data=corpus.test)
print("\nfine-tune clean acc per epoch:", " ".join(f"{a:.3f}" for a in ft.epoch_clean_acc))

# 4. greedy synonym attack
report = evaluate_robustness(ft.params, corpus.test, corpus.synonyms, cfg.attack, rngs["attack"])
print()
print(report.to_table())
out.mkdir(parents=True, exist_ok=True)
report.save(out)
print(f"\nrows written to {out / 'attack_rows.txt'}")
