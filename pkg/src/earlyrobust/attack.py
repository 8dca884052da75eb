"""Greedy importance-ranked synonym substitution attack and its metrics.

A *query* is one example scored by the model.  Batched calls are allowed and
count one query per row; :class:`QueryCounter` does the bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .corpus import Dataset, SynonymTable
from .minibert import UNK_ID, ModelParams, predict_proba

ProbaFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class AttackConfig:
    max_candidates_per_word: int = 8
    query_budget: int = 500
    eval_sample_size: int | None = None

    def __post_init__(self):
        if self.query_budget < 1:
            raise ValueError("query_budget must be >= 1")
        if self.max_candidates_per_word < 0:
            raise ValueError("max_candidates_per_word must be >= 0")


class QueryCounter:
    """Wraps a probability function and counts every scored row."""

    def __init__(self, fn: ProbaFn):
        self.fn = fn
        self.queries = 0
        self.calls = 0

    def __call__(self, tokens) -> np.ndarray:
        tokens = np.atleast_2d(tokens)
        self.queries += tokens.shape[0]
        self.calls += 1
        return self.fn(tokens)


def model_fn(params: ModelParams) -> ProbaFn:
    return lambda tokens: predict_proba(tokens, params)


@dataclass
class AttackRow:
    idx: int
    label: int
    clean_pred: int
    final_pred: int
    queries: int
    success: bool
    positions: list[int] = field(default_factory=list)

    @property
    def robust(self) -> bool:
        return self.final_pred == self.label


@dataclass
class AttackReport:
    rows: list[AttackRow]

    @property
    def clean_pct(self) -> float:
        return 100.0 * np.mean([r.clean_pred == r.label for r in self.rows]) if self.rows else 0.0

    @property
    def aua_pct(self) -> float:
        return 100.0 * np.mean([r.robust for r in self.rows]) if self.rows else 0.0

    @property
    def avg_queries(self) -> float:
        return float(np.mean([r.queries for r in self.rows])) if self.rows else 0.0

    @property
    def avg_queries_success(self) -> float:
        q = [r.queries for r in self.rows if r.success]
        return float(np.mean(q)) if q else 0.0

    def summary(self) -> dict[str, float]:
        return {"clean_pct": self.clean_pct, "aua_pct": self.aua_pct,
                "avg_queries": self.avg_queries, "avg_queries_success": self.avg_queries_success,
                "n": len(self.rows)}

    def to_rows_text(self) -> str:
        lines = ["idx label clean_pred final_pred queries success positions"]
        for r in self.rows:
            pos = ",".join(map(str, r.positions)) or "-"
            lines.append(f"{r.idx} {r.label} {r.clean_pred} {r.final_pred} {r.queries} {int(r.success)} {pos}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        s = self.summary()
        return ("| metric  | value |\n|---------|-------|\n"
                f"| Clean%  | {s['clean_pct']:.2f} |\n"
                f"| Aua%    | {s['aua_pct']:.2f} |\n"
                f"| #Query  | {s['avg_queries']:.2f} |\n"
                f"| #Query (successful only) | {s['avg_queries_success']:.2f} |\n"
                f"| n       | {s['n']} |\n")

    def save(self, directory, stem: str = "attack") -> None:
        d = Path(directory)
        (d / f"{stem}_rows.txt").write_text(self.to_rows_text())
        (d / f"{stem}_table.md").write_text(self.to_table())

    @classmethod
    def from_rows_text(cls, text: str) -> "AttackReport":
        rows = []
        for line in text.splitlines()[1:]:
            if not line.strip():
                continue
            i, y, c, f, q, s, pos = line.split()
            rows.append(AttackRow(int(i), int(y), int(c), int(f), int(q), bool(int(s)),
                                  [] if pos == "-" else [int(p) for p in pos.split(",")]))
        return cls(rows)


def _argmax(p: np.ndarray) -> np.ndarray:
    return np.argmax(p, axis=-1)   # first max wins: lowest class index on ties


def clean_accuracy(proba: ProbaFn | ModelParams, data: Dataset, batch_size: int = 256) -> float:
    fn = model_fn(proba) if isinstance(proba, ModelParams) else proba
    if len(data) == 0:
        return 0.0
    correct = 0
    for s in range(0, len(data), batch_size):
        p = fn(data.tokens[s:s + batch_size])
        correct += int((_argmax(p) == data.labels[s:s + batch_size]).sum())
    return correct / len(data)


def rank_word_importance(proba: ProbaFn, tokens: np.ndarray, label: int, length: int,
                         base_prob: float | None = None) -> tuple[list[int], np.ndarray]:
    """Positions ordered by drop in true-class probability under an <unk> probe.

    Costs ``length`` queries (one per position), plus one if ``base_prob`` is
    not supplied.
    """
    if base_prob is None:
        base_prob = float(proba(tokens[None])[0, label])
    if length == 0:
        return [], np.zeros(0)
    probes = np.repeat(tokens[None], length, axis=0)
    probes[np.arange(length), np.arange(length)] = UNK_ID
    drop = base_prob - proba(probes)[:, label]
    order = np.argsort(-drop, kind="stable")
    return [int(i) for i in order], drop


def greedy_attack(proba: ProbaFn, tokens: np.ndarray, label: int, length: int,
                  syn: SynonymTable, cfg: AttackConfig, idx: int = 0) -> AttackRow:
    counter = QueryCounter(proba)
    tokens = np.array(tokens, dtype=np.int64)
    p0 = counter(tokens)[0]
    clean_pred = int(_argmax(p0))
    if clean_pred != label:
        return AttackRow(idx, label, clean_pred, clean_pred, counter.queries, False)
    if counter.queries + length > cfg.query_budget:
        return AttackRow(idx, label, clean_pred, clean_pred, counter.queries, False)
    order, _ = rank_word_importance(counter, tokens, label, length, base_prob=float(p0[label]))

    cur = tokens.copy()
    cur_prob = float(p0[label])
    pred = clean_pred
    changed: list[int] = []
    for pos in order:
        cands = syn.get(int(cur[pos]), [])[:cfg.max_candidates_per_word]
        room = cfg.query_budget - counter.queries
        if room <= 0:
            break
        cands = cands[:room]
        if not cands:
            continue
        trials = np.repeat(cur[None], len(cands), axis=0)
        trials[:, pos] = cands
        probs = counter(trials)
        j = int(np.argmin(probs[:, label]))
        if probs[j, label] < cur_prob:
            cur = trials[j]
            cur_prob = float(probs[j, label])
            pred = int(_argmax(probs[j]))
            changed.append(int(pos))
            if pred != label:
                break
    return AttackRow(idx, label, clean_pred, pred, counter.queries, pred != label, changed)


def evaluate_robustness(proba: ProbaFn | ModelParams, data: Dataset, syn: SynonymTable,
                        cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackReport:
    fn = model_fn(proba) if isinstance(proba, ModelParams) else proba
    idx = np.arange(len(data))
    if cfg.eval_sample_size is not None and cfg.eval_sample_size < len(data):
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(len(data), cfg.eval_sample_size, replace=False))
    rows = [greedy_attack(fn, data.tokens[i], int(data.labels[i]), int(data.lengths[i]), syn, cfg, int(i))
            for i in idx]
    return AttackReport(rows)
