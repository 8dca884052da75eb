"""Search, draw, fine-tune: the end-to-end robust early-bird ticket pipeline.

The search stage trains weights and gates jointly on the adversarial loss plus
the L1 gate penalty, snapshotting the binarised mask every miniepoch until the
detector fires.  The ticket is then cut from the untouched initial weights
and fine-tuned with plain cross-entropy.
"""

from __future__ import annotations

import json
import logging
import math
import pickle
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .adversary import AdvConfig, adversarial_loss, freelb_accumulate
from .attack import AttackReport, clean_accuracy, evaluate_robustness
from .config import RunConfig, TrainConfig
from .corpus import Corpus, Dataset, SynonymTable, Vocab, generate, load_dataset
from .minibert import ModelConfig, ModelParams, forward, init_params, param_count
from .tensor import Tensor, backward, cross_entropy
from .ticket import (
    ConvergenceDetector,
    Mask,
    PruneConfig,
    RegConfig,
    TicketSpec,
    binarize,
    extract_ticket,
    format_trace_line,
    random_ticket,
    regularizer,
    reinit_ticket,
)

log = logging.getLogger(__name__)

STREAMS = ("init", "data", "perturb", "ticket", "attack", "finetune")
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per purpose so ablations only differ where intended."""
    return {name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
            for i, name in enumerate(STREAMS)}


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


class Optimizer:
    """Plain SGD or Adam with bias correction, keyed by parameter name."""

    def __init__(self, kind: str = "adam_like", lr: float = 1e-3):
        if kind not in ("sgd", "adam_like"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named: list[tuple[str, Tensor]]) -> None:
        self.t += 1
        for name, p in named:
            g = p.grad
            if g is None:
                continue
            if self.kind == "sgd":
                p.data = p.data - self.lr * g
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - BETA1) * g if m is None else BETA1 * m + (1 - BETA1) * g
            v = (1 - BETA2) * g * g if v is None else BETA2 * v + (1 - BETA2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - BETA1 ** self.t)
            v_hat = v / (1 - BETA2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "t": self.t,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    @classmethod
    def from_state(cls, state: dict) -> "Optimizer":
        opt = cls(state["kind"], state["lr"])
        opt.t = state["t"]
        opt.m = {k: v.copy() for k, v in state["m"].items()}
        opt.v = {k: v.copy() for k, v in state["v"].items()}
        return opt


def optimizer_step(params: ModelParams, opt: Optimizer, coefficients: bool = True) -> None:
    opt.step(params.named_tensors(coefficients=coefficients))


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


@dataclass
class Timing:
    samples: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples)) if self.samples else 0.0


def measure_time(stage: Callable[[], object], repeat: int = 1) -> tuple[object, Timing]:
    """Wall-clock ``stage`` ``repeat`` times; inputs must already be in memory.

    Returns the result of the first run and all samples.
    """
    samples, first = [], None
    for i in range(repeat):
        t0 = time.perf_counter()
        out = stage()
        samples.append(time.perf_counter() - t0)
        if i == 0:
            first = out
    return first, Timing(samples)


# ---------------------------------------------------------------------------
# search stage
# ---------------------------------------------------------------------------


def batches_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def miniepoch_steps(n: int, cfg: TrainConfig) -> int:
    return max(1, round(cfg.miniepoch_fraction * batches_per_epoch(n, cfg.batch_size)))


@dataclass
class SearchState:
    """Everything needed to continue a search bit-for-bit."""

    params: ModelParams
    optimizer: Optimizer
    detector: ConvergenceDetector
    data_rng: dict
    perturb_rng: dict
    step: int = 0
    epoch: int = 0
    order: np.ndarray | None = None
    cursor: int = 0
    miniepoch: int = 0
    trace: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    done: bool = False
    converged: bool = False

    def save(self, path) -> None:
        Path(path).write_bytes(pickle.dumps(self))

    @classmethod
    def load(cls, path) -> "SearchState":
        return pickle.loads(Path(path).read_bytes())


@dataclass
class SearchResult:
    ticket_mask: Mask
    params: ModelParams
    steps: int
    converged: bool
    trace: list[str]
    losses: list[float]


class Search:
    """Joint adversarial training of weights and gates with early stopping."""

    def __init__(self, data: Dataset, train: TrainConfig, adv: AdvConfig, reg: RegConfig,
                 prune: PruneConfig, no_adv: bool = False):
        self.data = data
        self.train = train
        self.adv = adv
        self.reg = reg
        self.prune = prune
        self.no_adv = no_adv
        self.per_epoch = batches_per_epoch(len(data), train.batch_size)
        self.per_mini = miniepoch_steps(len(data), train)
        self.max_steps = train.search_max_epochs * self.per_epoch

    def start(self, params: ModelParams, rngs: dict[str, np.random.Generator],
              gamma: float = 0.1, window: int = 5) -> SearchState:
        if self.train.search_max_epochs <= 0:
            raise StageError("search", "search budget must be positive")
        det = ConvergenceDetector(gamma, window)
        det.update(params.coefficients, self.prune)   # baseline mask before any step
        return SearchState(params, Optimizer(self.train.optimizer, self.train.learning_rate), det,
                           rngs["data"].bit_generator.state, rngs["perturb"].bit_generator.state)

    def _loss_and_grads(self, params: ModelParams, tokens, labels, prng) -> float:
        adv = self.adv
        if self.no_adv:
            loss = cross_entropy(forward(tokens, params), labels)
            backward(loss)
            value = loss.item()
        elif adv.mode == "freelb_accumulate" and adv.steps >= 1:
            value, _ = freelb_accumulate(tokens, labels, params, adv, prng)
        else:
            loss, _ = adversarial_loss(tokens, labels, params, adv, prng)
            backward(loss)
            value = loss.item()
        penalty = regularizer(params.coefficients, self.reg)
        if penalty.requires_grad:
            backward(penalty)
        return value + penalty.item()

    def run(self, state: SearchState, max_new_steps: int | None = None) -> SearchState:
        drng = np.random.default_rng()
        drng.bit_generator.state = state.data_rng
        prng = np.random.default_rng()
        prng.bit_generator.state = state.perturb_rng
        params, n, bs = state.params, len(self.data), self.train.batch_size
        taken = 0
        while not state.done and (max_new_steps is None or taken < max_new_steps):
            if state.order is None or state.cursor >= n:
                if state.order is not None:
                    state.epoch += 1
                state.order = drng.permutation(n)
                state.cursor = 0
            idx = state.order[state.cursor:state.cursor + bs]
            state.cursor += bs
            params.zero_grad()
            loss = self._loss_and_grads(params, self.data.tokens[idx], self.data.labels[idx], prng)
            if not np.isfinite(loss):
                raise StageError("search", f"non-finite loss at step {state.step}")
            state.optimizer.step(params.named_tensors())
            state.step += 1
            taken += 1
            state.losses.append(loss)
            if state.step % self.per_mini == 0:
                state.miniepoch += 1
                stop = state.detector.update(params.coefficients, self.prune)
                hd, nd = state.detector.history[-1]
                state.trace.append(format_trace_line(state.miniepoch, hd, nd, state.detector.consecutive_hits))
                if stop:
                    state.done = state.converged = True
            if state.step >= self.max_steps:
                state.done = True
        state.data_rng = drng.bit_generator.state
        state.perturb_rng = prng.bit_generator.state
        return state

    def result(self, state: SearchState) -> SearchResult:
        if not state.converged:
            log.warning("mask detector did not fire within %d steps; using the final mask", state.step)
        return SearchResult(binarize(state.params.coefficients, self.prune), state.params,
                            state.step, state.converged, list(state.trace), list(state.losses))


def search_stage(data: Dataset, params: ModelParams, train: TrainConfig, adv: AdvConfig,
                 reg: RegConfig, prune: PruneConfig, rngs: dict[str, np.random.Generator],
                 gamma: float = 0.1, window: int = 5, no_adv: bool = False) -> SearchResult:
    """Run the search to termination; ``params`` is trained in place."""
    s = Search(data, train, adv, reg, prune, no_adv)
    state = s.run(s.start(params, rngs, gamma, window))
    return s.result(state)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    params: ModelParams
    epoch_losses: list[float]
    epoch_clean_acc: list[float]
    seconds: float = 0.0            # training compute only, evaluation excluded


@dataclass
class FinetuneState:
    """Resumable fine-tuning progress; pickled like :class:`SearchState`."""

    params: ModelParams
    optimizer: Optimizer
    rng: dict
    epochs_done: int = 0
    epoch_losses: list[float] = field(default_factory=list)
    epoch_clean_acc: list[float] = field(default_factory=list)
    seconds: float = 0.0
    ticket: TicketSpec | None = None    # carried into the final checkpoint header

    def save(self, path) -> None:
        Path(path).write_bytes(pickle.dumps(self))

    @classmethod
    def load(cls, path) -> "FinetuneState":
        return pickle.loads(Path(path).read_bytes())


def finetune_start(params: ModelParams, cfg: TrainConfig, rng: np.random.Generator) -> FinetuneState:
    return FinetuneState(params, Optimizer(cfg.optimizer, cfg.learning_rate), rng.bit_generator.state)


def finetune_run(state: FinetuneState, data: Dataset, cfg: TrainConfig, epochs: int,
                 eval_data: Dataset | None = None, max_new_epochs: int | None = None) -> FinetuneState:
    """Advance ``state`` toward ``epochs`` total epochs."""
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng
    params, opt = state.params, state.optimizer
    n, bs = len(data), cfg.batch_size
    taken = 0
    while state.epochs_done < epochs and (max_new_epochs is None or taken < max_new_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            params.zero_grad()
            loss = cross_entropy(forward(data.tokens[idx], params), data.labels[idx])
            if not np.isfinite(loss.item()):
                raise StageError("finetune", "non-finite loss")
            backward(loss)
            opt.step(params.named_tensors(coefficients=False))
            total += loss.item() * len(idx)
        state.seconds += time.perf_counter() - t0
        state.epoch_losses.append(total / max(n, 1))
        if eval_data is not None:
            state.epoch_clean_acc.append(clean_accuracy(params, eval_data))
        state.epochs_done += 1
        taken += 1
    params.zero_grad()
    state.rng = rng.bit_generator.state
    return state


def finetune_stage(params: ModelParams, data: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                   eval_data: Dataset | None = None, epochs: int | None = None) -> FinetuneResult:
    """Plain cross-entropy training of the ticket's weights; gates stay fixed."""
    epochs = cfg.finetune_epochs if epochs is None else epochs
    st = finetune_run(finetune_start(params, cfg, rng), data, cfg, epochs, eval_data)
    return FinetuneResult(st.params, st.epoch_losses, st.epoch_clean_acc, st.seconds)


def dataset_loss(params: ModelParams, data: Dataset, batch_size: int = 256) -> float:
    total = 0.0
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        total += cross_entropy(forward(data.tokens[sl], params), data.labels[sl]).item() * len(data.labels[sl])
    return total / max(len(data), 1)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    seed: int
    search_steps: int
    converged: bool
    search_epochs_used: float
    search_seconds: float
    finetune_seconds: float
    total_seconds: float
    timing_samples: list[float]
    search_clean_acc: float
    epoch_clean_acc: list[float]
    epoch_loss: list[float]
    clean_pct: float
    aua_pct: float
    avg_queries: float
    avg_queries_success: float
    params_full: int
    params_ticket: int
    heads_pruned: int
    neurons_pruned: int
    ticket_path: str = ""
    trace_path: str = ""
    config: str = ""

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if k == "config":
                continue
            if isinstance(v, list):
                v = " ".join(f"{x:.6g}" for x in v)
            elif isinstance(v, float):
                v = f"{v:.6g}"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def load_corpus(cfg: RunConfig) -> Corpus:
    c = cfg.corpus
    if not c.from_files:
        return generate(c.gen_spec(cfg.seed))
    vocab = Vocab.load(c.vocab_path)
    train = load_dataset(c.train_path, vocab, c.seq_len)
    test = load_dataset(c.test_path, vocab, c.seq_len)
    syn = SynonymTable.load(c.synonyms_path, vocab) if c.synonyms_path else SynonymTable()
    return Corpus(train, test, syn, vocab, [])


def model_config(cfg: RunConfig, corpus: Corpus) -> ModelConfig:
    m = cfg.model
    return ModelConfig(m.n_layers, m.n_heads, m.hidden, m.ffn_dim, len(corpus.vocab),
                       corpus.train.tokens.shape[1], cfg.corpus.n_classes)


def draw_ticket(cfg: RunConfig, theta0: ModelParams, learned: Mask,
                rngs: dict[str, np.random.Generator]) -> ModelParams:
    """Apply the mask to theta0, honouring the ablation switches."""
    modes = cfg.modes
    mask = random_ticket(theta0.config, cfg.effective_prune(), rngs["ticket"]) if modes.random_ticket else learned
    ticket = extract_ticket(theta0, mask)
    if modes.reinit_ticket:
        ticket = reinit_ticket(ticket, "reinit_ticket_weights", rngs["ticket"])
    elif modes.reinit_complement:
        ticket = reinit_ticket(ticket, "reinit_complement", rngs["ticket"], theta0)
    return ticket


def run_pipeline(cfg: RunConfig, corpus: Corpus | None = None, out_dir=None,
                 repeat: int | None = None) -> RunReport:
    """theta0 -> search -> extract -> fine-tune -> attack, writing every artefact."""
    corpus = corpus if corpus is not None else load_corpus(cfg)
    out = Path(out_dir if out_dir is not None else cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    repeat = cfg.training.repeat if repeat is None else repeat
    mcfg = model_config(cfg, corpus)
    prune = cfg.effective_prune()

    def one_run(first: bool):
        rngs = rng_streams(cfg.seed)
        theta0 = init_params(mcfg, rngs["init"])
        snapshot = theta0.copy()
        params = theta0.copy()
        try:
            (res, t_search) = _timed(lambda: search_stage(
                corpus.train, params, cfg.training, cfg.adversary, cfg.effective_reg(), prune, rngs,
                cfg.detector.gamma, cfg.detector.window, cfg.modes.no_adv))
        except StageError:
            raise
        except Exception as exc:   # noqa: BLE001
            raise StageError("search", str(exc)) from exc
        try:
            ticket = draw_ticket(cfg, snapshot, res.ticket_mask, rngs)
        except Exception as exc:   # noqa: BLE001
            raise StageError("extract", str(exc)) from exc
        try:
            ft = finetune_stage(ticket, corpus.train, cfg.training, rngs["finetune"],
                                eval_data=corpus.test if first else None)
        except StageError:
            raise
        except Exception as exc:   # noqa: BLE001
            raise StageError("finetune", str(exc)) from exc
        return theta0, snapshot, res, ft, t_search, ft.seconds, rngs

    runs = [one_run(i == 0) for i in range(repeat)]
    theta0, snapshot, res, ft, _, _, rngs = runs[0]
    samples = [r[4] + r[5] for r in runs]
    search_acc = clean_accuracy(res.params, corpus.test)
    epoch_acc = ft.epoch_clean_acc
    try:
        report = evaluate_robustness(ft.params, corpus.test, corpus.synonyms, cfg.attack, rngs["attack"])
    except Exception as exc:   # noqa: BLE001
        raise StageError("attack", str(exc)) from exc

    ckpt_dir = out
    ticket_spec = TicketSpec(res.ticket_mask, "theta0.ckpt", res.steps, prune, res.converged)   # sibling file
    checkpoint.save(ckpt_dir / "theta0.ckpt", snapshot)
    checkpoint.save(ckpt_dir / "finetuned.ckpt", ft.params, ticket_spec)
    ticket_spec.save(ckpt_dir / "ticket.txt")
    (ckpt_dir / "mask_trace.txt").write_text("\n".join(res.trace) + ("\n" if res.trace else ""))
    report.save(ckpt_dir)
    hp, np_ = res.ticket_mask.pruned_counts()
    per_epoch = batches_per_epoch(len(corpus.train), cfg.training.batch_size)
    rr = RunReport(
        seed=cfg.seed,
        search_steps=res.steps,
        converged=res.converged,
        search_epochs_used=res.steps / per_epoch,
        search_seconds=float(np.mean([r[4] for r in runs])),
        finetune_seconds=float(np.mean([r[5] for r in runs])),
        total_seconds=float(np.mean(samples)),
        timing_samples=samples,
        search_clean_acc=100.0 * search_acc,
        epoch_clean_acc=[100.0 * a for a in epoch_acc],
        epoch_loss=ft.epoch_losses,
        clean_pct=report.clean_pct,
        aua_pct=report.aua_pct,
        avg_queries=report.avg_queries,
        avg_queries_success=report.avg_queries_success,
        params_full=param_count(snapshot, exclude_embeddings=True),
        params_ticket=param_count(ft.params, exclude_embeddings=True),
        heads_pruned=hp,
        neurons_pruned=np_,
        ticket_path=str(ckpt_dir / "ticket.txt"),
        trace_path=str(ckpt_dir / "mask_trace.txt"),
        config=cfg.to_ini(),
    )
    (ckpt_dir / "report.txt").write_text(rr.to_text())
    (ckpt_dir / "report.json").write_text(rr.to_json())
    (ckpt_dir / "config.ini").write_text(cfg.to_ini())
    return rr


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def finetune_baseline(cfg: RunConfig, corpus: Corpus) -> tuple[ModelParams, AttackReport]:
    """Plain fine-tuning of the full model from theta0 (no search, no pruning)."""
    rngs = rng_streams(cfg.seed)
    params = init_params(model_config(cfg, corpus), rngs["init"])
    ft = finetune_stage(params, corpus.train, cfg.training, rngs["finetune"])
    return ft.params, evaluate_robustness(ft.params, corpus.test, corpus.synonyms, cfg.attack, rngs["attack"])
