"""Command-line entry point: ``earlyrobust <command> [options]``.

Settings come from one INI file (``--config``), then the ``OUTPUT_DIR`` and
``SEED`` environment variables, then ``--set section.key=value`` and the
dedicated flags, later sources winning.  Exit status: 0 success, 1 usage or
configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from pathlib import Path

from . import checkpoint
from .attack import AttackReport, clean_accuracy, evaluate_robustness
from .config import ConfigError, RunConfig, load_config, sweep_values
from .corpus import save_dataset
from .minibert import init_params
from .ticket import ConvergenceDetector, PruneError, TicketSpec
from .trainer import (
    FinetuneState,
    RunReport,
    Search,
    SearchState,
    StageError,
    draw_ticket,
    finetune_run,
    finetune_start,
    load_corpus,
    model_config,
    rng_streams,
    run_pipeline,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ABLATIONS = ("no_adv", "no_regularizer", "random_ticket", "reinit_ticket", "reinit_complement",
             "layer_wise_heads", "layer_wise_neurons")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def resolve_config(args, env=None) -> RunConfig:
    env = os.environ if env is None else env
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if env.get("OUTPUT_DIR"):
        over["run.output_dir"] = env["OUTPUT_DIR"]
    if env.get("SEED"):
        over["run.seed"] = env["SEED"]
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        over[key.strip()] = value
    if args.output_dir is not None:
        over["run.output_dir"] = args.output_dir
    if args.seed is not None:
        over["run.seed"] = args.seed
    return cfg.with_overrides(over)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, args) -> int:
    corpus = load_corpus(cfg)
    out = _out(cfg)
    save_dataset(out / "train.tsv", corpus.train, corpus.vocab)
    save_dataset(out / "test.tsv", corpus.test, corpus.vocab)
    corpus.vocab.save(out / "vocab.txt")
    corpus.synonyms.save(out / "synonyms.txt", corpus.vocab)
    print(f"wrote {len(corpus.train)} train / {len(corpus.test)} test examples to {out}")
    return EXIT_OK


def _scripted(path, cfg: RunConfig) -> int:
    det = ConvergenceDetector(cfg.detector.gamma, cfg.detector.window)
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (1, 2):
            raise UsageError(f"{path}:{n}: expected 'head_dist [neuron_dist]'")
        hd = float(parts[0])
        nd = float(parts[-1])
        stop = det.observe(hd, nd)
        print(f"update={len(det.history)} head_dist={hd:.6f} neuron_dist={nd:.6f} hits={det.consecutive_hits}")
        if stop:
            print(f"terminate at update {len(det.history)}")
            return EXIT_OK
    print(f"no termination after {len(det.history)} updates")
    return EXIT_OK


def cmd_search(cfg: RunConfig, args) -> int:
    if args.scripted_distances:
        return _scripted(args.scripted_distances, cfg)
    if args.max_epochs is not None:
        cfg = cfg.with_overrides({"training.search_max_epochs": args.max_epochs})
    out = _out(cfg)
    corpus = load_corpus(cfg)
    s = Search(corpus.train, cfg.training, cfg.adversary, cfg.effective_reg(), cfg.effective_prune(),
               cfg.modes.no_adv)
    if args.resume:
        state = SearchState.load(args.resume)
    else:
        rngs = rng_streams(cfg.seed)
        theta0 = init_params(model_config(cfg, corpus), rngs["init"])
        checkpoint.save(out / "theta0.ckpt", theta0)
        state = s.start(theta0.copy(), rngs, cfg.detector.gamma, cfg.detector.window)
    state = s.run(state, args.stop_after)
    state.save(out / "search_state.pkl")
    (out / "mask_trace.txt").write_text("".join(line + "\n" for line in state.trace))
    if not state.done:
        print(f"paused after {state.step} steps; resume with --resume {out / 'search_state.pkl'}")
        return EXIT_OK
    res = s.result(state)
    TicketSpec(res.ticket_mask, "theta0.ckpt", res.steps, cfg.effective_prune(), res.converged).save(out / "ticket.txt")
    hp, npr = res.ticket_mask.pruned_counts()
    print(f"search stopped after {res.steps} steps ({'converged' if res.converged else 'budget exhausted'}); "
          f"pruned {hp} heads, {npr} neurons")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, args) -> int:
    if args.epochs is not None:
        cfg = cfg.with_overrides({"training.finetune_epochs": args.epochs})
    out = _out(cfg)
    corpus = load_corpus(cfg)
    if args.resume:
        state = FinetuneState.load(args.resume)
    else:
        ticket_path = Path(args.ticket) if args.ticket else out / "ticket.txt"
        spec = TicketSpec.load(ticket_path)
        theta0_path = Path(args.theta0) if args.theta0 else ticket_path.parent / spec.source_checkpoint
        theta0, _ = checkpoint.load(theta0_path)
        expected = model_config(cfg, corpus)
        if theta0.config != expected:
            raise StageError("finetune", f"checkpoint config {theta0.config.as_dict()} does not match the run "
                                         f"config {expected.as_dict()}")
        rngs = rng_streams(cfg.seed)
        try:
            params = draw_ticket(cfg, theta0, spec.mask, rngs)
        except PruneError as exc:
            raise StageError("finetune", f"ticket does not fit the model: {exc}") from exc
        state = finetune_start(params, cfg.training, rngs["finetune"])
        state.ticket = spec
    state = finetune_run(state, corpus.train, cfg.training, cfg.training.finetune_epochs, corpus.test,
                         max_new_epochs=args.stop_after)
    state.save(out / "finetune_state.pkl")
    if state.epochs_done < cfg.training.finetune_epochs:
        print(f"paused after {state.epochs_done} epochs; resume with --resume {out / 'finetune_state.pkl'}")
        return EXIT_OK
    checkpoint.save(out / "finetuned.ckpt", state.params, state.ticket)
    acc = clean_accuracy(state.params, corpus.test)
    print(f"fine-tuned {state.epochs_done} epochs; clean accuracy {100 * acc:.2f}%")
    return EXIT_OK


def cmd_attack(cfg: RunConfig, args) -> int:
    over = {}
    if args.sample is not None:
        over["attack.eval_sample_size"] = args.sample
    if args.budget is not None:
        over["attack.query_budget"] = args.budget
    cfg = cfg.with_overrides(over)
    out = _out(cfg)
    corpus = load_corpus(cfg)
    params, _ = checkpoint.load(args.checkpoint or out / "finetuned.ckpt")
    report = evaluate_robustness(params, corpus.test, corpus.synonyms, cfg.attack, rng_streams(cfg.seed)["attack"])
    report.save(out)
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_pipeline(cfg: RunConfig, args) -> int:
    over = {f"modes.{m}": True for m in ABLATIONS if getattr(args, m)}
    if args.repeat is not None:
        over["training.repeat"] = args.repeat
    cfg = cfg.with_overrides(over)
    heads = sweep_values(args.head_ratio) if args.head_ratio else [cfg.pruning.head_ratio]
    neurons = sweep_values(args.neuron_ratio) if args.neuron_ratio else [cfg.pruning.neuron_ratio]
    if not heads or not neurons:
        raise ConfigError("empty ratio list")
    base = Path(cfg.run.output_dir)
    corpus = load_corpus(cfg)
    sweep = len(heads) * len(neurons) > 1
    for h, n in itertools.product(heads, neurons):
        run_cfg = cfg.with_overrides({"pruning.head_ratio": h, "pruning.neuron_ratio": n})
        out = base / f"head{h:.4g}_neuron{n:.4g}" if sweep else base
        rep = run_pipeline(run_cfg, corpus, out)
        print(f"[{out}] Clean% {rep.clean_pct:.2f}  Aua% {rep.aua_pct:.2f}  #Query {rep.avg_queries:.2f}  "
              f"total {rep.total_seconds:.2f}s")
    return EXIT_OK


def pretty_report(rep: RunReport) -> str:
    status = "converged" if rep.converged else "budget exhausted"
    rows = [
        ("Clean%", f"{rep.clean_pct:.2f}"),
        ("Aua%", f"{rep.aua_pct:.2f}"),
        ("#Query", f"{rep.avg_queries:.2f}"),
        ("#Query (successful)", f"{rep.avg_queries_success:.2f}"),
        ("search steps", f"{rep.search_steps} ({rep.search_epochs_used:.2f} epochs, {status})"),
        ("search clean acc", f"{rep.search_clean_acc:.2f}"),
        ("pruned heads / neurons", f"{rep.heads_pruned} / {rep.neurons_pruned}"),
        ("params (no emb.)", f"{rep.params_ticket} of {rep.params_full}"),
        ("search s", f"{rep.search_seconds:.3f}"),
        ("fine-tune s", f"{rep.finetune_seconds:.3f}"),
        ("total s", f"{rep.total_seconds:.3f} (mean of {len(rep.timing_samples)})"),
    ]
    if rep.epoch_clean_acc:
        rows.append(("clean acc by epoch", " ".join(f"{a:.1f}" for a in rep.epoch_clean_acc)))
    width = max(len(k) for k, _ in rows)
    return f"seed {rep.seed}\n" + "".join(f"  {k:<{width}}  {v}\n" for k, v in rows)


def cmd_report(cfg: RunConfig, args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / "report.json"
    if path.name.endswith("_rows.txt"):
        print(AttackReport.from_rows_text(path.read_text()).to_table(), end="")
        return EXIT_OK
    print(pretty_report(RunReport.from_json(path.read_text())), end="")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "search": cmd_search, "finetune": cmd_finetune, "attack": cmd_attack,
            "pipeline": cmd_pipeline, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one setting")
    common.add_argument("--output-dir", help="where artefacts are written")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="earlyrobust", description="Robust early-bird ticket search, fine-tuning and attack evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen", parents=[common], help="write the synthetic corpus files")

    s = sub.add_parser("search", parents=[common], help="adversarial ticket search")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--resume", metavar="STATE", help="continue from a saved search_state.pkl")
    s.add_argument("--stop-after", type=int, metavar="STEPS", help="pause after this many new steps")
    s.add_argument("--scripted-distances", metavar="FILE",
                   help="feed the detector 'head [neuron]' distances from FILE instead of training")

    f = sub.add_parser("finetune", parents=[common], help="reset to theta0, prune, fine-tune")
    f.add_argument("--ticket", help="ticket.txt (default: OUTPUT_DIR/ticket.txt)")
    f.add_argument("--theta0", help="initial checkpoint (default: the ticket's source)")
    f.add_argument("--epochs", type=int)
    f.add_argument("--resume", metavar="STATE")
    f.add_argument("--stop-after", type=int, metavar="EPOCHS")

    a = sub.add_parser("attack", parents=[common], help="greedy synonym attack on a checkpoint")
    a.add_argument("--checkpoint", help="default: OUTPUT_DIR/finetuned.ckpt")
    a.add_argument("--sample", type=int, help="attack a seeded subset of this size")
    a.add_argument("--budget", type=int, help="query budget per example")

    pl = sub.add_parser("pipeline", parents=[common], help="search, fine-tune and attack end to end")
    pl.add_argument("--repeat", type=int, help="timing repetitions")
    pl.add_argument("--head-ratio", help="ratio or comma list for a sweep, e.g. '1/6,1/4'")
    pl.add_argument("--neuron-ratio", help="ratio or comma list")
    for m in ABLATIONS:
        pl.add_argument("--" + m.replace("_", "-"), action="store_true", dest=m)

    r = sub.add_parser("report", parents=[common], help="pretty-print report.json or attack_rows.txt")
    r.add_argument("path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"earlyrobust: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"earlyrobust: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, KeyError, PruneError) as exc:
        print(f"earlyrobust: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
