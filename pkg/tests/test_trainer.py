import json
import time

import numpy as np
import pytest

from conftest import random_model, random_tokens
from earlyrobust import checkpoint
from earlyrobust.adversary import AdvConfig, freelb_accumulate
from earlyrobust.config import RunConfig, TrainConfig
from earlyrobust.corpus import GenSpec, generate
from earlyrobust.minibert import ModelConfig, forward, init_params
from earlyrobust.tensor import Tensor, backward, cross_entropy
from earlyrobust.ticket import PruneConfig, RegConfig, regularizer
from earlyrobust.trainer import (
    Optimizer,
    RunReport,
    Search,
    SearchState,
    StageError,
    finetune_stage,
    measure_time,
    miniepoch_steps,
    rng_streams,
    run_pipeline,
    search_stage,
)

SMALL = {
    "corpus.n_train": 160, "corpus.n_test": 40, "corpus.seq_len": 10, "corpus.vocab_size": 60,
    "model.hidden": 8, "model.n_heads": 2, "training.batch_size": 16, "training.finetune_epochs": 2,
    "training.search_max_epochs": 1, "training.miniepoch_fraction": 0.2, "training.repeat": 1,
    "adversary.steps": 2, "attack.eval_sample_size": 10, "attack.query_budget": 40,
}


def small_cfg(**extra):
    return RunConfig().with_overrides({**SMALL, **extra})


@pytest.fixture(scope="module")
def small_corpus():
    return generate(GenSpec(n_train=160, n_test=40, seq_len=10, vocab_size=60, seed=3))


def model_for(corpus, seed=0):
    cfg = ModelConfig(n_layers=2, n_heads=2, hidden=8, vocab_size=len(corpus.vocab), max_seq_len=10)
    return init_params(cfg, np.random.default_rng(seed))


class TestOptimizer:
    def test_sgd_example(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([1.0])
        Optimizer("sgd", 0.1).step([("p", p)])
        assert p.data[0] == pytest.approx(0.9, abs=1e-15)

    @pytest.mark.parametrize("kind", ["sgd", "adam_like"])
    def test_zero_gradient(self, kind):
        p = Tensor(np.arange(4.0), requires_grad=True)
        p.grad = np.zeros(4)
        Optimizer(kind, 0.1).step([("p", p)])
        np.testing.assert_array_equal(p.data, np.arange(4.0))

    @pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
    def test_adam_first_step(self, scale):
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        g = scale
        m_hat = (1 - b1) * g / (1 - b1)
        v_hat = (1 - b2) * g * g / (1 - b2)
        expected = lr * m_hat / (np.sqrt(v_hat) + eps)
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.full(3, g)
        Optimizer("adam_like", lr).step([("p", p)])
        np.testing.assert_allclose(-p.data, expected, rtol=1e-12)
        assert abs(-p.data[0] - lr) < lr * 1e-5

    def test_unknown(self):
        with pytest.raises(ValueError):
            Optimizer("rmsprop")

    def test_state_round_trip(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Optimizer("adam_like", 0.1)
        for _ in range(3):
            p.grad = np.array([0.5, -1.0])
            opt.step([("p", p)])
        clone = Optimizer.from_state(opt.state_dict())
        q = Tensor(p.data.copy(), requires_grad=True)
        p.grad = q.grad = np.array([0.3, 0.3])
        opt.step([("p", p)])
        clone.step([("p", q)])
        assert p.data.tobytes() == q.data.tobytes()


class TestTiming:
    def test_sleep(self):
        out, t = measure_time(lambda: time.sleep(0.1) or 7, repeat=1)
        assert out == 7 and abs(t.mean - 0.1) < 0.05

    def test_repeat_samples(self):
        calls = []
        _, t = measure_time(lambda: calls.append(1), repeat=5)
        assert len(t.samples) == 5 and len(calls) == 5 and t.mean == pytest.approx(np.mean(t.samples))


class TestCombinedGradient:
    def test_gate_gradient_is_task_plus_penalty(self):
        params = random_model(seed=4, scale=0.3)
        toks, labels = random_tokens(seed=4), np.array([1, 0, 2])
        adv, reg = AdvConfig(steps=2), RegConfig(3e-3, 5e-3)

        params.zero_grad()
        freelb_accumulate(toks, labels, params, adv, np.random.default_rng(0))
        task = [c.grad.copy() for c in params.coefficients.head + params.coefficients.neuron]
        params.zero_grad()
        backward(regularizer(params.coefficients, reg))
        pen = [c.grad.copy() for c in params.coefficients.head + params.coefficients.neuron]

        s = Search.__new__(Search)
        s.adv, s.reg, s.no_adv = adv, reg, False
        params.zero_grad()
        s._loss_and_grads(params, toks, labels, np.random.default_rng(0))
        both = [c.grad for c in params.coefficients.head + params.coefficients.neuron]
        for a, b, c in zip(task, pen, both):
            np.testing.assert_allclose(c, a + b, atol=1e-12, rtol=0)

    def test_l1_dynamics_with_constant_logits(self, small_corpus):
        """No task signal: each neuron gate walks to zero by lr * lambda per SGD step."""
        params = model_for(small_corpus)
        params.cls_w.data[:] = 0.0
        params.layers[-1].ln2_gain.data[:] = 0.0   # pooled features stay at zero
        params.layers[-1].ln2_bias.data[:] = 0.0
        lr, lam = 0.1, 0.05
        train = TrainConfig(learning_rate=lr, optimizer="sgd", search_max_epochs=1, batch_size=16)
        s = Search(small_corpus.train, train, AdvConfig(steps=1), RegConfig(0.0, lam), PruneConfig(), no_adv=True)
        state = s.start(params, rng_streams(0))
        for k in range(1, 6):
            s.run(state, max_new_steps=1)
            for c in params.coefficients.neuron:
                np.testing.assert_allclose(c.data, 1.0 - k * lr * lam, atol=1e-12)
        for c in params.coefficients.head:
            assert (c.data == 1.0).all()

    def test_degenerate_search_is_plain_training(self, small_corpus):
        train = TrainConfig(search_max_epochs=1, batch_size=16, miniepoch_fraction=1.0)
        p1, p2 = model_for(small_corpus), model_for(small_corpus)
        search_stage(small_corpus.train, p1, train, AdvConfig(steps=1), RegConfig(0, 0), PruneConfig(), rng_streams(0),
                     no_adv=True)
        rng = rng_streams(0)["data"]
        opt = Optimizer("adam_like", 1e-3)
        order = rng.permutation(160)
        for i in range(0, 160, 16):
            idx = order[i:i + 16]
            p2.zero_grad()
            backward(cross_entropy(forward(small_corpus.train.tokens[idx], p2), small_corpus.train.labels[idx]))
            opt.step(p2.named_tensors())
        for (n, a), (_, b) in zip(p1.named_tensors(), p2.named_tensors()):
            assert a.data.tobytes() == b.data.tobytes(), n


class TestSearch:
    def test_zero_budget(self, small_corpus):
        s = Search(small_corpus.train, TrainConfig(search_max_epochs=0), AdvConfig(), RegConfig(), PruneConfig())
        with pytest.raises(StageError, match="search budget"):
            s.start(model_for(small_corpus), rng_streams(0))

    def test_miniepoch_length(self):
        assert miniepoch_steps(2000, TrainConfig()) == 3
        assert miniepoch_steps(10, TrainConfig()) == 1

    def test_resume_is_bitwise(self, small_corpus, tmp_path):
        train = TrainConfig(search_max_epochs=2, batch_size=16, miniepoch_fraction=0.2)
        args = (small_corpus.train, train, AdvConfig(steps=2), RegConfig(1e-2, 1e-2), PruneConfig())
        s = Search(*args)
        full = s.run(s.start(model_for(small_corpus), rng_streams(5), window=50))

        s2 = Search(*args)
        part = s2.run(s2.start(model_for(small_corpus), rng_streams(5), window=50), max_new_steps=7)
        part.save(tmp_path / "state.pkl")
        resumed = s2.run(SearchState.load(tmp_path / "state.pkl"))

        assert full.step == resumed.step == 20
        assert full.trace == resumed.trace and full.losses == resumed.losses
        for (n, a), (_, b) in zip(full.params.named_tensors(), resumed.params.named_tensors()):
            assert a.data.tobytes() == b.data.tobytes(), n

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self, small_corpus):
        p = model_for(small_corpus)
        p.cls_w.data[:] = np.inf
        s = Search(small_corpus.train, TrainConfig(), AdvConfig(steps=1), RegConfig(), PruneConfig(), no_adv=True)
        with pytest.raises(StageError, match="non-finite"):
            s.run(s.start(p, rng_streams(0)))

    def test_trace_every_miniepoch(self, small_corpus):
        train = TrainConfig(search_max_epochs=1, batch_size=16, miniepoch_fraction=0.2)
        r = search_stage(small_corpus.train, model_for(small_corpus), train, AdvConfig(steps=1), RegConfig(),
                         PruneConfig(), rng_streams(0), window=100)
        assert not r.converged and r.steps == 10 and len(r.trace) == 5
        assert r.trace[0].startswith("miniepoch=1 head_dist=")


class TestFinetune:
    def test_zero_epochs(self, small_corpus):
        p = model_for(small_corpus)
        before = {n: t.data.tobytes() for n, t in p.named_tensors()}
        res = finetune_stage(p, small_corpus.train, TrainConfig(finetune_epochs=0), np.random.default_rng(0))
        assert res.epoch_losses == [] and {n: t.data.tobytes() for n, t in res.params.named_tensors()} == before

    def test_loss_decreases_and_gates_fixed(self, small_corpus):
        p = model_for(small_corpus)
        res = finetune_stage(p, small_corpus.train, TrainConfig(finetune_epochs=4, optimizer="sgd", learning_rate=0.5,
                                                                batch_size=16), np.random.default_rng(0))
        assert res.epoch_losses[-1] < res.epoch_losses[0]
        assert all((c.data == 1.0).all() for c in p.coefficients.head + p.coefficients.neuron)

    def test_deterministic(self, small_corpus):
        cfg = TrainConfig(finetune_epochs=2, batch_size=16)
        a = finetune_stage(model_for(small_corpus), small_corpus.train, cfg, np.random.default_rng(1)).params
        b = finetune_stage(model_for(small_corpus), small_corpus.train, cfg, np.random.default_rng(1)).params
        assert checkpoint.dumps(a) == checkpoint.dumps(b)


class TestPipeline:
    def test_outputs_and_report(self, tmp_path):
        rep = run_pipeline(small_cfg(), out_dir=tmp_path)
        for name in ("theta0.ckpt", "finetuned.ckpt", "ticket.txt", "mask_trace.txt", "attack_rows.txt",
                     "attack_table.md", "report.txt", "report.json", "config.ini"):
            assert (tmp_path / name).exists(), name
        assert rep.total_seconds == pytest.approx(rep.search_seconds + rep.finetune_seconds)
        back = RunReport.from_json((tmp_path / "report.json").read_text())
        assert back.clean_pct == rep.clean_pct and back.search_steps == rep.search_steps
        assert len(rep.epoch_clean_acc) == 2 and rep.params_ticket < rep.params_full

    def test_theta0_untouched(self, tmp_path):
        cfg = small_cfg()
        run_pipeline(cfg, out_dir=tmp_path)
        theta0, _ = checkpoint.load(tmp_path / "theta0.ckpt")
        corpus_vocab = theta0.config.vocab_size
        fresh = init_params(theta0.config, rng_streams(cfg.seed)["init"])
        assert checkpoint.dumps(fresh) == checkpoint.dumps(theta0) and corpus_vocab == 60

    def test_deterministic(self, tmp_path):
        run_pipeline(small_cfg(), out_dir=tmp_path / "a")
        run_pipeline(small_cfg(), out_dir=tmp_path / "b")
        for name in ("theta0.ckpt", "finetuned.ckpt", "ticket.txt", "mask_trace.txt", "attack_rows.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        ja = json.loads((tmp_path / "a" / "report.json").read_text())
        jb = json.loads((tmp_path / "b" / "report.json").read_text())
        for k in ("search_steps", "clean_pct", "aua_pct", "avg_queries", "epoch_loss", "heads_pruned"):
            assert ja[k] == jb[k], k

    def test_random_ticket_ablation(self, tmp_path):
        a = run_pipeline(small_cfg(), out_dir=tmp_path / "a")
        b = run_pipeline(small_cfg(**{"modes.random_ticket": True}), out_dir=tmp_path / "b")
        assert (a.heads_pruned, a.neurons_pruned) == (b.heads_pruned, b.neurons_pruned)
        assert (tmp_path / "a" / "theta0.ckpt").read_bytes() == (tmp_path / "b" / "theta0.ckpt").read_bytes()

    def test_stage_error_is_tagged(self, tmp_path):
        with pytest.raises(StageError) as e:
            run_pipeline(small_cfg(**{"training.search_max_epochs": 0}), out_dir=tmp_path)
        assert e.value.stage == "search"
