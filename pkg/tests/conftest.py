import numpy as np
import pytest

from earlyrobust.minibert import ModelConfig, init_params
from earlyrobust.tensor import Tensor


TINY = ModelConfig(n_layers=2, n_heads=2, hidden=8, ffn_dim=12, vocab_size=11, max_seq_len=6, n_classes=3)


def random_model(config=TINY, seed=0, scale=0.5):
    """Weights and gates drawn at a scale where every nonlinearity is exercised."""
    rng = np.random.default_rng(seed)
    params = init_params(config, rng)
    for name, t in params.named_tensors():
        if name.endswith(("gain",)):
            t.data = 1.0 + 0.3 * rng.normal(size=t.shape)
        elif name.endswith("c_head") or name.endswith("c_neuron"):
            t.data = rng.uniform(0.2, 1.5, size=t.shape)
        else:
            t.data = scale * rng.normal(size=t.shape)
    return params


def random_tokens(config=TINY, batch=3, seed=0, pad_tail=True):
    rng = np.random.default_rng(seed)
    toks = rng.integers(2, config.vocab_size, size=(batch, config.max_seq_len))
    if pad_tail:
        toks[0, -2:] = 0
    return toks


def fd_param_errors(loss_fn, params, h=1e-5, max_coords=None, seed=0):
    """Relative errors |analytic - central difference| / max(1, |fd|) per named tensor."""
    params.zero_grad()
    from earlyrobust.tensor import backward
    backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst = {}
    for name, t in params.named_tensors():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        err = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = max(err, abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num)))
        worst[name] = err
    params.zero_grad()
    return worst


@pytest.fixture
def tiny_model():
    return random_model()


@pytest.fixture
def tiny_tokens():
    return random_tokens()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
