"""Text checkpoints: ``format: earlybird-ckpt v1`` plus named tensor sections.

Pruned models store only the surviving heads/neurons; their original indices
are recorded per layer so the full-size layout can be reconstructed, and an
optional ticket description is embedded verbatim.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .minibert import Coefficients, LayerParams, ModelConfig, ModelParams
from .tensor import Tensor, format_tensor, parse_tensor
from .ticket import TicketSpec

MAGIC = "format: earlybird-ckpt v1"


def dumps(params: ModelParams, ticket: TicketSpec | None = None) -> str:
    cfg = params.config
    out = [MAGIC, "config: " + " ".join(f"{k}={v}" for k, v in cfg.as_dict().items())]
    for l in range(len(params.layers)):
        out.append(f"kept: layer{l} heads=" + ",".join(map(str, params.head_index[l]))
                   + " neurons=" + ",".join(map(str, params.neuron_index[l])))
    if ticket is not None:
        out.extend("ticket| " + line for line in ticket.to_text().splitlines())
    body = "\n".join(out) + "\n"
    for name, t in params.named_tensors():
        body += f"tensor: {name}\n" + format_tensor(t.data)
    return body


def loads(text: str) -> tuple[ModelParams, TicketSpec | None]:
    lines = text.split("\n")
    if not lines or lines[0].strip() != MAGIC:
        raise ValueError("not an earlybird checkpoint")
    header, ticket_lines = {}, []
    kept_heads, kept_neurons = [], []
    i = 1
    while i < len(lines) and not lines[i].startswith("tensor:"):
        line = lines[i]
        if line.startswith("ticket| "):
            ticket_lines.append(line[len("ticket| "):])
        elif line.startswith("kept:"):
            toks = line.split()
            kv = dict(t.split("=", 1) for t in toks[2:])
            kept_heads.append(np.array([int(x) for x in kv["heads"].split(",") if x], dtype=np.int64))
            kept_neurons.append(np.array([int(x) for x in kv["neurons"].split(",") if x], dtype=np.int64))
        elif ":" in line:
            k, v = line.split(":", 1)
            header[k.strip()] = v.strip()
        i += 1
    cfg_kv = dict(tok.split("=", 1) for tok in header["config"].split())
    config = ModelConfig(**{k: int(v) for k, v in cfg_kv.items()})

    tensors: dict[str, np.ndarray] = {}
    while i < len(lines):
        if not lines[i].startswith("tensor:"):
            i += 1
            continue
        name = lines[i][len("tensor:"):].strip()
        j = i + 1
        while j < len(lines) and not lines[j].startswith("tensor:"):
            j += 1
        tensors[name] = parse_tensor("\n".join(lines[i + 1:j]))
        i = j

    def t(name: str) -> Tensor:
        return Tensor(tensors[name], requires_grad=True)

    layers = [LayerParams(**{n: t(f"layer{l}.{n}") for n in LayerParams.TENSORS})
              for l in range(config.n_layers)]
    coef = Coefficients([t(f"layer{l}.c_head") for l in range(config.n_layers)],
                        [t(f"layer{l}.c_neuron") for l in range(config.n_layers)])
    params = ModelParams(config, t("tok_emb"), t("pos_emb"), layers, t("cls_w"), t("cls_b"), coef,
                         kept_heads, kept_neurons)
    ticket = TicketSpec.from_text("\n".join(ticket_lines)) if ticket_lines else None
    return params, ticket


def save(path, params: ModelParams, ticket: TicketSpec | None = None) -> None:
    Path(path).write_text(dumps(params, ticket))


def load(path) -> tuple[ModelParams, TicketSpec | None]:
    return loads(Path(path).read_text())
