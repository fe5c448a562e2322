"""Neural network architectures: feed-forward MLP and recurrent DGM net.

Both evaluate generically over plain arrays, tape ``Var`` parameters, and
``Dual2`` inputs, so the same code path serves plain prediction, input
differentiation, and parameter-gradient training.

Parameters live in an ordered name -> array dict; helpers pack/unpack a flat
little-endian float64 vector (the checkpoint payload) and bind the arrays as
tape leaves for training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Dual2, concat, elu, matmul, softplus, tanh

_ACTS = {
    "identity": lambda x: x,
    "tanh": tanh,
    "softplus": softplus,
    # +1 shift so the head is strictly positive (elu alone is > -1)
    "elu": lambda x: elu(x) + 1.0,
}


@dataclass
class MLPSpec:
    """Fully connected network; `layer_widths` includes input and output."""
    layer_widths: list
    hidden_activation: str = "tanh"
    output_activation: str = "identity"
    output_scale: tuple | None = None   # (a0, eta): multiply by (a0+a)^-eta

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths")
        for act in (self.hidden_activation, self.output_activation):
            if act not in _ACTS:
                raise ValueError(f"unknown activation {act!r}")


@dataclass
class DGMSpec:
    """Recurrent (gated) architecture with a distribution embedding net.

    The distribution vector runs through `embedding`; its output is
    concatenated with the idiosyncratic/aggregate inputs to form the
    recurrent network's input.
    """
    embedding: MLPSpec
    main_inputs: int            # idiosyncratic + aggregate columns
    recurrent_layers: int = 3
    recurrent_width: int = 100
    output_activation: str = "elu"
    output_scale: tuple | None = None

    @property
    def input_width(self):
        return self.main_inputs + self.embedding.layer_widths[-1]


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def mlp_init(spec: MLPSpec, rng) -> dict:
    params = {}
    ws = spec.layer_widths
    for i in range(len(ws) - 1):
        params[f"W{i}"] = _xavier(rng, ws[i], ws[i + 1])
        params[f"b{i}"] = np.zeros(ws[i + 1])
    return params


def dgm_init(spec: DGMSpec, rng) -> dict:
    params = {}
    for name, arr in mlp_init(spec.embedding, rng).items():
        params["emb." + name] = arr
    d, w = spec.input_width, spec.recurrent_width
    params["W0"] = _xavier(rng, d, w)
    params["b0"] = np.zeros(w)
    for i in range(1, spec.recurrent_layers + 1):
        for gate in ("f", "g", "r", "s"):
            params[f"W{gate}{i}"] = _xavier(rng, w, w)
            params[f"U{gate}{i}"] = _xavier(rng, d, w)
            params[f"b{gate}{i}"] = np.zeros(w)
    params["Wout"] = _xavier(rng, w, 1)
    params["bout"] = np.zeros(1)
    return params


def _affine(x, W, b):
    return matmul(x, W) + b


def _apply_scale(out, spec, scale_input):
    if spec.output_scale is None:
        return out
    a0, eta = spec.output_scale
    if scale_input is None:
        raise ValueError("output_scale configured but no scale input given")
    return out * ad.power(scale_input + a0, -eta)


def mlp_eval(spec: MLPSpec, params: dict, x, scale_input=None):
    """Forward pass; `x` has shape (batch, in) (arrays, Var, or Dual2)."""
    h = x
    n = len(spec.layer_widths) - 1
    act = _ACTS[spec.hidden_activation]
    for i in range(n - 1):
        h = act(_affine(h, params[f"W{i}"], params[f"b{i}"]))
    out = _affine(h, params[f"W{n - 1}"], params[f"b{n - 1}"])
    out = _ACTS[spec.output_activation](out)
    return _apply_scale(out, spec, scale_input)


def dgm_eval(spec: DGMSpec, params: dict, x_main, phi, scale_input=None):
    """Recurrent forward pass.

    x_main: (batch, main_inputs) idiosyncratic + aggregate columns.
    phi: (batch, dist) distribution vector, run through the embedding.
    """
    emb = {k[4:]: v for k, v in params.items() if k.startswith("emb.")}
    e = mlp_eval(spec.embedding, emb, phi)
    xp = concat([x_main, e], axis=-1)
    h = tanh(_affine(xp, params["W0"], params["b0"]))
    s = h
    for i in range(1, spec.recurrent_layers + 1):
        f = tanh(_affine(h, params[f"Wf{i}"], params[f"bf{i}"])
                 + matmul(xp, params[f"Uf{i}"]))
        g = tanh(_affine(h, params[f"Wg{i}"], params[f"bg{i}"])
                 + matmul(xp, params[f"Ug{i}"]))
        r = tanh(_affine(h, params[f"Wr{i}"], params[f"br{i}"])
                 + matmul(xp, params[f"Ur{i}"]))
        s = tanh(_affine(r * s, params[f"Ws{i}"], params[f"bs{i}"])
                 + matmul(xp, params[f"Us{i}"]))
        h = (1.0 - g) * s + f * h
    out = _affine(h, params["Wout"], params["bout"])
    out = _ACTS[spec.output_activation](out)
    return _apply_scale(out, spec, scale_input)


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def pretrain_to_target(spec, params, targets, steps, lr=1e-3):
    """Least-squares fit of the network to target values via ADAM.

    ``targets`` is either a list of (input, value) pairs or a pre-stacked
    ``(inputs, values)`` tuple; for a DGMSpec each input is a pair
    ``(x_main, phi)`` (correspondingly ``((X, Phi), y)`` when stacked).
    Returns (fitted params, mse trace); zero steps returns a copy.
    """
    from .autodiff import Tape
    from .trainer import Adam

    if isinstance(targets, tuple):
        X, y = targets
    else:
        if len(targets) == 0:
            raise ValueError("need at least one target")
        xs, ys = zip(*targets)
        if isinstance(spec, DGMSpec):
            X = (np.stack([np.asarray(x[0], dtype=np.float64) for x in xs]),
                 np.stack([np.asarray(x[1], dtype=np.float64) for x in xs]))
        else:
            X = np.stack([np.asarray(x, dtype=np.float64) for x in xs])
        y = np.asarray(ys, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("need at least one target")

    params = {k: np.asarray(v).copy() for k, v in params.items()}
    flat = pack(params)
    adam = Adam(flat.size)
    trace = []
    for _ in range(int(steps)):
        tape = Tape()
        bound = bind(tape, unpack(flat, params))
        if isinstance(spec, DGMSpec):
            out = dgm_eval(spec, bound, X[0], X[1])
        else:
            out = mlp_eval(spec, bound, X)
        err = out.reshape(-1) - y
        mse = (err * err).mean()
        val = float(mse.value)
        if not np.isfinite(val):
            raise RuntimeError(f"non-finite pre-training loss {val}")
        trace.append(val)
        grads = tape.grad(mse, list(bound.values()))
        flat = adam.step(flat, np.concatenate([g.ravel() for g in grads]),
                         lr)
    return unpack(flat, params), trace


# ---------------------------------------------------------------------------
# flat parameter vector / checkpoint serialization
# ---------------------------------------------------------------------------

def pack(params: dict) -> np.ndarray:
    return np.concatenate([np.asarray(v, dtype=np.float64).ravel()
                           for v in params.values()])


def unpack(flat: np.ndarray, template: dict) -> dict:
    out = {}
    pos = 0
    for name, v in template.items():
        n = int(np.prod(np.shape(v))) if np.shape(v) else 1
        out[name] = np.asarray(flat[pos:pos + n]).reshape(np.shape(v)).copy()
        pos += n
    if pos != flat.size:
        raise ValueError(f"flat vector length {flat.size} != layout {pos}")
    return out


def bind(tape, params: dict) -> dict:
    """Register each parameter array as a tape leaf."""
    return {name: tape.leaf(v) for name, v in params.items()}


_MAGIC = "masterpde-checkpoint-v1"


def spec_to_dict(spec) -> dict:
    """JSON-able description of an MLPSpec or DGMSpec (checkpoint headers)."""
    if isinstance(spec, DGMSpec):
        return {"kind": "dgm", "embedding": spec_to_dict(spec.embedding),
                "main_inputs": spec.main_inputs,
                "recurrent_layers": spec.recurrent_layers,
                "recurrent_width": spec.recurrent_width,
                "output_activation": spec.output_activation,
                "output_scale": list(spec.output_scale)
                if spec.output_scale else None}
    if isinstance(spec, MLPSpec):
        return {"kind": "mlp", "layer_widths": list(spec.layer_widths),
                "hidden_activation": spec.hidden_activation,
                "output_activation": spec.output_activation,
                "output_scale": list(spec.output_scale)
                if spec.output_scale else None}
    raise TypeError(f"unknown spec type {type(spec).__name__}")


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if d.get("output_scale") is not None:
        d["output_scale"] = tuple(d["output_scale"])
    if kind == "mlp":
        return MLPSpec(**d)
    if kind == "dgm":
        d["embedding"] = spec_from_dict(d["embedding"])
        return DGMSpec(**d)
    raise ValueError(f"unknown spec kind {kind!r}")


def save_checkpoint(path, header: dict, flat: np.ndarray):
    """JSON header line followed by the raw little-endian float64 vector."""
    header = dict(header)
    header["format"] = _MAGIC
    header["num_params"] = int(flat.size)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.asarray(flat, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != _MAGIC:
            raise ValueError(f"{path}: not a masterpde checkpoint")
        flat = np.frombuffer(fh.read(), dtype="<f8").copy()
    if flat.size != header["num_params"]:
        raise ValueError(f"{path}: truncated checkpoint")
    return header, flat
