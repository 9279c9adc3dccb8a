"""Small dense networks with hand-written backprop, Adam, and target blending."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ShapeError, StaleCacheError, TrainingDivergence

CHECKPOINT_FORMAT = "kicl-mlp/1"


@dataclass
class MlpParams:
    """ReLU hidden layers, linear or tanh output (tanh scaled by ``out_scale``).

    ``version`` bumps on every in-place update so a forward cache taken before
    an update cannot be fed to :func:`backward`.
    """

    sizes: list
    weights: list
    biases: list
    head: str = "linear"
    out_scale: float = 1.0
    version: int = 0

    def __post_init__(self):
        if self.head not in ("linear", "tanh"):
            raise InputError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("layer count does not match sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ShapeError(f"layer {i} shape mismatch")

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def arrays(self):
        return [*self.weights, *self.biases]

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.sizes), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.head, self.out_scale, 0)

    def bump(self) -> None:
        self.version += 1


def init_mlp(sizes, rng: np.random.Generator, head="linear", out_scale=1.0,
             zero_output=False) -> MlpParams:
    """Uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise InputError("need at least input and output sizes, all >= 1")
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        lim = 1.0 / np.sqrt(sizes[i])
        w = rng.uniform(-lim, lim, size=(sizes[i], sizes[i + 1]))
        weights.append(w)
        biases.append(np.zeros(sizes[i + 1]))
    if zero_output:
        weights[-1][:] = 0.0
    return MlpParams(sizes, weights, biases, head, float(out_scale))


def zeros_like_mlp(sizes, head="linear", out_scale=1.0) -> MlpParams:
    sizes = [int(s) for s in sizes]
    return MlpParams(sizes, [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                     [np.zeros(b) for b in sizes[1:]], head, float(out_scale))


@dataclass
class Cache:
    version: int
    params_id: int
    activations: list  # input to each layer
    pre: list  # pre-activations per layer
    out: np.ndarray


@dataclass
class Gradients:
    weights: list
    biases: list
    input: np.ndarray

    def arrays(self):
        return [*self.weights, *self.biases]

    def scale(self, c: float) -> "Gradients":
        return Gradients([w * c for w in self.weights], [b * c for b in self.biases],
                         self.input * c)

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)],
                         self.input + other.input)

    def plus_params(self, other: "Gradients") -> "Gradients":
        """Sum parameter grads from a pass over a different input batch."""
        return Gradients([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)], self.input)


def forward(params: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != {params.in_dim}")
    acts, pres = [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        acts.append(h)
        z = h @ w + b
        pres.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
        elif params.head == "tanh":
            h = params.out_scale * np.tanh(z)
        else:
            h = z
    cache = Cache(params.version, id(params), acts, pres, h)
    return (h[0] if squeeze else h), cache


def backward(params: MlpParams, cache: Cache, grad_out) -> Gradients:
    """Gradients of ``sum(grad_out * output)`` w.r.t. parameters and input."""
    if cache.version != params.version or cache.params_id != id(params):
        raise StaleCacheError("forward cache does not match current parameters")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.out.shape:
        raise ShapeError(f"output grad shape {g.shape} != {cache.out.shape}")
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    if params.head == "tanh":
        t = cache.out / params.out_scale if params.out_scale != 0 else np.tanh(cache.pre[-1])
        g = g * params.out_scale * (1.0 - t * t)
    for i in range(n - 1, -1, -1):
        gw[i] = cache.activations[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            g = g * (cache.pre[i - 1] > 0.0)
    return Gradients(gw, gb, g)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState([np.zeros_like(a) for a in params.arrays()],
                     [np.zeros_like(a) for a in params.arrays()], 0, lr, beta1, beta2, eps)


def adam_step(params: MlpParams, grads: Gradients, state: AdamState) -> None:
    """In-place bias-corrected Adam update."""
    arrays = params.arrays()
    garrs = grads.arrays()
    if len(garrs) != len(arrays) or any(a.shape != g.shape for a, g in zip(arrays, garrs)):
        raise ShapeError("gradient shapes do not match parameters")
    bad = [i for i, g in enumerate(garrs) if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingDivergence(
            f"non-finite gradient at step {state.step + 1}",
            diagnostics={"step": state.step + 1, "arrays": bad,
                         "grad_norms": [float(np.linalg.norm(np.nan_to_num(g))) for g in garrs]},
        )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(arrays, garrs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.bump()


def soft_update(target: MlpParams, online: MlpParams, rate: float) -> None:
    if target.sizes != online.sizes:
        raise ShapeError("target/online shape mismatch")
    if not 0.0 <= rate <= 1.0:
        raise InputError("rate must be in [0, 1]")
    for t, o in zip(target.arrays(), online.arrays()):
        if rate == 1.0:
            t[...] = o
        elif rate != 0.0:
            t *= 1.0 - rate
            t += rate * o
    target.bump()


def flatten(params: MlpParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def assign(params: MlpParams, flat) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(a.size for a in params.arrays())
    if flat.size != total:
        raise ShapeError(f"flat vector has {flat.size} entries, expected {total}")
    k = 0
    for a in params.arrays():
        a[...] = flat[k : k + a.size].reshape(a.shape)
        k += a.size
    params.bump()


def flat_grad(grads: Gradients) -> np.ndarray:
    return np.concatenate([a.ravel() for a in grads.arrays()])


def finite_difference(loss_fn, params: MlpParams, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn(params)`` over every scalar parameter."""
    base = flatten(params)
    out = np.zeros_like(base)
    for i in range(base.size):
        x = base.copy()
        x[i] = base[i] + h
        assign(params, x)
        up = loss_fn(params)
        x[i] = base[i] - h
        assign(params, x)
        down = loss_fn(params)
        out[i] = (up - down) / (2.0 * h)
    assign(params, base)
    return out


# --- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    nets: dict
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, nets: dict, meta: dict | None = None) -> None:
    """``path`` stem gets ``.npz`` (arrays) and ``.json`` (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays, manifest = {}, {"format": CHECKPOINT_FORMAT, "nets": {}, "meta": meta or {}}
    for name in sorted(nets):
        p = nets[name]
        for i, (w, b) in enumerate(zip(p.weights, p.biases)):
            arrays[f"{name}/w{i}"] = w
            arrays[f"{name}/b{i}"] = b
        manifest["nets"][name] = {"sizes": p.sizes, "head": p.head, "out_scale": p.out_scale}
    with open(path.with_suffix(".npz"), "wb") as fh:
        np.savez(fh, **arrays)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path}: unsupported checkpoint format")
    nets = {}
    with np.load(path.with_suffix(".npz")) as data:
        for name, spec in manifest["nets"].items():
            n = len(spec["sizes"]) - 1
            nets[name] = MlpParams(
                list(spec["sizes"]),
                [data[f"{name}/w{i}"].copy() for i in range(n)],
                [data[f"{name}/b{i}"].copy() for i in range(n)],
                spec["head"], float(spec["out_scale"]),
            )
    return Checkpoint(nets, manifest["meta"])
