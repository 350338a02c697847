"""A small reverse-mode engine for the fixed operator set used by the models.

Tensors are plain float64 numpy arrays. Dense layers act on the last axis, so
an MLP can be applied per point to ``(batch, n, d)`` inputs; parameter
gradients are summed over all leading axes.

Checkpoint format (``save_checkpoint``): a numpy ``.npz`` archive holding one
array per parameter, keyed by its dotted name, plus a ``__meta__`` entry with
a UTF-8 JSON document ``{"format": "directreg-params", "version": 1, ...}``.
Arrays are stored as raw float64, so save/load is bit-exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from directreg.errors import EmptyInput, ShapeMismatch

CHECKPOINT_FORMAT = "directreg-params"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "none")
OUTPUT_NORMS = ("none", "unit")


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    widths: tuple[int, ...]
    activations: tuple[str, ...]
    output_norm: str = "none"

    def __post_init__(self):
        if len(self.widths) < 1:
            raise ValueError("an MLP needs at least one layer")
        if len(self.activations) != len(self.widths):
            raise ValueError("one activation tag per layer")
        if self.in_dim < 1 or min(self.widths) < 1:
            raise ValueError("widths must be >= 1")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.output_norm not in OUTPUT_NORMS:
            raise ValueError(f"output_norm must be one of {OUTPUT_NORMS}")

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.in_dim, *self.widths)
        return list(zip(dims[:-1], dims[1:]))


class ParamStore:
    """Named parameter arrays plus Adam moment buffers and a step counter."""

    def __init__(self, params: Optional[Mapping[str, np.ndarray]] = None):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, value in (params or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def keys(self):
        return self.params.keys()

    def items(self):
        return self.params.items()

    def num_values(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_mlp(spec: MlpSpec, store: ParamStore, prefix: str, rng: np.random.Generator) -> None:
    for i, (fi, fo) in enumerate(spec.layer_dims()):
        store[f"{prefix}.{i}.W"] = glorot_uniform(rng, fi, fo)
        store[f"{prefix}.{i}.b"] = np.zeros(fo)


# --------------------------------------------------------------------------- MLP


@dataclass
class MlpTape:
    spec: MlpSpec
    prefix: str
    weights: list[np.ndarray]
    inputs: list[np.ndarray] = field(default_factory=list)
    masks: list[Optional[np.ndarray]] = field(default_factory=list)
    norm: Optional[np.ndarray] = None
    output: Optional[np.ndarray] = None


def mlp_forward(spec: MlpSpec, params, x: np.ndarray, prefix: str) -> tuple[np.ndarray, MlpTape]:
    """Affine + activation per layer, optional unit normalization at the end."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.in_dim:
        raise ShapeMismatch(f"{prefix}: expected input width {spec.in_dim}, got {x.shape[-1]}")
    tape = MlpTape(spec, prefix, [])
    h = x
    for i, act in enumerate(spec.activations):
        w = params[f"{prefix}.{i}.W"]
        b = params[f"{prefix}.{i}.b"]
        tape.weights.append(w)
        tape.inputs.append(h)
        z = (h.reshape(-1, h.shape[-1]) @ w).reshape(h.shape[:-1] + (w.shape[1],)) + b
        if act == "relu":
            mask = z > 0.0
            h = z * mask
            tape.masks.append(mask)
        else:
            h = z
            tape.masks.append(None)
    if spec.output_norm == "unit":
        h, tape.norm = unit_normalize(h)
    tape.output = h
    return h, tape


def backprop(tape: MlpTape, upstream: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact gradients of ``sum(upstream * output)`` w.r.t. parameters and input."""
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != tape.output.shape:
        raise ShapeMismatch(f"upstream {g.shape} vs output {tape.output.shape}")
    if tape.spec.output_norm == "unit":
        g = unit_normalize_backward(g, tape.output, tape.norm)
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(len(tape.weights))):
        if tape.masks[i] is not None:
            g = g * tape.masks[i]
        h = tape.inputs[i]
        w = tape.weights[i]
        grads[f"{tape.prefix}.{i}.W"] = h.reshape(-1, h.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        grads[f"{tape.prefix}.{i}.b"] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        g = (g.reshape(-1, g.shape[-1]) @ w.T).reshape(h.shape)
    return grads, g


# --------------------------------------------------------------------------- pointwise ops


def unit_normalize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / norm, norm


def unit_normalize_backward(g: np.ndarray, y: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm


def l2_norm_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row norms and their gradient direction (zero where the row is zero)."""
    n = np.linalg.norm(x, axis=-1)
    safe = np.where(n > 0.0, n, 1.0)
    return n, np.where((n > 0.0)[..., None], x / safe[..., None], 0.0)


def max_pool_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise max over the row axis (second to last); ties go to the lowest row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise EmptyInput("max pooling needs at least one row")
    idx = np.argmax(x, axis=-2)
    return np.take_along_axis(x, idx[..., None, :], axis=-2)[..., 0, :], idx


def max_pool_backward(g: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    """Route the pooled gradient to the argmax rows only."""
    out = np.zeros(g.shape[:-1] + (n_rows, g.shape[-1]))
    np.put_along_axis(out, idx[..., None, :], g[..., None, :], axis=-2)
    return out


def chamfer_batch(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched max-form Chamfer distance with gradients.

    ``x`` is ``(B, n, d)``, ``y`` is ``(B, m, d)``. Returns the ``(B,)`` values and
    the gradients of ``values.sum()`` w.r.t. ``x`` and ``y``. Only the larger
    directed term carries gradient (the first one on exact ties).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[1] == 0 or y.shape[1] == 0:
        raise EmptyInput("chamfer distance of an empty set")
    sq = (np.sum(x * x, axis=-1)[:, :, None] + np.sum(y * y, axis=-1)[:, None, :]
          - 2.0 * (x @ y.transpose(0, 2, 1)))
    nn_xy = np.argmin(sq, axis=2)  # (B, n)
    nn_yx = np.argmin(sq, axis=1)  # (B, m)
    # Recompute winning distances from exact differences.
    dxy = x - np.take_along_axis(y, nn_xy[..., None], axis=1)
    dyx = y - np.take_along_axis(x, nn_yx[..., None], axis=1)
    nxy, uxy = l2_norm_rows(dxy)
    nyx, uyx = l2_norm_rows(dyx)
    a = nxy.mean(axis=1)
    b = nyx.mean(axis=1)
    use_a = a >= b
    val = np.where(use_a, a, b)
    ga = uxy * (use_a / x.shape[1])[:, None, None]
    gb = uyx * ((~use_a) / y.shape[1])[:, None, None]
    gx = ga - _scatter_rows(gb, nn_yx, x.shape[1])
    gy = gb - _scatter_rows(ga, nn_xy, y.shape[1])
    return val, gx, gy


def _scatter_rows(values: np.ndarray, rows: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[b, rows[b, i]] += values[b, i]`` for ``(B, k, d)`` values."""
    bsz, k, d = values.shape
    flat = (rows + n_rows * np.arange(bsz)[:, None]).reshape(-1)
    vals = values.reshape(-1, d)
    out = np.empty((bsz * n_rows, d))
    for c in range(d):
        out[:, c] = np.bincount(flat, weights=vals[:, c], minlength=bsz * n_rows)
    return out.reshape(bsz, n_rows, d)


# --------------------------------------------------------------------------- optimizer


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One in-place Adam update with bias correction.

    Parameters without an entry in ``grads`` are left untouched, moments included.
    """
    for name, g in grads.items():
        if name not in store:
            raise ShapeMismatch(f"gradient for unknown parameter {name!r}")
        if g.shape != store[name].shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {store[name].shape}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def add_grads(total: dict[str, np.ndarray], part: Mapping[str, np.ndarray], scale: float = 1.0) -> None:
    for k, v in part.items():
        if k in total:
            total[k] = total[k] + scale * v
        else:
            total[k] = scale * v


# --------------------------------------------------------------------------- gradient checking


@dataclass
class FiniteDifferenceReport:
    rel_errors: dict[str, float]
    tolerance: float
    n_checked: int
    finite: bool = True

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_error < self.tolerance


def finite_difference_check(loss_fn: Callable[[dict], tuple[float, Mapping[str, np.ndarray]]],
                            params: Mapping[str, np.ndarray], eps: float = 1e-5,
                            tolerance: float = 1e-4, max_entries: Optional[int] = None,
                            seed: int = 0, abs_floor: float = 1e-8,
                            kink_retries: int = 3) -> FiniteDifferenceReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` returns ``(loss, grads)``. Each parameter's relative
    error is ``|g_a - g_n| / max(|g_a| + |g_n|, abs_floor)`` over its checked
    entries (vector norms); the floor keeps exactly-zero gradients from turning
    rounding noise into a 100% error. ``max_entries`` caps the entries probed
    per parameter.

    The losses here are piecewise smooth (ReLU, max pooling, nearest-neighbour
    assignment). When the forward and backward one-sided slopes of a probe
    disagree, the probe straddles a kink and is retried with a 10x smaller
    step, up to ``kink_retries`` times.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss0, grads = loss_fn(work)
    if not np.isfinite(loss0):
        return FiniteDifferenceReport({}, tolerance, 0, finite=False)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    checked = 0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        g_an = np.asarray(grads.get(name, np.zeros_like(arr))).reshape(-1)[entries]
        g_num = np.empty(len(entries))
        for j, e in enumerate(entries):
            orig = flat[e]
            h = eps
            for attempt in range(kink_retries + 1):
                flat[e] = orig + h
                lp, _ = loss_fn(work)
                flat[e] = orig - h
                lm, _ = loss_fn(work)
                flat[e] = orig
                if not (np.isfinite(lp) and np.isfinite(lm)):
                    return FiniteDifferenceReport(errors, tolerance, checked, finite=False)
                fwd = (lp - loss0) / h
                bwd = (loss0 - lm) / h
                if abs(fwd - bwd) <= 1e-4 * (abs(fwd) + abs(bwd)) + 1e-8:
                    break
                h *= 0.1
            g_num[j] = (lp - lm) / (2.0 * h)
        checked += len(entries)
        denom = max(np.linalg.norm(g_an) + np.linalg.norm(g_num), abs_floor)
        errors[name] = float(np.linalg.norm(g_an - g_num) / denom)
    return FiniteDifferenceReport(errors, tolerance, checked)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, store: ParamStore, metadata: Optional[dict] = None) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "shapes": {k: list(v.shape) for k, v in store.items()},
            "metadata": metadata or {}}
    arrays = {k: v for k, v in store.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unexpected format {meta.get('format')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {meta.get('version')}")
        store = ParamStore({k: data[k] for k in data.files if k != "__meta__"})
    for k, shape in meta["shapes"].items():
        if list(store[k].shape) != shape:
            raise ValueError(f"{path}: shape mismatch for {k}")
    return store, meta.get("metadata", {})
