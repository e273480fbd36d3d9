"""Recurrent cells: the gateless fusion cell plus elman, gru, and lstm.

The fusion cell runs two stages per time step.  The fusion stage performs
``r`` alternating modulation rounds between the input column and the hidden
column; with ``x`` at virtual index -1 and ``h_prev`` at index 0,

    round i odd:   x_i = tanh(Fx @ h_{i-1}) * x_{i-2}
    round i even:  h_i = tanh(Fh @ x_{i-1}) * h_{i-2}

and the highest-indexed ``x`` and ``h`` feed the transport stage

    h_t = tanh(Wx @ x_fused + Wh @ h_fused + b)

which is exactly an elman update, so ``r = 0`` degenerates to the elman
cell.  All steps accept (dim x batch) tensors; each column is one sample.

Closed-form parameter and multiplication counts live here next to the
cells so the instrumented-counter tests can hold them to account.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, ValidationError
from .linalg import OpCounter

VARIANTS = ("fusion", "elman", "gru", "lstm")

MAX_FUSION_ROUNDS = 16


@dataclass
class FusedPair:
    """Outputs of the fusion stage; shapes match the inputs."""

    x_fused: Tensor
    h_fused: Tensor


@dataclass
class FusionCellParams:
    Fx: Tensor  # (m, n): hidden state -> input-shaped modulation
    Fh: Tensor  # (n, m): input -> hidden-shaped modulation
    Wx: Tensor  # (n, m)
    Wh: Tensor  # (n, n)
    b: Tensor  # (n, 1)
    r: int

    def __post_init__(self):
        if not 0 <= self.r <= MAX_FUSION_ROUNDS:
            raise ValidationError(f"fusion rounds r={self.r} outside [0, {MAX_FUSION_ROUNDS}]")

    @property
    def m(self) -> int:
        return self.Fx.data.shape[0]

    @property
    def n(self) -> int:
        return self.Wh.data.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {"Fx": self.Fx, "Fh": self.Fh, "Wx": self.Wx, "Wh": self.Wh, "b": self.b}


@dataclass
class ElmanCellParams:
    Wx: Tensor  # (n, m)
    Wh: Tensor  # (n, n)
    b: Tensor  # (n, 1)

    @property
    def m(self) -> int:
        return self.Wx.data.shape[1]

    @property
    def n(self) -> int:
        return self.Wh.data.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {"Wx": self.Wx, "Wh": self.Wh, "b": self.b}


@dataclass
class GruCellParams:
    """Reset / update / candidate weights, one (n, m), (n, n), (n, 1) triple each."""

    Wr: Tensor
    Ur: Tensor
    br: Tensor
    Wz: Tensor
    Uz: Tensor
    bz: Tensor
    Wg: Tensor
    Ug: Tensor
    bg: Tensor

    @property
    def m(self) -> int:
        return self.Wr.data.shape[1]

    @property
    def n(self) -> int:
        return self.Ur.data.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {
            "Wr": self.Wr, "Ur": self.Ur, "br": self.br,
            "Wz": self.Wz, "Uz": self.Uz, "bz": self.bz,
            "Wg": self.Wg, "Ug": self.Ug, "bg": self.bg,
        }


@dataclass
class LstmCellParams:
    """Input / forget / output gates plus cell candidate."""

    Wi: Tensor
    Ui: Tensor
    bi: Tensor
    Wf: Tensor
    Uf: Tensor
    bf: Tensor
    Wo: Tensor
    Uo: Tensor
    bo: Tensor
    Wg: Tensor
    Ug: Tensor
    bg: Tensor

    @property
    def m(self) -> int:
        return self.Wi.data.shape[1]

    @property
    def n(self) -> int:
        return self.Ui.data.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {
            "Wi": self.Wi, "Ui": self.Ui, "bi": self.bi,
            "Wf": self.Wf, "Uf": self.Uf, "bf": self.bf,
            "Wo": self.Wo, "Uo": self.Uo, "bo": self.bo,
            "Wg": self.Wg, "Ug": self.Ug, "bg": self.bg,
        }


CellParams = FusionCellParams | ElmanCellParams | GruCellParams | LstmCellParams


# ---------------------------------------------------------------------------
# cell steps


def fusion_module(x: Tensor, h_prev: Tensor, params: FusionCellParams,
                  counter: OpCounter | None = None) -> FusedPair:
    """Run the r modulation rounds and return the final (x, h) pair.

    For odd r the pair is (x_r, h_{r-1}); for even r it is (x_{r-1}, h_r);
    r = 0 returns the inputs untouched.
    """
    x_cur, h_cur = x, h_prev
    for i in range(1, params.r + 1):
        if i % 2 == 1:
            x_cur = ad.mul(ad.tanh(ad.matmul(params.Fx, h_cur, counter)), x_cur, counter)
        else:
            h_cur = ad.mul(ad.tanh(ad.matmul(params.Fh, x_cur, counter)), h_cur, counter)
    return FusedPair(x_cur, h_cur)


def transport_module(x: Tensor, h_prev: Tensor, params,
                     counter: OpCounter | None = None) -> Tensor:
    """h_t = tanh(Wx @ x + Wh @ h_prev + b); accepts fusion or elman params."""
    pre = ad.add(ad.add(ad.matmul(params.Wx, x, counter), ad.matmul(params.Wh, h_prev, counter)), params.b)
    return ad.tanh(pre)


def fusion_cell_step(x: Tensor, h_prev: Tensor, params: FusionCellParams,
                     counter: OpCounter | None = None) -> Tensor:
    fused = fusion_module(x, h_prev, params, counter)
    return transport_module(fused.x_fused, fused.h_fused, params, counter)


def elman_cell_step(x: Tensor, h_prev: Tensor, params: ElmanCellParams,
                    counter: OpCounter | None = None) -> Tensor:
    return transport_module(x, h_prev, params, counter)


def gru_cell_step(x: Tensor, h_prev: Tensor, params: GruCellParams,
                  counter: OpCounter | None = None) -> Tensor:
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(params.Wr, x, counter),
                                 ad.matmul(params.Ur, h_prev, counter)), params.br))
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(params.Wz, x, counter),
                                 ad.matmul(params.Uz, h_prev, counter)), params.bz))
    gated_h = ad.mul(r, h_prev, counter)
    g = ad.tanh(ad.add(ad.add(ad.matmul(params.Wg, x, counter),
                              ad.matmul(params.Ug, gated_h, counter)), params.bg))
    ones = ad.constant(np.ones_like(z.data))
    return ad.add(ad.mul(z, h_prev, counter), ad.mul(ad.sub(ones, z), g, counter))


def lstm_cell_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmCellParams,
                   counter: OpCounter | None = None) -> tuple[Tensor, Tensor]:
    def gate(W, U, b, act):
        return act(ad.add(ad.add(ad.matmul(W, x, counter), ad.matmul(U, h_prev, counter)), b))

    i = gate(params.Wi, params.Ui, params.bi, ad.sigmoid)
    f = gate(params.Wf, params.Uf, params.bf, ad.sigmoid)
    o = gate(params.Wo, params.Uo, params.bo, ad.sigmoid)
    g = gate(params.Wg, params.Ug, params.bg, ad.tanh)
    c_new = ad.add(ad.mul(f, c_prev, counter), ad.mul(i, g, counter))
    h_new = ad.mul(o, ad.tanh(c_new), counter)
    return h_new, c_new


def initial_state(params: CellParams, batch: int = 1) -> tuple[Tensor, ...]:
    """Zero state: (h,) for single-state cells, (h, c) for lstm."""
    zeros = lambda: ad.constant(np.zeros((params.n, batch)))  # noqa: E731
    if isinstance(params, LstmCellParams):
        return (zeros(), zeros())
    return (zeros(),)


def cell_step(params: CellParams, x: Tensor, state: tuple[Tensor, ...],
              counter: OpCounter | None = None) -> tuple[Tensor, ...]:
    """Advance one time step; state[0] is always the hidden output."""
    if isinstance(params, FusionCellParams):
        return (fusion_cell_step(x, state[0], params, counter),)
    if isinstance(params, ElmanCellParams):
        return (elman_cell_step(x, state[0], params, counter),)
    if isinstance(params, GruCellParams):
        return (gru_cell_step(x, state[0], params, counter),)
    if isinstance(params, LstmCellParams):
        return lstm_cell_step(x, state[0], state[1], params, counter)
    raise ValidationError(f"unknown cell params type {type(params).__name__}")


# ---------------------------------------------------------------------------
# counting


def _check_sizes(variant: str, m: int, n: int, r: int) -> None:
    if variant not in VARIANTS:
        raise ValidationError(f"unknown cell variant {variant!r}; expected one of {VARIANTS}")
    if m < 1 or n < 1:
        raise ValidationError(f"sizes must be >= 1, got m={m}, n={n}")
    if variant == "fusion" and r < 0:
        raise ValidationError(f"fusion rounds must be >= 0, got r={r}")


def param_count(variant: str, m: int, n: int, r: int = 0) -> int:
    """Exact number of scalar parameters of one cell."""
    _check_sizes(variant, m, n, r)
    if variant == "lstm":
        return 4 * m * n + 4 * n * n + 4 * n
    if variant == "gru":
        return 3 * m * n + 3 * n * n + 3 * n
    if variant == "fusion":
        return n * n + 3 * m * n + n
    return n * n + m * n + n  # elman


def mult_count(variant: str, m: int, n: int, r: int = 0, seq_len: int = 1) -> int:
    """Exact scalar multiplications of one cell step, times ``seq_len``.

    Convention: matrix products and elementwise products count; additions
    and activation evaluations do not.  The fusion stage contributes
    ceil(r/2) odd rounds (mn + m each) and floor(r/2) even rounds (mn + n
    each) on top of the transport stage's mn + n^2.
    """
    _check_sizes(variant, m, n, r)
    if seq_len < 1:
        raise ValidationError(f"seq_len must be >= 1, got {seq_len}")
    if variant == "lstm":
        per_step = 4 * m * n + 4 * n * n + 3 * n
    elif variant == "gru":
        per_step = 3 * m * n + 3 * n * n + 3 * n
    elif variant == "fusion":
        per_step = n * n + (1 + r) * m * n + (r // 2) * n + math.ceil(r / 2) * m
    else:  # elman
        per_step = n * n + m * n
    return per_step * seq_len


def count_scalar_params(params: CellParams) -> int:
    """Enumerated parameter total of a constructed cell (oracle for param_count)."""
    return sum(t.data.size for t in params.named().values())


def measure_step_mults(params: CellParams, batch: int = 1) -> int:
    """Run one instrumented step on random-free zero inputs and return the tally."""
    counter = OpCounter()
    x = ad.constant(np.zeros((params.m, batch)))
    state = initial_state(params, batch)
    cell_step(params, x, state, counter)
    return counter.multiplications


# ---------------------------------------------------------------------------
# initialization and serialization


def _uniform_glorot(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    limit = math.sqrt(6.0 / (rows + cols))
    return ad.parameter(rng.uniform(-limit, limit, size=(rows, cols)))


def init_params(variant: str, m: int, n: int, r: int = 0,
                rng: np.random.Generator | None = None) -> CellParams:
    """Construct a cell with uniform Glorot weights and zero biases.

    Matrices are drawn in a fixed documented order, so one seed always
    produces the same cell.
    """
    _check_sizes(variant, m, n, r)
    if rng is None:
        raise ValidationError("init_params requires an explicit rng for reproducibility")
    zeros_bias = lambda: ad.parameter(np.zeros((n, 1)))  # noqa: E731
    if variant == "fusion":
        return FusionCellParams(
            Fx=_uniform_glorot(rng, m, n),
            Fh=_uniform_glorot(rng, n, m),
            Wx=_uniform_glorot(rng, n, m),
            Wh=_uniform_glorot(rng, n, n),
            b=zeros_bias(),
            r=r,
        )
    if variant == "elman":
        return ElmanCellParams(
            Wx=_uniform_glorot(rng, n, m),
            Wh=_uniform_glorot(rng, n, n),
            b=zeros_bias(),
        )
    if variant == "gru":
        return GruCellParams(
            Wr=_uniform_glorot(rng, n, m), Ur=_uniform_glorot(rng, n, n), br=zeros_bias(),
            Wz=_uniform_glorot(rng, n, m), Uz=_uniform_glorot(rng, n, n), bz=zeros_bias(),
            Wg=_uniform_glorot(rng, n, m), Ug=_uniform_glorot(rng, n, n), bg=zeros_bias(),
        )
    return LstmCellParams(
        Wi=_uniform_glorot(rng, n, m), Ui=_uniform_glorot(rng, n, n), bi=zeros_bias(),
        Wf=_uniform_glorot(rng, n, m), Uf=_uniform_glorot(rng, n, n), bf=zeros_bias(),
        Wo=_uniform_glorot(rng, n, m), Uo=_uniform_glorot(rng, n, n), bo=zeros_bias(),
        Wg=_uniform_glorot(rng, n, m), Ug=_uniform_glorot(rng, n, n), bg=zeros_bias(),
    )


def variant_of(params: CellParams) -> str:
    return {FusionCellParams: "fusion", ElmanCellParams: "elman",
            GruCellParams: "gru", LstmCellParams: "lstm"}[type(params)]


def params_to_dict(params: CellParams) -> dict:
    """JSON-safe container keyed by matrix name; float64-lossless round trip."""
    out = {"variant": variant_of(params), "m": params.m, "n": params.n, "matrices": {}}
    if isinstance(params, FusionCellParams):
        out["r"] = params.r
    for name, t in params.named().items():
        out["matrices"][name] = {"shape": list(t.data.shape), "data": t.data.ravel().tolist()}
    return out


def params_from_dict(d: dict) -> CellParams:
    variant = d.get("variant")
    if variant not in VARIANTS:
        raise ValidationError(f"container has unknown variant {variant!r}")
    tensors = {}
    for name, entry in d["matrices"].items():
        shape = tuple(entry["shape"])
        data = np.array(entry["data"], dtype=np.float64).reshape(shape)
        tensors[name] = ad.parameter(data)
    cls = {"fusion": FusionCellParams, "elman": ElmanCellParams,
           "gru": GruCellParams, "lstm": LstmCellParams}[variant]
    if variant == "fusion":
        return cls(r=int(d["r"]), **tensors)
    return cls(**tensors)


def save_params(params: CellParams, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh)


def load_params(path: str) -> CellParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))
