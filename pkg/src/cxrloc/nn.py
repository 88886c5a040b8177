"""Layers and optimizer built on the autodiff core: LSTM/Bi-LSTM, glorot
init, inverted dropout spec, Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, AutodiffError, concat, dropout, make_dropout_mask

GATES = ("i", "f", "g", "o")  # input, forget, candidate, output


def glorot_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = (shape[0], shape[0]) if len(shape) == 1 else (shape[-1], shape[-2])
    if len(shape) == 4:  # conv kernels [K,C,kh,kw]
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass
class DropoutSpec:
    rate: float = 0.0
    recurrent_rate: float = 0.0
    training: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rate < 1.0 and 0.0 <= self.recurrent_rate < 1.0):
            raise ValueError("dropout rates must lie in [0, 1)")


class LstmParams:
    """Per-gate input/recurrent weights and biases for one direction.

    Forget-gate bias starts at 1.0 so early training does not wipe the cell
    state.
    """

    def __init__(self, input_size: int, hidden_size: int,
                 rng: np.random.Generator | None = None, prefix: str = "lstm"):
        if hidden_size <= 0 or input_size <= 0:
            raise ValueError("sizes must be positive")
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.prefix = prefix
        rng = rng or np.random.default_rng(0)
        self.Wx = {}
        self.Wh = {}
        self.b = {}
        for gate in GATES:
            self.Wx[gate] = Tensor(glorot_uniform(rng, (hidden_size, input_size)), requires_grad=True)
            self.Wh[gate] = Tensor(glorot_uniform(rng, (hidden_size, hidden_size)), requires_grad=True)
            init_b = np.ones(hidden_size) if gate == "f" else np.zeros(hidden_size)
            self.b[gate] = Tensor(init_b, requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for gate in GATES:
            out[f"{self.prefix}.Wx_{gate}"] = self.Wx[gate]
            out[f"{self.prefix}.Wh_{gate}"] = self.Wh[gate]
            out[f"{self.prefix}.b_{gate}"] = self.b[gate]
        return out


def _gate(x_t: Tensor, h_prev: Tensor, p: LstmParams, gate: str) -> Tensor:
    # x_t [B,in] or [in]; weights applied as x @ Wx^T + h @ Wh^T + b
    Wx, Wh, b = p.Wx[gate], p.Wh[gate], p.b[gate]
    if x_t.data.ndim == 1:
        return Wx @ x_t + Wh @ h_prev + b
    WxT = Tensor(Wx.data.T, parents=(Wx,))
    WxT._backward = lambda g: (g.T,)
    WhT = Tensor(Wh.data.T, parents=(Wh,))
    WhT._backward = lambda g: (g.T,)
    return x_t @ WxT + h_prev @ WhT + b


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmParams):
    """One LSTM step: gates i,f,o sigmoid, candidate g tanh."""
    if x_t.data.shape[-1] != params.input_size:
        raise AutodiffError(f"input size {x_t.data.shape[-1]} != {params.input_size}")
    if h_prev.data.shape[-1] != params.hidden_size:
        raise AutodiffError(f"hidden size {h_prev.data.shape[-1]} != {params.hidden_size}")
    i = _gate(x_t, h_prev, params, "i").sigmoid()
    f = _gate(x_t, h_prev, params, "f").sigmoid()
    g = _gate(x_t, h_prev, params, "g").tanh()
    o = _gate(x_t, h_prev, params, "o").sigmoid()
    c_t = f * c_prev + i * g
    h_t = o * c_t.tanh()
    return h_t, c_t


def _run_direction(seq: list[Tensor], params: LstmParams, spec: DropoutSpec,
                   rng: np.random.Generator, lengths: np.ndarray | None) -> Tensor:
    first = seq[0].data
    batched = first.ndim == 2
    B = first.shape[0] if batched else 1
    h_shape = (B, params.hidden_size) if batched else (params.hidden_size,)
    h = Tensor(np.zeros(h_shape))
    c = Tensor(np.zeros(h_shape))
    in_mask = rec_mask = None
    if spec.training:
        if spec.rate > 0:
            in_mask = make_dropout_mask(rng, first.shape, spec.rate)
        if spec.recurrent_rate > 0:
            rec_mask = make_dropout_mask(rng, h_shape, spec.recurrent_rate)
    for t, x_t in enumerate(seq):
        x_t = dropout(x_t, spec.rate, rng, spec.training, mask=in_mask)
        h_in = dropout(h, spec.recurrent_rate, rng, spec.training, mask=rec_mask)
        h_new, c_new = lstm_step(x_t, h_in, c, params)
        if lengths is not None and batched:
            live = (lengths > t).astype(np.float64)[:, None]
            h = h_new * live + h * (1.0 - live)
            c = c_new * live + c * (1.0 - live)
        else:
            h, c = h_new, c_new
    return h


def bilstm_encode(seq: list[Tensor], fwd: LstmParams, bwd: LstmParams,
                  spec: DropoutSpec | None = None,
                  lengths: np.ndarray | None = None) -> Tensor:
    """Concatenate final forward and final backward hidden states.

    seq is a list of per-timestep tensors ([in] or [B,in]); `lengths`
    masks padded timesteps in batched mode so padding never enters the
    encoding.
    """
    if not seq:
        raise AutodiffError("empty sequence")
    spec = spec or DropoutSpec()
    rng = np.random.default_rng(spec.seed)
    hf = _run_direction(seq, fwd, spec, rng, lengths)
    if lengths is not None and seq[0].data.ndim == 2:
        # reversed per-row: pads sit at the tail, so reverse only the live prefix
        T = len(seq)
        rev_idx = np.empty((seq[0].data.shape[0], T), dtype=np.int64)
        for r, L in enumerate(lengths):
            L = int(L)
            rev_idx[r, :L] = np.arange(L - 1, -1, -1)
            rev_idx[r, L:] = np.arange(L, T)
        rev_seq = [_gather_time(seq, rev_idx[:, t]) for t in range(T)]
        hb = _run_direction(rev_seq, bwd, spec, rng, lengths)
    else:
        hb = _run_direction(list(reversed(seq)), bwd, spec, rng, lengths)
    return concat([hf, hb], axis=-1)


def _gather_time(seq: list[Tensor], t_idx: np.ndarray) -> Tensor:
    """Per-row timestep gather: row r takes seq[t_idx[r]][r]."""
    B = seq[0].data.shape[0]
    data = np.stack([seq[t_idx[r]].data[r] for r in range(B)], axis=0)
    out = Tensor(data, parents=tuple(seq))

    def bw(g):
        grads = [np.zeros_like(s.data) for s in seq]
        for r in range(B):
            grads[t_idx[r]][r] += g[r]
        return tuple(grads)

    out._backward = bw
    return out


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 state: AdamState | None = None):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = params
        self.lr = lr
        self.state = state or AdamState(beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            self.state.m.setdefault(name, np.zeros_like(p.data))
            self.state.v.setdefault(name, np.zeros_like(p.data))

    def step(self):
        st = self.state
        st.t += 1
        b1, b2 = st.beta1, st.beta2
        bc1 = 1.0 - b1 ** st.t
        bc2 = 1.0 - b2 ** st.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise AutodiffError(f"non-finite gradient for {name}")
            st.m[name] = b1 * st.m[name] + (1 - b1) * g
            st.v[name] = b2 * st.v[name] + (1 - b2) * g * g
            mhat = st.m[name] / bc1
            vhat = st.v[name] / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + st.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
