"""The four architectures: MLP, simple RNN, LSTM, GRU.

Forward semantics follow the published formulation exactly, including
ReLU (not tanh) as the recurrent candidate/squash nonlinearity; gates
are sigmoid. Three activation modes are supported:

  paper    -- default. ReLU candidates/squash; all gates sigmoid (the GRU
              update gate's printed ReLU is treated as a typo, since an
              unbounded gate breaks the convex combination).
  strict   -- honors the printed equations literally: the GRU update gate
              uses ReLU. Training in this mode can diverge by design.
  standard -- tanh candidates/squash, for cross-checking against the
              conventional cell formulations.

Gradients are hand-derived backpropagation(-through-time); there is no
autodiff. Parameters live in one flat float64 vector with named views,
so the optimizer and the finite-difference checker both operate on a
single array.

The batch paths are organized for small-GEMM throughput: the input-side
contribution of every timestep is one big GEMM, the sequential loop only
carries the hidden-state GEMM, gate derivatives are computed in whole-
sequence passes, and all large temporaries live in reusable per-batch
scratch (allocations above numpy's mmap threshold page-fault on every
batch otherwise, which dominates training cost for nets this small).
Scratch is thread-local, so concurrent evaluation stays safe.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, asdict

import numpy as np

from . import _kernels
from .errors import DivergenceError
from .nncore import init_params, relu, sigmoid, check_finite

__all__ = [
    "ModelConfig",
    "Model",
    "MlpModel",
    "RnnModel",
    "LstmModel",
    "GruModel",
    "build_model",
    "rnn_cell",
    "lstm_cell",
    "gru_cell",
    "lstm_state_update",
    "gru_combine",
    "checkpoint_dict",
    "model_from_checkpoint",
    "ARCHITECTURES",
    "DEFAULT_WINDOW",
]

ARCHITECTURES = ("mlp", "rnn", "lstm", "gru")
ACTIVATION_MODES = ("paper", "strict", "standard")
CHECKPOINT_VERSION = 1

# 50 ms of context at 200 Hz; comfortably spans the electromechanical
# delay while keeping the fixed training regimen fast on desk hardware
DEFAULT_WINDOW = 10


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    window: int = DEFAULT_WINDOW
    horizon: int = 1
    hidden: int = 50          # recurrent state size U
    head_units: int = 100     # dense head after the recurrent stack
    mlp_hidden: tuple[int, int] = (200, 80)
    channels: int = 8
    activation_mode: str = "paper"
    out_dim: int = 1          # >1 only for the multi-horizon extension
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(
                f"unknown architecture {self.arch!r}; valid: {', '.join(ARCHITECTURES)}"
            )
        if self.activation_mode not in ACTIVATION_MODES:
            raise ValueError(
                f"unknown activation mode {self.activation_mode!r}; "
                f"valid: {', '.join(ACTIVATION_MODES)}"
            )
        for name in ("window", "horizon", "hidden", "head_units", "channels", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if isinstance(self.mlp_hidden, list):
            object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "mlp_hidden" in d:
            d["mlp_hidden"] = tuple(d["mlp_hidden"])
        return cls(**d)


def _dsigmoid(s):
    return s * (1.0 - s)


def _sigmoid_inplace(x: np.ndarray) -> None:
    """x <- sigmoid(x), no allocations beyond ufunc internals.

    Direct 1/(1+exp(-x)): IEEE overflow of the intermediate exp yields inf
    and the correct limit 0.0, so values are exact for all finite inputs;
    callers suppress the overflow warning for the duration of a batch.
    """
    np.negative(x, out=x)
    np.exp(x, out=x)
    x += 1.0
    np.divide(1.0, x, out=x)


class Model:
    """Flat-parameter model base; subclasses define layout and passes."""

    def __init__(self, config: ModelConfig):
        self.config = config
        names_shapes = self._layout()
        total = sum(int(np.prod(shape)) for _, shape in names_shapes)
        self.theta = np.zeros(total, dtype=np.float64)
        self.views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in names_shapes:
            size = int(np.prod(shape))
            self.views[name] = self.theta[offset : offset + size].reshape(shape)
            offset += size
        self._tls = threading.local()
        self.use_kernels = _kernels.AVAILABLE
        self._init_weights(config.seed)

    # pickling must preserve the view-into-theta aliasing, so ship only
    # (config, theta) and rebuild the layout on the other side
    def __getstate__(self):
        return {"config": self.config, "theta": self.theta.copy()}

    def __setstate__(self, state):
        self.__init__(state["config"])
        self.theta[:] = state["theta"]

    # ---- layout / init -------------------------------------------------

    def _layout(self) -> list[tuple[str, tuple]]:
        raise NotImplementedError

    def _weight_names(self) -> list[str]:
        """Names of glorot-initialized matrices, in seed-draw order."""
        return [n for n, _ in self._layout() if not n.startswith("b_")]

    def _init_weights(self, seed: int):
        ss = np.random.SeedSequence(seed)
        children = ss.spawn(len(self._weight_names()))
        for name, child in zip(self._weight_names(), children):
            self.views[name][...] = init_params(self.views[name].shape, child)
        # biases stay zero

    @property
    def param_count(self) -> int:
        return self.theta.size

    def unpack(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        """Views of an arbitrary flat vector using this model's layout."""
        if vec.shape != self.theta.shape:
            raise ValueError(f"expected a flat [{self.theta.size}] vector")
        out = {}
        offset = 0
        for name, shape in self._layout():
            size = int(np.prod(shape))
            out[name] = vec[offset : offset + size].reshape(shape)
            offset += size
        return out

    # ---- scratch buffers --------------------------------------------------

    def _scratch(self, batch: int) -> dict:
        tls = self._tls
        if not hasattr(tls, "scratch"):
            tls.scratch = {}
        store = tls.scratch
        if batch not in store:
            if len(store) > 2:
                store.clear()
            store[batch] = self._alloc_scratch(batch)
        return store[batch]

    def _alloc_scratch(self, batch: int) -> dict:
        return {}

    # ---- forward / backward --------------------------------------------

    def forward(self, window: np.ndarray) -> float | np.ndarray:
        """Predict from one [W, channels] window (normalized units)."""
        window = np.asarray(window, dtype=np.float64)
        cfg = self.config
        if window.shape != (cfg.window, cfg.channels):
            raise ValueError(
                f"window shape {window.shape} does not match model "
                f"({cfg.window}, {cfg.channels})"
            )
        y = self._forward_one(window)
        return float(y[0]) if cfg.out_dim == 1 else y

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        """Predict for a [B, W, channels] stack; returns [B] (or [B, out_dim])."""
        X = np.asarray(X, dtype=np.float64)
        cfg = self.config
        if X.ndim != 3 or X.shape[1:] != (cfg.window, cfg.channels):
            raise ValueError(
                f"batch shape {X.shape} does not match model "
                f"(B, {cfg.window}, {cfg.channels})"
            )
        with np.errstate(over="ignore"):
            y = self._forward_batch(X, self._scratch(X.shape[0]))
        return y[:, 0].copy() if cfg.out_dim == 1 else y.copy()

    def loss_and_grad(self, X: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
        """MSE over the batch and its gradient w.r.t. every parameter.

        The batch gradient equals the mean of per-sample gradients.
        """
        grad = np.zeros_like(self.theta)
        loss = self.loss_and_grad_into(X, targets, grad)
        return loss, grad

    def loss_and_grad_into(self, X, targets, grad_out: np.ndarray) -> float:
        """Allocation-light variant for the training loop; grad_out is overwritten."""
        X = np.asarray(X, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        cfg = self.config
        if X.ndim != 3 or X.shape[1:] != (cfg.window, cfg.channels):
            raise ValueError(f"bad batch shape {X.shape}")
        B = X.shape[0]
        if B == 0:
            raise ValueError("empty batch")
        t2 = targets.reshape(B, cfg.out_dim)
        S = self._scratch(B)
        with np.errstate(over="ignore"):
            y = self._forward_batch(X, S)
            diff = y - t2
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss for arch={cfg.arch}")
            d_y = (2.0 / diff.size) * diff
            grad_out.fill(0.0)
            self._backward(X, S, d_y, self.unpack(grad_out))
        return loss

    def loss(self, X: np.ndarray, targets: np.ndarray) -> float:
        X = np.asarray(X, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        with np.errstate(over="ignore"):
            y = self._forward_batch(X, self._scratch(X.shape[0]))
            diff = y - targets.reshape(y.shape)
            return float(np.mean(diff * diff))

    def kink_margin(self, X: np.ndarray) -> float:
        """Min |pre-activation| over every ReLU site touched by the batch.

        Used to reject parameter points too close to a ReLU kink for
        central finite differences to be trustworthy.
        """
        X = np.asarray(X, dtype=np.float64)
        S = self._scratch(X.shape[0])
        with np.errstate(over="ignore"):
            self._forward_batch(X, S)
        sites = [np.abs(S["ah"])]
        sites.extend(np.abs(p) for p in self._relu_preacts(S))
        return float(min(s.min() for s in sites))

    # ---- shared input-side helpers ---------------------------------------

    def _fill_time_major(self, X: np.ndarray, S: dict) -> np.ndarray:
        """[B, W, C] -> contiguous [W*B, C] scratch copy (time-major)."""
        X2 = S["X2"]
        X2.reshape(X.shape[1], X.shape[0], X.shape[2])[:] = X.transpose(1, 0, 2)
        return X2

    # ---- head shared by the recurrent models ----------------------------

    def _alloc_head_scratch(self, batch: int) -> dict:
        cfg = self.config
        return {
            "ah": np.empty((batch, cfg.head_units)),
            "hh": np.empty((batch, cfg.head_units)),
            "y": np.empty((batch, cfg.out_dim)),
            "d_ah": np.empty((batch, cfg.head_units)),
        }

    def _head_forward(self, h_final: np.ndarray, S: dict) -> np.ndarray:
        v = self.views
        ah, hh = S["ah"], S["hh"]
        np.dot(h_final, v["w_head"].T, out=ah)
        ah += v["b_head"]
        np.maximum(ah, 0.0, out=hh)
        np.dot(hh, v["w_out"].T, out=S["y"])
        S["y"] += v["b_out"]
        S["h_final"] = h_final
        return S["y"]

    def _head_backward(self, S: dict, d_y: np.ndarray, g: dict) -> np.ndarray:
        v = self.views
        hh, ah, h_final = S["hh"], S["ah"], S["h_final"]
        g["w_out"] += d_y.T @ hh
        g["b_out"] += d_y.sum(axis=0)
        d_ah = S["d_ah"]
        np.dot(d_y, v["w_out"], out=d_ah)
        d_ah *= ah > 0
        g["w_head"] += d_ah.T @ h_final
        g["b_head"] += d_ah.sum(axis=0)
        return d_ah @ v["w_head"]

    def _head_forward_one(self, h_final: np.ndarray) -> np.ndarray:
        v = self.views
        hh = relu(v["w_head"] @ h_final + v["b_head"])
        return v["w_out"] @ hh + v["b_out"]

    # hooks ----------------------------------------------------------------

    def _forward_one(self, window: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _forward_batch(self, X: np.ndarray, S: dict) -> np.ndarray:
        raise NotImplementedError

    def _backward(self, X, S, d_y, g) -> None:
        raise NotImplementedError

    def _relu_preacts(self, S) -> list[np.ndarray]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


class MlpModel(Model):
    """Flattened window -> 200 ReLU -> 80 ReLU -> linear output."""

    def _layout(self):
        cfg = self.config
        n_in = cfg.window * cfg.channels
        h1, h2 = cfg.mlp_hidden
        return [
            ("w1", (h1, n_in)),
            ("b_1", (h1,)),
            ("w2", (h2, h1)),
            ("b_2", (h2,)),
            ("w_out", (cfg.out_dim, h2)),
            ("b_out", (cfg.out_dim,)),
        ]

    def _alloc_scratch(self, batch: int):
        h1, h2 = self.config.mlp_hidden
        return {
            "a1": np.empty((batch, h1)),
            "h1": np.empty((batch, h1)),
            "a2": np.empty((batch, h2)),
            "h2": np.empty((batch, h2)),
            "y": np.empty((batch, self.config.out_dim)),
            "d1": np.empty((batch, h1)),
            "d2": np.empty((batch, h2)),
        }

    def _forward_one(self, window):
        v = self.views
        x = window.reshape(-1)
        h1 = relu(v["w1"] @ x + v["b_1"])
        h2 = relu(v["w2"] @ h1 + v["b_2"])
        return v["w_out"] @ h2 + v["b_out"]

    def _forward_batch(self, X, S):
        v = self.views
        B = X.shape[0]
        x = X.reshape(B, -1)
        S["x"] = x
        np.dot(x, v["w1"].T, out=S["a1"])
        S["a1"] += v["b_1"]
        np.maximum(S["a1"], 0.0, out=S["h1"])
        np.dot(S["h1"], v["w2"].T, out=S["a2"])
        S["a2"] += v["b_2"]
        np.maximum(S["a2"], 0.0, out=S["h2"])
        np.dot(S["h2"], v["w_out"].T, out=S["y"])
        S["y"] += v["b_out"]
        S["ah"] = S["a2"]
        return S["y"]

    def _backward(self, X, S, d_y, g):
        v = self.views
        x, a1, h1, a2, h2 = S["x"], S["a1"], S["h1"], S["a2"], S["h2"]
        g["w_out"] += d_y.T @ h2
        g["b_out"] += d_y.sum(axis=0)
        d2 = S["d2"]
        np.dot(d_y, v["w_out"], out=d2)
        d2 *= a2 > 0
        g["w2"] += d2.T @ h1
        g["b_2"] += d2.sum(axis=0)
        d1 = S["d1"]
        np.dot(d2, v["w2"], out=d1)
        d1 *= a1 > 0
        g["w1"] += d1.T @ x
        g["b_1"] += d1.sum(axis=0)

    def _relu_preacts(self, S):
        return [S["a1"], S["a2"]]


# ---------------------------------------------------------------------------
# simple RNN
# ---------------------------------------------------------------------------


class RnnModel(Model):
    """h_t = act(W_rec h_{t-1} + W_x x_t); no cell bias, per the formulation."""

    def _layout(self):
        cfg = self.config
        U, C = cfg.hidden, cfg.channels
        return [
            ("w_rec", (U, U)),
            ("w_x", (U, C)),
            ("w_head", (cfg.head_units, U)),
            ("b_head", (cfg.head_units,)),
            ("w_out", (cfg.out_dim, cfg.head_units)),
            ("b_out", (cfg.out_dim,)),
        ]

    @property
    def _tanh_cell(self) -> bool:
        return self.config.activation_mode == "standard"

    def cell(self, h_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
        v = self.views
        a = v["w_rec"] @ h_prev + v["w_x"] @ x
        return np.tanh(a) if self._tanh_cell else relu(a)

    def _forward_one(self, window):
        h = np.zeros(self.config.hidden)
        for s in range(self.config.window):
            h = self.cell(h, window[s])
        return self._head_forward_one(h)

    def _alloc_scratch(self, batch: int):
        cfg = self.config
        W, U, C = cfg.window, cfg.hidden, cfg.channels
        S = {
            "X2": np.empty((W * batch, C)),
            "XW": np.empty((W, batch, U)),
            "A": np.empty((W, batch, U)),
            "Hs": np.empty((W, batch, U)),
            "Hpost": np.empty((W, batch, U)),
            "dA": np.empty((W, batch, U)),
            "h": np.empty((batch, U)),
            "t1": np.empty((batch, U)),
            "dh": np.empty((batch, U)),
        }
        S.update(self._alloc_head_scratch(batch))
        return S

    def _forward_batch(self, X, S):
        v = self.views
        W, B, U = self.config.window, X.shape[0], self.config.hidden
        tanh_cell = self._tanh_cell
        A, Hs, Hpost, XW = S["A"], S["Hs"], S["Hpost"], S["XW"]
        X2 = self._fill_time_major(X, S)
        np.dot(X2, v["w_x"].T, out=XW.reshape(W * B, U))
        wr_t = v["w_rec"].T
        h = S["h"]
        h.fill(0.0)
        for s in range(W):
            Hs[s] = h
            a = A[s]
            np.dot(h, wr_t, out=a)
            a += XW[s]
            if tanh_cell:
                np.tanh(a, out=h)
            else:
                np.maximum(a, 0.0, out=h)
            Hpost[s] = h
        return self._head_forward(h, S)

    def _backward(self, X, S, d_y, g):
        v = self.views
        cfg = self.config
        B, W, U = X.shape[0], cfg.window, cfg.hidden
        A, Hs, Hpost, dA = S["A"], S["Hs"], S["Hpost"], S["dA"]
        tanh_cell = self._tanh_cell
        d_h = S["dh"]
        d_h[:] = self._head_backward(S, d_y, g)
        t1 = S["t1"]
        w_rec = v["w_rec"]
        for s in range(W - 1, -1, -1):
            da = dA[s]
            if tanh_cell:
                hp = Hpost[s]
                np.multiply(hp, hp, out=t1)
                np.subtract(1.0, t1, out=t1)
                np.multiply(d_h, t1, out=da)
            else:
                np.multiply(d_h, A[s] > 0, out=da)
            np.dot(da, w_rec, out=d_h)
        dA2 = dA.reshape(W * B, U)
        g["w_rec"] += dA2.T @ Hs.reshape(W * B, U)
        g["w_x"] += dA2.T @ S["X2"]

    def _relu_preacts(self, S):
        return [] if self._tanh_cell else [S["A"]]


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


def lstm_state_update(f, i, o, c_tilde, c_prev, squash):
    """Cell algebra with gates supplied explicitly (unit-test injection point).

    C_n = f*C_{n-1} + i*C_tilde ; h_n = o*squash(C_n).
    """
    c = f * c_prev + i * c_tilde
    return c, o * squash(c)


class LstmModel(Model):
    """Gated cell over [h_{n-1}, x_n]; candidate and squash use the cell
    nonlinearity (ReLU by default, tanh in standard mode).

    Gate storage order is f|i|o|c so the three sigmoid gates occupy one
    contiguous block of the fused [4U, D] matrix.
    """

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        U, D = config.hidden, config.hidden + config.channels
        self._block_slice = slice(0, 4 * U * D)
        self._bias_slice = slice(4 * U * D, 4 * U * D + 4 * U)

    def _layout(self):
        cfg = self.config
        U, D = cfg.hidden, cfg.hidden + cfg.channels
        return [
            ("w_f", (U, D)),
            ("w_i", (U, D)),
            ("w_o", (U, D)),
            ("w_c", (U, D)),
            ("b_f", (U,)),
            ("b_i", (U,)),
            ("b_o", (U,)),
            ("b_c", (U,)),
            ("w_head", (cfg.head_units, U)),
            ("b_head", (cfg.head_units,)),
            ("w_out", (cfg.out_dim, cfg.head_units)),
            ("b_out", (cfg.out_dim,)),
        ]

    @property
    def _tanh_cell(self) -> bool:
        return self.config.activation_mode == "standard"

    def _squash(self, x):
        return np.tanh(x) if self._tanh_cell else relu(x)

    def _gate_block(self) -> tuple[np.ndarray, np.ndarray]:
        """Fused [4U, D] weight block and [4U] bias (views, rows f|i|o|c)."""
        U = self.config.hidden
        w = self.theta[self._block_slice].reshape(4 * U, U + self.config.channels)
        b = self.theta[self._bias_slice]
        return w, b

    def cell(self, h_prev: np.ndarray, c_prev: np.ndarray, x: np.ndarray):
        """One step; returns (h, c)."""
        v = self.views
        u = np.concatenate([h_prev, x])
        f = sigmoid(v["w_f"] @ u + v["b_f"])
        i = sigmoid(v["w_i"] @ u + v["b_i"])
        c_tilde = self._squash(v["w_c"] @ u + v["b_c"])
        o = sigmoid(v["w_o"] @ u + v["b_o"])
        c, h = lstm_state_update(f, i, o, c_tilde, c_prev, self._squash)
        return h, c

    def _forward_one(self, window):
        U = self.config.hidden
        h = np.zeros(U)
        c = np.zeros(U)
        for s in range(self.config.window):
            h, c = self.cell(h, c, window[s])
        return self._head_forward_one(h)

    def _alloc_scratch(self, batch: int):
        cfg = self.config
        W, U, C = cfg.window, cfg.hidden, cfg.channels
        S = {
            "X2": np.empty((W * batch, C)),
            "XWb": np.empty((W, batch, 4 * U)),
            "G": np.empty((W, batch, 4 * U)),  # post-activation f|i|o|ct
            "CPre": np.empty((W, batch, U)),
            "Cs": np.empty((W + 1, batch, U)),
            "PhiC": np.empty((W, batch, U)),
            "Hs": np.empty((W, batch, U)),
            "dZ": np.empty((W, batch, 4 * U)),
            "DS": np.empty((W, batch, 3 * U)),   # sigmoid derivatives
            "DCAND": np.empty((W, batch, U)),    # candidate-activation derivative
            "DPHI": np.empty((W, batch, U)),     # squash derivative at C_n
            "h": np.empty((batch, U)),
            "dh": np.empty((batch, U)),
            "dc": np.empty((batch, U)),
            "t1": np.empty((batch, U)),
            "t2": np.empty((batch, U)),
        }
        S.update(self._alloc_head_scratch(batch))
        return S

    def _forward_batch(self, X, S):
        cfg = self.config
        W, B, U = cfg.window, X.shape[0], cfg.hidden
        w_blk, b_blk = self._gate_block()
        tanh_cell = self._tanh_cell
        G, CPre, Cs, PhiC, Hs, XWb = (
            S["G"], S["CPre"], S["Cs"], S["PhiC"], S["Hs"], S["XWb"]
        )
        t1 = S["t1"]
        X2 = self._fill_time_major(X, S)
        xw = XWb.reshape(W * B, 4 * U)
        np.dot(X2, w_blk[:, U:].T, out=xw)
        xw += b_blk
        w_h_t = np.ascontiguousarray(w_blk[:, :U].T)
        h = S["h"]
        h.fill(0.0)
        if self.use_kernels:
            _kernels.lstm_fwd(XWb, w_h_t, Hs, G, CPre, Cs, PhiC, h, tanh_cell)
            return self._head_forward(h, S)
        Cs[0] = 0.0
        for s in range(W):
            Hs[s] = h
            gs = G[s]
            np.dot(h, w_h_t, out=gs)
            gs += XWb[s]
            CPre[s] = gs[:, 3 * U :]
            _sigmoid_inplace(gs[:, : 3 * U])
            ct = gs[:, 3 * U :]
            if tanh_cell:
                np.tanh(ct, out=ct)
            else:
                np.maximum(ct, 0.0, out=ct)
            f = gs[:, :U]
            i = gs[:, U : 2 * U]
            o = gs[:, 2 * U : 3 * U]
            c = Cs[s + 1]
            np.multiply(f, Cs[s], out=c)
            np.multiply(i, ct, out=t1)
            c += t1
            pc = PhiC[s]
            if tanh_cell:
                np.tanh(c, out=pc)
            else:
                np.maximum(c, 0.0, out=pc)
            np.multiply(o, pc, out=h)
        return self._head_forward(h, S)

    def _backward(self, X, S, d_y, g):
        cfg = self.config
        B, W, U = X.shape[0], cfg.window, cfg.hidden
        w_blk, _ = self._gate_block()
        w_h_part = np.ascontiguousarray(w_blk[:, :U])
        tanh_cell = self._tanh_cell
        G, CPre, Cs, PhiC, Hs, dZ = (
            S["G"], S["CPre"], S["Cs"], S["PhiC"], S["Hs"], S["dZ"]
        )
        d_h = S["dh"]
        d_h[:] = self._head_backward(S, d_y, g)
        if self.use_kernels:
            _kernels.lstm_bwd(G, CPre, Cs, PhiC, d_h, w_h_part, dZ, tanh_cell)
        else:
            DS, DCAND, DPHI = S["DS"], S["DCAND"], S["DPHI"]
            # whole-sequence derivative passes
            sig = G[:, :, : 3 * U]
            np.subtract(1.0, sig, out=DS)
            DS *= sig
            ct_all = G[:, :, 3 * U :]
            if tanh_cell:
                np.multiply(ct_all, ct_all, out=DCAND)
                np.subtract(1.0, DCAND, out=DCAND)
                np.multiply(PhiC, PhiC, out=DPHI)
                np.subtract(1.0, DPHI, out=DPHI)
            else:
                np.multiply(CPre > 0.0, 1.0, out=DCAND)
                np.multiply(Cs[1:] > 0.0, 1.0, out=DPHI)

            d_c, t1, t2 = S["dc"], S["t1"], S["t2"]
            d_c.fill(0.0)
            for s in range(W - 1, -1, -1):
                gs = G[s]
                f = gs[:, :U]
                i = gs[:, U : 2 * U]
                o = gs[:, 2 * U : 3 * U]
                ct = gs[:, 3 * U :]
                ds = DS[s]
                blk = dZ[s]
                # output gate: dzo = dH*pc * o(1-o)
                np.multiply(d_h, PhiC[s], out=t1)
                np.multiply(t1, ds[:, 2 * U : 3 * U], out=blk[:, 2 * U : 3 * U])
                # cell-state carry: dC += dH*o*phi'(C)
                np.multiply(d_h, o, out=t1)
                t1 *= DPHI[s]
                d_c += t1
                # forget gate: dzf = dC*C_prev * f(1-f)
                np.multiply(d_c, Cs[s], out=t2)
                np.multiply(t2, ds[:, :U], out=blk[:, :U])
                # input gate: dzi = dC*ct * i(1-i)
                np.multiply(d_c, ct, out=t2)
                np.multiply(t2, ds[:, U : 2 * U], out=blk[:, U : 2 * U])
                # candidate: dzc = dC*i * phi_c'(pre)
                np.multiply(d_c, i, out=t2)
                np.multiply(t2, DCAND[s], out=blk[:, 3 * U :])
                np.dot(blk, w_h_part, out=d_h)
                d_c *= f
        dZ2 = dZ.reshape(W * B, 4 * U)
        dW_h = dZ2.T @ Hs.reshape(W * B, U)
        dW_x = dZ2.T @ S["X2"]
        db = dZ2.sum(axis=0)
        for k, name in enumerate(("w_f", "w_i", "w_o", "w_c")):
            g[name][:, :U] += dW_h[k * U : (k + 1) * U]
            g[name][:, U:] += dW_x[k * U : (k + 1) * U]
        for k, name in enumerate(("b_f", "b_i", "b_o", "b_c")):
            g[name] += db[k * U : (k + 1) * U]

    def _relu_preacts(self, S):
        if self._tanh_cell:
            return []
        # C entries that are exactly 0 are pinned there (inactive candidate
        # times zero prior state); they stay 0 under small perturbations, so
        # only nonzero cell states count as kink-adjacent squash inputs
        c = S["Cs"][1:]
        c_margin = np.where(c == 0.0, np.inf, c)
        return [S["CPre"], c_margin]


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


def gru_combine(z, h_prev, h_tilde):
    """h_n = (1 - z)*h_{n-1} + z*h_tilde (unit-test injection point)."""
    return (1.0 - z) * h_prev + z * h_tilde


class GruModel(Model):
    """Update/reset gates over [h_{n-1}, x_n]; candidate over [r*h_{n-1}, x_n]."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        U, D = config.hidden, config.hidden + config.channels
        self._zr_w_slice = slice(0, 2 * U * D)
        self._zr_b_slice = slice(2 * U * D, 2 * U * D + 2 * U)

    def _layout(self):
        cfg = self.config
        U, D = cfg.hidden, cfg.hidden + cfg.channels
        return [
            ("w_z", (U, D)),
            ("w_r", (U, D)),
            ("b_z", (U,)),
            ("b_r", (U,)),
            ("w_h", (U, D)),
            ("b_h", (U,)),
            ("w_head", (cfg.head_units, U)),
            ("b_head", (cfg.head_units,)),
            ("w_out", (cfg.out_dim, cfg.head_units)),
            ("b_out", (cfg.out_dim,)),
        ]

    @property
    def _tanh_cell(self) -> bool:
        return self.config.activation_mode == "standard"

    @property
    def _relu_update_gate(self) -> bool:
        return self.config.activation_mode == "strict"

    def _zr_block(self) -> tuple[np.ndarray, np.ndarray]:
        U, D = self.config.hidden, self.config.hidden + self.config.channels
        return (
            self.theta[self._zr_w_slice].reshape(2 * U, D),
            self.theta[self._zr_b_slice],
        )

    def cell(self, h_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
        v = self.views
        u = np.concatenate([h_prev, x])
        az = v["w_z"] @ u + v["b_z"]
        z = relu(az) if self._relu_update_gate else sigmoid(az)
        r = sigmoid(v["w_r"] @ u + v["b_r"])
        vv = np.concatenate([r * h_prev, x])
        ah = v["w_h"] @ vv + v["b_h"]
        h_tilde = np.tanh(ah) if self._tanh_cell else relu(ah)
        return gru_combine(z, h_prev, h_tilde)

    def _forward_one(self, window):
        h = np.zeros(self.config.hidden)
        for s in range(self.config.window):
            h = self.cell(h, window[s])
        return self._head_forward_one(h)

    def _alloc_scratch(self, batch: int):
        cfg = self.config
        W, U, C = cfg.window, cfg.hidden, cfg.channels
        S = {
            "X2": np.empty((W * batch, C)),
            "XWbzr": np.empty((W, batch, 2 * U)),
            "XWbc": np.empty((W, batch, U)),
            "ZR": np.empty((W, batch, 2 * U)),  # post-activation z|r
            "RH": np.empty((W, batch, U)),      # r * h_prev
            "HT": np.empty((W, batch, U)),
            "Hs": np.empty((W, batch, U)),
            "CPre": np.empty((W, batch, U)),
            "ZPre": np.empty((W, batch, U)),
            "dZR": np.empty((W, batch, 2 * U)),
            "dAC": np.empty((W, batch, U)),
            "DS": np.empty((W, batch, 2 * U)),
            "DCAND": np.empty((W, batch, U)),
            "h": np.empty((batch, U)),
            "dh": np.empty((batch, U)),
            "dh2": np.empty((batch, U)),
            "t1": np.empty((batch, U)),
            "t2": np.empty((batch, U)),
            "t3": np.empty((batch, U)),
        }
        S.update(self._alloc_head_scratch(batch))
        return S

    def _forward_batch(self, X, S):
        v = self.views
        cfg = self.config
        W, B, U = cfg.window, X.shape[0], cfg.hidden
        w_zr, b_zr = self._zr_block()
        tanh_cell = self._tanh_cell
        relu_z = self._relu_update_gate
        ZR, RH, HT, Hs, CPre = S["ZR"], S["RH"], S["HT"], S["Hs"], S["CPre"]
        XWbzr, XWbc = S["XWbzr"], S["XWbc"]
        t1 = S["t1"]
        X2 = self._fill_time_major(X, S)
        xw = XWbzr.reshape(W * B, 2 * U)
        np.dot(X2, w_zr[:, U:].T, out=xw)
        xw += b_zr
        xc = XWbc.reshape(W * B, U)
        np.dot(X2, v["w_h"][:, U:].T, out=xc)
        xc += v["b_h"]
        wzr_h_t = np.ascontiguousarray(w_zr[:, :U].T)
        wh_h_t = np.ascontiguousarray(v["w_h"][:, :U].T)
        h = S["h"]
        h.fill(0.0)
        if self.use_kernels:
            _kernels.gru_fwd(
                XWbzr, XWbc, wzr_h_t, wh_h_t, Hs, ZR, RH, CPre, HT,
                S["ZPre"], h, tanh_cell, relu_z,
            )
            return self._head_forward(h, S)
        for s in range(W):
            Hs[s] = h
            zr = ZR[s]
            np.dot(h, wzr_h_t, out=zr)
            zr += XWbzr[s]
            if relu_z:
                S["ZPre"][s] = zr[:, :U]
                np.maximum(zr[:, :U], 0.0, out=zr[:, :U])
                _sigmoid_inplace(zr[:, U:])
            else:
                _sigmoid_inplace(zr)
            z = zr[:, :U]
            r = zr[:, U:]
            rh = RH[s]
            np.multiply(r, h, out=rh)
            cp = CPre[s]
            np.dot(rh, wh_h_t, out=cp)
            cp += XWbc[s]
            ht = HT[s]
            if tanh_cell:
                np.tanh(cp, out=ht)
            else:
                np.maximum(cp, 0.0, out=ht)
            # h <- h + z*(ht - h) == (1-z)*h + z*ht
            np.subtract(ht, h, out=t1)
            t1 *= z
            h += t1
        return self._head_forward(h, S)

    def _backward(self, X, S, d_y, g):
        v = self.views
        cfg = self.config
        B, W, U = X.shape[0], cfg.window, cfg.hidden
        w_zr, _ = self._zr_block()
        wzr_h_part = np.ascontiguousarray(w_zr[:, :U])
        wh_h_part = np.ascontiguousarray(v["w_h"][:, :U])
        tanh_cell = self._tanh_cell
        relu_z = self._relu_update_gate
        ZR, RH, HT, Hs, CPre, dZR, dAC = (
            S["ZR"], S["RH"], S["HT"], S["Hs"], S["CPre"], S["dZR"], S["dAC"]
        )
        d_h = S["dh"]
        d_h[:] = self._head_backward(S, d_y, g)
        if self.use_kernels:
            _kernels.gru_bwd(
                ZR, RH, HT, Hs, CPre, S["ZPre"], d_h, wzr_h_part, wh_h_part,
                dZR, dAC, tanh_cell, relu_z,
            )
        else:
            DS, DCAND = S["DS"], S["DCAND"]
            np.subtract(1.0, ZR, out=DS)
            DS *= ZR
            if relu_z:
                np.multiply(S["ZPre"] > 0.0, 1.0, out=DS[:, :, :U])
            if tanh_cell:
                np.multiply(HT, HT, out=DCAND)
                np.subtract(1.0, DCAND, out=DCAND)
            else:
                np.multiply(CPre > 0.0, 1.0, out=DCAND)

            d_hn = S["dh2"]
            t1, t2, t3 = S["t1"], S["t2"], S["t3"]
            for s in range(W - 1, -1, -1):
                zr = ZR[s]
                z = zr[:, :U]
                r = zr[:, U:]
                ht = HT[s]
                hprev = Hs[s]
                ds = DS[s]
                blk = dZR[s]
                # update gate: dz = dH*(ht - hprev), through its activation
                np.subtract(ht, hprev, out=t1)
                t1 *= d_h
                np.multiply(t1, ds[:, :U], out=blk[:, :U])
                # candidate: dac = dH*z * phi'
                dac = dAC[s]
                np.multiply(d_h, z, out=t1)
                np.multiply(t1, DCAND[s], out=dac)
                # direct path: dH_prev = dH*(1-z)
                np.subtract(1.0, z, out=t1)
                np.multiply(d_h, t1, out=d_hn)
                # through the candidate's reset product: dv_h = dac @ W_h[:, :U]
                np.dot(dac, wh_h_part, out=t3)
                # reset gate: dr = dv_h*hprev through sigmoid
                np.multiply(t3, hprev, out=t2)
                np.multiply(t2, ds[:, U:], out=blk[:, U:])
                # dH_prev += dv_h*r
                np.multiply(t3, r, out=t2)
                d_hn += t2
                # dH_prev += [dzp|drp] @ W_zr[:, :U]
                np.dot(blk, wzr_h_part, out=t1)
                d_hn += t1
                d_h, d_hn = d_hn, d_h
            S["dh"], S["dh2"] = d_h, d_hn
        dZR2 = dZR.reshape(W * B, 2 * U)
        dW_h = dZR2.T @ Hs.reshape(W * B, U)
        dW_x = dZR2.T @ S["X2"]
        g["w_z"][:, :U] += dW_h[:U]
        g["w_z"][:, U:] += dW_x[:U]
        g["w_r"][:, :U] += dW_h[U:]
        g["w_r"][:, U:] += dW_x[U:]
        db_zr = dZR2.sum(axis=0)
        g["b_z"] += db_zr[:U]
        g["b_r"] += db_zr[U:]
        dAC2 = dAC.reshape(W * B, U)
        g["w_h"][:, :U] += dAC2.T @ RH.reshape(W * B, U)
        g["w_h"][:, U:] += dAC2.T @ S["X2"]
        g["b_h"] += dAC2.sum(axis=0)

    def _relu_preacts(self, S):
        sites = []
        if not self._tanh_cell:
            sites.append(S["CPre"])
        if self._relu_update_gate:
            sites.append(S["ZPre"])
        return sites


# ---------------------------------------------------------------------------
# public cell wrappers and factory
# ---------------------------------------------------------------------------


def rnn_cell(model: RnnModel, h_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
    """One simple-RNN step: act(W_rec h_prev + W_x x)."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if h_prev.shape != (model.config.hidden,) or x.shape != (model.config.channels,):
        raise ValueError("state/input dimensions do not match the model")
    return model.cell(h_prev, x)


def lstm_cell(
    model: LstmModel, h_prev: np.ndarray, c_prev: np.ndarray, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM step; returns (h, c)."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    U = model.config.hidden
    if h_prev.shape != (U,) or c_prev.shape != (U,) or x.shape != (model.config.channels,):
        raise ValueError("state/input dimensions do not match the model")
    return model.cell(h_prev, c_prev, x)


def gru_cell(model: GruModel, h_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
    """One GRU step."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if h_prev.shape != (model.config.hidden,) or x.shape != (model.config.channels,):
        raise ValueError("state/input dimensions do not match the model")
    return model.cell(h_prev, x)


_MODEL_CLASSES = {
    "mlp": MlpModel,
    "rnn": RnnModel,
    "lstm": LstmModel,
    "gru": GruModel,
}


def build_model(config: ModelConfig) -> Model:
    return _MODEL_CLASSES[config.arch](config)


def checkpoint_dict(model: Model) -> dict:
    """Self-describing JSON structure: config, seed, and every parameter array."""
    params = {
        name: {"shape": list(view.shape), "data": view.ravel().tolist()}
        for name, view in model.views.items()
    }
    return {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": params,
    }


def model_from_checkpoint(d: dict) -> Model:
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('format_version')!r}")
    config = ModelConfig.from_dict(d["config"])
    model = build_model(config)
    saved = d["params"]
    missing = set(model.views) - set(saved)
    extra = set(saved) - set(model.views)
    if missing or extra:
        raise ValueError(
            f"checkpoint parameter mismatch: missing={sorted(missing)}, "
            f"unexpected={sorted(extra)}"
        )
    for name, view in model.views.items():
        entry = saved[name]
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != view.shape:
            raise ValueError(
                f"checkpoint {name} has shape {arr.shape}, expected {view.shape}"
            )
        check_finite(name, arr)
        view[...] = arr
    return model
