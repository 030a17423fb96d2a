"""A small numpy function-approximation stack with hand-written backprop.

Parameters are plain ``dict[str, np.ndarray]`` (float64) so that Adam state,
Polyak target copies and checkpoints treat every network the same way.
Hidden layers compute ``dense -> layer norm -> gain/offset -> GELU``.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "NonFiniteLossError",
    "MlpSpec",
    "MLP",
    "ValueNet",
    "TabularValue",
    "LearnedValue",
    "FrozenValue",
    "gelu",
    "gradient",
    "adam_init",
    "adam_step",
    "polyak_update",
    "params_hash",
    "save_params",
    "load_params",
]

LN_EPS = 1e-10


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss is NaN/inf or exceeds the divergence guard."""

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = diagnostics
        detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x):
    """Tanh-form GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def _gelu_grad(x, t=None):
    x2 = x * x
    if t is None:
        t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    layer_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")


class MLP:
    """Fully connected network; an empty ``hidden`` gives a single linear map."""

    def __init__(self, spec: MlpSpec, prefix: str = ""):
        self.spec = spec
        self.prefix = prefix
        self.widths = (spec.in_dim, *spec.hidden, spec.out_dim)

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    def _k(self, name: str, i: int) -> str:
        return f"{self.prefix}{name}{i}"

    def init(self, rng, final_scale: float = 1.0) -> dict[str, np.ndarray]:
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            scale = np.sqrt(1.0 / fan_in) * (final_scale if i == self.num_layers - 1 else 1.0)
            params[self._k("w", i)] = rng.standard_normal((fan_in, fan_out)) * scale
            params[self._k("b", i)] = np.zeros(fan_out)
            if i < self.num_layers - 1 and self.spec.layer_norm:
                params[self._k("ln_g", i)] = np.ones(fan_out)
                params[self._k("ln_b", i)] = np.zeros(fan_out)
        return params

    def forward(self, params, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ValueError(f"expected input of shape (batch, {self.spec.in_dim}), got {x.shape}")
        cache = []
        h = x
        for i in range(self.num_layers):
            inp = h
            pre = inp @ params[self._k("w", i)] + params[self._k("b", i)]
            if i == self.num_layers - 1:
                cache.append((inp, None, None, None))
                return pre, cache
            if self.spec.layer_norm:
                mu = pre.mean(axis=1, keepdims=True)
                inv_std = 1.0 / np.sqrt(pre.var(axis=1, keepdims=True) + LN_EPS)
                xhat = (pre - mu) * inv_std
                y = xhat * params[self._k("ln_g", i)] + params[self._k("ln_b", i)]
            else:
                xhat = inv_std = None
                y = pre
            t = np.tanh(_GELU_C * y * (1.0 + _GELU_A * y * y))
            cache.append((inp, xhat, inv_std, (y, t)))
            h = 0.5 * y * (1.0 + t)
        raise AssertionError("unreachable")

    def __call__(self, params, x):
        return self.forward(params, x)[0]

    def backward(self, params, cache, dout):
        """Return ``(grads, d_input)`` for upstream gradient ``dout``."""
        grads = {}
        d = np.asarray(dout, dtype=np.float64)
        for i in reversed(range(self.num_layers)):
            inp, xhat, inv_std, act = cache[i]
            if i < self.num_layers - 1:
                d = d * _gelu_grad(*act)
                if self.spec.layer_norm:
                    grads[self._k("ln_g", i)] = (d * xhat).sum(axis=0)
                    grads[self._k("ln_b", i)] = d.sum(axis=0)
                    dxhat = d * params[self._k("ln_g", i)]
                    d = inv_std * (
                        dxhat
                        - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
                    )
            grads[self._k("w", i)] = inp.T @ d
            grads[self._k("b", i)] = d.sum(axis=0)
            d = d @ params[self._k("w", i)].T
        return grads, d

    def layer_norm_outputs(self, params, x):
        """Normalised pre-activations (before gain/offset) of each hidden layer."""
        _, cache = self.forward(params, x)
        return [c[1] for c in cache[:-1]]


def gradient(net, params, loss_fn, inputs):
    """Mean-batch loss and its exact parameter gradient.

    ``loss_fn(outputs) -> (loss, d_loss/d_outputs)``; ``net`` needs
    ``forward(params, inputs)`` and ``backward(params, cache, d_out)``.
    """
    out, cache = net.forward(params, inputs)
    loss, dout = loss_fn(out)
    if not np.isfinite(loss):
        raise NonFiniteLossError(
            "non-finite loss",
            loss=loss,
            max_abs_output=float(np.nanmax(np.abs(out))) if np.size(out) else 0.0,
            max_abs_param=max(float(np.abs(v).max()) for v in params.values()),
        )
    grads = net.backward(params, cache, dout)
    if isinstance(grads, tuple):
        grads = grads[0]
    return float(loss), grads


def adam_init(params):
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params, grads, state, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam. Parameters without a gradient entry are left alone.

    All updated tensors are processed as one concatenated vector; the results
    are returned as reshaped views into it.
    """
    t = state["t"] + 1
    new_params, m_new, v_new = dict(params), dict(state["m"]), dict(state["v"])
    keys = list(grads)
    if not keys:
        return new_params, {"t": t, "m": m_new, "v": v_new}
    for k in keys:
        if state["m"][k].shape != grads[k].shape:
            raise ValueError(f"optimizer state shape mismatch for {k}")
    c1, c2 = 1.0 - beta1**t, 1.0 - beta2**t
    g = np.concatenate([np.ravel(grads[k]) for k in keys])
    m = beta1 * np.concatenate([np.ravel(state["m"][k]) for k in keys]) + (1.0 - beta1) * g
    v = beta2 * np.concatenate([np.ravel(state["v"][k]) for k in keys]) + (1.0 - beta2) * g * g
    p = np.concatenate([np.ravel(params[k]) for k in keys]) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    off = 0
    for k in keys:
        shape, n = grads[k].shape, grads[k].size
        sl = slice(off, off + n)
        new_params[k], m_new[k], v_new[k] = p[sl].reshape(shape), m[sl].reshape(shape), v[sl].reshape(shape)
        off += n
    return new_params, {"t": t, "m": m_new, "v": v_new}


def polyak_update(target, online, rho):
    """``target <- (1 - rho) * target + rho * online`` on every shared key."""
    out = dict(target)
    for k, v in online.items():
        if k in target:
            if target[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}")
            out[k] = (1.0 - rho) * target[k] + rho * v
    return out


def params_hash(params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_params(path, params, header: dict | None = None) -> None:
    """Write a named-array container; byte-identical for identical inputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(header or {}, sort_keys=True))
        for k in sorted(params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(params[k]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"arrays/{k}.npy", date_time=_ZIP_DATE), buf.getvalue())


def load_params(path):
    params = {}
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        for name in zf.namelist():
            if name.startswith("arrays/"):
                key = name[len("arrays/") : -len(".npy")]
                params[key] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return params, header


# --- goal-conditioned value network --------------------------------------------------

PHI_INPUTS = ("gs", "g", "diff")
REP_NORM_FLOOR = 1e-8


class ValueNet:
    """``V(s, phi(.))`` with a unit-norm representation head.

    ``phi_input`` chooses what the head sees: ``"gs"`` = ``[g, s]``, ``"g"`` =
    ``g`` alone, ``"diff"`` = ``g - s``; ``None`` drops the head and the trunk
    reads ``[s, g]`` directly.
    """

    def __init__(
        self,
        feature_dim: int,
        trunk_hidden=(128, 128, 128),
        phi_hidden=(128, 128, 128),
        rep_dim: int = 10,
        phi_input: str | None = "gs",
        layer_norm: bool = True,
    ):
        if phi_input is not None and phi_input not in PHI_INPUTS:
            raise ValueError(f"unknown phi input {phi_input!r}")
        self.feature_dim = feature_dim
        self.phi_input = phi_input
        self.rep_dim = rep_dim if phi_input else 0
        if phi_input:
            phi_in = 2 * feature_dim if phi_input == "gs" else feature_dim
            self.phi = MLP(MlpSpec(phi_in, phi_hidden, rep_dim, layer_norm), prefix="phi.")
            trunk_in = feature_dim + rep_dim
        else:
            self.phi = None
            trunk_in = 2 * feature_dim
        self.trunk = MLP(MlpSpec(trunk_in, trunk_hidden, 1, layer_norm), prefix="trunk.")

    def init(self, rng):
        params = {}
        if self.phi is not None:
            params.update(self.phi.init(rng))
        params.update(self.trunk.init(rng))
        return params

    def _phi_in(self, s_feat, g_feat):
        if self.phi_input == "gs":
            return np.concatenate([g_feat, s_feat], axis=1)
        if self.phi_input == "g":
            return g_feat
        return g_feat - s_feat

    def represent(self, params, g_feat, s_feat, return_cache=False):
        if self.phi is None:
            raise ValueError("this value network has no representation head")
        u, cache = self.phi.forward(params, self._phi_in(s_feat, g_feat))
        # floor guards the all-zero output (e.g. zero features with zero biases)
        norm = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), REP_NORM_FLOOR)
        z = u / norm
        if return_cache:
            return z, (cache, z, norm)
        return z

    def represent_backward(self, params, rep_cache, dz):
        """Gradients of the head parameters from ``dL/dz``."""
        cache, z, norm = rep_cache
        du = (dz - z * (z * dz).sum(axis=1, keepdims=True)) / norm
        return self.phi.backward(params, cache, du)[0]

    def forward(self, params, inputs):
        s_feat, g_feat = inputs
        if self.phi is not None:
            z, rep_cache = self.represent(params, g_feat, s_feat, return_cache=True)
            trunk_in = np.concatenate([s_feat, z], axis=1)
        else:
            rep_cache = None
            trunk_in = np.concatenate([s_feat, g_feat], axis=1)
        v, trunk_cache = self.trunk.forward(params, trunk_in)
        return v[:, 0], (trunk_cache, rep_cache)

    def __call__(self, params, s_feat, g_feat):
        return self.forward(params, (s_feat, g_feat))[0]

    def backward(self, params, cache, dv):
        trunk_cache, rep_cache = cache
        grads, d_in = self.trunk.backward(params, trunk_cache, np.asarray(dv)[:, None])
        if rep_cache is not None:
            dz = d_in[:, self.feature_dim :]
            grads.update(self.represent_backward(params, rep_cache, dz))
        return grads


class TabularValue:
    """Dense ``V[s, g]`` table, usable wherever a learned value is expected."""

    def __init__(self, table):
        table = np.array(table, dtype=np.float64)
        if table.ndim != 2 or not np.isfinite(table).all():
            raise ValueError("value table must be a finite 2-D array")
        self.table = table

    @classmethod
    def zeros(cls, num_states: int, num_goals: int | None = None):
        return cls(np.zeros((num_states, num_goals or num_states)))

    def values(self, s, g) -> np.ndarray:
        return self.table[np.asarray(s), np.asarray(g)]

    @property
    def has_representation(self) -> bool:
        return False

    def params(self):
        return {"table": self.table}


class LearnedValue:
    """Binds a ``ValueNet`` and parameters to an environment's featurisation."""

    def __init__(self, net: ValueNet, params, env):
        self.net, self.params, self.env = net, params, env

    def values(self, s, g) -> np.ndarray:
        s, g = np.atleast_1d(s), np.atleast_1d(g)
        return self.net(self.params, self.env.features(s), self.env.features(g))

    @property
    def has_representation(self) -> bool:
        return self.net.phi is not None

    def represent(self, g, s) -> np.ndarray:
        s, g = np.atleast_1d(s), np.atleast_1d(g)
        return self.net.represent(self.params, self.env.features(g), self.env.features(s))

    def table(self) -> np.ndarray:
        n = self.env.num_states
        ss, gg = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        return self.values(ss.ravel(), gg.ravel()).reshape(n, n)

    def freeze(self) -> "FrozenValue":
        """Tabulate values (and representations) over every state pair."""
        n = self.env.num_states
        ss, gg = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        s, g = ss.ravel(), gg.ravel()
        table = self.values(s, g).reshape(n, n)
        rep = None
        if self.has_representation:
            rep = self.represent(gg.T.ravel(), ss.T.ravel()).reshape(n, n, -1)
        return FrozenValue(table, rep)


class FrozenValue(TabularValue):
    """Value table plus an optional ``rep[g, s]`` representation table."""

    def __init__(self, table, rep=None):
        super().__init__(table)
        self.rep = None if rep is None else np.asarray(rep, dtype=np.float64)
        if self.rep is not None and self.rep.shape[:2] != (self.table.shape[1], self.table.shape[0]):
            raise ValueError("representation table must be indexed [goal, state]")

    @property
    def has_representation(self) -> bool:
        return self.rep is not None

    def represent(self, g, s) -> np.ndarray:
        if self.rep is None:
            raise ValueError("no representation table")
        return self.rep[np.atleast_1d(g), np.atleast_1d(s)]
