"""Small deterministic diffusion-transformer denoiser.

The model is a stack of ``layers`` DiT-style blocks, each holding an attention
(ATT) and an MLP module.  Every module sees an AdaLN-modulated copy of the
residual stream and contributes a *branch output* that is added back to the
stream.  Branch outputs are the unit that gets cached, pruned and profiled.

Weights come from a seeded generator, so ``build_model`` with equal configs
gives bit-identical models.  Timesteps ``t`` and layers ``l`` are 1-based.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError, RangeError, ScheduleError, ShapeError

CONFIG_VERSION = 1
_NORM_EPS = 1e-6


class ModuleKind(enum.IntEnum):
    ATT = 0
    MLP = 1


MODULE_KINDS = (ModuleKind.ATT, ModuleKind.MLP)


@dataclass(frozen=True)
class ToyDitConfig:
    total_steps: int = 50
    layers: int = 4
    token_count: int = 16
    hidden_dim: int = 32
    heads: int = 4
    seed: int = 0
    beta_min: float = 0.001
    beta_max: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self):
        ints = ("total_steps", "layers", "token_count", "hidden_dim", "heads", "seed")
        for name in ints:
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigError(f"{name}: expected integer, got {v!r}")
        if self.total_steps < 2:
            raise ConfigError(f"total_steps: must be >= 2, got {self.total_steps}")
        if self.layers < 1:
            raise ConfigError(f"layers: must be >= 1, got {self.layers}")
        if self.token_count < 2:
            raise ConfigError(f"token_count: must be >= 2, got {self.token_count}")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim: must be positive, got {self.hidden_dim}")
        if self.heads < 1:
            raise ConfigError(f"heads: must be positive, got {self.heads}")
        if self.hidden_dim % self.heads:
            raise ConfigError(
                f"hidden_dim: {self.hidden_dim} not divisible by heads={self.heads}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed: must fit in 64 unsigned bits, got {self.seed}")
        if not (0 < self.beta_min <= self.beta_max < 1):
            raise ConfigError(
                f"beta_min/beta_max: need 0 < beta_min <= beta_max < 1, "
                f"got {self.beta_min}, {self.beta_max}"
            )

    def to_dict(self):
        d = {"version": CONFIG_VERSION}
        d.update(asdict(self))
        return d

    @classmethod
    def from_dict(cls, doc):
        keys = {"version", *cls.__dataclass_fields__}
        unknown = set(doc) - keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = keys - set(doc)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        if doc["version"] != CONFIG_VERSION:
            raise ConfigError(f"version: unsupported config version {doc['version']!r}")
        kw = {k: doc[k] for k in cls.__dataclass_fields__}
        return cls(**kw)

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(doc)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step ``a_t`` and ``abar_t``, stored at index ``t - 1``."""

    a: np.ndarray
    abar: np.ndarray

    @classmethod
    def linear(cls, cfg: ToyDitConfig) -> "NoiseSchedule":
        T = cfg.total_steps
        t = np.arange(1, T + 1, dtype=np.float64)
        beta = cfg.beta_min + (cfg.beta_max - cfg.beta_min) * (T - t) / (T - 1)
        a = 1.0 - beta
        # abar_t = prod_{s >= t} a_s, accumulated from t = T downwards
        abar = np.empty(T)
        acc = 1.0
        for i in range(T - 1, -1, -1):
            acc *= a[i]
            abar[i] = acc
        a.setflags(write=False)
        abar.setflags(write=False)
        return cls(a=a, abar=abar)

    @property
    def total_steps(self):
        return len(self.a)


def timestep_embedding(t, d, total_steps=None, max_period=10000.0, time_scale=1.0):
    """Sinusoidal embedding of integer timestep ``t`` (cos half, then sin half).

    The phase of channel ``i`` is ``t * time_scale * max_period**(-i / (d // 2))``.
    """
    if d < 1:
        raise RangeError(f"embedding dimension must be positive, got {d}")
    if t < 1 or (total_steps is not None and t > total_steps):
        raise RangeError(f"timestep {t} outside [1, {total_steps}]")
    half = d // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = float(t) * time_scale * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)])
    if d % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb


@dataclass(frozen=True, eq=False)
class ToyModel:
    config: ToyDitConfig
    schedule: NoiseSchedule
    weights: dict = field(repr=False)
    fingerprint: bytes = field(repr=False)
    conditions: np.ndarray = field(repr=False)

    # shorthand accessors
    @property
    def T(self):
        return self.config.total_steps

    @property
    def L(self):
        return self.config.layers

    @property
    def n_tok(self):
        return self.config.token_count

    @property
    def d(self):
        return self.config.hidden_dim

    def condition(self, t):
        """Conditioning vector for step ``t`` (embedding -> linear -> SiLU)."""
        if not 1 <= t <= self.T:
            raise RangeError(f"timestep {t} outside [1, {self.T}]")
        return self.conditions[t - 1]

    def epsilon_head(self, h):
        return _layer_norm(h) @ self.weights["out_proj"]


_WEIGHT_ORDER = (
    # (name, shape factory); drawn in this order from one generator
    ("emb_proj", lambda L, d: (d, d)),
    ("wq", lambda L, d: (L, d, d)),
    ("wk", lambda L, d: (L, d, d)),
    ("wv", lambda L, d: (L, d, d)),
    ("wo", lambda L, d: (L, d, d)),
    ("w1", lambda L, d: (L, d, 4 * d)),
    ("w2", lambda L, d: (L, 4 * d, d)),
    ("mod_scale", lambda L, d: (L, 2, d, d)),
    ("mod_shift", lambda L, d: (L, 2, d, d)),
    ("out_proj", lambda L, d: (d, d)),
)


def _fingerprint(cfg, weights):
    h = hashlib.sha256()
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    for name, _ in _WEIGHT_ORDER:
        w = np.ascontiguousarray(weights[name], dtype="<f8")
        h.update(name.encode())
        h.update(w.tobytes())
    return h.digest()


def build_model(config: ToyDitConfig) -> ToyModel:
    config.validate()
    L, d = config.layers, config.hidden_dim
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    bound = 1.0 / math.sqrt(d)
    weights = {}
    for name, shape in _WEIGHT_ORDER:
        w = rng.uniform(-bound, bound, size=shape(L, d))
        w.setflags(write=False)
        weights[name] = w
    # normalized time t/T: raw integer t aliases the fast channels from step to step
    T = config.total_steps
    emb = np.stack([timestep_embedding(t, d, T, time_scale=1.0 / T) for t in range(1, T + 1)])
    h = emb @ weights["emb_proj"]
    conds = h / (1.0 + np.exp(-h))
    conds.setflags(write=False)
    return ToyModel(
        config=config,
        schedule=NoiseSchedule.linear(config),
        weights=weights,
        fingerprint=_fingerprint(config, weights),
        conditions=conds,
    )


def _layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + _NORM_EPS)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _modulate(model, l, m, x, cond):
    w = model.weights
    scale = 1.0 + cond @ w["mod_scale"][l - 1, int(m)]
    shift = cond @ w["mod_shift"][l - 1, int(m)]
    return _layer_norm(x) * scale + shift


def _attention(model, l, x):
    w = model.weights
    n, d = x.shape
    heads = model.config.heads
    hd = d // heads
    q = (x @ w["wq"][l - 1]).reshape(n, heads, hd).transpose(1, 0, 2)
    k = (x @ w["wk"][l - 1]).reshape(n, heads, hd).transpose(1, 0, 2)
    v = (x @ w["wv"][l - 1]).reshape(n, heads, hd).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(hd)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ v).transpose(1, 0, 2).reshape(n, d)
    return out @ w["wo"][l - 1]


def attention_with_key_masks(model, l, m_input, key_masks):
    """Attention branch for a batch of key masks, shape (B, N, d).

    ``m_input`` is the already-modulated input; masked-out keys are excluded
    from every query's softmax.  Rows of masked-out queries are meaningless.
    """
    w = model.weights
    n, d = m_input.shape
    heads = model.config.heads
    hd = d // heads
    q = (m_input @ w["wq"][l - 1]).reshape(n, heads, hd).transpose(1, 0, 2)
    k = (m_input @ w["wk"][l - 1]).reshape(n, heads, hd).transpose(1, 0, 2)
    v = (m_input @ w["wv"][l - 1]).reshape(n, heads, hd).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1) / math.sqrt(hd))[None]
    scores = np.where(key_masks[:, None, None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ v[None]).transpose(0, 2, 1, 3).reshape(len(key_masks), n, d)
    return out @ w["wo"][l - 1]


def _mlp(model, l, x):
    w = model.weights
    return _gelu(x @ w["w1"][l - 1]) @ w["w2"][l - 1]


def _check_layer(model, l):
    if not 1 <= l <= model.L:
        raise RangeError(f"layer {l} outside [1, {model.L}]")


def forward_module(model, l, m, x, cond, kept=None, full_context=False):
    """Residual-branch output of module ``(l, m)`` for input stream ``x``.

    With ``kept`` given, only those rows are computed (attention sees only the
    kept tokens as context unless ``full_context``); the other rows of the
    result are zero and are meant to be filled by the caller.
    """
    _check_layer(model, l)
    m = ModuleKind(m)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_tok, model.d):
        raise ShapeError(f"feature map shape {x.shape} != {(model.n_tok, model.d)}")
    if kept is None:
        xin = _modulate(model, l, m, x, cond)
        return _attention(model, l, xin) if m is ModuleKind.ATT else _mlp(model, l, xin)
    idx = np.asarray(sorted(kept), dtype=np.intp)
    if idx.size == 0:
        raise ConfigError("kept position set must be nonempty")
    if idx[0] < 0 or idx[-1] >= model.n_tok or np.unique(idx).size != idx.size:
        raise RangeError(f"kept positions out of range for {model.n_tok} tokens")
    if full_context and m is ModuleKind.ATT:
        out = np.zeros_like(x)
        out[idx] = forward_module(model, l, m, x, cond)[idx]
        return out
    xin = _modulate(model, l, m, x[idx], cond)
    rows = _attention(model, l, xin) if m is ModuleKind.ATT else _mlp(model, l, xin)
    out = np.zeros_like(x)
    out[idx] = rows
    return out


def denoise_update(x_t, eps, t, sched: NoiseSchedule):
    # sigma_t = 0: deterministic update
    if x_t.shape != eps.shape:
        raise ShapeError(f"state shape {x_t.shape} != eps shape {eps.shape}")
    if not 1 <= t <= sched.total_steps:
        raise RangeError(f"timestep {t} outside [1, {sched.total_steps}]")
    a = sched.a[t - 1]
    abar = sched.abar[t - 1]
    if not (0.0 < a) or abar >= 1.0:
        raise ScheduleError(f"singular schedule at t={t}: a_t={a}, abar_t={abar}")
    coef = (1.0 - a) / math.sqrt(1.0 - abar)
    return (x_t - coef * eps) / math.sqrt(a)


@dataclass
class Trajectory:
    """Full-computation run.

    ``states[t]`` is ``x_t`` for t = 0..T.  When captured,
    ``module_inputs[t-1, l-1, m]`` and ``module_outputs[t-1, l-1, m]`` hold the
    stream entering module (t, l, m) and its branch output.
    """

    states: np.ndarray
    module_outputs: np.ndarray | None = None
    module_inputs: np.ndarray | None = None

    @property
    def final(self):
        return self.states[0]

    def state(self, t):
        return self.states[t]

    def output(self, t, l, m):
        return self.module_outputs[t - 1, l - 1, int(m)]

    def input(self, t, l, m):
        return self.module_inputs[t - 1, l - 1, int(m)]

    @property
    def output_count(self):
        if self.module_outputs is None:
            return 0
        return int(np.prod(self.module_outputs.shape[:3]))


def _check_finite(arr, t, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what} at step t={t}")


def run_full_trajectory(model: ToyModel, x_T, capture=False) -> Trajectory:
    x = np.array(x_T, dtype=np.float64)
    if x.shape != (model.n_tok, model.d):
        raise ShapeError(f"x_T shape {x.shape} != {(model.n_tok, model.d)}")
    _check_finite(x, model.T, "initial state")
    T, L = model.T, model.L
    states = np.empty((T + 1,) + x.shape)
    states[T] = x
    outs = ins = None
    if capture:
        outs = np.empty((T, L, 2) + x.shape)
        ins = np.empty_like(outs)
    for t in range(T, 0, -1):
        cond = model.condition(t)
        h = x
        for l in range(1, L + 1):
            for m in MODULE_KINDS:
                b = forward_module(model, l, m, h, cond)
                if capture:
                    ins[t - 1, l - 1, m] = h
                    outs[t - 1, l - 1, m] = b
                h = h + b
        eps = model.epsilon_head(h)
        x = denoise_update(x, eps, t, model.schedule)
        _check_finite(x, t, "state")
        states[t - 1] = x
    return Trajectory(states=states, module_outputs=outs, module_inputs=ins)


def initial_state(model: ToyModel, rng: np.random.Generator):
    return rng.standard_normal((model.n_tok, model.d))
