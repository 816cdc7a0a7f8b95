"""Small encoder-only Transformer for sequence regression, in plain numpy.

Layout per layer (post-norm): multi-head self-attention, residual, layer
norm, GELU feed-forward, residual, layer norm. The encoder output is
mean-pooled over time and mapped to ``d_out`` targets by a linear head.
Gradients are hand-derived reverse mode; training is plain gradient
descent.

Every forward pass tallies multiply-accumulates per operation from the
shapes actually processed. ``flop_counter`` sums the three families that
make up the per-epoch complexity expression: attention scores
(``T^2 D`` per sequence and layer), the first feed-forward matmul
(``T D D_ff``) and the head (``D D_out``).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import SeededRng, power_iteration_lambda_max

CHECKPOINT_FORMAT = "noma-deepsic-transformer"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5
DOMINANT_TERMS = ("scores", "ffn1", "head")
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeMismatch(ValueError):
    pass


class WindowTooShort(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    seq_len: int = 10
    d_model: int = 32
    n_heads: int = 2
    d_ff: int | None = None
    n_layers: int = 2
    d_out: int = 1
    input_features: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("seq_len", "d_model", "n_heads", "d_ff", "n_layers", "d_out", "input_features"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


def complexity_per_sequence(T: int, d_model: int, d_ff: int, d_out: int) -> int:
    """Bracketed per-sample term of the per-epoch training complexity."""
    return T * T * d_model + T * d_model * d_ff + d_model * d_out


def sinusoidal_encoding(T: int, d_model: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class Standardizer:
    """Per-feature affine standardisation fitted on training windows."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n_features: int) -> "Standardizer":
        return cls(np.zeros(n_features), np.ones(n_features))

    @classmethod
    def fit(cls, windows) -> "Standardizer":
        X = np.asarray(windows, dtype=float)
        flat = X.reshape(-1, X.shape[-1])
        std = flat.std(axis=0)
        std[std == 0] = 1.0
        return cls(flat.mean(axis=0), std)

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.std


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray  # (T, F), standardised

    def to_json(self) -> str:
        return json.dumps({"shape": list(self.tokens.shape), "tokens": self.tokens.ravel().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "TokenSequence":
        d = json.loads(text)
        return cls(np.asarray(d["tokens"], dtype=float).reshape(d["shape"]))


def encode_features(window, standardizer: Standardizer, seq_len: int) -> TokenSequence:
    """Standardise the last ``seq_len`` rows of a (steps, features) window.

    Positional encoding is added inside the model, after the embedding.
    """
    W = np.asarray(window, dtype=float)
    if W.ndim != 2 or W.shape[0] < seq_len:
        raise WindowTooShort(f"need {seq_len} steps, got shape {W.shape}")
    tok = standardizer.transform(W[-seq_len:])
    if not np.all(np.isfinite(tok)):
        raise ValueError("window contains non-finite values")
    return TokenSequence(tok)


def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_forward(Q, K, V, d_k: int):
    """``softmax(Q K^T / sqrt(d_k)) V`` over the last two axes."""
    Q, K, V = (np.asarray(a, dtype=float) for a in (Q, K, V))
    scores = Q @ np.swapaxes(K, -1, -2) / math.sqrt(d_k)
    return softmax(scores) @ V


def _param_names(cfg: TransformerConfig) -> list[str]:
    names = ["embed_W", "embed_b"]
    for l in range(cfg.n_layers):
        names += [f"L{l}.{n}" for n in ("Wq", "Wk", "Wv", "Wo", "ln1_g", "ln1_b",
                                         "ff1_W", "ff1_b", "ff2_W", "ff2_b", "ln2_g", "ln2_b")]
    return names + ["head_W", "head_b"]


def is_head_param(name: str) -> bool:
    return name.startswith("head_")


class TransformerModel:
    """Parameters, gradient buffers, standardisation stats and FLOP tallies."""

    def __init__(self, cfg: TransformerConfig, standardizer: Standardizer | None = None,
                 params: dict[str, np.ndarray] | None = None, frozen: bool = False):
        self.cfg = cfg
        self.standardizer = standardizer or Standardizer.identity(cfg.input_features)
        self.params = params if params is not None else self._init_params(SeededRng(cfg.seed, 7))
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.pos_encoding = sinusoidal_encoding(cfg.seq_len, cfg.d_model)
        self.frozen = frozen
        self.flops: Counter = Counter()
        self.attention_maps: list[np.ndarray] = []

    def _init_params(self, rng: SeededRng) -> dict[str, np.ndarray]:
        cfg = self.cfg
        D, F, Dff = cfg.d_model, cfg.input_features, cfg.d_ff
        g = rng.gen

        def glorot(n_in, n_out):
            return g.standard_normal((n_in, n_out)) * math.sqrt(2.0 / (n_in + n_out))

        p = {"embed_W": glorot(F, D), "embed_b": np.zeros(D)}
        for l in range(cfg.n_layers):
            pre = f"L{l}."
            for n in ("Wq", "Wk", "Wv", "Wo"):
                p[pre + n] = glorot(D, D)
            p[pre + "ln1_g"] = np.ones(D)
            p[pre + "ln1_b"] = np.zeros(D)
            p[pre + "ff1_W"] = glorot(D, Dff)
            p[pre + "ff1_b"] = np.zeros(Dff)
            p[pre + "ff2_W"] = glorot(Dff, D)
            p[pre + "ff2_b"] = np.zeros(D)
            p[pre + "ln2_g"] = np.ones(D)
            p[pre + "ln2_b"] = np.zeros(D)
        p["head_W"] = np.zeros((D, cfg.d_out))
        p["head_b"] = np.zeros(cfg.d_out)
        return p

    # ------------------------------------------------------------------ accounting
    @property
    def flop_counter(self) -> int:
        return int(sum(self.flops[k] for k in DOMINANT_TERMS))

    @property
    def flops_total(self) -> int:
        return int(sum(self.flops.values()))

    def reset_flops(self) -> None:
        self.flops = Counter()

    def attention_weight_frobenius(self, layer: int = 0) -> float:
        """Frobenius norm of the concatenated attention weights ``[Wq Wk Wv Wo]``."""
        pre = f"L{layer}."
        return float(math.sqrt(sum(np.sum(self.params[pre + n] ** 2) for n in ("Wq", "Wk", "Wv", "Wo"))))

    def backbone_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            if not is_head_param(name):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------ forward
    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[None]
        cfg = self.cfg
        if X.ndim != 3 or X.shape[2] != cfg.input_features:
            raise ShapeMismatch(f"expected (S, T, {cfg.input_features}) tokens, got {X.shape}")
        if X.shape[1] > cfg.seq_len:
            raise ShapeMismatch(f"sequence length {X.shape[1]} exceeds the configured {cfg.seq_len}")
        return X

    def embed(self, X) -> np.ndarray:
        """Token embedding plus positional encoding, shape (S, T, D)."""
        X = self._check(X)
        T = X.shape[1]
        return X @ self.params["embed_W"] + self.params["embed_b"] + self.pos_encoding[:T]

    def encode(self, X, keep_cache: bool = False):
        """Run the encoder stack; returns pooled features (S, D) and the cache."""
        X = self._check(X)
        cfg, p = self.cfg, self.params
        S, T, _ = X.shape
        D, H, dk, Dff = cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_ff
        self.flops["embed"] += S * T * cfg.input_features * D
        h = X @ p["embed_W"] + p["embed_b"] + self.pos_encoding[:T]
        caches = []
        self.attention_maps = []
        for l in range(cfg.n_layers):
            pre = f"L{l}."
            Q = h @ p[pre + "Wq"]
            K = h @ p[pre + "Wk"]
            V = h @ p[pre + "Wv"]
            self.flops["qkv"] += 3 * S * T * D * D
            Qh = Q.reshape(S, T, H, dk).transpose(0, 2, 1, 3)
            Kh = K.reshape(S, T, H, dk).transpose(0, 2, 1, 3)
            Vh = V.reshape(S, T, H, dk).transpose(0, 2, 1, 3)
            P = softmax(Qh @ Kh.transpose(0, 1, 3, 2) / math.sqrt(dk))
            self.flops["scores"] += S * H * T * T * dk
            Oh = P @ Vh
            self.flops["mix"] += S * H * T * T * dk
            O = Oh.transpose(0, 2, 1, 3).reshape(S, T, D)
            A = O @ p[pre + "Wo"]
            self.flops["out_proj"] += S * T * D * D
            z1, ln1 = _layer_norm(h + A, p[pre + "ln1_g"], p[pre + "ln1_b"])
            f1 = z1 @ p[pre + "ff1_W"] + p[pre + "ff1_b"]
            self.flops["ffn1"] += S * T * D * Dff
            g, t = _gelu(f1)
            f2 = g @ p[pre + "ff2_W"] + p[pre + "ff2_b"]
            self.flops["ffn2"] += S * T * Dff * D
            z2, ln2 = _layer_norm(z1 + f2, p[pre + "ln2_g"], p[pre + "ln2_b"])
            self.attention_maps.append(P)
            if keep_cache:
                caches.append(dict(h=h, Qh=Qh, Kh=Kh, Vh=Vh, P=P, O=O, z1=z1, ln1=ln1,
                                   f1=f1, t=t, g=g, ln2=ln2))
            h = z2
        pooled = h.mean(axis=1)
        return pooled, (X, caches, h.shape)

    def head(self, pooled) -> np.ndarray:
        S = pooled.shape[0]
        self.flops["head"] += S * self.cfg.d_model * self.cfg.d_out
        return pooled @ self.params["head_W"] + self.params["head_b"]

    def forward(self, X) -> np.ndarray:
        """Predictions of shape (S, d_out) for tokens (S, T, F) or (T, F)."""
        if isinstance(X, TokenSequence):
            X = X.tokens
        pooled, _ = self.encode(X)
        return self.head(pooled)

    # ------------------------------------------------------------------ backward
    def loss_and_grads(self, X, Y) -> float:
        """Mean over samples of ``0.5 * ||y - y_hat||^2``; fills ``self.grads``."""
        X = self._check(X)
        Y = np.asarray(Y, dtype=float).reshape(X.shape[0], self.cfg.d_out)
        pooled, (X, caches, _) = self.encode(X, keep_cache=True)
        pred = self.head(pooled)
        S, T = X.shape[0], X.shape[1]
        err = pred - Y
        loss = 0.5 * float(np.sum(err ** 2)) / S
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"loss is {loss}")
        self._backward(err / S, pooled, X, caches)
        return loss

    def _backward(self, dpred, pooled, X, caches) -> None:
        cfg, p, gr = self.cfg, self.params, self.grads
        S, T, _ = X.shape
        D, H, dk = cfg.d_model, cfg.n_heads, cfg.d_k
        gr["head_W"] = pooled.T @ dpred
        gr["head_b"] = dpred.sum(axis=0)
        dh = np.broadcast_to((dpred @ p["head_W"].T)[:, None, :] / T, (S, T, D)).copy()
        back = 2 * S * D * cfg.d_out
        for l in reversed(range(cfg.n_layers)):
            pre, c = f"L{l}.", caches[l]
            dr2, gr[pre + "ln2_g"], gr[pre + "ln2_b"] = _layer_norm_back(dh, p[pre + "ln2_g"], c["ln2"])
            df2 = dr2
            gr[pre + "ff2_W"] = c["g"].reshape(-1, cfg.d_ff).T @ df2.reshape(-1, D)
            gr[pre + "ff2_b"] = df2.sum(axis=(0, 1))
            df1 = (df2 @ p[pre + "ff2_W"].T) * _gelu_grad(c["f1"], c["t"])
            gr[pre + "ff1_W"] = c["z1"].reshape(-1, D).T @ df1.reshape(-1, cfg.d_ff)
            gr[pre + "ff1_b"] = df1.sum(axis=(0, 1))
            dz1 = dr2 + df1 @ p[pre + "ff1_W"].T
            dr1, gr[pre + "ln1_g"], gr[pre + "ln1_b"] = _layer_norm_back(dz1, p[pre + "ln1_g"], c["ln1"])
            dA = dr1
            gr[pre + "Wo"] = c["O"].reshape(-1, D).T @ dA.reshape(-1, D)
            dO = (dA @ p[pre + "Wo"].T).reshape(S, T, H, dk).transpose(0, 2, 1, 3)
            P = c["P"]
            dP = dO @ c["Vh"].transpose(0, 1, 3, 2)
            dVh = P.transpose(0, 1, 3, 2) @ dO
            dsc = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) / math.sqrt(dk)
            dQh = dsc @ c["Kh"]
            dKh = dsc.transpose(0, 1, 3, 2) @ c["Qh"]

            def merge(a):
                return a.transpose(0, 2, 1, 3).reshape(S, T, D)

            dQ, dK, dV = merge(dQh), merge(dKh), merge(dVh)
            hin = c["h"].reshape(-1, D)
            gr[pre + "Wq"] = hin.T @ dQ.reshape(-1, D)
            gr[pre + "Wk"] = hin.T @ dK.reshape(-1, D)
            gr[pre + "Wv"] = hin.T @ dV.reshape(-1, D)
            dh = dr1 + dQ @ p[pre + "Wq"].T + dK @ p[pre + "Wk"].T + dV @ p[pre + "Wv"].T
            back += 2 * S * (4 * T * D * D + 2 * T * T * D + 2 * T * D * cfg.d_ff)
        gr["embed_W"] = X.reshape(-1, cfg.input_features).T @ dh.reshape(-1, D)
        gr["embed_b"] = dh.sum(axis=(0, 1))
        self.flops["backward"] += back + 2 * S * T * cfg.input_features * D

    def step(self, eta: float, head_only: bool = False) -> None:
        for name, g in self.grads.items():
            if head_only or self.frozen:
                if not is_head_param(name):
                    continue
            self.params[name] -= eta * g

    # ------------------------------------------------------------------ checkpoints
    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "standardizer": {"mean": self.standardizer.mean.tolist(), "std": self.standardizer.std.tolist()},
            "frozen": self.frozen,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerModel":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a compatible checkpoint")
        cfg = TransformerConfig(**d["config"])
        st = Standardizer(np.asarray(d["standardizer"]["mean"]), np.asarray(d["standardizer"]["std"]))
        params = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
        if set(params) != set(_param_names(cfg)):
            raise ValueError("checkpoint parameters do not match the configuration")
        return cls(cfg, st, params, frozen=bool(d["frozen"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "TransformerModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------- training

def head_lr_bound(pooled) -> float:
    """``2 / lambda_max`` of the head's Gauss-Newton matrix for the mean squared loss."""
    Z = np.hstack([pooled, np.ones((pooled.shape[0], 1))])
    lam = power_iteration_lambda_max(Z.T @ Z / Z.shape[0])
    return 2.0 / lam


def backward_and_step(model: TransformerModel, X, Y, eta: float, check_eta: bool = True) -> float:
    """One gradient-descent step on the whole model; returns the pre-step loss.

    With ``check_eta`` the step is refused when ``eta`` exceeds 0.9 of the
    head's stability bound on this batch.
    """
    loss = model.loss_and_grads(X, Y)
    if check_eta:
        pooled, _ = model.encode(X)
        bound = head_lr_bound(pooled)
        if eta > 0.9 * bound:
            raise ValueError(f"eta={eta:.4g} exceeds 0.9 x head stability bound {bound:.4g}")
    model.step(eta)
    return loss


@dataclass
class TrainLog:
    rows: list[tuple[int, float, int]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "flops_cumulative"])
            for e, l, f in self.rows:
                w.writerow([e, f"{l:.9g}", f])


BACKBONE_ETA_FRACTION = 0.1


def train(model: TransformerModel, X, Y, epochs: int, eta: float | None = None,
          batch_size: int | None = None, rng: SeededRng | None = None) -> TrainLog:
    """Plain (mini-batch) gradient descent.

    ``eta`` defaults to ``BACKBONE_ETA_FRACTION`` of the head stability bound
    on the full training set at the initial parameters; the head bound alone
    ignores curvature from the backbone and is too large for joint training.
    Batches are drawn by a deterministic permutation when ``batch_size`` is set.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], model.cfg.d_out)
    if eta is None:
        pooled, _ = model.encode(X)
        eta = BACKBONE_ETA_FRACTION * head_lr_bound(pooled)
    rng = rng or SeededRng(model.cfg.seed, 11)
    S = X.shape[0]
    bs = batch_size or S
    log = TrainLog()
    for epoch in range(epochs):
        order = rng.gen.permutation(S) if bs < S else np.arange(S)
        total = 0.0
        for start in range(0, S, bs):
            idx = order[start:start + bs]
            total += model.loss_and_grads(X[idx], Y[idx]) * len(idx)
            model.step(eta)
        log.rows.append((epoch, total / S, model.flop_counter))
    return log


def pooled_features(model: TransformerModel, X) -> np.ndarray:
    pooled, _ = model.encode(X)
    return pooled


def transfer_fit(model: TransformerModel, X, Y, max_steps: int = 10_000, tol: float = 1e-12,
                 eta: float | None = None) -> dict[str, np.ndarray]:
    """Fit only the regression head on mean-pooled features of a frozen backbone.

    Gradient descent on ``0.5 * mean ||y - [p, 1] theta||^2`` at 0.9 of the
    head stability bound, stopping once the loss falls below ``tol``.
    Returns the updated head parameters (also written into the model).
    """
    if not model.frozen:
        raise ValueError("transfer_fit needs a frozen pretrained model")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], model.cfg.d_out)
    P = pooled_features(model, X)
    S = P.shape[0]
    Z = np.hstack([P, np.ones((S, 1))])
    theta = np.vstack([model.params["head_W"], model.params["head_b"][None, :]])
    if eta is None:
        eta = 0.9 * head_lr_bound(P)
    for _ in range(max_steps):
        err = Z @ theta - Y
        if 0.5 * np.sum(err ** 2) / S < tol:
            break
        theta = theta - eta * (Z.T @ err) / S
        model.flops["head"] += S * model.cfg.d_model * model.cfg.d_out
    model.params["head_W"] = theta[:-1].copy()
    model.params["head_b"] = theta[-1].copy()
    return {"head_W": model.params["head_W"], "head_b": model.params["head_b"]}


# ---------------------------------------------------------------------- augmentation

def augment_dataset(X, Y, rng: SeededRng, noise_scale: float):
    """Append a jittered copy: per-feature Gaussian noise with ``noise_scale`` x feature std."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    std = X.reshape(-1, X.shape[-1]).std(axis=0)
    jitter = rng.gen.standard_normal(X.shape) * (noise_scale * std)
    return np.concatenate([X, X + jitter]), np.concatenate([Y, Y])


def kde_curve(values, grid, bandwidth: float) -> np.ndarray:
    """Gaussian kernel density estimate on ``grid`` with a fixed bandwidth."""
    v = np.asarray(values, dtype=float).reshape(-1)
    z = (np.asarray(grid)[:, None] - v[None, :]) / bandwidth
    return np.exp(-0.5 * z ** 2).sum(axis=1) / (v.size * bandwidth * math.sqrt(2 * math.pi))


def scott_bandwidth(values) -> float:
    v = np.asarray(values, dtype=float).reshape(-1)
    return 1.06 * v.std() * v.size ** (-1 / 5)


def total_variation(curve) -> float:
    return float(np.sum(np.abs(np.diff(curve))))
