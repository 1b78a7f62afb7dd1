"""GMF, NeuMF and CDAE scorers in numpy with analytic gradients, plus Adam.

Each model keeps its trainable arrays in ``params`` (a dict of float64
arrays). ``forward`` returns logits and a cache, ``backward`` turns the
gradient w.r.t. the logits into parameter gradients.
"""
from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

PROB_CLIP = 1e-8
MODEL_KINDS = ("gmf", "neumf", "cdae")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, float)))


def clip_prob(p):
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


def _scatter_rows(n_rows: int, index: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Sum ``rows`` into an ``n_rows``-row zero matrix at ``index`` (duplicates accumulate)."""
    n = len(index)
    select = sp.csr_matrix((np.ones(n), (index, np.arange(n))), shape=(n_rows, n))
    return np.asarray(select @ rows)


def _fan_in_uniform(rng, n_in, n_out):
    bound = 1.0 / math.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class Model:
    kind: str
    params: dict[str, np.ndarray]

    def __init__(self, n_users: int, n_items: int, seed: int | None = None):
        self.n_users = n_users
        self.n_items = n_items
        self.seed = seed
        self.params = {}

    # subclasses implement these
    def forward(self, users, items, rng=None):
        raise NotImplementedError

    def backward(self, cache, grad_logits) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def logit_matrix(self, users) -> np.ndarray:
        raise NotImplementedError

    def user_representation(self, u: int) -> np.ndarray:
        raise NotImplementedError

    def dims(self) -> dict:
        return {"n_users": self.n_users, "n_items": self.n_items}

    def _check_users(self, users):
        users = np.asarray(users, np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise IndexError(f"user index out of range [0, {self.n_users})")
        return users

    def _check_items(self, items):
        items = np.asarray(items, np.int64)
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError(f"item index out of range [0, {self.n_items})")
        return items

    def predict(self, users, items) -> np.ndarray:
        logits, _ = self.forward(self._check_users(users), self._check_items(items))
        return sigmoid(logits)

    def predict_matrix(self, users) -> np.ndarray:
        """Scores of every item for each user in ``users`` (rows)."""
        return sigmoid(self.logit_matrix(self._check_users(np.atleast_1d(users))))

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


class GMF(Model):
    """Generalized matrix factorization: ``sigmoid(h . (p_u * q_i))``."""

    kind = "gmf"

    def __init__(self, n_users, n_items, factors=32, seed=None):
        super().__init__(n_users, n_items, seed)
        self.factors = factors
        rng = np.random.default_rng(seed)
        self.params = {
            "P": rng.normal(0.0, 0.01, (n_users, factors)),
            "Q": rng.normal(0.0, 0.01, (n_items, factors)),
            "h": rng.uniform(-1.0, 1.0, factors) / math.sqrt(factors),
        }

    def dims(self):
        return {**super().dims(), "factors": self.factors}

    def forward(self, users, items, rng=None):
        P, Q, h = self.params["P"], self.params["Q"], self.params["h"]
        pu, qi = P[users], Q[items]
        z = pu * qi
        return z @ h, (users, items, pu, qi, z)

    def backward(self, cache, g):
        users, items, pu, qi, z = cache
        h = self.params["h"]
        gh = g[:, None] * h
        return {
            "P": _scatter_rows(self.n_users, users, gh * qi),
            "Q": _scatter_rows(self.n_items, items, gh * pu),
            "h": z.T @ g,
        }

    def logit_matrix(self, users):
        P, Q, h = self.params["P"], self.params["Q"], self.params["h"]
        return (P[users] * h) @ Q.T

    def user_representation(self, u):
        return self.params["P"][self._check_users(u)].copy()


class NeuMF(Model):
    """GMF branch and ReLU MLP tower with separate embeddings, fused by one output vector."""

    kind = "neumf"

    def __init__(self, n_users, n_items, factors=32, layers=(64, 32, 16), seed=None):
        super().__init__(n_users, n_items, seed)
        if layers[0] != 2 * factors:
            raise ValueError(f"first MLP layer must equal 2 * factors ({2 * factors}), got {layers[0]}")
        self.factors = factors
        self.layers = tuple(layers)
        rng = np.random.default_rng(seed)
        p = {
            "P_gmf": rng.normal(0.0, 0.01, (n_users, factors)),
            "Q_gmf": rng.normal(0.0, 0.01, (n_items, factors)),
            "P_mlp": rng.normal(0.0, 0.01, (n_users, factors)),
            "Q_mlp": rng.normal(0.0, 0.01, (n_items, factors)),
        }
        for k, (a, b) in enumerate(zip(self.layers[:-1], self.layers[1:])):
            p[f"W{k}"] = _fan_in_uniform(rng, a, b)
            p[f"b{k}"] = np.zeros(b)
        n_fused = factors + self.layers[-1]
        p["h"] = rng.uniform(-1.0, 1.0, n_fused) / math.sqrt(n_fused)
        self.params = p

    @property
    def n_layers(self):
        return len(self.layers) - 1

    def dims(self):
        return {**super().dims(), "factors": self.factors, "layers": list(self.layers)}

    def _tower(self, x):
        acts, pres = [x], []
        for k in range(self.n_layers):
            pre = acts[-1] @ self.params[f"W{k}"] + self.params[f"b{k}"]
            pres.append(pre)
            acts.append(np.maximum(pre, 0.0))
        return acts, pres

    def forward(self, users, items, rng=None):
        p = self.params
        pg, qg = p["P_gmf"][users], p["Q_gmf"][items]
        x = np.concatenate([p["P_mlp"][users], p["Q_mlp"][items]], axis=1)
        acts, pres = self._tower(x)
        fused = np.concatenate([pg * qg, acts[-1]], axis=1)
        return fused @ p["h"], (users, items, pg, qg, acts, pres, fused)

    def backward(self, cache, g):
        users, items, pg, qg, acts, pres, fused = cache
        p, f = self.params, self.factors
        grads = {"h": fused.T @ g}
        gf = g[:, None] * p["h"]
        gz, ga = gf[:, :f], gf[:, f:]
        grads["P_gmf"] = _scatter_rows(self.n_users, users, gz * qg)
        grads["Q_gmf"] = _scatter_rows(self.n_items, items, gz * pg)
        for k in reversed(range(self.n_layers)):
            gpre = ga * (pres[k] > 0)
            grads[f"W{k}"] = acts[k].T @ gpre
            grads[f"b{k}"] = gpre.sum(axis=0)
            ga = gpre @ p[f"W{k}"].T
        grads["P_mlp"] = _scatter_rows(self.n_users, users, ga[:, :f])
        grads["Q_mlp"] = _scatter_rows(self.n_items, items, ga[:, f:])
        return grads

    def logit_matrix(self, users):
        out = np.empty((len(users), self.n_items))
        items = np.arange(self.n_items)
        for r, u in enumerate(users):
            out[r] = self.forward(np.full(self.n_items, u), items)[0]
        return out

    def user_representation(self, u):
        return self.params["P_gmf"][self._check_users(u)].copy()


class CDAE(Model):
    """Collaborative denoising autoencoder over each user's training-positive vector.

    ``user_items`` is the (n_users x n_items) binary input matrix. It is data,
    not a parameter, and is never updated by training.
    """

    kind = "cdae"

    def __init__(self, n_users, n_items, user_items, hidden=200, corruption=0.5, seed=None):
        super().__init__(n_users, n_items, seed)
        if not 0 <= corruption < 1:
            raise ValueError(f"corruption rate must lie in [0, 1), got {corruption}")
        self.hidden = hidden
        self.corruption = corruption
        self.user_items = sp.csr_matrix(user_items, dtype=float)
        if self.user_items.shape != (n_users, n_items):
            raise ValueError(f"user_items must be {n_users}x{n_items}, got {self.user_items.shape}")
        rng = np.random.default_rng(seed)
        self.params = {
            "W1": _fan_in_uniform(rng, n_items, hidden),
            "V": rng.normal(0.0, 0.01, (n_users, hidden)),
            "b1": np.zeros(hidden),
            "W2": _fan_in_uniform(rng, hidden, n_items),
            "b2": np.zeros(n_items),
        }

    def dims(self):
        return {**super().dims(), "hidden": self.hidden, "corruption": self.corruption}

    def _encode(self, uu, rng=None):
        x = self.user_items[uu]
        if rng is not None and self.corruption > 0:
            x = x.copy()
            keep = rng.random(x.nnz) >= self.corruption
            x.data = x.data * keep / (1.0 - self.corruption)
        p = self.params
        pre = np.asarray(x @ p["W1"]) + p["V"][uu] + p["b1"]
        return x, pre, np.maximum(pre, 0.0)

    def forward(self, users, items, rng=None):
        uu, inv = np.unique(users, return_inverse=True)
        x, pre, hid = self._encode(uu, rng)
        hid_ex = hid[inv]
        w2 = self.params["W2"][:, items].T
        logits = np.einsum("ij,ij->i", hid_ex, w2) + self.params["b2"][items]
        return logits, (uu, inv, items, x, pre, hid_ex, w2)

    def backward(self, cache, g):
        uu, inv, items, x, pre, hid_ex, w2 = cache
        dhid = _scatter_rows(len(uu), inv, g[:, None] * w2)
        dpre = dhid * (pre > 0)
        dV = np.zeros_like(self.params["V"])
        dV[uu] = dpre
        return {
            "W1": np.asarray(x.T @ dpre),
            "V": dV,
            "b1": dpre.sum(axis=0),
            "W2": _scatter_rows(self.n_items, items, g[:, None] * hid_ex).T,
            "b2": np.bincount(items, weights=g, minlength=self.n_items),
        }

    def logit_matrix(self, users):
        _, _, hid = self._encode(users)
        return hid @ self.params["W2"] + self.params["b2"]

    def user_representation(self, u):
        u = int(self._check_users(u))
        return self._encode(np.array([u]))[2][0]

    def copy(self):
        # the input matrix is shared read-only data
        other = copy.copy(self)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def init_params(kind: str, dims: dict, seed: int | None = 0, user_items=None) -> Model:
    """Build a freshly initialized model of ``kind`` ("gmf", "neumf" or "cdae").

    ``dims`` needs ``n_users`` and ``n_items`` plus optional ``factors``,
    ``layers``, ``hidden``, ``corruption``. CDAE also needs ``user_items``.
    """
    dims = dict(dims)
    for key, value in dims.items():
        if key != "corruption" and np.any(np.asarray(value) <= 0):
            raise ValueError(f"dimension {key} must be positive, got {value}")
    n_users, n_items = dims.pop("n_users"), dims.pop("n_items")
    if kind == "gmf":
        return GMF(n_users, n_items, factors=dims.get("factors", 32), seed=seed)
    if kind == "neumf":
        f = dims.get("factors", 32)
        return NeuMF(n_users, n_items, factors=f, layers=dims.get("layers", (2 * f, f, f // 2)), seed=seed)
    if kind == "cdae":
        if user_items is None:
            raise ValueError("CDAE needs the user-item input matrix")
        return CDAE(
            n_users,
            n_items,
            user_items,
            hidden=dims.get("hidden", 200),
            corruption=dims.get("corruption", 0.5),
            seed=seed,
        )
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def predict_pair(model: Model, u: int, i: int) -> float:
    """Sigmoid score of one (user, item) pair, clipped into the open unit interval."""
    return float(clip_prob(model.predict([u], [i])[0]))


def predict_all(model: Model, u: int) -> np.ndarray:
    return clip_prob(model.predict_matrix([u])[0])


def user_representation(model: Model, u: int) -> np.ndarray:
    return model.user_representation(u)


def backprop_batch(model: Model, users, items, labels, weights, rng=None):
    """Gradient of ``sum_k w_k * CE(y_k, sigmoid(logit_k))``.

    Returns ``(grads, probs)``. ``rng`` drives CDAE input corruption and is
    ignored by the other models.
    """
    weights = np.asarray(weights, float)
    if len(weights) != len(users):
        raise ValueError(f"got {len(weights)} weights for {len(users)} examples")
    if np.any(weights < 0):
        raise ValueError("example weights must be non-negative")
    logits, cache = model.forward(np.asarray(users, np.int64), np.asarray(items, np.int64), rng)
    probs = sigmoid(logits)
    grads = model.backward(cache, weights * (probs - np.asarray(labels, float)))
    check_finite(grads)
    return grads, probs


def check_finite(arrays: dict[str, np.ndarray]) -> None:
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in parameter block {name!r}")


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, model: Model, grads: dict[str, np.ndarray]):
    """Bias-corrected Adam update, applied in place; returns ``(model, state)``."""
    for name, g in grads.items():
        if g.shape != model.params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {model.params[name].shape}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        model.params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return model, state


_MAGIC = b"ADTCKPT1"


def save_checkpoint(model: Model, path, step: int = 0) -> None:
    """Write a JSON header followed by all parameters as little-endian float32."""
    names = sorted(model.params)
    header = {
        "kind": model.kind,
        "dims": model.dims(),
        "seed": model.seed,
        "step": step,
        "blocks": [[n, list(model.params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    flat = np.concatenate([model.params[n].ravel() for n in names]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(blob)) + blob)
        fh.write(flat.tobytes())


def load_checkpoint(path, user_items=None) -> tuple[Model, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        (size,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(size))
        flat = np.frombuffer(fh.read(), dtype="<f4").astype(float)
    model = init_params(header["kind"], header["dims"], header["seed"], user_items=user_items)
    offset = 0
    for name, shape in header["blocks"]:
        n = int(np.prod(shape))
        model.params[name] = flat[offset : offset + n].reshape(shape).copy()
        offset += n
    return model, header
