"""Target classifier, transition network and posterior composition."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, ParameterSet, Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MLP:
    """Fully connected ReLU network producing raw outputs.

    Parameters are stored as ``layer{i}.weight`` (fan_in x fan_out) and
    ``layer{i}.bias`` (1 x fan_out).
    """

    def __init__(self, widths: Sequence[int], seed: Optional[int] = None, params: Optional[ParameterSet] = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        self.widths = widths
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParameterSet()
            for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
                params.add(f"layer{i}.weight", glorot_uniform(rng, fi, fo))
                params.add(f"layer{i}.bias", np.zeros((1, fo)))
        else:
            for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
                if params[f"layer{i}.weight"].shape != (fi, fo):
                    raise DimensionError(f"layer{i}.weight has shape {params[f'layer{i}.weight'].shape}, expected {(fi, fo)}")
        self.params = params

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def _layer(self, i: int, track: bool):
        w = self.params[f"layer{i}.weight"]
        b = self.params[f"layer{i}.bias"]
        if not track:
            w, b = tn.constant(w.data), tn.constant(b.data)
        return w, b

    def raw(self, x, track_params: bool = True) -> Tensor:
        x = tn.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise DimensionError(f"input has shape {x.shape}, model expects (batch, {self.widths[0]})")
        h = x
        for i in range(self.n_layers):
            w, b = self._layer(i, track_params)
            h = tn.add(tn.matmul(h, w), b)
            if i < self.n_layers - 1:
                h = tn.relu(h)
        return h

    def raw_numpy(self, x: np.ndarray) -> np.ndarray:
        """Gradient-free forward pass on plain arrays."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.widths[0]:
            raise DimensionError(f"input has shape {h.shape}, model expects (batch, {self.widths[0]})")
        for i in range(self.n_layers):
            h = h @ self.params[f"layer{i}.weight"].data + self.params[f"layer{i}.bias"].data
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h


class TargetClassifier(MLP):
    def __init__(self, input_dim: int, n_classes: int, hidden: Sequence[int] = (64, 64),
                 seed: Optional[int] = None, params: Optional[ParameterSet] = None):
        super().__init__([input_dim, *hidden, n_classes], seed=seed, params=params)
        self.n_classes = n_classes
        self.input_dim = input_dim
        self.hidden = list(hidden)

    def copy(self) -> "TargetClassifier":
        return TargetClassifier(self.input_dim, self.n_classes, self.hidden, params=self.params.copy())


class TransitionNetwork(MLP):
    """Maps an instance to a C x C row-stochastic matrix via per-row softmax."""

    def __init__(self, input_dim: int, n_classes: int, hidden: Sequence[int] = (64, 64),
                 seed: Optional[int] = None, params: Optional[ParameterSet] = None):
        super().__init__([input_dim, *hidden, n_classes * n_classes], seed=seed, params=params)
        self.n_classes = n_classes
        self.input_dim = input_dim
        self.hidden = list(hidden)

    def copy(self) -> "TransitionNetwork":
        return TransitionNetwork(self.input_dim, self.n_classes, self.hidden, params=self.params.copy())


def target_forward(model: TargetClassifier, x, track_params: bool = True) -> Tensor:
    """Raw logits ``h(x)`` of shape (batch, C)."""
    return model.raw(x, track_params=track_params)


def matrices_from_logits(raw: Tensor, n_classes: int) -> Tensor:
    """Reshape (batch, C*C) raw outputs to (batch, C, C) and softmax each row."""
    mats = tn.reshape(raw, (raw.shape[0], n_classes, n_classes))
    return tn.softmax(mats, axis=-1)


def transition_forward(net: TransitionNetwork, x, track_params: bool = True) -> Tensor:
    """Per-instance transition matrices, entry (i, j) = P(natural j | mixture i, x)."""
    return matrices_from_logits(net.raw(x, track_params=track_params), net.n_classes)


def _as_batch(p: Tensor, T: Tensor) -> tuple[Tensor, Tensor, bool]:
    single = p.ndim == 1
    if single:
        p = tn.reshape(p, (1, p.shape[0]))
    if T.ndim == 2:
        T = tn.reshape(T, (1, *T.shape))
    return p, T, single


def infer_natural_posterior(p_mix, T) -> Tensor:
    """Natural-label posterior ``T^T p_mix``: the p_mix-weighted mixture of T's rows.

    Accepts a single vector with one matrix or a batch (N, C) with (N, C, C).
    This is a forward multiplication; T is never inverted.
    """
    p, T, single = _as_batch(tn.as_tensor(p_mix), tn.as_tensor(T))
    if T.shape[-1] != T.shape[-2] or p.shape[-1] != T.shape[-2]:
        raise DimensionError(f"posterior of size {p.shape[-1]} incompatible with matrix {T.shape[-2:]}")
    out = tn.vecmat(p, T)
    return tn.reshape(out, (out.shape[1],)) if single else out


def row_select(y_onehot, T) -> Tensor:
    """The row of T indexed by a one-hot label (batched like :func:`infer_natural_posterior`)."""
    y = np.asarray(y_onehot.data if isinstance(y_onehot, Tensor) else y_onehot, dtype=np.float64)
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ValueError("row_select needs a one-hot label")
    return infer_natural_posterior(tn.constant(y), T)


def combined_posterior(target: TargetClassifier, trans: Optional[TransitionNetwork], x,
                       track_params: bool = True) -> Tensor:
    """softmax(h(x)), composed with the transition matrix when a network is given."""
    p = tn.softmax(target_forward(target, x, track_params), axis=-1)
    if trans is None:
        return p
    return infer_natural_posterior(p, transition_forward(trans, x, track_params))


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def transition_numpy(net: TransitionNetwork, x: np.ndarray) -> np.ndarray:
    raw = net.raw_numpy(x)
    c = net.n_classes
    return _softmax_np(raw.reshape(raw.shape[0], c, c), axis=-1)


def predict_proba(target: TargetClassifier, trans: Optional[TransitionNetwork], x: np.ndarray) -> np.ndarray:
    """Gradient-free combined posterior for evaluation."""
    p = _softmax_np(target.raw_numpy(x))
    if trans is None:
        return p
    return np.einsum("ni,nij->nj", p, transition_numpy(trans, x))


def predict(target: TargetClassifier, trans: Optional[TransitionNetwork], x: np.ndarray) -> np.ndarray:
    # np.argmax breaks ties toward the lowest index
    return np.argmax(predict_proba(target, trans, x), axis=1)


def anti_diagonal(n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[::-1].copy()


def save_model(model, path, seed: Optional[int] = None, extra: Optional[dict] = None) -> None:
    """Checkpoint with enough metadata to rebuild the network."""
    kind = "transition" if isinstance(model, TransitionNetwork) else "target"
    meta = {"kind": kind, "input_dim": model.input_dim, "n_classes": model.n_classes,
            "hidden": list(model.hidden), **(extra or {})}
    tn.save_parameters(model.params, path, seed=seed, meta=meta)


def load_model(path):
    params, doc = tn.load_parameters(path)
    meta = doc.get("meta", {})
    cls = {"target": TargetClassifier, "transition": TransitionNetwork}.get(meta.get("kind"))
    if cls is None:
        raise ValueError(f"{path}: checkpoint meta.kind must be 'target' or 'transition'")
    return cls(meta["input_dim"], meta["n_classes"], meta["hidden"], params=params)
