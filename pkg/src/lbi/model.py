"""Classifier kernel: parameters, losses, and analytic gradients.

The optimization engine treats the model as two flat float64 blocks, an
encoder block and a head block, because the ignoring-weight hypergradients
are inner products between gradient blocks and the proximity term acts on
the encoder block only.  Two architectures share this interface:

* hidden == 0: logits = E x + b.  The weight matrix E (classes x dim,
  row-major) is the encoder block and the bias b is the head block.  This
  split keeps both blocks nonempty and the loss is convex in each block,
  which the trivial-case tests rely on.
* hidden == h > 0: a one-hidden-layer tanh network.  The encoder block is
  [W1 (h x dim, row-major), b1 (h)] and the head block is
  [U (classes x h, row-major), b2 (classes)].

The loss is softmax cross-entropy computed through logsumexp.  Gradients are
exact analytic expressions (softmax minus one-hot, backpropagated through
tanh where applicable), not autodiff, so the finite-difference checks in the
test suite exercise real formulas.

Batch operations accept plain arrays: features X with one row per example
and integer labels y.  Weighted sums are plain sums, not means, so gradients
are additive across examples; the per-example decomposition identity
(weighted gradient == sum of weight * per-example gradient) is load-bearing
for the hypergradient formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Arch:
    """Architecture key: input dim, hidden width (0 = linear), class count."""

    dim: int
    hidden: int
    classes: int

    def __post_init__(self):
        if self.dim < 1 or self.classes < 2 or self.hidden < 0:
            raise ValueError(
                f"invalid architecture dim={self.dim} hidden={self.hidden} "
                f"classes={self.classes}"
            )

    @property
    def encoder_size(self) -> int:
        if self.hidden == 0:
            return self.classes * self.dim
        return self.hidden * self.dim + self.hidden

    @property
    def head_size(self) -> int:
        if self.hidden == 0:
            return self.classes
        return self.classes * self.hidden + self.classes


@dataclass
class ModelParams:
    """Flat float64 encoder and head blocks for one architecture."""

    arch: Arch
    encoder: np.ndarray
    head: np.ndarray

    def __post_init__(self):
        self.encoder = np.asarray(self.encoder, dtype=np.float64)
        self.head = np.asarray(self.head, dtype=np.float64)
        if self.encoder.shape != (self.arch.encoder_size,):
            raise ValueError(
                f"encoder block has shape {self.encoder.shape}, "
                f"expected ({self.arch.encoder_size},)"
            )
        if self.head.shape != (self.arch.head_size,):
            raise ValueError(
                f"head block has shape {self.head.shape}, "
                f"expected ({self.arch.head_size},)"
            )

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.encoder.copy(), self.head.copy())


@dataclass
class GradBlock:
    """Gradient with the same two-block layout as ModelParams."""

    d_encoder: np.ndarray
    d_head: np.ndarray


def init_params(arch: Arch, rng: np.random.Generator) -> ModelParams:
    """Draw every entry i.i.d. uniform on [-0.1, 0.1].

    Draw order is fixed (encoder block first, then head block) so a seeded
    generator reproduces parameters exactly.
    """
    enc = rng.uniform(-0.1, 0.1, arch.encoder_size)
    head = rng.uniform(-0.1, 0.1, arch.head_size)
    return ModelParams(arch, enc, head)


def _linear_views(params: ModelParams):
    a = params.arch
    E = params.encoder.reshape(a.classes, a.dim)
    b = params.head
    return E, b


def _mlp_views(params: ModelParams):
    a = params.arch
    W1 = params.encoder[: a.hidden * a.dim].reshape(a.hidden, a.dim)
    b1 = params.encoder[a.hidden * a.dim :]
    U = params.head[: a.classes * a.hidden].reshape(a.classes, a.hidden)
    b2 = params.head[a.classes * a.hidden :]
    return W1, b1, U, b2


def _check_features(params: ModelParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.arch.dim:
        raise ValueError(
            f"feature matrix has shape {X.shape}, expected (n, {params.arch.dim})"
        )
    return X


def logits(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Raw class scores, one row per example."""
    X = _check_features(params, X)
    if params.arch.hidden == 0:
        E, b = _linear_views(params)
        return X @ E.T + b
    W1, b1, U, b2 = _mlp_views(params)
    T = np.tanh(X @ W1.T + b1)
    return T @ U.T + b2


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Predicted labels (argmax of logits, ties to the lowest index)."""
    return np.argmax(logits(params, X), axis=1)


def batch_losses(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy, computed through logsumexp for stability."""
    y = np.asarray(y)
    z = logits(params, X)
    if y.shape != (z.shape[0],):
        raise ValueError(f"labels have shape {y.shape}, expected ({z.shape[0]},)")
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return lse - z[np.arange(z.shape[0]), y]


def weighted_loss_arrays(
    params: ModelParams, X: np.ndarray, y: np.ndarray, weights: np.ndarray
) -> float:
    """Weighted sum (not mean) of per-example cross-entropies."""
    losses = batch_losses(params, X, y)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != losses.shape:
        raise ValueError(
            f"weights have shape {weights.shape}, expected {losses.shape}"
        )
    return float(weights @ losses)


def _softmax_residual(params: ModelParams, X: np.ndarray, y: np.ndarray):
    """Returns (G, hidden activations or None) where G = softmax(z) - onehot(y)."""
    if params.arch.hidden == 0:
        z = logits(params, X)
        T = None
    else:
        W1, b1, _, _ = _mlp_views(params)
        T = np.tanh(X @ W1.T + b1)
        _, _, U, b2 = _mlp_views(params)
        z = T @ U.T + b2
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    P = ez / ez.sum(axis=1, keepdims=True)
    G = P
    G[np.arange(z.shape[0]), y] -= 1.0
    return G, T


def grad_arrays(
    params: ModelParams, X: np.ndarray, y: np.ndarray, weights: np.ndarray
) -> GradBlock:
    """Gradient of the weighted loss sum with respect to both blocks."""
    X = _check_features(params, X)
    y = np.asarray(y)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (X.shape[0],) or y.shape != (X.shape[0],):
        raise ValueError("weights and labels must be 1-D with one entry per example")
    G, T = _softmax_residual(params, X, y)
    if params.arch.hidden == 0:
        WG = weights[:, None] * G
        d_enc = (WG.T @ X).ravel()
        d_head = WG.sum(axis=0)
        return GradBlock(d_enc, d_head)
    _, _, U, _ = _mlp_views(params)
    WG = weights[:, None] * G
    dU = WG.T @ T
    db2 = WG.sum(axis=0)
    dA = (G @ U) * (1.0 - T * T)
    WdA = weights[:, None] * dA
    dW1 = WdA.T @ X
    db1 = WdA.sum(axis=0)
    return GradBlock(
        np.concatenate([dW1.ravel(), db1]),
        np.concatenate([dU.ravel(), db2]),
    )


def per_example_grad_arrays(
    params: ModelParams, X: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked unweighted per-example gradients.

    Returns (n x encoder_size, n x head_size).  Row i is the gradient of
    example i's loss alone; any weighted total gradient is a weighted sum of
    these rows, which is exactly the structure the ignoring-weight
    hypergradients contract against.
    """
    X = _check_features(params, X)
    y = np.asarray(y)
    n = X.shape[0]
    G, T = _softmax_residual(params, X, y)
    if params.arch.hidden == 0:
        Genc = (G[:, :, None] * X[:, None, :]).reshape(n, -1)
        return Genc, G.copy()
    _, _, U, _ = _mlp_views(params)
    dA = (G @ U) * (1.0 - T * T)
    Genc = np.concatenate(
        [(dA[:, :, None] * X[:, None, :]).reshape(n, -1), dA], axis=1
    )
    Ghead = np.concatenate([(G[:, :, None] * T[:, None, :]).reshape(n, -1), G], axis=1)
    return Genc, Ghead


def proximity_grad(w_encoder: np.ndarray, v_encoder: np.ndarray, lam: float) -> np.ndarray:
    """Gradient of lam * ||W - V||^2 with respect to W: 2 lam (W - V)."""
    w_encoder = np.asarray(w_encoder, dtype=np.float64)
    v_encoder = np.asarray(v_encoder, dtype=np.float64)
    if w_encoder.shape != v_encoder.shape:
        raise ValueError(
            f"encoder blocks differ in shape: {w_encoder.shape} vs {v_encoder.shape}"
        )
    return 2.0 * lam * (w_encoder - v_encoder)


# Example-level wrappers.  The engine works on cached arrays; these exist for
# direct use with dataset Example objects and for the tests that exercise the
# documented per-example contracts.

def examples_to_arrays(examples) -> tuple[np.ndarray, np.ndarray]:
    """Stack Example features/labels into (X, y) arrays."""
    if len(examples) == 0:
        raise ValueError("need at least one example")
    X = np.stack([np.asarray(ex.features, dtype=np.float64) for ex in examples])
    y = np.array([ex.label for ex in examples], dtype=np.int64)
    return X, y


def loss(params: ModelParams, example) -> float:
    X, y = examples_to_arrays([example])
    return float(batch_losses(params, X, y)[0])


def weighted_batch_loss(params: ModelParams, examples, weights) -> float:
    X, y = examples_to_arrays(examples)
    return weighted_loss_arrays(params, X, y, np.asarray(weights, dtype=np.float64))


def grad(params: ModelParams, examples, weights) -> GradBlock:
    X, y = examples_to_arrays(examples)
    return grad_arrays(params, X, y, np.asarray(weights, dtype=np.float64))


def per_example_grads(params: ModelParams, examples) -> list[GradBlock]:
    X, y = examples_to_arrays(examples)
    Genc, Ghead = per_example_grad_arrays(params, X, y)
    return [GradBlock(Genc[i].copy(), Ghead[i].copy()) for i in range(len(examples))]
