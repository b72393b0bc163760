"""Estimator-style wrappers around the message-passing stack.

These follow the common fit/predict conventions: constructors only store
hyperparameters, ``fit`` validates inputs and learns state, ``predict``
maps factor graphs to ln Z estimates, and ``get_params``/``set_params``
expose the configuration for cloning and grid search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .graphs import FactorGraph
from .layers import BpnnLayer, BpnnModel, DampingOperator, Mlp, TrajectoryHead, init_as_bp
from .propagation import BpConfig, bethe_ln_z, run_bp
from .training import LabeledInstance, TrainConfig, train


def check_factor_graphs(graphs) -> list[FactorGraph]:
    """Validate that the input is a non-empty sequence of factor graphs."""
    if isinstance(graphs, FactorGraph):
        raise TypeError("expected a sequence of factor graphs, got a single graph")
    graphs = list(graphs)
    if not graphs:
        raise ValueError("empty graph collection")
    for index, graph in enumerate(graphs):
        if not isinstance(graph, FactorGraph):
            raise TypeError(f"element {index} is {type(graph).__name__}, not FactorGraph")
    return graphs


def check_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != n:
        raise ValueError(f"got {y.shape[0]} targets for {n} graphs")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    return y


class BetheApproximator(BaseEstimator, RegressorMixin):
    """Plain damped sum-product estimator of ln Z (no learned parameters).

    Parameters mirror the propagation engine: ``alpha`` is the damping
    weight on the previous message, ``tol`` the convergence threshold on
    factor-to-variable updates, ``max_iters`` the iteration cap, and
    ``schedule`` either "parallel" or "sequential".
    """

    def __init__(self, alpha: float = 0.5, tol: float = 1e-5,
                 max_iters: int = 200, schedule: str = "parallel"):
        self.alpha = alpha
        self.tol = tol
        self.max_iters = max_iters
        self.schedule = schedule

    def _config(self) -> BpConfig:
        config = BpConfig(alpha=self.alpha, tol=self.tol,
                          max_iters=self.max_iters, schedule=self.schedule)
        config.validate()
        return config

    def fit(self, X, y=None):
        check_factor_graphs(X)
        self._config()
        self.n_features_in_ = 1
        return self

    def predict(self, X) -> np.ndarray:
        graphs = check_factor_graphs(X)
        config = self._config()
        return np.array([bethe_ln_z(g, run_bp(g, config).messages) for g in graphs])


def build_bpnn(kind: str = "damping", n_layers: int = 2, *,
               card: int = 2, max_arity: int = 5, alpha: float = 0.5,
               weight_tied: bool = False, head: str = "bethe",
               lne_slots=(1, 2, 3, 4), hidden_scale: int = 2,
               seed: int = 0) -> BpnnModel:
    """Assemble a trainable model initialized to exact sum-product behavior.

    ``kind`` picks the layer family: "damping" learns a residual operator on
    message differences, "message" learns per-message transforms inside each
    update.  ``head`` is "bethe" for the closed-form readout or "trajectory"
    for a learned readout over all per-iteration beliefs.
    """
    rng = np.random.default_rng(seed)
    count = 1 if weight_tied else n_layers

    def make_layer(index: int) -> BpnnLayer:
        if kind == "damping":
            net = Mlp.random(f"damp{index}", [card, 2 * card, card], rng)
            return BpnnLayer("damping", operator=DampingOperator.residual(net),
                             var_alpha=alpha)
        if kind == "message":
            nets = {}
            for slot in lne_slots:
                dims = [card, max(hidden_scale, 2) * card, card]
                nets[slot] = Mlp.random(f"lne{slot}_{index}", dims, rng)
            return BpnnLayer("message_mlp", alpha=alpha, lne=nets)
        raise ValueError(f"unknown layer kind {kind!r}")

    layers = [make_layer(i) for i in range(count)]
    if head == "bethe":
        head_obj = "bethe"
    elif head == "trajectory":
        if weight_tied:
            raise ValueError("trajectory head needs a fixed unroll; use untied layers")
        head_obj = TrajectoryHead.bethe_exact(n_layers, c_max=card, a_max=max_arity)
    else:
        raise ValueError(f"unknown head {head!r}")
    model = BpnnModel(layers, head=head_obj, weight_tied=weight_tied,
                      unroll=n_layers if weight_tied else None)
    init_as_bp(model, alpha=alpha)
    return model


class BpnnRegressor(BaseEstimator, RegressorMixin):
    """Trainable message-passing regressor for ln Z.

    ``fit(graphs, ln_z)`` builds a model initialized to exact sum-product
    updates and optimizes it by Adam on mean squared error; ``predict``
    runs the learned unrolled iterations.  All graphs must share the
    variable cardinality given by ``card``.
    """

    def __init__(self, kind: str = "damping", n_layers: int = 2,
                 card: int = 2, max_arity: int = 5, alpha: float = 0.5,
                 head: str = "bethe", weight_tied: bool = False,
                 epochs: int = 100, lr: float = 5e-4, batch_size: int | None = None,
                 clip_norm: float = 10.0, k_range: tuple[int, int] | None = None,
                 seed: int = 0):
        self.kind = kind
        self.n_layers = n_layers
        self.card = card
        self.max_arity = max_arity
        self.alpha = alpha
        self.head = head
        self.weight_tied = weight_tied
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.k_range = k_range
        self.seed = seed

    def fit(self, X, y):
        graphs = check_factor_graphs(X)
        y = check_targets(y, len(graphs))
        for index, graph in enumerate(graphs):
            bad = [c for c in graph.cardinalities if c > self.card]
            if bad:
                raise ValueError(f"graph {index} has cardinality {max(bad)} > card={self.card}")
        self.model_ = build_bpnn(self.kind, self.n_layers, card=self.card,
                                 max_arity=self.max_arity, alpha=self.alpha,
                                 head=self.head, weight_tied=self.weight_tied,
                                 seed=self.seed)
        dataset = [LabeledInstance(g, float(t)) for g, t in zip(graphs, y)]
        config = TrainConfig(epochs=self.epochs, lr=self.lr,
                             batch_size=self.batch_size, clip_norm=self.clip_norm,
                             seed=self.seed, k_range=self.k_range)
        self.history_ = train(self.model_, dataset, config)
        self.n_features_in_ = 1
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise RuntimeError("call fit before predict")
        graphs = check_factor_graphs(X)
        return np.array([self.model_.estimate_ln_z(g) for g in graphs])
