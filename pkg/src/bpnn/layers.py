"""Trainable belief propagation layers and the trajectory readout head.

Two layer kinds modify the damped BP update while keeping its structure:

* ``damping`` replaces the factor-side damping term with a learned per-edge
  operator ``H`` applied to the message difference.  In residual form
  ``H(x) = x + net(x) - net(0)``, so ``H(0) = 0`` holds exactly and BP fixed
  points stay fixed regardless of the weights.  In scalar form ``H(x) = a x``
  the layer reproduces the plain engine update bit for bit (it runs the same
  code path).
* ``message_mlp`` wraps configurable MLPs around messages inside the update
  sums, each in the exponential domain: ``t(h) = ln(net(exp(h)))`` with the
  net output clamped below at ``EXP_FLOOR`` before the logarithm.

The trajectory head turns the per-iteration beliefs into a partition
estimate.  With its readouts initialized to block-sum selectors it returns
exactly the negative Bethe free energy of the final beliefs; trained, it is
an arbitrary function of the belief trajectory.  Averaging the factor
readout over all scope-position permutations makes the estimate invariant
under graph relabelings; switching that off (or double counting) gives the
ablation variants.
"""

from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import propagation as prop
from .autodiff import Parameter, Tape, Tensor
from .graphs import FactorGraph, FactorGraphError
from .propagation import BeliefSet, BpConfig, BpResult, MessageState

# Exponential-domain floor applied before every ln inside message transforms.
EXP_FLOOR = 1e-30


class Mlp:
    """Fully connected ReLU network on row-stacked inputs."""

    def __init__(self, name: str, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        self.name = name
        self.weights = [Parameter(f"{name}.w{i}", w) for i, w in enumerate(weights)]
        self.biases = [Parameter(f"{name}.b{i}", b) for i, b in enumerate(biases)]

    @property
    def dims(self) -> list[int]:
        out = [self.weights[0].value.shape[1]]
        for w in self.weights:
            out.append(w.value.shape[0])
        return out

    @classmethod
    def random(cls, name: str, dims: list[int], rng: np.random.Generator,
               scale: float = 0.1) -> "Mlp":
        weights = []
        biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
            biases.append(rng.normal(0.0, scale, size=(fan_out,)))
        return cls(name, weights, biases)

    @classmethod
    def identity(cls, name: str, dim: int) -> "Mlp":
        """Network computing ``f(x) = x`` exactly: ``relu(x) - relu(-x)``."""
        eye = np.eye(dim)
        w1 = np.concatenate([eye, -eye], axis=0)
        w2 = np.concatenate([eye, -eye], axis=1)
        return cls(name, [w1, w2], [np.zeros(2 * dim), np.zeros(dim)])

    @classmethod
    def block_sum_readout(cls, name: str, in_dim: int, selector: np.ndarray) -> "Mlp":
        """Scalar readout computing ``selector . x`` exactly (same ReLU trick)."""
        eye = np.eye(in_dim)
        w1 = np.concatenate([eye, -eye], axis=0)
        row = np.concatenate([selector, -selector]).reshape(1, 2 * in_dim)
        return cls(name, [w1, row], [np.zeros(2 * in_dim), np.zeros(1)])

    def forward(self, x: Tensor, tape: Tape | None) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wt = ad.transpose(ad.lift(w, tape), (1, 0))
            x = ad.add(ad.matmul(x, wt), ad.lift(b, tape))
            if i < last:
                x = ad.relu(x)
        return x

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_identity(self) -> None:
        """Overwrite with f(x) = x exactly: relu(x) - relu(-x) recovers x.

        Requires hidden width >= 2 * input; surplus hidden units get zero
        weights on both sides so they contribute nothing.
        """
        dims = self.dims
        d = dims[0]
        if len(dims) != 3 or dims[1] < 2 * d or dims[2] != d:
            raise ValueError(f"dims {dims} cannot embed the exact identity")
        eye = np.eye(d)
        w1 = np.zeros((dims[1], d))
        w1[:d] = eye
        w1[d:2 * d] = -eye
        w2 = np.zeros((d, dims[1]))
        w2[:, :d] = eye
        w2[:, d:2 * d] = -eye
        self.weights[0].value = w1
        self.weights[1].value = w2
        self.biases[0].value = np.zeros(dims[1])
        self.biases[1].value = np.zeros(d)

    def set_linear(self, coefficient: float) -> None:
        """Overwrite with the exact map ``f(x) = coefficient * x``."""
        self.set_identity()
        self.weights[1].value = self.weights[1].value * coefficient


def _lne(mlp: Mlp, messages: Tensor, tape: Tape | None) -> Tensor:
    """Exponential-domain transform ``ln(clamp(net(exp(m))))``."""
    return ad.ln(ad.clamp_min(mlp.forward(ad.exp(messages), tape), EXP_FLOOR))


class DampingOperator:
    """Factor-side damping: either the scalar rule or a learned residual map."""

    def __init__(self, mode: str, alpha: float = 0.0, net: Mlp | None = None):
        if mode not in ("scalar", "residual"):
            raise ValueError(f"unknown damping mode {mode!r}")
        if mode == "residual" and net is None:
            raise ValueError("residual mode needs a network")
        self.mode = mode
        self.alpha = float(alpha)
        self.net = net

    @classmethod
    def scalar(cls, alpha: float) -> "DampingOperator":
        if not 0.0 <= alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
        return cls("scalar", alpha=alpha)

    @classmethod
    def residual(cls, net: Mlp) -> "DampingOperator":
        dims = net.dims
        if dims[0] != dims[-1]:
            raise ValueError("residual network must map messages to their own size")
        return cls("residual", net=net)

    @classmethod
    def random_residual(cls, name: str, card: int, rng: np.random.Generator,
                        scale: float = 0.25, base_alpha: float = 0.0,
                        noise_width: int | None = None) -> "DampingOperator":
        """Sample a residual operator near the scalar rule with rate ``base_alpha``.

        The inner network is the exact linear map ``(base_alpha - 1) x`` plus
        a random two-layer perturbation whose output is scaled by ``scale``,
        giving ``H(x) = base_alpha * x + scale * (noise(x) - noise(0))``.
        Keeping the perturbation Lipschitz-small keeps the per-edge update a
        contraction toward the undamped fixed point; an unstructured random
        network would instead make ``H`` close to the identity, freezing
        messages wherever they start.
        """
        width = noise_width if noise_width is not None else 2 * card
        w1 = np.concatenate([np.eye(card), -np.eye(card),
                             rng.normal(0.0, 1.0, size=(width, card))], axis=0)
        b1 = np.concatenate([np.zeros(2 * card), rng.normal(0.0, 1.0, size=width)])
        w2 = np.concatenate([(base_alpha - 1.0) * np.eye(card),
                             -(base_alpha - 1.0) * np.eye(card),
                             scale * rng.normal(0.0, 1.0, size=(card, width))], axis=1)
        b2 = scale * rng.normal(0.0, 1.0, size=card)
        return cls("residual", net=Mlp(name, [w1, w2], [b1, b2]))

    @property
    def card(self) -> int | None:
        return None if self.net is None else self.net.dims[0]

    def apply(self, diffs: Tensor, tape: Tape | None) -> Tensor:
        """``H(diffs)`` rowwise; residual form guarantees ``H(0) = 0``."""
        if self.mode == "scalar":
            return ad.scalar_multiply(diffs, self.alpha)
        if diffs.value.shape[1] != self.net.dims[0]:
            raise FactorGraphError(
                f"operator expects messages of size {self.net.dims[0]}, got {diffs.value.shape[1]}")
        offset = self.net.forward(Tensor(np.zeros((1, self.net.dims[0]))), tape)
        return ad.subtract(ad.add(diffs, self.net.forward(diffs, tape)), offset)

    def parameters(self) -> list[Parameter]:
        return [] if self.net is None else self.net.parameters()


class BpnnLayer:
    """One unrolled message-passing update with learnable pieces."""

    def __init__(self, kind: str, *, operator: DampingOperator | None = None,
                 var_alpha: float = 0.5, alpha: float = 0.5,
                 lne: dict[int, Mlp] | None = None, double_count: bool = False):
        if kind not in ("damping", "message_mlp"):
            raise ValueError(f"unknown layer kind {kind!r}")
        self.kind = kind
        self.double_count = bool(double_count)
        if kind == "damping":
            if operator is None:
                raise ValueError("damping layer needs an operator")
            self.operator = operator
            self.var_alpha = float(var_alpha)
            self.alpha = None
            self.lne = {}
        else:
            self.operator = None
            self.var_alpha = None
            self.alpha = float(alpha)
            self.lne = dict(sorted((lne or {}).items()))
            for key in self.lne:
                if key not in (1, 2, 3, 4):
                    raise ValueError(f"unknown message transform slot {key}")

    def step(self, graph: FactorGraph, state: MessageState,
             tape: Tape | None = None) -> tuple[MessageState, float]:
        if self.kind == "damping":
            op = self.operator
            if op.mode == "scalar":
                rule = prop.scalar_damping(op.alpha)
            else:
                def rule(tilde: Tensor, previous: Tensor) -> Tensor:
                    correction = op.apply(ad.subtract(previous, tilde), tape)
                    return prop._renormalize(ad.add(tilde, correction))
            return prop.bp_iteration(graph, state, var_alpha=self.var_alpha,
                                     fac_damp=rule, double_count=self.double_count)

        fac_chain = [self.lne[i] for i in (1, 2, 4) if i in self.lne]

        def fac_transform(msgs: Tensor) -> Tensor:
            for net in fac_chain:
                msgs = _lne(net, msgs, tape)
            return msgs

        def var_transform(msgs: Tensor) -> Tensor:
            return _lne(self.lne[3], msgs, tape)

        return prop.bp_iteration(
            graph, state, var_alpha=self.alpha, fac_damp=prop.scalar_damping(self.alpha),
            double_count=self.double_count,
            var_msg_transform=var_transform if 3 in self.lne else None,
            fac_msg_transform=fac_transform if fac_chain else None)

    def parameters(self) -> list[Parameter]:
        if self.kind == "damping":
            return self.operator.parameters()
        out: list[Parameter] = []
        for _slot, net in self.lne.items():
            out.extend(net.parameters())
        return out


# ---------------------------------------------------------------------------
# Trajectory readout head
# ---------------------------------------------------------------------------

class TrajectoryHead:
    """Partition estimate from the per-iteration belief trajectory.

    Variable readout: for each variable, the concatenation over iterations of
    ``(degree - 1) * b * ln b`` padded to ``c_max`` entries.  Factor readout:
    for each factor and each scope permutation, the concatenation over
    iterations of the flattened ``(b * ln f, -b * ln b)`` channel pair padded
    to ``c_max ** a_max`` entries each, averaged over the ``arity!``
    permutations when ``invariant`` is set.
    """

    def __init__(self, k: int, c_max: int = 2, a_max: int = 5, *,
                 invariant: bool = True, var_net: Mlp | None = None,
                 fac_net: Mlp | None = None):
        self.k = int(k)
        self.c_max = int(c_max)
        self.a_max = int(a_max)
        self.invariant = bool(invariant)
        self.pad_states = self.c_max ** self.a_max
        var_in = self.k * self.c_max
        fac_in = self.k * 2 * self.pad_states
        self.var_net = var_net if var_net is not None else Mlp.identity("head.var", var_in)
        self.fac_net = fac_net if fac_net is not None else Mlp.identity("head.fac", fac_in)
        if self.var_net.dims[0] != var_in or self.var_net.dims[-1] != 1:
            raise ValueError(f"variable readout must map {var_in} -> 1")
        if self.fac_net.dims[0] != fac_in or self.fac_net.dims[-1] != 1:
            raise ValueError(f"factor readout must map {fac_in} -> 1")

    @classmethod
    def bethe_exact(cls, k: int, c_max: int = 2, a_max: int = 5,
                    invariant: bool = True) -> "TrajectoryHead":
        """Readouts selecting the final-iteration blocks: output is exactly
        the negative Bethe free energy of the final beliefs."""
        var_in = k * c_max
        pad = c_max ** a_max
        fac_in = k * 2 * pad
        var_sel = np.zeros(var_in)
        var_sel[(k - 1) * c_max:] = 1.0
        fac_sel = np.zeros(fac_in)
        fac_sel[(k - 1) * 2 * pad:] = 1.0
        return cls(k, c_max, a_max, invariant=invariant,
                   var_net=Mlp.block_sum_readout("head.var", var_in, var_sel),
                   fac_net=Mlp.block_sum_readout("head.fac", fac_in, fac_sel))

    @classmethod
    def random(cls, k: int, rng: np.random.Generator, c_max: int = 2, a_max: int = 5,
               invariant: bool = True, scale: float = 0.1) -> "TrajectoryHead":
        var_in = k * c_max
        fac_in = k * 2 * (c_max ** a_max)
        return cls(k, c_max, a_max, invariant=invariant,
                   var_net=Mlp.random("head.var", [var_in, 2 * var_in, 1], rng, scale),
                   fac_net=Mlp.random("head.fac", [fac_in, 2 * fac_in, 1], rng, scale))

    def set_bethe_exact(self) -> None:
        template = TrajectoryHead.bethe_exact(self.k, self.c_max, self.a_max)
        for mine, fresh in zip(self.parameters(), template.parameters()):
            if mine.value.shape != fresh.value.shape:
                raise ValueError("head dims cannot embed the exact Bethe readout")
            mine.value = fresh.value

    def estimate(self, graph: FactorGraph, trajectory: list[BeliefSet],
                 tape: Tape | None = None) -> Tensor:
        if len(trajectory) != self.k:
            raise ValueError(f"head expects a trajectory of {self.k} belief sets, got {len(trajectory)}")
        plan = prop.plan_for(graph)
        if int(np.max(graph.cardinalities)) > self.c_max:
            raise FactorGraphError(f"head built for cardinalities <= {self.c_max}")
        total = Tensor(np.zeros(()))

        for card, group in plan.vgroups.items():
            blocks = []
            for beliefs in trajectory:
                log_b = beliefs.var_groups[card]
                weighted = ad.multiply(Tensor(group.excess_degree),
                                       ad.multiply(ad.exp(log_b), log_b))
                if card < self.c_max:
                    zeros = Tensor(np.zeros((group.n_vars, self.c_max - card)))
                    weighted = ad.concat([weighted, zeros], axis=1)
                blocks.append(weighted)
            scores = self.var_net.forward(ad.concat(blocks, axis=1), tape)
            total = ad.add(total, ad.sum_over(scores))

        for group_index, group in enumerate(plan.fgroups):
            r = group.arity
            if r > self.a_max:
                raise FactorGraphError(f"head built for arities <= {self.a_max}, got {r}")
            n_f = len(group.fac_ids)
            states = int(np.prod(group.shape))
            perms = list(itertools.permutations(range(r))) if self.invariant else [tuple(range(r))]
            per_perm_rows = []
            for perm in perms:
                axes = (0,) + tuple(p + 1 for p in perm)
                blocks = []
                for beliefs in trajectory:
                    log_b = beliefs.fac_groups[group_index]
                    b = ad.exp(log_b)
                    energy_channel = ad.multiply(b, Tensor(group.log_tables))
                    entropy_channel = ad.scalar_multiply(ad.multiply(b, log_b), -1.0)
                    for channel in (energy_channel, entropy_channel):
                        flat = ad.reshape(ad.transpose(channel, axes), (n_f, states))
                        if states < self.pad_states:
                            flat = ad.concat(
                                [flat, Tensor(np.zeros((n_f, self.pad_states - states)))], axis=1)
                        blocks.append(flat)
                per_perm_rows.append(ad.concat(blocks, axis=1))
            stacked = ad.concat(per_perm_rows, axis=0)
            scores = self.fac_net.forward(stacked, tape)
            total = ad.add(total, ad.scalar_multiply(ad.sum_over(scores), 1.0 / len(perms)))
        return total

    def parameters(self) -> list[Parameter]:
        return self.var_net.parameters() + self.fac_net.parameters()


# ---------------------------------------------------------------------------
# Whole models
# ---------------------------------------------------------------------------

class BpnnModel:
    """A stack of layers plus a partition readout.

    ``weight_tied`` reuses one layer for every iteration.  ``head`` is either
    a :class:`TrajectoryHead` or the string ``"bethe"``, meaning the plain
    Bethe estimate of the final beliefs.
    """

    def __init__(self, layers: list[BpnnLayer], head: TrajectoryHead | str = "bethe",
                 weight_tied: bool = False, unroll: int | None = None):
        if not layers:
            raise ValueError("model needs at least one layer")
        if weight_tied and len(layers) != 1:
            raise ValueError("weight-tied models hold exactly one layer")
        if isinstance(head, str) and head != "bethe":
            raise ValueError(f"unknown head {head!r}")
        self.layers = layers
        self.head = head
        self.weight_tied = bool(weight_tied)
        if weight_tied:
            self.unroll = int(unroll) if unroll is not None else 5
        else:
            self.unroll = len(layers)
        if isinstance(head, TrajectoryHead) and not weight_tied and head.k != len(layers):
            raise ValueError("head trajectory length must match the layer count")

    def iteration_layers(self, n_iters: int | None = None) -> list[BpnnLayer]:
        if self.weight_tied:
            count = self.unroll if n_iters is None else int(n_iters)
            return [self.layers[0]] * count
        if n_iters is not None and n_iters != len(self.layers):
            raise ValueError("untied models run exactly one pass per layer")
        return list(self.layers)

    def forward(self, graph: FactorGraph, tape: Tape | None = None,
                n_iters: int | None = None) -> tuple[Tensor, list[BeliefSet], MessageState]:
        state = prop.init_messages(graph)
        trajectory: list[BeliefSet] = []
        for layer in self.iteration_layers(n_iters):
            state, _delta = layer.step(graph, state, tape)
            trajectory.append(prop.compute_beliefs(graph, state))
        if isinstance(self.head, TrajectoryHead):
            estimate = self.head.estimate(graph, trajectory, tape)
        else:
            energy, entropy = prop.bethe_terms_traced(graph, trajectory[-1])
            estimate = ad.subtract(entropy, energy)
        return estimate, trajectory, state

    def estimate_ln_z(self, graph: FactorGraph, n_iters: int | None = None) -> float:
        estimate, _traj, _state = self.forward(graph, None, n_iters)
        return float(estimate.value)

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self.layers:
            out.extend(layer.parameters())
        if isinstance(self.head, TrajectoryHead):
            out.extend(self.head.parameters())
        return out


def init_as_bp(model: BpnnModel, alpha: float = 0.5) -> BpnnModel:
    """Reset every learnable piece so the model reproduces damped BP exactly.

    Damping operators become the exact scalar rule at ``alpha``; message
    transforms become exact identities; a trajectory head becomes the exact
    Bethe readout of the final beliefs.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    for layer in model.layers:
        if layer.kind == "damping":
            layer.var_alpha = float(alpha)
            if layer.operator.mode == "scalar":
                layer.operator.alpha = float(alpha)
            else:
                layer.operator.net.set_linear(alpha - 1.0)
        else:
            layer.alpha = float(alpha)
            for net in layer.lne.values():
                net.set_identity()
    if isinstance(model.head, TrajectoryHead):
        model.head.set_bethe_exact()
    return model


def run_to_convergence(graph: FactorGraph, model: BpnnModel,
                       config: BpConfig = BpConfig()) -> BpResult:
    """Iterate a weight-tied single-layer model until messages settle."""
    config.validate()
    if not model.weight_tied and len(model.layers) != 1:
        raise ValueError("convergence runs need a single weight-tied layer")
    layer = model.layers[0]
    state = prop.init_messages(graph)
    trace: list[float] = []
    converged = False
    iterations = 0
    for _ in range(config.max_iters):
        state, delta = layer.step(graph, state, None)
        iterations += 1
        trace.append(delta)
        if delta <= config.tol:
            converged = True
            break
    return BpResult(state, converged, iterations, trace)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_FORMAT = "bpnn-checkpoint"


def _mlp_manifest(net: Mlp) -> dict:
    return {"name": net.name, "dims": net.dims}


def _layer_manifest(layer: BpnnLayer) -> dict:
    if layer.kind == "damping":
        op = layer.operator
        entry: dict = {"kind": "damping", "var_alpha": layer.var_alpha,
                       "double_count": layer.double_count,
                       "operator_mode": op.mode, "operator_alpha": op.alpha}
        if op.net is not None:
            entry["operator_net"] = _mlp_manifest(op.net)
        return entry
    return {"kind": "message_mlp", "alpha": layer.alpha,
            "double_count": layer.double_count,
            "lne": {str(slot): _mlp_manifest(net) for slot, net in layer.lne.items()}}


def _mlp_from_manifest(entry: dict) -> Mlp:
    dims = [int(d) for d in entry["dims"]]
    weights = [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(o) for o in dims[1:]]
    return Mlp(str(entry["name"]), weights, biases)


def save_checkpoint(model: BpnnModel, path) -> None:
    """Write ``path`` (JSON manifest) and ``path + '.bin'`` (parameter blob).

    The blob is every parameter raveled C-order, concatenated in model
    parameter order, as little-endian float64.  Identical models produce
    byte-identical files.
    """
    path = Path(path)
    manifest = {
        "format": _FORMAT,
        "version": 1,
        "weight_tied": model.weight_tied,
        "unroll": model.unroll,
        "layers": [_layer_manifest(layer) for layer in model.layers],
        "parameters": [{"name": p.name, "shape": list(p.value.shape)} for p in model.parameters()],
        "blob": path.name + ".bin",
    }
    if isinstance(model.head, TrajectoryHead):
        manifest["head"] = {"kind": "trajectory", "k": model.head.k,
                            "c_max": model.head.c_max, "a_max": model.head.a_max,
                            "invariant": model.head.invariant,
                            "var_net": _mlp_manifest(model.head.var_net),
                            "fac_net": _mlp_manifest(model.head.fac_net)}
    else:
        manifest["head"] = {"kind": "bethe"}
    blob = np.concatenate([p.value.ravel(order="C") for p in model.parameters()]) \
        if model.parameters() else np.zeros(0)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=1, sort_keys=True)
        handle.write("\n")
    blob.astype("<f8").tofile(str(path) + ".bin")


def load_checkpoint(path) -> BpnnModel:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    if manifest.get("format") != _FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")

    layers: list[BpnnLayer] = []
    for entry in manifest["layers"]:
        if entry["kind"] == "damping":
            if entry["operator_mode"] == "scalar":
                op = DampingOperator.scalar(float(entry["operator_alpha"]))
            else:
                op = DampingOperator.residual(_mlp_from_manifest(entry["operator_net"]))
            layers.append(BpnnLayer("damping", operator=op,
                                    var_alpha=float(entry["var_alpha"]),
                                    double_count=bool(entry["double_count"])))
        else:
            lne = {int(slot): _mlp_from_manifest(net_entry)
                   for slot, net_entry in entry["lne"].items()}
            layers.append(BpnnLayer("message_mlp", alpha=float(entry["alpha"]),
                                    lne=lne, double_count=bool(entry["double_count"])))

    head_entry = manifest["head"]
    if head_entry["kind"] == "trajectory":
        head: TrajectoryHead | str = TrajectoryHead(
            int(head_entry["k"]), int(head_entry["c_max"]), int(head_entry["a_max"]),
            invariant=bool(head_entry["invariant"]),
            var_net=_mlp_from_manifest(head_entry["var_net"]),
            fac_net=_mlp_from_manifest(head_entry["fac_net"]))
    else:
        head = "bethe"

    model = BpnnModel(layers, head, weight_tied=bool(manifest["weight_tied"]),
                      unroll=int(manifest["unroll"]))
    params = model.parameters()
    recorded = manifest["parameters"]
    if len(recorded) != len(params):
        raise ValueError("checkpoint parameter list does not match the rebuilt model")
    blob = np.fromfile(str(path) + ".bin", dtype="<f8")
    sizes = []
    for param, entry in zip(params, recorded):
        shape = tuple(int(s) for s in entry["shape"])
        if param.value.shape != shape:
            raise FactorGraphError(f"checkpoint shape mismatch for {param.name}")
        sizes.append(int(np.prod(shape)) if shape else 1)
    if blob.size != sum(sizes):
        raise FactorGraphError(
            f"checkpoint blob holds {blob.size} values, manifest expects {sum(sizes)}")
    offset = 0
    for param, size in zip(params, sizes):
        param.value = blob[offset:offset + size].reshape(param.value.shape)
        offset += size
    return model
