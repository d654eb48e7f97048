"""Layer-wise relevance propagation through the U-Net generator.

Relevance starts at chosen output neurons (each seeded with its own
activation) and is pushed back layer by layer: every input neuron j of a
linear layer receives the share a_j * w_jk / z_k of each output neuron k's
relevance, where z_k = sum_j a_j * w_jk. Activations pass relevance through
unchanged, and skip concatenations are split by channel index, the skip part
being added to the encoder layer it came from.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import network as N
from . import tensor as T


@dataclass(frozen=True)
class RelevanceTarget:
    mode: str = "mask_region"  # "single_neuron", "mask_region" or "full_output"
    neuron: tuple[int, int, int] | None = None  # (channel, y, x)
    threshold: float = 0.0

    def __post_init__(self):
        if self.mode not in ("single_neuron", "mask_region", "full_output"):
            raise ValueError(f"unknown relevance target mode {self.mode!r}")
        if self.mode == "single_neuron" and (self.neuron is None or len(self.neuron) != 3):
            raise ValueError("single_neuron target needs (channel, y, x)")
        if self.mode == "mask_region" and not -1.0 < self.threshold < 1.0:
            raise ValueError(f"mask threshold must lie in (-1, 1), got {self.threshold}")

    @classmethod
    def single_neuron(cls, c: int, y: int, x: int) -> "RelevanceTarget":
        return cls("single_neuron", (int(c), int(y), int(x)))

    @classmethod
    def mask_region(cls, threshold: float = 0.0) -> "RelevanceTarget":
        return cls("mask_region", threshold=float(threshold))

    @classmethod
    def full_output(cls) -> "RelevanceTarget":
        return cls("full_output")

    @classmethod
    def parse(cls, text: str) -> "RelevanceTarget":
        """Parse ``pixel:c,y,x``, ``mask`` / ``mask:θ`` or ``full``."""
        text = text.strip()
        if text == "full":
            return cls.full_output()
        if text == "mask":
            return cls.mask_region()
        m = re.fullmatch(r"mask:(\S+)", text)
        if m:
            return cls.mask_region(float(m.group(1)))
        m = re.fullmatch(r"pixel:(\d+),(\d+),(\d+)", text)
        if m:
            return cls.single_neuron(*(int(g) for g in m.groups()))
        raise ValueError(f"bad target {text!r}; use pixel:c,y,x, mask[:θ] or full")

    def __str__(self):
        if self.mode == "single_neuron":
            return "pixel:{},{},{}".format(*self.neuron)
        if self.mode == "mask_region":
            return f"mask:{self.threshold}"
        return "full"


@dataclass(frozen=True)
class LrpConfig:
    epsilon: float = 1e-6
    include_bias_in_denominator: bool = True
    target: RelevanceTarget = field(default_factory=RelevanceTarget)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass
class RelevanceMap:
    """Relevance at every layer output (post-activation neurons) plus the
    input pixels, and the relevance each layer handed to its (concatenated)
    input, kept for the conservation bookkeeping."""

    layers: dict[str, np.ndarray]
    inbound: dict[str, np.ndarray]
    order: list[str]  # "input" first, then layers in forward order

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layers[name]


@dataclass
class ConservationReport:
    sums: dict[str, float]
    # (layer, relevance at its output, relevance passed to its input, relative leakage)
    transitions: list[tuple[str, float, float, float]]
    total_leakage: float

    @property
    def max_leakage(self) -> float:
        return max((t[3] for t in self.transitions), default=0.0)

    def to_text(self) -> str:
        lines = ["layer\tsum_out\tsum_in\tleakage"]
        lines += [f"{name}\t{out:.9g}\t{inb:.9g}\t{leak:.3e}" for name, out, inb, leak in self.transitions]
        lines.append(f"input\t{self.sums['input']:.9g}\t-\t-")
        lines.append(f"end-to-end leakage\t{self.total_leakage:.3e}")
        return "\n".join(lines)


def init_output_relevance(output: np.ndarray, target: RelevanceTarget) -> np.ndarray:
    """Seed tensor: targeted output neurons carry their activation, all others 0."""
    seed = np.zeros_like(output)
    if target.mode == "full_output":
        seed[...] = output
    elif target.mode == "mask_region":
        hit = output > target.threshold
        seed[hit] = output[hit]
    else:
        c, y, x = target.neuron
        _, oc, oh, ow = output.shape
        if not (0 <= c < oc and 0 <= y < oh and 0 <= x < ow):
            raise ValueError(f"target neuron {target.neuron} outside output (c, h, w) = {(oc, oh, ow)}")
        seed[:, c, y, x] = output[:, c, y, x]
    return seed


def _stabilize(z: np.ndarray, eps: float) -> np.ndarray:
    # sign(0) counts as +1
    return z + z.dtype.type(eps) * np.where(z >= 0, 1, -1).astype(z.dtype)


def propagate_linear(kind: str, a_prev: np.ndarray, weights: np.ndarray, bias, geom: T.ConvGeometry,
                     r_next: np.ndarray, config: LrpConfig) -> np.ndarray:
    """Redistribute `r_next` onto the layer input in proportion to a_j * w_jk.

    Implemented as s = R / z~, R_prev = a * (adjoint map of s), which is the
    per-connection share rule with the sum over k done by the adjoint.
    """
    forward_op, adjoint = (T.conv2d, T.tconv2d) if kind == "conv" else (T.tconv2d, T.conv2d)
    z = forward_op(a_prev, weights, bias if config.include_bias_in_denominator else None, geom)
    if z.shape != r_next.shape:
        raise T.ShapeError(f"relevance {r_next.shape} does not match layer output {z.shape}")
    denom = _stabilize(z, config.epsilon)
    # an exactly-zero denominator (possible only with epsilon = 0) passes nothing on
    safe = np.where(denom == 0, 1, denom)
    s = np.where(denom == 0, 0, r_next / safe).astype(r_next.dtype, copy=False)
    back = adjoint(s, weights, None, geom)
    if back.shape != a_prev.shape:
        raise T.ShapeError(f"adjoint produced {back.shape}, layer input is {a_prev.shape}")
    return a_prev * back


def propagate_activation(r: np.ndarray) -> np.ndarray:
    """Nonlinearities are relevance-transparent: a neuron keeps its relevance."""
    return r


def propagate_concat(r_concat: np.ndarray, c_a: int) -> tuple[np.ndarray, np.ndarray]:
    return T.split_channels(r_concat, c_a)


def propagate(spec: N.NetworkSpec, params: N.ParamStore, cache: N.ActivationCache, seed: np.ndarray,
              config: LrpConfig) -> RelevanceMap:
    """Walk the generator backwards from an output relevance seed."""
    last = len(spec.layers)
    if seed.shape != cache.post[last].shape:
        raise T.ShapeError(f"seed {seed.shape} does not match output {cache.post[last].shape}")
    pending: dict[int, np.ndarray] = {last: seed}
    layers, inbound = {}, {}
    r_input = None
    # decoder layers come later in the list, so every skip share reaches its
    # encoder layer before that layer is itself propagated
    for layer in reversed(spec.layers):
        i = layer.index
        r = propagate_activation(pending.pop(i))
        layers[layer.name] = r
        r_in = propagate_linear(layer.kind, cache.layer_inputs[i], params.weights[i], params.biases[i],
                                layer.geometry, r, config)
        inbound[layer.name] = r_in
        if layer.skip_source is not None:
            c_a = r_in.shape[1] - spec.layer(layer.skip_source).out_channels
            r_in, r_skip = propagate_concat(r_in, c_a)
            pending[layer.skip_source] = pending.get(layer.skip_source, 0) + r_skip
        if i == 1:
            r_input = r_in
        else:
            pending[i - 1] = pending[i - 1] + r_in if i - 1 in pending else r_in
    layers["input"] = r_input
    order = ["input"] + [l.name for l in spec.layers]
    return RelevanceMap({k: layers[k] for k in order}, inbound, order)


def _leak(out: float, inb: float) -> float:
    if out == 0:
        return 0.0 if inb == 0 else float("inf")
    return abs(inb - out) / abs(out)


def conservation_report(maps: RelevanceMap) -> ConservationReport:
    sums = {name: float(np.sum(maps.layers[name], dtype=np.float64)) for name in maps.order}
    transitions = []
    for name in maps.order[1:]:
        inb = float(np.sum(maps.inbound[name], dtype=np.float64))
        transitions.append((name, sums[name], inb, _leak(sums[name], inb)))
    total = _leak(sums[maps.order[-1]], sums["input"])
    return ConservationReport(sums, transitions, total)


def explain(spec: N.NetworkSpec, params: N.ParamStore, x: np.ndarray,
            config: LrpConfig | None = None) -> tuple[RelevanceMap, ConservationReport]:
    if spec.role != "generator":
        raise ValueError("relevance propagation is defined for the generator only")
    config = config or LrpConfig()
    output, cache = N.forward(spec, params, x)
    seed = init_output_relevance(output, config.target)
    maps = propagate(spec, params, cache, seed, config)
    return maps, conservation_report(maps)


def save_relevance(maps: RelevanceMap, path) -> None:
    """Raw maps in the checkpoint container, header naming each layer."""
    header = {"kind": "relevance",
              "layers": [{"name": n, "shape": list(maps.layers[n].shape)} for n in maps.order]}
    N.write_blocks(path, header, [maps.layers[n] for n in maps.order])


def load_relevance(path) -> dict[str, np.ndarray]:
    header, payload = N.read_blocks(path)
    if header.get("kind") != "relevance":
        raise N.NotACheckpointError(f"{path}: not a relevance file")
    shapes = [tuple(l["shape"]) for l in header["layers"]]
    arrays = N.split_payload(path, payload, shapes)
    return {l["name"]: a for l, a in zip(header["layers"], arrays)}
