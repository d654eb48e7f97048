"""Generator/discriminator construction, forward/backward passes and checkpoints.

The generator is a U-Net: stride-2 convolutions down to a bottleneck, then
stride-2 transposed convolutions back up, each decoder layer after the first
receiving the mirror encoder output concatenated onto its input. The
discriminator is a patch classifier over (image, mask) channel stacks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ConvGeometry, ShapeError

STRIDE2 = ConvGeometry((4, 4), (2, 2), (1, 1))
# the last two discriminator layers keep their resolution
STRIDE1 = ConvGeometry((4, 4), (1, 1), (1, 1))

PROFILES = {
    "canonical-256": {
        "size": 256,
        "encoder": [64, 128, 256, 512, 512, 512, 512, 512],
        "decoder": [512, 512, 512, 512, 256, 128, 64, 1],
    },
    "desk-32": {
        "size": 32,
        "encoder": [64, 128, 256, 512, 512],
        "decoder": [512, 256, 128, 64, 1],
    },
}
DISCRIMINATOR_CHANNELS = [64, 128, 256, 512, 1]
DISCRIMINATOR_STRIDES = [2, 2, 2, 1, 1]


@dataclass(frozen=True)
class LayerSpec:
    index: int
    name: str
    kind: str  # "conv" or "tconv"
    out_channels: int
    activation: str
    skip_source: int | None = None
    stride: int = 2

    @property
    def geometry(self) -> ConvGeometry:
        return STRIDE2 if self.stride == 2 else STRIDE1


@dataclass(frozen=True)
class NetworkSpec:
    role: str  # "generator" or "discriminator"
    profile_name: str
    in_channels: int
    input_size: tuple[int, int]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        n_down = sum(1 for l in self.layers if l.kind == "conv" and l.stride == 2)
        h, w = self.input_size
        if h % 2 ** n_down or w % 2 ** n_down:
            raise ShapeError(f"input size {self.input_size} not divisible by 2^{n_down}")

    def layer(self, index: int) -> LayerSpec:
        return self.layers[index - 1]

    def input_channels(self, layer: LayerSpec) -> int:
        """Channel count entering `layer`, including any skip concatenation."""
        c = self.in_channels if layer.index == 1 else self.layer(layer.index - 1).out_channels
        if layer.skip_source is not None:
            c += self.layer(layer.skip_source).out_channels
        return c

    def weight_shape(self, layer: LayerSpec) -> tuple[int, int, int, int]:
        kh, kw = layer.geometry.kernel
        c_in = self.input_channels(layer)
        if layer.kind == "conv":
            return (layer.out_channels, c_in, kh, kw)
        return (c_in, layer.out_channels, kh, kw)

    def shape_chain(self) -> list[tuple[int, int, int]]:
        """(channels, h, w) of every layer output, in layer order."""
        h, w = self.input_size
        dims = []
        for layer in self.layers:
            if layer.kind == "conv":
                h, w = layer.geometry.conv_out(h, w)
            else:
                h, w = layer.geometry.tconv_out(h, w)
            dims.append((layer.out_channels, h, w))
        return dims

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "profile": self.profile_name,
            "in_channels": self.in_channels,
            "input_size": list(self.input_size),
            "layers": [
                {"index": l.index, "name": l.name, "kind": l.kind, "out_channels": l.out_channels,
                 "activation": l.activation, "skip_source": l.skip_source, "stride": l.stride}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = tuple(LayerSpec(**l) for l in d["layers"])
        return cls(d["role"], d["profile"], d["in_channels"], tuple(d["input_size"]), layers)


def _profile(name: str) -> dict:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def build_generator(profile: str = "desk-32") -> NetworkSpec:
    p = _profile(profile)
    enc, dec = p["encoder"], p["decoder"]
    depth = len(enc)
    layers = []
    for i, c in enumerate(enc, start=1):
        layers.append(LayerSpec(i, f"Conv{i}", "conv", c, "leaky_relu"))
    for k, c in enumerate(dec, start=1):
        # DeConv_k takes Conv_(depth+1-k); DeConv1 sees only the bottleneck
        skip = depth + 1 - k if k > 1 else None
        act = "tanh" if k == len(dec) else "relu"
        layers.append(LayerSpec(depth + k, f"DeConv{k}", "tconv", c, act, skip))
    return NetworkSpec("generator", profile, 3, (p["size"], p["size"]), tuple(layers))


def build_discriminator(profile: str = "desk-32") -> NetworkSpec:
    p = _profile(profile)
    layers = []
    for i, (c, s) in enumerate(zip(DISCRIMINATOR_CHANNELS, DISCRIMINATOR_STRIDES), start=1):
        act = "sigmoid" if i == len(DISCRIMINATOR_CHANNELS) else "leaky_relu"
        layers.append(LayerSpec(i, f"Conv{i}", "conv", c, act, stride=s))
    # image (3) + mask (1)
    return NetworkSpec("discriminator", profile, 4, (p["size"], p["size"]), tuple(layers))


@dataclass
class ParamStore:
    role: str
    weights: dict[int, np.ndarray]
    biases: dict[int, np.ndarray]

    def items(self):
        """(name, array) pairs in a fixed order, used by the optimizer."""
        for i in sorted(self.weights):
            yield f"{self.role}.L{i}.weight", self.weights[i]
            yield f"{self.role}.L{i}.bias", self.biases[i]

    def copy(self) -> "ParamStore":
        return ParamStore(self.role, {k: v.copy() for k, v in self.weights.items()},
                          {k: v.copy() for k, v in self.biases.items()})


_ROLE_STREAM = {"generator": 0, "discriminator": 1}


def init_params(spec: NetworkSpec, seed: int, std: float = 0.02) -> ParamStore:
    """Weights ~ N(0, std) from numpy's PCG64 generator, biases zero.

    The stream is keyed by (seed, role) so generator and discriminator draws
    are independent but both reproducible.
    """
    rng = np.random.Generator(np.random.PCG64([seed, _ROLE_STREAM[spec.role]]))
    weights, biases = {}, {}
    for layer in spec.layers:
        shape = spec.weight_shape(layer)
        weights[layer.index] = (rng.standard_normal(shape, dtype=np.float32) * np.float32(std))
        biases[layer.index] = np.zeros(layer.out_channels, dtype=np.float32)
    return ParamStore(spec.role, weights, biases)


def zero_params(spec: NetworkSpec) -> ParamStore:
    store = init_params(spec, 0)
    for i in store.weights:
        store.weights[i][...] = 0
    return store


@dataclass
class ActivationCache:
    """Everything one forward pass recorded: the network input, each layer's
    (possibly skip-concatenated) input, pre-activation and post-activation."""

    input: np.ndarray
    layer_inputs: dict[int, np.ndarray] = field(default_factory=dict)
    pre: dict[int, np.ndarray] = field(default_factory=dict)
    post: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.post)


def _layer_input(spec: NetworkSpec, layer: LayerSpec, x: np.ndarray, post: dict) -> np.ndarray:
    a = x if layer.index == 1 else post[layer.index - 1]
    if layer.skip_source is not None:
        skip = post[layer.skip_source]
        if skip.shape[2:] != a.shape[2:]:
            raise ShapeError(f"{layer.name}: skip from layer {layer.skip_source} has spatial dims "
                             f"{skip.shape[2:]}, decoder path has {a.shape[2:]}")
        a = T.concat_channels(a, skip)
    return a


def forward(spec: NetworkSpec, params: ParamStore, x: np.ndarray) -> tuple[np.ndarray, ActivationCache]:
    T.check_tensor(x, "network input")
    if x.shape[1:] != (spec.in_channels, *spec.input_size):
        raise ShapeError(f"{spec.role} expects input (n, {spec.in_channels}, {spec.input_size[0]}, "
                         f"{spec.input_size[1]}), got {x.shape}")
    cache = ActivationCache(x)
    for layer in spec.layers:
        a = _layer_input(spec, layer, x, cache.post)
        w, b = params.weights[layer.index], params.biases[layer.index]
        if w.shape != spec.weight_shape(layer):
            raise ShapeError(f"{layer.name}: weights {w.shape}, expected {spec.weight_shape(layer)}")
        op = T.conv2d if layer.kind == "conv" else T.tconv2d
        z = op(a, w, b, layer.geometry)
        cache.layer_inputs[layer.index] = a
        cache.pre[layer.index] = z
        cache.post[layer.index] = T.activation(z, layer.activation)
    return cache.post[len(spec.layers)], cache


def backward(spec: NetworkSpec, params: ParamStore, cache: ActivationCache, grad_output: np.ndarray,
             need_input_grad: bool = False, need_param_grads: bool = True
             ) -> tuple[ParamStore | None, np.ndarray | None]:
    """Gradients of a scalar loss w.r.t. every parameter (and optionally the input),
    given d(loss)/d(network output)."""
    n_layers = len(spec.layers)
    grad_post: dict[int, np.ndarray] = {n_layers: grad_output}
    gw, gb = {}, {}
    grad_input = None
    for layer in reversed(spec.layers):
        i = layer.index
        g = T.activation_backward(cache.pre[i], layer.activation, grad_post.pop(i), post=cache.post[i])
        wants_input = i > 1 or need_input_grad
        a, w = cache.layer_inputs[i], params.weights[i]
        if need_param_grads:
            step = T.conv2d_backward if layer.kind == "conv" else T.tconv2d_backward
            grads = step(a, w, layer.geometry, g, need_input_grad=wants_input)
            gw[i], gb[i] = grads.grad_weights, grads.grad_bias
            gx = grads.grad_input
        elif wants_input:
            # the input gradient of either map is the opposite map with the same weights
            gx = (T.tconv2d if layer.kind == "conv" else T.conv2d)(g, w, None, layer.geometry)
            if gx.shape != a.shape:
                raise ShapeError(f"{layer.name}: input gradient {gx.shape} != input {a.shape}")
        if not wants_input:
            continue
        if layer.skip_source is not None:
            gx, g_skip = T.split_channels(gx, gx.shape[1] - spec.layer(layer.skip_source).out_channels)
            _accumulate(grad_post, layer.skip_source, g_skip)
        if i == 1:
            grad_input = gx
        else:
            _accumulate(grad_post, i - 1, gx)
    grads_store = ParamStore(params.role, gw, gb) if need_param_grads else None
    return grads_store, grad_input


def _accumulate(store: dict, key: int, value: np.ndarray) -> None:
    if key in store:
        store[key] = store[key] + value
    else:
        store[key] = value


# --- checkpoint container -------------------------------------------------

MAGIC = b"SEGXPLN1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    """File truncated or carrying trailing bytes."""


class CheckpointShapeError(CheckpointError):
    pass


def write_blocks(path, header: dict, arrays: list[np.ndarray]) -> None:
    """Write the binary container: magic, u32 version, u32 header length,
    UTF-8 JSON header, then each array as little-endian float32."""
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_blocks(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    version, head_len = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    if len(raw) < 16 + head_len:
        raise IntegrityError(f"{path}: truncated inside header")
    try:
        header = json.loads(raw[16:16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable header ({exc})") from None
    return header, raw[16 + head_len:]


def split_payload(path, payload: bytes, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    sizes = [int(np.prod(s)) for s in shapes]
    expected = 4 * sum(sizes)
    if len(payload) != expected:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, header promises {expected}")
    flat = np.frombuffer(payload, dtype="<f4")
    out, offset = [], 0
    for shape, size in zip(shapes, sizes):
        out.append(flat[offset:offset + size].astype(np.float32).reshape(shape))
        offset += size
    return out


def save_checkpoint(spec: NetworkSpec, params: ParamStore, path) -> None:
    header = spec.to_dict()
    header["shapes"] = [[list(params.weights[l.index].shape), [l.out_channels]] for l in spec.layers]
    arrays = []
    for l in spec.layers:
        arrays += [params.weights[l.index], params.biases[l.index]]
    write_blocks(path, header, arrays)


def load_checkpoint(path) -> tuple[NetworkSpec, ParamStore]:
    header, payload = read_blocks(path)
    try:
        spec = NetworkSpec.from_dict(header)
        stated = header["shapes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"{path}: malformed header ({exc})") from None
    shapes = []
    for layer, (wshape, bshape) in zip(spec.layers, stated):
        if tuple(wshape) != spec.weight_shape(layer) or tuple(bshape) != (layer.out_channels,):
            raise CheckpointShapeError(f"{path}: {layer.name} stores {wshape}, architecture needs "
                                       f"{list(spec.weight_shape(layer))}")
        shapes += [tuple(wshape), tuple(bshape)]
    if len(stated) != len(spec.layers):
        raise CheckpointShapeError(f"{path}: {len(stated)} shape entries for {len(spec.layers)} layers")
    arrays = split_payload(path, payload, shapes)
    weights = {l.index: arrays[2 * k] for k, l in enumerate(spec.layers)}
    biases = {l.index: arrays[2 * k + 1] for k, l in enumerate(spec.layers)}
    return spec, ParamStore(spec.role, weights, biases)
