"""Learnable components: the bounded denoiser, the weighting encoder and ISTA-Net phases.

Each container holds a ``params`` dict of float64 arrays. Forward functions take
an optional ``params`` override whose values may be tape Variables, which is how
training and attacks obtain gradients.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

Params = dict  # name -> ndarray | Variable


def _he(rng, shape, gain=1.0):
    fan_in = int(np.prod(shape[1:]))
    return gain * math.sqrt(2.0 / fan_in) * rng.standard_normal(shape)


def _batched(x):
    v = ad.value_of(x)
    if v.ndim == 3:
        return ad.reshape(x, (1,) + v.shape), True
    if v.ndim == 4:
        return x, False
    raise ValidationError(f"expected (2, H, W) or (B, 2, H, W), got {v.shape}")


def _unbatch(x, squeeze):
    return ad.reshape(x, ad.value_of(x).shape[1:]) if squeeze else x


@dataclass(frozen=True)
class DenoiserSpec:
    channels: tuple = (2, 16, 16, 2)
    kernel: int = 3
    bound: float = 1.5


@dataclass
class DenoiserNet:
    """Small CNN ``D(x) = B tanh(conv_L(relu(...conv_1(x))) + s * x)``.

    ``s`` is a learned per-channel gain feeding the input straight into the
    pre-activation, so a near-identity map is easy to reach; the tanh keeps
    every output entry inside ``[-B, B]``.
    """

    spec: DenoiserSpec
    params: dict

    @property
    def bound(self) -> float:
        return self.spec.bound

    @property
    def n_layers(self) -> int:
        return len(self.spec.channels) - 1

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(self.spec, {k: v.copy() for k, v in self.params.items()})


def init_denoiser(spec: DenoiserSpec, seed: int) -> DenoiserNet:
    rng = np.random.default_rng([seed, 101])
    ch, k = spec.channels, spec.kernel
    if ch[0] != 2 or ch[-1] != 2:
        raise ValidationError("denoiser must map 2 channels to 2 channels")
    params = {}
    n = len(ch) - 1
    for i in range(n):
        gain = 0.1 if i == n - 1 else 1.0
        params[f"conv{i}.w"] = _he(rng, (ch[i + 1], ch[i], k, k), gain)
        params[f"conv{i}.b"] = np.zeros(ch[i + 1])
    params["skip"] = np.full((2, 1, 1), 1.0 / spec.bound if spec.bound > 0 else 0.0)
    return DenoiserNet(spec, params)


def denoise(net: DenoiserNet, x, params: Params | None = None):
    """Apply the denoiser to ``(2, H, W)`` or ``(B, 2, H, W)`` input."""
    p = net.params if params is None else params
    h, squeeze = _batched(x)
    if ad.value_of(h).shape[1] != 2:
        raise ValidationError(f"denoiser expects 2 input channels, got shape {ad.value_of(x).shape}")
    inp = h
    for i in range(net.n_layers):
        h = ad.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
        if i < net.n_layers - 1:
            h = ad.relu(h)
    out = ad.scale(ad.tanh(ad.add(h, ad.mul(p["skip"], inp))), net.bound)
    return _unbatch(out, squeeze)


def bound_M(net: DenoiserNet, shape) -> float:
    """Architectural bound on ``2 max_x ||D(x)||_2`` for images of spatial ``shape``."""
    h, w = shape[-2:]
    return 2.0 * net.bound * math.sqrt(2 * h * w)


@dataclass(frozen=True)
class EncoderSpec:
    width: int = 4
    blocks: int = 5
    kernel: int = 3


@dataclass
class WeightEncoder:
    """Five conv / channel-norm / relu stages, global average pool, linear head, sigmoid."""

    spec: EncoderSpec
    params: dict

    def copy(self) -> "WeightEncoder":
        return WeightEncoder(self.spec, {k: v.copy() for k, v in self.params.items()})


def init_encoder(spec: EncoderSpec, seed: int, zero_head=True) -> WeightEncoder:
    rng = np.random.default_rng([seed, 202])
    params = {}
    cin = 2
    for i in range(spec.blocks):
        params[f"block{i}.w"] = _he(rng, (spec.width, cin, spec.kernel, spec.kernel))
        params[f"block{i}.b"] = np.zeros(spec.width)
        params[f"block{i}.gamma"] = np.ones(spec.width)
        params[f"block{i}.beta"] = np.zeros(spec.width)
        cin = spec.width
    params["head.w"] = np.zeros((spec.width, 1)) if zero_head else rng.standard_normal((spec.width, 1)) / math.sqrt(spec.width)
    params["head.b"] = np.zeros(1)
    return WeightEncoder(spec, params)


def encode_weight(enc: WeightEncoder, x, params: Params | None = None):
    """Scalar weight in (0, 1) per image; returns shape ``(B,)`` or a 0-d value."""
    p = enc.params if params is None else params
    h, squeeze = _batched(x)
    for i in range(enc.spec.blocks):
        h = ad.conv2d(h, p[f"block{i}.w"], p[f"block{i}.b"])
        h = ad.relu(ad.channel_norm(h, p[f"block{i}.gamma"], p[f"block{i}.beta"]))
    pooled = ad.mean(h, axis=(2, 3))
    w = ad.sigmoid(ad.add(ad.matmul(pooled, p["head.w"]), p["head.b"]))
    b = ad.value_of(w).shape[0]
    return ad.reshape(w, ()) if squeeze else ad.reshape(w, (b,))


@dataclass(frozen=True)
class IstaSpec:
    phases: int = 8
    width: int = 8
    kernel: int = 3


@dataclass
class IstaNet:
    """Per-phase ISTA-Net parameters: step size, threshold and the two transform pairs.

    ``F`` is conv(2->C), relu, conv(C->C); ``G`` (the learned inverse) is
    conv(C->C), relu, conv(C->2); none of them have biases.
    """

    spec: IstaSpec
    params: dict

    def copy(self) -> "IstaNet":
        return IstaNet(self.spec, {k: v.copy() for k, v in self.params.items()})


def _identity_pair(c_in, width, k):
    """Kernels for conv(c_in->width), relu, conv(width->c_in) that compose to the identity.

    Uses relu(u) - relu(-u) = u on the first ``2 * c_in`` channels.
    """
    a = np.zeros((width, c_in, k, k))
    b = np.zeros((c_in, width, k, k))
    m = k // 2
    for c in range(c_in):
        a[2 * c, c, m, m] = 1.0
        a[2 * c + 1, c, m, m] = -1.0
        b[c, 2 * c, m, m] = 1.0
        b[c, 2 * c + 1, m, m] = -1.0
    return a, b


def init_istanet(spec: IstaSpec, seed: int, step=0.5, threshold=0.01, jitter=0.01) -> IstaNet:
    """Initialise every phase near the identity transform pair (needs ``width >= 4``)."""
    if spec.width < 4:
        raise ValidationError("ISTA-Net width must be at least 4")
    rng = np.random.default_rng([seed, 303])
    k, c = spec.kernel, spec.width
    a, b = _identity_pair(2, c, k)
    eye_c = np.zeros((c, c, k, k))
    eye_c[np.arange(c), np.arange(c), k // 2, k // 2] = 1.0
    params = {}
    for n in range(spec.phases):
        params[f"phase{n}.step"] = np.array(step)
        params[f"phase{n}.theta"] = np.array(threshold)
        params[f"phase{n}.F1"] = a + jitter * rng.standard_normal(a.shape)
        params[f"phase{n}.F2"] = eye_c + jitter * rng.standard_normal(eye_c.shape)
        params[f"phase{n}.G1"] = eye_c + jitter * rng.standard_normal(eye_c.shape)
        params[f"phase{n}.G2"] = b + jitter * rng.standard_normal(b.shape)
    return IstaNet(spec, params)


def ista_transform(net: IstaNet, n: int, r, params: Params | None = None):
    p = net.params if params is None else params
    return ad.conv2d(ad.relu(ad.conv2d(r, p[f"phase{n}.F1"])), p[f"phase{n}.F2"])


def ista_inverse(net: IstaNet, n: int, u, params: Params | None = None):
    p = net.params if params is None else params
    return ad.conv2d(ad.relu(ad.conv2d(u, p[f"phase{n}.G1"])), p[f"phase{n}.G2"])


def ista_prox(net: IstaNet, n: int, r, params: Params | None = None):
    """``G(Soft(F(r), theta))`` for phase ``n`` on ``(2, H, W)`` or ``(B, 2, H, W)`` input."""
    p = net.params if params is None else params
    h, squeeze = _batched(r)
    u = ad.soft_threshold(ista_transform(net, n, h, p), p[f"phase{n}.theta"])
    return _unbatch(ista_inverse(net, n, u, p), squeeze)


# -- checkpoints -------------------------------------------------------------

MAGIC = b"SMUGCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    denoiser: DenoiserNet | None = None
    encoder: WeightEncoder | None = None
    istanet: IstaNet | None = None
    meta: dict = field(default_factory=dict)  # config snapshot, seeds, mask spec


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Versioned binary container: magic, version, JSON header length, header, raw float64 payload."""
    tensors, chunks, offset = [], [], 0
    specs = {}
    for group, model in (("denoiser", ckpt.denoiser), ("encoder", ckpt.encoder), ("istanet", ckpt.istanet)):
        if model is None:
            continue
        specs[group] = asdict(model.spec)
        for name in sorted(model.params):
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            tensors.append({"name": f"{group}/{name}", "shape": list(arr.shape), "dtype": "<f8", "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    header = _canonical_json({"format_version": FORMAT_VERSION, "tensors": tensors, "specs": specs, "meta": ckpt.meta})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValidationError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    payload = memoryview(data)[20 + hlen:]
    groups: dict = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"]).astype(np.float64)
        group, name = t["name"].split("/", 1)
        groups.setdefault(group, {})[name] = arr
    specs = header["specs"]
    ckpt = Checkpoint(meta=header["meta"])
    if "denoiser" in specs:
        s = specs["denoiser"]
        ckpt.denoiser = DenoiserNet(DenoiserSpec(tuple(s["channels"]), s["kernel"], s["bound"]), groups["denoiser"])
    if "encoder" in specs:
        ckpt.encoder = WeightEncoder(EncoderSpec(**specs["encoder"]), groups["encoder"])
    if "istanet" in specs:
        ckpt.istanet = IstaNet(IstaSpec(**specs["istanet"]), groups["istanet"])
    return ckpt
