"""U-Net assembly on top of the tensor engine, plus parameter persistence.

The network follows the classic encoder/decoder layout: `depth` contracting
stages of [conv3x3 -> batchnorm -> relu] x2 followed by 2x2 max pooling, a
double-conv bottleneck, and a mirrored expanding path that upsamples 2x,
concatenates the matching encoder output (skip first), and applies another
double conv. Filter counts start at `base_filters` and double at every
pooling stage. A 1x1 convolution maps to `num_classes` logits and a
per-pixel softmax turns them into class probabilities.

Parameters are held in a flat ordered name -> array map (`ParamStore`).
Iteration order is fixed: enc0..enc{d-1}, bottleneck, dec{d-1}..dec0, head,
with conv1/bn1/conv2/bn2 fields inside each block (see `named_params` and
`all_tensors`); the UNP1 model file writes records in exactly this order,
which is what makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ConfigMismatchError,
    ShapeError,
    TruncatedFileError,
    VersionMismatchError,
)
from .tensor import (
    BatchNormState,
    ConvFilter,
    Tensor,
    batchnorm_backward,
    batchnorm_forward,
    concat_channels,
    concat_channels_backward,
    conv2d_backward,
    conv2d_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    softmax_channels,
    upsample2_backward,
    upsample2_forward,
)

MODEL_MAGIC = b"UNP1"
MODEL_VERSION = 1

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 36
    num_classes: int = 3
    base_filters: int = 32
    depth: int = 4
    weight_decay: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ValueError("in_channels and num_classes must be >= 1")


@dataclass
class ParamStore:
    """Flat named tensor map with a fixed, documented iteration order."""

    config: UNetConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


class _DoubleConv:
    """Two conv3x3 -> batchnorm -> relu stages sharing one name prefix."""

    def __init__(self, name: str, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.conv1 = _he_conv(rng, out_ch, in_ch, 3)
        self.bn1 = BatchNormState.create(out_ch, BN_EPSILON, BN_MOMENTUM)
        self.conv2 = _he_conv(rng, out_ch, out_ch, 3)
        self.bn2 = BatchNormState.create(out_ch, BN_EPSILON, BN_MOMENTUM)

    def forward(self, x: Tensor, mode: str):
        y1 = conv2d_forward(x, self.conv1)
        b1 = batchnorm_forward(y1, self.bn1, mode)
        r1 = relu_forward(b1)
        y2 = conv2d_forward(r1, self.conv2)
        b2 = batchnorm_forward(y2, self.bn2, mode)
        r2 = relu_forward(b2)
        cache = (x, y1, b1, r1, y2, b2)
        return r2, cache

    def backward(self, grad: Tensor, cache, grads: dict[str, np.ndarray]) -> Tensor:
        x, y1, b1, r1, y2, b2 = cache
        g = relu_backward(b2, grad)
        g, dgamma2, dbeta2 = batchnorm_backward(y2, self.bn2, g)
        g, dw2, db2 = conv2d_backward(r1, self.conv2, g)
        g = relu_backward(b1, g)
        g, dgamma1, dbeta1 = batchnorm_backward(y1, self.bn1, g)
        g, dw1, db1 = conv2d_backward(x, self.conv1, g)
        grads[f"{self.name}.conv1.weight"] = dw1
        grads[f"{self.name}.conv1.bias"] = db1
        grads[f"{self.name}.bn1.gamma"] = dgamma1
        grads[f"{self.name}.bn1.beta"] = dbeta1
        grads[f"{self.name}.conv2.weight"] = dw2
        grads[f"{self.name}.conv2.bias"] = db2
        grads[f"{self.name}.bn2.gamma"] = dgamma2
        grads[f"{self.name}.bn2.beta"] = dbeta2
        return g


def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> ConvFilter:
    fan_in = in_ch * k * k
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)).astype(np.float32)
    return ConvFilter(w, np.zeros(out_ch, dtype=np.float32))


class UNet:
    """The segmentation model: configuration plus every layer's parameters."""

    def __init__(self, config: UNetConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.enc: list[_DoubleConv] = []
        ch = config.in_channels
        for s in range(config.depth):
            out = config.base_filters * (2 ** s)
            self.enc.append(_DoubleConv(f"enc{s}", ch, out, rng))
            ch = out
        self.bottleneck = _DoubleConv("bottleneck", ch, config.base_filters * (2 ** config.depth), rng)
        ch = config.base_filters * (2 ** config.depth)
        self.dec: list[_DoubleConv] = []
        for s in reversed(range(config.depth)):
            skip = config.base_filters * (2 ** s)
            self.dec.append(_DoubleConv(f"dec{s}", skip + ch, skip, rng))
            ch = skip
        self.head = _he_conv(rng, config.num_classes, ch, 1)
        self._cache = None

    # -- forward / backward ------------------------------------------------

    def _check_spatial(self, h: int, w: int):
        m = 2 ** self.config.depth
        if h % m or w % m:
            raise ShapeError(
                f"tile size {h}x{w} must be divisible by 2^depth = {m}"
            )

    def forward(self, batch: Tensor, mode: str = "infer") -> Tensor:
        """Full forward pass; train mode keeps the cache needed by backward."""
        n, c, h, w = batch.shape
        if c != self.config.in_channels:
            raise ShapeError(f"batch has {c} channels, model expects {self.config.in_channels}")
        self._check_spatial(h, w)
        keep = mode == "train"
        caches = [] if keep else None
        skips = []
        t = batch
        for block in self.enc:
            t, cache = block.forward(t, mode)
            skips.append(t)
            t, argmax = maxpool2_forward(t)
            if keep:
                caches.append((cache, argmax))
        t, bcache = self.bottleneck.forward(t, mode)
        dec_caches = [] if keep else None
        for block, skip in zip(self.dec, reversed(skips)):
            up = upsample2_forward(t)
            cat = concat_channels(skip, up)
            t, cache = block.forward(cat, mode)
            if keep:
                dec_caches.append((cache, skip.shape[1]))
        logits = conv2d_forward(t, self.head)
        probs = softmax_channels(logits)
        if keep:
            self._cache = (caches, bcache, dec_caches, t)
        return probs

    def backward(self, grad_logits: Tensor) -> dict[str, np.ndarray]:
        """Backpropagate a gradient taken w.r.t. the pre-softmax logits.

        Requires a preceding train-mode forward on the same batch. Returns
        gradients keyed like the parameter store (learnable entries only).
        """
        if self._cache is None:
            raise RuntimeError("backward called without a train-mode forward")
        caches, bcache, dec_caches, head_in = self._cache
        self._cache = None
        grads: dict[str, np.ndarray] = {}
        g, dw, db = conv2d_backward(head_in, self.head, grad_logits)
        grads["head.weight"] = dw
        grads["head.bias"] = db
        skip_grads = []
        for block, (cache, skip_ch) in zip(reversed(self.dec), reversed(dec_caches)):
            g = block.backward(g, cache, grads)
            skip_g, up_g = concat_channels_backward(g, skip_ch)
            skip_grads.append(skip_g)
            g = upsample2_backward(up_g)
        g = self.bottleneck.backward(g, bcache, grads)
        # skip gradients were collected shallowest-first; encoders unwind deepest-first
        for block, (cache, argmax), skip_g in zip(
            reversed(self.enc), reversed(caches), reversed(skip_grads)
        ):
            g = maxpool2_backward(argmax, g)
            g = Tensor(g.data + skip_g.data)
            g = block.backward(g, cache, grads)
        return grads

    # -- parameter access ---------------------------------------------------

    def _blocks(self):
        yield from self.enc
        yield self.bottleneck
        yield from self.dec

    def conv_filters(self) -> list[ConvFilter]:
        filters = []
        for b in self._blocks():
            filters.extend([b.conv1, b.conv2])
        filters.append(self.head)
        return filters

    def conv_weight_names(self) -> list[str]:
        """Parameter names aligned with conv_filters() order."""
        names = []
        for b in self._blocks():
            names.extend([f"{b.name}.conv1.weight", f"{b.name}.conv2.weight"])
        names.append("head.weight")
        return names

    def named_params(self) -> dict[str, np.ndarray]:
        """Learnable parameters in fixed iteration order."""
        out: dict[str, np.ndarray] = {}
        for b in self._blocks():
            out[f"{b.name}.conv1.weight"] = b.conv1.weights
            out[f"{b.name}.conv1.bias"] = b.conv1.bias
            out[f"{b.name}.bn1.gamma"] = b.bn1.gamma
            out[f"{b.name}.bn1.beta"] = b.bn1.beta
            out[f"{b.name}.conv2.weight"] = b.conv2.weights
            out[f"{b.name}.conv2.bias"] = b.conv2.bias
            out[f"{b.name}.bn2.gamma"] = b.bn2.gamma
            out[f"{b.name}.bn2.beta"] = b.bn2.beta
        out["head.weight"] = self.head.weights
        out["head.bias"] = self.head.bias
        return out

    def set_param(self, name: str, value: np.ndarray):
        """Rebind one learnable parameter (used by the optimizer)."""
        block_map = {b.name: b for b in self._blocks()}
        if name == "head.weight":
            self.head.weights = value
        elif name == "head.bias":
            self.head.bias = value
        else:
            prefix, layer, fieldname = name.split(".")
            b = block_map[prefix]
            target = getattr(b, layer)
            attr = {"weight": "weights", "bias": "bias", "gamma": "gamma", "beta": "beta"}[fieldname]
            setattr(target, attr, value)

    def _bn_states(self):
        for b in self._blocks():
            yield f"{b.name}.bn1", b.bn1
            yield f"{b.name}.bn2", b.bn2

    def all_tensors(self) -> dict[str, np.ndarray]:
        """Learnable parameters plus running statistics, in file order."""
        out: dict[str, np.ndarray] = {}
        for b in self._blocks():
            for tag, conv, bn in (("1", b.conv1, b.bn1), ("2", b.conv2, b.bn2)):
                out[f"{b.name}.conv{tag}.weight"] = conv.weights
                out[f"{b.name}.conv{tag}.bias"] = conv.bias
                out[f"{b.name}.bn{tag}.gamma"] = bn.gamma
                out[f"{b.name}.bn{tag}.beta"] = bn.beta
                out[f"{b.name}.bn{tag}.running_mean"] = bn.running_mean
                out[f"{b.name}.bn{tag}.running_var"] = bn.running_var
                out[f"{b.name}.bn{tag}.batches"] = np.array(
                    [bn.batches_tracked], dtype=np.float32
                )
        out["head.weight"] = self.head.weights
        out["head.bias"] = self.head.bias
        return out

    def param_count(self) -> int:
        """Learnable scalars only: conv weights and biases, gamma, beta."""
        return sum(int(v.size) for v in self.named_params().values())


def build(config: UNetConfig) -> UNet:
    return UNet(config)


def param_count(model: UNet) -> int:
    return model.param_count()


def count_params(config: UNetConfig) -> int:
    """Learnable-parameter count straight from the config (no allocation).

    Equals UNet(config).param_count(); the test suite pins the two together.
    """
    def double_conv(cin, cout):
        # two 3x3 convs with bias, each followed by batchnorm gamma/beta
        return (9 * cin * cout + 3 * cout) + (9 * cout * cout + 3 * cout)

    total = 0
    ch = config.in_channels
    for s in range(config.depth):
        out = config.base_filters * 2 ** s
        total += double_conv(ch, out)
        ch = out
    total += double_conv(ch, config.base_filters * 2 ** config.depth)
    ch = config.base_filters * 2 ** config.depth
    for s in reversed(range(config.depth)):
        skip = config.base_filters * 2 ** s
        total += double_conv(skip + ch, skip)
        ch = skip
    return total + ch * config.num_classes + config.num_classes


# -- persistence (UNP1 container) -----------------------------------------


def save_params(model: UNet, path) -> None:
    """Write the model to the UNP1 container; round-trips bit-exactly."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<H", MODEL_VERSION))
        fh.write(
            struct.pack(
                "<4I", cfg.in_channels, cfg.num_classes, cfg.base_filters, cfg.depth
            )
        )
        for name, arr in model.all_tensors().items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"model file ended while reading {what}")
    return buf


def load_params(path) -> ParamStore:
    """Read a UNP1 container back into a ParamStore."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != MODEL_VERSION:
            raise VersionMismatchError(f"model version {version}, supported {MODEL_VERSION}")
        in_ch, classes, base, depth = struct.unpack("<4I", _read_exact(fh, 16, "config"))
        config = UNetConfig(
            in_channels=in_ch, num_classes=classes, base_filters=base, depth=depth
        )
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise TruncatedFileError("model file ended inside a record header")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "record rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "record dims"))
            count = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 4 * count, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return ParamStore(config=config, tensors=tensors)


def from_params(store: ParamStore) -> UNet:
    """Reconstruct a model from a ParamStore, validating every record shape."""
    model = UNet(store.config)
    expected = model.all_tensors()
    if set(expected) != set(store.tensors):
        missing = sorted(set(expected) - set(store.tensors))
        extra = sorted(set(store.tensors) - set(expected))
        raise ConfigMismatchError("records", sorted(expected), f"missing={missing} extra={extra}")
    for name, arr in store.tensors.items():
        if arr.shape != expected[name].shape:
            raise ConfigMismatchError(name, expected[name].shape, arr.shape)
    block_map = {b.name: b for b in model._blocks()}
    for name, arr in store.tensors.items():
        if name == "head.weight":
            model.head.weights = arr.astype(np.float32)
            continue
        if name == "head.bias":
            model.head.bias = arr.astype(np.float32)
            continue
        prefix, layer, fieldname = name.split(".")
        b = block_map[prefix]
        target = getattr(b, layer)
        if fieldname == "batches":
            target.batches_tracked = int(arr[0])
        else:
            attr = {
                "weight": "weights",
                "bias": "bias",
                "gamma": "gamma",
                "beta": "beta",
                "running_mean": "running_mean",
                "running_var": "running_var",
            }[fieldname]
            setattr(target, attr, arr.astype(np.float32))
    return model


def load_model(path, expect: UNetConfig | None = None) -> UNet:
    """Load and rebuild a model; optionally verify it matches a config."""
    store = load_params(path)
    if expect is not None:
        for fieldname in ("in_channels", "num_classes", "base_filters", "depth"):
            want = getattr(expect, fieldname)
            got = getattr(store.config, fieldname)
            if want != got:
                raise ConfigMismatchError(fieldname, want, got)
    return from_params(store)


def min_overlap(depth: int) -> int:
    """Smallest valid overlap-tile margin for a model of the given depth.

    The half receptive field of the double-conv U-Net is 7 * 2^depth - 5
    input pixels; the margin is then rounded up to a multiple of
    2^(depth - 1) so that tile origins stay aligned with the pooling grid.
    """
    half_rf = 7 * (2 ** depth) - 5
    align = 2 ** (depth - 1)
    return ((half_rf + align - 1) // align) * align


__all__ = [
    "UNet",
    "UNetConfig",
    "ParamStore",
    "build",
    "param_count",
    "save_params",
    "load_params",
    "from_params",
    "load_model",
    "min_overlap",
]
