"""Tiny fully-convolutional segmentation nets trained from scratch.

Forward, exact reverse-mode gradients, Adam with decoupled weight decay,
and a sparse-mask cross-entropy loss, all in plain numpy.  Same padding
everywhere, so output spatial size always equals input size.  Parameters
live in float32; the functions preserve the dtype of their inputs so a
float64 shadow evaluation (for finite-difference checks) just works.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError
from .imgdata import IGNORE, ImageTensor, LabelMap
from .rng import RngStream, derive_seed


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    out_channels: int
    dilation: int = 1
    relu: bool = True


@dataclass(frozen=True)
class ArchPreset:
    name: str
    num_classes: int
    layers: tuple[LayerSpec, ...]


def micro_a(num_classes: int) -> ArchPreset:
    return ArchPreset("micro-A", num_classes, (
        LayerSpec(3, 16),
        LayerSpec(3, 32),
        LayerSpec(3, 32, dilation=2),
        LayerSpec(1, num_classes, relu=False),
    ))


def micro_b(num_classes: int) -> ArchPreset:
    return ArchPreset("micro-B", num_classes, (
        LayerSpec(5, 12),
        LayerSpec(3, 24),
        LayerSpec(3, 24),
        LayerSpec(1, num_classes, relu=False),
    ))


PRESETS = {"micro-A": micro_a, "micro-B": micro_b}


def get_preset(name: str, num_classes: int) -> ArchPreset:
    if name not in PRESETS:
        raise ValidationError("unknown preset %r (choose from %s)" % (name, sorted(PRESETS)))
    return PRESETS[name](num_classes)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4
    inner_iters: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.inner_iters < 1:
            raise ValidationError("inner_iters must be >= 1")


@dataclass
class ModelState:
    preset: ArchPreset
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    t: int = 0
    seed: int = 0


@dataclass
class Logits:
    data: np.ndarray  # (H, W, C)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]


def layer_shapes(preset: ArchPreset) -> dict[str, tuple[int, ...]]:
    shapes = {}
    cin = 3
    for i, spec in enumerate(preset.layers):
        shapes["conv%d.w" % i] = (spec.kernel, spec.kernel, cin, spec.out_channels)
        shapes["conv%d.b" % i] = (spec.out_channels,)
        cin = spec.out_channels
    return shapes


def parameter_count(preset: ArchPreset) -> int:
    return sum(int(np.prod(s)) for s in layer_shapes(preset).values())


def init_model(preset: ArchPreset, seed: int) -> ModelState:
    """He-uniform kernels, zero biases, zero Adam moments."""
    rng = RngStream(derive_seed(seed, 0x1417))
    params: dict[str, np.ndarray] = {}
    for name, shape in layer_shapes(preset).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            k, _, cin, _ = shape
            bound = np.sqrt(6.0 / (k * k * cin))
            u = rng.uniforms(int(np.prod(shape))).reshape(shape)
            params[name] = ((2.0 * u - 1.0) * bound).astype(np.float32)
    zeros = {n: np.zeros_like(p) for n, p in params.items()}
    return ModelState(preset, params,
                      {n: z.copy() for n, z in zeros.items()},
                      {n: z.copy() for n, z in zeros.items()}, 0, seed)


# ---------------------------------------------------------------------------
# convolution plumbing

_IDX_CACHE: dict[tuple[int, int, int, int], tuple[np.ndarray, int, int, int]] = {}


def _gather_idx(H: int, W: int, k: int, d: int):
    """Flat indices into the zero-padded plane for every (pixel, tap)."""
    key = (H, W, k, d)
    cached = _IDX_CACHE.get(key)
    if cached is None:
        pad = d * (k - 1) // 2
        Hp, Wp = H + 2 * pad, W + 2 * pad
        rr = np.arange(H)[:, None] + np.arange(k)[None, :] * d  # H x k
        cc = np.arange(W)[:, None] + np.arange(k)[None, :] * d  # W x k
        flat = (rr[:, None, :, None] * Wp + cc[None, :, None, :]).reshape(H * W, k * k)
        cached = (flat, pad, Hp, Wp)
        _IDX_CACHE[key] = cached
    return cached


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, d: int):
    H, W, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    if k == 1:
        patches = x.reshape(H * W, cin)
    else:
        idx, pad, Hp, Wp = _gather_idx(H, W, k, d)
        xp = np.zeros((Hp, Wp, cin), dtype=x.dtype)
        xp[pad : pad + H, pad : pad + W] = x
        patches = xp.reshape(Hp * Wp, cin)[idx].reshape(H * W, k * k * cin)
    y = patches @ w.reshape(k * k * cin, cout) + b
    return y.reshape(H, W, cout), patches


def _conv_backward(dy: np.ndarray, patches: np.ndarray, w: np.ndarray, d: int,
                   in_shape: tuple[int, int, int], need_dx: bool):
    H, W, cin = in_shape
    k = w.shape[0]
    cout = w.shape[3]
    dy2 = dy.reshape(H * W, cout)
    dw = (patches.T @ dy2).reshape(k, k, cin, cout)
    db = dy2.sum(axis=0)
    if not need_dx:
        return dw, db, None
    _, pad, Hp, Wp = _gather_idx(H, W, k, d)
    dpatch = (dy2 @ w.reshape(k * k * cin, cout).T).reshape(H, W, k, k, cin)
    dxp = np.zeros((Hp, Wp, cin), dtype=dy.dtype)
    for a in range(k):
        for bb in range(k):
            dxp[a * d : a * d + H, bb * d : bb * d + W] += dpatch[:, :, a, bb, :]
    return dw, db, dxp[pad : pad + H, pad : pad + W]


def _forward_acts(params: dict[str, np.ndarray], preset: ArchPreset, x: np.ndarray):
    """Run all layers; returns (logits array, caches for backward).

    Inputs are shifted by -0.5 so color channels enter roughly centered."""
    caches = []
    x = x - np.asarray(0.5, dtype=x.dtype)
    for i, spec in enumerate(preset.layers):
        y, patches = _conv_forward(x, params["conv%d.w" % i], params["conv%d.b" % i],
                                   spec.dilation)
        caches.append((patches, x.shape, y if spec.relu else None))
        x = np.maximum(y, 0) if spec.relu else y
    return x, caches


def forward(model: ModelState, img: ImageTensor) -> Logits:
    if img.channels != 3:
        raise ValidationError("expected a 3-channel image, got %d" % img.channels)
    out, _ = _forward_acts(model.params, model.preset, img.data)
    return Logits(out)


def predict(logits: Logits) -> LabelMap:
    """Argmax decoding; ties go to the lowest class index."""
    return LabelMap(np.argmax(logits.data, axis=2).astype(np.uint8),
                    logits.num_classes)


# ---------------------------------------------------------------------------
# loss and gradients


def _canonical_mask(mask, labels: LabelMap) -> np.ndarray:
    """Sorted unique flat pixel indices; rejects empty and IGNORE pixels."""
    idx = np.unique(np.asarray(list(mask) if not isinstance(mask, np.ndarray) else mask,
                               dtype=np.int64))
    if idx.size == 0:
        raise ValidationError("no supervision: mask is empty")
    if idx[0] < 0 or idx[-1] >= labels.height * labels.width:
        raise ValidationError("mask index out of bounds")
    if (labels.data.reshape(-1)[idx] == IGNORE).any():
        raise ValidationError("mask covers an IGNORE pixel")
    return idx


def _masked_ce(logits_flat: np.ndarray, classes: np.ndarray):
    """Mean cross-entropy over rows with stable log-softmax; also returns
    the gradient wrt the selected logits."""
    z = logits_flat - logits_flat.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    n = len(classes)
    loss = -logp[np.arange(n), classes].mean()
    dsel = ez / se
    dsel[np.arange(n), classes] -= 1.0
    return float(loss), dsel / n


def sparse_ce_loss(logits: Logits, labels: LabelMap, mask) -> float:
    """Mean cross-entropy over the masked pixels only."""
    idx = _canonical_mask(mask, labels)
    flat = logits.data.reshape(-1, logits.num_classes)[idx]
    classes = labels.data.reshape(-1)[idx].astype(np.int64)
    loss, _ = _masked_ce(flat, classes)
    return loss


def _loss_and_grads(params: dict[str, np.ndarray], preset: ArchPreset,
                    x: np.ndarray, labels: LabelMap, idx: np.ndarray):
    out, caches = _forward_acts(params, preset, x)
    H, W, C = out.shape
    flat = out.reshape(-1, C)
    classes = labels.data.reshape(-1)[idx].astype(np.int64)
    loss, dsel = _masked_ce(flat[idx], classes)
    dout = np.zeros_like(flat)
    dout[idx] = dsel.astype(dout.dtype)
    dout = dout.reshape(H, W, C)

    grads: dict[str, np.ndarray] = {}
    for i in range(len(preset.layers) - 1, -1, -1):
        spec = preset.layers[i]
        patches, in_shape, pre_relu = caches[i]
        if pre_relu is not None:
            dout = dout * (pre_relu > 0)
        dw, db, dx = _conv_backward(dout, patches, params["conv%d.w" % i],
                                    spec.dilation, in_shape, need_dx=i > 0)
        grads["conv%d.w" % i] = dw
        grads["conv%d.b" % i] = db
        dout = dx
    return loss, grads


def backward(model: ModelState, img: ImageTensor, labels: LabelMap, mask) -> dict[str, np.ndarray]:
    """Exact gradient of sparse_ce_loss wrt every parameter."""
    if img.channels != 3:
        raise ValidationError("expected a 3-channel image, got %d" % img.channels)
    idx = _canonical_mask(mask, labels)
    _, grads = _loss_and_grads(model.params, model.preset, img.data, labels, idx)
    return grads


def adam_step(model: ModelState, grads: dict[str, np.ndarray], cfg: TrainConfig):
    """Decoupled weight decay, then a bias-corrected Adam update (in place)."""
    for name, p in model.params.items():
        if name not in grads or grads[name].shape != p.shape:
            raise ValidationError("gradient missing or mis-shaped for %s" % name)
    model.t += 1
    t = model.t
    lr = np.float32(cfg.learning_rate)
    b1, b2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    decay = np.float32(1.0 - cfg.learning_rate * cfg.weight_decay)
    bc1 = np.float32(1.0 / (1.0 - cfg.beta1**t))
    bc2 = np.float32(1.0 / (1.0 - cfg.beta2**t))
    eps = np.float32(cfg.eps)
    for name, p in model.params.items():
        g = grads[name].astype(np.float32)
        m = model.adam_m[name]
        v = model.adam_v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p *= decay
        p -= lr * (m * bc1) / (np.sqrt(v * bc2) + eps)


def train_inner(model: ModelState, img: ImageTensor, labels: LabelMap, mask,
                cfg: TrainConfig) -> float:
    """cfg.inner_iters forward/backward/Adam steps on a fixed mask; returns
    the loss evaluated after the final update."""
    cfg.validate()
    idx = _canonical_mask(mask, labels)
    for _ in range(cfg.inner_iters):
        _, grads = _loss_and_grads(model.params, model.preset, img.data, labels, idx)
        adam_step(model, grads, cfg)
    out, _ = _forward_acts(model.params, model.preset, img.data)
    classes = labels.data.reshape(-1)[idx].astype(np.int64)
    loss, _ = _masked_ce(out.reshape(-1, out.shape[2])[idx], classes)
    return loss


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"MNET"
_VERSION = 1


def _tensor_entries(model: ModelState) -> list[tuple[str, np.ndarray]]:
    entries = []
    for name in sorted(model.params):
        entries.append((name, model.params[name]))
    for name in sorted(model.params):
        entries.append(("adam.m." + name, model.adam_m[name]))
        entries.append(("adam.v." + name, model.adam_v[name]))
    if model.t >= 1 << 24:
        raise ValidationError("step counter too large for checkpoint encoding")
    entries.append(("meta.step", np.array(float(model.t), dtype=np.float32)))
    seed_bytes = np.frombuffer(struct.pack("<Q", model.seed & (1 << 64) - 1),
                               dtype=np.uint8)
    entries.append(("meta.seed", seed_bytes.astype(np.float32)))
    return entries


def save_checkpoint(model: ModelState, path):
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", _VERSION)
    name = model.preset.name.encode()
    blob += struct.pack("<I", len(name)) + name
    entries = _tensor_entries(model)
    blob += struct.pack("<I", len(entries))
    for tname, arr in entries:
        nb = tname.encode()
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(blob)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("%s: truncated checkpoint at byte %d" % (self.path, self.pos))
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expect_preset: str | None = None) -> ModelState:
    rd = _Reader(open(path, "rb").read(), path)
    if rd.take(4) != _MAGIC:
        raise FormatError("%s: bad magic at byte 0" % path)
    version = rd.u32()
    if version != _VERSION:
        raise FormatError("%s: unsupported version %d" % (path, version))
    preset_name = rd.take(rd.u32()).decode()
    if expect_preset is not None and preset_name != expect_preset:
        raise ValidationError(
            "%s: checkpoint preset %s does not match expected %s"
            % (path, preset_name, expect_preset))
    count = rd.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        tname = rd.take(rd.u32()).decode()
        rank = rd.u32()
        shape = tuple(rd.u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(rd.take(4 * n), dtype="<f4").reshape(shape)
        tensors[tname] = arr.copy()

    if "meta.step" not in tensors or "meta.seed" not in tensors:
        raise FormatError("%s: missing metadata tensors" % path)
    seed = struct.unpack("<Q", tensors["meta.seed"].astype(np.uint8).tobytes())[0]
    t = int(tensors["meta.step"])

    last_w = max((n for n in tensors if n.endswith(".w") and n.startswith("conv")),
                 key=lambda n: int(n[4:].split(".")[0]), default=None)
    if last_w is None:
        raise FormatError("%s: no convolution tensors" % path)
    num_classes = tensors[last_w].shape[3]
    preset = get_preset(preset_name, num_classes)

    shapes = layer_shapes(preset)
    params, m, v = {}, {}, {}
    for name, shape in shapes.items():
        for src, dst in ((name, params), ("adam.m." + name, m), ("adam.v." + name, v)):
            if src not in tensors:
                raise FormatError("%s: missing tensor %s" % (path, src))
            if tensors[src].shape != shape:
                raise ValidationError(
                    "%s: tensor %s has shape %s, preset %s needs %s"
                    % (path, src, tensors[src].shape, preset_name, shape))
            dst[name] = tensors[src]
    return ModelState(preset, params, m, v, t, seed)
