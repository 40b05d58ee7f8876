"""
Distance network: a feature extractor f(image, action) followed by a dense
head g, in numpy.

f: conv1 + ReLU -> action broadcast channels -> pool1 -> conv2 + ReLU ->
   pool2 -> conv3 + ReLU -> pool3 -> flatten   (pool3 feature, pairwise hook)
g: dense + ReLU (x len(dense)) -> dense 1, linear output
MMD hook: ReLU(dense_512(flatten(avgpool(conv1 activation))))

All convolutions are 'valid', pools are 2x2 stride 2 with floor cropping,
everything runs in float64. Gradients are exact and analytic.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.config import build_section, dump_flat, group_sections, parse_flat, section_to_flat
from utils.errors import (
    CacheError, ConfigError, DatasetIOError, FormatMismatchError, ShapeError,
    TruncatedFileError, VersionMismatchError,
)

logger = logging.getLogger(__name__)

ACTION_CHANNELS = 2
CHECKPOINT_MAGIC = b"PSNN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    """
    Layer sizes of the distance network.

    The MMD hook reads conv1 through a hook_pool x hook_pool average pool
    before the dense hook_width projection. The default of 4 feeds 3 600
    inputs instead of the 57 600 of the flattened conv1 map; hook_pool=1
    gives the unpooled hook.
    """
    image_size: int = 64
    conv1_channels: int = 16
    conv1_kernel: int = 5
    conv2_channels: int = 32
    conv2_kernel: int = 5
    conv3_channels: int = 32
    conv3_kernel: int = 3
    dense: tuple[int, ...] = (64, 64)
    hook_width: int = 512
    hook_pool: int = 4
    action_bound: float = 0.03

    def __post_init__(self):
        if self.pool3_size < 1 or self.hook_grid < 1:
            raise ShapeError(f"architecture leaves no spatial extent: {self}")
        if min(self.dense, default=1) < 1 or self.hook_width < 1 or not self.action_bound > 0:
            raise ShapeError(f"invalid layer sizes: {self}")

    @property
    def conv1_size(self) -> int:
        return self.image_size - self.conv1_kernel + 1

    @property
    def conv2_size(self) -> int:
        return self.conv1_size // 2 - self.conv2_kernel + 1

    @property
    def conv3_size(self) -> int:
        return self.conv2_size // 2 - self.conv3_kernel + 1

    @property
    def pool3_size(self) -> int:
        return self.conv3_size // 2

    @property
    def hook_grid(self) -> int:
        return self.conv1_size // self.hook_pool

    @property
    def feature_length(self) -> int:
        return self.conv3_channels * self.pool3_size ** 2

    @property
    def hook_input_length(self) -> int:
        return self.conv1_channels * self.hook_grid ** 2

    def param_shapes(self) -> dict:
        shapes = {
            "conv1.w": (self.conv1_channels, 1, self.conv1_kernel, self.conv1_kernel),
            "conv1.b": (self.conv1_channels,),
            "conv2.w": (self.conv2_channels, self.conv1_channels + ACTION_CHANNELS, self.conv2_kernel, self.conv2_kernel),
            "conv2.b": (self.conv2_channels,),
            "conv3.w": (self.conv3_channels, self.conv2_channels, self.conv3_kernel, self.conv3_kernel),
            "conv3.b": (self.conv3_channels,),
            "hook.w": (self.hook_input_length, self.hook_width),
            "hook.b": (self.hook_width,),
        }
        width = self.feature_length
        for i, out in enumerate(self.dense, start=1):
            shapes[f"fc{i}.w"] = (width, out)
            shapes[f"fc{i}.b"] = (out,)
            width = out
        shapes["out.w"] = (width, 1)
        shapes["out.b"] = (1,)
        return shapes

    def num_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def to_flat(self) -> dict:
        return section_to_flat(self, "architecture")

    @classmethod
    def from_flat(cls, flat: dict) -> "Architecture":
        return build_section(cls, group_sections(flat).get("architecture", {}), "architecture")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_params(rng: np.random.Generator, arch: Architecture = Architecture()) -> dict:
    """He fan-in initialization for weights, zero biases."""
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


def zeros_like_params(params: dict) -> dict:
    return {name: np.zeros_like(value) for name, value in params.items()}


def check_params(params: dict, arch: Architecture):
    expected = arch.param_shapes()
    if set(params) != set(expected):
        raise ShapeError(f"parameter names {sorted(params)} do not match architecture {sorted(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def conv2d_forward(x, w, b):
    k = w.shape[2]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))      # B,C,Ho,Wo,k,k
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,O
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def conv2d_backward(dout, x, w, need_dx: bool = True):
    k = w.shape[2]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))  # O,C,k,k
    db = dout.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw, db
    # col2im: one matmul, then k*k shifted adds
    ho, wo = dout.shape[2:]
    cols = np.tensordot(dout, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)  # B,C,k,k,Ho,Wo
    dx = np.zeros(x.shape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + ho, j:j + wo] += cols[:, :, i, j]
    return dx, dw, db


def maxpool2_forward(x):
    # 2x2 stride 2, floor cropping; ties go to the first index in row-major order
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool2_backward(dout, argmax, input_shape):
    b, c, h, w = input_shape
    h2, w2 = h // 2, w // 2
    dblocks = np.zeros((b, c, h2, w2, 4))
    np.put_along_axis(dblocks, argmax[..., None], dout[..., None], axis=-1)
    dx = np.zeros(input_shape)
    dx[:, :, :2 * h2, :2 * w2] = dblocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    return dx


def avgpool_forward(x, size: int):
    if size == 1:
        return x
    b, c, h, w = x.shape
    h2, w2 = h // size, w // size
    return x[:, :, :h2 * size, :w2 * size].reshape(b, c, h2, size, w2, size).mean(axis=(3, 5))


def avgpool_backward(dout, size: int, input_shape):
    if size == 1:
        return dout
    spread = np.repeat(np.repeat(dout, size, axis=2), size, axis=3) / (size * size)
    dx = np.zeros(input_shape)
    dx[:, :, :spread.shape[2], :spread.shape[3]] = spread
    return dx


def dense_forward(x, w, b):
    return x @ w + b


def dense_backward(dout, x, w):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Activations of f for one minibatch (conv1 activation feeds the MMD hook)."""
    inputs: np.ndarray
    z1: np.ndarray
    conv1: np.ndarray
    concat_shape: tuple
    idx1: np.ndarray
    pool1: np.ndarray
    z2: np.ndarray
    idx2: np.ndarray
    pool2: np.ndarray
    z3: np.ndarray
    idx3: np.ndarray
    pool3_shape: tuple


@dataclass
class HeadCache:
    inputs: list
    pre_activations: list


@dataclass
class HookCache:
    pooled: np.ndarray
    pre_activation: np.ndarray
    conv1_shape: tuple


def _as_batch(images, actions, arch: Architecture):
    images = np.asarray(images, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if actions.ndim == 1:
        actions = actions[None]
    if images.shape[1:] != (arch.image_size, arch.image_size):
        raise ShapeError(f"images must be {arch.image_size}x{arch.image_size}, got {images.shape[1:]}")
    if actions.shape != (len(images), 2):
        raise ShapeError(f"actions must have shape ({len(images)}, 2), got {actions.shape}")
    return images, actions


def forward_features(images, actions, params: dict, arch: Architecture = Architecture()):
    """
    Pool3 features f(I, a) for a batch.

    Args:
        images: (B, S, S) or (S, S) depth images
        actions: (B, 2) or (2,) planar displacements in meters

    Returns:
        (features (B, feature_length), ForwardCache)
    """
    images, actions = _as_batch(images, actions, arch)
    x0 = images[:, None]
    z1 = conv2d_forward(x0, params["conv1.w"], params["conv1.b"])
    a1 = relu(z1)

    # Actions enter after conv1, so conv1 only ever sees the image
    scaled = actions / arch.action_bound
    broadcast = np.broadcast_to(scaled[:, :, None, None], (len(images), ACTION_CHANNELS) + a1.shape[2:])
    concat = np.concatenate([a1, broadcast], axis=1)
    p1, idx1 = maxpool2_forward(concat)

    z2 = conv2d_forward(p1, params["conv2.w"], params["conv2.b"])
    p2, idx2 = maxpool2_forward(relu(z2))
    z3 = conv2d_forward(p2, params["conv3.w"], params["conv3.b"])
    p3, idx3 = maxpool2_forward(relu(z3))

    cache = ForwardCache(
        inputs=x0, z1=z1, conv1=a1, concat_shape=concat.shape, idx1=idx1, pool1=p1,
        z2=z2, idx2=idx2, pool2=p2, z3=z3, idx3=idx3, pool3_shape=p3.shape,
    )
    return p3.reshape(len(images), -1), cache


def forward_head(features, params: dict, arch: Architecture = Architecture()):
    """Predicted distance g(features) for a batch: returns (predictions (B,), HeadCache)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[1] != arch.feature_length:
        raise ShapeError(f"features must have length {arch.feature_length}, got {x.shape[1]}")
    inputs, pre = [], []
    for i in range(1, len(arch.dense) + 1):
        inputs.append(x)
        z = dense_forward(x, params[f"fc{i}.w"], params[f"fc{i}.b"])
        pre.append(z)
        x = relu(z)
    inputs.append(x)
    out = dense_forward(x, params["out.w"], params["out.b"])
    return out[:, 0], HeadCache(inputs, pre)


def forward_mmd_hook(cache: ForwardCache, params: dict, arch: Architecture = Architecture()):
    """512-channel projection of the conv1 activation; depends on the image only."""
    if cache is None:
        raise CacheError("forward_mmd_hook needs the ForwardCache of forward_features")
    pooled = avgpool_forward(cache.conv1, arch.hook_pool).reshape(len(cache.conv1), -1)
    z = dense_forward(pooled, params["hook.w"], params["hook.b"])
    return relu(z), HookCache(pooled, z, cache.conv1.shape)


def predict(params: dict, arch: Architecture, images, actions, chunk: int = 256) -> np.ndarray:
    images, actions = _as_batch(images, actions, arch)
    out = np.empty(len(images))
    for start in range(0, len(images), chunk):
        rows = slice(start, start + chunk)
        feats, _ = forward_features(images[rows], actions[rows], params, arch)
        out[rows], _ = forward_head(feats, params, arch)
    return out


def predict_candidates(params: dict, arch: Architecture, image, actions, chunk: int = 250) -> np.ndarray:
    """
    Predicted distances for one image and many candidate actions.

    conv1 and the image part of conv2 are shared across candidates: the
    action channels are constant, so they only add a per-channel offset to
    the conv2 pre-activation. Matches predict() up to rounding.
    """
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (arch.image_size, arch.image_size):
        raise ShapeError(f"image must be {arch.image_size}x{arch.image_size}, got {image.shape}")
    a1 = relu(conv2d_forward(image[None, None], params["conv1.w"], params["conv1.b"]))
    p1_image, _ = maxpool2_forward(a1)
    w2 = params["conv2.w"]
    c1 = arch.conv1_channels
    shared = conv2d_forward(p1_image, w2[:, :c1], params["conv2.b"])   # 1,O,H,W
    action_weights = w2[:, c1:].sum(axis=(2, 3))                        # O,2

    out = np.empty(len(actions))
    for start in range(0, len(actions), chunk):
        rows = slice(start, start + chunk)
        offsets = (actions[rows] / arch.action_bound) @ action_weights.T  # n,O
        z2 = shared + offsets[:, :, None, None]
        p2, _ = maxpool2_forward(relu(z2))
        z3 = conv2d_forward(p2, params["conv3.w"], params["conv3.b"])
        p3, _ = maxpool2_forward(relu(z3))
        out[rows], _ = forward_head(p3.reshape(len(p3), -1), params, arch)
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(params: dict, arch: Architecture, cache: ForwardCache, *,
             d_pred=None, head_cache: Optional[HeadCache] = None,
             d_features=None,
             d_hook=None, hook_cache: Optional[HookCache] = None) -> dict:
    """
    Exact parameter gradients for any subset of the three injection points.

    Args:
        d_pred: upstream gradient wrt the predictions (needs head_cache)
        d_features: upstream gradient wrt the pool3 features
        d_hook: upstream gradient wrt the MMD hook output (needs hook_cache)

    Returns:
        dict of gradients with the same keys and shapes as params
    """
    if cache is None:
        raise CacheError("backward needs the ForwardCache of forward_features")
    grads = zeros_like_params(params)
    batch = cache.inputs.shape[0]
    d_feat = np.zeros((batch, arch.feature_length))

    if d_pred is not None:
        if head_cache is None:
            raise CacheError("d_pred given without a HeadCache from forward_head")
        d = np.asarray(d_pred, dtype=np.float64).reshape(batch, 1)
        n_dense = len(arch.dense)
        d, grads["out.w"], grads["out.b"] = dense_backward(d, head_cache.inputs[n_dense], params["out.w"])
        for i in range(n_dense, 0, -1):
            d = d * (head_cache.pre_activations[i - 1] > 0)
            d, grads[f"fc{i}.w"], grads[f"fc{i}.b"] = dense_backward(d, head_cache.inputs[i - 1], params[f"fc{i}.w"])
        d_feat += d

    if d_features is not None:
        d_features = np.asarray(d_features, dtype=np.float64)
        if d_features.shape != d_feat.shape:
            raise ShapeError(f"d_features must have shape {d_feat.shape}, got {d_features.shape}")
        d_feat += d_features

    d_conv1 = np.zeros(cache.conv1.shape)
    if d_hook is not None:
        if hook_cache is None:
            raise CacheError("d_hook given without a HookCache from forward_mmd_hook")
        dz = np.asarray(d_hook, dtype=np.float64) * (hook_cache.pre_activation > 0)
        d_pooled, grads["hook.w"], grads["hook.b"] = dense_backward(dz, hook_cache.pooled, params["hook.w"])
        grid = arch.hook_grid
        d_pooled = d_pooled.reshape(batch, arch.conv1_channels, grid, grid)
        d_conv1 += avgpool_backward(d_pooled, arch.hook_pool, cache.conv1.shape)

    # conv3 <- pool3
    d_relu3 = maxpool2_backward(d_feat.reshape(cache.pool3_shape), cache.idx3, cache.z3.shape)
    d_pool2, grads["conv3.w"], grads["conv3.b"] = conv2d_backward(d_relu3 * (cache.z3 > 0), cache.pool2, params["conv3.w"])
    # conv2 <- pool2
    d_relu2 = maxpool2_backward(d_pool2, cache.idx2, cache.z2.shape)
    d_pool1, grads["conv2.w"], grads["conv2.b"] = conv2d_backward(d_relu2 * (cache.z2 > 0), cache.pool1, params["conv2.w"])
    # conv1 <- pool1 (action channels carry no parameters)
    d_concat = maxpool2_backward(d_pool1, cache.idx1, cache.concat_shape)
    d_conv1 += d_concat[:, :arch.conv1_channels]
    _, grads["conv1.w"], grads["conv1.b"] = conv2d_backward(d_conv1 * (cache.z1 > 0), cache.inputs, params["conv1.w"], need_dx=False)
    return grads


# ---------------------------------------------------------------------------
# Checkpoints
#   magic "PSNN" | u16 version | u32 architecture length | architecture text
#   u32 tensors | per tensor: u16 name length, name, u8 ndim, u32 dims, <f8 data
# ---------------------------------------------------------------------------

def checkpoint_to_bytes(params: dict, arch: Architecture) -> bytes:
    check_params(params, arch)
    header = dump_flat(arch.to_flat()).encode("utf-8")
    parts = [struct.pack("<4sHI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)), header,
             struct.pack("<I", len(params))]
    for name in arch.param_shapes():
        value = np.ascontiguousarray(params[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes):
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(f"truncated checkpoint: missing {what} at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if len(buf) < 4:
        raise TruncatedFileError("truncated checkpoint: too short for a header")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatMismatchError(f"format mismatch: magic {buf[:4]!r} is not {CHECKPOINT_MAGIC!r}")
    _, version, header_len = struct.unpack("<4sHI", take(10, "header"))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    raw_header = take(header_len, "architecture")
    try:
        arch = Architecture.from_flat(parse_flat(raw_header.decode("utf-8"), "<checkpoint>"))
    except (UnicodeDecodeError, ConfigError, ShapeError) as e:
        raise FormatMismatchError(f"format mismatch: unreadable checkpoint header ({e})") from e
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatMismatchError(f"format mismatch: unreadable tensor name ({e})") from e
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * size, f"tensor {name}"), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise FormatMismatchError(f"format mismatch: {len(buf) - pos} trailing bytes in checkpoint")
    check_params(params, arch)
    return params, arch


def save_checkpoint(params: dict, arch: Architecture, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(checkpoint_to_bytes(params, arch))
    except OSError as e:
        raise DatasetIOError(f"cannot write checkpoint {path}: {e}") from e
    logger.info("Saved checkpoint (%d parameters) to %s", arch.num_params(), path)


def load_checkpoint(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read checkpoint {path}: {e}") from e
    return checkpoint_from_bytes(buf)
