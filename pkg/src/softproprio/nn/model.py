"""Image encoder and folding decoder.

The encoder is a VGG-style stack of 3x3 convolution + ReLU + 2x2 max-pool
blocks followed by a fully connected layer to a 512-D latent code.  The
decoder lifts every prototype point to a 512-D feature with a shared MLP,
concatenates the latent code to each point feature, and maps the 1024-D
result back to 3-D with a second shared MLP.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"SRS2RNN1"


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 256
    conv_widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    latent_dim: int = 512
    point_hidden: int = 512
    decoder_hidden: int = 512
    # millimetres per network unit; keeps activations O(1)
    coord_scale: float = 50.0
    dtype: str = "float32"

    def __post_init__(self):
        self.conv_widths = tuple(int(w) for w in self.conv_widths)
        if self.image_size % (2 ** len(self.conv_widths)):
            raise ModelError("image size must be divisible by 2 ** number of conv blocks")

    @property
    def feature_size(self) -> int:
        return self.image_size // 2 ** len(self.conv_widths)


@dataclass
class EncoderDecoder:
    config: ModelConfig
    prototype: np.ndarray  # (N, 3) mm
    params: dict[str, Tensor] = field(default_factory=dict)
    training: bool = False
    last_conv: Tensor | None = field(default=None, repr=False)

    @property
    def n_points(self) -> int:
        return self.prototype.shape[0]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ModelError(f"tensor {k!r}: shape {state[k].shape} does not match {v.shape}")
            v.data = state[k].astype(v.dtype, copy=True)

    # forward ---------------------------------------------------------------
    def encode(self, images: np.ndarray) -> Tensor:
        """``images``: ``(B, H, W)`` array in {0, 1}; returns ``(B, latent)``."""
        x = Tensor(images[..., None].astype(self.config.dtype))
        for i in range(len(self.config.conv_widths)):
            x = T.relu(T.conv2d(x, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"]))
            if i == len(self.config.conv_widths) - 1:
                self.last_conv = x
            x = T.maxpool2x2(x)
        return T.linear(T.flatten(x), self.params["fc.weight"], self.params["fc.bias"])

    def decode(self, latent: Tensor) -> Tensor:
        p = self.params
        proto = Tensor((self.prototype / self.config.coord_scale).astype(self.config.dtype))
        h = T.relu(T.linear(proto, p["fold1.weight"], p["fold1.bias"]))
        h = T.relu(T.linear(h, p["fold2.weight"], p["fold2.bias"]))  # (N, point_hidden)
        # concat([point_feature, latent]) @ W == point_feature @ W_top + latent @ W_bottom;
        # the point half is shared across the batch so it is computed once
        w = p["fold3.weight"]
        k = self.config.point_hidden
        point_part = T.matmul(h, w[:k])  # (N, hidden)
        latent_part = T.matmul(latent, w[k:])  # (B, hidden)
        hidden = T.outer_add_relu(point_part, latent_part, p["fold3.bias"])  # (B, N, hidden)
        out = T.linear(hidden, p["fold4.weight"], p["fold4.bias"])  # (B, N, 3)
        return out * np.asarray(self.config.coord_scale, dtype=self.config.dtype)

    def __call__(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        size = self.config.image_size
        if images.shape[1:] != (size, size):
            raise ModelError(f"model expects {size}x{size} images, got {images.shape[1:]}")
        return self.decode(self.encode(images))

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Predicted clouds in mm, ``(B, N, 3)``, without gradient tracking."""
        out = self(images)
        return out.data.astype(np.float64)


def _he(rng, shape, fan_in, dtype, gain=1.0):
    return (rng.standard_normal(shape) * (gain * np.sqrt(2.0 / fan_in))).astype(dtype)


def build_model(config: ModelConfig, prototype, seed: int = 0) -> EncoderDecoder:
    proto = np.asarray(getattr(prototype, "points", prototype), dtype=np.float64)
    if proto.ndim != 2 or proto.shape[1] != 3 or len(proto) == 0:
        raise ModelError("prototype must be a non-empty (N, 3) point set")
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    params: dict[str, Tensor] = {}

    def add(name, arr):
        params[name] = Tensor(arr, requires_grad=True, name=name)

    cin = 1
    for i, cout in enumerate(config.conv_widths):
        add(f"conv{i}.weight", _he(rng, (3, 3, cin, cout), 9 * cin, dt))
        add(f"conv{i}.bias", np.zeros(cout, dtype=dt))
        cin = cout
    flat = config.feature_size**2 * cin
    add("fc.weight", _he(rng, (flat, config.latent_dim), flat, dt, gain=np.sqrt(0.5)))
    add("fc.bias", np.zeros(config.latent_dim, dtype=dt))
    add("fold1.weight", _he(rng, (3, config.point_hidden), 3, dt))
    add("fold1.bias", np.zeros(config.point_hidden, dtype=dt))
    add("fold2.weight", _he(rng, (config.point_hidden, config.point_hidden), config.point_hidden, dt))
    add("fold2.bias", np.zeros(config.point_hidden, dtype=dt))
    cat = config.point_hidden + config.latent_dim
    add("fold3.weight", _he(rng, (cat, config.decoder_hidden), cat, dt))
    add("fold3.bias", np.zeros(config.decoder_hidden, dtype=dt))
    add("fold4.weight", _he(rng, (config.decoder_hidden, 3), config.decoder_hidden, dt, gain=np.sqrt(0.5)))
    add("fold4.bias", np.zeros(3, dtype=dt))
    return EncoderDecoder(config, proto, params)


# serialisation --------------------------------------------------------------
def save_weights(model: EncoderDecoder, path) -> None:
    """Write magic, header length, JSON header and little-endian float32 blobs."""
    tensors = [("prototype", model.prototype.astype("<f4"))]
    tensors += [(name, t.data.astype("<f4")) for name, t in model.params.items()]
    cfg = asdict(model.config)
    cfg["conv_widths"] = list(cfg["conv_widths"])
    header = {
        "config": cfg,
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": "f32"} for n, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_weights(path) -> EncoderDecoder:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise ModelError("unexpected end of weights blob")
    if raw[:8] != MAGIC:
        if raw[:7] == MAGIC[:7]:
            raise ModelError(f"unsupported weights version {raw[7:8]!r}")
        raise ModelError("not a weights file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise ModelError("unexpected end of weights blob")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"corrupt weights header: {exc}") from exc
    config = ModelConfig(**header["config"])
    arrays: dict[str, np.ndarray] = {}
    pos = 12 + hlen
    for entry in header["tensors"]:
        if entry.get("dtype") != "f32":
            raise ModelError(f"tensor {entry['name']!r}: unsupported dtype {entry.get('dtype')!r}")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = 4 * count
        if len(raw) < pos + nbytes:
            raise ModelError("unexpected end of weights blob")
        arrays[entry["name"]] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f4").reshape(entry["shape"])
        pos += nbytes
    if "prototype" not in arrays:
        raise ModelError("weights file has no prototype tensor")
    model = build_model(config, arrays["prototype"].astype(np.float64), seed=0)
    # restore the exact float32 prototype the model was trained with
    model.prototype = arrays["prototype"].astype(np.float64)
    for name, t in model.params.items():
        if name not in arrays:
            raise ModelError(f"tensor {name!r} missing from weights file")
        if tuple(arrays[name].shape) != t.shape:
            raise ModelError(f"tensor {name!r}: stored shape {tuple(arrays[name].shape)} does not match {t.shape}")
        t.data = arrays[name].astype(config.dtype, copy=True)
    return model
