"""PNG codec, the binary checkpoint format and the key=value run config."""

from __future__ import annotations

import dataclasses
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import ContractError
from .network import SCAN_STRATEGIES, ECMamba, ModelConfig
from .training import LossWeights, TrainConfig

# ---------------------------------------------------------------------------
# images


def read_png(path: str | Path) -> np.ndarray:
    """8-bit PNG -> [3, H, W] float64 in [0, 1] (value / 255)."""
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ContractError(f"{path}: not a PNG file")
        if im.mode not in ("L", "LA", "P", "RGB", "RGBA"):
            raise ContractError(f"{path}: unsupported PNG mode {im.mode} (8-bit only)")
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """[3, H, W] floats -> [H, W, 3] uint8: clamp to [0, 1], scale, round half up."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"quantize: expected [3, H, W], got {img.shape}")
    q = np.floor(np.clip(np.nan_to_num(img, nan=0.0), 0.0, 1.0) * 255.0 + 0.5)
    return q.astype(np.uint8).transpose(1, 2, 0)


def write_png(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(quantize(img), mode="RGB").save(path, format="PNG")


def write_gray_png(path: str | Path, values: np.ndarray) -> None:
    """[H, W] nonnegative map scaled so its maximum is white."""
    values = np.nan_to_num(np.asarray(values, dtype=np.float64))
    peak = values.max(initial=0.0)
    scaled = values / peak if peak > 0 else np.zeros_like(values)
    Image.fromarray(quantize(np.stack([scaled] * 3))[..., 0], mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"ECMB"
FORMAT_VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ContractError):
    pass


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype != np.float32:
            cast = arr.astype(np.float32)
            if not np.array_equal(cast, arr, equal_nan=True):
                raise CheckpointError(f"{name}: values are not exactly representable as float32")
            arr = cast
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an ECMB checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch; file is corrupted")
    version, count = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            code, rank = struct.unpack_from("<BI", body, pos)
            pos += 5
            if code != DTYPE_F32:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            nbytes = 4 * math.prod(shape)
            if pos + nbytes > len(body):
                raise CheckpointError(f"{name}: truncated payload")
            out[name] = np.frombuffer(body, dtype="<f4", count=math.prod(shape), offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last tensor")
    return out


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# architecture fields stored as scalar "meta.*" tensors next to the weights
_META_INT = ("base_dim", "state_dim", "guide", "eff_expand", "kernel_size")


def model_tensors(model: ECMamba) -> dict[str, np.ndarray]:
    cfg = model.cfg
    meta = {f"meta.{k}": np.float32(getattr(cfg, k)) for k in _META_INT}
    meta["meta.scan_strategy"] = np.float32(SCAN_STRATEGIES.index(cfg.scan_strategy))
    meta["meta.arm_incidence"] = np.float32(cfg.arm_mode == "incidence")
    return meta | {k: v.astype(np.float32) for k, v in model.state_dict().items()}


def save_model(path: str | Path, model: ECMamba) -> None:
    save_checkpoint(path, model_tensors(model))


def load_model(path: str | Path) -> ECMamba:
    tensors = load_checkpoint(path)
    try:
        meta = {k: int(tensors.pop(f"meta.{k}")) for k in _META_INT}
        strategy = SCAN_STRATEGIES[int(tensors.pop("meta.scan_strategy"))]
        arm_mode = "incidence" if int(tensors.pop("meta.arm_incidence")) else "modulated"
    except (KeyError, IndexError) as exc:
        raise CheckpointError(f"checkpoint lacks model metadata: {exc}") from None
    cfg = ModelConfig(base_dim=meta["base_dim"], state_dim=meta["state_dim"], guide_dim=meta["guide"],
                      eff_expand=meta["eff_expand"], kernel_size=meta["kernel_size"],
                      scan_strategy=strategy, arm_mode=arm_mode)
    model = ECMamba(cfg)
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from None
    return model


# ---------------------------------------------------------------------------
# run configuration


class ConfigError(ContractError):
    pass


@dataclass(frozen=True)
class RunConfig:
    base_dim: int = 8
    N: int = 8
    C_f: int = 8
    eff_expand: int = 2
    crop: int = 64
    batch: int = 4
    iters: int = 5000
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    seed: int = 0
    scan_strategy: str = "fa"
    phi_ssim: float = 0.2
    phi_per: float = 0.01
    lam: float = 0.1
    lam_R: float = 0.1
    lam_L: float = 0.1
    log_every: int = 100

    def __post_init__(self):
        for key in ("base_dim", "N", "C_f", "eff_expand", "batch"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if self.iters < 0:
            raise ConfigError("iters: must be >= 0")
        if self.log_every < 1:
            raise ConfigError("log_every: must be >= 1")
        if self.crop < 2 or self.crop % 2:
            raise ConfigError(f"crop: {self.crop} must be even and >= 2")
        if not self.lr_final > 0:
            raise ConfigError("lr_final: must be > 0")
        if not self.lr_init >= self.lr_final:
            raise ConfigError("lr_init: must be >= lr_final")
        if self.scan_strategy not in SCAN_STRATEGIES:
            raise ConfigError(f"scan_strategy: {self.scan_strategy!r} not in {SCAN_STRATEGIES}")
        for key in ("phi_ssim", "phi_per", "lam", "lam_R", "lam_L"):
            v = getattr(self, key)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{key}: must be finite and >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(base_dim=self.base_dim, state_dim=self.N, guide_dim=self.C_f,
                           eff_expand=self.eff_expand, scan_strategy=self.scan_strategy)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr_init=self.lr_init, lr_final=self.lr_final, batch=self.batch, crop=self.crop,
                           iters=self.iters, seed=self.seed, log_every=self.log_every)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.phi_ssim, self.phi_per, self.lam, self.lam_R, self.lam_L)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


# "lambda" is the natural spelling in config files but a Python keyword
_ALIASES = {"lambda": "lam", "lambda_R": "lam_R", "lambda_L": "lam_L"}


def _coerce(key: str, raw: str, kind: type):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_run_config(text: str) -> RunConfig:
    """``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are errors."""
    kinds = {f.name: {"int": int, "float": float, "str": str}[f.type] for f in dataclasses.fields(RunConfig)}
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        field_name = _ALIASES.get(key, key)
        if field_name not in kinds:
            raise ConfigError(f"{key}: unknown config key")
        if field_name in values:
            raise ConfigError(f"{key}: given more than once")
        values[field_name] = _coerce(key, raw, kinds[field_name])
    return RunConfig(**values)


def load_run_config(path: str | Path) -> RunConfig:
    return parse_run_config(Path(path).read_text())
