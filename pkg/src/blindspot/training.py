"""Self-supervised training: patch pipeline, Adam, and checkpointing.

Each step draws fresh patches and fresh noise; the corrupted patch is both
the network input and the likelihood target, so no clean pixel ever
touches the loss. The checkpoint captures parameters, optimizer moments,
step counter, and RNG state, which makes interrupted runs resume
bit-exactly.
"""

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as kv
from . import tensor as T
from .errors import (CheckpointChecksumError, CheckpointMagicError,
                     CheckpointTruncatedError, CheckpointVersionError,
                     ConfigError, InputError, NumericalAbort)
from .network import NetworkConfig, build_network, forward
from .noise import corrupt, nll_loss, parse_noise_spec

MAGIC = b"BSDN"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    learning_rate: float = 3e-4
    batch_size: int = 4
    patch_size: int = 64
    noise: object = None            # NoiseModel
    seed: int = 0
    flip_horizontal: bool = True
    flip_vertical: bool = True
    checkpoint_interval: int = 0    # 0 = final checkpoint only

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.checkpoint_interval < 0:
            raise ConfigError(f"checkpoint_interval must be >= 0, "
                              f"got {self.checkpoint_interval}")
        if self.noise is None:
            raise ConfigError("noise model is required")

    def to_kv(self):
        return {"steps": self.steps, "learning_rate": repr(self.learning_rate),
                "batch_size": self.batch_size, "patch_size": self.patch_size,
                "noise": self.noise.spec, "seed": self.seed,
                "flip_horizontal": self.flip_horizontal,
                "flip_vertical": self.flip_vertical,
                "checkpoint_interval": self.checkpoint_interval}

    @classmethod
    def from_kv(cls, mapping):
        return cls(steps=kv.as_int(mapping, "steps"),
                   learning_rate=kv.as_float(mapping, "learning_rate", 3e-4),
                   batch_size=kv.as_int(mapping, "batch_size", 4),
                   patch_size=kv.as_int(mapping, "patch_size", 64),
                   noise=parse_noise_spec(mapping["noise"]) if "noise" in mapping
                   else _missing("noise"),
                   seed=kv.as_int(mapping, "seed", 0),
                   flip_horizontal=kv.as_bool(mapping, "flip_horizontal", True),
                   flip_vertical=kv.as_bool(mapping, "flip_vertical", True),
                   checkpoint_interval=kv.as_int(mapping, "checkpoint_interval", 0))

    KEYS = ("steps", "learning_rate", "batch_size", "patch_size", "noise", "seed",
            "flip_horizontal", "flip_vertical", "checkpoint_interval")


def _missing(key):
    raise ConfigError(f"missing required key {key!r}")


def network_config_to_kv(cfg):
    return {"depth": cfg.depth, "kernel_size": cfg.kernel_size,
            "forward_channels": cfg.forward_channels,
            "branch_channels": cfg.branch_channels,
            "head_widths": ",".join(str(w) for w in cfg.head_widths),
            "channels": cfg.channels, "residual_period": cfg.residual_period}


def network_config_from_kv(mapping):
    return NetworkConfig(depth=kv.as_int(mapping, "depth"),
                         kernel_size=kv.as_int(mapping, "kernel_size", 3),
                         forward_channels=kv.as_int(mapping, "forward_channels", 64),
                         branch_channels=kv.as_int(mapping, "branch_channels", 32),
                         head_widths=kv.as_int_list(mapping, "head_widths", (96, 96)),
                         channels=kv.as_int(mapping, "channels", 1),
                         residual_period=kv.as_int(mapping, "residual_period", 2))


NETWORK_KEYS = ("depth", "kernel_size", "forward_channels", "branch_channels",
                "head_widths", "channels", "residual_period")


# ---------------------------------------------------------------- patches

def extract_patches(dataset, patch_size, count, rng, flip_horizontal=False,
                    flip_vertical=False):
    """Crop `count` random patches from (name, (C,H,W)) pairs.

    Positions are uniform over images and valid top-left corners; flips are
    drawn per patch when enabled. Deterministic for a given Generator state.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    arrays = []
    for name, arr in dataset:
        if arr.shape[-2] < patch_size or arr.shape[-1] < patch_size:
            raise InputError(f"image {name!r} is {arr.shape[-2]}x{arr.shape[-1]}, "
                             f"smaller than patch size {patch_size}")
        arrays.append(np.asarray(arr, dtype=np.float32))

    channels = arrays[0].shape[0]
    batch = np.empty((count, channels, patch_size, patch_size), dtype=np.float32)
    for i in range(count):
        src = arrays[int(rng.integers(len(arrays)))]
        y0 = int(rng.integers(src.shape[-2] - patch_size + 1))
        x0 = int(rng.integers(src.shape[-1] - patch_size + 1))
        patch = src[:, y0:y0 + patch_size, x0:x0 + patch_size]
        if flip_horizontal and rng.integers(2):
            patch = patch[:, :, ::-1]
        if flip_vertical and rng.integers(2):
            patch = patch[:, ::-1, :]
        batch[i] = patch
    return batch


# ------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place, over name-keyed arrays."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return params, state


def _lr_at(step, total, base_lr, ramp_fraction=0.3):
    """Constant, then cosine ramp-down to zero over the final fraction of steps."""
    ramp_start = int(np.floor(total * (1.0 - ramp_fraction)))
    if step <= ramp_start or total == ramp_start:
        return base_lr
    progress = (step - ramp_start) / (total - ramp_start)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


# ------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    net_config: NetworkConfig
    train_config: TrainConfig
    params: dict
    adam_m: dict
    adam_v: dict
    step: int
    rng_state: dict
    version: int = FORMAT_VERSION


def _rng_state_to_kv(state):
    inner = state["state"]
    return {"rng_algo": state["bit_generator"],
            "rng_state": f"{inner['state']:x}",
            "rng_inc": f"{inner['inc']:x}",
            "rng_has_uint32": int(state["has_uint32"]),
            "rng_uinteger": int(state["uinteger"])}


def _rng_state_from_kv(mapping):
    return {"bit_generator": mapping["rng_algo"],
            "state": {"state": int(mapping["rng_state"], 16),
                      "inc": int(mapping["rng_inc"], 16)},
            "has_uint32": kv.as_int(mapping, "rng_has_uint32"),
            "uinteger": kv.as_int(mapping, "rng_uinteger")}


def _blob(text):
    data = text.encode("utf-8")
    return struct.pack("<I", len(data)) + data


def _tensor_record(name, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    shape = list(arr.shape) + [1] * (4 - arr.ndim)
    nb = name.encode("utf-8")
    return (struct.pack("<I", len(nb)) + nb + struct.pack("<4I", *shape)
            + arr.astype("<f4").tobytes())


def checkpoint_bytes(ckpt):
    state_kv = {"step": ckpt.step, **_rng_state_to_kv(ckpt.rng_state)}
    body = [MAGIC, struct.pack("<I", ckpt.version),
            _blob(kv.dumps_kv(network_config_to_kv(ckpt.net_config))),
            _blob(kv.dumps_kv(ckpt.train_config.to_kv())),
            _blob(kv.dumps_kv(state_kv))]
    for name, arr in ckpt.params.items():
        body.append(_tensor_record(name, arr))
    for name, arr in ckpt.adam_m.items():
        body.append(_tensor_record("m." + name, arr))
    for name, arr in ckpt.adam_v.items():
        body.append(_tensor_record("v." + name, arr))
    payload = b"".join(body)
    checksum = hashlib.sha256(payload).digest()[:8]
    return payload + checksum


def save_checkpoint(path, ckpt):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data, limit):
        self.data = data
        self.limit = limit
        self.pos = 0

    def take(self, n):
        if self.pos + n > self.limit:
            raise CheckpointTruncatedError(
                f"need {n} bytes at offset {self.pos}, only {self.limit - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def blob(self):
        return self.take(self.u32()).decode("utf-8")

    @property
    def exhausted(self):
        return self.pos == self.limit


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 + 8:
        raise CheckpointTruncatedError(f"file is only {len(data)} bytes")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"bad magic {data[:len(MAGIC)]!r}")
    version = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])[0]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported format version {version}")

    reader = _Reader(data, len(data) - 8)
    reader.pos = len(MAGIC) + 4
    net_cfg = network_config_from_kv(kv.parse_kv(reader.blob()))
    train_cfg = TrainConfig.from_kv(kv.parse_kv(reader.blob()))
    state_map = kv.parse_kv(reader.blob())

    tensors = {}
    while not reader.exhausted:
        name = reader.take(reader.u32()).decode("utf-8")
        shape = struct.unpack("<4I", reader.take(16))
        count = int(np.prod(shape))
        arr = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = arr

    if hashlib.sha256(data[:-8]).digest()[:8] != data[-8:]:
        raise CheckpointChecksumError("stored checksum does not match payload")

    reference = build_network(net_cfg, seed=0)
    params, adam_m, adam_v = {}, {}, {}
    for name, tensor in reference.parameters().items():
        target = tensor.data.shape
        for prefix, dest in (("", params), ("m.", adam_m), ("v.", adam_v)):
            key = prefix + name
            if key not in tensors:
                raise CheckpointTruncatedError(f"missing tensor record {key!r}")
            stored = tensors[key]
            if stored.size != int(np.prod(target)):
                raise CheckpointChecksumError(
                    f"tensor {key!r} has {stored.size} values, expected "
                    f"{int(np.prod(target))}")
            dest[name] = stored.reshape(target).copy()

    return Checkpoint(net_config=net_cfg, train_config=train_cfg, params=params,
                      adam_m=adam_m, adam_v=adam_v,
                      step=kv.as_int(state_map, "step"),
                      rng_state=_rng_state_from_kv(state_map), version=version)


def network_from_checkpoint(ckpt):
    net = build_network(ckpt.net_config, seed=0)
    for name, tensor in net.parameters().items():
        tensor.data[...] = ckpt.params[name]
    return net


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list
    network: object


def train(net_config, train_config, dataset, checkpoint_path=None, resume_from=None):
    """Run the corrupt -> forward -> likelihood -> backward -> Adam loop.

    `dataset` is a list of (name, (C,H,W) float32 in [0,1]) pairs. When
    `checkpoint_path` is set, intermediate checkpoints are written next to
    it at the configured interval and the final one at the path itself.
    Resuming from a checkpoint continues the interrupted trajectory
    bit-exactly.
    """
    cfg = train_config
    max_dilation = net_config.branch_dilations()[-1]
    if cfg.patch_size < 2 * max_dilation + 1:
        raise ConfigError(
            f"patch_size {cfg.patch_size} < {2 * max_dilation + 1} needed for the "
            f"deepest branch (dilation {max_dilation}) to see real data")
    if not dataset:
        raise InputError("dataset is empty")
    if any(arr.shape[0] != net_config.channels for _, arr in dataset):
        raise InputError(f"dataset channel count does not match network "
                         f"({net_config.channels})")

    if resume_from is not None:
        net = network_from_checkpoint(resume_from)
        state = AdamState(m={k: v.copy() for k, v in resume_from.adam_m.items()},
                          v={k: v.copy() for k, v in resume_from.adam_v.items()},
                          t=resume_from.step)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_from.rng_state
        start_step = resume_from.step
    else:
        net = build_network(net_config, seed=cfg.seed)
        state = AdamState()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        start_step = 0

    params = {name: t for name, t in net.parameters().items()}
    for name, t in params.items():
        state.m.setdefault(name, np.zeros_like(t.data))
        state.v.setdefault(name, np.zeros_like(t.data))
    losses = []

    def snapshot(step):
        return Checkpoint(net_config=net_config, train_config=cfg,
                          params={k: t.data.copy() for k, t in params.items()},
                          adam_m={k: a.copy() for k, a in state.m.items()},
                          adam_v={k: a.copy() for k, a in state.v.items()},
                          step=step, rng_state=rng.bit_generator.state)

    checkpoint_path = Path(checkpoint_path) if checkpoint_path is not None else None
    for step in range(start_step + 1, cfg.steps + 1):
        clean = extract_patches(dataset, cfg.patch_size, cfg.batch_size, rng,
                                cfg.flip_horizontal, cfg.flip_vertical)
        noisy, sigma_map = corrupt(clean, cfg.noise, rng)
        with np.errstate(over="ignore", invalid="ignore"):
            # a diverging run is caught by the finiteness check below
            pred = forward(net, T.Tensor(noisy))
            loss = nll_loss(pred, noisy, sigma_map)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalAbort(f"non-finite loss {value} at step {step}")
        losses.append(value)

        T.backward(loss)
        grads = {name: t.grad for name, t in params.items()}
        adam_step({name: t.data for name, t in params.items()}, grads, state,
                  lr=_lr_at(step, cfg.steps, cfg.learning_rate))
        for t in params.values():
            t.grad = None

        if (checkpoint_path is not None and cfg.checkpoint_interval
                and step % cfg.checkpoint_interval == 0 and step < cfg.steps):
            interim = checkpoint_path.with_name(
                f"{checkpoint_path.stem}.step{step:06d}{checkpoint_path.suffix}")
            save_checkpoint(interim, snapshot(step))

    final = snapshot(cfg.steps)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, final)
    return TrainResult(checkpoint=final, losses=losses, network=net)
