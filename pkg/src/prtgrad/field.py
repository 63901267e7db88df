"""The relightable neural field.

Four independent MLPs per parameter set: a density network and a
transfer-gradient network, each at a coarse and a fine level. Density
depends on position only and is squashed through softplus; the transfer
gradient additionally sees the view and light directions through a small
head and exits through exp, so every channel is strictly positive.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import InvalidInputError, NumericalError

CHECKPOINT_MAGIC = b"PRTG"
CHECKPOINT_VERSION = 1

LEVELS = ("coarse", "fine")


@dataclass(frozen=True)
class ArchConfig:
    """Network hyperparameters. Defaults are the full-scale configuration;
    tests and the desk benchmark shrink width/depth."""

    depth: int = 8
    width: int = 256
    skip_layer: int = 4  # hidden layer that re-reads the encoded input; <=0 or >=depth disables
    head_width: int = 128
    l_pos: int = 10
    l_dir: int = 4

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.l_pos

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.l_dir

    @property
    def has_skip(self) -> bool:
        return 0 < self.skip_layer < self.depth


@dataclass
class FieldQuery:
    """A field evaluation point: position, unit view direction (the ray
    direction), unit light direction. Arrays may be (3,) or (N, 3)."""

    position: np.ndarray
    view_dir: np.ndarray
    light_dir: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.view_dir = np.asarray(self.view_dir, dtype=np.float64)
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        for name, d in (("view_dir", self.view_dir), ("light_dir", self.light_dir)):
            norms = np.linalg.norm(np.atleast_2d(d), axis=-1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise InvalidInputError(f"{name} must be unit length (got norms {norms})")


@dataclass
class FieldParams:
    """All learnable tensors, keyed by name in declaration order."""

    arch: ArchConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "FieldParams":
        return FieldParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def validate(self) -> None:
        expected = dict(declare_tensors(self.arch))
        if list(self.tensors.keys()) != list(expected.keys()):
            raise InvalidInputError("tensor names/order do not match the architecture")
        for name, t in self.tensors.items():
            if t.shape != expected[name]:
                raise InvalidInputError(
                    f"tensor '{name}' has shape {t.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(t)):
                raise NumericalError(f"tensor '{name}' contains non-finite values")


def positional_encode(v, num_freqs: int) -> np.ndarray:
    """Sin/cos frequency ladder with the identity term:
    [v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)].
    Output dimension is 3 + 6 * num_freqs (per last-axis triple)."""
    if num_freqs < 0:
        raise InvalidInputError("frequency count must be >= 0")
    v = np.asarray(v)
    single = v.ndim == 1
    vv = np.atleast_2d(v)
    if num_freqs == 0:
        out = vv.copy()
    else:
        freqs = (2.0 ** np.arange(num_freqs)) * np.pi
        ang = vv[:, None, :] * freqs[None, :, None].astype(vv.dtype)  # (P, L, 3)
        sc = np.stack([np.sin(ang), np.cos(ang)], axis=2)             # (P, L, 2, 3)
        out = np.concatenate([vv, sc.reshape(vv.shape[0], -1)], axis=1)
    out = out.astype(vv.dtype, copy=False)
    return out[0] if single else out


def declare_tensors(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Tensor names and shapes in (checkpoint) declaration order."""
    decls: list[tuple[str, tuple[int, ...]]] = []
    for level in LEVELS:
        for net in ("density", "transfer"):
            prefix = f"{level}.{net}"
            in_dim = arch.pos_dim
            for i in range(arch.depth):
                d_in = in_dim if i == 0 else arch.width
                if arch.has_skip and i == arch.skip_layer:
                    d_in = arch.width + in_dim
                decls.append((f"{prefix}.W{i}", (d_in, arch.width)))
                decls.append((f"{prefix}.b{i}", (arch.width,)))
            if net == "density":
                decls.append((f"{prefix}.out.W", (arch.width, 1)))
                decls.append((f"{prefix}.out.b", (1,)))
            else:
                decls.append((f"{prefix}.head.W0", (arch.width + 2 * arch.dir_dim, arch.head_width)))
                decls.append((f"{prefix}.head.b0", (arch.head_width,)))
                decls.append((f"{prefix}.head.W1", (arch.head_width, 3)))
                decls.append((f"{prefix}.head.b1", (3,)))
    return decls


# Initial transfer output ~= exp(b1) = 0.05 per channel: dim but nonzero
# renders keep the tonemapped-loss weights bounded at step zero.
INIT_TRANSFER_BIAS = math.log(0.05)


def init_params(seed: int, arch: ArchConfig = ArchConfig(), dtype=np.float32) -> FieldParams:
    """Deterministic fan-in-scaled uniform initialization."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in declare_tensors(arch):
        if len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
            if name.endswith("head.b1"):
                tensors[name][:] = INIT_TRANSFER_BIAS
    return FieldParams(arch, tensors)


def wrap_params(params: FieldParams, tape: Optional[ad.Tape] = None) -> dict[str, Var]:
    """Lift tensors into graph variables: tape leaves for training,
    constants for inference."""
    if tape is None:
        return {k: ad.constant(v) for k, v in params.tensors.items()}
    return {k: tape.leaf(v, name=k) for k, v in params.tensors.items()}


def _trunk(pvars: dict[str, Var], prefix: str, x_enc: Var, arch: ArchConfig) -> Var:
    h = ad.linear(x_enc, pvars[f"{prefix}.W0"], pvars[f"{prefix}.b0"], activation="relu")
    for i in range(1, arch.depth):
        if arch.has_skip and i == arch.skip_layer:
            h = ad.linear2(h, x_enc, pvars[f"{prefix}.W{i}"], pvars[f"{prefix}.b{i}"],
                           activation="relu")
        else:
            h = ad.linear(h, pvars[f"{prefix}.W{i}"], pvars[f"{prefix}.b{i}"],
                          activation="relu")
    return h


def density_forward(pvars: dict[str, Var], level: str, x_enc: Var, arch: ArchConfig) -> Var:
    """sigma for a batch of encoded positions, shape (P, 1), >= 0 by softplus."""
    prefix = f"{level}.density"
    h = _trunk(pvars, prefix, x_enc, arch)
    return ad.softplus(ad.linear(h, pvars[f"{prefix}.out.W"], pvars[f"{prefix}.out.b"]))


def transfer_trunk(pvars: dict[str, Var], level: str, x_enc: Var, arch: ArchConfig) -> Var:
    return _trunk(pvars, f"{level}.transfer", x_enc, arch)


def transfer_head(pvars: dict[str, Var], level: str, feat: Var, dir_enc: Var,
                  arch: ArchConfig) -> Var:
    """HDR contribution per sample, shape (P, 3), > 0 by exp.

    `dir_enc` is the concatenated encoded view and light directions."""
    prefix = f"{level}.transfer.head"
    h = ad.linear2(feat, dir_enc, pvars[f"{prefix}.W0"], pvars[f"{prefix}.b0"],
                   activation="relu")
    return ad.exp(ad.linear(h, pvars[f"{prefix}.W1"], pvars[f"{prefix}.b1"]))


def transfer_forward(pvars: dict[str, Var], level: str, x_enc: Var, dir_enc: Var,
                     arch: ArchConfig) -> Var:
    feat = transfer_trunk(pvars, level, x_enc, arch)
    return transfer_head(pvars, level, feat, dir_enc, arch)


def _check_level(level: str) -> None:
    if level not in LEVELS:
        raise InvalidInputError(f"level must be one of {LEVELS}, got {level!r}")


def eval_density(params: FieldParams, level: str, x) -> np.ndarray | float:
    """Evaluate sigma(x). Accepts a single 3-vector or an (N, 3) batch.
    Raises NumericalError on non-finite output (diverged parameters)."""
    _check_level(level)
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 1
    x_enc = ad.constant(positional_encode(np.atleast_2d(x), params.arch.l_pos))
    pvars = wrap_params(params)
    sigma = density_forward(pvars, level, x_enc, params.arch).value[:, 0]
    if not np.all(np.isfinite(sigma)):
        raise NumericalError("density evaluation produced non-finite values")
    return float(sigma[0]) if single else sigma


def eval_transfer_gradient(params: FieldParams, level: str, query: FieldQuery) -> np.ndarray:
    """Evaluate the transfer gradient h(x; view; light), (3,) or (N, 3),
    strictly positive per channel."""
    _check_level(level)
    pos = np.atleast_2d(query.position).astype(params.dtype)
    view = np.atleast_2d(query.view_dir).astype(params.dtype)
    light = np.atleast_2d(query.light_dir).astype(params.dtype)
    n = max(pos.shape[0], view.shape[0], light.shape[0])
    pos, view, light = (np.broadcast_to(a, (n, 3)) for a in (pos, view, light))
    arch = params.arch
    x_enc = ad.constant(positional_encode(pos, arch.l_pos))
    dir_enc = ad.constant(np.concatenate(
        [positional_encode(view, arch.l_dir), positional_encode(light, arch.l_dir)], axis=1))
    pvars = wrap_params(params)
    h = transfer_forward(pvars, level, x_enc, dir_enc, arch).value
    if not np.all(np.isfinite(h)):
        raise NumericalError("transfer evaluation produced non-finite values")
    return h[0] if np.asarray(query.position).ndim == 1 else h


# ---------------------------------------------------------------------------
# checkpoint format: magic, version u32, length-prefixed JSON metadata,
# then raw little-endian f32 tensors in declaration order.

def _write_container(path: str, metadata: dict, tensors: list[np.ndarray]) -> None:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        for t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def _read_container(path: str) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path}: unsupported format version {version}")
    (mlen,) = struct.unpack_from("<I", blob, 8)
    if 12 + mlen > len(blob):
        raise InvalidInputError(f"{path}: truncated metadata")
    metadata = json.loads(blob[12:12 + mlen].decode("utf-8"))
    return metadata, blob[12 + mlen:]


def _unpack_tensors(payload: bytes, decls: list[tuple[str, tuple[int, ...]]],
                    path: str) -> dict[str, np.ndarray]:
    tensors = {}
    offset = 0
    for name, shape in decls:
        n = int(np.prod(shape))
        nbytes = 4 * n
        if offset + nbytes > len(payload):
            raise InvalidInputError(f"{path}: truncated payload at tensor '{name}'")
        tensors[name] = np.frombuffer(
            payload, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise InvalidInputError(f"{path}: {len(payload) - offset} trailing bytes")
    return tensors


def save_checkpoint(params: FieldParams, path: str) -> None:
    """Write params plus a sidecar text manifest of tensor names/shapes."""
    decls = declare_tensors(params.arch)
    metadata = {"kind": "field", "arch": asdict(params.arch)}
    _write_container(path, metadata, [params.tensors[name] for name, _ in decls])
    with open(str(path) + ".manifest.txt", "w") as f:
        for name, shape in decls:
            f.write(f"{name} {' '.join(str(s) for s in shape)}\n")


def load_checkpoint(path: str) -> FieldParams:
    metadata, payload = _read_container(path)
    if metadata.get("kind") != "field":
        raise InvalidInputError(f"{path}: not a field checkpoint")
    arch = ArchConfig(**metadata["arch"])
    params = FieldParams(arch, _unpack_tensors(payload, declare_tensors(arch), str(path)))
    params.validate()
    return params


def save_adam_state(state: ad.AdamState, arch: ArchConfig, path: str) -> None:
    names = [name for name, _ in declare_tensors(arch)]
    metadata = {"kind": "adam", "arch": asdict(arch), "step": state.step,
                "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
    tensors = [state.m[n] for n in names] + [state.v[n] for n in names]
    _write_container(path, metadata, tensors)


def load_adam_state(path: str) -> tuple[ad.AdamState, ArchConfig]:
    metadata, payload = _read_container(path)
    if metadata.get("kind") != "adam":
        raise InvalidInputError(f"{path}: not an optimizer checkpoint")
    arch = ArchConfig(**metadata["arch"])
    decls = declare_tensors(arch)
    both = [(f"m.{n}", s) for n, s in decls] + [(f"v.{n}", s) for n, s in decls]
    tensors = _unpack_tensors(payload, both, str(path))
    state = ad.AdamState(lr=metadata["lr"], beta1=metadata["beta1"], beta2=metadata["beta2"],
                         eps=metadata["eps"], step=metadata["step"],
                         m={n: tensors[f"m.{n}"] for n, _ in decls},
                         v={n: tensors[f"v.{n}"] for n, _ in decls})
    return state, arch
