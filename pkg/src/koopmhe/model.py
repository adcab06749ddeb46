"""The stochastic linear lifted-space model shared by trainer and estimator.

A model bundles the operators A and B, the fixed reconstruction and
measurement matrices, the state-lifting network, the (frozen) noise
characterization network, and the data scaler. All model-space math
happens in scaled coordinates; raw physical values exist only at the
simulator and reporting boundaries.
"""

from __future__ import annotations

import io
import logging
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import Scaler
from .errors import ConfigError, ModelFileError, NumericalError
from .nn import ACTIVATIONS, Mlp

log = logging.getLogger(__name__)

#: Hard clamp on the noise net's log-std output, guards exp overflow.
LOG_SIGMA_MIN = -20.0


def build_D(measured_indices, n_x: int, n_g: int) -> np.ndarray:
    """Measurement matrix D = Cbar C for unit-selector rows Cbar.

    ``measured_indices`` are the state indices each sensor reads; the
    result has shape (n_y, n_g) with a single unit entry per row.
    """
    idx = [int(i) for i in measured_indices]
    if len(idx) == 0 or len(set(idx)) != len(idx):
        raise ConfigError("measured indices must be non-empty and distinct")
    if any(i < 0 or i >= n_x for i in idx):
        raise ConfigError(f"measured index out of range for n_x={n_x}")
    D = np.zeros((len(idx), n_g))
    for row, i in enumerate(idx):
        D[row, i] = 1.0
    return D


@dataclass
class KoopmanModel:
    """Lifted linear model z+ = A z + B u with z = [x_scaled; F(x_scaled)]."""

    A: np.ndarray
    B: np.ndarray
    lifting_net: Mlp
    noise_net: Mlp
    scaler: Scaler
    measured_indices: tuple = (2, 5, 8)
    physics_informed: bool = False
    sigma_max: float = 1e6
    metadata: str = ""

    @property
    def n_x(self) -> int:
        return self.lifting_net.in_dim

    @property
    def n_l(self) -> int:
        return self.lifting_net.out_dim

    @property
    def n_g(self) -> int:
        return self.n_x + self.n_l

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return len(self.measured_indices)

    @property
    def C(self) -> np.ndarray:
        """Reconstruction matrix [I, 0], exact by construction."""
        C = np.zeros((self.n_x, self.n_g))
        C[:, : self.n_x] = np.eye(self.n_x)
        return C

    @property
    def D(self) -> np.ndarray:
        return build_D(self.measured_indices, self.n_x, self.n_g)

    def validate(self) -> None:
        g = self.n_g
        if self.A.shape != (g, g):
            raise ConfigError(f"A must be {(g, g)}, got {self.A.shape}")
        if self.B.shape[0] != g:
            raise ConfigError(f"B must have {g} rows, got {self.B.shape}")
        if self.noise_net.in_dim != g or self.noise_net.out_dim != g:
            raise ConfigError("noise net must map n_g -> n_g")

    def lift(self, x, already_scaled: bool = False) -> np.ndarray:
        """z = [x_scaled; F(x_scaled)]; accepts (n_x,) or (..., n_x)."""
        x = np.asarray(x, dtype=np.float64)
        xs = x if already_scaled else self.scaler.scale_x(x)
        f, _ = self.lifting_net.forward(xs)
        if not np.all(np.isfinite(f)):
            raise NumericalError("lifting network produced non-finite output")
        return np.concatenate([xs, f], axis=-1)

    def reconstruct(self, z) -> np.ndarray:
        """Scaled state estimate C z (the leading n_x block of z)."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.n_g:
            raise ValueError(f"lifted state must have {self.n_g} components")
        return z[..., : self.n_x]

    def reconstruct_unscaled(self, z) -> np.ndarray:
        return self.scaler.unscale_x(self.reconstruct(z))

    def noise_std(self, z) -> np.ndarray:
        """sigma = exp(N(z)), clamped into (0, sigma_max]; always positive."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.n_g:
            raise ValueError(f"lifted state must have {self.n_g} components")
        raw, _ = self.noise_net.forward(z)
        log_max = np.log(self.sigma_max)
        if np.any(raw > log_max):
            log.warning("noise net log-std clamped at sigma_max=%g", self.sigma_max)
        clipped = np.clip(raw, LOG_SIGMA_MIN, log_max)
        return np.exp(clipped)

    def rollout(self, z0, inputs, mu=None) -> np.ndarray:
        """Linear recursion z_{j+1} = A z_j + B u_j + mu over a window.

        The same ``mu`` vector is added at every step; pass None (zero)
        for deterministic prediction. Returns (..., H+1, n_g) including
        z0 at index 0.
        """
        z0 = np.asarray(z0, dtype=np.float64)
        inputs = np.asarray(inputs, dtype=np.float64)
        squeeze = z0.ndim == 1
        if squeeze:
            z0 = z0[None, :]
            inputs = inputs[None, ...]
        if inputs.ndim != 3 or inputs.shape[-1] != self.n_u:
            raise ValueError("inputs must have shape (batch, H, n_u)")
        if z0.shape[-1] != self.n_g:
            raise ValueError(f"z0 must have {self.n_g} components")
        n, H = inputs.shape[0], inputs.shape[1]
        if mu is None:
            mu = np.zeros((n, self.n_g))
        else:
            mu = np.asarray(mu, dtype=np.float64)
            if mu.ndim == 1:
                mu = mu[None, :]
        out = np.empty((n, H + 1, self.n_g))
        out[:, 0] = z0
        for j in range(H):
            out[:, j + 1] = out[:, j] @ self.A.T + inputs[:, j] @ self.B.T + mu
        return out[0] if squeeze else out

    def predict_states(self, z_traj) -> np.ndarray:
        """Unscaled state trajectory from a lifted trajectory."""
        return self.scaler.unscale_x(self.reconstruct(z_traj))

    def copy(self) -> "KoopmanModel":
        return KoopmanModel(
            A=self.A.copy(),
            B=self.B.copy(),
            lifting_net=self.lifting_net.copy(),
            noise_net=self.noise_net.copy(),
            scaler=Scaler(
                self.scaler.x_mean.copy(),
                self.scaler.x_std.copy(),
                self.scaler.u_mean.copy(),
                self.scaler.u_std.copy(),
            ),
            measured_indices=tuple(self.measured_indices),
            physics_informed=self.physics_informed,
            sigma_max=self.sigma_max,
            metadata=self.metadata,
        )


# ---------------------------------------------------------------------------
# Serialization: versioned little-endian binary with a trailing CRC32.

_MAGIC = b"KMHEMODL"
_VERSION = 1


def _pack_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(arr.tobytes())


def _unpack_array(buf: io.BytesIO) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read(buf, 1))
    shape = tuple(struct.unpack("<I", _read(buf, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = _read(buf, 8 * count)
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ModelFileError("model file truncated")
    return data


def _pack_mlp(buf: io.BytesIO, net: Mlp) -> None:
    buf.write(struct.pack("<I", len(net.layer_dims)))
    for d in net.layer_dims:
        buf.write(struct.pack("<I", d))
    buf.write(struct.pack("<B", ACTIVATIONS.index(net.activation)))
    for w, b in zip(net.weights, net.biases):
        _pack_array(buf, w)
        _pack_array(buf, b)


def _unpack_mlp(buf: io.BytesIO) -> Mlp:
    (n_dims,) = struct.unpack("<I", _read(buf, 4))
    dims = [struct.unpack("<I", _read(buf, 4))[0] for _ in range(n_dims)]
    (act_id,) = struct.unpack("<B", _read(buf, 1))
    if act_id >= len(ACTIVATIONS):
        raise ModelFileError("unknown activation id in model file")
    weights, biases = [], []
    for _ in range(n_dims - 1):
        weights.append(_unpack_array(buf))
        biases.append(_unpack_array(buf))
    return Mlp(dims, weights, biases, ACTIVATIONS[act_id])


def save_model(model: KoopmanModel, path) -> None:
    """Write the model; round-trip through load_model is bit-exact."""
    model.validate()
    buf = io.BytesIO()
    buf.write(struct.pack("<B", int(model.physics_informed)))
    buf.write(struct.pack("<d", model.sigma_max))
    buf.write(struct.pack("<IIII", model.n_x, model.n_u, model.n_y, model.n_l))
    for i in model.measured_indices:
        buf.write(struct.pack("<I", int(i)))
    _pack_array(buf, model.A)
    _pack_array(buf, model.B)
    for name in ("x_mean", "x_std", "u_mean", "u_std"):
        _pack_array(buf, getattr(model.scaler, name))
    _pack_mlp(buf, model.lifting_net)
    _pack_mlp(buf, model.noise_net)
    meta = model.metadata.encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_model(path) -> KoopmanModel:
    """Read a model file, verifying magic, version, and checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 8 or blob[: len(_MAGIC)] != _MAGIC:
        raise ModelFileError(f"{path} is not a koopmhe model file")
    (version,) = struct.unpack("<I", blob[len(_MAGIC): len(_MAGIC) + 4])
    if version != _VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    payload, (crc,) = blob[len(_MAGIC) + 4: -4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise ModelFileError(f"checksum mismatch in {path}")
    buf = io.BytesIO(payload)
    (physics,) = struct.unpack("<B", _read(buf, 1))
    (sigma_max,) = struct.unpack("<d", _read(buf, 8))
    n_x, n_u, n_y, n_l = struct.unpack("<IIII", _read(buf, 16))
    measured = tuple(struct.unpack("<I", _read(buf, 4))[0] for _ in range(n_y))
    A = _unpack_array(buf)
    B = _unpack_array(buf)
    scaler = Scaler(*(_unpack_array(buf) for _ in range(4)))
    lifting = _unpack_mlp(buf)
    noise = _unpack_mlp(buf)
    (meta_len,) = struct.unpack("<I", _read(buf, 4))
    metadata = _read(buf, meta_len).decode("utf-8")
    model = KoopmanModel(
        A=A,
        B=B,
        lifting_net=lifting,
        noise_net=noise,
        scaler=scaler,
        measured_indices=measured,
        physics_informed=bool(physics),
        sigma_max=sigma_max,
        metadata=metadata,
    )
    model.validate()
    if model.n_x != n_x or model.n_u != n_u or model.n_l != n_l:
        raise ModelFileError("model file dimensions are inconsistent")
    return model


def export_readable(model: KoopmanModel, path) -> None:
    """Human-readable dump of dims, matrices, and network layer shapes."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("koopmhe model export\n")
        fh.write(f"n_x={model.n_x} n_u={model.n_u} n_y={model.n_y} "
                 f"n_l={model.n_l} n_g={model.n_g}\n")
        fh.write(f"physics_informed={model.physics_informed}\n")
        fh.write(f"measured_indices={list(model.measured_indices)}\n")
        fh.write(f"metadata={model.metadata}\n")
        for name, mat in (("A", model.A), ("B", model.B), ("C", model.C),
                          ("D", model.D)):
            fh.write(f"[{name}] shape={mat.shape}\n")
            for row in np.atleast_2d(mat):
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        for label, net in (("lifting_net", model.lifting_net),
                           ("noise_net", model.noise_net)):
            fh.write(f"[{label}] dims={net.layer_dims} "
                     f"activation={net.activation}\n")
        for name in ("x_mean", "x_std", "u_mean", "u_std"):
            vec = getattr(model.scaler, name)
            fh.write(f"[scaler.{name}] " +
                     " ".join(f"{v:.17g}" for v in vec) + "\n")
