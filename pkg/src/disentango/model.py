"""The hierarchical multi-task operator network.

Three pieces share one computation tape:

* a multi-task iterative Fourier operator  u_hat = Q o J^L o P[f]  whose
  lifting layer P is the only task-specific parameter block;
* a variational encoder mapping flattened lifting parameters to a diagonal
  Gaussian posterior over the d_z latent;
* a decoder mapping a latent sample back to lifting parameters.

Forward modes: "disentango" routes the lifting parameters through the
encoder/decoder bottleneck, "metano" uses them directly, "single-task"
shares one lifting block across all tasks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .spectral import SpectralWeights, spectral_conv
from .tensor import ShapeError, Tensor, concat

CKPT_MAGIC = b"DSGOCKPT"
CKPT_VERSION = 1

MODES = ("disentango", "metano", "single-task")
LOGSTD_LO, LOGSTD_HI = -6.0, 3.0
LOGSTD_INIT = -2.0


class ModelError(ValueError):
    pass


@dataclass
class LatentPosterior:
    """Per-task diagonal Gaussian over the latent: mean and stddev rows."""

    mean: Tensor   # (tasks, d_z)
    std: Tensor    # (tasks, d_z), positive

    def sample(self, eps: np.ndarray) -> Tensor:
        return self.mean + self.std * Tensor(eps)


@dataclass
class ForwardResult:
    u_hat: Tensor                       # (tasks, pairs, *grid)
    posterior: LatentPosterior | None   # disentango mode only
    theta_hat: Tensor | None            # decoded lifting parameters, flat
    theta_flat: Tensor                  # raw lifting parameters, flat


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class ModelState:
    """All trainable parameters plus the latent-input normalization stats."""

    def __init__(self, num_tasks: int, grid_extents: tuple[int, ...], d_z: int,
                 channels: int, modes: tuple[int, ...], depth: int,
                 enc_hidden: int, dec_hidden: int, num_classes: int,
                 rng: np.random.Generator):
        if depth < 0:
            raise ModelError(f"depth must be >= 0, got {depth}")
        s = len(grid_extents)
        self.num_tasks = num_tasks
        self.grid_extents = tuple(grid_extents)
        self.d_z = d_z
        self.channels = channels
        self.modes = tuple(modes)
        self.depth = depth
        self.enc_hidden = enc_hidden
        self.dec_hidden = dec_hidden
        self.num_classes = num_classes
        self.d_in = 1 + s                       # load channel + coordinates
        self.d_theta = self.d_in * channels + channels

        c, d_in, d_th = channels, self.d_in, self.d_theta
        self.theta_p_w = Tensor(_uniform_init(rng, (num_tasks, d_in, c), d_in),
                                requires_grad=True)
        self.theta_p_b = Tensor(_uniform_init(rng, (num_tasks, c), d_in),
                                requires_grad=True)
        self.spectral = SpectralWeights.create(grid_extents, modes, c, rng)
        self.j_point = Tensor(_uniform_init(rng, (c, c), c), requires_grad=True)
        self.j_bias = Tensor(_uniform_init(rng, (c,), c), requires_grad=True)
        self.q_w1 = Tensor(_uniform_init(rng, (c, c), c), requires_grad=True)
        self.q_b1 = Tensor(_uniform_init(rng, (c,), c), requires_grad=True)
        self.q_w2 = Tensor(_uniform_init(rng, (c, 1), c), requires_grad=True)
        self.q_b2 = Tensor(_uniform_init(rng, (1,), c), requires_grad=True)
        self.enc_w1 = Tensor(_uniform_init(rng, (d_th, enc_hidden), d_th),
                             requires_grad=True)
        self.enc_b1 = Tensor(np.zeros(enc_hidden), requires_grad=True)
        enc_w2 = _uniform_init(rng, (enc_hidden, 2 * d_z), enc_hidden)
        enc_w2[:, d_z:] = 0.0
        self.enc_w2 = Tensor(enc_w2, requires_grad=True)
        # the log-std head starts at a small constant so early latent samples
        # are nearly deterministic; large initial sampling noise destabilizes
        # the decoded operator path, increasingly so at higher d_z
        enc_b2 = np.zeros(2 * d_z)
        enc_b2[d_z:] = LOGSTD_INIT
        self.enc_b2 = Tensor(enc_b2, requires_grad=True)
        self.dec_w1 = Tensor(_uniform_init(rng, (d_z, dec_hidden), d_z),
                             requires_grad=True)
        self.dec_b1 = Tensor(np.zeros(dec_hidden), requires_grad=True)
        self.dec_w2 = Tensor(_uniform_init(rng, (dec_hidden, d_th), dec_hidden),
                             requires_grad=True)
        self.dec_b2 = Tensor(np.zeros(d_th), requires_grad=True)
        if num_classes > 0:
            self.cls_w = Tensor(_uniform_init(rng, (d_z, num_classes), d_z),
                                requires_grad=True)
            self.cls_b = Tensor(np.zeros(num_classes), requires_grad=True)
        # normalization of the encoder input, tracked across training steps
        self.theta_mean = np.zeros(d_th)
        self.theta_std = np.ones(d_th)

    # -- parameter registry ------------------------------------------------

    PARAM_NAMES = ("theta_p_w", "theta_p_b", "spectral_real", "spectral_imag",
                   "j_point", "j_bias", "q_w1", "q_b1", "q_w2", "q_b2",
                   "enc_w1", "enc_b1", "enc_w2", "enc_b2",
                   "dec_w1", "dec_b1", "dec_w2", "dec_b2", "cls_w", "cls_b")

    def parameters(self) -> dict[str, Tensor]:
        params = {
            "theta_p_w": self.theta_p_w, "theta_p_b": self.theta_p_b,
            "spectral_real": self.spectral.real, "spectral_imag": self.spectral.imag,
            "j_point": self.j_point, "j_bias": self.j_bias,
            "q_w1": self.q_w1, "q_b1": self.q_b1,
            "q_w2": self.q_w2, "q_b2": self.q_b2,
            "enc_w1": self.enc_w1, "enc_b1": self.enc_b1,
            "enc_w2": self.enc_w2, "enc_b2": self.enc_b2,
            "dec_w1": self.dec_w1, "dec_b1": self.dec_b1,
            "dec_w2": self.dec_w2, "dec_b2": self.dec_b2,
        }
        if self.num_classes > 0:
            params["cls_w"] = self.cls_w
            params["cls_b"] = self.cls_b
        return params

    def shared_parameter_names(self) -> list[str]:
        """Everything except the task-wise lifting block."""
        return [n for n in self.parameters() if not n.startswith("theta_p")]

    def config_dict(self) -> dict:
        return {
            "num_tasks": self.num_tasks, "grid_extents": list(self.grid_extents),
            "d_z": self.d_z, "channels": self.channels, "modes": list(self.modes),
            "depth": self.depth, "enc_hidden": self.enc_hidden,
            "dec_hidden": self.dec_hidden, "num_classes": self.num_classes,
        }

    @classmethod
    def from_config_dict(cls, d: dict) -> "ModelState":
        return cls(d["num_tasks"], tuple(d["grid_extents"]), d["d_z"], d["channels"],
                   tuple(d["modes"]), d["depth"], d["enc_hidden"], d["dec_hidden"],
                   d["num_classes"], np.random.default_rng(0))

    # -- operator forward ----------------------------------------------------

    def spectral_for_grid(self, extents: tuple[int, ...]) -> SpectralWeights:
        """Reuse the trained mode matrices on a different (finer) grid."""
        return SpectralWeights(tuple(extents), self.modes, self.channels,
                               self.spectral.real, self.spectral.imag)

    def coords_channels(self, extents: tuple[int, ...]) -> np.ndarray:
        axes = [np.arange(n) / n for n in extents]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)           # (*grid, s)

    def ifno_forward(self, f: Tensor, theta_w: Tensor, theta_b: Tensor,
                     extents: tuple[int, ...] | None = None) -> Tensor:
        """Q o J^L o P with task-batched lifting.

        f: (tasks, pairs, *grid); theta_w: (tasks|1, d_in, c);
        theta_b: (tasks|1, c). Returns (tasks, pairs, *grid).
        """
        extents = self.grid_extents if extents is None else tuple(extents)
        s = len(extents)
        if f.shape[-s:] != extents:
            raise ShapeError(f"load grid {f.shape[-s:]} does not match {extents}")
        t_dim, n_dim = f.shape[0], f.shape[1]
        npoints = int(np.prod(extents))
        coords = np.broadcast_to(self.coords_channels(extents),
                                 (t_dim, n_dim) + extents + (s,))
        x = concat([f.reshape(t_dim, n_dim, *extents, 1), Tensor(coords)], axis=-1)
        x = x.reshape(t_dim, n_dim * npoints, self.d_in)
        h = x @ theta_w + theta_b.reshape(theta_b.shape[0], 1, self.channels)
        h = h.reshape(t_dim, n_dim, *extents, self.channels)
        if self.depth > 0:
            w = self.spectral if extents == self.grid_extents \
                else self.spectral_for_grid(extents)
            step = 1.0 / self.depth
            for _ in range(self.depth):
                update = spectral_conv(h, w) + h @ self.j_point + self.j_bias
                h = h + step * update.gelu()
        out = (h @ self.q_w1 + self.q_b1).gelu() @ self.q_w2 + self.q_b2
        return out.reshape(t_dim, n_dim, *extents)

    # -- variational head ------------------------------------------------------

    def theta_rows(self, task_indices) -> tuple[Tensor, Tensor, Tensor]:
        """(theta_w, theta_b, theta_flat) for the given tasks."""
        idx = np.asarray(task_indices)
        if idx.min() < 0 or idx.max() >= self.num_tasks:
            raise ModelError(f"unknown task index in {idx.tolist()} "
                             f"(model holds {self.num_tasks} tasks)")
        w = self.theta_p_w[idx]
        b = self.theta_p_b[idx]
        flat = concat([w.reshape(len(idx), self.d_in * self.channels), b], axis=1)
        return w, b, flat

    def encode(self, theta_flat: Tensor) -> LatentPosterior:
        if theta_flat.shape[-1] != self.d_theta:
            raise ShapeError(f"encoder expects width {self.d_theta}, got "
                             f"{theta_flat.shape[-1]}")
        x = (theta_flat - Tensor(self.theta_mean)) / Tensor(self.theta_std)
        hid = (x @ self.enc_w1 + self.enc_b1).gelu()
        out = hid @ self.enc_w2 + self.enc_b2
        mean = out[:, :self.d_z]
        log_std = out[:, self.d_z:].clip(LOGSTD_LO, LOGSTD_HI)
        return LatentPosterior(mean, log_std.exp())

    def decode(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.d_z:
            raise ShapeError(f"decoder expects latent width {self.d_z}, got {z.shape[-1]}")
        hid = (z @ self.dec_w1 + self.dec_b1).gelu()
        out = hid @ self.dec_w2 + self.dec_b2
        return out * Tensor(self.theta_std) + Tensor(self.theta_mean)

    def update_theta_stats(self, momentum: float = 0.99):
        """Refresh the encoder-input normalization from the current lifting
        parameters; statistics are constants on the tape."""
        flat = np.concatenate(
            [self.theta_p_w.data.reshape(self.num_tasks, -1), self.theta_p_b.data],
            axis=1)
        mean = flat.mean(axis=0)
        std = np.maximum(flat.std(axis=0), 1e-6)
        self.theta_mean = momentum * self.theta_mean + (1 - momentum) * mean
        self.theta_std = momentum * self.theta_std + (1 - momentum) * std

    def init_theta_stats(self):
        self.theta_mean = np.zeros(self.d_theta)
        self.theta_std = np.ones(self.d_theta)
        self.update_theta_stats(momentum=0.0)

    # -- full forward ------------------------------------------------------------

    def full_forward(self, task_indices, f: Tensor, mode: str = "disentango",
                     eps: np.ndarray | None = None,
                     extents: tuple[int, ...] | None = None) -> ForwardResult:
        if mode not in MODES:
            raise ModelError(f"unknown mode {mode!r}; choose one of {MODES}")
        t_dim = len(task_indices)
        if f.shape[0] != t_dim:
            raise ShapeError(f"load batch has {f.shape[0]} tasks, indices give {t_dim}")
        if mode == "single-task":
            w = self.theta_p_w[np.array([0])]
            b = self.theta_p_b[np.array([0])]
            flat = concat([w.reshape(1, -1), b], axis=1)
            u_hat = self.ifno_forward(f, w, b, extents)
            return ForwardResult(u_hat, None, None, flat)
        w, b, flat = self.theta_rows(task_indices)
        if mode == "metano":
            return ForwardResult(self.ifno_forward(f, w, b, extents), None, None, flat)
        post = self.encode(flat)
        if eps is None:
            eps = np.zeros((t_dim, self.d_z))
        z_hat = post.sample(eps)
        theta_hat = self.decode(z_hat)
        w_hat = theta_hat[:, :self.d_in * self.channels].reshape(
            t_dim, self.d_in, self.channels)
        b_hat = theta_hat[:, self.d_in * self.channels:]
        u_hat = self.ifno_forward(f, w_hat, b_hat, extents)
        return ForwardResult(u_hat, post, theta_hat, flat)


# -- checkpoint serialization ---------------------------------------------------
#
# Layout: magic, u32 version, u64 header length, JSON header, then the raw
# little-endian float64 parameter buffers in the order listed by the header
# (model parameters first, then theta_mean/theta_std, then optimizer moment
# buffers). RNG state and scalar counters travel in the header.


def save_checkpoint(path: str, model: ModelState, run_config: dict,
                    optimizer_state: dict | None = None,
                    rng_state: dict | None = None, extra: dict | None = None):
    params = model.parameters()
    arrays: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in params.items()]
    arrays.append(("theta_mean", model.theta_mean))
    arrays.append(("theta_std", model.theta_std))
    opt_meta = None
    if optimizer_state is not None:
        opt_meta = {k: v for k, v in optimizer_state.items() if k not in ("m", "v")}
        for n in params:
            arrays.append((f"opt_m/{n}", optimizer_state["m"][n]))
            arrays.append((f"opt_v/{n}", optimizer_state["v"][n]))
    header = {
        "model": model.config_dict(),
        "run_config": run_config,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "optimizer": opt_meta,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ModelState, dict, dict | None, dict | None, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise ModelError(f"{path}: unknown checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 12)
    header = json.loads(raw[20:20 + hlen].decode())
    model = ModelState.from_config_dict(header["model"])
    off = 20 + hlen
    buffers: dict[str, np.ndarray] = {}
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        buffers[meta["name"]] = np.frombuffer(
            raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += count * 8
    params = model.parameters()
    for n, t in params.items():
        if buffers[n].shape != t.data.shape:
            raise ModelError(f"{path}: parameter {n} has shape {buffers[n].shape}, "
                             f"config implies {t.data.shape}")
        t.data = buffers[n]
    model.theta_mean = buffers["theta_mean"]
    model.theta_std = buffers["theta_std"]
    opt_state = None
    if header["optimizer"] is not None:
        opt_state = dict(header["optimizer"])
        opt_state["m"] = {n: buffers[f"opt_m/{n}"] for n in params}
        opt_state["v"] = {n: buffers[f"opt_v/{n}"] for n in params}
    return model, header["run_config"], opt_state, header["rng_state"], header["extra"]
