"""Affine-coupling normalizing flow and the ratio discriminator.

Every forward method takes ``tape`` and ``frozen`` keywords.  With
``tape=None`` the computation is plain numpy.  With a tape, parameters are
watched (and receive gradients) unless ``frozen`` is set, in which case they
enter as constants while gradients still flow through the inputs.
"""

from __future__ import annotations

import copy
import math
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .divergences import GeneratorFunction, Kind, make_generator

__all__ = [
    "AffineCoupling",
    "CheckpointError",
    "Discriminator",
    "FlowModel",
    "MLP",
    "NumericalError",
    "OutputMap",
    "assign_parameters",
    "checkpoint_parameters",
    "discriminator_from_checkpoint",
    "flow_from_checkpoint",
    "load_checkpoint",
    "models_from_checkpoint",
    "save_checkpoint",
]

LOG_2PI = math.log(2 * math.pi)


class NumericalError(FloatingPointError):
    """A forward pass produced a non-finite value."""


def _p(param: ad.Parameter, tape, frozen):
    if tape is None or frozen:
        return param.value
    return tape.watch(param)


def _check_finite(x, where: str):
    if not np.all(np.isfinite(ad.value_of(x))):
        raise NumericalError(f"non-finite values in {where}")


class MLP:
    """Fully connected net with tanh hidden activations and a linear head."""

    def __init__(self, sizes, rng, name="mlp", zero_last=False):
        self.sizes = tuple(int(s) for s in sizes)
        self.layers = []
        n = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if zero_last and i == n - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) * math.sqrt(1.0 / fan_in)
            self.layers.append(
                (ad.Parameter(w, f"{name}.W{i}"), ad.Parameter(np.zeros(fan_out), f"{name}.b{i}"))
            )

    def parameters(self):
        return [p for layer in self.layers for p in layer]

    def __call__(self, x, tape=None, frozen=False):
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = ad.affine(h, _p(w, tape, frozen), _p(b, tape, frozen))
            if i < last:
                h = ad.tanh(h)
        return h


class AffineCoupling:
    """``z = m*x + (1-m) * (x * exp(s(m*x)) + t(m*x))`` with a clamped scale."""

    def __init__(self, dim, mask, rng, hidden=(64, 64), scale_clamp=5.0, name="coupling"):
        self.dim = int(dim)
        self.mask = np.asarray(mask, dtype=np.float64)
        if self.mask.shape != (self.dim,) or not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be a 0/1 vector of length dim")
        self.scale_clamp = float(scale_clamp)
        self.net = MLP([self.dim, *hidden, 2 * self.dim], rng, name=f"{name}.net", zero_last=True)
        eye = np.eye(self.dim)
        zeros = np.zeros((self.dim, self.dim))
        self._pick_scale = np.vstack([eye, zeros])
        self._pick_shift = np.vstack([zeros, eye])

    def parameters(self):
        return self.net.parameters()

    def _scale_shift(self, anchored, tape, frozen):
        h = self.net(anchored, tape, frozen)
        free = 1.0 - self.mask
        c = self.scale_clamp
        s = ad.tanh(ad.matmul(h, self._pick_scale) * (1.0 / c)) * (c * free)
        t = ad.matmul(h, self._pick_shift) * free
        return s, t

    def forward(self, x, tape=None, frozen=False):
        anchored = x * self.mask
        s, t = self._scale_shift(anchored, tape, frozen)
        z = anchored + (x * ad.exp(s) + t) * (1.0 - self.mask)
        return z, ad.sum(s, axis=1)

    def inverse(self, z, tape=None, frozen=False):
        anchored = z * self.mask
        s, t = self._scale_shift(anchored, tape, frozen)
        x = anchored + ((z - t) * ad.exp(-s)) * (1.0 - self.mask)
        return x, -ad.sum(s, axis=1)


class FlowModel:
    """Stack of affine couplings mapping data to a standard-normal latent.

    ``forward`` is the data-to-latent map F; sampling applies F^-1 to
    standard-normal draws.
    """

    def __init__(self, dim=2, n_layers=6, hidden=(64, 64), scale_clamp=5.0, rng=None, seed=0):
        from .data import make_rng

        rng = rng if rng is not None else make_rng(seed, 100)
        self.dim = int(dim)
        self.hidden = tuple(hidden)
        self.scale_clamp = float(scale_clamp)
        self.layers = []
        for i in range(n_layers):
            mask = (np.arange(self.dim) + i) % 2 == 0
            self.layers.append(
                AffineCoupling(self.dim, mask.astype(float), rng, self.hidden, scale_clamp, name=f"flow.{i}")
            )

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def _check_input(self, x):
        v = ad.value_of(x)
        if np.ndim(v) != 2 or np.shape(v)[1] != self.dim:
            raise ValueError(f"expected a (n, {self.dim}) batch, got shape {np.shape(v)}")
        _check_finite(v, "flow input")

    def forward(self, x, tape=None, frozen=False):
        """Return ``(z, log|det dF/dx|)``."""
        if tape is not None and not isinstance(x, ad.Node):
            x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        logdet = 0.0
        h = x
        for i, layer in enumerate(self.layers):
            h, ld = layer.forward(h, tape, frozen)
            _check_finite(h, f"coupling layer {i}")
            logdet = logdet + ld
        return h, logdet

    def inverse(self, z, tape=None, frozen=False):
        """Return ``(x, log|det dF^-1/dz|)``."""
        self._check_input(z)
        logdet = 0.0
        h = z
        for i in reversed(range(len(self.layers))):
            h, ld = self.layers[i].inverse(h, tape, frozen)
            _check_finite(h, f"coupling layer {i} (inverse)")
            logdet = logdet + ld
        return h, logdet

    def base_log_density(self, z):
        return -0.5 * ad.sum(z * z, axis=1) - 0.5 * self.dim * LOG_2PI

    def log_density(self, x, tape=None, frozen=False):
        z, logdet = self.forward(x, tape, frozen)
        return self.base_log_density(z) + logdet

    def sample(self, n, rng, tape=None, frozen=False, return_latent=False):
        if n < 1:
            raise ValueError("n must be positive")
        z = rng.standard_normal((int(n), self.dim))
        x, logdet = self.inverse(z, tape, frozen)
        if return_latent:
            return x, z, logdet
        return x

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def copy(self) -> "FlowModel":
        """Independent deep copy (parameters included)."""
        return copy.deepcopy(self)


class OutputMap:
    """Maps a raw score ``a`` into the conjugate domain of ``f``.

    ``ratio`` is computed straight from ``a`` so it stays positive even where
    ``grad f*(omega(a))`` would round to zero.
    """

    def __init__(self, f: GeneratorFunction):
        if not f.strictly_convex:
            raise ValueError(f"no output map for {f.name}: ratio is not recoverable")
        self.f = f

    def score(self, a):
        k = self.f.kind
        if k is Kind.CHI_SQUARED:
            return (ad.exp(a) - 1.0) * 2.0
        if k is Kind.REVERSE_KL:
            return -ad.exp(-a)
        return a

    def conj_score(self, a):
        """``f*(omega(a))`` in a closed form per kind."""
        k = self.f.kind
        if k is Kind.CHI_SQUARED:
            return ad.exp(a * 2.0) - 1.0
        if k is Kind.REVERSE_KL:
            return a - 1.0
        return ad.exp(a - 1.0)

    def ratio(self, a):
        if self.f.kind is Kind.KL:
            return ad.exp(a - 1.0)
        return ad.exp(a)


class Discriminator:
    """MLP score ``a(x)`` with an output map into ``dom(f*)``.

    With a ``flow`` and a frozen copy ``anchor`` attached, the score becomes
    ``a(x) = h(x) + log q_anchor(x) - log q(x)``, the density terms held
    fixed in every gradient.  The network ``h`` then models the static
    ``log p - log q_anchor`` while the known change of the flow's density is
    applied exactly.
    """

    def __init__(
        self, dim=2, f="chi2", hidden=(128, 128, 128), rng=None, seed=0, flow=None, anchor=None
    ):
        from .data import make_rng

        rng = rng if rng is not None else make_rng(seed, 200)
        self.dim = int(dim)
        self.hidden = tuple(hidden)
        self.f = make_generator(f)
        self.omega = OutputMap(self.f)
        self.net = MLP([self.dim, *self.hidden, 1], rng, name="disc")
        if (flow is None) != (anchor is None):
            raise ValueError("flow and anchor must be given together")
        self.flow = flow
        self.anchor = anchor

    def parameters(self):
        return self.net.parameters()

    def raw(self, x, tape=None, frozen=False):
        if not isinstance(x, ad.Node):
            x = np.asarray(x, dtype=np.float64)
        a = ad.sum(self.net(x, tape, frozen), axis=1)
        if self.flow is not None:
            # the offset only needs a tape when x itself is traced
            t = tape if isinstance(x, ad.Node) else None
            a = a + (
                self.anchor.log_density(x, t, frozen=True) - self.flow.log_density(x, t, frozen=True)
            )
        _check_finite(a, "discriminator activation")
        return a

    def score(self, x, tape=None, frozen=False):
        return self.omega.score(self.raw(x, tape, frozen))

    def ratio(self, x, tape=None, frozen=False):
        return self.omega.ratio(self.raw(x, tape, frozen))

    def dual_objective(self, x_real, x_fake, tape=None, frozen=False):
        """Minibatch ``mean T(x_real) - mean f*(T(x_fake))``."""
        a_real = self.raw(x_real, tape, frozen)
        a_fake = self.raw(x_fake, tape, frozen)
        return ad.mean(self.omega.score(a_real)) - ad.mean(self.omega.conj_score(a_fake))


_MAGIC = b"PRFLOW1"


class CheckpointError(ValueError):
    """Malformed checkpoint or wrong format version."""


def save_checkpoint(path, params) -> None:
    """Write named parameters in the ``PRFLOW1`` little-endian format."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for p in params:
            name = p.name.encode("utf-8")
            arr = np.ascontiguousarray(p.value, dtype="<f8")
            fh.write(struct.pack("<Q", len(name)))
            fh.write(name)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a PRFLOW1 checkpoint")
    pos = len(_MAGIC)
    out = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(data):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out


def assign_parameters(params, values: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in values:
            raise CheckpointError(f"checkpoint has no record for {p.name!r}")
        v = values[p.name]
        if v.shape != p.value.shape:
            raise CheckpointError(f"shape mismatch for {p.name!r}: {v.shape} vs {p.value.shape}")
        p.value[...] = v


def flow_from_checkpoint(values: dict[str, np.ndarray], scale_clamp=5.0) -> FlowModel:
    """Rebuild a flow from checkpoint records alone (architecture is inferred)."""
    idx = sorted({int(k.split(".")[1]) for k in values if k.startswith("flow.")})
    if not idx:
        raise CheckpointError("checkpoint holds no flow parameters")
    w_names = sorted(
        (k for k in values if k.startswith("flow.0.net.W")), key=lambda k: int(k.rsplit("W", 1)[1])
    )
    dim = values[w_names[0]].shape[0]
    hidden = tuple(values[k].shape[1] for k in w_names[:-1])
    flow = FlowModel(dim=dim, n_layers=len(idx), hidden=hidden, scale_clamp=scale_clamp)
    assign_parameters(flow.parameters(), values)
    return flow


def discriminator_from_checkpoint(
    values: dict[str, np.ndarray], f, flow=None, anchor=None
) -> Discriminator | None:
    w_names = sorted(
        (k for k in values if k.startswith("disc.W")), key=lambda k: int(k.rsplit("W", 1)[1])
    )
    if not w_names:
        return None
    dim = values[w_names[0]].shape[0]
    hidden = tuple(values[k].shape[1] for k in w_names[:-1])
    disc = Discriminator(dim=dim, f=f, hidden=hidden, flow=flow, anchor=anchor)
    assign_parameters(disc.parameters(), values)
    return disc


ANCHOR_PREFIX = "anchor."


def checkpoint_parameters(flow: FlowModel, disc: Discriminator | None = None) -> list[ad.Parameter]:
    """Everything needed to restore a trained pair; the anchor flow is stored under ``anchor.``."""
    params = list(flow.parameters())
    if disc is not None:
        params += disc.parameters()
        if disc.anchor is not None:
            params += [ad.Parameter(p.value, ANCHOR_PREFIX + p.name) for p in disc.anchor.parameters()]
    return params


def models_from_checkpoint(values: dict[str, np.ndarray], f, scale_clamp=5.0):
    """``(flow, disc)`` from records written via ``checkpoint_parameters``; ``disc`` may be None."""
    flow = flow_from_checkpoint(values, scale_clamp)
    anchored = {k[len(ANCHOR_PREFIX):]: v for k, v in values.items() if k.startswith(ANCHOR_PREFIX)}
    anchor = flow_from_checkpoint(anchored, scale_clamp) if anchored else None
    disc = discriminator_from_checkpoint(values, f, flow if anchor else None, anchor)
    return flow, disc
