"""Feed-forward encoder/decoder assembly for the three prior families.

The inference model is hierarchical: group i's logits see the data and
every earlier group's relaxed sample, and nothing later.  The generative
side offers a factorial prior, a directed two-group prior conditioned
through the relaxed samples, or a bipartite Boltzmann machine over two
groups.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .smoothing import (
    BinaryConcrete, ExpMixture, LogisticMixture, SmoothingKind, SpikeExp,
    binary_concrete_sample, component_inverse_cdf, exp_mixture_inverse_cdf,
    logistic_mixture_inverse_cdf, spike_exp_inverse_cdf, uniform_open,
)

__all__ = [
    "ModelSpec", "Model", "GroupSample", "init_model", "wrap_params",
    "group_logits", "prior_group_logits", "encode", "decode", "sample_prior",
    "param_count", "save_checkpoint", "load_checkpoint", "CheckpointError",
]

CKPT_MAGIC = b"ODVAE"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint container."""


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "nonlinear"
    groups: tuple[int, ...] = (200,)
    prior: str = "factorial"
    smoothing: SmoothingKind = field(default_factory=lambda: ExpMixture(8.0))
    pixels: int = 784
    hidden: int = 200
    init_output_bias: bool = True

    def __post_init__(self):
        if self.arch not in ("linear", "nonlinear"):
            raise ValueError(f"unknown arch '{self.arch}'")
        if self.prior not in ("factorial", "directed", "rbm"):
            raise ValueError(f"unknown prior '{self.prior}'")
        if self.prior == "rbm" and len(self.groups) != 2:
            raise ValueError("a Boltzmann prior couples exactly two groups")
        if any(g < 1 for g in self.groups) or self.pixels < 1:
            raise ValueError("group widths and pixel count must be positive")


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]


@dataclass
class GroupSample:
    """One latent group's posterior logits and its relaxed draw."""
    logits: Tensor
    zeta: Tensor


def _layer_dims(spec: ModelSpec, n_in: int, n_out: int) -> list[tuple[int, int]]:
    if spec.arch == "linear":
        return [(n_in, n_out)]
    return [(n_in, spec.hidden), (spec.hidden, spec.hidden), (spec.hidden, n_out)]


def _net_names(spec: ModelSpec, prefix: str, n_in: int, n_out: int):
    for idx, (a, b) in enumerate(_layer_dims(spec, n_in, n_out)):
        yield f"{prefix}/W{idx}", (a, b)
        yield f"{prefix}/b{idx}", (b,)


def _net_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    offset = 0
    for i, width in enumerate(spec.groups):
        shapes.update(_net_names(spec, f"enc{i}", spec.pixels + offset, width))
        offset += width
    shapes.update(_net_names(spec, "dec", offset, spec.pixels))
    if spec.prior == "factorial":
        for i, width in enumerate(spec.groups):
            shapes[f"prior/logits{i}"] = (width,)
    elif spec.prior == "directed":
        shapes["prior/logits0"] = (spec.groups[0],)
        running = spec.groups[0]
        for i in range(1, len(spec.groups)):
            shapes.update(_net_names(spec, f"prior/cond{i}", running, spec.groups[i]))
            running += spec.groups[i]
    else:  # rbm
        n1, n2 = spec.groups
        shapes["rbm/a1"] = (n1,)
        shapes["rbm/a2"] = (n2,)
        shapes["rbm/w"] = (n1, n2)
    return shapes


def init_model(spec: ModelSpec, seed: int,
               pixel_mean: np.ndarray | None = None) -> Model:
    """Fan-in scaled uniform weights, zero biases, seeded and reproducible.

    When pixel means are given, the decoder's output bias starts at their
    logits so early reconstructions match the dataset's base rates.
    """
    rng = np.random.default_rng(np.random.Philox(seed))
    params: dict[str, np.ndarray] = {}
    for name, shape in _net_shapes(spec).items():
        if "/W" in name or name == "rbm/w":
            fan_in = shape[0]
            params[name] = rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)
        else:
            params[name] = np.zeros(shape)
    if spec.init_output_bias and pixel_mean is not None:
        mean = np.clip(np.asarray(pixel_mean, dtype=np.float64), 1e-3, 1.0 - 1e-3)
        last = len(_layer_dims(spec, 1, 1)) - 1
        params[f"dec/b{last}"] = np.log(mean) - np.log1p(-mean)
    return Model(spec, params)


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for shape in _net_shapes(spec).values())


def wrap_params(tape, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Tape leaves when training; plain constants when tape is None."""
    if tape is None:
        return {name: Tensor(value) for name, value in params.items()}
    return {name: tape.leaf(value) for name, value in params.items()}


def _apply_net(spec: ModelSpec, pt: dict[str, Tensor], prefix: str,
               x: Tensor) -> Tensor:
    n_layers = 1 if spec.arch == "linear" else 3
    h = x
    for idx in range(n_layers):
        h = ad.affine(h, pt[f"{prefix}/W{idx}"], pt[f"{prefix}/b{idx}"])
        if idx < n_layers - 1:
            h = ad.tanh(h)
    return h


def group_logits(spec: ModelSpec, pt: dict[str, Tensor], i: int,
                 x, zetas: list[Tensor]) -> Tensor:
    """Posterior logits for group i given data and earlier relaxed draws."""
    x = as_tensor(x)
    inputs = [x] + list(zetas[:i])
    joined = inputs[0] if len(inputs) == 1 else ad.concat(inputs, axis=1)
    return _apply_net(spec, pt, f"enc{i}", joined)


def prior_group_logits(spec: ModelSpec, pt: dict[str, Tensor], i: int,
                       zetas: list[Tensor]) -> Tensor:
    """Prior logits for group i (factorial or directed priors)."""
    if spec.prior == "factorial":
        return pt[f"prior/logits{i}"]
    if spec.prior == "directed":
        if i == 0:
            return pt["prior/logits0"]
        prev = zetas[0] if i == 1 else ad.concat(list(zetas[:i]), axis=1)
        return _apply_net(spec, pt, f"prior/cond{i}", prev)
    raise ValueError("Boltzmann prior has no per-group logits; use rbm_kl")


def _draw_zeta(g: Tensor, rho: np.ndarray, kind: SmoothingKind) -> Tensor:
    if isinstance(kind, ExpMixture):
        return exp_mixture_inverse_cdf(ad.sigmoid(g), rho, kind.beta)
    if isinstance(kind, LogisticMixture):
        return logistic_mixture_inverse_cdf(ad.sigmoid(g), rho,
                                            kind.mu0, kind.mu1, kind.s)
    if isinstance(kind, SpikeExp):
        return spike_exp_inverse_cdf(ad.sigmoid(g), rho, kind.beta)
    if isinstance(kind, BinaryConcrete):
        return binary_concrete_sample(g, rho, kind.lam)
    raise ValueError(f"unknown smoothing kind {type(kind).__name__}")


def encode(spec: ModelSpec, pt: dict[str, Tensor], x,
           noise: list[np.ndarray],
           kind: SmoothingKind | None = None) -> list[GroupSample]:
    """Run the hierarchical encoder with externally supplied uniforms.

    Passing the noise explicitly keeps every forward pass a deterministic
    function of (parameters, data, noise), which both the reproducibility
    contract and finite-difference checks rely on.
    """
    kind = kind or spec.smoothing
    out: list[GroupSample] = []
    zetas: list[Tensor] = []
    for i in range(len(spec.groups)):
        g = group_logits(spec, pt, i, x, zetas)
        zeta = _draw_zeta(g, noise[i], kind)
        out.append(GroupSample(g, zeta))
        zetas.append(zeta)
    return out


def decode(spec: ModelSpec, pt: dict[str, Tensor],
           zetas: list[Tensor]) -> Tensor:
    """Pixel logits from the concatenated relaxed samples."""
    joined = zetas[0] if len(zetas) == 1 else ad.concat(list(zetas), axis=1)
    return _apply_net(spec, pt, "dec", joined)


def sample_prior(model: Model, count: int, rng: np.random.Generator,
                 gibbs_burnin: int = 200, group_repeat: int = 1) -> dict:
    """Draw z from the prior, relax through r(zeta|z), decode to pixels.

    ``group_repeat`` > 1 keeps each drawn z fixed for that many consecutive
    samples while redrawing zeta, exposing what the discrete code pins down
    versus what the relaxation varies.
    """
    spec = model.spec
    pt = wrap_params(None, model.params)
    kind = spec.smoothing
    n_distinct = -(-count // group_repeat) if count else 0
    if count == 0:
        zs = [np.zeros((0, w)) for w in spec.groups]
    elif spec.prior == "rbm":
        from .rbm import RbmParams, init_chains, gibbs_sweep
        rp = RbmParams(model.params["rbm/a1"], model.params["rbm/a2"],
                       model.params["rbm/w"])
        chains = init_chains(rp, n_distinct, seed=int(rng.integers(2 ** 31)))
        gibbs_sweep(rp, chains, sweeps=gibbs_burnin)
        zs = [chains.z1, chains.z2]
    else:
        zs = []
        for i in range(len(spec.groups)):
            gp = prior_group_logits(spec, pt, i, [Tensor(z) for z in zs]).data
            mu = np.broadcast_to(expit(gp), (n_distinct, spec.groups[i]))
            zs.append((rng.uniform(size=mu.shape) < mu).astype(np.float64))

    zs = [np.repeat(z, group_repeat, axis=0)[:count] for z in zs]
    zetas = [component_inverse_cdf(z, uniform_open(rng, z.shape), kind)
             for z in zs]
    logits = decode(spec, pt, [Tensor(z) for z in zetas]).data
    return {"z": zs, "zeta": zetas, "probs": expit(logits)}


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, embedded text, named float64 arrays

def save_checkpoint(path, text: str, arrays: dict[str, np.ndarray]) -> None:
    encoded = text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", len(arrays)))
        for name, value in arrays.items():
            value = np.asarray(value, dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", value.ndim))
            for extent in value.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(value.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:5]!r}")
    pos = 5

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals[0] if len(vals) == 1 else vals

    version = take("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    text_len = take("<I")
    if pos + text_len > len(blob):
        raise CheckpointError("truncated checkpoint text")
    text = blob[pos:pos + text_len].decode("utf-8")
    pos += text_len
    arrays: dict[str, np.ndarray] = {}
    for _ in range(take("<I")):
        name_len = take("<I")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = take("<I")
        shape = tuple(take("<Q") for _ in range(rank))
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8 if rank else 8
        if pos + n_bytes > len(blob):
            raise CheckpointError(f"truncated data for '{name}'")
        flat = np.frombuffer(blob[pos:pos + n_bytes], dtype="<f8")
        pos += n_bytes
        arrays[name] = flat.reshape(shape).astype(np.float64)
    return text, arrays
