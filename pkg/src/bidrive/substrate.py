"""Differentiable tensor primitives, gradient verification, and checkpoint IO.

The network modules in this package are built from a small set of ops:
conv, linear, normalization, relu/tanh/softmax, pooling, and self-attention.
Forward/backward math is delegated to torch; this module pins down the
contracts those ops must satisfy (shape rules, normalization semantics,
attention row-stochasticity) and provides an independent central-difference
gradient checker used to verify every differentiable path.
"""

from __future__ import annotations

import hashlib
import io
import json
import random
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ShapeError(ValueError):
    """Raised when tensor shapes violate an op's precondition."""


class ConfigError(ValueError):
    """Raised when a configuration value is structurally invalid."""


def seed_all(seed: int) -> None:
    """Seed every RNG that can influence parameter init or data order."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# Core ops
# ---------------------------------------------------------------------------


def conv2d(
    input: Tensor,
    weight: Tensor,
    stride: int = 1,
    padding: int = 0,
    padding_mode: str = "zeros",
) -> Tensor:
    """2-D convolution over a (batch, channels, H, W) tensor.

    Output spatial size follows floor((n + 2p - k) / stride) + 1.
    `padding_mode="replicate"` pads with edge values, which keeps spatially
    constant inputs constant (used by the motion stream).
    """
    if input.dim() != 4:
        raise ShapeError(
            f"conv2d input must be rank 4 (batch, channels, H, W), got {tuple(input.shape)}"
        )
    if weight.dim() != 4:
        raise ShapeError(
            f"conv2d weight must be rank 4 (out, in, kH, kW), got {tuple(weight.shape)}"
        )
    if input.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {input.shape[1]} channels, "
            f"weight expects {weight.shape[1]}"
        )
    if padding_mode == "replicate" and padding > 0:
        input = F.pad(input, (padding,) * 4, mode="replicate")
        padding = 0
    return F.conv2d(input, weight, stride=stride, padding=padding)


def layer_norm(input: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axes of `input` to zero mean / unit variance.

    The normalized shape is taken from `gain`: a scalar gain normalizes the
    last axis, a rank-k gain normalizes the last k axes. The epsilon keeps
    zero-variance inputs finite (constant input maps to `bias`).
    """
    gain = torch.as_tensor(gain, dtype=input.dtype)
    bias = torch.as_tensor(bias, dtype=input.dtype)
    n_axes = max(gain.dim(), 1)
    if n_axes > input.dim():
        raise ShapeError(
            f"gain rank {gain.dim()} exceeds input rank {input.dim()}"
        )
    normalized_shape = tuple(input.shape[-n_axes:])
    out = F.layer_norm(input, normalized_shape, eps=eps)
    return out * gain + bias


class ChannelNorm(nn.Module):
    """Per-sample normalization over (C, H, W) with a per-channel affine.

    Layer normalization for conv feature maps: statistics are computed over
    channel and spatial axes of each sample, so the op is independent of
    batch composition.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4:
            raise ShapeError(f"ChannelNorm expects rank 4, got {tuple(x.shape)}")
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        var = x.var(dim=(1, 2, 3), unbiased=False, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.gain.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class MultiheadSelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention over a token sequence.

    Accepts (tokens, dim) or (batch, tokens, dim). Softmax is taken over the
    key axis, so every attention row sums to 1. With no positional signal the
    op is permutation-equivariant in the token axis.
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ConfigError(
                f"token dim {dim} is not divisible by n_heads {n_heads}"
            )
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, tokens: Tensor, return_weights: bool = False):
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        if tokens.dim() != 3:
            raise ShapeError(
                f"attention expects (tokens, dim) or (batch, tokens, dim), got {tuple(tokens.shape)}"
            )
        b, t, d = tokens.shape
        if d != self.dim:
            raise ShapeError(f"token dim {d} does not match configured dim {self.dim}")
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        shape = (b, t, self.n_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / self.head_dim**0.5
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, t, d)
        out = self.proj(out)
        if squeeze:
            out = out.squeeze(0)
            weights = weights.squeeze(0)
        if return_weights:
            return out, weights
        return out


def multihead_attention(tokens: Tensor, n_heads: int, module: MultiheadSelfAttention | None = None) -> Tensor:
    """Functional self-attention; builds a seeded module when none is given."""
    if module is None:
        dim = tokens.shape[-1]
        gen_state = torch.get_rng_state()
        torch.manual_seed(0)
        module = MultiheadSelfAttention(dim, n_heads).to(tokens.dtype)
        torch.set_rng_state(gen_state)
    return module(tokens)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    passed: bool
    worst_index: int = -1
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed


def _relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    diff = abs(analytic - numeric)
    return diff / scale if scale > 1e-6 else diff


def grad_check(
    f,
    point: Tensor,
    tol: float = 1e-3,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar `f` against central differences.

    `point` is evaluated in double precision. When `max_coords` is set, a
    seeded random subset of coordinates is checked; otherwise all of them.
    """
    x = point.detach().double().clone().requires_grad_(True)
    value = f(x)
    if value.dim() != 0:
        raise ShapeError("grad_check requires a scalar-valued function")
    (analytic,) = torch.autograd.grad(value, x)
    if not torch.isfinite(analytic).all():
        return GradCheckReport(
            max_rel_error=float("inf"),
            n_checked=0,
            passed=False,
            message="non-finite analytic gradient",
        )
    flat = x.detach().flatten()
    n = flat.numel()
    indices = list(range(n))
    if max_coords is not None and max_coords < n:
        rng = random.Random(seed)
        indices = rng.sample(indices, max_coords)
    analytic_flat = analytic.flatten()
    worst = 0.0
    worst_idx = -1
    base = flat.clone()
    for i in indices:
        h = eps * max(1.0, abs(float(base[i])))
        pert = base.clone()
        pert[i] += h
        with torch.no_grad():
            hi = float(f(pert.view_as(x)))
        pert[i] -= 2 * h
        with torch.no_grad():
            lo = float(f(pert.view_as(x)))
        numeric = (hi - lo) / (2 * h)
        err = _relative_error(float(analytic_flat[i]), numeric)
        if err > worst:
            worst, worst_idx = err, i
    return GradCheckReport(
        max_rel_error=worst,
        n_checked=len(indices),
        passed=worst <= tol,
        worst_index=worst_idx,
    )


def grad_check_model(
    model: nn.Module,
    loss_fn,
    tol: float = 1e-3,
    eps: float = 1e-5,
    max_coords: int | None = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Finite-difference check of `loss_fn(model)` w.r.t. model parameters.

    The model is converted to double precision in place. `loss_fn` must be a
    pure function of the model's parameters.
    """
    model.double()
    params = [p for p in model.parameters() if p.requires_grad]
    vec = torch.nn.utils.parameters_to_vector(params).detach().clone()

    def apply_and_eval(v: Tensor) -> Tensor:
        torch.nn.utils.vector_to_parameters(v, params)
        return loss_fn(model)

    # Analytic gradient via one backward pass.
    torch.nn.utils.vector_to_parameters(vec, params)
    loss = loss_fn(model)
    grads = torch.autograd.grad(loss, params)
    analytic = torch.cat([g.flatten() for g in grads])
    if not torch.isfinite(analytic).all():
        return GradCheckReport(float("inf"), 0, False, message="non-finite gradient")

    n = vec.numel()
    indices = list(range(n))
    if max_coords is not None and max_coords < n:
        rng = random.Random(seed)
        indices = rng.sample(indices, max_coords)
    worst = 0.0
    worst_idx = -1
    for i in indices:
        h = eps * max(1.0, abs(float(vec[i])))
        pert = vec.clone()
        pert[i] += h
        with torch.no_grad():
            hi = float(apply_and_eval(pert))
        pert[i] -= 2 * h
        with torch.no_grad():
            lo = float(apply_and_eval(pert))
        numeric = (hi - lo) / (2 * h)
        err = _relative_error(float(analytic[i]), numeric)
        if err > worst:
            worst, worst_idx = err, i
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(vec, params)
    return GradCheckReport(worst, len(indices), worst <= tol, worst_idx)


# ---------------------------------------------------------------------------
# Parameter bookkeeping
# ---------------------------------------------------------------------------


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_names(module: nn.Module) -> list[str]:
    return [name for name, _ in module.named_parameters()]


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------
#
# A checkpoint is a zip archive with two entries:
#   manifest.json  - {"format_version": 1, "config_hash": str,
#                     "params": [{"name", "shape", "dtype"}, ...],
#                     "extra": {...}}
#   params.bin     - raw little-endian float32 payloads concatenated in
#                    manifest order.

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(
    state: "OrderedDict[str, Tensor]",
    path,
    config_hash: str = "",
    extra: dict | None = None,
) -> None:
    entries = []
    payload = io.BytesIO()
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        payload.write(arr.tobytes())
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": config_hash,
        "params": entries,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr("params.bin", payload.getvalue())


def load_checkpoint(path) -> tuple["OrderedDict[str, Tensor]", dict]:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint format {manifest.get('format_version')!r}"
            )
        raw = zf.read("params.bin")
    state: "OrderedDict[str, Tensor]" = OrderedDict()
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise CheckpointError(f"payload truncated at parameter {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError("payload has trailing bytes not described by manifest")
    return state, manifest


def config_sha256(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()
