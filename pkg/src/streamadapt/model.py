"""Dual-branch convolutional network and its parameter bundle.

The parameter set splits into three named groups:

* ``omega``    - shared feature extractor (first two conv blocks)
* ``phi_sup``  - supervised branch (third conv block + two fc layers)
* ``phi_ssl``  - self-supervised branch (replica third conv block + two fc
  layers ending in 4 rotation logits)

Adaptation updates only (omega, phi_ssl); predictions always run through the
frozen-at-adaptation-time phi_sup.  All forwards are functional: they take an
explicit name->Tensor mapping, so update chains can stay differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

GROUPS = ("omega", "phi_ssl", "phi_sup")
NUM_ROTATIONS = 4


class ParamBundle:
    """Ordered name->Tensor map with a group label per parameter."""

    def __init__(self, named: dict[str, Tensor], groups: dict[str, str], version: int = 0):
        if set(named) != set(groups):
            raise ValueError("parameter names and group labels must match exactly")
        for name, g in groups.items():
            if g not in GROUPS:
                raise ValueError(f"unknown group {g!r} for parameter {name!r}")
        self._named = dict(named)
        self._groups = dict(groups)
        self.version = version

    def __len__(self):
        return len(self._named)

    def __contains__(self, name):
        return name in self._named

    def __getitem__(self, name) -> Tensor:
        return self._named[name]

    def names(self, group: str | None = None):
        if group is None:
            return list(self._named)
        return [n for n in self._named if self._groups[n] == group]

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def items(self, *groups):
        if not groups:
            return list(self._named.items())
        return [(n, t) for n, t in self._named.items() if self._groups[n] in groups]

    def mapping(self) -> dict[str, Tensor]:
        return dict(self._named)

    def param_count(self) -> int:
        return int(sum(t.size for t in self._named.values()))

    def clone(self, requires_grad: bool | None = None) -> "ParamBundle":
        named = {}
        for n, t in self._named.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            named[n] = Tensor(t.data.copy(), requires_grad=rg, dtype=t.data.dtype)
        return ParamBundle(named, dict(self._groups))

    def zero_grads(self):
        for t in self._named.values():
            t.grad = None

    def bump_version(self):
        self.version += 1

    def state_equal(self, other: "ParamBundle") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self._named[n].data, other[n].data) for n in self._named)


@dataclass(frozen=True)
class ConvNetSpec:
    """Architecture hyperparameters.  The reference configuration (defaults)
    is three 128-filter 5x5 conv blocks with GroupNorm(8) and 200-wide fc
    hidden layers on 32x32 RGB inputs."""

    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10
    conv_channels: int = 128
    kernel_size: int = 5
    gn_groups: int = 8
    fc_hidden: int = 200
    gn_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % 8 != 0:
            raise ValueError(f"image_size must be divisible by 8, got {self.image_size}")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.conv_channels % self.gn_groups != 0:
            raise ValueError(
                f"conv_channels {self.conv_channels} not divisible by gn_groups {self.gn_groups}"
            )
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")

    @property
    def branch_flat_dim(self) -> int:
        # three 2x2 pools: conv1 -> /2, conv2 -> /4, branch conv -> /8
        side = self.image_size // 8
        return self.conv_channels * side * side


def _kaiming_uniform(rng, shape, fan_in):
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


class DualBranchConvNet:
    """Feature extractor + supervised branch + rotation-prediction branch."""

    def __init__(self, spec: ConvNetSpec):
        self.spec = spec

    # ---- parameters ------------------------------------------------------
    def init_params(self, rng: np.random.Generator) -> ParamBundle:
        s = self.spec
        f, k = s.conv_channels, s.kernel_size

        def conv_block(c_in):
            return {
                "weight": _kaiming_uniform(rng, (f, c_in, k, k), c_in * k * k),
                "bias": np.zeros(f),
                "gamma": np.ones(f),
                "beta": np.zeros(f),
            }

        def fc(n_in, n_out):
            return {"weight": _kaiming_uniform(rng, (n_in, n_out), n_in), "bias": np.zeros(n_out)}

        raw = {}
        for prefix, block in (("conv1", conv_block(s.in_channels)), ("conv2", conv_block(f))):
            for part, arr in block.items():
                raw[f"{prefix}.{part}"] = arr
        sup3 = conv_block(f)
        for part, arr in sup3.items():
            raw[f"sup_conv3.{part}"] = arr
        for part, arr in fc(s.branch_flat_dim, s.fc_hidden).items():
            raw[f"sup_fc1.{part}"] = arr
        for part, arr in fc(s.fc_hidden, s.num_classes).items():
            raw[f"sup_fc2.{part}"] = arr
        # ssl conv block starts as an exact copy of the supervised third conv
        for part, arr in sup3.items():
            raw[f"ssl_conv3.{part}"] = np.array(arr, copy=True)
        for part, arr in fc(s.branch_flat_dim, s.fc_hidden).items():
            raw[f"ssl_fc1.{part}"] = arr
        for part, arr in fc(s.fc_hidden, NUM_ROTATIONS).items():
            raw[f"ssl_fc2.{part}"] = arr

        named = {n: Tensor(a, requires_grad=True) for n, a in raw.items()}
        groups = {}
        for name in named:
            if name.startswith(("conv1.", "conv2.")):
                groups[name] = "omega"
            elif name.startswith("ssl_"):
                groups[name] = "phi_ssl"
            else:
                groups[name] = "phi_sup"
        return ParamBundle(named, groups)

    def param_count(self) -> int:
        s = self.spec
        f, k, h = s.conv_channels, s.kernel_size, s.fc_hidden
        conv = lambda c_in: f * c_in * k * k + f + 2 * f  # weight + bias + gn affine
        fc = lambda a, b: a * b + b
        total = conv(s.in_channels) + conv(f)                       # omega
        total += conv(f) + fc(s.branch_flat_dim, h) + fc(h, s.num_classes)   # phi_sup
        total += conv(f) + fc(s.branch_flat_dim, h) + fc(h, NUM_ROTATIONS)   # phi_ssl
        return total

    # ---- forward passes ---------------------------------------------------
    def _check_input(self, x: Tensor):
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.image_size, s.image_size):
            raise ShapeError(
                "forward",
                f"expected (N,{s.in_channels},{s.image_size},{s.image_size}), got {x.shape}",
            )

    def _block(self, x, p, prefix):
        s = self.spec
        h = T.conv2d(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"], padding="same")
        h = T.group_norm(h, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], s.gn_groups, eps=s.gn_eps)
        return T.max_pool2d(T.relu(h), 2)

    def forward_features(self, x: Tensor, p) -> Tensor:
        self._check_input(x)
        return self._block(self._block(x, p, "conv1"), p, "conv2")

    def _branch(self, feats, p, conv_prefix, fc1, fc2):
        h = self._block(feats, p, conv_prefix)
        h = T.reshape(h, (h.shape[0], self.spec.branch_flat_dim))
        h = T.relu(T.linear(h, p[f"{fc1}.weight"], p[f"{fc1}.bias"]))
        return T.linear(h, p[f"{fc2}.weight"], p[f"{fc2}.bias"])

    def forward_sup(self, x: Tensor, p) -> Tensor:
        return self._branch(self.forward_features(x, p), p, "sup_conv3", "sup_fc1", "sup_fc2")

    def forward_ssl(self, x: Tensor, p) -> Tensor:
        return self._branch(self.forward_features(x, p), p, "ssl_conv3", "ssl_fc1", "ssl_fc2")

    # ---- losses -----------------------------------------------------------
    def ssl_loss(self, x: Tensor, p) -> Tensor:
        """Rotation-prediction loss: mean cross-entropy over all four quarter
        turns of every image.  Never reads class labels."""
        self._check_input(x)
        n = x.shape[0]
        batch = T.concat([T.rotate90(x, k) for k in range(NUM_ROTATIONS)], axis=0)
        labels = np.repeat(np.arange(NUM_ROTATIONS), n)
        return T.cross_entropy(self.forward_ssl(batch, p), labels)

    def sup_loss(self, x: Tensor, y, p) -> Tensor:
        return T.cross_entropy(self.forward_sup(x, p), np.asarray(y))

    def predict(self, x: Tensor, p) -> np.ndarray:
        """Class predictions; argmax ties resolve to the lowest index."""
        with T.no_grad():
            logits = self.forward_sup(x, p)
        return np.argmax(logits.data, axis=1)
