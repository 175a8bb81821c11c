"""Shared test utilities: finite-difference oracles and a micro dual-branch
network small enough for exhaustive gradient checks."""

from __future__ import annotations

import numpy as np

from streamadapt import tensor as T
from streamadapt.model import ParamBundle


def finite_diff_grad(f, t: T.Tensor, h: float) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. tensor t, element by
    element, perturbing t.data in place."""
    g = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(build_loss, tensors, h=1e-5, tol=1e-6):
    """Compare tape gradients of build_loss() against central differences for
    each tensor in `tensors`; returns the worst relative error."""
    loss = build_loss()
    gs = T.grad(loss, list(tensors))
    worst = 0.0
    for t, g in zip(tensors, gs):
        analytic = np.zeros_like(t.data) if g is None else g.data
        fd = finite_diff_grad(lambda: float(build_loss().data), t, h)
        err = rel_err(analytic, fd)
        worst = max(worst, err)
        assert err <= tol, f"gradient mismatch {err:.3e} > {tol:.1e} for tensor shape {t.shape}"
    return worst


class MicroDualNet:
    """Tiny dual-branch network (one 3x3 conv trunk, linear heads) exposing
    the same functional interface as the full model; ~45 parameters so
    meta-gradients can be finite-difference checked end to end."""

    def __init__(self, in_channels=1, image_size=4, num_classes=3, trunk_channels=2):
        self.in_channels = in_channels
        self.image_size = image_size
        self.num_classes = num_classes
        self.trunk_channels = trunk_channels

    def init_params(self, rng) -> ParamBundle:
        c, f = self.in_channels, self.trunk_channels
        def u(shape, fan_in):
            bound = np.sqrt(6.0 / fan_in)
            return T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        named = {
            "trunk.weight": u((f, c, 3, 3), c * 9),
            "trunk.bias": T.Tensor(np.zeros(f), requires_grad=True),
            "trunk.gamma": T.Tensor(np.ones(f), requires_grad=True),
            "trunk.beta": T.Tensor(np.zeros(f), requires_grad=True),
            "ssl_head.weight": u((f, 4), f),
            "ssl_head.bias": T.Tensor(np.zeros(4), requires_grad=True),
            "sup_head.weight": u((f, self.num_classes), f),
            "sup_head.bias": T.Tensor(np.zeros(self.num_classes), requires_grad=True),
        }
        groups = {
            "trunk.weight": "omega", "trunk.bias": "omega",
            "trunk.gamma": "omega", "trunk.beta": "omega",
            "ssl_head.weight": "phi_ssl", "ssl_head.bias": "phi_ssl",
            "sup_head.weight": "phi_sup", "sup_head.bias": "phi_sup",
        }
        return ParamBundle(named, groups)

    def _features(self, x: T.Tensor, p) -> T.Tensor:
        h = T.conv2d(x, p["trunk.weight"], p["trunk.bias"], padding="same")
        h = T.group_norm(h, p["trunk.gamma"], p["trunk.beta"], num_groups=1)
        h = T.relu(h)
        pooled = T.tmean(h, axis=(2, 3))
        return pooled  # (N, f)

    def forward_sup(self, x, p):
        return T.linear(self._features(x, p), p["sup_head.weight"], p["sup_head.bias"])

    def forward_ssl(self, x, p):
        return T.linear(self._features(x, p), p["ssl_head.weight"], p["ssl_head.bias"])

    def ssl_loss(self, x, p):
        n = x.shape[0]
        rots = [T.rotate90(x, k) for k in range(4)]
        batch = T.concat(rots, axis=0)
        labels = np.repeat(np.arange(4), n)
        return T.cross_entropy(self.forward_ssl(batch, p), labels)

    def sup_loss(self, x, y, p):
        return T.cross_entropy(self.forward_sup(x, p), np.asarray(y))

    def predict(self, x, p):
        return np.argmax(self.forward_sup(x, p).data, axis=1)
