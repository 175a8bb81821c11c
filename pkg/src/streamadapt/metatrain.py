"""Meta-training by simulating online self-supervised adaptation.

Each iteration: build a training stream of D domain blocks x K samples, run
L = D*K sequential single-sample self-supervised updates on (omega, phi_ssl)
starting from the current initialization, then score the adapted feature
extractor on a fresh labeled support set with both heads and descend the
initialization on that outer loss.

Two inner-loop modes: ``exact`` keeps the update chain on the tape so the
outer gradient includes second-order terms; ``first_order`` (default)
treats the adapted parameters as constants, which is the cheap approximation
used for real training runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .model import ParamBundle
from .optim import apply_sgd
from .streams import Stream, SupportSet, build_support_set, build_training_stream
from .tensor import Tensor


class NumericError(RuntimeError):
    """A loss or gradient stopped being finite."""


@dataclass
class MetaConfig:
    inner_lr: float = 0.003
    outer_lr: float = 0.01
    inner_lr_final: float = 0.0003
    outer_lr_final: float = 0.001
    epochs: int = 10
    lr_drop_epoch: int = 8              # epochs >= this index use the final rates
    iterations_per_epoch: int = 0       # 0 -> dataset_size // support size
    domains_per_stream: int = 3         # D
    samples_per_domain: int = 5         # K
    extra_domains: int = 20             # D'
    first_order: bool = True
    support_reuse: bool = False         # ablation: support = the inner samples
    support_no_extra: bool = False      # ablation: D' = 0
    batch_inner: bool = False           # ablation: one summed update, no sequence
    checkpoint_every: int = 0           # epochs; 0 -> final checkpoint only

    def __post_init__(self):
        if not self.inner_lr > 0 or not self.inner_lr_final > 0:
            raise ValueError(f"inner learning rates must be > 0, got {self.inner_lr}, {self.inner_lr_final}")
        if not self.outer_lr > 0 or not self.outer_lr_final > 0:
            raise ValueError(f"outer learning rates must be > 0, got {self.outer_lr}, {self.outer_lr_final}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0 <= self.lr_drop_epoch <= max(self.epochs, 1):
            raise ValueError(f"lr_drop_epoch {self.lr_drop_epoch} outside [0, {self.epochs}]")
        if self.domains_per_stream < 0 or self.samples_per_domain < 1 or self.extra_domains < 0:
            raise ValueError("invalid stream sizing (D >= 0, K >= 1, extras >= 0)")
        if self.support_reuse and self.support_no_extra:
            raise ValueError("support_reuse already implies no extra domains")

    @property
    def steps_per_stream(self) -> int:  # L
        return self.domains_per_stream * self.samples_per_domain

    def support_size(self) -> int:
        if self.support_reuse:
            return self.steps_per_stream
        extras = 0 if self.support_no_extra else self.extra_domains
        return self.steps_per_stream + extras


@dataclass
class InnerTrajectory:
    """Result of simulating adaptation along one stream."""

    ssl_losses: list[float]
    theta_l: dict[str, Tensor] | None   # adapted mapping; phi_sup entries untouched
    mode: str                           # exact | first_order | batch | identity
    theta0_version: int
    inner_ids: np.ndarray
    updates: int
    consumed: bool = False

    def __len__(self):
        return len(self.ssl_losses)


def _check_finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NumericError(f"{what} is not finite ({value})")
    return value


def ssl_update_step(model, bundle: ParamBundle, x: Tensor, lr: float) -> float:
    """One self-supervised descent step on (omega, phi_ssl), in place.

    This is the single code path shared by meta-training's inner loop and
    per-sample test-time adaptation.  lr == 0 evaluates the loss and leaves
    every parameter bit untouched.
    """
    if lr == 0.0:
        with T.no_grad():
            loss = model.ssl_loss(x, bundle.mapping())
        return _check_finite(loss.item(), "ssl loss")
    loss = model.ssl_loss(x, bundle.mapping())
    T.backward(loss)
    apply_sgd(bundle.items("omega", "phi_ssl"), lr)
    bundle.bump_version()
    return _check_finite(loss.item(), "ssl loss")


def inner_loop(model, theta0: ParamBundle, stream: Stream, inner_lr: float,
               exact: bool = False) -> InnerTrajectory:
    """Sequential single-sample adaptation over the whole stream.

    Never mutates theta0.  Returns the adapted parameter mapping: exactly
    L = len(stream) updates applied to (omega, phi_ssl); phi_sup is carried
    through untouched.
    """
    if len(stream) == 0:
        raise ValueError("inner_loop: empty stream")
    if inner_lr < 0:
        raise ValueError(f"inner_lr must be >= 0, got {inner_lr}")

    if inner_lr == 0.0:
        # trajectory degenerates to the identity in both modes
        losses = []
        with T.no_grad():
            for t in range(len(stream)):
                x = Tensor(stream.xs[t : t + 1])
                losses.append(_check_finite(model.ssl_loss(x, theta0.mapping()).item(), "ssl loss"))
        return InnerTrajectory(losses, theta0.mapping(), "identity", theta0.version,
                               stream.clean_ids.copy(), updates=0)

    if exact:
        params = theta0.mapping()
        adapt_names = theta0.names("omega") + theta0.names("phi_ssl")
        losses = []
        for t in range(len(stream)):
            x = Tensor(stream.xs[t : t + 1])
            loss = model.ssl_loss(x, params)
            grads = T.grad(loss, [params[n] for n in adapt_names], create_graph=True)
            for name, g in zip(adapt_names, grads):
                if g is not None:
                    params[name] = params[name] - inner_lr * g
            losses.append(_check_finite(loss.item(), "ssl loss"))
        return InnerTrajectory(losses, params, "exact", theta0.version,
                               stream.clean_ids.copy(), updates=len(stream))

    work = theta0.clone(requires_grad=True)
    losses = [
        ssl_update_step(model, work, Tensor(stream.xs[t : t + 1]), inner_lr)
        for t in range(len(stream))
    ]
    return InnerTrajectory(losses, work.mapping(), "first_order", theta0.version,
                           stream.clean_ids.copy(), updates=len(stream))


def batch_inner_update(model, theta0: ParamBundle, stream: Stream, inner_lr: float) -> InnerTrajectory:
    """Sequence-free variant: one update on the summed self-supervised loss
    of the whole stream (replaces the L sequential steps)."""
    if len(stream) == 0:
        raise ValueError("batch_inner_update: empty stream")
    work = theta0.clone(requires_grad=True)
    x = Tensor(stream.xs)
    loss = model.ssl_loss(x, work.mapping()) * float(len(stream))  # sum over steps
    if inner_lr == 0.0:
        per_step = _check_finite(loss.item(), "ssl loss") / len(stream)
        return InnerTrajectory([per_step] * len(stream), theta0.mapping(), "identity",
                               theta0.version, stream.clean_ids.copy(), updates=0)
    T.backward(loss)
    apply_sgd(work.items("omega", "phi_ssl"), inner_lr)
    work.bump_version()
    per_step = _check_finite(loss.item(), "ssl loss") / len(stream)
    return InnerTrajectory([per_step] * len(stream), work.mapping(), "batch",
                           theta0.version, stream.clean_ids.copy(), updates=1)


def outer_loss(model, trajectory: InnerTrajectory, support: SupportSet) -> Tensor:
    """Mean over the support set of supervised loss through the adapted
    features with the never-adapted supervised head, plus self-supervised
    loss through the adapted ssl branch.  The trajectory mapping already
    carries phi_sup through the inner loop untouched."""
    if len(support) == 0:
        raise ValueError("outer_loss: empty support set")
    mapping = trajectory.theta_l
    x = Tensor(support.xs)
    sup = model.sup_loss(x, support.ys, mapping)
    ssl = model.ssl_loss(x, mapping)
    return sup + ssl


def outer_step(theta0: ParamBundle, loss: Tensor, outer_lr: float, trajectory: InnerTrajectory) -> float:
    """Descend the initialization on the outer loss and retire the trajectory."""
    if trajectory.consumed:
        raise RuntimeError("outer_step: trajectory already consumed")
    if trajectory.theta0_version != theta0.version:
        raise RuntimeError(
            "outer_step: stale trajectory (initialization changed since it was built)"
        )
    value = _check_finite(loss.item(), "outer loss")
    T.backward(loss)
    if trajectory.mode in ("exact", "identity"):
        apply_sgd(theta0.items(), outer_lr)
    else:
        # first-order: gradients live on the adapted copies; apply them to
        # the initialization (phi_sup copies equal theta0's, so this is the
        # plain first-order meta-gradient)
        for name, p in theta0.items():
            g = trajectory.theta_l[name].grad
            if g is None:
                continue
            p.data -= outer_lr * g.data
            trajectory.theta_l[name].grad = None
    theta0.zero_grads()
    theta0.bump_version()
    trajectory.consumed = True
    trajectory.theta_l = None  # adapted parameters are discarded after the step
    return value


def _support_from_stream(stream: Stream) -> SupportSet:
    return SupportSet(stream.xs.copy(), stream.ys.copy(), stream.domain_idx.copy(),
                      stream.clean_ids.copy())


@dataclass
class TrainResult:
    bundle: ParamBundle
    log: list[dict] = field(default_factory=list)


def train(model, dataset, source, cfg: MetaConfig, rng: np.random.Generator,
          init: ParamBundle | None = None, log_path=None, checkpoint_dir=None) -> TrainResult:
    """Full meta-training driver.  `rng` drives stream/support sampling; the
    initialization comes from `init` (or `model.init_params(rng)`)."""
    theta0 = init.clone() if init is not None else model.init_params(rng)
    iters = cfg.iterations_per_epoch or max(1, len(dataset) // max(cfg.support_size(), 1))
    log: list[dict] = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            dropped = epoch >= cfg.lr_drop_epoch
            inner_lr = cfg.inner_lr_final if dropped else cfg.inner_lr
            outer_lr = cfg.outer_lr_final if dropped else cfg.outer_lr
            for it in range(iters):
                t0 = time.perf_counter()
                if cfg.domains_per_stream == 0:
                    # degenerate mode: no inner simulation, pure joint training
                    trajectory = InnerTrajectory([], theta0.mapping(), "identity",
                                                 theta0.version, np.empty(0, np.int64), 0)
                    support = build_support_set(dataset, source, [], cfg.extra_domains,
                                                cfg.samples_per_domain, [], rng)
                else:
                    stream = build_training_stream(dataset, source, cfg.domains_per_stream,
                                                   cfg.samples_per_domain, rng)
                    if cfg.batch_inner:
                        trajectory = batch_inner_update(model, theta0, stream, inner_lr)
                    else:
                        trajectory = inner_loop(model, theta0, stream, inner_lr,
                                                exact=not cfg.first_order)
                    if cfg.support_reuse:
                        support = _support_from_stream(stream)
                    else:
                        support = build_support_set(
                            dataset, source, stream.schedule.domain_order,
                            0 if cfg.support_no_extra else cfg.extra_domains,
                            cfg.samples_per_domain, stream.clean_ids, rng,
                        )
                inner_losses = list(trajectory.ssl_losses)
                loss = outer_loss(model, trajectory, support)
                value = outer_step(theta0, loss, outer_lr, trajectory)
                record = {
                    "epoch": epoch,
                    "iteration": epoch * iters + it,
                    "inner_lr": inner_lr,
                    "outer_lr": outer_lr,
                    "inner_loss_first": inner_losses[0] if inner_losses else None,
                    "inner_loss_last": inner_losses[-1] if inner_losses else None,
                    "outer_loss": value,
                    "seconds": round(time.perf_counter() - t0, 4),
                }
                log.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(theta0, Path(checkpoint_dir) / f"epoch{epoch + 1}.ckpt")
    finally:
        if log_file:
            log_file.close()
    if checkpoint_dir:
        save_checkpoint(theta0, Path(checkpoint_dir) / "final.ckpt")
    return TrainResult(theta0, log)


# ---------------------------------------------------------------------------
# baseline trainer: plain joint (or supervised-only) minibatch training
# ---------------------------------------------------------------------------


@dataclass
class JointConfig:
    lr: float = 0.01
    lr_final: float = 0.001
    epochs: int = 10
    lr_drop_epoch: int = 8
    iterations_per_epoch: int = 50
    batch_size: int = 35
    use_ssl: bool = True   # False -> supervised-only ("vanilla") baseline

    def __post_init__(self):
        if not self.lr > 0 or not self.lr_final > 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1 or self.iterations_per_epoch < 1:
            raise ValueError("batch_size and iterations_per_epoch must be >= 1")


def _mixed_batch(dataset, source, batch_size, rng):
    """Default baseline batch: random clean images, each pushed through a
    random source domain (the shuffled multi-domain training set)."""
    from .streams import _corrupt_batch

    ids = rng.integers(0, len(dataset), size=batch_size)
    dom = rng.integers(0, len(source), size=batch_size)
    specs = [source[i] for i in dom]
    xs = _corrupt_batch(dataset, ids, specs, rng)
    return xs, dataset.labels[ids].copy()


def joint_train(model, dataset, source, cfg: JointConfig, rng: np.random.Generator,
                init: ParamBundle | None = None, batch_provider=None, log_path=None) -> TrainResult:
    """Mix-and-shuffle baseline trainer: supervised loss (plus the rotation
    loss when use_ssl) on minibatches, no inner simulation."""
    bundle = init.clone() if init is not None else model.init_params(rng)
    provider = batch_provider or (lambda r: _mixed_batch(dataset, source, cfg.batch_size, r))
    log: list[dict] = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_final if epoch >= cfg.lr_drop_epoch else cfg.lr
            for it in range(cfg.iterations_per_epoch):
                xs, ys = provider(rng)
                x = Tensor(xs)
                loss = model.sup_loss(x, ys, bundle.mapping())
                if cfg.use_ssl:
                    loss = loss + model.ssl_loss(x, bundle.mapping())
                value = _check_finite(loss.item(), "training loss")
                T.backward(loss)
                updated = [(n, p) for n, p in bundle.items() if p.grad is not None]
                apply_sgd(updated, lr)
                bundle.zero_grads()
                bundle.bump_version()
                record = {"epoch": epoch, "iteration": epoch * cfg.iterations_per_epoch + it,
                          "lr": lr, "loss": value}
                log.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file:
            log_file.close()
    return TrainResult(bundle, log)


def joint_config_matching(cfg: MetaConfig, iterations: int, batch_size: int, use_ssl: bool) -> JointConfig:
    """Baseline schedule mirroring a meta configuration's outer rates."""
    return JointConfig(
        lr=cfg.outer_lr, lr_final=cfg.outer_lr_final, epochs=cfg.epochs,
        lr_drop_epoch=cfg.lr_drop_epoch, iterations_per_epoch=iterations,
        batch_size=batch_size, use_ssl=use_ssl,
    )
