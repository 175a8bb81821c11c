"""Online test-time adaptation over a sample stream, plus scoring utilities.

Four evaluation modes share one driver:

  ours_sample    one self-supervised update per incoming sample, then predict
  ttt_sample     same update rule (intended for a jointly trained checkpoint)
  no_adapt       frozen parameters; the rotation loss is still evaluated so
                 the record stream stays directly comparable
  entropy_batch  predict on arrival, minimize mean prediction entropy over the
                 normalization affine parameters once per full batch

Adaptation never reads the label column; labels exist only for scoring.
Parameters persist across domain boundaries (continual setting).  The
episodic_reset flag, for diagnostics only, restores the starting parameters
at every domain boundary instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import tensor as T
from .metatrain import NumericError, _check_finite, ssl_update_step
from .model import ParamBundle
from .optim import apply_sgd
from .streams import Stream
from .tensor import Tensor

MODES = ("ours_sample", "ttt_sample", "no_adapt", "entropy_batch")
PREDICT_ORDERS = ("adapt_then_predict", "predict_then_adapt")


@dataclass(frozen=True)
class AdaptConfig:
    lr: float = 0.0003
    mode: str = "ours_sample"
    batch_size: int = 64               # entropy_batch only
    predict_order: str | None = None   # None -> mode default
    episodic_reset: bool = False       # diagnostics: restore params at domain boundaries

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown adaptation mode {self.mode!r}")
        if self.lr < 0:
            raise ValueError("adaptation learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        order = self.resolved_predict_order()
        if order not in PREDICT_ORDERS:
            raise ValueError(f"unknown predict_order {self.predict_order!r}")
        if self.mode == "entropy_batch" and order != "predict_then_adapt":
            raise ValueError("entropy_batch emits predictions on arrival; "
                             "predict_order must be predict_then_adapt")

    def resolved_predict_order(self) -> str:
        if self.predict_order is not None:
            return self.predict_order
        return "predict_then_adapt" if self.mode == "entropy_batch" else "adapt_then_predict"

    def effective_lr(self) -> float:
        return 0.0 if self.mode == "no_adapt" else self.lr


@dataclass(frozen=True)
class StepRecord:
    t: int
    domain_index: int
    domain: str
    label: int
    pred: int
    ssl_loss: float

    @property
    def correct(self) -> bool:
        return self.pred == self.label


@dataclass
class StreamResult:
    records: list[StepRecord]
    final_params: ParamBundle
    updates_applied: int
    mode: str
    lr: float

    def __len__(self):
        return len(self.records)


def _predict_one(model, params: ParamBundle, x: Tensor) -> int:
    with T.no_grad():
        return int(model.predict(x, params.mapping())[0])


def _entropy_affine_names(params: ParamBundle) -> list[str]:
    """Normalization scale/shift parameters on the prediction path."""
    names = [n for n in params.names()
             if params.group_of(n) != "phi_ssl"
             and (n.endswith(".gamma") or n.endswith(".beta"))]
    if not names:
        raise ValueError("no normalization affine parameters on the prediction path")
    return names


def adapt_stream(model, bundle: ParamBundle, stream: Stream, cfg: AdaptConfig) -> StreamResult:
    """Run one pass over the stream, adapting according to cfg.

    The input bundle is cloned; the caller's parameters are never mutated.
    Returns per-step records plus the parameters as they stood after the
    final step.  The recorded ssl_loss is the rotation-prediction loss of
    the arriving sample under the parameters current at that step (the
    pre-update value when a step also updates).
    """
    if len(stream) == 0:
        raise ValueError("empty stream")
    params = bundle.clone()
    lr = cfg.effective_lr()
    order = cfg.resolved_predict_order()
    records: list[StepRecord] = []
    updates = 0

    def record(t: int, pred: int, ssl: float) -> None:
        d = int(stream.domain_idx[t])
        records.append(StepRecord(t, d, stream.domains[d].label(),
                                  int(stream.ys[t]), pred, ssl))

    def boundary(t: int) -> bool:
        return t > 0 and stream.domain_idx[t] != stream.domain_idx[t - 1]

    if cfg.mode == "entropy_batch":
        if cfg.batch_size > len(stream):
            raise ValueError(f"batch_size {cfg.batch_size} exceeds stream length {len(stream)}")
        affine = _entropy_affine_names(params)
        pending = 0
        for t in range(len(stream)):
            if cfg.episodic_reset and boundary(t):
                params = bundle.clone()
                pending = 0
            x = Tensor(stream.xs[t:t + 1])
            with T.no_grad():
                logits = model.forward_sup(x, params.mapping())
                pred = int(np.argmax(logits.data[0]))
            ssl = ssl_update_step(model, params, x, 0.0)   # evaluate only
            record(t, pred, ssl)
            pending += 1
            if pending == cfg.batch_size:
                if lr > 0:
                    xb = Tensor(stream.xs[t + 1 - cfg.batch_size:t + 1])
                    loss = T.entropy_of_logits(model.forward_sup(xb, params.mapping()))
                    T.backward(loss)
                    _check_finite(loss.item(), "prediction entropy")
                    apply_sgd([(n, params[n]) for n in affine], lr)
                    params.zero_grads()
                    params.bump_version()
                    updates += 1
                pending = 0
        return StreamResult(records, params, updates, cfg.mode, lr)

    for t in range(len(stream)):
        if cfg.episodic_reset and boundary(t):
            params = bundle.clone()
        x = Tensor(stream.xs[t:t + 1])
        if order == "adapt_then_predict":
            ssl = ssl_update_step(model, params, x, lr)
            pred = _predict_one(model, params, x)
        else:
            pred = _predict_one(model, params, x)
            ssl = ssl_update_step(model, params, x, lr)
        if lr > 0:
            updates += 1
        record(t, pred, ssl)
    return StreamResult(records, params, updates, cfg.mode, lr)


@dataclass(frozen=True)
class AccuracyReport:
    correct: int
    total: int
    per_domain: dict = field(default_factory=dict)   # label -> (correct, total)

    @property
    def overall(self) -> float:
        return self.correct / self.total

    def domain_accuracy(self, label: str) -> float:
        c, n = self.per_domain[label]
        return c / n


def stream_accuracy(records) -> AccuracyReport:
    """Exact fraction of correct predictions, overall and per domain."""
    if hasattr(records, "records"):
        records = records.records
    if not records:
        raise ValueError("no records to score")
    per: dict[str, list[int]] = {}
    correct = 0
    for r in records:
        c, n = per.setdefault(r.domain, [0, 0])
        per[r.domain][1] = n + 1
        if r.correct:
            correct += 1
            per[r.domain][0] = c + 1
    return AccuracyReport(correct, len(records),
                          {k: (v[0], v[1]) for k, v in per.items()})


@dataclass(frozen=True)
class Aggregate:
    n: int
    mean: float
    std: float          # sample standard deviation (ddof=1)
    halfwidth: float    # Student-t 95% half-width by default
    low: float
    high: float


def aggregate_runs(values, confidence: float = 0.95) -> Aggregate:
    """Mean and Student-t confidence interval across repeated runs.

    Half-width is t_{(1+confidence)/2, n-1} * s / sqrt(n) with s the
    ddof=1 sample standard deviation.
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size < 2:
        raise ValueError("need at least two runs to form a confidence interval")
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value among run results")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    n = int(arr.size)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1))
    crit = float(stats.t.ppf(0.5 + confidence / 2.0, n - 1))
    hw = crit * std / np.sqrt(n)
    return Aggregate(n, mean, std, float(hw), float(mean - hw), float(mean + hw))


RESULT_FORMAT = "stream-result-v1"


def save_result(result: StreamResult, path, extras: dict | None = None) -> None:
    """Write line-delimited step records followed by a key = value summary.

    Floats are written with repr() so parsing them back is lossless and
    regeneration is byte-identical.  `extras` lets callers attach context
    (schedule kind, period, seed) to the summary block.
    """
    rep = stream_accuracy(result)
    lines = [f"# {RESULT_FORMAT}", "t\tdomain_index\tpred\tlabel\tssl_loss"]
    for r in result.records:
        lines.append(f"{r.t}\t{r.domain_index}\t{r.pred}\t{r.label}\t{r.ssl_loss!r}")
    lines.append("== summary ==")
    lines.append(f"mode = {result.mode}")
    lines.append(f"lr = {result.lr!r}")
    lines.append(f"steps = {len(result.records)}")
    lines.append(f"updates = {result.updates_applied}")
    lines.append(f"correct = {rep.correct}")
    lines.append(f"total = {rep.total}")
    lines.append(f"accuracy = {rep.overall!r}")
    for label in sorted(rep.per_domain):
        c, n = rep.per_domain[label]
        lines.append(f"accuracy[{label}] = {c / n!r}")
    for key in sorted(extras or {}):
        lines.append(f"{key} = {extras[key]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_result_summary(path) -> dict[str, str]:
    """Parse the summary block of a saved result file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.startswith(f"# {RESULT_FORMAT}"):
        raise ValueError(f"{path}: not a {RESULT_FORMAT} file")
    _, _, tail = text.partition("== summary ==\n")
    if not tail:
        raise ValueError(f"{path}: missing summary block")
    out: dict[str, str] = {}
    for line in tail.splitlines():
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ValueError(f"{path}: malformed summary line {line!r}")
        out[key] = value
    return out


def read_result_records(path) -> list[StepRecord]:
    """Parse the per-step records of a saved result file.

    Domain labels are not stored in the record lines; they are recovered
    from the summary's per-domain keys when unambiguous, otherwise the
    domain index is used as the label.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.startswith(f"# {RESULT_FORMAT}"):
        raise ValueError(f"{path}: not a {RESULT_FORMAT} file")
    body, _, _ = text.partition("== summary ==\n")
    lines = body.splitlines()
    if len(lines) < 2 or not lines[1].startswith("t\t"):
        raise ValueError(f"{path}: missing record header")
    records = []
    for line in lines[2:]:
        if not line:
            continue
        t, d, pred, label, ssl = line.split("\t")
        records.append(StepRecord(int(t), int(d), d, int(label), int(pred), float(ssl)))
    return records
