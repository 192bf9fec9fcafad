"""Dual-encoder training: batch assembly with in-batch negatives, the
single-positive softmax NLL loss and the multi-positive BCE-over-softmax
loss, analytic gradients through both towers, Adam with a linear
warmup/decay schedule, and a finite-difference gradient checker.

For a batch of B questions where question i contributes m_i positives and
one hard negative, the shared pool holds sum(m_i + 1) passages and every
pool passage not owned by question i acts as one of its negatives; with a
uniform m that is (m + 1) * (B - 1) + 1 negatives per question.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .data import Passage, QuestionRecord, select_training_pairs
from .encoder import (
    DEFAULT_BUCKETS,
    DEFAULT_EMBED_DIM,
    DEFAULT_OUT_DIM,
    EncoderParams,
    TowerParams,
    dropout_mask,
    init_params,
    pool_ids,
    tokenize,
)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_FLOOR = 1e-12

LOSS_KINDS = ("nll", "bce")


class InsufficientDataError(ValueError):
    """Fewer usable training pairs than one batch."""


@dataclass
class TrainConfig:
    """Training hyperparameters.

    ``warmup_steps=None`` resolves to 10% of the total step count.  The
    ``nll`` loss admits exactly one positive per question, so it requires
    ``max_positives == 1``.
    """

    batch_size: int = 16
    max_positives: int = 3
    loss: str = "bce"
    epochs: int = 40
    lr: float = 1e-5
    warmup_steps: int | None = None
    dropout_rate: float = 0.1
    seed: int = 0
    vocab_buckets: int = DEFAULT_BUCKETS
    embed_dim: int = DEFAULT_EMBED_DIM
    out_dim: int = DEFAULT_OUT_DIM

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_positives < 1:
            raise ValueError(f"max_positives must be >= 1, got {self.max_positives}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.loss == "nll" and self.max_positives != 1:
            raise ValueError("nll loss requires exactly 1 positive per question")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


TrainingPair = tuple[QuestionRecord, list[Passage], Passage]


@dataclass
class BatchPlan:
    """One batch: B questions, their pooled passages, and an ownership mask.

    ``pool`` concatenates each question's positives followed by its hard
    negative, in batch order.  ``label_mask[i, j]`` is True iff pool passage
    j is one of question i's own positives.
    """

    questions: list[QuestionRecord]
    pool: list[Passage]
    label_mask: np.ndarray  # (B, len(pool)) bool

    def negatives_per_question(self) -> np.ndarray:
        """Number of pool passages acting as negatives for each question."""
        return self.label_mask.shape[1] - self.label_mask.sum(axis=1)


def build_batch(pairs: Sequence[TrainingPair], batch_size: int) -> BatchPlan:
    """Assemble a batch plan from selected training pairs.

    Duplicate passage ids across questions are permitted (they are logged);
    the mask is by ownership, not by id.
    """
    if len(pairs) != batch_size:
        raise ValueError(f"expected {batch_size} pairs, got {len(pairs)}")
    questions = []
    pool: list[Passage] = []
    spans = []
    for record, positives, hard_negative in pairs:
        if not positives:
            raise ValueError(f"question {record.id} has no positives")
        start = len(pool)
        pool.extend(positives)
        pool.append(hard_negative)
        spans.append((start, start + len(positives)))
        questions.append(record)

    ids = [p.id for p in pool]
    if len(set(ids)) != len(ids):
        logger.debug("batch pool contains duplicate passage ids")

    label_mask = np.zeros((batch_size, len(pool)), dtype=bool)
    for i, (start, stop) in enumerate(spans):
        label_mask[i, start:stop] = True
    return BatchPlan(questions=questions, pool=pool, label_mask=label_mask)


def sim(q_vec: np.ndarray, p_vec: np.ndarray) -> float:
    """Inner-product similarity between a question and a passage vector."""
    q_vec = np.asarray(q_vec, dtype=np.float64)
    p_vec = np.asarray(p_vec, dtype=np.float64)
    if q_vec.shape != p_vec.shape:
        raise ValueError(f"dimension mismatch: {q_vec.shape} vs {p_vec.shape}")
    return float(np.dot(q_vec, p_vec))


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch form: never exponentiates a positive argument.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _row_loss_value(sims_row: np.ndarray, mask_row: np.ndarray, loss_kind: str):
    """Loss value for one similarity row in the row's own dtype."""
    if loss_kind == "nll":
        positives = np.flatnonzero(mask_row)
        if positives.size != 1:
            raise ValueError(
                f"nll loss needs exactly 1 positive per question, "
                f"got {positives.size}"
            )
        shifted = sims_row - sims_row.max()
        exp = np.exp(shifted)
        return np.log(exp.sum()) - shifted[positives[0]]
    scores = _softmax(sims_row)
    sig = _sigmoid(scores)
    y = mask_row
    return -(
        np.log(np.maximum(sig[y], LOG_FLOOR)).sum()
        + np.log(np.maximum(1.0 - sig[~y], LOG_FLOOR)).sum()
    )


def nll_loss(sims: np.ndarray, positive_index: int) -> tuple[float, np.ndarray]:
    """Negative log of the softmax probability of the single positive.

    Returns the loss and its gradient with respect to the similarity row
    (softmax minus the positive's one-hot).
    """
    s = np.asarray(sims, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ValueError("sims must be a non-empty 1-d array")
    if not 0 <= positive_index < s.size:
        raise ValueError(f"positive_index {positive_index} out of range")
    shifted = s - s.max()
    exp = np.exp(shifted)
    norm = exp.sum()
    loss = float(np.log(norm) - shifted[positive_index])
    grad = exp / norm
    grad[positive_index] -= 1.0
    return loss, grad


def bce_loss(sims: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-passage binary cross-entropy over softmax-scaled similarities.

    The row is softmaxed (the question's view of the whole pool), each score
    passes through a sigmoid, and positives/negatives contribute
    ``-log(sigma)`` / ``-log(1 - sigma)``.  Log arguments are floored at
    1e-12.  The gradient is composed analytically through the sigmoid and
    the softmax Jacobian.
    """
    s = np.asarray(sims, dtype=np.float64)
    y = np.asarray(mask, dtype=bool)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValueError("sims and mask must be 1-d arrays of equal length")
    if s.size < 2:
        raise ValueError("bce loss needs at least one positive and one negative")
    if not y.any():
        raise ValueError("mask must contain at least one positive")
    scores = _softmax(s)
    sig = _sigmoid(scores)
    loss = -float(
        np.log(np.maximum(sig[y], LOG_FLOOR)).sum()
        + np.log(np.maximum(1.0 - sig[~y], LOG_FLOOR)).sum()
    )
    # d(loss)/d(score_k) = sigma(score_k) - y_k, then the softmax Jacobian.
    g_score = sig - y.astype(np.float64)
    grad = scores * (g_score - np.dot(g_score, scores))
    return loss, grad


@dataclass
class TowerGrads:
    embeddings: np.ndarray
    projection: np.ndarray
    bias: np.ndarray


@dataclass
class ParamGrads:
    """Gradients shaped like :class:`EncoderParams` (float64)."""

    question: TowerGrads
    passage: TowerGrads


def _zero_grads(params: EncoderParams) -> ParamGrads:
    def zeros_like(tw: TowerParams) -> TowerGrads:
        return TowerGrads(
            np.zeros(tw.embeddings.shape, dtype=np.float64),
            np.zeros(tw.projection.shape, dtype=np.float64),
            np.zeros(tw.bias.shape, dtype=np.float64),
        )

    return ParamGrads(zeros_like(params.question), zeros_like(params.passage))


@dataclass
class _TowerForward:
    ids_list: list[np.ndarray]
    dropped: np.ndarray  # (n, embed_dim) pooled-and-masked, float64
    masks: np.ndarray | None  # (n, embed_dim) scaled dropout masks
    vectors: np.ndarray  # (n, out_dim) float64


def _forward_tower(
    tower: TowerParams,
    ids_list: list[np.ndarray],
    dropout_rate: float,
    rng: np.random.Generator | None,
    dtype=np.float64,
) -> _TowerForward:
    n = len(ids_list)
    embed_dim = tower.embeddings.shape[1]
    pooled = np.zeros((n, embed_dim), dtype=dtype)
    for i, ids in enumerate(ids_list):
        pooled[i] = pool_ids(tower.embeddings, ids, dtype=dtype)
    masks = None
    if dropout_rate > 0.0:
        masks = np.stack(
            [dropout_mask(rng, embed_dim, dropout_rate) for _ in range(n)]
        )
        pooled = pooled * masks
    vectors = pooled @ tower.projection.astype(dtype) + tower.bias.astype(dtype)
    return _TowerForward(list(ids_list), pooled, masks, vectors)


def _backward_tower(
    tower: TowerParams, fwd: _TowerForward, d_vectors: np.ndarray, out: TowerGrads
) -> None:
    out.bias += d_vectors.sum(axis=0)
    out.projection += fwd.dropped.T @ d_vectors
    d_pooled = d_vectors @ tower.projection.astype(np.float64).T
    if fwd.masks is not None:
        d_pooled = d_pooled * fwd.masks
    for i, ids in enumerate(fwd.ids_list):
        if ids.size:
            np.add.at(out.embeddings, ids, d_pooled[i] / ids.size)


def batch_loss(
    plan: BatchPlan,
    params: EncoderParams,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[float, ParamGrads]:
    """Mean per-question loss over the batch plus full parameter gradients.

    Dropout is applied only when ``config.dropout_rate > 0`` and ``rng`` is
    given (question masks are drawn first, then pool masks, in order).
    """
    config.validate()
    buckets = params.buckets
    rate = config.dropout_rate if rng is not None else 0.0

    q_ids = [tokenize(rec.question, buckets) for rec in plan.questions]
    p_ids = [tokenize(passage.body, buckets) for passage in plan.pool]
    q_fwd = _forward_tower(params.question, q_ids, rate, rng)
    p_fwd = _forward_tower(params.passage, p_ids, rate, rng)

    sims = q_fwd.vectors @ p_fwd.vectors.T  # (B, pool)
    batch_size = len(plan.questions)
    d_sims = np.zeros_like(sims)
    total = 0.0
    for i in range(batch_size):
        row_mask = plan.label_mask[i]
        if config.loss == "nll":
            positives = np.flatnonzero(row_mask)
            if positives.size != 1:
                raise ValueError(
                    f"nll loss needs exactly 1 positive per question, "
                    f"got {positives.size}"
                )
            loss_i, grad_i = nll_loss(sims[i], int(positives[0]))
        else:
            loss_i, grad_i = bce_loss(sims[i], row_mask)
        total += loss_i
        d_sims[i] = grad_i / batch_size

    grads = _zero_grads(params)
    _backward_tower(params.question, q_fwd, d_sims @ p_fwd.vectors, grads.question)
    _backward_tower(params.passage, p_fwd, d_sims.T @ q_fwd.vectors, grads.passage)
    return total / batch_size, grads


def batch_loss_value(
    plan: BatchPlan,
    params: EncoderParams,
    config: TrainConfig,
    dtype=np.float64,
):
    """Loss of :func:`batch_loss` without gradients or dropout.

    At float64 this reproduces the batch_loss value exactly; the gradient
    checker evaluates it in extended precision so finite differences are
    not drowned by subtractive cancellation.
    """
    config.validate()
    buckets = params.buckets
    q_ids = [tokenize(rec.question, buckets) for rec in plan.questions]
    p_ids = [tokenize(passage.body, buckets) for passage in plan.pool]
    q_vecs = _forward_tower(params.question, q_ids, 0.0, None, dtype=dtype).vectors
    p_vecs = _forward_tower(params.passage, p_ids, 0.0, None, dtype=dtype).vectors
    sims = q_vecs @ p_vecs.T
    total = dtype(0.0)
    for i in range(len(plan.questions)):
        total += _row_loss_value(sims[i], plan.label_mask[i], config.loss)
    return total / len(plan.questions)


def _param_arrays(params: EncoderParams) -> Iterator[tuple[str, np.ndarray]]:
    for tower_name in ("question", "passage"):
        tw = params.tower(tower_name)
        yield f"{tower_name}.embeddings", tw.embeddings
        yield f"{tower_name}.projection", tw.projection
        yield f"{tower_name}.bias", tw.bias


def _grad_arrays(grads: ParamGrads) -> Iterator[tuple[str, np.ndarray]]:
    for tower_name, tg in (("question", grads.question), ("passage", grads.passage)):
        yield f"{tower_name}.embeddings", tg.embeddings
        yield f"{tower_name}.projection", tg.projection
        yield f"{tower_name}.bias", tg.bias


def grad_check(
    plan: BatchPlan,
    params: EncoderParams,
    config: TrainConfig,
    epsilon: float = 1e-4,
) -> float:
    """Compare analytic gradients against central finite differences.

    Returns the maximum relative error ``|a - n| / max(1e-8, |a| + |n|)``
    over every parameter.  Dropout must be disabled (the loss must be a
    deterministic function of the parameters).  The differenced losses are
    evaluated in extended precision: near-zero gradient coordinates make
    the float64 loss difference comparable to its own rounding error at
    this epsilon, which would swamp the comparison.  Cost is two forward
    passes per parameter, so keep the dimensions small.
    """
    if config.dropout_rate != 0.0:
        raise ValueError("grad_check requires dropout_rate == 0")
    _, analytic = batch_loss(plan, params, config)
    analytic_map = dict(_grad_arrays(analytic))

    worst = 0.0
    for name, arr in _param_arrays(params):
        grad_arr = analytic_map[name]
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            # Perturb in float32 (the storage dtype) and divide by the
            # realized difference, not the nominal 2 * epsilon.
            plus = np.float32(float(orig) + epsilon)
            minus = np.float32(float(orig) - epsilon)
            flat[idx] = plus
            loss_plus = batch_loss_value(plan, params, config, dtype=np.longdouble)
            flat[idx] = minus
            loss_minus = batch_loss_value(plan, params, config, dtype=np.longdouble)
            flat[idx] = orig
            numeric = float(
                (loss_plus - loss_minus) / (np.longdouble(plus) - np.longdouble(minus))
            )
            a = float(grad_arr.reshape(-1)[idx])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


def lr_schedule(
    step: int, total_steps: int, warmup_steps: int, lr_max: float
) -> float:
    """Linear warmup to ``lr_max`` over ``warmup_steps``, then linear decay
    to zero at ``total_steps``.  ``warmup_steps == 0`` skips the warmup."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > total_steps:
        raise ValueError("warmup_steps must not exceed total_steps")
    if warmup_steps > 0 and step <= warmup_steps:
        return lr_max * step / warmup_steps
    if total_steps == warmup_steps:
        return lr_max
    return lr_max * (total_steps - step) / (total_steps - warmup_steps)


class AdamState:
    """First/second moment accumulators for every parameter array."""

    def __init__(self, params: EncoderParams) -> None:
        self.step = 0
        self.moments = {
            name: (
                np.zeros(arr.shape, dtype=np.float64),
                np.zeros(arr.shape, dtype=np.float64),
            )
            for name, arr in _param_arrays(params)
        }

    def apply(self, params: EncoderParams, grads: ParamGrads, lr: float) -> None:
        """One Adam update in float64; parameters are stored back as float32."""
        self.step += 1
        bias1 = 1.0 - ADAM_BETA1**self.step
        bias2 = 1.0 - ADAM_BETA2**self.step
        grad_map = dict(_grad_arrays(grads))
        for name, arr in _param_arrays(params):
            m, v = self.moments[name]
            g = grad_map[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
            arr[...] = (arr.astype(np.float64) - lr * update).astype(np.float32)


def usable_pairs(
    records: Sequence[QuestionRecord], m_max: int
) -> list[TrainingPair]:
    """Select training pairs for every record, dropping the discards."""
    pairs = []
    for record in records:
        selected = select_training_pairs(record, m_max)
        if selected is not None:
            pairs.append((record, selected[0], selected[1]))
    return pairs


def train(
    records: Sequence[QuestionRecord],
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[EncoderParams, list[dict]]:
    """Train a fresh encoder on the dataset.

    Pairs are selected once, shuffled with a seeded generator each epoch,
    and the final partial batch of an epoch is dropped so the in-batch
    negative counts stay intact.  Returns the trained parameters and a
    per-epoch log of ``{epoch, mean_loss, lr_last, wall_ms}`` dicts;
    ``on_epoch`` (when given) receives each entry as it is produced.
    The outcome is fully determined by (records, config).
    """
    config.validate()
    pairs = usable_pairs(records, config.max_positives)
    if len(pairs) < config.batch_size:
        raise InsufficientDataError(
            f"need at least {config.batch_size} usable pairs, got {len(pairs)}"
        )

    params = init_params(
        config.seed, config.vocab_buckets, config.embed_dim, config.out_dim
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))

    steps_per_epoch = len(pairs) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    warmup = (
        config.warmup_steps if config.warmup_steps is not None else total_steps // 10
    )

    adam = AdamState(params)
    history: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(pairs))
        losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            chunk = order[b * config.batch_size : (b + 1) * config.batch_size]
            plan = build_batch([pairs[j] for j in chunk], config.batch_size)
            rng = dropout_rng if config.dropout_rate > 0.0 else None
            loss, grads = batch_loss(plan, params, config, rng=rng)
            step += 1
            lr = lr_schedule(step, total_steps, warmup, config.lr)
            adam.apply(params, grads, lr)
            losses.append(loss)
        entry = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)) if losses else 0.0,
            "lr_last": lr,
            "wall_ms": (time.perf_counter() - started) * 1000.0,
        }
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return params, history


def append_epoch_log(path, entry: dict) -> None:
    """Append one epoch entry to a JSONL run file."""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
