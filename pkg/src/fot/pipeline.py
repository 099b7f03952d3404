"""Crossbatch data pipeline.

Documents are pinned to batch slots. Each step every slot emits one
local-context window as "current"; the windows it emitted before stay
available as previous contexts. The plan for a step lists, per slot, which
previous-context windows (own document: positive; other slots' documents:
negative) the memory layers should attend to.

Short documents are concatenated into "units" that span at least w+1
windows; unit ids act as document ids everywhere downstream.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, UsageError


# ---------------------------------------------------------------------------
# d-schedules and segment schedules
# ---------------------------------------------------------------------------

@dataclass
class DSchedule:
    """Step-indexed crossbatch dimension.

    kind "constant": always d.
    kind "staged":   d_small before switch_step, d_large from it on.
    kind "random":   seeded per-step choice from ``choices``.
    """
    kind: str = "constant"
    d: int = 1
    d_small: int = 2
    d_large: int = 64
    switch_step: int = 0
    choices: tuple[int, ...] = (2, 128)

    def validate(self) -> None:
        if self.kind not in ("constant", "staged", "random"):
            raise ConfigError(f"unknown d-schedule kind {self.kind!r}")
        if self.kind == "constant" and self.d < 0:
            raise ConfigError("d must be >= 0")
        if self.kind == "random" and not self.choices:
            raise ConfigError("random d-schedule needs choices")


def d_schedule_value(schedule: DSchedule, step: int, seed: int = 0) -> int:
    if step < 0:
        raise UsageError("step must be >= 0")
    if schedule.kind == "constant":
        return schedule.d
    if schedule.kind == "staged":
        return schedule.d_small if step < schedule.switch_step else schedule.d_large
    rng = np.random.default_rng([seed, step])
    return int(schedule.choices[rng.integers(0, len(schedule.choices))])


@dataclass
class SegmentSchedule:
    """Per-slot crossbatch composition.

    Either uniform (one positive context of w windows plus d-1 modular
    negatives for every slot, with d from the d-schedule), or segmented:
    fractions of the batch with explicit (num_positives, num_negatives).
    """
    d_schedule: DSchedule = field(default_factory=DSchedule)
    segments: tuple[tuple[float, int, int], ...] | None = None

    def validate(self, b_s: int, w: int) -> None:
        self.d_schedule.validate()
        if self.segments is None:
            return
        total = sum(f for f, _, _ in self.segments)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"segment fractions sum to {total}, not 1")
        slots = 0
        for frac, n_pos, n_neg in self.segments:
            n = frac * b_s
            if abs(n - round(n)) > 1e-9:
                raise ConfigError(f"segment fraction {frac} does not resolve to whole slots of {b_s}")
            slots += round(n)
            if n_pos > w:
                raise ConfigError(f"segment wants {n_pos} positives but w={w}")
            if n_neg > b_s - 1:
                raise ConfigError(f"segment wants {n_neg} negatives but b_S={b_s}")
        if slots != b_s:
            raise ConfigError("segments do not cover the batch")


def uniform_negative_slots(slot: int, d: int, b_s: int) -> list[int]:
    """Modular negative sources of B.3-style uniform crossbatch."""
    return [(slot + j) % b_s for j in range(1, d)]


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanWindow:
    source_slot: int
    window_index: int      # 0 = most recent previous window of that slot
    polarity: str          # "positive" | "negative"
    context_id: int        # groups windows into contexts for r_d


@dataclass
class CrossbatchPlan:
    per_slot: list[list[PlanWindow]]
    w: int
    n_contexts: list[int]      # contexts per slot (d_effective)
    source_unit: list[list[int]]  # unit id each window came from, parallel to per_slot

    @property
    def b_s(self) -> int:
        return len(self.per_slot)

    @property
    def max_windows(self) -> int:
        return max((len(ws) for ws in self.per_slot), default=0)

    def validate_polarity(self, unit_ids) -> None:
        """Positives must share the consuming slot's unit id, negatives must not."""
        for slot, windows in enumerate(self.per_slot):
            for win, unit in zip(windows, self.source_unit[slot]):
                same = unit == unit_ids[slot]
                if win.polarity == "positive" and not same:
                    raise UsageError(f"positive from foreign unit {unit} in slot {slot}")
                if win.polarity == "negative" and same:
                    raise UsageError(f"negative from own unit in slot {slot}")


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class TrainBatch:
    cur_tokens: np.ndarray     # [b_S, T]
    cur_targets: np.ndarray    # [b_S, T]
    cur_mask: np.ndarray       # [b_S, T] float, 1 where loss applies
    prev_tokens: np.ndarray    # [b_S, w, T] (index 0 = most recent)
    prev_valid: np.ndarray     # [b_S, w] bool
    unit_ids: np.ndarray       # [b_S]
    window_start: np.ndarray   # [b_S] token offset of current window in its unit
    step: int


class _Unit:
    __slots__ = ("unit_id", "tokens", "mask")

    def __init__(self, unit_id: int, tokens: np.ndarray, mask: np.ndarray):
        self.unit_id = unit_id
        self.tokens = tokens
        self.mask = mask


class _UnitAssembler:
    """Concatenates stream documents into units of whole windows.

    A unit spans at least (w+1) windows so it can supply both a current
    window and positives; leftover tokens carry into the next unit.
    """

    def __init__(self, doc_iter, ctx_len: int, w: int):
        self._docs = iter(doc_iter)
        self.ctx_len = ctx_len
        self.min_tokens = (w + 1) * ctx_len
        self._carry_tokens = np.empty(0, dtype=np.int64)
        self._carry_mask = np.empty(0, dtype=np.float64)
        self._next_id = 0

    def next_unit(self) -> _Unit | None:
        toks = [self._carry_tokens]
        masks = [self._carry_mask]
        total = self._carry_tokens.shape[0]
        while total < self.min_tokens:
            try:
                doc_tokens, doc_mask = next(self._docs)
            except StopIteration:
                return None  # stream exhausted mid-unit; leftovers never emitted
            doc_tokens = np.asarray(doc_tokens, dtype=np.int64)
            doc_mask = np.asarray(doc_mask, dtype=np.float64)
            if doc_tokens.shape != doc_mask.shape:
                raise DataError("document mask length mismatch")
            toks.append(doc_tokens)
            masks.append(doc_mask)
            total += doc_tokens.shape[0]
        tokens = np.concatenate(toks)
        mask = np.concatenate(masks)
        keep = (tokens.shape[0] // self.ctx_len) * self.ctx_len
        self._carry_tokens = tokens[keep:]
        self._carry_mask = mask[keep:]
        unit = _Unit(self._next_id, tokens[:keep], mask[:keep])
        self._next_id += 1
        return unit


class _Slot:
    __slots__ = ("index", "unit", "cursor", "prev")

    def __init__(self, index: int, w: int):
        self.index = index
        self.unit: _Unit | None = None
        self.cursor = 0
        self.prev: deque = deque(maxlen=w)  # newest first entries appended left


class CrossbatchPipeline:
    """Single-producer iterator over TrainBatch + CrossbatchPlan pairs."""

    def __init__(self, doc_iter, b_s: int, ctx_len: int,
                 schedule: SegmentSchedule, w: int = 1, seed: int = 0):
        if b_s < 1 or ctx_len < 2 or w < 1:
            raise ConfigError("need b_S >= 1, ctx_len >= 2, w >= 1")
        schedule.validate(b_s, w)
        self.b_s = b_s
        self.ctx_len = ctx_len
        self.w = w
        self.schedule = schedule
        self.seed = seed
        self._assembler = _UnitAssembler(doc_iter, ctx_len, w)
        self._slots = [_Slot(i, w) for i in range(b_s)]
        self._step = 0

    # -- batches -------------------------------------------------------------

    def next_batch(self) -> TrainBatch:
        """Advance every slot by one window; raises DataError at stream end."""
        t = self.ctx_len
        cur = np.zeros((self.b_s, t), dtype=np.int64)
        tgt = np.zeros((self.b_s, t), dtype=np.int64)
        msk = np.zeros((self.b_s, t), dtype=np.float64)
        prev = np.zeros((self.b_s, self.w, t), dtype=np.int64)
        prev_valid = np.zeros((self.b_s, self.w), dtype=bool)
        unit_ids = np.zeros(self.b_s, dtype=np.int64)
        starts = np.zeros(self.b_s, dtype=np.int64)

        for slot in self._slots:
            if slot.unit is None or slot.cursor >= slot.unit.tokens.shape[0]:
                unit = self._assembler.next_unit()
                if unit is None:
                    raise DataError("document stream exhausted")
                slot.unit = unit
                slot.cursor = 0
                slot.prev.clear()
            u = slot.unit
            lo, hi = slot.cursor, slot.cursor + t
            window = u.tokens[lo:hi]
            cur[slot.index] = window
            # next-token targets; the final token of a unit predicts nothing
            if hi < u.tokens.shape[0]:
                tgt[slot.index] = u.tokens[lo + 1:hi + 1]
                msk[slot.index] = u.mask[lo + 1:hi + 1]
            else:
                tgt[slot.index, :-1] = u.tokens[lo + 1:hi]
                msk[slot.index, :-1] = u.mask[lo + 1:hi]
            for j, (ptoks, _pstart) in enumerate(slot.prev):
                prev[slot.index, j] = ptoks
                prev_valid[slot.index, j] = True
            unit_ids[slot.index] = u.unit_id
            starts[slot.index] = lo
            slot.prev.appendleft((window, lo))
            slot.cursor = hi

        batch = TrainBatch(cur, tgt, msk, prev, prev_valid, unit_ids, starts, self._step)
        self._step += 1
        return batch

    # -- plans ---------------------------------------------------------------

    def build_plan(self, step: int, batch: TrainBatch) -> CrossbatchPlan:
        """Plan for ``batch``; deterministic given (seed, step, stream)."""
        sched = self.schedule
        per_slot: list[list[PlanWindow]] = []
        units: list[list[int]] = []
        n_ctx: list[int] = []

        if sched.segments is None:
            d = d_schedule_value(sched.d_schedule, step, self.seed)
            comp = [(self.w, d - 1) if d > 0 else (0, 0)] * self.b_s
            neg_windows = self.w  # uniform mode: negatives expose their whole C_prev
        else:
            comp = []
            for frac, n_pos, n_neg in sched.segments:
                comp.extend([(n_pos, n_neg)] * round(frac * self.b_s))
            neg_windows = 1  # segment mode: one most-recent window per negative

        for slot in range(self.b_s):
            n_pos, n_neg = comp[slot]
            windows: list[PlanWindow] = []
            w_units: list[int] = []
            ctx = 0
            own_valid = int(batch.prev_valid[slot].sum())
            for j in range(min(n_pos, own_valid)):
                ctx += 1
                windows.append(PlanWindow(slot, j, "positive", ctx))
                w_units.append(int(batch.unit_ids[slot]))
            for src in uniform_negative_slots(slot, n_neg + 1, self.b_s):
                src_valid = int(batch.prev_valid[src].sum())
                take = min(neg_windows, src_valid)
                if take == 0:
                    continue
                ctx += 1
                for j in range(take):
                    windows.append(PlanWindow(src, j, "negative", ctx))
                    w_units.append(int(batch.unit_ids[src]))
            per_slot.append(windows)
            units.append(w_units)
            n_ctx.append(ctx)

        plan = CrossbatchPlan(per_slot, self.w, n_ctx, units)
        plan.validate_polarity(batch.unit_ids)
        return plan

    def next(self) -> tuple[TrainBatch, CrossbatchPlan]:
        batch = self.next_batch()
        return batch, self.build_plan(batch.step, batch)


def make_eval_exposure_plan(b_s: int, d: int, unit_ids) -> CrossbatchPlan:
    """Evaluation-only plan: every slot sees its own previous window plus
    d-1 modular negatives, one window each (the Fig.-3-style exposure)."""
    per_slot: list[list[PlanWindow]] = []
    units: list[list[int]] = []
    for slot in range(b_s):
        ws = [PlanWindow(slot, 0, "positive", 1)]
        us = [int(unit_ids[slot])]
        for i, src in enumerate(uniform_negative_slots(slot, d, b_s)):
            ws.append(PlanWindow(src, 0, "negative", i + 2))
            us.append(int(unit_ids[src]))
        per_slot.append(ws)
        units.append(us)
    return CrossbatchPlan(per_slot, 1, [d] * b_s, units)
