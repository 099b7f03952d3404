"""Diagnostics and evaluations.

The distraction metric r is the share of a query's planned-context softmax
mass that lands on its own document's previous context:

    r = sum_j w_1j / sum_{i=1..d} sum_j w_ij

computed per query over the memory-layer heads and averaged. Perplexity and
task accuracies run the inference path window by window against a growing
memory index.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, UsageError
from .memstore import MemoryIndex
from .model import AttentionRecord, Transformer, exposure_records
from .pipeline import CrossbatchPipeline, DSchedule, SegmentSchedule, make_eval_exposure_plan
from .tasks import DictTaskConfig, gen_dict_lookup

WEIGHTS_MAGIC = b"FOTW"
WEIGHTS_VERSION = 1


# ---------------------------------------------------------------------------
# distraction metric
# ---------------------------------------------------------------------------

@dataclass
class DistractionReport:
    r: float                       # mean positive attention mass
    d: int                         # contexts exposed
    n_queries: int
    per_context_share: np.ndarray  # [d] mean share per context index
    per_layer_r: dict[int, float] = field(default_factory=dict)
    n_skipped: int = 0             # queries whose planned mass underflowed


def positive_attention_mass(records: list[AttentionRecord]) -> DistractionReport:
    """Aggregate r over train-mode attention records."""
    if not records:
        raise UsageError("no attention records")
    r_all: list[np.ndarray] = []
    per_layer: dict[int, float] = {}
    shares_sum = None
    n_skipped = 0
    d = 0
    for rec in records:
        if rec.per_context is None:
            raise UsageError("inference-mode records carry no per-context masses")
        if rec.context_polarity is None or not (rec.context_polarity > 0).any():
            raise UsageError("records contain no positive context")
        d = max(d, rec.per_context.shape[-1])
        pos = (rec.context_polarity > 0)[:, None, None, :]
        total = rec.per_context.sum(axis=-1)
        ok = total > 0
        n_skipped += int((~ok).sum())
        r_q = np.where(ok, (rec.per_context * pos).sum(axis=-1) / np.where(ok, total, 1.0), 0.0)
        r_all.append(r_q[ok])
        per_layer[rec.layer] = float(r_q[ok].mean()) if ok.any() else float("nan")
        share = rec.per_context / np.where(ok, total, 1.0)[..., None]
        share_mean = share[ok].mean(axis=0)
        if shares_sum is None:
            shares_sum = share_mean * ok.sum()
        else:
            width = max(shares_sum.shape[0], share_mean.shape[0])
            a = np.pad(shares_sum, (0, width - shares_sum.shape[0]))
            b = np.pad(share_mean * ok.sum(), (0, width - share_mean.shape[0]))
            shares_sum = a + b
    flat = np.concatenate(r_all)
    if flat.size == 0:
        raise UsageError("all queries had zero planned-context mass")
    return DistractionReport(
        r=float(flat.mean()), d=d, n_queries=int(flat.size),
        per_context_share=shares_sum / flat.size, per_layer_r=per_layer,
        n_skipped=n_skipped)


def distraction_eval(model: Transformer, doc_iter, d: int, *,
                     min_queries: int = 1000, chunk_slots: int = 8,
                     max_batches: int = 64) -> DistractionReport:
    """Expose the model to d contexts exactly as in crossbatch training.

    Feeds a b_S = d pipeline, skips steps where any slot lacks a previous
    window, and aggregates records until at least ``min_queries`` per-query
    measurements were seen.
    """
    if d < 2:
        raise UsageError("exposure needs d >= 2 (one positive plus negatives)")
    pipe = CrossbatchPipeline(doc_iter, d, model.cfg.local_ctx_len,
                              SegmentSchedule(DSchedule("constant", d=0)), w=1)
    collected: list[AttentionRecord] = []
    n_queries = 0
    for _ in range(max_batches):
        try:
            batch = pipe.next_batch()
        except DataError:
            break
        if not batch.prev_valid[:, 0].all():
            continue
        plan = make_eval_exposure_plan(d, d, batch.unit_ids)
        recs = exposure_records(model, batch, plan, chunk_slots=chunk_slots)
        collected.extend(recs)
        n_queries += sum(r.mass_local.size for r in recs)
        if n_queries >= min_queries:
            break
    return positive_attention_mass(collected)


# ---------------------------------------------------------------------------
# kNN score / focus score
# ---------------------------------------------------------------------------

def knn_score(query: np.ndarray, retrieved_keys: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Softmax fractions of attention mass over the retrieved entries only."""
    keys = np.atleast_2d(np.asarray(retrieved_keys, dtype=np.float64))
    if keys.shape[0] == 0:
        raise UsageError("knn_score needs at least one retrieved entry")
    logits = keys @ np.asarray(query, dtype=np.float64) / tau
    e = np.exp(logits - logits.max())
    return e / e.sum()


def focus_score(memory: MemoryIndex, layer: int, head: int, doc_id: int,
                position: int, query: np.ndarray, *, neighborhood: int = 32,
                tau: float = 1.0) -> float:
    """The entry's softmax share against its +-neighborhood positional
    neighbors in the same document."""
    if position < 0:
        raise UsageError("entry has no stored position")
    keys, _positions, center = memory.neighborhood(layer, head, doc_id, position,
                                                   neighborhood)
    return float(knn_score(query, keys, tau)[center])


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------

def _window_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[:, None], axis=-1)[:, 0]
    return lse - picked


@dataclass
class PerplexityResult:
    ppl: float
    mean_nll: float
    n_tokens: int
    per_doc: dict[int, tuple[float, int]]  # doc_id -> (nll sum, token count)


def perplexity_eval(model: Transformer, docs, mode: str = "single_doc", *,
                    k: int = 32, memory_token_cap: int | None = None,
                    token_budget: int | None = None) -> PerplexityResult:
    """Token-level perplexity with a growing memory.

    ``docs`` yields (doc_id, tokens). single_doc erases memory at every
    document boundary; multi_doc retains it across the stream. The cap stops
    memory growth (in tokens per memory layer); cap 0 reproduces a pure
    no-memory forward pass.
    """
    if mode not in ("single_doc", "multi_doc"):
        raise UsageError(f"unknown perplexity mode {mode!r}")
    cfg = model.cfg
    t = cfg.local_ctx_len
    memory = MemoryIndex(cfg.memory_layers, cfg.n_heads, cfg.head_dim) \
        if cfg.memory_layers else None
    per_doc: dict[int, tuple[float, int]] = {}
    total = 0
    saw_doc = False
    for doc_id, tokens in docs:
        saw_doc = True
        tokens = np.asarray(tokens, dtype=np.int64)
        if mode == "single_doc" and memory is not None:
            memory.clear()
        nll_sum, n_tok = 0.0, 0
        for s in range(0, tokens.shape[0], t):
            window = tokens[s:s + t]
            out = model.forward_infer(window, memory, k, doc_id=doc_id, start_position=s)
            tail = min(s + window.shape[0] + 1, tokens.shape[0])
            targets = tokens[s + 1:tail]
            if targets.shape[0]:
                nll = _window_nll(out.logits[: targets.shape[0]], targets)
                nll_sum += float(nll.sum())
                n_tok += int(targets.shape[0])
            if memory is not None:
                room = None if memory_token_cap is None else \
                    max(0, memory_token_cap - memory.layer_size(min(cfg.memory_layers)))
                take = window.shape[0] if room is None else min(room, window.shape[0])
                if take > 0:
                    for li, (kk, vv) in out.new_kv.items():
                        memory.append_block(li, kk[:, :take], vv[:, :take], doc_id,
                                            np.arange(s, s + take))
        per_doc[int(doc_id)] = (nll_sum, n_tok)
        total += n_tok
        if token_budget is not None and total >= token_budget:
            break
    if not saw_doc:
        raise UsageError("perplexity_eval: empty stream")
    # deterministic reduction: combine per-doc partials in doc-id order so the
    # result is independent of stream order in single_doc mode
    ordered = sorted(per_doc.items())
    nll_total = sum(v[0] for _, v in ordered)
    n_total = sum(v[1] for _, v in ordered)
    if n_total == 0:
        raise UsageError("perplexity_eval: no scored tokens")
    mean = nll_total / n_total
    return PerplexityResult(float(np.exp(mean)), mean, n_total, per_doc)


# ---------------------------------------------------------------------------
# task accuracy
# ---------------------------------------------------------------------------

def score_dict_window(window_logits: np.ndarray, window_start: int, queries) -> list[bool]:
    """Teacher-forced check: argmax at each answer position must equal the
    defined value token, for all value tokens of the query."""
    preds = window_logits.argmax(axis=-1)
    out = []
    for q in queries:
        ok = True
        for offset, tok in zip(q.value_positions, q.value):
            row = offset - 1 - window_start  # logits at p-1 predict token p
            if row < 0 or row >= preds.shape[0] or preds[row] != tok:
                ok = False
                break
        out.append(ok)
    return out


@dataclass
class AccuracyResult:
    accuracy: float
    n_queries: int
    rows: list[tuple[int, int, tuple, tuple, bool]]  # (doc, query, pred, true, ok)


def dict_eval_accuracy(model: Transformer, task: DictTaskConfig, total_len: int,
                       *, n_docs: int = 8, k: int = 32, seed: int = 0,
                       use_memory: bool = True, long_chunk: int = 256) -> AccuracyResult:
    """Dictionary-lookup accuracy at an extended context length.

    use_memory=True streams definition windows into the kNN memory and scores
    the final question window; use_memory=False gives the local-only baseline
    the whole document as one long context.
    """
    cfg = model.cfg
    t = cfg.local_ctx_len
    rng = np.random.default_rng([seed, total_len])
    rows = []
    correct = 0
    n_total = 0
    for di in range(n_docs):
        doc = gen_dict_lookup(task, "eval", total_len=total_len, rng=rng)
        q_start = total_len - t
        if use_memory:
            memory = MemoryIndex(cfg.memory_layers, cfg.n_heads, cfg.head_dim)
            for s in range(0, q_start, t):
                out = model.forward_infer(doc.tokens[s:s + t], memory, k,
                                          doc_id=di, start_position=s)
                for li, (kk, vv) in out.new_kv.items():
                    memory.append_block(li, kk, vv, di, np.arange(s, s + t))
            final = model.forward_infer(doc.tokens[q_start:], memory, k,
                                        doc_id=di, start_position=q_start)
            logits = final.logits
        else:
            logits = model.forward_long(doc.tokens, chunk=long_chunk)[q_start:]
        oks = score_dict_window(logits, q_start, doc.queries)
        preds = logits.argmax(axis=-1)
        for qi, (q, ok) in enumerate(zip(doc.queries, oks)):
            pred = tuple(int(preds[p - 1 - q_start]) for p in q.value_positions)
            rows.append((di, qi, pred, q.value, ok))
            correct += ok
            n_total += 1
    return AccuracyResult(correct / n_total, n_total, rows)


def dump_predictions(path, result: AccuracyResult) -> None:
    with open(path, "w", encoding="ascii") as f:
        for doc, qi, pred, true, ok in result.rows:
            f.write(f"{doc} {qi} {','.join(map(str, pred))} "
                    f"{','.join(map(str, true))} {int(ok)}\n")


def recount_accuracy(path) -> float:
    """Independent recount over a dumped prediction file."""
    n, good = 0, 0
    with open(path, encoding="ascii") as f:
        for line in f:
            _doc, _qi, pred, true, _ok = line.split()
            n += 1
            good += pred == true
    if n == 0:
        raise DataError(f"{path}: no predictions")
    return good / n


def greedy_continuation(model: Transformer, prompt: np.ndarray, n_tokens: int,
                        *, k: int = 32) -> np.ndarray:
    """Greedy argmax continuation, streaming the prompt through memory.

    Complete prompt windows are ingested into a fresh memory; generation
    extends the final window and rolls it into memory whenever it fills.
    """
    cfg = model.cfg
    t = cfg.local_ctx_len
    prompt = np.asarray(prompt, dtype=np.int64)
    memory = MemoryIndex(cfg.memory_layers, cfg.n_heads, cfg.head_dim) \
        if cfg.memory_layers else None

    def ingest(window_tokens: np.ndarray, start: int, out=None) -> None:
        if memory is None:
            return
        if out is None:
            out = model.forward_infer(window_tokens, memory, k, start_position=start)
        for li, (kk, vv) in out.new_kv.items():
            memory.append_block(li, kk, vv, 0, np.arange(start, start + len(window_tokens)))

    n_ingest = (prompt.shape[0] - 1) // t  # keep a nonempty working window
    for w in range(n_ingest):
        ingest(prompt[w * t:(w + 1) * t], w * t)
    s = n_ingest * t
    window = list(prompt[s:])
    generated: list[int] = []
    for _ in range(n_tokens):
        out = model.forward_infer(np.asarray(window, dtype=np.int64), memory, k,
                                  start_position=s)
        nxt = int(out.logits[len(window) - 1].argmax())
        generated.append(nxt)
        if len(window) == t:
            ingest(np.asarray(window, dtype=np.int64), s, out=out)
            s += t
            window = [nxt]
        else:
            window.append(nxt)
    return np.asarray(generated, dtype=np.int64)


def passkey_accuracy(prompts, continuations) -> float:
    """Fraction of prompts whose greedy continuation starts with the digits
    of the recorded answer."""
    n, good = 0, 0
    for p, cont in zip(prompts, continuations):
        text = bytes(int(c) & 0xFF for c in cont).decode("utf-8", errors="replace")
        digits = ""
        for ch in text.lstrip():
            if ch.isdigit():
                digits += ch
            else:
                break
        good += digits == p.answer
        n += 1
    return good / n if n else 0.0


# ---------------------------------------------------------------------------
# metric rows
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    run_id: str
    metric: str
    axis_name: str
    axis_value: float
    value: float
    seed: int
    config_hash: str


CSV_FIELDS = ["run_id", "metric", "axis_name", "axis_value", "value", "seed", "config_hash"]


def write_metrics_csv(path, rows: list[EvalResult], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="ascii") as f:
        w = csv.writer(f)
        if not append:
            w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([r.run_id, r.metric, r.axis_name, r.axis_value, r.value,
                        r.seed, r.config_hash])


def read_metrics_csv(path) -> list[EvalResult]:
    out = []
    with open(path, newline="", encoding="ascii") as f:
        for row in csv.DictReader(f):
            out.append(EvalResult(row["run_id"], row["metric"], row["axis_name"],
                                  float(row["axis_value"]), float(row["value"]),
                                  int(row["seed"]), row["config_hash"]))
    return out


# ---------------------------------------------------------------------------
# raw attention-weight dumps
# ---------------------------------------------------------------------------

def dump_weights(path, sink: list) -> None:
    """Binary dump of raw extras softmax weights captured via debug_sink."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(sink)))
        for layer, probs, win_ctx, polarity in sink:
            b, h, t, e = probs.shape
            c = polarity.shape[1]
            f.write(struct.pack("<IIIIII", layer, b, h, t, e, c))
            f.write(probs.astype("<f4").tobytes())
            f.write(win_ctx.astype("<i8").tobytes())
            f.write(polarity.astype("<i8").tobytes())


def load_weights(path) -> list:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    out = []
    for _ in range(count):
        layer, b, h, t, e, c = struct.unpack_from("<IIIIII", raw, off)
        off += 24
        probs = np.frombuffer(raw, "<f4", b * h * t * e, off).reshape(b, h, t, e)
        off += 4 * b * h * t * e
        n_win = e // t if t else 0
        win_ctx = np.frombuffer(raw, "<i8", b * n_win, off).reshape(b, n_win)
        off += 8 * b * n_win
        polarity = np.frombuffer(raw, "<i8", b * c, off).reshape(b, c)
        off += 8 * b * c
        out.append((layer, probs, win_ctx, polarity))
    return out


def r_from_weights(dumped) -> float:
    """Recompute the mean positive attention mass straight from raw weights."""
    records = []
    for layer, probs, win_ctx, polarity in dumped:
        b, h, t, e = probs.shape
        n_win = win_ctx.shape[1]
        per_window = probs.reshape(b, h, t, n_win, -1).sum(axis=-1)
        c = polarity.shape[1]
        per_context = np.zeros((b, h, t, c), dtype=np.float64)
        for j in range(b):
            for w in range(n_win):
                ci = win_ctx[j, w]
                if ci > 0:
                    per_context[j, :, :, ci - 1] += per_window[j, :, :, w]
        records.append(AttentionRecord(layer, np.zeros((b, h, t)), per_context, polarity))
    return positive_attention_mass(records).r
