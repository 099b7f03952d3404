"""Decoder-only transformer with memory attention layers.

Designated layers attend, in one softmax, to their local causal context plus
extra (key, value) pairs: planned previous-context windows during training
(fully differentiable, so gradients reach the extra keys and values), or
top-k retrieved memory entries during inference. A gating variant that mixes
a separate memory-attention value into the local one is included for
comparison.

Keys and values handed to the memory index are post-projection (and post
qk-normalization when enabled) but carry no positional encoding; in
"as_first" mode the read side treats them as sitting at local position 0,
in "none" mode the memory layers use no positional encoding at all.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as N
from .errors import ConfigError, FormatError, ShapeError, UsageError
from .memstore import MemoryIndex
from .numerics import Tensor
from .pipeline import CrossbatchPlan, TrainBatch

CHECKPOINT_MAGIC = b"FOTC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 4
    head_dim: int = 64
    ff_dim: int = 1024
    vocab_size: int = 64
    memory_layers: tuple[int, ...] = (2,)
    local_ctx_len: int = 256
    qk_normalize: bool = True
    temperature_init: float = 1.0
    mem_positional_mode: str = "none"      # "none" | "as_first"
    integration_mode: str = "merged"       # "merged" | "gated"
    rotary_base: float = 10000.0
    init_scheme: str = "scaled_normal"     # "scaled_normal" | "structured"

    def validate(self) -> None:
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(f"d_model {self.d_model} != n_heads*head_dim {self.n_heads * self.head_dim}")
        if any(not 0 <= m < self.n_layers for m in self.memory_layers):
            raise ConfigError(f"memory_layers {self.memory_layers} outside [0, {self.n_layers})")
        if self.temperature_init <= 0:
            raise ConfigError("temperature_init must be > 0")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary encoding")
        if self.mem_positional_mode not in ("none", "as_first"):
            raise ConfigError(f"unknown mem_positional_mode {self.mem_positional_mode!r}")
        if self.integration_mode not in ("merged", "gated"):
            raise ConfigError(f"unknown integration_mode {self.integration_mode!r}")
        if self.init_scheme not in ("scaled_normal", "structured"):
            raise ConfigError(f"unknown init_scheme {self.init_scheme!r}")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["memory_layers"] = list(self.memory_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["memory_layers"] = tuple(d.get("memory_layers", ()))
        return cls(**d)


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["embed"]
    for i in range(cfg.n_layers):
        names += [f"layers.{i}.ln1", f"layers.{i}.wq", f"layers.{i}.bq",
                  f"layers.{i}.wk", f"layers.{i}.bk", f"layers.{i}.wv", f"layers.{i}.bv",
                  f"layers.{i}.wo", f"layers.{i}.bo", f"layers.{i}.log_tau"]
        if i in cfg.memory_layers:
            names.append(f"layers.{i}.gate_bias")
        names += [f"layers.{i}.ln2", f"layers.{i}.w1", f"layers.{i}.b1",
                  f"layers.{i}.w2", f"layers.{i}.b2"]
    names += ["final_ln", "lm_head", "lm_bias"]
    return names


def param_count(cfg: ModelConfig) -> int:
    d, h, dh, f, v = cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.ff_dim, cfg.vocab_size
    per_layer = d + 4 * (d * h * dh) + 3 * (h * dh) + d + h + d + d * f + f + f * d + d
    total = v * d + cfg.n_layers * per_layer + len(cfg.memory_layers)  # gate biases
    total += d + d * v + v  # final norm, lm head, lm bias
    return total


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh parameters.

    "scaled_normal": normal(0, d_model^-1/2) projections, zero biases, unit
    gains, zero LM head (so an untrained model predicts uniformly).

    "structured": same, except the LM head starts as the transpose of the
    embedding and the memory layers' value/output projections start as
    (scaled) identities. Retrieved entries then write their token's own
    embedding back into the residual stream from step one, so training only
    has to shape the query/key space - the part crossbatch is about. This is
    the desk-scale stand-in for starting from a pretrained model; without it
    the read-out circuit alone needs orders of magnitude more tokens than a
    CPU run can see.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    std = cfg.d_model ** -0.5
    d, h, dh, f, v = cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.ff_dim, cfg.vocab_size
    structured = cfg.init_scheme == "structured"

    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    p: dict[str, Tensor] = {"embed": normal(v, d)}
    for i in range(cfg.n_layers):
        mem_identity = structured and i in cfg.memory_layers
        p[f"layers.{i}.ln1"] = ones(d)
        p[f"layers.{i}.wq"] = normal(d, h * dh)
        p[f"layers.{i}.bq"] = zeros(h * dh)
        p[f"layers.{i}.wk"] = normal(d, h * dh)
        p[f"layers.{i}.bk"] = zeros(h * dh)
        p[f"layers.{i}.wv"] = Tensor(np.eye(d, dtype=dtype), requires_grad=True) \
            if mem_identity else normal(d, h * dh)
        p[f"layers.{i}.bv"] = zeros(h * dh)
        p[f"layers.{i}.wo"] = Tensor(0.5 * np.eye(d, dtype=dtype), requires_grad=True) \
            if mem_identity else normal(h * dh, d)
        p[f"layers.{i}.bo"] = zeros(d)
        p[f"layers.{i}.log_tau"] = Tensor(
            np.full(h, np.log(cfg.temperature_init), dtype=dtype), requires_grad=True)
        if i in cfg.memory_layers:
            p[f"layers.{i}.gate_bias"] = zeros()
        p[f"layers.{i}.ln2"] = ones(d)
        p[f"layers.{i}.w1"] = normal(d, f)
        p[f"layers.{i}.b1"] = zeros(f)
        p[f"layers.{i}.w2"] = normal(f, d)
        p[f"layers.{i}.b2"] = zeros(d)
    p["final_ln"] = ones(d)
    if structured:
        p["lm_head"] = Tensor(p["embed"].data.T.copy(), requires_grad=True)
    else:
        # zero-init head keeps an untrained model's predictive distribution uniform
        p["lm_head"] = zeros(d, v)
    p["lm_bias"] = zeros(v)
    assert list(p) == param_names(cfg)
    assert sum(t.data.size for t in p.values()) == param_count(cfg)
    return p


# ---------------------------------------------------------------------------
# attention records
# ---------------------------------------------------------------------------

@dataclass
class AttentionRecord:
    """Per-memory-layer softmax mass, bucketed by key provenance.

    per_context holds the raw share each planned context received (already
    multiplied by the gate weight in gated mode so buckets sum to 1);
    context_polarity is +1 positive, -1 negative, 0 unused slot.
    """
    layer: int
    mass_local: np.ndarray                 # [b, H, T]
    per_context: np.ndarray | None = None  # [b, H, T, C] train-mode contexts
    context_polarity: np.ndarray | None = None  # [b, C]
    mass_memory: np.ndarray | None = None  # [b, H, T] inference-mode bucket
    gate: float | None = None

    def mass_positive(self) -> np.ndarray:
        sel = (self.context_polarity > 0)[:, None, None, :]
        return (self.per_context * sel).sum(axis=-1)

    def mass_negative(self) -> np.ndarray:
        sel = (self.context_polarity < 0)[:, None, None, :]
        return (self.per_context * sel).sum(axis=-1)

    def bucket_total(self) -> np.ndarray:
        total = self.mass_local.copy()
        if self.per_context is not None:
            total = total + self.per_context.sum(axis=-1)
        if self.mass_memory is not None:
            total = total + self.mass_memory
        return total


@dataclass
class TrainForward:
    logits: Tensor                     # [b, T, vocab]
    records: list[AttentionRecord]
    tape: N.Tape | None
    loss: Tensor | None = None         # masked mean NLL when requested


@dataclass
class InferForward:
    logits: np.ndarray                 # [T, vocab]
    new_kv: dict[int, tuple[np.ndarray, np.ndarray]]  # layer -> (K, V) [H, T, Dh]
    records: list[AttentionRecord]


@dataclass
class _Extras:
    """Per-memory-layer planned context tensors for the current rows."""
    k: Tensor                # [b, H, E*T, Dh]
    v: Tensor                # [b, H, E*T, Dh]
    pad_add: np.ndarray      # [b, 1, 1, E*T] additive mask (0 valid, MASK_VALUE pad)
    window_context: np.ndarray  # [b, E] context id per gathered window (0 = pad)
    polarity: np.ndarray     # [b, C_max] +1/-1/0
    n_contexts: int          # C_max


# ---------------------------------------------------------------------------
# spec-level kernels
# ---------------------------------------------------------------------------

class _ProbsView:
    """Read-only slice of the merged softmax weights (for records only)."""

    __slots__ = ("_t", "_lo", "_hi")

    def __init__(self, t: Tensor, lo: int, hi: int):
        self._t, self._lo, self._hi = t, lo, hi

    @property
    def data(self) -> np.ndarray:
        return self._t.data[..., self._lo:self._hi]


def merged_softmax_attention(q: Tensor, local_kv: tuple[Tensor, Tensor],
                             extra_kv: tuple[Tensor, Tensor] | None,
                             causal_add: np.ndarray,
                             extra_add: np.ndarray | None = None,
                             ) -> tuple[Tensor, Tensor, Tensor | None]:
    """One softmax over [local causal keys | extra keys].

    q is pre-scaled ([B, H, T, Dh]); returns (values_out, local_probs,
    extra_probs). Temperature and qk-normalization are the caller's business
    so the kernel stays shared between training and inference shapes.
    """
    k_loc, v_loc = local_kv
    logits_loc = N.add(N.matmul(q, N.transpose(k_loc, (0, 1, 3, 2))), Tensor(causal_add))
    if extra_kv is None:
        probs = N.softmax_last_axis(logits_loc)
        return N.matmul(probs, v_loc), probs, None
    k_ext, v_ext = extra_kv
    logits_ext = N.matmul(q, N.transpose(k_ext, (0, 1, 3, 2)))
    if extra_add is not None:
        logits_ext = N.add(logits_ext, Tensor(extra_add))
    t_local = logits_loc.shape[-1]
    probs = N.softmax_last_axis(N.concat_last_axis([logits_loc, logits_ext]))
    out = N.matmul(probs, N.concat_axis([v_loc, v_ext], axis=-2))
    p_loc = _ProbsView(probs, 0, t_local)
    p_ext = _ProbsView(probs, t_local, probs.shape[-1])
    return out, p_loc, p_ext


def gated_integration(v_memory: Tensor, v_local: Tensor, gate_bias: Tensor) -> Tensor:
    """v = v_M * g + v_C * (1 - g) with g = sigmoid(gate_bias)."""
    if v_memory.shape != v_local.shape:
        raise ShapeError(f"gated_integration: {v_memory.shape} vs {v_local.shape}")
    g = N.sigmoid(gate_bias)
    one_minus = N.add(N.scale(g, -1.0), Tensor(np.ones((), dtype=g.dtype)))
    return N.add(N.mul(v_memory, g), N.mul(v_local, one_minus))


# ---------------------------------------------------------------------------
# the transformer
# ---------------------------------------------------------------------------

class Transformer:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(cfg, seed, dtype)
        self._mask_cache: dict[int, np.ndarray] = {}
        # when set to a list, memory layers append their raw extras softmax
        # weights here: (layer, probs [b,H,T,E*T], window_context, polarity)
        self.debug_sink: list | None = None

    # -- plumbing ------------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        N.zero_grads(self.parameters())

    def _causal_add(self, t: int) -> np.ndarray:
        m = self._mask_cache.get(t)
        if m is None:
            m = N.causal_mask(t, dtype=self.dtype)[None, None]
            self._mask_cache[t] = m
        return m

    def _scaled_q(self, q: Tensor, li: int) -> Tensor:
        inv_tau = N.exp(N.scale(self.params[f"layers.{li}.log_tau"], -1.0))
        qs = N.mul(q, N.reshape(inv_tau, (1, self.cfg.n_heads, 1, 1)))
        if not self.cfg.qk_normalize:
            qs = N.scale(qs, self.cfg.head_dim ** -0.5)
        return qs

    def _project_heads(self, h: Tensor, li: int, which: str) -> Tensor:
        cfg = self.cfg
        rows, t = h.shape[0], h.shape[1]
        w = self.params[f"layers.{li}.w{which}"]
        b = self.params[f"layers.{li}.b{which}"]
        y = N.add(N.matmul(h, w), b)
        y = N.transpose(N.reshape(y, (rows, t, cfg.n_heads, cfg.head_dim)), (0, 2, 1, 3))
        if cfg.qk_normalize and which in ("q", "k"):
            y = N.l2_normalize_last_axis(y)
        return y

    def _attn_inputs(self, x: Tensor, li: int) -> tuple[Tensor, Tensor, Tensor]:
        h = N.rms_norm(x, self.params[f"layers.{li}.ln1"])
        return (self._project_heads(h, li, "q"),
                self._project_heads(h, li, "k"),
                self._project_heads(h, li, "v"))

    def _attn_out(self, out_heads: Tensor, x: Tensor, li: int) -> Tensor:
        rows, t = x.shape[0], x.shape[1]
        flat = N.reshape(N.transpose(out_heads, (0, 2, 1, 3)), (rows, t, self.cfg.d_model))
        proj = N.add(N.matmul(flat, self.params[f"layers.{li}.wo"]), self.params[f"layers.{li}.bo"])
        return N.add(x, proj)

    def _ff_block(self, x: Tensor, li: int) -> Tensor:
        h = N.rms_norm(x, self.params[f"layers.{li}.ln2"])
        h = N.silu(N.add(N.matmul(h, self.params[f"layers.{li}.w1"]), self.params[f"layers.{li}.b1"]))
        h = N.add(N.matmul(h, self.params[f"layers.{li}.w2"]), self.params[f"layers.{li}.b2"])
        return N.add(x, h)

    def _layer_rotary(self, li: int) -> bool:
        if li not in self.cfg.memory_layers:
            return True
        return self.cfg.mem_positional_mode == "as_first"

    def _plain_layer(self, x: Tensor, li: int, positions: np.ndarray,
                     collect_kv: bool) -> tuple[Tensor, tuple[Tensor, Tensor] | None]:
        q, k, v = self._attn_inputs(x, li)
        kv = (k, v) if collect_kv else None
        if self._layer_rotary(li):
            q = N.rotary_encode(q, positions, self.cfg.rotary_base)
            k = N.rotary_encode(k, positions, self.cfg.rotary_base)
        out, _, _ = merged_softmax_attention(self._scaled_q(q, li), (k, v), None,
                                             self._causal_add(x.shape[1]))
        x = self._attn_out(out, x, li)
        return self._ff_block(x, li), kv

    # -- previous-context encoding --------------------------------------------

    def encode_windows(self, tokens: np.ndarray) -> dict[int, tuple[Tensor, Tensor]]:
        """Run plain causal layers over [N, T] windows up to the last memory
        layer; returns the pre-rotary (K, V) head tensors at each memory layer.

        On an active tape the returned tensors are differentiable nodes.
        """
        cfg = self.cfg
        if not cfg.memory_layers:
            return {}
        t = tokens.shape[1]
        positions = np.arange(t)
        x = N.embedding(self.params["embed"], tokens)
        out: dict[int, tuple[Tensor, Tensor]] = {}
        top = max(cfg.memory_layers)
        for li in range(top):
            x, kv = self._plain_layer(x, li, positions, collect_kv=li in cfg.memory_layers)
            if kv is not None:
                out[li] = kv
        # nothing above the last memory layer consumes these rows, so only
        # their key/value projections are needed there
        h = N.rms_norm(x, self.params[f"layers.{top}.ln1"])
        out[top] = (self._project_heads(h, top, "k"), self._project_heads(h, top, "v"))
        return out


    # -- training forward ------------------------------------------------------

    def _gather_extras(self, plan: CrossbatchPlan, prev_kv: dict[int, tuple[Tensor, Tensor]],
                       row_of: dict[tuple[int, int], int], slots: list[int],
                       t: int, differentiable: bool) -> dict[int, _Extras]:
        """Assemble per-layer [b, H, E*T, Dh] extra keys/values for ``slots``."""
        cfg = self.cfg
        b = len(slots)
        e_max = max(len(plan.per_slot[s]) for s in slots)
        if e_max == 0:
            return {}
        idx = np.zeros((b, e_max), dtype=np.int64)
        pad_add = np.zeros((b, 1, 1, e_max * t), dtype=self.dtype)
        win_ctx = np.zeros((b, e_max), dtype=np.int64)
        c_max = max(plan.n_contexts[s] for s in slots)
        polarity = np.zeros((b, c_max), dtype=np.int64)
        for j, s in enumerate(slots):
            windows = plan.per_slot[s]
            for e, pw in enumerate(windows):
                idx[j, e] = row_of[(pw.source_slot, pw.window_index)]
                win_ctx[j, e] = pw.context_id
                polarity[j, pw.context_id - 1] = 1 if pw.polarity == "positive" else -1
            pad_add[j, :, :, len(windows) * t:] = N.MASK_VALUE

        extras: dict[int, _Extras] = {}
        flat = idx.reshape(-1)
        for li, (k, v) in prev_kv.items():
            def pick(src: Tensor) -> Tensor:
                g = N.take_rows(src, flat)                                    # [b*E, H, T, Dh]
                g = N.reshape(g, (b, e_max, cfg.n_heads, t, cfg.head_dim))
                g = N.transpose(g, (0, 2, 1, 3, 4))
                g = N.reshape(g, (b, cfg.n_heads, e_max * t, cfg.head_dim))
                return g if differentiable else N.stop_gradient(g)
            extras[li] = _Extras(pick(k), pick(v), pad_add, win_ctx, polarity, c_max)
        return extras

    def _current_rows(self, tokens: np.ndarray, extras: dict[int, _Extras],
                      collect_records: bool) -> tuple[Tensor, list[AttentionRecord]]:
        """Process current windows; memory layers merge planned extras."""
        cfg = self.cfg
        b, t = tokens.shape
        positions = np.arange(t)
        x = N.embedding(self.params["embed"], tokens)
        records: list[AttentionRecord] = []
        for li in range(cfg.n_layers):
            if li not in cfg.memory_layers:
                x, _ = self._plain_layer(x, li, positions, collect_kv=False)
                continue
            q, k, v = self._attn_inputs(x, li)
            if self._layer_rotary(li):
                q = N.rotary_encode(q, positions, cfg.rotary_base)
                k = N.rotary_encode(k, positions, cfg.rotary_base)
            qs = self._scaled_q(q, li)
            ext = extras.get(li)
            causal = self._causal_add(t)
            if ext is None:
                # no planned contexts anywhere: plain causal attention
                out, p_loc, _ = merged_softmax_attention(qs, (k, v), None, causal)
                if collect_records:
                    records.append(AttentionRecord(
                        li, p_loc.data.sum(-1),
                        per_context=np.zeros((b, cfg.n_heads, t, 0), dtype=self.dtype),
                        context_polarity=np.zeros((b, 0), dtype=np.int64)))
            elif cfg.integration_mode == "merged":
                out, p_loc, p_ext = merged_softmax_attention(
                    qs, (k, v), (ext.k, ext.v), causal, ext.pad_add)
                if self.debug_sink is not None:
                    self.debug_sink.append((li, p_ext.data.copy(),
                                            ext.window_context.copy(), ext.polarity.copy()))
                if collect_records:
                    records.append(self._bucket_record(li, p_loc.data, p_ext.data, ext, gate=None))
            else:
                out_loc, p_loc, _ = merged_softmax_attention(qs, (k, v), None, causal)
                logits_ext = N.add(N.matmul(qs, N.transpose(ext.k, (0, 1, 3, 2))),
                                   Tensor(ext.pad_add))
                p_ext = N.softmax_last_axis(logits_ext)
                # a slot with zero planned windows would otherwise softmax a
                # fully-masked row into uniform weights; zero it instead
                valid = (ext.pad_add == 0).astype(self.dtype)
                p_ext = N.mul(p_ext, Tensor(valid))
                out_mem = N.matmul(p_ext, ext.v)
                gate_bias = self.params[f"layers.{li}.gate_bias"]
                out = gated_integration(out_mem, out_loc, gate_bias)
                if collect_records:
                    g = float(1.0 / (1.0 + np.exp(-gate_bias.data)))
                    records.append(self._bucket_record(li, p_loc.data * (1 - g),
                                                       p_ext.data * g, ext, gate=g))
            x = self._attn_out(out, x, li)
            x = self._ff_block(x, li)
        x = N.rms_norm(x, self.params["final_ln"])
        logits = N.add(N.matmul(x, self.params["lm_head"]), self.params["lm_bias"])
        return logits, records

    def _bucket_record(self, li: int, p_loc: np.ndarray, p_ext: np.ndarray,
                       ext: _Extras, gate: float | None) -> AttentionRecord:
        b, h, t, _ = p_loc.shape
        e = ext.window_context.shape[1]
        per_window = p_ext.reshape(b, h, t, e, -1).sum(axis=-1)
        per_context = np.zeros((b, h, t, ext.n_contexts), dtype=per_window.dtype)
        for j in range(b):
            for w in range(e):
                c = ext.window_context[j, w]
                if c > 0:
                    per_context[j, :, :, c - 1] += per_window[j, :, :, w]
        return AttentionRecord(li, p_loc.sum(-1), per_context, ext.polarity, None, gate)

    def forward_train(self, batch: TrainBatch, plan: CrossbatchPlan, *,
                      differentiable: bool = True, with_tape: bool = True,
                      collect_records: bool = True,
                      compute_loss: bool = False) -> TrainForward:
        """Crossbatch training forward over one batch.

        Previous windows referenced by the plan are re-encoded in the same
        pass, so with ``differentiable`` the loss gradient flows into their
        keys and values; ``differentiable=False`` is the stop-gradient
        ablation. ``with_tape=False`` runs evaluation-only. If a tape is
        already active the forward records onto it instead of nesting a new
        one. ``compute_loss`` adds the masked mean NLL against the batch
        targets on the same tape.
        """
        cfg = self.cfg
        b, t = batch.cur_tokens.shape
        if t != cfg.local_ctx_len:
            raise UsageError(f"window length {t} != local_ctx_len {cfg.local_ctx_len}")
        if plan.b_s != b:
            raise UsageError(f"plan covers {plan.b_s} slots, batch has {b}")
        referenced: list[tuple[int, int]] = []
        row_of: dict[tuple[int, int], int] = {}
        for s in range(b):
            for pw in plan.per_slot[s]:
                if not batch.prev_valid[pw.source_slot, pw.window_index]:
                    raise UsageError(f"plan references missing prev window {pw}")
                key = (pw.source_slot, pw.window_index)
                if key not in row_of:
                    row_of[key] = len(referenced)
                    referenced.append(key)

        tape: N.Tape | None = None
        ctx: N.Tape | _NullCtx = _NullCtx()
        if with_tape:
            tape = N.active_tape()
            if tape is None:
                tape = N.Tape()
                ctx = tape
        with ctx:
            if referenced:
                prev_tokens = np.stack([batch.prev_tokens[s, w] for s, w in referenced])
                prev_kv = self.encode_windows(prev_tokens)
                extras = self._gather_extras(plan, prev_kv, row_of, list(range(b)), t,
                                             differentiable)
            else:
                extras = {}
            logits, records = self._current_rows(batch.cur_tokens, extras, collect_records)
            loss = None
            if compute_loss:
                loss = N.cross_entropy_masked(logits, batch.cur_targets, batch.cur_mask)
        return TrainForward(logits, records, tape, loss)

    # -- inference forward -----------------------------------------------------

    def forward_infer(self, tokens: np.ndarray, memory: MemoryIndex | None, k: int,
                      *, doc_id: int = 0, start_position: int = 0,
                      collect_records: bool = False) -> InferForward:
        """One local window with exact top-k retrieval from ``memory``.

        Returns the window's logits, the layer-wise (key, value) pairs so the
        caller can append them to memory afterwards, and attention records.
        """
        cfg = self.cfg
        if k < 0:
            raise UsageError("k must be >= 0")
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.shape[0] > cfg.local_ctx_len:
            raise UsageError(f"forward_infer takes one window of <= {cfg.local_ctx_len} tokens")
        if memory is not None and cfg.memory_layers and (
                memory.n_heads != cfg.n_heads or memory.head_dim != cfg.head_dim):
            raise ShapeError("memory index geometry does not match the model")
        t = tokens.shape[0]
        positions = np.arange(t)
        x = N.embedding(self.params["embed"], tokens[None])
        new_kv: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        records: list[AttentionRecord] = []
        for li in range(cfg.n_layers):
            if li not in cfg.memory_layers:
                x, _ = self._plain_layer(x, li, positions, collect_kv=False)
                continue
            q, kl, vl = self._attn_inputs(x, li)
            new_kv[li] = (kl.data[0].copy(), vl.data[0].copy())
            if self._layer_rotary(li):
                q = N.rotary_encode(q, positions, cfg.rotary_base)
                kl = N.rotary_encode(kl, positions, cfg.rotary_base)
            qs = self._scaled_q(q, li)
            causal = self._causal_add(t)
            n_mem = memory.layer_size(li) if memory is not None else 0
            kk = min(k, n_mem)
            if kk == 0:
                out, p_loc, _ = merged_softmax_attention(qs, (kl, vl), None, causal)
                if collect_records:
                    records.append(AttentionRecord(
                        li, p_loc.data.sum(-1),
                        mass_memory=np.zeros_like(p_loc.data.sum(-1))))
            else:
                # retrieval scores must match attention logits: use the same
                # (possibly rotated) query against raw stored keys
                top = memory.topk(li, q.data[0], kk)
                km = Tensor(top.keys[None])       # [1, H, T, kk, Dh]
                vm = Tensor(top.values[None])
                q_pq = N.reshape(N.transpose(qs, (0, 2, 1, 3)), (1, t, cfg.n_heads, 1, cfg.head_dim))
                q_pq = N.transpose(q_pq, (0, 2, 1, 3, 4))     # [1, H, T, 1, Dh]
                logits_mem = N.matmul(q_pq, N.transpose(km, (0, 1, 2, 4, 3)))  # [1,H,T,1,kk]
                logits_mem = N.reshape(logits_mem, (1, cfg.n_heads, t, kk))
                logits_loc = N.add(N.matmul(qs, N.transpose(kl, (0, 1, 3, 2))), Tensor(causal))
                if cfg.integration_mode == "merged":
                    probs = N.softmax_last_axis(N.concat_last_axis([logits_loc, logits_mem]))
                    p_loc = N.slice_last_axis(probs, 0, t)
                    p_mem = N.slice_last_axis(probs, t, t + kk)
                    out_loc = N.matmul(p_loc, vl)
                    pm = N.reshape(p_mem, (1, cfg.n_heads, t, 1, kk))
                    out_mem = N.reshape(N.matmul(pm, vm), (1, cfg.n_heads, t, cfg.head_dim))
                    out = N.add(out_loc, out_mem)
                    if collect_records:
                        records.append(AttentionRecord(li, p_loc.data.sum(-1),
                                                       mass_memory=p_mem.data.sum(-1)))
                else:
                    p_loc = N.softmax_last_axis(logits_loc)
                    out_loc = N.matmul(p_loc, vl)
                    p_mem = N.softmax_last_axis(logits_mem)
                    pm = N.reshape(p_mem, (1, cfg.n_heads, t, 1, kk))
                    out_mem = N.reshape(N.matmul(pm, vm), (1, cfg.n_heads, t, cfg.head_dim))
                    gate_bias = self.params[f"layers.{li}.gate_bias"]
                    out = gated_integration(out_mem, out_loc, gate_bias)
                    if collect_records:
                        g = float(1.0 / (1.0 + np.exp(-gate_bias.data)))
                        records.append(AttentionRecord(li, p_loc.data.sum(-1) * (1 - g),
                                                       mass_memory=p_mem.data.sum(-1) * g,
                                                       gate=g))
            x = self._attn_out(out, x, li)
            x = self._ff_block(x, li)
        x = N.rms_norm(x, self.params["final_ln"])
        logits = N.add(N.matmul(x, self.params["lm_head"]), self.params["lm_bias"])
        return InferForward(logits.data[0], new_kv, records)

    def window_positions(self, start: int, t: int) -> np.ndarray:
        return np.arange(start, start + t)

    # -- reference local-only forwards ------------------------------------------

    def forward_local(self, tokens: np.ndarray) -> np.ndarray:
        """Vanilla causal forward over [B, T] windows (no memory machinery)."""
        return self.forward_long(np.asarray(tokens), chunk=None)

    def forward_long(self, tokens: np.ndarray, chunk: int | None = 256) -> np.ndarray:
        """Full-context causal forward with rotary positions 0..L-1.

        The local-only baseline's long-context evaluation path: attention is
        computed in query chunks so L x L score matrices never materialize.
        Memory layers behave per mem_positional_mode (no rotary for "none"),
        but no external memory is consulted.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        b, length = tokens.shape
        positions = np.arange(length)
        x = N.embedding(self.params["embed"], tokens)
        step = length if chunk is None else chunk
        for li in range(cfg.n_layers):
            q, k, v = self._attn_inputs(x, li)
            if self._layer_rotary(li):
                q = N.rotary_encode(q, positions, cfg.rotary_base)
                k = N.rotary_encode(k, positions, cfg.rotary_base)
            qs = self._scaled_q(q, li)
            outs = []
            for lo in range(0, length, step):
                hi = min(lo + step, length)
                qc = Tensor(qs.data[:, :, lo:hi])
                kc = Tensor(k.data[:, :, :hi])
                vc = Tensor(v.data[:, :, :hi])
                add = np.zeros((1, 1, hi - lo, hi), dtype=self.dtype)
                cols = np.arange(hi)[None, :]
                rows = np.arange(lo, hi)[:, None]
                add[0, 0][cols > rows] = N.MASK_VALUE
                out, _, _ = merged_softmax_attention(qc, (kc, vc), None, add)
                outs.append(out.data)
            out_full = Tensor(np.concatenate(outs, axis=2))
            x = self._attn_out(out_full, x, li)
            x = self._ff_block(x, li)
        x = N.rms_norm(x, self.params["final_ln"])
        logits = N.add(N.matmul(x, self.params["lm_head"]), self.params["lm_bias"])
        return logits.data[0] if squeeze else logits.data


class _NullCtx:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return None


# ---------------------------------------------------------------------------
# chunked gradient step (checkpointed crossbatch)
# ---------------------------------------------------------------------------

def plan_rows(plan: CrossbatchPlan) -> tuple[list[tuple[int, int]], dict[tuple[int, int], int]]:
    """Deduplicated (slot, window_index) previous windows referenced by a plan."""
    referenced: list[tuple[int, int]] = []
    row_of: dict[tuple[int, int], int] = {}
    for s in range(plan.b_s):
        for pw in plan.per_slot[s]:
            key = (pw.source_slot, pw.window_index)
            if key not in row_of:
                row_of[key] = len(referenced)
                referenced.append(key)
    return referenced, row_of


def build_extras_leaves(cfg: ModelConfig, dtype, plan: CrossbatchPlan,
                        prev_vals: dict[int, tuple[np.ndarray, np.ndarray]],
                        row_of: dict[tuple[int, int], int], slots: list[int], t: int,
                        requires_grad: bool,
                        ) -> tuple[dict[int, _Extras], dict[int, tuple[Tensor, Tensor, np.ndarray]]]:
    """Gather per-layer extras for ``slots`` as leaf tensors from numpy K/V."""
    e_max = max((len(plan.per_slot[s]) for s in slots), default=0)
    if not e_max or not prev_vals:
        return {}, {}
    cb = len(slots)
    idx = np.zeros((cb, e_max), dtype=np.int64)
    pad_add = np.zeros((cb, 1, 1, e_max * t), dtype=dtype)
    win_ctx = np.zeros((cb, e_max), dtype=np.int64)
    c_max = max(plan.n_contexts[s] for s in slots)
    polarity = np.zeros((cb, c_max), dtype=np.int64)
    for j, s in enumerate(slots):
        windows = plan.per_slot[s]
        for e, pw in enumerate(windows):
            idx[j, e] = row_of[(pw.source_slot, pw.window_index)]
            win_ctx[j, e] = pw.context_id
            polarity[j, pw.context_id - 1] = 1 if pw.polarity == "positive" else -1
        pad_add[j, :, :, len(windows) * t:] = N.MASK_VALUE
    flat = idx.reshape(-1)
    extras: dict[int, _Extras] = {}
    leaf_meta: dict[int, tuple[Tensor, Tensor, np.ndarray]] = {}
    for li, (kv_k, kv_v) in prev_vals.items():
        def leaf(src: np.ndarray) -> Tensor:
            g = src[flat].reshape(cb, e_max, cfg.n_heads, t, cfg.head_dim)
            g = np.ascontiguousarray(g.transpose(0, 2, 1, 3, 4))
            g = g.reshape(cb, cfg.n_heads, e_max * t, cfg.head_dim)
            return Tensor(g, requires_grad=requires_grad)
        k_leaf, v_leaf = leaf(kv_k), leaf(kv_v)
        extras[li] = _Extras(k_leaf, v_leaf, pad_add, win_ctx, polarity, c_max)
        leaf_meta[li] = (k_leaf, v_leaf, flat)
    return extras, leaf_meta


def encode_prev_values(model: Transformer, batch: TrainBatch,
                       referenced: list[tuple[int, int]],
                       ) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    if not referenced:
        return {}
    prev_tokens = np.stack([batch.prev_tokens[s, w] for s, w in referenced])
    kv = model.encode_windows(prev_tokens)
    return {li: (k.data, v.data) for li, (k, v) in kv.items()}


FULL_TAPE_SCORE_BYTES = 200 * 2**20


def crossbatch_grad_step(model: Transformer, batch: TrainBatch, plan: CrossbatchPlan,
                         *, differentiable: bool = True, chunk_slots: int = 8,
                         collect_records: bool = False, force_chunked: bool = False,
                         ) -> tuple[float, list[AttentionRecord]]:
    """Accumulate exact crossbatch gradients, chunking when scores get large.

    Small steps run on one tape. Otherwise previous windows are encoded once
    without a tape; current windows run in slot chunks against leaf copies of
    their extras, and the extras' gradients are then pushed through per-chunk
    re-encodings of the previous windows. Parameter .grad buffers accumulate
    across all chunks (caller zeroes them).
    """
    cfg = model.cfg
    b, t = batch.cur_tokens.shape
    referenced, row_of = plan_rows(plan)
    denom = float(batch.cur_mask.sum())
    if denom == 0:
        raise UsageError("crossbatch_grad_step: empty loss mask")

    score_bytes = model.dtype.itemsize * b * cfg.n_heads * t * t * (1 + plan.max_windows)
    if score_bytes <= FULL_TAPE_SCORE_BYTES and not force_chunked:
        fwd = model.forward_train(batch, plan, differentiable=differentiable,
                                  collect_records=collect_records, compute_loss=True)
        N.backward(fwd.tape, fwd.loss)
        return fwd.loss.item(), fwd.records

    prev_vals = encode_prev_values(model, batch, referenced)  # no tape active here
    n_prev = len(referenced)
    grad_k = {li: np.zeros((n_prev, cfg.n_heads, t, cfg.head_dim), dtype=model.dtype)
              for li in prev_vals}
    grad_v = {li: np.zeros_like(g) for li, g in grad_k.items()}

    total_loss = 0.0
    all_records: list[list[AttentionRecord]] = []
    for lo in range(0, b, chunk_slots):
        hi = min(lo + chunk_slots, b)
        slots = list(range(lo, hi))
        chunk_mask = batch.cur_mask[lo:hi]
        with N.Tape() as tape:
            extras, leaf_meta = build_extras_leaves(
                cfg, model.dtype, plan, prev_vals, row_of, slots, t,
                requires_grad=differentiable)
            logits, recs = model._current_rows(batch.cur_tokens[lo:hi], extras, collect_records)
            if chunk_mask.sum() > 0:
                ce = N.cross_entropy_masked(logits, batch.cur_targets[lo:hi], chunk_mask)
                loss_chunk = N.scale(ce, float(chunk_mask.sum()) / denom)
                N.backward(tape, loss_chunk)
                total_loss += loss_chunk.item()
        if collect_records:
            all_records.append(recs)
        for li, (k_leaf, v_leaf, flat) in leaf_meta.items():
            for leaf_t, buf in ((k_leaf, grad_k[li]), (v_leaf, grad_v[li])):
                if leaf_t.grad is None:
                    continue
                g = leaf_t.grad.reshape(len(slots), cfg.n_heads, -1, t, cfg.head_dim)
                g = g.transpose(0, 2, 1, 3, 4).reshape(-1, cfg.n_heads, t, cfg.head_dim)
                np.add.at(buf, flat, g)

    # push extras gradients into the previous windows' parameters
    _push_prev_grads(model, batch, referenced, grad_k, grad_v,
                     differentiable=differentiable, chunk_slots=chunk_slots)

    records: list[AttentionRecord] = []
    if collect_records and all_records:
        for i in range(len(all_records[0])):
            chunk_recs = [r[i] for r in all_records]
            records.append(AttentionRecord(
                layer=chunk_recs[0].layer,
                mass_local=np.concatenate([c.mass_local for c in chunk_recs]),
                per_context=_cat_padded([c.per_context for c in chunk_recs]),
                context_polarity=_cat_padded([c.context_polarity for c in chunk_recs]),
                gate=chunk_recs[0].gate,
            ))
    return total_loss, records


def exposure_records(model: Transformer, batch: TrainBatch, plan: CrossbatchPlan,
                     chunk_slots: int = 8) -> list[AttentionRecord]:
    """Evaluation-only attention records for a crossbatch exposure.

    Same math as forward_train(collect_records=True) but chunked over slots,
    so large-d exposures never materialize a full-batch score tensor.
    """
    b, t = batch.cur_tokens.shape
    referenced, row_of = plan_rows(plan)
    prev_vals = encode_prev_values(model, batch, referenced)
    all_records: list[list[AttentionRecord]] = []
    for lo in range(0, b, chunk_slots):
        slots = list(range(lo, min(lo + chunk_slots, b)))
        extras, _ = build_extras_leaves(model.cfg, model.dtype, plan, prev_vals,
                                        row_of, slots, t, requires_grad=False)
        _, recs = model._current_rows(batch.cur_tokens[lo:min(lo + chunk_slots, b)],
                                      extras, collect_records=True)
        all_records.append(recs)
    merged: list[AttentionRecord] = []
    for i in range(len(all_records[0])):
        chunk_recs = [r[i] for r in all_records]
        merged.append(AttentionRecord(
            layer=chunk_recs[0].layer,
            mass_local=np.concatenate([c.mass_local for c in chunk_recs]),
            per_context=_cat_padded([c.per_context for c in chunk_recs]),
            context_polarity=_cat_padded([c.context_polarity for c in chunk_recs]),
            gate=chunk_recs[0].gate,
        ))
    return merged


def _push_prev_grads(model, batch, referenced, grad_k, grad_v, *,
                     differentiable: bool, chunk_slots: int) -> None:
    if not differentiable or not referenced:
        return
    n_prev = len(referenced)
    for lo in range(0, n_prev, chunk_slots):
        hi = min(lo + chunk_slots, n_prev)
        rows = np.stack([batch.prev_tokens[s, w] for s, w in referenced[lo:hi]])
        with N.Tape() as tape:
            kv = model.encode_windows(rows)
            seeds = []
            for li, (k_t, v_t) in kv.items():
                seeds.append((k_t, grad_k[li][lo:hi]))
                seeds.append((v_t, grad_v[li][lo:hi]))
            N.backward_from(tape, seeds)


def _cat_padded(arrays: list[np.ndarray | None]) -> np.ndarray | None:
    arrays = [a for a in arrays if a is not None]
    if not arrays:
        return None
    c = max(a.shape[-1] for a in arrays)
    out = []
    for a in arrays:
        if a.shape[-1] < c:
            pad = [(0, 0)] * (a.ndim - 1) + [(0, c - a.shape[-1])]
            a = np.pad(a, pad)
        out.append(a)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in param_names(cfg):
            arr = params[name].data.astype("<f4")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            f.write(arr.tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[ModelConfig, dict[str, Tensor]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        cfg = ModelConfig.from_dict(json.loads(raw[off:off + blob_len].decode()))
    except (ValueError, TypeError) as e:
        raise FormatError(f"{path}: bad config blob: {e}") from e
    off += blob_len
    params: dict[str, Tensor] = {}
    try:
        for name in param_names(cfg):
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
            off += 4 * ndim
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, "<f4", n, off).reshape(shape)
            off += 4 * n
            params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    except (struct.error, ValueError) as e:
        raise FormatError(f"{path}: truncated checkpoint: {e}") from e
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return cfg, params
