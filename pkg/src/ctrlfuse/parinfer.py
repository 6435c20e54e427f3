"""Simulated multi-worker inference: sequence shards, head-parallel attention, CFG groups.

Workers are threads. Outside attention each worker only touches its
contiguous slice of the token sequence. Inside attention an all-to-all turns
the sequence-sharded Q/K/V into full-sequence tensors for the worker's own
heads, and a second all-to-all sends the attention output back. With
guidance on, one half of the workers computes the positive-prompt prediction
and the other half the negative one; results are gathered in ascending
worker order and combined.
"""
from __future__ import annotations

import csv
import io
import os
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .controlnet import fused_denoise
from .denoiser import DiT, full_attention
from .diffusion import GuidanceConfig, NoiseSchedule, cfg_combine, sample_tokens, serial_guided_denoiser
from .errors import PlanError, ShapeError, WorkerError
from .numerics import DTYPE, Tensor
from .tokenizer import Geometry, VideoTokenizer

POLL = 0.05  # seconds between abort checks while waiting for a message


@dataclass(frozen=True)
class ShardPlan:
    workers: int
    groups: tuple  # tuple of worker-id tuples: (positive,) or (positive, negative)
    shards: tuple  # per worker (start, stop) over its group's sequence
    heads: tuple  # per worker tuple of head indices
    seq_len: int
    num_heads: int

    @property
    def guided(self):
        return len(self.groups) == 2

    def group_of(self, worker):
        for gi, g in enumerate(self.groups):
            if worker in g:
                return gi, g
        raise PlanError(f"worker {worker} is in no group")


def make_shard_plan(W, S, H, guidance=True):
    """Contiguous near-equal sequence shards and round-robin heads per group."""
    if W < 1:
        raise PlanError("need at least one worker")
    if guidance:
        if W % 2:
            raise PlanError(f"guidance splits workers into two groups; W={W} is odd")
        g = W // 2
        groups = (tuple(range(g)), tuple(range(g, W)))
    else:
        g = W
        groups = (tuple(range(W)),)
    if H % g:
        raise PlanError(f"{H} heads do not divide over groups of {g} workers")
    if S < g:
        raise PlanError(f"sequence of {S} tokens is shorter than the group size {g}")
    bounds = [S * r // g for r in range(g + 1)]
    shards, heads = [None] * W, [None] * W
    for members in groups:
        for r, wid in enumerate(members):
            shards[wid] = (bounds[r], bounds[r + 1])
            heads[wid] = tuple(h for h in range(H) if h % g == r)
    return ShardPlan(W, groups, tuple(shards), tuple(heads), S, H)


# --- collective ------------------------------------------------------------------

class CollectiveAborted(RuntimeError):
    pass


class Collective:
    """Point-to-point channels for every ordered worker pair plus byte counters."""

    def __init__(self, W):
        self.W = W
        self.channels = {(a, b): queue.Queue() for a in range(W) for b in range(W)}
        self.abort = threading.Event()
        self.lock = threading.Lock()
        self.log = []  # (kind, src, dst, nbytes) for messages between different workers

    def send(self, src, dst, payload, kind):
        if src != dst:
            with self.lock:
                self.log.append((kind, src, dst, int(payload.nbytes)))
        self.channels[(src, dst)].put(payload)

    def recv(self, src, dst):
        ch = self.channels[(src, dst)]
        while True:
            if self.abort.is_set():
                raise CollectiveAborted(f"worker {dst} stopped waiting for {src}")
            try:
                return ch.get(timeout=POLL)
            except queue.Empty:
                continue

    def bytes_by_kind(self, kind):
        return sum(n for k, _, _, n in self.log if k == kind)

    def exchange(self, me, members, outgoing, kind):
        """All-to-all within ``members``: ``outgoing[j]`` goes to members[j]; returns inbox by rank."""
        for j, dst in enumerate(members):
            self.send(me, dst, outgoing[j], kind)
        return [self.recv(src, me) for src in members]


# --- all-to-all (pure form) --------------------------------------------------------

def _split_heads(t, plan, members):
    return [np.ascontiguousarray(t[..., plan.heads[w], :]) for w in members]


def _join_sequence(parts):
    return np.concatenate(parts, axis=-3)


def all_to_all(tensors, plan: ShardPlan, group=0):
    """Sequence-sharded (..., S_w, H, dh) per worker -> head-sharded (..., S, H_w, dh)."""
    members = plan.groups[group]
    if len(tensors) != len(members):
        raise ShapeError(f"{len(tensors)} tensors for a group of {len(members)} workers")
    for w, t in zip(members, tensors):
        s0, s1 = plan.shards[w]
        if t.shape[-3] != s1 - s0 or t.shape[-2] != plan.num_heads:
            raise ShapeError(f"worker {w}: expected {s1 - s0} tokens x {plan.num_heads} heads, got {t.shape}")
    outbox = [_split_heads(t, plan, members) for t in tensors]
    return [_join_sequence([outbox[i][j] for i in range(len(members))]) for j in range(len(members))]


def _scatter_sequence(t, plan, members):
    return [np.ascontiguousarray(t[..., plan.shards[w][0]:plan.shards[w][1], :, :]) for w in members]


def _join_heads(parts, plan, members, like_shape):
    out = np.empty(like_shape[:-2] + (plan.num_heads, like_shape[-1]), dtype=parts[0].dtype)
    for w, p in zip(members, parts):
        out[..., plan.heads[w], :] = p
    return out


def all_to_all_inverse(tensors, plan: ShardPlan, group=0):
    """Head-sharded (..., S, H_w, dh) per worker -> sequence-sharded (..., S_w, H, dh)."""
    members = plan.groups[group]
    outbox = [_scatter_sequence(t, plan, members) for t in tensors]
    res = []
    for j, w in enumerate(members):
        parts = [outbox[i][j] for i in range(len(members))]
        res.append(_join_heads(parts, plan, members, parts[0].shape))
    return res


# --- workers ----------------------------------------------------------------------

def head_parallel_attention(coll: Collective, plan: ShardPlan, me):
    """Attention callable for worker ``me`` (same signature as ``full_attention``)."""
    _, members = plan.group_of(me)

    def attention(q, k, v):
        qkv = np.stack([q.data, k.data, v.data])  # (3, B, S_w, H, dh)
        inbox = coll.exchange(me, members, _split_heads(qkv, plan, members), "qkv")
        full = _join_sequence(inbox)  # (3, B, S, H_me, dh)
        o = full_attention(Tensor(full[0]), Tensor(full[1]), Tensor(full[2])).data
        inbox = coll.exchange(me, members, _scatter_sequence(o, plan, members), "out")
        return Tensor(_join_heads(inbox, plan, members, inbox[0].shape))

    return attention


def _slice_tokens(a, s0, s1):
    a = np.asarray(a)
    return a[..., s0:s1, :]


def parallel_denoise(base: DiT, x, sigma, pos_text, neg_text, branches, controls, w, plan: ShardPlan,
                     grid=None, scale=1.0, collective=None, fail_worker=None):
    """Guided noise prediction computed by ``plan.workers`` threads.

    ``x`` is (B, S, L); ``controls`` one (B, S, L) or (S, L) array per branch.
    Without guidance the plan has one group and the positive prediction is
    returned unguided. ``fail_worker`` injects a failure (for testing).
    """
    x = np.asarray(x, dtype=DTYPE)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B, S, _ = x.shape
    if S != plan.seq_len:
        raise ShapeError(f"plan is for {plan.seq_len} tokens, input has {S}")
    if base.config.num_heads != plan.num_heads:
        raise PlanError(f"plan has {plan.num_heads} heads, model {base.config.num_heads}")
    coll = collective or Collective(plan.workers)
    results = [None] * plan.workers
    errors = {}

    def work(me):
        try:
            if me == fail_worker:
                raise RuntimeError("injected worker failure")
            gi, _ = plan.group_of(me)
            s0, s1 = plan.shards[me]
            text = pos_text if gi == 0 else neg_text
            ctl = [_slice_tokens(c, s0, s1) for c in controls]
            results[me] = fused_denoise(base, x[:, s0:s1], sigma, text, branches, ctl, w, grid=grid,
                                        attention=head_parallel_attention(coll, plan, me),
                                        positions=np.arange(s0, s1)).data
        except CollectiveAborted as exc:
            errors.setdefault(me, exc)
        except BaseException as exc:  # noqa: BLE001 - reported with the worker id
            errors[me] = exc
            coll.abort.set()

    threads = [threading.Thread(target=work, args=(me,), name=f"worker-{me}") for me in range(plan.workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        primary = [w for w, e in sorted(errors.items()) if not isinstance(e, CollectiveAborted)]
        wid = primary[0] if primary else min(errors)
        raise WorkerError(wid, errors[wid])
    preds = [np.concatenate([results[m] for m in members], axis=1) for members in plan.groups]
    out = cfg_combine(preds[0], preds[1], scale) if plan.guided else preds[0]
    return out[0] if squeeze else out


def parallel_guided_denoiser(base: DiT, plan: ShardPlan, branches=(), controls=(), w=None, grid=None):
    """Callable ``f(x, sigma, pos, neg, scale)`` for ``sample_tokens``."""
    branches = list(branches)

    def denoise(x, sigma, pos, neg, scale):
        return parallel_denoise(base, x, sigma, pos, neg, branches, controls, w, plan, grid, scale)

    return denoise


def qkv_bytes_per_layer(S, d, g, batch=1, itemsize=4):
    """Bytes leaving workers of one group for the Q/K/V exchange of one attention layer."""
    return 3 * batch * S * d * (g - 1) // g * itemsize


# --- scaling benchmark ---------------------------------------------------------------

@dataclass
class BenchResult:
    workers: list
    diffusion: list
    end_to_end: list
    max_abs_diff: list = field(default_factory=list)

    def speedups(self):
        return [self.diffusion[0] / t for t in self.diffusion], [self.end_to_end[0] / t for t in self.end_to_end]

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["stage"] + [f"W={w}" for w in self.workers])
        wr.writerow(["Diffusion only"] + [f"{t:.4f}" for t in self.diffusion])
        wr.writerow(["End-to-end"] + [f"{t:.4f}" for t in self.end_to_end])
        return buf.getvalue()


def available_cores():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def bench_scaling(workers, base: DiT, tokenizer: VideoTokenizer, geometry: Geometry, prompt="a red box",
                  negative="", steps=4, scale=1.5, seed=0, branches=(), control_videos=(), w=None):
    """Wall times per worker count with identical seeds.

    W=1 is the serial pipeline; larger W run with guidance split over two
    groups. End-to-end adds control tokenization and detokenization.
    """
    schedule = NoiseSchedule(steps=steps)
    guidance = GuidanceConfig(scale, negative)
    shape = (geometry.num_tokens, base.config.latent_dim)
    branches = list(branches)
    if branches and w is None:
        w = np.ones((len(branches), geometry.num_tokens), dtype=DTYPE)
    res = BenchResult(list(workers), [], [])
    ref = None
    for W in workers:
        t0 = time.perf_counter()
        controls = [tokenizer.tokenize(c).flat() for c in control_videos]
        if W == 1:
            den = serial_guided_denoiser(base, branches, controls, w, geometry)
        else:
            plan = make_shard_plan(W, geometry.num_tokens, base.config.num_heads, guidance=True)
            den = parallel_guided_denoiser(base, plan, branches, controls, w, geometry)
        t1 = time.perf_counter()
        tokens = sample_tokens(den, shape, schedule, guidance, [prompt], [seed])
        t2 = time.perf_counter()
        video = tokenizer.tokens_to_video(tokens[0], geometry)
        t3 = time.perf_counter()
        res.diffusion.append(t2 - t1)
        res.end_to_end.append(t3 - t0)
        ref = video if ref is None else ref
        res.max_abs_diff.append(float(np.max(np.abs(video - ref))))
    return res

