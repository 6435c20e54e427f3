import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctrlfuse.controlnet import create_branch, fused_denoise
from ctrlfuse.diffusion import GuidanceConfig, NoiseSchedule, cfg_combine, sample_video
from ctrlfuse.errors import PlanError, WorkerError
from ctrlfuse.parinfer import (Collective, all_to_all, all_to_all_inverse, bench_scaling, make_shard_plan,
                               parallel_denoise, parallel_guided_denoiser, qkv_bytes_per_layer)
from ctrlfuse.tokenizer import Geometry, VideoTokenizer

from conftest import TINY, randomize

GEO = Geometry(9, 48, 32)  # 2 x 3 x 2 = 12 tokens
S = GEO.num_tokens
TOK = VideoTokenizer()


def test_plan_examples():
    p = make_shard_plan(64, 56_320, 32, guidance=True)
    assert [len(g) for g in p.groups] == [32, 32]
    assert all(len(h) == 1 for h in p.heads)
    assert p.shards[0] == (0, 1760) and p.shards[32] == (0, 1760)
    p4 = make_shard_plan(4, 100, 8, guidance=True)
    assert p4.groups == ((0, 1), (2, 3)) and all(len(h) == 4 for h in p4.heads)
    p1 = make_shard_plan(1, 100, 8, guidance=False)
    assert p1.shards == ((0, 100),) and p1.heads == (tuple(range(8)),)


def test_plan_errors():
    with pytest.raises(PlanError):
        make_shard_plan(1, 10, 8, guidance=True)
    with pytest.raises(PlanError):
        make_shard_plan(6, 10, 8, guidance=True)  # groups of 3 do not divide 8 heads
    with pytest.raises(PlanError):
        make_shard_plan(8, 3, 8, guidance=False)


def _shards(plan, group, B=1, dh=2, seed=0):
    g = np.random.default_rng(seed)
    return [g.standard_normal((B, plan.shards[w][1] - plan.shards[w][0], plan.num_heads, dh))
            for w in plan.groups[group]]


@given(st.sampled_from([(1, 5, 4), (2, 7, 4), (4, 9, 8), (3, 6, 3)]), st.integers(0, 100))
def test_all_to_all_round_trip_and_conservation(cfg, seed):
    W, S_, H = cfg
    plan = make_shard_plan(W, S_, H, guidance=False)
    xs = _shards(plan, 0, seed=seed)
    ys = all_to_all(xs, plan)
    for w, y in zip(plan.groups[0], ys):
        assert y.shape[1:3] == (S_, len(plan.heads[w]))
    assert np.array_equal(np.sort(np.concatenate([x.ravel() for x in xs])),
                          np.sort(np.concatenate([y.ravel() for y in ys])))
    back = all_to_all_inverse(ys, plan)
    assert all(np.array_equal(a, b) for a, b in zip(xs, back))


def test_all_to_all_hand_trace():
    plan = make_shard_plan(2, 4, 2, guidance=False)
    # worker w holds rows 2w, 2w+1; entry value = 10 * row + head
    xs = [np.array([[[10 * r + h] for h in range(2)] for r in (2 * w, 2 * w + 1)], float)[None] for w in (0, 1)]
    ys = all_to_all(xs, plan)
    assert ys[0][0, :, 0, 0].tolist() == [0, 10, 20, 30]
    assert ys[1][0, :, 0, 0].tolist() == [1, 11, 21, 31]


def test_all_to_all_single_worker_is_identity():
    plan = make_shard_plan(1, 5, 4, guidance=False)
    xs = _shards(plan, 0)
    assert np.array_equal(all_to_all(xs, plan)[0], xs[0])


@pytest.fixture
def scene(tiny_base):
    g = np.random.default_rng(0)
    x = (3.0 * g.standard_normal((S, TINY.latent_dim))).astype(np.float32)
    brs = [create_branch(tiny_base, m, seed=i) for i, m in enumerate(("seg", "depth"))]
    for i, b in enumerate(brs):
        randomize(b, 50 + i)
    cs = [g.standard_normal((S, TINY.latent_dim)).astype(np.float32) for _ in brs]
    w = g.random((2, S)).astype(np.float32)
    return tiny_base, x, brs, cs, w


def _serial(base, x, brs, cs, w, scale):
    pos = fused_denoise(base, x, 2.0, "a red box", brs, cs, w, grid=GEO).data
    neg = fused_denoise(base, x, 2.0, "blurry", brs, cs, w, grid=GEO).data
    return cfg_combine(pos, neg, scale)


@pytest.mark.parametrize("W", [2, 4, 8])
def test_parallel_matches_serial(scene, W):
    base, x, brs, cs, w = scene
    plan = make_shard_plan(W, S, TINY.num_heads, guidance=True)
    par = parallel_denoise(base, x, 2.0, "a red box", "blurry", brs, cs, w, plan, GEO, scale=2.5)
    assert np.max(np.abs(par - _serial(base, x, brs, cs, w, 2.5))) <= 1e-5


def test_w4_and_w8_agree(scene):
    base, x, brs, cs, w = scene
    outs = [parallel_denoise(base, x, 2.0, "a red box", "", brs, cs, w,
                             make_shard_plan(W, S, TINY.num_heads), GEO, scale=1.5) for W in (4, 8)]
    assert np.max(np.abs(outs[0] - outs[1])) <= 1e-5


def test_single_worker_without_guidance_is_fused_denoise(scene):
    base, x, brs, cs, w = scene
    plan = make_shard_plan(1, S, TINY.num_heads, guidance=False)
    par = parallel_denoise(base, x, 2.0, "a red box", None, brs, cs, w, plan, GEO)
    assert np.array_equal(par, fused_denoise(base, x, 2.0, "a red box", brs, cs, w, grid=GEO).data)


@pytest.mark.parametrize("W,with_branches", [(4, False), (8, False), (4, True)])
def test_exchanged_bytes_match_formula(scene, W, with_branches):
    base, x, brs, cs, w = scene
    if not with_branches:
        brs, cs, w = [], [], None
    plan = make_shard_plan(W, S, TINY.num_heads)
    coll = Collective(W)
    parallel_denoise(base, x, 2.0, "p", "n", brs, cs, w, plan, GEO, scale=2.0, collective=coll)
    layers = TINY.num_blocks + sum(b.num_blocks for b in brs)
    g = W // 2
    per_layer = qkv_bytes_per_layer(S, TINY.dim, g)
    assert per_layer == 3 * S * TINY.dim * (g - 1) // g * 4
    assert coll.bytes_by_kind("qkv") == len(plan.groups) * layers * per_layer
    assert coll.bytes_by_kind("out") == coll.bytes_by_kind("qkv") // 3
    # every worker ships the same share: its S/g rows of all heads except its own
    sent = {}
    for kind, src, _, n in coll.log:
        if kind == "qkv":
            sent[src] = sent.get(src, 0) + n
    assert set(sent.values()) == {layers * 3 * (S // g) * TINY.dim * (g - 1) // g * 4}


def test_worker_failure_is_reported_without_hanging(scene):
    base, x, brs, cs, w = scene
    plan = make_shard_plan(4, S, TINY.num_heads)
    with pytest.raises(WorkerError) as info:
        parallel_denoise(base, x, 2.0, "p", "n", brs, cs, w, plan, GEO, fail_worker=2)
    assert info.value.worker_id == 2


def test_parallel_sampling_matches_serial_video(tiny_base):
    brs = [create_branch(tiny_base, "seg")]
    randomize(brs[0], 9)
    ctl = [TOK.tokenize(np.random.default_rng(1).random((9, 48, 32, 3))).flat()]
    sched, guid = NoiseSchedule(steps=3), GuidanceConfig(2.0, "")
    serial = sample_video(tiny_base, TOK, GEO, sched, guid, "a red box", 5, brs, ctl)
    for W in (2, 4, 8):
        den = parallel_guided_denoiser(tiny_base, make_shard_plan(W, S, TINY.num_heads), brs, ctl,
                                       np.ones((1, S), np.float32), GEO)
        par = sample_video(tiny_base, TOK, GEO, sched, guid, "a red box", 5, brs, ctl, denoise=den)
        assert np.max(np.abs(par - serial)) <= 1e-5


def test_bench_reports_two_rows(tiny_base):
    res = bench_scaling([1, 2, 4], tiny_base, TOK, GEO, steps=2, seed=0)
    lines = res.to_csv().splitlines()
    assert lines[0] == "stage,W=1,W=2,W=4"
    assert lines[1].startswith("Diffusion only,") and lines[2].startswith("End-to-end,")
    assert max(res.max_abs_diff) <= 1e-5
