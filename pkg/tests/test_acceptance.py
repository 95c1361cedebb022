"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavy criteria (5, 6, 7) run the real experiments at the stated scale;
the two meta-training runs are shared module-scoped fixtures. Run with
``pytest tests/test_acceptance.py -v -s`` to watch the lines appear.
"""

import subprocess
import sys
import time
from collections import defaultdict

import numpy as np
import pytest

from mulo.baselines import MUADAM_S, AdamHyper, GridSpec, grid_search
from mulo.coordcheck import run_coordcheck
from mulo.harness import EvalTask, adam_spec, lo_spec, run_eval
from mulo.lo import UpdateRuleConfig, apply_update
from mulo.optimizee import MLPSpec, backward, forward, init_mlp
from mulo.parametrization import LayerRole, ParamMode, update_scale
from mulo.pes import (
    MetaTrainConfig,
    OuterSchedule,
    PESConfig,
    PesEstimator,
    TaskSet,
    TaskSpec,
    meta_train,
)
from mulo.tensor import RngStream


def check(num: int, passed: bool, detail: str) -> None:
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {num}: {detail}")
    assert passed, f"criterion {num}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: backprop vs central finite differences


def fd_grads(params, X, y, h=1e-5):
    grads = []
    for arr in params.arrays():
        g = np.zeros_like(arr)
        flat, gflat = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = forward(params, X, y).loss
            flat[i] = orig - h
            lm = forward(params, X, y).loss
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def test_criterion_1_gradient_oracle():
    t0 = time.monotonic()
    worst = 0.0
    count = 0
    draw = 0
    while count < 100:
        rng = RngStream(10_000 + draw)
        draw += 1
        mode = ParamMode.MUP if draw % 2 else ParamMode.SP
        width = int(rng.child(0).integers(5, 10))
        classes = int(rng.child(1).integers(2, 5))
        in_dim = int(rng.child(2).integers(3, 6))
        batch = int(rng.child(3).integers(2, 8))
        spec = MLPSpec(in_dim, width, 3, classes, mode=mode, zero_init_output=False)
        params = init_mlp(spec, rng.child(4))
        X = rng.child(5).standard_normal((batch, in_dim))
        y = np.asarray(rng.child(6).integers(0, classes, size=batch), dtype=np.int64)
        rec = forward(params, X, y)
        # reject draws with pre-activations near the relu kink, where central
        # differences are invalid regardless of the implementation
        if min(np.min(np.abs(z)) for z in rec.preacts[:-1]) < 1e-3:
            continue
        count += 1
        got = backward(params, rec, X, y)
        want = fd_grads(params, X, y)
        for a, b in zip(got, want):
            scale = max(np.max(np.abs(b)), 1e-8)
            worst = max(worst, np.max(np.abs(a - b)) / scale)
    dt = time.monotonic() - t0
    check(1, worst < 1e-5 and dt < 60, f"max rel err {worst:.3g} over 100 nets (tol 1e-5), {dt:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: PES unbiasedness on the analytic quadratic


def test_criterion_2_pes_unbiasedness():
    t0 = time.monotonic()
    dim = 5
    phi = np.array([0.3, -1.2, 0.7, 2.0, -0.5])
    cfg = PESConfig(num_pairs=1, sigma=0.01, trunc_len=1, max_unroll=1)
    est = PesEstimator(
        dim,
        cfg,
        RngStream(2025),
        make_state=lambda rng: None,
        unroll=lambda p, st, rng, k: (0.5 * float(p @ p), False),
    )
    n = 100_000
    acc = np.zeros(dim)
    sq = np.zeros(dim)
    for _ in range(n):
        g = est.truncation(phi).grad
        acc += g
        sq += g * g
    mean = acc / n
    se = np.sqrt((sq / n - mean**2) / n)
    z = np.abs((mean - phi) / se)
    dt = time.monotonic() - t0
    check(2, bool(np.all(z < 3.0)) and dt < 60, f"per-coordinate |z| max {z.max():.2f} (tol 3), {dt:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: update-rule width scaling


def test_criterion_3_update_rule_scaling():
    rng = RngStream(33)
    m = rng.child(0).standard_normal(1)
    d = rng.child(1).standard_normal(1)
    cfg = UpdateRuleConfig()
    products, sp_mags = [], []
    for fan_in in (128, 512, 2048):
        geom_scale = update_scale(LayerRole.HIDDEN, _geom(fan_in), ParamMode.MUP)
        step = apply_update(np.zeros((1, 1)), m, d, cfg, geom_scale)
        products.append(abs(step[0, 0]) * fan_in)
        sp_scale = update_scale(LayerRole.HIDDEN, _geom(fan_in), ParamMode.SP)
        sp_mags.append(abs(apply_update(np.zeros((1, 1)), m, d, cfg, sp_scale)[0, 0]))
    rel_spread = (max(products) - min(products)) / products[0]
    sp_spread = max(sp_mags) - min(sp_mags)
    check(
        3,
        rel_spread <= 1e-12 and sp_spread == 0.0,
        f"MUP |step|*fan_in spread {rel_spread:.2e} (tol 1e-12), SP spread {sp_spread}",
    )


def _geom(fan_in):
    from mulo.parametrization import LayerGeometry

    return LayerGeometry(fan_in, 8)


# ---------------------------------------------------------------------------
# criterion 4: Adam oracle equivalence


def test_criterion_4_adam_oracle():
    from mulo.baselines import AdamState, adam_step

    rng = RngStream(44)
    w0 = rng.child(0).standard_normal((4, 3))
    grad_seq = [rng.child(10 + t).standard_normal((4, 3)) for t in range(10)]

    # independent reference implementation
    w, mm, vv = w0.copy(), np.zeros_like(w0), np.zeros_like(w0)
    ref = []
    for t, g in enumerate(grad_seq, start=1):
        mm = 0.9 * mm + 0.1 * g
        vv = 0.999 * vv + 0.001 * g * g
        w = w - 0.05 * (mm / (1 - 0.9**t)) / (np.sqrt(vv / (1 - 0.999**t)) + 1e-8)
        ref.append(w.copy())

    spec = MLPSpec(4, 4, 2, 3, mode=ParamMode.SP)
    params = init_mlp(spec, RngStream(0))
    params.layers[0].weight = w0.copy()
    state = AdamState.for_params(params)
    hp = AdamHyper(lr=0.05)
    worst = 0.0
    for t, g in enumerate(grad_seq):
        grads = [np.zeros_like(a) for a in params.arrays()]
        grads[0] = g
        adam_step(state, params, grads, hp, ParamMode.SP)
        worst = max(worst, np.max(np.abs(params.layers[0].weight - ref[t])))
    check(4, worst < 1e-10, f"10-step trajectory max abs diff {worst:.3g} (tol 1e-10)")


# ---------------------------------------------------------------------------
# criterion 5: coordinate-check reproduction


COORD_TASK = TaskSpec(
    width=64, depth=3, input_dim=32, num_classes=10, batch_size=64,
    synthetic_n=8192, synthetic_noise=1.0, synthetic_seed=0,
)


def _peak_ratios(records, widths):
    peak = defaultdict(float)  # (width, layer) -> max std over t and seeds
    layers = sorted({r.layer for r in records})
    for r in records:
        peak[(r.width, r.layer)] = max(peak[(r.width, r.layer)], r.std)
    lo, hi = min(widths), max(widths)
    return {l: peak[(hi, l)] / max(peak[(lo, l)], 1e-300) for l in layers}


def test_criterion_5_coordinate_check():
    t0 = time.monotonic()
    widths = [64, 256, 1024]
    seeds = [0, 1, 2]
    mu_records = run_coordcheck(
        widths, adam_spec(MUADAM_S, ParamMode.MUP), COORD_TASK, steps=500, seeds=seeds, std_cap=1e12
    )
    sp_records = run_coordcheck(
        widths, adam_spec(AdamHyper(lr=0.1), ParamMode.SP), COORD_TASK, steps=500, seeds=seeds, std_cap=1e12
    )
    mu_ratios = _peak_ratios(mu_records, widths)
    sp_ratios = _peak_ratios(sp_records, widths)
    mu_ok = all(r <= 10.0 for r in mu_ratios.values())
    sp_ok = max(sp_ratios.values()) > 10.0
    dt = time.monotonic() - t0
    check(
        5,
        mu_ok and sp_ok and dt < 1800,
        f"MUP per-layer ratios {[f'{v:.2f}' for v in mu_ratios.values()]} (all <= 10), "
        f"SP ratios {[f'{v:.2f}' for v in sp_ratios.values()]} (max > 10), {dt:.0f}s",
    )


# ---------------------------------------------------------------------------
# criteria 6 and 7: desk-scale meta-generalization (shared meta-training)


META_TASK_KW = dict(
    depth=3, input_dim=16, num_classes=10, batch_size=32,
    synthetic_n=4096, synthetic_noise=1.0, synthetic_seed=0,
)
META_T = 200


def _meta_train_lo(mode: ParamMode):
    cfg = MetaTrainConfig(
        tasks=TaskSet((TaskSpec(width=32, **META_TASK_KW), TaskSpec(width=64, **META_TASK_KW))),
        mode=mode,
        pes=PESConfig(num_pairs=4, sigma=0.01, trunc_len=20, max_unroll=META_T),
        schedule=OuterSchedule(max_lr=3e-3, warmup_steps=100, total_steps=1000, final_lr=1e-3),
        seed=0,
        checkpoint_every=0,
        log_every=200,
    )
    return meta_train(cfg), cfg


@pytest.fixture(scope="module")
def trained_mulo():
    return _meta_train_lo(ParamMode.MUP)


@pytest.fixture(scope="module")
def trained_splo():
    return _meta_train_lo(ParamMode.SP)


def _eval_width(res, cfg, mode, width, steps, seeds=(0, 1, 2, 3, 4)):
    task = EvalTask(
        f"w{width}", TaskSpec(width=width, **META_TASK_KW), steps=steps, seeds=tuple(seeds)
    )
    spec = lo_spec(res.lo, cfg.rule, mode, meta_unroll=META_T)
    return run_eval(task, spec)


def test_criterion_6_width_meta_generalization(trained_mulo, trained_splo):
    t0 = time.monotonic()
    mu_res, mu_cfg = trained_mulo
    sp_res, sp_cfg = trained_splo
    mu = _eval_width(mu_res, mu_cfg, ParamMode.MUP, width=512, steps=5 * META_T)
    sp = _eval_width(sp_res, sp_cfg, ParamMode.SP, width=512, steps=5 * META_T)
    mu_final = float(np.mean([c.losses[-1] for c in mu.curves]))
    sp_final = float(np.mean([c.losses[-1] for c in sp.curves]))
    mu_div = sum(bool(c.diverged.any()) for c in mu.curves)
    sp_div = sum(bool(c.diverged.any()) for c in sp.curves)
    dt = time.monotonic() - t0
    check(
        6,
        mu_final < sp_final and mu_div <= sp_div,
        f"width-512 final loss: MUP-LO {mu_final:.4f} < SP-LO {sp_final:.4f}; "
        f"diverged seeds {mu_div} <= {sp_div}; eval {dt:.0f}s",
    )


def test_criterion_7_horizon_generalization(trained_mulo):
    t0 = time.monotonic()
    mu_res, mu_cfg = trained_mulo
    cs = _eval_width(mu_res, mu_cfg, ParamMode.MUP, width=64, steps=25 * META_T)
    finite = all(np.isfinite(c.losses).all() and not c.diverged.any() for c in cs.curves)
    mean_curve = cs.mean()
    k = max(1, len(mean_curve) // 10)
    first_decile = float(np.mean(mean_curve[:k]))
    last_decile = float(np.mean(mean_curve[-k:]))
    dt = time.monotonic() - t0
    check(
        7,
        finite and last_decile <= first_decile and dt < 3600,
        f"25x horizon at width 64: finite={finite}, last-decile {last_decile:.4f} "
        f"<= first-decile {first_decile:.4f}, {dt:.0f}s",
    )


# ---------------------------------------------------------------------------
# criterion 8: grid-search contract


def test_criterion_8_grid_search_contract():
    configs = GridSpec().configs()
    a = 8.0

    def evaluate(hp, seed):
        w = 1.0
        for _ in range(40):
            w -= hp.lr * a * w
        loss = 0.5 * a * w * w
        return loss, not np.isfinite(loss)

    ranked = grid_search(evaluate, GridSpec(), seeds=[0])
    analytic = min(GridSpec().lrs, key=lambda lr: abs(1.0 - lr * a))
    check(
        8,
        len(configs) == 500 and ranked[0].hp.lr == analytic,
        f"{len(configs)} configs enumerated; tuner picked lr={ranked[0].hp.lr} "
        f"(analytic optimum nearest grid point {analytic})",
    )


# ---------------------------------------------------------------------------
# criterion 9: CLI determinism


def _run_cli(args, cwd):
    subprocess.run(
        [sys.executable, "-m", "mulo.cli", *args],
        check=True,
        cwd=cwd,
        capture_output=True,
    )


def test_criterion_9_cli_determinism(tmp_path):
    meta_cfg = tmp_path / "meta.json"
    meta_cfg.write_text(
        """
        {"mode": "mup", "seed": 3,
         "tasks": [{"width": 8, "depth": 3, "input_dim": 4, "num_classes": 3,
                    "batch_size": 16, "synthetic_n": 256, "synthetic_noise": 0.5}],
         "pes": {"num_pairs": 1, "sigma": 0.01, "trunc_len": 4, "max_unroll": 20},
         "schedule": {"max_lr": 3e-3, "warmup_steps": 2, "total_steps": 6, "final_lr": 1e-3},
         "checkpoint_every": 0, "log_every": 0}
        """
    )
    sweep_spec = tmp_path / "sweep.json"
    sweep_spec.write_text(
        """
        {"base_task": {"input_dim": 4, "num_classes": 3, "batch_size": 16,
                       "synthetic_n": 256, "synthetic_noise": 0.5, "synthetic_seed": 0},
         "widths": [8, 16], "depths": [3], "steps": [10], "seeds": [0, 1],
         "optimizers": [{"kind": "adam", "lr": 0.01}, {"kind": "muadam", "preset": "s"}]}
        """
    )
    task_args = [
        "--input-dim", "4", "--num-classes", "3", "--batch-size", "16", "--synthetic-n", "256",
    ]
    for tag in ("a", "b"):
        d = tmp_path / tag
        _run_cli(["make-dataset", "--out", str(d / "ds.mlod"), "--n", "128", "--input-dim", "4",
                  "--num-classes", "3", "--seed", "5"], tmp_path)
        _run_cli(["meta-train", "--config", str(meta_cfg), "--out-dir", str(d / "mt")], tmp_path)
        _run_cli(["evaluate", "--optimizer", "muadam-s", "--width", "8", *task_args,
                  "--steps", "12", "--seeds", "0,1", "--out-dir", str(d / "ev")], tmp_path)
        _run_cli(["sweep", "--spec", str(sweep_spec), "--out-dir", str(d / "sw")], tmp_path)
        _run_cli(["coordcheck", "--optimizer", "muadam-s", "--widths", "8,16", *task_args,
                  "--steps", "10", "--seeds", "0", "--out-dir", str(d / "cc")], tmp_path)
        _run_cli(["tune-adam", "--width", "8", *task_args, "--steps", "3", "--seeds", "0",
                  "--out-dir", str(d / "tn")], tmp_path)
    artifacts = [
        "ds.mlod",
        "mt/meta_train_log.csv",
        "mt/lo_checkpoint.mulo",
        "mt/lo_checkpoint.mulo.json",
        "ev/curves.csv",
        "ev/curves_agg.csv",
        "sw/curves.csv",
        "sw/curves_agg.csv",
        "cc/coordcheck.csv",
        "tn/grid.csv",
    ]
    mismatched = [
        rel
        for rel in artifacts
        if (tmp_path / "a" / rel).read_bytes() != (tmp_path / "b" / rel).read_bytes()
    ]
    check(
        9,
        not mismatched,
        f"{len(artifacts)} artifacts byte-identical across reruns"
        + (f"; mismatched: {mismatched}" if mismatched else ""),
    )
