"""Acceptance checks for the package's headline guarantees.

Each test covers one numbered acceptance criterion, asserts its tolerance
and its runtime limit, and emits exactly one PASS/FAIL line on the real
terminal (bypassing pytest capture) so the criterion outcomes are visible
in any test log.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from tdquant import cli
from tdquant.calib import accumulate_hessian, calibrate_model, gptq_quantize, hessian_objective, mean_error_top_timesteps
from tdquant.fisher import estimate_fisher, temporal_weights, uniform_weights
from tdquant.pipeline import ARTIFACTS, default_config, format_sig, run_pipeline, uniform_baseline_bits
from tdquant.quant import QuantSpec, calibrate_minmax, fake_quant
from tdquant.search import (
    BitSchedule,
    SearchConfig,
    SearchPath,
    StepLossEvaluator,
    beam_search,
    brute_force_optimum,
    pareto_prune,
)
from tdquant.toy_dit import ActivationTrace, DenoiseState, ModelSpec, TraceStore, backward_weight_grads, forward, init_model


@contextmanager
def criterion(capsys, num, title, limit_s=None):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        elapsed = time.perf_counter() - start
        with capsys.disabled():
            print(f"acceptance {num:02d} FAIL  {title}  ({elapsed:.2f}s)")
        raise
    elapsed = time.perf_counter() - start
    if limit_s is not None and elapsed >= limit_s:
        with capsys.disabled():
            print(f"acceptance {num:02d} FAIL  {title}  ({elapsed:.2f}s >= limit {limit_s:g}s)")
        pytest.fail(f"runtime limit exceeded: {elapsed:.2f}s >= {limit_s:g}s")
    bound = f" < {limit_s:g}s" if limit_s is not None else ""
    with capsys.disabled():
        print(f"acceptance {num:02d} PASS  {title}  ({elapsed:.2f}s{bound})")


def loss_value(model, state, target):
    return float(np.sum((forward(model, state) - target) ** 2))


def fd_grads(model, state, target, h=1e-5):
    grads = []
    for layer in model.layers:
        g = np.zeros_like(layer.w)
        for i in range(layer.w.shape[0]):
            for j in range(layer.w.shape[1]):
                orig = layer.w[i, j]
                layer.w[i, j] = orig + h
                up = loss_value(model, state, target)
                layer.w[i, j] = orig - h
                down = loss_value(model, state, target)
                layer.w[i, j] = orig
                g[i, j] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def test_01_analytic_gradients_match_finite_differences(capsys):
    """Analytic weight gradients agree with central differences to 1e-4
    relative error across >= 20 random small models."""
    with criterion(capsys, 1, "analytic gradients match central finite differences (rel 1e-4, 20 models)", 10.0):
        rng = np.random.default_rng(4001)
        checked = 0
        for k in range(20):
            d = int(rng.integers(4, 9))
            num_layers = int(rng.integers(2, 5))
            num_t = int(rng.integers(1, 4))
            n = int(rng.integers(1, 3))
            model = init_model(ModelSpec(num_layers=num_layers, hidden_dim=d, num_timesteps=num_t, token_count=n, seed=int(rng.integers(0, 1000))))
            t = int(rng.integers(1, num_t + 1))
            state = DenoiseState(z=rng.normal(size=(d, n)), t=t)
            target = rng.normal(size=(d, n))
            analytic = backward_weight_grads(model, state, target)
            numeric = fd_grads(model, state, target)
            for a, f in zip(analytic, numeric):
                rel = np.abs(a - f) / np.maximum(np.abs(f), 1e-6)
                assert float(np.max(rel)) <= 1e-4
            checked += 1
        assert checked >= 20


def test_02_scaled_accumulation_equals_direct_weighted_hessian(capsys):
    """Accumulating sqrt(alpha)-scaled traces reproduces the directly
    alpha-weighted covariance to 1e-10 max-abs on 100 random trace sets."""
    with criterion(capsys, 2, "scaled trace accumulation equals direct weighted Hessian (1e-10, 100 sets)", 5.0):
        rng = np.random.default_rng(4002)
        for k in range(100):
            d = int(rng.integers(2, 7))
            num_t = int(rng.integers(1, 6))
            alpha = rng.uniform(0.05, 2.0, size=(num_t, 1))
            store = TraceStore()
            direct = np.zeros((d, d))
            for t in range(1, num_t + 1):
                for rep in range(int(rng.integers(1, 3))):
                    x = rng.normal(size=(d, int(rng.integers(2, 7))))
                    store.add(ActivationTrace(t=t, layer=0, x=x, batch_id=rep))
                    direct += alpha[t - 1, 0] * (x @ x.T)
            got = accumulate_hessian(store, alpha, layer=0)
            assert float(np.max(np.abs(got.h - direct))) <= 1e-10


def reference_unweighted_gptq(w, store, layer, spec, damping=0.01):
    # independent reference built on numpy.linalg, no temporal weighting
    h = None
    for rec in store.records(layer):
        contrib = rec.x @ rec.x.T
        h = contrib if h is None else h + contrib
    params = calibrate_minmax(w, spec)
    damped = h + damping * float(np.mean(np.diag(h))) * np.eye(h.shape[0])
    h_inv = np.linalg.inv(damped)
    upper = np.linalg.cholesky(h_inv).T
    work = w.copy()
    w_hat = np.empty_like(w)
    for i in range(w.shape[1]):
        q = fake_quant(work[:, i : i + 1], params)[:, 0]
        w_hat[:, i] = q
        err = (work[:, i] - q) / upper[i, i]
        if i + 1 < w.shape[1]:
            work[:, i + 1 :] -= np.outer(err, upper[i, i + 1 :])
    rtn = fake_quant(w, params)
    if float(np.sum(((w - rtn) @ h) * (w - rtn))) < float(np.sum(((w - w_hat) @ h) * (w - w_hat))):
        return rtn
    return w_hat


def test_03_uniform_weighting_reduces_to_reference_gptq(capsys):
    """With uniform timestep weights the calibrated weights are bit-identical
    to an unweighted reference pass on 10 random layers."""
    with criterion(capsys, 3, "uniform weighting reduces to unweighted reference quantizer (bit-identical, 10 layers)", 10.0):
        rng = np.random.default_rng(4003)
        spec = QuantSpec(bits=3, symmetric=True, granularity="per_channel")
        for k in range(10):
            d = int(rng.integers(3, 8))
            num_t = int(rng.integers(2, 5))
            w = rng.normal(size=(int(rng.integers(2, 7)), d))
            store = TraceStore()
            for t in range(1, num_t + 1):
                store.add(ActivationTrace(t=t, layer=0, x=rng.normal(size=(d, d + 2)), batch_id=0))
            alpha = np.full((num_t, 1), 1.0 / num_t)
            hess = accumulate_hessian(store, alpha, layer=0)
            result = gptq_quantize(w, hess, spec)
            reference = reference_unweighted_gptq(w, store, 0, spec)
            assert np.array_equal(result.w_hat, reference)


def test_04_calibrated_weights_never_worse_than_rtn(capsys):
    """The error-compensated quantizer's weighted objective is <= plain
    round-to-nearest on 100 random instances, zero violations."""
    with criterion(capsys, 4, "error-compensated quantizer never worse than round-to-nearest (100 instances)", 30.0):
        rng = np.random.default_rng(4004)
        spec = QuantSpec(bits=3, symmetric=True, granularity="per_channel")
        violations = 0
        for k in range(100):
            d = int(rng.integers(2, 9))
            rows = int(rng.integers(1, 7))
            w = rng.normal(size=(rows, d)) * float(rng.uniform(0.5, 3.0))
            g = rng.normal(size=(d, d + 2))
            h = g @ g.T
            h = (h + h.T) / 2.0
            store = TraceStore()
            store.add(ActivationTrace(t=1, layer=0, x=g, batch_id=0))
            hess = accumulate_hessian(store, np.ones((1, 1)), layer=0)
            result = gptq_quantize(w, hess, spec)
            rtn = fake_quant(w, calibrate_minmax(w, spec))
            if hessian_objective(w, result.w_hat, hess) > hessian_objective(w, rtn, hess):
                violations += 1
        assert violations == 0


def test_05_exhaustive_beam_matches_brute_force(capsys):
    """With a beam wide enough to be exhaustive, the best feasible beam
    objective equals the brute-force optimum bit for bit, sharing one
    step-loss cache."""
    with criterion(capsys, 5, "exhaustive beam equals brute-force optimum (20 instances, shared cache)", 60.0):
        rng = np.random.default_rng(4005)
        targets = [3.0, 3.5, 4.0, 5.5, 8.0]
        for k in range(20):
            d = int(rng.integers(4, 7))
            n = int(rng.integers(1, 3))
            model = init_model(ModelSpec(num_layers=2, hidden_dim=d, num_timesteps=3, token_count=n, seed=int(rng.integers(0, 500))))
            fmap = estimate_fisher(model, calib_seeds=[int(rng.integers(1000, 2000))])
            cfg = SearchConfig(num_candidates=2, bit_target=targets[k % len(targets)], beam_width=64, palette=(3, 8))
            evaluator = StepLossEvaluator(model, model, seeds=[int(rng.integers(0, 100))], palette=cfg.palette)
            frontier = beam_search(model, model, fmap, cfg, seeds=evaluator.seeds, evaluator=evaluator)
            feasible = [p for p in frontier if p.avg_bits <= cfg.bit_target + 1e-12]
            assert feasible, "exhaustive beam lost every feasible path"
            beam_best = min(p.loss for p in feasible)
            brute = brute_force_optimum(model, model, fmap, cfg, seeds=evaluator.seeds, evaluator=evaluator)
            assert beam_best == brute.objective


def pareto_oracle(paths):
    keep = []
    for i, p in enumerate(paths):
        dominated = False
        for j, q in enumerate(paths):
            if i == j:
                continue
            if q.bits <= p.bits and q.loss <= p.loss and (q.bits < p.bits or q.loss < p.loss):
                dominated = True
                break
            if q.bits == p.bits and q.loss == p.loss and j < i:
                dominated = True
                break
        if not dominated:
            keep.append(i)
    return keep


def test_06_pareto_survivors_match_quadratic_scan(capsys):
    """Pruned survivor sets equal the O(n^2) domination scan on 200 random
    point clouds of size <= 100."""
    with criterion(capsys, 6, "survivor sets match quadratic domination scan (200 clouds)", 5.0):
        rng = np.random.default_rng(4006)
        for k in range(200):
            size = int(rng.integers(1, 101))
            paths = [
                SearchPath(
                    configs=(),
                    loss=float(rng.integers(0, 20)) / 4.0,
                    bits=int(rng.integers(1, 13)),
                )
                for _ in range(size)
            ]
            pruned = pareto_prune(paths, max_paths=len(paths))
            oracle = pareto_oracle(paths)
            assert len(pruned) == len(oracle)
            assert {id(p) for p in pruned} == {id(paths[i]) for i in oracle}


def test_07_searched_schedule_beats_uniform_four_bit(capsys, tmp_path):
    """On the built-in seeded model the searched mixed schedule at budget 4.0
    improves end-to-end trajectory MSE over the all-4-bit schedule by >= 5%."""
    with criterion(capsys, 7, "searched schedule beats uniform 4-bit end to end by >= 5%", 300.0):
        cfg = default_config(output_dir=str(tmp_path / "out"))
        assert cfg.model["num_timesteps"] == 10 and cfg.model["num_layers"] == 8
        assert cfg.search["bit_target"] == 4.0
        assert uniform_baseline_bits(cfg) == 4
        report = run_pipeline(cfg, render_figures=False)
        searched = float(report["end_to_end"]["selected_schedule_error"])
        uniform = float(report["end_to_end"]["uniform_baseline_error"])
        schedule = BitSchedule.load(tmp_path / "out" / ARTIFACTS["schedule"])
        assert schedule.avg_bits <= 4.0 + 1e-12
        assert len(np.unique(schedule.grid)) >= 2, "selected schedule is not mixed"
        assert searched <= uniform
        assert searched <= 0.95 * uniform, f"improvement below 5%: {searched} vs {uniform}"


def test_08_sensitivity_weighted_calibration_protects_top_timesteps(capsys):
    """Sensitivity-guided calibration's mean reconstruction error over the
    top-20% highest-weight timesteps is <= uniform calibration's."""
    with criterion(capsys, 8, "weighted calibration protects high-sensitivity timesteps", 120.0):
        from tdquant.toy_dit import sample_trajectory

        cfg = default_config()
        model = init_model(cfg.model_spec())
        fmap = estimate_fisher(model, calib_seeds=cfg.fisher_seeds(), batch=1)
        store = TraceStore()
        for i, seed in enumerate(cfg.calib_seeds()):
            store.batch_id = i
            sample_trajectory(model, seed=seed, trace=store)
        ranking = temporal_weights(fmap, tau=cfg.tau)
        spec = cfg.weight_spec()
        _, weighted_report = calibrate_model(model, store, ranking, spec)
        _, uniform_report = calibrate_model(
            model, store, uniform_weights(model.spec.num_timesteps, model.spec.num_layers), spec
        )
        top_weighted = mean_error_top_timesteps(weighted_report, ranking, fraction=0.2)
        top_uniform = mean_error_top_timesteps(uniform_report, ranking, fraction=0.2)
        assert top_weighted <= top_uniform


def test_09_reduction_ratio_arithmetic(capsys, tmp_path):
    """Reported reduction ratios equal 16 / average-bits within 1e-6, and a
    weighted average of 3.1 bits prints as 5.16 at three significant figures."""
    with criterion(capsys, 9, "reduction ratios equal 16/avg-bits; 3.1 bits prints 5.16"):
        assert format_sig(16.0 / 3.1) == "5.16"
        cfg = default_config(
            model={"num_layers": 2, "hidden_dim": 4, "num_timesteps": 3, "token_count": 2, "seed": 5},
            search={"beam_width": 4, "num_candidates": 4, "bit_target": 4.0},
            samples={"fisher": 2, "step_loss": 2, "selection": 2},
            output_dir=str(tmp_path / "out"),
        )
        report = run_pipeline(cfg, render_figures=False)
        weighted_avg = float(report["schedule"]["param_weighted_avg_bits"])
        flops = float(report["reductions"]["flops_reduction"])
        assert abs(flops - 16.0 / weighted_avg) <= 1e-6
        size = float(report["reductions"]["size_reduction"])
        assert abs(size - 16.0 / cfg.quant["weight_bits"]) <= 1e-6
        assert report["reductions"]["flops_reduction_3sig"] == format_sig(16.0 / weighted_avg)


def test_10_run_twice_is_byte_identical(capsys, tmp_path):
    """Two full run invocations with the identical configuration produce a
    byte-identical schedule.json and identical report.json numeric payloads."""
    with criterion(capsys, 10, "two runs: byte-identical schedule and report payloads"):
        config_path = tmp_path / "config.json"
        doc = default_config(output_dir=str(tmp_path / "out")).to_dict()
        config_path.write_text(json.dumps(doc))

        assert cli.main(["run", "--config", str(config_path)]) == 0
        out = tmp_path / "out"
        first_schedule = (out / ARTIFACTS["schedule"]).read_bytes()
        first_report = json.loads((out / ARTIFACTS["report"]).read_text())

        assert cli.main(["run", "--config", str(config_path)]) == 0
        second_schedule = (out / ARTIFACTS["schedule"]).read_bytes()
        second_report = json.loads((out / ARTIFACTS["report"]).read_text())

        assert first_schedule == second_schedule
        first_report.pop("timings")
        second_report.pop("timings")
        first_payload = json.dumps(first_report, sort_keys=True).encode()
        second_payload = json.dumps(second_report, sort_keys=True).encode()
        assert first_payload == second_payload


def test_11_comparison_table_orders_the_ablation_ladder(capsys, tmp_path):
    """The comparison table orders end-to-end error as full method <=
    search-only <= untreated baseline (ties allowed)."""
    with criterion(capsys, 11, "comparison table: full <= search-only <= baseline"):
        config_path = tmp_path / "config.json"
        doc = default_config(output_dir=str(tmp_path / "out")).to_dict()
        config_path.write_text(json.dumps(doc))

        assert cli.main(["search", "--config", str(config_path)]) == 0
        assert cli.main(["compare", "--config", str(config_path)]) == 0

        rows = {}
        lines = (tmp_path / "out" / ARTIFACTS["compare"]).read_text().strip().split("\n")
        assert lines[0] == "schedule,weights,error"
        for line in lines[1:]:
            name, mode, err = line.split(",")
            rows[(name, mode)] = float(err)
        assert len(rows) == 6

        full = rows[("searched", "fisher_calib")]
        search_only = rows[("searched", "uniform_calib")]
        baseline = rows[("uniform4", "minmax")]
        assert full <= search_only, f"full {full} > search-only {search_only}"
        assert search_only <= baseline, f"search-only {search_only} > baseline {baseline}"
