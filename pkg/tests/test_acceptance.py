"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

The desk-scale sweep dominates the runtime (about 16 minutes on one core).
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from conftest import random_window, randomize, tiny_model, tiny_stats
from sertkit.cli import main
from sertkit.data import SimulationSpec, simulate_array, simulate_covariance, simulate_series
from sertkit.encoding import compute_stats
from sertkit.evaluation import importance_index, sparsity_sweep
from sertkit.fixtures import BAY_LOCATIONS, BAY_VARIABLES, bundled_bay_csv
from sertkit.model import ModelConfig, embed_batch, forward, make_batch, sstann_forward
from sertkit.seeding import stream
from sertkit.tensor import Tensor
from sertkit.training import TrainConfig, gradcheck, masked_mse


@pytest.fixture
def report(capsys):
    def emit(name: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\n[acceptance] {'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else ""))
        assert ok, f"{name}: {detail}"

    return emit


def _loss_and_grads(kind, batch, params, config):
    params.zero_grads()
    pred = forward(kind, batch, params, config)
    loss = masked_mse(pred, batch.targets, batch.target_mask)
    loss.backward()
    return pred.data.copy(), loss.item(), {name: p.grad.copy() for name, p in params.items()}


class TestGradients:
    def test_gradcheck_five_seeds(self, report):
        start = time.perf_counter()
        worst = {"sert": 0.0, "sstann": 0.0}
        for seed in range(5):
            r = np.random.default_rng(seed)
            wins = [random_window(r, 3, 4, 5) for _ in range(3)]
            # statistics estimated from a training sample of the same generator, as in the pipeline
            sample = [random_window(r, 3, 4, 5) for _ in range(200)]
            stats = compute_stats(np.concatenate([w.f for w in sample]), np.concatenate([w.v for w in sample]), 3, 4)
            for kind in worst:
                config, vocab, _ = tiny_model(kind, seed=seed, d=8, n_heads=2, k=1, n_max=5, n_targets=3)
                worst[kind] = max(worst[kind], gradcheck(kind, wins, config, vocab, stats, seed=seed, step=1e-3))
        secs = time.perf_counter() - start
        ok = worst["sert"] < 1e-4 and worst["sstann"] < 1e-5 and secs < 60
        report("gradient correctness", ok, f"SERT {worst['sert']:.2e} < 1e-4, SST-ANN {worst['sstann']:.2e} < 1e-5, {secs:.1f}s")


class TestDecomposition:
    def test_prediction_is_sum_of_contributions(self, report, rng):
        worst = 0.0
        for mode in ("A", "B"):
            config, vocab, params = tiny_model("sstann", mode=mode, n_max=12, d=8)
            randomize(params, rng)
            locs = 2 if mode == "B" else None
            wins = [random_window(rng, 3, 4, 12, n_locations=locs) for _ in range(500)]
            batch = make_batch(wins, tiny_stats(3, 4, rng), config)
            pred, contrib, intercept = sstann_forward(embed_batch(batch, params, config), params, config)
            worst = max(worst, float(np.abs(pred.data - (contrib.data.sum(axis=1) + intercept.data)).max()))
        report("contribution decomposition", worst < 1e-9, f"max |y - (sum c + b)| = {worst:.1e} over 1000 windows")


class TestImportance:
    def test_normalization_and_rescaling(self, report, rng):
        ok, notes = True, []
        for trial in range(20):
            config, vocab, params = tiny_model("sstann", seed=trial, n_max=8)
            randomize(params, rng)
            wins = [random_window(rng, 3, 4, 8) for _ in range(30)]
            stats = tiny_stats(3, 4, rng)
            rep = importance_index("sstann", params, config, vocab, stats, wins)
            ok &= bool(np.all(np.abs(rep.importance.sum(axis=0) - 100.0) <= 1e-9))
            ok &= bool(np.array_equal(np.abs(rep.signed_importance), rep.importance))
            base_w, base_b = params["sst.w"].data.copy(), params["sst.b"].data.copy()
            for scale in (2.0 ** int(rng.integers(-6, 7)), float(rng.uniform(0.1, 10.0))):
                params["sst.w"].data, params["sst.b"].data = base_w * scale, base_b * scale
                scaled = importance_index("sstann", params, config, vocab, stats, wins)
                same_pattern = np.array_equal(np.argsort(scaled.importance, axis=0, kind="stable"), np.argsort(rep.importance, axis=0, kind="stable"))
                same_sign = np.array_equal(np.sign(scaled.mean_contribution), np.sign(rep.mean_contribution))
                if math.log2(scale).is_integer():
                    ok &= bool(np.array_equal(scaled.importance, rep.importance))
                else:
                    ok &= bool(np.allclose(scaled.importance, rep.importance, rtol=0, atol=1e-9))
                ok &= bool(same_pattern and same_sign)
            params["sst.w"].data, params["sst.b"].data = base_w, base_b
        notes.append("20 models, sums to 100 within 1e-9, |signed| == unsigned, ranking and signs fixed under rescaling")
        report("importance normalization", ok, "; ".join(notes))


class TestMaskedLoss:
    def test_oracle_and_zero_mask(self, report, rng):
        worst = 0.0
        for _ in range(100):
            J, K = int(rng.integers(1, 9)), int(rng.integers(1, 17))
            p, t = rng.normal(size=(J, K)), rng.normal(size=(J, K))
            m = rng.random((J, K)) < 0.5
            total = 0.0
            for j in range(J):
                for k in range(K):
                    if m[j, k]:
                        total += (p[j, k] - t[j, k]) ** 2
            worst = max(worst, abs(masked_mse(Tensor(p), t, m).item() - total / J))
        pred = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        zero = masked_mse(pred, rng.normal(size=(4, 3)), np.zeros((4, 3), dtype=bool))
        zero.backward()
        exact_zero = zero.item() == 0.0 and not pred.grad.any()
        for kind in ("sert", "sstann"):
            config, vocab, params = tiny_model(kind)
            wins = [random_window(rng, 3, 4, 5, target_p=0.0) for _ in range(4)]
            _, loss, grads = _loss_and_grads(kind, make_batch(wins, tiny_stats(3, 4), config), params, config)
            exact_zero &= loss == 0.0 and not any(g.any() for g in grads.values())
        report("masked MSE semantics", worst < 1e-12 and exact_zero, f"oracle gap {worst:.1e} over 100 batches; zero mask exact: {exact_zero}")


class TestMaskInvariance:
    def test_padding_and_masked_targets_are_inert(self, report):
        failures = 0
        for trial in range(100):
            r = np.random.default_rng(trial)
            kind = ("sert", "sstann")[trial % 2]
            mode = "AB"[(trial // 2) % 2]
            config, vocab, params = tiny_model(kind, seed=trial, mode=mode, n_max=6)
            randomize(params, r)
            wins = [random_window(r, 3, 4, 5, n_locations=2 if mode == "B" else None) for _ in range(3)]
            stats = tiny_stats(3, 4, r)
            batch = make_batch(wins, stats, config, trim=False)
            a = _loss_and_grads(kind, batch, params, config)
            pad, hidden = ~batch.mask, ~batch.target_mask
            batch.f = np.where(pad, r.integers(0, 3, batch.f.shape), batch.f)
            batch.t = np.where(pad, r.normal(0, 50, batch.t.shape), batch.t)
            batch.v = np.where(pad, r.normal(0, 50, batch.v.shape), batch.v)
            batch.targets = np.where(hidden, r.normal(0, 1e6, batch.targets.shape), batch.targets)
            b = _loss_and_grads(kind, batch, params, config)
            same = a[0].tobytes() == b[0].tobytes() and a[1] == b[1] and all(a[2][n].tobytes() == b[2][n].tobytes() for n in a[2])
            failures += not same
        report("mask/padding invariance", failures == 0, f"{100 - failures}/100 trials bit-identical")


class TestSimulation:
    def test_fidelity(self, report):
        y = simulate_array(SimulationSpec(n_steps=101), noise=False, temporal=False)
        fixed = float(np.abs(y[100] - 10.0 / 3.0).max())
        table = simulate_series(SimulationSpec(n_steps=40_000, seed=0))
        shape_ok = len(table.pairs()) == 16 and len(table) == 16 * 40_000
        sigma = simulate_covariance(stream(0, "sim.covariance"))
        probes = np.random.default_rng(0).normal(size=(100, 16))
        qmin = float(np.einsum("pi,ij,pj->p", probes, sigma, probes).min())
        ok = fixed < 1e-6 and shape_ok and qmin >= -1e-10
        report("simulation fidelity", ok, f"|x_100 - 10/3| = {fixed:.1e}; 16 x 40000: {shape_ok}; min probe quadratic form {qmin:.3g}")


# Desk-scale sweep: the settings below are the acceptance configuration.
SWEEP_LEVELS = (0.0, 0.8)
SWEEP_SEEDS = (0, 1)
SWEEP_MODEL = ModelConfig(d=32, n_heads=4, k=2, n_max=160, n_targets=16, lookback=10, horizon=1)
SWEEP_TRAIN = TrainConfig(lr=3e-3, batch_size=128, max_epochs=8, patience=3)


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    start = time.perf_counter()
    runs = sparsity_sweep(SimulationSpec(n_steps=8000), SWEEP_LEVELS, ("sert", "sstann"), SWEEP_SEEDS,
                          SWEEP_MODEL, SWEEP_TRAIN, train_steps=7000, out_dir=tmp_path_factory.mktemp("sweep"))
    return runs, time.perf_counter() - start


def _overall(runs, level, model):
    return float(np.mean([r.metrics.overall(model) for r in runs if r.level == level]))


@pytest.mark.slow
class TestDeskSweep:
    def test_runtime(self, sweep, report):
        report("desk sweep runtime", sweep[1] < 30 * 60, f"{sweep[1] / 60:.1f} min < 30 min")

    def test_models_beat_naive_on_dense_data(self, sweep, report):
        runs = sweep[0]
        naive = _overall(runs, 0.0, "naive")
        scores = {m: _overall(runs, 0.0, m) for m in ("sert", "sstann")}
        ok = all(s < naive for s in scores.values())
        report("desk sweep (a): models below naive at level 0", ok,
               f"naive {naive:.4f}, SERT {scores['sert']:.4f}, SST-ANN {scores['sstann']:.4f}")

    def test_sparsity_degrades(self, sweep, report):
        runs = sweep[0]
        rows = {m: (_overall(runs, 0.0, m), _overall(runs, 0.8, m)) for m in ("sert", "sstann")}
        ok = all(hi >= lo for lo, hi in rows.values())
        report("desk sweep (b): level 0.8 no better than level 0", ok,
               ", ".join(f"{m} {lo:.4f} -> {hi:.4f}" for m, (lo, hi) in rows.items()))


@pytest.mark.slow
class TestBayFixture:
    def test_seven_hour_mode_b_round_trip(self, report, tmp_path):
        rmse = {}
        for kind in ("sert", "sstann"):
            code = main(["train", "--model", kind, "--data", str(bundled_bay_csv()), "--seed", "0", "--out", str(tmp_path / kind),
                         "--set", "location_mode=B", "--set", "horizon=7", "--set", "lookback=10",
                         "--set", "max_epochs=5", "--set", "patience=2"])
            assert code == 0
            rows = (tmp_path / kind / f"metrics_{kind}_test.csv").read_text().splitlines()[1:]
            rmse[kind] = {r.split(",")[1]: r.split(",")[2] for r in rows if r.startswith(kind + ",")}
        ok = all(
            all(v in got and got[v] not in ("", "None") and math.isfinite(float(got[v])) for v in BAY_VARIABLES)
            for got in rmse.values()
        )
        report("bay-shaped fixture", ok, f"{len(BAY_VARIABLES)} variables x {len(BAY_LOCATIONS)} locations, h=7, mode B; "
               f"overall SERT {rmse['sert'].get('__overall__')}, SST-ANN {rmse['sstann'].get('__overall__')}")


class TestDeterminism:
    def test_replay_is_byte_identical(self, report, tmp_path):
        small = ["--set", "d=8", "--set", "n_heads=2", "--set", "k=1", "--set", "max_epochs=2", "--set", "patience=1"]
        same = True
        for kind in ("sert", "sstann"):
            for rep in ("a", "b"):
                assert main(["train", "--model", kind, "--data", str(bundled_bay_csv()), "--seed", "7", "--out", str(tmp_path / kind / rep),
                             "--set", "location_mode=B"] + small) == 0
            for name in ("checkpoint.json", f"metrics_{kind}_test.csv"):
                same &= (tmp_path / kind / "a" / name).read_bytes() == (tmp_path / kind / "b" / name).read_bytes()
        for rep in ("a", "b"):
            assert main(["sweep", "--levels", "0,0.5", "--seeds", "3", "--models", "sert,sstann", "--steps", "200", "--train-steps", "150",
                         "--out", str(tmp_path / "sweep" / rep), "--set", "lookback=4"] + small) == 0
        csvs = sorted(p.name for p in (tmp_path / "sweep" / "a").glob("*.csv"))
        same &= all((tmp_path / "sweep" / "a" / n).read_bytes() == (tmp_path / "sweep" / "b" / n).read_bytes() for n in csvs)
        report("determinism", same and len(csvs) > 0, f"2 checkpoints, 2 metrics files and {len(csvs)} sweep CSVs replayed byte-identical")
