"""Acceptance suite: one test per criterion, each printed as PASS/FAIL in the summary.

Criteria 9-12 drive the command line end to end at desk scale and take a while.
"""
import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from evtlab import cli
from evtlab import context as cx
from evtlab import datagen as dg
from evtlab import evalkit as ek
from evtlab import policy as pl
from evtlab import selftest
from evtlab import tracksim as ts
from evtlab.numgrad import ParamStore, Tensor, check_gradients, no_grad
from evtlab.tracksim import EmbodimentConfig, Scenario
from test_tracksim import oracle_area, oracle_box

DESK_STEPS = 3000
REDUCED_HEIGHTS, REDUCED_SPEEDS = "0.3,1.7", "0.5,1.0"
PID_SPEEDS = "0.5,3.0"


# ------------------------------------------------------------ formula suite

def closed_form_reward(rho, theta):
    return 1.0 - abs(rho - 2.5) / 7.5 - abs(theta) / (math.pi / 4)


def test_c1_reward_formula(criterion):
    with criterion(1, "reward formula table") as note:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        table = [(2.5, 0.0, 1.0), (5.0, math.pi / 8, 1 / 6), (10.0, 0.0, 0.0)]
        table += [(r, t, closed_form_reward(r, t))
                  for r, t in zip(rng.uniform(0, 12, 30), rng.uniform(-math.pi, math.pi, 30))]
        err = max(abs(ts.reward(r, t) - want) for r, t, want in table)
        elapsed = time.perf_counter() - t0
        note(f"{len(table)} pairs, max err {err:.1e}, {elapsed * 1000:.1f} ms")
        assert len(table) >= 20 and err < 1e-9 and elapsed < 1.0


def test_c2_mr_metric(criterion):
    with criterion(2, "MR metric on hand-built traces") as note:
        init = ek.BoundingBox(0.5, 0.5, 0.2, 0.4)
        identity = ek.mr_from_boxes([init] * 5, init)
        shifted = ek.box_reward(ek.BoundingBox(0.5 + 0.18, 0.5 + 0.24, 0.2, 0.4), init)
        half_lost = ek.mr_from_boxes([init, init, None, None], init)
        note(f"identity {identity}, dc=0.3 -> {shifted:.12f}, half lost {half_lost}")
        assert abs(identity - 1.0) < 1e-9
        assert abs(shifted - 1 / 1.3) < 1e-9
        assert abs(half_lost - 0.5) < 1e-9


def test_c3_consistency_bounds(criterion):
    with criterion(3, "temporal consistency loss bounds") as note:
        z = np.tile([0.3, -1.0, 2.0], (5, 1))
        zero = cx.consistency_loss([Tensor(z)], [Tensor(z.mean(axis=0))]).item()
        one = cx.consistency_loss([Tensor(np.array([[1.0, 0.0]]))], [Tensor(np.array([0.0, 3.0]))]).item()
        rng = np.random.default_rng(0)
        values = []
        for _ in range(500):
            early = [Tensor(rng.normal(size=(rng.integers(1, 9), 4)) * rng.uniform(0, 5))
                     for _ in range(rng.integers(1, 4))]
            means = [Tensor(rng.normal(size=4)) for _ in early]
            values.append(cx.consistency_loss(early, means).item())
        note(f"identical {zero:.1e}, orthogonal {one}, random range [{min(values):.3f}, {max(values):.3f}]")
        assert abs(zero) < 1e-12 and abs(one - 1.0) < 1e-12
        assert min(values) >= 0.0 and max(values) <= 2.0


@pytest.mark.parametrize("n", [1, 4, 10, 64])
def test_c4_cql_constant_q(criterion, n):
    with criterion(4, "constant-Q conservative term equals log N") as note:
        q = Tensor(np.full((n, 7), -2.3))
        term = pl.conservative_term(q, Tensor(np.full(7, -2.3))).item()
        note(f"N={n}: {term:.12f}")
        assert abs(term - math.log(n)) < 1e-9


# ------------------------------------------------------------ gradient suite

SMALL = pl.ModelConfig(mask_h=16, mask_w=16, K=3, d_z=4, feat_dim=8, encoder_hidden=8,
                       aux_hidden=8, lstm_hidden=8, head_hidden=16)
TINY = cx.EncoderConfig(K=3, d_z=3, mask_h=11, mask_w=11, feat_dim=4, lstm_hidden=4, aux_hidden=4)


def _jitter(store, seed):
    rng = np.random.default_rng(seed)
    for _, p in store.items():
        p.data += 0.1 * rng.normal(size=p.shape)
    return store


def test_c5_gradient_suite(criterion):
    with criterion(5, "finite-difference gradient suite") as note:
        t0 = time.perf_counter()
        errors = {r.name: float(r.detail.split()[-1]) for r in selftest.gradient_checks(0)}

        # representation losses on a two-episode micro-batch
        grid = dg.embodiment_grid((0.5, 1.7), (1.0,), EmbodimentConfig(mask_w=11, mask_h=11))
        micro = dg.generate_episodes(grid, 1, 0.2, seed=1, scenario=Scenario(max_steps=6))
        store = ParamStore()
        cx.init_encoder(store, TINY, np.random.default_rng(4))
        _jitter(store, 4)
        errs = check_gradients(lambda: cx.aux_losses(store, TINY, micro).total,
                               store.group("encoder", "aux"), max_entries=40)
        errors["representation losses"] = max(errs.values())

        # critic and actor objectives on a toy two-step batch
        grid = dg.embodiment_grid((0.5, 1.7), (0.8, 1.5), EmbodimentConfig(mask_w=16, mask_h=16))
        eps = dg.generate_episodes(grid, 1, 0.2, seed=2, scenario=Scenario(max_steps=30))
        batch = pl.build_batch(eps, [(0, 3), (2, 10)], 2, SMALL.K, "toy")
        cfg = pl.TrainConfig(seq_len=2, burn_in=0, cql_samples=3)
        store = _jitter(pl.init_params(SMALL, 5), 5)
        noise = pl.Noise.draw(np.random.default_rng(1), 4, 3)
        with no_grad():
            tg = pl.critic_targets(store, cfg, pl.forward_batch(store, SMALL, batch, 0), noise, cfg.alpha)

        def critic():
            fw = pl.forward_batch(store, SMALL, batch, 0)
            return pl.critic_loss_from(store, cfg, fw.x, fw.actions, tg)[0]

        params = [store[n] for n in store.names() if n.startswith(("critic", "policy/", "encoder/"))]
        errors["critic loss"] = max(check_gradients(critic, params, max_entries=12).values())
        errors["actor loss"] = max(check_gradients(
            lambda: pl.actor_loss(store, cfg, pl.forward_batch(store, SMALL, batch, 0), noise, 0.2)[0],
            store.group("actor/")).values())
        elapsed = time.perf_counter() - t0
        worst = max(errors, key=errors.get)
        note(f"{len(errors)} checks, worst {worst} {errors[worst]:.1e}, {elapsed:.1f} s")
        assert errors[worst] < 1e-4 and elapsed < 60


# ------------------------------------------------------------ simulator suite

def test_c6_zero_action_static_target(criterion):
    with criterion(6, "zero action on a static target") as note:
        rep = ek.run_grid(ek.zero_policy, heights=(1.0,), speeds=(0.0,), episodes_per_cell=10, seed=0,
                          scenario=Scenario(pattern="static"))
        c = rep.cells[0]
        note(f"AR {c.ar}, EL {c.el}, SR {c.sr} over {len(c.episodes)} episodes")
        assert (c.ar, c.el, c.sr, len(c.episodes)) == (500.0, 500.0, 1.0, 10)


def test_c7_mask_monotonicity(criterion):
    with criterion(7, "mask area monotone in distance") as note:
        rhos = (1.0, 2.5, 5.0, 7.5)
        worst_gap = 0
        for h in (0.3, 1.0, 1.7, 3.0):
            emb = EmbodimentConfig(camera_height=h)
            ours, oracle = [], []
            for rho in rhos:
                state, _ = ts.reset(emb, 0, Scenario(pattern="static", obstacle_count=0))
                state.target = np.array([rho, 0.0])
                ours.append(int((ts.render_mask(state, emb) == ts.TARGET).sum()))
                box = oracle_box((0, 0, 0), (rho, 0.0), 0.25, 1.7, h, emb.fov_h, 64, 64)
                oracle.append(oracle_area(box, 64, 64))
                slack = (box[1] - box[0]) + (box[3] - box[2]) + 2
                worst_gap = max(worst_gap, abs(ours[-1] - oracle[-1]) / slack)
            assert all(a >= b for a, b in zip(ours, ours[1:])), (h, ours)
            assert all(a >= b for a, b in zip(oracle, oracle[1:])), (h, oracle)
        note(f"4 heights x 4 distances, worst edge disagreement {worst_gap:.2f} of slack")
        assert worst_gap <= 1.0


def test_c8_failure_protocol(criterion):
    with criterion(8, "failure at the 50th consecutive lost step") as note:
        res = ek.run_episodes(ek.TurnAwayPolicy(), EmbodimentConfig(), Scenario(pattern="static"), [0, 1, 2])
        for r in res:
            first = int(np.argmax(r.lost))
            assert not r.success and r.lost[first:].all() and r.length - first == 50
        note(f"episode lengths {[r.length for r in res]}")


# ------------------------------------------------------------ desk-scale training

def _ini(folder: Path) -> Path:
    path = folder / "desk.ini"
    path.write_text(f"[train]\nsteps = {DESK_STEPS}\ncheckpoint_every = 0\n")
    return path


def _run(argv):
    code = cli.dispatch([str(a) for a in argv])
    assert code == cli.EXIT_OK, (argv, code)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    ini = _ini(root)
    runs = {
        "data": ["gen-data", "--config", ini, "--episodes", 12, "--seed", 0, "--out", root / "data"],
        "heldout": ["gen-data", "--config", ini, "--episodes", 2, "--seed", 1, "--out", root / "heldout"],
        "ablate": ["ablate", "--all", "--config", ini, "--data", root / "data" / "dataset.bin",
                   "--heights", REDUCED_HEIGHTS, "--speeds", REDUCED_SPEEDS, "--episodes", 10,
                   "--seed", 0, "--eval-seed", 0, "--jobs", 1, "--out", root / "ablate"],
        "baseline": ["baseline", "--type", "pid", "--config", ini, "--speeds", PID_SPEEDS, "--episodes", 10,
                     "--seed", 0, "--jobs", 1, "--out", root / "baseline"],
    }
    for argv in runs.values():
        _run(argv)
    return root


def _mean_sr(csv_path: Path) -> float:
    rows = [r for r in csv.DictReader(open(csv_path)) if r["height"] not in ("mean", "std", "")]
    cells = [r for r in rows if r["speed"] not in ("mean", "std")]
    return float(np.mean([float(r["SR"]) for r in cells]))


def test_c9_losses_and_probe(criterion, desk):
    with criterion(9, "finite losses, falling height loss, probe beats baseline") as note:
        logs = {v: pl.read_train_log(desk / "ablate" / v / "train_log.csv") for v in ek.VARIANT_ORDER}
        finite = all(np.isfinite(v) for log in logs.values() for row in log for k, v in row.items())
        log = logs["full"]
        decile = max(1, len(log) // 10)
        first = np.mean([r["L_height"] for r in log[:decile]])
        last = np.mean([r["L_height"] for r in log[-decile:]])
        lp = pl.load_policy(desk / "ablate" / "full" / "final.bin")
        probe = cx.context_probe(lp.store, lp.model.encoder, dg.load_dataset(desk / "heldout" / "dataset.bin"))
        note(f"{len(logs)} variants x {len(log)} steps finite={finite}; L_height deciles {first:.4f} -> {last:.4f}; "
             f"probe MAE {probe.mae:.3f} vs constant {probe.baseline_mae:.3f}")
        assert finite and last < first and probe.mae < probe.baseline_mae


def test_c10_ablation_ordering(criterion, desk):
    with criterion(10, "full model SR at least each ablation, +0.1 over no-context") as note:
        sr = {v: _mean_sr(desk / "ablate" / f"{v}.csv") for v in ek.VARIANT_ORDER}
        note(", ".join(f"{v} {s:.3f}" for v, s in sr.items()))
        assert all(sr["full"] >= sr[v] for v in ek.VARIANT_ORDER)
        assert sr["full"] - sr["no_context"] >= 0.1


def test_c11_pid_speed_collapse(criterion, desk):
    with criterion(11, "PID baseline SR drop from 0.5 to 3.0 m/s") as note:
        report = [r for r in csv.DictReader(open(desk / "baseline" / "baseline_pid.csv"))]
        cells = [r for r in report if r["height"] not in ("mean", "std") and r["speed"] not in ("mean", "std")]
        slow = np.mean([float(r["SR"]) for r in cells if float(r["speed"]) == 0.5])
        fast = np.mean([float(r["SR"]) for r in cells if float(r["speed"]) == 3.0])
        note(f"SR {slow:.3f} at 0.5 m/s vs {fast:.3f} at 3.0 m/s over {len(cells)} cells")
        assert slow - fast >= 0.3


def _artifacts(folder: Path) -> dict:
    return {p.relative_to(folder).as_posix(): p.read_bytes() for p in sorted(folder.rglob("*"))
            if p.is_file() and p.name != cli.MANIFEST_NAME}


def test_c12_determinism(criterion, desk, tmp_path):
    with criterion(12, "manifest re-runs are byte-identical") as note:
        compared = 0
        for name in ("data", "heldout", "ablate", "baseline"):
            again = tmp_path / name
            manifest = desk / name / cli.MANIFEST_NAME
            command = cli.read_run_manifest(manifest)["command"][0]
            _run([command, "--manifest", manifest, "--out", again])
            a, b = _artifacts(desk / name), _artifacts(again)
            assert a.keys() == b.keys(), name
            diff = [k for k in a if a[k] != b[k]]
            assert not diff, (name, diff)
            compared += len(a)
        note(f"{compared} files identical across 4 re-runs")
