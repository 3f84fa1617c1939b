"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

import csv
import dataclasses
import json
import time

import numpy as np
import pytest
from scipy.special import expit

from resboost import aggregator as A
from resboost import expr as E
from resboost import metrics, orchestrator as O, regions as R, synthetic, tpe
from resboost.chain import init_seed
from resboost.dataset import Dataset, information_value, population_stability, write_csv
from resboost.experts import ExpertArtifact
from resboost.serve import load_bundle, predict

import test_expr
import test_metrics
import test_regions

pytestmark = pytest.mark.slow

ORACLE_CONFIG = {
    "data": {"path": "oracle.csv", "target": "target"},
    "legacy": {"features": ["x1", "x2"]},
    "regions": {"max_depth": 2, "k_max": 3, "target": "signed"},
    "seed": 0,
}


@pytest.fixture
def report(capsys):
    def say(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} | {detail}")
    return say


@pytest.fixture(scope="module")
def oracle_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("oracle")
    write_csv(synthetic.oracle_task(4000, seed=0), root / "oracle.csv")
    (root / "config.json").write_text(json.dumps(ORACLE_CONFIG))
    return root


@pytest.fixture(scope="module")
def oracle_run(oracle_dir):
    cfg = O.load_config(oracle_dir / "config.json")
    return O.run_pipeline(cfg, oracle_dir / "bundle_a")


@pytest.fixture(scope="module")
def spied_run(oracle_dir):
    """Second identical run with every TPE call recorded."""
    calls = []
    real = tpe.optimize

    def spy(objective, space, config=None):
        out = real(objective, space, config)
        calls.append((space, out[2]))
        return out

    mp = pytest.MonkeyPatch()
    mp.setattr(tpe, "optimize", spy)
    try:
        res = O.run_pipeline(O.load_config(oracle_dir / "config.json"), oracle_dir / "bundle_b")
    finally:
        mp.undo()
    return res, calls


def x3_slot(expert: ExpertArtifact):
    """(slot name, value) of the guard clause that carries the region's x3 bound."""
    x3 = [c for c in expert.region.clauses if c.feature == "x3"]
    if not x3 or expert.expr is None:
        return None
    side_ops = (">", ">=") if x3[0].lower > -R.INF else ("<", "<=")
    for c in expert.expr.guard:
        if c.feature.name == "x3" and c.op in side_ops and isinstance(c.rhs, E.ParamRef):
            return c.rhs.name, expert.expr.slot(c.rhs.name).value
    return None


def test_1_end_to_end_oracle(oracle_run, report):
    res = oracle_run
    gain = res.final_val_auc - res.legacy_val_auc
    x3_experts = [e.region_id for e in res.experts
                  if not e.is_null and "x3" in e.expr.guard_features()]
    ok = gain >= 0.01 and bool(x3_experts) and res.seconds < 120
    report(1, ok, f"legacy val AUC {res.legacy_val_auc:.6f}, final {res.final_val_auc:.6f} "
                  f"(+{gain:.4f}); non-null experts guarding x3: {x3_experts}; "
                  f"{res.seconds:.1f}s")
    assert gain >= 0.01
    assert x3_experts
    assert res.seconds < 120


def test_2_boundary_refinement(oracle_run, report):
    res = oracle_run
    cart = None
    found = []
    for e in sorted(res.experts, key=lambda e: -e.region.priority):
        slot = x3_slot(e)
        if slot is None or not e.boundary_refined:
            continue
        clause = next(c for c in e.region.clauses if c.feature == "x3")
        cart_value = clause.upper if clause.upper < R.INF else clause.lower
        # the refined value must come from the first tuning pass that opened the slot
        records = [json.loads(line) for line in
                   (res.out / "chains" / f"chain_{e.region_id}.jsonl").read_text().splitlines()]
        first = next(r for r in records if r["accepted"] and r["search_space"]
                     and any(d["name"] == slot[0] for d in r["search_space"]))
        assert first["theta_star"][slot[0]] == slot[1]
        found.append((e.region_id, cart_value, slot[1]))
        cart = cart if cart is not None else cart_value
    detail = "; ".join(f"region {k}: CART {c:.4f} -> tuned {v:.4f} (|d|={abs(v - 0.55):.4f})"
                       for k, c, v in found)
    ok = bool(found) and abs(found[0][2] - synthetic.ORACLE_THRESHOLD) <= 0.03
    report(2, ok, f"top-priority refined x3 boundary judged; {detail or 'none refined'}")
    assert found
    assert abs(found[0][2] - synthetic.ORACLE_THRESHOLD) <= 0.03


def test_3_tpe_quality(report):
    t0 = time.perf_counter()
    s1 = tpe.SearchSpace((tpe.Dim("x", 0, 5),))
    s2 = tpe.SearchSpace((tpe.Dim("x", -5, 5), tpe.Dim("y", -5, 5)))

    def f1(th):
        return (th["x"] - 2) ** 2

    def f2(th):
        return (th["x"] - 2) ** 2 + (th["y"] + 1) ** 2

    tpe1, rnd1, tpe2, rnd2, close = [], [], [], [], 0
    for seed in range(20):
        th, loss, _ = tpe.optimize(f1, s1, tpe.TpeConfig(M=100, seed=seed))
        tpe1.append(loss)
        close += abs(th["x"] - 2) <= 0.2
        rnd1.append(tpe.random_search(f1, s1, 100, seed)[1])
        tpe2.append(tpe.optimize(f2, s2, tpe.TpeConfig(M=100, seed=seed))[1])
        rnd2.append(tpe.random_search(f2, s2, 100, seed)[1])
    secs = time.perf_counter() - t0
    m = [float(np.median(v)) for v in (tpe1, rnd1, tpe2, rnd2)]
    ok = m[0] <= m[1] and m[2] <= m[3] and close >= 16 and secs < 5
    report(3, ok, f"1-D median TPE {m[0]:.2e} vs random {m[1]:.2e}; 2-D {m[2]:.2e} vs "
                  f"{m[3]:.2e}; |x-2|<=0.2 on {close}/20 seeds; {secs:.2f}s")
    assert m[0] <= m[1] and m[2] <= m[3]
    assert close >= 16
    assert secs < 5


def test_4_oracle_equivalences(report):
    rng = np.random.default_rng(404)
    auc_err, ks_exact = 0.0, True
    for _ in range(100):
        y, s = test_metrics.random_instance(rng)
        auc_err = max(auc_err, abs(metrics.auc(y, s) - test_metrics.pairwise_auc(y, s)))
        ks_exact &= metrics.ks(y, s) == test_metrics.brute_ks(y, s)
    cart_ok = all(test_regions.depth_one_matches_exhaustive(s) for s in range(100))
    iv = information_value(np.array([0] * 8 + [1] * 2 + [0] * 2 + [1] * 8),
                           np.array([1] * 10 + [0] * 10), 2, smoothing=0.0)
    psi = population_stability(np.array([0] * 5 + [1] * 5), np.array([0] * 8 + [1] * 2), 2,
                               smoothing=0.0)
    iv_err, psi_err = abs(iv - 1.2 * np.log(4)), abs(psi - 0.3 * np.log(4))
    ok = auc_err <= 1e-12 and ks_exact and cart_ok and iv_err <= 1e-9 and psi_err <= 1e-9
    report(4, ok, f"AUC max err {auc_err:.1e}; KS exact {ks_exact}; depth-1 CART exact "
                  f"{cart_ok}; IV err {iv_err:.1e}; PSI err {psi_err:.1e}")
    assert auc_err <= 1e-12 and ks_exact and cart_ok
    assert iv_err <= 1e-9 and psi_err <= 1e-9


def test_5_invariant_suites(spied_run, report):
    res, calls = spied_run
    # DSL round trip and totality on 1000 random expressions of depth <= 6
    dsl_ok = True
    for seed in range(1000):
        e = test_expr.random_expr(seed)
        back = E.parse(E.serialize(e), test_expr.SCHEMA)
        X = test_expr._rows(seed)
        a, b = E.evaluate_batch(e, X), E.evaluate_batch(back, X)
        dsl_ok &= back == e and np.allclose(a, b, rtol=0, atol=1e-12) and np.isfinite(a).all()
        dsl_ok &= bool((a[~E.guard_mask(e, X)] == 0).all())
    # zero outside guard and sparse activation on the full data set
    data = res.inputs.data
    live = [e for e in res.experts if not e.is_null]
    outs = np.array([e.outputs(data.X) for e in live])
    guards = np.array([E.guard_mask(e.expr, data.X) for e in live])
    zero_ok = bool((outs[~guards] == 0).all())
    max_active = int((outs != 0).sum(axis=0).max()) if live else 0
    # frozen slots never move across any TPE trial, and inherited slots stay frozen
    tuned = []
    for e in res.experts:
        lines = (res.out / "chains" / f"chain_{e.region_id}.jsonl").read_text().splitlines()
        recs = [json.loads(x) for x in lines]
        tuned += [(e.region_id, r) for r in recs if r["search_space"] is not None]
    frozen_ok = len(tuned) == len(calls)
    known, current, n_trials = {}, None, 0
    for (rid, rec), (space, log) in zip(tuned, calls):
        if rid != current:
            known, current = {}, rid
        frozen_ok &= all(space.frozen.get(k) == v for k, v in known.items())
        for t in log.trials:
            n_trials += 1
            frozen_ok &= all(t.theta[k] == v for k, v in space.frozen.items())
        if rec["accepted"]:
            known.update(rec["theta_star"])
    # interaction vectors in closed form
    z = res.frozen.base_logit(data)
    p = expit(z)
    ctx = A.build_context(data.X, p, res.experts)
    d = data.d
    vec_err = 0.0
    for k, e in enumerate(res.experts):
        f = e.outputs(data.X)
        want = np.column_stack([f, f - p, f / (p + 1e-6)])
        vec_err = max(vec_err, float(np.abs(ctx[:, d + 1 + 3 * k: d + 4 + 3 * k] - want).max()))
    ok = dsl_ok and zero_ok and max_active <= 1 and frozen_ok and vec_err <= 1e-12
    report(5, ok, f"DSL 1000 ASTs {dsl_ok}; zero outside guard {zero_ok}; max active experts "
                  f"per row {max_active}; frozen slots fixed over {n_trials} trials {frozen_ok}; "
                  f"interaction vector err {vec_err:.1e}")
    assert dsl_ok and zero_ok and frozen_ok
    assert max_active <= 1
    assert vec_err <= 1e-12


def test_6_determinism(oracle_run, spied_run, report):
    a = O.bundle_files(oracle_run.out)
    b = O.bundle_files(spied_run[0].out)
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not diff and len(a) > 5
    report(6, ok, f"{len(a)} bundle files compared; differing: {diff or 'none'}")
    assert not diff


def test_7_safety_floor(oracle_dir, report):
    cfg = O.load_config(oracle_dir / "config.json")
    cfg = dataclasses.replace(cfg, chain=dataclasses.replace(cfg.chain, provider="broken"))
    res = O.run_pipeline(cfg, oracle_dir / "bundle_broken")
    with (res.out / "scores.csv").open() as fh:
        same = all(r["legacy_proba"] == r["final_proba"] for r in csv.DictReader(fh))
    nulls = all(e.is_null for e in res.experts)
    ok = res.final_val_auc == res.legacy_val_auc and same and nulls
    report(7, ok, f"legacy {res.legacy_val_auc!r} final {res.final_val_auc!r}; all experts "
                  f"null {nulls}; fallback {res.gate.fallback}; per-row identical {same}")
    assert res.final_val_auc == res.legacy_val_auc
    assert same and nulls


def latency_bundle(root, d=20, n_train=5000):
    """A scoring bundle with a 100-tree legacy, K=3 experts and a 50-tree gate."""
    names = tuple(f"f{j}" for j in range(d))
    rng = np.random.default_rng(8)
    X = rng.random((n_train, d))
    logit = 2 * X[:, 0] - 1.5 * X[:, 1] + (X[:, 2] > 0.5) * (2 * X[:, 3] * X[:, 4] - 0.8)
    y = (rng.random(n_train) < expit(logit)).astype(int)
    train = Dataset(X, y, names, tuple(str(i) for i in range(n_train)))
    write_csv(train, root / "train.csv")
    cfg = O.config_from_dict({"data": {"path": str(root / "train.csv"), "target": "target"},
                              "legacy": {"features": list(names)}})
    inp = O.load_inputs(cfg)
    out = root / "bundle"
    frozen = O.run_legacy(cfg, inp, out)
    clauses = [(R.Clause("f2", 2, -R.INF, 0.3),), (R.Clause("f2", 2, 0.3, 0.6),),
               (R.Clause("f2", 2, 0.6, R.INF),)]
    body = "p{c0=0.2} + p{c1=0.5} * `f3` * `f4` + p{c2=-0.3} * gauss(`f5`, p{m=0.5}, p{s=0.2})"
    experts = []
    for k, cl in enumerate(clauses):
        reg = R.Region(k, cl, 0.3, 1, 1.0)
        guard = E.serialize(init_seed(reg, names)).split(" then ")[0]
        e = E.with_values(E.parse(f"{guard} then {body} else 0", names), {}, freeze=True)
        art = ExpertArtifact(reg, e)
        experts.append(art)
        O.write_json(out / "experts" / f"expert_{k}.json", {"expert": art.to_json()}, cfg)
    gate = A.train_gate(inp.train, frozen, experts, A.GateConfig(n_trees=50, early_stop="none"))
    gate = dataclasses.replace(gate, fallback=False)  # time the full gate path
    O.write_json(out / "aggregate.json", {"aggregate": gate.to_json()}, cfg)
    return out, names


def test_8_latency(tmp_path, report):
    out, names = latency_bundle(tmp_path)
    n = 100_000
    X = np.random.default_rng(9).random((n, len(names)))
    big = Dataset(X, np.zeros(n, dtype=int), names, tuple(str(i) for i in range(n)))
    write_csv(big, tmp_path / "score.csv")
    b = load_bundle(out)
    assert b.gate.model.n_trees == 50 and len(b.experts) == 3 and len(b.frozen._model.trees) == 100
    t0 = time.perf_counter()
    b.score(X, big.row_ids)
    core = (time.perf_counter() - t0) / n
    t0 = time.perf_counter()
    assert predict(out, tmp_path / "score.csv", tmp_path / "pred.csv") == n
    end_to_end = (time.perf_counter() - t0) / n
    ok = end_to_end <= 1e-3
    report(8, ok, f"mean per-row cost {end_to_end * 1e6:.2f} us end to end (CSV in/out), "
                  f"{core * 1e6:.2f} us in-memory scoring; budget 1000 us")
    assert end_to_end <= 1e-3
