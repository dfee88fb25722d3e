"""Acceptance criteria 1 to 12.

Each test prints one line ``criterion N: PASS|FAIL (seconds) details`` and
then asserts. Thresholds and runtime limits are the stated ones. Run alone
with ``pytest -s tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""
import csv
import json
import math
import os
import time

import numpy as np
import pytest

from conftest import CONFIGS, config_path
from hemoshape.cli import main

SHIPPED = sorted(f for f in os.listdir(CONFIGS) if f.endswith(".json"))
OPTIMIZER_CONFIGS = ("opt_disk_area.json", "opt_hemolysis_smoke.json")

pytestmark = pytest.mark.acceptance


def report(n, ok, seconds, limit, detail, capsys=None):
    ok = bool(ok) and seconds < limit
    line = (f"criterion {n}: {'PASS' if ok else 'FAIL'} ({seconds:.1f} s, limit {limit:.0f} s) "
            f"{detail}")
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


def simulate(name, out, threads=1):
    code = main(["--threads", str(threads), "simulate", "--config", config_path(name),
                 "--out", str(out)])
    assert code == 0, name
    with open(os.path.join(out, "summary.json")) as fh:
        return json.load(fh)


def exported_numerics(out):
    """Everything a run exported, with run timings removed and npz files loaded."""
    with open(os.path.join(out, "manifest.json")) as fh:
        files = [f["path"] for f in json.load(fh)["files"]]
    data = {}
    for rel in files:
        full = os.path.join(out, rel)
        if rel.endswith(".npz"):
            # npz members carry zip timestamps, so compare the arrays themselves
            with np.load(full) as z:
                data[rel] = {k: z[k].tobytes() for k in z.files}
        elif rel.endswith(".json"):
            with open(full) as fh:
                d = json.load(fh)
            d.pop("timings", None)
            data[rel] = d
        else:
            with open(full, "rb") as fh:
                data[rel] = fh.read()
    return data


# ------------------------------------------------------------------ 1

def test_criterion_01_rheology_certificates(capsys):
    from hemoshape.analysis.suites import rheology_suite
    r = rheology_suite()
    rows = r["certificates"]
    report(1, r["passed"] and len(rows) == 6, r["seconds"], 10,
           f"{len(rows)} certificates of {rows[0]['samples']} tensors; min margins "
           f"coercivity={min(c['coercivity_margin'] for c in rows):.2e} "
           f"growth={min(c['growth_margin'] for c in rows):.2e} "
           f"monotonicity={min(c['monotonicity_min'] for c in rows):.2e}", capsys)


# --------------------------------------------------------------- 2, 3

def _mms(q):
    from hemoshape.analysis.mms import mms_error, observed_orders
    t0 = time.perf_counter()
    ns = (4, 8, 16)
    errs = [mms_error(q, n, 1e-3, 2)[0] for n in ns]
    orders = observed_orders([1.0 / n for n in ns], errs)
    return errs, orders, time.perf_counter() - t0


def test_criterion_02_newtonian_mms(capsys):
    errs, orders, sec = _mms(2.0)
    report(2, min(orders) >= 1.9, sec, 300,
           f"errors={['%.3e' % e for e in errs]} orders={['%.2f' % o for o in orders]}", capsys)


def test_criterion_03_shear_thinning_mms(capsys):
    errs, orders, sec = _mms(1.5)
    report(3, min(orders) >= 1.0, sec, 600,
           f"errors={['%.3e' % e for e in errs]} orders={['%.2f' % o for o in orders]}", capsys)


# --------------------------------------------------------------- 4, 5

@pytest.fixture(scope="module")
def family():
    from hemoshape.analysis.suites import disk_family
    return disk_family()


def test_criterion_04_energy_diagnostic(capsys, tmp_path, family):
    t0 = time.perf_counter()
    res = {}
    for name in SHIPPED:
        s = simulate(name, tmp_path / name)
        res[name] = s["energy"]["max_relative_residual"]
    sec = time.perf_counter() - t0 + family["family_seconds"]
    configs_ok = all(r <= 1e-6 for r in res.values())
    fam_res = max(e["max_relative_residual"] for e in family["energy"])
    lhs = max(e["lhs"] for e in family["energy"])
    report(4, configs_ok and family["energy_passed"], sec, 900,
           f"max config residual={max(res.values()):.2e}; family residual={fam_res:.2e}, "
           f"max lhs={lhs:.3g} <= one bound {family['bound']:.3g}", capsys)


def test_criterion_05_shape_continuity(capsys, family):
    sec = family["family_seconds"] + family["proxy_seconds"]
    report(5, family["continuity_passed"], sec, 1200,
           f"J_k={['%.5f' % v for v in family['values']]} proxy={family['proxy']:.5f} "
           f"gaps(last 4)={['%.4f' % g for g in family['gaps'][-4:]]}", capsys)


# --------------------------------------------------------------- 6 - 10

def test_criterion_06_flow_map(capsys):
    from hemoshape.analysis.suites import flow_map_suite
    r = flow_map_suite()
    report(6, r["passed"], r["seconds"], 10,
           f"det err={r['det_error']:.1e} rotation err={r['rotation_error']:.1e} "
           f"Lipschitz {r['lipschitz_ratio']:.3f} <= {r['growth_bound']:.3g}", capsys)


def test_criterion_07_piola(capsys):
    from hemoshape.analysis.suites import piola_suite
    r = piola_suite()
    rows = r["meshes"]
    report(7, r["passed"] and len(rows) == 3, r["seconds"], 30,
           f"round trip max={max(m['roundtrip'] for m in rows):.1e} "
           f"pulled rel div={['%.3e' % m['rel_div_pulled'] for m in rows]}", capsys)


def test_criterion_08_bogovskii(capsys):
    from hemoshape.analysis.suites import bogovskii_suite
    r = bogovskii_suite()
    report(8, r["passed"] and len(r["domains"]) == 5, r["seconds"], 120,
           f"max residual={max(r['residuals']):.1e} refinement drift={r['relative_drift']:.3f} "
           f"domain drift={r['domain_drift']:.3f}", capsys)


def test_criterion_09_korn(capsys):
    from hemoshape.analysis.suites import korn_suite
    r = korn_suite()
    k = r["korn_constant"]
    ok = math.sqrt(2) - 0.05 <= k <= math.sqrt(2) + 1e-6 and r["identity_residual"] <= 1e-12
    report(9, ok and r["passed"], r["seconds"], 60,
           f"c_K={k:.12f} identity residual={r['identity_residual']:.1e}", capsys)


def test_criterion_10_projector(capsys):
    from hemoshape.analysis.suites import projector_convergence, projector_suite
    t0 = time.perf_counter()
    moving = projector_suite()
    conv = projector_convergence()
    sec = time.perf_counter() - t0
    errs = [r["relative_error"] for r in conv["rows"]]
    report(10, moving["passed"] and conv["passed"], sec, 300,
           f"moving div={moving['max_divergence']:.1e} support={moving['support_ok']}; "
           f"errors n=4,8,16 {['%.4f' % e for e in errs]} ratios "
           f"{['%.3f' % q for q in conv['ratios']]}; dt norms "
           f"{['%.2f' % r['dt_norm'] for r in conv['rows']]} <= input {conv['input_dt_norm']:.2f}",
           capsys)


# ------------------------------------------------------------------ 11

def _history(out):
    with open(os.path.join(out, "history.csv")) as fh:
        return list(csv.DictReader(fh))


def _monotone(rows):
    best = [float(r["best_value"]) for r in rows]
    return all(b <= a for a, b in zip(best, best[1:]))


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("smoke"))
    t0 = time.perf_counter()
    code = main(["optimize", "--config", config_path("opt_hemolysis_smoke.json"), "--out", out])
    return code, out, time.perf_counter() - t0


def test_criterion_11_optimizer(capsys, tmp_path, smoke_run):
    import hemoshape.optimizer as opt
    from hemoshape.config import load_config

    t0 = time.perf_counter()
    ocfg, problem = load_config(config_path("opt_disk_area.json")).optimizer
    st = opt.minimize(ocfg, problem)
    synth_ok = st.evaluations <= 200 and st.best_value < 1e-3 and st.is_monotone()
    out = str(tmp_path / "resume")
    assert main(["optimize", "--config", config_path("opt_disk_area.json"), "--out", out,
                 "--budget", "80"]) == 0
    first = _history(out)
    assert main(["optimize", "--config", config_path("opt_disk_area.json"), "--out", out,
                 "--resume", "--budget", "200"]) == 0
    resumed = _history(out)
    resume_ok = resumed[:len(first)] == first and _monotone(resumed) and len(resumed) == 200
    synth_sec = time.perf_counter() - t0

    code, sdir, smoke_sec = smoke_run
    rows = _history(sdir)
    with open(os.path.join(sdir, "summary.json")) as fh:
        summ = json.load(fh)
    feasible = [r for r in rows if r["feasible"] in ("1", "True", "true")]
    smoke_ok = (code == 0 and len(rows) == 60 and _monotone(rows) and bool(feasible)
                and all(float(r["value"]) >= 0 for r in feasible)
                and summ["best_functional_recomputed"] >= 0)
    ok = synth_ok and resume_ok and smoke_ok and smoke_sec < 3600
    report(11, ok, synth_sec, 60,
           f"synthetic best={st.best_value:.2e} in {st.evaluations} evals; resume prefix and "
           f"monotone={resume_ok}; smoke {len(rows)} evals best={summ['best_value']:.5f} "
           f"feasible={len(feasible)} monotone={_monotone(rows)} ({smoke_sec:.0f} s, "
           f"limit 3600 s)", capsys)


# ------------------------------------------------------------------ 12

def test_criterion_12_determinism(capsys, tmp_path, smoke_run):
    t0 = time.perf_counter()
    mismatched = []
    for name in SHIPPED:
        runs = []
        for k, th in ((0, 1), (1, 1), (2, 3)):
            out = tmp_path / f"{name}-{k}-{th}"
            simulate(name, out, th)
            runs.append(exported_numerics(out))
        if not (runs[0] == runs[1] == runs[2]):
            mismatched.append(name)
    _, sdir, _ = smoke_run
    again = str(tmp_path / "smoke-threads-2")
    assert main(["--threads", "2", "optimize", "--config",
                 config_path("opt_hemolysis_smoke.json"), "--out", again]) == 0
    if exported_numerics(sdir) != exported_numerics(again):
        mismatched.append("opt_hemolysis_smoke.json (optimize)")
    sec = time.perf_counter() - t0
    report(12, not mismatched, sec, math.inf,
           f"{len(SHIPPED)} configs x (rerun, 3 threads) + smoke optimization at 2 threads; "
           f"mismatches={mismatched}", capsys)


if __name__ == "__main__":
    raise SystemExit(pytest.main(["-s", "-q", __file__]))
