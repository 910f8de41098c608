"""Smoke test for the critcascade_py extension module."""
import json
import math
import tempfile

import critcascade_py as cc

law = cc.OffspringLaw.lattice()
diag = law.diagnostics()
assert abs(diag["m0"] - 1.0) < 1e-9 and abs(diag["m1"]) < 1e-9, diag
assert abs(law.rho(2.0) - 2.0) < 1e-9

walk = law.walk()
r = walk.renewal(reps=4096, seed=3)
assert r.method == "exact-lattice", r.method
d = law.lattice_span
assert abs(r(0.0) - 1.0) < 1e-12 and abs(r(2 * d) - 3.0) < 1e-9

t = cc.Tree.grow(law, 8, seed=11)
assert t.populations()[-1] == 2 ** 8
w = t.additive(8)
assert w > 0 and math.isfinite(t.derivative(8))

paths = walk.conditioned_paths(r, 0.0, 50, 20, seed=5)
assert len(paths) == 20 and all(len(p) == 51 and min(p) >= -1e-9 for p in paths)

spines = cc.sample_spines(law, r, 4.0, 40, 3, seed=2, side_depth=8)
masses = spines[0].neg_log_masses(20)
assert len(masses) == 21 and all(math.isfinite(m) for m in masses)

assert abs(cc.psi_value("iterated", 2, math.exp(math.e)) - 1 / math.e) < 1e-12
assert cc.integral_test("perturbed", 1, 1.0) == "convergent"
assert cc.integral_test("iterated", 1) == "divergent"

with tempfile.TemporaryDirectory() as out:
    cfg = '[experiment]\nkind = "grow"\nseed = 4\nreplicas = 3\n[model]\nkind = "gaussian"\n[params]\ndepth = 6\n'
    manifest = json.loads(cc.run_experiment(cfg, out))
    assert manifest["complete"] and any(o["path"] == "generations.csv" for o in manifest["outputs"])

print("smoke test passed")
