"""Reference eigenvalue against one splitting stage.

Integrates the single-eigenvalue reference potential and the first split
stage on the default profile, then prints the normalised norms and the
point-mass ratio.  Splitting one eigenvalue into two doubles each norm,
so each mass is about half the reference mass.

    python demos/norm_doubling.py
"""

from cantor_prufer.construction import builtin_profile, run_construction, run_wvn

cfg = builtin_profile("default")
_, ref = run_wvn(cfg)
state, reports = run_construction(cfg, max_stage=1)

mu_ref = ref.energies[0]["point_mass"]
print(f"reference  k = {cfg.k0:.12g}  f ||R||^2 = {ref.check('pair0.lo.f_norm').measured:.6f}  "
      f"mass = {mu_ref:.6g}")
for rec in reports[0].energies:
    print(f"split      k = {rec['energy']:.12g}  f ||R||^2 / 2 = {rec['norm_vs_prediction']:.6f}  "
          f"mass ratio = {rec['point_mass'] / mu_ref:.6f}  R^2 at flip = {rec['r2_at_flip']:.6f}")
print("report:", "PASS" if reports[0].passed else "FAIL")
