"""Walk through the softmax log-normalizer and its Hessian on small families.

Run:  python demos/01_softmax_geometry.py
"""

import numpy as np

from bregman_lens import geometry as geo

# Four orthonormal token embeddings at lam = 0: every token equally likely.
fam = geo.SoftmaxFamily(np.eye(4))
s = geo.summarize(geo.hessian(fam, np.zeros(4), 4))
print("uniform over 4 orthonormal tokens")
print(f"  eigenvalues      {np.round(s.eigenvalues, 6)}")
print(f"  effective rank   {s.effective_rank:.6f}   (one direction is lost to the sum-to-one constraint)")
print(f"  trace            {s.trace:.6f}")
print(f"  condition number {s.condition_number:.6f}   (over the retained spectrum)")

# Sharpen the distribution and watch the metric collapse.
rng = np.random.default_rng(0)
fam = geo.SoftmaxFamily(rng.normal(size=(64, 8)))
direction = rng.normal(size=8)
direction /= np.linalg.norm(direction)
print("\nsharpening a random V=64, d=8 family along one direction")
print(f"  {'scale':>6} {'max p':>8} {'erank':>8} {'trace':>10} {'kappa':>12}")
for scale in (0.0, 1.0, 2.0, 4.0, 8.0):
    lam = scale * direction
    p = geo.probs(fam, lam)
    s = geo.summarize(geo.hessian(fam, lam))
    print(f"  {scale:6.1f} {p.max():8.4f} {s.effective_rank:8.3f} {s.trace:10.4g} {s.condition_number:12.4g}")

# The Hessian is the Jacobian of the dual map lam -> eta = E[gamma].
lam = rng.normal(size=8) * 0.5
u = rng.normal(size=8)
u /= np.linalg.norm(u)
H = geo.hessian(fam, lam).matrix
eta0 = geo.dual_coords(fam, lam)
print("\nfirst-order dual map: |eta(lam + eps u) - eta(lam) - eps H u| / eps^2")
for eps in (1e-1, 1e-2, 1e-3, 1e-4):
    r = np.linalg.norm(geo.dual_coords(fam, lam + eps * u) - eta0 - eps * H @ u) / eps**2
    print(f"  eps={eps:7.0e}  {r:.6f}")
