"""Tour of the Gaussian embedding geometry.

Walks through the four similarity measures on 1-D examples where everything
can be checked by hand or by direct numerical integration, then shows the
identities and bounds that hold in higher dimensions.

Run:  python demos/01_gaussian_geometry.py
"""

import numpy as np

from probalign import (
    GaussianEmbedding,
    bhattacharyya_distance,
    cosine_mu,
    csd,
    hellinger_similarity,
    hellinger_sq,
    sample,
)

rng = np.random.default_rng(0)


def gaussian(mu, var):
    return GaussianEmbedding(np.atleast_1d(float(mu)), np.log(np.atleast_1d(float(var))))


print("Two unit-variance Gaussians one mean-unit apart:")
a, b = gaussian(0, 1), gaussian(1, 1)
print(f"  squared Hellinger distance  H^2 = {hellinger_sq(a, b):.6f}")
print(f"  similarity            1 - sqrt = {hellinger_similarity(a, b):.6f}")
print(f"  Bhattacharyya distance    D_B = {bhattacharyya_distance(a, b):.6f}")
print(f"  expected squared distance     = {csd(a, b):.6f}")

# The closed form can be confirmed by integrating the densities directly.
xs = np.linspace(-12, 13, 200_001)
p = np.exp(-0.5 * xs**2) / np.sqrt(2 * np.pi)
q = np.exp(-0.5 * (xs - 1) ** 2) / np.sqrt(2 * np.pi)
h2_numeric = 0.5 * np.trapezoid((np.sqrt(p) - np.sqrt(q)) ** 2, xs)
print(f"  quadrature check of H^2       = {h2_numeric:.6f}")

print("\nFor Gaussians the two distances are tied together: H^2 = 1 - exp(-D_B).")
for d in (1, 8, 64):
    x = GaussianEmbedding(rng.normal(0, 1, d), rng.uniform(-2, 2, d))
    y = GaussianEmbedding(rng.normal(0, 1, d), rng.uniform(-2, 2, d))
    gap = abs(hellinger_sq(x, y) - (1 - np.exp(-bhattacharyya_distance(x, y))))
    print(f"  D={d:3d}: identity gap {gap:.2e}")

print("\nBoundedness is what makes the Hellinger similarity trainable:")
for gap in (0.0, 1.0, 3.0, 10.0, 100.0):
    print(f"  |mu_a - mu_b| = {gap:5.1f}  ->  PS = {hellinger_similarity(gaussian(0, 1), gaussian(gap, 1)):.6f}")
print("while the expected squared distance grows without bound:")
for gap in (1.0, 10.0, 100.0):
    print(f"  |mu_a - mu_b| = {gap:5.1f}  ->  csd = {csd(gaussian(0, 1), gaussian(gap, 1)):.1f}")

print("\nCosine-on-means ignores the variances entirely:")
wide = GaussianEmbedding(np.array([1.0, 1.0]), np.log([9.0, 9.0]))
narrow = GaussianEmbedding(np.array([1.0, 1.0]), np.log([0.01, 0.01]))
other = GaussianEmbedding(np.array([2.0, 0.5]), np.zeros(2))
print(f"  cosine(wide, other)   = {cosine_mu(wide, other):.6f}")
print(f"  cosine(narrow, other) = {cosine_mu(narrow, other):.6f}   (identical)")

print("\nReparameterized sampling recovers the distribution's moments:")
e = GaussianEmbedding(np.array([0.5, -1.0, 2.0]), np.log([0.5, 2.0, 1.0]))
z = sample(e, 100_000, rng)
print(f"  sample mean     {np.round(z.mean(axis=0), 3)}  vs mu  {e.mu}")
print(f"  sample variance {np.round(z.var(axis=0), 3)}  vs var {np.round(np.exp(e.log_var), 3)}")
