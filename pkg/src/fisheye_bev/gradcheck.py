"""Central finite-difference checks of the analytic gradients.

Three suites: the splatter (weights, means, covariances, features), the
weighted cross-entropy, and the whole depth-logit -> loss chain on a tiny
rendered scene. ``perturb`` scales every analytic gradient by ``1 + perturb``
before comparison; it exists so callers can confirm a broken gradient is
caught.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .splat import BevGridSpec, Gaussians2, splat_backward, splat_forward
from .training import BevLabels, ClassWeights, weighted_ce

SPLAT_GROUPS = ("weights", "means", "covs", "features")


def rel_err(analytic, numeric) -> np.ndarray:
    """|a - n| / max(|a|, |n|), zero where both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.abs(a), np.abs(n))
    return np.where(den > 0, np.abs(a - n) / np.where(den > 0, den, 1.0), 0.0)


def _vec_err(analytic, numeric) -> np.ndarray:
    """Per-row norm-wise relative error for (N, k) gradient blocks."""
    a = np.asarray(analytic, dtype=np.float64).reshape(len(analytic), -1)
    n = np.asarray(numeric, dtype=np.float64).reshape(len(numeric), -1)
    den = np.maximum(np.linalg.norm(a, axis=1), np.linalg.norm(n, axis=1))
    num = np.linalg.norm(a - n, axis=1)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def random_gaussians(rng, count, spec: BevGridSpec, margin=2.0, var_range=(0.1, 2.0)) -> Gaussians2:
    """Ground Gaussians with random orientation and principal variances in ``var_range`` (m^2)."""
    x = rng.uniform(spec.x_range[0] + margin, spec.x_range[1] - margin, count)
    y = rng.uniform(spec.y_range[0] + margin, spec.y_range[1] - margin, count)
    ang = rng.uniform(0, np.pi, count)
    lam = rng.uniform(*var_range, size=(count, 2))
    c, s = np.cos(ang), np.sin(ang)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], axis=1)
    covs = np.einsum("nij,nj,nkj->nik", rot, lam, rot)
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    return Gaussians2(np.stack([x, y], 1), covs, rng.uniform(0.1, 2.0, count),
                      rng.normal(size=(count, spec.channels)))


def splat_fd(gaussians: Gaussians2, spec: BevGridSpec, grad_f, grad_m, trunc_sigma=8.0, h=1e-4, threads=None):
    """Central differences of L = <grad_f, F> + <grad_m, M> for every Gaussian parameter.

    The off-diagonal covariance entry is perturbed symmetrically, so its
    difference estimates dL/dS01 + dL/dS10.
    """

    def loss(g):
        r = splat_forward(g, spec, trunc_sigma, threads=threads)
        return float(np.sum(grad_f * r.features) + np.sum(grad_m * r.mass))

    def with_(means=None, covs=None, weights=None, feats=None):
        return Gaussians2(gaussians.means if means is None else means,
                          gaussians.covs if covs is None else covs,
                          gaussians.weights if weights is None else weights,
                          gaussians.features if feats is None else feats)

    n = len(gaussians)
    out = {"weights": np.zeros(n), "means": np.zeros((n, 2)), "covs": np.zeros((n, 3)),
           "features": np.zeros(gaussians.features.shape)}
    for g in range(n):
        for sgn in (1.0, -1.0):
            w = gaussians.weights.copy()
            w[g] += sgn * h
            out["weights"][g] += sgn * loss(with_(weights=w))
            for k in range(2):
                m = gaussians.means.copy()
                m[g, k] += sgn * h
                out["means"][g, k] += sgn * loss(with_(means=m))
            for k, (i, j) in enumerate(((0, 0), (0, 1), (1, 1))):
                cv = gaussians.covs.copy()
                cv[g, i, j] += sgn * h
                if i != j:
                    cv[g, j, i] += sgn * h
                out["covs"][g, k] += sgn * loss(with_(covs=cv))
            for k in range(gaussians.features.shape[1]):
                f = gaussians.features.copy()
                f[g, k] += sgn * h
                out["features"][g, k] += sgn * loss(with_(feats=f))
    return {k: v / (2 * h) for k, v in out.items()}


def splat_gradcheck(seed=0, count=100, h=1e-4, trunc_sigma=8.0, spec=None, perturb=0.0, threads=None) -> dict:
    """Worst per-Gaussian relative error for each parameter group."""
    rng = np.random.default_rng(seed)
    spec = spec or BevGridSpec()
    g = random_gaussians(rng, count, spec)
    grad_f = rng.normal(size=spec.shape + (spec.channels,))
    grad_m = rng.normal(size=spec.shape)
    an = splat_backward(grad_f, grad_m, g, spec, trunc_sigma, threads=threads)
    fd = splat_fd(g, spec, grad_f, grad_m, trunc_sigma, h, threads)
    scale = 1.0 + perturb
    cov_an = np.stack([an.covs[:, 0, 0], an.covs[:, 0, 1] + an.covs[:, 1, 0], an.covs[:, 1, 1]], axis=1)
    return {
        "weights": float(np.max(_vec_err(scale * an.weights[:, None], fd["weights"][:, None]))),
        "means": float(np.max(_vec_err(scale * an.means, fd["means"]))),
        "covs": float(np.max(_vec_err(scale * cov_an, fd["covs"]))),
        "features": float(np.max(_vec_err(scale * an.features, fd["features"]))),
    }


def ce_gradcheck(seed=0, shape=(4, 4, 3), h=1e-5, perturb=0.0) -> float:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=shape) * 2
    ids = rng.integers(0, shape[-1], size=shape[:2])
    ignore = rng.uniform(size=shape[:2]) < 0.2
    labels = BevLabels.from_class_ids(ids, shape[-1], ignore)
    weights = ClassWeights(tuple(rng.uniform(0.5, 3.0, shape[-1])))
    _, grad = weighted_ce(logits, labels, weights)
    fd = np.zeros(shape)
    for idx in np.ndindex(*shape):
        z = logits.copy()
        z[idx] += h
        lp, _ = weighted_ce(z, labels, weights)
        z[idx] -= 2 * h
        lm, _ = weighted_ce(z, labels, weights)
        fd[idx] = (lp - lm) / (2 * h)
    return float(np.max(rel_err((1 + perturb) * grad, fd)))


def e2e_gradcheck(seed=0, image_size=(16, 16), samples=24, h=1e-4, perturb=0.0, threads=None) -> float:
    """Depth-logit gradients through lift, splat and loss on a rendered scene.

    Checks ``samples`` entries: half with the largest analytic magnitude, half
    drawn uniformly among entries with a non-zero gradient.
    """
    from .synth import default_rig, gen_scene, make_bundle
    from .lut import build_lut
    from .toy import ToyConfig, build_cache, scene_loss

    rng = np.random.default_rng(seed)
    cfg = ToyConfig(threads=threads)
    cams = default_rig(image_size)
    luts = [build_lut(c.intrinsics, 1, threads) for c in cams]
    bundle = make_bundle(gen_scene(seed), cams, luts, cfg.grid, threads)
    cache = build_cache(bundle, cfg)
    P, D, C = cache.codes.size, cfg.bins.count, cfg.grid.channels
    a = rng.normal(size=(P, D))
    f = rng.normal(size=(P, C))
    bias = rng.normal(size=C) * 0.1
    weights = ClassWeights((1.0, 2.0, 5.0))
    res = scene_loss(cache, a, f, bias, weights, cfg)
    grad = res.grad_depth_logits.ravel()
    nz = np.flatnonzero(grad)
    top = nz[np.argsort(-np.abs(grad[nz]), kind="stable")[: samples // 2]]
    rest = np.setdiff1d(nz, top)
    pick = np.concatenate([top, rng.choice(rest, size=min(samples - top.size, rest.size), replace=False)])
    fd = np.zeros(pick.size)
    for k, idx in enumerate(pick):
        p, d = divmod(int(idx), D)
        z = a.copy()
        z[p, d] += h
        lp = scene_loss(cache, z, f, bias, weights, cfg, backward=False).loss
        z[p, d] -= 2 * h
        lm = scene_loss(cache, z, f, bias, weights, cfg, backward=False).loss
        fd[k] = (lp - lm) / (2 * h)
    return float(np.max(rel_err((1 + perturb) * grad[pick], fd)))


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.errors[k] < self.tolerances[k] for k in self.errors)

    def rows(self):
        for k, err in self.errors.items():
            yield k, err, self.tolerances[k], err < self.tolerances[k]


def run_gradcheck(seed=0, count=100, tol=1e-4, cov_tol=1e-3, ce_tol=1e-6, e2e_tol=1e-3,
                  perturb=0.0, threads=None) -> GradcheckReport:
    rep = GradcheckReport()
    for k, err in splat_gradcheck(seed, count, perturb=perturb, threads=threads).items():
        rep.errors[f"splat.{k}"] = err
        rep.tolerances[f"splat.{k}"] = cov_tol if k == "covs" else tol
    rep.errors["weighted_ce"] = ce_gradcheck(seed, perturb=perturb)
    rep.tolerances["weighted_ce"] = ce_tol
    rep.errors["end_to_end"] = e2e_gradcheck(seed, perturb=perturb, threads=threads)
    rep.tolerances["end_to_end"] = e2e_tol
    return rep
