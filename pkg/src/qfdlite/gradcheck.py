"""Central finite-difference oracle for autodiff gradients.

The checked function is rebuilt and re-run for every probe, forward-only, so
the oracle never touches the tape machinery it is checking. Checks run the
engine in float64: at eps=1e-3 a float32 forward has roundoff of the same
order as the tolerance being verified.

Central differences are only defined where the function is locally smooth.
A probe whose +/-eps evaluations straddle a relu kink yields an estimate of
nothing; each probe is therefore computed at two step sizes (eps and eps/2),
and probes where the two estimates disagree are discarded and re-drawn.
For smooth points the two estimates agree to O(eps^2).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor

# entries whose gradient magnitude is below this floor are compared
# absolutely; pure relative error on near-zero gradients only measures noise
DENOM_FLOOR = 1e-3

# two-scale agreement threshold for declaring a probe locally smooth;
# honest truncation differs by O(eps^2) ~ 1e-6 relative, a clipped kink by >>1e-3
SMOOTH_RTOL = 3e-4


def relative_errors(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return np.abs(analytic - numeric) / denom


def _central(build_loss, flat, idx, eps):
    orig = flat[idx]
    flat[idx] = orig + eps
    hi = build_loss().item()
    flat[idx] = orig - eps
    lo = build_loss().item()
    flat[idx] = orig
    return (hi - lo) / (2.0 * eps)


def numeric_grad(build_loss, tensor: Tensor, indices, eps: float = 1e-3) -> np.ndarray:
    """Central differences of build_loss() w.r.t. tensor.values at flat indices."""
    flat = tensor.values.reshape(-1)
    return np.array([_central(build_loss, flat, idx, eps) for idx in indices],
                    dtype=np.float64)


def _smooth_numeric_grad(build_loss, tensor, candidates, want, eps):
    """FD values at up to `want` smooth probe points drawn from candidates."""
    flat = tensor.values.reshape(-1)
    picked, values = [], []
    for idx in candidates:
        fd1 = _central(build_loss, flat, idx, eps)
        fd2 = _central(build_loss, flat, idx, eps / 2.0)
        if relative_errors(fd1, fd2) > SMOOTH_RTOL:
            continue  # straddles a kink; the estimator is undefined here
        picked.append(idx)
        values.append(fd1)
        if len(picked) >= want:
            break
    return np.array(picked, dtype=int), np.array(values, dtype=np.float64)


def check_gradients(build_loss, tensors, eps: float = 1e-3, max_probes: int = 0,
                    rng: np.random.Generator | None = None):
    """Compare tape gradients of build_loss() against central differences.

    tensors: list of (name, Tensor) to probe. max_probes > 0 samples that
    many entries per tensor (seeded); 0 probes every entry. Returns
    (max_rel_err, per_tensor errors, total probe count).
    """
    with Tape() as tape:
        loss = build_loss()
    for _, t in tensors:
        t.zero_grad()
    tape.backward(loss)

    if rng is None:
        rng = np.random.default_rng(0)
    per_tensor = {}
    worst = 0.0
    total = 0
    for name, t in tensors:
        if t.grad is None:
            raise AssertionError(f"no gradient reached tensor {name!r}")
        n = t.values.size
        want = min(max_probes, n) if max_probes else n
        candidates = rng.permutation(n)
        indices, numeric = _smooth_numeric_grad(build_loss, t, candidates, want, eps)
        if len(indices) == 0:
            raise AssertionError(f"no smooth probe points found in tensor {name!r}")
        analytic = t.grad.reshape(-1)[indices].astype(np.float64)
        err = float(relative_errors(analytic, numeric).max())
        per_tensor[name] = err
        worst = max(worst, err)
        total += len(indices)
    return worst, per_tensor, total
