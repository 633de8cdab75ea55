"""Shared test utilities: finite-difference gradient oracles."""

import numpy as np

from hatfusion import tensor as T


def fd_gradients(loss_fn, tensors, step=1e-4):
    """Central finite differences of a scalar loss w.r.t. each tensor.

    ``loss_fn`` must re-evaluate the loss from the tensors' current values
    (no tape needed) and return a float.  Perturbs every coordinate.
    """
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * step)
        grads.append(g.reshape(t.data.shape))
    return grads


def relative_grad_error(analytic, numeric):
    """Norm-relative error between analytic and finite-difference gradients."""
    a = np.concatenate([np.asarray(g).reshape(-1) for g in analytic])
    n = np.concatenate([np.asarray(g).reshape(-1) for g in numeric])
    denom = max(np.linalg.norm(n), np.linalg.norm(a), 1e-10)
    return np.linalg.norm(a - n) / denom


def check_gradients(build_loss, params, step=1e-4, rtol=1e-4):
    """Compare tape gradients of ``build_loss`` against central differences.

    ``build_loss`` constructs the loss Tensor from current parameter values;
    it is called once under a tape for the analytic side and repeatedly
    without one for the numeric side.  Returns the relative error.
    """
    tensors = list(params.tensors()) if isinstance(params, T.ParamSet) else list(params)
    with T.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    for t in tensors:
        t.grad = None
    numeric = fd_gradients(lambda: float(build_loss().data), tensors, step=step)
    err = relative_grad_error(analytic, numeric)
    assert err <= rtol, f"gradient mismatch: relative error {err:.3e} > {rtol}"
    return err


def weighted_scalar(out, weights):
    """Reduce a tensor to a scalar via a fixed random weighting.

    Used to exercise every output element of a primitive in one backward.
    """
    t = T.multiply(out, T.constant(weights))
    while t.data.ndim > 0:
        t = T.matmul(t, T.constant(np.ones(t.shape[-1])))
    return t
