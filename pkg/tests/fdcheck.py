"""Central finite-difference gradient checks in float64."""
import torch

STEP = 1e-6
# Gradients that vanish identically (e.g. a key bias under softmax shift
# invariance) leave only rounding noise on both sides; below this norm both
# are treated as the zero gradient.
ZERO = 1e-6


def numeric_grad(fn, tensor: torch.Tensor, step: float = STEP) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``tensor`` (modified in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + step
            hi = float(fn())
            flat[i] = old - step
            lo = float(fn())
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(float(a.norm()), float(b.norm()))
    if scale < ZERO:
        return 0.0
    return float((a - b).norm()) / scale


def check_gradients(fn, tensors: dict) -> dict[str, float]:
    """Relative error between autograd and finite differences, per named tensor."""
    for t in tensors.values():
        t.grad = None
    fn().backward()
    errors = {}
    for name, t in tensors.items():
        analytic = torch.zeros_like(t) if t.grad is None else t.grad.detach().clone()
        errors[name] = relative_error(analytic, numeric_grad(fn, t))
    return errors
