import numpy as np
import pytest
import torch

from textcape.synthetic import SyntheticSpec, synth_generate

torch.set_num_threads(1)


def finite_difference_check(params, loss_fn, eps=1e-6):
    """Worst per-tensor relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||).

    Runs in float64; ``loss_fn`` must be a deterministic scalar function of ``params``.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.detach().clone()
        numeric = torch.zeros_like(p)
        flat, nflat = p.data.view(-1), numeric.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                hi = loss_fn().item()
            flat[i] = orig - eps
            with torch.no_grad():
                lo = loss_fn().item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
        denom = max(analytic.norm().item(), numeric.norm().item())
        if denom < 1e-8:  # structurally zero gradient, e.g. key bias under softmax
            continue
        worst = max(worst, (analytic - numeric).norm().item() / denom)
    return worst


@pytest.fixture(scope="session")
def tiny_dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_synth")
    spec = SyntheticSpec(seed=3, n_categories=5, samples_per_category=4, n_val=1, n_test=1)
    synth_generate(spec, root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE_RESULTS: list[str] = []


def record_verdict(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
