import os

import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=(HealthCheck.too_slow,))
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from resswitch.model import build_model  # noqa: E402


@pytest.fixture
def tiny():
    """2-block residual net over {32, 24, 16}, 10 classes."""
    return build_model("tiny", [32, 24, 16], 10, seed=0)


@pytest.fixture
def trained_tiny(tiny):
    """Tiny model whose banks hold distinct, non-trivial values."""
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for m in tiny.bn_layers.values():
            for slot in m.banks:
                slot.weight.copy_(1 + 0.3 * torch.randn(slot.weight.shape, generator=g))
                slot.bias.copy_(0.2 * torch.randn(slot.bias.shape, generator=g))
                slot.running_mean.copy_(torch.randn(slot.running_mean.shape, generator=g))
                slot.running_var.copy_(0.5 + torch.rand(slot.running_var.shape, generator=g))
        tiny.raw_scores.copy_(torch.tensor([0.7, -0.1, 0.3]))
    return tiny.eval()


# acceptance verdicts, printed once at the end of the session
_VERDICTS = []


@pytest.fixture
def verdict(request):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""
    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        _VERDICTS.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
