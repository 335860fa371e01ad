import numpy as np
import pytest
import torch

from sgsasr.config import DecoderConfig, EncoderConfig, ModelConfig


def toy_config(width=8, out_dim=16, blocks=1, **ablation) -> ModelConfig:
    cfg = ModelConfig(
        encoder=EncoderConfig(base_width=width, enc_blocks=(blocks,) * 4, middle_blocks=blocks,
                              dec_blocks=(blocks,) * 4, out_dim=out_dim),
        decoder=DecoderConfig(latent_hidden=32),
    )
    for k, v in ablation.items():
        setattr(cfg.ablation, k, v)
    return cfg.validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, ok: bool, detail: str = "") -> None:
    """Logs one criterion result; the lines are echoed in the terminal summary."""
    line = f"[{number:>2}] {name}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def finite_difference_check(model, loss_fn, n=10, eps=1e-3, seed=0, max_draws=200):
    """Central-difference check of ``loss_fn``'s gradient on ``n`` random parameter entries.

    A draw is kept only if no ReLU changes sign between theta - eps and theta + eps:
    across a kink the difference quotient is not a derivative estimate at all.
    Returns (kept [(name, analytic, numeric, rel)], rejected draw count).
    """
    masks = []
    relu = torch.relu

    def recording_relu(x, *args, **kwargs):
        masks.append(x > 0)
        return relu(x, *args, **kwargs)

    def run():
        masks.clear()
        value = loss_fn()
        return value, list(masks)

    torch.relu = recording_relu
    try:
        model.zero_grad()
        value, base = run()
        value.backward()
        named = [(name, p) for name, p in model.named_parameters() if p.grad is not None]
        gen = np.random.default_rng(seed)
        kept, rejected = [], 0
        while len(kept) < n and rejected < max_draws:
            name, p = named[int(gen.integers(len(named)))]
            i = int(gen.integers(p.numel()))
            analytic = p.grad.view(-1)[i].item()
            with torch.no_grad():
                orig = p.view(-1)[i].item()
                p.view(-1)[i] = orig + eps
                up, m_up = run()
                p.view(-1)[i] = orig - eps
                down, m_down = run()
                p.view(-1)[i] = orig
            if any(not torch.equal(a, b) for m in (m_up, m_down) for a, b in zip(m, base)):
                rejected += 1
                continue
            numeric = (up.item() - down.item()) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            kept.append((f"{name}[{i}]", analytic, numeric, rel))
        return kept, rejected
    finally:
        torch.relu = relu
