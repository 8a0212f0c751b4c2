import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def naive_conv(x, w, b=None, stride=1, dilation=1, padding=0):
    """Direct six-loop convolution; independent of the im2col kernels."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b_ in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u * dilation - padding
                                q = j * stride + v * dilation - padding
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += float(x[b_, ic, r, q]) * float(w[oc, ic, u, v])
                    out[b_, oc, i, j] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw):
    from layercascade.backbone import BackboneConfig

    base = dict(class_count=3, stem=[[4, 3, 2]], stage_blocks=[1, 1, 1], stage_channels=[4, 6, 8],
                stage_dilations=[1, 2, 1], head_channels=4, rho=0.9, seed=0, dtype="float64")
    base.update(kw)
    return BackboneConfig(**base)


def randomize_heads(model, rng, scale=1.0):
    """Make head outputs large enough that some pixels become confident."""
    for stage in model.stages:
        for conv in stage.head.conv_layers():
            conv.weight.data = (rng.standard_normal(conv.weight.data.shape) * scale).astype(conv.weight.data.dtype)


ACCEPTANCE = {}


def record(number, passed, detail):
    """Store one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
