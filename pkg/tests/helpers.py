import numpy as np


def rel_err(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, np.float64)
    numeric = np.asarray(numeric, np.float64)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), floor))


def central_diff(f, x, h=1e-5):
    """Gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation of one (H, W, C) image."""
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    k = w.shape[0]
    ho = (xp.shape[0] - k) // stride + 1
    wo = (xp.shape[1] - k) // stride + 1
    out = np.zeros((ho, wo, w.shape[3]))
    for i in range(ho):
        for j in range(wo):
            for o in range(w.shape[3]):
                acc = b[o]
                for a in range(k):
                    for c in range(k):
                        for ci in range(w.shape[2]):
                            acc += xp[i * stride + a, j * stride + c, ci] * w[a, c, ci, o]
                out[i, j, o] = acc
    return out


def transposed_conv_oracle(x, w, b, stride, pad):
    """Direct scatter definition of the transposed convolution."""
    h, wd, _ = x.shape
    k = w.shape[0]
    full = np.zeros(((h - 1) * stride + k, (wd - 1) * stride + k, w.shape[3]))
    for i in range(h):
        for j in range(wd):
            for a in range(k):
                for c in range(k):
                    full[i * stride + a, j * stride + c] += x[i, j] @ w[a, c]
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wd - 1) * stride - 2 * pad + k
    return full[pad : pad + ho, pad : pad + wo] + b


ACCEPTANCE_LINES: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
